#pragma once

// Analytic-versus-numeric verification drivers shared by the `gradcheck`
// subcommand and the release gate: a finite-difference sweep over the whole
// gate -> patch -> pool -> fusion -> inject -> masked-NLL pipeline with
// anchor-set stability guards, closed-form Jacobian comparisons, a
// row-normalization sweep, and encoder equivariance probes.

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "atompatch/chem/atom_graph.hpp"
#include "atompatch/core/gradcheck.hpp"
#include "atompatch/core/rng.hpp"
#include "atompatch/model/adapter.hpp"
#include "atompatch/model/encoder.hpp"
#include "atompatch/model/lmtoy.hpp"
#include "atompatch/model/patcher.hpp"

namespace atompatch {

namespace detail {

/// Point-cloud graph: coordinates only, no bonds — everything downstream of
/// the encoder ignores edges.
inline AtomGraph cloud_graph(std::size_t n, Rng& rng) {
  AtomGraph g;
  for (std::size_t i = 0; i < n; ++i) {
    Atom a;
    a.name = "ALIPH";
    a.residue = "MOL";
    g.atoms.push_back(a);
    g.coords.push_back({rng.uniform(-3.0, 3.0), rng.uniform(-3.0, 3.0), rng.uniform(-3.0, 3.0)});
  }
  return g;
}

}  // namespace detail

/// End-to-end derivative check on one random two-graph instance. The loss is
/// the masked NLL of a two-placeholder training sequence whose geometry rows
/// come from the full patching + fusion path; leaves cover node features,
/// positions, and one weight matrix from every stage. Anchor sets are hashed
/// after every evaluation so a selection flip at +/-h voids the comparison
/// instead of poisoning it.
inline GradCheckReport pipeline_gradcheck(std::uint64_t seed, double h = 1e-4) {
  Rng rg(seed);
  const std::size_t d_enc = 8;
  const std::size_t d_llm = 16;
  const std::size_t n1 = 5 + rg.index(8);  // 5..12 atoms
  const std::size_t n2 = 5 + rg.index(8);
  AtomGraph g1 = detail::cloud_graph(n1, rg);
  AtomGraph g2 = detail::cloud_graph(n2, rg);
  BatchedGraph b = batch_graphs({g1, g2});

  DiffArray x(Shape{b.size(), d_enc}, rg.normal_vec(b.size() * d_enc, 0.0, 1.0), true);
  DiffArray p = b.coord_matrix(true);

  PatchGate gate(d_enc, d_llm, 6, rg);
  PatcherConfig pcfg;
  pcfg.rho = 0.5;
  pcfg.k_max = 4;
  pcfg.gate_hidden = 6;

  FusionConfig fcfg;
  fcfg.d_enc = d_enc;
  fcfg.d_model = 16;
  fcfg.d_llm = d_llm;
  fcfg.heads = 2;
  fcfg.blocks = 1;
  fcfg.ffn_dim = 32;
  fcfg.dropout = 0.0;
  FusionStack fusion(fcfg, rg);

  ToyDecoderConfig dcfg;
  dcfg.vocab = 64;
  dcfg.d_model = d_llm;
  dcfg.heads = 2;
  dcfg.blocks = 1;
  dcfg.ffn_dim = 32;
  dcfg.max_len = 64;
  dcfg.dropout = 0.0;
  ToyDecoder dec(dcfg, rg);

  ToyVocab vocab;
  const std::vector<int> instr = vocab.tokenize("compare <geom> against <geom> in detail", true);
  const std::vector<int> answer = vocab.tokenize("the two shapes differ", true);
  const std::vector<std::vector<int>> pool = {
      vocab.tokenize("first check the geometry then answer", true)};
  const AugmentedSample aug = build_augmented_target(instr, answer, pool, seed);

  std::vector<std::vector<std::size_t>> last_anchors;
  auto objective = [&]() {
    ModalitySequence seq = build_training_sequence(dec, instr, aug);
    DiffArray z1 = instruction_summary(seq);
    DiffArray z = vconcat({z1, z1});  // both graphs share the instruction
    PatchOutput patch = run_patching(b, x, p, z, gate, pcfg);
    last_anchors = patch.anchors;
    RetrievedTokens ret = retrieve_geometry(patch, x, b, fusion);
    InjectionResult inj = inject_tokens(seq, ret);
    return sequence_loss(dec, inj.seq).loss;
  };

  GradCheckOptions opts;
  opts.h = h;
  opts.discrete_signature = [&]() {
    std::uint64_t sig = 0;
    for (const auto& anchors : last_anchors) {
      sig = fnv1a64(anchors.data(), anchors.size() * sizeof(std::size_t), sig + 1);
    }
    return sig;
  };

  return finite_diff_check(objective,
                           {{"node_features", x},
                            {"positions", p},
                            {"gate.l0.w", gate.mlp.layers[0].w},
                            {"gate.l1.w", gate.mlp.layers[1].w},
                            {"fusion.proj_p.w", fusion.proj_p.w},
                            {"fusion.cross.wq.w", fusion.blocks[0].cross_attn.wq.w},
                            {"fusion.proj_out.w", fusion.proj_out.w},
                            {"decoder.wq.w", dec.dblocks[0].wq.w}},
                           opts);
}

/// Row-softmax Jacobian s_i (delta_ij - s_j) against central differences on a
/// random 5x3 instance, including the zero blocks across rows.
inline double softmax_jacobian_max_rel_err(std::uint64_t seed, double h = 1e-5) {
  Rng rg(seed);
  const std::size_t rows = 5, cols = 3;
  std::vector<double> v = rg.normal_vec(rows * cols, 0.0, 1.0);
  auto soft = [&](const std::vector<double>& data) {
    return softmax(DiffArray(Shape{rows, cols}, data, false)).data();
  };
  const std::vector<double> s = soft(v);

  double worst = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < cols; ++j) {
      std::vector<double> hi = v, lo = v;
      hi[r * cols + j] += h;
      lo[r * cols + j] -= h;
      const std::vector<double> s_hi = soft(hi), s_lo = soft(lo);
      for (std::size_t q = 0; q < rows; ++q) {
        for (std::size_t i = 0; i < cols; ++i) {
          const double numeric = (s_hi[q * cols + i] - s_lo[q * cols + i]) / (2.0 * h);
          double analytic = 0.0;
          if (q == r) {
            analytic = s[r * cols + i] * ((i == j ? 1.0 : 0.0) - s[r * cols + j]);
          }
          const double rel = std::fabs(analytic - numeric) / std::max(1.0, std::fabs(numeric));
          worst = std::max(worst, rel);
        }
      }
    }
  }
  return worst;
}

/// Closed-form pooling derivative d t_a / d W_{i,a} = (X_i - t_a) / m_a
/// against central differences through the pooling code itself, including the
/// zero cross-anchor blocks.
inline double pooling_gradient_max_rel_err(std::uint64_t seed, double h = 1e-6) {
  Rng rg(seed);
  const std::size_t n = 5, k = 3, d = 4;
  const double eps = 1e-8;
  std::vector<double> w = rg.uniform_vec(n * k, 0.05, 1.0);
  const std::vector<double> xv = rg.normal_vec(n * d, 0.0, 1.0);
  const DiffArray x(Shape{n, d}, xv, false);

  auto pool_vals = [&](const std::vector<double>& wdata) {
    PatchPool pp = pool_patches(DiffArray(Shape{n, k}, wdata, false), x, eps);
    return std::make_pair(pp.tokens.data(), pp.mass.data());
  };
  const auto [t, m] = pool_vals(w);

  double worst = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t a = 0; a < k; ++a) {
      std::vector<double> hi = w, lo = w;
      hi[i * k + a] += h;
      lo[i * k + a] -= h;
      const auto t_hi = pool_vals(hi).first, t_lo = pool_vals(lo).first;
      for (std::size_t b2 = 0; b2 < k; ++b2) {
        for (std::size_t f = 0; f < d; ++f) {
          const double numeric = (t_hi[b2 * d + f] - t_lo[b2 * d + f]) / (2.0 * h);
          const double analytic = (b2 == a) ? (xv[i * d + f] - t[a * d + f]) / m[a] : 0.0;
          const double rel = std::fabs(analytic - numeric) / std::max(1.0, std::fabs(numeric));
          worst = std::max(worst, rel);
        }
      }
    }
  }
  return worst;
}

struct RowSumSweep {
  double max_dev = 0.0;
  std::size_t rows = 0;
};

/// Every normalized row produced anywhere in the stack — plain softmax,
/// assignment membership, fusion attention (self + cross), and decoder
/// attention — must sum to one.
inline RowSumSweep row_sum_sweep(std::uint64_t seed) {
  Rng rg(seed);
  RowSumSweep out;
  auto absorb = [&](const DiffArray& m) {
    const std::size_t cols = m.cols();
    for (std::size_t r = 0; r < m.rows(); ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < cols; ++c) s += m.data()[r * cols + c];
      out.max_dev = std::max(out.max_dev, std::fabs(s - 1.0));
      ++out.rows;
    }
  };

  for (double tau : {1.0, 0.1, 3.0}) {
    absorb(softmax(DiffArray(Shape{7, 5}, rg.normal_vec(35, 0.0, 2.0), false), tau));
  }

  const std::size_t d_enc = 8, d_llm = 16;
  AtomGraph g1 = detail::cloud_graph(6, rg);
  AtomGraph g2 = detail::cloud_graph(9, rg);
  AtomGraph g3 = detail::cloud_graph(4, rg);
  BatchedGraph b = batch_graphs({g1, g2, g3});
  DiffArray x(Shape{b.size(), d_enc}, rg.normal_vec(b.size() * d_enc, 0.0, 1.0), false);
  DiffArray z(Shape{3, d_llm}, rg.normal_vec(3 * d_llm, 0.0, 1.0), false);
  PatchGate gate(d_enc, d_llm, 6, rg);
  PatcherConfig pcfg;
  pcfg.rho = 0.6;
  pcfg.k_max = 5;
  pcfg.gate_hidden = 6;
  PatchOutput patch = run_patching(b, x, b.coord_matrix(false), z, gate, pcfg,
                                   /*with_membership=*/true);
  for (const DiffArray& w : patch.membership) absorb(w);

  FusionConfig fcfg;
  fcfg.d_enc = d_enc;
  fcfg.d_model = 16;
  fcfg.d_llm = d_llm;
  fcfg.heads = 2;
  fcfg.blocks = 2;
  fcfg.ffn_dim = 32;
  fcfg.dropout = 0.0;
  FusionStack fusion(fcfg, rg);
  FusionDiagnostics fdiag;
  retrieve_geometry(patch, x, b, fusion, nullptr, &fdiag);
  for (const DiffArray& rows : fdiag.attention_rows) absorb(rows);

  ToyDecoderConfig dcfg;
  dcfg.vocab = 32;
  dcfg.d_model = d_llm;
  dcfg.heads = 2;
  dcfg.blocks = 2;
  dcfg.ffn_dim = 32;
  dcfg.max_len = 32;
  dcfg.dropout = 0.0;
  ToyDecoder dec(dcfg, rg);
  std::vector<int> ids;
  for (std::size_t i = 0; i < 12; ++i) ids.push_back(static_cast<int>(5 + rg.index(20)));
  std::vector<std::uint8_t> mask(ids.size(), 1);
  mask[3] = 0;  // one padded position
  FusionDiagnostics ddiag;
  dec.forward_embedded(dec.embed(ids), mask, nullptr, &ddiag);
  for (const DiffArray& rows : ddiag.attention_rows) absorb(rows);

  return out;
}

/// 3x3 rotation from a random axis and angle (Rodrigues form).
inline std::array<double, 9> random_rotation(Rng& rng) {
  double ax = rng.normal(), ay = rng.normal(), az = rng.normal();
  const double norm = std::sqrt(ax * ax + ay * ay + az * az) + 1e-12;
  ax /= norm;
  ay /= norm;
  az /= norm;
  const double th = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
  const double c = std::cos(th), s = std::sin(th), v = 1.0 - c;
  return {c + ax * ax * v,      ax * ay * v - az * s, ax * az * v + ay * s,
          ay * ax * v + az * s, c + ay * ay * v,      ay * az * v - ax * s,
          az * ax * v - ay * s, az * ay * v + ax * s, c + az * az * v};
}

struct EquivarianceCheck {
  double feature_dev = 0.0;  // invariance of node features
  double coord_dev = 0.0;    // equivariance of refined coordinates
};

/// Compare one encoder pass against a rigidly moved copy of the same graph.
inline EquivarianceCheck equivariance_check(const Egnn& enc, const AtomGraph& g,
                                            std::uint64_t motion_seed) {
  Rng mr(motion_seed);
  const std::array<double, 9> rot = random_rotation(mr);
  const std::array<double, 3> t = {mr.uniform(-5.0, 5.0), mr.uniform(-5.0, 5.0),
                                   mr.uniform(-5.0, 5.0)};

  AtomGraph moved = g;
  for (auto& c : moved.coords) {
    const std::array<double, 3> r = c;
    for (std::size_t i = 0; i < 3; ++i) {
      c[i] = rot[3 * i] * r[0] + rot[3 * i + 1] * r[1] + rot[3 * i + 2] * r[2] + t[i];
    }
  }

  BatchedGraph b0 = batch_graphs({g});
  BatchedGraph b1 = batch_graphs({moved});
  const std::vector<std::size_t> elems = batch_element_classes(b0);
  EncoderOutput out0 = enc.forward(b0, elems, b0.coord_matrix(false));
  EncoderOutput out1 = enc.forward(b1, elems, b1.coord_matrix(false));

  EquivarianceCheck chk;
  for (std::size_t i = 0; i < out0.node_features.size(); ++i) {
    chk.feature_dev =
        std::max(chk.feature_dev, std::fabs(out0.node_features.data()[i] - out1.node_features.data()[i]));
  }
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double* q = out0.coords.data().data() + 3 * i;
    for (std::size_t j = 0; j < 3; ++j) {
      const double expected = rot[3 * j] * q[0] + rot[3 * j + 1] * q[1] + rot[3 * j + 2] * q[2] + t[j];
      chk.coord_dev = std::max(chk.coord_dev,
                               std::fabs(out1.coords.data()[3 * i + j] - expected));
    }
  }
  return chk;
}

}  // namespace atompatch
