#pragma once

// Scaling-aware patching: compress per-atom features into a small set of
// patch tokens whose count adapts to structure size and instruction focus.
//
//   l    = Gate([X_i ; z_b])                       per-atom salience logit
//   p    = softmax(l) within each graph
//   k_g  = min(K_max, min{ k : sum of top-k p >= rho })
//   W    = softmax_a((-s_d * |P_i - P_a|^2 + l_a) / tau)   atoms -> anchors
//   m_a  = sum_i W_ia + eps
//   t_a  = sum_i (W_ia / m_a) X_i
//
// Anchor selection is a discrete choice (sorted by p, ties broken toward the
// lower index); everything downstream of it is differentiable. Logits of
// non-anchor atoms influence nothing but the selection itself, so their
// gradients through W are exactly zero.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <vector>

#include "atompatch/chem/atom_graph.hpp"
#include "atompatch/core/diff_array.hpp"
#include "atompatch/core/errors.hpp"
#include "atompatch/core/nn_ops.hpp"
#include "atompatch/core/ops.hpp"
#include "atompatch/core/params.hpp"
#include "atompatch/core/rng.hpp"

namespace atompatch {

struct PatcherConfig {
  double rho = 0.1;          // cumulative salience mass per graph
  std::size_t k_max = 2048;  // anchor budget
  double s_d = 1.0;          // distance weight in assignment scores
  double tau = 0.1;          // assignment temperature
  double eps = 1e-8;         // pooling mass floor
  std::size_t gate_hidden = 256;
  double dropout = 0.0;

  void validate() const {
    if (rho <= 0.0 || rho > 1.0) throw Error("patcher rho must be in (0,1]");
    if (k_max == 0) throw Error("patcher k_max must be positive");
    if (tau <= 0.0) throw Error("patcher tau must be positive");
    if (s_d <= 0.0) throw Error("patcher distance weight must be positive");
    if (eps <= 0.0) throw Error("patcher eps must be positive");
  }
};

/// Salience gate over [atom features ; broadcast instruction summary].
struct PatchGate {
  Mlp mlp;  // (H + Z) -> hidden -> 1

  PatchGate() = default;

  PatchGate(std::size_t feat_dim, std::size_t instr_dim, std::size_t hidden, Rng& rng,
            double dropout = 0.0) {
    mlp = Mlp({feat_dim + instr_dim, hidden, 1}, rng, Activation::kSilu, dropout);
  }

  void register_params(ParamRegistry& reg, const std::string& prefix) const {
    mlp.register_params(reg, prefix + ".mlp");
  }

  /// X: (N, H) atom features; z: (G, Z) per-graph instruction summaries;
  /// graph_of maps atom -> graph. Returns (N, 1) logits.
  DiffArray forward(const DiffArray& x, const DiffArray& z,
                    const std::vector<std::size_t>& graph_of, Rng* train_rng = nullptr) const {
    if (x.rank() != 2) throw Error("gate features must be rank 2");
    if (z.rank() != 2) throw Error("instruction summaries must be rank 2");
    if (graph_of.size() != x.rows()) throw Error("graph_of does not match atom count");
    DiffArray tiled = gather_rows(z, graph_of);  // (N, Z)
    return mlp.forward(hconcat(x, tiled), train_rng);
  }
};

struct AnchorSelection {
  std::vector<std::size_t> anchors;  // local indices, in decreasing-salience order
  std::size_t k = 0;
};

/// Discrete anchor choice from plain logits (no tape involvement). Cumulative
/// mass comparison carries a tiny slack so that an exact boundary, computed in
/// floating point, still counts as reached.
inline AnchorSelection select_anchors(const std::vector<double>& logits, double rho,
                                      std::size_t k_max) {
  if (logits.empty()) throw Error("select_anchors: empty graph");
  if (rho <= 0.0 || rho > 1.0) throw Error("patcher rho must be in (0,1]");
  if (k_max == 0) throw Error("patcher k_max must be positive");
  const std::size_t n = logits.size();

  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  std::vector<double> p(n);
  double z = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    p[i] = std::exp(logits[i] - mx);
    z += p[i];
  }
  for (auto& v : p) v /= z;

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return p[a] > p[b]; });

  AnchorSelection sel;
  double cum = 0.0;
  std::size_t k = n;  // fallback: everything
  for (std::size_t r = 0; r < n; ++r) {
    cum += p[order[r]];
    if (cum + 1e-12 >= rho) {
      k = r + 1;
      break;
    }
  }
  sel.k = std::min(k, k_max);
  sel.anchors.assign(order.begin(), order.begin() + sel.k);
  return sel;
}

/// Soft atom-to-anchor assignment. p: (n, 3) positions for one graph;
/// logits: (n) gate logits for the same graph; anchors: local indices.
inline DiffArray soft_assign(const DiffArray& p, const DiffArray& logits,
                             const std::vector<std::size_t>& anchors, double s_d, double tau) {
  if (p.rank() != 2 || p.cols() != 3) throw Error("soft_assign: positions must be (n,3)");
  if (logits.rank() != 1 || logits.size() != p.rows()) {
    throw Error("soft_assign: logits must match atom count");
  }
  if (anchors.empty()) throw Error("soft_assign: empty anchor set");
  DiffArray pa = gather_rows(p, anchors);  // (k, 3)
  // |P_i - P_a|^2 = |P_i|^2 - 2 P_i . P_a + |P_a|^2
  DiffArray g = matmul(p, transpose(pa));          // (n, k)
  DiffArray d2 = add_col(add_row(scale(g, -2.0), row_sums(mul(pa, pa))), row_sums(mul(p, p)));
  DiffArray scores = add_row(scale(d2, -s_d), gather_rows(logits, anchors));
  return softmax(scores, tau);
}

struct PatchPool {
  DiffArray tokens;  // (k, H)
  DiffArray mass;    // (k)
};

/// Mass-normalized pooling of atom features into anchor tokens.
inline PatchPool pool_patches(const DiffArray& w, const DiffArray& x, double eps) {
  if (w.rank() != 2 || x.rank() != 2 || w.rows() != x.rows()) {
    throw Error("pool_patches: weight and feature rows must match");
  }
  PatchPool out;
  out.mass = add_scalar(col_sums(w), eps);
  DiffArray wn = mul_row(w, reciprocal(out.mass));  // scales column a by 1/m_a
  out.tokens = matmul(transpose(wn), x);
  return out;
}

struct PatchOutput {
  std::vector<DiffArray> tokens;                    // per graph: (k_g, H)
  std::vector<DiffArray> masses;                    // per graph: (k_g)
  std::vector<std::vector<std::size_t>> anchors;    // per graph, graph-local indices
  std::vector<std::size_t> counts;                  // k_g
  DiffArray logits;                                 // (N, 1) gate output
  std::vector<DiffArray> membership;                // per graph W, only if requested
};

/// Full patching pass over a batch. X: (N, H) features; p: (N, 3) positions;
/// z: (G, Z) instruction summaries.
inline PatchOutput run_patching(const BatchedGraph& b, const DiffArray& x, const DiffArray& p,
                                const DiffArray& z, const PatchGate& gate,
                                const PatcherConfig& cfg, bool with_membership = false,
                                Rng* train_rng = nullptr) {
  cfg.validate();
  const std::size_t n_graphs = b.offsets.size() - 1;
  if (x.rows() != b.size() || p.rows() != b.size()) {
    throw Error("run_patching: feature and position rows must match batch size");
  }
  if (z.rows() != n_graphs) throw Error("run_patching: one instruction summary per graph");

  PatchOutput out;
  out.logits = gate.forward(x, z, b.graph_of, train_rng);

  for (std::size_t g2 = 0; g2 < n_graphs; ++g2) {
    const std::size_t off = b.offsets[g2];
    const std::size_t cnt = b.offsets[g2 + 1] - off;
    DiffArray lg = reshape(row_slice(out.logits, off, cnt), Shape{cnt});

    std::vector<double> plain(lg.data().begin(), lg.data().end());
    AnchorSelection sel = select_anchors(plain, cfg.rho, cfg.k_max);

    DiffArray pg = row_slice(p, off, cnt);
    DiffArray xg = row_slice(x, off, cnt);
    DiffArray w = soft_assign(pg, lg, sel.anchors, cfg.s_d, cfg.tau);
    PatchPool pool = pool_patches(w, xg, cfg.eps);
    check_finite(pool.tokens, "patch tokens");

    out.tokens.push_back(pool.tokens);
    out.masses.push_back(pool.mass);
    out.anchors.push_back(sel.anchors);
    out.counts.push_back(sel.k);
    if (with_membership) out.membership.push_back(w);
  }
  return out;
}

/// Anchor count for a uniform gate (all logits equal) at a given size; the
/// token-budget benchmark uses this path so very large structures never
/// materialize an N x k assignment matrix.
inline std::size_t uniform_anchor_count(std::size_t n_atoms, double rho, std::size_t k_max) {
  std::vector<double> zeros_vec(n_atoms, 0.0);
  return select_anchors(zeros_vec, rho, k_max).k;
}

}  // namespace atompatch
