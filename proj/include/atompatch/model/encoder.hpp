#pragma once

// SE(3)-equivariant message-passing encoder over batched atom graphs.
// Scalar channels see only invariant geometry (radial features of edge
// lengths); coordinate updates move each atom along relative displacement
// vectors with invariant scalar weights. Rotating and translating the input
// therefore leaves node features unchanged and transports the output
// coordinates by the same motion.
//
// Per layer, with directed edges (i <- j duplicated from the undirected list):
//   m_ij = MsgMlp([h_i ; h_j ; rbf(|x_i - x_j|)])
//   h_i  = LayerNorm(h_i + UpdMlp([h_i ; sum_j m_ij]))
//   x_i  = x_i + sum_j (x_i - x_j) / (d_ij + 1) * ScalarMlp(m_ij)

#include <cstddef>
#include <string>
#include <vector>

#include "atompatch/chem/atom_graph.hpp"
#include "atompatch/core/diff_array.hpp"
#include "atompatch/core/errors.hpp"
#include "atompatch/core/nn_ops.hpp"
#include "atompatch/core/ops.hpp"
#include "atompatch/core/params.hpp"
#include "atompatch/core/rng.hpp"

namespace atompatch {

/// Element class id used for masked atoms; one past the regular classes.
inline constexpr std::size_t kMaskElementClass = kNumElementClasses;
inline constexpr std::size_t kElementVocabSize = kNumElementClasses + 1;

struct EncoderConfig {
  std::size_t hidden = 256;
  std::size_t depth = 8;
  std::size_t rbf_count = 32;
  double rbf_cutoff = 10.0;
  double dropout = 0.1;
  bool coord_updates = true;
  // pretraining objective
  double lambda_dist = 1.0;
  double lambda_dir = 1.0;
  double mask_fraction = 0.15;
  double dir_noise_sigma = 0.1;
  std::size_t mask_region_cap = 6;

  /// Small widths for fast tests.
  static EncoderConfig desk() {
    EncoderConfig c;
    c.hidden = 32;
    c.depth = 3;
    c.dropout = 0.0;
    return c;
  }

  void validate() const {
    if (hidden == 0) throw Error("encoder hidden size must be positive");
    if (depth == 0) throw Error("encoder depth must be positive");
    if (rbf_count < 2) throw Error("encoder rbf count must be at least 2");
    if (rbf_cutoff <= 0.0) throw Error("encoder rbf cutoff must be positive");
    if (dropout < 0.0 || dropout >= 1.0) throw Error("encoder dropout must be in [0,1)");
    if (mask_fraction <= 0.0 || mask_fraction > 1.0) {
      throw Error("mask fraction must be in (0,1]");
    }
  }
};

struct EgnnLayer {
  Mlp msg;        // (2H + rbf) -> H -> H
  Mlp upd;        // (2H) -> H -> H
  Mlp coord_w;    // H -> H -> 1
  LayerNormParams ln;
};

struct EncoderOutput {
  DiffArray node_features;  // N x H, invariant under rigid motions
  DiffArray coords;         // N x 3, equivariant
};

struct Egnn {
  EncoderConfig cfg;
  DiffArray elem_emb;  // (element vocab incl. mask slot) x H
  DiffArray name_emb;
  DiffArray res_emb;
  Linear flag_proj;    // 2 -> H, no bias
  std::vector<EgnnLayer> layers;

  Egnn() = default;

  Egnn(const EncoderConfig& config, Rng& rng) : cfg(config) {
    cfg.validate();
    const std::size_t h = cfg.hidden;
    auto emb = [&](std::size_t n) {
      return DiffArray(Shape{n, h}, rng.normal_vec(n * h, 0.0, 0.1), true);
    };
    elem_emb = emb(kElementVocabSize);
    name_emb = emb(num_atom_name_classes());
    res_emb = emb(num_residue_classes());
    flag_proj = Linear(2, h, rng, /*bias=*/false);
    for (std::size_t l = 0; l < cfg.depth; ++l) {
      EgnnLayer layer;
      layer.msg = Mlp({2 * h + cfg.rbf_count, h, h}, rng, Activation::kSilu, cfg.dropout);
      layer.upd = Mlp({2 * h, h, h}, rng, Activation::kSilu, cfg.dropout);
      layer.coord_w = Mlp({h, h, 1}, rng, Activation::kSilu, 0.0);
      layer.ln = LayerNormParams(h);
      layers.push_back(std::move(layer));
    }
  }

  void register_params(ParamRegistry& reg, const std::string& prefix) const {
    reg.add(prefix + ".elem_emb", elem_emb);
    reg.add(prefix + ".name_emb", name_emb);
    reg.add(prefix + ".res_emb", res_emb);
    flag_proj.register_params(reg, prefix + ".flag_proj");
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const std::string lp = prefix + ".layer" + std::to_string(l);
      layers[l].msg.register_params(reg, lp + ".msg");
      layers[l].upd.register_params(reg, lp + ".upd");
      layers[l].coord_w.register_params(reg, lp + ".coord_w");
      layers[l].ln.register_params(reg, lp + ".ln");
    }
  }

  /// Initial per-atom features: element + name + residue embeddings plus a
  /// linear lift of the two structural flags.
  DiffArray embed_atoms(const BatchedGraph& b,
                        const std::vector<std::size_t>& elem_classes) const {
    if (elem_classes.size() != b.size()) {
      throw Error("element class list does not match atom count");
    }
    std::vector<std::size_t> name_ids(b.size()), res_ids(b.size());
    std::vector<double> flags(b.size() * 2);
    for (std::size_t i = 0; i < b.size(); ++i) {
      if (elem_classes[i] >= kElementVocabSize) throw Error("element class out of range");
      name_ids[i] = atom_name_class(b.atoms[i].name);
      res_ids[i] = residue_class(b.atoms[i].residue);
      flags[i * 2 + 0] = b.atoms[i].flags.backbone ? 1.0 : 0.0;
      flags[i * 2 + 1] = b.atoms[i].flags.phos_or_ca ? 1.0 : 0.0;
    }
    DiffArray h = add(gather_rows(elem_emb, elem_classes), gather_rows(name_emb, name_ids));
    h = add(h, gather_rows(res_emb, res_ids));
    DiffArray flag_mat(Shape{b.size(), 2}, std::move(flags), false);
    return add(h, flag_proj.forward(flag_mat));
  }

  EncoderOutput forward(const BatchedGraph& b, const std::vector<std::size_t>& elem_classes,
                        const DiffArray& coords, Rng* train_rng = nullptr) const {
    if (coords.rank() != 2 || coords.rows() != b.size() || coords.cols() != 3) {
      throw Error("coords must be (N,3)");
    }
    const std::size_t n = b.size();

    // directed edge lists: entry e has center src[e] aggregating neighbor dst[e]
    std::vector<std::size_t> src, dst;
    src.reserve(b.edges.size() * 2);
    dst.reserve(b.edges.size() * 2);
    for (const auto& e : b.edges) {
      src.push_back(e.first);
      dst.push_back(e.second);
      src.push_back(e.second);
      dst.push_back(e.first);
    }

    DiffArray h = embed_atoms(b, elem_classes);
    DiffArray x = coords;

    for (std::size_t l = 0; l < layers.size(); ++l) {
      const EgnnLayer& layer = layers[l];
      DiffArray agg, msgs, rel, dist;
      const bool have_edges = !src.empty();
      if (have_edges) {
        rel = sub(gather_rows(x, src), gather_rows(x, dst));    // E x 3
        dist = sqrt_(row_sums(mul(rel, rel)));                  // E
        DiffArray phi = rbf_expand(dist, cfg.rbf_count, cfg.rbf_cutoff);
        DiffArray m_in = hconcat3(gather_rows(h, src), gather_rows(h, dst), phi);
        msgs = layer.msg.forward(m_in, train_rng);              // E x H
        agg = scatter_add_rows(msgs, src, n);                   // N x H
      } else {
        agg = DiffArray::zeros(Shape{n, cfg.hidden});
      }
      DiffArray u = layer.upd.forward(hconcat(h, agg), train_rng);
      h = layer.ln.forward(add(h, u));
      if (!h.all_finite()) {
        throw Error("non-finite values in encoder layer " + std::to_string(l));
      }
      if (cfg.coord_updates && have_edges) {
        DiffArray w = reshape(layer.coord_w.forward(msgs), Shape{src.size()});  // E
        DiffArray s = div(w, add_scalar(dist, 1.0));
        DiffArray contrib = mul_col(rel, s);                    // E x 3
        x = add(x, scatter_add_rows(contrib, src, n));
        if (!x.all_finite()) {
          throw Error("non-finite values in encoder layer " + std::to_string(l));
        }
      }
    }
    return EncoderOutput{h, x};
  }
};

/// Pretraining heads. The direction head sees both endpoint features and the
/// noised unit direction and predicts the injected noise.
struct EncoderHeads {
  Mlp elem_head;  // H -> H -> element classes (mask slot excluded)
  Mlp dist_head;  // 2H -> H -> 1
  Mlp dir_head;   // (2H + 3) -> H -> 3

  EncoderHeads() = default;

  EncoderHeads(const EncoderConfig& cfg, Rng& rng) {
    const std::size_t h = cfg.hidden;
    elem_head = Mlp({h, h, kNumElementClasses}, rng, Activation::kSilu, cfg.dropout);
    dist_head = Mlp({2 * h, h, 1}, rng, Activation::kSilu, cfg.dropout);
    dir_head = Mlp({2 * h + 3, h, 3}, rng, Activation::kSilu, cfg.dropout);
  }

  void register_params(ParamRegistry& reg, const std::string& prefix) const {
    elem_head.register_params(reg, prefix + ".elem");
    dist_head.register_params(reg, prefix + ".dist");
    dir_head.register_params(reg, prefix + ".dir");
  }
};

/// Element class ids straight from the batch (no masking).
inline std::vector<std::size_t> batch_element_classes(const BatchedGraph& b) {
  std::vector<std::size_t> out(b.size());
  for (std::size_t i = 0; i < b.size(); ++i) out[i] = element_class(b.atoms[i].element);
  return out;
}

}  // namespace atompatch
