#pragma once

// Cross-attention fusion between patch tokens and full node embeddings, plus
// splicing of the refined geometry tokens into a text embedding sequence.
//
//   Q      = Proj_p(Norm(T))            patch queries
//   K, V   = Proj_n(Norm(X))            shared across blocks, per graph
//   per block: Q += SelfAttn(LN(Q)); Q += CrossAttn(LN(Q), K, V); Q += FFN(LN(Q))
//   T_hat  = Norm_out(Proj_out(Q))
//
// Injection replaces each placeholder position with that graph's k_g refined
// tokens, so the sequence grows by sum(k_g - 1). Inserted positions are
// attended but never supervised.

#include <cstddef>
#include <string>
#include <vector>

#include "atompatch/core/diff_array.hpp"
#include "atompatch/core/errors.hpp"
#include "atompatch/core/nn_ops.hpp"
#include "atompatch/core/ops.hpp"
#include "atompatch/core/params.hpp"
#include "atompatch/core/rng.hpp"
#include "atompatch/chem/atom_graph.hpp"
#include "atompatch/model/patcher.hpp"

namespace atompatch {

/// Label value excluding a position from the loss.
inline constexpr int kIgnoreIndex = -100;

struct FusionConfig {
  std::size_t d_enc = 256;      // width of incoming patch/node features
  std::size_t d_model = 4096;   // fusion model width
  std::size_t d_llm = 4096;     // language-model embedding width
  std::size_t heads = 32;
  std::size_t blocks = 8;       // fusion block count
  std::size_t ffn_dim = 16384;  // fusion MLP intermediate size
  std::size_t max_slots = 2048; // learned slot identities, one per anchor rank
  double dropout = 0.1;

  static FusionConfig desk() {
    FusionConfig c;
    c.d_enc = 32;
    c.d_model = 64;
    c.d_llm = 64;
    c.heads = 4;
    c.blocks = 2;
    c.ffn_dim = 128;
    c.max_slots = 64;
    c.dropout = 0.0;
    return c;
  }

  void validate() const {
    if (blocks < 1) throw Error("fusion block count must be at least 1");
    if (heads == 0 || d_model % heads != 0) {
      throw Error("fusion head count must divide the model width");
    }
    if (d_enc == 0 || d_model == 0 || d_llm == 0 || ffn_dim == 0) {
      throw Error("fusion widths must be positive");
    }
    if (max_slots == 0) throw Error("fusion slot capacity must be positive");
    if (dropout < 0.0 || dropout >= 1.0) throw Error("fusion dropout must be in [0,1)");
  }
};

/// Collects every attention weight matrix produced during a forward pass.
struct FusionDiagnostics {
  std::vector<DiffArray> attention_rows;
};

namespace detail {

inline DiffArray concat_heads(std::vector<DiffArray> parts) {
  DiffArray out = parts[0];
  for (std::size_t i = 1; i < parts.size(); ++i) out = hconcat(out, parts[i]);
  return out;
}

/// Multi-head attention with pre-projected keys/values (shape (n_k, d_model)).
inline DiffArray heads_attend(const DiffArray& q_proj, const DiffArray& k_proj,
                              const DiffArray& v_proj, std::size_t heads,
                              FusionDiagnostics* diag) {
  const std::size_t dh = q_proj.cols() / heads;
  std::vector<DiffArray> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    AttentionOut a = scaled_dot_attention(col_slice(q_proj, h * dh, dh),
                                          col_slice(k_proj, h * dh, dh),
                                          col_slice(v_proj, h * dh, dh));
    if (diag) diag->attention_rows.push_back(a.weights);
    outs.push_back(a.out);
  }
  return concat_heads(std::move(outs));
}

}  // namespace detail

struct SelfAttnBlock {
  LayerNormParams ln;
  Linear wq, wk, wv, wo;
};

struct CrossAttnBlock {
  LayerNormParams ln;
  Linear wq, wo;  // keys/values are shared, projected once per graph
};

struct FfnBlock {
  LayerNormParams ln;
  Linear up, down;
};

struct FusionBlock {
  SelfAttnBlock self_attn;
  CrossAttnBlock cross_attn;
  FfnBlock ffn;
};

struct FusionStack {
  FusionConfig cfg;
  LayerNormParams norm_t;  // over patch tokens (d_enc)
  Linear proj_p;           // d_enc -> d_model
  DiffArray slot_emb;      // (max_slots, d_model) anchor-rank identities
  LayerNormParams norm_x;  // over node embeddings (d_enc)
  Linear proj_k, proj_v;   // d_enc -> d_model
  std::vector<FusionBlock> blocks;
  Linear proj_out;         // d_model -> d_llm
  LayerNormParams norm_out;

  FusionStack() = default;

  FusionStack(const FusionConfig& config, Rng& rng) : cfg(config) {
    cfg.validate();
    norm_t = LayerNormParams(cfg.d_enc);
    proj_p = Linear(cfg.d_enc, cfg.d_model, rng);
    slot_emb = DiffArray(Shape{cfg.max_slots, cfg.d_model},
                         rng.normal_vec(cfg.max_slots * cfg.d_model, 0.0, 0.1), true);
    norm_x = LayerNormParams(cfg.d_enc);
    proj_k = Linear(cfg.d_enc, cfg.d_model, rng);
    proj_v = Linear(cfg.d_enc, cfg.d_model, rng);
    for (std::size_t l = 0; l < cfg.blocks; ++l) {
      FusionBlock b;
      b.self_attn.ln = LayerNormParams(cfg.d_model);
      b.self_attn.wq = Linear(cfg.d_model, cfg.d_model, rng);
      b.self_attn.wk = Linear(cfg.d_model, cfg.d_model, rng);
      b.self_attn.wv = Linear(cfg.d_model, cfg.d_model, rng);
      b.self_attn.wo = Linear(cfg.d_model, cfg.d_model, rng);
      b.cross_attn.ln = LayerNormParams(cfg.d_model);
      b.cross_attn.wq = Linear(cfg.d_model, cfg.d_model, rng);
      b.cross_attn.wo = Linear(cfg.d_model, cfg.d_model, rng);
      b.ffn.ln = LayerNormParams(cfg.d_model);
      b.ffn.up = Linear(cfg.d_model, cfg.ffn_dim, rng);
      b.ffn.down = Linear(cfg.ffn_dim, cfg.d_model, rng);
      blocks.push_back(std::move(b));
    }
    proj_out = Linear(cfg.d_model, cfg.d_llm, rng);
    norm_out = LayerNormParams(cfg.d_llm);
  }

  void register_params(ParamRegistry& reg, const std::string& prefix) const {
    norm_t.register_params(reg, prefix + ".norm_t");
    proj_p.register_params(reg, prefix + ".proj_p");
    reg.add(prefix + ".slot_emb", slot_emb);
    norm_x.register_params(reg, prefix + ".norm_x");
    proj_k.register_params(reg, prefix + ".proj_k");
    proj_v.register_params(reg, prefix + ".proj_v");
    for (std::size_t l = 0; l < blocks.size(); ++l) {
      const std::string bp = prefix + ".block" + std::to_string(l);
      blocks[l].self_attn.ln.register_params(reg, bp + ".self.ln");
      blocks[l].self_attn.wq.register_params(reg, bp + ".self.wq");
      blocks[l].self_attn.wk.register_params(reg, bp + ".self.wk");
      blocks[l].self_attn.wv.register_params(reg, bp + ".self.wv");
      blocks[l].self_attn.wo.register_params(reg, bp + ".self.wo");
      blocks[l].cross_attn.ln.register_params(reg, bp + ".cross.ln");
      blocks[l].cross_attn.wq.register_params(reg, bp + ".cross.wq");
      blocks[l].cross_attn.wo.register_params(reg, bp + ".cross.wo");
      blocks[l].ffn.ln.register_params(reg, bp + ".ffn.ln");
      blocks[l].ffn.up.register_params(reg, bp + ".ffn.up");
      blocks[l].ffn.down.register_params(reg, bp + ".ffn.down");
    }
    proj_out.register_params(reg, prefix + ".proj_out");
    norm_out.register_params(reg, prefix + ".norm_out");
  }

  /// Refine one graph's patch tokens (k, d_enc) against its node embeddings
  /// (n, d_enc). Returns (k, d_llm).
  DiffArray refine(const DiffArray& patch_tokens, const DiffArray& nodes,
                   Rng* train_rng = nullptr, FusionDiagnostics* diag = nullptr) const {
    if (patch_tokens.rank() != 2 || patch_tokens.rows() == 0) throw Error("empty patch set");
    if (patch_tokens.cols() != cfg.d_enc || nodes.cols() != cfg.d_enc) {
      throw Error("fusion input width mismatch");
    }
    if (patch_tokens.rows() > cfg.max_slots) {
      throw Error("patch count exceeds fusion slot capacity");
    }
    auto drop = [&](DiffArray v) {
      return (train_rng && cfg.dropout > 0.0) ? dropout(v, cfg.dropout, *train_rng) : v;
    };
    // Rank identities keep coincident patch tokens distinguishable downstream.
    DiffArray q = add(proj_p.forward(norm_t.forward(patch_tokens)),
                      row_slice(slot_emb, 0, patch_tokens.rows()));
    DiffArray xn = norm_x.forward(nodes);
    DiffArray keys = proj_k.forward(xn);
    DiffArray values = proj_v.forward(xn);
    for (const FusionBlock& b : blocks) {
      DiffArray s = b.self_attn.ln.forward(q);
      q = add(q, drop(b.self_attn.wo.forward(
                  detail::heads_attend(b.self_attn.wq.forward(s), b.self_attn.wk.forward(s),
                                       b.self_attn.wv.forward(s), cfg.heads, diag))));
      DiffArray c = b.cross_attn.ln.forward(q);
      q = add(q, drop(b.cross_attn.wo.forward(detail::heads_attend(
                  b.cross_attn.wq.forward(c), keys, values, cfg.heads, diag))));
      DiffArray f = b.ffn.ln.forward(q);
      q = add(q, drop(b.ffn.down.forward(gelu(b.ffn.up.forward(f)))));
    }
    return norm_out.forward(proj_out.forward(q));
  }
};

/// Refined geometry tokens, padded to a common per-graph slot count; rows at
/// or beyond a graph's count are exact zeros and must never be attended.
struct RetrievedTokens {
  std::vector<DiffArray> rows;     // per graph: (padded_k, d_llm)
  std::vector<std::size_t> counts; // valid rows per graph
  std::size_t padded_k = 0;
};

inline RetrievedTokens retrieve_geometry(const PatchOutput& patch, const DiffArray& x,
                                         const BatchedGraph& b, const FusionStack& stack,
                                         Rng* train_rng = nullptr,
                                         FusionDiagnostics* diag = nullptr) {
  RetrievedTokens out;
  out.counts = patch.counts;
  for (std::size_t c : patch.counts) out.padded_k = std::max(out.padded_k, c);
  for (std::size_t g = 0; g < patch.tokens.size(); ++g) {
    DiffArray nodes = row_slice(x, b.offsets[g], b.graph_size(g));
    DiffArray refined = stack.refine(patch.tokens[g], nodes, train_rng, diag);
    if (out.padded_k > patch.counts[g]) {
      refined = vconcat(
          {refined, DiffArray::zeros(Shape{out.padded_k - patch.counts[g], stack.cfg.d_llm})});
    }
    out.rows.push_back(refined);
  }
  return out;
}

/// A token-embedding sequence with bookkeeping, before or after injection.
struct ModalitySequence {
  std::vector<int> token_ids;
  DiffArray embeddings;              // (L, d_llm)
  std::vector<std::uint8_t> attention_mask;  // 1 = attend
  std::vector<int> labels;           // next-token targets, kIgnoreIndex = skip
  std::vector<std::size_t> placeholders;  // ascending, pre-injection only
  std::size_t instruction_len = 0;   // prefix holding the instruction

  std::size_t length() const { return token_ids.size(); }

  void validate() const {
    const std::size_t l = token_ids.size();
    if (attention_mask.size() != l || labels.size() != l) {
      throw Error("sequence mask/labels must match embedding length");
    }
    if (embeddings.defined() && embeddings.rows() != l) {
      throw Error("sequence embeddings must match token count");
    }
  }
};

inline std::vector<std::size_t> find_placeholders(const std::vector<int>& token_ids, int y_ins) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < token_ids.size(); ++i) {
    if (token_ids[i] == y_ins) out.push_back(i);
  }
  return out;
}

struct InjectionRecord {
  std::size_t position;  // placeholder index in the original sequence
  std::size_t count;     // tokens inserted in its place
};

struct InjectionResult {
  ModalitySequence seq;
  std::vector<InjectionRecord> insertions;

  /// Index of original token `i` (must not be a replaced placeholder) in the
  /// injected sequence.
  std::size_t map_index(std::size_t i) const {
    std::size_t shift = 0;
    for (const auto& r : insertions) {
      if (r.position == i) throw Error("original index was a replaced placeholder");
      if (r.position < i) shift += r.count - 1;
    }
    return i + shift;
  }
};

/// Replace placeholder g (in ascending position order) with graph g's valid
/// geometry token rows. Inserted positions are attended and never supervised.
inline InjectionResult inject_tokens(const ModalitySequence& seq, const RetrievedTokens& tokens) {
  seq.validate();
  if (seq.placeholders.size() != tokens.rows.size()) {
    throw Error("placeholder count " + std::to_string(seq.placeholders.size()) +
                " does not match graph count " + std::to_string(tokens.rows.size()));
  }

  InjectionResult res;
  ModalitySequence& out = res.seq;
  out.instruction_len = seq.instruction_len;

  std::vector<DiffArray> pieces;
  std::size_t cursor = 0;
  auto copy_span = [&](std::size_t from, std::size_t to) {
    if (to > from) {
      pieces.push_back(row_slice(seq.embeddings, from, to - from));
      for (std::size_t i = from; i < to; ++i) {
        out.token_ids.push_back(seq.token_ids[i]);
        out.attention_mask.push_back(seq.attention_mask[i]);
        out.labels.push_back(seq.labels[i]);
      }
    }
  };
  for (std::size_t g = 0; g < seq.placeholders.size(); ++g) {
    const std::size_t p = seq.placeholders[g];
    copy_span(cursor, p);
    const std::size_t k = tokens.counts[g];
    if (k == 0) throw Error("empty patch set");
    pieces.push_back(row_slice(tokens.rows[g], 0, k));  // valid rows only
    for (std::size_t i = 0; i < k; ++i) {
      out.token_ids.push_back(seq.token_ids[p]);
      out.attention_mask.push_back(1);
      out.labels.push_back(kIgnoreIndex);
    }
    res.insertions.push_back(InjectionRecord{p, k});
    if (p < seq.instruction_len) out.instruction_len += k - 1;
    cursor = p + 1;
  }
  copy_span(cursor, seq.length());
  out.embeddings = vconcat(pieces);
  out.validate();
  return res;
}

}  // namespace atompatch
