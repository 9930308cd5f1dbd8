#pragma once

// Small decoder-only language model standing in for a frozen backbone, with
// reasoning-span target augmentation and the masked NLL objective.
//
// Targets take the form y = [<think>, filler, </think>, answer]; the loss
// mask supervises answer tokens only (optionally the delimiters), so logits
// at filler positions receive bit-exact zero gradient.

#include <cctype>
#include <cstddef>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "atompatch/core/diff_array.hpp"
#include "atompatch/core/errors.hpp"
#include "atompatch/core/nn_ops.hpp"
#include "atompatch/core/ops.hpp"
#include "atompatch/core/params.hpp"
#include "atompatch/core/rng.hpp"
#include "atompatch/model/adapter.hpp"

namespace atompatch {

// Reserved vocabulary ids. Normal tokenization yields only word ids (or the
// placeholder, which is an explicit marker in instruction text).
inline constexpr int kPadId = 0;
inline constexpr int kPlaceholderId = 1;  // geometry injection marker
inline constexpr int kThinkOpenId = 2;
inline constexpr int kThinkCloseId = 3;
inline constexpr int kUnkId = 4;
inline constexpr int kFirstWordId = 5;
inline constexpr std::size_t kMaxVocab = 512;

struct ToyVocab {
  std::vector<std::string> words;  // id = kFirstWordId + index
  std::unordered_map<std::string, int> index;

  std::size_t size() const { return kFirstWordId + words.size(); }

  int add(const std::string& word) {
    auto it = index.find(word);
    if (it != index.end()) return it->second;
    if (size() >= kMaxVocab) throw Error("vocabulary limit exceeded");
    const int id = static_cast<int>(size());
    words.push_back(word);
    index.emplace(word, id);
    return id;
  }

  int id(const std::string& word) const {
    auto it = index.find(word);
    return it == index.end() ? kUnkId : it->second;
  }

  std::string word(int id) const {
    switch (id) {
      case kPadId: return "<pad>";
      case kPlaceholderId: return "<geom>";
      case kThinkOpenId: return "<think>";
      case kThinkCloseId: return "</think>";
      case kUnkId: return "<unk>";
      default: break;
    }
    const std::size_t i = static_cast<std::size_t>(id) - kFirstWordId;
    if (id < kFirstWordId || i >= words.size()) throw Error("unknown token id");
    return words[i];
  }

  /// Whitespace tokenization; "<geom>" maps to the placeholder id. When
  /// `grow` is set unknown words are added, otherwise they become <unk>.
  std::vector<int> tokenize(const std::string& text, bool grow = false) {
    std::vector<int> out;
    std::size_t i = 0;
    while (i < text.size()) {
      while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
      std::size_t j = i;
      while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
      if (j > i) {
        const std::string w = text.substr(i, j - i);
        if (w == "<geom>") {
          out.push_back(kPlaceholderId);
        } else {
          out.push_back(grow ? add(w) : id(w));
        }
      }
      i = j;
    }
    return out;
  }
};

/// Fixed pool of neutral filler spans, lengths 0 through 12 words.
inline const std::vector<std::string>& reasoning_templates() {
  static const std::vector<std::string> pool = {
      "",
      "hmm",
      "let me see",
      "working through this",
      "one step at a time",
      "first consider the overall arrangement",
      "weighing the relevant factors before answering",
      "the pieces fit together in a consistent way",
      "going over each part carefully before settling on anything",
      "a brief pause to organize the relevant observations helps here",
      "nothing about this looks unusual so the direct reading should hold",
      "checking the immediate surroundings first and then the wider context as well",
      "after lining up every observation the conclusion still comes out the same",
      "taking stock once more",
      "the details can be worked out later",
      "reviewing quietly",
  };
  return pool;
}

struct AugmentedSample {
  std::vector<int> instruction;            // x
  std::vector<int> reasoning;              // filler span
  std::vector<int> answer;                 // a
  std::vector<int> target;                 // y = [open, reasoning, close, answer]
  std::vector<double> loss_mask;           // m over y
  std::vector<std::size_t> reasoning_positions;  // R (within y)
  std::vector<std::size_t> answer_positions;     // A (within y)
};

/// Deterministic per (x, a, seed): the filler is drawn by hashing the sample
/// into the pool.
inline AugmentedSample build_augmented_target(const std::vector<int>& x,
                                              const std::vector<int>& a,
                                              const std::vector<std::vector<int>>& template_pool,
                                              std::uint64_t seed,
                                              bool supervise_delimiters = false) {
  if (template_pool.empty()) throw Error("empty template pool");
  if (a.empty()) throw Error("empty answer");

  std::uint64_t h = fnv1a64(x.data(), x.size() * sizeof(int), seed ^ 0x9e3779b97f4a7c15ull);
  h = fnv1a64(a.data(), a.size() * sizeof(int), h);
  Rng rng(h);
  const std::vector<int>& filler = template_pool[rng.index(template_pool.size())];

  AugmentedSample s;
  s.instruction = x;
  s.reasoning = filler;
  s.answer = a;
  s.target.push_back(kThinkOpenId);
  s.loss_mask.push_back(supervise_delimiters ? 1.0 : 0.0);
  for (int t : filler) {
    s.reasoning_positions.push_back(s.target.size());
    s.target.push_back(t);
    s.loss_mask.push_back(0.0);
  }
  s.target.push_back(kThinkCloseId);
  s.loss_mask.push_back(supervise_delimiters ? 1.0 : 0.0);
  for (int t : a) {
    s.answer_positions.push_back(s.target.size());
    s.target.push_back(t);
    s.loss_mask.push_back(1.0);
  }
  return s;
}

struct MaskedNll {
  DiffArray loss;
  bool no_supervision = false;  // warning: mask was all zero
};

/// loss = -sum_t m_t * log softmax(logits_t)[y_t]. The mask enters as a
/// constant factor, so masked positions contribute exactly zero loss and
/// exactly zero gradient to their logits.
inline MaskedNll masked_nll(const DiffArray& logits, const std::vector<int>& targets,
                            const std::vector<double>& mask) {
  if (logits.rank() != 2) throw Error("masked_nll: logits must be rank 2");
  const std::size_t t = logits.rows(), v = logits.cols();
  if (targets.size() != t || mask.size() != t) {
    throw Error("masked_nll: target/mask length mismatch");
  }
  MaskedNll out;
  bool any = false;
  std::vector<std::size_t> cols(t);
  for (std::size_t i = 0; i < t; ++i) {
    if (mask[i] != 0.0) any = true;
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= v) {
      throw Error("masked_nll: target id out of range");
    }
    cols[i] = static_cast<std::size_t>(targets[i]);
  }
  out.no_supervision = !any;
  DiffArray picked = pick_per_row(log_softmax(logits), cols);
  DiffArray m(Shape{t}, mask, /*requires_grad=*/false);
  out.loss = neg(sum_all(mul(picked, m)));
  return out;
}

struct ToyDecoderConfig {
  std::size_t vocab = kMaxVocab;
  std::size_t d_model = 64;
  std::size_t heads = 4;
  std::size_t blocks = 2;
  std::size_t ffn_dim = 256;
  std::size_t max_len = 256;
  double dropout = 0.0;

  void validate() const {
    if (vocab == 0 || vocab > kMaxVocab) throw Error("decoder vocabulary must be in [1,512]");
    if (heads == 0 || d_model % heads != 0) {
      throw Error("decoder head count must divide the model width");
    }
    if (blocks == 0) throw Error("decoder needs at least one block");
    if (dropout < 0.0 || dropout >= 1.0) throw Error("decoder dropout must be in [0,1)");
  }
};

struct DecoderBlock {
  LayerNormParams ln1;
  Linear wq, wk, wv, wo;
  LayerNormParams ln2;
  Linear up, down;
};

struct ToyDecoder {
  ToyDecoderConfig cfg;
  DiffArray tok_emb;  // (V, d)
  DiffArray pos_emb;  // (max_len, d)
  std::vector<DecoderBlock> dblocks;
  LayerNormParams ln_f;
  Linear head;  // untied output projection d -> V

  ToyDecoder() = default;

  ToyDecoder(const ToyDecoderConfig& config, Rng& rng) : cfg(config) {
    cfg.validate();
    tok_emb = DiffArray(Shape{cfg.vocab, cfg.d_model},
                        rng.normal_vec(cfg.vocab * cfg.d_model, 0.0, 0.1), true);
    pos_emb = DiffArray(Shape{cfg.max_len, cfg.d_model},
                        rng.normal_vec(cfg.max_len * cfg.d_model, 0.0, 0.1), true);
    for (std::size_t l = 0; l < cfg.blocks; ++l) {
      DecoderBlock b;
      b.ln1 = LayerNormParams(cfg.d_model);
      b.wq = Linear(cfg.d_model, cfg.d_model, rng);
      b.wk = Linear(cfg.d_model, cfg.d_model, rng);
      b.wv = Linear(cfg.d_model, cfg.d_model, rng);
      b.wo = Linear(cfg.d_model, cfg.d_model, rng);
      b.ln2 = LayerNormParams(cfg.d_model);
      b.up = Linear(cfg.d_model, cfg.ffn_dim, rng);
      b.down = Linear(cfg.ffn_dim, cfg.d_model, rng);
      dblocks.push_back(std::move(b));
    }
    ln_f = LayerNormParams(cfg.d_model);
    head = Linear(cfg.d_model, cfg.vocab, rng);
  }

  void register_params(ParamRegistry& reg, const std::string& prefix) const {
    reg.add(prefix + ".tok_emb", tok_emb);
    reg.add(prefix + ".pos_emb", pos_emb);
    for (std::size_t l = 0; l < dblocks.size(); ++l) {
      const std::string bp = prefix + ".block" + std::to_string(l);
      dblocks[l].ln1.register_params(reg, bp + ".ln1");
      dblocks[l].wq.register_params(reg, bp + ".wq");
      dblocks[l].wk.register_params(reg, bp + ".wk");
      dblocks[l].wv.register_params(reg, bp + ".wv");
      dblocks[l].wo.register_params(reg, bp + ".wo");
      dblocks[l].ln2.register_params(reg, bp + ".ln2");
      dblocks[l].up.register_params(reg, bp + ".up");
      dblocks[l].down.register_params(reg, bp + ".down");
    }
    ln_f.register_params(reg, prefix + ".ln_f");
    head.register_params(reg, prefix + ".head");
  }

  /// Token + positional embeddings for a id sequence.
  DiffArray embed(const std::vector<int>& ids) const {
    if (ids.size() > cfg.max_len) throw Error("sequence exceeds decoder position table");
    std::vector<std::size_t> rows(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= cfg.vocab) {
        throw Error("token id out of vocabulary range");
      }
      rows[i] = static_cast<std::size_t>(ids[i]);
    }
    return add(gather_rows(tok_emb, rows), row_slice(pos_emb, 0, ids.size()));
  }

  /// Causal language-model logits over already-built embeddings. Positions
  /// with attention mask 0 are excluded from attention entirely: they are
  /// neither keys nor queries (their rows pass through the residual stream).
  DiffArray forward_embedded(const DiffArray& e, const std::vector<std::uint8_t>& attn_mask,
                             Rng* train_rng = nullptr,
                             FusionDiagnostics* diag = nullptr) const {
    if (e.rank() != 2 || e.cols() != cfg.d_model) throw Error("decoder input width mismatch");
    const std::size_t l = e.rows();
    if (attn_mask.size() != l) throw Error("decoder attention mask length mismatch");
    if (l > cfg.max_len) throw Error("sequence exceeds decoder position table");

    std::vector<std::size_t> valid;
    for (std::size_t i = 0; i < l; ++i) {
      if (attn_mask[i]) valid.push_back(i);
    }
    if (valid.empty()) throw Error("fully masked sequence");
    const std::size_t lv = valid.size();
    std::vector<std::uint8_t> causal(lv * lv, 0);
    for (std::size_t a = 0; a < lv; ++a) {
      for (std::size_t b = 0; b <= a; ++b) causal[a * lv + b] = 1;  // positions ascend with index
    }

    auto drop = [&](DiffArray v) {
      return (train_rng && cfg.dropout > 0.0) ? dropout(v, cfg.dropout, *train_rng) : v;
    };
    const std::size_t dh = cfg.d_model / cfg.heads;
    DiffArray x = e;
    for (const DecoderBlock& b : dblocks) {
      DiffArray s = gather_rows(b.ln1.forward(x), valid);
      DiffArray q = b.wq.forward(s), k = b.wk.forward(s), v = b.wv.forward(s);
      std::vector<DiffArray> outs;
      outs.reserve(cfg.heads);
      for (std::size_t h = 0; h < cfg.heads; ++h) {
        AttentionOut a = scaled_dot_attention(col_slice(q, h * dh, dh), col_slice(k, h * dh, dh),
                                              col_slice(v, h * dh, dh), causal);
        if (diag) diag->attention_rows.push_back(a.weights);
        outs.push_back(a.out);
      }
      DiffArray attn = b.wo.forward(detail::concat_heads(std::move(outs)));
      x = add(x, scatter_add_rows(drop(attn), valid, l));
      x = add(x, drop(b.down.forward(gelu(b.up.forward(b.ln2.forward(x))))));
    }
    return head.forward(ln_f.forward(x));
  }
};

/// Mean of the instruction-prefix embeddings, excluding placeholder and pad
/// positions. Returns a (1, d) row for stacking into a per-graph matrix.
inline DiffArray instruction_summary(const ModalitySequence& seq) {
  seq.validate();
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < seq.instruction_len; ++i) {
    if (seq.token_ids[i] == kPlaceholderId || seq.token_ids[i] == kPadId) continue;
    rows.push_back(i);
  }
  if (rows.empty()) throw Error("empty instruction");
  DiffArray sel = gather_rows(seq.embeddings, rows);
  DiffArray mean = scale(col_sums(sel), 1.0 / static_cast<double>(rows.size()));
  return reshape(mean, Shape{1, seq.embeddings.cols()});
}

/// Assemble the teacher-forced training sequence [instruction ; target].
/// labels[t] supervises the next token: it is target[j] where j = t+1 mapped
/// into the target span, kept only where the loss mask is nonzero.
inline ModalitySequence build_training_sequence(const ToyDecoder& dec,
                                                const std::vector<int>& instruction_ids,
                                                const AugmentedSample& aug) {
  ModalitySequence seq;
  seq.token_ids = instruction_ids;
  seq.token_ids.insert(seq.token_ids.end(), aug.target.begin(), aug.target.end());
  const std::size_t l = seq.token_ids.size();
  const std::size_t il = instruction_ids.size();
  seq.instruction_len = il;
  seq.attention_mask.assign(l, 1);
  seq.labels.assign(l, kIgnoreIndex);
  for (std::size_t t = 0; t + 1 < l; ++t) {
    const std::size_t nxt = t + 1;
    if (nxt >= il && aug.loss_mask[nxt - il] != 0.0) {
      seq.labels[t] = seq.token_ids[nxt];
    }
  }
  seq.embeddings = dec.embed(seq.token_ids);
  seq.placeholders = find_placeholders(instruction_ids, kPlaceholderId);
  seq.validate();
  return seq;
}

/// Masked NLL of a (possibly injected) sequence under the decoder.
inline MaskedNll sequence_loss(const ToyDecoder& dec, const ModalitySequence& seq,
                               Rng* train_rng = nullptr) {
  seq.validate();
  DiffArray logits = dec.forward_embedded(seq.embeddings, seq.attention_mask, train_rng);
  const std::size_t l = seq.length();
  std::vector<int> targets(l, 0);
  std::vector<double> mask(l, 0.0);
  for (std::size_t t = 0; t < l; ++t) {
    if (seq.labels[t] != kIgnoreIndex) {
      targets[t] = seq.labels[t];
      mask[t] = 1.0;
    }
  }
  return masked_nll(logits, targets, mask);
}

}  // namespace atompatch
