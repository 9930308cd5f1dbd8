#pragma once

// Three-stage training driver:
//   1. encoder_pretrain — masked reconstruction on atom graphs (encoder + heads)
//   2. alignment        — connector only (gate + fusion); encoder/decoder frozen
//   3. adaptation       — connector + decoder at a strictly smaller lr; encoder frozen
//
// Freezing is enforced by optimizing a prefix-selected parameter subset and
// verified bitwise after the run. Losses are sums over supervised targets, so
// accumulated micro-batch gradients equal the full-batch gradient exactly.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "atompatch/chem/atom_graph.hpp"
#include "atompatch/core/errors.hpp"
#include "atompatch/core/optimizer.hpp"
#include "atompatch/core/params.hpp"
#include "atompatch/core/rng.hpp"
#include "atompatch/model/adapter.hpp"
#include "atompatch/model/encoder.hpp"
#include "atompatch/model/lmtoy.hpp"
#include "atompatch/model/masking.hpp"
#include "atompatch/model/patcher.hpp"
#include "atompatch/model/pretrain_loss.hpp"
#include "atompatch/train/corpus.hpp"

namespace atompatch {

enum class Stage { kEncoderPretrain, kAlignment, kAdaptation };

inline const char* stage_name(Stage s) {
  switch (s) {
    case Stage::kEncoderPretrain: return "encoder_pretrain";
    case Stage::kAlignment: return "alignment";
    case Stage::kAdaptation: return "adaptation";
  }
  return "?";
}

struct StageConfig {
  Stage stage = Stage::kAlignment;
  double lr = 1e-4;
  std::size_t epochs = 4;
  std::size_t batch_size = 1;
  std::size_t grad_accum = 16;
  long warmup_steps = 100;
  double clip_norm = 1.0;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  double eval_ratio = 0.1;
  std::size_t eval_every = 100;
  std::size_t log_every = 10;
  std::size_t max_steps = 0;        // when nonzero, overrides epochs
  std::size_t mask_seed_cycle = 8;  // distinct maskings per graph (stage 1)
  bool mixed_modality = true;       // round-robin across modality shards
  bool supervise_delimiters = false;

  /// Which parameters the optimizer may touch; everything else is frozen.
  std::vector<std::string> trainable_prefixes() const {
    switch (stage) {
      case Stage::kEncoderPretrain: return {"encoder.", "heads."};
      case Stage::kAlignment: return {"gate.", "fusion."};
      case Stage::kAdaptation: return {"gate.", "fusion.", "decoder."};
    }
    return {};
  }

  AdamWConfig optimizer() const {
    AdamWConfig c;
    c.lr = lr;
    c.beta1 = beta1;
    c.beta2 = beta2;
    c.eps = adam_eps;
    c.weight_decay = weight_decay;
    c.clip_norm = clip_norm;
    c.warmup_steps = warmup_steps;
    return c;
  }

  void validate() const {
    if (lr <= 0.0) throw Error("stage learning rate must be positive");
    if (batch_size == 0 || grad_accum == 0) throw Error("stage batch settings must be positive");
    if (epochs == 0 && max_steps == 0) throw Error("stage must run at least one step");
    if (eval_ratio < 0.0 || eval_ratio >= 1.0) {
      throw Error("evaluation split ratio must be in [0,1)");
    }
    if (mask_seed_cycle == 0) throw Error("mask seed cycle must be positive");
    optimizer().validate();
  }

  std::string hash() const {
    std::ostringstream s;
    s.precision(17);
    s << stage_name(stage) << ';' << lr << ';' << epochs << ';' << batch_size << ';' << grad_accum
      << ';' << warmup_steps << ';' << clip_norm << ';' << weight_decay << ';' << beta1 << ';'
      << beta2 << ';' << adam_eps << ';' << seed << ';' << eval_ratio << ';' << eval_every << ';'
      << log_every << ';' << max_steps << ';' << mask_seed_cycle << ';' << mixed_modality << ';'
      << supervise_delimiters;
    const std::string c = s.str();
    const std::uint64_t h = fnv1a64(c.data(), c.size());
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
  }
};

struct StepLog {
  std::size_t step;
  double loss;
  double lr;
  double grad_norm;
};

struct EvalLog {
  std::size_t step;
  double value;
};

struct TrainReport {
  std::string stage;
  std::uint64_t seed = 0;
  std::string config_hash;
  double wall_seconds = 0.0;
  std::vector<StepLog> steps;
  std::vector<EvalLog> evals;
  std::string final_metric_name;
  double final_metric = 0.0;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["stage"] = stage;
    j["seed"] = seed;
    j["config_hash"] = config_hash;
    j["wall_seconds"] = wall_seconds;
    j["final_metric"] = {{"name", final_metric_name}, {"value", final_metric}};
    j["steps"] = nlohmann::json::array();
    for (const StepLog& s : steps) {
      j["steps"].push_back(
          {{"step", s.step}, {"loss", s.loss}, {"lr", s.lr}, {"grad_norm", s.grad_norm}});
    }
    j["evals"] = nlohmann::json::array();
    for (const EvalLog& e : evals) {
      j["evals"].push_back({{"step", e.step}, {"value", e.value}});
    }
    return j;
  }

  void write_json(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw Error("cannot write report " + path);
    out << to_json().dump(1) << "\n";
  }

  void write_csv(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw Error("cannot write report " + path);
    out << "step,loss,lr,grad_norm\n";
    out.precision(17);
    for (const StepLog& s : steps) {
      out << s.step << ',' << s.loss << ',' << s.lr << ',' << s.grad_norm << '\n';
    }
  }
};

/// Full model bundle: encoder, pretraining heads, gate, fusion stack, decoder.
struct ConnectorConfig {
  EncoderConfig encoder;
  PatcherConfig patcher;
  FusionConfig fusion;
  ToyDecoderConfig decoder;

  static ConnectorConfig desk() {
    ConnectorConfig c;
    c.encoder = EncoderConfig::desk();
    c.fusion = FusionConfig::desk();
    c.patcher.gate_hidden = 32;
    c.patcher.k_max = 64;
    c.decoder.dropout = 0.0;
    return c;
  }

  void validate() const {
    encoder.validate();
    patcher.validate();
    fusion.validate();
    decoder.validate();
    if (fusion.d_enc != encoder.hidden) {
      throw Error("fusion input width must match encoder hidden size");
    }
    if (fusion.d_llm != decoder.d_model) {
      throw Error("fusion output width must match decoder width");
    }
    if (patcher.k_max > fusion.max_slots) {
      throw Error("anchor budget exceeds fusion slot capacity");
    }
  }
};

struct ConnectorModel {
  ConnectorConfig cfg;
  Egnn encoder;
  EncoderHeads heads;
  PatchGate gate;
  FusionStack fusion;
  ToyDecoder decoder;

  ConnectorModel(const ConnectorConfig& config, Rng& rng)
      : cfg(config),
        encoder((config.validate(), config.encoder), rng),
        heads(config.encoder, rng),
        gate(config.encoder.hidden, config.decoder.d_model, config.patcher.gate_hidden, rng,
             config.patcher.dropout),
        fusion(config.fusion, rng),
        decoder(config.decoder, rng) {}

  void register_all(ParamRegistry& reg) const {
    encoder.register_params(reg, "encoder");
    heads.register_params(reg, "heads");
    gate.register_params(reg, "gate");
    fusion.register_params(reg, "fusion");
    decoder.register_params(reg, "decoder");
  }
};

namespace detail {

/// Visit order for one epoch: round-robin across modality shards when mixed,
/// otherwise corpus order.
inline std::vector<std::size_t> visit_order(const std::vector<Modality>& modality, bool mixed) {
  const std::size_t n = modality.size();
  std::vector<std::size_t> order;
  order.reserve(n);
  if (!mixed) {
    for (std::size_t i = 0; i < n; ++i) order.push_back(i);
    return order;
  }
  std::vector<Modality> kinds;
  std::vector<std::vector<std::size_t>> shards;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t s = 0;
    while (s < kinds.size() && kinds[s] != modality[i]) ++s;
    if (s == kinds.size()) {
      kinds.push_back(modality[i]);
      shards.emplace_back();
    }
    shards[s].push_back(i);
  }
  std::vector<std::size_t> heads(shards.size(), 0);
  while (order.size() < n) {
    for (std::size_t s = 0; s < shards.size(); ++s) {
      if (heads[s] < shards[s].size()) order.push_back(shards[s][heads[s]++]);
    }
  }
  return order;
}

/// Train/eval split: the eval set is the corpus tail.
inline std::size_t eval_count(const StageConfig& cfg, std::size_t n) {
  if (cfg.eval_ratio <= 0.0 || n < 2) return 0;
  const auto k = static_cast<std::size_t>(std::floor(cfg.eval_ratio * static_cast<double>(n)));
  return std::max<std::size_t>(1, k);
}

inline std::size_t total_steps(const StageConfig& cfg, std::size_t n_train) {
  if (cfg.max_steps > 0) return cfg.max_steps;
  const std::size_t per_step = cfg.batch_size * cfg.grad_accum;
  const std::size_t per_epoch = (n_train + per_step - 1) / per_step;
  return cfg.epochs * std::max<std::size_t>(1, per_epoch);
}

inline bool should_log(const StageConfig& cfg, std::size_t step, std::size_t total) {
  if (step == 1 || step == total) return true;
  return cfg.log_every > 0 && step % cfg.log_every == 0;
}

inline std::uint64_t mask_seed(const StageConfig& cfg, std::size_t sample, std::size_t step) {
  return cfg.seed + 1000003ull * (sample + 1) + (step - 1) % cfg.mask_seed_cycle;
}

[[noreturn]] inline void diverged(std::size_t step, const std::string& why) {
  throw Error("training diverged at step " + std::to_string(step) + ": " + why);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Stage 1: masked-reconstruction pretraining of the encoder.

inline TrainReport pretrain_encoder(const std::vector<AtomGraph>& corpus, Egnn& enc,
                                    EncoderHeads& heads, const StageConfig& cfg) {
  if (cfg.stage != Stage::kEncoderPretrain) {
    throw Error("config stage does not match the requested run");
  }
  cfg.validate();
  if (corpus.empty()) throw Error("empty training corpus");

  const auto t0 = std::chrono::steady_clock::now();
  std::vector<BatchedGraph> batches;
  std::vector<std::vector<std::size_t>> elems;
  std::vector<Modality> modality;
  for (const AtomGraph& g : corpus) {
    batches.push_back(batch_graphs({g}));
    elems.push_back(batch_element_classes(batches.back()));
    modality.push_back(g.modality);
  }

  const std::size_t n_eval = detail::eval_count(cfg, corpus.size());
  const std::size_t n_train = corpus.size() - n_eval;
  std::vector<Modality> train_modality(modality.begin(), modality.begin() + n_train);
  const std::vector<std::size_t> order = detail::visit_order(train_modality, cfg.mixed_modality);
  const std::size_t steps = detail::total_steps(cfg, n_train);

  ParamRegistry all;
  enc.register_params(all, "encoder");
  heads.register_params(all, "heads");
  AdamW opt(all.with_prefixes(cfg.trainable_prefixes()), cfg.optimizer());

  auto sample_loss = [&](std::size_t i, std::size_t step) {
    MaskedBatch mb = mask_regions(batches[i], enc.cfg.mask_fraction,
                                  detail::mask_seed(cfg, i, step), enc.cfg.mask_region_cap,
                                  enc.cfg.dir_noise_sigma);
    return pretrain_losses(enc, heads, batches[i], mb).total;
  };
  auto eval_loss = [&]() {  // mean pretraining loss over the held-out tail
    double sum = 0.0;
    for (std::size_t i = n_train; i < corpus.size(); ++i) {
      MaskedBatch mb = mask_regions(batches[i], enc.cfg.mask_fraction, cfg.seed + i,
                                    enc.cfg.mask_region_cap, enc.cfg.dir_noise_sigma);
      sum += pretrain_losses(enc, heads, batches[i], mb).total.value();
    }
    return sum / static_cast<double>(n_eval);
  };

  TrainReport report;
  report.stage = stage_name(cfg.stage);
  report.seed = cfg.seed;
  report.config_hash = cfg.hash();

  std::size_t cursor = 0;
  for (std::size_t step = 1; step <= steps; ++step) {
    all.zero_grad();
    double step_loss = 0.0;
    try {
      for (std::size_t micro = 0; micro < cfg.grad_accum; ++micro) {
        Tape tape;
        DiffArray loss;
        for (std::size_t s = 0; s < cfg.batch_size; ++s) {
          DiffArray l = sample_loss(order[cursor % order.size()], step);
          ++cursor;
          loss = loss.defined() ? add(loss, l) : l;
        }
        if (!std::isfinite(loss.value())) detail::diverged(step, "loss is not finite");
        tape.backward(loss);
        step_loss += loss.value();
      }
      StepInfo info = opt.step();
      if (detail::should_log(cfg, step, steps)) {
        report.steps.push_back(StepLog{step, step_loss, info.lr, info.grad_norm});
      }
    } catch (const Error& e) {
      const std::string what = e.what();
      if (what.rfind("training diverged", 0) == 0) throw;
      detail::diverged(step, what);
    }
    if (n_eval > 0 && cfg.eval_every > 0 && step % cfg.eval_every == 0) {
      report.evals.push_back(EvalLog{step, eval_loss()});
    }
  }

  // final metric: masked element accuracy over the training set, averaged
  // across the whole mask cycle actually seen during training
  double acc = 0.0;
  std::size_t terms = 0;
  for (std::size_t i = 0; i < n_train; ++i) {
    for (std::size_t c = 1; c <= cfg.mask_seed_cycle; ++c) {
      MaskedBatch mb = mask_regions(batches[i], enc.cfg.mask_fraction, detail::mask_seed(cfg, i, c),
                                    enc.cfg.mask_region_cap, enc.cfg.dir_noise_sigma);
      acc += pretrain_eval(enc, heads, batches[i], mb).accuracy;
      ++terms;
    }
  }
  report.final_metric_name = "masked_type_accuracy";
  report.final_metric = acc / static_cast<double>(terms);
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

// ---------------------------------------------------------------------------
// Stages 2 and 3: instruction-conditioned runs over the full pipeline.

struct PreparedSample {
  BatchedGraph batch;
  std::vector<std::size_t> elems;
  std::vector<int> instr_ids;
  AugmentedSample aug;
  Modality modality = Modality::kMolecule;
  std::size_t supervised = 0;
};

inline std::vector<PreparedSample> prepare_samples(const std::vector<TextGraphSample>& corpus,
                                                   ToyVocab& vocab, const StageConfig& cfg) {
  std::vector<std::vector<int>> pool = template_pool_ids(vocab);
  std::vector<PreparedSample> out;
  for (const TextGraphSample& s : corpus) {
    PreparedSample p;
    p.batch = batch_graphs({s.graph});
    p.elems = batch_element_classes(p.batch);
    p.instr_ids = vocab.tokenize(s.instruction);
    p.aug = build_augmented_target(p.instr_ids, vocab.tokenize(s.answer), pool, cfg.seed,
                                   cfg.supervise_delimiters);
    p.modality = s.graph.modality;
    for (double m : p.aug.loss_mask) {
      if (m != 0.0) ++p.supervised;
    }
    if (p.supervised == 0) throw Error("sample has no supervised tokens");
    out.push_back(std::move(p));
  }
  return out;
}

/// Summed masked NLL of one sample through encoder → patching → fusion →
/// injection → decoder.
inline MaskedNll connector_sample_loss(const ConnectorModel& m, const PreparedSample& s,
                                       Rng* train_rng = nullptr) {
  EncoderOutput enc = m.encoder.forward(s.batch, s.elems, s.batch.coord_matrix(false), train_rng);
  ModalitySequence seq = build_training_sequence(m.decoder, s.instr_ids, s.aug);
  DiffArray z = instruction_summary(seq);
  PatchOutput patch = run_patching(s.batch, enc.node_features, enc.coords, z, m.gate,
                                   m.cfg.patcher, /*with_membership=*/false, train_rng);
  RetrievedTokens ret = retrieve_geometry(patch, enc.node_features, s.batch, m.fusion, train_rng);
  InjectionResult inj = inject_tokens(seq, ret);
  return sequence_loss(m.decoder, inj.seq, train_rng);
}

/// Mean masked NLL per supervised token over a sample subset (no tape).
inline double connector_eval(const ConnectorModel& m, const std::vector<PreparedSample>& samples,
                             std::size_t begin, std::size_t end) {
  double loss = 0.0;
  double tokens = 0.0;
  for (std::size_t i = begin; i < end; ++i) {
    loss += connector_sample_loss(m, samples[i]).loss.value();
    tokens += static_cast<double>(samples[i].supervised);
  }
  if (tokens == 0.0) throw Error("no supervised tokens in evaluation split");
  return loss / tokens;
}

namespace detail {

inline TrainReport run_connector_stage(const std::vector<TextGraphSample>& corpus,
                                       ConnectorModel& model, const StageConfig& cfg) {
  cfg.validate();
  if (corpus.empty()) throw Error("empty training corpus");
  const auto t0 = std::chrono::steady_clock::now();

  ToyVocab vocab = build_vocab(corpus);
  std::vector<PreparedSample> samples = prepare_samples(corpus, vocab, cfg);

  const std::size_t n_eval = eval_count(cfg, samples.size());
  const std::size_t n_train = samples.size() - n_eval;
  std::vector<Modality> train_modality;
  for (std::size_t i = 0; i < n_train; ++i) train_modality.push_back(samples[i].modality);
  const std::vector<std::size_t> order = visit_order(train_modality, cfg.mixed_modality);
  const std::size_t steps = total_steps(cfg, n_train);

  ParamRegistry all;
  model.register_all(all);
  ParamRegistry frozen;
  for (const auto& it : all.items) {
    bool trainable = false;
    for (const std::string& p : cfg.trainable_prefixes()) {
      if (it.first.rfind(p, 0) == 0) trainable = true;
    }
    if (!trainable) frozen.items.push_back(it);
  }
  const auto frozen_before = frozen.snapshot();
  AdamW opt(all.with_prefixes(cfg.trainable_prefixes()), cfg.optimizer());

  TrainReport report;
  report.stage = stage_name(cfg.stage);
  report.seed = cfg.seed;
  report.config_hash = cfg.hash();

  std::size_t cursor = 0;
  for (std::size_t step = 1; step <= steps; ++step) {
    all.zero_grad();
    double step_loss = 0.0;
    try {
      for (std::size_t micro = 0; micro < cfg.grad_accum; ++micro) {
        Tape tape;
        DiffArray loss;
        for (std::size_t s = 0; s < cfg.batch_size; ++s) {
          DiffArray l = connector_sample_loss(model, samples[order[cursor % order.size()]]).loss;
          ++cursor;
          loss = loss.defined() ? add(loss, l) : l;
        }
        if (!std::isfinite(loss.value())) diverged(step, "loss is not finite");
        tape.backward(loss);
        step_loss += loss.value();
      }
      StepInfo info = opt.step();
      if (should_log(cfg, step, steps)) {
        report.steps.push_back(StepLog{step, step_loss, info.lr, info.grad_norm});
      }
    } catch (const Error& e) {
      const std::string what = e.what();
      if (what.rfind("training diverged", 0) == 0) throw;
      diverged(step, what);
    }
    if (n_eval > 0 && cfg.eval_every > 0 && step % cfg.eval_every == 0) {
      report.evals.push_back(EvalLog{step, connector_eval(model, samples, n_train, samples.size())});
    }
  }

  // freeze contract: frozen parameters must be bitwise untouched
  for (std::size_t i = 0; i < frozen.items.size(); ++i) {
    const auto& now = frozen.items[i].second.data();
    const auto& was = frozen_before[i].second;
    if (now.size() != was.size() ||
        std::memcmp(now.data(), was.data(), now.size() * sizeof(double)) != 0) {
      throw Error("frozen parameter " + frozen.items[i].first + " changed during " +
                  stage_name(cfg.stage));
    }
  }

  report.final_metric_name = "masked_nll_per_token";
  report.final_metric = connector_eval(model, samples, 0, n_train);
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

}  // namespace detail

inline TrainReport align_connector(const std::vector<TextGraphSample>& corpus,
                                   ConnectorModel& model, const StageConfig& cfg) {
  if (cfg.stage != Stage::kAlignment) {
    throw Error("config stage does not match the requested run");
  }
  return detail::run_connector_stage(corpus, model, cfg);
}

/// `alignment_lr` is the rate the preceding alignment stage used; adaptation
/// must run strictly below it.
inline TrainReport adapt_lm(const std::vector<TextGraphSample>& corpus, ConnectorModel& model,
                            const StageConfig& cfg, double alignment_lr = 1e-4) {
  if (cfg.stage != Stage::kAdaptation) {
    throw Error("config stage does not match the requested run");
  }
  if (cfg.lr >= alignment_lr) {
    throw Error("adaptation learning rate must be below the alignment learning rate");
  }
  return detail::run_connector_stage(corpus, model, cfg);
}

}  // namespace atompatch
