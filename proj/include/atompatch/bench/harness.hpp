#pragma once

// Token-budget scaling benchmark. For each structure size N, counts the
// structural tokens spent by three policies — instruction-conditioned
// adaptive anchors, a fixed query budget, and one token per node — and
// reports each count against a fixed language-token budget taken from the
// built-in corpus. Emits a bit-stable CSV.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "atompatch/chem/atom_graph.hpp"
#include "atompatch/core/errors.hpp"
#include "atompatch/core/rng.hpp"
#include "atompatch/model/patcher.hpp"
#include "atompatch/train/checkpoint.hpp"
#include "atompatch/train/corpus.hpp"
#include "atompatch/train/trainer.hpp"

namespace atompatch {

enum class GateMode { kUniform, kTrained };

inline GateMode gate_mode_from_name(const std::string& s) {
  if (s == "uniform") return GateMode::kUniform;
  if (s == "trained") return GateMode::kTrained;
  throw Error("unknown gate mode: " + s);
}

struct BenchConfig {
  PatcherConfig patcher;     // rho and k_max drive the adaptive method
  std::size_t fixed_k = 32;  // fixed query budget, spent regardless of N
  std::uint64_t seed = 0;
  std::string checkpoint;  // trained mode: saved connector parameters
  ConnectorConfig connector = ConnectorConfig::desk();  // shape of the checkpoint
  std::string instruction = "describe the structure of <geom>";
};

struct BudgetRow {
  std::size_t node_count = 0;
  std::string method;
  std::size_t structural_tokens = 0;
  std::size_t language_tokens = 0;
  double ratio = 0.0;  // structural / (structural + language)
};

struct BudgetCurve {
  std::vector<BudgetRow> rows;

  std::string to_csv() const {
    std::ostringstream out;
    out << "node_count,method,structural_tokens,language_tokens,ratio\n";
    char buf[32];
    for (const BudgetRow& r : rows) {
      std::snprintf(buf, sizeof buf, "%.17g", r.ratio);
      out << r.node_count << ',' << r.method << ',' << r.structural_tokens << ','
          << r.language_tokens << ',' << buf << '\n';
    }
    return out.str();
  }

  void write_csv(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write benchmark csv " + path);
    out << to_csv();
  }
};

/// Token count of the built-in instruction/answer corpus: the fixed language
/// budget every row is compared against.
inline std::size_t language_token_budget() {
  std::size_t n = 0;
  ToyVocab v;
  for (const TextGraphSample& s : toy_corpus()) {
    n += v.tokenize(s.instruction, true).size();
    n += v.tokenize(s.answer, true).size();
  }
  return n;
}

/// Synthetic all-atom chain of n nodes for trained-gate runs: bonded spacing
/// with a little deterministic jitter, so the radius graph stays sparse.
inline AtomGraph bench_graph(std::size_t n, std::uint64_t seed) {
  if (n == 0) throw Error("bench graph needs at least one atom");
  static constexpr int kCycle[4] = {6, 6, 7, 8};
  AtomGraph g;
  g.modality = Modality::kMolecule;
  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    Atom a;
    a.element = kCycle[i % 4];
    a.name = "ALIPH";
    a.residue = "MOL";
    g.atoms.push_back(a);
    const double t = static_cast<double>(i);
    g.coords.push_back({1.45 * t + rng.uniform(-0.05, 0.05),
                        0.45 * std::sin(1.9 * t) + rng.uniform(-0.05, 0.05),
                        0.45 * std::cos(1.3 * t) + rng.uniform(-0.05, 0.05)});
  }
  radius_graph(g, 2.2);
  g.validate();
  return g;
}

/// Label-free sequence holding just an instruction, for inference-style
/// patching runs (the summary feeding the gate needs real embeddings).
inline ModalitySequence instruction_only_sequence(const ToyDecoder& dec,
                                                  const std::vector<int>& instr_ids) {
  ModalitySequence seq;
  seq.token_ids = instr_ids;
  seq.embeddings = dec.embed(instr_ids);
  seq.attention_mask.assign(instr_ids.size(), std::uint8_t{1});
  seq.labels.assign(instr_ids.size(), kIgnoreIndex);
  seq.placeholders = find_placeholders(instr_ids, kPlaceholderId);
  seq.instruction_len = instr_ids.size();
  return seq;
}

namespace detail {

inline BudgetRow budget_row(std::size_t n, const char* method, std::size_t structural,
                            std::size_t language) {
  BudgetRow r;
  r.node_count = n;
  r.method = method;
  r.structural_tokens = structural;
  r.language_tokens = language;
  r.ratio = static_cast<double>(structural) / static_cast<double>(structural + language);
  return r;
}

/// Anchor count of one graph under the trained gate, via the full patcher.
inline std::size_t trained_anchor_count(const ConnectorModel& m, const AtomGraph& g,
                                        const std::vector<int>& instr_ids,
                                        const PatcherConfig& pcfg) {
  BatchedGraph b = batch_graphs({g});
  EncoderOutput enc = m.encoder.forward(b, batch_element_classes(b), b.coord_matrix(false));
  DiffArray z = instruction_summary(instruction_only_sequence(m.decoder, instr_ids));
  PatchOutput patch = run_patching(b, enc.node_features, enc.coords, z, m.gate, pcfg);
  std::size_t total = 0;
  for (std::size_t k : patch.counts) total += k;
  return total;
}

}  // namespace detail

inline BudgetCurve token_budget_curve(const std::vector<std::size_t>& node_counts, GateMode mode,
                                      const BenchConfig& cfg) {
  if (node_counts.empty()) throw Error("empty node count list");
  for (std::size_t n : node_counts) {
    if (n == 0) throw Error("node counts must be positive");
  }
  cfg.patcher.validate();
  if (cfg.fixed_k == 0) throw Error("fixed query budget must be positive");

  std::unique_ptr<ConnectorModel> model;
  std::vector<int> instr_ids;
  if (mode == GateMode::kTrained) {
    if (cfg.checkpoint.empty()) throw Error("missing checkpoint in trained mode");
    if (cfg.patcher.k_max > cfg.connector.fusion.max_slots) {
      throw Error("anchor budget exceeds fusion slot capacity");
    }
    Rng rng(cfg.seed);
    model = std::make_unique<ConnectorModel>(cfg.connector, rng);
    ParamRegistry reg;
    model->register_all(reg);
    load_checkpoint(cfg.checkpoint, reg);
    ToyVocab vocab = build_vocab(toy_corpus());
    instr_ids = vocab.tokenize(cfg.instruction);
  }

  const std::size_t language = language_token_budget();
  BudgetCurve curve;
  for (std::size_t n : node_counts) {
    std::size_t adaptive;
    if (mode == GateMode::kUniform) {
      adaptive = uniform_anchor_count(n, cfg.patcher.rho, cfg.patcher.k_max);
    } else {
      adaptive = detail::trained_anchor_count(*model, bench_graph(n, cfg.seed + n), instr_ids,
                                              cfg.patcher);
    }
    curve.rows.push_back(detail::budget_row(n, "adaptive", adaptive, language));
    curve.rows.push_back(detail::budget_row(n, "fixed_k", cfg.fixed_k, language));
    curve.rows.push_back(detail::budget_row(n, "per_node", n, language));
  }
  return curve;
}

}  // namespace atompatch
