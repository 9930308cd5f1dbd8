#pragma once

// Training corpora: a JSONL loader for (instruction, graph, answer) triples
// and small built-in sets used by the overfit runs and the benchmark.

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "atompatch/chem/atom_graph.hpp"
#include "atompatch/chem/fiber.hpp"
#include "atompatch/chem/graph_json.hpp"
#include "atompatch/chem/mol_layout.hpp"
#include "atompatch/chem/smiles.hpp"
#include "atompatch/core/errors.hpp"
#include "atompatch/model/lmtoy.hpp"

namespace atompatch {

struct TextGraphSample {
  std::string instruction;  // contains the <geom> marker
  std::string answer;
  AtomGraph graph;
};

/// One JSON object per line: {"instruction": ..., "graph_file": ..., "answer": ...}.
/// Graph paths are resolved relative to the corpus file's directory.
inline std::vector<TextGraphSample> load_corpus_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open corpus file " + path);
  const std::filesystem::path base = std::filesystem::path(path).parent_path();

  std::vector<TextGraphSample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception&) {
      throw Error("corpus line " + std::to_string(lineno) + " is not valid JSON");
    }
    for (const char* key : {"instruction", "graph_file", "answer"}) {
      if (!j.contains(key) || !j[key].is_string()) {
        throw Error("corpus line " + std::to_string(lineno) + " missing field '" + key + "'");
      }
    }
    TextGraphSample s;
    s.instruction = j["instruction"].get<std::string>();
    s.answer = j["answer"].get<std::string>();
    std::filesystem::path gp(j["graph_file"].get<std::string>());
    if (gp.is_relative()) gp = base / gp;
    s.graph = read_graph_file(gp.string());
    out.push_back(std::move(s));
  }
  if (out.empty()) throw Error("corpus file " + path + " has no samples");
  return out;
}

namespace detail {

inline AtomGraph corpus_molecule(const std::string& smiles, std::uint64_t seed) {
  AtomGraph g = parse_smiles(smiles).graph;
  embed_molecule(g, seed);
  radius_graph(g, 2.2);
  return g;
}

inline AtomGraph corpus_fiber(const std::string& seq, const std::string& kind) {
  AtomGraph g = fiber_graph(seq, kind);
  radius_graph(g, 2.2);
  return g;
}

}  // namespace detail

/// Four small molecules for encoder pretraining runs.
inline std::vector<AtomGraph> encoder_corpus() {
  return {
      detail::corpus_molecule("CCO", 3),
      detail::corpus_molecule("CC(=O)O", 5),
      detail::corpus_molecule("c1ccccc1", 7),
      detail::corpus_molecule("CC(C)O", 9),
  };
}

/// Eight instruction/answer samples over molecules, DNA, and RNA.
inline std::vector<TextGraphSample> toy_corpus() {
  std::vector<TextGraphSample> out;
  auto add = [&](std::string ins, std::string ans, AtomGraph g) {
    out.push_back(TextGraphSample{std::move(ins), std::move(ans), std::move(g)});
  };
  add("count the heavy atoms in <geom>", "three heavy atoms",
      detail::corpus_molecule("CCO", 3));
  add("name the functional group in <geom>", "a carboxylic acid group",
      detail::corpus_molecule("CC(=O)O", 5));
  add("describe the ring in <geom>", "an aromatic six membered ring",
      detail::corpus_molecule("c1ccccc1", 7));
  add("where is the hydroxyl in <geom>", "on the central carbon",
      detail::corpus_molecule("CC(C)O", 9));
  add("read the bases of <geom>", "adenine then cytosine",
      detail::corpus_fiber("AC", "dna"));
  add("is <geom> single stranded", "yes a short single strand",
      detail::corpus_fiber("TG", "dna"));
  add("which backbone does <geom> carry", "a ribose phosphate backbone",
      detail::corpus_fiber("AU", "rna"));
  add("count the residues in <geom>", "two residues",
      detail::corpus_fiber("GC", "rna"));
  return out;
}

/// Vocabulary covering the corpus text and the reasoning filler pool.
inline ToyVocab build_vocab(const std::vector<TextGraphSample>& corpus) {
  ToyVocab v;
  for (const std::string& t : reasoning_templates()) v.tokenize(t, /*grow=*/true);
  for (const TextGraphSample& s : corpus) {
    v.tokenize(s.instruction, true);
    v.tokenize(s.answer, true);
  }
  return v;
}

/// The filler pool pre-tokenized against a vocabulary.
inline std::vector<std::vector<int>> template_pool_ids(ToyVocab& v) {
  std::vector<std::vector<int>> out;
  for (const std::string& t : reasoning_templates()) out.push_back(v.tokenize(t, true));
  return out;
}

}  // namespace atompatch
