#pragma once

// Idealized single-strand fiber builder. Each nucleotide is a rigid template
// (heavy atoms only) placed on a helix: residue i is the template rotated by
// i * twist about z and translated by i * rise along z. B-form values for DNA
// (3.38 A rise, 36 deg twist), A-form-like values for RNA (2.81 A, 32.7 deg).
// Template coordinates are rough but self-consistent; the helix transform is
// exact and tested.

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "atompatch/chem/atom_graph.hpp"
#include "atompatch/core/errors.hpp"
#include "atompatch/core/nn_ops.hpp"

namespace atompatch {

struct FiberParams {
  double rise;
  double twist_deg;
};

inline FiberParams fiber_params(const std::string& kind) {
  if (kind == "dna") return {3.38, 36.0};
  if (kind == "rna") return {2.81, 32.7};
  throw Error("unknown fiber kind: " + kind + " (expected dna or rna)");
}

namespace detail_fiber {

struct TemplateAtom {
  const char* name;
  double x, y, z;
};

inline const std::vector<TemplateAtom>& backbone_atoms() {
  static const std::vector<TemplateAtom> v{
      {"P", 8.9, 0.0, 1.9},    {"OP1", 9.8, 0.9, 2.2},  {"OP2", 9.3, -1.3, 1.6},
      {"O5'", 7.6, 0.3, 1.2},  {"C5'", 6.8, 1.4, 1.5},  {"C4'", 5.5, 1.2, 0.8},
      {"O4'", 4.6, 0.3, 1.5},  {"C3'", 4.8, 2.4, 0.3},  {"O3'", 5.2, 2.7, -1.0},
      {"C2'", 3.4, 1.9, 0.2},  {"C1'", 3.3, 0.6, 0.9}};
  return v;
}

inline const TemplateAtom& ribose_o2() {
  static const TemplateAtom a{"O2'", 2.8, 2.8, 0.7};
  return a;
}

inline const std::vector<TemplateAtom>& purine_core() {
  static const std::vector<TemplateAtom> v{
      {"N9", 2.2, -0.3, 0.4}, {"C8", 2.2, -1.6, 0.7},  {"N7", 1.1, -2.2, 0.3},
      {"C5", 0.4, -1.2, -0.3}, {"C6", -0.9, -1.2, -0.9}, {"N1", -1.3, 0.0, -1.3},
      {"C2", -0.5, 1.1, -1.1}, {"N3", 0.7, 1.2, -0.6},  {"C4", 1.1, 0.0, -0.1}};
  return v;
}

inline const std::vector<TemplateAtom>& pyrimidine_core() {
  static const std::vector<TemplateAtom> v{
      {"N1", 2.2, -0.3, 0.4}, {"C2", 1.6, -1.5, 0.1},  {"O2", 2.2, -2.5, 0.4},
      {"N3", 0.3, -1.5, -0.5}, {"C4", -0.4, -0.4, -0.9}, {"C5", 0.3, 0.8, -0.6},
      {"C6", 1.6, 0.8, 0.0}};
  return v;
}

inline std::vector<TemplateAtom> base_atoms(char base) {
  std::vector<TemplateAtom> v;
  switch (base) {
    case 'A':
      v = purine_core();
      v.push_back({"N6", -1.8, -2.3, -1.1});
      break;
    case 'G':
      v = purine_core();
      v.push_back({"O6", -1.8, -2.2, -1.2});
      v.push_back({"N2", -1.0, 2.3, -1.5});
      break;
    case 'C':
      v = pyrimidine_core();
      v.push_back({"N4", -1.7, -0.5, -1.5});
      break;
    case 'T':
      v = pyrimidine_core();
      v.push_back({"O4", -1.6, -0.4, -1.5});
      v.push_back({"C7", -0.4, 2.1, -1.0});
      break;
    case 'U':
      v = pyrimidine_core();
      v.push_back({"O4", -1.6, -0.4, -1.5});
      break;
  }
  return v;
}

}  // namespace detail_fiber

/// Template heavy atoms of one nucleotide in the helix frame of residue 0.
inline std::vector<detail_fiber::TemplateAtom> nucleotide_template(char base, bool rna) {
  std::vector<detail_fiber::TemplateAtom> atoms = detail_fiber::backbone_atoms();
  if (rna) atoms.push_back(detail_fiber::ribose_o2());
  for (const auto& a : detail_fiber::base_atoms(base)) atoms.push_back(a);
  return atoms;
}

/// Build an idealized single-strand fiber graph from a base sequence.
/// The sequence index in alphabet errors is 0-based.
inline AtomGraph fiber_graph(const std::string& sequence, const std::string& kind) {
  const FiberParams params = fiber_params(kind);
  const bool rna = (kind == "rna");
  if (sequence.empty()) throw Error("empty fiber sequence");

  std::string seq;
  seq.reserve(sequence.size());
  for (char c : sequence) seq += static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  const std::string alphabet = rna ? "ACGU" : "ACGT";
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (alphabet.find(seq[i]) == std::string::npos) {
      throw Error(std::string("alphabet violation: ") + seq[i] + " at position " +
                  std::to_string(i));
    }
  }

  AtomGraph g;
  g.modality = Modality::kNucleic;
  const double twist = params.twist_deg * kPi / 180.0;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    const double theta = twist * static_cast<double>(i);
    const double ct = std::cos(theta), st = std::sin(theta);
    const double dz = params.rise * static_cast<double>(i);
    const std::string residue = rna ? std::string(1, seq[i]) : std::string("D") + seq[i];
    for (const auto& t : nucleotide_template(seq[i], rna)) {
      Atom a;
      a.name = t.name;
      a.residue = residue;
      a.chain = 'A';
      a.residue_index = static_cast<int>(i) + 1;
      char sym = 0;
      for (const char* p = t.name; *p; ++p) {
        if (std::isalpha(static_cast<unsigned char>(*p))) {
          sym = *p;
          break;
        }
      }
      a.element = element_from_symbol(std::string(1, sym));
      a.flags.backbone = is_nucleic_backbone_name(a.name);
      a.flags.phos_or_ca = (a.name == "P");
      g.atoms.push_back(a);
      g.coords.push_back({ct * t.x - st * t.y, st * t.x + ct * t.y, t.z + dz});
    }
  }
  g.validate();
  return g;
}

}  // namespace atompatch
