#pragma once

// All-atom graph model shared by the three ingestion routes (small molecules,
// PDB chains, idealized fibers), plus the small closed vocabularies the
// encoder embeds: element classes, atom-name classes, residue classes.

#include <array>
#include <cctype>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "atompatch/core/diff_array.hpp"
#include "atompatch/core/errors.hpp"

namespace atompatch {

enum class Modality { kMolecule, kProtein, kNucleic };

inline const char* modality_name(Modality m) {
  switch (m) {
    case Modality::kMolecule: return "molecule";
    case Modality::kProtein: return "protein";
    case Modality::kNucleic: return "nucleic";
  }
  return "molecule";
}

inline Modality modality_from_name(const std::string& s) {
  if (s == "molecule") return Modality::kMolecule;
  if (s == "protein") return Modality::kProtein;
  if (s == "nucleic") return Modality::kNucleic;
  throw Error("unknown modality: " + s);
}

struct AtomFlags {
  bool backbone = false;
  bool phos_or_ca = false;  // phosphate P (nucleic) or C-alpha (protein)
};

struct Atom {
  int element = 6;          // atomic number
  std::string name;         // PDB-style atom name; ALIPH/AROM for molecules
  std::string residue;      // residue / MOL
  char chain = 'A';
  int residue_index = 1;
  AtomFlags flags;
};

struct AtomGraph {
  Modality modality = Modality::kMolecule;
  std::vector<Atom> atoms;
  std::vector<std::array<double, 3>> coords;                  // empty until embedded
  std::vector<std::pair<std::size_t, std::size_t>> edges;     // undirected, i < j

  std::size_t size() const { return atoms.size(); }
  bool has_coords() const { return coords.size() == atoms.size() && !atoms.empty(); }

  void validate() const {
    if (!coords.empty() && coords.size() != atoms.size()) {
      throw Error("coordinate count does not match atom count");
    }
    for (const auto& e : edges) {
      if (e.first >= atoms.size() || e.second >= atoms.size()) {
        throw Error("edge references missing atom");
      }
      if (e.first == e.second) throw Error("self-loop edge");
    }
  }
};

// ---------------------------------------------------------------------------
// element table

/// Atomic numbers with a dedicated class; everything else maps to misc.
inline constexpr std::array<int, 11> kKnownElements{1, 5, 6, 7, 8, 9, 15, 16, 17, 35, 53};
inline constexpr std::size_t kElementMiscClass = kKnownElements.size();
inline constexpr std::size_t kNumElementClasses = kKnownElements.size() + 1;

inline std::size_t element_class(int z) {
  for (std::size_t i = 0; i < kKnownElements.size(); ++i) {
    if (kKnownElements[i] == z) return i;
  }
  return kElementMiscClass;
}

inline int element_from_symbol(const std::string& sym_in) {
  std::string sym;
  for (char c : sym_in) {
    if (c != ' ') sym += static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  }
  if (sym == "H" || sym == "D") return 1;
  if (sym == "B") return 5;
  if (sym == "C") return 6;
  if (sym == "N") return 7;
  if (sym == "O") return 8;
  if (sym == "F") return 9;
  if (sym == "P") return 15;
  if (sym == "S") return 16;
  if (sym == "CL") return 17;
  if (sym == "BR") return 35;
  if (sym == "I") return 53;
  return 0;
}

inline std::string element_symbol(int z) {
  switch (z) {
    case 1: return "H";
    case 5: return "B";
    case 6: return "C";
    case 7: return "N";
    case 8: return "O";
    case 9: return "F";
    case 15: return "P";
    case 16: return "S";
    case 17: return "Cl";
    case 35: return "Br";
    case 53: return "I";
  }
  return "X" + std::to_string(z);
}

/// Covalent radius (Angstrom) used for layout bond-length targets.
inline double covalent_radius(int z) {
  switch (z) {
    case 1: return 0.31;
    case 5: return 0.84;
    case 6: return 0.76;
    case 7: return 0.71;
    case 8: return 0.66;
    case 9: return 0.57;
    case 15: return 1.07;
    case 16: return 1.05;
    case 17: return 1.02;
    case 35: return 1.20;
    case 53: return 1.39;
  }
  return 0.80;
}

// ---------------------------------------------------------------------------
// atom-name and residue vocabularies

/// Closed atom-name vocabulary. Molecules use the two hybridization buckets;
/// biopolymers use PDB-style names; anything else is MISC (last slot).
inline const std::vector<std::string>& atom_name_vocab() {
  static const std::vector<std::string> names{
      "ALIPH", "AROM",
      // protein backbone + C-beta
      "N", "CA", "C", "O", "CB",
      // sugar/phosphate
      "P", "OP1", "OP2", "O5'", "C5'", "C4'", "O4'", "C3'", "O3'", "C2'", "C1'", "O2'",
      // nucleobase
      "N9", "C8", "N7", "C5", "C6", "N1", "C2", "N3", "C4", "N6", "O6", "N2", "O2", "N4",
      "O4", "C7",
      "MISC"};
  return names;
}

inline std::size_t num_atom_name_classes() { return atom_name_vocab().size(); }

inline std::size_t atom_name_class(const std::string& name) {
  const auto& v = atom_name_vocab();
  for (std::size_t i = 0; i + 1 < v.size(); ++i) {
    if (v[i] == name) return i;
  }
  return v.size() - 1;  // MISC
}

inline const std::vector<std::string>& residue_vocab() {
  static const std::vector<std::string> names{
      "ALA", "ARG", "ASN", "ASP", "CYS", "GLN", "GLU", "GLY", "HIS", "ILE", "LEU", "LYS",
      "MET", "PHE", "PRO", "SER", "THR", "TRP", "TYR", "VAL",
      "DA", "DC", "DG", "DT", "A", "C", "G", "U",
      "MOL", "MISC"};
  return names;
}

inline std::size_t num_residue_classes() { return residue_vocab().size(); }

inline std::size_t residue_class(const std::string& res) {
  const auto& v = residue_vocab();
  for (std::size_t i = 0; i + 1 < v.size(); ++i) {
    if (v[i] == res) return i;
  }
  return v.size() - 1;  // MISC
}

inline bool is_nucleic_residue(const std::string& res) {
  return res == "DA" || res == "DC" || res == "DG" || res == "DT" || res == "A" ||
         res == "C" || res == "G" || res == "U";
}

/// Sugar-phosphate backbone atom names (O2' is a ribose substituent, not
/// counted as backbone).
inline bool is_nucleic_backbone_name(const std::string& name) {
  static const std::vector<std::string> names{"P",   "OP1", "OP2", "O5'", "C5'", "C4'",
                                              "O4'", "C3'", "O3'", "C2'", "C1'"};
  for (const auto& n : names) {
    if (n == name) return true;
  }
  return false;
}

// ---------------------------------------------------------------------------
// geometry helpers

/// Translate so the centroid is at the origin. Idempotent.
inline void center_coords(AtomGraph& g) {
  if (!g.has_coords()) throw Error("center_coords: graph has no coordinates");
  double cx = 0.0, cy = 0.0, cz = 0.0;
  for (const auto& p : g.coords) {
    cx += p[0];
    cy += p[1];
    cz += p[2];
  }
  const double n = static_cast<double>(g.coords.size());
  cx /= n;
  cy /= n;
  cz /= n;
  for (auto& p : g.coords) {
    p[0] -= cx;
    p[1] -= cy;
    p[2] -= cz;
  }
}

/// Replace edges with all pairs closer than cutoff. Requires coordinates.
inline void radius_graph(AtomGraph& g, double cutoff) {
  if (!g.has_coords()) throw Error("radius_graph: graph has no coordinates");
  if (cutoff <= 0.0) throw Error("radius_graph: cutoff must be positive");
  g.edges.clear();
  const double c2 = cutoff * cutoff;
  for (std::size_t i = 0; i < g.coords.size(); ++i) {
    for (std::size_t j = i + 1; j < g.coords.size(); ++j) {
      const double dx = g.coords[i][0] - g.coords[j][0];
      const double dy = g.coords[i][1] - g.coords[j][1];
      const double dz = g.coords[i][2] - g.coords[j][2];
      if (dx * dx + dy * dy + dz * dz < c2) g.edges.emplace_back(i, j);
    }
  }
}

// ---------------------------------------------------------------------------
// batching

/// Several graphs laid out back to back. Atom ranges are contiguous per graph
/// (offsets[g] .. offsets[g+1]) and edges use global atom indices.
struct BatchedGraph {
  std::vector<Atom> atoms;
  std::vector<std::array<double, 3>> coords;
  std::vector<std::pair<std::size_t, std::size_t>> edges;
  std::vector<std::size_t> graph_of;   // atom -> graph index
  std::vector<std::size_t> offsets;    // size G+1
  std::vector<Modality> modalities;

  std::size_t size() const { return atoms.size(); }
  std::size_t num_graphs() const { return modalities.size(); }
  std::size_t graph_size(std::size_t g) const { return offsets[g + 1] - offsets[g]; }

  DiffArray coord_matrix(bool requires_grad = false) const {
    std::vector<double> v;
    v.reserve(coords.size() * 3);
    for (const auto& p : coords) {
      v.push_back(p[0]);
      v.push_back(p[1]);
      v.push_back(p[2]);
    }
    return DiffArray(Shape{coords.size(), 3}, std::move(v), requires_grad);
  }
};

inline BatchedGraph batch_graphs(const std::vector<AtomGraph>& graphs) {
  if (graphs.empty()) throw Error("batch_graphs: empty graph list");
  BatchedGraph b;
  b.offsets.push_back(0);
  for (std::size_t g = 0; g < graphs.size(); ++g) {
    const auto& ag = graphs[g];
    ag.validate();
    if (!ag.has_coords()) {
      throw Error("batch_graphs: graph " + std::to_string(g) + " has no coordinates");
    }
    const std::size_t base = b.atoms.size();
    for (std::size_t i = 0; i < ag.size(); ++i) {
      b.atoms.push_back(ag.atoms[i]);
      b.coords.push_back(ag.coords[i]);
      b.graph_of.push_back(g);
    }
    for (const auto& e : ag.edges) {
      b.edges.emplace_back(base + e.first, base + e.second);
    }
    b.offsets.push_back(b.atoms.size());
    b.modalities.push_back(ag.modality);
  }
  return b;
}

inline std::vector<AtomGraph> unbatch_graphs(const BatchedGraph& b) {
  std::vector<AtomGraph> out(b.num_graphs());
  for (std::size_t g = 0; g < b.num_graphs(); ++g) {
    AtomGraph& ag = out[g];
    ag.modality = b.modalities[g];
    const std::size_t lo = b.offsets[g], hi = b.offsets[g + 1];
    ag.atoms.assign(b.atoms.begin() + lo, b.atoms.begin() + hi);
    ag.coords.assign(b.coords.begin() + lo, b.coords.begin() + hi);
  }
  for (const auto& e : b.edges) {
    const std::size_t g = b.graph_of[e.first];
    if (b.graph_of[e.second] != g) throw Error("unbatch: edge crosses graphs");
    out[g].edges.emplace_back(e.first - b.offsets[g], e.second - b.offsets[g]);
  }
  return out;
}

}  // namespace atompatch
