#pragma once

// Fixed-column parser for PDB ATOM records. Only ATOM lines are consumed;
// HETATM, TER and everything else is skipped. Columns follow the format spec:
// name 13-16, resName 18-20, chainID 22, resSeq 23-26, x/y/z 31-38/39-46/47-54,
// element 77-78 (inferred from the atom name when blank). Errors carry the
// 1-based line number.

#include <cctype>
#include <sstream>
#include <string>
#include <vector>

#include "atompatch/chem/atom_graph.hpp"
#include "atompatch/core/errors.hpp"

namespace atompatch {

namespace detail_pdb {

inline std::string trim(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

inline double parse_coord(const std::string& line, std::size_t col0, std::size_t ln) {
  const std::string field = trim(line.substr(col0, 8));
  if (field.empty()) {
    throw Error("PDB line " + std::to_string(ln) + ": bad coordinate field");
  }
  try {
    std::size_t used = 0;
    const double v = std::stod(field, &used);
    if (used != field.size()) {
      throw Error("PDB line " + std::to_string(ln) + ": bad coordinate field");
    }
    return v;
  } catch (const Error&) {
    throw;
  } catch (...) {
    throw Error("PDB line " + std::to_string(ln) + ": bad coordinate field");
  }
}

}  // namespace detail_pdb

inline AtomGraph parse_pdb(const std::string& content) {
  AtomGraph g;
  std::istringstream in(content);
  std::string line;
  std::size_t ln = 0;
  std::size_t nucleic_votes = 0;
  while (std::getline(in, line)) {
    ++ln;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.rfind("ATOM", 0) != 0) continue;
    // require the full record name field: "ATOM  " padded to 6 columns
    if (line.size() >= 6 && detail_pdb::trim(line.substr(0, 6)) != "ATOM") continue;
    if (line.size() < 54) {
      throw Error("PDB line " + std::to_string(ln) + ": line too short for coordinate columns");
    }
    const char alt_loc = line.size() > 16 ? line[16] : ' ';
    if (alt_loc != ' ' && alt_loc != 'A') continue;  // keep a single conformer

    Atom a;
    std::string name = detail_pdb::trim(line.substr(12, 4));
    for (auto& c : name) {
      if (c == '*') c = '\'';  // legacy prime convention
    }
    a.name = name;
    a.residue = detail_pdb::trim(line.substr(17, 3));
    a.chain = line.size() > 21 ? line[21] : 'A';
    const std::string res_seq = detail_pdb::trim(line.substr(22, 4));
    try {
      a.residue_index = res_seq.empty() ? 0 : std::stoi(res_seq);
    } catch (...) {
      throw Error("PDB line " + std::to_string(ln) + ": bad residue number");
    }

    const double x = detail_pdb::parse_coord(line, 30, ln);
    const double y = detail_pdb::parse_coord(line, 38, ln);
    const double z = detail_pdb::parse_coord(line, 46, ln);

    std::string elem_field = line.size() >= 78 ? detail_pdb::trim(line.substr(76, 2)) : "";
    int elem = 0;
    if (!elem_field.empty()) {
      elem = element_from_symbol(elem_field);
      if (elem == 0) {
        throw Error("PDB line " + std::to_string(ln) + ": unknown element symbol '" +
                    elem_field + "'");
      }
    } else {
      // infer from the first alphabetic character of the atom name; standard
      // biopolymer atoms are all single-letter elements
      char sym = 0;
      for (char c : name) {
        if (std::isalpha(static_cast<unsigned char>(c))) {
          sym = c;
          break;
        }
      }
      if (sym == 0) {
        throw Error("PDB line " + std::to_string(ln) + ": cannot infer element from name '" +
                    name + "'");
      }
      elem = element_from_symbol(std::string(1, sym));
      if (elem == 0) {
        throw Error("PDB line " + std::to_string(ln) + ": cannot infer element from name '" +
                    name + "'");
      }
    }
    a.element = elem;

    if (is_nucleic_residue(a.residue) || name.find('\'') != std::string::npos) {
      ++nucleic_votes;
    }
    g.atoms.push_back(a);
    g.coords.push_back({x, y, z});
  }

  if (g.atoms.empty()) throw Error("no ATOM records");

  g.modality = (2 * nucleic_votes > g.atoms.size()) ? Modality::kNucleic : Modality::kProtein;
  for (auto& a : g.atoms) {
    if (g.modality == Modality::kProtein) {
      a.flags.backbone = (a.name == "N" || a.name == "CA" || a.name == "C" || a.name == "O");
      a.flags.phos_or_ca = (a.name == "CA");
    } else {
      a.flags.backbone = is_nucleic_backbone_name(a.name);
      a.flags.phos_or_ca = (a.name == "P");
    }
  }
  g.validate();
  return g;
}

}  // namespace atompatch
