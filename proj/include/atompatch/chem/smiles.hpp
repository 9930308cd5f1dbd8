#pragma once

// Heavy-atom SMILES parser for the organic subset. Supported: B C N O P S F
// Cl Br I, aromatic b c n o p s, bracket atoms with an optional H count and a
// bare +/- charge, bonds - = # :, branches, ring closures (digits and %nn).
// Hydrogens are bookkeeping only and never materialized as graph atoms.
// Stereochemistry, isotopes, numeric/multiple charges, wildcards and
// dot-disconnection are rejected with the byte offset of the offending
// character.

#include <cctype>
#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "atompatch/chem/atom_graph.hpp"
#include "atompatch/core/errors.hpp"

namespace atompatch {

struct SmilesAtomInfo {
  bool aromatic = false;
  int explicit_h = -1;  // -1 = unspecified
  int charge = 0;
};

struct SmilesResult {
  AtomGraph graph;                     // molecule modality, bonds as edges, no coords
  std::vector<SmilesAtomInfo> info;    // per atom
  std::vector<int> bond_order;         // per edge: 1,2,3; aromatic bonds recorded as 1
};

namespace detail_smiles {

inline bool organic_symbol(const std::string& s, std::size_t pos, int* z, bool* aromatic,
                           std::size_t* len) {
  const char c = s[pos];
  // two-character symbols first
  if (c == 'C' && pos + 1 < s.size() && s[pos + 1] == 'l') {
    *z = 17;
    *aromatic = false;
    *len = 2;
    return true;
  }
  if (c == 'B' && pos + 1 < s.size() && s[pos + 1] == 'r') {
    *z = 35;
    *aromatic = false;
    *len = 2;
    return true;
  }
  switch (c) {
    case 'B': *z = 5; *aromatic = false; break;
    case 'C': *z = 6; *aromatic = false; break;
    case 'N': *z = 7; *aromatic = false; break;
    case 'O': *z = 8; *aromatic = false; break;
    case 'P': *z = 15; *aromatic = false; break;
    case 'S': *z = 16; *aromatic = false; break;
    case 'F': *z = 9; *aromatic = false; break;
    case 'I': *z = 53; *aromatic = false; break;
    case 'b': *z = 5; *aromatic = true; break;
    case 'c': *z = 6; *aromatic = true; break;
    case 'n': *z = 7; *aromatic = true; break;
    case 'o': *z = 8; *aromatic = true; break;
    case 'p': *z = 15; *aromatic = true; break;
    case 's': *z = 16; *aromatic = true; break;
    default: return false;
  }
  *len = 1;
  return true;
}

}  // namespace detail_smiles

inline SmilesResult parse_smiles(const std::string& s) {
  if (s.empty()) throw ParseError("empty SMILES", 0);

  SmilesResult res;
  res.graph.modality = Modality::kMolecule;

  struct OpenRing {
    std::size_t atom;
    int order;          // 0 = unspecified
    std::size_t offset;  // where the closure digit appeared
  };

  std::vector<std::size_t> branch_stack;   // offsets of '(' for error reporting
  std::vector<long> prev_stack;            // previous-atom stack, -1 sentinel
  long prev = -1;
  int pending_order = 0;                   // bond symbol awaiting the next atom
  std::size_t pending_offset = 0;
  std::map<int, OpenRing> open_rings;

  auto add_atom = [&](int z, bool aromatic, int h, int charge) {
    Atom a;
    a.element = z;
    a.name = aromatic ? "AROM" : "ALIPH";
    a.residue = "MOL";
    a.chain = 'A';
    a.residue_index = 1;
    res.graph.atoms.push_back(a);
    SmilesAtomInfo inf;
    inf.aromatic = aromatic;
    inf.explicit_h = h;
    inf.charge = charge;
    res.info.push_back(inf);
    return static_cast<long>(res.graph.atoms.size() - 1);
  };

  auto add_bond = [&](std::size_t a, std::size_t b, int order, std::size_t offset) {
    if (a == b) throw ParseError("ring closure bonds atom to itself", offset);
    const std::size_t lo = std::min(a, b), hi = std::max(a, b);
    for (const auto& e : res.graph.edges) {
      if (e.first == lo && e.second == hi) throw ParseError("duplicate bond", offset);
    }
    res.graph.edges.emplace_back(lo, hi);
    res.bond_order.push_back(order == 0 ? 1 : order);
  };

  auto connect_new_atom = [&](long idx, std::size_t offset) {
    if (prev >= 0) {
      add_bond(static_cast<std::size_t>(prev), static_cast<std::size_t>(idx), pending_order,
               offset);
    } else if (pending_order != 0) {
      throw ParseError("bond with no preceding atom", pending_offset);
    }
    pending_order = 0;
    prev = idx;
  };

  auto ring_closure = [&](int digit, std::size_t offset) {
    if (prev < 0) throw ParseError("ring closure with no preceding atom", offset);
    auto it = open_rings.find(digit);
    if (it == open_rings.end()) {
      open_rings[digit] = OpenRing{static_cast<std::size_t>(prev), pending_order, offset};
    } else {
      int order = pending_order != 0 ? pending_order : it->second.order;
      add_bond(it->second.atom, static_cast<std::size_t>(prev), order, offset);
      open_rings.erase(it);
    }
    pending_order = 0;
  };

  std::size_t i = 0;
  while (i < s.size()) {
    const char c = s[i];
    int z = 0;
    bool aromatic = false;
    std::size_t len = 0;

    if (detail_smiles::organic_symbol(s, i, &z, &aromatic, &len)) {
      connect_new_atom(add_atom(z, aromatic, -1, 0), i);
      i += len;
    } else if (c == '[') {
      const std::size_t open_off = i;
      ++i;
      if (i < s.size() && std::isdigit(static_cast<unsigned char>(s[i]))) {
        throw ParseError("unsupported feature: isotope label", i);
      }
      if (i >= s.size()) throw ParseError("unterminated bracket atom", open_off);
      // element symbol: one uppercase (+optional lowercase) or one aromatic lowercase
      int bz = 0;
      bool barom = false;
      if (std::isupper(static_cast<unsigned char>(s[i]))) {
        std::string sym(1, s[i]);
        if (i + 1 < s.size() && std::islower(static_cast<unsigned char>(s[i + 1])) &&
            s[i + 1] != 'h') {
          // try two-letter symbol, fall back to one letter
          const std::string two = sym + s[i + 1];
          if (element_from_symbol(two) != 0) {
            bz = element_from_symbol(two);
            i += 2;
          }
        }
        if (bz == 0) {
          bz = element_from_symbol(sym);
          if (bz == 0) throw ParseError("unknown atom symbol", i);
          ++i;
        }
      } else if (std::islower(static_cast<unsigned char>(s[i]))) {
        std::size_t l2 = 0;
        if (!detail_smiles::organic_symbol(s, i, &bz, &barom, &l2) || !barom) {
          throw ParseError("unknown atom symbol", i);
        }
        i += l2;
      } else {
        throw ParseError("unknown atom symbol", i);
      }
      int h = 0;
      if (i < s.size() && s[i] == 'H') {
        ++i;
        h = 1;
        if (i < s.size() && std::isdigit(static_cast<unsigned char>(s[i]))) {
          h = s[i] - '0';
          ++i;
        }
      }
      int charge = 0;
      if (i < s.size() && (s[i] == '+' || s[i] == '-')) {
        const char sign = s[i];
        ++i;
        if (i < s.size() && (std::isdigit(static_cast<unsigned char>(s[i])) || s[i] == sign)) {
          throw ParseError("unsupported feature: multi-unit charge", i);
        }
        charge = (sign == '+') ? 1 : -1;
      }
      if (i < s.size() && s[i] == '@') {
        throw ParseError("unsupported feature: stereochemistry", i);
      }
      if (i >= s.size() || s[i] != ']') {
        throw ParseError("unterminated bracket atom", open_off);
      }
      ++i;
      connect_new_atom(add_atom(bz, barom, h, charge), open_off);
    } else if (c == '-' || c == '=' || c == '#' || c == ':') {
      if (pending_order != 0) throw ParseError("two bond symbols in a row", i);
      pending_order = (c == '-') ? 1 : (c == '=') ? 2 : (c == '#') ? 3 : 1;
      pending_offset = i;
      ++i;
    } else if (c == '(') {
      if (prev < 0) throw ParseError("branch with no preceding atom", i);
      branch_stack.push_back(i);
      prev_stack.push_back(prev);
      ++i;
    } else if (c == ')') {
      if (branch_stack.empty()) throw ParseError("unbalanced parenthesis", i);
      if (pending_order != 0) throw ParseError("dangling bond before ')'", i);
      branch_stack.pop_back();
      prev = prev_stack.back();
      prev_stack.pop_back();
      ++i;
    } else if (std::isdigit(static_cast<unsigned char>(c))) {
      ring_closure(c - '0', i);
      ++i;
    } else if (c == '%') {
      if (i + 2 >= s.size() || !std::isdigit(static_cast<unsigned char>(s[i + 1])) ||
          !std::isdigit(static_cast<unsigned char>(s[i + 2]))) {
        throw ParseError("malformed %nn ring closure", i);
      }
      ring_closure((s[i + 1] - '0') * 10 + (s[i + 2] - '0'), i);
      i += 3;
    } else if (c == '/' || c == '\\') {
      throw ParseError("unsupported feature: stereo bond", i);
    } else if (c == '@') {
      throw ParseError("unsupported feature: stereochemistry", i);
    } else if (c == '.') {
      throw ParseError("unsupported feature: disconnected components", i);
    } else if (c == '*') {
      throw ParseError("unsupported feature: wildcard atom", i);
    } else if (std::isalpha(static_cast<unsigned char>(c))) {
      throw ParseError("unknown atom symbol", i);
    } else {
      throw ParseError("unexpected character", i);
    }
  }

  if (!branch_stack.empty()) throw ParseError("unbalanced parenthesis", branch_stack.back());
  if (!open_rings.empty()) {
    throw ParseError("unmatched ring closure", open_rings.begin()->second.offset);
  }
  if (pending_order != 0) throw ParseError("dangling bond at end of input", pending_offset);
  if (res.graph.atoms.empty()) throw ParseError("no atoms in SMILES", 0);
  res.graph.validate();
  return res;
}

}  // namespace atompatch
