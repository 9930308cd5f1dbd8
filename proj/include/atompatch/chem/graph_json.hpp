#pragma once

// JSON interchange for atom graphs:
// {"modality": "...", "atoms": [{element,name,residue,chain,residue_index,
//  flags:{backbone,phos_or_ca}}], "coords": [[x,y,z]...], "edges": [[i,j]...]}
// Coordinates are rounded to 6 decimals on write.

#include <cmath>
#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "atompatch/chem/atom_graph.hpp"
#include "atompatch/core/errors.hpp"

namespace atompatch {

inline double round6(double v) { return std::round(v * 1e6) / 1e6; }

inline nlohmann::json graph_to_json(const AtomGraph& g) {
  nlohmann::json j;
  j["modality"] = modality_name(g.modality);
  j["atoms"] = nlohmann::json::array();
  for (const auto& a : g.atoms) {
    nlohmann::json aj;
    aj["element"] = a.element;
    aj["name"] = a.name;
    aj["residue"] = a.residue;
    aj["chain"] = std::string(1, a.chain);
    aj["residue_index"] = a.residue_index;
    aj["flags"] = {{"backbone", a.flags.backbone}, {"phos_or_ca", a.flags.phos_or_ca}};
    j["atoms"].push_back(aj);
  }
  j["coords"] = nlohmann::json::array();
  for (const auto& p : g.coords) {
    j["coords"].push_back({round6(p[0]), round6(p[1]), round6(p[2])});
  }
  j["edges"] = nlohmann::json::array();
  for (const auto& e : g.edges) {
    j["edges"].push_back({e.first, e.second});
  }
  return j;
}

inline AtomGraph graph_from_json(const nlohmann::json& j) {
  for (const char* key : {"modality", "atoms", "coords", "edges"}) {
    if (!j.contains(key)) throw Error(std::string("graph JSON missing key '") + key + "'");
  }
  AtomGraph g;
  g.modality = modality_from_name(j.at("modality").get<std::string>());
  for (const auto& aj : j.at("atoms")) {
    Atom a;
    a.element = aj.at("element").get<int>();
    a.name = aj.at("name").get<std::string>();
    a.residue = aj.at("residue").get<std::string>();
    const std::string chain = aj.at("chain").get<std::string>();
    a.chain = chain.empty() ? 'A' : chain[0];
    a.residue_index = aj.at("residue_index").get<int>();
    if (aj.contains("flags")) {
      a.flags.backbone = aj.at("flags").value("backbone", false);
      a.flags.phos_or_ca = aj.at("flags").value("phos_or_ca", false);
    }
    g.atoms.push_back(a);
  }
  for (const auto& pj : j.at("coords")) {
    if (!pj.is_array() || pj.size() != 3) throw Error("graph JSON coordinate is not a triple");
    g.coords.push_back({pj[0].get<double>(), pj[1].get<double>(), pj[2].get<double>()});
  }
  for (const auto& ej : j.at("edges")) {
    if (!ej.is_array() || ej.size() != 2) throw Error("graph JSON edge is not a pair");
    g.edges.emplace_back(ej[0].get<std::size_t>(), ej[1].get<std::size_t>());
  }
  g.validate();
  return g;
}

inline void write_graph_file(const AtomGraph& g, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open file for writing: " + path);
  out << graph_to_json(g).dump(2) << "\n";
}

inline AtomGraph read_graph_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open graph file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw Error("invalid JSON in " + path + ": " + e.what());
  }
  return graph_from_json(j);
}

}  // namespace atompatch
