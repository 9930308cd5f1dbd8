#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <set>
#include <string>
#include <vector>

#include "atompatch/chem/atom_graph.hpp"
#include "atompatch/chem/fiber.hpp"
#include "atompatch/chem/graph_json.hpp"
#include "atompatch/chem/mol_layout.hpp"
#include "atompatch/chem/pdb.hpp"
#include "atompatch/chem/smiles.hpp"

using namespace atompatch;
using Catch::Approx;

namespace {

struct SmilesCase {
  const char* smiles;
  std::size_t atoms;
  std::size_t bonds;
};

// Hand-counted heavy-atom / bond totals.
const std::vector<SmilesCase>& smiles_corpus() {
  static const std::vector<SmilesCase> cases{
      {"C", 1, 0},
      {"CC", 2, 1},
      {"CCO", 3, 2},
      {"C=C", 2, 1},
      {"C#N", 2, 1},
      {"CC(C)C", 4, 3},
      {"c1ccccc1", 6, 6},
      {"Cc1ccccc1", 7, 7},
      {"c1ccncc1", 6, 6},
      {"C1CCCCC1", 6, 6},
      {"CC(=O)O", 4, 3},
      {"CC(=O)OC", 5, 4},
      {"ClCCl", 3, 2},
      {"FC(F)F", 4, 3},
      {"C1CC1", 3, 3},
      {"N#N", 2, 1},
      {"O=C=O", 3, 2},
      {"c1ccc2ccccc2c1", 10, 11},
      {"[NH4+]", 1, 0},
      {"CCCCCCCC", 8, 7},
      {"C%10CC%10", 3, 3},
      {"COC", 3, 2},
      {"CSC", 3, 2},
      {"BrCCBr", 4, 3},
      {"CC(C)(C)C", 5, 4},
  };
  return cases;
}

std::string pdb_line(int serial, const std::string& name, const std::string& res, char chain,
                     int resseq, double x, double y, double z, const std::string& elem) {
  char buf[128];
  std::snprintf(buf, sizeof(buf),
                "ATOM  %5d %-4s %3s %c%4d    %8.3f%8.3f%8.3f  1.00  0.00          %2s",
                serial, name.c_str(), res.c_str(), chain, resseq, x, y, z, elem.c_str());
  return buf;
}

double dist3(const std::array<double, 3>& a, const std::array<double, 3>& b) {
  const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
  return std::sqrt(dx * dx + dy * dy + dz * dz);
}

}  // namespace

TEST_CASE("smiles corpus parses to the hand-counted graphs") {
  for (const auto& c : smiles_corpus()) {
    INFO("smiles: " << c.smiles);
    auto res = parse_smiles(c.smiles);
    CHECK(res.graph.size() == c.atoms);
    CHECK(res.graph.edges.size() == c.bonds);
    CHECK(res.graph.modality == Modality::kMolecule);
    for (const auto& a : res.graph.atoms) {
      CHECK((a.name == "ALIPH" || a.name == "AROM"));
      CHECK(a.residue == "MOL");
    }
  }
}

TEST_CASE("smiles details: aromatic flags, brackets, bond orders") {
  auto benzene = parse_smiles("c1ccccc1");
  for (const auto& inf : benzene.info) CHECK(inf.aromatic);
  for (const auto& a : benzene.graph.atoms) CHECK(a.name == "AROM");

  auto toluene = parse_smiles("Cc1ccccc1");
  CHECK_FALSE(toluene.info[0].aromatic);
  CHECK(toluene.graph.atoms[0].name == "ALIPH");
  CHECK(toluene.info[1].aromatic);

  auto ammonium = parse_smiles("[NH4+]");
  CHECK(ammonium.graph.atoms[0].element == 7);
  CHECK(ammonium.info[0].explicit_h == 4);
  CHECK(ammonium.info[0].charge == 1);

  auto hydroxide = parse_smiles("[OH-]");
  CHECK(hydroxide.info[0].charge == -1);
  CHECK(hydroxide.info[0].explicit_h == 1);

  auto acetic = parse_smiles("CC(=O)O");
  REQUIRE(acetic.bond_order.size() == 3);
  CHECK(acetic.bond_order[0] == 1);  // C-C
  CHECK(acetic.bond_order[1] == 2);  // C=O
  CHECK(acetic.bond_order[2] == 1);  // C-O

  auto hcn = parse_smiles("C#N");
  CHECK(hcn.bond_order[0] == 3);

  // pyridine keeps one nitrogen
  auto pyridine = parse_smiles("c1ccncc1");
  std::size_t n_count = 0;
  for (const auto& a : pyridine.graph.atoms) {
    if (a.element == 7) ++n_count;
  }
  CHECK(n_count == 1);
}

TEST_CASE("malformed smiles report the error class and byte offset") {
  auto offset_of = [](const std::string& s) -> std::size_t {
    try {
      parse_smiles(s);
    } catch (const ParseError& e) {
      return e.offset;
    }
    FAIL("expected ParseError");
    return static_cast<std::size_t>(-1);
  };

  REQUIRE_THROWS_WITH(parse_smiles("C("),
                      Catch::Matchers::ContainsSubstring("unbalanced parenthesis"));
  CHECK(offset_of("C(") == 1);

  REQUIRE_THROWS_WITH(parse_smiles("C)"),
                      Catch::Matchers::ContainsSubstring("unbalanced parenthesis"));
  CHECK(offset_of("C)") == 1);

  REQUIRE_THROWS_WITH(parse_smiles("C1CC"),
                      Catch::Matchers::ContainsSubstring("unmatched ring closure"));
  CHECK(offset_of("C1CC") == 1);

  REQUIRE_THROWS_WITH(parse_smiles("Xx"),
                      Catch::Matchers::ContainsSubstring("unknown atom symbol"));
  CHECK(offset_of("Xx") == 0);

  REQUIRE_THROWS_WITH(parse_smiles("C/C=C\\C"),
                      Catch::Matchers::ContainsSubstring("unsupported feature: stereo bond"));
  CHECK(offset_of("C/C=C\\C") == 1);

  REQUIRE_THROWS_WITH(parse_smiles("[13C]"),
                      Catch::Matchers::ContainsSubstring("isotope"));
  REQUIRE_THROWS_WITH(parse_smiles("C.C"),
                      Catch::Matchers::ContainsSubstring("disconnected components"));
  REQUIRE_THROWS_WITH(parse_smiles("[O-2]"),
                      Catch::Matchers::ContainsSubstring("multi-unit charge"));
  REQUIRE_THROWS_WITH(parse_smiles("[C@H](C)C"),
                      Catch::Matchers::ContainsSubstring("stereochemistry"));
  REQUIRE_THROWS_WITH(parse_smiles("=C"),
                      Catch::Matchers::ContainsSubstring("bond with no preceding atom"));
  REQUIRE_THROWS_WITH(parse_smiles(""), Catch::Matchers::ContainsSubstring("empty SMILES"));
  REQUIRE_THROWS_WITH(parse_smiles("C%1C"),
                      Catch::Matchers::ContainsSubstring("malformed %nn ring closure"));
  REQUIRE_THROWS_WITH(parse_smiles("C1C1"),
                      Catch::Matchers::ContainsSubstring("duplicate bond"));
}

TEST_CASE("embedding satisfies the distance contract on the whole corpus") {
  for (const auto& c : smiles_corpus()) {
    INFO("smiles: " << c.smiles);
    auto res = parse_smiles(c.smiles);
    AtomGraph g = res.graph;
    embed_molecule(g, 1234);
    REQUIRE(g.has_coords());

    std::set<std::pair<std::size_t, std::size_t>> bonded(g.edges.begin(), g.edges.end());
    for (const auto& e : g.edges) {
      const double d = dist3(g.coords[e.first], g.coords[e.second]);
      INFO("bond " << e.first << "-" << e.second << " d=" << d);
      CHECK(d >= 1.0);
      CHECK(d <= 1.8);
    }
    for (std::size_t i = 0; i < g.size(); ++i) {
      for (std::size_t j = i + 1; j < g.size(); ++j) {
        if (bonded.count({i, j})) continue;
        const double d = dist3(g.coords[i], g.coords[j]);
        INFO("nonbonded " << i << "-" << j << " d=" << d);
        CHECK(d >= 1.8);
      }
    }
  }
}

TEST_CASE("embedding is deterministic per seed and centered") {
  auto res = parse_smiles("CC(=O)OC");
  AtomGraph g1 = res.graph, g2 = res.graph, g3 = res.graph;
  embed_molecule(g1, 7);
  embed_molecule(g2, 7);
  embed_molecule(g3, 8);
  for (std::size_t i = 0; i < g1.size(); ++i) {
    for (int k = 0; k < 3; ++k) CHECK(g1.coords[i][k] == g2.coords[i][k]);
  }
  bool any_diff = false;
  for (std::size_t i = 0; i < g1.size(); ++i) {
    for (int k = 0; k < 3; ++k) {
      if (g1.coords[i][k] != g3.coords[i][k]) any_diff = true;
    }
  }
  CHECK(any_diff);

  double cx = 0, cy = 0, cz = 0;
  for (const auto& p : g1.coords) {
    cx += p[0];
    cy += p[1];
    cz += p[2];
  }
  CHECK(std::fabs(cx) <= 1e-9);
  CHECK(std::fabs(cy) <= 1e-9);
  CHECK(std::fabs(cz) <= 1e-9);

  // center_coords is idempotent
  auto before = g1.coords;
  center_coords(g1);
  for (std::size_t i = 0; i < g1.size(); ++i) {
    for (int k = 0; k < 3; ++k) CHECK(g1.coords[i][k] == Approx(before[i][k]).margin(1e-12));
  }
}

TEST_CASE("disconnected graphs are rejected by the embedder") {
  AtomGraph g;
  g.modality = Modality::kMolecule;
  for (int i = 0; i < 4; ++i) {
    Atom a;
    a.element = 6;
    a.name = "ALIPH";
    a.residue = "MOL";
    g.atoms.push_back(a);
  }
  g.edges = {{0, 1}, {2, 3}};
  REQUIRE_THROWS_WITH(embed_molecule(g, 1),
                      Catch::Matchers::ContainsSubstring("disconnected molecule"));
}

TEST_CASE("radius graph connects exactly the pairs under the cutoff") {
  AtomGraph g;
  for (int i = 0; i < 3; ++i) {
    Atom a;
    a.element = 6;
    g.atoms.push_back(a);
  }
  g.coords = {{0, 0, 0}, {0, 0, 2.0}, {0, 0, 5.0}};
  radius_graph(g, 2.5);
  REQUIRE(g.edges.size() == 1);
  CHECK(g.edges[0] == std::make_pair<std::size_t, std::size_t>(0, 1));
  radius_graph(g, 10.0);
  CHECK(g.edges.size() == 3);
}

TEST_CASE("pdb fixed columns parse into atoms with protein flags") {
  std::string content;
  content += "HEADER    TEST\n";
  content += pdb_line(1, " N", "ALA", 'A', 1, 11.104, 6.134, -6.504, "N") + "\n";
  content += pdb_line(2, " CA", "ALA", 'A', 1, 12.560, 6.351, -6.344, "C") + "\n";
  content += pdb_line(3, " C", "ALA", 'A', 1, 13.276, 5.032, -6.051, "C") + "\n";
  content += pdb_line(4, " O", "ALA", 'A', 1, 12.643, 3.975, -6.034, "O") + "\n";
  content += pdb_line(5, " CB", "ALA", 'A', 1, 13.123, 6.994, -7.612, "C") + "\n";
  content += "HETATM    6  O   HOH A 101      0.000   0.000   0.000           O\n";
  content += "TER\n";
  content += pdb_line(7, " N", "GLY", 'A', 2, 14.601, 5.041, -5.823, "N") + "\n";

  AtomGraph g = parse_pdb(content);
  REQUIRE(g.size() == 6);  // HETATM skipped
  CHECK(g.modality == Modality::kProtein);
  CHECK(g.atoms[0].name == "N");
  CHECK(g.atoms[0].element == 7);
  CHECK(g.atoms[1].name == "CA");
  CHECK(g.atoms[1].element == 6);
  CHECK(g.atoms[1].flags.backbone);
  CHECK(g.atoms[1].flags.phos_or_ca);
  CHECK(g.atoms[4].name == "CB");
  CHECK_FALSE(g.atoms[4].flags.backbone);
  CHECK(g.atoms[5].residue == "GLY");
  CHECK(g.atoms[5].residue_index == 2);
  CHECK(g.atoms[0].chain == 'A');
  CHECK(g.coords[0][0] == Approx(11.104));
  CHECK(g.coords[3][2] == Approx(-6.034));
}

TEST_CASE("pdb element inference from names when element columns are absent") {
  // truncate at column 54: no element field
  std::string l1 = pdb_line(1, " CA", "GLY", 'A', 1, 1.0, 2.0, 3.0, "").substr(0, 54);
  std::string l2 = pdb_line(2, " OXT", "GLY", 'A', 1, 2.0, 2.0, 3.0, "").substr(0, 54);
  AtomGraph g = parse_pdb(l1 + "\n" + l2 + "\n");
  REQUIRE(g.size() == 2);
  CHECK(g.atoms[0].element == 6);
  CHECK(g.atoms[1].element == 8);
}

TEST_CASE("pdb nucleic naming with primes sets sugar-phosphate flags") {
  std::string content;
  content += pdb_line(1, " P", "DG", 'B', 7, 1.0, 2.0, 3.0, "P") + "\n";
  content += pdb_line(2, " O5'", "DG", 'B', 7, 2.0, 2.5, 3.0, "O") + "\n";
  content += pdb_line(3, " C1'", "DG", 'B', 7, 3.0, 2.0, 3.0, "C") + "\n";
  content += pdb_line(4, " N9", "DG", 'B', 7, 4.0, 2.0, 3.0, "N") + "\n";
  content += pdb_line(5, " O2*", "DG", 'B', 7, 5.0, 2.0, 3.0, "O") + "\n";
  AtomGraph g = parse_pdb(content);
  CHECK(g.modality == Modality::kNucleic);
  CHECK(g.atoms[0].flags.phos_or_ca);
  CHECK(g.atoms[0].flags.backbone);
  CHECK(g.atoms[1].flags.backbone);
  CHECK(g.atoms[2].flags.backbone);
  CHECK_FALSE(g.atoms[3].flags.backbone);
  CHECK(g.atoms[4].name == "O2'");  // legacy star normalized
  CHECK(g.atoms[0].chain == 'B');
}

TEST_CASE("pdb errors carry line numbers") {
  REQUIRE_THROWS_WITH(parse_pdb("ATOM      1  N   ALA A   1      11.1\n"),
                      Catch::Matchers::ContainsSubstring("line 1") &&
                          Catch::Matchers::ContainsSubstring("too short"));

  std::string bad = pdb_line(1, " N", "ALA", 'A', 1, 1.0, 2.0, 3.0, "N");
  bad.replace(33, 3, "a.b");  // corrupt the x field
  REQUIRE_THROWS_WITH(parse_pdb("REMARK\n" + bad + "\n"),
                      Catch::Matchers::ContainsSubstring("line 2") &&
                          Catch::Matchers::ContainsSubstring("bad coordinate field"));

  REQUIRE_THROWS_WITH(parse_pdb("HEADER    EMPTY\nEND\n"),
                      Catch::Matchers::ContainsSubstring("no ATOM records"));
}

TEST_CASE("fiber helix places every residue by the exact rise and twist") {
  for (const std::string kind : {"dna", "rna"}) {
    const bool rna = (kind == "rna");
    const std::string seq = rna ? "ACGU" : "ACGT";
    AtomGraph g = fiber_graph(seq, kind);
    const FiberParams p = fiber_params(kind);
    const double twist = p.twist_deg * kPi / 180.0;

    std::size_t ai = 0;
    for (std::size_t i = 0; i < seq.size(); ++i) {
      const auto tmpl = nucleotide_template(seq[i], rna);
      const double ct = std::cos(twist * static_cast<double>(i));
      const double st = std::sin(twist * static_cast<double>(i));
      for (const auto& t : tmpl) {
        REQUIRE(ai < g.size());
        CHECK(g.coords[ai][0] == Approx(ct * t.x - st * t.y).margin(1e-12));
        CHECK(g.coords[ai][1] == Approx(st * t.x + ct * t.y).margin(1e-12));
        CHECK(g.coords[ai][2] ==
              Approx(t.z + p.rise * static_cast<double>(i)).margin(1e-12));
        CHECK(g.atoms[ai].residue_index == static_cast<int>(i) + 1);
        ++ai;
      }
    }
    REQUIRE(ai == g.size());
  }
}

TEST_CASE("fiber parameters and per-base atom counts") {
  CHECK(fiber_params("dna").rise == 3.38);
  CHECK(fiber_params("dna").twist_deg == 36.0);
  CHECK(fiber_params("rna").rise == 2.81);
  CHECK(fiber_params("rna").twist_deg == 32.7);

  CHECK(nucleotide_template('A', false).size() == 21);
  CHECK(nucleotide_template('G', false).size() == 22);
  CHECK(nucleotide_template('C', false).size() == 19);
  CHECK(nucleotide_template('T', false).size() == 20);
  CHECK(nucleotide_template('A', true).size() == 22);
  CHECK(nucleotide_template('U', true).size() == 20);

  AtomGraph g = fiber_graph("ACGT", "dna");
  CHECK(g.size() == 21 + 19 + 22 + 20);
  CHECK(g.modality == Modality::kNucleic);
  CHECK(g.atoms[0].name == "P");
  CHECK(g.atoms[0].flags.phos_or_ca);
  CHECK(g.atoms[0].flags.backbone);

  // DNA has no O2'; RNA does
  bool dna_o2 = false;
  for (const auto& a : g.atoms) {
    if (a.name == "O2'") dna_o2 = true;
  }
  CHECK_FALSE(dna_o2);
  AtomGraph r = fiber_graph("AA", "rna");
  std::size_t o2 = 0;
  for (const auto& a : r.atoms) {
    if (a.name == "O2'") ++o2;
  }
  CHECK(o2 == 2);

  // residue labels differ between the backbones
  CHECK(g.atoms[0].residue == "DA");
  CHECK(r.atoms[0].residue == "A");
}

TEST_CASE("fiber alphabet violations name the offending base and position") {
  REQUIRE_THROWS_WITH(fiber_graph("AU", "dna"),
                      Catch::Matchers::ContainsSubstring("alphabet violation: U at position 1"));
  REQUIRE_THROWS_WITH(fiber_graph("TTT", "rna"),
                      Catch::Matchers::ContainsSubstring("alphabet violation: T at position 0"));
  REQUIRE_THROWS_WITH(fiber_graph("", "dna"),
                      Catch::Matchers::ContainsSubstring("empty fiber sequence"));
  REQUIRE_THROWS_WITH(fiber_graph("ACGT", "xna"),
                      Catch::Matchers::ContainsSubstring("unknown fiber kind"));
}

TEST_CASE("batching keeps per-graph atom ranges contiguous and round-trips") {
  auto m1 = parse_smiles("CCO").graph;
  embed_molecule(m1, 1);
  auto m2 = parse_smiles("C1CC1").graph;
  embed_molecule(m2, 2);
  AtomGraph f = fiber_graph("AC", "dna");
  radius_graph(f, 10.0);

  BatchedGraph b = batch_graphs({m1, m2, f});
  REQUIRE(b.num_graphs() == 3);
  CHECK(b.offsets == (std::vector<std::size_t>{0, 3, 6, 6 + f.size()}));
  CHECK(b.size() == m1.size() + m2.size() + f.size());
  for (std::size_t i = 0; i < b.size(); ++i) {
    CHECK(b.graph_of[i] == (i < 3 ? 0u : (i < 6 ? 1u : 2u)));
  }
  for (const auto& e : b.edges) {
    CHECK(b.graph_of[e.first] == b.graph_of[e.second]);
  }

  auto back = unbatch_graphs(b);
  REQUIRE(back.size() == 3);
  for (std::size_t g = 0; g < 3; ++g) {
    const AtomGraph& orig = (g == 0 ? m1 : (g == 1 ? m2 : f));
    REQUIRE(back[g].size() == orig.size());
    REQUIRE(back[g].edges.size() == orig.edges.size());
    CHECK(back[g].modality == orig.modality);
    for (std::size_t i = 0; i < orig.size(); ++i) {
      CHECK(back[g].atoms[i].element == orig.atoms[i].element);
      CHECK(back[g].atoms[i].name == orig.atoms[i].name);
      for (int k = 0; k < 3; ++k) CHECK(back[g].coords[i][k] == orig.coords[i][k]);
    }
    for (std::size_t e = 0; e < orig.edges.size(); ++e) {
      CHECK(back[g].edges[e] == orig.edges[e]);
    }
  }

  AtomGraph no_coords = parse_smiles("CC").graph;
  REQUIRE_THROWS_WITH(batch_graphs({m1, no_coords}),
                      Catch::Matchers::ContainsSubstring("graph 1 has no coordinates"));
}

TEST_CASE("graph json round-trips with six-decimal coordinates") {
  AtomGraph g = parse_smiles("CC(=O)O").graph;
  embed_molecule(g, 99);
  g.coords[0][0] = 1.23456789;  // force visible rounding

  nlohmann::json j = graph_to_json(g);
  CHECK(j["modality"] == "molecule");
  CHECK(j["coords"][0][0].get<double>() == Approx(1.234568).margin(1e-12));

  AtomGraph back = graph_from_json(j);
  REQUIRE(back.size() == g.size());
  REQUIRE(back.edges.size() == g.edges.size());
  CHECK(back.modality == g.modality);
  for (std::size_t i = 0; i < g.size(); ++i) {
    CHECK(back.atoms[i].element == g.atoms[i].element);
    CHECK(back.atoms[i].name == g.atoms[i].name);
    CHECK(back.atoms[i].residue == g.atoms[i].residue);
    CHECK(back.atoms[i].flags.backbone == g.atoms[i].flags.backbone);
    CHECK(back.atoms[i].flags.phos_or_ca == g.atoms[i].flags.phos_or_ca);
    for (int k = 0; k < 3; ++k) {
      CHECK(std::fabs(back.coords[i][k] - g.coords[i][k]) <= 5e-7);
    }
  }

  nlohmann::json missing = j;
  missing.erase("coords");
  REQUIRE_THROWS_WITH(graph_from_json(missing),
                      Catch::Matchers::ContainsSubstring("missing key 'coords'"));

  // fiber graph with flags round-trips too
  AtomGraph f = fiber_graph("AC", "rna");
  radius_graph(f, 8.0);
  AtomGraph fback = graph_from_json(graph_to_json(f));
  CHECK(fback.modality == Modality::kNucleic);
  CHECK(fback.edges.size() == f.edges.size());
  CHECK(fback.atoms[0].flags.phos_or_ca);
}
