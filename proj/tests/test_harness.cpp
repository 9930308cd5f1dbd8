#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <catch2/catch_amalgamated.hpp>

#include "atompatch/bench/harness.hpp"

using namespace atompatch;
using Catch::Matchers::ContainsSubstring;

namespace {

std::filesystem::path tmp_dir() {
  auto p = std::filesystem::current_path() / "harness_tmp";
  std::filesystem::create_directories(p);
  return p;
}

ConnectorConfig small_connector() {
  ConnectorConfig c;
  c.encoder.hidden = 16;
  c.encoder.depth = 1;
  c.encoder.rbf_count = 4;
  c.encoder.dropout = 0.0;
  c.patcher.gate_hidden = 8;
  c.fusion.d_enc = 16;
  c.fusion.d_model = 32;
  c.fusion.d_llm = 32;
  c.fusion.heads = 2;
  c.fusion.blocks = 1;
  c.fusion.ffn_dim = 64;
  c.fusion.dropout = 0.0;
  c.decoder.vocab = 192;
  c.decoder.d_model = 32;
  c.decoder.heads = 2;
  c.decoder.blocks = 1;
  c.decoder.ffn_dim = 64;
  c.decoder.max_len = 64;
  c.decoder.dropout = 0.0;
  return c;
}

}  // namespace

TEST_CASE("uniform curve counts follow the selection rule") {
  BenchConfig cfg;
  cfg.patcher.rho = 0.1;
  cfg.patcher.k_max = 2048;

  const std::vector<std::size_t> sizes = {32, 128, 512, 2048, 8192, 40960};
  BudgetCurve c = token_budget_curve(sizes, GateMode::kUniform, cfg);
  REQUIRE(c.rows.size() == sizes.size() * 3);

  const std::vector<std::size_t> expected = {4, 13, 52, 205, 820, 2048};
  const std::size_t lang = language_token_budget();
  CHECK(lang > 0);
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    const BudgetRow& a = c.rows[3 * i];
    const BudgetRow& f = c.rows[3 * i + 1];
    const BudgetRow& p = c.rows[3 * i + 2];
    CHECK(a.method == "adaptive");
    CHECK(f.method == "fixed_k");
    CHECK(p.method == "per_node");
    CHECK(a.node_count == sizes[i]);
    CHECK(a.structural_tokens == expected[i]);
    CHECK(f.structural_tokens == 32);
    CHECK(p.structural_tokens == sizes[i]);
    for (const BudgetRow* r : {&a, &f, &p}) {
      CHECK(r->language_tokens == lang);
      CHECK(r->ratio ==
            static_cast<double>(r->structural_tokens) /
                static_cast<double>(r->structural_tokens + lang));
    }
  }
}

TEST_CASE("adaptive counts are monotone in N and win past the crossover") {
  BenchConfig cfg;
  std::vector<std::size_t> sizes;
  for (std::size_t n = 1; n <= 200; n += 7) sizes.push_back(n);
  for (std::size_t n : {1024ul, 20480ul, 40960ul, 81920ul}) sizes.push_back(n);

  BudgetCurve c = token_budget_curve(sizes, GateMode::kUniform, cfg);
  std::size_t prev = 0;
  std::vector<double> capped_ratios;
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    const BudgetRow& a = c.rows[3 * i];
    const BudgetRow& p = c.rows[3 * i + 2];
    CHECK(a.structural_tokens >= prev);
    prev = a.structural_tokens;
    if (sizes[i] > 10) CHECK(a.structural_tokens < p.structural_tokens);
    if (a.structural_tokens == cfg.patcher.k_max) {
      capped_ratios.push_back(static_cast<double>(a.structural_tokens) /
                              static_cast<double>(p.structural_tokens));
    }
  }
  REQUIRE(capped_ratios.size() >= 3);
  for (std::size_t i = 1; i < capped_ratios.size(); ++i) {
    CHECK(capped_ratios[i] < capped_ratios[i - 1]);
  }
}

TEST_CASE("csv output is exact and bit-stable") {
  BenchConfig cfg;
  BudgetCurve c = token_budget_curve({32, 128, 512}, GateMode::kUniform, cfg);
  const std::string csv = c.to_csv();
  CHECK(csv.rfind("node_count,method,structural_tokens,language_tokens,ratio\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 10);  // header + 9 rows

  BudgetCurve again = token_budget_curve({32, 128, 512}, GateMode::kUniform, cfg);
  CHECK(again.to_csv() == csv);

  auto path = tmp_dir() / "curve.csv";
  c.write_csv(path.string());
  std::ifstream in(path, std::ios::binary);
  std::string on_disk((std::istreambuf_iterator<char>(in)), {});
  CHECK(on_disk == csv);
}

TEST_CASE("curve input validation") {
  BenchConfig cfg;
  CHECK_THROWS_WITH(token_budget_curve({}, GateMode::kUniform, cfg), "empty node count list");
  CHECK_THROWS_WITH(token_budget_curve({8, 0}, GateMode::kUniform, cfg),
                    "node counts must be positive");
  CHECK_THROWS_WITH(token_budget_curve({8}, GateMode::kTrained, cfg),
                    "missing checkpoint in trained mode");
  CHECK_THROWS_WITH(gate_mode_from_name("magic"), ContainsSubstring("unknown gate mode"));
  CHECK(gate_mode_from_name("uniform") == GateMode::kUniform);
  CHECK(gate_mode_from_name("trained") == GateMode::kTrained);
}

TEST_CASE("bench graphs are sparse bonded chains") {
  AtomGraph g = bench_graph(64, 9);
  CHECK(g.size() == 64);
  CHECK(g.has_coords());
  CHECK(g.edges.size() >= 63);       // at least the chain
  CHECK(g.edges.size() <= 3 * 64);   // jitter never densifies the graph
  CHECK_THROWS_WITH(bench_graph(0, 1), "bench graph needs at least one atom");

  AtomGraph again = bench_graph(64, 9);
  for (std::size_t i = 0; i < g.coords.size(); ++i) {
    CHECK(g.coords[i] == again.coords[i]);
  }
  AtomGraph other = bench_graph(64, 10);
  CHECK(g.coords[0] != other.coords[0]);
}

TEST_CASE("trained mode runs the real gate against a checkpoint") {
  auto dir = tmp_dir();
  const std::string ckpt = (dir / "bench.ckpt.json").string();
  {
    Rng rng(11);
    ConnectorModel m(small_connector(), rng);
    ParamRegistry reg;
    m.register_all(reg);
    save_checkpoint(ckpt, reg);
  }

  BenchConfig cfg;
  cfg.connector = small_connector();
  cfg.checkpoint = ckpt;
  cfg.patcher.rho = 0.3;
  cfg.patcher.k_max = 8;
  cfg.seed = 4;

  const std::vector<std::size_t> sizes = {6, 24, 96};
  BudgetCurve c = token_budget_curve(sizes, GateMode::kTrained, cfg);
  REQUIRE(c.rows.size() == 9);
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    const BudgetRow& a = c.rows[3 * i];
    CHECK(a.method == "adaptive");
    CHECK(a.structural_tokens >= 1);
    CHECK(a.structural_tokens <= std::min<std::size_t>(cfg.patcher.k_max, sizes[i]));
    CHECK(c.rows[3 * i + 2].structural_tokens == sizes[i]);
  }

  BudgetCurve again = token_budget_curve(sizes, GateMode::kTrained, cfg);
  CHECK(again.to_csv() == c.to_csv());
}
