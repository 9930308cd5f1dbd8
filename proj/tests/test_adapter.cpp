#include <cmath>
#include <cstdint>
#include <vector>

#include <catch2/catch_amalgamated.hpp>

#include "atompatch/chem/atom_graph.hpp"
#include "atompatch/chem/mol_layout.hpp"
#include "atompatch/chem/smiles.hpp"
#include "atompatch/core/gradcheck.hpp"
#include "atompatch/model/adapter.hpp"

using namespace atompatch;

namespace {

DiffArray randn(Shape shape, Rng& rng, bool rg = false, double sd = 1.0) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return DiffArray(std::move(shape), rng.normal_vec(n, 0.0, sd), rg);
}

struct FuseFixture {
  BatchedGraph batch;
  DiffArray x, p, z;
  PatchGate gate;
  PatcherConfig pcfg;
  FusionConfig fcfg;
  FusionStack stack;

  explicit FuseFixture(std::uint64_t seed, std::size_t blocks = 2) {
    AtomGraph g1 = parse_smiles("CC(=O)O").graph;
    embed_molecule(g1, 3);
    radius_graph(g1, 2.2);
    AtomGraph g2 = parse_smiles("CCO").graph;
    embed_molecule(g2, 5);
    radius_graph(g2, 2.2);
    batch = batch_graphs({g1, g2});

    Rng rng(seed);
    fcfg.d_enc = 5;
    fcfg.d_model = 8;
    fcfg.d_llm = 6;
    fcfg.heads = 2;
    fcfg.blocks = blocks;
    fcfg.ffn_dim = 16;
    fcfg.dropout = 0.0;
    x = randn(Shape{batch.size(), fcfg.d_enc}, rng, true);
    p = batch.coord_matrix(true);
    z = randn(Shape{2, 4}, rng, true);
    gate = PatchGate(fcfg.d_enc, 4, 8, rng);
    pcfg.rho = 0.6;
    pcfg.k_max = 3;
    stack = FusionStack(fcfg, rng);
  }
};

}  // namespace

TEST_CASE("fusion config validation") {
  CHECK_NOTHROW(FusionConfig::desk().validate());

  FusionConfig c = FusionConfig::desk();
  c.blocks = 0;
  CHECK_THROWS_WITH(c.validate(), "fusion block count must be at least 1");

  c = FusionConfig::desk();
  c.heads = 3;  // 64 % 3 != 0
  CHECK_THROWS_WITH(c.validate(), "fusion head count must divide the model width");

  c = FusionConfig::desk();
  c.d_llm = 0;
  CHECK_THROWS_WITH(c.validate(), "fusion widths must be positive");

  c = FusionConfig::desk();
  c.dropout = 1.0;
  CHECK_THROWS_WITH(c.validate(), "fusion dropout must be in [0,1)");
}

TEST_CASE("attention rows are normalized in every block") {
  FuseFixture f(401);
  PatchOutput patch = run_patching(f.batch, f.x, f.p, f.z, f.gate, f.pcfg);

  FusionDiagnostics diag;
  RetrievedTokens ret = retrieve_geometry(patch, f.x, f.batch, f.stack, nullptr, &diag);

  // per graph and block: one matrix per self head, one per cross head
  REQUIRE(diag.attention_rows.size() == 2 * f.fcfg.blocks * 2 * f.fcfg.heads);
  for (const DiffArray& w : diag.attention_rows) {
    for (std::size_t i = 0; i < w.rows(); ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < w.cols(); ++j) s += w.at(i, j);
      CHECK(std::abs(s - 1.0) <= 1e-12);
    }
  }

  REQUIRE(ret.rows.size() == 2);
  for (std::size_t g = 0; g < 2; ++g) {
    CHECK(ret.counts[g] == patch.counts[g]);
    CHECK(ret.rows[g].rows() == ret.padded_k);
    CHECK(ret.rows[g].cols() == f.fcfg.d_llm);
    CHECK(ret.rows[g].all_finite());
  }
}

TEST_CASE("a single key forces unit attention weight") {
  Rng rng(17);
  DiffArray q = randn(Shape{3, 4}, rng);
  DiffArray k = randn(Shape{1, 4}, rng);
  DiffArray v = randn(Shape{1, 4}, rng);

  DiffArray out = detail::heads_attend(q, k, v, 2, nullptr);
  REQUIRE(out.rows() == 3);
  REQUIRE(out.cols() == 4);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 4; ++j) {
      CHECK(out.at(i, j) == v.at(0, j));  // weight is exactly one
    }
  }

  // through the whole stack: cross-attention against a single node
  FuseFixture f(402);
  DiffArray tokens = randn(Shape{2, f.fcfg.d_enc}, rng);
  DiffArray node = randn(Shape{1, f.fcfg.d_enc}, rng);
  FusionDiagnostics diag;
  f.stack.refine(tokens, node, nullptr, &diag);
  std::size_t cross_seen = 0;
  for (const DiffArray& w : diag.attention_rows) {
    if (w.cols() != 1) continue;  // self-attention over the two tokens
    ++cross_seen;
    for (std::size_t i = 0; i < w.rows(); ++i) CHECK(w.at(i, 0) == 1.0);
  }
  CHECK(cross_seen == f.fcfg.blocks * f.fcfg.heads);
}

TEST_CASE("graphs in a batch are refined in isolation") {
  FuseFixture f(403);
  PatchOutput patch = run_patching(f.batch, f.x, f.p, f.z, f.gate, f.pcfg);
  RetrievedTokens ret = retrieve_geometry(patch, f.x, f.batch, f.stack);

  // corrupt every graph-1 input; graph 0 must not move at all
  DiffArray x2(f.x.shape(), f.x.data(), false);
  DiffArray z2(f.z.shape(), f.z.data(), false);
  DiffArray p2(f.p.shape(), f.p.data(), false);
  for (std::size_t i = f.batch.offsets[1]; i < f.batch.size(); ++i) {
    for (std::size_t c = 0; c < f.fcfg.d_enc; ++c) x2.data()[i * f.fcfg.d_enc + c] += 7.0;
    for (std::size_t c = 0; c < 3; ++c) p2.data()[i * 3 + c] += 3.0;
  }
  for (std::size_t c = 0; c < 4; ++c) z2.data()[1 * 4 + c] -= 5.0;

  PatchOutput patch2 = run_patching(f.batch, x2, p2, z2, f.gate, f.pcfg);
  RetrievedTokens ret2 = retrieve_geometry(patch2, x2, f.batch, f.stack);

  REQUIRE(ret2.counts[0] == ret.counts[0]);
  CHECK(patch2.anchors[0] == patch.anchors[0]);
  for (std::size_t r = 0; r < ret.counts[0]; ++r) {
    for (std::size_t c = 0; c < f.fcfg.d_llm; ++c) {
      CHECK(ret2.rows[0].at(r, c) == ret.rows[0].at(r, c));
    }
  }
}

TEST_CASE("padded token rows are exact zeros") {
  FuseFixture f(404);
  Rng rng(9);

  PatchOutput patch;
  patch.tokens = {randn(Shape{1, f.fcfg.d_enc}, rng), randn(Shape{3, f.fcfg.d_enc}, rng)};
  patch.counts = {1, 3};
  patch.anchors = {{0}, {0, 1, 2}};

  RetrievedTokens ret = retrieve_geometry(patch, f.x, f.batch, f.stack);
  REQUIRE(ret.padded_k == 3);
  REQUIRE(ret.rows[0].rows() == 3);
  for (std::size_t r = 1; r < 3; ++r) {
    for (std::size_t c = 0; c < f.fcfg.d_llm; ++c) CHECK(ret.rows[0].at(r, c) == 0.0);
  }
  // the valid row is a real, generally nonzero embedding
  double mag = 0.0;
  for (std::size_t c = 0; c < f.fcfg.d_llm; ++c) mag += std::abs(ret.rows[0].at(0, c));
  CHECK(mag > 0.0);
}

TEST_CASE("refine rejects empty or mismatched input") {
  FuseFixture f(405);
  Rng rng(1);
  DiffArray nodes = randn(Shape{4, f.fcfg.d_enc}, rng);
  CHECK_THROWS_WITH(f.stack.refine(DiffArray::zeros(Shape{0, f.fcfg.d_enc}), nodes),
                    "empty patch set");
  CHECK_THROWS_WITH(f.stack.refine(randn(Shape{2, 4}, rng), nodes),
                    "fusion input width mismatch");
}

TEST_CASE("placeholder discovery") {
  CHECK(find_placeholders({5, 9, 7, 9}, 9) == std::vector<std::size_t>{1, 3});
  CHECK(find_placeholders({5, 7}, 9).empty());
  CHECK(find_placeholders({9, 9}, 9) == std::vector<std::size_t>{0, 1});
}

namespace {

/// Sequence [10, <g>, 11, 12, <g>, 13] with the first placeholder inside the
/// three-token instruction prefix.
ModalitySequence toy_sequence(Rng& rng, std::size_t d) {
  ModalitySequence seq;
  seq.token_ids = {10, 1, 11, 12, 1, 13};
  seq.embeddings = randn(Shape{6, d}, rng);
  seq.attention_mask.assign(6, 1);
  seq.labels = {20, kIgnoreIndex, 21, 22, kIgnoreIndex, 23};
  seq.placeholders = find_placeholders(seq.token_ids, 1);
  seq.instruction_len = 3;
  return seq;
}

RetrievedTokens toy_tokens(Rng& rng, std::size_t d, std::vector<std::size_t> counts) {
  RetrievedTokens t;
  t.counts = counts;
  for (std::size_t c : counts) t.padded_k = std::max(t.padded_k, c);
  for (std::size_t c : counts) {
    DiffArray rows = randn(Shape{t.padded_k, d}, rng);
    for (std::size_t r = c; r < t.padded_k; ++r) {
      for (std::size_t j = 0; j < d; ++j) rows.data()[r * d + j] = 0.0;
    }
    t.rows.push_back(rows);
  }
  return t;
}

}  // namespace

TEST_CASE("token injection splices geometry rows into the sequence") {
  Rng rng(55);
  const std::size_t d = 3;
  ModalitySequence seq = toy_sequence(rng, d);
  RetrievedTokens tokens = toy_tokens(rng, d, {2, 3});

  InjectionResult res = inject_tokens(seq, tokens);
  const ModalitySequence& out = res.seq;

  // length grows by sum(k_g - 1) = 1 + 2
  REQUIRE(out.length() == 9);
  CHECK(out.token_ids == std::vector<int>{10, 1, 1, 11, 12, 1, 1, 1, 13});
  CHECK(out.labels == std::vector<int>{20, kIgnoreIndex, kIgnoreIndex, 21, 22, kIgnoreIndex,
                                       kIgnoreIndex, kIgnoreIndex, 23});
  CHECK(out.attention_mask == std::vector<std::uint8_t>(9, 1));
  CHECK(out.instruction_len == 4);  // first placeholder sat inside the instruction

  // supervision is preserved exactly: same non-ignored labels, same total
  int sum_before = 0, sum_after = 0;
  for (int l : seq.labels) {
    if (l != kIgnoreIndex) sum_before += l;
  }
  for (int l : out.labels) {
    if (l != kIgnoreIndex) sum_after += l;
  }
  CHECK(sum_before == sum_after);

  // embedding rows: originals, then graph rows, in order
  const std::vector<std::pair<const DiffArray*, std::size_t>> expect = {
      {&seq.embeddings, 0}, {&tokens.rows[0], 0}, {&tokens.rows[0], 1},
      {&seq.embeddings, 2}, {&seq.embeddings, 3}, {&tokens.rows[1], 0},
      {&tokens.rows[1], 1}, {&tokens.rows[1], 2}, {&seq.embeddings, 5},
  };
  for (std::size_t r = 0; r < expect.size(); ++r) {
    for (std::size_t c = 0; c < d; ++c) {
      CHECK(out.embeddings.at(r, c) == expect[r].first->at(expect[r].second, c));
    }
  }

  REQUIRE(res.insertions.size() == 2);
  CHECK(res.insertions[0].position == 1);
  CHECK(res.insertions[0].count == 2);
  CHECK(res.insertions[1].position == 4);
  CHECK(res.insertions[1].count == 3);

  CHECK(res.map_index(0) == 0);
  CHECK(res.map_index(2) == 3);
  CHECK(res.map_index(3) == 4);
  CHECK(res.map_index(5) == 8);
  CHECK_THROWS_WITH(res.map_index(1), "original index was a replaced placeholder");
  CHECK_THROWS_WITH(res.map_index(4), "original index was a replaced placeholder");
}

TEST_CASE("single-token injection preserves the sequence length") {
  Rng rng(56);
  ModalitySequence seq = toy_sequence(rng, 3);
  RetrievedTokens tokens = toy_tokens(rng, 3, {1, 1});

  InjectionResult res = inject_tokens(seq, tokens);
  CHECK(res.seq.length() == 6);
  CHECK(res.seq.token_ids == seq.token_ids);
  CHECK(res.seq.labels == seq.labels);
  CHECK(res.seq.instruction_len == 3);
  for (std::size_t c = 0; c < 3; ++c) {
    CHECK(res.seq.embeddings.at(1, c) == tokens.rows[0].at(0, c));
    CHECK(res.seq.embeddings.at(4, c) == tokens.rows[1].at(0, c));
    CHECK(res.seq.embeddings.at(0, c) == seq.embeddings.at(0, c));
  }
}

TEST_CASE("injection bookkeeping errors") {
  Rng rng(57);
  ModalitySequence seq = toy_sequence(rng, 3);

  RetrievedTokens one = toy_tokens(rng, 3, {2});
  CHECK_THROWS_WITH(inject_tokens(seq, one), "placeholder count 2 does not match graph count 1");

  RetrievedTokens hollow = toy_tokens(rng, 3, {2, 3});
  hollow.counts[1] = 0;
  CHECK_THROWS_WITH(inject_tokens(seq, hollow), "empty patch set");

  ModalitySequence bad = seq;
  bad.attention_mask.pop_back();
  CHECK_THROWS_WITH(inject_tokens(bad, toy_tokens(rng, 3, {2, 3})),
                    "sequence mask/labels must match embedding length");

  ModalitySequence short_emb = seq;
  short_emb.embeddings = randn(Shape{5, 3}, rng);
  CHECK_THROWS_WITH(short_emb.validate(), "sequence embeddings must match token count");
}

TEST_CASE("gradients flow end to end through patching, fusion, and injection") {
  FuseFixture f(406, /*blocks=*/1);
  Rng rng(11);

  ModalitySequence text;
  text.token_ids = {10, 1, 11, 1, 12};
  text.attention_mask.assign(5, 1);
  text.labels.assign(5, kIgnoreIndex);
  text.placeholders = find_placeholders(text.token_ids, 1);
  text.instruction_len = 5;
  DiffArray e = randn(Shape{5, f.fcfg.d_llm}, rng, true);

  DiffArray weight_col = randn(Shape{f.fcfg.d_llm, 1}, rng);

  std::vector<std::vector<std::size_t>> last_anchors;
  auto objective = [&]() {
    PatchOutput patch = run_patching(f.batch, f.x, f.p, f.z, f.gate, f.pcfg);
    last_anchors = patch.anchors;
    RetrievedTokens ret = retrieve_geometry(patch, f.x, f.batch, f.stack);
    text.embeddings = e;
    InjectionResult res = inject_tokens(text, ret);
    return sum_all(matmul(res.seq.embeddings, weight_col));
  };

  GradCheckOptions opts;
  opts.h = 1e-5;
  opts.discrete_signature = [&]() {
    std::uint64_t h = 1469598103934665603ull;
    for (const auto& a : last_anchors) h = fnv1a64(a.data(), a.size() * sizeof(std::size_t), h);
    return h;
  };

  std::vector<std::pair<std::string, DiffArray>> leaves = {
      {"x", f.x},
      {"p", f.p},
      {"z", f.z},
      {"text", e},
      {"gate.w", f.gate.mlp.layers[0].w},
      {"cross.wq", f.stack.blocks[0].cross_attn.wq.w},
      {"proj_k", f.stack.proj_k.w},
      {"proj_out", f.stack.proj_out.w},
      {"norm_out.gain", f.stack.norm_out.gain},
  };
  GradCheckReport report = finite_diff_check(objective, leaves, opts);
  INFO("max rel err " << report.max_rel_err);
  CHECK(report.discrete_stable);
  CHECK(report.pass(1e-6));
}
