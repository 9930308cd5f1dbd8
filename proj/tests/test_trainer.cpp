#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <catch2/catch_amalgamated.hpp>

#include "atompatch/chem/graph_json.hpp"
#include "atompatch/train/checkpoint.hpp"
#include "atompatch/train/corpus.hpp"
#include "atompatch/train/trainer.hpp"

using namespace atompatch;
using Catch::Matchers::ContainsSubstring;

namespace {

std::filesystem::path tmp_dir() {
  auto p = std::filesystem::current_path() / "trainer_tmp";
  std::filesystem::create_directories(p);
  return p;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

EncoderConfig tiny_encoder() {
  EncoderConfig e = EncoderConfig::desk();
  e.hidden = 16;
  e.depth = 1;
  e.rbf_count = 4;
  e.mask_fraction = 0.3;
  return e;
}

ConnectorConfig tiny_connector() {
  ConnectorConfig c;
  c.encoder = tiny_encoder();
  c.patcher.gate_hidden = 8;
  c.patcher.rho = 0.3;
  c.patcher.k_max = 2;
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

StageConfig quick_stage(Stage stage, std::size_t steps) {
  StageConfig s;
  s.stage = stage;
  s.lr = (stage == Stage::kAdaptation) ? 2e-5 : 1e-3;
  s.max_steps = steps;
  s.batch_size = 1;
  s.grad_accum = 2;
  s.warmup_steps = 0;
  s.weight_decay = 0.0;
  s.eval_ratio = 0.0;
  s.eval_every = 0;
  s.log_every = 3;
  s.mask_seed_cycle = 4;
  return s;
}

}  // namespace

TEST_CASE("stage config validation and selectors") {
  StageConfig s;
  CHECK_NOTHROW(s.validate());

  StageConfig bad = s;
  bad.lr = 0.0;
  CHECK_THROWS_WITH(bad.validate(), "stage learning rate must be positive");
  bad = s;
  bad.grad_accum = 0;
  CHECK_THROWS_WITH(bad.validate(), "stage batch settings must be positive");
  bad = s;
  bad.epochs = 0;
  bad.max_steps = 0;
  CHECK_THROWS_WITH(bad.validate(), "stage must run at least one step");
  bad = s;
  bad.eval_ratio = 1.0;
  CHECK_THROWS_WITH(bad.validate(), "evaluation split ratio must be in [0,1)");
  bad = s;
  bad.mask_seed_cycle = 0;
  CHECK_THROWS_WITH(bad.validate(), "mask seed cycle must be positive");

  s.stage = Stage::kEncoderPretrain;
  CHECK(s.trainable_prefixes() == std::vector<std::string>{"encoder.", "heads."});
  s.stage = Stage::kAlignment;
  CHECK(s.trainable_prefixes() == std::vector<std::string>{"gate.", "fusion."});
  s.stage = Stage::kAdaptation;
  CHECK(s.trainable_prefixes() == std::vector<std::string>{"gate.", "fusion.", "decoder."});

  StageConfig a = s, b = s;
  CHECK(a.hash() == b.hash());
  b.lr *= 2;
  CHECK(a.hash() != b.hash());
}

TEST_CASE("round-robin visit order interleaves modalities") {
  using M = Modality;
  std::vector<M> mods = {M::kMolecule, M::kMolecule, M::kNucleic, M::kNucleic, M::kMolecule};
  CHECK(detail::visit_order(mods, true) == std::vector<std::size_t>{0, 2, 1, 3, 4});
  CHECK(detail::visit_order(mods, false) == std::vector<std::size_t>{0, 1, 2, 3, 4});
}

TEST_CASE("built-in corpora are well formed") {
  std::vector<AtomGraph> enc = encoder_corpus();
  REQUIRE(enc.size() == 4);
  for (const AtomGraph& g : enc) {
    CHECK(g.size() >= 3);
    CHECK(!g.edges.empty());
    CHECK(g.modality == Modality::kMolecule);
  }

  std::vector<TextGraphSample> toy = toy_corpus();
  REQUIRE(toy.size() == 8);
  std::size_t molecules = 0, nucleic = 0;
  for (const TextGraphSample& s : toy) {
    CHECK(s.instruction.find("<geom>") != std::string::npos);
    CHECK(!s.answer.empty());
    CHECK(!s.graph.edges.empty());
    if (s.graph.modality == Modality::kMolecule) ++molecules;
    if (s.graph.modality == Modality::kNucleic) ++nucleic;
  }
  CHECK(molecules == 4);
  CHECK(nucleic == 4);

  ToyVocab v = build_vocab(toy);
  CHECK(v.size() < 192);
  for (const TextGraphSample& s : toy) {
    std::vector<int> ids = v.tokenize(s.instruction);
    CHECK(std::count(ids.begin(), ids.end(), kPlaceholderId) == 1);
    for (int id : ids) CHECK(id != kUnkId);
  }
}

TEST_CASE("jsonl corpus loading resolves graph paths and validates fields") {
  auto dir = tmp_dir();
  write_graph_file(detail::corpus_molecule("CCO", 3), (dir / "ethanol.json").string());
  write_graph_file(detail::corpus_fiber("AU", "rna"), (dir / "au.json").string());

  {
    std::ofstream out(dir / "corpus.jsonl");
    out << R"({"instruction": "describe <geom>", "graph_file": "ethanol.json", "answer": "an alcohol"})"
        << "\n\n";
    out << R"({"instruction": "read <geom>", "graph_file": "au.json", "answer": "two bases"})"
        << "\n";
  }
  std::vector<TextGraphSample> c = load_corpus_jsonl((dir / "corpus.jsonl").string());
  REQUIRE(c.size() == 2);
  CHECK(c[0].instruction == "describe <geom>");
  CHECK(c[0].graph.size() == 3);
  CHECK(c[1].graph.modality == Modality::kNucleic);

  CHECK_THROWS_WITH(load_corpus_jsonl((dir / "nope.jsonl").string()),
                    ContainsSubstring("cannot open corpus file"));

  {
    std::ofstream out(dir / "bad.jsonl");
    out << "not json\n";
  }
  CHECK_THROWS_WITH(load_corpus_jsonl((dir / "bad.jsonl").string()),
                    "corpus line 1 is not valid JSON");

  {
    std::ofstream out(dir / "missing.jsonl");
    out << R"({"instruction": "x", "graph_file": "ethanol.json"})" << "\n";
  }
  CHECK_THROWS_WITH(load_corpus_jsonl((dir / "missing.jsonl").string()),
                    "corpus line 1 missing field 'answer'");

  {
    std::ofstream out(dir / "empty.jsonl");
    out << "\n";
  }
  CHECK_THROWS_WITH(load_corpus_jsonl((dir / "empty.jsonl").string()),
                    ContainsSubstring("has no samples"));
}

TEST_CASE("connector model wiring and parameter naming") {
  CHECK_NOTHROW(ConnectorConfig::desk().validate());

  ConnectorConfig mismatched = tiny_connector();
  mismatched.fusion.d_enc = 8;
  CHECK_THROWS_WITH(mismatched.validate(), "fusion input width must match encoder hidden size");
  mismatched = tiny_connector();
  mismatched.fusion.d_llm = 16;
  CHECK_THROWS_WITH(mismatched.validate(), "fusion output width must match decoder width");

  Rng rng(1);
  ConnectorModel m(tiny_connector(), rng);
  ParamRegistry reg;
  m.register_all(reg);
  for (const char* name : {"encoder.elem_emb", "heads.elem.l0.w", "gate.mlp.l0.w",
                           "fusion.proj_p.w", "fusion.block0.cross.wq.w", "decoder.tok_emb",
                           "decoder.head.w"}) {
    INFO(name);
    CHECK(reg.find(name) != nullptr);
  }
  CHECK(reg.total_size() > 0);
}

TEST_CASE("checkpoints round-trip bitwise and validate their contents") {
  auto dir = tmp_dir();
  Rng rng(5);
  ConnectorModel m(tiny_connector(), rng);
  ParamRegistry reg;
  m.register_all(reg);

  const auto before = reg.snapshot();
  const std::string path = (dir / "model.ckpt.json").string();
  save_checkpoint(path, reg);

  for (auto& it : reg.items) {
    for (double& x : it.second.data()) x += 0.5;
  }
  load_checkpoint(path, reg);
  const auto after = reg.snapshot();
  REQUIRE(after.size() == before.size());
  for (std::size_t i = 0; i < before.size(); ++i) {
    CHECK(after[i].first == before[i].first);
    CHECK(after[i].second == before[i].second);
  }

  CHECK_THROWS_WITH(load_checkpoint((dir / "absent.json").string(), reg),
                    ContainsSubstring("cannot open checkpoint"));

  // a checkpoint holding only a subset cannot serve the full registry
  ParamRegistry encoder_only = reg.with_prefixes({"encoder."});
  const std::string partial = (dir / "encoder.ckpt.json").string();
  save_checkpoint(partial, encoder_only);
  CHECK_THROWS_WITH(load_checkpoint(partial, reg), ContainsSubstring("checkpoint missing parameter"));
  CHECK_NOTHROW(load_checkpoint(partial, encoder_only));

  ParamRegistry wrong;
  wrong.add("encoder.elem_emb", DiffArray::zeros(Shape{2, 2}, true));
  CHECK_THROWS_WITH(load_checkpoint(path, wrong),
                    ContainsSubstring("checkpoint parameter encoder.elem_emb has shape"));
}

TEST_CASE("encoder pretraining is deterministic and finite") {
  std::vector<AtomGraph> corpus = encoder_corpus();
  StageConfig cfg = quick_stage(Stage::kEncoderPretrain, 20);
  cfg.lr = 3e-3;
  cfg.batch_size = 2;

  auto run = [&]() {
    Rng rng(42);
    Egnn enc(tiny_encoder(), rng);
    EncoderHeads heads(tiny_encoder(), rng);
    TrainReport r = pretrain_encoder(corpus, enc, heads, cfg);
    ParamRegistry reg;
    enc.register_params(reg, "encoder");
    heads.register_params(reg, "heads");
    return std::make_pair(r, reg.snapshot());
  };
  auto [r1, p1] = run();
  auto [r2, p2] = run();

  REQUIRE(!r1.steps.empty());
  CHECK(r1.steps.front().step == 1);
  CHECK(r1.steps.back().step == 20);
  for (const StepLog& s : r1.steps) {
    CHECK(std::isfinite(s.loss));
    CHECK(std::isfinite(s.grad_norm));
  }
  REQUIRE(r1.steps.size() == r2.steps.size());
  for (std::size_t i = 0; i < r1.steps.size(); ++i) {
    CHECK(r1.steps[i].loss == r2.steps[i].loss);
  }
  REQUIRE(p1.size() == p2.size());
  for (std::size_t i = 0; i < p1.size(); ++i) CHECK(p1[i].second == p2[i].second);

  CHECK(r1.final_metric_name == "masked_type_accuracy");
  CHECK(r1.final_metric >= 0.0);
  CHECK(r1.final_metric <= 1.0);
  CHECK(r1.wall_seconds > 0.0);
  CHECK(r1.config_hash == cfg.hash());

  StageConfig wrong = cfg;
  wrong.stage = Stage::kAlignment;
  Rng rng(1);
  Egnn enc(tiny_encoder(), rng);
  EncoderHeads heads(tiny_encoder(), rng);
  CHECK_THROWS_WITH(pretrain_encoder(corpus, enc, heads, wrong),
                    "config stage does not match the requested run");
  CHECK_THROWS_WITH(pretrain_encoder({}, enc, heads, cfg), "empty training corpus");
}

TEST_CASE("pretraining loss drops substantially on a small corpus") {
  std::vector<AtomGraph> corpus = encoder_corpus();
  StageConfig cfg = quick_stage(Stage::kEncoderPretrain, 100);
  cfg.lr = 3e-3;
  cfg.batch_size = 4;
  cfg.grad_accum = 1;
  cfg.log_every = 10;
  cfg.mask_seed_cycle = 8;

  Rng rng(13);
  EncoderConfig ecfg = tiny_encoder();
  ecfg.hidden = 32;
  ecfg.depth = 2;
  Egnn enc(ecfg, rng);
  EncoderHeads heads(ecfg, rng);
  TrainReport r = pretrain_encoder(corpus, enc, heads, cfg);

  INFO("loss " << r.steps.front().loss << " -> " << r.steps.back().loss << ", acc "
               << r.final_metric);
  CHECK(r.steps.back().loss < 0.5 * r.steps.front().loss);
  CHECK(r.final_metric > 0.5);
}

TEST_CASE("zero auxiliary weights leave the auxiliary heads untouched") {
  std::vector<AtomGraph> corpus = encoder_corpus();
  StageConfig cfg = quick_stage(Stage::kEncoderPretrain, 8);
  cfg.lr = 1e-3;

  EncoderConfig ecfg = tiny_encoder();
  ecfg.lambda_dist = 0.0;
  ecfg.lambda_dir = 0.0;
  Rng rng(21);
  Egnn enc(ecfg, rng);
  EncoderHeads heads(ecfg, rng);

  ParamRegistry reg;
  heads.register_params(reg, "heads");
  ParamRegistry aux = reg.with_prefixes({"heads.dist", "heads.dir"});
  ParamRegistry elem = reg.with_prefixes({"heads.elem"});
  REQUIRE(aux.total_size() > 0);
  const auto aux_before = aux.snapshot();
  const auto elem_before = elem.snapshot();

  pretrain_encoder(corpus, enc, heads, cfg);

  const auto aux_after = aux.snapshot();
  for (std::size_t i = 0; i < aux_before.size(); ++i) {
    CHECK(aux_after[i].second == aux_before[i].second);
  }
  bool elem_moved = false;
  const auto elem_after = elem.snapshot();
  for (std::size_t i = 0; i < elem_before.size(); ++i) {
    if (elem_after[i].second != elem_before[i].second) elem_moved = true;
  }
  CHECK(elem_moved);
}

TEST_CASE("alignment trains the connector and freezes everything else bitwise") {
  std::vector<TextGraphSample> corpus = toy_corpus();
  StageConfig cfg = quick_stage(Stage::kAlignment, 10);
  cfg.eval_ratio = 0.25;
  cfg.eval_every = 4;

  auto run = [&](const std::string& ckpt_path) {
    Rng rng(77);
    ConnectorModel m(tiny_connector(), rng);
    ParamRegistry reg;
    m.register_all(reg);
    ParamRegistry frozen = reg.with_prefixes({"encoder.", "heads.", "decoder."});
    ParamRegistry live = reg.with_prefixes({"gate.", "fusion."});
    const auto frozen_before = frozen.snapshot();
    const auto live_before = live.snapshot();

    TrainReport r = align_connector(corpus, m, cfg);

    const auto frozen_after = frozen.snapshot();
    for (std::size_t i = 0; i < frozen_before.size(); ++i) {
      REQUIRE(frozen_after[i].second == frozen_before[i].second);
    }
    bool moved = false;
    const auto live_after = live.snapshot();
    for (std::size_t i = 0; i < live_before.size(); ++i) {
      if (live_after[i].second != live_before[i].second) moved = true;
    }
    CHECK(moved);
    save_checkpoint(ckpt_path, reg);
    return r;
  };

  auto dir = tmp_dir();
  TrainReport r1 = run((dir / "align_a.json").string());
  TrainReport r2 = run((dir / "align_b.json").string());

  CHECK(slurp(dir / "align_a.json") == slurp(dir / "align_b.json"));  // byte-identical
  REQUIRE(!r1.steps.empty());
  for (const StepLog& s : r1.steps) CHECK(std::isfinite(s.loss));
  REQUIRE(r1.evals.size() == 2);  // steps 4 and 8
  CHECK(r1.evals[0].step == 4);
  CHECK(r1.evals[1].step == 8);
  CHECK(std::isfinite(r1.evals[0].value));
  CHECK(r1.final_metric_name == "masked_nll_per_token");
  CHECK(std::isfinite(r1.final_metric));
  CHECK(r1.steps.back().loss == r2.steps.back().loss);
}

TEST_CASE("gradient accumulation matches the equivalent full batch") {
  std::vector<TextGraphSample> corpus = toy_corpus();
  corpus.resize(4);

  auto run = [&](std::size_t batch, std::size_t accum) {
    StageConfig cfg = quick_stage(Stage::kAlignment, 1);
    cfg.batch_size = batch;
    cfg.grad_accum = accum;
    cfg.mixed_modality = false;
    Rng rng(31);
    ConnectorModel m(tiny_connector(), rng);
    TrainReport r = align_connector(corpus, m, cfg);
    ParamRegistry reg;
    m.register_all(reg);
    return std::make_pair(r.steps.back().loss, reg.with_prefixes({"gate.", "fusion."}).snapshot());
  };

  auto [loss_full, full] = run(4, 1);
  auto [loss_acc, acc] = run(1, 4);

  CHECK(std::abs(loss_full - loss_acc) <= 1e-9);
  REQUIRE(full.size() == acc.size());
  double max_diff = 0.0;
  for (std::size_t i = 0; i < full.size(); ++i) {
    REQUIRE(full[i].second.size() == acc[i].second.size());
    for (std::size_t j = 0; j < full[i].second.size(); ++j) {
      max_diff = std::max(max_diff, std::abs(full[i].second[j] - acc[i].second[j]));
    }
  }
  INFO("max parameter difference " << max_diff);
  CHECK(max_diff <= 1e-9);
}

TEST_CASE("adaptation unfreezes the decoder but never the encoder") {
  std::vector<TextGraphSample> corpus = toy_corpus();
  corpus.resize(4);
  StageConfig cfg = quick_stage(Stage::kAdaptation, 6);

  Rng rng(99);
  ConnectorModel m(tiny_connector(), rng);
  ParamRegistry reg;
  m.register_all(reg);
  ParamRegistry frozen = reg.with_prefixes({"encoder.", "heads."});
  ParamRegistry dec = reg.with_prefixes({"decoder."});
  const auto frozen_before = frozen.snapshot();
  const auto dec_before = dec.snapshot();

  TrainReport r = adapt_lm(corpus, m, cfg);
  CHECK(std::isfinite(r.final_metric));

  const auto frozen_after = frozen.snapshot();
  for (std::size_t i = 0; i < frozen_before.size(); ++i) {
    CHECK(frozen_after[i].second == frozen_before[i].second);
  }
  bool dec_moved = false;
  const auto dec_after = dec.snapshot();
  for (std::size_t i = 0; i < dec_before.size(); ++i) {
    if (dec_after[i].second != dec_before[i].second) dec_moved = true;
  }
  CHECK(dec_moved);

  StageConfig fat = cfg;
  fat.lr = 1e-4;  // not below the alignment default
  CHECK_THROWS_WITH(adapt_lm(corpus, m, fat),
                    "adaptation learning rate must be below the alignment learning rate");
}

TEST_CASE("runaway learning rates abort with the failing step") {
  std::vector<AtomGraph> corpus = encoder_corpus();
  StageConfig cfg = quick_stage(Stage::kEncoderPretrain, 6);
  cfg.lr = 1e308;  // one update saturates the float range

  Rng rng(3);
  Egnn enc(tiny_encoder(), rng);
  EncoderHeads heads(tiny_encoder(), rng);
  CHECK_THROWS_WITH(pretrain_encoder(corpus, enc, heads, cfg),
                    ContainsSubstring("training diverged at step"));
}

TEST_CASE("reports serialize to JSON and CSV") {
  std::vector<AtomGraph> corpus = encoder_corpus();
  StageConfig cfg = quick_stage(Stage::kEncoderPretrain, 6);
  cfg.log_every = 2;

  Rng rng(7);
  Egnn enc(tiny_encoder(), rng);
  EncoderHeads heads(tiny_encoder(), rng);
  TrainReport r = pretrain_encoder(corpus, enc, heads, cfg);

  auto dir = tmp_dir();
  r.write_csv((dir / "report.csv").string());
  r.write_json((dir / "report.json").string());

  std::string csv = slurp(dir / "report.csv");
  CHECK(csv.rfind("step,loss,lr,grad_norm\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == static_cast<long>(r.steps.size()) + 1);

  nlohmann::json j = nlohmann::json::parse(slurp(dir / "report.json"));
  CHECK(j["stage"] == "encoder_pretrain");
  CHECK(j["config_hash"] == cfg.hash());
  CHECK(j["final_metric"]["name"] == "masked_type_accuracy");
  CHECK(j["steps"].size() == r.steps.size());
}
