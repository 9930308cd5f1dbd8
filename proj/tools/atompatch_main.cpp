// Unified command line: structure ingestion, patching, gradient verification,
// the three training stages, and the token-budget benchmark. All relative
// paths resolve against --workdir; flat JSON settings come in via --config.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "atompatch/bench/harness.hpp"
#include "atompatch/bench/verify.hpp"
#include "atompatch/chem/graph_json.hpp"
#include "atompatch/chem/pdb.hpp"
#include "atompatch/chem/smiles.hpp"
#include "atompatch/chem/fiber.hpp"
#include "atompatch/chem/mol_layout.hpp"
#include "atompatch/train/checkpoint.hpp"
#include "atompatch/train/corpus.hpp"
#include "atompatch/train/trainer.hpp"

namespace {

using namespace atompatch;

std::string resolve(const std::string& workdir, const std::string& p) {
  if (p.empty()) return p;
  std::filesystem::path fp(p);
  if (fp.is_absolute()) return p;
  return (std::filesystem::path(workdir) / fp).string();
}

struct Settings {
  ConnectorConfig model = ConnectorConfig::desk();
  bool has_lr = false;
  double learning_rate = 1e-4;
  std::size_t training_epochs = 4;
  std::size_t per_device_train_batch_size = 1;
  std::size_t gradient_accumulation_steps = 16;
  long warmup_steps = 100;
  double gradient_clipping_max_norm = 1.0;
  double weight_decay = 0.01;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  double evaluation_split_ratio = 0.1;
  std::size_t evaluation_frequency_steps = 100;
  std::size_t logging_frequency_steps = 10;
  std::size_t max_steps = 0;
  std::size_t mask_seed_cycle = 8;
  bool mixed_modality = true;
  bool supervise_delimiters = false;
  std::size_t fixed_query_budget = 32;
};

double num(const nlohmann::json& v, const std::string& key) {
  if (!v.is_number()) throw Error("config key " + key + " must be a number");
  return v.get<double>();
}

std::size_t unum(const nlohmann::json& v, const std::string& key) {
  const double d = num(v, key);
  if (d < 0) throw Error("config key " + key + " must be non-negative");
  return static_cast<std::size_t>(d);
}

bool flag(const nlohmann::json& v, const std::string& key) {
  if (!v.is_boolean()) throw Error("config key " + key + " must be a boolean");
  return v.get<bool>();
}

/// The fusion interface widths are structural, not free settings.
void tie_widths(Settings& s) {
  s.model.fusion.d_enc = s.model.encoder.hidden;
  s.model.fusion.d_llm = s.model.decoder.d_model;
  s.model.fusion.max_slots = s.model.patcher.k_max;
}

Settings load_settings(const std::string& path) {
  Settings s;
  if (path.empty()) {
    tie_widths(s);
    return s;
  }
  std::ifstream in(path);
  if (!in) throw Error("cannot open config " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error&) {
    throw Error("config " + path + " is not valid JSON");
  }
  if (!j.is_object()) throw Error("config " + path + " must hold a JSON object");

  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    const nlohmann::json& v = it.value();
    if (k == "graph_encoder_hidden_size") s.model.encoder.hidden = unum(v, k);
    else if (k == "graph_encoder_depth") s.model.encoder.depth = unum(v, k);
    else if (k == "graph_encoder_dropout") s.model.encoder.dropout = num(v, k);
    else if (k == "coordinate_updates") s.model.encoder.coord_updates = flag(v, k);
    else if (k == "number_of_rbf_bases") s.model.encoder.rbf_count = unum(v, k);
    else if (k == "rbf_cutoff_distance") s.model.encoder.rbf_cutoff = num(v, k);
    else if (k == "mask_fraction") s.model.encoder.mask_fraction = num(v, k);
    else if (k == "distance_loss_weight") s.model.encoder.lambda_dist = num(v, k);
    else if (k == "direction_loss_weight") s.model.encoder.lambda_dir = num(v, k);
    else if (k == "fusion_block_count") s.model.fusion.blocks = unum(v, k);
    else if (k == "attention_head_count") s.model.fusion.heads = unum(v, k);
    else if (k == "fusion_model_width") s.model.fusion.d_model = unum(v, k);
    else if (k == "fusion_mlp_intermediate_size") s.model.fusion.ffn_dim = unum(v, k);
    else if (k == "fusion_dropout") s.model.fusion.dropout = num(v, k);
    else if (k == "max_anchors_per_graph") s.model.patcher.k_max = unum(v, k);
    else if (k == "mass_based_anchor_fraction") s.model.patcher.rho = num(v, k);
    else if (k == "assignment_distance_scale") s.model.patcher.s_d = num(v, k);
    else if (k == "assignment_temperature") s.model.patcher.tau = num(v, k);
    else if (k == "gate_mlp_hidden_size") s.model.patcher.gate_hidden = unum(v, k);
    else if (k == "decoder_vocab_size") s.model.decoder.vocab = unum(v, k);
    else if (k == "decoder_model_width") s.model.decoder.d_model = unum(v, k);
    else if (k == "decoder_head_count") s.model.decoder.heads = unum(v, k);
    else if (k == "decoder_block_count") s.model.decoder.blocks = unum(v, k);
    else if (k == "decoder_mlp_intermediate_size") s.model.decoder.ffn_dim = unum(v, k);
    else if (k == "decoder_max_positions") s.model.decoder.max_len = unum(v, k);
    else if (k == "decoder_dropout") s.model.decoder.dropout = num(v, k);
    else if (k == "learning_rate") { s.learning_rate = num(v, k); s.has_lr = true; }
    else if (k == "training_epochs") s.training_epochs = unum(v, k);
    else if (k == "per_device_train_batch_size") s.per_device_train_batch_size = unum(v, k);
    else if (k == "gradient_accumulation_steps") s.gradient_accumulation_steps = unum(v, k);
    else if (k == "warmup_steps") s.warmup_steps = static_cast<long>(unum(v, k));
    else if (k == "gradient_clipping_max_norm") s.gradient_clipping_max_norm = num(v, k);
    else if (k == "weight_decay") s.weight_decay = num(v, k);
    else if (k == "adam_beta1") s.adam_beta1 = num(v, k);
    else if (k == "adam_beta2") s.adam_beta2 = num(v, k);
    else if (k == "adam_epsilon") s.adam_epsilon = num(v, k);
    else if (k == "evaluation_split_ratio") s.evaluation_split_ratio = num(v, k);
    else if (k == "evaluation_frequency_steps") s.evaluation_frequency_steps = unum(v, k);
    else if (k == "logging_frequency_steps") s.logging_frequency_steps = unum(v, k);
    else if (k == "max_steps") s.max_steps = unum(v, k);
    else if (k == "mask_seed_cycle") s.mask_seed_cycle = unum(v, k);
    else if (k == "mixed_modality") s.mixed_modality = flag(v, k);
    else if (k == "supervise_delimiters") s.supervise_delimiters = flag(v, k);
    else if (k == "fixed_query_budget") s.fixed_query_budget = unum(v, k);
    else throw Error("unknown config key: " + k);
  }
  tie_widths(s);
  return s;
}

StageConfig stage_config(const Settings& s, Stage st, std::uint64_t seed) {
  StageConfig c;
  c.stage = st;
  c.lr = s.has_lr ? s.learning_rate : (st == Stage::kAdaptation ? 1e-5 : 1e-4);
  c.epochs = s.training_epochs;
  c.batch_size = s.per_device_train_batch_size;
  c.grad_accum = s.gradient_accumulation_steps;
  c.warmup_steps = s.warmup_steps;
  c.clip_norm = s.gradient_clipping_max_norm;
  c.weight_decay = s.weight_decay;
  c.beta1 = s.adam_beta1;
  c.beta2 = s.adam_beta2;
  c.adam_eps = s.adam_epsilon;
  c.seed = seed;
  c.eval_ratio = s.evaluation_split_ratio;
  c.eval_every = s.evaluation_frequency_steps;
  c.log_every = s.logging_frequency_steps;
  c.max_steps = s.max_steps;
  c.mask_seed_cycle = s.mask_seed_cycle;
  c.mixed_modality = s.mixed_modality;
  c.supervise_delimiters = s.supervise_delimiters;
  return c;
}

std::vector<std::size_t> parse_sizes(const std::string& csv) {
  std::vector<std::size_t> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t pos = 0;
      const unsigned long v = std::stoul(item, &pos);
      if (pos != item.size() || v == 0) throw std::invalid_argument(item);
      out.push_back(v);
    } catch (const std::exception&) {
      throw Error("invalid size list entry: " + item);
    }
  }
  if (out.empty()) throw Error("empty node count list");
  return out;
}

void write_report(const TrainReport& report, const std::string& base) {
  if (base.empty()) return;
  report.write_json(base + ".json");
  report.write_csv(base + ".csv");
  std::cout << "wrote " << base << ".json and " << base << ".csv\n";
}

void print_summary(const TrainReport& r) {
  std::printf("%s: steps=%zu final %s=%.6f (%.1fs)\n", r.stage.c_str(),
              r.steps.empty() ? std::size_t{0} : r.steps.back().step, r.final_metric_name.c_str(),
              r.final_metric, r.wall_seconds);
}

int run_parse(std::uint64_t seed, const std::string& smiles, const std::string& pdb_path,
              const std::string& fiber_seq, const std::string& kind, double radius,
              const std::string& out) {
  const int given = (!smiles.empty()) + (!pdb_path.empty()) + (!fiber_seq.empty());
  if (given != 1) throw Error("parse needs exactly one of --smiles, --pdb, --fiber");

  AtomGraph g;
  if (!smiles.empty()) {
    g = parse_smiles(smiles).graph;
    embed_molecule(g, seed);
    if (radius > 0.0) radius_graph(g, radius);
  } else if (!pdb_path.empty()) {
    std::ifstream in(pdb_path);
    if (!in) throw Error("cannot open pdb file " + pdb_path);
    std::string content((std::istreambuf_iterator<char>(in)), {});
    g = parse_pdb(content);
    radius_graph(g, radius > 0.0 ? radius : 2.2);
  } else {
    g = fiber_graph(fiber_seq, kind);
    radius_graph(g, radius > 0.0 ? radius : 2.2);
  }
  g.validate();
  write_graph_file(g, out);
  std::printf("wrote %s (%zu atoms, %zu edges)\n", out.c_str(), g.size(), g.edges.size());
  return 0;
}

int run_patch(std::uint64_t seed, const Settings& s, const std::string& graph_path,
              const std::string& ckpt, const std::string& instruction, const std::string& out) {
  Rng rng(seed);
  ConnectorModel model(s.model, rng);
  if (!ckpt.empty()) {
    ParamRegistry reg;
    model.register_all(reg);
    load_checkpoint(ckpt, reg);
  }
  ToyVocab vocab = build_vocab(toy_corpus());
  const std::vector<int> ids = vocab.tokenize(instruction);

  AtomGraph g = read_graph_file(graph_path);
  BatchedGraph b = batch_graphs({g});
  EncoderOutput enc = model.encoder.forward(b, batch_element_classes(b), b.coord_matrix(false));
  DiffArray z = instruction_summary(instruction_only_sequence(model.decoder, ids));
  PatchOutput patch =
      run_patching(b, enc.node_features, enc.coords, z, model.gate, s.model.patcher);

  nlohmann::json j;
  j["node_count"] = g.size();
  j["anchor_count"] = patch.counts[0];
  j["anchors"] = patch.anchors[0];
  j["mass"] = patch.masses[0].data();
  if (out.empty()) {
    std::cout << j.dump(1) << "\n";
  } else {
    std::ofstream o(out);
    if (!o) throw Error("cannot write " + out);
    o << j.dump(1) << "\n";
    std::printf("wrote %s (%zu anchors over %zu atoms)\n", out.c_str(), patch.counts[0], g.size());
  }
  return 0;
}

int run_gradcheck(std::size_t instances, double h, double tol) {
  bool ok = true;
  for (std::uint64_t seedv = 1; seedv <= instances; ++seedv) {
    GradCheckReport r = pipeline_gradcheck(seedv, h);
    const bool pass = r.pass(tol);
    ok = ok && pass;
    std::printf("pipeline[seed=%llu] max_rel_err=%.3e stable=%s %s\n",
                static_cast<unsigned long long>(seedv), r.max_rel_err,
                r.discrete_stable ? "yes" : "no", pass ? "pass" : "FAIL");
  }

  const double sj = softmax_jacobian_max_rel_err(3);
  std::printf("softmax_jacobian max_rel_err=%.3e %s\n", sj, sj <= 1e-7 ? "pass" : "FAIL");
  ok = ok && sj <= 1e-7;

  const double pg = pooling_gradient_max_rel_err(3);
  std::printf("pooling_gradient max_rel_err=%.3e %s\n", pg, pg <= 1e-7 ? "pass" : "FAIL");
  ok = ok && pg <= 1e-7;

  const RowSumSweep rs = row_sum_sweep(5);
  std::printf("row_sums rows=%zu max_dev=%.3e %s\n", rs.rows, rs.max_dev,
              rs.max_dev <= 1e-12 ? "pass" : "FAIL");
  ok = ok && rs.max_dev <= 1e-12;

  Rng erng(17);
  Egnn enc(EncoderConfig::desk(), erng);
  double feat_dev = 0.0, coord_dev = 0.0;
  for (int gi = 0; gi < 10; ++gi) {
    AtomGraph g = bench_graph(6 + 3 * static_cast<std::size_t>(gi), 100 + gi);
    for (int mi = 0; mi < 10; ++mi) {
      EquivarianceCheck chk = equivariance_check(enc, g, 1000 + mi);
      feat_dev = std::max(feat_dev, chk.feature_dev);
      coord_dev = std::max(coord_dev, chk.coord_dev);
    }
  }
  const bool eq_ok = feat_dev <= 1e-6 && coord_dev <= 1e-6;
  std::printf("equivariance feature_dev=%.3e coord_dev=%.3e %s\n", feat_dev, coord_dev,
              eq_ok ? "pass" : "FAIL");
  ok = ok && eq_ok;

  if (!ok) throw Error("gradient verification failed");
  return 0;
}

std::vector<AtomGraph> load_graph_corpus(const std::vector<std::string>& files, bool builtin,
                                         const std::string& workdir) {
  if (builtin == !files.empty()) {
    throw Error("pretraining needs --graphs files or --builtin, not both or neither");
  }
  if (builtin) return encoder_corpus();
  std::vector<AtomGraph> out;
  for (const std::string& f : files) out.push_back(read_graph_file(resolve(workdir, f)));
  return out;
}

std::vector<TextGraphSample> load_text_corpus(const std::string& corpus, bool builtin,
                                              const std::string& workdir) {
  if (builtin == !corpus.empty()) {
    throw Error("this stage needs --corpus or --builtin, not both or neither");
  }
  if (builtin) return toy_corpus();
  return load_corpus_jsonl(resolve(workdir, corpus));
}

int run_pretrain(std::uint64_t seed, const Settings& s, const std::vector<AtomGraph>& corpus,
                 const std::string& out, const std::string& report_base) {
  StageConfig cfg = stage_config(s, Stage::kEncoderPretrain, seed);
  Rng rng(seed);
  Egnn enc(s.model.encoder, rng);
  EncoderHeads heads(s.model.encoder, rng);
  TrainReport report = pretrain_encoder(corpus, enc, heads, cfg);

  ParamRegistry reg;
  enc.register_params(reg, "encoder");
  heads.register_params(reg, "heads");
  save_checkpoint(out, reg);
  print_summary(report);
  std::printf("wrote %s\n", out.c_str());
  write_report(report, report_base);
  return 0;
}

int run_align(std::uint64_t seed, const Settings& s, const std::vector<TextGraphSample>& corpus,
              const std::string& init_encoder, const std::string& out,
              const std::string& report_base) {
  StageConfig cfg = stage_config(s, Stage::kAlignment, seed);
  Rng rng(seed);
  ConnectorModel model(s.model, rng);
  ParamRegistry reg;
  model.register_all(reg);
  if (!init_encoder.empty()) {
    ParamRegistry sub = reg.with_prefixes({"encoder.", "heads."});
    load_checkpoint(init_encoder, sub);
  }
  TrainReport report = align_connector(corpus, model, cfg);
  save_checkpoint(out, reg);
  print_summary(report);
  std::printf("wrote %s\n", out.c_str());
  write_report(report, report_base);
  return 0;
}

int run_adapt(std::uint64_t seed, const Settings& s, const std::vector<TextGraphSample>& corpus,
              const std::string& init, double alignment_lr, const std::string& out,
              const std::string& report_base) {
  StageConfig cfg = stage_config(s, Stage::kAdaptation, seed);
  Rng rng(seed);
  ConnectorModel model(s.model, rng);
  ParamRegistry reg;
  model.register_all(reg);
  if (!init.empty()) load_checkpoint(init, reg);
  TrainReport report = adapt_lm(corpus, model, cfg, alignment_lr);
  save_checkpoint(out, reg);
  print_summary(report);
  std::printf("wrote %s\n", out.c_str());
  write_report(report, report_base);
  return 0;
}

int run_bench(std::uint64_t seed, const Settings& s, const std::string& sizes_csv,
              const std::string& mode_name, const std::string& ckpt, const std::string& out) {
  BenchConfig cfg;
  cfg.patcher = s.model.patcher;
  cfg.fixed_k = s.fixed_query_budget;
  cfg.seed = seed;
  cfg.checkpoint = ckpt;
  cfg.connector = s.model;
  BudgetCurve curve =
      token_budget_curve(parse_sizes(sizes_csv), gate_mode_from_name(mode_name), cfg);
  if (out.empty()) {
    std::cout << curve.to_csv();
  } else {
    curve.write_csv(out);
    std::printf("wrote %s (%zu rows)\n", out.c_str(), curve.rows.size());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"all-atom structure-to-token connector"};
  app.require_subcommand(1);

  std::uint64_t seed = 0;
  std::string config_path, workdir = ".";
  app.add_option("--seed", seed, "global rng seed");
  app.add_option("--config", config_path, "flat JSON settings file");
  app.add_option("--workdir", workdir, "base directory for relative paths");

  auto* cmd_parse = app.add_subcommand("parse", "ingest a structure into a graph file");
  std::string smiles, pdb_path, fiber_seq, kind = "dna", parse_out;
  double radius = 0.0;
  cmd_parse->add_option("--smiles", smiles, "SMILES string");
  cmd_parse->add_option("--pdb", pdb_path, "PDB fragment file");
  cmd_parse->add_option("--fiber", fiber_seq, "nucleic acid sequence");
  cmd_parse->add_option("--kind", kind, "fiber kind: dna or rna");
  cmd_parse->add_option("--radius", radius,
                        "edge cutoff (default: bonds for SMILES, 2.2 otherwise)");
  cmd_parse->add_option("-o,--output", parse_out, "graph file to write")->required();

  auto* cmd_patch = app.add_subcommand("patch", "run anchor selection on a graph file");
  std::string patch_graph, patch_ckpt, patch_out;
  std::string instruction = "describe the structure of <geom>";
  cmd_patch->add_option("--graph", patch_graph, "graph file")->required();
  cmd_patch->add_option("--checkpoint", patch_ckpt, "connector checkpoint (default: random init)");
  cmd_patch->add_option("--instruction", instruction, "conditioning instruction");
  cmd_patch->add_option("-o,--output", patch_out, "result file (default: stdout)");

  auto* cmd_grad = app.add_subcommand("gradcheck", "finite-difference verification suite");
  std::size_t instances = 5;
  double fd_h = 1e-4, fd_tol = 1e-5;
  cmd_grad->add_option("--instances", instances, "pipeline instances to check");
  cmd_grad->add_option("--fd-step", fd_h, "finite difference step");
  cmd_grad->add_option("--tol", fd_tol, "max relative error");

  auto* cmd_pre = app.add_subcommand("pretrain-encoder", "masked-reconstruction pretraining");
  std::vector<std::string> pre_graphs;
  bool pre_builtin = false;
  std::string pre_out = "encoder.ckpt.json", pre_report;
  cmd_pre->add_option("--graphs", pre_graphs, "graph files");
  cmd_pre->add_flag("--builtin", pre_builtin, "use the built-in molecule corpus");
  cmd_pre->add_option("-o,--output", pre_out, "checkpoint to write");
  cmd_pre->add_option("--report", pre_report, "report base path (.json/.csv)");

  auto* cmd_align = app.add_subcommand("align", "train the connector, rest frozen");
  std::string align_corpus, align_init, align_out = "connector.ckpt.json", align_report;
  bool align_builtin = false;
  cmd_align->add_option("--corpus", align_corpus, "instruction corpus (jsonl)");
  cmd_align->add_flag("--builtin", align_builtin, "use the built-in corpus");
  cmd_align->add_option("--init-encoder", align_init, "pretrained encoder checkpoint");
  cmd_align->add_option("-o,--output", align_out, "checkpoint to write");
  cmd_align->add_option("--report", align_report, "report base path (.json/.csv)");

  auto* cmd_adapt = app.add_subcommand("adapt", "unfreeze the decoder at a smaller rate");
  std::string adapt_corpus, adapt_init, adapt_out = "adapted.ckpt.json", adapt_report;
  bool adapt_builtin = false;
  double alignment_lr = 1e-4;
  cmd_adapt->add_option("--corpus", adapt_corpus, "instruction corpus (jsonl)");
  cmd_adapt->add_flag("--builtin", adapt_builtin, "use the built-in corpus");
  cmd_adapt->add_option("--init", adapt_init, "aligned connector checkpoint");
  cmd_adapt->add_option("--alignment-lr", alignment_lr, "rate the alignment stage used");
  cmd_adapt->add_option("-o,--output", adapt_out, "checkpoint to write");
  cmd_adapt->add_option("--report", adapt_report, "report base path (.json/.csv)");

  auto* cmd_bench = app.add_subcommand("bench-tokens", "token-budget scaling curve");
  std::string sizes = "32,128,512,2048,8192,40960", mode = "uniform", bench_ckpt, bench_out;
  cmd_bench->add_option("--sizes", sizes, "comma-separated node counts");
  cmd_bench->add_option("--mode", mode, "gate mode: uniform or trained");
  cmd_bench->add_option("--checkpoint", bench_ckpt, "connector checkpoint (trained mode)");
  cmd_bench->add_option("-o,--output", bench_out, "CSV file (default: stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    const Settings settings = load_settings(resolve(workdir, config_path));
    if (cmd_parse->parsed()) {
      return run_parse(seed, smiles, resolve(workdir, pdb_path), fiber_seq, kind, radius,
                       resolve(workdir, parse_out));
    }
    if (cmd_patch->parsed()) {
      return run_patch(seed, settings, resolve(workdir, patch_graph),
                       resolve(workdir, patch_ckpt), instruction, resolve(workdir, patch_out));
    }
    if (cmd_grad->parsed()) return run_gradcheck(instances, fd_h, fd_tol);
    if (cmd_pre->parsed()) {
      return run_pretrain(seed, settings, load_graph_corpus(pre_graphs, pre_builtin, workdir),
                          resolve(workdir, pre_out), resolve(workdir, pre_report));
    }
    if (cmd_align->parsed()) {
      return run_align(seed, settings, load_text_corpus(align_corpus, align_builtin, workdir),
                       resolve(workdir, align_init), resolve(workdir, align_out),
                       resolve(workdir, align_report));
    }
    if (cmd_adapt->parsed()) {
      return run_adapt(seed, settings, load_text_corpus(adapt_corpus, adapt_builtin, workdir),
                       resolve(workdir, adapt_init), alignment_lr, resolve(workdir, adapt_out),
                       resolve(workdir, adapt_report));
    }
    if (cmd_bench->parsed()) {
      return run_bench(seed, settings, sizes, mode, resolve(workdir, bench_ckpt),
                       resolve(workdir, bench_out));
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
