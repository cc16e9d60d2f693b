// advlab: train toy refusal models, run gradient-surgery suffix attacks
// against them, and emit the diagnostic reports. One process per command;
// every run directory carries a manifest that reproduces it byte for byte.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "advlab/checkpoint.hpp"
#include "advlab/diagnostics.hpp"
#include "advlab/optimizer.hpp"
#include "advlab/runio.hpp"
#include "advlab/toylab.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace advlab;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// --- manifests --------------------------------------------------------------

struct RunManifest {
  std::string command;
  std::map<std::string, std::string> config;  // hashed: affects results
  std::map<std::string, std::string> info;    // not hashed: paths, timing
  std::string started_at;

  void set(const std::string& k, const std::string& v) { config[k] = v; }
  void set(const std::string& k, long long v) { config[k] = std::to_string(v); }
  void set(const std::string& k, double v) { config[k] = format_g(v); }

  std::string hash() const {
    std::string canon;
    for (const auto& [k, v] : config) canon += k + "=" + v + "\n";
    return hex_u64(fnv1a64(canon));
  }

  void write(const fs::path& dir, const std::string& precision) const {
    json j;
    j["command"] = command;
    j["config"] = config;
    j["config_hash"] = hash();
    j["precision"] = precision;
    j["started_at"] = started_at;
    j["finished_at"] = now_iso8601();
    for (const auto& [k, v] : info) j["info"][k] = v;
    write_text_file((dir / "manifest.json").string(), j.dump(2) + "\n");
  }
};

std::string file_content_hash(const std::string& path) {
  return hex_u64(fnv1a64(read_text_file(path)));
}

// --- shared option blocks ---------------------------------------------------

struct AttackFlags {
  std::string model_path;
  std::string data_path;
  int query_id = -1;
  std::string query_text;
  std::string query_file;
  std::string method = "gcg";
  std::string surgery = "none";
  double gamma = 0.5;
  int layer = 0;
  std::string beta = "inf";
  int topk = 4;
  int batch = 20;
  int iters = 100;
  int suffix_len = 20;
  std::string init_token = "!";
  std::string target_text;
  std::uint64_t seed = 0;
  int match_every = 10;
  bool early_exit = false;
  std::string out;
  int threads = 0;

  CLI::Option* gamma_opt = nullptr;
  CLI::Option* layer_opt = nullptr;
  CLI::Option* beta_opt = nullptr;
};

void add_attack_flags(CLI::App* cmd, AttackFlags& f, bool want_query) {
  cmd->add_option("--model", f.model_path, "checkpoint file")->required();
  cmd->add_option("--data", f.data_path, "dataset.jsonl from the train step")
      ->required();
  if (want_query) {
    cmd->add_option("--query-id", f.query_id,
                    "index into the flagged held-out queries");
    cmd->add_option("--query-text", f.query_text, "literal query text");
    cmd->add_option("--query-file", f.query_file,
                    "file whose first line is the query text");
  }
  cmd->add_option("--method", f.method, "gcg|autoprompt");
  cmd->add_option("--surgery", f.surgery, "none|lsgm|lila|lila+|lsgm-lila+");
  f.gamma_opt = cmd->add_option("--gamma", f.gamma,
                                "residual-branch gradient decay in [0,1]");
  f.layer_opt = cmd->add_option("--layer", f.layer,
                                "guide layer r (default: model midpoint)");
  f.beta_opt =
      cmd->add_option("--beta", f.beta, "combination scale, a number or 'inf'");
  cmd->add_option("--topk", f.topk, "candidate tokens per position");
  cmd->add_option("--batch", f.batch, "candidate suffixes per iteration");
  cmd->add_option("--iters", f.iters, "attack iterations");
  cmd->add_option("--suffix-len", f.suffix_len, "adversarial suffix tokens");
  cmd->add_option("--init-token", f.init_token,
                  "initial suffix filler character");
  cmd->add_option("--target-text", f.target_text,
                  "override the affirmative target phrase");
  cmd->add_option("--seed", f.seed, "rng seed");
  cmd->add_option("--match-every", f.match_every,
                  "exact-match check cadence (1 = every iteration)");
  cmd->add_flag("--early-exit", f.early_exit,
                "stop once every optimized query matches");
  cmd->add_option("--out", f.out, "run directory")->required();
  cmd->add_option("--threads", f.threads,
                  "worker cap (0 = ADVLAB_THREADS or hardware)");
}

AttackConfig build_attack_config(const AttackFlags& f, const CharVocab& vocab) {
  AttackConfig cfg;
  if (f.method == "gcg")
    cfg.method = AttackMethod::Gcg;
  else if (f.method == "autoprompt")
    cfg.method = AttackMethod::AutoPrompt;
  else
    throw UsageError("unknown method: " + f.method);

  const std::optional<SurgeryMode> mode = parse_surgery_mode(f.surgery);
  if (!mode) throw UsageError("unknown surgery mode: " + f.surgery);
  cfg.surgery.mode = *mode;
  cfg.surgery.gamma = f.gamma;
  cfg.surgery.layer = f.layer;
  if (f.beta == "inf" || f.beta == "INF" || f.beta == "Inf") {
    cfg.surgery.beta = kInf;
  } else {
    try {
      std::size_t pos = 0;
      cfg.surgery.beta = std::stod(f.beta, &pos);
      if (pos != f.beta.size()) throw std::invalid_argument(f.beta);
    } catch (const std::exception&) {
      throw UsageError("--beta expects a number or 'inf', got '" + f.beta +
                       "'");
    }
  }

  // Flag/mode compatibility: ignored flags warn, contradictory ones error.
  const bool dagger = cfg.surgery.mode == SurgeryMode::LilaDagger ||
                      cfg.surgery.mode == SurgeryMode::LsgmLilaDagger;
  if (f.beta_opt != nullptr && f.beta_opt->count() > 0 && !dagger)
    throw UsageError("--beta only applies to surgery lila+ or lsgm-lila+");
  if (f.gamma_opt != nullptr && f.gamma_opt->count() > 0 &&
      !cfg.surgery.needs_gamma())
    std::cerr << "warning: --gamma has no effect for surgery " << f.surgery
              << "\n";
  if (f.layer_opt != nullptr && f.layer_opt->count() > 0 &&
      !cfg.surgery.needs_guide())
    std::cerr << "warning: --layer has no effect for surgery " << f.surgery
              << "\n";

  cfg.top_k = f.topk;
  cfg.candidate_batch = f.batch;
  cfg.iterations = f.iters;
  cfg.suffix_len = f.suffix_len;
  if (f.init_token.size() != 1)
    throw UsageError("--init-token expects a single character");
  cfg.init_token = vocab.id_of(f.init_token[0]);
  cfg.seed = f.seed;
  cfg.match_every = f.match_every;
  cfg.early_exit = f.early_exit;
  cfg.threads = f.threads > 0 ? f.threads : default_threads();
  return cfg;
}

void manifest_attack_config(RunManifest& man, const AttackFlags& f,
                            const AttackConfig& cfg) {
  man.set("model_hash", file_content_hash(f.model_path));
  man.set("data_hash", file_content_hash(f.data_path));
  man.set("method", attack_method_name(cfg.method));
  man.set("surgery", surgery_mode_name(cfg.surgery.mode));
  if (cfg.surgery.needs_gamma()) man.set("gamma", cfg.surgery.gamma);
  if (cfg.surgery.needs_guide())
    man.set("layer", (long long)cfg.surgery.layer);
  if (cfg.surgery.mode == SurgeryMode::LilaDagger ||
      cfg.surgery.mode == SurgeryMode::LsgmLilaDagger)
    man.set("beta", std::isinf(cfg.surgery.beta) ? "inf"
                                                 : format_g(cfg.surgery.beta));
  man.set("topk", (long long)cfg.top_k);
  man.set("batch", (long long)cfg.candidate_batch);
  man.set("iters", (long long)cfg.iterations);
  man.set("suffix_len", (long long)cfg.suffix_len);
  man.set("init_token", (long long)cfg.init_token);
  man.set("seed", (long long)cfg.seed);
  man.set("match_every", (long long)cfg.match_every);
  man.set("early_exit", (long long)(cfg.early_exit ? 1 : 0));
  man.info["model"] = f.model_path;
  man.info["data"] = f.data_path;
  man.info["threads"] = std::to_string(cfg.threads);
}

// --- run artifacts ----------------------------------------------------------

std::string join_ids(std::span<const int> ids) {
  std::string s;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) s += ' ';
    s += std::to_string(ids[i]);
  }
  return s;
}

void write_attack_artifacts(const fs::path& dir, const AttackResult& res,
                            const CharVocab& vocab,
                            const std::string& config_hash) {
  std::string iters =
      "iter,selected_loss,best_loss,match,grad_norm,guide_norm,wall_ms\n";
  for (const IterationLog& row : res.log) {
    iters += std::to_string(row.iter) + "," + format_g(row.selected_loss) +
             "," + format_g(row.best_loss) + "," +
             format_g(row.match_fraction) + "," + format_g(row.grad_norm) +
             "," + format_g(row.guide_norm) + "," + format_g(row.wall_ms) +
             "\n";
  }
  write_text_file((dir / "iters.csv").string(), iters);

  // Row -1 is the initialization; row i is the state after iteration i.
  std::string sfx = "iter,current,best\n";
  sfx += "-1," + join_ids(res.initial_suffix) + "," +
         join_ids(res.initial_suffix) + "\n";
  std::vector<int> best = res.initial_suffix;
  double best_loss = res.initial_loss;
  for (std::size_t i = 0; i < res.suffix_history.size(); ++i) {
    if (res.log[i].best_loss < best_loss) {
      best_loss = res.log[i].best_loss;
      best = res.suffix_history[i];
    }
    sfx += std::to_string(res.log[i].iter) + "," +
           join_ids(res.suffix_history[i]) + "," + join_ids(best) + "\n";
  }
  write_text_file((dir / "suffixes.csv").string(), sfx);

  json j;
  j["config_hash"] = config_hash;
  j["suffix_token_ids"] = res.best_suffix;
  j["suffix_string"] = vocab.display(res.best_suffix);
  j["matched"] = res.matched;
  j["initial_loss"] = res.initial_loss;
  j["best_loss"] = res.best_loss;
  j["train_mr"] = res.train_mr;
  if (!res.eval_matched.empty()) j["holdout_mr"] = res.eval_mr;
  write_text_file((dir / "result.json").string(), j.dump(2) + "\n");
}

// --- query selection --------------------------------------------------------

struct SelectedQuery {
  std::string query;
  std::string target;
};

SelectedQuery select_query(const ToyDataset& ds, const AttackFlags& f) {
  const int given =
      (f.query_id >= 0) + !f.query_text.empty() + !f.query_file.empty();
  if (given != 1)
    throw UsageError(
        "exactly one of --query-id, --query-text, --query-file is required");
  SelectedQuery out;
  if (f.query_id >= 0) {
    const auto flagged = ds.select(true, true);
    if (f.query_id >= int(flagged.size()))
      throw UsageError("--query-id out of range: only " +
                       std::to_string(flagged.size()) +
                       " flagged held-out queries");
    out.query = flagged[f.query_id]->query;
    out.target = f.target_text.empty() ? " " + ds.cfg.compliance_prefix
                                       : f.target_text;
    return out;
  }
  std::string text = f.query_text;
  if (!f.query_file.empty()) {
    const std::string content = read_text_file(f.query_file);
    text = content.substr(0, content.find('\n'));
  }
  if (text.empty()) throw UsageError("empty query text");
  out.query = text;
  out.target = f.target_text.empty() ? " " + ds.cfg.compliance_prefix
                                     : f.target_text;
  return out;
}

// --- commands ---------------------------------------------------------------

int cmd_train(const std::string& config_path, std::uint64_t seed_override,
              bool seed_given, const std::string& out_dir, int threads_flag) {
  RunManifest man;
  man.command = "train";
  man.started_at = now_iso8601();

  KvConfig file;
  if (!config_path.empty()) {
    file = KvConfig::parse_file(config_path);
    const std::string version = file.require("config_version");
    if (version != "1")
      throw UsageError("unsupported config_version: " + version);
  }

  ToyDatasetConfig dcfg;
  dcfg.n_queries = int(file.get_int("data.n_queries", dcfg.n_queries));
  dcfg.flagged_fraction =
      file.get_double("data.flagged_fraction", dcfg.flagged_fraction);
  dcfg.refusal_text = file.get("data.refusal", dcfg.refusal_text);
  dcfg.compliance_prefix =
      file.get("data.compliance_prefix", dcfg.compliance_prefix);

  CharVocab vocab;
  ModelConfig mcfg;
  mcfg.vocab_size = vocab.size();
  mcfg.n_layers = int(file.get_int("model.n_layers", mcfg.n_layers));
  mcfg.d_model = int(file.get_int("model.d_model", mcfg.d_model));
  mcfg.n_heads = int(file.get_int("model.n_heads", mcfg.n_heads));
  mcfg.d_ff = int(file.get_int("model.d_ff", mcfg.d_ff));
  mcfg.max_seq_len = int(file.get_int("model.max_seq_len", mcfg.max_seq_len));

  TrainConfig tcfg;
  tcfg.steps = int(file.get_int("train.steps", tcfg.steps));
  tcfg.batch_size = int(file.get_int("train.batch", tcfg.batch_size));
  tcfg.lr = file.get_double("train.lr", tcfg.lr);
  tcfg.warmup_steps = int(file.get_int("train.warmup", tcfg.warmup_steps));
  tcfg.refusal_gate = file.get_double("train.gate", tcfg.refusal_gate);

  std::uint64_t seed = std::uint64_t(file.get_int("seed", 0));
  if (seed_given) seed = seed_override;  // flags override file values
  file.reject_unknown_keys();

  dcfg.seed = seed;
  mcfg.seed = seed;
  tcfg.seed = seed;
  tcfg.threads = threads_flag > 0 ? threads_flag : default_threads();

  man.set("seed", (long long)seed);
  man.set("data.n_queries", (long long)dcfg.n_queries);
  man.set("data.flagged_fraction", dcfg.flagged_fraction);
  man.set("data.refusal", dcfg.refusal_text);
  man.set("data.compliance_prefix", dcfg.compliance_prefix);
  man.set("model.n_layers", (long long)mcfg.n_layers);
  man.set("model.d_model", (long long)mcfg.d_model);
  man.set("model.n_heads", (long long)mcfg.n_heads);
  man.set("model.d_ff", (long long)mcfg.d_ff);
  man.set("model.max_seq_len", (long long)mcfg.max_seq_len);
  man.set("model.vocab_size", (long long)mcfg.vocab_size);
  man.set("train.steps", (long long)tcfg.steps);
  man.set("train.batch", (long long)tcfg.batch_size);
  man.set("train.lr", tcfg.lr);
  man.set("train.warmup", (long long)tcfg.warmup_steps);
  man.set("train.gate", tcfg.refusal_gate);
  man.info["threads"] = std::to_string(tcfg.threads);

  fs::create_directories(out_dir);
  const ToyDataset ds = synthesize_dataset(dcfg);
  write_text_file((fs::path(out_dir) / "dataset.jsonl").string(),
                  dataset_to_jsonl(ds));

  std::string log_csv = "step,loss,lr\n";
  TrainOutput out = train_toy_model(
      mcfg, ds, vocab, tcfg, [&](const TrainLogRow& row) {
        log_csv += std::to_string(row.step) + "," + format_g(row.loss) + "," +
                   format_g(row.lr) + "\n";
        if (row.step % 25 == 0)
          std::printf("step %5d  loss %.4f\n", row.step, row.loss);
      });
  write_text_file((fs::path(out_dir) / "train_log.csv").string(), log_csv);
  save_checkpoint(out.model, (fs::path(out_dir) / "model.ckpt").string());

  man.info["refusal_rate"] = format_g(out.refusal_rate);
  man.info["final_loss"] = format_g(out.log.back().loss);
  man.write(out_dir, "f32");

  std::printf("refusal rate %.3f (gate %.2f), checkpoint at %s/model.ckpt\n",
              out.refusal_rate, tcfg.refusal_gate, out_dir.c_str());
  if (out.refusal_rate < tcfg.refusal_gate) {
    std::fprintf(stderr, "refusal gate failed: %.3f < %.2f\n",
                 out.refusal_rate, tcfg.refusal_gate);
    return 2;
  }
  return 0;
}

int cmd_attack(const AttackFlags& f) {
  CharVocab vocab;
  const AttackConfig cfg = build_attack_config(f, vocab);
  const ToyDataset ds = dataset_from_jsonl(read_text_file(f.data_path));
  const SelectedQuery q = select_query(ds, f);
  Model<float> model = load_checkpoint_f32(f.model_path);

  RunManifest man;
  man.command = "attack";
  man.started_at = now_iso8601();
  manifest_attack_config(man, f, cfg);
  man.set("query", q.query);
  man.set("target", q.target);

  const AttackProblem problem = make_attack_problem(vocab, q.query, q.target);
  const AttackResult res = run_attack(model, problem, cfg);

  fs::create_directories(f.out);
  write_attack_artifacts(f.out, res, vocab, man.hash());
  man.write(f.out, "f32");
  std::printf("query '%s': loss %.4f -> %.4f, matched=%d\n", q.query.c_str(),
              res.initial_loss, res.best_loss, int(res.matched));
  return 0;
}

int cmd_attack_universal(const AttackFlags& f, int train_queries,
                         int eval_queries, int repeats) {
  CharVocab vocab;
  const AttackConfig base_cfg = build_attack_config(f, vocab);
  const ToyDataset ds = dataset_from_jsonl(read_text_file(f.data_path));
  Model<float> model = load_checkpoint_f32(f.model_path);

  const auto flagged_train = ds.select(true, false);
  const auto flagged_held = ds.select(true, true);
  if (train_queries < 1 || train_queries > int(flagged_train.size()))
    throw UsageError("--train-queries wants [1, " +
                     std::to_string(flagged_train.size()) + "]");
  if (eval_queries < 0 || eval_queries > int(flagged_held.size()))
    throw UsageError("--eval-queries wants [0, " +
                     std::to_string(flagged_held.size()) + "]");
  if (repeats < 1) throw UsageError("--repeats must be >= 1");

  std::vector<AttackProblem> train, eval_set;
  for (int i = 0; i < train_queries; ++i)
    train.push_back(make_attack_problem(vocab, flagged_train[i]->query,
                                        " " + ds.cfg.compliance_prefix));
  for (int i = 0; i < eval_queries; ++i)
    eval_set.push_back(make_attack_problem(vocab, flagged_held[i]->query,
                                           " " + ds.cfg.compliance_prefix));

  RunManifest man;
  man.command = "attack-universal";
  man.started_at = now_iso8601();
  manifest_attack_config(man, f, base_cfg);
  man.set("train_queries", (long long)train_queries);
  man.set("eval_queries", (long long)eval_queries);
  man.set("repeats", (long long)repeats);

  fs::create_directories(f.out);
  json agg;
  agg["config_hash"] = man.hash();
  agg["runs"] = json::array();
  double mean_holdout = 0, worst_holdout = 1e300, best_holdout = -1e300;
  double mean_train = 0;
  for (int rep = 0; rep < repeats; ++rep) {
    AttackConfig cfg = base_cfg;
    cfg.seed = base_cfg.seed + std::uint64_t(rep);
    const AttackResult res = run_attack(model, train, eval_set, cfg);

    char name[32];
    std::snprintf(name, sizeof(name), "run_%02d", rep);
    const fs::path rdir = fs::path(f.out) / name;
    fs::create_directories(rdir);
    RunManifest rman = man;
    rman.command = "attack-universal/run";
    rman.set("seed", (long long)cfg.seed);
    write_attack_artifacts(rdir, res, vocab, rman.hash());
    rman.write(rdir, "f32");

    json run;
    run["dir"] = name;
    run["seed"] = cfg.seed;
    run["train_mr"] = res.train_mr;
    run["holdout_mr"] = res.eval_mr;
    run["best_loss"] = res.best_loss;
    agg["runs"].push_back(run);
    mean_holdout += res.eval_mr;
    worst_holdout = std::min(worst_holdout, res.eval_mr);
    best_holdout = std::max(best_holdout, res.eval_mr);
    mean_train += res.train_mr;
    std::printf("run %02d: train MR %.3f, holdout MR %.3f, best loss %.4f\n",
                rep, res.train_mr, res.eval_mr, res.best_loss);
  }
  mean_holdout /= repeats;
  mean_train /= repeats;
  agg["mean_holdout_mr"] = mean_holdout;
  agg["worst_holdout_mr"] = worst_holdout;
  agg["best_holdout_mr"] = best_holdout;
  agg["mean_train_mr"] = mean_train;
  write_text_file((fs::path(f.out) / "aggregate.json").string(),
                  agg.dump(2) + "\n");
  man.write(f.out, "f32");
  std::printf("holdout MR mean %.4f worst %.4f best %.4f\n", mean_holdout,
              worst_holdout, best_holdout);
  return 0;
}

std::vector<int> suffix_from_run(const std::string& run_dir, int iter) {
  const std::string text =
      read_text_file((fs::path(run_dir) / "suffixes.csv").string());
  std::size_t start = text.find('\n') + 1;  // skip header
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string::npos) end = text.size();
    const std::string line = text.substr(start, end - start);
    start = end + 1;
    const std::size_t c1 = line.find(',');
    if (c1 == std::string::npos) continue;
    if (std::stoi(line.substr(0, c1)) != iter) continue;
    std::size_t c2 = line.find(',', c1 + 1);
    if (c2 == std::string::npos) c2 = line.size();
    std::vector<int> ids;
    std::size_t p = c1 + 1;
    while (p < c2) {
      std::size_t sp = line.find(' ', p);
      if (sp == std::string::npos || sp > c2) sp = c2;
      ids.push_back(std::stoi(line.substr(p, sp - p)));
      p = sp + 1;
    }
    return ids;
  }
  throw UsageError("iteration " + std::to_string(iter) + " not found in " +
                   run_dir + "/suffixes.csv");
}

int cmd_diagnose(const std::string& kind, const AttackFlags& f,
                 const std::string& suffix_text, const std::string& run_dir,
                 int run_iter, int samples, bool force_identical,
                 bool alter_any_prompt) {
  CharVocab vocab;
  const AttackConfig cfg = build_attack_config(f, vocab);
  const ToyDataset ds = dataset_from_jsonl(read_text_file(f.data_path));
  const SelectedQuery q = select_query(ds, f);
  Model<float> model = load_checkpoint_f32(f.model_path);
  const AttackProblem problem = make_attack_problem(vocab, q.query, q.target);

  std::vector<int> suffix(cfg.suffix_len, cfg.init_token);
  std::string suffix_source = "init";
  if (!suffix_text.empty() && !run_dir.empty())
    throw UsageError("--suffix-text and --run are mutually exclusive");
  if (!suffix_text.empty()) {
    suffix = vocab.encode(suffix_text);
    suffix_source = "text";
  } else if (!run_dir.empty()) {
    suffix = suffix_from_run(run_dir, run_iter);
    suffix_source = run_dir + "@" + std::to_string(run_iter);
  }
  const PromptLayout layout =
      problem.layout(std::span<const int>(suffix.data(), suffix.size()));

  RunManifest man;
  man.command = "diagnose-" + kind;
  man.started_at = now_iso8601();
  manifest_attack_config(man, f, cfg);
  man.set("query", q.query);
  man.set("target", q.target);
  man.set("suffix", join_ids(suffix));
  man.set("samples", (long long)samples);
  man.set("force_identical", (long long)(force_identical ? 1 : 0));
  man.set("alter_any_prompt", (long long)(alter_any_prompt ? 1 : 0));
  man.info["suffix_source"] = suffix_source;

  fs::create_directories(f.out);
  if (kind == "cosine") {
    const BlockGradientReport<float> rep =
        branch_gradient_cosines(model, layout);
    std::string csv = "block,cosine\n";
    for (std::size_t m = 0; m < rep.blocks.size(); ++m) {
      csv += std::to_string(m + 1) + ",";
      if (rep.blocks[m].cosine.has_value())
        csv += format_g(*rep.blocks[m].cosine);
      csv += "\n";
    }
    write_text_file((fs::path(f.out) / "cosines.csv").string(), csv);
  } else if (kind == "trace") {
    TraceOptions topt;
    topt.samples = samples;
    topt.force_identical = force_identical;
    topt.alter_any_prompt = alter_any_prompt;
    topt.threads = cfg.threads;
    RngStream rng(cfg.seed);
    const BranchEffectReport rep =
        branch_effect_trace(model, layout, topt, rng);
    std::string csv = "block,branch,mean_effect,n\n";
    for (std::size_t m = 0; m < rep.mean_skip_effect.size(); ++m) {
      csv += std::to_string(m + 1) + ",skip," +
             format_g(rep.mean_skip_effect[m]) + "," +
             std::to_string(rep.samples) + "\n";
      csv += std::to_string(m + 1) + ",residual," +
             format_g(rep.mean_resid_effect[m]) + "," +
             std::to_string(rep.samples) + "\n";
    }
    write_text_file((fs::path(f.out) / "effects.csv").string(), csv);
  } else if (kind == "pcc") {
    std::vector<int> ref_suffix(cfg.suffix_len, cfg.init_token);
    const PromptLayout reference = problem.layout(
        std::span<const int>(ref_suffix.data(), ref_suffix.size()));
    PccOptions popt;
    popt.samples = samples;
    popt.threads = cfg.threads;
    RngStream rng(cfg.seed);
    const PccReport rep = projection_pcc(model, layout, reference, popt, rng);
    std::string csv = "layer,position_label,neg_pcc,n\n";
    for (std::size_t r = 0; r < rep.layers.size(); ++r) {
      for (std::size_t c = 0; c < rep.column_labels.size(); ++c) {
        csv +=
            std::to_string(rep.layers[r]) + "," + rep.column_labels[c] + ",";
        if (rep.neg_pcc[r][c].has_value()) csv += format_g(*rep.neg_pcc[r][c]);
        csv += "," + std::to_string(rep.samples) + "\n";
      }
    }
    write_text_file((fs::path(f.out) / "pcc.csv").string(), csv);
  } else {
    throw UsageError("unknown diagnose subcommand: " + kind);
  }
  man.write(f.out, "f32");
  return 0;
}

int cmd_sweep(const AttackFlags& f, const std::string& param,
              const std::string& values_csv, int n_queries) {
  CharVocab vocab;
  AttackConfig base_cfg = build_attack_config(f, vocab);
  const ToyDataset ds = dataset_from_jsonl(read_text_file(f.data_path));
  Model<float> model = load_checkpoint_f32(f.model_path);

  if (param != "gamma" && param != "layer")
    throw UsageError("--param must be gamma or layer");
  std::vector<double> values;
  std::size_t p = 0;
  while (p <= values_csv.size() && !values_csv.empty()) {
    std::size_t c = values_csv.find(',', p);
    if (c == std::string::npos) c = values_csv.size();
    const std::string tok = values_csv.substr(p, c - p);
    if (!tok.empty()) values.push_back(std::stod(tok));
    p = c + 1;
  }
  if (values.empty()) throw UsageError("--values must list at least one value");

  const auto flagged_held = ds.select(true, true);
  if (n_queries < 1 || n_queries > int(flagged_held.size()))
    throw UsageError("--queries wants [1, " +
                     std::to_string(flagged_held.size()) + "]");
  std::vector<AttackProblem> problems;
  for (int i = 0; i < n_queries; ++i)
    problems.push_back(make_attack_problem(vocab, flagged_held[i]->query,
                                           " " + ds.cfg.compliance_prefix));

  RunManifest man;
  man.command = "sweep";
  man.started_at = now_iso8601();
  manifest_attack_config(man, f, base_cfg);
  man.set("param", param);
  man.set("values", values_csv);
  man.set("queries", (long long)n_queries);

  fs::create_directories(f.out);
  std::string sweep_csv = "value,mean_mr,mean_final_best_loss\n";
  for (std::size_t vi = 0; vi < values.size(); ++vi) {
    AttackConfig cfg = base_cfg;
    if (param == "gamma")
      cfg.surgery.gamma = values[vi];
    else
      cfg.surgery.layer = int(values[vi]);

    double mean_mr = 0, mean_loss = 0;
    for (int qi = 0; qi < n_queries; ++qi) {
      AttackConfig qcfg = cfg;
      qcfg.seed = base_cfg.seed + std::uint64_t(qi);
      const AttackResult res = run_attack(model, problems[qi], qcfg);

      char name[64];
      std::snprintf(name, sizeof(name), "value_%s/query_%02d",
                    format_g(values[vi]).c_str(), qi);
      const fs::path rdir = fs::path(f.out) / name;
      fs::create_directories(rdir);
      RunManifest rman = man;
      rman.command = "sweep/run";
      rman.set(param, format_g(values[vi]));
      rman.set("seed", (long long)qcfg.seed);
      rman.set("query_index", (long long)qi);
      write_attack_artifacts(rdir, res, vocab, rman.hash());
      rman.write(rdir, "f32");

      mean_mr += res.matched ? 1.0 : 0.0;
      mean_loss += res.best_loss;
    }
    mean_mr /= n_queries;
    mean_loss /= n_queries;
    sweep_csv += format_g(values[vi]) + "," + format_g(mean_mr) + "," +
                 format_g(mean_loss) + "\n";
    std::printf("%s=%s: mean MR %.3f, mean best loss %.4f\n", param.c_str(),
                format_g(values[vi]).c_str(), mean_mr, mean_loss);
  }
  write_text_file((fs::path(f.out) / "sweep.csv").string(), sweep_csv);
  man.write(f.out, "f32");
  return 0;
}

int cmd_gradcheck(const std::string& model_path, bool tiny, int trials,
                  double eps, std::uint64_t seed) {
  Model<double> model;
  if (tiny) {
    ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.d_model = 16;
    cfg.n_heads = 2;
    cfg.d_ff = 32;
    cfg.vocab_size = 32;
    cfg.max_seq_len = 48;
    cfg.seed = seed;
    model = Model<double>::random(cfg);
  } else {
    if (model_path.empty())
      throw UsageError("gradcheck needs --model or --tiny");
    model = load_checkpoint_f64(model_path);
  }

  RngStream rng(seed);
  const std::size_t suffix_len = 4, target_len = 4;
  auto rand_tokens = [&](std::size_t n) {
    std::vector<int> out(n);
    for (int& t : out)
      t = 2 + int(rng.uniform_index(model.cfg.vocab_size - 2));
    return out;
  };

  double worst_overall = 0;
  bool pass = true;
  for (int trial = 0; trial < trials; ++trial) {
    const std::vector<int> prefix = rand_tokens(2);
    const std::vector<int> query = rand_tokens(3);
    const std::vector<int> suffix = rand_tokens(suffix_len);
    const std::vector<int> connector = rand_tokens(2);
    const std::vector<int> target = rand_tokens(target_len);
    const PromptLayout lay =
        assemble_layout(prefix, query, suffix, connector, target);
    const Tensor<double> onehot = one_hot_encode<double>(
        model.cfg, std::span<const int>(lay.tokens.data(), lay.tokens.size()));

    const int r = (model.cfg.n_layers + 1) / 2;
    const std::size_t n = lay.last_prompt_index();

    // Reference prompt for the lila guide: same layout, filler suffix.
    PromptLayout ref = lay;
    for (std::size_t i = ref.suffix_begin; i < ref.suffix_end; ++i)
      ref.tokens[i] = 2;
    Workspace<double> ws;
    ActivationCache<double> ref_cache, cur_cache;
    forward_values_tokens(
        model, std::span<const int>(ref.tokens.data(), ref.tokens.size()), ws,
        nullptr, &ref_cache);
    forward_values_tokens(
        model, std::span<const int>(lay.tokens.data(), lay.tokens.size()), ws,
        nullptr, &cur_cache);
    const DirectionalGuide<double> guide = compute_guide<double>(
        cur_cache, std::span<const double>(ref_cache.stream[r].row(n)), r, n);

    // Frozen branch outputs for the gamma-unrolled forward oracle.
    const std::vector<Tensor<double>> base_resid = cur_cache.branch_resid;

    for (const std::string mode_name : {"none", "lsgm", "lila"}) {
      SurgeryConfig scfg;
      const double gamma = 0.5;
      if (mode_name == "lsgm") {
        scfg.mode = SurgeryMode::Lsgm;
        scfg.gamma = gamma;
      } else if (mode_name == "lila") {
        scfg.mode = SurgeryMode::Lila;
        scfg.layer = r;
      }

      const OneHotGradient<double> g =
          one_hot_gradient(model, lay, scfg, &guide);

      Workspace<double> fws;
      auto f = [&](const Tensor<double>& x) -> double {
        if (scfg.mode == SurgeryMode::Lsgm) {
          // The gamma-scaled backward is the true gradient of the forward
          // whose branch outputs are blended with frozen base values.
          GammaUnroll<double> gu;
          gu.gamma = gamma;
          gu.base_resid = &base_resid;
          ValueForwardOpts<double> opts;
          opts.gamma_unroll = &gu;
          const Tensor<double>& logits = forward_values(model, x, fws, &opts);
          return loss_from_logits(logits, lay.target_begin,
                                  std::span<const int>(lay.tokens.data(),
                                                       lay.tokens.size()))
              .total;
        }
        ActivationCache<double> cache;
        const Tensor<double>& logits =
            forward_values(model, x, fws, nullptr, &cache);
        if (scfg.mode == SurgeryMode::Lila) {
          double proj = 0;
          std::span<const double> h = cache.stream[r].row(n);
          for (std::size_t i = 0; i < h.size(); ++i) proj += guide.v[i] * h[i];
          return -proj;
        }
        return loss_from_logits(logits, lay.target_begin,
                                std::span<const int>(lay.tokens.data(),
                                                     lay.tokens.size()))
            .total;
      };

      // Central differences over the suffix rows only.
      double worst = 0;
      Tensor<double> probe = onehot;
      for (std::size_t i = lay.suffix_begin; i < lay.suffix_end; ++i) {
        for (std::size_t c = 0; c < std::size_t(model.cfg.vocab_size); ++c) {
          const double orig = probe.at(i, c);
          probe.at(i, c) = orig + eps;
          const double fp = f(probe);
          probe.at(i, c) = orig - eps;
          const double fm = f(probe);
          probe.at(i, c) = orig;
          const double fd = (fp - fm) / (2 * eps);
          const double bw = g.grad.at(i - lay.suffix_begin, c);
          const double d = std::fabs(fd - bw);
          if (d <= 1e-7) continue;
          worst = std::max(worst, d / std::max(std::fabs(fd), std::fabs(bw)));
        }
      }
      std::printf("trial %d mode %-5s max_rel_err %.3e %s\n", trial,
                  mode_name.c_str(), worst, worst < 1e-4 ? "ok" : "FAIL");
      worst_overall = std::max(worst_overall, worst);
      if (worst >= 1e-4) pass = false;
    }
  }
  std::printf("gradcheck %s (max relative error %.3e)\n",
              pass ? "PASS" : "FAIL", worst_overall);
  return pass ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "desk-scale laboratory for gradient-based adversarial suffix attacks "
      "on toy decoder-only transformers"};
  app.require_subcommand(1);

  auto* train = app.add_subcommand("train", "train the toy refusal model");
  std::string train_config, train_out;
  std::uint64_t train_seed = 0;
  int train_threads = 0;
  train->add_option("--config", train_config, "key = value config file");
  auto* train_seed_opt =
      train->add_option("--seed", train_seed, "overrides the file seed");
  train->add_option("--out", train_out, "output directory")->required();
  train->add_option("--threads", train_threads, "worker cap");

  auto* attack = app.add_subcommand("attack", "query-specific suffix attack");
  AttackFlags af;
  add_attack_flags(attack, af, true);

  auto* uni = app.add_subcommand("attack-universal",
                                 "shared suffix over several queries");
  AttackFlags uf;
  int uni_train = 5, uni_eval = 20, uni_repeats = 10;
  add_attack_flags(uni, uf, false);
  uni->add_option("--train-queries", uni_train,
                  "flagged train-split queries to optimize over");
  uni->add_option("--eval-queries", uni_eval,
                  "flagged held-out queries to evaluate on");
  uni->add_option("--repeats", uni_repeats, "independent seeds");

  auto* diag =
      app.add_subcommand("diagnose", "cosine | trace | pcc analyses");
  std::string diag_kind, diag_suffix_text, diag_run;
  int diag_iter = 0, diag_samples = 0;
  bool diag_force = false, diag_any = false;
  AttackFlags df;
  diag->add_option("kind", diag_kind, "cosine|trace|pcc")->required();
  add_attack_flags(diag, df, true);
  diag->add_option("--suffix-text", diag_suffix_text,
                   "diagnose this literal suffix");
  diag->add_option("--run", diag_run, "attack run directory to read");
  diag->add_option("--iter", diag_iter, "iteration within --run");
  diag->add_option("--samples", diag_samples, "sample count");
  diag->add_flag("--force-identical", diag_force,
                 "alterations replace tokens with themselves");
  diag->add_flag("--alter-any-prompt", diag_any,
                 "alter any prompt token, not only suffix tokens");

  auto* sweep = app.add_subcommand("sweep", "gamma or layer ablation");
  AttackFlags sf;
  std::string sweep_param, sweep_values;
  int sweep_queries = 2;
  add_attack_flags(sweep, sf, false);
  sweep->add_option("--param", sweep_param, "gamma|layer")->required();
  sweep->add_option("--values", sweep_values, "comma-separated values")
      ->required();
  sweep->add_option("--queries", sweep_queries,
                    "flagged held-out queries per value");

  auto* gc =
      app.add_subcommand("gradcheck", "finite-difference check, 64-bit mode");
  std::string gc_model;
  bool gc_tiny = false;
  int gc_trials = 2;
  double gc_eps = 1e-5;
  std::uint64_t gc_seed = 0;
  gc->add_option("--model", gc_model, "checkpoint file (widened to f64)");
  gc->add_flag("--tiny", gc_tiny, "use a built-in random 2-layer model");
  gc->add_option("--trials", gc_trials, "random prompts per mode");
  gc->add_option("--eps", gc_eps, "finite-difference step");
  gc->add_option("--seed", gc_seed, "rng seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (train->parsed())
      return cmd_train(train_config, train_seed, train_seed_opt->count() > 0,
                       train_out, train_threads);
    if (attack->parsed()) return cmd_attack(af);
    if (uni->parsed())
      return cmd_attack_universal(uf, uni_train, uni_eval, uni_repeats);
    if (diag->parsed()) {
      const int samples =
          diag_samples > 0 ? diag_samples : (diag_kind == "pcc" ? 64 : 16);
      return cmd_diagnose(diag_kind, df, diag_suffix_text, diag_run, diag_iter,
                          samples, diag_force, diag_any);
    }
    if (sweep->parsed())
      return cmd_sweep(sf, sweep_param, sweep_values, sweep_queries);
    if (gc->parsed())
      return cmd_gradcheck(gc_model, gc_tiny, gc_trials, gc_eps, gc_seed);
  } catch (const UsageError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return 2;
  } catch (const IoError& e) {
    std::fprintf(stderr, "io error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 1;
}
