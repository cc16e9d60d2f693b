#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdlib>
#include <filesystem>
#include <string>

#include "advlab/runio.hpp"

namespace fs = std::filesystem;
using namespace advlab;

#ifndef ADVLAB_CLI_PATH
#define ADVLAB_CLI_PATH "advlab"
#endif
#ifndef ADVLAB_CLI_WORKDIR
#define ADVLAB_CLI_WORKDIR "/tmp/advlab_cli_test"
#endif

namespace {

const fs::path kWork = fs::path(ADVLAB_CLI_WORKDIR);

int run_cli(const std::string& args, std::string* out = nullptr) {
  const fs::path log = kWork / "cli_output.txt";
  const std::string cmd = std::string(ADVLAB_CLI_PATH) + " " + args + " > " +
                          log.string() + " 2>&1";
  const int rc = std::system(cmd.c_str());
  if (out != nullptr) *out = read_text_file(log.string());
  return WEXITSTATUS(rc);
}

// Small, fast subject: 2 layers, 60 steps; gate disabled so the train
// command exits 0 even though this midget cannot refuse reliably.
void ensure_subject() {
  static bool done = false;
  if (done) return;
  fs::create_directories(kWork);
  const fs::path cfg = kWork / "tiny.cfg";
  write_text_file(cfg.string(),
                  "config_version = 1\n"
                  "seed = 3\n"
                  "data.n_queries = 48\n"
                  "model.n_layers = 2\n"
                  "model.d_model = 32\n"
                  "model.n_heads = 2\n"
                  "model.d_ff = 64\n"
                  "train.steps = 60\n"
                  "train.batch = 8\n"
                  "train.gate = 0.0\n");
  const int rc = run_cli("train --config " + cfg.string() + " --out " +
                         (kWork / "subject").string() + " --threads 2");
  REQUIRE(rc == 0);
  done = true;
}

std::string subject_model() { return (kWork / "subject/model.ckpt").string(); }
std::string subject_data() {
  return (kWork / "subject/dataset.jsonl").string();
}

std::size_t count_lines(const std::string& text) {
  std::size_t n = 0;
  for (char c : text)
    if (c == '\n') ++n;
  return n;
}

}  // namespace

TEST_CASE("train writes a self-describing run and honors --seed") {
  ensure_subject();
  CHECK(fs::exists(subject_model()));
  CHECK(fs::exists(subject_data()));
  CHECK(fs::exists(kWork / "subject/train_log.csv"));
  const std::string man =
      read_text_file((kWork / "subject/manifest.json").string());
  CHECK(man.find("\"seed\": \"3\"") != std::string::npos);

  SUBCASE("missing config_version is an error naming the field") {
    const fs::path bad = kWork / "bad.cfg";
    write_text_file(bad.string(), "seed = 1\n");
    std::string out;
    const int rc = run_cli("train --config " + bad.string() + " --out " +
                               (kWork / "bad_out").string(),
                           &out);
    CHECK(rc == 1);
    CHECK(out.find("config_version") != std::string::npos);
  }

  SUBCASE("unknown config keys are rejected") {
    const fs::path bad = kWork / "typo.cfg";
    write_text_file(bad.string(), "config_version = 1\ntrain.stepz = 5\n");
    std::string out;
    const int rc = run_cli("train --config " + bad.string() + " --out " +
                               (kWork / "typo_out").string(),
                           &out);
    CHECK(rc == 1);
    CHECK(out.find("train.stepz") != std::string::npos);
  }
}

TEST_CASE("attack command: artifacts, flag validation, determinism") {
  ensure_subject();
  const std::string base = "attack --model " + subject_model() + " --data " +
                           subject_data() + " --query-id 0 --iters 3 "
                           "--suffix-len 6 --seed 11 --threads 2 ";

  SUBCASE("run directory contents") {
    const fs::path out = kWork / "attack0";
    fs::remove_all(out);
    CHECK(run_cli(base + "--out " + out.string()) == 0);
    CHECK(fs::exists(out / "iters.csv"));
    CHECK(fs::exists(out / "suffixes.csv"));
    CHECK(fs::exists(out / "result.json"));
    CHECK(fs::exists(out / "manifest.json"));
    const std::string iters = read_text_file((out / "iters.csv").string());
    CHECK(iters.rfind("iter,selected_loss,best_loss,match,grad_norm,"
                      "guide_norm,wall_ms\n",
                      0) == 0);
    CHECK(count_lines(iters) == 4);  // header + 3 iterations
  }

  SUBCASE("--iters 0 is a valid run with an empty log") {
    const fs::path out = kWork / "attack_zero";
    fs::remove_all(out);
    CHECK(run_cli("attack --model " + subject_model() + " --data " +
                  subject_data() +
                  " --query-id 0 --iters 0 --suffix-len 6 --out " +
                  out.string()) == 0);
    CHECK(count_lines(read_text_file((out / "iters.csv").string())) == 1);
  }

  SUBCASE("--beta without a dagger mode is a usage error") {
    std::string out;
    const int rc = run_cli(base + "--surgery lsgm --beta 2 --out " +
                               (kWork / "nope").string(),
                           &out);
    CHECK(rc == 1);
    CHECK(out.find("beta") != std::string::npos);
  }

  SUBCASE("--layer with surgery none warns but proceeds") {
    const fs::path out = kWork / "warn_layer";
    fs::remove_all(out);
    std::string text;
    const int rc =
        run_cli(base + "--surgery none --layer 2 --out " + out.string(), &text);
    CHECK(rc == 0);
    CHECK(text.find("warning") != std::string::npos);
  }

  SUBCASE("unknown flag exits 1") {
    CHECK(run_cli(base + "--frobnicate --out " + (kWork / "x").string()) == 1);
  }

  SUBCASE("same flags and seed give identical result hashes") {
    const fs::path a = kWork / "det_a", b = kWork / "det_b";
    fs::remove_all(a);
    fs::remove_all(b);
    CHECK(run_cli(base + "--out " + a.string()) == 0);
    CHECK(run_cli(base + "--out " + b.string()) == 0);
    CHECK(read_text_file((a / "result.json").string()) ==
          read_text_file((b / "result.json").string()));
  }
}

TEST_CASE("diagnose subcommands emit plot-ready CSV") {
  ensure_subject();
  const std::string base = "diagnose %KIND% --model " + subject_model() +
                           " --data " + subject_data() +
                           " --query-id 1 --suffix-len 6 --seed 5 "
                           "--threads 2 ";
  auto with_kind = [&](const std::string& kind) {
    std::string s = base;
    return s.replace(s.find("%KIND%"), 6, kind);
  };

  SUBCASE("cosine emits exactly 2l rows") {
    const fs::path out = kWork / "diag_cos";
    fs::remove_all(out);
    CHECK(run_cli(with_kind("cosine") + "--out " + out.string()) == 0);
    const std::string csv = read_text_file((out / "cosines.csv").string());
    CHECK(count_lines(csv) == 1 + 4);  // header + 2l rows for l=2
  }

  SUBCASE("trace with forced identical alteration is all zeros") {
    const fs::path out = kWork / "diag_trace";
    fs::remove_all(out);
    CHECK(run_cli(with_kind("trace") +
                  "--samples 2 --force-identical --out " + out.string()) == 0);
    const std::string csv = read_text_file((out / "effects.csv").string());
    CHECK(count_lines(csv) == 1 + 8);  // header + 2 branches x 2l blocks
    std::size_t pos = csv.find('\n') + 1;
    while (pos < csv.size()) {
      std::size_t end = csv.find('\n', pos);
      const std::string line = csv.substr(pos, end - pos);
      // block,branch,mean_effect,n -> third field must be exactly 0
      std::size_t c2 = line.find(',', line.find(',') + 1);
      std::size_t c3 = line.find(',', c2 + 1);
      CHECK(line.substr(c2 + 1, c3 - c2 - 1) == "0");
      pos = end + 1;
    }
  }

  SUBCASE("pcc grid dimensions follow the layout") {
    const fs::path out = kWork / "diag_pcc";
    fs::remove_all(out);
    CHECK(run_cli(with_kind("pcc") + "--samples 8 --out " + out.string()) ==
          0);
    const std::string csv = read_text_file((out / "pcc.csv").string());
    // columns = suffix(6) + connector(3) + target(10) + whole = 20 per layer
    CHECK(count_lines(csv) == 1 + 2 * 20);
  }

  SUBCASE("missing run artifacts are reported") {
    std::string text;
    const int rc = run_cli(with_kind("cosine") + "--run " +
                               (kWork / "no_such_run").string() + " --out " +
                               (kWork / "diag_missing").string(),
                           &text);
    CHECK(rc == 2);
  }
}

TEST_CASE("sweep emits sweep.csv and per-value run directories") {
  ensure_subject();
  const fs::path out = kWork / "sweep";
  fs::remove_all(out);
  const int rc = run_cli(
      "sweep --param gamma --values 0.5,1.0 --surgery lsgm --model " +
      subject_model() + " --data " + subject_data() +
      " --iters 2 --suffix-len 6 --queries 1 --seed 7 --threads 2 --out " +
      out.string());
  CHECK(rc == 0);
  const std::string csv = read_text_file((out / "sweep.csv").string());
  CHECK(csv.rfind("value,mean_mr,mean_final_best_loss\n", 0) == 0);
  CHECK(count_lines(csv) == 3);
  CHECK(fs::exists(out / "value_0.5/query_00/iters.csv"));
  CHECK(fs::exists(out / "value_1/query_00/iters.csv"));

  SUBCASE("empty value list is a usage error") {
    CHECK(run_cli("sweep --param gamma --values , --surgery lsgm --model " +
                  subject_model() + " --data " + subject_data() + " --out " +
                  (kWork / "sweep_bad").string()) == 1);
  }
}

TEST_CASE("gradcheck passes on the built-in tiny model") {
  ensure_subject();
  std::string out;
  const int rc = run_cli("gradcheck --tiny --trials 1 --seed 2", &out);
  CHECK(rc == 0);
  CHECK(out.find("gradcheck PASS") != std::string::npos);
  CHECK(out.find("mode none") != std::string::npos);
  CHECK(out.find("mode lsgm") != std::string::npos);
  CHECK(out.find("mode lila") != std::string::npos);
}
