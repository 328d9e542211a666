#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

// End-to-end checks of the command-line tool: exit codes, output contracts,
// and byte-level reproducibility. LCF_CLI_PATH is injected by the build.

namespace {

namespace fs = std::filesystem;

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(f);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

int run(const std::string& args, std::string* output = nullptr) {
  std::string cmd = std::string(LCF_CLI_PATH) + " " + args;
  if (output) {
    cmd += " > /tmp/lcf_cli_out.txt 2>&1";
    int rc = std::system(cmd.c_str());
    *output = slurp("/tmp/lcf_cli_out.txt");
    return WEXITSTATUS(rc);
  }
  cmd += " > /dev/null 2>&1";
  return WEXITSTATUS(std::system(cmd.c_str()));
}

// Small everything: quick pretrain, tiny datasets, few steps.
void write_tiny_config(const std::string& path, const std::string& out_dir) {
  std::ofstream f(path);
  f << R"({
  "task": {"n_train": 24, "n_eval": 12, "seed": 5},
  "sharer": {
    "geometry": {"layers": 2, "hidden": 16, "q_heads": 4, "kv_heads": 2, "head_dim": 4,
                 "max_seq": 96, "mlp_inner": 32},
    "pretrain": {"steps": 8, "copy_items": 40, "task_items": 8}
  },
  "adapter": {"kind": "lcfx", "latent": 8},
  "train": {"steps": 6, "batch": 4, "eval_interval": 3},
  "out": ")" << out_dir
    << R"("
})";
}

}  // namespace

TEST_CASE("count-params emits the published figures") {
  std::string out;
  REQUIRE(run("count-params --pair paper --adapter lcf --d 128", &out) == 0);
  CHECK(out.find("693650") != std::string::npos);
  CHECK(out.find(",39") != std::string::npos);

  REQUIRE(run("count-params --pair paper --adapter c2c", &out) == 0);
  CHECK(out.find("477850000") != std::string::npos);
  CHECK(out.find(",956") != std::string::npos);

  REQUIRE(run("count-params --pair paper --adapter lcf --d 128 --layers 9", &out) == 0);
  CHECK(out.find("6242850") != std::string::npos);
  CHECK(out.find(",13") != std::string::npos);
}

TEST_CASE("unknown config keys are rejected with exit 2") {
  std::string cfg = "/tmp/lcf_cli_bad.json";
  std::ofstream(cfg) << R"({"task": {"n_trian": 5}})";
  std::string out;
  CHECK(run("gen-data --config " + cfg + " --out /tmp/lcf_cli_bad_out", &out) == 2);
  CHECK(out.find("n_trian") != std::string::npos);
  std::remove(cfg.c_str());
}

TEST_CASE("missing checkpoint exits 3") {
  std::string cfg = "/tmp/lcf_cli_eval.json";
  write_tiny_config(cfg, "/tmp/lcf_cli_eval_out");
  CHECK(run("eval --config " + cfg + " --adapter /nonexistent/adapter.lcf") == 3);
  std::remove(cfg.c_str());
}

TEST_CASE("gen-data is reproducible byte for byte") {
  std::string cfg = "/tmp/lcf_cli_gen.json";
  write_tiny_config(cfg, "/tmp/lcf_cli_gen_out");
  REQUIRE(run("gen-data --config " + cfg) == 0);
  std::string first = slurp("/tmp/lcf_cli_gen_out/train.jsonl");
  REQUIRE(run("gen-data --config " + cfg) == 0);
  CHECK(slurp("/tmp/lcf_cli_gen_out/train.jsonl") == first);
  CHECK(first.find("\"sharer_ctx\"") != std::string::npos);
  fs::remove_all("/tmp/lcf_cli_gen_out");
  std::remove(cfg.c_str());
}

TEST_CASE("train twice with one seed produces identical loss traces and checkpoints") {
  std::string cfg = "/tmp/lcf_cli_train.json";
  write_tiny_config(cfg, "/tmp/lcf_cli_train_out");
  REQUIRE(run("train --config " + cfg) == 0);
  std::string trace = slurp("/tmp/lcf_cli_train_out/loss_trace.csv");
  std::string ckpt = slurp("/tmp/lcf_cli_train_out/adapter_final.lcf");
  REQUIRE(run("train --config " + cfg) == 0);
  CHECK(slurp("/tmp/lcf_cli_train_out/loss_trace.csv") == trace);
  CHECK(slurp("/tmp/lcf_cli_train_out/adapter_final.lcf") == ckpt);
  CHECK(trace.rfind("step,lr,temperature,train_loss,eval_loss", 0) == 0);

  SUBCASE("closed gates reproduce the receiver-only metrics") {
    REQUIRE(run("eval --config " + cfg + " --adapter none --out /tmp/lcf_cli_train_out/base") == 0);
    REQUIRE(run("eval --config " + cfg +
                " --adapter /tmp/lcf_cli_train_out/adapter_final.lcf --gates-closed --out "
                "/tmp/lcf_cli_train_out/closed") == 0);
    auto numbers = [](const std::string& path) {
      std::istringstream in(slurp(path));
      std::string line, out;
      std::getline(in, line);  // header
      while (std::getline(in, line))
        if (!line.empty()) out += line.substr(line.find(',')) + "\n";  // strip method column
      return out;
    };
    CHECK(numbers("/tmp/lcf_cli_train_out/base/metrics.csv") ==
          numbers("/tmp/lcf_cli_train_out/closed/metrics.csv"));
  }
  SUBCASE("prune emits a layer report and a loadable pruned checkpoint") {
    REQUIRE(run("prune --config " + cfg +
                " --adapter /tmp/lcf_cli_train_out/adapter_final.lcf --top-k 1 --out "
                "/tmp/lcf_cli_train_out/pruned") == 0);
    std::string report = slurp("/tmp/lcf_cli_train_out/pruned/layer_report.csv");
    CHECK(report.rfind("layer,gate_logit_k,gate_logit_v,dead,importance,harmful,retained", 0) == 0);
    CHECK(fs::exists("/tmp/lcf_cli_train_out/pruned/adapter_pruned.lcf"));
    std::string out;
    REQUIRE(run("eval --config " + cfg +
                " --adapter /tmp/lcf_cli_train_out/pruned/adapter_pruned.lcf --out "
                "/tmp/lcf_cli_train_out/pruned_eval", &out) == 0);
  }
  fs::remove_all("/tmp/lcf_cli_train_out");
  std::remove(cfg.c_str());
}
