#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include <json.hpp>

#include "budgetlab/grpo.hpp"
#include "budgetlab/manifest.hpp"
#include "budgetlab/model.hpp"
#include "budgetlab/taskgen.hpp"

using namespace budgetlab;
namespace fs = std::filesystem;

namespace {

int run(const std::string& args) {
  const std::string cmd =
      std::string(BUDGETLAB_BIN) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  if (status == -1) return -1;
  return WEXITSTATUS(status);
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::path("cli_tmp") / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& p) const { return (path / p).string(); }
};

const std::string kTinyModelFlags =
    " --layers 1 --heads 2 --embed-dim 8 --mlp-dim 16 --context-length 192";

std::string gen_small(const TempDir& dir, int seed = 5) {
  const std::string out = dir / "data";
  REQUIRE(run("--seed " + std::to_string(seed) + " gen-data --out-dir " + out +
              " --train-count 12 --val-count 6 --test-count 6"
              " --difficulty-min 1 --difficulty-max 2") == 0);
  return out;
}

}  // namespace

TEST_CASE("gen-data writes three disjoint splits plus a manifest") {
  TempDir dir("gen");
  const std::string out = gen_small(dir);
  const auto train = load_corpus(out + "/train.jsonl");
  const auto val = load_corpus(out + "/validation.jsonl");
  const auto test = load_corpus(out + "/test.jsonl");
  CHECK(train.size() == 12);
  CHECK(val.size() == 6);
  CHECK(test.size() == 6);
  CHECK(train.front().has_gold);
  std::set<long long> ids;
  for (const auto* split : {&train, &val, &test})
    for (const auto& rec : *split) CHECK(ids.insert(rec.problem.id).second);
  CHECK(fs::exists(out + "/manifest.json"));

  std::ifstream in(out + "/manifest.json");
  const auto manifest = nlohmann::json::parse(in);
  CHECK(manifest["command"] == "gen-data");
  CHECK(manifest["seed"] == 5);
  CHECK(manifest["outputs"].size() == 3);
}

TEST_CASE("gen-data is idempotent: identical flags give identical bytes") {
  TempDir dir("gen-idem");
  const std::string a = dir / "a";
  const std::string b = dir / "b";
  for (const std::string& out : {a, b})
    REQUIRE(run("--seed 9 gen-data --out-dir " + out +
                " --train-count 10 --val-count 5 --test-count 5") == 0);
  for (const char* f : {"/train.jsonl", "/validation.jsonl", "/test.jsonl"})
    CHECK(file_checksum(a + f) == file_checksum(b + f));
  // Different seed changes the corpus.
  const std::string c = dir / "c";
  REQUIRE(run("--seed 10 gen-data --out-dir " + c +
              " --train-count 10 --val-count 5 --test-count 5") == 0);
  CHECK(file_checksum(a + "/train.jsonl") != file_checksum(c + "/train.jsonl"));
}

TEST_CASE("gen-data rejects an invalid spec with the usage exit code") {
  TempDir dir("gen-bad");
  CHECK(run("gen-data --out-dir " + (dir / "x") + " --train-count 0") == 2);
  CHECK(run("gen-data --out-dir " + (dir / "y") +
            " --difficulty-min 5 --difficulty-max 2") == 2);
}

TEST_CASE("unknown flags and subcommands exit with the usage code") {
  CHECK(run("frobnicate") == 2);
  CHECK(run("gen-data --no-such-flag") == 2);
}

TEST_CASE("warmstart with zero steps writes the raw initialization") {
  TempDir dir("warm0");
  const std::string data = gen_small(dir);
  const std::string ckpt = dir / "warm.ckpt";
  REQUIRE(run("--seed 5 warmstart --corpus " + data + "/train.jsonl" +
              kTinyModelFlags + " --max-steps 0 --compliance-threshold 0" +
              " --compliance-max-problems 4 --ckpt-out " + ckpt +
              " --log-out " + (dir / "warm.log")) == 0);
  const Parameters loaded = load_checkpoint(ckpt);
  ModelConfig want;
  want.vocab_size = 64;
  want.context_length = 192;
  want.num_layers = 1;
  want.num_heads = 2;
  want.embed_dim = 8;
  want.mlp_dim = 16;
  want.seed = 5;
  CHECK(loaded.config.same_architecture(want));
  CHECK(loaded.data == init_params(want).data);
  CHECK(fs::exists(ckpt + ".manifest.json"));
}

TEST_CASE("warmstart exits 4 when the threshold is unreachable") {
  TempDir dir("warm-fail");
  const std::string data = gen_small(dir);
  CHECK(run("--seed 5 warmstart --corpus " + data + "/train.jsonl" +
            kTinyModelFlags +
            " --max-steps 2 --batch-size 4 --compliance-threshold 1.0" +
            " --compliance-max-problems 4 --ckpt-out " + (dir / "w.ckpt") +
            " --log-out " + (dir / "w.log")) == 4);
  // The log and checkpoint still land for inspection.
  CHECK(fs::exists(dir / "w.ckpt"));
  CHECK(fs::exists(dir / "w.log"));
}

TEST_CASE("warmstart on a gold-less corpus exits 3") {
  TempDir dir("warm-nogold");
  const std::string out = dir / "data";
  REQUIRE(run("--seed 5 gen-data --out-dir " + out +
              " --train-count 6 --val-count 2 --test-count 2 --no-gold") == 0);
  CHECK(run("--seed 5 warmstart --corpus " + out + "/train.jsonl" +
            kTinyModelFlags + " --max-steps 1 --ckpt-out " + (dir / "w.ckpt") +
            " --log-out " + (dir / "w.log")) == 3);
}

TEST_CASE("train with zero steps reproduces the input checkpoint bytes") {
  TempDir dir("train0");
  const std::string data = gen_small(dir);
  const std::string warm = dir / "warm.ckpt";
  REQUIRE(run("--seed 5 warmstart --corpus " + data + "/train.jsonl" +
              kTinyModelFlags + " --max-steps 0 --compliance-threshold 0" +
              " --compliance-max-problems 4 --ckpt-out " + warm +
              " --log-out " + (dir / "warm.log")) == 0);
  const std::string out = dir / "trained.ckpt";
  REQUIRE(run("--seed 6 train --corpus " + data + "/train.jsonl" +
              " --val-corpus " + data + "/validation.jsonl" +
              " --init-checkpoint " + warm + " --ckpt-out " + out +
              " --log-out " + (dir / "train.log") +
              " --steps 0 --t-star 12 --s-star 6 --group-size 2"
              " --batch-problems 2") == 0);
  CHECK(file_checksum(warm) == file_checksum(out));
}

TEST_CASE("train runs a couple of live steps and logs them") {
  TempDir dir("train2");
  const std::string data = gen_small(dir);
  const std::string warm = dir / "warm.ckpt";
  REQUIRE(run("--seed 5 warmstart --corpus " + data + "/train.jsonl" +
              kTinyModelFlags + " --max-steps 0 --compliance-threshold 0" +
              " --compliance-max-problems 4 --ckpt-out " + warm +
              " --log-out " + (dir / "warm.log")) == 0);
  const std::string log = dir / "train.log";
  REQUIRE(run("--seed 6 train --corpus " + data + "/train.jsonl" +
              " --init-checkpoint " + warm + " --ckpt-out " + (dir / "t.ckpt") +
              " --log-out " + log +
              " --steps 2 --t-star 12 --s-star 6 --group-size 2"
              " --batch-problems 2 --lr 1e-3 --val-cadence 0") == 0);
  const TrainLog parsed = load_train_log(log);
  CHECK(parsed.steps.size() == 2);
  // An untrained policy earns no reward, so zero-variance groups may leave
  // the parameters untouched; the checkpoint must still load cleanly.
  CHECK(load_checkpoint(dir / "t.ckpt").all_finite());
  // Missing init checkpoint is a data error.
  CHECK(run("--seed 6 train --corpus " + data + "/train.jsonl" +
            " --init-checkpoint " + (dir / "nope.ckpt") + " --ckpt-out " +
            (dir / "x.ckpt") + " --log-out " + (dir / "x.log") +
            " --steps 1") == 3);
}

TEST_CASE("sweep writes reports, rejects bad strategies, and is idempotent") {
  TempDir dir("sweep");
  const std::string data = gen_small(dir);
  const std::string warm = dir / "warm.ckpt";
  REQUIRE(run("--seed 5 warmstart --corpus " + data + "/train.jsonl" +
              kTinyModelFlags + " --max-steps 0 --compliance-threshold 0" +
              " --compliance-max-problems 4 --ckpt-out " + warm +
              " --log-out " + (dir / "warm.log")) == 0);
  const std::string csv = dir / "sweep.csv";
  const std::string cmd =
      "--seed 7 sweep --problems " + data + "/test.jsonl --checkpoint " + warm +
      " --budgets 6:4 --budgets 12:4 --n-samples 2 --out-csv " + csv +
      " --out-json " + (dir / "sweep.json") + " --allocation-out " +
      (dir / "alloc.csv");
  REQUIRE(run(cmd) == 0);
  REQUIRE(fs::exists(csv));
  std::ifstream in(csv);
  std::string line;
  int rows = 0;
  std::getline(in, line);  // header
  while (std::getline(in, line))
    if (!line.empty()) ++rows;
  CHECK(rows == 2);
  in.close();
  CHECK(fs::exists(dir / "alloc.csv"));
  CHECK(fs::exists(csv + ".manifest.json"));

  const std::string before = file_checksum(csv);
  REQUIRE(run(cmd) == 0);
  CHECK(file_checksum(csv) == before);

  CHECK(run("--seed 7 sweep --problems " + data + "/test.jsonl --checkpoint " +
            warm + " --budgets 6:4 --strategy beam --out-csv " +
            (dir / "x.csv") + " --out-json " + (dir / "x.json")) == 2);
  // Separate budgeting rejects bare totals.
  CHECK(run("--seed 7 sweep --problems " + data + "/test.jsonl --checkpoint " +
            warm + " --budgets 10 --out-csv " + (dir / "y.csv") +
            " --out-json " + (dir / "y.json")) == 2);
}

TEST_CASE("sweep --compose produces the four-combination grid") {
  TempDir dir("compose");
  const std::string data = gen_small(dir);
  const std::string a = dir / "a.ckpt";
  const std::string b = dir / "b.ckpt";
  REQUIRE(run("--seed 5 warmstart --corpus " + data + "/train.jsonl" +
              kTinyModelFlags + " --max-steps 0 --compliance-threshold 0" +
              " --compliance-max-problems 4 --ckpt-out " + a + " --log-out " +
              (dir / "a.log")) == 0);
  REQUIRE(run("--seed 11 warmstart --corpus " + data + "/train.jsonl" +
              kTinyModelFlags + " --max-steps 0 --compliance-threshold 0" +
              " --compliance-max-problems 4 --ckpt-out " + b + " --log-out " +
              (dir / "b.log")) == 0);
  const std::string csv = dir / "compose.csv";
  REQUIRE(run("--seed 7 sweep --compose --problems " + data +
              "/test.jsonl --checkpoint " + a + " --checkpoint " + b +
              " --budgets 6:4 --budgets 10:4 --n-samples 1 --out-csv " + csv +
              " --out-json " + (dir / "compose.json")) == 0);
  std::ifstream in(csv);
  std::string line;
  std::getline(in, line);
  CHECK(line == "think_model,solution_model,budget_t,budget_s,budget_c,pass1,samples");
  int rows = 0;
  while (std::getline(in, line))
    if (!line.empty()) ++rows;
  CHECK(rows == 8);  // 4 combinations x 2 budgets
  // One checkpoint is not enough for composition.
  CHECK(run("--seed 7 sweep --compose --problems " + data +
            "/test.jsonl --checkpoint " + a + " --budgets 6:4 --out-csv " +
            (dir / "z.csv") + " --out-json " + (dir / "z.json")) == 2);
}

TEST_CASE("config file values apply and flags override them") {
  TempDir dir("config");
  const std::string cfg_path = dir / "run.ini";
  {
    std::ofstream cfg(cfg_path);
    cfg << "seed=33\n\n[gen-data]\nout-dir=" << (dir / "from_config")
        << "\ntrain-count=7\nval-count=3\ntest-count=3\n";
  }
  REQUIRE(run("--config " + cfg_path + " gen-data") == 0);
  CHECK(load_corpus(dir / "from_config" + std::string("/train.jsonl")).size() == 7);
  {
    std::ifstream in(dir / "from_config" + std::string("/manifest.json"));
    const auto manifest = nlohmann::json::parse(in);
    CHECK(manifest["seed"] == 33);
  }
  // A flag on the command line beats the file value.
  REQUIRE(run("--config " + cfg_path + " --seed 44 gen-data --out-dir " +
              (dir / "flag_wins")) == 0);
  std::ifstream in(dir / "flag_wins" + std::string("/manifest.json"));
  const auto manifest = nlohmann::json::parse(in);
  CHECK(manifest["seed"] == 44);
}
