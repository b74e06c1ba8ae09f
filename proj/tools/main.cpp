// budgetlab: reproducible pipeline for budget-constrained two-phase decoding
// experiments on a tiny transformer. Four subcommands chained by files:
//
//   budgetlab gen-data   --out-dir data
//   budgetlab warmstart  --corpus data/train.jsonl --ckpt-out warm.ckpt
//   budgetlab train      --corpus data/train.jsonl --init-checkpoint warm.ckpt
//   budgetlab sweep      --problems data/test.jsonl --checkpoint trained.ckpt
//
// All randomness flows from --seed; identical invocations write byte-identical
// artifacts. Every run drops a <primary-output>.manifest.json.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "budgetlab/errors.hpp"
#include "budgetlab/eval.hpp"
#include "budgetlab/grpo.hpp"
#include "budgetlab/manifest.hpp"
#include "budgetlab/model.hpp"
#include "budgetlab/taskgen.hpp"
#include "budgetlab/util.hpp"
#include "budgetlab/vocab.hpp"

namespace {

using namespace budgetlab;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitMissingData = 3;
constexpr int kExitTrainingFailure = 4;
constexpr int kExitIoFailure = 5;

std::string stem_of(const std::string& path) {
  return std::filesystem::path(path).stem().string();
}

std::vector<Problem> problems_of(const std::vector<CorpusRecord>& records) {
  std::vector<Problem> out;
  out.reserve(records.size());
  for (const CorpusRecord& r : records) out.push_back(r.problem);
  return out;
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

struct GenDataOpts {
  std::string out_dir = "data";
  int train_count = 2000;
  int val_count = 200;
  int test_count = 200;
  int difficulty_min = 2;
  int difficulty_max = 6;
  int modulus = 10;
  bool no_gold = false;
};

int cmd_gen_data(const GenDataOpts& o, std::uint64_t seed) {
  std::filesystem::create_directories(o.out_dir);
  RunManifest manifest;
  manifest.command = "gen-data";
  manifest.seed = seed;
  manifest.config = {{"out_dir", o.out_dir},
                     {"train_count", o.train_count},
                     {"val_count", o.val_count},
                     {"test_count", o.test_count},
                     {"difficulty_min", o.difficulty_min},
                     {"difficulty_max", o.difficulty_max},
                     {"modulus", o.modulus},
                     {"gold", !o.no_gold},
                     {"seed", seed}};

  const struct {
    Split split;
    int count;
    const char* file;
  } splits[] = {{Split::kTrain, o.train_count, "train.jsonl"},
                {Split::kValidation, o.val_count, "validation.jsonl"},
                {Split::kTest, o.test_count, "test.jsonl"}};
  for (const auto& s : splits) {
    CorpusSpec spec;
    spec.seed = seed;
    spec.count = s.count;
    spec.difficulty_min = o.difficulty_min;
    spec.difficulty_max = o.difficulty_max;
    spec.modulus = o.modulus;
    spec.split = s.split;
    const auto problems = generate_corpus(spec);
    const std::string path = o.out_dir + "/" + s.file;
    write_corpus(path, problems, s.split, !o.no_gold);
    manifest.add_output(path);
    std::cout << "wrote " << path << " (" << problems.size() << " problems)\n";
  }
  const std::string mpath = o.out_dir + "/manifest.json";
  manifest.write(mpath);
  std::cout << "wrote " << mpath << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// warmstart
// ---------------------------------------------------------------------------

struct WarmstartOpts {
  std::string corpus = "data/train.jsonl";
  std::string ckpt_out = "warmstart.ckpt";
  std::string log_out = "warmstart.log";
  int vocab_size = 64;
  int context_length = 192;
  int num_layers = 2;
  int num_heads = 4;
  int embed_dim = 32;
  int mlp_dim = 128;
  double lr = 3e-3;
  int batch_size = 32;
  int max_steps = 1500;
  int check_cadence = 50;
  double threshold = 0.95;
  int compliance_t = 128;
  int compliance_s = 32;
  double compliance_temperature = 1.0;
  int compliance_max_problems = 64;
};

int cmd_warmstart(const WarmstartOpts& o, std::uint64_t seed) {
  const auto records = load_corpus(o.corpus);
  WarmstartConfig cfg;
  cfg.model.vocab_size = o.vocab_size;
  cfg.model.context_length = o.context_length;
  cfg.model.num_layers = o.num_layers;
  cfg.model.num_heads = o.num_heads;
  cfg.model.embed_dim = o.embed_dim;
  cfg.model.mlp_dim = o.mlp_dim;
  cfg.model.seed = seed;
  cfg.learning_rate = o.lr;
  cfg.batch_size = o.batch_size;
  cfg.max_steps = o.max_steps;
  cfg.check_cadence = o.check_cadence;
  cfg.compliance_threshold = o.threshold;
  cfg.compliance_budget = {o.compliance_t, o.compliance_s};
  cfg.compliance_temperature = o.compliance_temperature;
  cfg.compliance_max_problems = o.compliance_max_problems;
  cfg.seed = seed;
  if (cfg.model.vocab_size < vocab::kNumTokens)
    throw std::invalid_argument("warmstart: vocab_size below token count " +
                                std::to_string(vocab::kNumTokens));

  const WarmstartResult result = warmstart_train(cfg, records);
  save_checkpoint(o.ckpt_out, result.params);
  write_warmstart_log(o.log_out, result.log);

  RunManifest manifest;
  manifest.command = "warmstart";
  manifest.seed = seed;
  manifest.config = {{"corpus", o.corpus},
                     {"ckpt_out", o.ckpt_out},
                     {"log_out", o.log_out},
                     {"vocab_size", o.vocab_size},
                     {"context_length", o.context_length},
                     {"num_layers", o.num_layers},
                     {"num_heads", o.num_heads},
                     {"embed_dim", o.embed_dim},
                     {"mlp_dim", o.mlp_dim},
                     {"lr", o.lr},
                     {"batch_size", o.batch_size},
                     {"max_steps", o.max_steps},
                     {"check_cadence", o.check_cadence},
                     {"threshold", o.threshold},
                     {"compliance_t", o.compliance_t},
                     {"compliance_s", o.compliance_s},
                     {"compliance_temperature", o.compliance_temperature},
                     {"compliance_max_problems", o.compliance_max_problems},
                     {"seed", seed}};
  manifest.add_input(o.corpus);
  manifest.add_output(o.ckpt_out);
  manifest.add_output(o.log_out);
  manifest.write(o.ckpt_out + ".manifest.json");

  std::cout << "warmstart: steps=" << result.log.size()
            << " compliance=" << result.final_compliance << " -> "
            << o.ckpt_out << "\n";
  if (!result.reached_threshold) {
    std::cerr << "warmstart: compliance " << result.final_compliance
              << " below threshold " << o.threshold << "\n";
    return kExitTrainingFailure;
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainOpts {
  std::string corpus = "data/train.jsonl";
  std::string val_corpus;
  std::string init_checkpoint;
  std::string ckpt_out = "trained.ckpt";
  std::string log_out = "train.log";
  TrainConfig cfg;
};

int cmd_train(const TrainOpts& o, std::uint64_t seed) {
  const auto records = load_corpus(o.corpus);
  const auto train_problems = problems_of(records);
  std::vector<Problem> val_problems;
  if (!o.val_corpus.empty())
    val_problems = problems_of(load_corpus(o.val_corpus));

  Parameters init = load_checkpoint(o.init_checkpoint);
  TrainConfig cfg = o.cfg;
  cfg.seed = seed;
  cfg.init_checkpoint = o.init_checkpoint;

  const TrainResult result = train(cfg, init, train_problems, val_problems);
  save_checkpoint(o.ckpt_out, result.params);
  write_train_log(o.log_out, result.log);

  RunManifest manifest;
  manifest.command = "train";
  manifest.seed = seed;
  manifest.config = {{"corpus", o.corpus},
                     {"val_corpus", o.val_corpus},
                     {"init_checkpoint", o.init_checkpoint},
                     {"ckpt_out", o.ckpt_out},
                     {"log_out", o.log_out},
                     {"t_star", cfg.thinking_budget},
                     {"s_star", cfg.solution_budget},
                     {"group_size", cfg.group_size},
                     {"batch_problems", cfg.batch_problems},
                     {"lr", cfg.learning_rate},
                     {"steps", cfg.steps},
                     {"rollout_temperature", cfg.rollout_temperature},
                     {"variance_epsilon", cfg.variance_epsilon},
                     {"length_normalize", cfg.length_normalize},
                     {"adam", cfg.use_adam},
                     {"val_cadence", cfg.validation_cadence},
                     {"val_samples", cfg.validation_samples},
                     {"val_max_problems", cfg.validation_max_problems},
                     {"val_temperature", cfg.validation_temperature},
                     {"seed", seed}};
  manifest.add_input(o.corpus);
  if (!o.val_corpus.empty()) manifest.add_input(o.val_corpus);
  manifest.add_input(o.init_checkpoint);
  manifest.add_output(o.ckpt_out);
  manifest.add_output(o.log_out);
  manifest.write(o.ckpt_out + ".manifest.json");

  double final_reward = 0.0;
  if (!result.log.steps.empty()) final_reward = result.log.steps.back().mean_reward;
  std::cout << "train: steps=" << result.log.steps.size()
            << " final_mean_reward=" << final_reward << " -> " << o.ckpt_out
            << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

struct SweepOpts {
  std::string problems = "data/test.jsonl";
  std::vector<std::string> checkpoints;
  std::string strategy = "separate";
  std::vector<std::string> budgets;  // "t:s", bare total, or "max"
  int n_samples = 4;
  double temperature = 0.6;
  std::string out_csv = "sweep.csv";
  std::string out_json = "sweep.json";
  std::string allocation_out;
  std::string dump_trajectories_path;
  bool compose = false;
};

BudgetConfig parse_budget(const std::string& text, Strategy strategy,
                          const ModelConfig& config,
                          std::span<const Problem> problems) {
  if (text == "max") return unconstrained_budget(config, problems);
  const auto colon = text.find(':');
  try {
    if (colon == std::string::npos) {
      if (strategy == Strategy::kSeparateBudget)
        throw std::invalid_argument(
            "separate budgeting needs t:s budgets, got '" + text + "'");
      return BudgetConfig{0, std::stoi(text)};
    }
    return BudgetConfig{std::stoi(text.substr(0, colon)),
                        std::stoi(text.substr(colon + 1))};
  } catch (const std::logic_error&) {
    throw std::invalid_argument("bad budget '" + text + "' (want t:s or total)");
  }
}

int cmd_sweep(const SweepOpts& o, std::uint64_t seed) {
  if (o.checkpoints.empty())
    throw std::invalid_argument("sweep: at least one --checkpoint required");
  if (o.budgets.empty())
    throw std::invalid_argument("sweep: at least one --budgets entry required");
  const Strategy strategy = strategy_from_name(o.strategy);
  const auto problems = problems_of(load_corpus(o.problems));

  std::vector<Parameters> models;
  models.reserve(o.checkpoints.size());
  for (const std::string& path : o.checkpoints)
    models.push_back(load_checkpoint(path));

  std::vector<BudgetConfig> budgets;
  for (const std::string& text : o.budgets)
    budgets.push_back(parse_budget(text, strategy, models.front().config, problems));

  RunManifest manifest;
  manifest.command = "sweep";
  manifest.seed = seed;
  manifest.config = {{"problems", o.problems},
                     {"checkpoints", o.checkpoints},
                     {"strategy", o.strategy},
                     {"budgets", o.budgets},
                     {"n_samples", o.n_samples},
                     {"temperature", o.temperature},
                     {"out_csv", o.out_csv},
                     {"out_json", o.out_json},
                     {"compose", o.compose},
                     {"seed", seed}};
  manifest.add_input(o.problems);
  for (const std::string& path : o.checkpoints) manifest.add_input(path);

  if (o.compose) {
    if (models.size() != 2)
      throw std::invalid_argument(
          "sweep --compose: exactly two checkpoints (base, trained)");
    if (strategy != Strategy::kSeparateBudget)
      throw std::invalid_argument("sweep --compose: strategy must be separate");
    const std::string tag_a = stem_of(o.checkpoints[0]);
    const std::string tag_b = stem_of(o.checkpoints[1]);
    const Parameters* pick[2] = {&models[0], &models[1]};
    const std::string tags[2] = {tag_a, tag_b};

    nlohmann::json jrows = nlohmann::json::array();
    std::ofstream csv(o.out_csv, std::ios::binary);
    if (!csv) throw std::runtime_error("cannot open for writing: " + o.out_csv);
    csv << "think_model,solution_model,budget_t,budget_s,budget_c,pass1,"
           "samples\n";
    for (int ti = 0; ti < 2; ++ti) {
      for (int si = 0; si < 2; ++si) {
        for (const BudgetConfig& b : budgets) {
          const PassAt1Result res = cross_model_composition(
              *pick[ti], *pick[si], problems, b, o.n_samples, o.temperature,
              seed);
          char buf[160];
          std::snprintf(buf, sizeof(buf), "%d,%d,%d,%.6f,%zu",
                        b.thinking_budget, b.solution_budget, b.total(),
                        res.accuracy, res.trajectories.size());
          csv << tags[ti] << ',' << tags[si] << ',' << buf << '\n';
          jrows.push_back({{"think_model", tags[ti]},
                           {"solution_model", tags[si]},
                           {"budget_t", b.thinking_budget},
                           {"budget_s", b.solution_budget},
                           {"budget_c", b.total()},
                           {"pass1", res.accuracy},
                           {"samples", res.trajectories.size()}});
          std::cout << "compose " << tags[ti] << "+" << tags[si] << " t="
                    << b.thinking_budget << " s=" << b.solution_budget
                    << " pass1=" << res.accuracy << "\n";
        }
      }
    }
    csv.close();
    nlohmann::json j;
    j["compose"] = jrows;
    std::ofstream js(o.out_json, std::ios::binary);
    if (!js) throw std::runtime_error("cannot open for writing: " + o.out_json);
    js << j.dump(2) << '\n';
    js.close();
    manifest.add_output(o.out_csv);
    manifest.add_output(o.out_json);
    manifest.write(o.out_csv + ".manifest.json");
    return kExitOk;
  }

  std::vector<SweepReport> reports;
  std::vector<Trajectory> all_trajectories;
  std::vector<double> all_rewards;
  for (std::size_t mi = 0; mi < models.size(); ++mi) {
    SweepReport report =
        budget_sweep(models[mi], problems, strategy, budgets, o.n_samples,
                     o.temperature, seed, stem_of(o.checkpoints[mi]));
    for (const SweepRow& row : report.rows)
      std::cout << report.model_tag << " " << report.strategy
                << " t=" << row.budget_thinking << " s=" << row.budget_solution
                << " c=" << row.budget_total << " pass1=" << row.pass1 << "\n";
    reports.push_back(std::move(report));
    if (!o.allocation_out.empty() || !o.dump_trajectories_path.empty()) {
      for (const BudgetConfig& b : budgets) {
        const PassAt1Result res = pass_at_1(models[mi], problems, strategy, b,
                                            o.n_samples, o.temperature, seed);
        all_trajectories.insert(all_trajectories.end(),
                                res.trajectories.begin(),
                                res.trajectories.end());
        all_rewards.insert(all_rewards.end(), res.rewards.begin(),
                           res.rewards.end());
      }
    }
  }
  write_sweep_csv(o.out_csv, reports);
  write_sweep_json(o.out_json, reports);
  manifest.add_output(o.out_csv);
  manifest.add_output(o.out_json);
  if (!o.allocation_out.empty()) {
    write_allocation_csv(o.allocation_out,
                         token_allocation_stats(all_trajectories));
    manifest.add_output(o.allocation_out);
  }
  if (!o.dump_trajectories_path.empty()) {
    dump_trajectories(o.dump_trajectories_path, all_trajectories, all_rewards);
    manifest.add_output(o.dump_trajectories_path);
  }
  manifest.write(o.out_csv + ".manifest.json");
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"budget-constrained two-phase decoding lab"};
  app.require_subcommand(1);
  app.set_config("--config", "", "INI config file; command-line flags win");

  std::uint64_t seed = 0;
  int workers = 0;
  app.add_option("--seed", seed, "master seed for all randomness")
      ->capture_default_str();
  app.add_option("--workers", workers,
                 "max parallel workers (0 = hardware concurrency)")
      ->capture_default_str();

  GenDataOpts gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "generate corpus splits");
  gen_cmd->add_option("--out-dir", gen.out_dir)->capture_default_str();
  gen_cmd->add_option("--train-count", gen.train_count)->capture_default_str();
  gen_cmd->add_option("--val-count", gen.val_count)->capture_default_str();
  gen_cmd->add_option("--test-count", gen.test_count)->capture_default_str();
  gen_cmd->add_option("--difficulty-min", gen.difficulty_min)->capture_default_str();
  gen_cmd->add_option("--difficulty-max", gen.difficulty_max)->capture_default_str();
  gen_cmd->add_option("--modulus", gen.modulus)->capture_default_str();
  gen_cmd->add_flag("--no-gold", gen.no_gold, "omit gold trajectories");

  WarmstartOpts warm;
  auto* warm_cmd =
      app.add_subcommand("warmstart", "supervised protocol pretraining");
  warm_cmd->add_option("--corpus", warm.corpus)->capture_default_str();
  warm_cmd->add_option("--ckpt-out", warm.ckpt_out)->capture_default_str();
  warm_cmd->add_option("--log-out", warm.log_out)->capture_default_str();
  warm_cmd->add_option("--vocab-size", warm.vocab_size)->capture_default_str();
  warm_cmd->add_option("--context-length", warm.context_length)->capture_default_str();
  warm_cmd->add_option("--layers", warm.num_layers)->capture_default_str();
  warm_cmd->add_option("--heads", warm.num_heads)->capture_default_str();
  warm_cmd->add_option("--embed-dim", warm.embed_dim)->capture_default_str();
  warm_cmd->add_option("--mlp-dim", warm.mlp_dim)->capture_default_str();
  warm_cmd->add_option("--lr", warm.lr)->capture_default_str();
  warm_cmd->add_option("--batch-size", warm.batch_size)->capture_default_str();
  warm_cmd->add_option("--max-steps", warm.max_steps)->capture_default_str();
  warm_cmd->add_option("--check-cadence", warm.check_cadence)->capture_default_str();
  warm_cmd->add_option("--compliance-threshold", warm.threshold)->capture_default_str();
  warm_cmd->add_option("--compliance-t", warm.compliance_t)->capture_default_str();
  warm_cmd->add_option("--compliance-s", warm.compliance_s)->capture_default_str();
  warm_cmd->add_option("--compliance-temperature", warm.compliance_temperature)
      ->capture_default_str();
  warm_cmd->add_option("--compliance-max-problems", warm.compliance_max_problems)
      ->capture_default_str();

  TrainOpts tr;
  auto* train_cmd =
      app.add_subcommand("train", "policy-gradient training with budgeted rollouts");
  train_cmd->add_option("--corpus", tr.corpus)->capture_default_str();
  train_cmd->add_option("--val-corpus", tr.val_corpus)->capture_default_str();
  train_cmd->add_option("--init-checkpoint", tr.init_checkpoint)->required();
  train_cmd->add_option("--ckpt-out", tr.ckpt_out)->capture_default_str();
  train_cmd->add_option("--log-out", tr.log_out)->capture_default_str();
  train_cmd->add_option("--t-star", tr.cfg.thinking_budget)->capture_default_str();
  train_cmd->add_option("--s-star", tr.cfg.solution_budget)->capture_default_str();
  train_cmd->add_option("--group-size", tr.cfg.group_size)->capture_default_str();
  train_cmd->add_option("--batch-problems", tr.cfg.batch_problems)->capture_default_str();
  train_cmd->add_option("--lr", tr.cfg.learning_rate)->capture_default_str();
  train_cmd->add_option("--steps", tr.cfg.steps)->capture_default_str();
  train_cmd->add_option("--temperature", tr.cfg.rollout_temperature)
      ->capture_default_str();
  train_cmd->add_option("--variance-epsilon", tr.cfg.variance_epsilon)
      ->capture_default_str();
  train_cmd->add_flag("--length-normalize", tr.cfg.length_normalize);
  train_cmd->add_flag("--adam", tr.cfg.use_adam);
  train_cmd->add_option("--val-cadence", tr.cfg.validation_cadence)->capture_default_str();
  train_cmd->add_option("--val-samples", tr.cfg.validation_samples)->capture_default_str();
  train_cmd->add_option("--val-max-problems", tr.cfg.validation_max_problems)
      ->capture_default_str();
  train_cmd->add_option("--val-temperature", tr.cfg.validation_temperature)
      ->capture_default_str();

  SweepOpts sw;
  auto* sweep_cmd = app.add_subcommand("sweep", "budget sweep / composition grid");
  sweep_cmd->add_option("--problems", sw.problems)->capture_default_str();
  sweep_cmd->add_option("--checkpoint", sw.checkpoints, "model checkpoint (repeatable)");
  sweep_cmd->add_option("--strategy", sw.strategy, "separate|vanilla|forcing")
      ->capture_default_str();
  sweep_cmd->add_option("--budgets", sw.budgets,
                        "budget list: t:s pairs, bare totals, or 'max'");
  sweep_cmd->add_option("--n-samples", sw.n_samples)->capture_default_str();
  sweep_cmd->add_option("--temperature", sw.temperature)->capture_default_str();
  sweep_cmd->add_option("--out-csv", sw.out_csv)->capture_default_str();
  sweep_cmd->add_option("--out-json", sw.out_json)->capture_default_str();
  sweep_cmd->add_option("--allocation-out", sw.allocation_out,
                        "token-allocation histogram CSV");
  sweep_cmd->add_option("--dump-trajectories", sw.dump_trajectories_path,
                        "trajectory JSONL dump");
  sweep_cmd->add_flag("--compose", sw.compose,
                      "thinking/solution cross-model grid (2 checkpoints)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  if (workers > 0) set_max_workers(workers);

  try {
    if (*gen_cmd) return cmd_gen_data(gen, seed);
    if (*warm_cmd) return cmd_warmstart(warm, seed);
    if (*train_cmd) return cmd_train(tr, seed);
    if (*sweep_cmd) return cmd_sweep(sw, seed);
    std::cerr << "no subcommand\n";
    return kExitUsage;
  } catch (const MissingDataError& e) {
    std::cerr << "error (missing data): " << e.what() << "\n";
    return kExitMissingData;
  } catch (const CheckpointError& e) {
    std::cerr << "error (bad checkpoint): " << e.what() << "\n";
    return kExitMissingData;
  } catch (const DivergenceError& e) {
    std::cerr << "error (divergence): " << e.what() << "\n";
    return kExitTrainingFailure;
  } catch (const ContextOverflowError& e) {
    std::cerr << "error (invalid config): " << e.what() << "\n";
    return kExitUsage;
  } catch (const IncompatibleModelsError& e) {
    std::cerr << "error (invalid config): " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error (invalid config): " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error (io): " << e.what() << "\n";
    return kExitIoFailure;
  }
}
