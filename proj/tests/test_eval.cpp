#include "budgetlab/eval.hpp"

#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <vector>

#include "budgetlab/errors.hpp"
#include "budgetlab/vocab.hpp"

using namespace budgetlab;
using namespace budgetlab::vocab;

namespace {

std::vector<Problem> eval_corpus(int n) {
  CorpusSpec spec;
  spec.seed = 55;
  spec.count = n;
  spec.difficulty_min = 1;
  spec.difficulty_max = 3;
  spec.modulus = 10;
  spec.split = Split::kTest;
  return generate_corpus(spec);
}

std::vector<int> correct_script(const Problem& p) {
  std::vector<int> s{kThinkClose, kAnswerMarker};
  append_number(s, p.answer);
  s.push_back(kEos);
  return s;
}

ProblemPolicyFactory always_correct() {
  return [](const Problem& p) {
    return std::make_unique<ScriptedPolicy>(correct_script(p), kDigit0);
  };
}

// Answers correctly with probability p, decided by one rng draw per decode.
class BernoulliPolicy : public TokenPolicy {
 public:
  BernoulliPolicy(const Problem& problem, double p_correct)
      : problem_(problem), p_correct_(p_correct) {}
  void begin(std::span<const int>) override {
    script_.clear();
    pos_ = 0;
  }
  int sample(Rng& rng) override {
    if (script_.empty()) {
      Problem chosen = problem_;
      if (rng.next_double() >= p_correct_)
        chosen.answer = (problem_.answer + 1) % problem_.modulus;
      script_ = correct_script(chosen);
    }
    if (pos_ < script_.size()) return script_[pos_++];
    return kDigit0;
  }
  void push(int) override {}

 private:
  Problem problem_;
  double p_correct_;
  std::vector<int> script_;
  std::size_t pos_ = 0;
};

ProblemPolicyFactory bernoulli(double p_correct) {
  return [p_correct](const Problem& p) {
    return std::make_unique<BernoulliPolicy>(p, p_correct);
  };
}

ProblemPolicyFactory never_closing() {
  return [](const Problem&) {
    return std::make_unique<ScriptedPolicy>(std::vector<int>{}, kDigit0 + 4);
  };
}

ModelConfig tiny_model() {
  ModelConfig c;
  c.vocab_size = 24;
  c.context_length = 96;
  c.num_layers = 1;
  c.num_heads = 2;
  c.embed_dim = 8;
  c.mlp_dim = 16;
  c.seed = 9;
  return c;
}

}  // namespace

TEST_CASE("pass_at_1: degenerate stubs") {
  const auto problems = eval_corpus(20);
  const auto res = pass_at_1_with(always_correct(), problems,
                                  Strategy::kSeparateBudget, {16, 8}, 2, 96, 1);
  CHECK(res.accuracy == 1.0);
  CHECK(res.trajectories.size() == 40);
  CHECK_THROWS_AS(pass_at_1_with(always_correct(), {}, Strategy::kSeparateBudget,
                                 {16, 8}, 2, 96, 1),
                  std::invalid_argument);
  CHECK_THROWS_AS(pass_at_1_with(always_correct(), problems,
                                 Strategy::kSeparateBudget, {16, 8}, 0, 96, 1),
                  std::invalid_argument);
}

TEST_CASE("pass_at_1: bernoulli stub within 3 sigma of its rate") {
  const auto problems = eval_corpus(200);
  const auto res = pass_at_1_with(bernoulli(0.5), problems,
                                  Strategy::kSeparateBudget, {16, 8}, 8, 96, 3);
  const double n = 200.0 * 8.0;
  const double sigma = std::sqrt(0.25 / n);
  CHECK(std::abs(res.accuracy - 0.5) <= 3.0 * sigma);
}

TEST_CASE("pass_at_1: deterministic in the seed") {
  const auto problems = eval_corpus(30);
  const auto a = pass_at_1_with(bernoulli(0.4), problems,
                                Strategy::kSeparateBudget, {16, 8}, 3, 96, 17);
  const auto b = pass_at_1_with(bernoulli(0.4), problems,
                                Strategy::kSeparateBudget, {16, 8}, 3, 96, 17);
  CHECK(a.accuracy == b.accuracy);
  REQUIRE(a.trajectories.size() == b.trajectories.size());
  for (std::size_t i = 0; i < a.trajectories.size(); ++i) {
    CHECK(a.trajectories[i].output() == b.trajectories[i].output());
    CHECK(a.rewards[i] == b.rewards[i]);
  }
  const auto c = pass_at_1_with(bernoulli(0.4), problems,
                                Strategy::kSeparateBudget, {16, 8}, 3, 96, 18);
  CHECK(a.accuracy != c.accuracy);  // different seed, different draw
}

TEST_CASE("pass_at_1: doubling samples moves the estimate within noise") {
  const auto problems = eval_corpus(150);
  const auto a = pass_at_1_with(bernoulli(0.3), problems,
                                Strategy::kSeparateBudget, {16, 8}, 4, 96, 5);
  const auto b = pass_at_1_with(bernoulli(0.3), problems,
                                Strategy::kSeparateBudget, {16, 8}, 8, 96, 5);
  const double sigma_a = std::sqrt(0.3 * 0.7 / (150.0 * 4.0));
  const double sigma_b = std::sqrt(0.3 * 0.7 / (150.0 * 8.0));
  CHECK(std::abs(a.accuracy - b.accuracy) <= 3.0 * (sigma_a + sigma_b));
}

TEST_CASE("budget_sweep: single budget row matches a direct call") {
  const Parameters params = init_params(tiny_model());
  const auto problems = eval_corpus(10);
  const BudgetConfig budget{12, 6};
  const auto direct = pass_at_1(params, problems, Strategy::kSeparateBudget,
                                budget, 2, 0.8, 7);
  const std::vector<BudgetConfig> budgets{budget};
  const SweepReport report = budget_sweep(params, problems,
                                          Strategy::kSeparateBudget, budgets,
                                          2, 0.8, 7, "m");
  REQUIRE(report.rows.size() == 1);
  CHECK(report.rows[0].pass1 == direct.accuracy);
  CHECK(report.rows[0].sample_count == 20);
  CHECK(report.rows[0].mean_total_tokens ==
        doctest::Approx(report.rows[0].mean_think_tokens +
                        report.rows[0].mean_solution_tokens));
}

TEST_CASE("budget_sweep: rows sorted by thinking budget, caps respected") {
  const Parameters params = init_params(tiny_model());
  const auto problems = eval_corpus(8);
  const std::vector<BudgetConfig> budgets{{32, 8}, {8, 8}, {16, 8}};
  const SweepReport report = budget_sweep(params, problems,
                                          Strategy::kSeparateBudget, budgets,
                                          2, 1.0, 11, "m");
  REQUIRE(report.rows.size() == 3);
  CHECK(report.rows[0].budget_thinking == 8);
  CHECK(report.rows[1].budget_thinking == 16);
  CHECK(report.rows[2].budget_thinking == 32);
  for (const SweepRow& row : report.rows) {
    CHECK(row.pass1 >= 0.0);
    CHECK(row.pass1 <= 1.0);
    CHECK(row.mean_think_tokens <= row.budget_thinking);
    CHECK(row.mean_solution_tokens <= row.budget_solution);
  }
  // Determinism: bit-identical on repeat.
  const SweepReport again = budget_sweep(params, problems,
                                         Strategy::kSeparateBudget, budgets,
                                         2, 1.0, 11, "m");
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(report.rows[i].pass1 == again.rows[i].pass1);
    CHECK(report.rows[i].mean_think_tokens == again.rows[i].mean_think_tokens);
  }
}

TEST_CASE("token_allocation_stats: conservation and forced concentration") {
  const auto problems = eval_corpus(25);
  const auto res = pass_at_1_with(never_closing(), problems,
                                  Strategy::kSeparateBudget, {8, 4}, 4, 96, 2);
  const AllocationStats stats = token_allocation_stats(res.trajectories);
  REQUIRE(stats.per_budget.size() == 1);
  const AllocationHistogram& h = stats.per_budget[0];
  CHECK(h.count == 100);
  long think_mass = 0, solution_mass = 0;
  for (long v : h.think_bins) think_mass += v;
  for (long v : h.solution_bins) solution_mass += v;
  CHECK(think_mass == 100);
  CHECK(solution_mass == 100);
  // Every trajectory is forced at t=8, so the t/bin_width bin holds all mass.
  CHECK(h.bin_width == 1);
  CHECK(h.think_bins[8] == 100);
  CHECK_THROWS_AS(token_allocation_stats({}), std::invalid_argument);
}

TEST_CASE("token_allocation_stats: thinking mean tracks the budget on a rambling stub") {
  const auto problems = eval_corpus(20);
  auto run = [&](int t) {
    return pass_at_1_with(never_closing(), problems, Strategy::kSeparateBudget,
                          {t, 4}, 2, 96, 4).trajectories;
  };
  auto t8 = run(8);
  auto t16 = run(16);
  auto mean_think = [](const std::vector<Trajectory>& ts) {
    double m = 0.0;
    for (const Trajectory& t : ts) m += static_cast<double>(t.think_tokens.size());
    return m / static_cast<double>(ts.size());
  };
  CHECK(mean_think(t8) < mean_think(t16));
  // Mixed strategies are rejected.
  auto mixed = t8;
  ScriptedPolicy p({}, kDigit0);
  Rng rng(1);
  mixed.push_back(decode_vanilla_truncate(p, problems[0].prompt_tokens, 8, 96, rng));
  CHECK_THROWS_AS(token_allocation_stats(mixed), std::invalid_argument);
}

TEST_CASE("cross_model_composition: identity with itself is bit-exact") {
  const Parameters params = init_params(tiny_model());
  const auto problems = eval_corpus(12);
  const BudgetConfig budget{10, 6};
  const auto direct = pass_at_1(params, problems, Strategy::kSeparateBudget,
                                budget, 3, 0.9, 23);
  const auto composed =
      cross_model_composition(params, params, problems, budget, 3, 0.9, 23);
  CHECK(composed.accuracy == direct.accuracy);
  REQUIRE(composed.trajectories.size() == direct.trajectories.size());
  for (std::size_t i = 0; i < direct.trajectories.size(); ++i) {
    CHECK(composed.trajectories[i].think_tokens ==
          direct.trajectories[i].think_tokens);
    CHECK(composed.trajectories[i].solution_tokens ==
          direct.trajectories[i].solution_tokens);
    CHECK(composed.trajectories[i].policy_chosen ==
          direct.trajectories[i].policy_chosen);
  }
  // A separately-initialized copy with identical values behaves identically.
  const Parameters copy = init_params(tiny_model());
  const auto composed2 =
      cross_model_composition(params, copy, problems, budget, 3, 0.9, 23);
  CHECK(composed2.accuracy == direct.accuracy);
}

TEST_CASE("cross_model_composition: two different models change the outcome") {
  const auto problems = eval_corpus(12);
  const Parameters a = init_params(tiny_model());
  ModelConfig other = tiny_model();
  other.seed = 1234;
  const Parameters b = init_params(other);
  const BudgetConfig budget{10, 6};
  const auto ab = cross_model_composition(a, b, problems, budget, 3, 0.9, 23);
  const auto ba = cross_model_composition(b, a, problems, budget, 3, 0.9, 23);
  bool any_diff = false;
  for (std::size_t i = 0; i < ab.trajectories.size(); ++i)
    any_diff |= (ab.trajectories[i].output() != ba.trajectories[i].output());
  CHECK(any_diff);
}

TEST_CASE("cross_model_composition: vocabulary mismatch raises") {
  const Parameters a = init_params(tiny_model());
  ModelConfig other = tiny_model();
  other.vocab_size = 32;
  const Parameters b = init_params(other);
  const auto problems = eval_corpus(2);
  CHECK_THROWS_AS(
      cross_model_composition(a, b, problems, {8, 4}, 1, 1.0, 1),
      IncompatibleModelsError);
}

TEST_CASE("trajectory_obeys_budget flags violations") {
  Trajectory t;
  t.strategy = Strategy::kSeparateBudget;
  t.budget_thinking = 4;
  t.budget_solution = 2;
  t.budget_total = 6;
  t.think_tokens = {kDigit0, kThinkClose};
  t.solution_tokens = {kAnswerMarker, kDigit0 + 1};
  CHECK(trajectory_obeys_budget(t));
  t.solution_tokens.push_back(kDigit0);
  CHECK(!trajectory_obeys_budget(t));  // solution over s
  t.solution_tokens.pop_back();
  t.think_tokens = {kDigit0, kDigit0, kDigit0, kDigit0, kThinkClose};
  CHECK(!trajectory_obeys_budget(t));  // thinking over t
  t.think_tokens = {kThinkClose, kThinkClose};
  CHECK(!trajectory_obeys_budget(t));  // double close
  t.think_tokens = {kDigit0, kThinkClose};
  t.solution_tokens = {kThinkOpen};
  CHECK(!trajectory_obeys_budget(t));  // marker in solution
}

TEST_CASE("unconstrained budget splits the context remainder") {
  const auto problems = eval_corpus(5);
  ModelConfig c = tiny_model();
  const BudgetConfig b = unconstrained_budget(c, problems);
  std::size_t max_prompt = 0;
  for (const auto& p : problems)
    max_prompt = std::max(max_prompt, p.prompt_tokens.size());
  CHECK(b.total() == c.context_length - static_cast<int>(max_prompt) - 1);
  CHECK(std::abs(b.thinking_budget - b.solution_budget) <= 1);
}

TEST_CASE("sweep report files: csv and json carry every row") {
  const Parameters params = init_params(tiny_model());
  const auto problems = eval_corpus(6);
  const std::vector<BudgetConfig> budgets{{8, 4}, {16, 4}};
  const SweepReport report = budget_sweep(params, problems,
                                          Strategy::kSeparateBudget, budgets,
                                          1, 1.0, 3, "tagged");
  const std::string csv_path = "test_sweep.csv";
  const std::string json_path = "test_sweep.json";
  write_sweep_csv(csv_path, report);
  write_sweep_json(json_path, report);

  std::ifstream csv(csv_path);
  std::string line;
  std::getline(csv, line);
  CHECK(line ==
        "model,strategy,budget_t,budget_s,budget_c,pass1,mean_think_tokens,"
        "mean_solution_tokens,mean_total_tokens,frac_forced_think_end,samples");
  int rows = 0;
  while (std::getline(csv, line)) {
    if (line.empty()) continue;
    CHECK(line.rfind("tagged,separate,", 0) == 0);
    ++rows;
  }
  CHECK(rows == 2);

  std::ifstream js(json_path);
  std::stringstream buffer;
  buffer << js.rdbuf();
  CHECK(buffer.str().find("\"budget_t\": 8") != std::string::npos);
  CHECK(buffer.str().find("\"budget_t\": 16") != std::string::npos);
  std::remove(csv_path.c_str());
  std::remove(json_path.c_str());
}

TEST_CASE("allocation csv conserves counts") {
  const auto problems = eval_corpus(10);
  const auto res = pass_at_1_with(never_closing(), problems,
                                  Strategy::kSeparateBudget, {8, 4}, 2, 96, 6);
  const AllocationStats stats = token_allocation_stats(res.trajectories);
  const std::string path = "test_alloc.csv";
  write_allocation_csv(path, stats);
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  CHECK(line == "budget_t,budget_s,budget_c,segment,bin_lo,bin_hi,count");
  long think_mass = 0;
  while (std::getline(in, line)) {
    if (line.find(",think,") == std::string::npos) continue;
    think_mass += std::stol(line.substr(line.rfind(',') + 1));
  }
  CHECK(think_mass == 20);
  std::remove(path.c_str());
}
