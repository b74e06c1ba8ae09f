#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "budgetlab/decoder.hpp"
#include "budgetlab/model.hpp"
#include "budgetlab/taskgen.hpp"

namespace budgetlab {

// ---------------------------------------------------------------------------
// Group-relative policy-gradient trainer with budget-constrained rollouts.
// Rollouts replay the separate-budgeting procedure at a fixed (t*, s*);
// advantages are group-normalized rewards; the update is plain on-policy
// ascent (no clipping, no KL term), one update per rollout batch.
// ---------------------------------------------------------------------------

struct TrainConfig {
  int thinking_budget = 64;   // t*
  int solution_budget = 32;   // s*
  int group_size = 8;         // G
  int batch_problems = 32;    // B
  double learning_rate = 0.02;
  int steps = 300;
  double rollout_temperature = 1.0;
  std::uint64_t seed = 0;
  double variance_epsilon = 1e-8;
  std::string init_checkpoint;  // optional; enables second-round training

  // Ablation toggles.
  bool length_normalize = false;  // divide per-token weights by masked count
  bool use_adam = false;          // adaptive moments instead of plain ascent

  // Validation pass@1 at (t*, s*), every validation_cadence steps.
  int validation_cadence = 10;  // 0 disables
  int validation_samples = 1;
  int validation_max_problems = 64;
  double validation_temperature = 0.6;

  void validate() const;  // throws std::invalid_argument
};

struct RolloutGroup {
  long long problem_id = -1;
  std::vector<Trajectory> trajectories;
  std::vector<double> rewards;
  std::vector<double> advantages;  // empty until compute_advantages
};

struct TrainStepRecord {
  int step = 0;
  double mean_reward = 0.0;
  double mean_abs_advantage = 0.0;
  double loss = 0.0;
  double mean_think_tokens = 0.0;
  double mean_solution_tokens = 0.0;
  double frac_forced_think_end = 0.0;
  bool has_validation = false;
  double validation_pass1 = 0.0;
  std::uint64_t rollout_digest = 0;  // folded trajectory uids (on-policy audit)
};

struct TrainLog {
  std::vector<TrainStepRecord> steps;
};

// Plain-text table, one row per step; "-" marks steps without a validation
// measurement. Column order documented in the README.
void write_train_log(const std::string& path, const TrainLog& log);
TrainLog load_train_log(const std::string& path);

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

using PolicyFactory = std::function<std::unique_ptr<TokenPolicy>()>;

// G budget-constrained rollouts with per-rollout rng streams derived from
// (stream_seed, problem id, member index); rewards filled, advantages not.
RolloutGroup rollout_group(const Parameters& params, const Problem& problem,
                           BudgetConfig budget, int group_size,
                           double temperature, std::uint64_t stream_seed);
RolloutGroup rollout_group_with(const PolicyFactory& make_policy,
                                const Problem& problem, BudgetConfig budget,
                                int group_size, int context_length,
                                std::uint64_t stream_seed);

// advantage_i = (r_i - mean) / sqrt(pop_variance + eps); exactly-zero
// variance yields exactly-zero advantages. Requires G >= 2.
std::vector<double> compute_advantages(std::span<const double> rewards,
                                       double variance_epsilon);

// Persistent optimizer state (only used when TrainConfig::use_adam).
struct AdamState {
  std::vector<double> m, v;
  long long t = 0;
};

struct StepStats {
  double loss = 0.0;
  double grad_norm = 0.0;
};

// One ascent step over a batch of groups: every trajectory contributes its
// policy-chosen tokens at uniform weight = its advantage. Throws
// DivergenceError on non-finite loss/gradients/parameters.
StepStats policy_gradient_step(Parameters& params,
                               std::span<const RolloutGroup> groups,
                               const TrainConfig& config,
                               AdamState* adam = nullptr);

// Full training loop (strictly on-policy; one update per batch).
// Deterministic in config.seed. Validation problems may be empty when
// validation_cadence is 0.
struct TrainResult {
  Parameters params;
  TrainLog log;
};

TrainResult train(const TrainConfig& config, const Parameters& init,
                  std::span<const Problem> train_problems,
                  std::span<const Problem> validation_problems);

// ---------------------------------------------------------------------------
// Supervised warm-start on gold scratchpad trajectories. Stops as soon as
// protocol compliance (unforced </think> followed by an ANS answer at a
// generous budget) reaches the threshold.
// ---------------------------------------------------------------------------

struct WarmstartConfig {
  ModelConfig model;
  double learning_rate = 3e-3;
  int batch_size = 32;
  int max_steps = 1500;
  int check_cadence = 50;
  double compliance_threshold = 0.95;
  int compliance_max_problems = 64;
  BudgetConfig compliance_budget{128, 32};
  double compliance_temperature = 1.0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct WarmstartStepRecord {
  int step = 0;
  double loss = 0.0;
  bool has_compliance = false;
  double compliance = 0.0;
};

struct WarmstartResult {
  Parameters params;
  std::vector<WarmstartStepRecord> log;
  bool reached_threshold = false;
  double final_compliance = 0.0;
};

// Fraction of problems whose single sampled decode closes thinking naturally
// and emits the answer marker in the solution segment.
double protocol_compliance(const Parameters& params,
                           std::span<const Problem> problems,
                           BudgetConfig budget, double temperature,
                           std::uint64_t seed);

WarmstartResult warmstart_train(const WarmstartConfig& config,
                                std::span<const CorpusRecord> gold_records);

void write_warmstart_log(const std::string& path,
                         std::span<const WarmstartStepRecord> log);

}  // namespace budgetlab
