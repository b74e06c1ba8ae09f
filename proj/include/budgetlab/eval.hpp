#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "budgetlab/decoder.hpp"
#include "budgetlab/model.hpp"
#include "budgetlab/taskgen.hpp"

namespace budgetlab {

// ---------------------------------------------------------------------------
// Budget-sweep evaluation: accuracy-vs-token curves, token allocation
// histograms, and two-model thinking/solution composition.
// ---------------------------------------------------------------------------

struct PassAt1Result {
  double accuracy = 0.0;
  std::vector<Trajectory> trajectories;  // problem-major, sample-minor
  std::vector<double> rewards;
};

// Mean reward over (problem, sample) pairs; per-decode rng streams are
// derived from (seed, problem id, sample index), so results are independent
// of evaluation order and worker count.
PassAt1Result pass_at_1(const Parameters& params,
                        std::span<const Problem> problems, Strategy strategy,
                        BudgetConfig budget, int n_samples, double temperature,
                        std::uint64_t seed);

// Test seam: same evaluation loop over an arbitrary policy.
using ProblemPolicyFactory =
    std::function<std::unique_ptr<TokenPolicy>(const Problem&)>;
PassAt1Result pass_at_1_with(const ProblemPolicyFactory& make_policy,
                             std::span<const Problem> problems,
                             Strategy strategy, BudgetConfig budget,
                             int n_samples, int context_length,
                             std::uint64_t seed);

struct SweepRow {
  int budget_thinking = 0;
  int budget_solution = 0;
  int budget_total = 0;
  double pass1 = 0.0;
  double mean_think_tokens = 0.0;
  double mean_solution_tokens = 0.0;
  double mean_total_tokens = 0.0;
  double frac_forced_think_end = 0.0;
  int sample_count = 0;
};

struct SweepReport {
  std::string model_tag;
  std::string strategy;
  std::vector<SweepRow> rows;  // ascending thinking budget
};

SweepReport budget_sweep(const Parameters& params,
                         std::span<const Problem> problems, Strategy strategy,
                         std::span<const BudgetConfig> budgets, int n_samples,
                         double temperature, std::uint64_t seed,
                         const std::string& model_tag = "model");

// Comma-separated table with a header row, plus a JSON summary mirror.
// The multi-report forms stack rows for overlay comparisons.
void write_sweep_csv(const std::string& path, const SweepReport& report);
void write_sweep_csv(const std::string& path,
                     std::span<const SweepReport> reports);
void write_sweep_json(const std::string& path, const SweepReport& report);
void write_sweep_json(const std::string& path,
                      std::span<const SweepReport> reports);

// ---------------------------------------------------------------------------
// Token allocation histograms (fixed bin width max(1, t/16) per budget;
// single-cap strategies bin by max(1, c/16)).
// ---------------------------------------------------------------------------

struct AllocationHistogram {
  int budget_thinking = 0;
  int budget_solution = 0;
  int budget_total = 0;
  int bin_width = 1;
  std::vector<long> think_bins;
  std::vector<long> solution_bins;
  long count = 0;
};

struct AllocationStats {
  std::vector<AllocationHistogram> per_budget;  // sorted by (t, s, c)
};

AllocationStats token_allocation_stats(std::span<const Trajectory> trajectories);
void write_allocation_csv(const std::string& path, const AllocationStats& stats);

// ---------------------------------------------------------------------------
// Cross-model composition: thinking decoded by one model, solution by the
// other, under separate budgeting. With both arguments the same parameters
// this is bit-identical to pass_at_1 under the same seed.
// ---------------------------------------------------------------------------

PassAt1Result cross_model_composition(const Parameters& params_think,
                                      const Parameters& params_solution,
                                      std::span<const Problem> problems,
                                      BudgetConfig budget, int n_samples,
                                      double temperature, std::uint64_t seed);

// Reference budget standing in for an effectively unconstrained decode:
// splits the context remainder beyond the longest prompt evenly between
// thinking and solution.
BudgetConfig unconstrained_budget(const ModelConfig& config,
                                  std::span<const Problem> problems);

// Defense-in-depth audit used by the eval loop and tests.
bool trajectory_obeys_budget(const Trajectory& t);

}  // namespace budgetlab
