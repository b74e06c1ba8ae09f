#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "budgetlab/rng.hpp"

namespace budgetlab {

// ---------------------------------------------------------------------------
// Budget-constrained decoding strategies.
//
// All strategies share one prompt template: the decode context is
// prompt ++ [<think>]; the opening <think> belongs to the template and never
// counts against any budget. Output token accounting:
//
//   separate budgeting  think + solution <= t + s, with the injected
//                       </think> counting as the t-th thinking token
//   vanilla truncation  think + solution <= c, no phase structure
//   budget forcing      think + solution <= c, including the injected
//                       "</think> ANS" suffix
// ---------------------------------------------------------------------------

struct BudgetConfig {
  int thinking_budget = 0;  // t
  int solution_budget = 1;  // s

  int total() const { return thinking_budget + solution_budget; }
};

enum class Strategy { kSeparateBudget, kVanillaTruncate, kBudgetForcing };

std::string strategy_name(Strategy s);
Strategy strategy_from_name(const std::string& name);  // throws invalid_argument

struct Trajectory {
  long long problem_id = -1;
  std::vector<int> prompt_tokens;
  // Thinking segment, excluding the opening <think>, including the closing
  // </think> when one exists (vanilla truncation may lack it).
  std::vector<int> think_tokens;
  std::vector<int> solution_tokens;
  bool forced_think_end = false;     // </think> was environment-injected
  bool natural_solution_end = false; // <eos> emitted within the solution budget
  // One flag per think+solution token, false exactly at injected tokens.
  std::vector<std::uint8_t> policy_chosen;
  Strategy strategy = Strategy::kSeparateBudget;
  // Budget actually applied: (t, s, t+s) for separate budgeting,
  // (0, 0, c) for the single-cap strategies.
  int budget_thinking = 0;
  int budget_solution = 0;
  int budget_total = 0;

  int output_tokens() const {
    return static_cast<int>(think_tokens.size() + solution_tokens.size());
  }
  // Think+solution concatenated; aligned with policy_chosen.
  std::vector<int> output() const;
  std::uint64_t uid() const;  // content hash used for on-policy accounting
};

// ---------------------------------------------------------------------------
// Token source driven by the decode state machines. begin() resets to a new
// context; sample() proposes the next token (may consume rng); push() commits
// the token that was actually recorded, which differs from the sample when
// the state machine injects one.
// ---------------------------------------------------------------------------
class TokenPolicy {
 public:
  virtual ~TokenPolicy() = default;
  virtual void begin(std::span<const int> context) = 0;
  virtual int sample(Rng& rng) = 0;
  virtual void push(int token) = 0;
};

// Replays a fixed token script; rng is never consumed. Off-script pushes do
// not advance the script. Used by tests and fuzzing.
class ScriptedPolicy : public TokenPolicy {
 public:
  explicit ScriptedPolicy(std::vector<int> script, int filler_token);
  void begin(std::span<const int> context) override;
  int sample(Rng& rng) override;
  void push(int token) override;

 private:
  std::vector<int> script_;
  int filler_;
  std::size_t pos_ = 0;
};

// ---------------------------------------------------------------------------
// Strategy cores. `context_length` bounds prompt + <think> + output; all
// three throw ContextOverflowError when the full budget cannot fit, and
// std::invalid_argument on degenerate budgets (separate: t < 1 or s < 1;
// forcing: c <= suffix length).
//
// Cross-model composition decodes the thinking phase with one policy and the
// solution phase with another; decode_separate_budget is the same-policy
// special case and consumes an identical rng stream, so the two are
// bit-identical when the policies coincide.
// ---------------------------------------------------------------------------

Trajectory decode_separate_budget(TokenPolicy& policy,
                                  std::span<const int> prompt,
                                  BudgetConfig budget, int context_length,
                                  Rng& rng, long long problem_id = -1);

Trajectory decode_separate_budget_composed(TokenPolicy& think_policy,
                                           TokenPolicy& solution_policy,
                                           std::span<const int> prompt,
                                           BudgetConfig budget,
                                           int context_length, Rng& rng,
                                           long long problem_id = -1);

Trajectory decode_vanilla_truncate(TokenPolicy& policy,
                                   std::span<const int> prompt, int total_budget,
                                   int context_length, Rng& rng,
                                   long long problem_id = -1);

Trajectory decode_budget_forcing(TokenPolicy& policy,
                                 std::span<const int> prompt, int total_budget,
                                 int context_length, Rng& rng,
                                 long long problem_id = -1);

// Dispatch by strategy; for kSeparateBudget the full (t, s) pair is used,
// otherwise budget.total() is the cap.
Trajectory decode_with_strategy(TokenPolicy& policy, Strategy strategy,
                                std::span<const int> prompt,
                                BudgetConfig budget, int context_length,
                                Rng& rng, long long problem_id = -1);

// Line-delimited trajectory dump (one JSON object per line).
std::string trajectory_to_json(const Trajectory& t, double reward);
void dump_trajectories(const std::string& path,
                       std::span<const Trajectory> trajectories,
                       std::span<const double> rewards);

}  // namespace budgetlab
