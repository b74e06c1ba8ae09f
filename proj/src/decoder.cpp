#include "budgetlab/decoder.hpp"

#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "budgetlab/errors.hpp"
#include "budgetlab/util.hpp"
#include "budgetlab/vocab.hpp"

namespace budgetlab {

std::string strategy_name(Strategy s) {
  switch (s) {
    case Strategy::kSeparateBudget: return "separate";
    case Strategy::kVanillaTruncate: return "vanilla";
    case Strategy::kBudgetForcing: return "forcing";
  }
  return "separate";
}

Strategy strategy_from_name(const std::string& name) {
  if (name == "separate") return Strategy::kSeparateBudget;
  if (name == "vanilla") return Strategy::kVanillaTruncate;
  if (name == "forcing") return Strategy::kBudgetForcing;
  throw std::invalid_argument("unknown strategy name: " + name);
}

std::vector<int> Trajectory::output() const {
  std::vector<int> out = think_tokens;
  out.insert(out.end(), solution_tokens.begin(), solution_tokens.end());
  return out;
}

std::uint64_t Trajectory::uid() const {
  std::uint64_t h = kFnvOffset;
  auto mix = [&h](const void* p, std::size_t n) { h = fnv1a64(p, n, h); };
  mix(&problem_id, sizeof(problem_id));
  const int strat = static_cast<int>(strategy);
  mix(&strat, sizeof(strat));
  mix(&budget_thinking, sizeof(budget_thinking));
  mix(&budget_solution, sizeof(budget_solution));
  mix(&budget_total, sizeof(budget_total));
  if (!think_tokens.empty())
    mix(think_tokens.data(), think_tokens.size() * sizeof(int));
  mix("|", 1);
  if (!solution_tokens.empty())
    mix(solution_tokens.data(), solution_tokens.size() * sizeof(int));
  mix("|", 1);
  if (!policy_chosen.empty()) mix(policy_chosen.data(), policy_chosen.size());
  return h;
}

ScriptedPolicy::ScriptedPolicy(std::vector<int> script, int filler_token)
    : script_(std::move(script)), filler_(filler_token) {}

void ScriptedPolicy::begin(std::span<const int>) { pos_ = 0; }

int ScriptedPolicy::sample(Rng&) {
  if (pos_ < script_.size()) return script_[pos_++];
  return filler_;
}

void ScriptedPolicy::push(int) {}  // injected tokens never advance the script

namespace {

void check_context(std::size_t prompt_len, int cap, int context_length,
                   const char* who) {
  // Every strategy feeds prompt + the opening <think> + up to cap output
  // tokens through the model.
  if (static_cast<long long>(prompt_len) + 1 + cap > context_length)
    throw ContextOverflowError(std::string(who) +
                               ": prompt + budget exceeds context_length=" +
                               std::to_string(context_length));
}

std::vector<int> make_context(std::span<const int> prompt) {
  std::vector<int> ctx(prompt.begin(), prompt.end());
  ctx.push_back(vocab::kThinkOpen);
  return ctx;
}

// Splits a free-running output at the first </think> (vanilla/forcing).
void split_at_think_close(const std::vector<int>& out,
                          const std::vector<std::uint8_t>& mask,
                          Trajectory& traj) {
  std::size_t close = out.size();
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (out[i] == vocab::kThinkClose) {
      close = i;
      break;
    }
  }
  if (close == out.size()) {
    traj.think_tokens = out;
    traj.policy_chosen = mask;
    traj.solution_tokens.clear();
    return;
  }
  traj.think_tokens.assign(out.begin(), out.begin() + static_cast<long>(close) + 1);
  traj.solution_tokens.assign(out.begin() + static_cast<long>(close) + 1, out.end());
  traj.policy_chosen = mask;
}

}  // namespace

Trajectory decode_separate_budget_composed(TokenPolicy& think_policy,
                                           TokenPolicy& solution_policy,
                                           std::span<const int> prompt,
                                           BudgetConfig budget,
                                           int context_length, Rng& rng,
                                           long long problem_id) {
  const int t = budget.thinking_budget;
  const int s = budget.solution_budget;
  if (s < 1)
    throw std::invalid_argument(
        "separate budgeting: solution budget must be >= 1");
  if (t < 1)
    throw std::invalid_argument(
        "separate budgeting: thinking budget must be >= 1 (the closing "
        "</think> occupies the t-th slot)");
  check_context(prompt.size(), t + s, context_length, "decode_separate_budget");

  const bool same_policy = &think_policy == &solution_policy;
  const std::vector<int> ctx = make_context(prompt);
  think_policy.begin(ctx);
  if (!same_policy) solution_policy.begin(ctx);

  Trajectory traj;
  traj.problem_id = problem_id;
  traj.prompt_tokens.assign(prompt.begin(), prompt.end());
  traj.strategy = Strategy::kSeparateBudget;
  traj.budget_thinking = t;
  traj.budget_solution = s;
  traj.budget_total = t + s;

  auto push_both = [&](int tok) {
    think_policy.push(tok);
    if (!same_policy) solution_policy.push(tok);
  };

  // Thinking phase: up to t-1 sampled content tokens; the t-th slot is
  // reserved for </think>, sampled or injected. A sampled <eos> here is a
  // degenerate stop and is replaced by an injected </think>.
  bool closed = false;
  for (int i = 1; i <= t && !closed; ++i) {
    if (i == t) {
      traj.think_tokens.push_back(vocab::kThinkClose);
      traj.policy_chosen.push_back(0);
      traj.forced_think_end = true;
      push_both(vocab::kThinkClose);
      closed = true;
      break;
    }
    const int tok = think_policy.sample(rng);
    if (tok == vocab::kThinkClose) {
      traj.think_tokens.push_back(tok);
      traj.policy_chosen.push_back(1);
      traj.forced_think_end = false;
      push_both(tok);
      closed = true;
      break;
    }
    if (tok == vocab::kEos) {
      traj.think_tokens.push_back(vocab::kThinkClose);
      traj.policy_chosen.push_back(0);
      traj.forced_think_end = true;
      push_both(vocab::kThinkClose);
      closed = true;
      break;
    }
    traj.think_tokens.push_back(tok);
    traj.policy_chosen.push_back(1);
    push_both(tok);
  }

  // Solution phase: always entered; s tokens guaranteed available.
  for (int i = 1; i <= s; ++i) {
    const int tok = solution_policy.sample(rng);
    if (tok == vocab::kEos) {
      traj.solution_tokens.push_back(tok);
      traj.policy_chosen.push_back(1);
      traj.natural_solution_end = true;
      break;
    }
    if (tok == vocab::kThinkOpen || tok == vocab::kThinkClose) {
      // Stray phase markers have no structural meaning here; treat as an
      // end-of-sequence without recording the marker.
      traj.natural_solution_end = true;
      break;
    }
    traj.solution_tokens.push_back(tok);
    traj.policy_chosen.push_back(1);
    if (i < s) solution_policy.push(tok);
  }
  return traj;
}

Trajectory decode_separate_budget(TokenPolicy& policy,
                                  std::span<const int> prompt,
                                  BudgetConfig budget, int context_length,
                                  Rng& rng, long long problem_id) {
  return decode_separate_budget_composed(policy, policy, prompt, budget,
                                         context_length, rng, problem_id);
}

Trajectory decode_vanilla_truncate(TokenPolicy& policy,
                                   std::span<const int> prompt,
                                   int total_budget, int context_length,
                                   Rng& rng, long long problem_id) {
  if (total_budget < 0)
    throw std::invalid_argument("vanilla truncation: negative budget");
  check_context(prompt.size(), total_budget, context_length,
                "decode_vanilla_truncate");

  const std::vector<int> ctx = make_context(prompt);
  policy.begin(ctx);

  Trajectory traj;
  traj.problem_id = problem_id;
  traj.prompt_tokens.assign(prompt.begin(), prompt.end());
  traj.strategy = Strategy::kVanillaTruncate;
  traj.budget_total = total_budget;

  std::vector<int> out;
  std::vector<std::uint8_t> mask;
  bool saw_eos = false;
  while (static_cast<int>(out.size()) < total_budget) {
    const int tok = policy.sample(rng);
    out.push_back(tok);
    mask.push_back(1);
    if (tok == vocab::kEos) {
      saw_eos = true;
      break;
    }
    if (static_cast<int>(out.size()) < total_budget) policy.push(tok);
  }
  split_at_think_close(out, mask, traj);
  traj.natural_solution_end = saw_eos && !traj.solution_tokens.empty() &&
                              traj.solution_tokens.back() == vocab::kEos;
  return traj;
}

Trajectory decode_budget_forcing(TokenPolicy& policy,
                                 std::span<const int> prompt, int total_budget,
                                 int context_length, Rng& rng,
                                 long long problem_id) {
  constexpr int kSuffixLen = 2;  // </think> ANS
  if (total_budget < kSuffixLen)
    throw std::invalid_argument(
        "budget forcing: total budget must fit the </think> ANS suffix");
  check_context(prompt.size(), total_budget, context_length,
                "decode_budget_forcing");

  const std::vector<int> ctx = make_context(prompt);
  policy.begin(ctx);

  Trajectory traj;
  traj.problem_id = problem_id;
  traj.prompt_tokens.assign(prompt.begin(), prompt.end());
  traj.strategy = Strategy::kBudgetForcing;
  traj.budget_total = total_budget;

  const int inject_at = total_budget - kSuffixLen;
  std::vector<int> out;
  std::vector<std::uint8_t> mask;
  bool think_closed = false;
  bool forced = false;
  bool saw_eos = false;
  while (static_cast<int>(out.size()) < total_budget) {
    if (!think_closed && static_cast<int>(out.size()) == inject_at) {
      out.push_back(vocab::kThinkClose);
      mask.push_back(0);
      policy.push(vocab::kThinkClose);
      think_closed = true;
      forced = true;
      if (static_cast<int>(out.size()) < total_budget) {
        out.push_back(vocab::kAnswerMarker);
        mask.push_back(0);
        policy.push(vocab::kAnswerMarker);
      }
      continue;
    }
    const int tok = policy.sample(rng);
    out.push_back(tok);
    mask.push_back(1);
    if (tok == vocab::kEos) {
      saw_eos = true;
      break;
    }
    if (tok == vocab::kThinkClose) think_closed = true;
    if (static_cast<int>(out.size()) < total_budget) policy.push(tok);
  }
  split_at_think_close(out, mask, traj);
  traj.forced_think_end = forced;
  traj.natural_solution_end = saw_eos && !traj.solution_tokens.empty() &&
                              traj.solution_tokens.back() == vocab::kEos;
  return traj;
}

Trajectory decode_with_strategy(TokenPolicy& policy, Strategy strategy,
                                std::span<const int> prompt,
                                BudgetConfig budget, int context_length,
                                Rng& rng, long long problem_id) {
  switch (strategy) {
    case Strategy::kSeparateBudget:
      return decode_separate_budget(policy, prompt, budget, context_length,
                                    rng, problem_id);
    case Strategy::kVanillaTruncate:
      return decode_vanilla_truncate(policy, prompt, budget.total(),
                                     context_length, rng, problem_id);
    case Strategy::kBudgetForcing:
      return decode_budget_forcing(policy, prompt, budget.total(),
                                   context_length, rng, problem_id);
  }
  throw std::invalid_argument("unknown strategy");
}

std::string trajectory_to_json(const Trajectory& t, double reward) {
  nlohmann::json j;
  j["problem_id"] = t.problem_id;
  j["strategy"] = strategy_name(t.strategy);
  j["budget"] = {{"t", t.budget_thinking},
                 {"s", t.budget_solution},
                 {"c", t.budget_total}};
  j["prompt_tokens"] = t.prompt_tokens;
  j["think_tokens"] = t.think_tokens;
  j["solution_tokens"] = t.solution_tokens;
  j["policy_chosen"] = t.policy_chosen;
  j["forced_think_end"] = t.forced_think_end;
  j["natural_solution_end"] = t.natural_solution_end;
  j["reward"] = reward;
  return j.dump();
}

void dump_trajectories(const std::string& path,
                       std::span<const Trajectory> trajectories,
                       std::span<const double> rewards) {
  if (trajectories.size() != rewards.size())
    throw std::invalid_argument("dump_trajectories: size mismatch");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  for (std::size_t i = 0; i < trajectories.size(); ++i)
    out << trajectory_to_json(trajectories[i], rewards[i]) << '\n';
  if (!out) throw std::runtime_error("write failed: " + path);
}

}  // namespace budgetlab
