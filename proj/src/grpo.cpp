#include "budgetlab/grpo.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <stdexcept>
#include <unordered_set>

#include "budgetlab/errors.hpp"
#include "budgetlab/eval.hpp"
#include "budgetlab/util.hpp"
#include "budgetlab/vocab.hpp"

namespace budgetlab {

void TrainConfig::validate() const {
  if (thinking_budget < 1)
    throw std::invalid_argument("train config: thinking budget must be >= 1");
  if (solution_budget < 1)
    throw std::invalid_argument("train config: solution budget must be >= 1");
  if (group_size < 2)
    throw std::invalid_argument("train config: group size must be >= 2");
  if (batch_problems < 1)
    throw std::invalid_argument("train config: batch problems must be >= 1");
  if (!(learning_rate > 0.0))
    throw std::invalid_argument("train config: learning rate must be positive");
  if (steps < 0)
    throw std::invalid_argument("train config: steps must be >= 0");
  if (!(rollout_temperature > 0.0))
    throw std::invalid_argument("train config: temperature must be positive");
  if (!(variance_epsilon >= 0.0))
    throw std::invalid_argument("train config: variance epsilon must be >= 0");
}

// ---------------------------------------------------------------------------
// Rollouts
// ---------------------------------------------------------------------------

RolloutGroup rollout_group_with(const PolicyFactory& make_policy,
                                const Problem& problem, BudgetConfig budget,
                                int group_size, int context_length,
                                std::uint64_t stream_seed) {
  if (group_size < 2)
    throw std::invalid_argument("rollout_group: group size must be >= 2");
  RolloutGroup group;
  group.problem_id = problem.id;
  group.trajectories.resize(static_cast<std::size_t>(group_size));
  group.rewards.resize(static_cast<std::size_t>(group_size));
  parallel_for(static_cast<std::size_t>(group_size), [&](std::size_t g) {
    Rng rng = Rng::derive(stream_seed, "member",
                          {static_cast<std::uint64_t>(problem.id), g});
    auto policy = make_policy();
    Trajectory traj =
        decode_separate_budget(*policy, problem.prompt_tokens, budget,
                               context_length, rng, problem.id);
    group.rewards[g] = reward(traj, problem);
    group.trajectories[g] = std::move(traj);
  });
  return group;
}

RolloutGroup rollout_group(const Parameters& params, const Problem& problem,
                           BudgetConfig budget, int group_size,
                           double temperature, std::uint64_t stream_seed) {
  PolicyFactory factory = [&params, temperature]() {
    return std::make_unique<ModelPolicy>(params, temperature);
  };
  return rollout_group_with(factory, problem, budget, group_size,
                            params.config.context_length, stream_seed);
}

// ---------------------------------------------------------------------------
// Advantages
// ---------------------------------------------------------------------------

std::vector<double> compute_advantages(std::span<const double> rewards,
                                       double variance_epsilon) {
  const std::size_t g = rewards.size();
  if (g < 2)
    throw std::invalid_argument("compute_advantages: group size must be >= 2");
  std::vector<double> adv(g, 0.0);
  double lo = rewards[0], hi = rewards[0];
  for (double r : rewards) {
    lo = std::min(lo, r);
    hi = std::max(hi, r);
  }
  if (lo == hi) return adv;  // all-equal rewards: exactly zero
  // Anchor on the group minimum so that shifting every reward by a constant
  // cancels before any rounding can differ.
  double mean = 0.0;
  for (std::size_t i = 0; i < g; ++i) {
    adv[i] = rewards[i] - lo;
    mean += adv[i];
  }
  mean /= static_cast<double>(g);
  double var = 0.0;
  for (double a : adv) {
    const double d = a - mean;
    var += d * d;
  }
  var /= static_cast<double>(g);
  const double denom = std::sqrt(var + variance_epsilon);
  for (double& a : adv) a = (a - mean) / denom;
  return adv;
}

// ---------------------------------------------------------------------------
// Policy-gradient step
// ---------------------------------------------------------------------------

StepStats policy_gradient_step(Parameters& params,
                               std::span<const RolloutGroup> groups,
                               const TrainConfig& config, AdamState* adam) {
  if (groups.empty())
    throw std::invalid_argument("policy_gradient_step: no groups");
  std::vector<SequenceBatchItem> batch;
  for (const RolloutGroup& group : groups) {
    if (group.advantages.size() != group.trajectories.size())
      throw std::invalid_argument(
          "policy_gradient_step: advantages not populated");
    for (std::size_t g = 0; g < group.trajectories.size(); ++g) {
      const Trajectory& traj = group.trajectories[g];
      SequenceBatchItem item;
      item.context = traj.prompt_tokens;
      item.context.push_back(vocab::kThinkOpen);
      item.continuation = traj.output();
      item.mask = traj.policy_chosen;
      double w = group.advantages[g];
      if (config.length_normalize) {
        long chosen = 0;
        for (std::uint8_t m : item.mask) chosen += m;
        if (chosen > 0) w /= static_cast<double>(chosen);
      }
      item.weights.assign(item.continuation.size(), w);
      batch.push_back(std::move(item));
    }
  }

  const LossAndGradients lg = loss_and_gradients(params, batch);
  if (!std::isfinite(lg.loss))
    throw DivergenceError("policy_gradient_step: non-finite loss");
  double norm_sq = 0.0;
  for (double g : lg.grads) {
    if (!std::isfinite(g))
      throw DivergenceError("policy_gradient_step: non-finite gradient");
    norm_sq += g * g;
  }

  // loss = -J_hat, so descending the loss ascends the reward objective.
  if (config.use_adam) {
    if (adam == nullptr)
      throw std::invalid_argument("policy_gradient_step: adam state required");
    if (adam->m.empty()) {
      adam->m.assign(params.data.size(), 0.0);
      adam->v.assign(params.data.size(), 0.0);
      adam->t = 0;
    }
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    ++adam->t;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(adam->t));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(adam->t));
    for (std::size_t i = 0; i < params.data.size(); ++i) {
      adam->m[i] = b1 * adam->m[i] + (1.0 - b1) * lg.grads[i];
      adam->v[i] = b2 * adam->v[i] + (1.0 - b2) * lg.grads[i] * lg.grads[i];
      params.data[i] -= config.learning_rate * (adam->m[i] / c1) /
                        (std::sqrt(adam->v[i] / c2) + eps);
    }
  } else {
    for (std::size_t i = 0; i < params.data.size(); ++i)
      params.data[i] -= config.learning_rate * lg.grads[i];
  }
  if (!params.all_finite())
    throw DivergenceError("policy_gradient_step: non-finite parameters");
  return {lg.loss, std::sqrt(norm_sq)};
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

namespace {

// First `take` indices of a seeded Fisher-Yates shuffle of [0, n).
std::vector<std::size_t> sample_indices(std::size_t n, std::size_t take,
                                        Rng& rng) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  take = std::min(take, n);
  for (std::size_t i = 0; i < take; ++i) {
    const std::size_t j = i + rng.next_below(n - i);
    std::swap(idx[i], idx[j]);
  }
  idx.resize(take);
  return idx;
}

}  // namespace

TrainResult train(const TrainConfig& config, const Parameters& init,
                  std::span<const Problem> train_problems,
                  std::span<const Problem> validation_problems) {
  config.validate();
  if (train_problems.empty())
    throw std::invalid_argument("train: empty corpus");
  std::size_t max_prompt = 0;
  for (const Problem& p : train_problems)
    max_prompt = std::max(max_prompt, p.prompt_tokens.size());
  if (static_cast<long long>(max_prompt) + 1 + config.thinking_budget +
          config.solution_budget >
      init.config.context_length)
    throw std::invalid_argument(
        "train: prompt + 1 + t* + s* exceeds model context_length");

  TrainResult result;
  result.params = init;
  AdamState adam;
  const BudgetConfig budget{config.thinking_budget, config.solution_budget};
  std::unordered_set<std::uint64_t> seen_uids;

  for (int step = 0; step < config.steps; ++step) {
    Rng batch_rng = Rng::derive(config.seed, "batch",
                                {static_cast<std::uint64_t>(step)});
    const auto picks =
        sample_indices(train_problems.size(),
                       static_cast<std::size_t>(config.batch_problems),
                       batch_rng);
    const std::uint64_t stream_seed =
        Rng::derive(config.seed, "rollout", {static_cast<std::uint64_t>(step)})
            .next_u64();

    std::vector<RolloutGroup> groups(picks.size());
    parallel_for(picks.size(), [&](std::size_t b) {
      groups[b] = rollout_group(result.params, train_problems[picks[b]],
                                budget, config.group_size,
                                config.rollout_temperature, stream_seed);
    });
    for (RolloutGroup& g : groups)
      g.advantages = compute_advantages(g.rewards, config.variance_epsilon);

    TrainStepRecord rec;
    rec.step = step;
    std::uint64_t digest = kFnvOffset;
    long n_traj = 0;
    for (const RolloutGroup& g : groups) {
      for (std::size_t i = 0; i < g.trajectories.size(); ++i) {
        const Trajectory& t = g.trajectories[i];
        // Trajectory id = (step, slot, content); fresh per step by
        // construction, so any collision means a rollout was reused.
        std::uint64_t uid = t.uid();
        uid = fnv1a64(&step, sizeof(step), uid);
        uid = fnv1a64(&n_traj, sizeof(n_traj), uid);
        if (!seen_uids.insert(uid).second)
          throw std::logic_error("train: rollout reused across steps");
        digest = fnv1a64(&uid, sizeof(uid), digest);
        rec.mean_reward += g.rewards[i];
        rec.mean_abs_advantage += std::abs(g.advantages[i]);
        rec.mean_think_tokens += static_cast<double>(t.think_tokens.size());
        rec.mean_solution_tokens +=
            static_cast<double>(t.solution_tokens.size());
        rec.frac_forced_think_end += t.forced_think_end ? 1.0 : 0.0;
        ++n_traj;
      }
    }
    rec.mean_reward /= static_cast<double>(n_traj);
    rec.mean_abs_advantage /= static_cast<double>(n_traj);
    rec.mean_think_tokens /= static_cast<double>(n_traj);
    rec.mean_solution_tokens /= static_cast<double>(n_traj);
    rec.frac_forced_think_end /= static_cast<double>(n_traj);
    rec.rollout_digest = digest;

    const StepStats stats =
        policy_gradient_step(result.params, groups, config,
                             config.use_adam ? &adam : nullptr);
    rec.loss = stats.loss;

    if (config.validation_cadence > 0 && !validation_problems.empty() &&
        (step + 1) % config.validation_cadence == 0) {
      const std::size_t n_val =
          std::min(validation_problems.size(),
                   static_cast<std::size_t>(config.validation_max_problems));
      const std::uint64_t val_seed =
          Rng::derive(config.seed, "validation",
                      {static_cast<std::uint64_t>(step)})
              .next_u64();
      const PassAt1Result val = pass_at_1(
          result.params, validation_problems.subspan(0, n_val),
          Strategy::kSeparateBudget, budget, config.validation_samples,
          config.validation_temperature, val_seed);
      rec.has_validation = true;
      rec.validation_pass1 = val.accuracy;
    }
    result.log.steps.push_back(rec);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Train log persistence
// ---------------------------------------------------------------------------

void write_train_log(const std::string& path, const TrainLog& log) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << "step\tmean_reward\tmean_abs_advantage\tloss\tmean_think_tokens\t"
         "mean_solution_tokens\tfrac_forced_think_end\tval_pass1\t"
         "rollout_digest\n";
  char buf[256];
  for (const TrainStepRecord& r : log.steps) {
    std::snprintf(buf, sizeof(buf),
                  "%d\t%.6f\t%.6f\t%.8f\t%.3f\t%.3f\t%.4f\t", r.step,
                  r.mean_reward, r.mean_abs_advantage, r.loss,
                  r.mean_think_tokens, r.mean_solution_tokens,
                  r.frac_forced_think_end);
    out << buf;
    if (r.has_validation) {
      std::snprintf(buf, sizeof(buf), "%.6f", r.validation_pass1);
      out << buf;
    } else {
      out << "-";
    }
    out << '\t' << hex64(r.rollout_digest) << '\n';
  }
  if (!out) throw std::runtime_error("write failed: " + path);
}

TrainLog load_train_log(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingDataError("cannot open train log: " + path);
  TrainLog log;
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    TrainStepRecord r;
    char val[64] = {0};
    char digest[64] = {0};
    const int n = std::sscanf(
        line.c_str(), "%d\t%lf\t%lf\t%lf\t%lf\t%lf\t%lf\t%63[^\t]\t%63s",
        &r.step, &r.mean_reward, &r.mean_abs_advantage, &r.loss,
        &r.mean_think_tokens, &r.mean_solution_tokens,
        &r.frac_forced_think_end, val, digest);
    if (n < 9) throw MissingDataError("bad train log row: " + line);
    if (val[0] != '-') {
      r.has_validation = true;
      r.validation_pass1 = std::strtod(val, nullptr);
    }
    r.rollout_digest = std::strtoull(digest, nullptr, 16);
    log.steps.push_back(r);
  }
  return log;
}

// ---------------------------------------------------------------------------
// Supervised warm-start
// ---------------------------------------------------------------------------

void WarmstartConfig::validate() const {
  model.validate();
  if (!(learning_rate > 0.0))
    throw std::invalid_argument("warmstart: learning rate must be positive");
  if (batch_size < 1)
    throw std::invalid_argument("warmstart: batch size must be >= 1");
  if (max_steps < 0)
    throw std::invalid_argument("warmstart: max steps must be >= 0");
  if (check_cadence < 1)
    throw std::invalid_argument("warmstart: check cadence must be >= 1");
  if (compliance_threshold < 0.0 || compliance_threshold > 1.0)
    throw std::invalid_argument("warmstart: threshold must be in [0, 1]");
}

double protocol_compliance(const Parameters& params,
                           std::span<const Problem> problems,
                           BudgetConfig budget, double temperature,
                           std::uint64_t seed) {
  if (problems.empty())
    throw std::invalid_argument("protocol_compliance: no problems");
  std::vector<std::uint8_t> ok(problems.size(), 0);
  parallel_for(problems.size(), [&](std::size_t i) {
    const Problem& p = problems[i];
    Rng rng = Rng::derive(seed, "compliance",
                          {static_cast<std::uint64_t>(p.id)});
    ModelPolicy policy(params, temperature);
    const Trajectory traj =
        decode_separate_budget(policy, p.prompt_tokens, budget,
                               params.config.context_length, rng, p.id);
    bool has_marker = false;
    for (int tok : traj.solution_tokens)
      if (tok == vocab::kAnswerMarker) has_marker = true;
    ok[i] = (!traj.forced_think_end && has_marker) ? 1 : 0;
  });
  double total = 0.0;
  for (std::uint8_t v : ok) total += v;
  return total / static_cast<double>(problems.size());
}

WarmstartResult warmstart_train(const WarmstartConfig& config,
                                std::span<const CorpusRecord> gold_records) {
  config.validate();
  if (gold_records.empty())
    throw std::invalid_argument("warmstart: empty corpus");
  for (const CorpusRecord& rec : gold_records) {
    if (!rec.has_gold)
      throw MissingDataError(
          "warmstart: corpus record lacks gold trajectories (regenerate with "
          "gold output enabled)");
  }
  std::size_t max_len = 0;
  for (const CorpusRecord& rec : gold_records)
    max_len = std::max(max_len,
                       rec.problem.prompt_tokens.size() + 1 + rec.gold_tokens.size());
  if (static_cast<long long>(max_len) > config.model.context_length)
    throw std::invalid_argument(
        "warmstart: gold sequence exceeds model context_length");

  WarmstartResult result;
  result.params = init_params(config.model);

  std::vector<Problem> check_problems;
  const std::size_t n_check =
      std::min(gold_records.size(),
               static_cast<std::size_t>(config.compliance_max_problems));
  for (std::size_t i = 0; i < n_check; ++i)
    check_problems.push_back(gold_records[i].problem);

  AdamState adam;
  adam.m.assign(result.params.data.size(), 0.0);
  adam.v.assign(result.params.data.size(), 0.0);

  auto run_compliance = [&]() {
    return protocol_compliance(result.params, check_problems,
                               config.compliance_budget,
                               config.compliance_temperature, config.seed);
  };

  for (int step = 0; step < config.max_steps; ++step) {
    Rng batch_rng = Rng::derive(config.seed, "ws-batch",
                                {static_cast<std::uint64_t>(step)});
    const auto picks = sample_indices(gold_records.size(),
                                      static_cast<std::size_t>(config.batch_size),
                                      batch_rng);
    std::vector<SequenceBatchItem> batch;
    batch.reserve(picks.size());
    for (std::size_t idx : picks) {
      const CorpusRecord& rec = gold_records[idx];
      SequenceBatchItem item;
      item.context = rec.problem.prompt_tokens;
      item.context.push_back(vocab::kThinkOpen);
      item.continuation = rec.gold_tokens;
      item.mask.assign(item.continuation.size(), 1);
      item.weights.assign(item.continuation.size(),
                          1.0 / static_cast<double>(item.continuation.size()));
      batch.push_back(std::move(item));
    }
    const LossAndGradients lg = loss_and_gradients(result.params, batch);
    if (!std::isfinite(lg.loss))
      throw DivergenceError("warmstart: non-finite loss");
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    ++adam.t;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(adam.t));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(adam.t));
    for (std::size_t i = 0; i < result.params.data.size(); ++i) {
      adam.m[i] = b1 * adam.m[i] + (1.0 - b1) * lg.grads[i];
      adam.v[i] = b2 * adam.v[i] + (1.0 - b2) * lg.grads[i] * lg.grads[i];
      result.params.data[i] -= config.learning_rate * (adam.m[i] / c1) /
                               (std::sqrt(adam.v[i] / c2) + eps);
    }
    if (!result.params.all_finite())
      throw DivergenceError("warmstart: non-finite parameters");

    WarmstartStepRecord rec;
    rec.step = step;
    rec.loss = lg.loss;
    if ((step + 1) % config.check_cadence == 0) {
      rec.has_compliance = true;
      rec.compliance = run_compliance();
      result.final_compliance = rec.compliance;
      result.log.push_back(rec);
      if (rec.compliance >= config.compliance_threshold) {
        result.reached_threshold = true;
        return result;
      }
      continue;
    }
    result.log.push_back(rec);
  }
  result.final_compliance = run_compliance();
  result.reached_threshold =
      result.final_compliance >= config.compliance_threshold;
  return result;
}

void write_warmstart_log(const std::string& path,
                         std::span<const WarmstartStepRecord> log) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << "step\tloss\tcompliance\n";
  char buf[128];
  for (const WarmstartStepRecord& r : log) {
    std::snprintf(buf, sizeof(buf), "%d\t%.8f\t", r.step, r.loss);
    out << buf;
    if (r.has_compliance) {
      std::snprintf(buf, sizeof(buf), "%.6f", r.compliance);
      out << buf;
    } else {
      out << "-";
    }
    out << '\n';
  }
  if (!out) throw std::runtime_error("write failed: " + path);
}

}  // namespace budgetlab
