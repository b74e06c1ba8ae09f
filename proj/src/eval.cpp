#include "budgetlab/eval.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <stdexcept>

#include <json.hpp>

#include "budgetlab/errors.hpp"
#include "budgetlab/util.hpp"
#include "budgetlab/vocab.hpp"

namespace budgetlab {

bool trajectory_obeys_budget(const Trajectory& t) {
  if (t.output_tokens() > t.budget_total) return false;
  if (t.strategy == Strategy::kSeparateBudget) {
    if (static_cast<int>(t.think_tokens.size()) > t.budget_thinking)
      return false;
    if (static_cast<int>(t.solution_tokens.size()) > t.budget_solution)
      return false;
    int closes = 0;
    for (int tok : t.think_tokens)
      if (tok == vocab::kThinkClose) ++closes;
    if (closes != 1 || t.think_tokens.back() != vocab::kThinkClose)
      return false;
    for (int tok : t.solution_tokens)
      if (tok == vocab::kThinkOpen || tok == vocab::kThinkClose) return false;
  }
  return true;
}

namespace {

// Shared (problem x sample) evaluation loop; decode_one must derive nothing
// random outside the rng handed to it.
PassAt1Result run_eval(
    std::span<const Problem> problems, int n_samples, std::uint64_t seed,
    const std::function<Trajectory(const Problem&, Rng&)>& decode_one) {
  if (problems.empty())
    throw std::invalid_argument("pass_at_1: empty problem set");
  if (n_samples < 1)
    throw std::invalid_argument("pass_at_1: n_samples must be >= 1");
  const std::size_t total = problems.size() * static_cast<std::size_t>(n_samples);
  PassAt1Result result;
  result.trajectories.resize(total);
  result.rewards.resize(total);
  parallel_for(total, [&](std::size_t slot) {
    const std::size_t pi = slot / static_cast<std::size_t>(n_samples);
    const std::size_t sample = slot % static_cast<std::size_t>(n_samples);
    const Problem& problem = problems[pi];
    Rng rng = Rng::derive(seed, "eval",
                          {static_cast<std::uint64_t>(problem.id), sample});
    Trajectory traj = decode_one(problem, rng);
    if (!trajectory_obeys_budget(traj))
      throw std::logic_error("eval: trajectory violates its budget cap");
    result.rewards[slot] = reward(traj, problem);
    result.trajectories[slot] = std::move(traj);
  });
  double acc = 0.0;
  for (double r : result.rewards) acc += r;
  result.accuracy = acc / static_cast<double>(total);
  return result;
}

}  // namespace

PassAt1Result pass_at_1_with(const ProblemPolicyFactory& make_policy,
                             std::span<const Problem> problems,
                             Strategy strategy, BudgetConfig budget,
                             int n_samples, int context_length,
                             std::uint64_t seed) {
  return run_eval(problems, n_samples, seed,
                  [&](const Problem& p, Rng& rng) {
                    auto policy = make_policy(p);
                    return decode_with_strategy(*policy, strategy,
                                                p.prompt_tokens, budget,
                                                context_length, rng, p.id);
                  });
}

PassAt1Result pass_at_1(const Parameters& params,
                        std::span<const Problem> problems, Strategy strategy,
                        BudgetConfig budget, int n_samples, double temperature,
                        std::uint64_t seed) {
  return run_eval(problems, n_samples, seed,
                  [&](const Problem& p, Rng& rng) {
                    ModelPolicy policy(params, temperature);
                    return decode_with_strategy(policy, strategy,
                                                p.prompt_tokens, budget,
                                                params.config.context_length,
                                                rng, p.id);
                  });
}

PassAt1Result cross_model_composition(const Parameters& params_think,
                                      const Parameters& params_solution,
                                      std::span<const Problem> problems,
                                      BudgetConfig budget, int n_samples,
                                      double temperature, std::uint64_t seed) {
  if (params_think.config.vocab_size != params_solution.config.vocab_size)
    throw IncompatibleModelsError(
        "cross_model_composition: vocabulary size mismatch");
  const int context_length = std::min(params_think.config.context_length,
                                      params_solution.config.context_length);
  const bool same = &params_think == &params_solution;
  return run_eval(problems, n_samples, seed,
                  [&](const Problem& p, Rng& rng) {
                    ModelPolicy think_policy(params_think, temperature);
                    if (same) {
                      return decode_separate_budget(think_policy,
                                                    p.prompt_tokens, budget,
                                                    context_length, rng, p.id);
                    }
                    ModelPolicy solution_policy(params_solution, temperature);
                    return decode_separate_budget_composed(
                        think_policy, solution_policy, p.prompt_tokens, budget,
                        context_length, rng, p.id);
                  });
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

SweepReport budget_sweep(const Parameters& params,
                         std::span<const Problem> problems, Strategy strategy,
                         std::span<const BudgetConfig> budgets, int n_samples,
                         double temperature, std::uint64_t seed,
                         const std::string& model_tag) {
  if (budgets.empty())
    throw std::invalid_argument("budget_sweep: no budgets");
  SweepReport report;
  report.model_tag = model_tag;
  report.strategy = strategy_name(strategy);
  for (const BudgetConfig& b : budgets) {
    const PassAt1Result res =
        pass_at_1(params, problems, strategy, b, n_samples, temperature, seed);
    SweepRow row;
    row.budget_thinking = strategy == Strategy::kSeparateBudget ? b.thinking_budget : 0;
    row.budget_solution = strategy == Strategy::kSeparateBudget ? b.solution_budget : 0;
    row.budget_total = b.total();
    row.pass1 = res.accuracy;
    row.sample_count = static_cast<int>(res.trajectories.size());
    for (const Trajectory& t : res.trajectories) {
      row.mean_think_tokens += static_cast<double>(t.think_tokens.size());
      row.mean_solution_tokens += static_cast<double>(t.solution_tokens.size());
      row.frac_forced_think_end += t.forced_think_end ? 1.0 : 0.0;
    }
    row.mean_think_tokens /= row.sample_count;
    row.mean_solution_tokens /= row.sample_count;
    row.mean_total_tokens = row.mean_think_tokens + row.mean_solution_tokens;
    row.frac_forced_think_end /= row.sample_count;
    report.rows.push_back(row);
  }
  std::stable_sort(report.rows.begin(), report.rows.end(),
                   [](const SweepRow& a, const SweepRow& b) {
                     if (a.budget_thinking != b.budget_thinking)
                       return a.budget_thinking < b.budget_thinking;
                     return a.budget_total < b.budget_total;
                   });
  return report;
}

namespace {

void append_sweep_rows(std::ofstream& out, const SweepReport& report) {
  char buf[256];
  for (const SweepRow& r : report.rows) {
    std::snprintf(buf, sizeof(buf), "%d,%d,%d,%.6f,%.3f,%.3f,%.3f,%.4f,%d",
                  r.budget_thinking, r.budget_solution, r.budget_total,
                  r.pass1, r.mean_think_tokens, r.mean_solution_tokens,
                  r.mean_total_tokens, r.frac_forced_think_end,
                  r.sample_count);
    out << report.model_tag << ',' << report.strategy << ',' << buf << '\n';
  }
}

nlohmann::json sweep_to_json(const SweepReport& report) {
  nlohmann::json j;
  j["model"] = report.model_tag;
  j["strategy"] = report.strategy;
  j["rows"] = nlohmann::json::array();
  for (const SweepRow& r : report.rows) {
    j["rows"].push_back({{"budget_t", r.budget_thinking},
                         {"budget_s", r.budget_solution},
                         {"budget_c", r.budget_total},
                         {"pass1", r.pass1},
                         {"mean_think_tokens", r.mean_think_tokens},
                         {"mean_solution_tokens", r.mean_solution_tokens},
                         {"mean_total_tokens", r.mean_total_tokens},
                         {"frac_forced_think_end", r.frac_forced_think_end},
                         {"samples", r.sample_count}});
  }
  return j;
}

}  // namespace

void write_sweep_csv(const std::string& path,
                     std::span<const SweepReport> reports) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << "model,strategy,budget_t,budget_s,budget_c,pass1,mean_think_tokens,"
         "mean_solution_tokens,mean_total_tokens,frac_forced_think_end,"
         "samples\n";
  for (const SweepReport& report : reports) append_sweep_rows(out, report);
  if (!out) throw std::runtime_error("write failed: " + path);
}

void write_sweep_csv(const std::string& path, const SweepReport& report) {
  write_sweep_csv(path, std::span<const SweepReport>(&report, 1));
}

void write_sweep_json(const std::string& path,
                      std::span<const SweepReport> reports) {
  nlohmann::json j;
  j["reports"] = nlohmann::json::array();
  for (const SweepReport& report : reports)
    j["reports"].push_back(sweep_to_json(report));
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("write failed: " + path);
}

void write_sweep_json(const std::string& path, const SweepReport& report) {
  write_sweep_json(path, std::span<const SweepReport>(&report, 1));
}

// ---------------------------------------------------------------------------
// Token allocation histograms
// ---------------------------------------------------------------------------

AllocationStats token_allocation_stats(
    std::span<const Trajectory> trajectories) {
  if (trajectories.empty())
    throw std::invalid_argument("token_allocation_stats: no trajectories");
  const Strategy strategy = trajectories.front().strategy;
  for (const Trajectory& t : trajectories) {
    if (t.strategy != strategy)
      throw std::invalid_argument(
          "token_allocation_stats: trajectories mix strategies");
  }
  std::map<std::tuple<int, int, int>, AllocationHistogram> hists;
  for (const Trajectory& t : trajectories) {
    const auto key =
        std::make_tuple(t.budget_thinking, t.budget_solution, t.budget_total);
    AllocationHistogram& h = hists[key];
    if (h.count == 0) {
      h.budget_thinking = t.budget_thinking;
      h.budget_solution = t.budget_solution;
      h.budget_total = t.budget_total;
      const int basis =
          t.budget_thinking > 0 ? t.budget_thinking : t.budget_total;
      h.bin_width = std::max(1, basis / 16);
      const int nbins = t.budget_total / h.bin_width + 2;
      h.think_bins.assign(static_cast<std::size_t>(nbins), 0);
      h.solution_bins.assign(static_cast<std::size_t>(nbins), 0);
    }
    const auto bump = [&h](std::vector<long>& bins, int tokens) {
      std::size_t bin = static_cast<std::size_t>(tokens / h.bin_width);
      if (bin >= bins.size()) bin = bins.size() - 1;
      ++bins[bin];
    };
    bump(h.think_bins, static_cast<int>(t.think_tokens.size()));
    bump(h.solution_bins, static_cast<int>(t.solution_tokens.size()));
    ++h.count;
  }
  AllocationStats stats;
  for (auto& [key, h] : hists) stats.per_budget.push_back(std::move(h));
  return stats;
}

void write_allocation_csv(const std::string& path,
                          const AllocationStats& stats) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << "budget_t,budget_s,budget_c,segment,bin_lo,bin_hi,count\n";
  for (const AllocationHistogram& h : stats.per_budget) {
    const auto emit = [&](const char* segment, const std::vector<long>& bins) {
      for (std::size_t b = 0; b < bins.size(); ++b) {
        if (bins[b] == 0) continue;
        out << h.budget_thinking << ',' << h.budget_solution << ','
            << h.budget_total << ',' << segment << ','
            << static_cast<long>(b) * h.bin_width << ','
            << static_cast<long>(b + 1) * h.bin_width - 1 << ',' << bins[b]
            << '\n';
      }
    };
    emit("think", h.think_bins);
    emit("solution", h.solution_bins);
  }
  if (!out) throw std::runtime_error("write failed: " + path);
}

BudgetConfig unconstrained_budget(const ModelConfig& config,
                                  std::span<const Problem> problems) {
  std::size_t max_prompt = 0;
  for (const Problem& p : problems)
    max_prompt = std::max(max_prompt, p.prompt_tokens.size());
  const int remainder =
      config.context_length - static_cast<int>(max_prompt) - 1;
  if (remainder < 2)
    throw std::invalid_argument(
        "unconstrained_budget: context too small for any decode");
  BudgetConfig b;
  b.thinking_budget = remainder / 2;
  b.solution_budget = remainder - remainder / 2;
  return b;
}

}  // namespace budgetlab
