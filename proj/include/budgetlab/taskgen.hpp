#pragma once

#include <span>
#include <string>
#include <vector>

#include "budgetlab/decoder.hpp"

namespace budgetlab {

// ---------------------------------------------------------------------------
// Synthetic scratchpad-reasoning corpus: left-to-right chained modular
// arithmetic. A difficulty-k problem renders as
//
//   a1 op a2 op ... op a(k+1) mod m ?
//
// with single-digit operands, ops in {+, -, *}, and every partial value
// reduced into [0, m). The required scratchpad grows linearly with k, which
// is what gives thinking budgets leverage on this task.
// ---------------------------------------------------------------------------

enum class Split { kTrain, kValidation, kTest };

std::string split_name(Split s);
Split split_from_name(const std::string& name);  // throws invalid_argument

struct Problem {
  long long id = 0;
  std::vector<int> prompt_tokens;  // ends with the question delimiter
  int answer = 0;                  // in [0, modulus)
  int difficulty = 1;              // k, number of chained operations
  int modulus = 2;

  std::string prompt_text() const;
};

struct CorpusSpec {
  std::uint64_t seed = 0;
  int count = 1;
  int difficulty_min = 1;
  int difficulty_max = 1;
  int modulus = 10;
  Split split = Split::kTrain;
};

// Deterministic in the spec; problem ids are split-disjoint by construction
// (each split owns a distinct million-wide id range).
std::vector<Problem> generate_corpus(const CorpusSpec& spec);

// Gold continuation for supervised warm-start: one scratchpad step per
// operation, each step "v op a = v' ;" with v' already reduced mod m,
// then </think> ANS <answer digits> <eos>. Pure function of the problem.
std::vector<int> gold_continuation(const Problem& problem);

// Number of leading gold tokens that form the thinking segment (up to and
// including </think>).
int gold_think_length(const std::vector<int>& gold);

// Binary exact-match reward. 1.0 iff the solution segment contains the
// answer marker followed by digit tokens parsing to problem.answer; the
// first marker occurrence is authoritative; thinking content never matters.
double reward(const Trajectory& trajectory, const Problem& problem);
double reward_solution(std::span<const int> solution_tokens,
                       const Problem& problem);

// ---------------------------------------------------------------------------
// Corpus persistence: line-delimited JSON, one problem per line, with an
// optional gold-token field.
// ---------------------------------------------------------------------------

struct CorpusRecord {
  Problem problem;
  Split split = Split::kTrain;
  std::vector<int> gold_tokens;
  bool has_gold = false;
};

void write_corpus(const std::string& path, std::span<const Problem> problems,
                  Split split, bool with_gold);
std::vector<CorpusRecord> load_corpus(const std::string& path);

}  // namespace budgetlab
