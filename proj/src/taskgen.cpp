#include "budgetlab/taskgen.hpp"

#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "budgetlab/errors.hpp"
#include "budgetlab/rng.hpp"
#include "budgetlab/vocab.hpp"

namespace budgetlab {

namespace {

constexpr long long kSplitIdStride = 1000000;

int split_index(Split s) {
  switch (s) {
    case Split::kTrain: return 0;
    case Split::kValidation: return 1;
    case Split::kTest: return 2;
  }
  return 0;
}

int apply_op(int lhs, int op, int rhs, int modulus) {
  long long v = 0;
  if (op == vocab::kPlus) v = static_cast<long long>(lhs) + rhs;
  else if (op == vocab::kMinus) v = static_cast<long long>(lhs) - rhs;
  else v = static_cast<long long>(lhs) * rhs;
  long long m = v % modulus;
  if (m < 0) m += modulus;
  return static_cast<int>(m);
}

}  // namespace

std::string split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kValidation: return "validation";
    case Split::kTest: return "test";
  }
  return "train";
}

Split split_from_name(const std::string& name) {
  if (name == "train") return Split::kTrain;
  if (name == "validation") return Split::kValidation;
  if (name == "test") return Split::kTest;
  throw std::invalid_argument("unknown split name: " + name);
}

std::string Problem::prompt_text() const { return vocab::render(prompt_tokens); }

std::vector<Problem> generate_corpus(const CorpusSpec& spec) {
  if (spec.count < 1)
    throw std::invalid_argument("corpus spec: count must be >= 1");
  if (spec.count > kSplitIdStride)
    throw std::invalid_argument("corpus spec: count exceeds split id range");
  if (spec.difficulty_min < 1 || spec.difficulty_min > spec.difficulty_max)
    throw std::invalid_argument("corpus spec: empty difficulty range");
  if (spec.modulus < 2)
    throw std::invalid_argument("corpus spec: modulus must be >= 2");
  if (spec.modulus > 1000000000)
    throw std::invalid_argument("corpus spec: modulus too large");

  const long long id_base = split_index(spec.split) * kSplitIdStride;
  std::vector<Problem> out;
  out.reserve(static_cast<std::size_t>(spec.count));
  for (int i = 0; i < spec.count; ++i) {
    Rng rng = Rng::derive(spec.seed, "problem",
                          {static_cast<std::uint64_t>(split_index(spec.split)),
                           static_cast<std::uint64_t>(i)});
    Problem p;
    p.id = id_base + i;
    p.modulus = spec.modulus;
    p.difficulty = rng.next_int(spec.difficulty_min, spec.difficulty_max);

    int value = rng.next_int(0, 9);
    p.prompt_tokens.push_back(vocab::digit_token(value));
    value %= spec.modulus;
    static const int kOps[3] = {vocab::kPlus, vocab::kMinus, vocab::kTimes};
    for (int step = 0; step < p.difficulty; ++step) {
      const int op = kOps[rng.next_int(0, 2)];
      const int operand = rng.next_int(0, 9);
      p.prompt_tokens.push_back(op);
      p.prompt_tokens.push_back(vocab::digit_token(operand));
      value = apply_op(value, op, operand, spec.modulus);
    }
    p.prompt_tokens.push_back(vocab::kMod);
    vocab::append_number(p.prompt_tokens, spec.modulus);
    p.prompt_tokens.push_back(vocab::kQuestion);
    p.answer = value;
    out.push_back(std::move(p));
  }
  return out;
}

std::vector<int> gold_continuation(const Problem& problem) {
  std::vector<int> gold;
  // Re-walk the expression, emitting one reduced step per operation.
  int value = -1;
  int pos = 0;
  const auto& toks = problem.prompt_tokens;
  value = vocab::digit_value(toks[0]) % problem.modulus;
  pos = 1;
  while (pos < static_cast<int>(toks.size()) && vocab::is_operator(toks[pos])) {
    const int op = toks[pos];
    const int operand = vocab::digit_value(toks[pos + 1]);
    const int next = apply_op(value, op, operand, problem.modulus);
    vocab::append_number(gold, value);
    gold.push_back(op);
    vocab::append_number(gold, operand);
    gold.push_back(vocab::kEquals);
    vocab::append_number(gold, next);
    gold.push_back(vocab::kSep);
    value = next;
    pos += 2;
  }
  gold.push_back(vocab::kThinkClose);
  gold.push_back(vocab::kAnswerMarker);
  vocab::append_number(gold, problem.answer);
  gold.push_back(vocab::kEos);
  return gold;
}

int gold_think_length(const std::vector<int>& gold) {
  for (std::size_t i = 0; i < gold.size(); ++i) {
    if (gold[i] == vocab::kThinkClose) return static_cast<int>(i) + 1;
  }
  return static_cast<int>(gold.size());
}

double reward_solution(std::span<const int> solution_tokens,
                       const Problem& problem) {
  std::size_t i = 0;
  while (i < solution_tokens.size() &&
         solution_tokens[i] != vocab::kAnswerMarker)
    ++i;
  if (i == solution_tokens.size()) return 0.0;
  ++i;
  long long value = 0;
  bool any_digit = false;
  while (i < solution_tokens.size() && vocab::is_digit(solution_tokens[i])) {
    any_digit = true;
    value = value * 10 + vocab::digit_value(solution_tokens[i]);
    if (value > 2000000000) return 0.0;  // cannot match any stored answer
    ++i;
  }
  if (!any_digit) return 0.0;
  return value == problem.answer ? 1.0 : 0.0;
}

double reward(const Trajectory& trajectory, const Problem& problem) {
  return reward_solution(trajectory.solution_tokens, problem);
}

void write_corpus(const std::string& path, std::span<const Problem> problems,
                  Split split, bool with_gold) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  for (const Problem& p : problems) {
    nlohmann::json j;
    j["id"] = p.id;
    j["prompt_tokens"] = p.prompt_tokens;
    j["prompt_text"] = p.prompt_text();
    j["answer"] = p.answer;
    j["difficulty"] = p.difficulty;
    j["modulus"] = p.modulus;
    j["split"] = split_name(split);
    if (with_gold) j["gold_tokens"] = gold_continuation(p);
    out << j.dump() << '\n';
  }
  if (!out) throw std::runtime_error("write failed: " + path);
}

std::vector<CorpusRecord> load_corpus(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingDataError("cannot open corpus file: " + path);
  std::vector<CorpusRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw MissingDataError(path + ":" + std::to_string(lineno) +
                             ": bad corpus line: " + e.what());
    }
    CorpusRecord rec;
    rec.problem.id = j.at("id").get<long long>();
    rec.problem.prompt_tokens = j.at("prompt_tokens").get<std::vector<int>>();
    rec.problem.answer = j.at("answer").get<int>();
    rec.problem.difficulty = j.at("difficulty").get<int>();
    rec.problem.modulus = j.at("modulus").get<int>();
    rec.split = split_from_name(j.at("split").get<std::string>());
    if (j.contains("gold_tokens")) {
      rec.gold_tokens = j.at("gold_tokens").get<std::vector<int>>();
      rec.has_gold = true;
    }
    out.push_back(std::move(rec));
  }
  return out;
}

}  // namespace budgetlab
