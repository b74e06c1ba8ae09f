#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace budgetlab {
namespace vocab {

// ---------------------------------------------------------------------------
// Closed token vocabulary shared by the task generator, the model, and the
// decoders. Digits are single tokens so numeral parsing is unambiguous.
// Model configs may declare a vocab_size larger than kNumTokens; the extra
// ids are inert filler (legal to sample, meaningless to parse).
// ---------------------------------------------------------------------------

constexpr int kPad = 0;
constexpr int kEos = 1;
constexpr int kThinkOpen = 2;   // <think>
constexpr int kThinkClose = 3;  // </think>
constexpr int kAnswerMarker = 4;  // ANS
constexpr int kDigit0 = 5;        // digits are kDigit0 + d for d in 0..9
constexpr int kPlus = 15;
constexpr int kMinus = 16;
constexpr int kTimes = 17;
constexpr int kMod = 18;
constexpr int kQuestion = 19;  // question delimiter, ends every prompt
constexpr int kEquals = 20;
constexpr int kSep = 21;  // scratchpad step separator

constexpr int kNumTokens = 22;

inline bool is_digit(int tok) { return tok >= kDigit0 && tok < kDigit0 + 10; }
inline int digit_value(int tok) { return tok - kDigit0; }
inline int digit_token(int d) { return kDigit0 + d; }

inline bool is_operator(int tok) {
  return tok == kPlus || tok == kMinus || tok == kTimes;
}

inline std::string token_text(int tok) {
  switch (tok) {
    case kPad: return "<pad>";
    case kEos: return "<eos>";
    case kThinkOpen: return "<think>";
    case kThinkClose: return "</think>";
    case kAnswerMarker: return "ANS";
    case kPlus: return "+";
    case kMinus: return "-";
    case kTimes: return "*";
    case kMod: return "mod";
    case kQuestion: return "?";
    case kEquals: return "=";
    case kSep: return ";";
    default:
      if (is_digit(tok)) return std::string(1, static_cast<char>('0' + digit_value(tok)));
      return "<unk" + std::to_string(tok) + ">";
  }
}

inline std::string render(const std::vector<int>& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += token_text(tokens[i]);
  }
  return out;
}

// Appends the decimal digit tokens of a non-negative value.
inline void append_number(std::vector<int>& tokens, long long value) {
  std::string s = std::to_string(value);
  for (char c : s) tokens.push_back(digit_token(c - '0'));
}

}  // namespace vocab
}  // namespace budgetlab
