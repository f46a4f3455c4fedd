// SPDX-License-Identifier: Apache-2.0
//
// MiniMath: a synthetic multi-step arithmetic task with a fixed 20-token
// vocabulary and an exact verifier.
//
//   prompt      Q: 3 + 4 - 2 A:
//   completion  3 + 4 = 7 ; 7 - 2 = 5 ; #### 5 EOS
//
// Numbers are emitted digit by digit. Positions inside a completion are
// 1-based throughout the lab and never include prompt tokens.
#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ctlab/rng.hpp"

namespace ctlab::minimath {

using TokenId = std::int32_t;
using TokenSeq = std::vector<TokenId>;

enum class Category { function, content, number, op, punct };

inline constexpr std::array<Category, 5> kAllCategories = {
    Category::function, Category::content, Category::number, Category::op,
    Category::punct};

std::string_view category_name(Category c);

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kEos = 1;
inline constexpr TokenId kDigit0 = 2;
inline constexpr TokenId kPlus = 12;
inline constexpr TokenId kMinus = 13;
inline constexpr TokenId kTimes = 14;
inline constexpr TokenId kEquals = 15;
inline constexpr TokenId kSemicolon = 16;
inline constexpr TokenId kFinal = 17;  // "####"
inline constexpr TokenId kQuestion = 18;
inline constexpr TokenId kAnswer = 19;
inline constexpr std::size_t kVocabSize = 20;

constexpr TokenId digit_token(int d) { return kDigit0 + d; }
constexpr bool is_digit(TokenId t) { return t >= kDigit0 && t < kDigit0 + 10; }
constexpr int digit_value(TokenId t) { return t - kDigit0; }

/// The fixed MiniMath vocabulary. Ids are dense in [0, size()).
class Vocabulary {
 public:
  static const Vocabulary& instance();

  std::size_t size() const { return tokens_.size(); }
  std::string_view token(TokenId id) const;
  std::optional<TokenId> find(std::string_view text) const;
  Category category(TokenId id) const;
  bool contains(TokenId id) const {
    return id >= 0 && static_cast<std::size_t>(id) < tokens_.size();
  }

 private:
  Vocabulary();
  std::vector<std::string> tokens_;
  std::vector<Category> categories_;
};

/// Space-separated token text to ids. Throws std::invalid_argument on an
/// unknown token.
TokenSeq tokenize(std::string_view text);
std::string detokenize(std::span<const TokenId> tokens);

enum class Op : char { add = '+', sub = '-', mul = '*' };

TokenId op_token(Op op);
int apply(Op op, int lhs, int rhs);

struct Step {
  Op op;
  int operand;
  bool operator==(const Step&) const = default;
};

inline constexpr int kMaxValue = 999;
inline constexpr std::size_t kMinSteps = 2;
inline constexpr std::size_t kMaxSteps = 3;

struct Problem {
  std::int64_t id = 0;
  int start = 1;
  std::vector<Step> steps;
  int answer = 0;
};

/// Left-to-right intermediate values, one per step; the last is the answer.
std::vector<int> evaluate(int start, std::span<const Step> steps);

/// True iff (start, steps) satisfies every Problem bound.
bool is_valid(int start, std::span<const Step> steps);

/// Builds a Problem from components. Throws std::invalid_argument when the
/// components violate a bound (start/operand range, chain length, or an
/// intermediate value outside [0, 999]).
Problem make_problem(std::int64_t id, int start, std::vector<Step> steps);

/// Draws components until every bound holds.
Problem sample_problem(std::int64_t id, Rng& rng);

/// The problems of a split, each drawn from its own derived stream.
std::vector<Problem> generate_problems(std::uint64_t master_seed,
                                       std::int64_t first_id, std::size_t count);

TokenSeq number_tokens(int value);
TokenSeq render_prompt(const Problem& problem);

/// Canonical correct completion: "a op b = c ;" per step, then
/// "#### answer EOS".
TokenSeq render_gold(const Problem& problem);

struct Trajectory {
  std::int64_t problem_id = 0;
  TokenSeq tokens;  // completion only
  std::optional<int> predicted_answer;
  bool correct = false;
  bool operator==(const Trajectory&) const = default;
};

/// Labels a completion. Never rejects malformed input; anything without a
/// well-formed "#### digits" tail is incorrect with no predicted answer.
/// Throws std::invalid_argument if the completion contains PAD.
Trajectory verify(const Problem& problem, std::span<const TokenId> completion);

/// 1-based position of the first token at which an emitted result (an
/// intermediate value after "=", or the final answer after "####") departs
/// from the exact evaluation. Empty if the completion breaks the grammar
/// before any result segment starts. Throws std::invalid_argument on a
/// correct trajectory.
std::optional<std::size_t> first_error_position(const Problem& problem,
                                                const Trajectory& trajectory);

}  // namespace ctlab::minimath
