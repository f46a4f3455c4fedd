// SPDX-License-Identifier: Apache-2.0
#include "ctlab/minimath.hpp"

#include <algorithm>
#include <sstream>
#include <stdexcept>

namespace ctlab::minimath {

std::string_view category_name(Category c) {
  switch (c) {
    case Category::function: return "function";
    case Category::content: return "content";
    case Category::number: return "number";
    case Category::op: return "operator";
    case Category::punct: return "punct";
  }
  return "unknown";
}

Vocabulary::Vocabulary() {
  tokens_ = {"PAD", "EOS"};
  categories_ = {Category::function, Category::function};
  for (int d = 0; d < 10; ++d) {
    tokens_.push_back(std::to_string(d));
    categories_.push_back(Category::number);
  }
  for (const char* op : {"+", "-", "*", "="}) {
    tokens_.emplace_back(op);
    categories_.push_back(Category::op);
  }
  for (const char* p : {";", "####"}) {
    tokens_.emplace_back(p);
    categories_.push_back(Category::punct);
  }
  for (const char* f : {"Q:", "A:"}) {
    tokens_.emplace_back(f);
    categories_.push_back(Category::function);
  }
}

const Vocabulary& Vocabulary::instance() {
  static const Vocabulary vocab;
  return vocab;
}

std::string_view Vocabulary::token(TokenId id) const {
  if (!contains(id)) throw std::out_of_range("token id out of range: " + std::to_string(id));
  return tokens_[static_cast<std::size_t>(id)];
}

std::optional<TokenId> Vocabulary::find(std::string_view text) const {
  const auto it = std::find(tokens_.begin(), tokens_.end(), text);
  if (it == tokens_.end()) return std::nullopt;
  return static_cast<TokenId>(it - tokens_.begin());
}

Category Vocabulary::category(TokenId id) const {
  if (!contains(id)) throw std::out_of_range("token id out of range: " + std::to_string(id));
  return categories_[static_cast<std::size_t>(id)];
}

TokenSeq tokenize(std::string_view text) {
  const auto& vocab = Vocabulary::instance();
  TokenSeq out;
  std::istringstream in{std::string(text)};
  std::string word;
  while (in >> word) {
    const auto id = vocab.find(word);
    if (!id) throw std::invalid_argument("unknown token: '" + word + "'");
    out.push_back(*id);
  }
  return out;
}

std::string detokenize(std::span<const TokenId> tokens) {
  const auto& vocab = Vocabulary::instance();
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += vocab.token(tokens[i]);
  }
  return out;
}

TokenId op_token(Op op) {
  switch (op) {
    case Op::add: return kPlus;
    case Op::sub: return kMinus;
    case Op::mul: return kTimes;
  }
  throw std::invalid_argument("bad operator");
}

int apply(Op op, int lhs, int rhs) {
  switch (op) {
    case Op::add: return lhs + rhs;
    case Op::sub: return lhs - rhs;
    case Op::mul: return lhs * rhs;
  }
  throw std::invalid_argument("bad operator");
}

std::vector<int> evaluate(int start, std::span<const Step> steps) {
  std::vector<int> values;
  values.reserve(steps.size());
  int acc = start;
  for (const auto& s : steps) {
    acc = apply(s.op, acc, s.operand);
    values.push_back(acc);
  }
  return values;
}

bool is_valid(int start, std::span<const Step> steps) {
  if (start < 1 || start > 9) return false;
  if (steps.size() < kMinSteps || steps.size() > kMaxSteps) return false;
  for (const auto& s : steps) {
    if (s.operand < 1 || s.operand > 9) return false;
  }
  const auto values = evaluate(start, steps);
  return std::all_of(values.begin(), values.end(),
                     [](int v) { return v >= 0 && v <= kMaxValue; });
}

Problem make_problem(std::int64_t id, int start, std::vector<Step> steps) {
  if (!is_valid(start, steps)) {
    throw std::invalid_argument("problem components violate MiniMath bounds");
  }
  Problem p;
  p.id = id;
  p.start = start;
  p.answer = evaluate(start, steps).back();
  p.steps = std::move(steps);
  return p;
}

Problem sample_problem(std::int64_t id, Rng& rng) {
  static constexpr std::array<Op, 3> kOps = {Op::add, Op::sub, Op::mul};
  for (;;) {
    const int start = rng.between(1, 9);
    const auto len = static_cast<std::size_t>(
        rng.between(static_cast<int>(kMinSteps), static_cast<int>(kMaxSteps)));
    std::vector<Step> steps;
    for (std::size_t i = 0; i < len; ++i) {
      const Op op = kOps[rng.below(kOps.size())];
      steps.push_back({op, rng.between(1, 9)});
    }
    if (is_valid(start, steps)) return make_problem(id, start, std::move(steps));
  }
}

std::vector<Problem> generate_problems(std::uint64_t master_seed,
                                       std::int64_t first_id, std::size_t count) {
  std::vector<Problem> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const auto id = first_id + static_cast<std::int64_t>(i);
    Rng rng(derive_seed(master_seed, Stage::problems, static_cast<std::uint64_t>(id)));
    out.push_back(sample_problem(id, rng));
  }
  return out;
}

TokenSeq number_tokens(int value) {
  if (value < 0) throw std::invalid_argument("negative numbers are not representable");
  TokenSeq out;
  for (const char c : std::to_string(value)) out.push_back(digit_token(c - '0'));
  return out;
}

namespace {

void append(TokenSeq& dst, const TokenSeq& src) {
  dst.insert(dst.end(), src.begin(), src.end());
}

}  // namespace

TokenSeq render_prompt(const Problem& problem) {
  TokenSeq out{kQuestion};
  append(out, number_tokens(problem.start));
  for (const auto& s : problem.steps) {
    out.push_back(op_token(s.op));
    append(out, number_tokens(s.operand));
  }
  out.push_back(kAnswer);
  return out;
}

TokenSeq render_gold(const Problem& problem) {
  TokenSeq out;
  int acc = problem.start;
  for (const auto& s : problem.steps) {
    append(out, number_tokens(acc));
    out.push_back(op_token(s.op));
    append(out, number_tokens(s.operand));
    out.push_back(kEquals);
    acc = apply(s.op, acc, s.operand);
    append(out, number_tokens(acc));
    out.push_back(kSemicolon);
  }
  out.push_back(kFinal);
  append(out, number_tokens(acc));
  out.push_back(kEos);
  return out;
}

Trajectory verify(const Problem& problem, std::span<const TokenId> completion) {
  if (std::find(completion.begin(), completion.end(), kPad) != completion.end()) {
    throw std::invalid_argument("completion contains PAD");
  }
  Trajectory t;
  t.problem_id = problem.id;
  t.tokens.assign(completion.begin(), completion.end());

  const auto body_end = std::find(completion.begin(), completion.end(), kEos);
  const auto last_final = std::find(std::make_reverse_iterator(body_end),
                                    std::make_reverse_iterator(completion.begin()),
                                    kFinal);
  if (last_final == std::make_reverse_iterator(completion.begin())) return t;

  const auto tail_begin = last_final.base();  // one past "####"
  const auto tail_len = body_end - tail_begin;
  if (tail_len < 1 || tail_len > 9) return t;
  int value = 0;
  for (auto it = tail_begin; it != body_end; ++it) {
    if (!is_digit(*it)) return t;
    value = value * 10 + digit_value(*it);
  }
  t.predicted_answer = value;
  t.correct = value == problem.answer;
  return t;
}

namespace {

// Compares the digit run starting at `pos` against `expected`. Returns the
// 0-based index of the first departing token, `npos` when the run matches
// and ends cleanly, or `end` when the tokens run out mid-comparison.
constexpr std::size_t kNoMismatch = static_cast<std::size_t>(-1);
constexpr std::size_t kRanOut = static_cast<std::size_t>(-2);

std::size_t compare_digits(std::span<const TokenId> toks, std::size_t pos,
                           const TokenSeq& expected, std::size_t& run_end) {
  std::size_t i = 0;
  for (;; ++i) {
    const std::size_t at = pos + i;
    const bool have = at < toks.size() && is_digit(toks[at]);
    if (i < expected.size()) {
      if (at >= toks.size()) return kRanOut;
      if (!have || toks[at] != expected[i]) return at;
    } else {
      if (have) return at;  // extra digit
      run_end = at;
      return kNoMismatch;
    }
  }
}

}  // namespace

std::optional<std::size_t> first_error_position(const Problem& problem,
                                                const Trajectory& trajectory) {
  if (trajectory.correct) {
    throw std::invalid_argument("first_error_position called on a correct trajectory");
  }
  const std::span<const TokenId> toks(trajectory.tokens);
  const auto values = evaluate(problem.start, problem.steps);
  const TokenSeq answer_digits = number_tokens(problem.answer);
  std::size_t results_seen = 0;
  std::size_t step = 0;
  std::size_t pos = 0;

  auto broken = [&](std::size_t at) -> std::optional<std::size_t> {
    if (results_seen == 0 || at >= toks.size()) return std::nullopt;
    return at + 1;
  };

  while (pos < toks.size()) {
    if (toks[pos] == kFinal) {
      ++results_seen;
      std::size_t run_end = 0;
      const auto m = compare_digits(toks, pos + 1, answer_digits, run_end);
      if (m == kRanOut) return std::nullopt;
      if (m != kNoMismatch) return m + 1;
      // Digits match; anything other than EOS/end after them departs.
      if (run_end < toks.size() && toks[run_end] != kEos) return run_end + 1;
      return std::nullopt;
    }
    if (step >= values.size()) {
      // All steps consumed: the final answer marker was due here.
      return broken(pos);
    }
    // Left side of a step: anything up to "=".
    std::size_t eq = pos;
    while (eq < toks.size() && toks[eq] != kEquals) {
      const TokenId t = toks[eq];
      if (t == kEos || t == kSemicolon) return broken(eq);
      if (t == kFinal) break;
      ++eq;
    }
    if (eq >= toks.size()) return std::nullopt;
    if (toks[eq] == kFinal) {
      pos = eq;
      continue;
    }
    ++results_seen;
    std::size_t run_end = 0;
    const auto m = compare_digits(toks, eq + 1, number_tokens(values[step]), run_end);
    if (m == kRanOut) return std::nullopt;
    if (m != kNoMismatch) return m + 1;
    ++step;
    pos = run_end;
    if (pos < toks.size() && toks[pos] == kSemicolon) {
      ++pos;
    } else if (pos < toks.size() && toks[pos] != kFinal) {
      return broken(pos);
    }
  }
  return std::nullopt;
}

}  // namespace ctlab::minimath
