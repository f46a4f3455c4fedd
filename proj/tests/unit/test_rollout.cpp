// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numeric>
#include <functional>
#include <map>
#include <unordered_map>

#include "ctlab/minimath.hpp"
#include "ctlab/nanolm.hpp"
#include "ctlab/rollout.hpp"

using namespace ctlab;
using namespace ctlab::rollout;
using minimath::digit_token;
using minimath::kEos;
using Catch::Approx;

namespace {

constexpr float kSure = 30.0f;

/// A model whose next token depends only on the previous one: successors[a]
/// lists the tokens that follow a, each with equal probability. Everything
/// else gets about e^-30 relative mass.
nanolm::ModelParams bigram(const std::map<TokenId, std::vector<TokenId>>& successors) {
  const std::size_t V = minimath::kVocabSize;
  nanolm::ModelParams p(nanolm::ModelConfig{V, 2, V, V});
  for (std::size_t v = 0; v < V; ++v) p.embedding[v * V + v] = 1.0f;
  for (std::size_t e = 0; e < V; ++e) p.w1[(1 * V + e) * V + e] = 8.0f;  // last slot only
  const float on = static_cast<float>(1.0 / std::tanh(8.0));
  for (const auto& [a, next] : successors) {
    for (const TokenId b : next) p.w2[static_cast<std::size_t>(a) * V + static_cast<std::size_t>(b)] = kSure * on;
  }
  return p;
}

minimath::Problem three_plus_four_minus_two() {
  return minimath::make_problem(1, 3, {{minimath::Op::add, 4}, {minimath::Op::sub, 2}});
}

// After "A:" the answer marker, then 5, then either EOS or a stray 3.
nanolm::ModelParams stray_digit_model() {
  return bigram({{minimath::kAnswer, {minimath::kFinal}},
                 {minimath::kFinal, {digit_token(5)}},
                 {digit_token(5), {kEos, digit_token(3)}},
                 {digit_token(3), {kEos}}});
}

/// Exact probability that sampling from prefix ends in a verified answer,
/// by enumerating every continuation with non-negligible probability.
double exact_success(const nanolm::Model& m, const minimath::Problem& problem,
                     const TokenSeq& prompt, TokenSeq completion, std::size_t max_len) {
  if ((!completion.empty() && completion.back() == kEos) || completion.size() >= max_len) {
    return minimath::verify(problem, completion).correct ? 1.0 : 0.0;
  }
  TokenSeq seq = prompt;
  seq.insert(seq.end(), completion.begin(), completion.end());
  const auto probs = m.probs(nanolm::make_context(seq, seq.size(), m.config().context));
  double total = 0.0, mass = 0.0;
  for (std::size_t v = 1; v < probs.size(); ++v) mass += probs[v];
  for (std::size_t v = 1; v < probs.size(); ++v) {
    if (probs[v] / mass < 1e-9) continue;
    auto next = completion;
    next.push_back(static_cast<TokenId>(v));
    total += probs[v] / mass * exact_success(m, problem, prompt, next, max_len);
  }
  return total;
}

}  // namespace

TEST_CASE("critical rule on fixed score vectors", "[rollout]") {
  const auto r1 = apply_critical_rule(std::vector<double>{0.4, 0.0, 0.2, 0.0, 0.01, 0.0}, 0.0, 0.05);
  CHECK(r1.position == 4u);
  CHECK(r1.mode == IdentificationMode::both_conditions);

  const auto r2 = apply_critical_rule(std::vector<double>{0.3, 0.0, 0.5, 0.1}, 0.0, 0.05);
  CHECK(r2.position == 2u);
  CHECK(r2.mode == IdentificationMode::first_condition_only);

  const auto r3 = apply_critical_rule(std::vector<double>{0.3, 0.2}, 0.0, 0.05);
  CHECK_FALSE(r3.position.has_value());
  CHECK(r3.mode == IdentificationMode::not_found);

  // 3/64 is below 5%, 4/64 is not
  CHECK(apply_critical_rule(std::vector<double>{0.0, 3.0 / 64}, 0.0, 0.05).mode ==
        IdentificationMode::both_conditions);
  CHECK(apply_critical_rule(std::vector<double>{0.0, 4.0 / 64}, 0.0, 0.05).mode ==
        IdentificationMode::first_condition_only);
}

TEST_CASE("critical rule agrees with brute force", "[rollout][property]") {
  Rng rng(3);
  for (int trial = 0; trial < 2000; ++trial) {
    std::vector<double> s(1 + rng.below(10));
    for (auto& v : s) v = static_cast<double>(rng.below(6)) / 64.0 * static_cast<double>(rng.below(2));
    std::optional<std::size_t> expect;
    for (std::size_t t = 0; t < s.size() && !expect; ++t) {
      bool tail = true;
      for (std::size_t u = t + 1; u < s.size(); ++u) tail = tail && s[u] < 0.05;
      if (s[t] == 0.0 && tail) expect = t + 1;
    }
    const auto r = apply_critical_rule(s, 0.0, 0.05);
    if (expect) {
      REQUIRE(r.mode == IdentificationMode::both_conditions);
      REQUIRE(r.position == expect);
    } else {
      REQUIRE(r.mode != IdentificationMode::both_conditions);
    }
  }
}

TEST_CASE("sampling edge cases", "[rollout]") {
  const nanolm::Model eos_model(bigram({{minimath::kAnswer, {kEos}}}));
  Rng rng(1);
  const auto prompt = minimath::render_prompt(three_plus_four_minus_two());
  CHECK(sample_completion(eos_model, prompt, rng, 64, 1.0) == TokenSeq{kEos});
  CHECK(eos_model.probs(nanolm::make_context(prompt, prompt.size(), 2))[kEos] > 1.0 - 1e-11);

  TokenSeq done = prompt;
  done.push_back(kEos);
  CHECK(sample_completion(eos_model, done, rng, 64, 1.0).empty());
  CHECK_THROWS_AS(sample_completion(eos_model, prompt, rng, 64, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(sample_completion(eos_model, TokenSeq{}, rng, 64, 1.0), std::invalid_argument);

  const nanolm::Model loop(bigram({{minimath::kAnswer, {digit_token(1)}}, {digit_token(1), {digit_token(1)}}}));
  CHECK(sample_completion(loop, prompt, rng, 7, 1.0).size() == 7);
}

TEST_CASE("near-zero temperature is greedy", "[rollout]") {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const nanolm::Model m(nanolm::init_params(nanolm::ModelConfig{20, 4, 8, 16}, seed, 1.5));
    const TokenSeq prefix = {minimath::kQuestion, digit_token(4), minimath::kAnswer};
    Rng rng(seed);
    CHECK(sample_completion(m, prefix, rng, 20, 1e-6) == greedy_completion(m, prefix, 20));
  }
}

TEST_CASE("sampling is deterministic per stream and never emits PAD", "[rollout]") {
  const nanolm::Model m(nanolm::init_params(nanolm::ModelConfig{20, 4, 8, 16}, 2, 1.0));
  const TokenSeq prefix = {minimath::kQuestion, minimath::kAnswer};
  for (std::uint64_t s = 0; s < 50; ++s) {
    Rng a(s), b(s);
    const auto x = sample_completion(m, prefix, a, 30, 1.0);
    CHECK(x == sample_completion(m, prefix, b, 30, 1.0));
    for (const TokenId t : x) CHECK(t != minimath::kPad);
  }
  std::vector<double> lp(20, -50.0);
  lp[minimath::kPad] = 0.0;
  lp[4] = -1.0;
  Rng r(0);
  for (int i = 0; i < 20; ++i) CHECK(sample_token(lp, 1.0, r) == 4);
  CHECK(greedy_token(lp) == 4);
}

TEST_CASE("forced alternative distribution", "[rollout]") {
  const auto a = mask_and_renormalize(std::vector<double>{0.5, 0.3, 0.2}, 0, std::nullopt);
  CHECK(a[0] == 0.0);
  CHECK(a[1] == Approx(0.6).epsilon(1e-15));
  CHECK(a[2] == Approx(0.4).epsilon(1e-15));

  const std::vector<double> base = {0.0, 0.7, 0.3};
  CHECK(mask_and_renormalize(base, 0, std::nullopt) == base);
  CHECK_THROWS_AS(mask_and_renormalize(std::vector<double>{1.0, 0.0, 0.0}, 0, std::nullopt),
                  UnreplaceableTokenError);
  CHECK_THROWS_AS(mask_and_renormalize(std::vector<double>{0.2, 0.8, 0.0}, 1, TokenId{0}),
                  UnreplaceableTokenError);

  const nanolm::Model m(nanolm::init_params(nanolm::ModelConfig{20, 3, 4, 4}, 5, 1.0));
  const TokenSeq ctx = {minimath::kQuestion, digit_token(2), minimath::kAnswer};
  const auto p = forced_alternative_distribution(m, ctx, digit_token(2));
  double sum = 0.0;
  for (const double x : p) sum += x;
  CHECK(sum == Approx(1.0).margin(1e-12));
  CHECK(p[digit_token(2)] == 0.0);
  CHECK(p[minimath::kPad] == 0.0);

  // finite logits always leave some mass to renormalize
  const nanolm::Model sure(bigram({{minimath::kAnswer, {kEos}}}));
  const auto q = forced_alternative_distribution(sure, TokenSeq{digit_token(2), minimath::kAnswer}, kEos);
  CHECK(q[kEos] == 0.0);
  CHECK(std::accumulate(q.begin(), q.end(), 0.0) == Approx(1.0).margin(1e-9));
}

TEST_CASE("pass at k", "[rollout]") {
  for (std::size_t k = 1; k <= 64; k *= 2) {
    CHECK(pass_at_k(64, 0, k) == 0.0);
    CHECK(pass_at_k(64, 64, k) == 1.0);
  }
  CHECK(pass_at_k(64, 32, 2) == Approx(1.0 - (32.0 * 31.0) / (64.0 * 63.0)).epsilon(1e-13));
  CHECK(pass_at_k(64, 32, 2) == Approx(0.753968).margin(1e-6));
  CHECK(pass_at_k(10, 3, 1) == Approx(0.3).epsilon(1e-13));
  CHECK_THROWS_AS(pass_at_k(8, 2, 9), std::invalid_argument);
  CHECK_THROWS_AS(pass_at_k(8, 9, 1), std::invalid_argument);
  CHECK_THROWS_AS(pass_at_k(8, 2, 0), std::invalid_argument);

  for (std::size_t c = 0; c <= 64; ++c) {
    double prev = 0.0;
    for (std::size_t k = 1; k <= 64; ++k) {
      const double v = pass_at_k(64, c, k);
      REQUIRE(v >= prev - 1e-15);
      prev = v;
    }
  }
}

TEST_CASE("pass at k equals Monte Carlo subset estimate", "[rollout][property]") {
  Rng rng(2024);
  for (const std::size_t c : {1, 8, 32}) {
    for (const std::size_t k : {1, 8}) {
      std::vector<int> pool(64, 0);
      for (std::size_t i = 0; i < c; ++i) pool[i] = 1;
      std::size_t hits = 0;
      const std::size_t trials = 100000;
      for (std::size_t t = 0; t < trials; ++t) {
        // partial Fisher-Yates: first k entries are a uniform k-subset
        bool any = false;
        for (std::size_t i = 0; i < k; ++i) {
          const std::size_t j = i + rng.below(64 - i);
          std::swap(pool[i], pool[j]);
          any = any || pool[i] == 1;
        }
        hits += any;
      }
      const double mc = static_cast<double>(hits) / static_cast<double>(trials);
      INFO("c=" << c << " k=" << k);
      CHECK(std::fabs(mc - pass_at_k(64, c, k)) < 0.01);
    }
  }
}

TEST_CASE("identification on a hand-built model", "[rollout]") {
  const auto problem = three_plus_four_minus_two();
  const nanolm::Model m(stray_digit_model());
  const auto traj = minimath::verify(problem, TokenSeq{minimath::kFinal, digit_token(5), digit_token(3), kEos});
  REQUIRE_FALSE(traj.correct);

  RolloutConfig cfg;
  cfg.seed = 99;
  const auto prompt = minimath::render_prompt(problem);
  m.counter().reset();
  const auto report = identify_critical(m, problem, traj, cfg);
  CHECK(report.critical_position == 3u);
  CHECK(report.mode == IdentificationMode::both_conditions);
  CHECK(validate_report(report, cfg).empty());
  CHECK(m.counter().value() == report.generated_tokens());

  // exhaustive oracle for each prefix
  for (std::size_t t = 1; t <= traj.tokens.size(); ++t) {
    const TokenSeq prefix(traj.tokens.begin(), traj.tokens.begin() + static_cast<std::ptrdiff_t>(t));
    const double exact = exact_success(m, problem, prompt, prefix, cfg.max_len);
    INFO("position " << t);
    CHECK(std::fabs(report.scores[t - 1] - exact) < 0.25);  // 4 sigma at N = 64
    if (exact == 0.0) CHECK(report.scores[t - 1] == 0.0);
  }
  CHECK(exact_success(m, problem, prompt, {minimath::kFinal}, cfg.max_len) == Approx(0.5).margin(1e-9));

  std::uint64_t analytic = 0;
  for (const auto& row : report.lengths) {
    for (const auto len : row) analytic += len;
  }
  CHECK(report.generated_tokens() == analytic);

  CHECK_THROWS_AS(identify_critical(m, problem, minimath::verify(problem, minimath::render_gold(problem)), cfg),
                  std::invalid_argument);

  SECTION("identification is reproducible and validator catches tampering") {
    const auto again = identify_critical(m, problem, traj, cfg);
    CHECK(again.scores == report.scores);
    CHECK(again.outcomes == report.outcomes);
    auto bad = report;
    bad.scores[0] = 0.9;
    CHECK_FALSE(validate_report(bad, cfg).empty());
    auto moved = report;
    moved.critical_position = 4;
    CHECK_FALSE(validate_report(moved, cfg).empty());
    auto flipped = report;
    flipped.outcomes[2][0] = 1;
    CHECK_FALSE(validate_report(flipped, cfg).empty());
  }

  SECTION("impact experiment") {
    std::unordered_map<std::int64_t, minimath::Problem> problems = {{problem.id, problem}};
    const std::vector<RolloutReport> reports = {report};
    const auto impact = critical_impact_experiment(m, problems, reports, cfg);
    REQUIRE(impact.instances.size() == 1);
    CHECK(impact.instances[0].correct_with == 0);
    CHECK(impact.instances[0].correct_without == 64);  // banning the stray 3 leaves only EOS
    for (std::size_t j = 0; j < impact.ks.size(); ++j) {
      CHECK(impact.with_critical[j] == 0.0);
      CHECK(impact.without_critical[j] == 1.0);
    }
    const std::unordered_map<std::int64_t, minimath::Problem> none;
    CHECK_THROWS_AS(critical_impact_experiment(m, none, reports, cfg), std::invalid_argument);
  }
}

TEST_CASE("rollout config invariants", "[rollout]") {
  RolloutConfig c;
  CHECK_NOTHROW(c.validate());
  c.samples = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = {};
  c.threshold_zero = 0.1;
  c.threshold_tail = 0.05;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = {};
  c.threshold_tail = 1.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  CHECK(parse_mode(mode_name(IdentificationMode::first_condition_only)) ==
        IdentificationMode::first_condition_only);
  CHECK_THROWS_AS(parse_mode("sometimes"), std::invalid_argument);
}

TEST_CASE("stream derivation separates coordinates", "[rollout]") {
  CHECK(rollout_stream(1, 2, 3, 4) == rollout_stream(1, 2, 3, 4));
  CHECK(rollout_stream(1, 2, 3, 4) != rollout_stream(1, 2, 4, 3));
  CHECK(rollout_stream(1, 2, 3, 4) != forced_stream(1, 2, 3, 4));
  CHECK(rollout_stream(1, 2, 3, 4) != rollout_stream(2, 2, 3, 4));
}

TEST_CASE("token analysis", "[rollout]") {
  std::vector<RolloutReport> reports(4);
  reports[0].tokens = {digit_token(7), minimath::kPlus, digit_token(1)};
  reports[0].critical_position = 1;  // "7", number
  reports[1].tokens = {digit_token(2), minimath::kPlus, digit_token(1), minimath::kSemicolon, digit_token(4), digit_token(4), digit_token(4), digit_token(4), digit_token(4)};
  reports[1].critical_position = 9;
  reports[2].tokens = reports[1].tokens;
  reports[2].critical_position = 2;  // "+", operator
  reports[3].tokens = reports[1].tokens;  // no critical position: ignored
  const std::vector<std::optional<std::size_t>> errors = {5, 9, std::nullopt, 1};
  const auto a = token_analysis(reports, errors);
  CHECK(a.total == 3);
  CHECK(a.by_category[2] == 2);  // number
  CHECK(a.by_category[3] == 1);  // operator
  CHECK(a.before == 1);
  CHECK(a.after == 0);
  CHECK(a.same == 1);
  CHECK(a.no_error_position == 1);
  CHECK(a.different_ratio() == Approx(0.5));
}
