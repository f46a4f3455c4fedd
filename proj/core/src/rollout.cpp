// SPDX-License-Identifier: Apache-2.0
#include "ctlab/rollout.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "ctlab/parallel.hpp"

namespace ctlab::rollout {

using minimath::kEos;
using minimath::kPad;

void RolloutConfig::validate() const {
  if (samples < 1) throw std::invalid_argument("rollout samples must be >= 1");
  if (max_len < 1) throw std::invalid_argument("max completion length must be >= 1");
  if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be > 0");
  if (!(threshold_zero >= 0.0 && threshold_zero <= threshold_tail && threshold_tail < 1.0)) {
    throw std::invalid_argument("thresholds must satisfy 0 <= zero <= tail < 1");
  }
}

TokenId sample_token(std::span<const double> log_probs, double temperature, Rng& rng,
                     std::optional<TokenId> banned) {
  if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be > 0");
  auto allowed = [&](std::size_t v) {
    const auto id = static_cast<TokenId>(v);
    return id != kPad && (!banned || id != *banned);
  };
  double top = -std::numeric_limits<double>::infinity();
  for (std::size_t v = 0; v < log_probs.size(); ++v) {
    if (allowed(v)) top = std::max(top, log_probs[v]);
  }
  if (!std::isfinite(top)) throw UnreplaceableTokenError("no token left to sample");

  thread_local std::vector<double> weights;
  weights.assign(log_probs.size(), 0.0);
  double total = 0.0;
  for (std::size_t v = 0; v < log_probs.size(); ++v) {
    if (!allowed(v)) continue;
    weights[v] = std::exp((log_probs[v] - top) / temperature);
    total += weights[v];
  }
  const double r = rng.uniform() * total;
  double acc = 0.0;
  TokenId last = kPad;
  for (std::size_t v = 0; v < weights.size(); ++v) {
    if (weights[v] <= 0.0) continue;
    acc += weights[v];
    last = static_cast<TokenId>(v);
    if (r < acc) return last;
  }
  return last;
}

TokenId greedy_token(std::span<const double> log_probs) {
  TokenId best = kPad;
  double best_lp = -std::numeric_limits<double>::infinity();
  for (std::size_t v = 0; v < log_probs.size(); ++v) {
    if (static_cast<TokenId>(v) == kPad) continue;
    if (log_probs[v] > best_lp) {
      best_lp = log_probs[v];
      best = static_cast<TokenId>(v);
    }
  }
  return best;
}

namespace {

template <typename Pick>
TokenSeq decode(const nanolm::Model& model, std::span<const TokenId> prefix,
                std::size_t max_new, Pick&& pick) {
  if (prefix.empty()) throw std::invalid_argument("decode: empty prefix");
  TokenSeq out;
  if (prefix.back() == kEos) return out;
  const std::size_t K = model.config().context;
  // K PADs in front so the last K entries are always the padded context.
  TokenSeq buf(K, kPad);
  buf.insert(buf.end(), prefix.begin(), prefix.end());
  std::vector<double> lp(model.vocab_size());
  while (out.size() < max_new) {
    model.log_probs(std::span<const TokenId>(buf).last(K), lp);
    const TokenId next = pick(std::span<const double>(lp));
    out.push_back(next);
    buf.push_back(next);
    if (next == kEos) break;
  }
  return out;
}

}  // namespace

TokenSeq sample_completion(const nanolm::Model& model, std::span<const TokenId> prefix,
                           Rng& rng, std::size_t max_new, double temperature) {
  if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be > 0");
  return decode(model, prefix, max_new,
                [&](std::span<const double> lp) { return sample_token(lp, temperature, rng); });
}

TokenSeq greedy_completion(const nanolm::Model& model, std::span<const TokenId> prefix,
                           std::size_t max_new) {
  return decode(model, prefix, max_new, [](std::span<const double> lp) { return greedy_token(lp); });
}

std::string_view mode_name(IdentificationMode mode) {
  switch (mode) {
    case IdentificationMode::both_conditions: return "both_conditions";
    case IdentificationMode::first_condition_only: return "first_condition_only";
    case IdentificationMode::not_found: return "not_found";
  }
  return "not_found";
}

IdentificationMode parse_mode(std::string_view name) {
  if (name == "both_conditions") return IdentificationMode::both_conditions;
  if (name == "first_condition_only") return IdentificationMode::first_condition_only;
  if (name == "not_found") return IdentificationMode::not_found;
  throw std::invalid_argument("unknown identification mode: " + std::string(name));
}

CriticalRuleResult apply_critical_rule(std::span<const double> scores, double threshold_zero,
                                       double threshold_tail) {
  // Scan from the back: tail_ok[t] <=> every score after t is below the tail
  // threshold.
  const std::size_t T = scores.size();
  std::optional<std::size_t> both;
  bool tail_ok = true;
  for (std::size_t i = T; i-- > 0;) {
    if (tail_ok && scores[i] <= threshold_zero) both = i + 1;
    tail_ok = tail_ok && scores[i] < threshold_tail;
  }
  if (both) return {both, IdentificationMode::both_conditions};
  for (std::size_t i = 0; i < T; ++i) {
    if (scores[i] <= threshold_zero) return {i + 1, IdentificationMode::first_condition_only};
  }
  return {std::nullopt, IdentificationMode::not_found};
}

std::uint64_t RolloutReport::generated_tokens() const {
  std::uint64_t total = 0;
  for (const auto& row : lengths) {
    for (const auto l : row) total += l;
  }
  return total;
}

std::uint64_t rollout_stream(std::uint64_t seed, std::int64_t problem_id, std::size_t position,
                             std::size_t sample) {
  return derive_seed(seed, Stage::rollout, static_cast<std::uint64_t>(problem_id), position,
                     sample);
}

std::uint64_t forced_stream(std::uint64_t seed, std::int64_t problem_id, std::size_t position,
                            std::size_t sample) {
  return derive_seed(seed, Stage::forced, static_cast<std::uint64_t>(problem_id), position,
                     sample);
}

namespace {

TokenSeq concat(std::span<const TokenId> a, std::span<const TokenId> b) {
  TokenSeq out(a.begin(), a.end());
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

struct RolloutOutcome {
  bool correct = false;
  std::uint32_t length = 0;
};

// Completion from prompt + tokens[0, kept) continued by `rng`, verified.
RolloutOutcome roll(const nanolm::Model& model, const minimath::Problem& problem,
                    const TokenSeq& prompt, std::span<const TokenId> kept,
                    const RolloutConfig& config, Rng& rng) {
  const auto prefix = concat(prompt, kept);
  const std::size_t budget = config.max_len > kept.size() ? config.max_len - kept.size() : 0;
  const auto cont = sample_completion(model, prefix, rng, budget, config.temperature);
  const auto full = concat(kept, cont);
  return {minimath::verify(problem, full).correct, static_cast<std::uint32_t>(cont.size())};
}

}  // namespace

RolloutReport identify_critical(const nanolm::Model& model, const minimath::Problem& problem,
                                const minimath::Trajectory& trajectory,
                                const RolloutConfig& config) {
  config.validate();
  if (trajectory.correct) {
    throw std::invalid_argument("identify_critical requires an incorrect trajectory");
  }
  const auto prompt = minimath::render_prompt(problem);
  const std::size_t T = trajectory.tokens.size();
  const std::span<const TokenId> toks(trajectory.tokens);

  RolloutReport report;
  report.problem_id = problem.id;
  report.tokens = trajectory.tokens;
  report.samples = config.samples;
  report.outcomes.assign(T, std::vector<std::uint8_t>(config.samples, 0));
  report.lengths.assign(T, std::vector<std::uint32_t>(config.samples, 0));
  report.scores.assign(T, 0.0);

  parallel_for(T, [&](std::size_t i) {
    const std::size_t position = i + 1;
    std::size_t correct = 0;
    for (std::size_t s = 0; s < config.samples; ++s) {
      Rng rng(rollout_stream(config.seed, problem.id, position, s));
      const auto r = roll(model, problem, prompt, toks.first(position), config, rng);
      report.outcomes[i][s] = r.correct ? 1 : 0;
      report.lengths[i][s] = r.length;
      correct += r.correct ? 1 : 0;
    }
    report.scores[i] = static_cast<double>(correct) / static_cast<double>(config.samples);
  });

  const auto rule = apply_critical_rule(report.scores, config.threshold_zero, config.threshold_tail);
  report.critical_position = rule.position;
  report.mode = rule.mode;
  return report;
}

std::vector<std::string> validate_report(const RolloutReport& report,
                                         const RolloutConfig& config) {
  std::vector<std::string> errors;
  const std::size_t T = report.tokens.size();
  if (report.scores.size() != T || report.outcomes.size() != T || report.lengths.size() != T) {
    errors.push_back("per-position arrays do not match trajectory length");
    return errors;
  }
  for (std::size_t t = 0; t < T; ++t) {
    if (report.outcomes[t].size() != report.samples || report.lengths[t].size() != report.samples) {
      errors.push_back("position " + std::to_string(t + 1) + ": wrong number of rollouts");
      continue;
    }
    std::size_t c = 0;
    for (const auto o : report.outcomes[t]) {
      if (o > 1) errors.push_back("position " + std::to_string(t + 1) + ": outcome not 0/1");
      c += o;
    }
    const double expected = static_cast<double>(c) / static_cast<double>(report.samples);
    if (report.scores[t] != expected) {
      errors.push_back("position " + std::to_string(t + 1) + ": score disagrees with records");
    }
  }

  // Brute force over candidate positions.
  auto zero = [&](std::size_t t) { return report.scores[t - 1] <= config.threshold_zero; };
  auto tail = [&](std::size_t t) {
    for (std::size_t u = t + 1; u <= T; ++u) {
      if (!(report.scores[u - 1] < config.threshold_tail)) return false;
    }
    return true;
  };
  std::optional<std::size_t> both, first;
  for (std::size_t t = 1; t <= T; ++t) {
    if (zero(t) && tail(t) && !both) both = t;
    if (zero(t) && !first) first = t;
  }
  switch (report.mode) {
    case IdentificationMode::both_conditions:
      if (!both || report.critical_position != both) {
        errors.push_back("both_conditions position is not the smallest qualifying index");
      }
      break;
    case IdentificationMode::first_condition_only:
      if (both) errors.push_back("fallback used although a both_conditions index exists");
      if (!first || report.critical_position != first) {
        errors.push_back("fallback position is not the first zero-score index");
      }
      break;
    case IdentificationMode::not_found:
      if (first) errors.push_back("not_found although a zero-score index exists");
      if (report.critical_position) errors.push_back("not_found carries a position");
      break;
  }
  return errors;
}

std::vector<double> mask_and_renormalize(std::span<const double> probs, TokenId banned,
                                         std::optional<TokenId> pad) {
  std::vector<double> out(probs.begin(), probs.end());
  double total = 0.0;
  for (std::size_t v = 0; v < out.size(); ++v) {
    if (pad && static_cast<TokenId>(v) == *pad) {
      out[v] = 0.0;
      continue;
    }
    total += out[v];
  }
  if (banned < 0 || static_cast<std::size_t>(banned) >= out.size()) {
    throw std::out_of_range("banned token out of range");
  }
  const double remaining = total - out[static_cast<std::size_t>(banned)];
  if (!(remaining > 1e-12 * total)) {
    throw UnreplaceableTokenError("banned token holds all remaining probability mass");
  }
  out[static_cast<std::size_t>(banned)] = 0.0;
  double sum = 0.0;
  for (const double p : out) sum += p;
  for (auto& p : out) p /= sum;
  return out;
}

std::vector<double> forced_alternative_distribution(const nanolm::Model& model,
                                                    std::span<const TokenId> context,
                                                    TokenId banned) {
  return mask_and_renormalize(model.probs(context), banned, kPad);
}

double pass_at_k(std::size_t n, std::size_t c, std::size_t k) {
  if (c > n) throw std::invalid_argument("pass_at_k: c > n");
  if (k < 1 || k > n) throw std::invalid_argument("pass_at_k: k must lie in [1, n]");
  if (n - c < k) return 1.0;
  double log_ratio = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    log_ratio += std::log(static_cast<double>(n - c - i)) - std::log(static_cast<double>(n - i));
  }
  return 1.0 - std::exp(log_ratio);
}

std::size_t PassAtKReport::used_instances() const {
  return static_cast<std::size_t>(std::count_if(
      instances.begin(), instances.end(), [](const ImpactInstance& i) { return !i.unreplaceable; }));
}

PassAtKReport critical_impact_experiment(
    const nanolm::Model& model,
    const std::unordered_map<std::int64_t, minimath::Problem>& problems,
    std::span<const RolloutReport> reports, const RolloutConfig& config,
    std::span<const std::size_t> ks) {
  config.validate();
  const std::size_t n = config.samples;
  for (const auto k : ks) {
    if (k < 1 || k > n) throw std::invalid_argument("k values must lie in [1, n]");
  }

  std::vector<const RolloutReport*> todo;
  for (const auto& r : reports) {
    if (r.critical_position) todo.push_back(&r);
  }

  PassAtKReport out;
  out.ks.assign(ks.begin(), ks.end());
  out.n = n;
  out.instances.resize(todo.size());
  const std::size_t K = model.config().context;

  parallel_for(todo.size(), [&](std::size_t idx) {
    const auto& report = *todo[idx];
    const auto it = problems.find(report.problem_id);
    if (it == problems.end()) {
      throw std::invalid_argument("impact: unknown problem id " + std::to_string(report.problem_id));
    }
    const auto& problem = it->second;
    const std::size_t t = *report.critical_position;
    const std::span<const TokenId> toks(report.tokens);
    const auto prompt = minimath::render_prompt(problem);

    ImpactInstance inst;
    inst.problem_id = report.problem_id;
    inst.critical_position = t;
    inst.mode = report.mode;

    for (std::size_t s = 0; s < n; ++s) {
      Rng rng(rollout_stream(config.seed, problem.id, t, s));
      inst.correct_with += roll(model, problem, prompt, toks.first(t), config, rng).correct;
    }

    const auto before = toks.first(t - 1);
    const auto prefix = concat(prompt, before);
    const TokenId banned = toks[t - 1];
    const auto lp = model.log_probs(nanolm::make_context(prefix, prefix.size(), K));
    try {
      std::vector<double> p(lp.size());
      for (std::size_t v = 0; v < lp.size(); ++v) p[v] = std::exp(lp[v]);
      (void)mask_and_renormalize(p, banned, kPad);
    } catch (const UnreplaceableTokenError&) {
      inst.unreplaceable = true;
    }
    if (!inst.unreplaceable) {
      const std::size_t budget = config.max_len > before.size() ? config.max_len - before.size() : 0;
      for (std::size_t s = 0; s < n && budget > 0; ++s) {
        Rng rng(forced_stream(config.seed, problem.id, t, s));
        TokenSeq kept(before.begin(), before.end());
        kept.push_back(sample_token(lp, config.temperature, rng, banned));
        const auto full_prefix = concat(prompt, kept);
        const auto cont = sample_completion(model, full_prefix, rng, budget - 1, config.temperature);
        kept.insert(kept.end(), cont.begin(), cont.end());
        inst.correct_without += minimath::verify(problem, kept).correct;
      }
    }
    out.instances[idx] = inst;
  });

  out.with_critical.assign(ks.size(), 0.0);
  out.without_critical.assign(ks.size(), 0.0);
  const std::size_t used = out.used_instances();
  if (used == 0) return out;
  for (const auto& inst : out.instances) {
    if (inst.unreplaceable) continue;
    for (std::size_t j = 0; j < ks.size(); ++j) {
      out.with_critical[j] += pass_at_k(n, inst.correct_with, ks[j]);
      out.without_critical[j] += pass_at_k(n, inst.correct_without, ks[j]);
    }
  }
  for (std::size_t j = 0; j < ks.size(); ++j) {
    out.with_critical[j] /= static_cast<double>(used);
    out.without_critical[j] /= static_cast<double>(used);
  }
  return out;
}

double TokenAnalysis::different_ratio() const {
  const std::size_t known = before + after + same;
  if (known == 0) return 0.0;
  return static_cast<double>(before + after) / static_cast<double>(known);
}

TokenAnalysis token_analysis(std::span<const RolloutReport> reports,
                             std::span<const std::optional<std::size_t>> error_positions) {
  if (reports.size() != error_positions.size()) {
    throw std::invalid_argument("token_analysis: one error position per report required");
  }
  const auto& vocab = minimath::Vocabulary::instance();
  TokenAnalysis out;
  for (std::size_t i = 0; i < reports.size(); ++i) {
    const auto& r = reports[i];
    if (!r.critical_position) continue;
    ++out.total;
    const auto cat = vocab.category(r.tokens.at(*r.critical_position - 1));
    const auto slot = std::find(minimath::kAllCategories.begin(),
                                minimath::kAllCategories.end(), cat) -
                      minimath::kAllCategories.begin();
    ++out.by_category[static_cast<std::size_t>(slot)];
    const auto& err = error_positions[i];
    if (!err) {
      ++out.no_error_position;
    } else if (*r.critical_position < *err) {
      ++out.before;
    } else if (*r.critical_position > *err) {
      ++out.after;
    } else {
      ++out.same;
    }
  }
  return out;
}

}  // namespace ctlab::rollout
