// SPDX-License-Identifier: Apache-2.0
#include "ctlab/contrastive.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

#include "ctlab/parallel.hpp"
#include "ctlab/rollout.hpp"

namespace ctlab::contrastive {

std::vector<minimath::Trajectory> build_trajectory_pool(
    const nanolm::Model& model, std::span<const minimath::Problem> problems,
    const SamplingConfig& config) {
  const std::size_t N = config.samples_per_problem;
  std::vector<minimath::Trajectory> pool(problems.size() * N);
  parallel_for(problems.size(), [&](std::size_t i) {
    const auto& problem = problems[i];
    const auto prompt = minimath::render_prompt(problem);
    for (std::size_t j = 0; j < N; ++j) {
      Rng rng(derive_seed(config.seed, Stage::pool, static_cast<std::uint64_t>(problem.id), j));
      const auto completion =
          rollout::sample_completion(model, prompt, rng, config.max_len, config.temperature);
      pool[i * N + j] = minimath::verify(problem, completion);
    }
  });
  return pool;
}

NegativeSelection select_negatives(std::span<const minimath::Trajectory> incorrect, Rng& rng) {
  if (incorrect.empty()) throw std::invalid_argument("select_negatives: no incorrect trajectories");

  // Members per answer, in input order.
  std::map<std::optional<int>, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < incorrect.size(); ++i) {
    members[incorrect[i].predicted_answer].push_back(i);
  }

  struct Ranked {
    AnswerGroup group;
    const std::vector<std::size_t>* idx;
  };
  std::vector<Ranked> ranked;
  for (const auto& [answer, idx] : members) ranked.push_back({{answer, idx.size()}, &idx});
  std::stable_sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) {
    if (a.group.count != b.group.count) return a.group.count > b.group.count;
    if (a.group.answer.has_value() != b.group.answer.has_value()) return a.group.answer.has_value();
    return a.group.answer < b.group.answer;
  });

  const std::size_t total = incorrect.size();
  const std::size_t needed = (total + 1) / 2;  // ceil(total / 2)
  NegativeSelection out;
  std::size_t covered = 0;
  for (const auto& r : ranked) {
    out.groups.push_back(r.group);
    if (covered < needed) {
      covered += r.group.count;
      ++out.selected_groups;
      const auto pick = rng.below(r.idx->size());
      out.trajectories.push_back(incorrect[(*r.idx)[pick]]);
    }
  }
  return out;
}

std::size_t CorpusSplit::positive_count() const {
  return static_cast<std::size_t>(std::count_if(problems.begin(), problems.end(),
                                                [](const ProblemSplit& p) { return p.positive.has_value(); }));
}

std::size_t CorpusSplit::negative_count() const {
  std::size_t n = 0;
  for (const auto& p : problems) n += p.negatives.size();
  return n;
}

CorpusSplit build_corpus_split(std::span<const minimath::Problem> problems,
                               std::span<const minimath::Trajectory> pool, std::uint64_t seed) {
  std::unordered_map<std::int64_t, std::vector<const minimath::Trajectory*>> by_problem;
  for (const auto& t : pool) by_problem[t.problem_id].push_back(&t);

  CorpusSplit split;
  for (const auto& problem : problems) {
    ProblemSplit ps;
    ps.problem_id = problem.id;
    std::vector<minimath::Trajectory> correct, incorrect;
    if (const auto it = by_problem.find(problem.id); it != by_problem.end()) {
      for (const auto* t : it->second) (t->correct ? correct : incorrect).push_back(*t);
    }
    ps.correct = correct.size();
    ps.incorrect = incorrect.size();
    if (!correct.empty()) {
      Rng rng(derive_seed(seed, Stage::positives, static_cast<std::uint64_t>(problem.id)));
      ps.positive = correct[rng.below(correct.size())];
    }
    if (!incorrect.empty()) {
      Rng rng(derive_seed(seed, Stage::negatives, static_cast<std::uint64_t>(problem.id)));
      auto sel = select_negatives(incorrect, rng);
      ps.negatives = std::move(sel.trajectories);
      ps.answer_table = std::move(sel.groups);
    }
    if (ps.incorrect == 0 && ps.correct > 0) ++split.all_correct;
    if (ps.correct == 0 && ps.incorrect > 0) ++split.all_incorrect;
    split.problems.push_back(std::move(ps));
  }
  return split;
}

namespace {

std::unordered_map<std::int64_t, const minimath::Problem*> index(
    std::span<const minimath::Problem> problems) {
  std::unordered_map<std::int64_t, const minimath::Problem*> out;
  for (const auto& p : problems) out[p.id] = &p;
  return out;
}

const minimath::Problem& lookup(
    const std::unordered_map<std::int64_t, const minimath::Problem*>& idx, std::int64_t id) {
  const auto it = idx.find(id);
  if (it == idx.end()) throw std::invalid_argument("unknown problem id " + std::to_string(id));
  return *it->second;
}

}  // namespace

std::vector<nanolm::SequencePair> positive_corpus(std::span<const minimath::Problem> problems,
                                                  const CorpusSplit& split) {
  const auto idx = index(problems);
  std::vector<nanolm::SequencePair> out;
  for (const auto& ps : split.problems) {
    if (!ps.positive) continue;
    out.push_back({minimath::render_prompt(lookup(idx, ps.problem_id)), ps.positive->tokens});
  }
  return out;
}

std::vector<nanolm::SequencePair> negative_corpus(std::span<const minimath::Problem> problems,
                                                  const CorpusSplit& split) {
  const auto idx = index(problems);
  std::vector<nanolm::SequencePair> out;
  for (const auto& ps : split.problems) {
    for (const auto& neg : ps.negatives) {
      out.push_back({minimath::render_prompt(lookup(idx, ps.problem_id)), neg.tokens});
    }
  }
  return out;
}

std::vector<double> contrastive_distribution(std::span<const double> log_pos,
                                             std::span<const double> log_neg, double beta,
                                             std::optional<TokenId> excluded) {
  if (log_pos.size() != log_neg.size()) {
    throw VocabularyMismatchError("contrastive distribution: vocabulary sizes differ");
  }
  if (!(beta >= 0.0)) throw std::invalid_argument("beta must be >= 0");
  const std::size_t V = log_pos.size();
  std::vector<double> w(V, -std::numeric_limits<double>::infinity());
  double top = -std::numeric_limits<double>::infinity();
  for (std::size_t v = 0; v < V; ++v) {
    if (excluded && static_cast<TokenId>(v) == *excluded) continue;
    w[v] = (1.0 + beta) * log_pos[v] - beta * log_neg[v];
    top = std::max(top, w[v]);
  }
  double z = 0.0;
  for (std::size_t v = 0; v < V; ++v) {
    if (excluded && static_cast<TokenId>(v) == *excluded) continue;
    z += std::exp(w[v] - top);
  }
  const double log_z = top + std::log(z);
  std::vector<double> s(V, 0.0);
  for (std::size_t v = 0; v < V; ++v) {
    if (excluded && static_cast<TokenId>(v) == *excluded) continue;
    s[v] = std::exp(w[v] - log_z);
  }
  return s;
}

std::vector<double> contrastive_distribution_from_probs(std::span<const double> pos,
                                                        std::span<const double> neg,
                                                        double beta,
                                                        std::optional<TokenId> excluded) {
  std::vector<double> lp(pos.size()), ln(neg.size());
  std::transform(pos.begin(), pos.end(), lp.begin(), nanolm::safe_log);
  std::transform(neg.begin(), neg.end(), ln.begin(), nanolm::safe_log);
  return contrastive_distribution(lp, ln, beta, excluded);
}

TokenScoreVector ce_scores(const nanolm::Model& positive, const nanolm::Model& negative,
                           std::int64_t problem_id, std::span<const TokenId> prompt,
                           std::span<const TokenId> completion, double beta) {
  if (positive.vocab_size() != negative.vocab_size()) {
    throw VocabularyMismatchError("positive and negative models have different vocabularies");
  }
  if (positive.config().context != negative.config().context) {
    throw VocabularyMismatchError("positive and negative models have different context windows");
  }
  if (!(beta >= 0.0)) throw std::invalid_argument("beta must be >= 0");

  const std::size_t K = positive.config().context;
  TokenSeq seq(prompt.begin(), prompt.end());
  seq.insert(seq.end(), completion.begin(), completion.end());
  std::vector<double> lp(positive.vocab_size()), ln(negative.vocab_size());

  TokenScoreVector out;
  out.problem_id = problem_id;
  out.tokens.assign(completion.begin(), completion.end());
  out.beta = beta;
  out.scores.reserve(completion.size());
  constexpr double kBelowOne = 1.0 - std::numeric_limits<double>::epsilon() / 2;
  for (std::size_t t = 0; t < completion.size(); ++t) {
    const auto ctx = nanolm::make_context(seq, prompt.size() + t, K);
    positive.log_probs(ctx, lp);
    negative.log_probs(ctx, ln);
    const auto s = contrastive_distribution(lp, ln, beta, minimath::kPad);
    const double st = s.at(static_cast<std::size_t>(completion[t]));
    // Rounding can land on the closed boundary; keep s_t strictly inside.
    out.scores.push_back(std::clamp(st, std::numeric_limits<double>::min(), kBelowOne));
  }
  return out;
}

namespace {

double log_normal_pdf(double x, double mu, double sigma) {
  const double z = (x - mu) / sigma;
  return -0.5 * z * z - std::log(sigma) - 0.5 * std::log(2.0 * std::numbers::pi);
}

}  // namespace

GaussianCheck ce_gaussian_mean(double mu_p, double mu_n, double sigma, double beta,
                               double tolerance) {
  if (!(sigma > 0.0)) throw std::invalid_argument("sigma must be > 0");
  if (!(beta >= 0.0)) throw std::invalid_argument("beta must be >= 0");

  GaussianCheck out;
  out.mean = mu_p + beta * (mu_p - mu_n);

  constexpr std::size_t kIntervals = 6000;  // even, for Simpson
  const double lo = out.mean - 12.0 * sigma;
  const double hi = out.mean + 12.0 * sigma;
  const double step = (hi - lo) / static_cast<double>(kIntervals);
  out.grid_points = kIntervals + 1;

  std::vector<double> log_u(out.grid_points);
  double top = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < out.grid_points; ++i) {
    const double x = lo + step * static_cast<double>(i);
    log_u[i] = (1.0 + beta) * log_normal_pdf(x, mu_p, sigma) - beta * log_normal_pdf(x, mu_n, sigma);
    top = std::max(top, log_u[i]);
  }
  double integral = 0.0;
  for (std::size_t i = 0; i < out.grid_points; ++i) {
    const double w = (i == 0 || i == kIntervals) ? 1.0 : (i % 2 == 1 ? 4.0 : 2.0);
    integral += w * std::exp(log_u[i] - top);
  }
  integral *= step / 3.0;
  const double log_z = top + std::log(integral);

  for (std::size_t i = 0; i < out.grid_points; ++i) {
    const double x = lo + step * static_cast<double>(i);
    const double numeric = std::exp(log_u[i] - log_z);
    const double closed = std::exp(log_normal_pdf(x, out.mean, sigma));
    out.max_abs_error = std::max(out.max_abs_error, std::abs(numeric - closed));
    if (i == kIntervals / 2) out.density_at_mean = numeric;
  }
  out.passed = out.max_abs_error <= tolerance;
  return out;
}

CostModelResult cost_model(const CostModelInput& input) {
  if (!(input.avg_rollout_tokens > 0.0)) throw std::invalid_argument("avg rollout tokens must be > 0");
  if (input.sft_corpus_size == 0) throw std::invalid_argument("sft corpus size must be > 0");
  if (input.sft_epochs == 0) throw std::invalid_argument("sft epochs must be > 0");
  CostModelResult r;
  const auto n = static_cast<double>(input.n);
  r.rollout_cost = input.avg_rollout_tokens * n;
  r.contrastive_cost =
      static_cast<double>(input.sft_epochs) * static_cast<double>(input.sft_corpus_size) + 2.0 * n;
  if (input.n > 0) r.ratio = r.contrastive_cost / r.rollout_cost;
  return r;
}

CostModelInput cost_preset(std::string_view name, std::uint64_t n) {
  CostModelInput in;
  in.n = n;
  in.sft_epochs = 3;
  if (name == "gsm8k") {
    in.avg_rollout_tokens = 581'425;
    in.sft_corpus_size = 26'131;
  } else if (name == "math") {
    in.avg_rollout_tokens = 7'613'942;
    in.sft_corpus_size = 68'391;
  } else {
    throw std::invalid_argument("unknown cost preset: " + std::string(name));
  }
  return in;
}

namespace {

std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

}  // namespace

std::string format_cost_table(std::span<const CostRow> rows) {
  std::ostringstream out;
  char line[256];
  std::snprintf(line, sizeof line, "%-12s %10s %16s %18s %16s %14s %10s\n", "label", "n",
                "rollout/resp", "sft_corpus x ep", "rollout_fp", "contrastive_fp", "ratio");
  out << line;
  for (const auto& r : rows) {
    const std::string ratio =
        r.result.ratio ? fmt("%.3f%%", *r.result.ratio * 100.0) : std::string("undefined");
    std::snprintf(line, sizeof line, "%-12s %10llu %16.1f %12llu x %-3llu %16.0f %14.0f %10s\n",
                  r.label.c_str(), static_cast<unsigned long long>(r.input.n),
                  r.input.avg_rollout_tokens,
                  static_cast<unsigned long long>(r.input.sft_corpus_size),
                  static_cast<unsigned long long>(r.input.sft_epochs), r.result.rollout_cost,
                  r.result.contrastive_cost, ratio.c_str());
    out << line;
  }
  return out.str();
}

std::string format_cost_csv(std::span<const CostRow> rows) {
  std::ostringstream out;
  out << "label,n,avg_rollout_tokens,sft_corpus_size,sft_epochs,rollout_forward_passes,"
         "contrastive_forward_passes,ratio\n";
  for (const auto& r : rows) {
    out << r.label << ',' << r.input.n << ',' << fmt("%.6f", r.input.avg_rollout_tokens) << ','
        << r.input.sft_corpus_size << ',' << r.input.sft_epochs << ','
        << fmt("%.0f", r.result.rollout_cost) << ',' << fmt("%.0f", r.result.contrastive_cost)
        << ',' << (r.result.ratio ? fmt("%.9e", *r.result.ratio) : std::string("undefined"))
        << '\n';
  }
  return out.str();
}

}  // namespace ctlab::contrastive
