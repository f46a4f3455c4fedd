// SPDX-License-Identifier: Apache-2.0
#include "ctlab/prefopt.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <unordered_map>

#include "ctlab/parallel.hpp"
#include "ctlab/rng.hpp"

namespace ctlab::prefopt {

std::string_view method_name(Method method) {
  switch (method) {
    case Method::dpo: return "dpo";
    case Method::rpo: return "rpo";
    case Method::cdpo: return "cdpo";
  }
  return "?";
}

Method parse_method(std::string_view name) {
  if (name == "dpo") return Method::dpo;
  if (name == "rpo") return Method::rpo;
  if (name == "cdpo") return Method::cdpo;
  throw std::invalid_argument("unknown preference method: " + std::string(name));
}

double PrefOptConfig::effective_learning_rate() const {
  return method == Method::cdpo ? learning_rate * cdpo_lr_multiplier : learning_rate;
}

void PrefOptConfig::validate() const {
  if (!(gamma > 0.0)) throw std::invalid_argument("gamma must be > 0");
  if (!(rpo_alpha >= 0.0)) throw std::invalid_argument("rpo_alpha must be >= 0");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("learning rate must be > 0");
  if (!(cdpo_lr_multiplier > 0.0)) throw std::invalid_argument("cdpo lr multiplier must be > 0");
  if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("batch size must be >= 1");
}

namespace {

void check_scores(std::span<const double> scores, std::size_t length) {
  if (scores.size() != length) {
    throw std::invalid_argument("score vector length " + std::to_string(scores.size()) +
                                " does not match completion length " + std::to_string(length));
  }
  for (const double s : scores) {
    if (!(s >= 0.0 && s <= 1.0)) throw std::invalid_argument("token score outside [0, 1]");
  }
}

template <typename T>
std::vector<double> log_ratios(const nanolm::BasicParams<T>& policy,
                               const nanolm::BasicParams<T>& ref,
                               std::span<const TokenId> prompt,
                               std::span<const TokenId> completion) {
  auto lp = nanolm::sequence_log_probs(policy, prompt, completion);
  const auto lr = nanolm::sequence_log_probs(ref, prompt, completion);
  for (std::size_t t = 0; t < lp.size(); ++t) lp[t] -= lr[t];
  return lp;
}

// sigmoid(-m), stable for both signs.
double sigmoid_neg(double m) {
  if (m >= 0.0) {
    const double e = std::exp(-m);
    return e / (1.0 + e);
  }
  return 1.0 / (1.0 + std::exp(m));
}

}  // namespace

double margin_loss(double margin) {
  if (margin >= 0.0) return std::log1p(std::exp(-margin));
  return -margin + std::log1p(std::exp(margin));
}

template <typename T>
double implicit_reward(const nanolm::BasicParams<T>& policy, const nanolm::BasicParams<T>& ref,
                       std::span<const TokenId> prompt, std::span<const TokenId> completion,
                       double gamma) {
  double sum = 0.0;
  for (const double x : log_ratios(policy, ref, prompt, completion)) sum += x;
  return gamma * sum;
}

template <typename T>
double weighted_reward(const nanolm::BasicParams<T>& policy, const nanolm::BasicParams<T>& ref,
                       std::span<const TokenId> prompt, std::span<const TokenId> completion,
                       std::span<const double> scores, double gamma) {
  check_scores(scores, completion.size());
  const auto r = log_ratios(policy, ref, prompt, completion);
  double sum = 0.0;
  for (std::size_t t = 0; t < r.size(); ++t) sum += (1.0 - scores[t]) * r[t];
  return gamma * sum;
}

template <typename T>
ReferenceLogProbs reference_log_probs(const nanolm::BasicParams<T>& ref,
                                      const PreferencePair& pair) {
  return {nanolm::sequence_log_probs(ref, pair.prompt, pair.chosen),
          nanolm::sequence_log_probs(ref, pair.prompt, pair.rejected)};
}

template <typename T>
PrefLoss loss_and_grad(Method method, const nanolm::BasicParams<T>& policy,
                       std::span<const PreferencePair> batch,
                       std::span<const ReferenceLogProbs> refs, const PrefOptConfig& config) {
  if (batch.empty()) throw std::invalid_argument("preference loss: empty batch");
  if (refs.size() != batch.size()) {
    throw std::invalid_argument("preference loss: reference cache does not match batch");
  }
  for (const auto& pair : batch) {
    if (pair.chosen.empty() || pair.rejected.empty()) {
      throw std::invalid_argument("preference loss: empty completion");
    }
    if (method == Method::cdpo) {
      if (!pair.rejected_scores) throw std::invalid_argument("cdpo requires scores on every pair");
      check_scores(*pair.rejected_scores, pair.rejected.size());
    }
  }

  const auto& cfg = policy.config;
  const std::size_t K = cfg.context;
  const double B = static_cast<double>(batch.size());
  std::size_t chosen_tokens = 0;
  for (const auto& pair : batch) chosen_tokens += pair.chosen.size();
  const double nll_coeff =
      method == Method::rpo ? config.rpo_alpha / static_cast<double>(chosen_tokens) : 0.0;

  struct PairResult {
    double margin = 0.0;
    double chosen_nll = 0.0;
    double g = 0.0;
    std::vector<double> w;
    std::vector<nanolm::Activation> act_c, act_r;
  };
  std::vector<PairResult> results(batch.size());
  nanolm::GradientAccumulator<T> acc(policy);

  parallel_for(batch.size(), [&](std::size_t i) {
    const auto& pair = batch[i];
    const auto& ref = refs[i];
    if (ref.chosen.size() != pair.chosen.size() || ref.rejected.size() != pair.rejected.size()) {
      throw std::invalid_argument("preference loss: reference cache length mismatch");
    }
    auto seq_c = pair.prompt;
    seq_c.insert(seq_c.end(), pair.chosen.begin(), pair.chosen.end());
    auto seq_r = pair.prompt;
    seq_r.insert(seq_r.end(), pair.rejected.begin(), pair.rejected.end());

    auto& out = results[i];
    double phi_c = 0.0, phi_r = 0.0, nll = 0.0;
    for (std::size_t t = 0; t < pair.chosen.size(); ++t) {
      out.act_c.push_back(acc.activate(nanolm::make_context(seq_c, pair.prompt.size() + t, K)));
      const double lp = out.act_c.back().log_probs.at(static_cast<std::size_t>(pair.chosen[t]));
      phi_c += lp - ref.chosen[t];
      nll -= lp;
    }
    out.w.assign(pair.rejected.size(), 1.0);
    if (method == Method::cdpo) {
      for (std::size_t t = 0; t < out.w.size(); ++t) out.w[t] = 1.0 - (*pair.rejected_scores)[t];
    }
    for (std::size_t t = 0; t < pair.rejected.size(); ++t) {
      out.act_r.push_back(acc.activate(nanolm::make_context(seq_r, pair.prompt.size() + t, K)));
      const double lp = out.act_r.back().log_probs.at(static_cast<std::size_t>(pair.rejected[t]));
      phi_r += out.w[t] * (lp - ref.rejected[t]);
    }
    out.margin = config.gamma * phi_c - config.gamma * phi_r;
    out.chosen_nll = nll;
    // d(-log sigmoid(m))/dm = -sigmoid(-m)
    out.g = sigmoid_neg(out.margin) * config.gamma / B;
  });

  PrefLoss out;
  double pref = 0.0, nll = 0.0, margins = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    auto& r = results[i];
    pref += margin_loss(r.margin);
    nll += r.chosen_nll;
    margins += r.margin;
    for (std::size_t t = 0; t < r.act_c.size(); ++t) {
      acc.add(r.act_c[t], batch[i].chosen[t], -r.g - nll_coeff);
    }
    for (std::size_t t = 0; t < r.act_r.size(); ++t) {
      acc.add(r.act_r[t], batch[i].rejected[t], r.g * r.w[t]);
    }
    r.act_c.clear();
    r.act_r.clear();
  }
  out.grad = acc.take();
  out.loss = pref / B;
  if (method == Method::rpo) out.loss += nll_coeff * nll;
  out.mean_margin = margins / B;
  return out;
}

template <typename T>
PrefLoss loss_and_grad(Method method, const nanolm::BasicParams<T>& policy,
                       const nanolm::BasicParams<T>& ref, std::span<const PreferencePair> batch,
                       const PrefOptConfig& config) {
  if (!(policy.config == ref.config)) {
    throw std::invalid_argument("policy and reference configs differ");
  }
  std::vector<ReferenceLogProbs> refs;
  refs.reserve(batch.size());
  for (const auto& pair : batch) refs.push_back(reference_log_probs(ref, pair));
  return loss_and_grad(method, policy, batch, std::span<const ReferenceLogProbs>(refs), config);
}

#define CTLAB_INSTANTIATE(T)                                                                    \
  template double implicit_reward(const nanolm::BasicParams<T>&, const nanolm::BasicParams<T>&, \
                                  std::span<const TokenId>, std::span<const TokenId>, double);  \
  template double weighted_reward(const nanolm::BasicParams<T>&, const nanolm::BasicParams<T>&, \
                                  std::span<const TokenId>, std::span<const TokenId>,           \
                                  std::span<const double>, double);                             \
  template ReferenceLogProbs reference_log_probs(const nanolm::BasicParams<T>&,                 \
                                                const PreferencePair&);                         \
  template PrefLoss loss_and_grad(Method, const nanolm::BasicParams<T>&,                        \
                                  std::span<const PreferencePair>,                              \
                                  std::span<const ReferenceLogProbs>, const PrefOptConfig&);    \
  template PrefLoss loss_and_grad(Method, const nanolm::BasicParams<T>&,                        \
                                  const nanolm::BasicParams<T>&,                                \
                                  std::span<const PreferencePair>, const PrefOptConfig&);

CTLAB_INSTANTIATE(float)
CTLAB_INSTANTIATE(double)
#undef CTLAB_INSTANTIATE

namespace {

struct ProbeSums {
  double chosen = 0.0;
  double rejected = 0.0;
  double rejected_weighted = 0.0;
  std::size_t chosen_tokens = 0;
};

ProbeSums probe_sums(const nanolm::Model& model, const PreferencePair& pair, Method method) {
  ProbeSums s;
  for (const double x : model.sequence_log_probs(pair.prompt, pair.chosen)) s.chosen += x;
  const auto lr = model.sequence_log_probs(pair.prompt, pair.rejected);
  for (std::size_t t = 0; t < lr.size(); ++t) {
    s.rejected += lr[t];
    const double w = method == Method::cdpo ? 1.0 - (*pair.rejected_scores)[t] : 1.0;
    s.rejected_weighted += w * lr[t];
  }
  s.chosen_tokens = pair.chosen.size();
  return s;
}

CurveRecord probe_record(std::size_t step, const nanolm::Model& policy,
                         std::span<const ProbeSums> ref, std::span<const PreferencePair> pairs,
                         std::span<const std::size_t> probe, const PrefOptConfig& config) {
  std::vector<ProbeSums> pol(probe.size());
  parallel_for(probe.size(),
               [&](std::size_t i) { pol[i] = probe_sums(policy, pairs[probe[i]], config.method); });
  CurveRecord rec;
  rec.step = step;
  double pref = 0.0, nll = 0.0;
  std::size_t tokens = 0;
  for (std::size_t i = 0; i < probe.size(); ++i) {
    rec.chosen_logp += pol[i].chosen;
    rec.rejected_logp += pol[i].rejected;
    const double margin = config.gamma * (pol[i].chosen - ref[i].chosen) -
                          config.gamma * (pol[i].rejected_weighted - ref[i].rejected_weighted);
    pref += margin_loss(margin);
    nll -= pol[i].chosen;
    tokens += pol[i].chosen_tokens;
  }
  const double n = static_cast<double>(probe.size());
  rec.chosen_logp /= n;
  rec.rejected_logp /= n;
  rec.loss = pref / n;
  if (config.method == Method::rpo) rec.loss += config.rpo_alpha * nll / static_cast<double>(tokens);
  return rec;
}

}  // namespace

PrefOptResult train_preference(const nanolm::ModelParams& policy_init,
                               const nanolm::ModelParams& ref,
                               std::span<const PreferencePair> pairs,
                               const PrefOptConfig& config) {
  config.validate();
  if (pairs.empty()) throw std::invalid_argument("train_preference: no preference pairs");
  if (!(policy_init.config == ref.config)) {
    throw std::invalid_argument("policy and reference configs differ");
  }
  if (config.method == Method::cdpo) {
    for (const auto& p : pairs) {
      if (!p.rejected_scores) throw std::invalid_argument("cdpo requires scores on every pair");
      check_scores(*p.rejected_scores, p.rejected.size());
    }
  }

  std::vector<ReferenceLogProbs> refs(pairs.size());
  parallel_for(pairs.size(), [&](std::size_t i) { refs[i] = reference_log_probs(ref, pairs[i]); });

  PrefOptResult result;
  auto& curve = result.curve;
  {
    std::vector<std::size_t> all(pairs.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    Rng rng(derive_seed(config.seed, Stage::probe));
    shuffle(all, rng);
    all.resize(std::min(config.probe_size == 0 ? all.size() : config.probe_size, all.size()));
    std::sort(all.begin(), all.end());
    curve.probe = std::move(all);
  }
  const nanolm::Model ref_model(ref);
  std::vector<ProbeSums> ref_probe(curve.probe.size());
  for (std::size_t i = 0; i < curve.probe.size(); ++i) {
    ref_probe[i] = probe_sums(ref_model, pairs[curve.probe[i]], config.method);
  }

  nanolm::ModelParams policy = policy_init;
  curve.records.push_back(
      probe_record(0, nanolm::Model(policy), ref_probe, pairs, curve.probe, config));

  nanolm::SgdMomentum opt(policy.config, config.effective_learning_rate(), config.momentum,
                          config.clip_norm);
  std::vector<std::size_t> order(pairs.size());
  std::vector<PreferencePair> batch;
  std::vector<ReferenceLogProbs> batch_refs;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(config.seed, Stage::pref_shuffle, epoch));
    shuffle(order, rng);
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t stop = std::min(order.size(), start + config.batch_size);
      batch.clear();
      batch_refs.clear();
      for (std::size_t i = start; i < stop; ++i) {
        batch.push_back(pairs[order[i]]);
        batch_refs.push_back(refs[order[i]]);
      }
      const auto lg = loss_and_grad(config.method, policy, std::span<const PreferencePair>(batch),
                                    std::span<const ReferenceLogProbs>(batch_refs), config);
      opt.step(policy, lg.grad);
      ++step;
      curve.records.push_back(
          probe_record(step, nanolm::Model(policy), ref_probe, pairs, curve.probe, config));
    }
  }
  result.policy = std::move(policy);
  return result;
}

std::vector<PreferencePair> build_pairs(
    std::span<const minimath::Problem> problems, const contrastive::CorpusSplit& split,
    std::optional<std::span<const contrastive::TokenScoreVector>> scores) {
  std::unordered_map<std::int64_t, const minimath::Problem*> by_id;
  for (const auto& p : problems) by_id[p.id] = &p;

  std::vector<PreferencePair> out;
  std::size_t next_score = 0;
  for (const auto& ps : split.problems) {
    for (const auto& neg : ps.negatives) {
      const contrastive::TokenScoreVector* sv = nullptr;
      if (scores) {
        if (next_score >= scores->size()) {
          throw std::invalid_argument("build_pairs: fewer score vectors than negatives");
        }
        sv = &(*scores)[next_score++];
        if (sv->problem_id != ps.problem_id || sv->tokens != neg.tokens) {
          throw std::invalid_argument("build_pairs: score vector does not match negative of problem " +
                                      std::to_string(ps.problem_id));
        }
      }
      if (!ps.positive) continue;
      const auto it = by_id.find(ps.problem_id);
      if (it == by_id.end()) {
        throw std::invalid_argument("build_pairs: unknown problem id " + std::to_string(ps.problem_id));
      }
      PreferencePair pair;
      pair.problem_id = ps.problem_id;
      pair.prompt = minimath::render_prompt(*it->second);
      pair.chosen = ps.positive->tokens;
      pair.rejected = neg.tokens;
      if (sv) pair.rejected_scores = sv->scores;
      out.push_back(std::move(pair));
    }
  }
  if (scores && next_score != scores->size()) {
    throw std::invalid_argument("build_pairs: more score vectors than negatives");
  }
  return out;
}

}  // namespace ctlab::prefopt
