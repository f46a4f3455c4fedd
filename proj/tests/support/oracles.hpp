// SPDX-License-Identifier: Apache-2.0
//
// Reference computations shared by the unit and acceptance tests. Each one is
// written directly from the defining formula, independent of the library's
// optimized code paths.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "ctlab/minimath.hpp"
#include "ctlab/nanolm.hpp"
#include "ctlab/prefopt.hpp"
#include "ctlab/rng.hpp"

namespace ctlab::testing {

using minimath::TokenId;
using minimath::TokenSeq;
using nanolm::ShadowParams;

inline nanolm::ModelConfig small_config() { return {minimath::kVocabSize, 3, 4, 5}; }

/// Random double-precision parameters with entries in [-scale, scale].
inline ShadowParams random_shadow(const nanolm::ModelConfig& cfg, std::uint64_t seed,
                                  double scale = 0.5) {
  ShadowParams p(cfg);
  Rng rng(seed);
  for (auto a : p.arrays()) {
    for (auto& v : a) v = rng.uniform(-scale, scale);
  }
  return p;
}

inline TokenSeq random_tokens(Rng& rng, std::size_t n, std::size_t vocab) {
  TokenSeq out(n);
  for (auto& t : out) t = static_cast<TokenId>(1 + rng.below(vocab - 1));  // never PAD
  return out;
}

/// log p(target | context) straight from the forward formula.
inline double direct_log_prob(const ShadowParams& p, std::span<const TokenId> context,
                              TokenId target) {
  const auto& c = p.config;
  std::vector<double> hidden(p.b1.begin(), p.b1.end());
  for (std::size_t k = 0; k < c.context; ++k) {
    for (std::size_t e = 0; e < c.embed; ++e) {
      const double x = p.embedding[static_cast<std::size_t>(context[k]) * c.embed + e];
      for (std::size_t j = 0; j < c.hidden; ++j) {
        hidden[j] += x * p.w1[(k * c.embed + e) * c.hidden + j];
      }
    }
  }
  for (auto& x : hidden) x = std::tanh(x);
  std::vector<double> logits(p.b2.begin(), p.b2.end());
  for (std::size_t j = 0; j < c.hidden; ++j) {
    for (std::size_t v = 0; v < c.vocab_size; ++v) logits[v] += hidden[j] * p.w2[j * c.vocab_size + v];
  }
  double m = logits[0];
  for (const double l : logits) m = std::max(m, l);
  double z = 0.0;
  for (const double l : logits) z += std::exp(l - m);
  return logits[static_cast<std::size_t>(target)] - m - std::log(z);
}

inline double direct_sequence_log_prob(const ShadowParams& p, std::span<const TokenId> prompt,
                                       std::span<const TokenId> completion,
                                       std::span<const double> weights = {}) {
  TokenSeq seq(prompt.begin(), prompt.end());
  seq.insert(seq.end(), completion.begin(), completion.end());
  double sum = 0.0;
  for (std::size_t t = 0; t < completion.size(); ++t) {
    const auto ctx = nanolm::make_context(seq, prompt.size() + t, p.config.context);
    const double w = weights.empty() ? 1.0 : weights[t];
    sum += w * direct_log_prob(p, ctx, completion[t]);
  }
  return sum;
}

inline double direct_nll(const ShadowParams& p, std::span<const nanolm::Example> batch) {
  double total = 0.0;
  for (const auto& ex : batch) total -= direct_log_prob(p, ex.context, ex.target);
  return total / static_cast<double>(batch.size());
}

/// Pairwise preference loss from its definition.
inline double direct_pref_loss(prefopt::Method method, const ShadowParams& policy,
                               const ShadowParams& ref,
                               std::span<const prefopt::PreferencePair> batch,
                               const prefopt::PrefOptConfig& cfg) {
  double loss = 0.0, nll = 0.0;
  std::size_t chosen_tokens = 0;
  for (const auto& pair : batch) {
    std::vector<double> w;
    if (method == prefopt::Method::cdpo) {
      for (const double s : *pair.rejected_scores) w.push_back(1.0 - s);
    }
    const double lp_c = direct_sequence_log_prob(policy, pair.prompt, pair.chosen);
    const double phi_c = cfg.gamma * (lp_c - direct_sequence_log_prob(ref, pair.prompt, pair.chosen));
    const double phi_r =
        cfg.gamma * (direct_sequence_log_prob(policy, pair.prompt, pair.rejected, w) -
                     direct_sequence_log_prob(ref, pair.prompt, pair.rejected, w));
    const double m = phi_c - phi_r;
    loss += std::log1p(std::exp(-m));
    nll -= lp_c;
    chosen_tokens += pair.chosen.size();
  }
  loss /= static_cast<double>(batch.size());
  if (method == prefopt::Method::rpo) loss += cfg.rpo_alpha * nll / static_cast<double>(chosen_tokens);
  return loss;
}

struct FdResult {
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
};

/// Central differences (step eps) of f at every coordinate of p, compared with
/// the analytic gradient. Relative error is |a - n| / max(|a|, |n|, floor).
inline FdResult finite_difference_check(const std::function<double(const ShadowParams&)>& f,
                                        const ShadowParams& p, const nanolm::Gradient& analytic,
                                        double eps = 1e-4, double floor = 1e-6) {
  FdResult out;
  ShadowParams probe = p;
  auto slots = probe.arrays();
  const auto grads = analytic.arrays();
  for (std::size_t a = 0; a < slots.size(); ++a) {
    for (std::size_t i = 0; i < slots[a].size(); ++i) {
      const double saved = slots[a][i];
      slots[a][i] = saved + eps;
      const double up = f(probe);
      slots[a][i] = saved - eps;
      const double down = f(probe);
      slots[a][i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double exact = grads[a][i];
      const double denom = std::max({std::fabs(exact), std::fabs(numeric), floor});
      out.max_rel_error = std::max(out.max_rel_error, std::fabs(exact - numeric) / denom);
      ++out.coordinates;
    }
  }
  return out;
}

inline std::vector<nanolm::Example> random_examples(Rng& rng, const nanolm::ModelConfig& cfg,
                                                     std::size_t n) {
  std::vector<nanolm::Example> out(n);
  for (auto& ex : out) {
    ex.context.resize(cfg.context);
    for (auto& t : ex.context) t = static_cast<TokenId>(rng.below(cfg.vocab_size));
    ex.target = static_cast<TokenId>(1 + rng.below(cfg.vocab_size - 1));
  }
  return out;
}

/// A few synthetic pairs with random token content and scores in [0, 1].
inline std::vector<prefopt::PreferencePair> random_pairs(Rng& rng, const nanolm::ModelConfig& cfg,
                                                         std::size_t n) {
  std::vector<prefopt::PreferencePair> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto& pair = out[i];
    pair.problem_id = static_cast<std::int64_t>(i);
    pair.prompt = random_tokens(rng, 2 + rng.below(3), cfg.vocab_size);
    pair.chosen = random_tokens(rng, 1 + rng.below(4), cfg.vocab_size);
    pair.rejected = random_tokens(rng, 1 + rng.below(4), cfg.vocab_size);
    std::vector<double> s(pair.rejected.size());
    for (auto& v : s) v = rng.uniform();
    pair.rejected_scores = s;
  }
  return out;
}

}  // namespace ctlab::testing
