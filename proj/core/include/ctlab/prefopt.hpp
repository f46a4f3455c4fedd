// SPDX-License-Identifier: Apache-2.0
//
// Pairwise preference optimization over the nanolm policy: DPO, RPO (DPO plus
// NLL on the chosen completion) and cDPO (rejected log-ratios weighted by
// 1 - s_t). Gradients flow through the policy only; the reference is frozen.
#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ctlab/contrastive.hpp"
#include "ctlab/minimath.hpp"
#include "ctlab/nanolm.hpp"

namespace ctlab::prefopt {

using minimath::TokenId;
using minimath::TokenSeq;

enum class Method { dpo, rpo, cdpo };

std::string_view method_name(Method method);
/// Throws std::invalid_argument on anything but "dpo", "rpo" or "cdpo".
Method parse_method(std::string_view name);

struct PreferencePair {
  std::int64_t problem_id = 0;
  TokenSeq prompt;
  TokenSeq chosen;
  TokenSeq rejected;
  std::optional<std::vector<double>> rejected_scores;  // s_t per rejected token
};

struct PrefOptConfig {
  Method method = Method::dpo;
  double gamma = 1.0;
  double rpo_alpha = 1.0;
  double learning_rate = 0.002;  // dpo and rpo
  double cdpo_lr_multiplier = 2.0;
  std::size_t epochs = 3;
  std::size_t batch_size = 16;
  double momentum = 0.9;
  double clip_norm = 5.0;
  std::size_t probe_size = 64;
  std::uint64_t seed = 0;

  /// learning_rate, times cdpo_lr_multiplier for cdpo.
  double effective_learning_rate() const;
  void validate() const;
};

/// gamma * sum_t [log pi(y_t) - log ref(y_t)] over completion tokens.
template <typename T>
double implicit_reward(const nanolm::BasicParams<T>& policy, const nanolm::BasicParams<T>& ref,
                       std::span<const TokenId> prompt, std::span<const TokenId> completion,
                       double gamma);

/// gamma * sum_t (1 - s_t) [log pi(y_t) - log ref(y_t)]. Throws
/// std::invalid_argument if |s| differs from the completion length or any
/// s_t lies outside [0, 1].
template <typename T>
double weighted_reward(const nanolm::BasicParams<T>& policy, const nanolm::BasicParams<T>& ref,
                       std::span<const TokenId> prompt, std::span<const TokenId> completion,
                       std::span<const double> scores, double gamma);

/// Per-token reference log-probs of one pair, computed once and reused.
struct ReferenceLogProbs {
  std::vector<double> chosen;
  std::vector<double> rejected;
};

template <typename T>
ReferenceLogProbs reference_log_probs(const nanolm::BasicParams<T>& ref,
                                      const PreferencePair& pair);

struct PrefLoss {
  double loss = 0.0;
  nanolm::Gradient grad;
  double mean_margin = 0.0;  // mean over pairs of phi_p - phi_n
};

/// Mean pairwise loss over the batch and its exact gradient w.r.t. the
/// policy. Pairs are reduced in index order. Throws std::invalid_argument on
/// an empty batch, on cdpo pairs without scores, and on malformed scores.
template <typename T>
PrefLoss loss_and_grad(Method method, const nanolm::BasicParams<T>& policy,
                       const nanolm::BasicParams<T>& ref, std::span<const PreferencePair> batch,
                       const PrefOptConfig& config);

/// Same with reference log-probs supplied (refs[i] belongs to batch[i]).
template <typename T>
PrefLoss loss_and_grad(Method method, const nanolm::BasicParams<T>& policy,
                       std::span<const PreferencePair> batch,
                       std::span<const ReferenceLogProbs> refs, const PrefOptConfig& config);

/// -log sigmoid(margin), without overflow for large |margin|.
double margin_loss(double margin);

struct CurveRecord {
  std::size_t step = 0;
  double chosen_logp = 0.0;    // mean over probe pairs of sum_t log pi(y_t)
  double rejected_logp = 0.0;
  double loss = 0.0;           // method loss on the probe pairs
};

struct TrainingCurve {
  std::vector<CurveRecord> records;  // step 0 is the initial policy
  std::vector<std::size_t> probe;    // pair indices

  double gap(std::size_t i) const { return records.at(i).chosen_logp - records.at(i).rejected_logp; }
};

struct PrefOptResult {
  nanolm::ModelParams policy;
  TrainingCurve curve;
};

/// Minibatch SGD with momentum from `policy_init` against the frozen `ref`.
/// Shuffle order of epoch e: derive_seed(seed, pref_shuffle, e). The probe is
/// a seeded subset of at most probe_size pairs, still part of training.
PrefOptResult train_preference(const nanolm::ModelParams& policy_init,
                               const nanolm::ModelParams& ref,
                               std::span<const PreferencePair> pairs,
                               const PrefOptConfig& config);

/// One pair per selected negative, chosen = the problem's positive. When
/// `scores` is given it must list a TokenScoreVector for every negative, in
/// split order; mismatched problem ids or tokens throw std::invalid_argument.
std::vector<PreferencePair> build_pairs(
    std::span<const minimath::Problem> problems, const contrastive::CorpusSplit& split,
    std::optional<std::span<const contrastive::TokenScoreVector>> scores = std::nullopt);

}  // namespace ctlab::prefopt
