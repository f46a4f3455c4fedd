// SPDX-License-Identifier: Apache-2.0
//
// Trajectory sampling and rollout-based critical-token identification.
//
// For an incorrect trajectory y_1..y_T, position t is scored by drawing
// N_r completions from prompt + y_1..y_t and counting how many verify. The
// critical token is the first t whose score is 0 and whose successors all
// score below 5%; failing that, the first t with score 0.
#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "ctlab/minimath.hpp"
#include "ctlab/nanolm.hpp"
#include "ctlab/rng.hpp"

namespace ctlab::rollout {

using minimath::TokenId;
using minimath::TokenSeq;

struct RolloutConfig {
  std::size_t samples = 64;  // N_r
  std::size_t max_len = 64;  // completion tokens, prefix included
  double temperature = 1.0;
  double threshold_zero = 0.0;
  double threshold_tail = 0.05;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Draws one token. PAD (and `banned`, when given) are masked out and the
/// remaining tempered mass renormalized.
TokenId sample_token(std::span<const double> log_probs, double temperature, Rng& rng,
                     std::optional<TokenId> banned = std::nullopt);

/// Argmax over non-PAD tokens; ties go to the smaller id.
TokenId greedy_token(std::span<const double> log_probs);

/// Temperature sampling from `prefix` (prompt + any completion tokens) until
/// EOS or `max_new` new tokens. Returns only the new tokens. If the prefix
/// already ends in EOS nothing is generated.
TokenSeq sample_completion(const nanolm::Model& model, std::span<const TokenId> prefix,
                           Rng& rng, std::size_t max_new, double temperature);

TokenSeq greedy_completion(const nanolm::Model& model, std::span<const TokenId> prefix,
                           std::size_t max_new);

enum class IdentificationMode { both_conditions, first_condition_only, not_found };

std::string_view mode_name(IdentificationMode mode);
IdentificationMode parse_mode(std::string_view name);

struct CriticalRuleResult {
  std::optional<std::size_t> position;  // 1-based
  IdentificationMode mode = IdentificationMode::not_found;
};

/// The two-condition rule with first-condition fallback over a score vector
/// (scores[0] is position 1).
CriticalRuleResult apply_critical_rule(std::span<const double> scores, double threshold_zero,
                                       double threshold_tail);

struct RolloutReport {
  std::int64_t problem_id = 0;
  TokenSeq tokens;
  std::vector<double> scores;
  std::optional<std::size_t> critical_position;
  IdentificationMode mode = IdentificationMode::not_found;
  std::size_t samples = 0;
  // Raw records: outcomes[t][s] is 1 iff rollout s from position t+1
  // verified; lengths[t][s] is the number of tokens it generated.
  std::vector<std::vector<std::uint8_t>> outcomes;
  std::vector<std::vector<std::uint32_t>> lengths;

  std::uint64_t generated_tokens() const;
};

/// Stream for rollout `sample` after completion position `position`.
std::uint64_t rollout_stream(std::uint64_t seed, std::int64_t problem_id,
                             std::size_t position, std::size_t sample);

/// Stream for the forced-alternative arm at `position`.
std::uint64_t forced_stream(std::uint64_t seed, std::int64_t problem_id,
                            std::size_t position, std::size_t sample);

/// Scores every position of an incorrect trajectory and applies the rule.
/// Throws std::invalid_argument if the trajectory is correct.
RolloutReport identify_critical(const nanolm::Model& model, const minimath::Problem& problem,
                                const minimath::Trajectory& trajectory,
                                const RolloutConfig& config);

/// Recomputes scores from the raw records and re-derives the rule by brute
/// force. Returns one message per violated invariant (empty when valid).
std::vector<std::string> validate_report(const RolloutReport& report,
                                         const RolloutConfig& config);

class UnreplaceableTokenError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// probs with `banned` (and `pad`, if given) zeroed and the rest renormalized.
/// Throws UnreplaceableTokenError if nothing is left to renormalize.
std::vector<double> mask_and_renormalize(std::span<const double> probs, TokenId banned,
                                         std::optional<TokenId> pad);

std::vector<double> forced_alternative_distribution(const nanolm::Model& model,
                                                    std::span<const TokenId> context,
                                                    TokenId banned);

/// Unbiased pass@k, 1 - C(n-c, k) / C(n, k), evaluated as a log-space product.
double pass_at_k(std::size_t n, std::size_t c, std::size_t k);

inline const std::vector<std::size_t> kDefaultKs = {1, 2, 4, 8, 16, 32, 64};

struct ImpactInstance {
  std::int64_t problem_id = 0;
  std::size_t critical_position = 0;
  IdentificationMode mode = IdentificationMode::not_found;
  bool unreplaceable = false;
  std::size_t correct_with = 0;
  std::size_t correct_without = 0;
};

struct PassAtKReport {
  std::vector<std::size_t> ks;
  std::vector<double> with_critical;
  std::vector<double> without_critical;
  std::size_t n = 0;
  std::vector<ImpactInstance> instances;  // includes skipped (unreplaceable) ones

  std::size_t used_instances() const;
};

/// For each report with a critical position: n completions from the prefix
/// through the critical token, and n from the prefix before it with the
/// critical token banned at its position. pass@k averaged over instances.
PassAtKReport critical_impact_experiment(
    const nanolm::Model& model,
    const std::unordered_map<std::int64_t, minimath::Problem>& problems,
    std::span<const RolloutReport> reports, const RolloutConfig& config,
    std::span<const std::size_t> ks = kDefaultKs);

struct TokenAnalysis {
  std::array<std::size_t, 5> by_category{};  // indexed like minimath::kAllCategories
  std::size_t before = 0;
  std::size_t after = 0;
  std::size_t same = 0;
  std::size_t no_error_position = 0;
  std::size_t total = 0;

  /// Fraction of instances with a known error position whose critical token
  /// is not the error token.
  double different_ratio() const;
};

/// error_positions[i] belongs to reports[i]. Reports without a critical
/// position are ignored.
TokenAnalysis token_analysis(std::span<const RolloutReport> reports,
                             std::span<const std::optional<std::size_t>> error_positions);

}  // namespace ctlab::rollout
