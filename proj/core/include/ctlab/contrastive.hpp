// SPDX-License-Identifier: Apache-2.0
//
// Contrastive estimation of critical tokens.
//
// A positive model (fine-tuned on one sampled correct trajectory per problem)
// and a negative model (fine-tuned on the most frequent incorrect answers
// covering half of all incorrect samples) score each token of an incorrect
// trajectory as
//
//   log s_t = (1 + beta) log P+(y_t | ctx) - beta log P-(y_t | ctx) - log Z
//
// where Z normalizes over every non-PAD token. Low s_t flags a likely
// critical token.
#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ctlab/minimath.hpp"
#include "ctlab/nanolm.hpp"
#include "ctlab/rng.hpp"

namespace ctlab::contrastive {

using minimath::TokenId;
using minimath::TokenSeq;

struct SamplingConfig {
  std::size_t samples_per_problem = 64;
  std::size_t max_len = 64;
  double temperature = 1.0;
  std::uint64_t seed = 0;
};

/// samples_per_problem verified trajectories for every problem, problem-major.
/// Stream for sample j of problem i: derive_seed(seed, pool, id, j).
std::vector<minimath::Trajectory> build_trajectory_pool(
    const nanolm::Model& model, std::span<const minimath::Problem> problems,
    const SamplingConfig& config);

struct AnswerGroup {
  std::optional<int> answer;  // empty: no parseable answer
  std::size_t count = 0;
};

struct NegativeSelection {
  std::vector<AnswerGroup> groups;  // count descending, then answer ascending
  std::size_t selected_groups = 0;
  std::vector<minimath::Trajectory> trajectories;  // one per selected group
};

/// Frequency-ranked answer groups; the shortest prefix whose cumulative count
/// reaches ceil(total / 2), and one uniformly drawn trajectory from each.
/// Groups without a parseable answer sort after numeric groups of equal count.
NegativeSelection select_negatives(std::span<const minimath::Trajectory> incorrect, Rng& rng);

struct ProblemSplit {
  std::int64_t problem_id = 0;
  std::size_t correct = 0;
  std::size_t incorrect = 0;
  std::optional<minimath::Trajectory> positive;
  std::vector<minimath::Trajectory> negatives;
  std::vector<AnswerGroup> answer_table;
};

struct CorpusSplit {
  std::vector<ProblemSplit> problems;  // in problem order
  std::size_t all_correct = 0;         // no negatives, no pair
  std::size_t all_incorrect = 0;       // no positive, no pair

  std::size_t positive_count() const;
  std::size_t negative_count() const;
};

/// Groups the pool by problem, picks one positive per problem (seeded) and
/// runs select_negatives per problem (seeded).
CorpusSplit build_corpus_split(std::span<const minimath::Problem> problems,
                               std::span<const minimath::Trajectory> pool, std::uint64_t seed);

std::vector<nanolm::SequencePair> positive_corpus(std::span<const minimath::Problem> problems,
                                                  const CorpusSplit& split);
std::vector<nanolm::SequencePair> negative_corpus(std::span<const minimath::Problem> problems,
                                                  const CorpusSplit& split);

/// Contrastive distribution over the vocabulary from two log-probability
/// vectors. `excluded` (PAD in the lab) gets 0 and is left out of Z.
std::vector<double> contrastive_distribution(std::span<const double> log_pos,
                                             std::span<const double> log_neg, double beta,
                                             std::optional<TokenId> excluded);

/// Same from probability vectors (logs taken with the 1e-12 floor).
std::vector<double> contrastive_distribution_from_probs(std::span<const double> pos,
                                                        std::span<const double> neg,
                                                        double beta,
                                                        std::optional<TokenId> excluded);

struct TokenScoreVector {
  std::int64_t problem_id = 0;
  TokenSeq tokens;
  std::vector<double> scores;  // s_t in (0, 1), one per completion token
  double beta = 1.0;
};

class VocabularyMismatchError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Scores every completion token. Throws VocabularyMismatchError if the two
/// models disagree on vocabulary size (or context window), and
/// std::invalid_argument for beta < 0.
TokenScoreVector ce_scores(const nanolm::Model& positive, const nanolm::Model& negative,
                           std::int64_t problem_id, std::span<const TokenId> prompt,
                           std::span<const TokenId> completion, double beta);

struct GaussianCheck {
  double mean = 0.0;            // mu_p + beta (mu_p - mu_n)
  double max_abs_error = 0.0;   // quadrature density vs closed form, over the grid
  double density_at_mean = 0.0; // normalized quadrature density at x = mean
  std::size_t grid_points = 0;
  bool passed = false;
};

/// Closed-form mean of the contrastive density (P+)^(1+beta) / (P-)^beta of
/// two equal-variance Gaussians, validated by normalizing that density with
/// Simpson quadrature on mean +- 12 sigma and comparing pointwise against
/// N(mean, sigma^2). Throws std::invalid_argument for sigma <= 0.
GaussianCheck ce_gaussian_mean(double mu_p, double mu_n, double sigma, double beta,
                               double tolerance = 1e-6);

// --- forward-pass cost model ----------------------------------------------

enum class CostMethod { rollout, contrastive };

struct CostModelInput {
  CostMethod method = CostMethod::contrastive;
  std::uint64_t n = 0;                 // examples to annotate
  double avg_rollout_tokens = 0.0;     // rollout tokens per response
  std::uint64_t sft_corpus_size = 0;   // positive + negative training examples
  std::uint64_t sft_epochs = 3;        // equivalent passes over the corpus
};

struct CostModelResult {
  double rollout_cost = 0.0;      // avg_rollout_tokens * n
  double contrastive_cost = 0.0;  // sft_epochs * corpus + 2 n
  std::optional<double> ratio;    // contrastive / rollout; empty when n == 0

  double cost_of(CostMethod m) const {
    return m == CostMethod::rollout ? rollout_cost : contrastive_cost;
  }
};

/// Throws std::invalid_argument unless avg_rollout_tokens, sft_corpus_size
/// and sft_epochs are positive.
CostModelResult cost_model(const CostModelInput& input);

/// Published corpus statistics: "gsm8k" or "math".
CostModelInput cost_preset(std::string_view name, std::uint64_t n);

/// Human-readable table and CSV text for a set of labelled rows.
struct CostRow {
  std::string label;
  CostModelInput input;
  CostModelResult result;
};
std::string format_cost_table(std::span<const CostRow> rows);
std::string format_cost_csv(std::span<const CostRow> rows);

}  // namespace ctlab::contrastive
