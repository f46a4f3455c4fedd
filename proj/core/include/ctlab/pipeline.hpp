// SPDX-License-Identifier: Apache-2.0
//
// End-to-end experiment orchestration: every stage reads and writes files in
// one output directory and records them, with CRC-32 checksums, forward-pass
// counters and timings, in manifest.json.
//
//   gen -> sft -> sample -> identify -> ce-train -> ce-score
//       -> train-pref -> eval -> impact -> analyze -> cost-model
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "ctlab/contrastive.hpp"
#include "ctlab/minimath.hpp"
#include "ctlab/nanolm.hpp"
#include "ctlab/prefopt.hpp"
#include "ctlab/rollout.hpp"

namespace ctlab::pipeline {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// An input whose checksum no longer matches the manifest (or that the
/// manifest does not list).
class StaleInputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class VocabularyMismatchError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ExperimentConfig {
  std::uint64_t seed = 7;
  std::size_t train_problems = 2000;
  std::size_t eval_problems = 500;
  std::int64_t train_first_id = 0;
  std::int64_t eval_first_id = 1'000'000;

  nanolm::ModelConfig model{minimath::kVocabSize, 24, 32, 128};
  nanolm::TrainConfig sft{0.01, 20, 32, 0.9, 5.0, 0};
  nanolm::TrainConfig ce{0.01, 1, 32, 0.9, 5.0, 0};
  contrastive::SamplingConfig sampling{};
  rollout::RolloutConfig rollout{};
  std::size_t identify_instances = 64;
  std::vector<std::size_t> ks = rollout::kDefaultKs;
  double beta = 1.0;
  prefopt::PrefOptConfig pref{};
  std::vector<prefopt::Method> methods = {prefopt::Method::dpo, prefopt::Method::cdpo};
  std::size_t eval_samples = 1;
  std::string cost_preset = "gsm8k";
  std::uint64_t cost_n = 7500;
  std::filesystem::path out_dir = "ctlab_out";
  bool verbose = true;

  /// Throws ConfigError on any violated invariant.
  void validate() const;

  /// Sets one schema key from its text value. Throws ConfigError on an
  /// unknown key or unparsable value.
  void set(std::string_view key, std::string_view value);

  /// key = value text for every schema key (out_dir and verbose excluded).
  std::string to_text() const;
};

/// Parses key = value lines ('#' starts a comment) on top of `base`.
ExperimentConfig parse_config(std::string_view text, ExperimentConfig base = {});
ExperimentConfig load_config(const std::filesystem::path& path, ExperimentConfig base = {});

/// The documented schema, in to_text() order.
struct ConfigKey {
  std::string key;
  std::string description;
};
const std::vector<ConfigKey>& config_schema();

struct ArtifactRecord {
  std::string crc32;  // 8 hex digits
  std::uint64_t bytes = 0;
};

struct CounterRecord {
  std::uint64_t forward_passes = 0;
  std::uint64_t analytic = 0;
};

struct RunManifest {
  std::string config;  // to_text() snapshot
  std::map<std::string, ArtifactRecord> artifacts;  // file name relative to out_dir
  std::map<std::string, CounterRecord> counters;
  std::map<std::string, double> wall_clock_seconds;

  /// JSON text. The "wall_clock_seconds" object is the only
  /// run-dependent field.
  std::string to_json() const;
  static RunManifest from_json(std::string_view text);
  /// to_json() with wall-clock fields removed.
  std::string deterministic_json() const;
};

struct AccuracyReport {
  std::size_t total = 0;
  std::size_t correct = 0;
  double accuracy = 0.0;
  std::vector<std::size_t> ks;  // present when n_samples > 1
  std::vector<double> pass_at_k;
  std::size_t n_samples = 1;
  std::uint64_t generated_tokens = 0;
};

/// Greedy decode, verify, fraction correct. With n_samples > 1 also draws
/// n_samples completions per problem (stream derive_seed(seed, eval, id, j))
/// and reports pass@k for every k <= n_samples. Throws std::invalid_argument
/// on an empty problem set.
AccuracyReport evaluate_accuracy(const nanolm::Model& model,
                                 std::span<const minimath::Problem> problems,
                                 std::size_t n_samples, std::uint64_t seed,
                                 std::span<const std::size_t> ks = rollout::kDefaultKs,
                                 std::size_t max_len = 64);

/// Eval problems: ids from first_id upward, skipping any whose (start, steps)
/// duplicate a train problem.
std::vector<minimath::Problem> generate_eval_problems(
    std::uint64_t seed, std::int64_t first_id, std::size_t count,
    std::span<const minimath::Problem> train);

/// Each stage loads the manifest from out_dir (if any), checks its inputs,
/// writes its outputs and saves the manifest.
void run_gen(const ExperimentConfig& config);
void run_sft(const ExperimentConfig& config);
void run_sample(const ExperimentConfig& config);
void run_identify(const ExperimentConfig& config);
void run_ce_train(const ExperimentConfig& config);
void run_ce_score(const ExperimentConfig& config);
void run_train_pref(const ExperimentConfig& config, prefopt::Method method);
void run_eval(const ExperimentConfig& config, std::optional<prefopt::Method> method);
void run_impact(const ExperimentConfig& config);
void run_analyze(const ExperimentConfig& config);
void run_cost_model(const ExperimentConfig& config);

/// All stages in order, for every configured method.
RunManifest run_pipeline(const ExperimentConfig& config);

/// Text tables for the cost-model subcommand.
std::vector<contrastive::CostRow> preset_cost_rows(std::string_view preset, std::uint64_t n);

std::string policy_file(prefopt::Method method);
std::string curve_file(prefopt::Method method);
std::string eval_file(std::optional<prefopt::Method> method);

}  // namespace ctlab::pipeline
