// SPDX-License-Identifier: Apache-2.0
//
// Line-delimited JSON and CSV encodings of every lab artifact. Tokens are
// written as vocabulary strings.
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "ctlab/contrastive.hpp"
#include "ctlab/minimath.hpp"
#include "ctlab/prefopt.hpp"
#include "ctlab/rollout.hpp"

namespace ctlab::io {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class MissingFileError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string read_text(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, std::string_view text);

/// CRC-32 (zlib polynomial) of a byte string / a file's contents.
std::uint32_t crc32_of(std::string_view bytes);
std::uint32_t file_crc32(const std::filesystem::path& path);
std::string crc_hex(std::uint32_t crc);

std::string problems_jsonl(std::span<const minimath::Problem> problems);
std::vector<minimath::Problem> parse_problems(std::string_view text);

std::string trajectories_jsonl(std::span<const minimath::Trajectory> trajectories);
std::vector<minimath::Trajectory> parse_trajectories(std::string_view text);

std::string reports_jsonl(std::span<const rollout::RolloutReport> reports);
std::vector<rollout::RolloutReport> parse_reports(std::string_view text);

std::string scores_jsonl(std::span<const contrastive::TokenScoreVector> scores);
std::vector<contrastive::TokenScoreVector> parse_scores(std::string_view text);

std::string split_json(const contrastive::CorpusSplit& split);
contrastive::CorpusSplit parse_split(std::string_view text);

/// step,chosen_logp,rejected_logp,loss
std::string curve_csv(const prefopt::TrainingCurve& curve);
prefopt::TrainingCurve parse_curve_csv(std::string_view text);

/// k,with_critical,without_critical
std::string passk_csv(const rollout::PassAtKReport& report);
std::string impact_jsonl(const rollout::PassAtKReport& report);

}  // namespace ctlab::io
