// SPDX-License-Identifier: Apache-2.0
//
// A fixed-window feedforward autoregressive language model:
//
//   p(. | ctx) = softmax(W2^T tanh(W1^T concat(E[ctx]) + b1) + b2)
//
// over the last K tokens (left-padded with PAD). Parameters are stored as
// 32-bit floats; all arithmetic accumulates in double. Every probability the
// rest of the lab consumes comes from here.
#pragma once

#include <array>
#include <atomic>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <stdexcept>
#include <vector>

#include "ctlab/minimath.hpp"

namespace ctlab::nanolm {

using minimath::TokenId;
using minimath::TokenSeq;

struct ModelConfig {
  std::size_t vocab_size = minimath::kVocabSize;
  std::size_t context = 8;
  std::size_t embed = 32;
  std::size_t hidden = 64;

  /// Throws std::invalid_argument unless all dims >= 1 and context >= 2.
  void validate() const;
  std::size_t parameter_count() const;
  bool operator==(const ModelConfig&) const = default;
};

/// All weights of one model. Row-major: embedding is V x d, w1 is (K*d) x h,
/// w2 is h x V.
template <typename T>
struct BasicParams {
  ModelConfig config;
  std::vector<T> embedding;
  std::vector<T> w1;
  std::vector<T> b1;
  std::vector<T> w2;
  std::vector<T> b2;

  BasicParams() = default;
  explicit BasicParams(const ModelConfig& cfg);

  /// The five arrays in checkpoint order.
  std::array<std::span<T>, 5> arrays();
  std::array<std::span<const T>, 5> arrays() const;
  std::size_t size() const;

  template <typename U>
  BasicParams<U> cast() const {
    BasicParams<U> out(config);
    auto dst = out.arrays();
    const auto src = arrays();
    for (std::size_t a = 0; a < src.size(); ++a) {
      for (std::size_t i = 0; i < src[a].size(); ++i) dst[a][i] = static_cast<U>(src[a][i]);
    }
    return out;
  }

  bool all_finite() const;
  bool operator==(const BasicParams&) const = default;
};

using ModelParams = BasicParams<float>;
using ShadowParams = BasicParams<double>;  // float-64 copy used by gradient checks
using Gradient = BasicParams<double>;

extern template struct BasicParams<float>;
extern template struct BasicParams<double>;

/// Uniform init in [-scale, scale] from one derived stream.
ModelParams init_params(const ModelConfig& config, std::uint64_t seed, double scale = 0.08);

/// Last `config.context` tokens of seq[0, end), left-padded with PAD.
TokenSeq make_context(std::span<const TokenId> seq, std::size_t end, std::size_t context);

/// Probability vector over the vocabulary. Context must be exactly K ids in
/// range; throws std::invalid_argument / std::out_of_range otherwise.
template <typename T>
std::vector<double> forward(const BasicParams<T>& params, std::span<const TokenId> context);

/// Log-softmax of the same logits (no underflow to -inf).
template <typename T>
std::vector<double> log_probs(const BasicParams<T>& params, std::span<const TokenId> context);

/// log(max(p, 1e-12)).
double safe_log(double p);

/// Cached intermediate values of one forward pass, enough for backprop.
struct Activation {
  TokenSeq context;
  std::vector<double> hidden;     // tanh outputs, size h
  std::vector<double> log_probs;  // size V
};

template <typename T>
Activation activate(const BasicParams<T>& params, std::span<const TokenId> context);

/// grad += coeff * d/dtheta log p(target | activation.context).
template <typename T>
void accumulate_logprob_grad(const BasicParams<T>& params, const Activation& act,
                             TokenId target, double coeff, Gradient& grad);

/// Batched backprop against one fixed parameter set. Forward passes go
/// through per-slot projections; the W1 and embedding gradients are gathered
/// per (slot, token) and expanded once in take(). Same gradient as repeated
/// accumulate_logprob_grad up to summation order.
template <typename T>
class GradientAccumulator {
 public:
  explicit GradientAccumulator(const BasicParams<T>& params);

  Activation activate(std::span<const TokenId> context) const;
  /// grad += coeff * d/dtheta log p(target | act.context).
  void add(const Activation& act, TokenId target, double coeff);
  Gradient take();

 private:
  const BasicParams<T>* params_;
  std::vector<double> slot_proj_;   // K x V x h
  std::vector<double> slot_delta_;  // K x V x h
  std::vector<unsigned char> touched_;
  Gradient grad_;
};

extern template class GradientAccumulator<float>;
extern template class GradientAccumulator<double>;

struct Example {
  TokenSeq context;
  TokenId target = 0;
};

/// One example per completion token; prompt tokens only serve as context.
std::vector<Example> unroll(std::span<const TokenId> prompt,
                            std::span<const TokenId> completion, std::size_t context);

/// Per-token log p(y_t | prompt, y_<t) over the completion.
template <typename T>
std::vector<double> sequence_log_probs(const BasicParams<T>& params,
                                       std::span<const TokenId> prompt,
                                       std::span<const TokenId> completion);

struct LossAndGrad {
  double loss = 0.0;
  Gradient grad;
};

/// Mean negative log-likelihood over the batch and its exact gradient.
template <typename T>
LossAndGrad nll_loss_and_grad(const BasicParams<T>& params, std::span<const Example> batch);

template <typename T>
double nll_loss(const BasicParams<T>& params, std::span<const Example> batch);

double l2_norm(const Gradient& grad);

/// SGD with momentum (v = mu v + g; theta -= lr v) and global-norm clipping.
class SgdMomentum {
 public:
  SgdMomentum(const ModelConfig& config, double learning_rate, double momentum,
              double clip_norm);

  /// Applies one update in place; returns the pre-clip gradient norm. Throws
  /// std::runtime_error if the update produces a non-finite parameter.
  double step(ModelParams& params, const Gradient& grad);

 private:
  double learning_rate_;
  double momentum_;
  double clip_norm_;
  Gradient velocity_;
};

struct TrainConfig {
  double learning_rate = 0.05;
  std::size_t epochs = 1;
  std::size_t batch_size = 32;
  double momentum = 0.9;
  double clip_norm = 5.0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SequencePair {
  TokenSeq prompt;
  TokenSeq completion;
};

/// Minibatch SGD over every (context, target) pair unrolled from the corpus.
/// The shuffle order of epoch e comes from derive_seed(seed, sft_shuffle, e).
ModelParams train_sft(const ModelParams& init, std::span<const SequencePair> corpus,
                      const TrainConfig& config);

/// Counts single-position forward passes.
class ForwardCounter {
 public:
  void add(std::uint64_t n = 1) { count_.fetch_add(n, std::memory_order_relaxed); }
  std::uint64_t value() const { return count_.load(std::memory_order_relaxed); }
  void reset() { count_.store(0); }

 private:
  std::atomic<std::uint64_t> count_{0};
};

/// Inference engine over frozen parameters. Precomputes the per-slot
/// projection of every embedding through W1 so one position costs O(K*h + h*V).
/// Read-only after construction and safe to share across threads.
class Model {
 public:
  explicit Model(const ModelParams& params);

  const ModelConfig& config() const { return config_; }
  std::size_t vocab_size() const { return config_.vocab_size; }

  /// Writes log-softmax into out (size V). Context: exactly K ids.
  void log_probs(std::span<const TokenId> context, std::span<double> out) const;
  std::vector<double> log_probs(std::span<const TokenId> context) const;
  std::vector<double> probs(std::span<const TokenId> context) const;

  /// Per-token log-probs of completion given prompt.
  std::vector<double> sequence_log_probs(std::span<const TokenId> prompt,
                                         std::span<const TokenId> completion) const;

  ForwardCounter& counter() const { return *counter_; }

 private:
  ModelConfig config_;
  std::vector<double> slot_proj_;  // K x V x h
  std::vector<double> b1_;
  std::vector<double> w2_;
  std::vector<double> b2_;
  std::unique_ptr<ForwardCounter> counter_;
};

// --- checkpoints -----------------------------------------------------------
//
// "CTL1" | u32 vocab_size | u32 K | u32 d | u32 h | f32 payload (E, W1, b1,
// W2, b2; row-major) | u32 CRC-32 of payload. All little-endian.

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class CorruptHeaderError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class DimensionMismatchError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class TruncatedPayloadError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class ChecksumMismatchError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

std::vector<std::uint8_t> encode_checkpoint(const ModelParams& params);
ModelParams decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const ModelParams& params, const std::filesystem::path& path);
ModelParams load_checkpoint(const std::filesystem::path& path);
/// Same, but throws DimensionMismatchError unless the header equals `expected`.
ModelParams load_checkpoint(const std::filesystem::path& path, const ModelConfig& expected);

}  // namespace ctlab::nanolm
