// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace ctlab {

/// Named stages used as the first coordinate of every stream derivation.
/// Values are part of the reproducibility contract; never renumber.
enum class Stage : std::uint64_t {
  problems = 1,
  init = 2,
  sft_shuffle = 3,
  pool = 4,
  rollout = 5,
  forced = 6,
  negatives = 7,
  positives = 8,
  ce_train = 9,
  pref_shuffle = 10,
  probe = 11,
  eval = 12,
  instances = 13,
};

/// Folds a list of coordinates into one 64-bit seed (splitmix64 finalizer per
/// coordinate). Order-sensitive; equal inputs always give equal outputs.
std::uint64_t derive_seed(std::initializer_list<std::uint64_t> coords) noexcept;

inline std::uint64_t derive_seed(std::uint64_t master, Stage stage,
                                 std::uint64_t a = 0, std::uint64_t b = 0,
                                 std::uint64_t c = 0) noexcept {
  return derive_seed({master, static_cast<std::uint64_t>(stage), a, b, c});
}

/// One independent random stream. Wraps mt19937_64 and exposes only the
/// draws the lab needs, with portable conversions (no std distributions).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform double in [0, 1) with 53 bits of precision.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, bound) by rejection; bound must be > 0.
  std::uint64_t below(std::uint64_t bound);

  /// Uniform integer in [lo, hi].
  int between(int lo, int hi) {
    return lo + static_cast<int>(below(static_cast<std::uint64_t>(hi - lo) + 1));
  }

  /// Uniform double in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

/// Fisher-Yates with this Rng's portable bounded draws.
template <typename Range>
void shuffle(Range& range, Rng& rng) {
  const auto n = static_cast<std::uint64_t>(range.size());
  for (std::uint64_t i = n; i > 1; --i) {
    const auto j = rng.below(i);
    using std::swap;
    swap(range[i - 1], range[j]);
  }
}

}  // namespace ctlab
