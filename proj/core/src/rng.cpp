// SPDX-License-Identifier: Apache-2.0
#include "ctlab/rng.hpp"

#include <limits>

namespace ctlab {

namespace {

constexpr std::uint64_t splitmix(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

std::uint64_t derive_seed(std::initializer_list<std::uint64_t> coords) noexcept {
  std::uint64_t h = 0x243f6a8885a308d3ULL;
  for (const auto c : coords) {
    h = splitmix(h ^ splitmix(c));
  }
  return h;
}

std::uint64_t Rng::below(std::uint64_t bound) {
  // Reject the tail so every residue is equally likely.
  const std::uint64_t limit =
      std::numeric_limits<std::uint64_t>::max() -
      std::numeric_limits<std::uint64_t>::max() % bound;
  for (;;) {
    const std::uint64_t x = engine_();
    if (x < limit) return x % bound;
  }
}

}  // namespace ctlab
