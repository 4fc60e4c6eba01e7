#pragma once

#include <cstdint>
#include <random>

#include "slimunet/tensor.hpp"

namespace slimunet {

/// Engine used for every stochastic draw; seeding it fixes all results.
using Rng = std::mt19937_64;

template <class T>
Tensor<T> randn(const Shape& shape, Rng& rng) {
  Tensor<T> t(shape);
  std::normal_distribution<double> dist(0.0, 1.0);
  for (auto& x : t.span()) x = static_cast<T>(dist(rng));
  return t;
}

/// Uniform double in [0, 1).
inline double uniform01(Rng& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }

/// Independent child stream derived from a seed and a label.
inline Rng derive_rng(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  return Rng(seq);
}

}  // namespace slimunet
