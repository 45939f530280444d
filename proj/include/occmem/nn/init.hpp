#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "occmem/nn/tensor.hpp"

namespace occmem::nn {

using Rng = std::mt19937_64;

// Deterministic per-purpose stream: mixes a base seed with a stream id so
// independent consumers never share state.
inline Rng make_rng(std::uint64_t seed, std::uint64_t stream = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream),
                    static_cast<std::uint32_t>(stream >> 32)};
  return Rng(seq);
}

// Box-Muller from raw 64-bit draws; std::normal_distribution is not
// guaranteed identical across standard library implementations.
template <typename T>
T normal(Rng& rng, T stddev) {
  constexpr double two_pi = 6.283185307179586476925286766559;
  const double u1 = (static_cast<double>(rng() >> 11) + 1.0) * 0x1.0p-53;
  const double u2 = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  return static_cast<T>(std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2) * stddev);
}

inline double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

inline double uniform(Rng& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

// Integer in [lo, hi].
inline int uniform_int(Rng& rng, int lo, int hi) {
  const auto span = static_cast<std::uint64_t>(hi - lo + 1);
  return lo + static_cast<int>(rng() % span);
}

template <typename T>
Tensor<T> randn(Shape s, Rng& rng, T stddev = T(1)) {
  Tensor<T> t(s);
  for (auto& v : t.vec()) v = normal<T>(rng, stddev);
  return t;
}

// He-normal initialisation for a conv/linear weight of shape (out, in, k, k).
template <typename T>
Tensor<T> he_normal(Shape s, Rng& rng) {
  const double fan_in = static_cast<double>(s.c) * s.h * s.w;
  return randn<T>(s, rng, static_cast<T>(std::sqrt(2.0 / fan_in)));
}

// Adds gain * identity: output channel i reads input channel in_offset + i.
template <typename T>
void add_identity_kernel(Tensor<T>& w, int in_offset, int channels, T gain) {
  const int k = w.h();
  for (int i = 0; i < channels; ++i) w.at(i, in_offset + i, k / 2, k / 2) += gain;
}

}  // namespace occmem::nn
