/* Copyright 2026 The StaR-MoE Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#ifndef STARMOE_RNG_HPP_
#define STARMOE_RNG_HPP_

// Seeded generator with a bit-exact draw sequence on every platform.
//
// Raw bits come from std::mt19937_64, whose output sequence is fixed by the
// C++ standard. Distributions are implemented here rather than taken from
// <random>, whose distribution algorithms are implementation-defined:
//   uniform   = top 53 bits of one draw scaled into [0, 1)
//   normal    = Box-Muller on two uniforms, both outputs used in order
//   index(n)  = rejection-free multiply-shift on the top 32 bits (n < 2^32)

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <span>
#include <vector>

#include "starmoe/errors.hpp"
#include "starmoe/tensor.hpp"

namespace starmoe {

class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64() { return engine_(); }

  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
  }

  std::size_t index(std::size_t n) {
    detail::require(n > 0 && n <= 0xFFFFFFFFull, "SeededRng::index: bad range");
    return static_cast<std::size_t>(((engine_() >> 32) * n) >> 32);
  }

  // Fisher-Yates.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[index(i)]);
  }

  // Independent child stream; does not advance this generator.
  static SeededRng derive(std::uint64_t seed, std::uint64_t stream) {
    return SeededRng(splitmix64(seed ^ splitmix64(stream + 0x9E3779B97F4A7C15ull)));
  }

  static std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// mean + sqrt(var) * N(0, I). A zero variance reproduces the mean exactly.
inline Vector sample_gaussian_diag(std::span<const double> mean, std::span<const double> var,
                                   SeededRng& rng) {
  detail::require(mean.size() == var.size(), "sample_gaussian_diag: length mismatch");
  Vector out(mean.size());
  for (std::size_t i = 0; i < mean.size(); ++i) {
    if (!(var[i] >= 0.0)) throw InvalidArgument("sample_gaussian_diag: negative variance");
    out[i] = mean[i] + std::sqrt(var[i]) * rng.normal();
  }
  return out;
}

inline DenseMatrix gaussian_matrix(std::size_t rows, std::size_t cols, double stddev,
                                   SeededRng& rng) {
  DenseMatrix m(rows, cols);
  for (double& v : m.data()) v = stddev * rng.normal();
  return m;
}

}  // namespace starmoe

#endif  // STARMOE_RNG_HPP_
