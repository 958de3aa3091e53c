#pragma once

#include <cstdint>
#include <cmath>
#include <numbers>
#include <random>
#include <vector>

#include "czsl/tensor.hpp"

namespace czsl {

// Deterministic RNG. All distributions are implemented on top of the raw
// mt19937_64 stream (no std:: distribution objects) so that identical seeds
// give identical draws on every platform and standard library.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t next_u64() { return gen_(); }

  // Uniform in [0, 1).
  double uniform() { return double(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). n must be positive.
  int64_t uniform_int(int64_t n) {
    // 128-bit multiply trick; bias is < n / 2^64 which is negligible here.
    return static_cast<int64_t>((static_cast<__uint128_t>(gen_()) * static_cast<__uint128_t>(n)) >> 64);
  }

  // Standard normal via Box-Muller.
  double gaussian() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

  Tensor gaussian_vec(int n) {
    Tensor t = Tensor::zeros({n});
    for (int i = 0; i < n; ++i) t.at(i) = static_cast<real>(gaussian());
    return t;
  }

  std::vector<int> permutation(int n) {
    std::vector<int> p(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) p[static_cast<size_t>(i)] = i;
    for (int i = n - 1; i > 0; --i)
      std::swap(p[static_cast<size_t>(i)], p[static_cast<size_t>(uniform_int(i + 1))]);
    return p;
  }

  // Derives an independent child stream; used to give each concern
  // (init, shuffle, noise, ...) its own seed from one master seed.
  Rng split(uint64_t stream) {
    uint64_t s = next_u64();
    return Rng(s ^ (0x9e3779b97f4a7c15ULL * (stream + 1)));
  }

  // Draw an index from a discrete distribution (probabilities sum to ~1).
  int sample_discrete(const std::vector<double>& probs) {
    double u = uniform();
    double acc = 0.0;
    for (size_t i = 0; i < probs.size(); ++i) {
      acc += probs[i];
      if (u < acc) return static_cast<int>(i);
    }
    return static_cast<int>(probs.size()) - 1;
  }

 private:
  std::mt19937_64 gen_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace czsl
