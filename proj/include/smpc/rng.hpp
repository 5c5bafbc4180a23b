#pragma once

#include <cmath>
#include <cstdint>

#include <Eigen/Dense>

namespace smpc {

// Counter-based pseudo-random generator built on the splitmix64 finalizer.
// State never mutates implicitly: the k-th draw of stream s under seed b is a
// pure function of (b, s, k), which makes parallel Monte Carlo runs
// reproducible regardless of scheduling. Statistical quality of splitmix64 is
// adequate for simulation noise (passes BigCrush as a 64-bit mixer).
class CounterRng {
 public:
  CounterRng(std::uint64_t seed, std::uint64_t stream = 0)
      : key_(mix(mix(seed) ^ mix(stream * 0x9E3779B97F4A7C15ULL + 1))) {}

  std::uint64_t next_u64() { return mix(key_ + (++counter_) * 0x9E3779B97F4A7C15ULL); }

  // Uniform double in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Standard normal via Box-Muller; draws are generated in pairs.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  // Zero-mean, unit-variance Laplace (scale 1/sqrt(2)).
  double laplace() {
    const double u = uniform() - 0.5;
    const double s = u < 0 ? -1.0 : 1.0;
    return -s * std::log(1.0 - 2.0 * std::abs(u)) * 0.70710678118654752440;
  }

  // Zero-mean, unit-variance uniform (half-width sqrt(3)).
  double uniform_centered() { return (uniform() - 0.5) * 3.4641016151377545871; }

  Eigen::VectorXd normal_vector(Eigen::Index n) {
    Eigen::VectorXd v(n);
    for (Eigen::Index i = 0; i < n; ++i) v[i] = normal();
    return v;
  }

  // Sample from N(0, sigma) given a precomputed Cholesky factor L (sigma = L L').
  Eigen::VectorXd gaussian(const Eigen::MatrixXd& chol_lower) {
    return chol_lower * normal_vector(chol_lower.cols());
  }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z ^= z >> 30;
    z *= 0xBF58476D1CE4E5B9ULL;
    z ^= z >> 27;
    z *= 0x94D049BB133111EBULL;
    z ^= z >> 31;
    return z;
  }

  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace smpc
