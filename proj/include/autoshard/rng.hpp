#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>

#include "autoshard/common.hpp"

namespace autoshard {

// mt19937_64 is bit-exact across platforms; the std distribution adaptors are
// not, so all transforms below are hand-rolled. Every sampler documents how
// many engine draws it consumes to keep streams replayable.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t next_u64() { return eng_(); }

  // [0, 1), 53-bit mantissa. One draw.
  double uniform() {
    return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // log-uniform over [lo, hi], lo > 0.
  double log_uniform(double lo, double hi) {
    return std::exp(uniform(std::log(lo), std::log(hi)));
  }

  // [0, n). Rejection sampling, unbiased; >= 1 draw.
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw ConfigError("Rng::below: n must be positive");
    const std::uint64_t limit =
        std::numeric_limits<std::uint64_t>::max() -
        std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t x;
    do {
      x = eng_();
    } while (x >= limit);
    return x % n;
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Standard normal via Box-Muller (cosine branch). Exactly two draws.
  double normal() {
    const double u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log1p(-u1));
    return r * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  double lognormal(double sigma) {
    if (sigma <= 0.0) return 1.0;  // degenerate, consumes nothing
    return std::exp(sigma * normal());
  }

  // Fisher-Yates over [first, last).
  template <typename It>
  void shuffle(It first, It last) {
    const auto n = static_cast<std::uint64_t>(last - first);
    for (std::uint64_t i = n; i > 1; --i) {
      std::swap(first[i - 1], first[below(i)]);
    }
  }

 private:
  std::mt19937_64 eng_;
};

// Lomax (shifted Pareto) on [0, inf): survival (1 + x/lambda)^(-alpha),
// mean lambda/(alpha-1) for alpha > 1. Inverse-CDF, one draw.
inline double sample_lomax(Rng& rng, double alpha, double lambda) {
  if (lambda <= 0.0) return 0.0;
  const double u = rng.uniform();
  return lambda * (std::pow(1.0 - u, -1.0 / alpha) - 1.0);
}

// Zipf over ranks {1..n} with P(k) proportional to k^(-s), by
// rejection-inversion (Hormann & Derflinger 1996). O(1) per sample and no
// setup table, which matters for hash-size-scale domains.
class ZipfSampler {
 public:
  ZipfSampler(std::uint64_t n, double s) : n_(n), s_(s) {
    if (n == 0) throw ConfigError("ZipfSampler: n must be positive");
    if (s <= 0.0) throw ConfigError("ZipfSampler: exponent must be positive");
    h_x1_ = h_integral(1.5) - 1.0;
    h_n_ = h_integral(static_cast<double>(n) + 0.5);
    cut_ = 2.0 - h_integral_inverse(h_integral(2.5) - h(2.0));
  }

  std::uint64_t operator()(Rng& rng) const {
    if (n_ == 1) return 1;
    for (;;) {
      const double u = h_n_ + rng.uniform() * (h_x1_ - h_n_);
      const double x = h_integral_inverse(u);
      double k = std::floor(x + 0.5);
      if (k < 1.0) k = 1.0;
      if (k > static_cast<double>(n_)) k = static_cast<double>(n_);
      if (k - x <= cut_ || u >= h_integral(k + 0.5) - h(k)) {
        return static_cast<std::uint64_t>(k);
      }
    }
  }

 private:
  // H(x) = integral of (t)^(-s) written in a cancellation-safe form.
  double h_integral(double x) const {
    const double lx = std::log(x);
    return helper2((1.0 - s_) * lx) * lx;
  }
  double h(double x) const { return std::exp(-s_ * std::log(x)); }
  double h_integral_inverse(double x) const {
    double t = x * (1.0 - s_);
    if (t < -1.0) t = -1.0;
    return std::exp(helper1(t) * x);
  }
  static double helper1(double x) {
    return std::fabs(x) > 1e-8 ? std::log1p(x) / x : 1.0 - x / 2.0 + x * x / 3.0;
  }
  static double helper2(double x) {
    return std::fabs(x) > 1e-8 ? std::expm1(x) / x : 1.0 + x / 2.0 + x * x / 6.0;
  }

  std::uint64_t n_;
  double s_;
  double h_x1_ = 0.0, h_n_ = 0.0, cut_ = 0.0;
};

}  // namespace autoshard
