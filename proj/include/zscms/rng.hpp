#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "zscms/types.hpp"

namespace zscms {

using Rng = std::mt19937_64;

/// Independent stream derived from a master seed; stream 0 is the master
/// itself offset so that (seed, 0) and (seed+1, 0) never collide trivially.
inline Rng make_rng(uint64_t master_seed, uint64_t stream) {
  std::seed_seq seq{static_cast<uint32_t>(master_seed), static_cast<uint32_t>(master_seed >> 32),
                    static_cast<uint32_t>(stream), static_cast<uint32_t>(stream >> 32)};
  return Rng(seq);
}

inline double runif(Rng& g) { return std::uniform_real_distribution<double>(0.0, 1.0)(g); }
inline double runif(Rng& g, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(g);
}
inline double rnorm(Rng& g) { return std::normal_distribution<double>(0.0, 1.0)(g); }
inline double rnorm(Rng& g, double mean, double sd) {
  return std::normal_distribution<double>(mean, sd)(g);
}
inline double rgamma(Rng& g, double shape, double scale) {
  return std::gamma_distribution<double>(shape, scale)(g);
}
inline long rpois(Rng& g, double mean) { return std::poisson_distribution<long>(mean)(g); }
inline bool rbern(Rng& g, double p) { return runif(g) < p; }

/// Negative binomial with mean lambda and overdispersion r
/// (variance lambda (1 + lambda / r)) via the gamma-Poisson mixture.
inline long rnegbin(Rng& g, double lambda, double r) {
  if (lambda <= 0.0) return 0;
  double mix = rgamma(g, r, lambda / r);
  return mix > 0.0 ? rpois(g, mix) : 0;
}

/// Draw an index proportional to exp(logw), tolerating -inf entries.
inline int sample_categorical_log(Rng& g, const double* logw, int n) {
  double m = kNegInf;
  for (int k = 0; k < n; ++k) m = std::max(m, logw[k]);
  if (!(m > kNegInf)) throw NumericalError("categorical draw over zero-mass weights");
  double total = 0.0;
  for (int k = 0; k < n; ++k) total += std::exp(logw[k] - m);
  double u = runif(g) * total;
  double acc = 0.0;
  for (int k = 0; k < n; ++k) {
    acc += std::exp(logw[k] - m);
    if (u <= acc) return k;
  }
  return n - 1;
}

/// Type-7 quantile (linear interpolation of order statistics).
inline double quantile_sorted(const std::vector<double>& sorted, double p) {
  if (sorted.empty()) throw ValidationError("quantile of empty sample");
  if (sorted.size() == 1) return sorted[0];
  double h = p * (static_cast<double>(sorted.size()) - 1.0);
  size_t lo = static_cast<size_t>(std::floor(h));
  size_t hi = std::min(lo + 1, sorted.size() - 1);
  double w = h - static_cast<double>(lo);
  return (1.0 - w) * sorted[lo] + w * sorted[hi];
}

inline double quantile(std::vector<double> sample, double p) {
  std::sort(sample.begin(), sample.end());
  return quantile_sorted(sample, p);
}

}  // namespace zscms
