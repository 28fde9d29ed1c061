#pragma once
// Convergence and fit diagnostics: effective sample size with
// initial-monotone autocovariance truncation, the classic Gelman-Rubin
// potential scale reduction factor, WAIC assembled from the streaming
// pointwise-likelihood accumulators kept by the fitting engine, and
// Pearson-residual autocorrelation tables.

#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "zscms/engine.hpp"

namespace zscms {

struct EssResult {
  double ess = 0.0;
  bool degenerate = false;  // constant input: ESS reported as n with this flag
};

// Effective sample size n / (1 + 2 sum of autocorrelations), truncating the
// autocovariance sum where consecutive pair sums stop being positive and
// enforcing monotone decay of the pair sums (initial-monotone sequence).
inline EssResult ess(const std::vector<double>& draws) {
  const size_t n = draws.size();
  if (n < 100) throw ValidationError("ess requires at least 100 draws");
  double mean = 0.0;
  for (double v : draws) mean += v;
  mean /= static_cast<double>(n);

  auto gamma_at = [&](size_t k) {
    double s = 0.0;
    for (size_t t = 0; t + k < n; ++t) s += (draws[t] - mean) * (draws[t + k] - mean);
    return s / static_cast<double>(n);
  };
  double g0 = gamma_at(0);
  if (!(g0 > 0.0)) return {static_cast<double>(n), true};

  // accumulate positive, monotone pair sums Gamma_m = gamma_{2m} + gamma_{2m+1}
  double acc = 0.0;
  double prev_pair = std::numeric_limits<double>::infinity();
  for (size_t m = 0; 2 * m + 1 < n; ++m) {
    double pair = gamma_at(2 * m) + gamma_at(2 * m + 1);
    if (!(pair > 0.0)) break;
    pair = std::min(pair, prev_pair);
    acc += pair;
    prev_pair = pair;
  }
  double var_est = acc > 0.0 ? 2.0 * acc - g0 : g0;
  double out = static_cast<double>(n) * g0 / var_est;
  if (!(out > 0.0) || out > static_cast<double>(n)) out = static_cast<double>(n);
  return {out, false};
}

// Classic potential scale reduction factor over >= 2 equal-length chains.
inline double gelman_rubin(const std::vector<std::vector<double>>& chains) {
  const size_t m = chains.size();
  if (m < 2) throw ValidationError("gelman_rubin requires at least 2 chains");
  const size_t n = chains[0].size();
  if (n < 2) throw ValidationError("gelman_rubin requires chains of length >= 2");
  for (const auto& c : chains)
    if (c.size() != n) throw ValidationError("gelman_rubin chains must have equal length");

  std::vector<double> means(m, 0.0), vars(m, 0.0);
  for (size_t j = 0; j < m; ++j) {
    for (double v : chains[j]) means[j] += v;
    means[j] /= static_cast<double>(n);
    for (double v : chains[j]) vars[j] += (v - means[j]) * (v - means[j]);
    vars[j] /= static_cast<double>(n - 1);
  }
  double grand = 0.0;
  for (double v : means) grand += v;
  grand /= static_cast<double>(m);
  double w = 0.0, b_over_n = 0.0;
  for (size_t j = 0; j < m; ++j) {
    w += vars[j];
    b_over_n += (means[j] - grand) * (means[j] - grand);
  }
  w /= static_cast<double>(m);
  b_over_n /= static_cast<double>(m - 1);

  if (w <= 0.0) return b_over_n <= 0.0 ? 1.0 : std::numeric_limits<double>::infinity();
  double var_plus = (static_cast<double>(n - 1) / static_cast<double>(n)) * w + b_over_n;
  return std::sqrt(var_plus / w);
}

struct WaicResult {
  double waic = 0.0;
  double lppd = 0.0;    // log pointwise predictive density
  double p_waic = 0.0;  // effective number of parameters
};

// Assemble WAIC from the per-cell accumulators streamed during fitting:
// lppd sums log of per-draw-averaged pointwise likelihoods, and the penalty
// sums the per-cell population variance of the log contributions (invariant
// under duplicating draws, unlike the n-1 form).
inline WaicResult waic_from_store(const PosteriorStore& fit) {
  if (fit.chains.empty()) throw ValidationError("waic requires at least one chain");
  const size_t cells = fit.chains[0].w_lse.size();
  long total_draws = 0;
  for (const auto& c : fit.chains) {
    if (c.w_lse.size() != cells) throw ValidationError("waic accumulator size mismatch");
    total_draws += c.w_n;
  }
  if (total_draws <= 0) throw ValidationError("waic requires stored draws");
  const double log_m = std::log(static_cast<double>(total_draws));

  WaicResult out;
  for (size_t c = 0; c < cells; ++c) {
    double lse = kNegInf, sum = 0.0, sq = 0.0;
    for (const auto& ch : fit.chains) {
      lse = detail::logsumexp2(lse, ch.w_lse[c]);
      sum += ch.w_sum[c];
      sq += ch.w_sq[c];
    }
    if (!std::isfinite(lse))
      throw NumericalError("pointwise predictive contribution is zero across all draws");
    double mean_log = sum / static_cast<double>(total_draws);
    double var_log = sq / static_cast<double>(total_draws) - mean_log * mean_log;
    out.lppd += lse - log_m;
    out.p_waic += std::max(var_log, 0.0);
  }
  out.waic = -2.0 * (out.lppd - out.p_waic);
  return out;
}

struct ParamDiag {
  std::string name;
  double ess = 0.0;           // summed across chains
  bool ess_degenerate = false;
  double rhat = std::numeric_limits<double>::quiet_NaN();  // NaN when single-chain
};

struct DiagnosticsReport {
  std::vector<ParamDiag> params;
  WaicResult waic;
  double min_ess = 0.0;
  double max_rhat = std::numeric_limits<double>::quiet_NaN();
};

inline DiagnosticsReport diagnose_fit(const PosteriorStore& fit) {
  DiagnosticsReport rep;
  rep.waic = waic_from_store(fit);
  rep.min_ess = std::numeric_limits<double>::infinity();
  const size_t n_chains = fit.chains.size();
  for (int p = 0; p < fit.n_params(); ++p) {
    ParamDiag d;
    d.name = fit.lay.names[p];
    std::vector<std::vector<double>> cols(n_chains);
    for (size_t c = 0; c < n_chains; ++c) {
      cols[c] = fit.column(static_cast<int>(c), p);
      EssResult e = ess(cols[c]);
      d.ess += e.ess;
      d.ess_degenerate = d.ess_degenerate || e.degenerate;
    }
    if (n_chains >= 2) {
      d.rhat = gelman_rubin(cols);
      if (std::isnan(rep.max_rhat) || d.rhat > rep.max_rhat) rep.max_rhat = d.rhat;
    }
    rep.min_ess = std::min(rep.min_ess, d.ess);
    rep.params.push_back(std::move(d));
  }
  return rep;
}

struct PearsonAcf {
  int max_lag = 0;
  double band = 0.0;                      // 95% white-noise band half-width
  std::vector<std::vector<double>> acf;   // per area, lags 0..max_lag
  std::vector<uint8_t> degenerate;        // area had a zero-variance cell or flat residuals
};

// Autocorrelation of standardized residuals (y - fitted mean) / fitted sd per
// area; fitted moments come from replicate draws (module prediction). Areas
// containing a zero-variance cell are flagged and their ACF left undefined.
inline PearsonAcf pearson_residual_acf(const PanelData& d, const std::vector<double>& rep_mean,
                                       const std::vector<double>& rep_sd, int max_lag) {
  const int n = d.n_areas(), T = d.T;
  const size_t cells = static_cast<size_t>(n) * T;
  if (rep_mean.size() != cells || rep_sd.size() != cells)
    throw ValidationError("pearson_residual_acf: moment vectors must have one entry per observation");
  if (max_lag < 1 || max_lag >= T)
    throw ValidationError("pearson_residual_acf: max_lag must be in [1, T)");
  const double nan = std::numeric_limits<double>::quiet_NaN();

  PearsonAcf out;
  out.max_lag = max_lag;
  out.band = 1.96 / std::sqrt(static_cast<double>(T));
  out.acf.assign(n, std::vector<double>(max_lag + 1, nan));
  out.degenerate.assign(n, 0);

  std::vector<double> r(T);
  for (int i = 0; i < n; ++i) {
    bool bad = false;
    for (int t = 1; t <= T; ++t) {
      size_t c = static_cast<size_t>(i) * T + (t - 1);
      if (!(rep_sd[c] > 0.0)) {
        bad = true;
        break;
      }
      r[t - 1] = (static_cast<double>(d.count(i, t)) - rep_mean[c]) / rep_sd[c];
    }
    if (!bad) {
      double mean = 0.0;
      for (double v : r) mean += v;
      mean /= static_cast<double>(T);
      double g0 = 0.0;
      for (double v : r) g0 += (v - mean) * (v - mean);
      bad = !(g0 > 0.0);
      if (!bad) {
        for (int k = 0; k <= max_lag; ++k) {
          double gk = 0.0;
          for (int t = 0; t + k < T; ++t) gk += (r[t] - mean) * (r[t + k] - mean);
          out.acf[i][k] = gk / g0;
        }
      }
    }
    out.degenerate[i] = bad ? 1 : 0;
  }
  return out;
}

}  // namespace zscms
