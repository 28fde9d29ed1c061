#pragma once
// Posterior-predictive machinery: K-step-ahead forecast simulation over the
// joint presence/count process, smoothed and coupled one-step fitted values,
// and neighbour-spread odds-ratio summaries.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "zscms/diagnostics.hpp"
#include "zscms/engine.hpp"
#include "zscms/filtering.hpp"

namespace zscms {

// Future covariate paths for horizons 1..n_times; the scenario may extend
// beyond the requested forecast length.
struct ForecastScenario {
  CovariatePool covs;           // area covariates at horizons 1..n_times
  PairCovariatePool pair_covs;  // pair covariates at the same horizons

  int horizon() const {
    if (covs.n_cols() > 0) return covs.n_times;
    if (pair_covs.n_cols() > 0) return pair_covs.n_times;
    return covs.n_times;  // covariate-free scenario: rely on the declared span
  }
};

// Panel extended by K future periods: counts for t > T start at zero and are
// filled in per draw as the simulation walks forward.
inline PanelData augment_panel(const PanelData& d, const ForecastScenario& sc, int K) {
  if (K < 1) throw ValidationError("forecast horizon must be at least 1");
  auto need_times = [&](int have, const char* what) {
    if (have < K)
      throw ValidationError(std::string(what) + " scenario horizon is shorter than the forecast");
  };
  PanelData out;
  out.graph = d.graph;
  out.T = d.T + K;
  out.y.assign(static_cast<size_t>(d.n_areas()) * out.T, 0);
  for (int i = 0; i < d.n_areas(); ++i)
    for (int t = 1; t <= d.T; ++t) out.count(i, t) = d.count(i, t);
  out.y0 = d.y0;

  if (d.covs.n_cols() > 0) {
    if (sc.covs.names != d.covs.names)
      throw ValidationError("scenario covariate columns do not match the fitted panel");
    if (sc.covs.n_areas != d.n_areas())
      throw ValidationError("scenario covariate area count mismatch");
    need_times(sc.covs.n_times, "area-covariate");
    out.covs.n_areas = d.n_areas();
    out.covs.n_times = out.T;
    out.covs.names = d.covs.names;
    out.covs.values.assign(static_cast<size_t>(d.n_areas()) * out.T * d.covs.n_cols(), 0.0);
    for (int i = 0; i < d.n_areas(); ++i)
      for (int k = 0; k < d.covs.n_cols(); ++k) {
        for (int t = 1; t <= d.T; ++t) out.covs.at(i, t, k) = d.covs.at(i, t, k);
        for (int h = 1; h <= K; ++h) out.covs.at(i, d.T + h, k) = sc.covs.at(i, h, k);
      }
  }
  if (d.pair_covs.n_cols() > 0) {
    if (sc.pair_covs.names != d.pair_covs.names)
      throw ValidationError("scenario pair-covariate columns do not match the fitted panel");
    if (sc.pair_covs.n_slots != d.graph.n_slots())
      throw ValidationError("scenario pair-covariate slot count mismatch");
    need_times(sc.pair_covs.n_times, "pair-covariate");
    out.pair_covs.n_slots = d.graph.n_slots();
    out.pair_covs.n_times = out.T;
    out.pair_covs.names = d.pair_covs.names;
    out.pair_covs.values.assign(static_cast<size_t>(out.pair_covs.n_slots) * out.T *
                                    d.pair_covs.n_cols(),
                                0.0);
    for (int s = 0; s < out.pair_covs.n_slots; ++s)
      for (int k = 0; k < d.pair_covs.n_cols(); ++k) {
        for (int t = 1; t <= d.T; ++t) out.pair_covs.at(s, t, k) = d.pair_covs.at(s, t, k);
        for (int h = 1; h <= K; ++h) out.pair_covs.at(s, d.T + h, k) = sc.pair_covs.at(s, h, k);
      }
  }
  return out;
}

// Per-draw forecast paths: presence indicators, counts, and the presence
// probabilities themselves (summarized instead of the binary draws).
struct PredictiveDraws {
  int n_areas = 0, K = 0;
  long n_draws = 0;
  std::vector<uint8_t> S;
  std::vector<long> y;
  std::vector<double> pi;

  size_t idx(long m, int k, int i) const {
    return (static_cast<size_t>(m) * K + (k - 1)) * n_areas + i;
  }
  double presence_mean(int i, int k) const {
    double s = 0.0;
    for (long m = 0; m < n_draws; ++m) s += pi[idx(m, k, i)];
    return s / static_cast<double>(n_draws);
  }
  double count_mean(int i, int k) const {
    double s = 0.0;
    for (long m = 0; m < n_draws; ++m) s += static_cast<double>(y[idx(m, k, i)]);
    return s / static_cast<double>(n_draws);
  }
  double count_quantile(int i, int k, double q) const {
    std::vector<long> vals(n_draws);
    for (long m = 0; m < n_draws; ++m) vals[m] = y[idx(m, k, i)];
    std::sort(vals.begin(), vals.end());
    size_t pos = static_cast<size_t>(q * static_cast<double>(n_draws - 1) + 0.5);
    return static_cast<double>(vals[std::min(pos, vals.size() - 1)]);
  }
};

// Walk the fitted process forward K periods per posterior draw, starting from
// that draw's final-time states and the observed count history.
inline PredictiveDraws simulate_forecast(const Model& m, const PanelData& d,
                                         const PosteriorStore& fit, const ForecastScenario& sc,
                                         int K, Rng& rng) {
  const int n = d.n_areas(), T = d.T;
  PanelData aug = augment_panel(d, sc, K);
  PanelSource src{&aug};
  const bool zi = m.spec.zero_inflated;

  PredictiveDraws out;
  out.n_areas = n;
  out.K = K;
  out.n_draws = fit.kept_total();
  size_t total = static_cast<size_t>(out.n_draws) * K * n;
  out.S.assign(total, 1);
  out.y.assign(total, 0);
  out.pi.assign(total, 1.0);

  std::vector<int> s_prev(n), s_cur(n);
  long mdx = 0;
  for (const auto& chain : fit.chains) {
    for (long kd = 0; kd < chain.n_kept; ++kd, ++mdx) {
      ParamVector v(chain.draw(kd), chain.draw(kd) + chain.n_params);
      for (int i = 0; i < n; ++i) s_prev[i] = zi ? chain.final_states[static_cast<size_t>(kd) * n + i] : 1;
      for (int i = 0; i < n; ++i)
        for (int h = 1; h <= K; ++h) aug.count(i, T + h) = 0;
      for (int h = 1; h <= K; ++h) {
        int t = T + h;
        for (int i = 0; i < n; ++i) {
          int s = 1;
          double pi = 1.0;
          if (zi) {
            TransProbs p =
                transition_probs(m, v, src, i, t, [&](int j) { return s_prev[j]; });
            pi = s_prev[i] ? p.p11 : p.p01;
            s = rbern(rng, pi) ? 1 : 0;
          }
          long yv = 0;
          if (s) {
            double lam = mean_rate(m, v, src, i, t);
            yv = m.spec.family == EmissionFamily::NegBinomial ? rnegbin(rng, lam, dispersion(m, v, i))
                                                              : rpois(rng, lam);
          }
          size_t c = out.idx(mdx, h, i);
          out.S[c] = static_cast<uint8_t>(s);
          out.y[c] = yv;
          out.pi[c] = pi;
          s_cur[i] = s;
          aug.count(i, t) = yv;
        }
        std::swap(s_prev, s_cur);
      }
    }
  }
  return out;
}

// Posterior fitted values: presence probabilities and count replicates, with
// cells addressed as i*T + (t-1). presence0 carries the t = 0 column when the
// producing routine conditions on full state paths.
struct FittedDraws {
  int n_areas = 0, T = 0;
  long n_draws = 0;
  std::vector<double> presence;   // P(S_it = 1 | data) estimate per cell
  std::vector<double> presence0;  // optional t = 0 presence (smoothed values)
  std::vector<double> rep_mean, rep_sd;
  std::vector<long> reps;  // per-draw replicates, only when requested
  bool has_reps = false;
};

namespace detail {

inline void finalize_moments(FittedDraws& f, const std::vector<double>& sum,
                             const std::vector<double>& sumsq) {
  size_t cells = sum.size();
  f.rep_mean.resize(cells);
  f.rep_sd.resize(cells);
  double n = static_cast<double>(f.n_draws);
  for (size_t c = 0; c < cells; ++c) {
    f.rep_mean[c] = sum[c] / n;
    double ss = sumsq[c] - n * f.rep_mean[c] * f.rep_mean[c];
    f.rep_sd[c] = f.n_draws > 1 ? std::sqrt(std::max(ss, 0.0) / (n - 1.0)) : 0.0;
  }
}

}  // namespace detail

// Smoothed fitted values: per stored state-field draw, replicate counts from
// the emission law conditional on the drawn presence field; presence is the
// across-draw mean of the field (the undetected-presence probability at
// zero-count cells).
inline FittedDraws smoothed_fitted(const Model& m, const PanelData& d, const PosteriorStore& fit,
                                   Rng& rng, bool store_replicates = false) {
  const int n = d.n_areas(), T = d.T;
  const bool zi = m.spec.zero_inflated;
  if (zi && !fit.full_states_stored)
    throw ValidationError("smoothed fitted values need retained state fields");
  PanelSource src{&d};

  FittedDraws out;
  out.n_areas = n;
  out.T = T;
  size_t cells = static_cast<size_t>(n) * T;
  std::vector<double> psum(cells, 0.0), p0sum(n, 0.0);
  std::vector<double> rsum(cells, 0.0), rsq(cells, 0.0);

  long total = 0;
  for (const auto& chain : fit.chains) {
    long n_state = zi ? chain.n_state_draws : chain.n_kept;
    for (long sd = 0; sd < n_state; ++sd, ++total) {
      long kd = zi ? std::min(sd * chain.state_stride, chain.n_kept - 1) : sd;
      ParamVector v(chain.draw(kd), chain.draw(kd) + chain.n_params);
      const uint8_t* field =
          zi ? chain.full_states.data() + static_cast<size_t>(sd) * n * (T + 1) : nullptr;
      for (int i = 0; i < n; ++i) {
        double r = dispersion(m, v, i);
        if (zi) p0sum[i] += field[static_cast<size_t>(i) * (T + 1)];
        for (int t = 1; t <= T; ++t) {
          int s = zi ? field[static_cast<size_t>(i) * (T + 1) + t] : 1;
          long rep = 0;
          if (s) {
            double lam = mean_rate(m, v, src, i, t);
            rep = m.spec.family == EmissionFamily::NegBinomial ? rnegbin(rng, lam, r)
                                                               : rpois(rng, lam);
          }
          size_t c = static_cast<size_t>(i) * T + (t - 1);
          psum[c] += s;
          rsum[c] += static_cast<double>(rep);
          rsq[c] += static_cast<double>(rep) * static_cast<double>(rep);
          if (store_replicates) out.reps.push_back(rep);
        }
      }
    }
  }
  if (total == 0) throw ValidationError("no stored draws available for fitted values");
  out.n_draws = total;
  out.has_reps = store_replicates;
  out.presence.resize(cells);
  for (size_t c = 0; c < cells; ++c) out.presence[c] = psum[c] / static_cast<double>(total);
  out.presence0.resize(n);
  for (int i = 0; i < n; ++i)
    out.presence0[i] = zi ? p0sum[i] / static_cast<double>(total) : 1.0;
  detail::finalize_moments(out, rsum, rsq);
  return out;
}

// Coupled one-step-ahead fitted values: per stored draw, re-run the block
// forward filter so each in-block cell sees data only through t-1 (out-of-
// block states come from the stored field), then sample presence from the
// predictive-stage distribution and replicate the count from the emission law.
inline FittedDraws coupled_one_step_fitted(const Model& m, const PanelData& d,
                                           const InitialStateDist& init, const PosteriorStore& fit,
                                           int block_size, Rng& rng,
                                           bool store_replicates = false) {
  const int n = d.n_areas(), T = d.T;
  if (!m.spec.zero_inflated)
    throw ValidationError("coupled one-step fitted values need the zero-state layer");
  if (!fit.full_states_stored)
    throw ValidationError("coupled one-step fitted values need retained state fields");
  PanelSource src{&d};
  BlockPlan plan = build_blocks(d, init, block_size);
  BlockFilter bf(m, d, init);
  BlockFilter::Options opt;
  opt.record_predictive = true;

  FittedDraws out;
  out.n_areas = n;
  out.T = T;
  size_t cells = static_cast<size_t>(n) * T;
  std::vector<double> psum(cells, 0.0), rsum(cells, 0.0), rsq(cells, 0.0);
  StateField S = initialize_states(d, init);

  long total = 0;
  for (const auto& chain : fit.chains) {
    for (long sd = 0; sd < chain.n_state_draws; ++sd, ++total) {
      long kd = std::min(sd * chain.state_stride, chain.n_kept - 1);
      ParamVector v(chain.draw(kd), chain.draw(kd) + chain.n_params);
      const uint8_t* field = chain.full_states.data() + static_cast<size_t>(sd) * n * (T + 1);
      for (int i = 0; i < n; ++i)
        for (int t = 0; t <= T; ++t) S.set(i, t, field[static_cast<size_t>(i) * (T + 1) + t]);

      std::vector<uint8_t> in_plan(n, 0);
      std::vector<long> rep_buf(cells, 0);
      for (size_t b = 0; b < plan.blocks.size(); ++b) {
        const std::vector<int>& block = plan.blocks[b];
        bf.forward(block, plan.boundaries[b], S, v, opt);
        for (int k = 0; k < static_cast<int>(block.size()); ++k) {
          int i = block[k];
          in_plan[i] = 1;
          double r = dispersion(m, v, i);
          for (int t = 1; t <= T; ++t) {
            double pres = bf.predictive_presence(k, t);
            int s = rbern(rng, pres) ? 1 : 0;
            long rep = 0;
            if (s) {
              double lam = mean_rate(m, v, src, i, t);
              rep = m.spec.family == EmissionFamily::NegBinomial ? rnegbin(rng, lam, r)
                                                                 : rpois(rng, lam);
            }
            size_t c = static_cast<size_t>(i) * T + (t - 1);
            psum[c] += pres;
            rsum[c] += static_cast<double>(rep);
            rsq[c] += static_cast<double>(rep) * static_cast<double>(rep);
            rep_buf[c] = rep;
          }
        }
      }
      // areas outside every block (forced everywhere) have deterministic
      // presence: y > 0 at t forces presence, otherwise the fixed state value
      for (int i = 0; i < n; ++i) {
        if (in_plan[i]) continue;
        double r = dispersion(m, v, i);
        for (int t = 1; t <= T; ++t) {
          int s = S.at(i, t);
          long rep = 0;
          if (s) {
            double lam = mean_rate(m, v, src, i, t);
            rep = m.spec.family == EmissionFamily::NegBinomial ? rnegbin(rng, lam, r)
                                                               : rpois(rng, lam);
          }
          size_t c = static_cast<size_t>(i) * T + (t - 1);
          psum[c] += s;
          rsum[c] += static_cast<double>(rep);
          rsq[c] += static_cast<double>(rep) * static_cast<double>(rep);
          rep_buf[c] = rep;
        }
      }
      if (store_replicates) out.reps.insert(out.reps.end(), rep_buf.begin(), rep_buf.end());
    }
  }
  if (total == 0) throw ValidationError("no stored state draws available");
  out.n_draws = total;
  out.has_reps = store_replicates;
  out.presence.resize(cells);
  for (size_t c = 0; c < cells; ++c) out.presence[c] = psum[c] / static_cast<double>(total);
  detail::finalize_moments(out, rsum, rsq);
  return out;
}

// Per-draw odds-ratio of neighbour j's presence on area i's next-state odds,
// using the draw's final-time state of i: present -> persistence coupling,
// absent -> reemergence coupling.
inline std::vector<double> spread_odds_ratio(const Model& m, const PanelData& d,
                                             const PosteriorStore& fit, int i, int j, int t) {
  if (!m.spec.zero_inflated || !m.spec.trans.coupled)
    throw ValidationError("spread odds ratios need the coupled zero-state layer");
  if (t < 1 || t > d.T) throw ValidationError("spread odds ratio time out of range");
  const NeighborGraph& g = d.graph;
  int jn = -1;
  for (int k = 0; k < g.degree(i); ++k)
    if (g.begin(i)[k] == j) jn = k;
  if (jn < 0) throw ValidationError("spread odds ratio requires adjacent areas");
  PanelSource src{&d};

  std::vector<double> out;
  out.reserve(fit.kept_total());
  for (const auto& chain : fit.chains)
    for (long kd = 0; kd < chain.n_kept; ++kd) {
      ParamVector v(chain.draw(kd), chain.draw(kd) + chain.n_params);
      int s = chain.final_states[static_cast<size_t>(kd) * d.n_areas() + i];
      double phi = s ? coupling11(m, v, src, i, jn, t) : coupling01(m, v, src, i, jn, t);
      out.push_back(std::exp(phi));
    }
  return out;
}

struct SpreadEntry {
  int from = 0, to = 0;        // neighbour j -> area i
  double prob_exceed = 0.0;    // posterior P(odds ratio > threshold)
};

// One row per ordered neighbour pair; the arrow rule keeps rows whose
// exceedance probability passes the caller's cutoff. Draw-major evaluation so
// each posterior draw is unpacked once for all pairs.
inline std::vector<SpreadEntry> spread_odds_table(const Model& m, const PanelData& d,
                                                  const PosteriorStore& fit, double threshold,
                                                  int t) {
  if (!m.spec.zero_inflated || !m.spec.trans.coupled)
    throw ValidationError("spread odds ratios need the coupled zero-state layer");
  if (t < 1 || t > d.T) throw ValidationError("spread odds ratio time out of range");
  PanelSource src{&d};
  std::vector<SpreadEntry> out;
  std::vector<long> hits;
  for (int i = 0; i < d.n_areas(); ++i)
    for (int k = 0; k < d.graph.degree(i); ++k) out.push_back({d.graph.begin(i)[k], i, 0.0});
  hits.assign(out.size(), 0);

  long total = 0;
  for (const auto& chain : fit.chains)
    for (long kd = 0; kd < chain.n_kept; ++kd, ++total) {
      ParamVector v(chain.draw(kd), chain.draw(kd) + chain.n_params);
      size_t row = 0;
      for (int i = 0; i < d.n_areas(); ++i) {
        int s = chain.final_states[static_cast<size_t>(kd) * d.n_areas() + i];
        for (int k = 0; k < d.graph.degree(i); ++k, ++row) {
          double phi = s ? coupling11(m, v, src, i, k, t) : coupling01(m, v, src, i, k, t);
          hits[row] += std::exp(phi) > threshold;
        }
      }
    }
  for (size_t r = 0; r < out.size(); ++r)
    out[r].prob_exceed = static_cast<double>(hits[r]) / static_cast<double>(total);
  return out;
}

}  // namespace zscms
