#pragma once

#include <array>
#include <cmath>

#include "zscms/types.hpp"

namespace zscms {

/// Linear predictors are clamped to this range before exp/logistic so rates
/// stay finite and probabilities stay strictly inside (0,1).
inline constexpr double kLinPredCap = 30.0;

inline double clamp_linpred(double x) {
  return x > kLinPredCap ? kLinPredCap : (x < -kLinPredCap ? -kLinPredCap : x);
}

inline double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// log(logistic(x)), stable on both tails.
inline double log_logistic(double x) {
  return x >= 0.0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
}

/// Negative binomial pmf with mean lambda and overdispersion r;
/// variance is lambda (1 + lambda / r).
inline double log_nb_pmf(long y, double lambda, double r) {
  if (y < 0) return kNegInf;
  if (lambda <= 0.0) return y == 0 ? 0.0 : kNegInf;
  double lrl = std::log(r + lambda);
  double out = r * (std::log(r) - lrl);
  if (y > 0)
    out += std::lgamma(static_cast<double>(y) + r) - std::lgamma(r) -
           std::lgamma(static_cast<double>(y) + 1.0) +
           static_cast<double>(y) * (std::log(lambda) - lrl);
  return out;
}

inline double log_poisson_pmf(long y, double lambda) {
  if (y < 0) return kNegInf;
  if (lambda <= 0.0) return y == 0 ? 0.0 : kNegInf;
  return -lambda + static_cast<double>(y) * std::log(lambda) -
         std::lgamma(static_cast<double>(y) + 1.0);
}

/// log p(y | S = s): an absent area emits a structural zero, a present one
/// emits from the count family. r is ignored under Poisson emission.
inline double emission_logprob(long y, int s, double lambda, double r, EmissionFamily fam) {
  if (s == 0) return y == 0 ? 0.0 : kNegInf;
  return fam == EmissionFamily::NegBinomial ? log_nb_pmf(y, lambda, r)
                                            : log_poisson_pmf(y, lambda);
}

/// log P(y = 0 | S = s) without lgamma work: (r/(r+lambda))^(r s) under the
/// negative binomial, exp(-lambda s) under Poisson.
inline double emission_logzero(int s, double lambda, double r, EmissionFamily fam) {
  if (s == 0) return 0.0;
  return fam == EmissionFamily::NegBinomial ? r * (std::log(r) - std::log(r + lambda))
                                            : -lambda;
}

/// Model specification with its resolved parameter layout.
struct Model {
  ModelSpec spec;
  ParamLayout lay;
};

inline Model make_model(const ModelSpec& spec, int n_areas) {
  return Model{spec, build_layout(spec, n_areas)};
}

/// Covariate/count access for in-sample times t = 1..T.
/// Any source must provide cov, pair_cov, y_prev and graph with these
/// signatures; forecasting supplies a source backed by scenario paths.
struct PanelSource {
  const PanelData* d;
  double cov(int i, int t, int col) const { return d->covs.at(i, t, col); }
  double pair_cov(int slot, int t, int col) const { return d->pair_covs.at(slot, t, col); }
  long y_prev(int i, int t) const { return d->count_prev(i, t); }
  const NeighborGraph& graph() const { return d->graph; }
};

/// Mean rate lambda_it > 0. The endemic/epidemic variant is
/// exp(ar predictor) * y_{i,t-1} + exp(en predictor); when random intercepts
/// are active the per-area intercept replaces the shared one.
template <class Src>
double mean_rate(const Model& m, const ParamVector& v, const Src& src, int i, int t) {
  const ParamLayout& L = m.lay;
  const MeanModelSpec& ms = m.spec.mean;
  if (ms.variant == MeanVariant::LogLinear) {
    double lp = v[L.delta0];
    int nx = static_cast<int>(ms.x.size());
    for (int k = 0; k < nx; ++k) lp += v[L.delta + k] * src.cov(i, t, ms.x[k].col);
    if (ms.log_lag_count)
      lp += v[L.delta + nx] * std::log1p(static_cast<double>(src.y_prev(i, t)));
    return std::exp(clamp_linpred(lp));
  }
  double lp_ar = ms.ar_random_intercepts ? v[L.ar_re + i] : v[L.ar0];
  for (int k = 0; k < static_cast<int>(ms.ar.size()); ++k)
    lp_ar += v[L.ar + k] * src.cov(i, t, ms.ar[k].col);
  double lp_en = ms.en_random_intercepts ? v[L.en_re + i] : v[L.en0];
  for (int k = 0; k < static_cast<int>(ms.en.size()); ++k)
    lp_en += v[L.en + k] * src.cov(i, t, ms.en[k].col);
  return std::exp(clamp_linpred(lp_ar)) * static_cast<double>(src.y_prev(i, t)) +
         std::exp(clamp_linpred(lp_en));
}

/// Overdispersion r for area i (exp of the stored log scale).
inline double dispersion(const Model& m, const ParamVector& v, int i) {
  if (m.lay.gamma < 0) return 0.0;  // Poisson emission: unused
  return std::exp(m.spec.dispersion == DispersionForm::Global ? v[m.lay.gamma]
                                                              : v[m.lay.gamma + i]);
}

/// Log-odds contribution an infected neighbour j = NE(i)[jn] adds to the
/// reemergence logit of i at time t.
template <class Src>
double coupling01(const Model& m, const ParamVector& v, const Src& src, int i, int jn, int t) {
  if (!m.spec.trans.coupled) return 0.0;
  double phi = v[m.lay.zeta0c];
  int slot = src.graph().slot(i, jn);
  for (int k = 0; k < m.lay.n_zetac; ++k)
    phi += v[m.lay.zetac + k] * src.pair_cov(slot, t, m.spec.trans.c01[k].col);
  return phi;
}

/// Same for the persistence logit.
template <class Src>
double coupling11(const Model& m, const ParamVector& v, const Src& src, int i, int jn, int t) {
  if (!m.spec.trans.coupled) return 0.0;
  double phi = v[m.lay.eta0c];
  int slot = src.graph().slot(i, jn);
  for (int k = 0; k < m.lay.n_etac; ++k)
    phi += v[m.lay.etac + k] * src.pair_cov(slot, t, m.spec.trans.c11[k].col);
  return phi;
}

struct TransLogits {
  double lp01, lp11;  // unclamped reemergence / persistence linear predictors
};

struct TransProbs {
  double p01, p11;
};

/// Both transition logits of area i into time t. sprev(j) must return the
/// presence indicator of area j at t-1.
template <class Src, class PrevFn>
TransLogits transition_logits(const Model& m, const ParamVector& v, const Src& src, int i, int t,
                              PrevFn&& sprev) {
  const ParamLayout& L = m.lay;
  const TransitionSpec& ts = m.spec.trans;
  double lp01 = v[L.zeta0];
  double lp11 = v[L.eta0];
  int n01 = static_cast<int>(ts.z01.size());
  for (int k = 0; k < n01; ++k) lp01 += v[L.zeta + k] * src.cov(i, t, ts.z01[k].col);
  int n11 = static_cast<int>(ts.z11.size());
  for (int k = 0; k < n11; ++k) lp11 += v[L.eta + k] * src.cov(i, t, ts.z11[k].col);
  if (ts.z01_log_lag_count || ts.z11_log_lag_count) {
    double lag = std::log1p(static_cast<double>(src.y_prev(i, t)));
    if (ts.z01_log_lag_count) lp01 += v[L.zeta + n01] * lag;
    if (ts.z11_log_lag_count) lp11 += v[L.eta + n11] * lag;
  }
  if (ts.coupled) {
    const NeighborGraph& g = src.graph();
    const int* nb = g.begin(i);
    int deg = g.degree(i);
    for (int jn = 0; jn < deg; ++jn) {
      if (!sprev(nb[jn])) continue;
      lp01 += coupling01(m, v, src, i, jn, t);
      lp11 += coupling11(m, v, src, i, jn, t);
    }
  }
  return {lp01, lp11};
}

template <class Src, class PrevFn>
TransProbs transition_probs(const Model& m, const ParamVector& v, const Src& src, int i, int t,
                            PrevFn&& sprev) {
  TransLogits l = transition_logits(m, v, src, i, t, sprev);
  return {logistic(clamp_linpred(l.lp01)), logistic(clamp_linpred(l.lp11))};
}

/// Row-stochastic 2x2 transition matrix of area i into time t, rows indexed
/// by the previous state: {P(0->0), P(0->1), P(1->0), P(1->1)}.
template <class Src, class PrevFn>
std::array<double, 4> area_transition_matrix(const Model& m, const ParamVector& v, const Src& src,
                                             int i, int t, PrevFn&& sprev) {
  TransProbs p = transition_probs(m, v, src, i, t, sprev);
  return {1.0 - p.p01, p.p01, 1.0 - p.p11, p.p11};
}

/// Joint log density of counts and a complete state path:
/// emissions + initial states + transitions. Impossible configurations
/// (positive count in an absent area, state against a degenerate initial
/// distribution) return the -inf sentinel.
inline double joint_loglik(const Model& m, const PanelData& d, const InitialStateDist& init,
                           const StateField& S, const ParamVector& v) {
  if (static_cast<int>(v.size()) != m.lay.total)
    throw ValidationError("parameter vector length mismatch");
  d.validate();
  PanelSource src{&d};
  int n = d.n_areas(), T = d.T;
  if (!m.spec.zero_inflated) {
    double ll = 0.0;
    for (int i = 0; i < n; ++i) {
      double r = dispersion(m, v, i);
      for (int t = 1; t <= T; ++t)
        ll += emission_logprob(d.count(i, t), 1, mean_rate(m, v, src, i, t), r, m.spec.family);
    }
    return ll;
  }
  if (S.n != n || S.T != T) throw ValidationError("state field shape mismatch");
  init.validate(n);
  double ll = 0.0;
  for (int i = 0; i < n; ++i) ll += init.logp(i, S.at(i, 0));
  int stride = StateField::col_stride(T);
  for (int t = 1; t <= T; ++t) {
    const uint8_t* prev = S.col(t - 1);
    auto sprev = [&](int j) { return static_cast<int>(prev[static_cast<size_t>(j) * stride]); };
    for (int i = 0; i < n; ++i) {
      double r = dispersion(m, v, i);
      ll += emission_logprob(d.count(i, t), S.at(i, t), mean_rate(m, v, src, i, t), r,
                             m.spec.family);
      TransLogits l = transition_logits(m, v, src, i, t, sprev);
      double lp = S.at(i, t - 1) ? clamp_linpred(l.lp11) : clamp_linpred(l.lp01);
      ll += S.at(i, t) ? log_logistic(lp) : log_logistic(-lp);
    }
  }
  return ll;
}

}  // namespace zscms
