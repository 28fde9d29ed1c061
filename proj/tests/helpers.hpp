#pragma once

#include <cmath>
#include <vector>

#include "zscms/model.hpp"
#include "zscms/rng.hpp"
#include "zscms/types.hpp"

// Shared fixtures for the test suite: small hand-buildable instances and a
// randomised tiny-instance generator used by enumeration cross-checks.

namespace zt {

using namespace zscms;

struct Tiny {
  Model m;
  PanelData d;
  InitialStateDist init;
  ParamVector v;
};

struct TinyOpt {
  int n = 2, T = 3;
  bool poisson = false;
  bool per_area_r = false;
  bool coupled = true;
  bool pair_cov = true;    // one pair covariate on the reemergence coupling
  bool log_lag = false;    // persistence lagged-count term
  bool endemic = false;    // endemic/epidemic mean instead of log-linear
  bool degenerate_init = false;
};

inline CovariatePool make_pool(int n, int T, const std::vector<std::string>& names) {
  CovariatePool p;
  p.n_areas = n;
  p.n_times = T;
  p.names = names;
  p.values.assign(static_cast<size_t>(n) * T * names.size(), 0.0);
  return p;
}

inline PairCovariatePool make_pair_pool(const NeighborGraph& g, int T,
                                        const std::vector<std::string>& names) {
  PairCovariatePool p;
  p.n_slots = g.n_slots();
  p.n_times = T;
  p.names = names;
  p.values.assign(static_cast<size_t>(p.n_slots) * T * names.size(), 0.0);
  return p;
}

inline StateField blank_states(int n, int T) {
  return StateField{n, T, std::vector<uint8_t>(static_cast<size_t>(n) * (T + 1), 0),
                    std::vector<uint8_t>(static_cast<size_t>(n) * (T + 1), 0)};
}

/// Random small instance: path/cycle graph, standard-normal covariates,
/// arbitrary counts (zeros mixed with small positives), moderate parameters.
inline Tiny random_tiny(Rng& rng, TinyOpt opt) {
  Tiny out;
  int n = opt.n, T = opt.T;

  std::vector<std::pair<int, int>> edges;
  for (int i = 0; i + 1 < n; ++i) edges.emplace_back(i, i + 1);
  if (n >= 3 && rbern(rng, 0.5)) edges.emplace_back(0, n - 1);
  NeighborGraph g = make_graph(n, edges, true);

  PanelData d;
  d.graph = g;
  d.T = T;
  d.y.assign(static_cast<size_t>(n) * T, 0);
  d.y0.assign(n, 0);
  d.covs = make_pool(n, T, {"tz", "mx"});
  for (int i = 0; i < n; ++i)
    for (int t = 1; t <= T; ++t) {
      d.covs.at(i, t, 0) = rnorm(rng);
      d.covs.at(i, t, 1) = rnorm(rng);
      if (!rbern(rng, 0.5)) d.count(i, t) = 1 + rpois(rng, 2.0);
    }
  if (opt.endemic || opt.log_lag)
    for (int i = 0; i < n; ++i) d.y0[i] = rbern(rng, 0.5) ? rpois(rng, 2.0) : 0;
  if (opt.pair_cov && opt.coupled) {
    d.pair_covs = make_pair_pool(g, T, {"pb"});
    for (int s = 0; s < g.n_slots(); ++s)
      for (int t = 1; t <= T; ++t) d.pair_covs.at(s, t, 0) = rbern(rng, 0.5) ? 1.0 : 0.0;
  }

  ModelSpec spec;
  spec.family = opt.poisson ? EmissionFamily::Poisson : EmissionFamily::NegBinomial;
  spec.dispersion = opt.per_area_r ? DispersionForm::PerArea : DispersionForm::Global;
  if (opt.endemic) {
    spec.mean.variant = MeanVariant::EndemicEpidemic;
    spec.mean.ar = {{1, "mx"}};
    spec.mean.en = {};
  } else {
    spec.mean.x = {{1, "mx"}};
  }
  spec.trans.z01 = {{0, "tz"}};
  spec.trans.z11 = {{0, "tz"}};
  spec.trans.z11_log_lag_count = opt.log_lag;
  spec.trans.coupled = opt.coupled;
  if (opt.coupled && opt.pair_cov) spec.trans.c01 = {{0, "pb"}};
  out.m = make_model(spec, n);

  out.v.assign(out.m.lay.total, 0.0);
  for (int k = 0; k < out.m.lay.total; ++k) out.v[k] = rnorm(rng) * 0.6;
  for (int k = 0; k < out.m.lay.n_gamma; ++k)
    out.v[out.m.lay.gamma + k] = std::log(runif(rng, 0.8, 5.0));

  out.init.pi0.assign(n, 0.5);
  for (int i = 0; i < n; ++i) {
    if (opt.degenerate_init || rbern(rng, 0.25))
      out.init.pi0[i] = rbern(rng, 0.5) ? 1.0 : 0.0;
    else
      out.init.pi0[i] = runif(rng, 0.2, 0.8);
  }
  out.d = std::move(d);
  return out;
}

}  // namespace zt
