#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "zscms/model.hpp"
#include "zscms/types.hpp"

// Exact reference answers by brute-force enumeration of binary state paths.
// Cost is 2^(N(T+1)) path evaluations, so instances are capped; these
// routines exist to check the filtering and sampling machinery, not to run
// at data scale.

namespace zscms::oracle {

inline constexpr int kMaxPathBits = 24;

struct LogSumExp {
  double m = kNegInf, acc = 0.0;
  void add(double x) {
    if (x == kNegInf) return;
    if (x <= m) {
      acc += std::exp(x - m);
    } else {
      acc = acc * std::exp(m - x) + 1.0;
      m = x;
    }
  }
  double value() const { return m == kNegInf ? kNegInf : m + std::log(acc); }
};

inline void check_enumerable(int n, int T) {
  if (static_cast<long>(n) * (T + 1) > kMaxPathBits)
    throw ValidationError("instance too large to enumerate: N(T+1) exceeds " +
                          std::to_string(kMaxPathBits) + " state bits");
}

inline void decode_path(uint64_t bits, StateField& S) {
  size_t cells = S.s.size();
  for (size_t c = 0; c < cells; ++c) S.s[c] = static_cast<uint8_t>((bits >> c) & 1u);
}

/// log of init * transitions (* emissions) for one complete path, composed
/// directly from the elementary densities rather than the likelihood code.
inline double path_logweight(const Model& m, const PanelData& d, const InitialStateDist& init,
                             const StateField& S, const ParamVector& v, bool with_emissions) {
  PanelSource src{&d};
  int n = d.n_areas(), T = d.T;
  int stride = StateField::col_stride(T);
  double w = 0.0;
  for (int i = 0; i < n; ++i) {
    w += init.logp(i, S.at(i, 0));
    if (w == kNegInf) return kNegInf;
  }
  for (int t = 1; t <= T; ++t) {
    const uint8_t* prev = S.col(t - 1);
    auto sprev = [&](int j) { return static_cast<int>(prev[static_cast<size_t>(j) * stride]); };
    for (int i = 0; i < n; ++i) {
      TransProbs p = transition_probs(m, v, src, i, t, sprev);
      double p1 = S.at(i, t - 1) ? p.p11 : p.p01;
      w += std::log(S.at(i, t) ? p1 : 1.0 - p1);
      if (with_emissions) {
        w += emission_logprob(d.count(i, t), S.at(i, t), mean_rate(m, v, src, i, t),
                              dispersion(m, v, i), m.spec.family);
        if (w == kNegInf) return kNegInf;
      }
    }
  }
  return w;
}

/// log p(y | v) by summing the joint over every state path.
inline double exact_loglik_enumeration(const Model& m, const PanelData& d,
                                       const InitialStateDist& init, const ParamVector& v) {
  int n = d.n_areas(), T = d.T;
  check_enumerable(n, T);
  StateField S{n, T, std::vector<uint8_t>(static_cast<size_t>(n) * (T + 1), 0),
               std::vector<uint8_t>(static_cast<size_t>(n) * (T + 1), 0)};
  uint64_t paths = 1ull << (static_cast<unsigned>(n) * (T + 1));
  LogSumExp total;
  for (uint64_t b = 0; b < paths; ++b) {
    decode_path(b, S);
    total.add(path_logweight(m, d, init, S, v, true));
  }
  if (total.value() == kNegInf) throw NumericalError("all state paths carry zero likelihood");
  return total.value();
}

/// Total path probability of the state process alone; equals 1 for any
/// valid parameterisation (row-stochastic transitions, normalised init).
inline double exact_transition_total(const Model& m, const PanelData& d,
                                     const InitialStateDist& init, const ParamVector& v) {
  int n = d.n_areas(), T = d.T;
  check_enumerable(n, T);
  StateField S{n, T, std::vector<uint8_t>(static_cast<size_t>(n) * (T + 1), 0),
               std::vector<uint8_t>(static_cast<size_t>(n) * (T + 1), 0)};
  uint64_t paths = 1ull << (static_cast<unsigned>(n) * (T + 1));
  LogSumExp total;
  for (uint64_t b = 0; b < paths; ++b) {
    decode_path(b, S);
    total.add(path_logweight(m, d, init, S, v, false));
  }
  return std::exp(total.value());
}

/// P(S_it = 1 | y, v) for every cell, in StateField layout i*(T+1)+t.
inline std::vector<double> exact_state_posterior(const Model& m, const PanelData& d,
                                                 const InitialStateDist& init,
                                                 const ParamVector& v) {
  int n = d.n_areas(), T = d.T;
  check_enumerable(n, T);
  size_t cells = static_cast<size_t>(n) * (T + 1);
  StateField S{n, T, std::vector<uint8_t>(cells, 0), std::vector<uint8_t>(cells, 0)};
  uint64_t paths = 1ull << cells;
  LogSumExp total;
  std::vector<LogSumExp> on(cells);
  for (uint64_t b = 0; b < paths; ++b) {
    decode_path(b, S);
    double w = path_logweight(m, d, init, S, v, true);
    if (w == kNegInf) continue;
    total.add(w);
    for (size_t c = 0; c < cells; ++c)
      if (S.s[c]) on[c].add(w);
  }
  if (total.value() == kNegInf) throw NumericalError("all state paths carry zero likelihood");
  std::vector<double> marg(cells, 0.0);
  for (size_t c = 0; c < cells; ++c)
    marg[c] = on[c].value() == kNegInf ? 0.0 : std::exp(on[c].value() - total.value());
  return marg;
}

/// P(S_it = 1 | y_{1:t-1}, v) for every area at one time t in 1..T:
/// paths over s_{0..t} weighted by init, transitions through t and
/// emissions through t-1 only.
inline std::vector<double> exact_one_step_predictive(const Model& m, const PanelData& d,
                                                     const InitialStateDist& init,
                                                     const ParamVector& v, int t) {
  int n = d.n_areas(), T = d.T;
  if (t < 1 || t > T) throw ValidationError("one-step time outside 1..T");
  if (static_cast<long>(n) * (t + 1) > kMaxPathBits)
    throw ValidationError("instance too large to enumerate at time " + std::to_string(t));
  PanelSource src{&d};
  size_t cells = static_cast<size_t>(n) * (t + 1);
  StateField S{n, t, std::vector<uint8_t>(cells, 0), std::vector<uint8_t>(cells, 0)};
  int stride = StateField::col_stride(t);
  uint64_t paths = 1ull << cells;
  LogSumExp total;
  std::vector<LogSumExp> on(n);
  for (uint64_t b = 0; b < paths; ++b) {
    decode_path(b, S);
    double w = 0.0;
    for (int i = 0; i < n; ++i) {
      w += init.logp(i, S.at(i, 0));
      if (w == kNegInf) break;
    }
    for (int tau = 1; tau <= t && w > kNegInf; ++tau) {
      const uint8_t* prev = S.col(tau - 1);
      auto sprev = [&](int j) { return static_cast<int>(prev[static_cast<size_t>(j) * stride]); };
      for (int i = 0; i < n; ++i) {
        TransProbs p = transition_probs(m, v, src, i, tau, sprev);
        double p1 = S.at(i, tau - 1) ? p.p11 : p.p01;
        w += std::log(S.at(i, tau) ? p1 : 1.0 - p1);
        if (tau < t) {
          w += emission_logprob(d.count(i, tau), S.at(i, tau), mean_rate(m, v, src, i, tau),
                                dispersion(m, v, i), m.spec.family);
          if (w == kNegInf) break;
        }
      }
    }
    if (w == kNegInf) continue;
    total.add(w);
    for (int i = 0; i < n; ++i)
      if (S.at(i, t)) on[i].add(w);
  }
  if (total.value() == kNegInf) throw NumericalError("zero predictive mass");
  std::vector<double> out(n, 0.0);
  for (int i = 0; i < n; ++i)
    out[i] = on[i].value() == kNegInf ? 0.0 : std::exp(on[i].value() - total.value());
  return out;
}

}  // namespace zscms::oracle
