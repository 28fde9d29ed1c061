#pragma once

#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "zscms/filtering.hpp"
#include "zscms/samplers.hpp"

namespace zscms {

enum class StateSampler { Binary, Iffbs, Bffbs2 };

inline StateSampler parse_state_sampler(const std::string& s) {
  if (s == "binary") return StateSampler::Binary;
  if (s == "iffbs") return StateSampler::Iffbs;
  if (s == "bffbs2") return StateSampler::Bffbs2;
  throw ValidationError("unknown state sampler: " + s);
}

inline const char* state_sampler_name(StateSampler s) {
  switch (s) {
    case StateSampler::Binary: return "binary";
    case StateSampler::Iffbs: return "iffbs";
    default: return "bffbs2";
  }
}

struct FitConfig {
  int iterations = 80000;
  int burn_in = 30000;
  int thin = 1;
  int n_chains = 3;
  uint64_t seed = 1;
  StateSampler state_sampler = StateSampler::Bffbs2;
  int block_size = 2;         // ffbs block width (1 recovers the individual sampler)
  bool afss = true;           // joint slice blocks for the coupled transition families
  int afss_refresh = 200;     // basis refresh cadence during burn-in, sweeps
  int store_states = -1;      // -1 auto (small state fields only), 0 never, 1 always
  int state_cells_auto = 5000;
  int state_max_draws = 2000;  // cap on retained full state fields per chain
  int progress_every = 0;      // stderr progress cadence in iterations; 0 silent

  void validate() const {
    if (iterations <= burn_in || burn_in < 0) throw ValidationError("need iterations > burn_in >= 0");
    if (thin < 1) throw ValidationError("thin must be >= 1");
    if (n_chains < 1) throw ValidationError("need at least one chain");
    if (block_size < 1) throw ValidationError("block size must be positive");
  }
};

/// Per-chain retained output. Parameter draws are row-major kept x n_params;
/// states at the final time are always retained, full state fields only when
/// small enough (or forced), thinned to at most state_max_draws.
struct ChainStore {
  int n_params = 0;
  long n_kept = 0;
  std::vector<double> draws;
  std::vector<uint8_t> final_states;      // kept x n_areas
  long n_state_draws = 0;
  long state_stride = 1;                  // kept-index stride between full fields
  std::vector<uint8_t> full_states;       // n_state_draws x n_areas*(T+1)
  // streaming per-cell accumulators of the pointwise predictive density:
  // online logsumexp, sum and sum of squares of log contributions
  std::vector<double> w_lse, w_sum, w_sq;
  long w_n = 0;
  double mean_accept = 0.0;               // average scalar-kernel acceptance

  const double* draw(long k) const { return &draws[static_cast<size_t>(k) * n_params]; }
};

struct PosteriorStore {
  ParamLayout lay;
  FitConfig cfg;
  int n_areas = 0, T = 0;
  bool full_states_stored = false;
  std::vector<ChainStore> chains;

  int n_params() const { return lay.total; }
  long kept_total() const {
    long s = 0;
    for (const auto& c : chains) s += c.n_kept;
    return s;
  }
  std::vector<double> column(int chain, int p) const {
    const ChainStore& c = chains[chain];
    std::vector<double> out(c.n_kept);
    for (long k = 0; k < c.n_kept; ++k) out[k] = c.draws[static_cast<size_t>(k) * c.n_params + p];
    return out;
  }
  double pooled_mean(int p) const {
    double s = 0;
    long n = 0;
    for (const auto& c : chains)
      for (long k = 0; k < c.n_kept; ++k, ++n) s += c.draws[static_cast<size_t>(k) * c.n_params + p];
    return s / static_cast<double>(n);
  }
  double pooled_sd(int p) const {
    double mu = pooled_mean(p), s = 0;
    long n = 0;
    for (const auto& c : chains)
      for (long k = 0; k < c.n_kept; ++k, ++n) {
        double d = c.draws[static_cast<size_t>(k) * c.n_params + p] - mu;
        s += d * d;
      }
    return n > 1 ? std::sqrt(s / static_cast<double>(n - 1)) : 0.0;
  }
  double final_state_mean(int i) const {
    double s = 0;
    long n = 0;
    for (const auto& c : chains)
      for (long k = 0; k < c.n_kept; ++k, ++n)
        s += c.final_states[static_cast<size_t>(k) * n_areas + i];
    return s / static_cast<double>(n);
  }
  double full_state_mean(int i, int t) const {
    if (!full_states_stored) throw ValidationError("full state fields were not retained");
    double s = 0;
    long n = 0;
    size_t cells = static_cast<size_t>(n_areas) * (T + 1);
    for (const auto& c : chains)
      for (long k = 0; k < c.n_state_draws; ++k, ++n)
        s += c.full_states[static_cast<size_t>(k) * cells + static_cast<size_t>(i) * (T + 1) + t];
    return s / static_cast<double>(n);
  }
};

namespace detail {

/// Flattened per-cell covariates for one transition family (previous state 0
/// or 1): z covariates, active-neighbour count and summed pair covariates
/// over the active neighbours. Rebuilt whenever the state field changes.
struct TransFam {
  int nz = 0, nc = 0;
  std::vector<double> z, csum, n_act;
  std::vector<uint8_t> to;
  void clear() {
    z.clear();
    csum.clear();
    n_act.clear();
    to.clear();
  }
  size_t size() const { return to.size(); }
};

inline double trans_loglik(const TransFam& f, bool coupled, double b0, const double* bz,
                           double b0c, const double* bc) {
  double out = 0.0;
  for (size_t c = 0; c < f.size(); ++c) {
    double lp = b0;
    for (int k = 0; k < f.nz; ++k) lp += bz[k] * f.z[c * f.nz + k];
    if (coupled) {
      lp += b0c * f.n_act[c];
      for (int k = 0; k < f.nc; ++k) lp += bc[k] * f.csum[c * f.nc + k];
    }
    lp = clamp_linpred(lp);
    out += f.to[c] ? log_logistic(lp) : log_logistic(-lp);
  }
  return out;
}

inline double logsumexp2(double a, double b) {
  if (a < b) std::swap(a, b);
  if (b == kNegInf) return a;
  return a + std::log1p(std::exp(b - a));
}

/// Flatten the per-cell transition covariates for the current state field:
/// each observed cell lands in the family matching its previous state.
inline void build_trans_cache(const Model& m, const PanelData& d, const StateField& S,
                              TransFam& f0, TransFam& f1) {
  const ParamLayout& L = m.lay;
  PanelSource src{&d};
  f0.clear();
  f1.clear();
  f0.nz = L.n_zeta;
  f0.nc = L.n_zetac;
  f1.nz = L.n_eta;
  f1.nc = L.n_etac;
  bool coupled = m.spec.trans.coupled;
  std::vector<double> cs;
  for (int i = 0; i < d.n_areas(); ++i)
    for (int t = 1; t <= d.T; ++t) {
      bool from = S.at(i, t - 1) != 0;
      TransFam& f = from ? f1 : f0;
      const auto& zc = from ? m.spec.trans.z11 : m.spec.trans.z01;
      for (const auto& c : zc) f.z.push_back(src.cov(i, t, c.col));
      if (from ? m.spec.trans.z11_log_lag_count : m.spec.trans.z01_log_lag_count)
        f.z.push_back(std::log1p(static_cast<double>(d.count_prev(i, t))));
      f.to.push_back(S.at(i, t));
      if (coupled) {
        const auto& cc = from ? m.spec.trans.c11 : m.spec.trans.c01;
        cs.assign(cc.size(), 0.0);
        double na = 0.0;
        int deg = d.graph.degree(i);
        const int* nb = d.graph.begin(i);
        for (int jn = 0; jn < deg; ++jn)
          if (S.at(nb[jn], t - 1)) {
            na += 1.0;
            int slot = d.graph.slot(i, jn);
            for (size_t k = 0; k < cc.size(); ++k) cs[k] += src.pair_cov(slot, t, cc[k].col);
          }
        f.n_act.push_back(na);
        f.csum.insert(f.csum.end(), cs.begin(), cs.end());
      }
    }
}

enum class KKind {
  MeanFixed,    // emission over all active cells + diffuse normal prior
  Hyper,        // hypermean of a random-intercept block (prior terms only)
  GammaGlobal,  // emission over all active cells + gamma prior on exp(gamma)
  GammaArea,    // emission over one area's active cells + log-normal prior
  Zeta,         // reemergence-family coordinate
  Eta,          // persistence-family coordinate
  ZetaBlock,    // joint slice move over the reemergence intercept/coupling trio
  EtaBlock,     // joint slice move over the persistence trio
  RandInt,      // one random intercept: own-area emission + hierarchy
  Sigma,        // random-intercept sd, updated on the log scale
};

struct Kernel {
  KKind kind;
  int idx;        // parameter index in the layout
  int area = -1;  // for per-area kernels
  int re = -1, hyper = -1, sig = -1;  // hierarchy offsets where relevant
};

class ChainRunner {
 public:
  ChainRunner(const Model& m, const PanelData& d, const InitialStateDist& init,
              const PriorSpec& prior, const DispersionPrior& disp, const FitConfig& cfg,
              bool keep_full_states)
      : m_(m),
        d_(d),
        init_(init),
        pr_(prior),
        disp_(disp),
        cfg_(cfg),
        src_{&d},
        keep_full_(keep_full_states),
        S_(initialize_states(d, init)),
        on_(d.n_areas()) {
    const ParamLayout& L = m_.lay;
    auto scalar = [&](KKind k, int idx, int area = -1) {
      if (idx >= 0) kernels_.push_back({k, idx, area, -1, -1, -1});
    };
    auto group = [&](KKind k, int off, int cnt) {
      for (int j = 0; j < cnt; ++j) kernels_.push_back({k, off + j, -1, -1, -1, -1});
    };
    // mean-model fixed effects
    scalar(KKind::MeanFixed, L.delta0);
    group(KKind::MeanFixed, L.delta, L.n_delta);
    if (L.ar_re >= 0)
      kernels_.push_back({KKind::Hyper, L.ar0, -1, L.ar_re, L.ar0, L.sigma_ar});
    else
      scalar(KKind::MeanFixed, L.ar0);
    group(KKind::MeanFixed, L.ar, L.n_ar);
    if (L.en_re >= 0)
      kernels_.push_back({KKind::Hyper, L.en0, -1, L.en_re, L.en0, L.sigma_en});
    else
      scalar(KKind::MeanFixed, L.en0);
    group(KKind::MeanFixed, L.en, L.n_en);
    // dispersion
    if (L.gamma >= 0) {
      if (m_.spec.dispersion == DispersionForm::Global)
        scalar(KKind::GammaGlobal, L.gamma);
      else
        for (int i = 0; i < L.n_areas; ++i) kernels_.push_back({KKind::GammaArea, L.gamma + i, i, -1, -1, -1});
    }
    // transition families; the intercept/coupling trio goes to the slice
    // block when enabled, coordinate-wise otherwise
    bool slice = cfg_.afss && m_.spec.zero_inflated && m_.spec.trans.coupled;
    if (m_.spec.zero_inflated) {
      group(KKind::Zeta, L.zeta, L.n_zeta);
      if (!slice) {
        scalar(KKind::Zeta, L.zeta0);
        scalar(KKind::Zeta, L.zeta0c);
        group(KKind::Zeta, L.zetac, L.n_zetac);
      } else {
        zeta_block_.push_back(L.zeta0);
        zeta_block_.push_back(L.zeta0c);
        for (int j = 0; j < L.n_zetac; ++j) zeta_block_.push_back(L.zetac + j);
        kernels_.push_back({KKind::ZetaBlock, -1, -1, -1, -1, -1});
      }
      group(KKind::Eta, L.eta, L.n_eta);
      if (!slice) {
        scalar(KKind::Eta, L.eta0);
        scalar(KKind::Eta, L.eta0c);
        group(KKind::Eta, L.etac, L.n_etac);
      } else {
        eta_block_.push_back(L.eta0);
        eta_block_.push_back(L.eta0c);
        for (int j = 0; j < L.n_etac; ++j) eta_block_.push_back(L.etac + j);
        kernels_.push_back({KKind::EtaBlock, -1, -1, -1, -1, -1});
      }
    }
    // random intercepts, then their scales last
    if (L.ar_re >= 0)
      for (int i = 0; i < L.n_areas; ++i)
        kernels_.push_back({KKind::RandInt, L.ar_re + i, i, L.ar_re, L.ar0, L.sigma_ar});
    if (L.en_re >= 0)
      for (int i = 0; i < L.n_areas; ++i)
        kernels_.push_back({KKind::RandInt, L.en_re + i, i, L.en_re, L.en0, L.sigma_en});
    if (L.sigma_ar >= 0)
      kernels_.push_back({KKind::Sigma, L.sigma_ar, -1, L.ar_re, L.ar0, L.sigma_ar});
    if (L.sigma_en >= 0)
      kernels_.push_back({KKind::Sigma, L.sigma_en, -1, L.en_re, L.en0, L.sigma_en});

    arwm_.assign(kernels_.size(), ArwmSampler(0.5));
    if (!zeta_block_.empty())
      zeta_afss_.emplace(static_cast<int>(zeta_block_.size()), 1.0, cfg_.afss_refresh);
    if (!eta_block_.empty())
      eta_afss_.emplace(static_cast<int>(eta_block_.size()), 1.0, cfg_.afss_refresh);

    if (m_.spec.zero_inflated && cfg_.state_sampler != StateSampler::Binary) {
      plan_ = build_blocks(d_, init_, cfg_.state_sampler == StateSampler::Iffbs ? 1 : cfg_.block_size);
      bf_.emplace(m_, d_, init_);
    }
  }

  ChainStore run(int chain_idx) {
    Rng rng = make_rng(cfg_.seed, static_cast<uint64_t>(chain_idx));
    draw_initial_values(rng);
    rebuild_caches();

    ChainStore out;
    out.n_params = m_.lay.total;
    long n_kept = (cfg_.iterations - cfg_.burn_in + cfg_.thin - 1) / cfg_.thin;
    out.draws.reserve(static_cast<size_t>(n_kept) * m_.lay.total);
    out.final_states.reserve(static_cast<size_t>(n_kept) * d_.n_areas());
    out.state_stride = std::max(1L, (n_kept + cfg_.state_max_draws - 1) / cfg_.state_max_draws);
    if (keep_full_)
      out.full_states.reserve(static_cast<size_t>(d_.n_areas()) * (d_.T + 1) *
                              std::min<long>(cfg_.state_max_draws, n_kept));
    out.w_lse.assign(static_cast<size_t>(d_.n_areas()) * d_.T, kNegInf);
    out.w_sum.assign(out.w_lse.size(), 0.0);
    out.w_sq.assign(out.w_lse.size(), 0.0);

    for (int it = 0; it < cfg_.iterations; ++it) {
      if (it == cfg_.burn_in) {
        if (zeta_afss_) zeta_afss_->freeze();
        if (eta_afss_) eta_afss_->freeze();
      }
      update_parameters(rng);
      update_states(rng);
      if (it >= cfg_.burn_in && (it - cfg_.burn_in) % cfg_.thin == 0) {
        out.draws.insert(out.draws.end(), v_.begin(), v_.end());
        for (int i = 0; i < d_.n_areas(); ++i)
          out.final_states.push_back(S_.at(i, d_.T));
        if (keep_full_ && out.n_kept % out.state_stride == 0) {
          out.full_states.insert(out.full_states.end(), S_.s.begin(), S_.s.end());
          ++out.n_state_draws;
        }
        accumulate_waic(out);
        ++out.n_kept;
      }
      if (cfg_.progress_every > 0 && (it + 1) % cfg_.progress_every == 0)
        std::fprintf(stderr, "[chain %d] %d/%d iterations\n", chain_idx, it + 1, cfg_.iterations);
    }
    double acc = 0.0;
    long used = 0;
    for (const auto& a : arwm_)
      if (a.n_updates() > 0) {
        acc += a.acceptance_rate();
        ++used;
      }
    out.mean_accept = used ? acc / static_cast<double>(used) : 0.0;
    return out;
  }

 private:
  // ---- initial values ----
  void draw_initial_values(Rng& rng) {
    const ParamLayout& L = m_.lay;
    v_.assign(L.total, 0.0);
    for (int k = 0; k < L.total; ++k) v_[k] = rnorm(rng) * 0.5;
    if (L.gamma >= 0) {
      if (m_.spec.dispersion == DispersionForm::Global) {
        double r = 0.0;
        bool ok = false;
        for (int tries = 0; tries < 100 && !ok; ++tries) {
          r = rgamma(rng, pr_.r_shape, 1.0 / pr_.r_rate);
          ok = r >= 0.3 && r <= 30.0;
        }
        if (!ok) r = std::sqrt(0.3 * 30.0);
        v_[L.gamma] = std::log(r);
      } else {
        for (int i = 0; i < L.n_gamma; ++i) v_[L.gamma + i] = disp_.mu[i] + rnorm(rng) * disp_.sd;
      }
    }
    if (L.sigma_ar >= 0) v_[L.sigma_ar] = runif(rng, 0.05, 2.0);
    if (L.sigma_en >= 0) v_[L.sigma_en] = runif(rng, 0.05, 2.0);
    S_ = initialize_states(d_, init_);
  }

  // ---- caches ----
  void rebuild_caches() {
    for (auto& t : on_) t.clear();
    for (int i = 0; i < d_.n_areas(); ++i)
      for (int t = 1; t <= d_.T; ++t)
        if (!m_.spec.zero_inflated || S_.at(i, t)) on_[i].push_back(t);
    if (m_.spec.zero_inflated) build_trans_cache(m_, d_, S_, f0_, f1_);
  }

  // ---- targets ----
  double emission_area(int i) const {
    double r = dispersion(m_, v_, i);
    double s = 0.0;
    for (int t : on_[i])
      s += emission_logprob(d_.count(i, t), 1, mean_rate(m_, v_, src_, i, t), r, m_.spec.family);
    return s;
  }
  double emission_all() const {
    double s = 0.0;
    for (int i = 0; i < d_.n_areas(); ++i) s += emission_area(i);
    return s;
  }
  double zeta_loglik() const {
    const ParamLayout& L = m_.lay;
    static const double kZero = 0.0;
    return trans_loglik(f0_, m_.spec.trans.coupled, v_[L.zeta0],
                        L.n_zeta ? &v_[L.zeta] : &kZero,
                        m_.spec.trans.coupled ? v_[L.zeta0c] : 0.0,
                        L.n_zetac ? &v_[L.zetac] : &kZero);
  }
  double eta_loglik() const {
    const ParamLayout& L = m_.lay;
    static const double kZero = 0.0;
    return trans_loglik(f1_, m_.spec.trans.coupled, v_[L.eta0],
                        L.n_eta ? &v_[L.eta] : &kZero,
                        m_.spec.trans.coupled ? v_[L.eta0c] : 0.0,
                        L.n_etac ? &v_[L.etac] : &kZero);
  }
  double hierarchy_loglik(int re, int hyper, int sig) const {
    double s = v_[sig];
    if (!(s > 0.0)) return kNegInf;
    double out = 0.0;
    for (int i = 0; i < m_.lay.n_areas; ++i) out += log_normal_pdf(v_[re + i], v_[hyper], s);
    return out;
  }

  // ---- kernels ----
  void update_parameters(Rng& rng) {
    for (size_t k = 0; k < kernels_.size(); ++k) {
      const Kernel& kn = kernels_[k];
      if (kn.kind == KKind::ZetaBlock) {
        update_block(*zeta_afss_, zeta_block_, /*reemergence=*/true, rng);
        continue;
      }
      if (kn.kind == KKind::EtaBlock) {
        update_block(*eta_afss_, eta_block_, /*reemergence=*/false, rng);
        continue;
      }
      double x = v_[kn.idx];
      switch (kn.kind) {
        case KKind::MeanFixed: {
          auto tgt = [&](double t) {
            double old = v_[kn.idx];
            v_[kn.idx] = t;
            double r = emission_all() + log_normal_pdf(t, 0.0, pr_.coef_sd);
            v_[kn.idx] = old;
            return r;
          };
          arwm_[k].update(x, tgt, rng);
          break;
        }
        case KKind::Hyper: {
          auto tgt = [&](double t) {
            double old = v_[kn.idx];
            v_[kn.idx] = t;
            double r = hierarchy_loglik(kn.re, kn.hyper, kn.sig) +
                       log_normal_pdf(t, 0.0, pr_.coef_sd);
            v_[kn.idx] = old;
            return r;
          };
          arwm_[k].update(x, tgt, rng);
          break;
        }
        case KKind::GammaGlobal: {
          auto tgt = [&](double t) {
            double old = v_[kn.idx];
            v_[kn.idx] = t;
            double r = emission_all() + pr_.r_shape * t - pr_.r_rate * std::exp(t);
            v_[kn.idx] = old;
            return r;
          };
          arwm_[k].update(x, tgt, rng);
          break;
        }
        case KKind::GammaArea: {
          auto tgt = [&](double t) {
            double old = v_[kn.idx];
            v_[kn.idx] = t;
            double r = emission_area(kn.area) +
                       log_normal_pdf(t, disp_.mu[kn.area], disp_.sd);
            v_[kn.idx] = old;
            return r;
          };
          arwm_[k].update(x, tgt, rng);
          break;
        }
        case KKind::Zeta: {
          auto tgt = [&](double t) {
            double old = v_[kn.idx];
            v_[kn.idx] = t;
            double r = zeta_loglik() + log_normal_pdf(t, 0.0, pr_.coef_sd);
            v_[kn.idx] = old;
            return r;
          };
          arwm_[k].update(x, tgt, rng);
          break;
        }
        case KKind::Eta: {
          auto tgt = [&](double t) {
            double old = v_[kn.idx];
            v_[kn.idx] = t;
            double r = eta_loglik() + log_normal_pdf(t, 0.0, pr_.coef_sd);
            v_[kn.idx] = old;
            return r;
          };
          arwm_[k].update(x, tgt, rng);
          break;
        }
        case KKind::RandInt: {
          auto tgt = [&](double t) {
            double old = v_[kn.idx];
            v_[kn.idx] = t;
            double r = emission_area(kn.area) +
                       log_normal_pdf(t, v_[kn.hyper], v_[kn.sig]);
            v_[kn.idx] = old;
            return r;
          };
          arwm_[k].update(x, tgt, rng);
          break;
        }
        case KKind::Sigma: {
          // random-walk on log sigma with the change-of-variable term
          double u = std::log(v_[kn.idx]);
          auto tgt = [&](double t) {
            double old = v_[kn.idx];
            v_[kn.idx] = std::exp(t);
            double r = hierarchy_loglik(kn.re, kn.hyper, kn.sig) +
                       log_halfnormal_pdf(v_[kn.idx], pr_.sigma_scale) + t;
            v_[kn.idx] = old;
            return r;
          };
          arwm_[k].update(u, tgt, rng);
          x = std::exp(u);
          break;
        }
        default:
          break;
      }
      v_[kn.idx] = x;
    }
  }

  void update_block(AfssSampler& s, const std::vector<int>& idx, bool reemergence, Rng& rng) {
    block_x_.resize(idx.size());
    for (size_t j = 0; j < idx.size(); ++j) block_x_[j] = v_[idx[j]];
    auto tgt = [&](const std::vector<double>& t) {
      for (size_t j = 0; j < idx.size(); ++j) v_[idx[j]] = t[j];
      double r = reemergence ? zeta_loglik() : eta_loglik();
      for (size_t j = 0; j < idx.size(); ++j) r += log_normal_pdf(t[j], 0.0, pr_.coef_sd);
      for (size_t j = 0; j < idx.size(); ++j) v_[idx[j]] = block_x_[j];
      return r;
    };
    s.update(block_x_, tgt, rng);
    for (size_t j = 0; j < idx.size(); ++j) v_[idx[j]] = block_x_[j];
  }

  void update_states(Rng& rng) {
    if (!m_.spec.zero_inflated) return;
    if (cfg_.state_sampler == StateSampler::Binary)
      binary_sweep(m_, d_, init_, S_, v_, rng);
    else
      block_sweep(S_, v_, plan_, *bf_, rng);
    rebuild_caches();
  }

  // ---- pointwise predictive accumulation ----
  void accumulate_waic(ChainStore& out) {
    int stride = d_.T + 1;
    const uint8_t* prev0 = S_.s.data();
    for (int i = 0; i < d_.n_areas(); ++i) {
      double r = dispersion(m_, v_, i);
      for (int t = 1; t <= d_.T; ++t) {
        long y = d_.count(i, t);
        double lam = mean_rate(m_, v_, src_, i, t);
        double lp;
        if (!m_.spec.zero_inflated) {
          lp = emission_logprob(y, 1, lam, r, m_.spec.family);
        } else {
          const uint8_t* prev = prev0 + (t - 1);
          auto sprev = [&](int j) { return static_cast<int>(prev[static_cast<size_t>(j) * stride]); };
          TransProbs p = transition_probs(m_, v_, src_, i, t, sprev);
          double p1 = S_.at(i, t - 1) ? p.p11 : p.p01;
          if (y > 0)
            lp = std::log(p1) + emission_logprob(y, 1, lam, r, m_.spec.family);
          else
            lp = logsumexp2(std::log(p1) + emission_logzero(1, lam, r, m_.spec.family),
                            std::log1p(-p1));
        }
        if (!std::isfinite(lp))
          throw NumericalError("zero-probability pointwise predictive contribution");
        size_t c = static_cast<size_t>(i) * d_.T + (t - 1);
        out.w_lse[c] = logsumexp2(out.w_lse[c], lp);
        out.w_sum[c] += lp;
        out.w_sq[c] += lp * lp;
      }
    }
    ++out.w_n;
  }

  const Model& m_;
  const PanelData& d_;
  const InitialStateDist& init_;
  const PriorSpec& pr_;
  const DispersionPrior& disp_;
  const FitConfig& cfg_;
  PanelSource src_;
  bool keep_full_;

  ParamVector v_;
  StateField S_;
  std::vector<std::vector<int>> on_;
  TransFam f0_, f1_;
  std::vector<Kernel> kernels_;
  std::vector<ArwmSampler> arwm_;
  std::vector<int> zeta_block_, eta_block_;
  std::optional<AfssSampler> zeta_afss_, eta_afss_;
  std::vector<double> block_x_;
  BlockPlan plan_;
  std::optional<BlockFilter> bf_;
};

}  // namespace detail

inline int env_thread_count() {
  const char* s = std::getenv("ZSCMS_THREADS");
  if (!s) return 1;
  int n = std::atoi(s);
  return n > 0 ? n : 1;
}

/// Full posterior simulation: n_chains independent chains with per-chain RNG
/// streams, merged in chain order so results do not depend on scheduling.
inline PosteriorStore fit_model(const Model& m, const PanelData& d, const InitialStateDist& init,
                                const PriorSpec& prior, const FitConfig& cfg) {
  cfg.validate();
  d.validate();
  init.validate(d.n_areas());
  if (m.lay.total <= 0) throw ValidationError("model has no parameters");
  DispersionPrior disp;
  if (m.spec.dispersion == DispersionForm::PerArea && m.spec.family == EmissionFamily::NegBinomial)
    disp = make_dispersion_prior(d, prior);

  long cells = static_cast<long>(d.n_areas()) * (d.T + 1);
  bool keep_full = m.spec.zero_inflated &&
                   (cfg.store_states == 1 || (cfg.store_states < 0 && cells <= cfg.state_cells_auto));

  PosteriorStore out;
  out.lay = m.lay;
  out.cfg = cfg;
  out.n_areas = d.n_areas();
  out.T = d.T;
  out.full_states_stored = keep_full;
  out.chains.resize(cfg.n_chains);

  int threads = std::min(env_thread_count(), cfg.n_chains);
  if (threads <= 1) {
    for (int c = 0; c < cfg.n_chains; ++c) {
      detail::ChainRunner runner(m, d, init, prior, disp, cfg, keep_full);
      out.chains[c] = runner.run(c);
    }
  } else {
    std::vector<std::thread> pool;
    std::atomic<int> next{0};
    for (int w = 0; w < threads; ++w)
      pool.emplace_back([&] {
        for (;;) {
          int c = next.fetch_add(1);
          if (c >= cfg.n_chains) return;
          detail::ChainRunner runner(m, d, init, prior, disp, cfg, keep_full);
          out.chains[c] = runner.run(c);
        }
      });
    for (auto& t : pool) t.join();
  }
  return out;
}

}  // namespace zscms
