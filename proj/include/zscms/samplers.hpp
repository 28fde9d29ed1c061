#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "zscms/model.hpp"
#include "zscms/rng.hpp"

namespace zscms {

inline double log_normal_pdf(double x, double mean, double sd) {
  double z = (x - mean) / sd;
  return -0.5 * z * z - std::log(sd) - 0.5 * std::log(2.0 * std::numbers::pi);
}

inline double log_halfnormal_pdf(double x, double scale) {
  if (!(x > 0.0)) return kNegInf;
  return std::log(2.0) + log_normal_pdf(x, 0.0, scale);
}

/// Prior hyperparameters. Coefficients and intercepts get diffuse normals;
/// a global dispersion gets a Gamma prior on r = exp(gamma) (Jacobian
/// included); per-area dispersions get a log-normal centred so that r_i lies
/// between disp_mult_lo and disp_mult_hi times the area's mean count at
/// roughly two prior standard deviations.
struct PriorSpec {
  double coef_sd = 10.0;
  double r_shape = 0.1, r_rate = 0.1;
  double disp_mult_lo = 1.5, disp_mult_hi = 5.0;
  double sigma_scale = 1.0;  // half-normal scale for random-intercept sds
};

struct DispersionPrior {
  std::vector<double> mu;  // per-area location for log r_i
  double sd = 0.0;
};

inline DispersionPrior make_dispersion_prior(const PanelData& d, const PriorSpec& pr) {
  if (!(pr.disp_mult_hi > pr.disp_mult_lo && pr.disp_mult_lo > 0))
    throw ValidationError("dispersion prior multipliers must satisfy 0 < lo < hi");
  DispersionPrior out;
  out.sd = std::log(pr.disp_mult_hi / pr.disp_mult_lo) / 4.0;
  out.mu.resize(d.n_areas());
  for (int i = 0; i < d.n_areas(); ++i) {
    double mean = 0.0;
    for (int t = 1; t <= d.T; ++t) mean += static_cast<double>(d.count(i, t));
    mean /= d.T;
    double m = std::max(mean, 0.5);
    out.mu[i] = std::log(m * std::sqrt(pr.disp_mult_lo * pr.disp_mult_hi));
  }
  return out;
}

/// Joint log prior over the full parameter vector; -inf outside the support
/// (non-positive random-effect sds). Independent across components, so
/// changing one coefficient moves exactly one summand.
inline double log_prior(const Model& mod, const ParamVector& v, const PriorSpec& pr,
                        const DispersionPrior& disp) {
  const ParamLayout& L = mod.lay;
  if (static_cast<int>(v.size()) != L.total)
    throw ValidationError("parameter vector does not match layout");
  double lp = 0.0;
  auto coef = [&](int off) {
    if (off >= 0) lp += log_normal_pdf(v[off], 0.0, pr.coef_sd);
  };
  auto coefs = [&](int off, int cnt) {
    for (int k = 0; k < cnt; ++k) lp += log_normal_pdf(v[off + k], 0.0, pr.coef_sd);
  };
  coef(L.delta0);
  coefs(L.delta, L.n_delta);
  coef(L.ar0);
  coefs(L.ar, L.n_ar);
  coef(L.en0);
  coefs(L.en, L.n_en);
  coef(L.zeta0);
  coefs(L.zeta, L.n_zeta);
  coef(L.zeta0c);
  coefs(L.zetac, L.n_zetac);
  coef(L.eta0);
  coefs(L.eta, L.n_eta);
  coef(L.eta0c);
  coefs(L.etac, L.n_etac);

  auto random_block = [&](int re, int hyper, int sig) {
    if (re < 0) return;
    double s = v[sig];
    if (!(s > 0.0)) {
      lp = kNegInf;
      return;
    }
    lp += log_halfnormal_pdf(s, pr.sigma_scale);
    for (int i = 0; i < L.n_areas; ++i) lp += log_normal_pdf(v[re + i], v[hyper], s);
  };
  random_block(L.ar_re, L.ar0, L.sigma_ar);
  if (lp == kNegInf) return kNegInf;
  random_block(L.en_re, L.en0, L.sigma_en);
  if (lp == kNegInf) return kNegInf;

  if (L.gamma >= 0) {
    if (mod.spec.dispersion == DispersionForm::Global) {
      // Gamma(shape, rate) density of r = exp(gamma) times the Jacobian r
      double g = v[L.gamma];
      lp += pr.r_shape * std::log(pr.r_rate) - std::lgamma(pr.r_shape) + pr.r_shape * g -
            pr.r_rate * std::exp(g);
    } else {
      if (static_cast<int>(disp.mu.size()) != L.n_gamma)
        throw ValidationError("dispersion prior does not match the area count");
      for (int i = 0; i < L.n_gamma; ++i)
        lp += log_normal_pdf(v[L.gamma + i], disp.mu[i], disp.sd);
    }
  }
  return lp;
}

/// Scalar adaptive random-walk Metropolis kernel. Gaussian proposals; after
/// every batch of 50 updates the log step size moves by min(0.01, 1/sqrt(b))
/// toward a 0.44 acceptance rate, so adaptation diminishes with batch index b.
class ArwmSampler {
 public:
  explicit ArwmSampler(double init_step = 0.1) : log_step_(std::log(init_step)) {}

  template <class F>
  bool update(double& x, F&& log_target, Rng& rng) {
    double cur = log_target(x);
    if (!std::isfinite(cur)) throw NumericalError("non-finite log target at current point");
    double prop = x + std::exp(log_step_) * rnorm(rng);
    double lp = log_target(prop);
    if (std::isnan(lp)) throw NumericalError("log target returned NaN at proposal");
    bool accept = lp > kNegInf && std::log(runif(rng)) < lp - cur;
    if (accept) x = prop;
    ++total_n_;
    total_acc_ += accept;
    if (frozen_) return accept;
    ++batch_n_;
    batch_acc_ += accept;
    if (batch_n_ == kBatch) {
      ++batch_idx_;
      double delta = std::min(0.01, 1.0 / std::sqrt(static_cast<double>(batch_idx_)));
      log_step_ += (static_cast<double>(batch_acc_) / kBatch > kTargetRate) ? delta : -delta;
      batch_n_ = 0;
      batch_acc_ = 0;
    }
    return accept;
  }

  double step() const { return std::exp(log_step_); }
  long n_updates() const { return total_n_; }
  double acceptance_rate() const {
    return total_n_ ? static_cast<double>(total_acc_) / total_n_ : 0.0;
  }
  void reset_stats() { total_n_ = total_acc_ = 0; }
  void freeze() { frozen_ = true; }

  static constexpr int kBatch = 50;
  static constexpr double kTargetRate = 0.44;

 private:
  double log_step_;
  bool frozen_ = false;
  int batch_n_ = 0, batch_acc_ = 0;
  long batch_idx_ = 0, total_n_ = 0, total_acc_ = 0;
};

/// Factor slice sampler for a correlated parameter block. Each sweep slices
/// along every column of an orthonormal factor basis with stepping-out and
/// shrinkage; the basis is refreshed from the eigenvectors of the running
/// sample covariance every refresh_every sweeps until frozen, and interval
/// widths adapt from the balance of expansions and contractions.
class AfssSampler {
 public:
  explicit AfssSampler(int dim, double init_width = 1.0, int refresh_every = 200)
      : dim_(dim),
        refresh_every_(refresh_every),
        basis_(Eigen::MatrixXd::Identity(dim, dim)),
        widths_(dim, init_width),
        mean_(Eigen::VectorXd::Zero(dim)),
        m2_(Eigen::MatrixXd::Zero(dim, dim)) {
    if (dim < 2) throw ValidationError("factor slice blocks need dimension >= 2");
    if (!(init_width > 0)) throw ValidationError("slice width must be positive");
  }

  template <class F>
  void update(std::vector<double>& x, F&& log_target, Rng& rng) {
    if (static_cast<int>(x.size()) != dim_) throw ValidationError("block dimension mismatch");
    double fx = log_target(x);
    if (!std::isfinite(fx)) throw NumericalError("non-finite log target at current point");
    xt_.resize(dim_);
    for (int k = 0; k < dim_; ++k) {
      const double w = widths_[k];
      auto eval = [&](double t) {
        for (int j = 0; j < dim_; ++j) xt_[j] = x[j] + t * basis_(j, k);
        double f = log_target(xt_);
        if (std::isnan(f)) throw NumericalError("log target returned NaN on slice");
        return f;
      };
      double level = fx + std::log(runif(rng));
      // expand by doubling until both ends leave the slice
      double lo = -w * runif(rng), hi = lo + w;
      double flo = eval(lo), fhi = eval(hi);
      int doublings = 0;
      while (flo > level || fhi > level) {
        if (++doublings > kMaxExpand) throw NumericalError("slice doubling exceeded cap");
        if (rbern(rng, 0.5)) {
          lo -= hi - lo;
          flo = eval(lo);
        } else {
          hi += hi - lo;
          fhi = eval(hi);
        }
      }
      int contractions = 0;
      double slo = lo, shi = hi;
      for (;;) {
        double t = runif(rng, slo, shi);
        double ft = eval(t);
        if (ft > level && doubling_acceptable(eval, level, w, lo, hi, t)) {
          for (int j = 0; j < dim_; ++j) x[j] = x[j] + t * basis_(j, k);
          fx = ft;
          break;
        }
        ++contractions;
        (t < 0.0 ? slo : shi) = t;
        if (shi - slo < 1e-14) break;  // numerically collapsed: keep the current point
      }
      if (!frozen_) {
        // balance doublings against contractions (+1 keeps the factor positive)
        double e = doublings + 1.0, c = contractions + 1.0;
        widths_[k] = std::clamp(widths_[k] * 2.0 * e / (e + c), 1e-8, 1e8);
      }
    }
    if (!frozen_) {
      ++n_;
      Eigen::Map<const Eigen::VectorXd> xv(x.data(), dim_);
      Eigen::VectorXd delta = xv - mean_;
      mean_ += delta / static_cast<double>(n_);
      m2_.noalias() += delta * (xv - mean_).transpose();
      ++sweeps_;
      if (sweeps_ % refresh_every_ == 0) refresh_basis();
    }
  }

  /// Re-orient the factors along the eigenvectors of the running covariance
  /// and reset widths to the matching posterior scales.
  void refresh_basis() {
    if (n_ < 2 * dim_) return;
    Eigen::MatrixXd cov = m2_ / static_cast<double>(n_ - 1);
    cov = 0.5 * (cov + cov.transpose()).eval();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
    if (eig.info() != Eigen::Success) return;
    basis_ = eig.eigenvectors();
    for (int k = 0; k < dim_; ++k)
      widths_[k] = std::clamp(2.0 * std::sqrt(std::max(eig.eigenvalues()[k], 0.0)), 1e-6, 1e8);
  }

  void freeze() { frozen_ = true; }
  bool frozen() const { return frozen_; }
  const Eigen::MatrixXd& basis() const { return basis_; }
  const std::vector<double>& widths() const { return widths_; }

  static constexpr int kMaxExpand = 100;

 private:
  // Acceptability test for candidate points found under interval doubling:
  // retrace the doubling sequence toward the proposal and reject it when its
  // half detaches from the current point's below the slice level.
  template <class E>
  static bool doubling_acceptable(E&& eval, double level, double w, double lo, double hi,
                                  double t) {
    bool differ = false;
    while (hi - lo > 1.1 * w) {
      double mid = 0.5 * (lo + hi);
      if ((t < mid) != (0.0 < mid)) differ = true;
      if (t < mid)
        hi = mid;
      else
        lo = mid;
      if (differ && level >= eval(lo) && level >= eval(hi)) return false;
    }
    return true;
  }

  int dim_;
  int refresh_every_;
  long sweeps_ = 0, n_ = 0;
  bool frozen_ = false;
  Eigen::MatrixXd basis_;
  std::vector<double> widths_;
  Eigen::VectorXd mean_;
  Eigen::MatrixXd m2_;
  std::vector<double> xt_;
};

}  // namespace zscms
