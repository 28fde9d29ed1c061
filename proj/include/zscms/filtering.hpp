#pragma once

#include <cstdio>
#include <numeric>
#include <vector>

#include "zscms/model.hpp"
#include "zscms/rng.hpp"

namespace zscms {

/// Presence forced to 1 wherever a positive count is observed, 0 elsewhere;
/// initial states follow degenerate initial distributions and start absent
/// otherwise. Fixed cells are never touched by any state sampler.
inline StateField initialize_states(const PanelData& d, const InitialStateDist& init) {
  int n = d.n_areas(), T = d.T;
  init.validate(n);
  StateField S{n, T, std::vector<uint8_t>(static_cast<size_t>(n) * (T + 1), 0),
               std::vector<uint8_t>(static_cast<size_t>(n) * (T + 1), 0)};
  for (int i = 0; i < n; ++i) {
    if (init.degenerate(i)) {
      S.set(i, 0, init.pi0[i] == 1.0 ? 1 : 0);
      S.fixed[static_cast<size_t>(i) * (T + 1)] = 1;
    }
    for (int t = 1; t <= T; ++t)
      if (d.count(i, t) > 0) {
        S.set(i, t, 1);
        S.fixed[static_cast<size_t>(i) * (T + 1) + t] = 1;
      }
  }
  return S;
}

inline bool area_needs_sampling(const PanelData& d, const InitialStateDist& init, int i) {
  if (!init.degenerate(i)) return true;
  for (int t = 1; t <= d.T; ++t)
    if (d.count(i, t) == 0) return true;
  return false;
}

/// Full conditional P(S_it = 1 | everything else): the zero-emission factor,
/// the incoming transition (or the initial distribution at t = 0) and the
/// outgoing transitions of i and of every neighbour at t + 1.
inline double binary_full_conditional(const Model& m, const PanelData& d,
                                      const InitialStateDist& init, const StateField& S,
                                      const ParamVector& v, int i, int t) {
  if (S.is_fixed(i, t)) throw ValidationError("full conditional requested for a fixed cell");
  PanelSource src{&d};
  int T = d.T, stride = T + 1;
  double lw[2] = {0.0, 0.0};
  if (t == 0) {
    lw[0] = init.logp(i, 0);
    lw[1] = init.logp(i, 1);
  } else {
    lw[1] = emission_logzero(1, mean_rate(m, v, src, i, t), dispersion(m, v, i), m.spec.family);
    const uint8_t* prev = S.col(t - 1);
    auto sprev = [&](int j) { return static_cast<int>(prev[static_cast<size_t>(j) * stride]); };
    TransLogits l = transition_logits(m, v, src, i, t, sprev);
    double lp = S.at(i, t - 1) ? clamp_linpred(l.lp11) : clamp_linpred(l.lp01);
    lw[1] += log_logistic(lp);
    lw[0] += log_logistic(-lp);
  }
  if (t < T) {
    const uint8_t* cur = S.col(t);
    auto out_term = [&](int j, int cand) {
      auto scur = [&](int q) {
        return q == i ? cand : static_cast<int>(cur[static_cast<size_t>(q) * stride]);
      };
      TransLogits l = transition_logits(m, v, src, j, t + 1, scur);
      int from = (j == i) ? cand : S.at(j, t);
      double lp = from ? clamp_linpred(l.lp11) : clamp_linpred(l.lp01);
      return S.at(j, t + 1) ? log_logistic(lp) : log_logistic(-lp);
    };
    for (int cand = 0; cand < 2; ++cand) {
      lw[cand] += out_term(i, cand);
      if (m.spec.trans.coupled)
        for (const int* j = d.graph.begin(i); j != d.graph.end(i); ++j)
          lw[cand] += out_term(*j, cand);
    }
  }
  if (lw[1] == kNegInf && lw[0] == kNegInf)
    throw NumericalError("zero-mass full conditional");
  if (lw[1] == kNegInf) return 0.0;
  if (lw[0] == kNegInf) return 1.0;
  return 1.0 / (1.0 + std::exp(lw[0] - lw[1]));
}

/// One-at-a-time systematic scan over all free cells, time-major.
inline void binary_sweep(const Model& m, const PanelData& d, const InitialStateDist& init,
                         StateField& S, const ParamVector& v, Rng& rng) {
  for (int t = 0; t <= d.T; ++t)
    for (int i = 0; i < d.n_areas(); ++i)
      if (!S.is_fixed(i, t))
        S.set(i, t, rbern(rng, binary_full_conditional(m, d, init, S, v, i, t)) ? 1 : 0);
}

/// Partition of the areas that need sampling, plus each block's boundary
/// (outside areas with a neighbour in the block, whose next-step transitions
/// the block conditions on).
struct BlockPlan {
  std::vector<std::vector<int>> blocks;
  std::vector<std::vector<int>> boundaries;
  int block_size = 2;
};

inline BlockPlan build_blocks(const PanelData& d, const InitialStateDist& init, int block_size) {
  if (block_size < 1) throw ValidationError("block size must be positive");
  if (block_size > 2)
    std::fprintf(stderr,
                 "note: block size %d costs O(4^size) per filter step; sizes above 2 are "
                 "rarely worth it\n",
                 block_size);
  int n = d.n_areas();
  std::vector<uint8_t> sampled(n, 0), assigned(n, 0);
  for (int i = 0; i < n; ++i) sampled[i] = area_needs_sampling(d, init, i) ? 1 : 0;

  BlockPlan plan;
  plan.block_size = block_size;
  for (int i = 0; i < n; ++i) {
    if (!sampled[i] || assigned[i]) continue;
    std::vector<int> block = {i};
    assigned[i] = 1;
    while (static_cast<int>(block.size()) < block_size) {
      // smallest-index unassigned sampled neighbour of any current member
      int pick = -1;
      for (int b : block)
        for (const int* j = d.graph.begin(b); j != d.graph.end(b); ++j)
          if (sampled[*j] && !assigned[*j] && (pick < 0 || *j < pick)) pick = *j;
      if (pick < 0) break;
      block.push_back(pick);
      assigned[pick] = 1;
    }
    std::sort(block.begin(), block.end());
    plan.blocks.push_back(std::move(block));
  }
  for (const auto& block : plan.blocks) {
    std::vector<int> bnd;
    auto in_block = [&](int j) {
      return std::binary_search(block.begin(), block.end(), j);
    };
    for (int b : block)
      for (const int* j = d.graph.begin(b); j != d.graph.end(b); ++j)
        if (!in_block(*j)) bnd.push_back(*j);
    std::sort(bnd.begin(), bnd.end());
    bnd.erase(std::unique(bnd.begin(), bnd.end()), bnd.end());
    plan.boundaries.push_back(std::move(bnd));
  }
  return plan;
}

/// Forward filter / backward sampler over one block of areas, conditioning
/// on all states outside the block. Log-space throughout with max-subtraction
/// normalisation; an all-zero filtered vector is a hard error.
///
/// Emission handling: cells with positive counts force presence; during
/// sampling their emission factor is a constant and is dropped, and a time
/// where every in-block cell is forced becomes a point mass with no matrix
/// work. With exact emissions (used when accumulating the marginal
/// likelihood) nothing is dropped or skipped.
class BlockFilter {
 public:
  struct Options {
    bool exact_emissions = false;
    bool record_predictive = false;  // keep one-step predictive rows per time
  };

  BlockFilter(const Model& m, const PanelData& d, const InitialStateDist& init)
      : m_(&m), d_(&d), init_(&init), member_bit_(d.n_areas(), -1) {
    if (!m.spec.zero_inflated)
      throw ValidationError("state filtering is undefined without zero inflation");
  }

  void forward(const std::vector<int>& areas, const std::vector<int>& boundary,
               const StateField& S, const ParamVector& v, Options opt) {
    nc_ = static_cast<int>(areas.size());
    if (nc_ < 1 || nc_ > 20) throw ValidationError("block size outside 1..20");
    G_ = 1 << nc_;
    T_ = d_->T;
    areas_ = &areas;
    boundary_ = &boundary;
    opt_ = opt;
    loglik_ = 0.0;
    logf_.assign(static_cast<size_t>(T_ + 1) * G_, kNegInf);
    skip_.assign(T_ + 1, 0);
    forced_.assign(T_ + 1, 0);
    if (opt.record_predictive) pred_.assign(static_cast<size_t>(T_ + 1) * G_, kNegInf);
    base01_.resize(std::max<size_t>(nc_, boundary.size()));
    base11_.resize(base01_.size());
    phi01_.assign(static_cast<size_t>(nc_) * nc_, 0.0);
    phi11_.assign(static_cast<size_t>(nc_) * nc_, 0.0);
    p1log_.resize(static_cast<size_t>(nc_) * G_);
    p0log_.resize(static_cast<size_t>(nc_) * G_);
    row_.resize(G_);
    for (int k = 0; k < nc_; ++k) member_bit_[areas[k]] = k;

    step0(S, v);
    for (int t = 1; t <= T_; ++t) step(S, v, t);

    for (int k = 0; k < nc_; ++k) member_bit_[areas[k]] = -1;
  }

  /// Marginal log p(y | v); requires exact emissions and an empty boundary
  /// (i.e. the block spans every area), otherwise the accumulated constant
  /// is not the likelihood.
  double marginal_loglik() const {
    if (!opt_.exact_emissions || !boundary_->empty())
      throw ValidationError("marginal likelihood needs exact emissions and a full block");
    return loglik_;
  }

  /// Draw a joint block path and write it into S. Uses the filtered rows of
  /// the last forward pass; transition tables are rebuilt per backward step.
  void backward_sample(StateField& S, const ParamVector& v, Rng& rng) {
    const std::vector<int>& areas = *areas_;
    for (int k = 0; k < nc_; ++k) member_bit_[areas[k]] = k;
    int g = sample_categorical_log(rng, &logf_[static_cast<size_t>(T_) * G_], G_);
    write_config(S, T_, g);
    for (int t = T_ - 1; t >= 0; --t) {
      member_transition_table(S, v, t + 1);
      for (int gp = 0; gp < G_; ++gp) {
        double w = logf_[static_cast<size_t>(t) * G_ + gp];
        if (w > kNegInf)
          for (int k = 0; k < nc_; ++k)
            w += (g >> k) & 1 ? p1log_[static_cast<size_t>(k) * G_ + gp]
                              : p0log_[static_cast<size_t>(k) * G_ + gp];
        row_[gp] = w;
      }
      g = sample_categorical_log(rng, row_.data(), G_);
      write_config(S, t, g);
    }
    for (int k = 0; k < nc_; ++k) member_bit_[areas[k]] = -1;
  }

  int n_configs() const { return G_; }
  bool skipped(int t) const { return skip_[t] != 0; }
  int forced_config(int t) const { return forced_[t]; }
  const double* filtered_row(int t) const { return &logf_[static_cast<size_t>(t) * G_]; }
  /// Normalised one-step predictive row for time t >= 1 (record_predictive).
  const double* predictive_row(int t) const { return &pred_[static_cast<size_t>(t) * G_]; }

  /// P(S_{c_k, t} = 1 | outside states, in-block data through t-1) from the
  /// recorded predictive row; 1 at skipped (fully forced) times.
  double predictive_presence(int k, int t) const {
    if (skip_[t]) return ((forced_[t] >> k) & 1) ? 1.0 : 0.0;
    double on = kNegInf, off = kNegInf;
    const double* row = predictive_row(t);
    for (int g = 0; g < G_; ++g) {
      double& side = ((g >> k) & 1) ? on : off;
      double x = row[g];
      if (x > side) std::swap(side, x);
      if (x > kNegInf) side += std::log1p(std::exp(x - side));
    }
    if (on == kNegInf) return 0.0;
    if (off == kNegInf) return 1.0;
    return 1.0 / (1.0 + std::exp(off - on));
  }

 private:
  void write_config(StateField& S, int t, int g) const {
    const std::vector<int>& areas = *areas_;
    for (int k = 0; k < nc_; ++k) S.set(areas[k], t, (g >> k) & 1);
  }

  /// Fills p1log_/p0log_ with each member's log transition probabilities
  /// into time t for every previous in-block configuration, conditioning on
  /// the current outside states at t-1.
  void member_transition_table(const StateField& S, const ParamVector& v, int t) {
    PanelSource src{d_};
    const std::vector<int>& areas = *areas_;
    int stride = T_ + 1;
    const uint8_t* prev = S.col(t - 1);
    auto sprev0 = [&](int j) {
      return member_bit_[j] >= 0 ? 0 : static_cast<int>(prev[static_cast<size_t>(j) * stride]);
    };
    for (int k = 0; k < nc_; ++k) {
      int a = areas[k];
      TransLogits l = transition_logits(*m_, v, src, a, t, sprev0);
      base01_[k] = l.lp01;
      base11_[k] = l.lp11;
      if (m_->spec.trans.coupled) {
        int deg = d_->graph.degree(a);
        const int* nb = d_->graph.begin(a);
        for (int jn = 0; jn < deg; ++jn) {
          int kp = member_bit_[nb[jn]];
          if (kp < 0) continue;
          phi01_[static_cast<size_t>(k) * nc_ + kp] = coupling01(*m_, v, src, a, jn, t);
          phi11_[static_cast<size_t>(k) * nc_ + kp] = coupling11(*m_, v, src, a, jn, t);
        }
      }
    }
    for (int gp = 0; gp < G_; ++gp)
      for (int k = 0; k < nc_; ++k) {
        bool from1 = (gp >> k) & 1;
        double lp = from1 ? base11_[k] : base01_[k];
        if (m_->spec.trans.coupled) {
          const double* phi = (from1 ? phi11_ : phi01_).data() + static_cast<size_t>(k) * nc_;
          for (int kp = 0; kp < nc_; ++kp)
            if ((gp >> kp) & 1) lp += phi[kp];
        }
        lp = clamp_linpred(lp);
        p1log_[static_cast<size_t>(k) * G_ + gp] = log_logistic(lp);
        p0log_[static_cast<size_t>(k) * G_ + gp] = log_logistic(-lp);
      }
  }

  /// row[g] += sum over boundary areas j of
  /// log p(S_{j,t+1} = current | block config g at t, outside current).
  void add_boundary_factors(const StateField& S, const ParamVector& v, int t, double* row) {
    PanelSource src{d_};
    int stride = T_ + 1;
    const uint8_t* cur = S.col(t);
    auto scur0 = [&](int j) {
      return member_bit_[j] >= 0 ? 0 : static_cast<int>(cur[static_cast<size_t>(j) * stride]);
    };
    for (int j : *boundary_) {
      TransLogits l = transition_logits(*m_, v, src, j, t + 1, scur0);
      bool from1 = S.at(j, t) != 0;
      double base = from1 ? l.lp11 : l.lp01;
      double delta[20];
      for (int k = 0; k < nc_; ++k) delta[k] = 0.0;
      if (m_->spec.trans.coupled) {
        int deg = d_->graph.degree(j);
        const int* nb = d_->graph.begin(j);
        for (int jn = 0; jn < deg; ++jn) {
          int k = member_bit_[nb[jn]];
          if (k < 0) continue;
          delta[k] = from1 ? coupling11(*m_, v, src, j, jn, t + 1)
                           : coupling01(*m_, v, src, j, jn, t + 1);
        }
      }
      bool next1 = S.at(j, t + 1) != 0;
      for (int g = 0; g < G_; ++g) {
        if (row[g] == kNegInf) continue;
        double lp = base;
        for (int k = 0; k < nc_; ++k)
          if ((g >> k) & 1) lp += delta[k];
        lp = clamp_linpred(lp);
        row[g] += next1 ? log_logistic(lp) : log_logistic(-lp);
      }
    }
  }

  /// Normalise row_ into logf_ at time t, accumulating the constant.
  void commit_row(int t) {
    double mx = kNegInf;
    for (int g = 0; g < G_; ++g) mx = std::max(mx, row_[g]);
    if (mx == kNegInf)
      throw NumericalError("block filter: zero filtered mass at time " + std::to_string(t));
    double acc = 0.0;
    for (int g = 0; g < G_; ++g)
      if (row_[g] > kNegInf) acc += std::exp(row_[g] - mx);
    double lse = mx + std::log(acc);
    loglik_ += lse;
    double* out = &logf_[static_cast<size_t>(t) * G_];
    for (int g = 0; g < G_; ++g) out[g] = row_[g] - lse;
  }

  void step0(const StateField& S, const ParamVector& v) {
    const std::vector<int>& areas = *areas_;
    if (!opt_.exact_emissions) {
      bool all_forced = true;
      int cfg = 0;
      for (int k = 0; k < nc_; ++k) {
        if (!init_->degenerate(areas[k])) {
          all_forced = false;
          break;
        }
        if (init_->pi0[areas[k]] == 1.0) cfg |= 1 << k;
      }
      if (all_forced) {
        skip_[0] = 1;
        forced_[0] = cfg;
        logf_[cfg] = 0.0;
        return;
      }
    }
    for (int g = 0; g < G_; ++g) {
      double w = 0.0;
      for (int k = 0; k < nc_; ++k) w += init_->logp(areas[k], (g >> k) & 1);
      row_[g] = w;
    }
    if (T_ >= 1) add_boundary_factors(S, v, 0, row_.data());
    commit_row(0);
  }

  void step(const StateField& S, const ParamVector& v, int t) {
    const std::vector<int>& areas = *areas_;
    PanelSource src{d_};

    if (!opt_.exact_emissions) {
      bool all_forced = true;
      for (int k = 0; k < nc_; ++k)
        if (d_->count(areas[k], t) == 0) {
          all_forced = false;
          break;
        }
      if (all_forced) {
        skip_[t] = 1;
        forced_[t] = G_ - 1;
        logf_[static_cast<size_t>(t) * G_ + (G_ - 1)] = 0.0;
        return;
      }
    }

    member_transition_table(S, v, t);
    const double* fprev = &logf_[static_cast<size_t>(t - 1) * G_];
    for (int g = 0; g < G_; ++g) {
      double mx = kNegInf;
      for (int gp = 0; gp < G_; ++gp) {
        if (fprev[gp] == kNegInf) continue;
        double w = fprev[gp];
        for (int k = 0; k < nc_; ++k)
          w += (g >> k) & 1 ? p1log_[static_cast<size_t>(k) * G_ + gp]
                            : p0log_[static_cast<size_t>(k) * G_ + gp];
        if (w > mx) std::swap(mx, w);
        if (w > kNegInf) mx += std::log1p(std::exp(w - mx));
      }
      row_[g] = mx;
    }
    if (opt_.record_predictive) {
      double* p = &pred_[static_cast<size_t>(t) * G_];
      for (int g = 0; g < G_; ++g) p[g] = row_[g];
    }

    for (int k = 0; k < nc_; ++k) {
      int a = areas[k];
      long y = d_->count(a, t);
      double lam = 0.0, r = 0.0;
      bool need_rate = y == 0 || opt_.exact_emissions;
      if (need_rate) {
        lam = mean_rate(*m_, v, src, a, t);
        r = dispersion(*m_, v, a);
      }
      for (int g = 0; g < G_; ++g) {
        if (row_[g] == kNegInf) continue;
        int s = (g >> k) & 1;
        if (y > 0) {
          if (!s)
            row_[g] = kNegInf;
          else if (opt_.exact_emissions)
            row_[g] += emission_logprob(y, 1, lam, r, m_->spec.family);
          // sampling mode: forced-present emission is a constant, dropped
        } else {
          row_[g] += emission_logzero(s, lam, r, m_->spec.family);
        }
      }
    }
    if (t < T_) add_boundary_factors(S, v, t, row_.data());
    commit_row(t);
  }

  const Model* m_;
  const PanelData* d_;
  const InitialStateDist* init_;
  const std::vector<int>* areas_ = nullptr;
  const std::vector<int>* boundary_ = nullptr;
  Options opt_;
  int nc_ = 0, G_ = 0, T_ = 0;
  double loglik_ = 0.0;
  std::vector<int> member_bit_;
  std::vector<double> logf_, pred_, base01_, base11_, phi01_, phi11_, p1log_, p0log_, row_;
  std::vector<uint8_t> skip_;
  std::vector<int> forced_;
};

/// One systematic pass of blocked forward-filter backward-sampling over the
/// whole plan, updating S in place. The filter carries the model and data.
inline void block_sweep(StateField& S, const ParamVector& v, const BlockPlan& plan,
                        BlockFilter& bf, Rng& rng) {
  for (size_t b = 0; b < plan.blocks.size(); ++b) {
    bf.forward(plan.blocks[b], plan.boundaries[b], S, v, {});
    bf.backward_sample(S, v, rng);
  }
}

/// Exact marginal log p(y | v) via the joint filter over all areas at once;
/// cost grows as 2^N so this is a small-instance tool.
inline double filter_marginal_loglik(const Model& m, const PanelData& d,
                                     const InitialStateDist& init, const ParamVector& v) {
  int n = d.n_areas();
  if (n > 20) throw ValidationError("joint filter capped at 20 areas");
  std::vector<int> all(n);
  std::iota(all.begin(), all.end(), 0);
  std::vector<int> empty;
  StateField S = initialize_states(d, init);
  BlockFilter bf(m, d, init);
  bf.forward(all, empty, S, v, {.exact_emissions = true, .record_predictive = false});
  return bf.marginal_loglik();
}

}  // namespace zscms
