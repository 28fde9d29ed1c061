#include <algorithm>
#include <cmath>
#include <vector>

#include "catch2/catch_amalgamated.hpp"
#include "helpers.hpp"
#include "zscms/filtering.hpp"
#include "zscms/oracle.hpp"

using namespace zscms;
using Catch::Matchers::WithinAbs;

namespace {

// Exact single-site conditional by toggling the cell in a complete path and
// weighing both branches with the elementary densities.
double enumerated_conditional(const zt::Tiny& ti, const StateField& S, int i, int t) {
  StateField C = S;
  C.set(i, t, 0);
  double lw0 = oracle::path_logweight(ti.m, ti.d, ti.init, C, ti.v, true);
  C.set(i, t, 1);
  double lw1 = oracle::path_logweight(ti.m, ti.d, ti.init, C, ti.v, true);
  if (lw1 == kNegInf) return 0.0;
  if (lw0 == kNegInf) return 1.0;
  return 1.0 / (1.0 + std::exp(lw0 - lw1));
}

void randomize_free_cells(StateField& S, Rng& rng) {
  for (int i = 0; i < S.n; ++i)
    for (int t = 0; t <= S.T; ++t)
      if (!S.is_fixed(i, t)) S.set(i, t, rbern(rng, 0.5) ? 1 : 0);
}

std::vector<zt::TinyOpt> variant_grid() {
  std::vector<zt::TinyOpt> out;
  zt::TinyOpt base;
  out.push_back(base);
  zt::TinyOpt o = base;
  o.poisson = true;
  out.push_back(o);
  o = base;
  o.per_area_r = true;
  o.log_lag = true;
  out.push_back(o);
  o = base;
  o.endemic = true;
  out.push_back(o);
  o = base;
  o.coupled = false;
  o.pair_cov = false;
  out.push_back(o);
  o = base;
  o.pair_cov = false;
  o.degenerate_init = true;
  out.push_back(o);
  return out;
}

}  // namespace

TEST_CASE("state initialization forces observed presence and degenerate starts") {
  Rng rng = make_rng(401, 0);
  zt::TinyOpt opt;
  opt.n = 3;
  opt.T = 3;
  zt::Tiny ti = zt::random_tiny(rng, opt);
  ti.init.pi0 = {1.0, 0.0, 0.4};
  StateField S = initialize_states(ti.d, ti.init);
  CHECK(S.at(0, 0) == 1);
  CHECK(S.is_fixed(0, 0));
  CHECK(S.at(1, 0) == 0);
  CHECK(S.is_fixed(1, 0));
  CHECK_FALSE(S.is_fixed(2, 0));
  for (int i = 0; i < 3; ++i)
    for (int t = 1; t <= 3; ++t) {
      if (ti.d.count(i, t) > 0) {
        CHECK(S.at(i, t) == 1);
        CHECK(S.is_fixed(i, t));
      } else {
        CHECK(S.at(i, t) == 0);
        CHECK_FALSE(S.is_fixed(i, t));
      }
    }
}

TEST_CASE("areas with every cell forced need no sampling") {
  Rng rng = make_rng(402, 0);
  zt::Tiny ti = zt::random_tiny(rng, {});
  ti.init.pi0 = {1.0, 0.6};
  for (int t = 1; t <= ti.d.T; ++t) {
    ti.d.count(0, t) = 2;
    ti.d.count(1, t) = 3;
  }
  CHECK_FALSE(area_needs_sampling(ti.d, ti.init, 0));
  CHECK(area_needs_sampling(ti.d, ti.init, 1));  // free initial state
  ti.init.pi0[1] = 0.0;
  ti.d.count(1, 2) = 0;
  CHECK(area_needs_sampling(ti.d, ti.init, 1));  // one zero count
}

TEST_CASE("pair blocks greedily match ascending indices on a path graph") {
  int n = 5, T = 2;
  PanelData d;
  std::vector<std::pair<int, int>> edges;
  for (int i = 0; i + 1 < n; ++i) edges.emplace_back(i, i + 1);
  d.graph = make_graph(n, edges, true);
  d.T = T;
  d.y.assign(static_cast<size_t>(n) * T, 0);
  d.y0.assign(n, 0);
  InitialStateDist init;
  init.pi0.assign(n, 0.5);

  BlockPlan plan = build_blocks(d, init, 2);
  REQUIRE(plan.blocks.size() == 3);
  CHECK(plan.blocks[0] == std::vector<int>{0, 1});
  CHECK(plan.blocks[1] == std::vector<int>{2, 3});
  CHECK(plan.blocks[2] == std::vector<int>{4});
  CHECK(plan.boundaries[0] == std::vector<int>{2});
  CHECK(plan.boundaries[1] == std::vector<int>{1, 4});
  CHECK(plan.boundaries[2] == std::vector<int>{3});

  // area 1 fully forced: drops out of the plan but stays a boundary area
  init.pi0[1] = 1.0;
  for (int t = 1; t <= T; ++t) d.count(1, t) = 4;
  plan = build_blocks(d, init, 2);
  REQUIRE(plan.blocks.size() == 3);
  CHECK(plan.blocks[0] == std::vector<int>{0});
  CHECK(plan.blocks[1] == std::vector<int>{2, 3});
  CHECK(plan.blocks[2] == std::vector<int>{4});
  CHECK(plan.boundaries[0] == std::vector<int>{1});
  CHECK(plan.boundaries[1] == std::vector<int>{1, 4});

  BlockPlan singles = build_blocks(d, init, 1);
  REQUIRE(singles.blocks.size() == 4);
  for (const auto& b : singles.blocks) CHECK(b.size() == 1);
  CHECK_THROWS_AS(build_blocks(d, init, 0), ValidationError);
}

TEST_CASE("binary full conditional matches the enumerated toggle ratio") {
  Rng rng = make_rng(403, 0);
  for (const zt::TinyOpt& base : variant_grid()) {
    for (int n : {2, 3}) {
      zt::TinyOpt opt = base;
      opt.n = n;
      opt.T = 3;
      zt::Tiny ti = zt::random_tiny(rng, opt);
      StateField S = initialize_states(ti.d, ti.init);
      for (int rep = 0; rep < 2; ++rep) {
        randomize_free_cells(S, rng);
        for (int i = 0; i < n; ++i)
          for (int t = 0; t <= ti.d.T; ++t) {
            if (S.is_fixed(i, t)) continue;
            double p = binary_full_conditional(ti.m, ti.d, ti.init, S, ti.v, i, t);
            double q = enumerated_conditional(ti, S, i, t);
            CHECK_THAT(p, WithinAbs(q, 1e-10));
          }
      }
    }
  }
}

TEST_CASE("full conditional on a fixed cell is rejected") {
  Rng rng = make_rng(404, 0);
  zt::Tiny ti = zt::random_tiny(rng, {});
  ti.d.count(0, 1) = 5;
  StateField S = initialize_states(ti.d, ti.init);
  CHECK_THROWS_AS(binary_full_conditional(ti.m, ti.d, ti.init, S, ti.v, 0, 1), ValidationError);
}

TEST_CASE("single-area joint filter reproduces a hand-rolled scalar recursion") {
  Rng rng = make_rng(405, 0);
  zt::TinyOpt opt;
  opt.n = 1;
  opt.T = 4;
  opt.coupled = false;
  opt.pair_cov = false;
  opt.log_lag = true;
  zt::Tiny ti = zt::random_tiny(rng, opt);
  PanelSource src{&ti.d};

  double f[2] = {1.0 - ti.init.pi0[0], ti.init.pi0[0]};
  double ll = 0.0;
  for (int t = 1; t <= ti.d.T; ++t) {
    double u[2] = {0.0, 0.0};
    for (int sp = 0; sp < 2; ++sp) {
      TransProbs p = transition_probs(ti.m, ti.v, src, 0, t, [&](int) { return sp; });
      double p1 = sp ? p.p11 : p.p01;
      u[0] += f[sp] * (1.0 - p1);
      u[1] += f[sp] * p1;
    }
    double lam = mean_rate(ti.m, ti.v, src, 0, t);
    double rr = dispersion(ti.m, ti.v, 0);
    for (int s = 0; s < 2; ++s)
      u[s] *= std::exp(emission_logprob(ti.d.count(0, t), s, lam, rr, ti.m.spec.family));
    double c = u[0] + u[1];
    ll += std::log(c);
    f[0] = u[0] / c;
    f[1] = u[1] / c;
  }
  CHECK_THAT(filter_marginal_loglik(ti.m, ti.d, ti.init, ti.v), WithinAbs(ll, 1e-12));
}

TEST_CASE("joint filter likelihood equals path enumeration across variants") {
  Rng rng = make_rng(406, 0);
  for (const zt::TinyOpt& base : variant_grid())
    for (int n : {1, 2, 3})
      for (int T : {1, 3}) {
        zt::TinyOpt opt = base;
        opt.n = n;
        opt.T = T;
        zt::Tiny ti = zt::random_tiny(rng, opt);
        double ref = oracle::exact_loglik_enumeration(ti.m, ti.d, ti.init, ti.v);
        double got = filter_marginal_loglik(ti.m, ti.d, ti.init, ti.v);
        CHECK_THAT(got, WithinAbs(ref, 1e-10));
      }
}

TEST_CASE("sampling-mode shortcuts leave the normalised filter unchanged") {
  Rng rng = make_rng(407, 0);
  zt::TinyOpt opt;
  opt.n = 2;
  opt.T = 4;
  zt::Tiny ti = zt::random_tiny(rng, opt);
  // make one time fully forced so the point-mass skip engages
  ti.d.count(0, 2) = 3;
  ti.d.count(1, 2) = 1;
  StateField S = initialize_states(ti.d, ti.init);
  std::vector<int> all = {0, 1}, none;

  BlockFilter exact(ti.m, ti.d, ti.init);
  exact.forward(all, none, S, ti.v, {.exact_emissions = true, .record_predictive = false});
  BlockFilter fast(ti.m, ti.d, ti.init);
  fast.forward(all, none, S, ti.v, {});

  CHECK(fast.skipped(2));
  CHECK(fast.forced_config(2) == 3);
  for (int t = 0; t <= ti.d.T; ++t)
    for (int g = 0; g < exact.n_configs(); ++g) {
      double pe = std::exp(exact.filtered_row(t)[g]);
      double pf = std::exp(fast.filtered_row(t)[g]);
      CHECK_THAT(pf, WithinAbs(pe, 1e-12));
    }
}

TEST_CASE("filtered rows stay normalised with a conditioning boundary") {
  Rng rng = make_rng(408, 0);
  zt::TinyOpt opt;
  opt.n = 3;
  opt.T = 3;
  zt::Tiny ti = zt::random_tiny(rng, opt);
  StateField S = initialize_states(ti.d, ti.init);
  randomize_free_cells(S, rng);
  BlockPlan plan = build_blocks(ti.d, ti.init, 2);
  BlockFilter bf(ti.m, ti.d, ti.init);
  for (size_t b = 0; b < plan.blocks.size(); ++b) {
    bf.forward(plan.blocks[b], plan.boundaries[b], S, ti.v, {});
    for (int t = 0; t <= ti.d.T; ++t) {
      double sum = 0.0;
      for (int g = 0; g < bf.n_configs(); ++g) sum += std::exp(bf.filtered_row(t)[g]);
      CHECK_THAT(sum, WithinAbs(1.0, 1e-12));
    }
    CHECK_THROWS_AS(bf.marginal_loglik(), ValidationError);
  }
}

TEST_CASE("full-block backward draws reproduce exact smoothing marginals") {
  Rng rng = make_rng(409, 0);
  zt::TinyOpt opt;
  opt.n = 2;
  opt.T = 3;
  zt::Tiny ti = zt::random_tiny(rng, opt);
  ti.init.pi0 = {0.3, 1.0};
  ti.d.count(0, 1) = 0;
  ti.d.count(0, 2) = 2;
  ti.d.count(0, 3) = 0;
  ti.d.count(1, 1) = 0;
  ti.d.count(1, 2) = 0;
  ti.d.count(1, 3) = 1;

  std::vector<double> exact = oracle::exact_state_posterior(ti.m, ti.d, ti.init, ti.v);
  StateField S = initialize_states(ti.d, ti.init);
  std::vector<int> all = {0, 1}, none;
  BlockFilter bf(ti.m, ti.d, ti.init);
  bf.forward(all, none, S, ti.v, {});

  // boundary-free full block: every backward pass is an independent joint draw
  const int M = 4000;
  std::vector<double> mean(static_cast<size_t>(2) * (ti.d.T + 1), 0.0);
  for (int m = 0; m < M; ++m) {
    bf.backward_sample(S, ti.v, rng);
    for (int i = 0; i < 2; ++i)
      for (int t = 0; t <= ti.d.T; ++t)
        mean[static_cast<size_t>(i) * (ti.d.T + 1) + t] += S.at(i, t);
  }
  for (double& x : mean) x /= M;
  for (int i = 0; i < 2; ++i)
    for (int t = 0; t <= ti.d.T; ++t) {
      size_t c = static_cast<size_t>(i) * (ti.d.T + 1) + t;
      double p = exact[c];
      double tol = 4.0 * std::sqrt(std::max(p * (1.0 - p), 1e-4) / M);
      CHECK_THAT(mean[c], WithinAbs(p, tol));
    }
}

TEST_CASE("multi-block and single-site sweeps converge to exact marginals") {
  Rng rng = make_rng(410, 0);
  zt::TinyOpt opt;
  opt.n = 3;
  opt.T = 3;
  zt::Tiny ti = zt::random_tiny(rng, opt);
  ti.init.pi0 = {0.4, 0.7, 1.0};
  for (int i = 0; i < 3; ++i)
    for (int t = 1; t <= 3; ++t) ti.d.count(i, t) = 0;
  ti.d.count(1, 2) = 2;
  ti.d.count(2, 3) = 1;

  std::vector<double> exact = oracle::exact_state_posterior(ti.m, ti.d, ti.init, ti.v);
  auto run = [&](bool blocked, int burn, int M) {
    Rng chain = make_rng(411, blocked ? 1 : 2);
    StateField S = initialize_states(ti.d, ti.init);
    BlockPlan plan = build_blocks(ti.d, ti.init, 2);
    BlockFilter bf(ti.m, ti.d, ti.init);
    std::vector<double> mean(static_cast<size_t>(3) * (ti.d.T + 1), 0.0);
    for (int it = 0; it < burn + M; ++it) {
      if (blocked)
        block_sweep(S, ti.v, plan, bf, chain);
      else
        binary_sweep(ti.m, ti.d, ti.init, S, ti.v, chain);
      if (it >= burn)
        for (size_t c = 0; c < mean.size(); ++c) mean[c] += S.s[c];
    }
    for (double& x : mean) x /= M;
    return mean;
  };

  std::vector<double> blocked = run(true, 300, 6000);
  std::vector<double> single = run(false, 500, 6000);
  for (size_t c = 0; c < exact.size(); ++c) {
    CHECK_THAT(blocked[c], WithinAbs(exact[c], 0.06));
    CHECK_THAT(single[c], WithinAbs(exact[c], 0.06));
  }
}

TEST_CASE("sweeps never disturb forced cells") {
  Rng rng = make_rng(412, 0);
  zt::TinyOpt opt;
  opt.n = 3;
  opt.T = 4;
  zt::Tiny ti = zt::random_tiny(rng, opt);
  ti.init.pi0 = {1.0, 0.0, 0.5};
  StateField S = initialize_states(ti.d, ti.init);
  BlockPlan plan = build_blocks(ti.d, ti.init, 2);
  BlockFilter bf(ti.m, ti.d, ti.init);
  for (int it = 0; it < 50; ++it) {
    block_sweep(S, ti.v, plan, bf, rng);
    binary_sweep(ti.m, ti.d, ti.init, S, ti.v, rng);
    CHECK(S.at(0, 0) == 1);
    CHECK(S.at(1, 0) == 0);
    for (int i = 0; i < 3; ++i)
      for (int t = 1; t <= 4; ++t)
        if (ti.d.count(i, t) > 0) CHECK(S.at(i, t) == 1);
  }
}

TEST_CASE("fully forced panels leave nothing to sample") {
  Rng rng = make_rng(413, 0);
  zt::Tiny ti = zt::random_tiny(rng, {});
  ti.init.pi0 = {1.0, 1.0};
  for (int i = 0; i < 2; ++i)
    for (int t = 1; t <= ti.d.T; ++t) ti.d.count(i, t) = 1 + i + t;
  BlockPlan plan = build_blocks(ti.d, ti.init, 2);
  CHECK(plan.blocks.empty());
  StateField S = initialize_states(ti.d, ti.init);
  for (size_t c = 0; c < S.s.size(); ++c) {
    CHECK(S.s[c] == 1);
    CHECK(S.fixed[c] == 1);
  }
  // a manual block over forced areas degenerates to point masses throughout
  std::vector<int> all = {0, 1}, none;
  BlockFilter bf(ti.m, ti.d, ti.init);
  bf.forward(all, none, S, ti.v, {});
  for (int t = 0; t <= ti.d.T; ++t) {
    CHECK(bf.skipped(t));
    CHECK(bf.forced_config(t) == 3);
  }
  bf.backward_sample(S, ti.v, rng);
  for (size_t c = 0; c < S.s.size(); ++c) CHECK(S.s[c] == 1);
}

TEST_CASE("recorded predictive marginals match the enumeration oracle") {
  Rng rng = make_rng(414, 0);
  zt::TinyOpt opt;
  opt.n = 2;
  opt.T = 3;
  zt::Tiny ti = zt::random_tiny(rng, opt);
  ti.init.pi0 = {0.35, 0.8};
  ti.d.count(0, 1) = 0;
  ti.d.count(0, 2) = 1;
  ti.d.count(0, 3) = 0;
  ti.d.count(1, 1) = 2;
  ti.d.count(1, 2) = 0;
  ti.d.count(1, 3) = 0;

  StateField S = initialize_states(ti.d, ti.init);
  std::vector<int> all = {0, 1}, none;
  BlockFilter bf(ti.m, ti.d, ti.init);
  bf.forward(all, none, S, ti.v, {.exact_emissions = false, .record_predictive = true});
  for (int t = 1; t <= ti.d.T; ++t) {
    std::vector<double> ref = oracle::exact_one_step_predictive(ti.m, ti.d, ti.init, ti.v, t);
    for (int k = 0; k < 2; ++k)
      CHECK_THAT(bf.predictive_presence(k, t), WithinAbs(ref[k], 1e-9));
  }

  // fully forced times report presence one by convention
  ti.d.count(0, 2) = 4;
  ti.d.count(1, 2) = 2;
  StateField S2 = initialize_states(ti.d, ti.init);
  bf.forward(all, none, S2, ti.v, {.exact_emissions = false, .record_predictive = true});
  CHECK(bf.skipped(2));
  CHECK(bf.predictive_presence(0, 2) == 1.0);
  CHECK(bf.predictive_presence(1, 2) == 1.0);
}

TEST_CASE("filter rejects models without a latent state process") {
  Rng rng = make_rng(415, 0);
  zt::Tiny ti = zt::random_tiny(rng, {});
  ModelSpec spec = ti.m.spec;
  spec.zero_inflated = false;
  spec.trans = {};
  Model plain = make_model(spec, 2);
  CHECK_THROWS_AS(BlockFilter(plain, ti.d, ti.init), ValidationError);
}

TEST_CASE("joint filter is capped to enumerable sizes") {
  int n = 21, T = 1;
  PanelData d;
  std::vector<std::pair<int, int>> edges;
  for (int i = 0; i + 1 < n; ++i) edges.emplace_back(i, i + 1);
  d.graph = make_graph(n, edges, true);
  d.T = T;
  d.y.assign(static_cast<size_t>(n) * T, 0);
  d.y0.assign(n, 0);
  InitialStateDist init;
  init.pi0.assign(n, 0.5);
  ModelSpec spec;
  spec.trans.coupled = false;
  Model m = make_model(spec, n);
  ParamVector v(m.lay.total, 0.0);
  CHECK_THROWS_AS(filter_marginal_loglik(m, d, init, v), ValidationError);
}
