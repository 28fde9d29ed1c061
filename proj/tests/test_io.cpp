#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "catch2/catch_amalgamated.hpp"
#include "helpers.hpp"
#include "zscms/io.hpp"

using namespace zscms;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::WithinAbs;

namespace {

namespace fs = std::filesystem;

// fresh scratch directory per test run
fs::path scratch_dir(const std::string& tag) {
  fs::path p = fs::temp_directory_path() / ("zscms_io_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void put(const fs::path& p, const std::string& text) {
  std::ofstream out(p);
  out << text;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// a 3-area path graph panel with one dynamic covariate pair, one static
// covariate, and a pair covariate on both couplings
fs::path write_basic_panel(const std::string& tag) {
  fs::path dir = scratch_dir(tag);
  put(dir / "counts.csv",
      "area_id,time,count\n"
      "a,0,2\n"
      "a,1,3\na,2,0\n"
      "b,1,0\nb,2,5\nb,0,0\n"
      "c,1,1\nc,2,1\n");
  put(dir / "adjacency.csv",
      "area_i,area_j\n"
      "a,b\nb,a\nb,c\nc,b\n");
  put(dir / "dynamic.csv",
      "area_id,time,temp\n"
      "a,1,0.5\na,2,-0.25\n"
      "b,1,1.5\nb,2,2.5\n"
      "c,1,-1.0\nc,2,0.125\n");
  put(dir / "static.csv",
      "area_id,hdi\n"
      "a,0.7\nb,0.4\nc,0.9\n");
  put(dir / "pairs.csv",
      "area_i,area_j,barrier\n"
      "a,b,1.0\nb,c,0.0\n");
  return dir;
}

PanelPaths basic_paths(const fs::path& dir) {
  PanelPaths p;
  p.counts = (dir / "counts.csv").string();
  p.adjacency = (dir / "adjacency.csv").string();
  p.covariates = {(dir / "dynamic.csv").string(), (dir / "static.csv").string()};
  p.pair_covariates = (dir / "pairs.csv").string();
  return p;
}

}  // namespace

TEST_CASE("panel CSVs load with first-appearance area order") {
  fs::path dir = write_basic_panel("load");
  PanelBundle b = load_panel(basic_paths(dir));
  const PanelData& d = b.data;

  CHECK(b.area_ids == std::vector<std::string>{"a", "b", "c"});
  CHECK(d.T == 2);
  CHECK(d.y0 == std::vector<long>{2, 0, 0});
  CHECK(d.count(0, 1) == 3);
  CHECK(d.count(0, 2) == 0);
  CHECK(d.count(1, 2) == 5);
  CHECK(d.count(2, 1) == 1);

  REQUIRE(d.graph.n_areas == 3);
  CHECK(d.graph.degree(0) == 1);
  CHECK(d.graph.degree(1) == 2);
  CHECK(d.graph.degree(2) == 1);

  REQUIRE(d.covs.names == std::vector<std::string>{"temp", "hdi"});
  CHECK(d.covs.at(0, 2, 0) == -0.25);
  CHECK(d.covs.at(2, 2, 0) == 0.125);
  // static column expands across both times
  CHECK(d.covs.at(1, 1, 1) == 0.4);
  CHECK(d.covs.at(1, 2, 1) == 0.4);

  // the single pair row fills both directed slots
  REQUIRE(d.pair_covs.names == std::vector<std::string>{"barrier"});
  auto slot = [&](int i, int j) {
    for (int kn = 0; kn < d.graph.degree(i); ++kn)
      if (d.graph.begin(i)[kn] == j) return d.graph.slot(i, kn);
    return -1;
  };
  CHECK(d.pair_covs.at(slot(0, 1), 1, 0) == 1.0);
  CHECK(d.pair_covs.at(slot(1, 0), 2, 0) == 1.0);
  CHECK(d.pair_covs.at(slot(1, 2), 1, 0) == 0.0);
  CHECK(d.pair_covs.at(slot(2, 1), 1, 0) == 0.0);
}

TEST_CASE("panel loading errors carry file and line context") {
  fs::path dir = write_basic_panel("err");
  PanelPaths p = basic_paths(dir);

  SECTION("negative count names the offending line") {
    put(dir / "counts.csv", "area_id,time,count\na,1,3\na,2,-1\nb,1,0\nb,2,0\n");
    p.covariates.clear();
    p.pair_covariates.clear();
    CHECK_THROWS_WITH(load_panel(p),
                      ContainsSubstring("counts.csv:3") && ContainsSubstring("negative count"));
  }
  SECTION("duplicate cell is rejected") {
    put(dir / "counts.csv", "area_id,time,count\na,1,3\na,1,4\n");
    CHECK_THROWS_WITH(load_panel(p), ContainsSubstring("duplicate (area,time)"));
  }
  SECTION("missing cell is named") {
    put(dir / "counts.csv", "area_id,time,count\na,1,3\na,2,1\nb,1,0\n");
    CHECK_THROWS_WITH(load_panel(p), ContainsSubstring("missing count for area 'b' at time 2"));
  }
  SECTION("dangling adjacency id is named with its line") {
    put(dir / "adjacency.csv", "area_i,area_j\na,b\nb,a\nb,zz\n");
    CHECK_THROWS_WITH(load_panel(p),
                      ContainsSubstring("adjacency.csv:4") && ContainsSubstring("'zz'"));
  }
  SECTION("asymmetric adjacency fails without the symmetrize flag") {
    put(dir / "adjacency.csv", "area_i,area_j\na,b\nb,a\nb,c\n");
    CHECK_THROWS_AS(load_panel(p), ValidationError);
    p.symmetrize = true;
    PanelBundle b = load_panel(p);
    CHECK(b.data.graph.degree(2) == 1);  // c-b edge completed
  }
  SECTION("self adjacency is rejected") {
    put(dir / "adjacency.csv", "area_i,area_j\na,a\n");
    CHECK_THROWS_WITH(load_panel(p), ContainsSubstring("self-adjacency"));
  }
  SECTION("ragged row is rejected with its line number") {
    put(dir / "counts.csv", "area_id,time,count\na,1\n");
    CHECK_THROWS_WITH(load_panel(p), ContainsSubstring("counts.csv:2"));
  }
  SECTION("unparseable numbers are rejected") {
    put(dir / "counts.csv", "area_id,time,count\na,1,many\n");
    CHECK_THROWS_WITH(load_panel(p), ContainsSubstring("cannot parse count"));
  }
}

TEST_CASE("covariate tables validate coverage, keys and duplicates") {
  fs::path dir = write_basic_panel("cov");
  PanelPaths p = basic_paths(dir);

  SECTION("unknown area id") {
    put(dir / "dynamic.csv", "area_id,time,temp\nqq,1,0.0\n");
    CHECK_THROWS_WITH(load_panel(p), ContainsSubstring("dangling area id 'qq'"));
  }
  SECTION("time out of range") {
    put(dir / "dynamic.csv", "area_id,time,temp\na,3,0.0\n");
    CHECK_THROWS_WITH(load_panel(p),
                      ContainsSubstring("dynamic.csv:2") && ContainsSubstring("time out of range"));
  }
  SECTION("duplicate dynamic row") {
    put(dir / "dynamic.csv",
        "area_id,time,temp\na,1,0.0\na,1,1.0\na,2,0\nb,1,0\nb,2,0\nc,1,0\nc,2,0\n");
    CHECK_THROWS_WITH(load_panel(p), ContainsSubstring("duplicate (area,time) covariate row"));
  }
  SECTION("incomplete coverage names the hole") {
    put(dir / "dynamic.csv", "area_id,time,temp\na,1,0.0\na,2,0\nb,1,0\nb,2,0\nc,1,0\n");
    CHECK_THROWS_WITH(load_panel(p),
                      ContainsSubstring("missing covariate row for area 'c' at time 2"));
  }
  SECTION("colliding covariate names across files") {
    put(dir / "static.csv", "area_id,temp\na,1\nb,1\nc,1\n");
    CHECK_THROWS_AS(load_panel(p), ValidationError);
  }
  SECTION("non-adjacent pair covariate row") {
    put(dir / "pairs.csv", "area_i,area_j,barrier\na,c,1.0\n");
    CHECK_THROWS_WITH(load_panel(p), ContainsSubstring("not adjacent"));
  }
}

TEST_CASE("run configuration is fail-closed at every nesting level") {
  auto parse = [](const std::string& text) { return parse_config(nlohmann::json::parse(text)); };

  CHECK_THROWS_WITH(parse(R"({"surprise": 1})"),
                    ContainsSubstring("unknown config key 'surprise'"));
  CHECK_THROWS_WITH(parse(R"({"fit": {"iters": 10}})"),
                    ContainsSubstring("'iters'") && ContainsSubstring("'fit'"));
  CHECK_THROWS_WITH(parse(R"({"model": {"zi": true}})"), ContainsSubstring("'zi'"));
  CHECK_THROWS_WITH(parse(R"({"model": {"mean": {"xs": []}}})"), ContainsSubstring("'xs'"));
  CHECK_THROWS_WITH(parse(R"({"model": {"transitions": {"z0": []}}})"),
                    ContainsSubstring("'z0'"));
  CHECK_THROWS_WITH(parse(R"({"prior": {"sd": 1}})"), ContainsSubstring("'sd'"));
  CHECK_THROWS_WITH(parse(R"({"data": {"count": "x"}})"), ContainsSubstring("'count'"));
  CHECK_THROWS_WITH(parse(R"({"init": {"p": 0.5}})"), ContainsSubstring("'p'"));
  CHECK_THROWS_WITH(parse(R"({"forecast": {"h": 1}})"), ContainsSubstring("'h'"));
  CHECK_THROWS_WITH(parse(R"({"generator": {"n": 4}})"), ContainsSubstring("'n'"));
  CHECK_THROWS_WITH(parse(R"({"study": {"reps": 4}})"), ContainsSubstring("'reps'"));
  CHECK_THROWS_WITH(parse(R"({"model": {"family": "gaussian"}})"),
                    ContainsSubstring("negbinomial or poisson"));

  SECTION("defaults survive an empty config") {
    RunConfig rc = parse("{}");
    CHECK(rc.fit.iterations == 80000);
    CHECK(rc.fit.burn_in == 30000);
    CHECK(rc.fit.n_chains == 3);
    CHECK(rc.model.zero_inflated);
    CHECK(rc.model.family == EmissionFamily::NegBinomial);
    CHECK(rc.horizon == 1);
    CHECK(rc.spread_threshold == 1.2);
    CHECK(rc.arrow_prob == 0.75);
  }
}

TEST_CASE("config values map onto model, sampler and study settings") {
  const std::string text = R"({
    "model": {
      "zero_inflated": true, "family": "poisson", "dispersion": "per_area",
      "mean": {"variant": "log_linear", "x": ["temp", "hdi"], "log_lag_count": true},
      "transitions": {"z01": ["temp"], "z11": ["temp"], "coupled": true,
                      "c01": ["barrier"], "c11": ["barrier"], "z11_log_lag_count": true}
    },
    "fit": {"iterations": 1234, "burn_in": 345, "thin": 2, "chains": 4, "seed": 99,
            "state_sampler": "binary", "block_size": 3, "afss": false, "store_states": 1},
    "prior": {"coef_sd": 5.5, "r_shape": 0.2, "r_rate": 0.3, "sigma_scale": 2.0},
    "data": {"counts": "c.csv", "adjacency": "a.csv", "covariates": ["v.csv"],
             "pair_covariates": "p.csv", "symmetrize": true},
    "init": {"presence_prob": 0.25},
    "forecast": {"horizon": 3, "covariates": ["f.csv"], "spread_threshold": 1.5,
                 "arrow_prob": 0.9, "acf_max_lag": 6},
    "generator": {"rows": 5, "cols": 6, "T": 42, "beta0": -1.0, "sparse_multiplier": 2},
    "study": {"replications": 7, "ess_min": 500, "rhat_max": 1.2}
  })";
  RunConfig rc = parse_config(nlohmann::json::parse(text));

  CHECK(rc.model.family == EmissionFamily::Poisson);
  CHECK(rc.model.dispersion == DispersionForm::PerArea);
  CHECK(rc.model.mean.log_lag_count);
  REQUIRE(rc.model.mean.x.size() == 2);
  CHECK(rc.model.mean.x[1].name == "hdi");
  CHECK(rc.model.mean.x[1].col == -1);  // resolved only against a panel
  CHECK(rc.model.trans.coupled);
  CHECK(rc.model.trans.z11_log_lag_count);
  REQUIRE(rc.model.trans.c11.size() == 1);

  CHECK(rc.fit.iterations == 1234);
  CHECK(rc.fit.burn_in == 345);
  CHECK(rc.fit.thin == 2);
  CHECK(rc.fit.n_chains == 4);
  CHECK(rc.fit.seed == 99);
  CHECK(rc.fit.state_sampler == StateSampler::Binary);
  CHECK(rc.fit.block_size == 3);
  CHECK_FALSE(rc.fit.afss);
  CHECK(rc.fit.store_states == 1);

  CHECK(rc.prior.coef_sd == 5.5);
  CHECK(rc.prior.r_shape == 0.2);
  CHECK(rc.prior.sigma_scale == 2.0);

  CHECK(rc.data.counts == "c.csv");
  CHECK(rc.data.symmetrize);
  CHECK(rc.init_presence == 0.25);

  CHECK(rc.horizon == 3);
  CHECK(rc.scenario.covariates == std::vector<std::string>{"f.csv"});
  CHECK(rc.spread_threshold == 1.5);
  CHECK(rc.arrow_prob == 0.9);
  CHECK(rc.acf_max_lag == 6);

  CHECK(rc.generator.rows == 5);
  CHECK(rc.generator.cols == 6);
  CHECK(rc.generator.T == 42);
  CHECK(rc.generator.beta0 == -1.0);
  CHECK(rc.generator.sparse_multiplier == 2);
  CHECK(rc.replications == 7);
  CHECK(rc.gates.ess_min == 500);
  CHECK(rc.gates.rhat_max == 1.2);
}

TEST_CASE("model references resolve by name against the loaded panel") {
  fs::path dir = write_basic_panel("resolve");
  PanelBundle b = load_panel(basic_paths(dir));

  ModelSpec raw;
  raw.mean.x = {{-1, "temp"}, {-1, "hdi"}};
  raw.trans.z01 = {{-1, "temp"}};
  raw.trans.z11 = {{-1, "temp"}};
  raw.trans.coupled = true;
  raw.trans.c01 = {{-1, "barrier"}};
  Model m = resolve_model(raw, b.data);
  CHECK(m.spec.mean.x[0].col == 0);
  CHECK(m.spec.mean.x[1].col == 1);
  CHECK(m.spec.trans.c01[0].col == 0);

  raw.mean.x.push_back({-1, "nope"});
  CHECK_THROWS_WITH(resolve_model(raw, b.data), ContainsSubstring("unknown covariate 'nope'"));
  raw.mean.x.pop_back();
  raw.trans.c01[0].name = "fence";
  CHECK_THROWS_WITH(resolve_model(raw, b.data),
                    ContainsSubstring("unknown pair covariate 'fence'"));
}

TEST_CASE("seventeen-digit formatting round trips doubles exactly") {
  std::vector<double> values = {1.0 / 3.0,
                                0.1,
                                -1.234567890123456789e17,
                                6.02214076e23,
                                1e-300,
                                -2.2250738585072014e-308,
                                0.0,
                                123456789.123456789,
                                std::nextafter(1.0, 2.0)};
  for (double v : values) {
    std::string s = io_detail::fmt17(v);
    double back = std::stod(s);
    CHECK(back == v);
  }
}

TEST_CASE("emitted panels reload to an identical data set") {
  fs::path dir = write_basic_panel("emit");
  PanelBundle b1 = load_panel(basic_paths(dir));

  fs::path dir2 = scratch_dir("emit2");
  PanelBundle keep = b1;
  keep.area_ids = b1.area_ids;
  emit_panel(dir2.string(), b1);
  PanelPaths p2;
  p2.counts = (dir2 / "counts.csv").string();
  p2.adjacency = (dir2 / "adjacency.csv").string();
  p2.covariates = {(dir2 / "covariates.csv").string()};
  p2.pair_covariates = (dir2 / "pair_covariates.csv").string();
  PanelBundle b2 = load_panel(p2);

  CHECK(b2.area_ids == b1.area_ids);
  CHECK(b2.data.T == b1.data.T);
  CHECK(b2.data.y == b1.data.y);
  CHECK(b2.data.y0 == b1.data.y0);
  CHECK(b2.data.graph.offsets == b1.data.graph.offsets);
  CHECK(b2.data.graph.neighbors == b1.data.graph.neighbors);
  CHECK(b2.data.covs.names == b1.data.covs.names);
  CHECK(b2.data.covs.values == b1.data.covs.values);
  CHECK(b2.data.pair_covs.names == b1.data.pair_covs.names);
  CHECK(b2.data.pair_covs.values == b1.data.pair_covs.values);

  // emitting the reload reproduces the same bytes
  fs::path dir3 = scratch_dir("emit3");
  emit_panel(dir3.string(), b2);
  for (const char* f : {"counts.csv", "adjacency.csv", "covariates.csv", "pair_covariates.csv"})
    CHECK(slurp(dir2 / f) == slurp(dir3 / f));
}

TEST_CASE("fit directories round trip draws, states and diagnostics") {
  Rng rng = make_rng(551, 0);
  zt::TinyOpt opt;
  opt.n = 3;
  opt.T = 4;
  zt::Tiny ti = zt::random_tiny(rng, opt);
  FitConfig cfg;
  cfg.iterations = 260;
  cfg.burn_in = 60;
  cfg.n_chains = 2;
  cfg.seed = 17;
  cfg.store_states = 1;
  cfg.state_max_draws = 50;  // forces a retention stride > 1
  PosteriorStore fit = fit_model(ti.m, ti.d, ti.init, PriorSpec{}, cfg);

  fs::path dir = scratch_dir("fitdir");
  write_draws_csv((dir / "draws.csv").string(), fit);
  write_final_states_csv((dir / "final_states.csv").string(), fit);
  write_full_states_csv((dir / "full_states.csv").string(), fit);

  PosteriorStore back = load_fit_dir(dir.string(), ti.m.lay, ti.d.n_areas(), ti.d.T);
  REQUIRE(back.chains.size() == fit.chains.size());
  for (size_t c = 0; c < fit.chains.size(); ++c) {
    CHECK(back.chains[c].n_kept == fit.chains[c].n_kept);
    CHECK(back.chains[c].draws == fit.chains[c].draws);  // bit-identical via %.17g
    CHECK(back.chains[c].final_states == fit.chains[c].final_states);
    CHECK(back.chains[c].n_state_draws == fit.chains[c].n_state_draws);
    CHECK(back.chains[c].state_stride == fit.chains[c].state_stride);
    CHECK(back.chains[c].full_states == fit.chains[c].full_states);
  }
  CHECK(back.full_states_stored);

  // diagnostics recomputed from the CSV equal the fit-time report
  DiagnosticsReport live = diagnose_fit(fit);
  DiagnosticsReport disk = diagnose_draws(load_draws_csv((dir / "draws.csv").string()));
  REQUIRE(disk.params.size() == live.params.size());
  for (size_t p = 0; p < live.params.size(); ++p) {
    CHECK(disk.params[p].name == live.params[p].name);
    CHECK(disk.params[p].ess == live.params[p].ess);
    CHECK(disk.params[p].rhat == live.params[p].rhat);
    CHECK(disk.params[p].ess_degenerate == live.params[p].ess_degenerate);
  }
  CHECK(disk.min_ess == live.min_ess);
  CHECK(disk.max_rhat == live.max_rhat);

  // a reloaded store drives the forecaster to identical output
  ForecastScenario sc;
  sc.covs.n_areas = ti.d.n_areas();
  sc.covs.n_times = 2;
  for (const std::string& nm : ti.d.covs.names) sc.covs.add_col(nm);
  if (ti.d.pair_covs.n_cols() > 0) {
    sc.pair_covs.n_slots = ti.d.graph.n_slots();
    sc.pair_covs.n_times = 2;
    for (const std::string& nm : ti.d.pair_covs.names) sc.pair_covs.add_col(nm);
  }
  Rng r1 = make_rng(5, 1), r2 = make_rng(5, 1);
  PredictiveDraws f1 = simulate_forecast(ti.m, ti.d, fit, sc, 2, r1);
  PredictiveDraws f2 = simulate_forecast(ti.m, ti.d, back, sc, 2, r2);
  CHECK(f1.S == f2.S);
  CHECK(f1.y == f2.y);
  CHECK(f1.pi == f2.pi);
}

TEST_CASE("scenario pools load horizon-indexed covariates") {
  fs::path dir = write_basic_panel("scen");
  PanelBundle b = load_panel(basic_paths(dir));

  put(dir / "fcov.csv",
      "area_id,time,temp,hdi\n"
      "a,1,9,1\na,2,8,1\nb,1,7,1\nb,2,6,1\nc,1,5,1\nc,2,4,1\n");
  put(dir / "fpair.csv", "area_i,area_j,barrier\na,b,1\nb,c,1\n");
  PanelPaths sp;
  sp.covariates = {(dir / "fcov.csv").string()};
  sp.pair_covariates = (dir / "fpair.csv").string();

  ForecastScenario sc = load_scenario(sp, b, 2);
  CHECK(sc.covs.n_times == 2);
  CHECK(sc.horizon() == 2);
  CHECK(sc.covs.at(0, 1, 0) == 9.0);
  CHECK(sc.covs.at(2, 2, 0) == 4.0);
  CHECK(sc.pair_covs.at(0, 2, 0) == 1.0);

  CHECK_THROWS_AS(load_scenario(sp, b, 0), ValidationError);
  // horizon exceeding the table coverage is reported as a missing row
  CHECK_THROWS_WITH(load_scenario(sp, b, 3), ContainsSubstring("missing covariate row"));
}

TEST_CASE("draw tables reject ragged and malformed input") {
  fs::path dir = scratch_dir("draws");
  put(dir / "bad1.csv", "chain,iteration,name,value\n0,0,a,1.0\n0,0,b,2.0\n0,1,a,3.0\n");
  CHECK_THROWS_WITH(load_draws_csv((dir / "bad1.csv").string()), ContainsSubstring("ragged"));
  put(dir / "bad2.csv", "chain,name,value\n0,a,1.0\n");
  CHECK_THROWS_WITH(load_draws_csv((dir / "bad2.csv").string()),
                    ContainsSubstring("need columns"));
  put(dir / "bad3.csv", "chain,iteration,name,value\n0,0,a,oops\n");
  CHECK_THROWS_WITH(load_draws_csv((dir / "bad3.csv").string()),
                    ContainsSubstring("cannot parse value"));
}
