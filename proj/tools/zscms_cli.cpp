// Command-line front end: simulate panels, fit the switching count model,
// forecast and score fitted runs, recompute chain diagnostics from emitted
// draws, cross-check the filter against brute-force enumeration, and run the
// parameter-recovery study. Exit codes: 0 success, 2 invalid input or config,
// 3 numerical failure.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "zscms/io.hpp"
#include "zscms/oracle.hpp"

namespace fs = std::filesystem;
using namespace zscms;

namespace {

struct CommonOpts {
  std::string config;
  std::string out = "out";
  long seed = -1;  // -1: use the config seed
};

void add_common(CLI::App* cmd, CommonOpts& o, bool config_required) {
  auto* copt = cmd->add_option("--config", o.config, "JSON run configuration");
  if (config_required) copt->required();
  cmd->add_option("--out", o.out, "output directory");
  cmd->add_option("--seed", o.seed, "override the configured RNG seed");
}

RunConfig load_with_overrides(const CommonOpts& o) {
  RunConfig rc = o.config.empty() ? RunConfig{} : load_config(o.config);
  if (o.seed >= 0) rc.fit.seed = static_cast<uint64_t>(o.seed);
  return rc;
}

// ---------------------------------------------------------------------------

int cmd_simulate(const CommonOpts& o, const RunConfig& rc) {
  Rng rng = make_rng(rc.fit.seed, 0);
  GeneratedData gd = generate_dataset(rc.generator, rng);
  PanelBundle b;
  b.data = gd.data;
  emit_panel(o.out, b);
  {
    io_detail::CsvWriter w(o.out + "/truth.csv");
    w.row({"name", "value"});
    for (int p = 0; p < gd.model.lay.total; ++p)
      w.row({gd.model.lay.names[p], io_detail::fmt17(gd.truth[p])});
  }
  {
    io_detail::CsvWriter w(o.out + "/states.csv");
    w.row({"area", "time", "state"});
    for (int i = 0; i < gd.states.n; ++i)
      for (int t = 0; t <= gd.states.T; ++t)
        w.row({std::to_string(i), std::to_string(t),
               std::to_string(static_cast<int>(gd.states.at(i, t)))});
  }
  long zeros = 0;
  for (long y : gd.data.y) zeros += (y == 0);
  std::cout << "simulate: " << gd.data.n_areas() << " areas x " << gd.data.T
            << " periods, zero fraction "
            << static_cast<double>(zeros) / static_cast<double>(gd.data.y.size()) << ", wrote "
            << o.out << "/\n";
  return 0;
}

int cmd_fit(const CommonOpts& o, const RunConfig& rc) {
  PanelBundle b = load_panel(rc.data);
  Model m = resolve_model(rc.model, b.data);
  InitialStateDist init = resolve_init(rc, b.data.n_areas());
  PosteriorStore fit = fit_model(m, b.data, init, rc.prior, rc.fit);

  fs::create_directories(o.out);
  write_draws_csv(o.out + "/draws.csv", fit);
  write_summary_csv(o.out + "/summary.csv", fit);
  write_final_states_csv(o.out + "/final_states.csv", fit, b.area_ids);
  if (fit.full_states_stored)
    write_full_states_csv(o.out + "/full_states.csv", fit, b.area_ids);
  write_state_means_csv(o.out + "/state_means.csv", fit, b.area_ids);
  DiagnosticsReport rep = diagnose_fit(fit);
  write_diagnostics_csv(o.out + "/diagnostics.csv", rep);
  write_waic_csv(o.out + "/waic.csv", rep.waic);

  std::cout << "fit: " << fit.kept_total() << " kept draws across " << fit.chains.size()
            << " chains; min ESS " << rep.min_ess << ", max shrink factor " << rep.max_rhat
            << ", WAIC " << rep.waic.waic << "; wrote " << o.out << "/\n";
  return 0;
}

int cmd_predict(const CommonOpts& o, const RunConfig& rc, const std::string& fit_dir) {
  PanelBundle b = load_panel(rc.data);
  Model m = resolve_model(rc.model, b.data);
  InitialStateDist init = resolve_init(rc, b.data.n_areas());
  PosteriorStore fit = load_fit_dir(fit_dir, m.lay, b.data.n_areas(), b.data.T, b.area_ids);
  Rng rng = make_rng(rc.fit.seed, 9001);
  fs::create_directories(o.out);

  if (rc.horizon >= 1) {
    ForecastScenario sc = load_scenario(rc.scenario, b, rc.horizon);
    PredictiveDraws fc = simulate_forecast(m, b.data, fit, sc, rc.horizon, rng);
    write_forecast_csv(o.out + "/forecast.csv", fc, b.area_ids);
    std::cout << "predict: forecast over " << rc.horizon << " periods from " << fc.n_draws
              << " draws\n";
  }

  bool want_fields = m.spec.zero_inflated && !fit.full_states_stored;
  if (want_fields) {
    std::cerr << "predict: full state fields absent; skipping fitted values\n";
  } else {
    FittedDraws f = (m.spec.zero_inflated && m.spec.trans.coupled)
                        ? coupled_one_step_fitted(m, b.data, init, fit, rc.fit.block_size, rng,
                                                  true)
                        : smoothed_fitted(m, b.data, fit, rng, true);
    write_fitted_csv(o.out + "/fitted.csv", f, b.area_ids);
    int max_lag = std::min(rc.acf_max_lag, b.data.T - 1);
    if (max_lag >= 1) {
      PearsonAcf acf = pearson_residual_acf(b.data, f.rep_mean, f.rep_sd, max_lag);
      write_acf_csv(o.out + "/acf.csv", acf, b.area_ids);
    }
    std::cout << "predict: fitted values from " << f.n_draws << " draws\n";
  }

  if (m.spec.zero_inflated && m.spec.trans.coupled) {
    std::vector<SpreadEntry> table =
        spread_odds_table(m, b.data, fit, rc.spread_threshold, b.data.T);
    write_spread_csv(o.out + "/spread_odds.csv", table, b.area_ids);
    write_arrows_csv(o.out + "/spread_arrows.csv", table, rc.arrow_prob, b.area_ids);
    size_t arrows = 0;
    for (const auto& e : table) arrows += (e.prob_exceed >= rc.arrow_prob);
    std::cout << "predict: " << arrows << " of " << table.size()
              << " neighbour pairs pass the spread-odds rule\n";
  }
  std::cout << "predict: wrote " << o.out << "/\n";
  return 0;
}

int cmd_diagnose(const CommonOpts& o, std::string draws_path, const std::string& fit_dir) {
  if (draws_path.empty() && fit_dir.empty())
    throw ValidationError("diagnose needs --draws or --fit-dir");
  if (draws_path.empty()) draws_path = fit_dir + "/draws.csv";
  DrawsTable t = load_draws_csv(draws_path);
  DiagnosticsReport rep = diagnose_draws(t);
  fs::create_directories(o.out);
  write_diagnostics_csv(o.out + "/diagnostics.csv", rep);
  std::cout << "diagnose: " << t.names.size() << " parameters, " << t.chains.size()
            << " chains; min ESS " << rep.min_ess << ", max shrink factor " << rep.max_rhat
            << "; wrote " << o.out << "/diagnostics.csv\n";
  return 0;
}

// Random miniature instances for the enumeration cross-check: 2-3 areas on a
// path (optionally closed into a cycle), 2-4 periods, both transition
// covariates live, a binary pair covariate on the reemergence coupling, and a
// mix of free and degenerate initial-state probabilities.
struct TinyCase {
  Model m;
  PanelData d;
  InitialStateDist init;
  ParamVector v;
};

TinyCase random_tiny_case(Rng& rng) {
  TinyCase tc;
  int n = 2 + static_cast<int>(rbern(rng, 0.5));
  int T = 2 + static_cast<int>(std::floor(runif(rng, 0.0, 3.0)));
  if (T > 4) T = 4;

  std::vector<std::pair<int, int>> edges;
  for (int i = 0; i + 1 < n; ++i) edges.emplace_back(i, i + 1);
  if (n >= 3 && rbern(rng, 0.5)) edges.emplace_back(0, n - 1);
  PanelData& d = tc.d;
  d.graph = make_graph(n, edges, true);
  d.T = T;
  d.y.assign(static_cast<size_t>(n) * T, 0);
  d.y0.assign(n, 0);
  d.covs.n_areas = n;
  d.covs.n_times = T;
  d.covs.add_col("tz");
  d.covs.add_col("mx");
  for (int i = 0; i < n; ++i)
    for (int t = 1; t <= T; ++t) {
      d.covs.at(i, t, 0) = rnorm(rng);
      d.covs.at(i, t, 1) = rnorm(rng);
      if (!rbern(rng, 0.5)) d.count(i, t) = 1 + rpois(rng, 2.0);
    }
  d.pair_covs.n_slots = d.graph.n_slots();
  d.pair_covs.n_times = T;
  d.pair_covs.add_col("pb");
  for (int s = 0; s < d.graph.n_slots(); ++s)
    for (int t = 1; t <= T; ++t) d.pair_covs.at(s, t, 0) = rbern(rng, 0.5) ? 1.0 : 0.0;

  ModelSpec spec;
  spec.mean.x = {{1, "mx"}};
  spec.trans.z01 = {{0, "tz"}};
  spec.trans.z11 = {{0, "tz"}};
  spec.trans.coupled = true;
  spec.trans.c01 = {{0, "pb"}};
  tc.m = make_model(spec, n);

  tc.v.assign(tc.m.lay.total, 0.0);
  for (int k = 0; k < tc.m.lay.total; ++k) tc.v[k] = 0.6 * rnorm(rng);
  for (int k = 0; k < tc.m.lay.n_gamma; ++k)
    tc.v[tc.m.lay.gamma + k] = std::log(runif(rng, 0.8, 5.0));

  tc.init.pi0.assign(n, 0.5);
  for (int i = 0; i < n; ++i) {
    if (rbern(rng, 0.25))
      tc.init.pi0[i] = rbern(rng, 0.5) ? 1.0 : 0.0;
    else
      tc.init.pi0[i] = runif(rng, 0.2, 0.8);
  }
  return tc;
}

int cmd_oracle_check(long seed, int instances, double tol) {
  if (instances < 1) throw ValidationError("need at least one instance");
  Rng rng = make_rng(seed < 0 ? 20260814u : static_cast<uint64_t>(seed), 0);
  double worst = 0.0;
  int worst_k = -1;
  for (int k = 0; k < instances; ++k) {
    TinyCase tc = random_tiny_case(rng);
    double ref = oracle::exact_loglik_enumeration(tc.m, tc.d, tc.init, tc.v);
    double got = filter_marginal_loglik(tc.m, tc.d, tc.init, tc.v);
    double diff = std::abs(got - ref);
    if (diff > worst) {
      worst = diff;
      worst_k = k;
    }
  }
  bool pass = worst <= tol;
  std::cout << "oracle-check: " << instances << " instances, max |filter - enumeration| = "
            << worst << (worst_k >= 0 ? " (instance " + std::to_string(worst_k) + ")" : "")
            << ", tolerance " << tol << ": " << (pass ? "PASS" : "FAIL") << "\n";
  if (!pass) throw NumericalError("filter disagrees with enumeration beyond tolerance");
  return 0;
}

int cmd_sim_study(const CommonOpts& o, const RunConfig& rc, int reps_override) {
  int reps = reps_override > 0 ? reps_override : rc.replications;
  RecoveryReport rep = run_replications(rc.generator, rc.fit, reps, rc.gates, rc.fit.seed);
  fs::create_directories(o.out);
  write_recovery_csv(o.out + "/recovery.csv", rep);
  write_study_meta_csv(o.out + "/study_meta.csv", rep);
  std::cout << "sim-study: " << rep.n_converged << " of " << rep.n_reps
            << " replications converged";
  if (!rep.excluded.empty()) {
    std::cout << " (excluded:";
    for (int k : rep.excluded) std::cout << ' ' << k;
    std::cout << ')';
  }
  std::cout << "\n";
  for (const auto& r : rep.rows)
    std::cout << "  " << r.name << ": truth " << r.truth << ", mean " << r.mean_of_means
              << ", coverage " << r.coverage << "\n";
  std::cout << "sim-study: wrote " << o.out << "/\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"zero-state coupled Markov-switching count panel models"};
  app.require_subcommand(1);

  CommonOpts sim_o, fit_o, pred_o, diag_o, study_o;
  std::string pred_fit_dir, diag_draws, diag_fit_dir;
  long oc_seed = -1;
  int oc_instances = 50, study_reps = 0, fit_iters = 0, fit_burn = -1, fit_chains = 0,
      fit_store = -2, pred_horizon = -1;
  double oc_tol = 1e-10;

  CLI::App* c_sim = app.add_subcommand("simulate", "draw a synthetic panel from the generator");
  add_common(c_sim, sim_o, false);
  sim_o.out = "sim_out";

  CLI::App* c_fit = app.add_subcommand("fit", "run the posterior sampler on a panel");
  add_common(c_fit, fit_o, true);
  c_fit->add_option("--iterations", fit_iters, "override fit.iterations");
  c_fit->add_option("--burn-in", fit_burn, "override fit.burn_in");
  c_fit->add_option("--chains", fit_chains, "override fit.chains");
  c_fit->add_option("--store-states", fit_store, "override fit.store_states (-1 auto/0/1)");

  CLI::App* c_pred = app.add_subcommand("predict", "forecast and score a fitted run");
  add_common(c_pred, pred_o, true);
  c_pred->add_option("--fit-dir", pred_fit_dir, "directory holding draws.csv and state CSVs")
      ->required();
  c_pred->add_option("--horizon", pred_horizon, "override forecast.horizon (0 skips)");

  CLI::App* c_diag = app.add_subcommand("diagnose", "recompute chain diagnostics from draws");
  add_common(c_diag, diag_o, false);
  c_diag->add_option("--draws", diag_draws, "draw table CSV");
  c_diag->add_option("--fit-dir", diag_fit_dir, "fit directory (uses its draws.csv)");

  CLI::App* c_oc = app.add_subcommand("oracle-check",
                                      "cross-check the filter against enumeration");
  c_oc->add_option("--seed", oc_seed, "RNG seed for instance generation");
  c_oc->add_option("--instances", oc_instances, "number of random miniature instances");
  c_oc->add_option("--tol", oc_tol, "maximum allowed absolute log-likelihood gap");

  CLI::App* c_study = app.add_subcommand("sim-study", "parameter-recovery replication study");
  add_common(c_study, study_o, false);
  c_study->add_option("--reps", study_reps, "override study.replications");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (c_sim->parsed()) return cmd_simulate(sim_o, load_with_overrides(sim_o));
    if (c_fit->parsed()) {
      RunConfig rc = load_with_overrides(fit_o);
      if (fit_iters > 0) rc.fit.iterations = fit_iters;
      if (fit_burn >= 0) rc.fit.burn_in = fit_burn;
      if (fit_chains > 0) rc.fit.n_chains = fit_chains;
      if (fit_store >= -1) rc.fit.store_states = fit_store;
      return cmd_fit(fit_o, rc);
    }
    if (c_pred->parsed()) {
      RunConfig rc = load_with_overrides(pred_o);
      if (pred_horizon >= 0) rc.horizon = pred_horizon;
      return cmd_predict(pred_o, rc, pred_fit_dir);
    }
    if (c_diag->parsed()) return cmd_diagnose(diag_o, diag_draws, diag_fit_dir);
    if (c_oc->parsed()) return cmd_oracle_check(oc_seed, oc_instances, oc_tol);
    if (c_study->parsed()) return cmd_sim_study(study_o, load_with_overrides(study_o), study_reps);
  } catch (const ValidationError& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return 2;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return 2;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
