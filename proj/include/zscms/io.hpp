#pragma once
// File boundary: CSV ingestion with row-level error reporting, fail-closed
// JSON run configuration, and deterministic CSV emission (17-significant-digit
// floats so 64-bit values round-trip exactly).

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "zscms/prediction.hpp"
#include "zscms/sim_study.hpp"

namespace zscms {

// ---------------------------------------------------------------------------
// primitive CSV handling
// ---------------------------------------------------------------------------

struct CsvTable {
  std::string path;
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  std::vector<long> lines;  // 1-based source line per row

  int col(const std::string& name) const {
    for (size_t k = 0; k < header.size(); ++k)
      if (header[k] == name) return static_cast<int>(k);
    return -1;
  }
  [[noreturn]] void fail(size_t row, const std::string& msg) const {
    throw ValidationError(path + ":" + std::to_string(lines[row]) + ": " + msg);
  }
};

namespace io_detail {

inline std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(trim(cur));
  return out;
}

inline std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline long to_long(const CsvTable& t, size_t row, int col, const char* what) {
  try {
    size_t used = 0;
    long v = std::stol(t.rows[row][col], &used);
    if (used != t.rows[row][col].size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    t.fail(row, std::string("cannot parse ") + what + " from '" + t.rows[row][col] + "'");
  }
}

inline double to_double(const CsvTable& t, size_t row, int col, const char* what) {
  try {
    size_t used = 0;
    double v = std::stod(t.rows[row][col], &used);
    if (used != t.rows[row][col].size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    t.fail(row, std::string("cannot parse ") + what + " from '" + t.rows[row][col] + "'");
  }
}

}  // namespace io_detail

inline CsvTable read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open file: " + path);
  CsvTable t;
  t.path = path;
  std::string line;
  long lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (io_detail::trim(line).empty()) continue;
    std::vector<std::string> fields = io_detail::split_csv(line);
    if (t.header.empty()) {
      t.header = std::move(fields);
    } else {
      if (fields.size() != t.header.size())
        throw ValidationError(path + ":" + std::to_string(lineno) + ": expected " +
                              std::to_string(t.header.size()) + " fields, found " +
                              std::to_string(fields.size()));
      t.rows.push_back(std::move(fields));
      t.lines.push_back(lineno);
    }
  }
  if (t.header.empty()) throw ValidationError(path + ": empty file");
  return t;
}

// ---------------------------------------------------------------------------
// panel ingestion
// ---------------------------------------------------------------------------

struct PanelPaths {
  std::string counts;
  std::string adjacency;
  std::vector<std::string> covariates;  // zero or more covariate tables
  std::string pair_covariates;          // optional
  bool symmetrize = false;
};

struct PanelBundle {
  PanelData data;
  std::vector<std::string> area_ids;  // index -> external id

  int area_index(const std::string& id) const {
    for (size_t k = 0; k < area_ids.size(); ++k)
      if (area_ids[k] == id) return static_cast<int>(k);
    return -1;
  }
};

// Fill a pre-sized pool from one covariate table. Rows carry area_id plus an
// optional time column; rows without it are static and expand over all times.
// Every (area, time) cell must end up covered exactly once per column set.
inline void load_covariates_into(CovariatePool& pool, const std::string& path,
                                 const std::vector<std::string>& ids) {
  const int n = pool.n_areas, T = pool.n_times;
  auto idx_of = [&](const std::string& id) {
    for (size_t k = 0; k < ids.size(); ++k)
      if (ids[k] == id) return static_cast<int>(k);
    return -1;
  };
  CsvTable cv = read_csv(path);
  int v_area = cv.col("area_id");
  if (v_area < 0) throw ValidationError(path + ": need column area_id");
  int v_time = cv.col("time");
  std::vector<int> val_cols;
  for (size_t k = 0; k < cv.header.size(); ++k)
    if (static_cast<int>(k) != v_area && static_cast<int>(k) != v_time)
      val_cols.push_back(static_cast<int>(k));
  if (val_cols.empty()) throw ValidationError(path + ": no covariate value columns");
  std::vector<int> pool_cols;
  for (int k : val_cols) pool_cols.push_back(pool.add_col(cv.header[k]));

  std::vector<uint8_t> filled(static_cast<size_t>(n) * T, 0);
  for (size_t r = 0; r < cv.rows.size(); ++r) {
    int i = idx_of(cv.rows[r][v_area]);
    if (i < 0) cv.fail(r, "dangling area id '" + cv.rows[r][v_area] + "'");
    long t_lo = 1, t_hi = T;
    if (v_time >= 0) {
      long t = io_detail::to_long(cv, r, v_time, "time");
      if (t < 1 || t > T) cv.fail(r, "time out of range");
      t_lo = t_hi = t;
    }
    for (long t = t_lo; t <= t_hi; ++t) {
      size_t cell = static_cast<size_t>(i) * T + (t - 1);
      if (v_time >= 0 && filled[cell]) cv.fail(r, "duplicate (area,time) covariate row");
      filled[cell] = 1;
      for (size_t k = 0; k < val_cols.size(); ++k)
        pool.at(i, static_cast<int>(t), pool_cols[k]) =
            io_detail::to_double(cv, r, val_cols[k], cv.header[val_cols[k]].c_str());
    }
  }
  for (int i = 0; i < n; ++i)
    for (int t = 1; t <= T; ++t)
      if (!filled[static_cast<size_t>(i) * T + (t - 1)])
        throw ValidationError(path + ": missing covariate row for area '" + ids[i] +
                              "' at time " + std::to_string(t));
}

// Pair covariate rows name an adjacent (area_i, area_j) pair; each row fills
// both directed slots. Static rows (no time column) expand over all times.
inline void load_pair_covariates_into(PairCovariatePool& pool, const std::string& path,
                                      const NeighborGraph& g,
                                      const std::vector<std::string>& ids) {
  const int T = pool.n_times;
  auto idx_of = [&](const std::string& id) {
    for (size_t k = 0; k < ids.size(); ++k)
      if (ids[k] == id) return static_cast<int>(k);
    return -1;
  };
  auto slot_of = [&](int i, int j) {
    for (int kn = 0; kn < g.degree(i); ++kn)
      if (g.begin(i)[kn] == j) return g.slot(i, kn);
    return -1;
  };
  CsvTable pv = read_csv(path);
  int p_i = pv.col("area_i"), p_j = pv.col("area_j"), p_time = pv.col("time");
  if (p_i < 0 || p_j < 0) throw ValidationError(path + ": need columns area_i,area_j");
  std::vector<int> val_cols;
  for (size_t k = 0; k < pv.header.size(); ++k)
    if (static_cast<int>(k) != p_i && static_cast<int>(k) != p_j && static_cast<int>(k) != p_time)
      val_cols.push_back(static_cast<int>(k));
  if (val_cols.empty()) throw ValidationError(path + ": no value columns");
  std::vector<int> pool_cols;
  for (int k : val_cols) pool_cols.push_back(pool.add_col(pv.header[k]));

  for (size_t r = 0; r < pv.rows.size(); ++r) {
    int i = idx_of(pv.rows[r][p_i]);
    int j = idx_of(pv.rows[r][p_j]);
    if (i < 0) pv.fail(r, "dangling area id '" + pv.rows[r][p_i] + "'");
    if (j < 0) pv.fail(r, "dangling area id '" + pv.rows[r][p_j] + "'");
    int s_ij = slot_of(i, j), s_ji = slot_of(j, i);
    if (s_ij < 0 || s_ji < 0) pv.fail(r, "pair is not adjacent in the graph");
    long t_lo = 1, t_hi = T;
    if (p_time >= 0) {
      long t = io_detail::to_long(pv, r, p_time, "time");
      if (t < 1 || t > T) pv.fail(r, "time out of range");
      t_lo = t_hi = t;
    }
    for (long t = t_lo; t <= t_hi; ++t)
      for (size_t k = 0; k < val_cols.size(); ++k) {
        double v = io_detail::to_double(pv, r, val_cols[k], pv.header[val_cols[k]].c_str());
        pool.at(s_ij, static_cast<int>(t), pool_cols[k]) = v;
        pool.at(s_ji, static_cast<int>(t), pool_cols[k]) = v;
      }
  }
}

inline PanelBundle load_panel(const PanelPaths& paths) {
  PanelBundle b;
  CsvTable counts = read_csv(paths.counts);
  int c_area = counts.col("area_id"), c_time = counts.col("time"), c_cnt = counts.col("count");
  if (c_area < 0 || c_time < 0 || c_cnt < 0)
    throw ValidationError(paths.counts + ": need columns area_id,time,count");

  // areas indexed in first-appearance order; T = maximum observed time
  long T = 0;
  for (size_t r = 0; r < counts.rows.size(); ++r) {
    const std::string& id = counts.rows[r][c_area];
    if (b.area_index(id) < 0) b.area_ids.push_back(id);
    long t = io_detail::to_long(counts, r, c_time, "time");
    if (t < 0) counts.fail(r, "negative time");
    T = std::max(T, t);
  }
  int n = static_cast<int>(b.area_ids.size());
  if (n == 0 || T == 0) throw ValidationError(paths.counts + ": no observations at time >= 1");

  PanelData& d = b.data;
  d.T = static_cast<int>(T);
  d.y.assign(static_cast<size_t>(n) * T, 0);
  d.y0.assign(n, 0);
  std::vector<uint8_t> seen(static_cast<size_t>(n) * T, 0);
  for (size_t r = 0; r < counts.rows.size(); ++r) {
    int i = b.area_index(counts.rows[r][c_area]);
    long t = io_detail::to_long(counts, r, c_time, "time");
    long y = io_detail::to_long(counts, r, c_cnt, "count");
    if (y < 0) counts.fail(r, "negative count");
    if (t == 0) {
      d.y0[i] = y;
      continue;
    }
    size_t cell = static_cast<size_t>(i) * T + (t - 1);
    if (seen[cell]) counts.fail(r, "duplicate (area,time) cell");
    seen[cell] = 1;
    d.count(i, static_cast<int>(t)) = y;
  }
  for (int i = 0; i < n; ++i)
    for (long t = 1; t <= T; ++t)
      if (!seen[static_cast<size_t>(i) * T + (t - 1)])
        throw ValidationError(paths.counts + ": missing count for area '" + b.area_ids[i] +
                              "' at time " + std::to_string(t));

  // adjacency
  CsvTable adj = read_csv(paths.adjacency);
  int a_i = adj.col("area_i"), a_j = adj.col("area_j");
  if (a_i < 0 || a_j < 0) throw ValidationError(paths.adjacency + ": need columns area_i,area_j");
  std::vector<std::pair<int, int>> edges;
  for (size_t r = 0; r < adj.rows.size(); ++r) {
    int i = b.area_index(adj.rows[r][a_i]);
    int j = b.area_index(adj.rows[r][a_j]);
    if (i < 0) adj.fail(r, "dangling area id '" + adj.rows[r][a_i] + "'");
    if (j < 0) adj.fail(r, "dangling area id '" + adj.rows[r][a_j] + "'");
    if (i == j) adj.fail(r, "self-adjacency is not allowed");
    edges.push_back({i, j});
  }
  d.graph = make_graph(n, edges, paths.symmetrize);

  d.covs.n_areas = n;
  d.covs.n_times = d.T;
  for (const std::string& path : paths.covariates)
    load_covariates_into(d.covs, path, b.area_ids);

  if (!paths.pair_covariates.empty()) {
    d.pair_covs.n_slots = d.graph.n_slots();
    d.pair_covs.n_times = d.T;
    load_pair_covariates_into(d.pair_covs, paths.pair_covariates, d.graph, b.area_ids);
  }

  d.validate();
  return b;
}

// Forecast scenario pools covering horizons 1..K; the time column of scenario
// tables is the horizon index (1 = first future period).
inline ForecastScenario load_scenario(const PanelPaths& paths, const PanelBundle& b, int K) {
  if (K < 1) throw ValidationError("forecast horizon must be >= 1");
  ForecastScenario sc;
  sc.covs.n_areas = b.data.n_areas();
  sc.covs.n_times = K;
  for (const std::string& path : paths.covariates) load_covariates_into(sc.covs, path, b.area_ids);
  if (!paths.pair_covariates.empty()) {
    sc.pair_covs.n_slots = b.data.graph.n_slots();
    sc.pair_covs.n_times = K;
    load_pair_covariates_into(sc.pair_covs, paths.pair_covariates, b.data.graph, b.area_ids);
  }
  return sc;
}

// ---------------------------------------------------------------------------
// run configuration (JSON, fail-closed)
// ---------------------------------------------------------------------------

struct RunConfig {
  ModelSpec model;  // covariate references by name; columns resolved per panel
  FitConfig fit;
  PriorSpec prior;
  PanelPaths data;
  double init_presence = 0.5;
  std::vector<double> init_presence_per_area;

  int horizon = 1;
  PanelPaths scenario;  // covariates/pair_covariates only
  double spread_threshold = 1.2;
  double arrow_prob = 0.75;
  int acf_max_lag = 12;

  GeneratorSpec generator;
  int replications = 20;
  ReplicationGates gates;
};

namespace io_detail {

using nlohmann::json;

inline void check_keys(const json& j, const char* section,
                       std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ValidationError(std::string("config section '") + section +
                                            "' must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : allowed) ok = ok || it.key() == k;
    if (!ok)
      throw ValidationError(std::string("unknown config key '") + it.key() + "' in section '" +
                            section + "'");
  }
}

inline std::vector<ColRef> name_list(const json& j, const char* what) {
  std::vector<ColRef> out;
  if (!j.is_array()) throw ValidationError(std::string(what) + " must be an array of names");
  for (const auto& e : j) out.push_back({-1, e.get<std::string>()});
  return out;
}

}  // namespace io_detail

inline RunConfig parse_config(const nlohmann::json& j) {
  using io_detail::check_keys;
  using io_detail::name_list;
  RunConfig rc;
  check_keys(j, "(root)", {"model", "fit", "prior", "data", "init", "forecast", "generator",
                           "study"});

  if (j.contains("model")) {
    const auto& m = j["model"];
    check_keys(m, "model", {"zero_inflated", "family", "dispersion", "mean", "transitions"});
    if (m.contains("zero_inflated")) rc.model.zero_inflated = m["zero_inflated"].get<bool>();
    if (m.contains("family")) {
      std::string f = m["family"].get<std::string>();
      if (f == "negbinomial") rc.model.family = EmissionFamily::NegBinomial;
      else if (f == "poisson") rc.model.family = EmissionFamily::Poisson;
      else throw ValidationError("model.family must be negbinomial or poisson");
    }
    if (m.contains("dispersion")) {
      std::string f = m["dispersion"].get<std::string>();
      if (f == "global") rc.model.dispersion = DispersionForm::Global;
      else if (f == "per_area") rc.model.dispersion = DispersionForm::PerArea;
      else throw ValidationError("model.dispersion must be global or per_area");
    }
    if (m.contains("mean")) {
      const auto& mm = m["mean"];
      check_keys(mm, "model.mean",
                 {"variant", "x", "log_lag_count", "ar", "en", "ar_random_intercepts",
                  "en_random_intercepts"});
      if (mm.contains("variant")) {
        std::string v = mm["variant"].get<std::string>();
        if (v == "log_linear") rc.model.mean.variant = MeanVariant::LogLinear;
        else if (v == "endemic_epidemic") rc.model.mean.variant = MeanVariant::EndemicEpidemic;
        else throw ValidationError("model.mean.variant must be log_linear or endemic_epidemic");
      }
      if (mm.contains("x")) rc.model.mean.x = name_list(mm["x"], "model.mean.x");
      if (mm.contains("log_lag_count")) rc.model.mean.log_lag_count = mm["log_lag_count"].get<bool>();
      if (mm.contains("ar")) rc.model.mean.ar = name_list(mm["ar"], "model.mean.ar");
      if (mm.contains("en")) rc.model.mean.en = name_list(mm["en"], "model.mean.en");
      if (mm.contains("ar_random_intercepts"))
        rc.model.mean.ar_random_intercepts = mm["ar_random_intercepts"].get<bool>();
      if (mm.contains("en_random_intercepts"))
        rc.model.mean.en_random_intercepts = mm["en_random_intercepts"].get<bool>();
    }
    if (m.contains("transitions")) {
      const auto& tt = m["transitions"];
      check_keys(tt, "model.transitions",
                 {"z01", "z11", "z01_log_lag_count", "z11_log_lag_count", "coupled", "c01", "c11"});
      if (tt.contains("z01")) rc.model.trans.z01 = name_list(tt["z01"], "model.transitions.z01");
      if (tt.contains("z11")) rc.model.trans.z11 = name_list(tt["z11"], "model.transitions.z11");
      if (tt.contains("z01_log_lag_count"))
        rc.model.trans.z01_log_lag_count = tt["z01_log_lag_count"].get<bool>();
      if (tt.contains("z11_log_lag_count"))
        rc.model.trans.z11_log_lag_count = tt["z11_log_lag_count"].get<bool>();
      if (tt.contains("coupled")) rc.model.trans.coupled = tt["coupled"].get<bool>();
      if (tt.contains("c01")) rc.model.trans.c01 = name_list(tt["c01"], "model.transitions.c01");
      if (tt.contains("c11")) rc.model.trans.c11 = name_list(tt["c11"], "model.transitions.c11");
    }
  }

  if (j.contains("fit")) {
    const auto& f = j["fit"];
    check_keys(f, "fit",
               {"iterations", "burn_in", "thin", "chains", "seed", "state_sampler", "block_size",
                "afss", "afss_refresh", "store_states", "state_cells_auto", "state_max_draws",
                "progress_every"});
    if (f.contains("iterations")) rc.fit.iterations = f["iterations"].get<int>();
    if (f.contains("burn_in")) rc.fit.burn_in = f["burn_in"].get<int>();
    if (f.contains("thin")) rc.fit.thin = f["thin"].get<int>();
    if (f.contains("chains")) rc.fit.n_chains = f["chains"].get<int>();
    if (f.contains("seed")) rc.fit.seed = f["seed"].get<uint64_t>();
    if (f.contains("state_sampler"))
      rc.fit.state_sampler = parse_state_sampler(f["state_sampler"].get<std::string>());
    if (f.contains("block_size")) rc.fit.block_size = f["block_size"].get<int>();
    if (f.contains("afss")) rc.fit.afss = f["afss"].get<bool>();
    if (f.contains("afss_refresh")) rc.fit.afss_refresh = f["afss_refresh"].get<int>();
    if (f.contains("store_states")) rc.fit.store_states = f["store_states"].get<int>();
    if (f.contains("state_cells_auto")) rc.fit.state_cells_auto = f["state_cells_auto"].get<int>();
    if (f.contains("state_max_draws")) rc.fit.state_max_draws = f["state_max_draws"].get<int>();
    if (f.contains("progress_every")) rc.fit.progress_every = f["progress_every"].get<int>();
  }

  if (j.contains("prior")) {
    const auto& p = j["prior"];
    check_keys(p, "prior",
               {"coef_sd", "r_shape", "r_rate", "dispersion_mult_lo", "dispersion_mult_hi",
                "sigma_scale"});
    if (p.contains("coef_sd")) rc.prior.coef_sd = p["coef_sd"].get<double>();
    if (p.contains("r_shape")) rc.prior.r_shape = p["r_shape"].get<double>();
    if (p.contains("r_rate")) rc.prior.r_rate = p["r_rate"].get<double>();
    if (p.contains("dispersion_mult_lo")) rc.prior.disp_mult_lo = p["dispersion_mult_lo"].get<double>();
    if (p.contains("dispersion_mult_hi")) rc.prior.disp_mult_hi = p["dispersion_mult_hi"].get<double>();
    if (p.contains("sigma_scale")) rc.prior.sigma_scale = p["sigma_scale"].get<double>();
  }

  if (j.contains("data")) {
    const auto& d = j["data"];
    check_keys(d, "data", {"counts", "adjacency", "covariates", "pair_covariates", "symmetrize"});
    if (d.contains("counts")) rc.data.counts = d["counts"].get<std::string>();
    if (d.contains("adjacency")) rc.data.adjacency = d["adjacency"].get<std::string>();
    if (d.contains("covariates"))
      for (const auto& e : d["covariates"]) rc.data.covariates.push_back(e.get<std::string>());
    if (d.contains("pair_covariates")) rc.data.pair_covariates = d["pair_covariates"].get<std::string>();
    if (d.contains("symmetrize")) rc.data.symmetrize = d["symmetrize"].get<bool>();
  }

  if (j.contains("init")) {
    const auto& it = j["init"];
    check_keys(it, "init", {"presence_prob", "presence_prob_per_area"});
    if (it.contains("presence_prob")) rc.init_presence = it["presence_prob"].get<double>();
    if (it.contains("presence_prob_per_area"))
      for (const auto& e : it["presence_prob_per_area"])
        rc.init_presence_per_area.push_back(e.get<double>());
  }

  if (j.contains("forecast")) {
    const auto& f = j["forecast"];
    check_keys(f, "forecast",
               {"horizon", "covariates", "pair_covariates", "spread_threshold", "arrow_prob",
                "acf_max_lag"});
    if (f.contains("horizon")) rc.horizon = f["horizon"].get<int>();
    if (f.contains("covariates"))
      for (const auto& e : f["covariates"]) rc.scenario.covariates.push_back(e.get<std::string>());
    if (f.contains("pair_covariates"))
      rc.scenario.pair_covariates = f["pair_covariates"].get<std::string>();
    if (f.contains("spread_threshold")) rc.spread_threshold = f["spread_threshold"].get<double>();
    if (f.contains("arrow_prob")) rc.arrow_prob = f["arrow_prob"].get<double>();
    if (f.contains("acf_max_lag")) rc.acf_max_lag = f["acf_max_lag"].get<int>();
  }

  if (j.contains("generator")) {
    const auto& g = j["generator"];
    check_keys(g, "generator",
               {"rows", "cols", "T", "beta0", "barrier_prob", "init_presence", "temp_amplitude",
                "temp_noise_sd", "temp_period", "hdi_lo", "hdi_hi", "hdi_center",
                "sparse_multiplier"});
    if (g.contains("rows")) rc.generator.rows = g["rows"].get<int>();
    if (g.contains("cols")) rc.generator.cols = g["cols"].get<int>();
    if (g.contains("T")) rc.generator.T = g["T"].get<int>();
    if (g.contains("beta0")) rc.generator.beta0 = g["beta0"].get<double>();
    if (g.contains("barrier_prob")) rc.generator.barrier_prob = g["barrier_prob"].get<double>();
    if (g.contains("init_presence")) rc.generator.init_presence = g["init_presence"].get<double>();
    if (g.contains("temp_amplitude")) rc.generator.temp_amplitude = g["temp_amplitude"].get<double>();
    if (g.contains("temp_noise_sd")) rc.generator.temp_noise_sd = g["temp_noise_sd"].get<double>();
    if (g.contains("temp_period")) rc.generator.temp_period = g["temp_period"].get<int>();
    if (g.contains("hdi_lo")) rc.generator.hdi_lo = g["hdi_lo"].get<double>();
    if (g.contains("hdi_hi")) rc.generator.hdi_hi = g["hdi_hi"].get<double>();
    if (g.contains("hdi_center")) rc.generator.hdi_center = g["hdi_center"].get<double>();
    if (g.contains("sparse_multiplier")) rc.generator.sparse_multiplier = g["sparse_multiplier"].get<int>();
  }

  if (j.contains("study")) {
    const auto& s = j["study"];
    check_keys(s, "study", {"replications", "ess_min", "rhat_max"});
    if (s.contains("replications")) rc.replications = s["replications"].get<int>();
    if (s.contains("ess_min")) rc.gates.ess_min = s["ess_min"].get<double>();
    if (s.contains("rhat_max")) rc.gates.rhat_max = s["rhat_max"].get<double>();
  }
  return rc;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open config: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw ValidationError(std::string("config parse error: ") + e.what());
  }
  return parse_config(j);
}

// Resolve the by-name covariate references of a parsed model spec against a
// loaded panel and build the model.
inline Model resolve_model(const ModelSpec& raw, const PanelData& d) {
  ModelSpec spec = raw;
  auto fix = [&](std::vector<ColRef>& refs, const char* what) {
    for (ColRef& c : refs) {
      c.col = d.covs.col(c.name);
      if (c.col < 0)
        throw ValidationError(std::string(what) + " references unknown covariate '" + c.name + "'");
    }
  };
  auto fix_pair = [&](std::vector<ColRef>& refs, const char* what) {
    for (ColRef& c : refs) {
      c.col = d.pair_covs.col(c.name);
      if (c.col < 0)
        throw ValidationError(std::string(what) + " references unknown pair covariate '" + c.name +
                              "'");
    }
  };
  fix(spec.mean.x, "mean.x");
  fix(spec.mean.ar, "mean.ar");
  fix(spec.mean.en, "mean.en");
  fix(spec.trans.z01, "transitions.z01");
  fix(spec.trans.z11, "transitions.z11");
  fix_pair(spec.trans.c01, "transitions.c01");
  fix_pair(spec.trans.c11, "transitions.c11");
  return make_model(spec, d.n_areas());
}

inline InitialStateDist resolve_init(const RunConfig& rc, int n_areas) {
  InitialStateDist init;
  if (!rc.init_presence_per_area.empty()) {
    if (static_cast<int>(rc.init_presence_per_area.size()) != n_areas)
      throw ValidationError("init.presence_prob_per_area length mismatch");
    init.pi0 = rc.init_presence_per_area;
  } else {
    init.pi0.assign(n_areas, rc.init_presence);
  }
  init.validate(n_areas);
  return init;
}

// ---------------------------------------------------------------------------
// emission
// ---------------------------------------------------------------------------

namespace io_detail {

struct CsvWriter {
  std::ofstream out;
  explicit CsvWriter(const std::string& path) : out(path) {
    if (!out) throw ValidationError("cannot write file: " + path);
  }
  void row(const std::vector<std::string>& fields) {
    for (size_t k = 0; k < fields.size(); ++k) {
      if (k) out << ',';
      out << fields[k];
    }
    out << '\n';
  }
};

inline std::string area_name(const std::vector<std::string>& ids, int i) {
  return ids.empty() ? std::to_string(i) : ids[i];
}

}  // namespace io_detail

inline void write_draws_csv(const std::string& path, const PosteriorStore& fit) {
  io_detail::CsvWriter w(path);
  w.row({"chain", "iteration", "name", "value"});
  for (size_t c = 0; c < fit.chains.size(); ++c) {
    const ChainStore& ch = fit.chains[c];
    for (long k = 0; k < ch.n_kept; ++k)
      for (int p = 0; p < ch.n_params; ++p)
        w.row({std::to_string(c), std::to_string(k), fit.lay.names[p],
               io_detail::fmt17(ch.draws[static_cast<size_t>(k) * ch.n_params + p])});
  }
}

inline void write_final_states_csv(const std::string& path, const PosteriorStore& fit,
                                   const std::vector<std::string>& ids = {}) {
  io_detail::CsvWriter w(path);
  w.row({"chain", "iteration", "area", "state"});
  for (size_t c = 0; c < fit.chains.size(); ++c) {
    const ChainStore& ch = fit.chains[c];
    for (long k = 0; k < ch.n_kept; ++k)
      for (int i = 0; i < fit.n_areas; ++i)
        w.row({std::to_string(c), std::to_string(k), io_detail::area_name(ids, i),
               std::to_string(static_cast<int>(
                   ch.final_states[static_cast<size_t>(k) * fit.n_areas + i]))});
  }
}

inline void write_full_states_csv(const std::string& path, const PosteriorStore& fit,
                                  const std::vector<std::string>& ids = {}) {
  if (!fit.full_states_stored) throw ValidationError("full state fields were not retained");
  io_detail::CsvWriter w(path);
  w.row({"chain", "iteration", "area", "time", "state"});
  for (size_t c = 0; c < fit.chains.size(); ++c) {
    const ChainStore& ch = fit.chains[c];
    size_t cells = static_cast<size_t>(fit.n_areas) * (fit.T + 1);
    for (long k = 0; k < ch.n_state_draws; ++k)
      for (int i = 0; i < fit.n_areas; ++i)
        for (int t = 0; t <= fit.T; ++t)
          w.row({std::to_string(c), std::to_string(k * ch.state_stride),
                 io_detail::area_name(ids, i), std::to_string(t),
                 std::to_string(static_cast<int>(
                     ch.full_states[k * cells + static_cast<size_t>(i) * (fit.T + 1) + t]))});
  }
}

inline void write_state_means_csv(const std::string& path, const PosteriorStore& fit,
                                  const std::vector<std::string>& ids = {}) {
  io_detail::CsvWriter w(path);
  w.row({"area", "time", "mean"});
  if (fit.full_states_stored) {
    for (int i = 0; i < fit.n_areas; ++i)
      for (int t = 0; t <= fit.T; ++t)
        w.row({io_detail::area_name(ids, i), std::to_string(t),
               io_detail::fmt17(fit.full_state_mean(i, t))});
  } else {
    for (int i = 0; i < fit.n_areas; ++i)
      w.row({io_detail::area_name(ids, i), std::to_string(fit.T),
             io_detail::fmt17(fit.final_state_mean(i))});
  }
}

inline void write_summary_csv(const std::string& path, const PosteriorStore& fit) {
  io_detail::CsvWriter w(path);
  w.row({"name", "mean", "sd", "q025", "q975"});
  for (int p = 0; p < fit.n_params(); ++p) {
    std::vector<double> pool;
    for (size_t c = 0; c < fit.chains.size(); ++c) {
      std::vector<double> col = fit.column(static_cast<int>(c), p);
      pool.insert(pool.end(), col.begin(), col.end());
    }
    w.row({fit.lay.names[p], io_detail::fmt17(fit.pooled_mean(p)),
           io_detail::fmt17(fit.pooled_sd(p)),
           io_detail::fmt17(detail::sorted_quantile(pool, 0.025)),
           io_detail::fmt17(detail::sorted_quantile(pool, 0.975))});
  }
}

inline void write_diagnostics_csv(const std::string& path, const DiagnosticsReport& rep) {
  io_detail::CsvWriter w(path);
  w.row({"name", "ess", "ess_degenerate", "rhat"});
  for (const auto& p : rep.params)
    w.row({p.name, io_detail::fmt17(p.ess), p.ess_degenerate ? "1" : "0",
           io_detail::fmt17(p.rhat)});
}

inline void write_waic_csv(const std::string& path, const WaicResult& w_) {
  io_detail::CsvWriter w(path);
  w.row({"waic", "lppd", "p_waic"});
  w.row({io_detail::fmt17(w_.waic), io_detail::fmt17(w_.lppd), io_detail::fmt17(w_.p_waic)});
}

inline void write_forecast_csv(const std::string& path, const PredictiveDraws& fc,
                               const std::vector<std::string>& ids = {}) {
  io_detail::CsvWriter w(path);
  w.row({"area", "horizon", "presence_mean", "count_mean", "count_q025", "count_q975"});
  for (int i = 0; i < fc.n_areas; ++i)
    for (int k = 1; k <= fc.K; ++k)
      w.row({io_detail::area_name(ids, i), std::to_string(k),
             io_detail::fmt17(fc.presence_mean(i, k)), io_detail::fmt17(fc.count_mean(i, k)),
             io_detail::fmt17(fc.count_quantile(i, k, 0.025)),
             io_detail::fmt17(fc.count_quantile(i, k, 0.975))});
}

inline void write_fitted_csv(const std::string& path, const FittedDraws& f,
                             const std::vector<std::string>& ids = {}) {
  io_detail::CsvWriter w(path);
  w.row({"area", "time", "presence", "rep_mean", "rep_sd"});
  for (int i = 0; i < f.n_areas; ++i)
    for (int t = 1; t <= f.T; ++t) {
      size_t c = static_cast<size_t>(i) * f.T + (t - 1);
      w.row({io_detail::area_name(ids, i), std::to_string(t), io_detail::fmt17(f.presence[c]),
             io_detail::fmt17(f.rep_mean[c]), io_detail::fmt17(f.rep_sd[c])});
    }
}

inline void write_acf_csv(const std::string& path, const PearsonAcf& acf,
                          const std::vector<std::string>& ids = {}) {
  io_detail::CsvWriter w(path);
  w.row({"area", "lag", "acf", "band", "degenerate"});
  for (size_t i = 0; i < acf.acf.size(); ++i)
    for (int k = 0; k <= acf.max_lag; ++k)
      w.row({io_detail::area_name(ids, static_cast<int>(i)), std::to_string(k),
             io_detail::fmt17(acf.acf[i][k]), io_detail::fmt17(acf.band),
             acf.degenerate[i] ? "1" : "0"});
}

// full table of exceedance probabilities plus the filtered arrow table
inline void write_spread_csv(const std::string& path, const std::vector<SpreadEntry>& table,
                             const std::vector<std::string>& ids = {}) {
  io_detail::CsvWriter w(path);
  w.row({"area_i", "area_j", "prob_exceed"});
  for (const auto& e : table)
    w.row({io_detail::area_name(ids, e.from), io_detail::area_name(ids, e.to),
           io_detail::fmt17(e.prob_exceed)});
}

inline void write_arrows_csv(const std::string& path, const std::vector<SpreadEntry>& table,
                             double arrow_prob, const std::vector<std::string>& ids = {}) {
  io_detail::CsvWriter w(path);
  w.row({"area_i", "area_j", "prob_exceed"});
  for (const auto& e : table)
    if (e.prob_exceed >= arrow_prob)
      w.row({io_detail::area_name(ids, e.from), io_detail::area_name(ids, e.to),
             io_detail::fmt17(e.prob_exceed)});
}

inline void write_recovery_csv(const std::string& path, const RecoveryReport& rep) {
  io_detail::CsvWriter w(path);
  w.row({"name", "truth", "mean_of_means", "q025", "q975", "coverage", "avg_post_sd"});
  for (const auto& r : rep.rows)
    w.row({r.name, io_detail::fmt17(r.truth), io_detail::fmt17(r.mean_of_means),
           io_detail::fmt17(r.q025), io_detail::fmt17(r.q975), io_detail::fmt17(r.coverage),
           io_detail::fmt17(r.avg_post_sd)});
}

inline void write_study_meta_csv(const std::string& path, const RecoveryReport& rep) {
  io_detail::CsvWriter w(path);
  w.row({"n_reps", "n_converged", "n_excluded", "excluded_indices"});
  std::string ex;
  for (size_t k = 0; k < rep.excluded.size(); ++k) {
    if (k) ex += ';';
    ex += std::to_string(rep.excluded[k]);
  }
  w.row({std::to_string(rep.n_reps), std::to_string(rep.n_converged),
         std::to_string(rep.excluded.size()), ex});
}

// Emit a loadable panel (counts incl. lag-context rows, both edge directions,
// covariates, pair covariates); load_panel on the result reproduces the input.
inline void emit_panel(const std::string& dir, const PanelBundle& b) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const PanelData& d = b.data;
  const int n = d.n_areas();
  {
    io_detail::CsvWriter w(dir + "/counts.csv");
    w.row({"area_id", "time", "count"});
    for (int i = 0; i < n; ++i) {
      w.row({io_detail::area_name(b.area_ids, i), "0", std::to_string(d.y0[i])});
      for (int t = 1; t <= d.T; ++t)
        w.row({io_detail::area_name(b.area_ids, i), std::to_string(t),
               std::to_string(d.count(i, t))});
    }
  }
  {
    io_detail::CsvWriter w(dir + "/adjacency.csv");
    w.row({"area_i", "area_j"});
    for (int i = 0; i < n; ++i)
      for (int kn = 0; kn < d.graph.degree(i); ++kn)
        w.row({io_detail::area_name(b.area_ids, i),
               io_detail::area_name(b.area_ids, d.graph.begin(i)[kn])});
  }
  if (d.covs.n_cols() > 0) {
    io_detail::CsvWriter w(dir + "/covariates.csv");
    std::vector<std::string> head = {"area_id", "time"};
    head.insert(head.end(), d.covs.names.begin(), d.covs.names.end());
    w.row(head);
    for (int i = 0; i < n; ++i)
      for (int t = 1; t <= d.T; ++t) {
        std::vector<std::string> row = {io_detail::area_name(b.area_ids, i), std::to_string(t)};
        for (int k = 0; k < d.covs.n_cols(); ++k)
          row.push_back(io_detail::fmt17(d.covs.at(i, t, k)));
        w.row(row);
      }
  }
  if (d.pair_covs.n_cols() > 0) {
    io_detail::CsvWriter w(dir + "/pair_covariates.csv");
    std::vector<std::string> head = {"area_i", "area_j", "time"};
    head.insert(head.end(), d.pair_covs.names.begin(), d.pair_covs.names.end());
    w.row(head);
    for (int i = 0; i < n; ++i)
      for (int kn = 0; kn < d.graph.degree(i); ++kn) {
        int j = d.graph.begin(i)[kn];
        if (j < i) continue;  // one direction suffices: rows fill both slots
        int slot = d.graph.slot(i, kn);
        for (int t = 1; t <= d.T; ++t) {
          std::vector<std::string> row = {io_detail::area_name(b.area_ids, i),
                                          io_detail::area_name(b.area_ids, j), std::to_string(t)};
          for (int k = 0; k < d.pair_covs.n_cols(); ++k)
            row.push_back(io_detail::fmt17(d.pair_covs.at(slot, t, k)));
          w.row(row);
        }
      }
  }
}

// ---------------------------------------------------------------------------
// draws re-ingestion (round-trip diagnostics)
// ---------------------------------------------------------------------------

struct DrawsTable {
  std::vector<std::string> names;
  // chains[c][p][k]: chain c, parameter p, kept draw k
  std::vector<std::vector<std::vector<double>>> chains;
};

inline DrawsTable load_draws_csv(const std::string& path) {
  CsvTable t = read_csv(path);
  int c_chain = t.col("chain"), c_iter = t.col("iteration"), c_name = t.col("name"),
      c_val = t.col("value");
  if (c_chain < 0 || c_iter < 0 || c_name < 0 || c_val < 0)
    throw ValidationError(path + ": need columns chain,iteration,name,value");
  DrawsTable out;
  std::map<std::string, int> name_idx;
  for (size_t r = 0; r < t.rows.size(); ++r) {
    long c = io_detail::to_long(t, r, c_chain, "chain");
    if (c < 0) t.fail(r, "negative chain index");
    const std::string& nm = t.rows[r][c_name];
    auto it = name_idx.find(nm);
    int p;
    if (it == name_idx.end()) {
      p = static_cast<int>(out.names.size());
      name_idx.emplace(nm, p);
      out.names.push_back(nm);
    } else {
      p = it->second;
    }
    if (static_cast<size_t>(c) >= out.chains.size()) out.chains.resize(c + 1);
    auto& ch = out.chains[c];
    if (ch.size() < out.names.size()) ch.resize(out.names.size());
    ch[p].push_back(io_detail::to_double(t, r, c_val, "value"));
  }
  for (size_t c = 0; c < out.chains.size(); ++c) {
    out.chains[c].resize(out.names.size());
    size_t len = out.chains[c].empty() ? 0 : out.chains[c][0].size();
    for (const auto& col : out.chains[c])
      if (col.size() != len)
        throw ValidationError(path + ": ragged draw table (chain " + std::to_string(c) + ")");
  }
  return out;
}

// Per-parameter effective sample size (summed across chains) and shrink
// factor, recomputed from an on-disk draw table. Matches the in-memory
// post-fit report for the same draws.
inline DiagnosticsReport diagnose_draws(const DrawsTable& t) {
  if (t.chains.empty() || t.names.empty()) throw ValidationError("empty draw table");
  DiagnosticsReport rep;
  rep.min_ess = std::numeric_limits<double>::infinity();
  for (size_t p = 0; p < t.names.size(); ++p) {
    ParamDiag d;
    d.name = t.names[p];
    std::vector<std::vector<double>> cols;
    for (const auto& ch : t.chains) {
      cols.push_back(ch[p]);
      EssResult e = ess(ch[p]);
      d.ess += e.ess;
      d.ess_degenerate = d.ess_degenerate || e.degenerate;
    }
    if (t.chains.size() >= 2) {
      d.rhat = gelman_rubin(cols);
      if (std::isnan(rep.max_rhat) || d.rhat > rep.max_rhat) rep.max_rhat = d.rhat;
    }
    rep.min_ess = std::min(rep.min_ess, d.ess);
    rep.params.push_back(std::move(d));
  }
  return rep;
}

// Rebuild a posterior store from an emitted fit directory (draws.csv,
// final_states.csv, full_states.csv when present). The predictive-density
// accumulators are not persisted, so the reloaded store supports prediction
// and draw summaries but not information-criterion computation.
inline PosteriorStore load_fit_dir(const std::string& dir, const ParamLayout& lay, int n_areas,
                                   int T, const std::vector<std::string>& ids = {}) {
  PosteriorStore fit;
  fit.lay = lay;
  fit.n_areas = n_areas;
  fit.T = T;

  DrawsTable dt = load_draws_csv(dir + "/draws.csv");
  if (static_cast<int>(dt.names.size()) != lay.total)
    throw ValidationError(dir + "/draws.csv: expected " + std::to_string(lay.total) +
                          " parameters, found " + std::to_string(dt.names.size()));
  std::vector<int> perm(lay.total);  // layout index -> table index
  for (int p = 0; p < lay.total; ++p) {
    int q = -1;
    for (size_t k = 0; k < dt.names.size(); ++k)
      if (dt.names[k] == lay.names[p]) q = static_cast<int>(k);
    if (q < 0) throw ValidationError(dir + "/draws.csv: missing parameter '" + lay.names[p] + "'");
    perm[p] = q;
  }
  fit.chains.resize(dt.chains.size());
  for (size_t c = 0; c < dt.chains.size(); ++c) {
    ChainStore& ch = fit.chains[c];
    ch.n_params = lay.total;
    ch.n_kept = static_cast<long>(dt.chains[c].empty() ? 0 : dt.chains[c][0].size());
    ch.draws.resize(static_cast<size_t>(ch.n_kept) * lay.total);
    for (long k = 0; k < ch.n_kept; ++k)
      for (int p = 0; p < lay.total; ++p)
        ch.draws[static_cast<size_t>(k) * lay.total + p] = dt.chains[c][perm[p]][k];
  }

  auto idx_of = [&](const std::string& id) -> int {
    if (ids.empty()) {
      try {
        return std::stoi(id);
      } catch (const std::exception&) {
        throw ValidationError("cannot parse area index '" + id + "' in stored states");
      }
    }
    for (size_t k = 0; k < ids.size(); ++k)
      if (ids[k] == id) return static_cast<int>(k);
    throw ValidationError("unknown area id '" + id + "' in stored states");
  };

  {
    CsvTable t = read_csv(dir + "/final_states.csv");
    int c_chain = t.col("chain"), c_iter = t.col("iteration"), c_area = t.col("area"),
        c_state = t.col("state");
    if (c_chain < 0 || c_iter < 0 || c_area < 0 || c_state < 0)
      throw ValidationError(dir + "/final_states.csv: need columns chain,iteration,area,state");
    for (auto& ch : fit.chains)
      ch.final_states.assign(static_cast<size_t>(ch.n_kept) * n_areas, 0);
    for (size_t r = 0; r < t.rows.size(); ++r) {
      long c = io_detail::to_long(t, r, c_chain, "chain");
      long k = io_detail::to_long(t, r, c_iter, "iteration");
      int i = idx_of(t.rows[r][c_area]);
      long s = io_detail::to_long(t, r, c_state, "state");
      if (c < 0 || c >= static_cast<long>(fit.chains.size())) t.fail(r, "chain out of range");
      if (k < 0 || k >= fit.chains[c].n_kept) t.fail(r, "iteration out of range");
      if (i < 0 || i >= n_areas) t.fail(r, "area out of range");
      if (s != 0 && s != 1) t.fail(r, "state must be 0 or 1");
      fit.chains[c].final_states[static_cast<size_t>(k) * n_areas + i] =
          static_cast<uint8_t>(s);
    }
  }

  std::string full_path = dir + "/full_states.csv";
  if (std::filesystem::exists(full_path)) {
    CsvTable t = read_csv(full_path);
    int c_chain = t.col("chain"), c_iter = t.col("iteration"), c_area = t.col("area"),
        c_time = t.col("time"), c_state = t.col("state");
    if (c_chain < 0 || c_iter < 0 || c_area < 0 || c_time < 0 || c_state < 0)
      throw ValidationError(full_path + ": need columns chain,iteration,area,time,state");
    size_t cells = static_cast<size_t>(n_areas) * (T + 1);
    std::vector<std::vector<long>> iters(fit.chains.size());
    for (size_t r = 0; r < t.rows.size(); ++r) {
      long c = io_detail::to_long(t, r, c_chain, "chain");
      if (c < 0 || c >= static_cast<long>(fit.chains.size())) t.fail(r, "chain out of range");
      long k = io_detail::to_long(t, r, c_iter, "iteration");
      auto& v = iters[c];
      if (std::find(v.begin(), v.end(), k) == v.end()) v.push_back(k);
    }
    for (size_t c = 0; c < fit.chains.size(); ++c) {
      auto& v = iters[c];
      std::sort(v.begin(), v.end());
      for (size_t k = 1; k < v.size(); ++k)
        if (v[k] - v[k - 1] != v[1] - v[0])
          throw ValidationError(full_path + ": uneven retention stride");
      fit.chains[c].n_state_draws = static_cast<long>(v.size());
      fit.chains[c].state_stride = v.size() >= 2 ? v[1] - v[0] : 1;
      fit.chains[c].full_states.assign(v.size() * cells, 0);
    }
    for (size_t r = 0; r < t.rows.size(); ++r) {
      long c = io_detail::to_long(t, r, c_chain, "chain");
      long k = io_detail::to_long(t, r, c_iter, "iteration");
      int i = idx_of(t.rows[r][c_area]);
      long tt = io_detail::to_long(t, r, c_time, "time");
      long s = io_detail::to_long(t, r, c_state, "state");
      if (i < 0 || i >= n_areas) t.fail(r, "area out of range");
      if (tt < 0 || tt > T) t.fail(r, "time out of range");
      if (s != 0 && s != 1) t.fail(r, "state must be 0 or 1");
      const auto& v = iters[c];
      long ord = std::find(v.begin(), v.end(), k) - v.begin();
      fit.chains[c].full_states[ord * cells + static_cast<size_t>(i) * (T + 1) + tt] =
          static_cast<uint8_t>(s);
    }
    fit.full_states_stored = true;
  }
  return fit;
}

}  // namespace zscms
