#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace zscms {

/// Thrown on malformed inputs (bad shapes, unknown names, invalid config).
struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Thrown when a computation degenerates numerically (zero filter mass,
/// non-finite targets, unattainable slice levels).
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

/// Symmetric neighbourhood structure in compressed sparse row form.
/// Neighbour lists are sorted ascending; (i,j) present iff (j,i) present.
struct NeighborGraph {
  int n_areas = 0;
  std::vector<int> offsets;    // size n_areas + 1
  std::vector<int> neighbors;  // concatenated sorted neighbour lists

  int degree(int i) const { return offsets[i + 1] - offsets[i]; }
  const int* begin(int i) const { return neighbors.data() + offsets[i]; }
  const int* end(int i) const { return neighbors.data() + offsets[i + 1]; }
  /// Directed slot of the jn-th neighbour of i; indexes pair covariates.
  int slot(int i, int jn) const { return offsets[i] + jn; }
  int n_slots() const { return static_cast<int>(neighbors.size()); }

  /// Index of j within i's neighbour list, -1 if absent.
  int neighbor_index(int i, int j) const {
    const int* b = begin(i);
    const int* e = end(i);
    const int* it = std::lower_bound(b, e, j);
    return (it != e && *it == j) ? static_cast<int>(it - b) : -1;
  }
};

/// Build a graph from edges. With symmetrize each input edge also adds its
/// reverse; without it the input must already be symmetric. Self loops are
/// rejected, duplicates collapse.
inline NeighborGraph make_graph(int n_areas, const std::vector<std::pair<int, int>>& edges,
                                bool symmetrize = true) {
  std::vector<std::vector<int>> adj(n_areas);
  auto add = [&](int a, int b) {
    if (a < 0 || b < 0 || a >= n_areas || b >= n_areas)
      throw ValidationError("edge endpoint out of range");
    if (a == b) throw ValidationError("self loop in adjacency");
    adj[a].push_back(b);
  };
  for (auto [a, b] : edges) {
    add(a, b);
    if (symmetrize) add(b, a);
  }
  NeighborGraph g;
  g.n_areas = n_areas;
  g.offsets.assign(n_areas + 1, 0);
  for (int i = 0; i < n_areas; ++i) {
    auto& v = adj[i];
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
    g.offsets[i + 1] = g.offsets[i] + static_cast<int>(v.size());
    g.neighbors.insert(g.neighbors.end(), v.begin(), v.end());
  }
  for (int i = 0; i < n_areas; ++i)
    for (const int* p = g.begin(i); p != g.end(i); ++p)
      if (g.neighbor_index(*p, i) < 0)
        throw ValidationError("asymmetric adjacency: edge " + std::to_string(i) + "->" +
                              std::to_string(*p) + " lacks its reverse");
  return g;
}

/// Rectangular lattice with rook adjacency; rows*cols areas, row-major ids.
inline NeighborGraph make_lattice(int rows, int cols) {
  std::vector<std::pair<int, int>> edges;
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) {
      int id = r * cols + c;
      if (c + 1 < cols) edges.emplace_back(id, id + 1);
      if (r + 1 < rows) edges.emplace_back(id, id + cols);
    }
  return make_graph(rows * cols, edges, true);
}

/// Named area-by-time covariate columns; static covariates are stored
/// expanded over time. Value at (i, t, k) for t = 1..n_times.
struct CovariatePool {
  int n_areas = 0, n_times = 0;
  std::vector<std::string> names;
  std::vector<double> values;  // ((i * n_times + (t-1)) * n_cols + k)

  int n_cols() const { return static_cast<int>(names.size()); }
  double at(int i, int t, int k) const {
    return values[(static_cast<size_t>(i) * n_times + (t - 1)) * names.size() + k];
  }
  double& at(int i, int t, int k) {
    return values[(static_cast<size_t>(i) * n_times + (t - 1)) * names.size() + k];
  }
  int col(const std::string& name) const {
    for (int k = 0; k < n_cols(); ++k)
      if (names[k] == name) return k;
    return -1;
  }
  int add_col(const std::string& name) {
    if (col(name) >= 0) throw ValidationError("duplicate covariate name: " + name);
    names.push_back(name);
    std::vector<double> next(static_cast<size_t>(n_areas) * n_times * names.size(), 0.0);
    int K = n_cols();
    for (int i = 0; i < n_areas; ++i)
      for (int t = 0; t < n_times; ++t)
        for (int k = 0; k + 1 < K; ++k)
          next[(static_cast<size_t>(i) * n_times + t) * K + k] =
              values[(static_cast<size_t>(i) * n_times + t) * (K - 1) + k];
    values.swap(next);
    return K - 1;
  }
};

/// Directed-pair covariates indexed by graph slot (receiver i, sender j).
struct PairCovariatePool {
  int n_slots = 0, n_times = 0;
  std::vector<std::string> names;
  std::vector<double> values;  // ((slot * n_times + (t-1)) * n_cols + k)

  int n_cols() const { return static_cast<int>(names.size()); }
  double at(int slot, int t, int k) const {
    return values[(static_cast<size_t>(slot) * n_times + (t - 1)) * names.size() + k];
  }
  double& at(int slot, int t, int k) {
    return values[(static_cast<size_t>(slot) * n_times + (t - 1)) * names.size() + k];
  }
  int col(const std::string& name) const {
    for (int k = 0; k < n_cols(); ++k)
      if (names[k] == name) return k;
    return -1;
  }
  int add_col(const std::string& name) {
    if (col(name) >= 0) throw ValidationError("duplicate pair covariate name: " + name);
    names.push_back(name);
    std::vector<double> next(static_cast<size_t>(n_slots) * n_times * names.size(), 0.0);
    int K = n_cols();
    for (int s = 0; s < n_slots; ++s)
      for (int t = 0; t < n_times; ++t)
        for (int k = 0; k + 1 < K; ++k)
          next[(static_cast<size_t>(s) * n_times + t) * K + k] =
              values[(static_cast<size_t>(s) * n_times + t) * (K - 1) + k];
    values.swap(next);
    return K - 1;
  }
};

/// Counts y_it for t = 1..T plus lag context y0 (counts at t = 0, used by
/// autoregressive mean terms and lagged-count transforms at t = 1).
struct PanelData {
  NeighborGraph graph;
  int T = 0;
  std::vector<long> y;   // i * T + (t-1)
  std::vector<long> y0;  // size n_areas
  CovariatePool covs;
  PairCovariatePool pair_covs;

  int n_areas() const { return graph.n_areas; }
  long count(int i, int t) const { return y[static_cast<size_t>(i) * T + (t - 1)]; }
  long& count(int i, int t) { return y[static_cast<size_t>(i) * T + (t - 1)]; }
  long count_prev(int i, int t) const { return t == 1 ? y0[i] : count(i, t - 1); }

  void validate() const {
    if (graph.n_areas <= 0 || T <= 0) throw ValidationError("empty panel");
    if (y.size() != static_cast<size_t>(graph.n_areas) * T)
      throw ValidationError("count table shape mismatch");
    if (y0.size() != static_cast<size_t>(graph.n_areas))
      throw ValidationError("lag-context count vector shape mismatch");
    for (long v : y)
      if (v < 0) throw ValidationError("negative count");
    if (covs.n_cols() > 0 && (covs.n_areas != graph.n_areas || covs.n_times != T))
      throw ValidationError("covariate table shape mismatch");
    if (pair_covs.n_cols() > 0 &&
        (pair_covs.n_slots != graph.n_slots() || pair_covs.n_times != T))
      throw ValidationError("pair covariate table shape mismatch");
  }
};

/// Per-area probability that the area starts present at t = 0.
/// Entries 0 or 1 are degenerate (the initial state is fixed).
struct InitialStateDist {
  std::vector<double> pi0;

  bool degenerate(int i) const { return pi0[i] == 0.0 || pi0[i] == 1.0; }
  double logp(int i, int s) const {
    double p = s ? pi0[i] : 1.0 - pi0[i];
    return p > 0.0 ? std::log(p) : kNegInf;
  }
  void validate(int n_areas) const {
    if (static_cast<int>(pi0.size()) != n_areas)
      throw ValidationError("initial state distribution length mismatch");
    for (double p : pi0)
      if (!(p >= 0.0 && p <= 1.0)) throw ValidationError("initial presence probability outside [0,1]");
  }
};

/// Latent presence indicators on the grid t = 0..T. fixed marks cells
/// pinned by the data (positive counts force presence) or by a degenerate
/// initial distribution; samplers never touch fixed cells.
struct StateField {
  int n = 0, T = 0;
  std::vector<uint8_t> s;      // i * (T+1) + t
  std::vector<uint8_t> fixed;  // same layout

  int at(int i, int t) const { return s[static_cast<size_t>(i) * (T + 1) + t]; }
  void set(int i, int t, int v) { s[static_cast<size_t>(i) * (T + 1) + t] = static_cast<uint8_t>(v); }
  bool is_fixed(int i, int t) const { return fixed[static_cast<size_t>(i) * (T + 1) + t] != 0; }
  const uint8_t* row(int i) const { return s.data() + static_cast<size_t>(i) * (T + 1); }
  /// Pointer to area 0's state at time t; consecutive areas are (T+1) apart.
  const uint8_t* col(int t) const { return s.data() + t; }
  static int col_stride(int T) { return T + 1; }
};

enum class EmissionFamily { NegBinomial, Poisson };
enum class DispersionForm { Global, PerArea };
enum class MeanVariant { LogLinear, EndemicEpidemic };

/// Reference to a covariate column by resolved index plus the name it was
/// selected under (names feed parameter labels and config round-trips).
struct ColRef {
  int col = -1;
  std::string name;
};

struct MeanModelSpec {
  MeanVariant variant = MeanVariant::LogLinear;
  std::vector<ColRef> x;         // log-linear covariates
  bool log_lag_count = false;    // append log(y_{i,t-1}+1) with its own coefficient
  std::vector<ColRef> ar, en;    // endemic/epidemic covariates
  bool ar_random_intercepts = false;
  bool en_random_intercepts = false;
};

struct TransitionSpec {
  std::vector<ColRef> z01, z11;  // reemergence / persistence covariates
  bool z01_log_lag_count = false;
  bool z11_log_lag_count = false;
  bool coupled = true;           // include neighbour coupling in both logits
  std::vector<ColRef> c01, c11;  // pair covariates modulating the coupling
};

struct ModelSpec {
  EmissionFamily family = EmissionFamily::NegBinomial;
  bool zero_inflated = true;     // false: presence fixed at 1 everywhere
  DispersionForm dispersion = DispersionForm::Global;
  MeanModelSpec mean;
  TransitionSpec trans;
};

/// Offsets of each parameter group inside the flat parameter vector.
/// Absent groups have offset -1 and count 0. gamma holds log r.
struct ParamLayout {
  int zeta0 = -1, zeta = -1, n_zeta = 0;
  int zeta0c = -1, zetac = -1, n_zetac = 0;
  int eta0 = -1, eta = -1, n_eta = 0;
  int eta0c = -1, etac = -1, n_etac = 0;
  int delta0 = -1, delta = -1, n_delta = 0;
  int ar0 = -1, ar = -1, n_ar = 0;
  int en0 = -1, en = -1, n_en = 0;
  int ar_re = -1, en_re = -1;  // n_areas entries each when present
  int sigma_ar = -1, sigma_en = -1;
  int gamma = -1, n_gamma = 0;
  int n_areas = 0, total = 0;
  std::vector<std::string> names;

  int index(const std::string& name) const {
    for (int k = 0; k < total; ++k)
      if (names[k] == name) return k;
    return -1;
  }
};

using ParamVector = std::vector<double>;

inline ParamLayout build_layout(const ModelSpec& spec, int n_areas) {
  ParamLayout L;
  L.n_areas = n_areas;
  int p = 0;
  auto scalar = [&](int& off, const std::string& name) {
    off = p++;
    L.names.push_back(name);
  };
  auto group = [&](int& off, int& count, const std::vector<ColRef>& cols,
                   const std::string& prefix, bool log_lag) {
    count = static_cast<int>(cols.size()) + (log_lag ? 1 : 0);
    off = count > 0 ? p : -1;
    for (const auto& c : cols) L.names.push_back(prefix + "." + c.name);
    if (log_lag) L.names.push_back(prefix + ".log_lag_count");
    p += count;
  };

  if (spec.mean.variant == MeanVariant::LogLinear) {
    scalar(L.delta0, "delta0");
    group(L.delta, L.n_delta, spec.mean.x, "delta", spec.mean.log_lag_count);
  } else {
    scalar(L.ar0, "ar0");
    group(L.ar, L.n_ar, spec.mean.ar, "ar", false);
    scalar(L.en0, "en0");
    group(L.en, L.n_en, spec.mean.en, "en", false);
    if (spec.mean.ar_random_intercepts) {
      L.ar_re = p;
      for (int i = 0; i < n_areas; ++i) L.names.push_back("ar_re[" + std::to_string(i) + "]");
      p += n_areas;
      scalar(L.sigma_ar, "sigma_ar");
    }
    if (spec.mean.en_random_intercepts) {
      L.en_re = p;
      for (int i = 0; i < n_areas; ++i) L.names.push_back("en_re[" + std::to_string(i) + "]");
      p += n_areas;
      scalar(L.sigma_en, "sigma_en");
    }
  }
  if (spec.family == EmissionFamily::NegBinomial) {
    if (spec.dispersion == DispersionForm::Global) {
      L.gamma = p;
      L.n_gamma = 1;
      L.names.push_back("gamma");
      ++p;
    } else {
      L.gamma = p;
      L.n_gamma = n_areas;
      for (int i = 0; i < n_areas; ++i) L.names.push_back("gamma[" + std::to_string(i) + "]");
      p += n_areas;
    }
  }
  if (spec.zero_inflated) {
    scalar(L.zeta0, "zeta0");
    group(L.zeta, L.n_zeta, spec.trans.z01, "zeta", spec.trans.z01_log_lag_count);
    scalar(L.eta0, "eta0");
    group(L.eta, L.n_eta, spec.trans.z11, "eta", spec.trans.z11_log_lag_count);
    if (spec.trans.coupled) {
      scalar(L.zeta0c, "zeta0c");
      group(L.zetac, L.n_zetac, spec.trans.c01, "zetac", false);
      scalar(L.eta0c, "eta0c");
      group(L.etac, L.n_etac, spec.trans.c11, "etac", false);
    }
  }
  L.total = p;
  return L;
}

}  // namespace zscms
