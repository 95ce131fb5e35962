#ifndef L96_METRICS_HPP_
#define L96_METRICS_HPP_

#include "l96/common.hpp"
#include "l96/ensemble.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

namespace l96 {

// ---------------------------------------------------------------------------
// Stationary distributions
// ---------------------------------------------------------------------------

/// Probability mass per bin on explicit edges.
struct Histogram {
  std::vector<double> edges;
  std::vector<double> masses;

  std::size_t bins() const { return masses.size(); }
  double width(std::size_t b) const { return edges[b + 1] - edges[b]; }
};

/// Uniform edges spanning the pooled min/max of both samples.
inline std::vector<double> shared_edges(std::span<const double> a, std::span<const double> b, int n_bins = 100) {
  detail::require(n_bins >= 1, "shared_edges: n_bins must be >= 1");
  detail::require(!a.empty() || !b.empty(), "shared_edges: both samples empty");
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  for (auto s : {a, b}) {
    for (double v : s) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }
  if (!(hi > lo)) {
    lo -= 0.5;
    hi += 0.5;
  }
  std::vector<double> edges(static_cast<std::size_t>(n_bins) + 1);
  for (int e = 0; e <= n_bins; ++e) edges[static_cast<std::size_t>(e)] = lo + (hi - lo) * e / n_bins;
  edges.back() = hi;
  return edges;
}

/// Values outside the edges are dropped; the last bin is closed on the right.
inline Histogram histogram(std::span<const double> sample, const std::vector<double>& edges) {
  detail::require(edges.size() >= 2, "histogram: need at least one bin");
  for (std::size_t e = 1; e < edges.size(); ++e) {
    detail::require(edges[e] > edges[e - 1], "histogram: edges must be strictly increasing");
  }
  Histogram h;
  h.edges = edges;
  h.masses.assign(edges.size() - 1, 0.0);
  const double lo = edges.front();
  const double hi = edges.back();
  const auto n_bins = static_cast<long>(h.masses.size());
  const double inv_w = static_cast<double>(n_bins) / (hi - lo);
  double count = 0.0;
  for (double v : sample) {
    if (!(v >= lo && v <= hi)) continue;
    long b = std::min(n_bins - 1, static_cast<long>((v - lo) * inv_w));
    // Uniform guess, then correct against the actual edges.
    while (b > 0 && v < edges[static_cast<std::size_t>(b)]) --b;
    while (b + 1 < n_bins && v >= edges[static_cast<std::size_t>(b) + 1]) ++b;
    h.masses[static_cast<std::size_t>(b)] += 1.0;
    count += 1.0;
  }
  detail::require(count > 0, "histogram: no samples inside the edges");
  for (auto& m : h.masses) m /= count;
  return h;
}

/// H = sqrt(1/2 sum_b (sqrt(p_b/dx_b) - sqrt(q_b/dx_b))^2 dx_b) on shared edges,
/// i.e. the density form, which reduces to the mass form sqrt(1/2 sum (sqrt p - sqrt q)^2).
inline double hellinger(const Histogram& p, const Histogram& q) {
  if (p.edges != q.edges) throw precondition_error("hellinger: histograms must share edges");
  double s = 0.0;
  for (std::size_t b = 0; b < p.bins(); ++b) {
    const double w = p.width(b);
    const double d = std::sqrt(p.masses[b] / w) - std::sqrt(q.masses[b] / w);
    s += d * d * w;
  }
  return std::min(1.0, std::sqrt(0.5 * s));
}

/// sup |F_a - F_b| between the empirical CDFs.
inline double ks_statistic(std::span<const double> a, std::span<const double> b) {
  detail::require(!a.empty() && !b.empty(), "ks_statistic: samples must be non-empty");
  std::vector<double> x(a.begin(), a.end());
  std::vector<double> y(b.begin(), b.end());
  std::sort(x.begin(), x.end());
  std::sort(y.begin(), y.end());
  const double na = static_cast<double>(x.size());
  const double nb = static_cast<double>(y.size());
  std::size_t i = 0, j = 0;
  double d = 0.0;
  while (i < x.size() && j < y.size()) {
    const double v = std::min(x[i], y[j]);
    while (i < x.size() && x[i] == v) ++i;
    while (j < y.size() && y[j] == v) ++j;
    d = std::max(d, std::abs(static_cast<double>(i) / na - static_cast<double>(j) / nb));
  }
  return d;
}

/// All values of a set of (t, k) runs flattened into one sample.
inline std::vector<double> pooled_sample(const std::vector<Matrix>& runs) {
  std::vector<double> out;
  std::size_t n = 0;
  for (const auto& r : runs) n += static_cast<std::size_t>(r.size());
  out.reserve(n);
  for (const auto& r : runs) out.insert(out.end(), r.data(), r.data() + r.size());
  return out;
}

// ---------------------------------------------------------------------------
// Ensemble verification
// ---------------------------------------------------------------------------

namespace detail {

inline void require_truth(const EnsembleCube& cube, const char* what) {
  if (!cube.has_truth()) throw precondition_error(concat(what, ": cube has no truth trajectories"));
  for (int i = 0; i < cube.n_init(); ++i) {
    if (!cube.usable(i)) continue;
    if (cube.truth[static_cast<std::size_t>(i)].rows() != cube.n_times() ||
        cube.truth[static_cast<std::size_t>(i)].cols() != cube.K) {
      throw precondition_error(concat(what, ": truth and ensemble time grids are misaligned"));
    }
  }
}

inline double member_mean(const EnsembleCube& c, int i, long t, int k) {
  double s = 0.0;
  for (int j = 0; j < c.n_ens(); ++j)
    for (int m = 0; m < c.n_model(); ++m) s += c.at(i, j, m, t, k);
  return s / c.members();
}

}  // namespace detail

/// Average pairwise Euclidean distance between members, averaged over i.
inline std::vector<double> apd(const EnsembleCube& cube) {
  const int N = cube.members();
  detail::require(N >= 2, "apd: need at least 2 members");
  const int used = cube.n_usable();
  detail::require(used >= 1, "apd: no usable initial states");
  std::vector<double> out(static_cast<std::size_t>(cube.n_times()), 0.0);
  const double pairs = 0.5 * N * (N - 1);
  for (int i = 0; i < cube.n_init(); ++i) {
    if (!cube.usable(i)) continue;
    for (long t = 0; t < cube.n_times(); ++t) {
      double s = 0.0;
      for (int a = 0; a < N; ++a) {
        const double* xa = cube.state(i, a / cube.n_model(), a % cube.n_model(), t);
        for (int b = a + 1; b < N; ++b) {
          const double* xb = cube.state(i, b / cube.n_model(), b % cube.n_model(), t);
          double d2 = 0.0;
          for (int k = 0; k < cube.K; ++k) d2 += (xa[k] - xb[k]) * (xa[k] - xb[k]);
          s += std::sqrt(d2);
        }
      }
      out[static_cast<std::size_t>(t)] += s / pairs;
    }
  }
  for (auto& v : out) v /= used;
  return out;
}

/// sqrt(mean over (i, k) of (ensemble mean - truth)^2).
inline std::vector<double> rmse(const EnsembleCube& cube) {
  detail::require_truth(cube, "rmse");
  const int used = cube.n_usable();
  detail::require(used >= 1, "rmse: no usable initial states");
  std::vector<double> out(static_cast<std::size_t>(cube.n_times()), 0.0);
  for (int i = 0; i < cube.n_init(); ++i) {
    if (!cube.usable(i)) continue;
    const Matrix& tr = cube.truth[static_cast<std::size_t>(i)];
    for (long t = 0; t < cube.n_times(); ++t) {
      for (int k = 0; k < cube.K; ++k) {
        const double e = detail::member_mean(cube, i, t, k) - tr(t, k);
        out[static_cast<std::size_t>(t)] += e * e;
      }
    }
  }
  for (auto& v : out) v = std::sqrt(v / (static_cast<double>(used) * cube.K));
  return out;
}

struct AncrSeries {
  std::vector<double> value;
  std::vector<int> excluded;  // zero-norm anomaly count per t
};

/// Mean over i of the cosine between ensemble-mean and truth anomalies about clim_mean.
inline AncrSeries ancr(const EnsembleCube& cube, double clim_mean) {
  detail::require_truth(cube, "ancr");
  AncrSeries s;
  s.value.assign(static_cast<std::size_t>(cube.n_times()), 0.0);
  s.excluded.assign(static_cast<std::size_t>(cube.n_times()), 0);
  std::vector<int> n(static_cast<std::size_t>(cube.n_times()), 0);
  for (int i = 0; i < cube.n_init(); ++i) {
    if (!cube.usable(i)) continue;
    const Matrix& tr = cube.truth[static_cast<std::size_t>(i)];
    for (long t = 0; t < cube.n_times(); ++t) {
      double dot = 0.0, na = 0.0, nb = 0.0;
      for (int k = 0; k < cube.K; ++k) {
        const double am = detail::member_mean(cube, i, t, k) - clim_mean;
        const double at = tr(t, k) - clim_mean;
        dot += am * at;
        na += am * am;
        nb += at * at;
      }
      const auto ti = static_cast<std::size_t>(t);
      if (na == 0.0 || nb == 0.0) {
        ++s.excluded[ti];
        continue;
      }
      s.value[ti] += dot / std::sqrt(na * nb);
      ++n[ti];
    }
  }
  for (std::size_t t = 0; t < s.value.size(); ++t) {
    s.value[t] = n[t] > 0 ? s.value[t] / n[t] : std::numeric_limits<double>::quiet_NaN();
  }
  return s;
}

/// sqrt(mean over (i, k) of the population member variance).
inline std::vector<double> rms_spread(const EnsembleCube& cube) {
  const int N = cube.members();
  detail::require(N >= 2, "rms_spread: need at least 2 members");
  const int used = cube.n_usable();
  detail::require(used >= 1, "rms_spread: no usable initial states");
  std::vector<double> out(static_cast<std::size_t>(cube.n_times()), 0.0);
  for (int i = 0; i < cube.n_init(); ++i) {
    if (!cube.usable(i)) continue;
    for (long t = 0; t < cube.n_times(); ++t) {
      for (int k = 0; k < cube.K; ++k) {
        const double mu = detail::member_mean(cube, i, t, k);
        double v = 0.0;
        for (int j = 0; j < cube.n_ens(); ++j)
          for (int m = 0; m < cube.n_model(); ++m) v += (cube.at(i, j, m, t, k) - mu) * (cube.at(i, j, m, t, k) - mu);
        out[static_cast<std::size_t>(t)] += v / N;
      }
    }
  }
  for (auto& v : out) v = std::sqrt(v / (static_cast<double>(used) * cube.K));
  return out;
}

/// d = N/(N-1) spread - N/(N+1) rmse; negative means underdispersive.
inline double consistency_distance(double rmse_value, double spread, int n_ens) {
  detail::require(n_ens >= 2, "consistency_distance: need n_ens >= 2");
  const double n = n_ens;
  return n / (n - 1.0) * spread - n / (n + 1.0) * rmse_value;
}

struct SkillSeries {
  std::vector<double> times;
  std::vector<double> rmse;
  std::vector<double> ancr;
  std::vector<double> spread;
  std::vector<double> distance;
  std::vector<int> ancr_excluded;
  int n_members = 0;
};

inline SkillSeries skill(const EnsembleCube& cube, double clim_mean) {
  SkillSeries s;
  s.times = cube.times;
  s.rmse = rmse(cube);
  auto a = ancr(cube, clim_mean);
  s.ancr = std::move(a.value);
  s.ancr_excluded = std::move(a.excluded);
  s.spread = rms_spread(cube);
  s.n_members = cube.members();
  for (std::size_t t = 0; t < s.times.size(); ++t) {
    s.distance.push_back(consistency_distance(s.rmse[t], s.spread[t], s.n_members));
  }
  return s;
}

// ---------------------------------------------------------------------------
// Temporal correlation
// ---------------------------------------------------------------------------

/// ccf(tau) = [1/(T-tau) sum_t (a_t - mean a)(b_{t+tau} - mean b)] / (sd_a sd_b),
/// means and standard deviations over the full sample. acf is ccf(a, a).
inline std::vector<double> ccf(std::span<const double> a, std::span<const double> b, long max_lag) {
  const auto T = static_cast<long>(a.size());
  detail::require(static_cast<long>(b.size()) == T, "ccf: series lengths differ");
  detail::require(max_lag >= 0 && T > max_lag, "ccf: need T > max_lag");
  double ma = 0.0, mb = 0.0;
  for (long t = 0; t < T; ++t) {
    ma += a[t];
    mb += b[t];
  }
  ma /= T;
  mb /= T;
  double va = 0.0, vb = 0.0;
  for (long t = 0; t < T; ++t) {
    va += (a[t] - ma) * (a[t] - ma);
    vb += (b[t] - mb) * (b[t] - mb);
  }
  va /= T;
  vb /= T;
  if (!(va > 0) || !(vb > 0)) throw numerical_error("ccf: zero-variance series");
  const double norm = std::sqrt(va * vb);
  std::vector<double> out(static_cast<std::size_t>(max_lag) + 1);
  for (long tau = 0; tau <= max_lag; ++tau) {
    double c = 0.0;
    for (long t = 0; t + tau < T; ++t) c += (a[t] - ma) * (b[t + tau] - mb);
    out[static_cast<std::size_t>(tau)] = c / static_cast<double>(T - tau) / norm;
  }
  return out;
}

inline std::vector<double> acf(std::span<const double> x, long max_lag) { return ccf(x, x, max_lag); }

/// Per-k ACF of X_k and CCF of (X_k, X_{k+1}) with their k-averages.
struct CorrelationSeries {
  std::vector<double> lags;  // MTU
  Matrix acf;                // (max_lag+1) x K
  Matrix ccf;
  Vector acf_avg;
  Vector ccf_avg;
};

/// `x` is a (T x K) trajectory sampled every `dt`; lag is in samples.
inline CorrelationSeries correlations(const Matrix& x, long max_lag, double dt) {
  const auto K = static_cast<int>(x.cols());
  CorrelationSeries c;
  c.acf.resize(max_lag + 1, K);
  c.ccf.resize(max_lag + 1, K);
  for (long l = 0; l <= max_lag; ++l) c.lags.push_back(static_cast<double>(l) * dt);
  std::vector<std::vector<double>> cols(static_cast<std::size_t>(K));
  for (int k = 0; k < K; ++k) {
    cols[static_cast<std::size_t>(k)].resize(static_cast<std::size_t>(x.rows()));
    for (Eigen::Index t = 0; t < x.rows(); ++t) cols[static_cast<std::size_t>(k)][static_cast<std::size_t>(t)] = x(t, k);
  }
  for (int k = 0; k < K; ++k) {
    const auto& a = cols[static_cast<std::size_t>(k)];
    const auto& b = cols[static_cast<std::size_t>((k + 1) % K)];
    const auto ac = acf(a, max_lag);
    const auto cc = ccf(a, b, max_lag);
    for (long l = 0; l <= max_lag; ++l) {
      c.acf(l, k) = ac[static_cast<std::size_t>(l)];
      c.ccf(l, k) = cc[static_cast<std::size_t>(l)];
    }
  }
  c.acf_avg = c.acf.rowwise().mean();
  c.ccf_avg = c.ccf.rowwise().mean();
  return c;
}

/// Mean absolute difference of k-averaged curves over lags <= max_lag_mtu.
inline std::pair<double, double> correlation_deviation(const CorrelationSeries& model,
                                                       const CorrelationSeries& truth, double max_lag_mtu) {
  detail::require(model.lags.size() == truth.lags.size(), "correlation_deviation: lag grids differ");
  double da = 0.0, dc = 0.0;
  int n = 0;
  for (std::size_t l = 0; l < truth.lags.size(); ++l) {
    if (truth.lags[l] > max_lag_mtu + 1e-12) break;
    const auto li = static_cast<Eigen::Index>(l);
    da += std::abs(model.acf_avg[li] - truth.acf_avg[li]);
    dc += std::abs(model.ccf_avg[li] - truth.ccf_avg[li]);
    ++n;
  }
  return {da / n, dc / n};
}

}  // namespace l96

#endif  // L96_METRICS_HPP_
