#ifndef L96_UNCERTAINTY_HPP_
#define L96_UNCERTAINTY_HPP_

// Climatology, internal variability and the two-way ANOVA split of ensemble
// variance into perturbation (j), model-realization (m) and interaction parts.
// All within-ensemble variances are population (divide-by-N) variances, which
// keeps the split exact: v_total = v_ens + v_model + interaction.

#include "l96/common.hpp"
#include "l96/dynamics.hpp"
#include "l96/ensemble.hpp"
#include "l96/random.hpp"

#include <cmath>
#include <limits>
#include <string>
#include <vector>

namespace l96 {

struct ClimatologyStats {
  double sigma_clim = 0.0;
  double mean_clim = 0.0;
  Vector k_mean;
  Vector k_std;
  long count = 0;
  int n_runs = 0;
  bool degenerate = false;
  std::string source;
};

/// Pooled mean/std over (run, t, k) of resolved-state samples (rows = time).
inline ClimatologyStats climatology(const std::vector<Matrix>& runs, std::string source = {}) {
  detail::require(!runs.empty(), "climatology: no runs");
  const Eigen::Index K = runs.front().cols();
  ClimatologyStats s;
  s.source = std::move(source);
  s.n_runs = static_cast<int>(runs.size());
  Vector sum = Vector::Zero(K);
  long rows = 0;
  for (const auto& r : runs) {
    detail::require(r.cols() == K, "climatology: runs differ in K");
    sum += r.colwise().sum().transpose();
    rows += r.rows();
  }
  detail::require(rows > 0, "climatology: runs are empty");
  s.k_mean = sum / static_cast<double>(rows);
  s.mean_clim = s.k_mean.mean();
  Vector ss_k = Vector::Zero(K);
  double ss = 0.0;
  for (const auto& r : runs) {
    ss_k += (r.rowwise() - s.k_mean.transpose()).array().square().colwise().sum().matrix().transpose();
    ss += (r.array() - s.mean_clim).square().sum();
  }
  s.k_std = (ss_k / static_cast<double>(rows)).array().sqrt();
  s.count = rows * K;
  s.sigma_clim = std::sqrt(ss / static_cast<double>(s.count));
  s.degenerate = !(s.sigma_clim > 0);
  return s;
}

/// Independent full-model runs for the climatology: each run r gets its own
/// spin-up from a seed derived from (seed, r); only X is kept.
inline std::vector<Matrix> truth_climatology_runs(const L96Params& p, const IntegratorConfig& icfg,
                                                  std::uint64_t seed, int n_runs, double duration,
                                                  double spin, int workers = 1) {
  detail::require(n_runs >= 1, "truth_climatology_runs: n_runs must be >= 1");
  std::vector<Matrix> runs(static_cast<std::size_t>(n_runs));
  parallel_for(n_runs, workers, [&](int r) {
    const FullState s0 =
        spin_up(p, icfg, derive_seed(seed, SeedRole::climatology, {static_cast<std::uint64_t>(r)}), spin);
    runs[static_cast<std::size_t>(r)] = integrate_full(s0, p, icfg, duration).states;
  });
  return runs;
}

/// Reduced-model climatology runs started from full-model spin-up states.
/// The first `discard` MTU of each run are dropped so the reduced model can
/// relax onto its own attractor. Runs are batched per worker.
inline std::vector<Matrix> reduced_climatology_runs(const ClosureFactory& factory, const L96Params& p,
                                                    const IntegratorConfig& icfg, std::uint64_t seed,
                                                    int n_runs, double duration, double discard, double spin,
                                                    int workers = 1, std::vector<char>* failed = nullptr) {
  detail::require(n_runs >= 1, "reduced_climatology_runs: n_runs must be >= 1");
  detail::require(discard >= 0, "reduced_climatology_runs: discard must be >= 0");
  const long skip = discard > 0 ? detail::exact_steps(discard, icfg.dt_reduced, "climatology discard") : 0;
  const double total = discard + duration;
  const long rows = sample_count(duration, icfg.dt_reduced);
  std::vector<Matrix> runs(static_cast<std::size_t>(n_runs), Matrix(rows, p.K));
  std::vector<char> bad(static_cast<std::size_t>(n_runs), 0);
  Matrix init(n_runs, p.K);
  for (int r = 0; r < n_runs; ++r) {
    init.row(r) = spin_up(p, icfg, derive_seed(seed, SeedRole::climatology, {static_cast<std::uint64_t>(r)}), spin)
                      .x.transpose();
  }
  const int n_workers = std::max(1, std::min(resolve_workers(workers), n_runs));
  parallel_for(n_workers, n_workers, [&](int w) {
    const int lo = w * n_runs / n_workers;
    const int hi = (w + 1) * n_runs / n_workers;
    if (hi <= lo) return;
    std::vector<std::uint64_t> seeds;
    for (int r = lo; r < hi; ++r) {
      seeds.push_back(derive_seed(seed, SeedRole::climatology, {static_cast<std::uint64_t>(r), 1}));
    }
    ClosurePtr closure = factory();
    std::vector<char> f;
    const Matrix block = init.middleRows(lo, hi - lo);
    integrate_reduced_batch(
        block, *closure, seeds, p, icfg, total, 1,
        [&](long idx, double, const Matrix& s, const std::vector<char>&) {
          if (idx < skip) return;
          for (int r = lo; r < hi; ++r) runs[static_cast<std::size_t>(r)].row(idx - skip) = s.row(r - lo);
        },
        &f);
    for (int r = lo; r < hi; ++r) bad[static_cast<std::size_t>(r)] = f[static_cast<std::size_t>(r - lo)];
  });
  if (failed) {
    *failed = bad;
  } else {
    for (int r = 0; r < n_runs; ++r) {
      if (bad[static_cast<std::size_t>(r)]) {
        throw divergence_error(total, detail::concat("reduced climatology run ", r, " diverged"));
      }
    }
  }
  std::vector<Matrix> kept;
  for (int r = 0; r < n_runs; ++r) {
    if (!bad[static_cast<std::size_t>(r)]) kept.push_back(std::move(runs[static_cast<std::size_t>(r)]));
  }
  return kept;
}

/// Spread across initial states i at each (t, k), unbiased (N-1) variance.
struct InternalVariability {
  std::vector<double> times;
  Matrix var;   // T x K
  Matrix sd;
  Vector var_avg;
  Vector sd_avg;
};

inline InternalVariability internal_variability(const std::vector<Matrix>& runs, std::vector<double> times = {}) {
  detail::require(runs.size() >= 2, "internal_variability: need n_init >= 2");
  const Eigen::Index T = runs.front().rows();
  const Eigen::Index K = runs.front().cols();
  for (const auto& r : runs) {
    detail::require(r.rows() == T && r.cols() == K, "internal_variability: runs must share the time grid");
  }
  const double n = static_cast<double>(runs.size());
  Matrix mean = Matrix::Zero(T, K);
  for (const auto& r : runs) mean += r;
  mean /= n;
  InternalVariability iv;
  iv.times = std::move(times);
  iv.var = Matrix::Zero(T, K);
  for (const auto& r : runs) iv.var.array() += (r - mean).array().square();
  iv.var /= (n - 1.0);
  iv.sd = iv.var.array().sqrt();
  iv.var_avg = iv.var.rowwise().mean();
  iv.sd_avg = iv.var_avg.array().sqrt();
  return iv;
}

/// One member per initial state (j = m = 0) from a cube, as (t, k) matrices.
inline std::vector<Matrix> cube_member_runs(const EnsembleCube& cube, int j = 0, int m = 0) {
  std::vector<Matrix> out;
  for (int i = 0; i < cube.n_init(); ++i) {
    if (!cube.usable(i)) continue;
    Matrix x(cube.n_times(), cube.K);
    for (long t = 0; t < cube.n_times(); ++t) {
      for (int k = 0; k < cube.K; ++k) x(t, k) = cube.at(i, j, m, t, k);
    }
    out.push_back(std::move(x));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Variance decomposition
// ---------------------------------------------------------------------------

struct VarianceDecomposition {
  std::vector<double> times;
  Matrix v_total, v_ens, v_model, interaction;  // T x K, averaged over i
  Vector v_total_avg, v_ens_avg, v_model_avg, interaction_avg;
  double slope = std::numeric_limits<double>::quiet_NaN();
  int n_used = 0;

  Matrix sd_total() const { return v_total.array().sqrt(); }
  Matrix sd_ens() const { return v_ens.array().sqrt(); }
  Matrix sd_model() const { return v_model.array().sqrt(); }
  Vector sd_total_avg() const { return v_total_avg.array().sqrt(); }
  Vector sd_ens_avg() const { return v_ens_avg.array().sqrt(); }
  Vector sd_model_avg() const { return v_model_avg.array().sqrt(); }
};

/// Index of time `t` on the grid, or -1.
inline long time_index(const std::vector<double>& times, double t) {
  for (std::size_t r = 0; r < times.size(); ++r) {
    if (std::abs(times[r] - t) <= 1e-9 * std::max(1.0, std::abs(t))) return static_cast<long>(r);
  }
  return -1;
}

/// (sd(t1) - sd(t0)) / (t1 - t0); NaN if either time is off the grid.
inline double early_growth_slope(const std::vector<double>& times, const Vector& sd, double t0 = 0.0,
                                 double t1 = 2.0) {
  const long a = time_index(times, t0);
  const long b = time_index(times, t1);
  if (a < 0 || b < 0) return std::numeric_limits<double>::quiet_NaN();
  return (sd[b] - sd[a]) / (t1 - t0);
}

namespace detail {

/// Population variance as the mean squared half-difference over pairs.
inline double pairwise_variance(const std::vector<double>& v) {
  const auto n = v.size();
  double s = 0.0;
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = a + 1; b < n; ++b) s += (v[a] - v[b]) * (v[a] - v[b]);
  }
  return s / (static_cast<double>(n) * static_cast<double>(n));
}

}  // namespace detail

inline VarianceDecomposition decompose(const EnsembleCube& cube) {
  if (cube.config.mode != EnsembleMode::separated) {
    throw precondition_error("decompose: perturbation and model spread cannot be disentangled in a mixed ensemble");
  }
  const int J = cube.n_ens();
  const int M = cube.n_model();
  detail::require(J >= 2 && M >= 2, "decompose: need n_ens >= 2 and n_model >= 2");
  const long T = cube.n_times();
  const int K = cube.K;
  VarianceDecomposition d;
  d.times = cube.times;
  d.v_total = Matrix::Zero(T, K);
  d.v_ens = Matrix::Zero(T, K);
  d.v_model = Matrix::Zero(T, K);
  d.interaction = Matrix::Zero(T, K);
  d.n_used = cube.n_usable();
  detail::require(d.n_used >= 1, "decompose: every initial state has failed members");

  std::vector<double> jmean(static_cast<std::size_t>(J));
  std::vector<double> mmean(static_cast<std::size_t>(M));
  for (int i = 0; i < cube.n_init(); ++i) {
    if (!cube.usable(i)) continue;
    for (long t = 0; t < T; ++t) {
      for (int k = 0; k < K; ++k) {
        double mu = 0.0;
        std::fill(jmean.begin(), jmean.end(), 0.0);
        std::fill(mmean.begin(), mmean.end(), 0.0);
        for (int j = 0; j < J; ++j) {
          for (int m = 0; m < M; ++m) {
            const double x = cube.at(i, j, m, t, k);
            jmean[static_cast<std::size_t>(j)] += x;
            mmean[static_cast<std::size_t>(m)] += x;
          }
        }
        for (auto& v : jmean) {
          mu += v;
          v /= M;
        }
        mu /= static_cast<double>(J) * M;
        for (auto& v : mmean) v /= J;
        double vt = 0.0;
        for (int j = 0; j < J; ++j) {
          for (int m = 0; m < M; ++m) {
            const double e = cube.at(i, j, m, t, k) - mu;
            vt += e * e;
          }
        }
        vt /= static_cast<double>(J) * M;
        // Pairwise-difference forms: identical members give exact zeros.
        const double ve = detail::pairwise_variance(jmean);
        const double vm = detail::pairwise_variance(mmean);
        double vi = 0.0;
        for (int j = 0; j < J; ++j) {
          for (int jj = j + 1; jj < J; ++jj) {
            for (int m = 0; m < M; ++m) {
              const double a = cube.at(i, j, m, t, k) - cube.at(i, jj, m, t, k);
              for (int mm = m + 1; mm < M; ++mm) {
                const double dd = a - (cube.at(i, j, mm, t, k) - cube.at(i, jj, mm, t, k));
                vi += dd * dd;
              }
            }
          }
        }
        vi /= static_cast<double>(J) * J * M * M;
        d.v_total(t, k) += vt;
        d.v_ens(t, k) += ve;
        d.v_model(t, k) += vm;
        d.interaction(t, k) += vi;
      }
    }
  }
  const double n = static_cast<double>(d.n_used);
  d.v_total /= n;
  d.v_ens /= n;
  d.v_model /= n;
  d.interaction /= n;
  d.v_total_avg = d.v_total.rowwise().mean();
  d.v_ens_avg = d.v_ens.rowwise().mean();
  d.v_model_avg = d.v_model.rowwise().mean();
  d.interaction_avg = d.interaction.rowwise().mean();
  d.slope = early_growth_slope(d.times, d.sd_total_avg());
  return d;
}

/// Total spread over the single ensemble index of a mixed cube, and the
/// ensemble mean averaged over initial states.
struct MixedSpread {
  std::vector<double> times;
  Matrix v_total;  // T x K
  Matrix mean;     // T x K
  Vector v_total_avg;
  Vector mean_avg;
  Vector sd_total_avg() const { return v_total_avg.array().sqrt(); }
};

/// Population variance over all members of each i block, averaged over i.
/// Works for either layout; in separated mode members are the (j, m) pairs.
inline MixedSpread total_spread(const EnsembleCube& cube) {
  const int J = cube.n_ens();
  const int M = cube.n_model();
  const long T = cube.n_times();
  const int K = cube.K;
  detail::require(J * M >= 2, "total_spread: need at least 2 members");
  MixedSpread s;
  s.times = cube.times;
  s.v_total = Matrix::Zero(T, K);
  s.mean = Matrix::Zero(T, K);
  const int used = cube.n_usable();
  detail::require(used >= 1, "total_spread: every initial state has failed members");
  const double n = static_cast<double>(J) * M;
  for (int i = 0; i < cube.n_init(); ++i) {
    if (!cube.usable(i)) continue;
    for (long t = 0; t < T; ++t) {
      for (int k = 0; k < K; ++k) {
        double mu = 0.0;
        for (int j = 0; j < J; ++j)
          for (int m = 0; m < M; ++m) mu += cube.at(i, j, m, t, k);
        mu /= n;
        double v = 0.0;
        for (int j = 0; j < J; ++j)
          for (int m = 0; m < M; ++m) v += (cube.at(i, j, m, t, k) - mu) * (cube.at(i, j, m, t, k) - mu);
        s.v_total(t, k) += v / n;
        s.mean(t, k) += mu;
      }
    }
  }
  s.v_total /= used;
  s.mean /= used;
  s.v_total_avg = s.v_total.rowwise().mean();
  s.mean_avg = s.mean.rowwise().mean();
  return s;
}

inline MixedSpread mixed_total_spread(const EnsembleCube& cube) {
  detail::require(cube.config.mode == EnsembleMode::mixed, "mixed_total_spread: cube is not mixed");
  detail::require(cube.n_ens() >= 2, "mixed_total_spread: need n_ens >= 2");
  return total_spread(cube);
}

}  // namespace l96

#endif  // L96_UNCERTAINTY_HPP_
