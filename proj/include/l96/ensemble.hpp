#ifndef L96_ENSEMBLE_HPP_
#define L96_ENSEMBLE_HPP_

#include "l96/closure.hpp"
#include "l96/common.hpp"
#include "l96/dynamics.hpp"
#include "l96/random.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <functional>
#include <mutex>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

namespace l96 {

enum class EnsembleMode { separated, mixed };

inline std::string to_string(EnsembleMode m) { return m == EnsembleMode::separated ? "separated" : "mixed"; }

inline EnsembleMode parse_ensemble_mode(const std::string& s) {
  if (s == "separated") return EnsembleMode::separated;
  if (s == "mixed") return EnsembleMode::mixed;
  throw precondition_error("unknown ensemble mode '" + s + "'");
}

struct EnsembleConfig {
  int n_init = 50;
  int n_ens = 10;
  int n_model = 10;
  double spacing = 20.0;     // MTU between perfect states
  double pert_frac = 0.05;   // perturbation std as a fraction of sigma_clim
  double horizon = 10.0;     // MTU
  double spin_up = 20.0;     // MTU discarded before the first perfect state
  long store_stride = 10;    // reduced steps between stored samples
  EnsembleMode mode = EnsembleMode::separated;
  std::uint64_t seed = 0;

  void validate() const {
    detail::require(n_init >= 1 && n_ens >= 1 && n_model >= 1, "EnsembleConfig: counts must be >= 1");
    detail::require(spacing > 0, "EnsembleConfig: spacing must be positive");
    detail::require(pert_frac >= 0, "EnsembleConfig: pert_frac must be >= 0");
    detail::require(horizon > 0, "EnsembleConfig: horizon must be positive");
    detail::require(store_stride >= 1, "EnsembleConfig: store_stride must be >= 1");
  }

  int members_per_init() const { return mode == EnsembleMode::separated ? n_ens * n_model : n_ens; }
  int m_extent() const { return mode == EnsembleMode::separated ? n_model : 1; }
};

/// Index of a diverged member.
struct MemberFailure {
  int i = 0;
  int j = 0;
  int m = 0;
};

/// Resolved states indexed (i, j, m, t, k), stored contiguously with k fastest.
/// Truth trajectories (if attached) are (t, k) per i on the same time grid.
struct EnsembleCube {
  EnsembleConfig config;
  int K = 0;
  std::vector<double> times;
  std::vector<double> data;
  std::vector<Matrix> truth;
  std::vector<MemberFailure> failures;
  std::vector<char> init_failed;  // i blocks excluded from statistics
  double pert_std = 0.0;
  std::string closure_kind;

  int n_init() const { return config.n_init; }
  int n_ens() const { return config.n_ens; }
  int n_model() const { return config.m_extent(); }
  long n_times() const { return static_cast<long>(times.size()); }
  int members() const { return n_ens() * n_model(); }

  void allocate(const EnsembleConfig& cfg, int k, std::vector<double> t) {
    config = cfg;
    K = k;
    times = std::move(t);
    data.assign(static_cast<std::size_t>(cfg.n_init) * cfg.n_ens * cfg.m_extent() * times.size() * k, 0.0);
    init_failed.assign(static_cast<std::size_t>(cfg.n_init), 0);
  }

  std::size_t index(int i, int j, int m, long t, int k) const {
    return (((static_cast<std::size_t>(i) * n_ens() + j) * n_model() + m) * times.size() + t) * K + k;
  }
  double& at(int i, int j, int m, long t, int k) { return data[index(i, j, m, t, k)]; }
  double at(int i, int j, int m, long t, int k) const { return data[index(i, j, m, t, k)]; }
  const double* state(int i, int j, int m, long t) const { return &data[index(i, j, m, t, 0)]; }

  bool has_truth() const { return truth.size() == static_cast<std::size_t>(n_init()); }
  bool usable(int i) const { return !init_failed[static_cast<std::size_t>(i)]; }
  int n_usable() const {
    return static_cast<int>(std::count(init_failed.begin(), init_failed.end(), 0));
  }
  double failure_fraction() const {
    const double total = static_cast<double>(n_init()) * members();
    return total > 0 ? static_cast<double>(failures.size()) / total : 0.0;
  }
};

// ---------------------------------------------------------------------------
// Worker pool
// ---------------------------------------------------------------------------

inline int resolve_workers(int requested) {
  if (requested > 0) return requested;
  const unsigned hw = std::thread::hardware_concurrency();
  return hw > 0 ? static_cast<int>(hw) : 1;
}

/// Runs fn(0..n-1) on up to `workers` threads. Tasks write disjoint outputs, so
/// results do not depend on scheduling; the lowest-index exception is rethrown.
inline void parallel_for(int n, int workers, const std::function<void(int)>& fn) {
  workers = std::max(1, std::min(resolve_workers(workers), n));
  if (workers == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(n));
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (int i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          errors[static_cast<std::size_t>(i)] = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

// ---------------------------------------------------------------------------
// Initial states
// ---------------------------------------------------------------------------

/// Row indices of the perfect states in `truth`: t_i = t_0 + spin_up + i*spacing.
inline std::vector<long> perfect_state_rows(const Trajectory& truth, int n_init, double spacing,
                                            double spin_up) {
  detail::require(n_init >= 1, "sample_perfect_states: n_init must be >= 1");
  detail::require(spacing > 0 && spin_up >= 0, "sample_perfect_states: invalid spacing/spin-up");
  detail::require(truth.size() >= 1 && truth.dt > 0, "sample_perfect_states: empty trajectory");
  const long step = detail::exact_steps(spacing, truth.dt, "perfect-state spacing");
  const long first = spin_up > 0 ? detail::exact_steps(spin_up, truth.dt, "perfect-state spin-up") : 0;
  const double needed = spin_up + static_cast<double>(n_init - 1) * spacing;
  const double have = truth.times.back() - truth.times.front();
  const long last = first + static_cast<long>(n_init - 1) * step;
  if (last >= static_cast<long>(truth.size())) {
    throw precondition_error(detail::concat("sample_perfect_states: trajectory covers ", have,
                                            " MTU but ", needed, " MTU are required"));
  }
  std::vector<long> rows;
  for (int i = 0; i < n_init; ++i) rows.push_back(first + static_cast<long>(i) * step);
  return rows;
}

inline std::vector<FullState> sample_perfect_states(const Trajectory& truth, int n_init, double spacing,
                                                    double spin_up) {
  detail::require(truth.has_y, "sample_perfect_states: trajectory must carry small-scale states");
  const auto& p = truth.params;
  std::vector<FullState> out;
  for (long r : perfect_state_rows(truth, n_init, spacing, spin_up)) {
    FullState s;
    s.x = truth.states.row(r).head(p.K).transpose();
    s.y = truth.states.row(r).segment(p.K, p.n_small()).transpose();
    out.push_back(std::move(s));
  }
  return out;
}

/// Spin-up followed by a full-model chain that keeps only the perfect states.
inline std::vector<FullState> generate_perfect_states(const L96Params& p, const IntegratorConfig& icfg,
                                                      const EnsembleConfig& cfg) {
  cfg.validate();
  const FullState start = spin_up(p, icfg, derive_seed(cfg.seed, SeedRole::perfect_states), cfg.spin_up);
  if (cfg.n_init == 1) return {start};
  FullRunOptions opt;
  opt.store_y = true;
  opt.stride = detail::exact_steps(cfg.spacing, icfg.dt_out, "perfect-state spacing");
  opt.seed = cfg.seed;
  const Trajectory chain =
      integrate_full(start, p, icfg, static_cast<double>(cfg.n_init - 1) * cfg.spacing, opt);
  return sample_perfect_states(chain, cfg.n_init, cfg.spacing, 0.0);
}

inline Vector perturb(const Vector& state, double pert_std, NoiseStream& noise) {
  detail::require(pert_std >= 0, "perturb: pert_std must be >= 0");
  Vector out = state;
  if (pert_std == 0.0) return out;
  for (Eigen::Index k = 0; k < out.size(); ++k) out[k] += pert_std * noise.normal();
  return out;
}

inline Vector perturbed_state(const EnsembleConfig& cfg, const Vector& x, double pert_std, int i, int j) {
  NoiseStream noise(derive_seed(cfg.seed, SeedRole::perturbation,
                                {static_cast<std::uint64_t>(i), static_cast<std::uint64_t>(j)}));
  return perturb(x, pert_std, noise);
}

// ---------------------------------------------------------------------------
// Runs
// ---------------------------------------------------------------------------

using ClosureFactory = std::function<ClosurePtr()>;

namespace detail {

inline std::vector<double> stored_times(const EnsembleConfig& cfg, const IntegratorConfig& icfg) {
  const long n_steps = exact_steps(cfg.horizon, icfg.dt_reduced, "ensemble horizon");
  std::vector<double> t;
  for (long s = 0; s <= n_steps; s += cfg.store_stride) t.push_back(static_cast<double>(s) * icfg.dt_reduced);
  return t;
}

inline long full_stride(const EnsembleConfig& cfg, const IntegratorConfig& icfg) {
  const double sample_dt = static_cast<double>(cfg.store_stride) * icfg.dt_reduced;
  return exact_steps(sample_dt, icfg.dt_out, "ensemble storage interval");
}

inline std::uint64_t model_seed(const EnsembleConfig& cfg, int i, int j, int m) {
  if (cfg.mode == EnsembleMode::separated) {
    return derive_seed(cfg.seed, SeedRole::model, {static_cast<std::uint64_t>(i), static_cast<std::uint64_t>(m)});
  }
  return derive_seed(cfg.seed, SeedRole::mixed_model,
                     {static_cast<std::uint64_t>(i), static_cast<std::uint64_t>(j)});
}

}  // namespace detail

/// Full-model trajectories from the unperturbed perfect states on the cube time grid.
inline std::vector<Matrix> run_truth(const EnsembleConfig& cfg, const std::vector<FullState>& states,
                                     const L96Params& p, const IntegratorConfig& icfg, int workers = 1) {
  cfg.validate();
  const long stride = detail::full_stride(cfg, icfg);
  std::vector<Matrix> truth(states.size());
  parallel_for(static_cast<int>(states.size()), workers, [&](int i) {
    FullRunOptions opt;
    opt.stride = stride;
    truth[static_cast<std::size_t>(i)] =
        integrate_full(states[static_cast<std::size_t>(i)], p, icfg, cfg.horizon, opt).states;
  });
  return truth;
}

/// Reduced-model ensemble in separated (i, j, m) or mixed (i, j) layout.
///
/// Perturbations depend only on (i, j). In separated mode the closure seed of
/// member (i, j, m) depends on (i, m) alone, so realization m is the same
/// stochastic draw for every perturbation j; in mixed mode every (i, j) gets its
/// own seed from a separate role. Diverged members are recorded and their i
/// block is excluded from statistics.
inline EnsembleCube run_ensemble(const EnsembleConfig& cfg, const ClosureFactory& factory,
                                 const std::vector<FullState>& states, double sigma_clim,
                                 const L96Params& p, const IntegratorConfig& icfg, int workers = 1) {
  cfg.validate();
  detail::require(static_cast<int>(states.size()) >= cfg.n_init, "run_ensemble: not enough perfect states");
  detail::require(sigma_clim >= 0, "run_ensemble: sigma_clim must be >= 0");
  EnsembleCube cube;
  cube.allocate(cfg, p.K, detail::stored_times(cfg, icfg));
  cube.pert_std = cfg.pert_frac * sigma_clim;
  const int n_m = cfg.m_extent();
  const int B = cfg.n_ens * n_m;
  std::mutex mu;

  parallel_for(cfg.n_init, workers, [&](int i) {
    Matrix init(B, p.K);
    std::vector<std::uint64_t> seeds(static_cast<std::size_t>(B));
    for (int j = 0; j < cfg.n_ens; ++j) {
      const Vector x0 = perturbed_state(cfg, states[static_cast<std::size_t>(i)].x, cube.pert_std, i, j);
      for (int m = 0; m < n_m; ++m) {
        const int r = j * n_m + m;
        init.row(r) = x0.transpose();
        seeds[static_cast<std::size_t>(r)] = detail::model_seed(cfg, i, j, m);
      }
    }
    ClosurePtr closure = factory();
    if (i == 0) {
      std::lock_guard<std::mutex> lock(mu);
      cube.closure_kind = closure->kind();
    }
    std::vector<char> failed;
    integrate_reduced_batch(
        init, *closure, seeds, p, icfg, cfg.horizon, cfg.store_stride,
        [&](long idx, double, const Matrix& s, const std::vector<char>&) {
          for (int r = 0; r < B; ++r) {
            const int j = r / n_m;
            const int m = r % n_m;
            for (int k = 0; k < p.K; ++k) cube.at(i, j, m, idx, k) = s(r, k);
          }
        },
        &failed);
    std::vector<MemberFailure> local;
    for (int r = 0; r < B; ++r) {
      if (failed[static_cast<std::size_t>(r)]) local.push_back({i, r / n_m, r % n_m});
    }
    if (!local.empty()) {
      std::lock_guard<std::mutex> lock(mu);
      cube.init_failed[static_cast<std::size_t>(i)] = 1;
      cube.failures.insert(cube.failures.end(), local.begin(), local.end());
    }
  });
  std::sort(cube.failures.begin(), cube.failures.end(), [](const MemberFailure& a, const MemberFailure& b) {
    return std::tie(a.i, a.j, a.m) < std::tie(b.i, b.j, b.m);
  });
  return cube;
}

inline EnsembleCube run_separated(EnsembleConfig cfg, const ClosureFactory& factory,
                                  const std::vector<FullState>& states, double sigma_clim,
                                  const L96Params& p, const IntegratorConfig& icfg, int workers = 1) {
  cfg.mode = EnsembleMode::separated;
  return run_ensemble(cfg, factory, states, sigma_clim, p, icfg, workers);
}

inline EnsembleCube run_mixed(EnsembleConfig cfg, const ClosureFactory& factory,
                              const std::vector<FullState>& states, double sigma_clim,
                              const L96Params& p, const IntegratorConfig& icfg, int workers = 1) {
  cfg.mode = EnsembleMode::mixed;
  return run_ensemble(cfg, factory, states, sigma_clim, p, icfg, workers);
}

/// Full-model ensemble with perturbed X (Y untouched) for the sensitivity
/// experiment; stored as a mixed-layout cube with the unperturbed run as truth.
inline EnsembleCube run_truth_ensemble(EnsembleConfig cfg, const std::vector<FullState>& states,
                                       double sigma_clim, const L96Params& p, const IntegratorConfig& icfg,
                                       int workers = 1) {
  cfg.mode = EnsembleMode::mixed;
  cfg.validate();
  detail::require(static_cast<int>(states.size()) >= cfg.n_init, "run_truth_ensemble: not enough perfect states");
  const long stride = detail::full_stride(cfg, icfg);
  const long rows = sample_count(cfg.horizon, icfg.dt_out, stride);
  std::vector<double> t(static_cast<std::size_t>(rows));
  for (long r = 0; r < rows; ++r) t[static_cast<std::size_t>(r)] = static_cast<double>(r * stride) * icfg.dt_out;
  EnsembleCube cube;
  cube.allocate(cfg, p.K, std::move(t));
  cube.pert_std = cfg.pert_frac * sigma_clim;
  cube.closure_kind = "truth";
  std::mutex mu;
  const int n_tasks = cfg.n_init * (cfg.n_ens + 1);
  std::vector<Matrix> truth(static_cast<std::size_t>(cfg.n_init));
  parallel_for(n_tasks, workers, [&](int task) {
    const int i = task / (cfg.n_ens + 1);
    const int j = task % (cfg.n_ens + 1) - 1;  // -1 is the unperturbed truth run
    FullState s = states[static_cast<std::size_t>(i)];
    if (j >= 0) s.x = perturbed_state(cfg, s.x, cube.pert_std, i, j);
    FullRunOptions opt;
    opt.stride = stride;
    try {
      const Matrix x = integrate_full(s, p, icfg, cfg.horizon, opt).states;
      if (j < 0) {
        truth[static_cast<std::size_t>(i)] = x;
        return;
      }
      for (long r = 0; r < x.rows(); ++r) {
        for (int k = 0; k < p.K; ++k) cube.at(i, j, 0, r, k) = x(r, k);
      }
    } catch (const divergence_error&) {
      std::lock_guard<std::mutex> lock(mu);
      cube.init_failed[static_cast<std::size_t>(i)] = 1;
      cube.failures.push_back({i, std::max(j, 0), 0});
    }
  });
  std::sort(cube.failures.begin(), cube.failures.end(), [](const MemberFailure& a, const MemberFailure& b) {
    return std::tie(a.i, a.j, a.m) < std::tie(b.i, b.j, b.m);
  });
  cube.truth = std::move(truth);
  return cube;
}

}  // namespace l96

#endif  // L96_ENSEMBLE_HPP_
