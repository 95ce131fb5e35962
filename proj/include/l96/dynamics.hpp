#ifndef L96_DYNAMICS_HPP_
#define L96_DYNAMICS_HPP_

#include "l96/closure.hpp"
#include "l96/common.hpp"
#include "l96/random.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <utility>
#include <vector>

namespace l96 {

/// Two-scale Lorenz '96 parameters. Defaults are the standard K=8, J=32 setup.
struct L96Params {
  int K = 8;
  int J = 32;
  double h = 1.0;
  double b = 10.0;
  double c = 10.0;
  double F = 20.0;

  double coupling() const { return h * c / b; }
  int n_small() const { return J * K; }

  void validate() const {
    detail::require(K >= 4, "L96Params: K must be >= 4");
    detail::require(J >= 1, "L96Params: J must be >= 1");
    detail::require(b != 0.0, "L96Params: b must be nonzero");
    detail::require(std::isfinite(h) && std::isfinite(b) && std::isfinite(c) && std::isfinite(F),
                    "L96Params: parameters must be finite");
  }
};

struct FullState {
  Vector x;
  Vector y;
};

struct IntegratorConfig {
  double dt_full = 0.001;
  double dt_out = 0.005;
  double dt_reduced = 0.005;

  void validate() const {
    detail::require(dt_full > 0 && dt_out > 0 && dt_reduced > 0,
                    "IntegratorConfig: time steps must be positive");
    detail::exact_steps(dt_out, dt_full, "IntegratorConfig dt_out");
  }
  long substeps() const { return detail::exact_steps(dt_out, dt_full, "dt_out"); }
};

/// Sampled trajectory. Columns are x0..x{K-1} followed by y0..y{JK-1} when has_y.
struct Trajectory {
  std::vector<double> times;
  Matrix states;
  L96Params params;
  std::uint64_t seed = 0;
  double dt = 0.0;
  bool has_y = false;

  std::size_t size() const { return times.size(); }
  auto x() const { return states.leftCols(params.K); }
};

struct IndexRange {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
};

struct DatasetSplit {
  IndexRange train;
  IndexRange val;
  IndexRange test;
};

/// Time-ordered (X_t, U_t) pairs with contiguous train < val < test splits.
struct TendencyDataset {
  std::vector<double> times;
  Matrix x;
  Matrix u;
  DatasetSplit split;
  double dt = 0.0;

  std::size_t rows() const { return static_cast<std::size_t>(x.rows()); }
  auto x_rows(IndexRange r) const { return x.middleRows(r.begin, r.size()); }
  auto u_rows(IndexRange r) const { return u.middleRows(r.begin, r.size()); }
};

inline constexpr double kBlowUpThreshold = 1e6;

namespace detail {

// dX/dt and dY/dt for the packed state s = [x | y].
inline void full_rhs(const double* s, double* ds, const L96Params& p) {
  const int K = p.K;
  const int J = p.J;
  const int N = p.n_small();
  const double* x = s;
  const double* y = s + K;
  double* dx = ds;
  double* dy = ds + K;
  const double hcb = p.coupling();
  const double cb = p.c * p.b;

  for (int k = 0; k < K; ++k) {
    const int km1 = k == 0 ? K - 1 : k - 1;
    const int km2 = k >= 2 ? k - 2 : k + K - 2;
    const int kp1 = k == K - 1 ? 0 : k + 1;
    double ysum = 0.0;
    for (int j = k * J; j < (k + 1) * J; ++j) ysum += y[j];
    dx[k] = -x[km1] * (x[km2] - x[kp1]) - x[k] + p.F - hcb * ysum;
  }
  // Interior of the small-scale ring without wrap-around indexing.
  auto dy_at = [&](int j, int jm1, int jp1, int jp2) {
    dy[j] = -cb * y[jp1] * (y[jp2] - y[jm1]) - p.c * y[j] + hcb * x[j / J];
  };
  dy_at(0, N - 1, 1, 2 % N);
  for (int j = 1; j < N - 2; ++j) dy_at(j, j - 1, j + 1, j + 2);
  if (N >= 3) dy_at(N - 2, N - 3, N - 1, 0);
  if (N >= 2) dy_at(N - 1, N - 2, 0, 1 % N);
}

// Resolved-only tendency without subgrid coupling: -X_{k-1}(X_{k-2}-X_{k+1}) - X_k + F.
inline void resolved_rhs(const double* x, double* dx, int K, double F) {
  for (int k = 0; k < K; ++k) {
    const int km1 = k == 0 ? K - 1 : k - 1;
    const int km2 = k >= 2 ? k - 2 : k + K - 2;
    const int kp1 = k == K - 1 ? 0 : k + 1;
    dx[k] = -x[km1] * (x[km2] - x[kp1]) - x[k] + F;
  }
}

inline bool state_ok(std::span<const double> s) {
  for (double v : s) {
    if (!(std::abs(v) <= kBlowUpThreshold)) return false;
  }
  return true;
}

inline void check_state(const FullState& s, const L96Params& p) {
  require(s.x.size() == p.K && s.y.size() == p.n_small(),
          concat("FullState: expected lengths ", p.K, "/", p.n_small(), ", got ", s.x.size(),
                 "/", s.y.size()));
  if (!s.x.allFinite() || !s.y.allFinite()) {
    throw invalid_state_error("FullState: non-finite entries");
  }
}

inline std::vector<double> pack(const FullState& s) {
  std::vector<double> v(s.x.size() + s.y.size());
  std::copy(s.x.data(), s.x.data() + s.x.size(), v.begin());
  std::copy(s.y.data(), s.y.data() + s.y.size(), v.begin() + s.x.size());
  return v;
}

inline FullState unpack(std::span<const double> v, const L96Params& p) {
  FullState s;
  s.x = Eigen::Map<const Vector>(v.data(), p.K);
  s.y = Eigen::Map<const Vector>(v.data() + p.K, p.n_small());
  return s;
}

}  // namespace detail

/// Right-hand side of the coupled two-scale system with cyclic boundaries.
inline FullState full_tendency(const FullState& state, const L96Params& p) {
  p.validate();
  detail::check_state(state, p);
  const auto s = detail::pack(state);
  std::vector<double> ds(s.size());
  detail::full_rhs(s.data(), ds.data(), p);
  return detail::unpack(ds, p);
}

/// Classic RK4 on the full system at dt_full, calling
/// `observer(sample_index, time, packed_state)` every `stride` output intervals
/// (sample 0 is the initial state). Returns the final state.
template <typename Observer>
FullState integrate_full_stream(const FullState& init, const L96Params& p,
                                const IntegratorConfig& cfg, double horizon, long stride,
                                Observer&& observer) {
  p.validate();
  cfg.validate();
  detail::check_state(init, p);
  detail::require(horizon > 0, "integrate_full: horizon must be positive");
  detail::require(stride >= 1, "integrate_full: stride must be >= 1");

  const long n_out = detail::exact_steps(horizon, cfg.dt_out, "integrate_full horizon");
  const long sub = cfg.substeps();
  const double dt = cfg.dt_full;
  const std::size_t n = static_cast<std::size_t>(p.K + p.n_small());

  std::vector<double> s = detail::pack(init);
  std::vector<double> k1(n), k2(n), k3(n), k4(n), tmp(n);

  observer(0L, 0.0, std::span<const double>(s));
  for (long o = 1; o <= n_out; ++o) {
    for (long q = 0; q < sub; ++q) {
      detail::full_rhs(s.data(), k1.data(), p);
      for (std::size_t i = 0; i < n; ++i) tmp[i] = s[i] + 0.5 * dt * k1[i];
      detail::full_rhs(tmp.data(), k2.data(), p);
      for (std::size_t i = 0; i < n; ++i) tmp[i] = s[i] + 0.5 * dt * k2[i];
      detail::full_rhs(tmp.data(), k3.data(), p);
      for (std::size_t i = 0; i < n; ++i) tmp[i] = s[i] + dt * k3[i];
      detail::full_rhs(tmp.data(), k4.data(), p);
      for (std::size_t i = 0; i < n; ++i) {
        s[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
      }
    }
    const double t = static_cast<double>(o) * cfg.dt_out;
    if (!detail::state_ok(s)) {
      throw divergence_error(t, detail::concat("full model diverged at t=", t));
    }
    if (o % stride == 0) observer(o / stride, t, std::span<const double>(s));
  }
  return detail::unpack(s, p);
}

/// Number of stored samples for a run of `horizon` sampled every stride*dt_out.
inline long sample_count(double horizon, double dt_out, long stride = 1) {
  return detail::exact_steps(horizon, dt_out, "horizon") / stride + 1;
}

struct FullRunOptions {
  long stride = 1;
  bool store_y = false;
  std::uint64_t seed = 0;  // provenance only
};

inline Trajectory integrate_full(const FullState& init, const L96Params& p,
                                 const IntegratorConfig& cfg, double horizon,
                                 const FullRunOptions& opt = {}) {
  Trajectory traj;
  traj.params = p;
  traj.seed = opt.seed;
  traj.dt = cfg.dt_out * static_cast<double>(opt.stride);
  traj.has_y = opt.store_y;
  const long rows = sample_count(horizon, cfg.dt_out, opt.stride);
  const long cols = opt.store_y ? p.K + p.n_small() : p.K;
  traj.states.resize(rows, cols);
  traj.times.resize(static_cast<std::size_t>(rows));
  integrate_full_stream(init, p, cfg, horizon, opt.stride,
                        [&](long idx, double t, std::span<const double> s) {
                          traj.times[static_cast<std::size_t>(idx)] = t;
                          for (long c = 0; c < cols; ++c) traj.states(idx, c) = s[c];
                        });
  return traj;
}

/// Random start (X ~ N(F/4, 1), Y ~ N(0, 0.1^2)) integrated for `duration` MTU.
inline FullState spin_up(const L96Params& p, const IntegratorConfig& cfg, std::uint64_t seed,
                         double duration) {
  p.validate();
  detail::require(duration > 0, "spin_up: duration must be positive");
  NoiseStream noise(derive_seed(seed, SeedRole::spin_up));
  FullState s;
  s.x.resize(p.K);
  s.y.resize(p.n_small());
  for (int k = 0; k < p.K; ++k) s.x[k] = p.F / 4.0 + noise.normal();
  for (int j = 0; j < p.n_small(); ++j) s.y[j] = 0.1 * noise.normal();
  return integrate_full_stream(s, p, cfg, duration, 1, [](long, double, std::span<const double>) {});
}

/// Heun integration of a batch of reduced models dX/dt = f(X) - U_p(X).
///
/// The closure is evaluated once per step at the start-of-step state and the
/// sampled tendency is held fixed across both stages. Rows of `init` are
/// independent members; `seeds[r]` seeds member r's closure realization.
/// `observer(sample_index, time, states, failed)` sees every `stride`-th step.
/// If `failed` is null the first divergence throws; otherwise diverged members
/// are flagged, their stored rows become NaN, and the run continues.
template <typename Observer>
void integrate_reduced_batch(const Matrix& init, Closure& closure,
                             std::span<const std::uint64_t> seeds, const L96Params& p,
                             const IntegratorConfig& cfg, double horizon, long stride,
                             Observer&& observer, std::vector<char>* failed = nullptr) {
  p.validate();
  detail::require(init.cols() == p.K, "integrate_reduced: closure/state dimension mismatch");
  detail::require(static_cast<std::size_t>(init.rows()) == seeds.size(),
                  "integrate_reduced: one seed per member required");
  detail::require(horizon > 0, "integrate_reduced: horizon must be positive");
  detail::require(stride >= 1, "integrate_reduced: stride must be >= 1");
  if (!init.allFinite()) throw invalid_state_error("integrate_reduced: non-finite initial state");

  const long n_steps = detail::exact_steps(horizon, cfg.dt_reduced, "integrate_reduced horizon");
  const double dt = cfg.dt_reduced;
  const long B = init.rows();
  const int K = p.K;

  std::vector<char> local_failed;
  std::vector<char>& bad = failed ? *failed : local_failed;
  bad.assign(static_cast<std::size_t>(B), 0);

  closure.reset(seeds);
  Matrix x = init;
  Matrix u(B, K), k1(B, K), k2(B, K), x1(B, K), out(B, K);

  auto emit = [&](long step) {
    out = x;
    for (long r = 0; r < B; ++r) {
      if (bad[r]) out.row(r).setConstant(std::numeric_limits<double>::quiet_NaN());
    }
    observer(step / stride, static_cast<double>(step) * dt, std::as_const(out),
             std::as_const(bad));
  };

  emit(0);
  for (long step = 1; step <= n_steps; ++step) {
    const double t0 = static_cast<double>(step - 1) * dt;
    try {
      closure.evaluate(x, u);
    } catch (const std::exception& e) {
      throw numerical_error(detail::concat("closure evaluation failed at t=", t0, ": ", e.what()));
    }
    for (long r = 0; r < B; ++r) {
      detail::resolved_rhs(x.row(r).data(), k1.row(r).data(), K, p.F);
    }
    k1 -= u;
    x1 = x + dt * k1;
    for (long r = 0; r < B; ++r) {
      detail::resolved_rhs(x1.row(r).data(), k2.row(r).data(), K, p.F);
    }
    k2 -= u;
    x += (0.5 * dt) * (k1 + k2);

    const double t = static_cast<double>(step) * dt;
    for (long r = 0; r < B; ++r) {
      if (bad[r]) {
        x.row(r).setZero();
        continue;
      }
      if (!detail::state_ok(std::span<const double>(x.row(r).data(), K))) {
        if (!failed) {
          throw divergence_error(t, detail::concat("reduced model member ", r,
                                                   " diverged at t=", t));
        }
        bad[r] = 1;
        x.row(r).setZero();
      }
    }
    if (step % stride == 0) emit(step);
  }
}

/// Single reduced-model trajectory with closure realization seeded by `seed`.
inline Trajectory integrate_reduced(const Vector& init, Closure& closure, std::uint64_t seed,
                                    const L96Params& p, const IntegratorConfig& cfg,
                                    double horizon, long stride = 1) {
  Trajectory traj;
  traj.params = p;
  traj.seed = seed;
  traj.dt = cfg.dt_reduced * static_cast<double>(stride);
  const long rows = sample_count(horizon, cfg.dt_reduced, stride);
  traj.states.resize(rows, p.K);
  traj.times.resize(static_cast<std::size_t>(rows));
  Matrix x0 = init.transpose();
  const std::uint64_t seeds[1] = {seed};
  integrate_reduced_batch(x0, closure, seeds, p, cfg, horizon, stride,
                          [&](long idx, double t, const Matrix& s, const std::vector<char>&) {
                            traj.times[static_cast<std::size_t>(idx)] = t;
                            traj.states.row(idx) = s.row(0);
                          });
  return traj;
}

/// Forward-difference diagnosis U(t) = f(X(t)) - (X(t+dt) - X(t))/dt.
/// Returns T-1 rows; the split is left empty (everything in `train`).
inline TendencyDataset diagnose_subgrid_tendency(const Trajectory& traj, const L96Params& p,
                                                 double dt) {
  const auto T = static_cast<long>(traj.size());
  detail::require(T >= 2, "diagnose_subgrid_tendency: need at least 2 samples");
  for (long t = 1; t < T; ++t) {
    const double step = traj.times[t] - traj.times[t - 1];
    if (std::abs(step - dt) > 1e-9 * std::max(1.0, dt)) {
      throw precondition_error(detail::concat("diagnose_subgrid_tendency: non-uniform spacing at row ",
                                              t, " (", step, " vs ", dt, ")"));
    }
  }
  const int K = p.K;
  TendencyDataset ds;
  ds.dt = dt;
  ds.x.resize(T - 1, K);
  ds.u.resize(T - 1, K);
  ds.times.assign(traj.times.begin(), traj.times.end() - 1);
  std::vector<double> f(K);
  for (long t = 0; t + 1 < T; ++t) {
    const Vector xt = traj.states.row(t).head(K).transpose();
    detail::resolved_rhs(xt.data(), f.data(), K, p.F);
    for (int k = 0; k < K; ++k) {
      ds.x(t, k) = xt[k];
      ds.u(t, k) = f[k] - (traj.states(t + 1, k) - xt[k]) / dt;
    }
  }
  ds.split.train = {0, static_cast<std::size_t>(T - 1)};
  ds.split.val = {ds.split.train.end, ds.split.train.end};
  ds.split.test = {ds.split.train.end, ds.split.train.end};
  return ds;
}

struct DatasetSpec {
  double spin_up = 20.0;
  long n_steps = 20000;
  long n_train = 3000;
  long n_val = 2000;
};

/// Spin-up, `n_steps` output samples of the full model, diagnosis, then the
/// train/val/test split. The forward difference loses one row from the test tail.
inline TendencyDataset build_training_dataset(const L96Params& p, const IntegratorConfig& cfg,
                                              std::uint64_t seed, const DatasetSpec& spec = {}) {
  detail::require(spec.n_steps >= spec.n_train + spec.n_val + 2,
                  "build_training_dataset: n_steps too small for the requested split");
  const FullState start = spin_up(p, cfg, seed, spec.spin_up);
  const double horizon = static_cast<double>(spec.n_steps - 1) * cfg.dt_out;
  FullRunOptions opt;
  opt.seed = seed;
  const Trajectory traj = integrate_full(start, p, cfg, horizon, opt);
  TendencyDataset ds = diagnose_subgrid_tendency(traj, p, cfg.dt_out);
  const auto n_train = static_cast<std::size_t>(spec.n_train);
  const auto n_val = static_cast<std::size_t>(spec.n_val);
  ds.split.train = {0, n_train};
  ds.split.val = {n_train, n_train + n_val};
  ds.split.test = {n_train + n_val, ds.rows()};
  return ds;
}

}  // namespace l96

#endif  // L96_DYNAMICS_HPP_
