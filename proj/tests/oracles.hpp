#ifndef L96_TESTS_ORACLES_HPP_
#define L96_TESTS_ORACLES_HPP_

// Independent reference computations shared by the unit tests and the
// acceptance runner.

#include "l96/closures.hpp"
#include "l96/flows.hpp"
#include "l96/uncertainty.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace l96::oracle {

using Eigen::MatrixXd;
using Eigen::VectorXd;

/// A flow with every parameter jittered so no layer is the identity.
inline FlowModel random_flow(FlowConfig cfg, std::uint64_t seed, double jitter = 0.05) {
  FlowModel m(cfg, seed);
  NoiseStream noise(derive_seed(seed, SeedRole::test, {1}));
  for (Eigen::Index i = 0; i < m.theta.size(); ++i) m.theta[i] += jitter * noise.normal();
  m.scale.x_mean = VectorXd::Constant(cfg.dim, 2.0);
  m.scale.x_std = VectorXd::Constant(cfg.dim, 3.0);
  m.scale.u_mean = VectorXd::Constant(cfg.dim, -1.0);
  m.scale.u_std = VectorXd::Constant(cfg.dim, 1.5);
  return m;
}

inline MatrixXd gaussian(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed, double scale = 1.0) {
  NoiseStream noise(seed);
  MatrixXd a(rows, cols);
  for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = scale * noise.normal();
  return a;
}

inline double max_abs(const MatrixXd& a) { return a.cwiseAbs().maxCoeff(); }

/// Largest round-trip error through every coupling layer and the coupling stack.
inline double coupling_roundtrip_error(const FlowModel& m, const MatrixXd& z, const MatrixXd& cond) {
  double err = 0.0;
  for (int l = 0; l < m.config.n_coupling; ++l) {
    auto [u, ld] = coupling_forward(m, l, z, cond);
    auto [back, ld_inv] = coupling_inverse(m, l, u, cond);
    err = std::max(err, max_abs(back - z));
    err = std::max(err, (ld + ld_inv).cwiseAbs().maxCoeff());
  }
  auto [y, ld] = core_forward(m, z, cond);
  auto [back, ld_inv] = core_inverse(m, y, cond);
  err = std::max(err, max_abs(back - z));
  return std::max(err, (ld + ld_inv).cwiseAbs().maxCoeff());
}

/// Round trip through the whole flow, tail included, in standardized units.
inline double flow_roundtrip_error(const FlowModel& m, const MatrixXd& z, const MatrixXd& cond) {
  auto [u, ld] = flow_forward_std(m, z, cond);
  auto [back, ld_inv] = flow_inverse_std(m, u, cond);
  return std::max(max_abs(back - z), (ld + ld_inv).cwiseAbs().maxCoeff());
}

inline double tail_roundtrip_error(const TailParams& p, const MatrixXd& y) {
  auto [u, ld] = tail_transform(p, y);
  auto [back, ld_inv] = tail_inverse(p, u);
  return std::max(max_abs(back - y), (ld + ld_inv).cwiseAbs().maxCoeff());
}

/// |analytic log-det - log|det J|| with J by central differences, 2-D flows.
inline double logdet_vs_jacobian(const FlowModel& m, const MatrixXd& z, const MatrixXd& cond, double h = 1e-5) {
  double worst = 0.0;
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    const MatrixXd zr = z.row(r);
    const MatrixXd cr = cond.row(r);
    Eigen::Matrix2d J;
    for (int c = 0; c < 2; ++c) {
      MatrixXd zp = zr, zm = zr;
      zp(0, c) += h;
      zm(0, c) -= h;
      const MatrixXd diff = (flow_forward_std(m, zp, cr).first - flow_forward_std(m, zm, cr).first) / (2 * h);
      J.col(c) = diff.row(0).transpose();
    }
    const double analytic = flow_forward_std(m, zr, cr).second[0];
    worst = std::max(worst, std::abs(analytic - std::log(std::abs(J.determinant()))));
  }
  return worst;
}

/// Norm-wise relative error of the analytic NLL gradient against central
/// differences on `n_check` parameters (always including tail and AR(1) blocks).
inline double gradient_rel_error(const FlowModel& m, const MatrixXd& u, const MatrixXd& c,
                                 std::span<const Segment> segs, int n_check, std::uint64_t seed,
                                 double h = 1e-5) {
  VectorXd g = VectorXd::Zero(m.n_params());
  nll_and_grad(m, u, c, &g, segs);
  std::vector<Eigen::Index> idx;
  for (Eigen::Index i = m.tail_offset(); i < m.n_params(); ++i) idx.push_back(i);
  NoiseStream noise(seed);
  std::uniform_int_distribution<Eigen::Index> pick(0, m.tail_offset() - 1);
  for (int i = 0; i < n_check; ++i) idx.push_back(pick(noise.engine()));
  double num = 0.0, den = 0.0;
  FlowModel w = m;
  const double f0 = nll_and_grad(m, u, c, nullptr, segs);
  for (auto i : idx) {
    const double t0 = w.theta[i];
    double fd = 0.0;
    // A ReLU kink inside [t0 - h, t0 + h] shows up as disagreeing one-sided
    // slopes; shrink the step until they agree.
    for (double step = h; step >= h * 1e-3; step /= 10) {
      w.theta[i] = t0 + step;
      const double fp = nll_and_grad(w, u, c, nullptr, segs);
      w.theta[i] = t0 - step;
      const double fm = nll_and_grad(w, u, c, nullptr, segs);
      w.theta[i] = t0;
      fd = (fp - fm) / (2 * step);
      const double fwd = (fp - f0) / step, bwd = (f0 - fm) / step;
      if (std::abs(fwd - bwd) <= 1e-3 * std::max(1.0, std::abs(fd))) break;
    }
    num += (g[i] - fd) * (g[i] - fd);
    den += fd * fd;
  }
  return std::sqrt(num / std::max(den, 1e-300));
}

/// Trapezoidal integral of the model density over a square box, 2-D flows.
inline double density_mass_2d(const FlowModel& m, const VectorXd& cond, double lo, double hi, int n) {
  const double h = (hi - lo) / n;
  MatrixXd u((n + 1) * (n + 1), 2);
  for (int a = 0; a <= n; ++a) {
    for (int b = 0; b <= n; ++b) {
      u(a * (n + 1) + b, 0) = lo + a * h;
      u(a * (n + 1) + b, 1) = lo + b * h;
    }
  }
  const MatrixXd c = cond.transpose().replicate(u.rows(), 1);
  const VectorXd lp = log_prob(m, u, c);
  double s = 0.0;
  for (int a = 0; a <= n; ++a) {
    for (int b = 0; b <= n; ++b) {
      const double w = (a == 0 || a == n ? 0.5 : 1.0) * (b == 0 || b == n ? 0.5 : 1.0);
      s += w * std::exp(lp[a * (n + 1) + b]);
    }
  }
  return s * h * h;
}

/// |sequence log-likelihood at rho = 0, sigma = 1 - sum of iid log-likelihoods|.
inline double sequence_vs_iid(const FlowModel& m, const MatrixXd& u, const MatrixXd& c) {
  const Eigen::Index K = m.config.dim;
  const double seq = sequence_log_prob(m, u, c, VectorXd::Zero(K), VectorXd::Ones(K));
  return std::abs(seq - log_prob(m, u, c).sum());
}

// ---------------------------------------------------------------------------
// Estimators
// ---------------------------------------------------------------------------

inline std::vector<double> simulate_ar1(double rho, double sigma_e, long T, std::uint64_t seed) {
  NoiseStream noise(seed);
  std::vector<double> e(static_cast<std::size_t>(T));
  double prev = sigma_e * noise.normal();
  const double innov = sigma_e * std::sqrt(1 - rho * rho);
  for (auto& v : e) {
    v = prev;
    prev = rho * prev + innov * noise.normal();
  }
  return e;
}

struct MetropolisResult {
  Eigen::Vector4d mean;
  Eigen::Vector4d std_error;  // batch-means Monte Carlo standard error
  double acceptance = 0.0;
};

/// Random-walk Metropolis on (beta, log sigma^2) under the NIG prior and a
/// Gaussian likelihood, written directly from the model definition.
inline MetropolisResult metropolis_cubic(std::span<const double> x, std::span<const double> u,
                                         const NigPrior& prior, long n_iter, long burn, std::uint64_t seed) {
  const auto n = static_cast<Eigen::Index>(x.size());
  Eigen::MatrixXd A(n, 4);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double v = x[static_cast<std::size_t>(i)];
    A.row(i) << v * v * v, v * v, v, 1.0;
  }
  const Eigen::Map<const Eigen::VectorXd> y(u.data(), n);
  const Eigen::Matrix4d V0inv = prior.cov_scale.inverse();
  auto log_target = [&](const Eigen::Vector4d& b, double log_s2) {
    const double s2 = std::exp(log_s2);
    const double ll = -0.5 * n * std::log(s2) - 0.5 * (y - A * b).squaredNorm() / s2;
    const Eigen::Vector4d d = b - prior.mean;
    const double lp_beta = -2.0 * std::log(s2) - 0.5 * d.dot(V0inv * d) / s2;
    const double lp_s2 = -(prior.shape + 1.0) * std::log(s2) - prior.rate / s2;
    return ll + lp_beta + lp_s2 + log_s2;  // last term: Jacobian of s2 = exp(log_s2)
  };
  // Proposal shaped by the least-squares covariance.
  const Eigen::Vector4d b_ls = A.colPivHouseholderQr().solve(y);
  const double s2_ls = (y - A * b_ls).squaredNorm() / static_cast<double>(n - 4);
  const Eigen::Matrix4d cov = s2_ls * (A.transpose() * A).inverse();
  const Eigen::Matrix4d L = cov.llt().matrixL();
  const double step = 2.38 / std::sqrt(5.0);
  const double step_s = step * std::sqrt(2.0 / static_cast<double>(n));

  NoiseStream noise(seed);
  Eigen::Vector4d b = b_ls;
  double ls = std::log(s2_ls);
  double cur = log_target(b, ls);
  std::vector<Eigen::Vector4d> draws;
  draws.reserve(static_cast<std::size_t>(n_iter - burn));
  long accepted = 0;
  for (long it = 0; it < n_iter; ++it) {
    Eigen::Vector4d z;
    for (int d = 0; d < 4; ++d) z[d] = noise.normal();
    const Eigen::Vector4d bp = b + step * (L * z);
    const double lp = ls + step_s * noise.normal();
    const double prop = log_target(bp, lp);
    if (std::log(noise.uniform()) < prop - cur) {
      b = bp;
      ls = lp;
      cur = prop;
      ++accepted;
    }
    if (it >= burn) draws.push_back(b);
  }
  MetropolisResult r;
  r.acceptance = static_cast<double>(accepted) / static_cast<double>(n_iter);
  r.mean.setZero();
  for (const auto& d : draws) r.mean += d;
  r.mean /= static_cast<double>(draws.size());
  const int n_batches = 50;
  const std::size_t bs = draws.size() / n_batches;
  Eigen::Vector4d ss = Eigen::Vector4d::Zero();
  for (int k = 0; k < n_batches; ++k) {
    Eigen::Vector4d bm = Eigen::Vector4d::Zero();
    for (std::size_t i = k * bs; i < (k + 1) * bs; ++i) bm += draws[i];
    bm /= static_cast<double>(bs);
    ss += (bm - r.mean).cwiseAbs2();
  }
  r.std_error = (ss / (n_batches - 1.0) / n_batches).cwiseSqrt();
  return r;
}

// ---------------------------------------------------------------------------
// Ensembles
// ---------------------------------------------------------------------------

inline EnsembleCube synthetic_cube(int n_init, int J, int M, int T, int K, std::uint64_t seed,
                                   EnsembleMode mode = EnsembleMode::separated) {
  EnsembleConfig cfg;
  cfg.n_init = n_init;
  cfg.n_ens = J;
  cfg.n_model = M;
  cfg.mode = mode;
  std::vector<double> times;
  for (int t = 0; t < T; ++t) times.push_back(0.05 * t);
  EnsembleCube cube;
  cube.allocate(cfg, K, times);
  NoiseStream noise(seed);
  // Mixture of a j effect, an m effect, an interaction and an offset.
  for (int i = 0; i < n_init; ++i) {
    for (int j = 0; j < J; ++j) {
      for (int m = 0; m < cube.n_model(); ++m) {
        for (int t = 0; t < T; ++t) {
          for (int k = 0; k < K; ++k) cube.at(i, j, m, t, k) = 5.0 * noise.uniform() + noise.normal() * (1 + j + m);
        }
      }
    }
  }
  return cube;
}

/// Brute-force population-variance decomposition at (t, k), averaged over i.
/// The interaction is the explicit two-way residual variance, not a difference.
struct BruteDecomposition {
  double total = 0, ens = 0, model = 0, inter = 0;
};

inline BruteDecomposition brute_decompose(const EnsembleCube& c, long t, int k) {
  const int J = c.n_ens(), M = c.n_model();
  BruteDecomposition out;
  int used = 0;
  for (int i = 0; i < c.n_init(); ++i) {
    if (!c.usable(i)) continue;
    ++used;
    double mu = 0;
    for (int j = 0; j < J; ++j)
      for (int m = 0; m < M; ++m) mu += c.at(i, j, m, t, k);
    mu /= J * M;
    std::vector<double> jm(static_cast<std::size_t>(J), 0.0), mm(static_cast<std::size_t>(M), 0.0);
    for (int j = 0; j < J; ++j)
      for (int m = 0; m < M; ++m) {
        jm[j] += c.at(i, j, m, t, k) / M;
        mm[m] += c.at(i, j, m, t, k) / J;
      }
    double vt = 0, ve = 0, vm = 0, vi = 0;
    for (int j = 0; j < J; ++j)
      for (int m = 0; m < M; ++m) {
        const double x = c.at(i, j, m, t, k);
        vt += std::pow(x - mu, 2);
        vi += std::pow(x - jm[j] - mm[m] + mu, 2);
      }
    for (int j = 0; j < J; ++j) ve += std::pow(jm[j] - mu, 2);
    for (int m = 0; m < M; ++m) vm += std::pow(mm[m] - mu, 2);
    out.total += vt / (J * M);
    out.ens += ve / J;
    out.model += vm / M;
    out.inter += vi / (J * M);
  }
  out.total /= used;
  out.ens /= used;
  out.model /= used;
  out.inter /= used;
  return out;
}

/// Worst relative violation of v_total = v_ens + v_model + interaction.
inline double identity_violation(const VarianceDecomposition& d) {
  double worst = 0.0;
  for (Eigen::Index t = 0; t < d.v_total.rows(); ++t) {
    for (Eigen::Index k = 0; k < d.v_total.cols(); ++k) {
      const double vt = d.v_total(t, k);
      const double s = d.v_ens(t, k) + d.v_model(t, k) + d.interaction(t, k);
      if (vt > 0) worst = std::max(worst, std::abs(vt - s) / vt);
    }
  }
  return worst;
}

}  // namespace l96::oracle

#endif  // L96_TESTS_ORACLES_HPP_
