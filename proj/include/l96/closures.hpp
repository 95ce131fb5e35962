#ifndef L96_CLOSURES_HPP_
#define L96_CLOSURES_HPP_

#include "l96/closure.hpp"
#include "l96/common.hpp"
#include "l96/dynamics.hpp"
#include "l96/random.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <random>
#include <set>
#include <span>
#include <vector>

namespace l96 {

// ---------------------------------------------------------------------------
// Cubic polynomial U = a x^3 + b x^2 + c x + d
// ---------------------------------------------------------------------------

struct CubicCoeffs {
  double a = 0.0;
  double b = 0.0;
  double c = 0.0;
  double d = 0.0;

  double operator()(double x) const { return ((a * x + b) * x + c) * x + d; }
  Eigen::Vector4d vec() const { return {a, b, c, d}; }
  static CubicCoeffs from(const Eigen::Vector4d& v) { return {v[0], v[1], v[2], v[3]}; }
};

inline Vector eval_cubic(const CubicCoeffs& coeffs, const Vector& x) {
  return x.unaryExpr([&](double v) { return coeffs(v); });
}

namespace detail {

// Design matrix [x^3 x^2 x 1] on x / scale; caller rescales coefficients.
inline Eigen::MatrixXd cubic_design(std::span<const double> x, double scale) {
  Eigen::MatrixXd A(static_cast<Eigen::Index>(x.size()), 4);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double s = x[i] / scale;
    A(static_cast<Eigen::Index>(i), 0) = s * s * s;
    A(static_cast<Eigen::Index>(i), 1) = s * s;
    A(static_cast<Eigen::Index>(i), 2) = s;
    A(static_cast<Eigen::Index>(i), 3) = 1.0;
  }
  return A;
}

inline double design_scale(std::span<const double> x) {
  double m = 0.0;
  for (double v : x) m = std::max(m, std::abs(v));
  return m > 0.0 ? m : 1.0;
}

inline Eigen::Vector4d power_scaling(double scale) {
  return {1.0 / (scale * scale * scale), 1.0 / (scale * scale), 1.0 / scale, 1.0};
}

inline std::vector<double> flatten(const Eigen::Ref<const Matrix>& m) {
  return std::vector<double>(m.data(), m.data() + m.size());
}

}  // namespace detail

/// Least-squares cubic on pooled (x, u) pairs via column-pivoted QR.
inline CubicCoeffs fit_cubic_lsq(std::span<const double> x, std::span<const double> u) {
  detail::require(x.size() == u.size(), "fit_cubic_lsq: x and u lengths differ");
  std::set<double> distinct;
  for (double v : x) {
    distinct.insert(v);
    if (distinct.size() >= 4) break;
  }
  if (distinct.size() < 4) {
    throw rank_deficient_error("fit_cubic_lsq: need at least 4 distinct x values");
  }
  const double scale = detail::design_scale(x);
  const Eigen::MatrixXd A = detail::cubic_design(x, scale);
  const Eigen::Map<const Eigen::VectorXd> y(u.data(), static_cast<Eigen::Index>(u.size()));
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(A);
  if (qr.rank() < 4) throw rank_deficient_error("fit_cubic_lsq: rank-deficient design");
  const Eigen::Vector4d beta = qr.solve(y);
  return CubicCoeffs::from(beta.cwiseProduct(detail::power_scaling(scale)));
}

/// Pools all components of the given split.
inline CubicCoeffs fit_cubic_lsq(const TendencyDataset& ds, IndexRange range) {
  const auto x = detail::flatten(ds.x_rows(range));
  const auto u = detail::flatten(ds.u_rows(range));
  return fit_cubic_lsq(x, u);
}

/// Residual series U - cubic(X), one column per component.
inline Matrix cubic_residuals(const TendencyDataset& ds, IndexRange range, const CubicCoeffs& c) {
  Matrix r = ds.u_rows(range);
  const Matrix x = ds.x_rows(range);
  for (Eigen::Index i = 0; i < r.size(); ++i) r.data()[i] -= c(x.data()[i]);
  return r;
}

// ---------------------------------------------------------------------------
// AR(1) residual process e_t = rho e_{t-1} + sigma_e sqrt(1 - rho^2) z_t
// ---------------------------------------------------------------------------

struct AR1Params {
  double rho = 0.0;
  double sigma_e = 0.0;

  void validate() const {
    detail::require(std::abs(rho) < 1.0, "AR1Params: |rho| must be < 1");
    detail::require(std::isfinite(sigma_e) && sigma_e >= 0.0, "AR1Params: invalid sigma_e");
  }
};

/// Lag-1 autocorrelation and stationary std of the pooled residual series.
/// Columns are independent series of equal length; lag pairs never cross columns.
inline AR1Params fit_ar1(const Matrix& series) {
  const Eigen::Index T = series.rows();
  detail::require(T >= 3, "fit_ar1: series length must be >= 3");
  const double mean = series.mean();
  double var = 0.0;
  double cov = 0.0;
  for (Eigen::Index k = 0; k < series.cols(); ++k) {
    for (Eigen::Index t = 0; t < T; ++t) {
      const double d = series(t, k) - mean;
      var += d * d;
      if (t + 1 < T) cov += d * (series(t + 1, k) - mean);
    }
  }
  const double n = static_cast<double>(series.size());
  if (!(var / n > 1e-12)) {
    throw numerical_error("fit_ar1: residual variance below 1e-12");
  }
  return {cov / var, std::sqrt(var / n)};
}

inline Vector ar1_step(const Vector& e_prev, const AR1Params& params, NoiseStream& noise) {
  const double innov = params.sigma_e * std::sqrt(1.0 - params.rho * params.rho);
  Vector e(e_prev.size());
  for (Eigen::Index k = 0; k < e.size(); ++k) e[k] = params.rho * e_prev[k] + innov * noise.normal();
  return e;
}

// ---------------------------------------------------------------------------
// Conjugate Normal-Inverse-Gamma regression on the cubic basis
//   beta | s2 ~ N(m0, s2 V0),  s2 ~ IG(a0, b0),  u_i ~ N(x_i' beta, s2)
// ---------------------------------------------------------------------------

struct NigPrior {
  Eigen::Vector4d mean = Eigen::Vector4d::Zero();
  Eigen::Matrix4d cov_scale = 100.0 * Eigen::Matrix4d::Identity();
  double shape = 2.0;
  double rate = 2.0;
};

struct BayesPosterior {
  Eigen::Vector4d mean = Eigen::Vector4d::Zero();
  Eigen::Matrix4d cov_scale = Eigen::Matrix4d::Zero();
  double shape = 1.0;
  double rate = 1.0;
  double log_evidence = 0.0;  // log p(u) under the prior; 0 when not fitted

  void validate() const {
    detail::require(shape > 0 && rate > 0, "BayesPosterior: shape and rate must be positive");
    detail::require(cov_scale.isApprox(cov_scale.transpose(), 1e-12),
                    "BayesPosterior: cov_scale must be symmetric");
  }

  /// Marginal posterior std of each coefficient (Student-t with 2*shape dof).
  Eigen::Vector4d coefficient_std() const {
    const double s2 = shape > 1.0 ? rate / (shape - 1.0) : std::numeric_limits<double>::infinity();
    return (cov_scale.diagonal() * s2).cwiseSqrt();
  }
};

inline double nig_log_density(const Eigen::Vector4d& beta, double sigma2,
                              const Eigen::Vector4d& mean, const Eigen::Matrix4d& cov_scale,
                              double shape, double rate) {
  Eigen::LLT<Eigen::Matrix4d> llt(cov_scale);
  if (llt.info() != Eigen::Success) throw numerical_error("nig_log_density: cov_scale not PD");
  const Eigen::Vector4d w = llt.matrixL().solve(beta - mean);
  double logdet = 0.0;
  for (int i = 0; i < 4; ++i) logdet += 2.0 * std::log(llt.matrixL()(i, i));
  const double log_normal = -0.5 * (4.0 * std::log(2.0 * M_PI * sigma2) + logdet) -
                            0.5 * w.squaredNorm() / sigma2;
  const double log_ig = shape * std::log(rate) - std::lgamma(shape) -
                        (shape + 1.0) * std::log(sigma2) - rate / sigma2;
  return log_normal + log_ig;
}

inline double log_density(const BayesPosterior& post, const Eigen::Vector4d& beta, double sigma2) {
  return nig_log_density(beta, sigma2, post.mean, post.cov_scale, post.shape, post.rate);
}

inline double log_density(const NigPrior& prior, const Eigen::Vector4d& beta, double sigma2) {
  return nig_log_density(beta, sigma2, prior.mean, prior.cov_scale, prior.shape, prior.rate);
}

/// Exact posterior via QR of the prior-augmented, column-scaled design.
inline BayesPosterior fit_bayesian_posterior(std::span<const double> x, std::span<const double> u,
                                             const NigPrior& prior = {}) {
  detail::require(x.size() == u.size(), "fit_bayesian_posterior: x and u lengths differ");
  detail::require(x.size() >= 4, "fit_bayesian_posterior: need at least 4 rows");
  const auto n = static_cast<Eigen::Index>(x.size());

  const double scale = detail::design_scale(x);
  const Eigen::Vector4d D = detail::power_scaling(scale);  // beta = D .* beta_scaled

  Eigen::LLT<Eigen::Matrix4d> prior_llt(prior.cov_scale);
  if (prior_llt.info() != Eigen::Success) {
    throw precondition_error("fit_bayesian_posterior: prior cov_scale not PD");
  }
  // ||L0^{-1}(beta - m0)||^2 with beta = D beta_s  =>  rows L0^{-1} D.
  const Eigen::Matrix4d L0inv = prior_llt.matrixL().solve(Eigen::Matrix4d::Identity());
  Eigen::MatrixXd A(n + 4, 4);
  A.topRows(n) = detail::cubic_design(x, scale);
  A.bottomRows(4) = L0inv * D.asDiagonal();
  Eigen::VectorXd rhs(n + 4);
  rhs.head(n) = Eigen::Map<const Eigen::VectorXd>(u.data(), n);
  rhs.tail(4) = L0inv * prior.mean;

  Eigen::HouseholderQR<Eigen::MatrixXd> qr(A);
  const Eigen::Matrix4d R = qr.matrixQR().topRows(4).triangularView<Eigen::Upper>();
  for (int i = 0; i < 4; ++i) {
    if (!(std::abs(R(i, i)) > 1e-12 * std::abs(R(0, 0)))) {
      throw rank_deficient_error("fit_bayesian_posterior: singular design");
    }
  }
  const Eigen::Vector4d beta_s = qr.solve(rhs);
  const double resid2 = (A * beta_s - rhs).squaredNorm();

  const Eigen::Matrix4d Rinv =
      R.triangularView<Eigen::Upper>().solve(Eigen::Matrix4d::Identity());
  const Eigen::Matrix4d Vs = Rinv * Rinv.transpose();

  BayesPosterior post;
  post.mean = beta_s.cwiseProduct(D);
  post.cov_scale = D.asDiagonal() * Vs * D.asDiagonal();
  post.cov_scale = 0.5 * (post.cov_scale + post.cov_scale.transpose()).eval();
  post.shape = prior.shape + 0.5 * static_cast<double>(n);
  post.rate = prior.rate + 0.5 * resid2;

  double logdet_vn = 0.0;
  for (int i = 0; i < 4; ++i) logdet_vn += 2.0 * (std::log(D[i]) - std::log(std::abs(R(i, i))));
  double logdet_v0 = 0.0;
  for (int i = 0; i < 4; ++i) logdet_v0 += 2.0 * std::log(prior_llt.matrixL()(i, i));
  post.log_evidence = -0.5 * static_cast<double>(n) * std::log(2.0 * M_PI) +
                      0.5 * (logdet_vn - logdet_v0) + prior.shape * std::log(prior.rate) -
                      post.shape * std::log(post.rate) + std::lgamma(post.shape) -
                      std::lgamma(prior.shape);
  return post;
}

inline BayesPosterior fit_bayesian_posterior(const TendencyDataset& ds, IndexRange range,
                                             const NigPrior& prior = {}) {
  const auto x = detail::flatten(ds.x_rows(range));
  const auto u = detail::flatten(ds.u_rows(range));
  return fit_bayesian_posterior(x, u, prior);
}

/// One joint draw (sigma^2, coefficients) from the posterior.
inline CubicCoeffs sample_coefficients(const BayesPosterior& post, std::uint64_t seed) {
  post.validate();
  NoiseStream noise(seed);
  std::gamma_distribution<double> gamma(post.shape, 1.0 / post.rate);
  const double sigma2 = 1.0 / gamma(noise.engine());
  Eigen::Vector4d z;
  for (int i = 0; i < 4; ++i) z[i] = noise.normal();

  Eigen::Matrix4d factor;
  Eigen::LLT<Eigen::Matrix4d> llt(post.cov_scale);
  if (llt.info() == Eigen::Success) {
    factor = llt.matrixL();
  } else {
    // Semi-definite (e.g. degenerate zero) covariance: symmetric square root.
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix4d> es(post.cov_scale);
    factor = es.eigenvectors() * es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal() *
             es.eigenvectors().transpose();
  }
  return CubicCoeffs::from(post.mean + std::sqrt(sigma2) * (factor * z));
}

// ---------------------------------------------------------------------------
// Closures
// ---------------------------------------------------------------------------

class DeterministicClosure final : public Closure {
 public:
  explicit DeterministicClosure(CubicCoeffs coeffs) : coeffs_(coeffs) {}

  std::string kind() const override { return "deterministic"; }
  bool stochastic() const override { return false; }
  void reset(std::span<const std::uint64_t>) override {}
  void evaluate(const Matrix& x, Matrix& u) override {
    u.resize(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.size(); ++i) u.data()[i] = coeffs_(x.data()[i]);
  }
  std::unique_ptr<Closure> clone() const override {
    return std::make_unique<DeterministicClosure>(*this);
  }
  const CubicCoeffs& coeffs() const { return coeffs_; }

 private:
  CubicCoeffs coeffs_;
};

/// Cubic mean plus a per-component AR(1) residual started from its stationary law.
class PolyAR1Closure final : public Closure {
 public:
  PolyAR1Closure(CubicCoeffs coeffs, AR1Params ar1) : coeffs_(coeffs), ar1_(ar1) {
    ar1_.validate();
  }

  std::string kind() const override { return "poly_ar1"; }
  bool stochastic() const override { return true; }

  void reset(std::span<const std::uint64_t> seeds) override {
    noise_.clear();
    for (auto s : seeds) noise_.emplace_back(s);
    e_.resize(0, 0);
  }

  void evaluate(const Matrix& x, Matrix& u) override {
    const auto B = x.rows();
    detail::require(static_cast<std::size_t>(B) == noise_.size(),
                    "PolyAR1Closure: batch size differs from number of realizations");
    if (e_.rows() != B || e_.cols() != x.cols()) {
      e_.resize(B, x.cols());
      for (Eigen::Index r = 0; r < B; ++r) {
        for (Eigen::Index k = 0; k < x.cols(); ++k) e_(r, k) = ar1_.sigma_e * noise_[r].normal();
      }
    }
    u.resize(B, x.cols());
    const double innov = ar1_.sigma_e * std::sqrt(1.0 - ar1_.rho * ar1_.rho);
    for (Eigen::Index r = 0; r < B; ++r) {
      for (Eigen::Index k = 0; k < x.cols(); ++k) {
        u(r, k) = coeffs_(x(r, k)) + e_(r, k);
        e_(r, k) = ar1_.rho * e_(r, k) + innov * noise_[r].normal();
      }
    }
  }

  std::unique_ptr<Closure> clone() const override {
    return std::make_unique<PolyAR1Closure>(coeffs_, ar1_);
  }
  const CubicCoeffs& coeffs() const { return coeffs_; }
  const AR1Params& ar1() const { return ar1_; }

 private:
  CubicCoeffs coeffs_;
  AR1Params ar1_;
  std::vector<NoiseStream> noise_;
  Matrix e_;
};

/// Each realization draws one coefficient set at reset and keeps it for the run.
class BayesianClosure final : public Closure {
 public:
  explicit BayesianClosure(BayesPosterior post) : post_(std::move(post)) { post_.validate(); }

  std::string kind() const override { return "bayesian"; }
  bool stochastic() const override { return true; }

  void reset(std::span<const std::uint64_t> seeds) override {
    draws_.clear();
    for (auto s : seeds) draws_.push_back(sample_coefficients(post_, s));
  }

  void evaluate(const Matrix& x, Matrix& u) override {
    detail::require(static_cast<std::size_t>(x.rows()) == draws_.size(),
                    "BayesianClosure: batch size differs from number of realizations");
    u.resize(x.rows(), x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      const auto& c = draws_[static_cast<std::size_t>(r)];
      for (Eigen::Index k = 0; k < x.cols(); ++k) u(r, k) = c(x(r, k));
    }
  }

  std::unique_ptr<Closure> clone() const override {
    return std::make_unique<BayesianClosure>(post_);
  }
  const BayesPosterior& posterior() const { return post_; }
  const std::vector<CubicCoeffs>& draws() const { return draws_; }

 private:
  BayesPosterior post_;
  std::vector<CubicCoeffs> draws_;
};

}  // namespace l96

#endif  // L96_CLOSURES_HPP_
