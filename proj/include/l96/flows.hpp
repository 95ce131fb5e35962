#ifndef L96_FLOWS_HPP_
#define L96_FLOWS_HPP_

// Conditional RealNVP density p(U | c) for subgrid tendencies.
//
// Generative direction (latent -> tendency), per coupling layer with mask m:
//   u = m*z + (1-m)*(z*exp(s) + t),   s = 3 tanh(s_net([m*z, c])),  t = t_net([m*z, c])
// Layers are applied in order 0..L-1 when sampling and in reverse when
// evaluating densities. Optional elementwise tail map R follows the last layer.
// All network arithmetic happens in standardized units; the model stores the
// train-split mean/std of X and U and converts at the boundary.

#include "l96/closure.hpp"
#include "l96/common.hpp"
#include "l96/dynamics.hpp"
#include "l96/nn.hpp"
#include "l96/random.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace l96 {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

enum class FlowVariant { normal, history, base_ar1, tail };

inline std::string to_string(FlowVariant v) {
  switch (v) {
    case FlowVariant::normal: return "normal";
    case FlowVariant::history: return "history";
    case FlowVariant::base_ar1: return "base_ar1";
    case FlowVariant::tail: return "tail";
  }
  return "normal";
}

inline FlowVariant parse_flow_variant(const std::string& s) {
  if (s == "normal") return FlowVariant::normal;
  if (s == "history") return FlowVariant::history;
  if (s == "base_ar1") return FlowVariant::base_ar1;
  if (s == "tail") return FlowVariant::tail;
  throw precondition_error("unknown flow variant '" + s + "'");
}

struct FlowConfig {
  int dim = 8;
  int n_coupling = 4;
  int hidden = 128;
  int depth = 3;
  double lr = 1e-3;
  int batch = 2056;
  int max_epochs = 100;
  int patience = 8;
  int seq_len = 256;
  FlowVariant variant = FlowVariant::normal;
  int tau = 0;

  int history_len() const { return variant == FlowVariant::history ? tau + 1 : 1; }
  int cond_dim() const { return dim * history_len(); }

  void validate() const {
    detail::require(dim >= 2, "FlowConfig: dim must be >= 2");
    detail::require(n_coupling >= 2, "FlowConfig: need >= 2 coupling layers so every dimension is transformed");
    detail::require(hidden >= 1 && depth >= 1, "FlowConfig: invalid MLP shape");
    detail::require(batch >= 1 && max_epochs >= 1 && patience >= 1, "FlowConfig: invalid training schedule");
    detail::require(seq_len >= 2, "FlowConfig: seq_len must be >= 2");
    detail::require(variant != FlowVariant::history || tau >= 1, "FlowConfig: history variant needs tau >= 1");
  }
};

/// Per-dimension latent AR(1): z_t = rho z_{t-1} + sigma_z sqrt(1 - rho^2) eps_t.
struct LatentAR1 {
  VectorXd rho;
  VectorXd sigma_z;
};

struct TailParams {
  VectorXd mu;
  VectorXd sigma;
  VectorXd lambda_pos;
  VectorXd lambda_neg;
};

struct TrainingHistory {
  std::vector<double> train_nll;
  std::vector<double> val_nll;
  int best_epoch = -1;
};

struct Standardizer {
  VectorXd x_mean, x_std, u_mean, u_std;
};

// ---------------------------------------------------------------------------
// Tail transform R(y) = mu + sigma (s/lambda_s) [erfc(|y|/sqrt2)^(-lambda_s) - 1]
// ---------------------------------------------------------------------------

namespace tail {

inline constexpr double kSqrt2 = 1.4142135623730951;

/// log erfc(a) for a >= 0; switches to the asymptotic series before erfc underflows.
inline double log_erfc(double a) {
  if (a < 25.0) return std::log(std::erfc(a));
  const double a2 = a * a;
  const double inv = 1.0 / (2.0 * a2);
  const double series = 1.0 - inv + 3.0 * inv * inv - 15.0 * inv * inv * inv + 105.0 * inv * inv * inv * inv;
  return -a2 - std::log(a * std::sqrt(M_PI)) + std::log(series);
}

/// d/da log erfc(a).
inline double log_erfc_deriv(double a) {
  return -2.0 / std::sqrt(M_PI) * std::exp(-a * a - log_erfc(a));
}

struct Dim {
  double mu, sigma, lam_pos, lam_neg;
  double lambda(double s) const { return s > 0 ? lam_pos : lam_neg; }
};

inline double value(double y, const Dim& p) {
  if (y == 0.0) return p.mu;
  const double s = y > 0 ? 1.0 : -1.0;
  const double lam = p.lambda(s);
  const double l = log_erfc(std::abs(y) / kSqrt2);
  return p.mu + p.sigma * s * std::expm1(-lam * l) / lam;
}

/// log R'(y) = log sigma + log sqrt(2/pi) - y^2/2 - (lambda+1) log erfc(|y|/sqrt2).
inline double log_deriv(double y, const Dim& p) {
  const double s = y > 0 ? 1.0 : -1.0;
  const double lam = p.lambda(s);
  return std::log(p.sigma) + 0.5 * std::log(2.0 / M_PI) - 0.5 * y * y -
         (lam + 1.0) * log_erfc(std::abs(y) / kSqrt2);
}

/// Solves log_erfc(a) = target (target <= 0) for a >= 0 by safeguarded Newton.
inline double solve_log_erfc(double target) {
  if (target >= 0.0) return 0.0;
  double lo = 0.0;
  double hi = 1.0;
  while (log_erfc(hi) > target) hi *= 2.0;
  double a = std::min(std::max(std::sqrt(-target), 0.5 * hi), hi);
  for (int it = 0; it < 200; ++it) {
    const double f = log_erfc(a) - target;
    if (f > 0) lo = a; else hi = a;
    const double fp = log_erfc_deriv(a);
    double next = a - f / fp;
    if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
    if (std::abs(next - a) <= 1e-16 * std::max(1.0, a)) return next;
    a = next;
    if (hi - lo <= 1e-16 * std::max(1.0, a)) break;
  }
  return a;
}

inline double inverse(double u, const Dim& p) {
  const double v = u - p.mu;
  if (v == 0.0) return 0.0;
  const double s = v > 0 ? 1.0 : -1.0;
  const double lam = p.lambda(s);
  const double target = -std::log1p(lam * std::abs(v) / p.sigma) / lam;
  return s * kSqrt2 * solve_log_erfc(target);
}

}  // namespace tail

/// Elementwise tail map; returns (u, sum of log R'(y) per row).
inline std::pair<MatrixXd, VectorXd> tail_transform(const TailParams& p, const MatrixXd& y) {
  MatrixXd u(y.rows(), y.cols());
  VectorXd logdet = VectorXd::Zero(y.rows());
  for (Index d = 0; d < y.cols(); ++d) {
    const tail::Dim dim{p.mu[d], p.sigma[d], p.lambda_pos[d], p.lambda_neg[d]};
    for (Index r = 0; r < y.rows(); ++r) {
      u(r, d) = tail::value(y(r, d), dim);
      logdet[r] += tail::log_deriv(y(r, d), dim);
    }
  }
  return {u, logdet};
}

/// Inverse tail map; returns (y, sum of log |dy/du| per row).
inline std::pair<MatrixXd, VectorXd> tail_inverse(const TailParams& p, const MatrixXd& u) {
  MatrixXd y(u.rows(), u.cols());
  VectorXd logdet = VectorXd::Zero(u.rows());
  for (Index d = 0; d < u.cols(); ++d) {
    const tail::Dim dim{p.mu[d], p.sigma[d], p.lambda_pos[d], p.lambda_neg[d]};
    for (Index r = 0; r < u.rows(); ++r) {
      y(r, d) = tail::inverse(u(r, d), dim);
      logdet[r] -= tail::log_deriv(y(r, d), dim);
    }
  }
  return {y, logdet};
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

class FlowModel {
 public:
  FlowConfig config;
  VectorXd theta;
  Standardizer scale;
  std::optional<LatentAR1> latent;  // post-hoc fit for AR(1) latent sampling
  TrainingHistory history;
  std::string dataset_hash;
  std::uint64_t seed = 0;

  FlowModel() = default;

  /// Identity map at construction: output layers are zero, tail (if any) at its
  /// unit-slope setting, base AR(1) at rho = 0, sigma = 1.
  explicit FlowModel(const FlowConfig& cfg, std::uint64_t init_seed = 0) : config(cfg), seed(init_seed) {
    config.validate();
    build_layout();
    theta = VectorXd::Zero(n_params_);
    NoiseStream noise(derive_seed(init_seed, SeedRole::init_weights));
    for (int l = 0; l < config.n_coupling; ++l) {
      s_nets_[l].init(theta, noise);
      t_nets_[l].init(theta, noise);
    }
    if (has_tail()) {
      const Index K = config.dim;
      theta.segment(tail_offset_ + K, K).setConstant(0.5 * std::log(M_PI / 2.0));
      theta.segment(tail_offset_ + 2 * K, 2 * K).setConstant(std::log(0.1));
    }
    const Index K = config.dim;
    scale.x_mean = VectorXd::Zero(K);
    scale.x_std = VectorXd::Ones(K);
    scale.u_mean = VectorXd::Zero(K);
    scale.u_std = VectorXd::Ones(K);
  }

  /// Re-derives the parameter layout after config/theta were loaded.
  void build_layout() {
    const int K = config.dim;
    const int C = config.cond_dim();
    std::vector<int> sizes{K + C};
    for (int i = 0; i < config.depth; ++i) sizes.push_back(config.hidden);
    sizes.push_back(K);
    Index off = 0;
    s_nets_.clear();
    t_nets_.clear();
    for (int l = 0; l < config.n_coupling; ++l) {
      s_nets_.emplace_back(sizes, off);
      off += s_nets_.back().n_params();
      t_nets_.emplace_back(sizes, off);
      off += t_nets_.back().n_params();
    }
    tail_offset_ = off;
    if (has_tail()) off += 4 * K;
    ar_offset_ = off;
    if (has_base_ar1()) off += 2 * K;
    n_params_ = off;
  }

  bool has_tail() const { return config.variant == FlowVariant::tail; }
  bool has_base_ar1() const { return config.variant == FlowVariant::base_ar1; }
  Index n_params() const { return n_params_; }
  Index tail_offset() const { return tail_offset_; }
  Index ar_offset() const { return ar_offset_; }
  const nn::Mlp& s_net(int l) const { return s_nets_[static_cast<std::size_t>(l)]; }
  const nn::Mlp& t_net(int l) const { return t_nets_[static_cast<std::size_t>(l)]; }

  /// Alternating binary mask; 1 marks pass-through (conditioning) dimensions.
  VectorXd mask(int layer) const {
    VectorXd m(config.dim);
    for (int i = 0; i < config.dim; ++i) m[i] = ((i + layer) % 2 == 0) ? 1.0 : 0.0;
    return m;
  }

  TailParams tail_params() const {
    const Index K = config.dim;
    TailParams p;
    p.mu = theta.segment(tail_offset_, K);
    p.sigma = theta.segment(tail_offset_ + K, K).array().exp();
    p.lambda_pos = theta.segment(tail_offset_ + 2 * K, K).array().exp();
    p.lambda_neg = theta.segment(tail_offset_ + 3 * K, K).array().exp();
    return p;
  }

  /// Base AR(1) innovation parameters (rho, sigma) learned jointly with the flow.
  std::pair<VectorXd, VectorXd> base_ar1_params() const {
    const Index K = config.dim;
    return {theta.segment(ar_offset_, K).array().tanh(), theta.segment(ar_offset_ + K, K).array().exp()};
  }

  /// Latent process to drive AR(1) sampling: learned base process for the
  /// base_ar1 variant, post-hoc fit otherwise.
  LatentAR1 sampling_ar1() const {
    if (has_base_ar1()) {
      auto [rho, sigma] = base_ar1_params();
      LatentAR1 l;
      l.rho = rho;
      l.sigma_z = sigma.array() / (1.0 - rho.array().square()).sqrt();
      return l;
    }
    if (!latent) throw precondition_error("FlowModel: latent AR(1) parameters not fitted");
    return *latent;
  }

  double log_u_scale() const { return scale.u_std.array().log().sum(); }

 private:
  std::vector<nn::Mlp> s_nets_;
  std::vector<nn::Mlp> t_nets_;
  Index tail_offset_ = 0;
  Index ar_offset_ = 0;
  Index n_params_ = 0;
};

// ---------------------------------------------------------------------------
// Conditioning
// ---------------------------------------------------------------------------

/// history[0] = X_t, history[1] = X_{t-1}, ...; missing lags repeat the oldest state.
inline VectorXd build_condition(const FlowConfig& cfg, std::span<const VectorXd> history) {
  detail::require(!history.empty(), "build_condition: empty history");
  const int L = cfg.history_len();
  VectorXd c(cfg.cond_dim());
  for (int lag = 0; lag < L; ++lag) {
    const auto idx = std::min<std::size_t>(static_cast<std::size_t>(lag), history.size() - 1);
    c.segment(lag * cfg.dim, cfg.dim) = history[idx];
  }
  return c;
}

/// Conditions for every row of a time-ordered state sequence, padded at the start.
inline MatrixXd build_conditions(const FlowConfig& cfg, const Eigen::Ref<const Matrix>& x) {
  const int L = cfg.history_len();
  MatrixXd c(x.rows(), cfg.cond_dim());
  for (Index t = 0; t < x.rows(); ++t) {
    for (int lag = 0; lag < L; ++lag) {
      const Index src = std::max<Index>(0, t - lag);
      c.block(t, lag * cfg.dim, 1, cfg.dim) = x.row(src);
    }
  }
  return c;
}

inline MatrixXd standardize_cond(const FlowModel& m, const MatrixXd& c_raw) {
  MatrixXd c = c_raw;
  const int K = m.config.dim;
  for (int lag = 0; lag < m.config.history_len(); ++lag) {
    auto blk = c.middleCols(lag * K, K);
    blk.rowwise() -= m.scale.x_mean.transpose();
    blk.array().rowwise() /= m.scale.x_std.transpose().array();
  }
  return c;
}

inline MatrixXd standardize_u(const FlowModel& m, const MatrixXd& u_raw) {
  MatrixXd u = u_raw;
  u.rowwise() -= m.scale.u_mean.transpose();
  u.array().rowwise() /= m.scale.u_std.transpose().array();
  return u;
}

// ---------------------------------------------------------------------------
// Coupling layers (standardized units)
// ---------------------------------------------------------------------------

namespace detail {

inline MatrixXd net_input(const MatrixXd& x, const VectorXd& mask, const MatrixXd& cond) {
  MatrixXd in(x.rows(), x.cols() + cond.cols());
  in.leftCols(x.cols()) = x.array().rowwise() * mask.transpose().array();
  in.rightCols(cond.cols()) = cond;
  return in;
}

inline constexpr double kScaleBound = 3.0;

struct CouplingCache {
  MatrixXd in;       // layer input in the evaluated direction
  MatrixXd out;      // layer output
  MatrixXd tanh_s;   // tanh of raw scale-net output
  MatrixXd s;        // bounded scale
  MatrixXd t;        // shift
  nn::MlpCache s_cache, t_cache;
};

inline void coupling_nets(const FlowModel& m, int layer, const MatrixXd& x, const MatrixXd& cond,
                          CouplingCache& cc, bool keep_cache) {
  const VectorXd mask = m.mask(layer);
  const MatrixXd in = net_input(x, mask, cond);
  MatrixXd raw_s = nn::forward(m.s_net(layer), m.theta, in, keep_cache ? &cc.s_cache : nullptr);
  cc.t = nn::forward(m.t_net(layer), m.theta, in, keep_cache ? &cc.t_cache : nullptr);
  cc.tanh_s = raw_s.array().tanh();
  cc.s = kScaleBound * cc.tanh_s;
  if (!cc.s.allFinite() || !cc.t.allFinite()) {
    throw numerical_error(concat("coupling layer ", layer, ": non-finite network output"));
  }
}

}  // namespace detail

/// Generative direction z -> u for one layer; logdet = sum of s over transformed dims.
inline std::pair<MatrixXd, VectorXd> coupling_forward(const FlowModel& m, int layer, const MatrixXd& z,
                                                      const MatrixXd& cond) {
  detail::require(cond.cols() == m.config.cond_dim(), "coupling_forward: cond length != cond_dim");
  detail::CouplingCache cc;
  detail::coupling_nets(m, layer, z, cond, cc, false);
  const VectorXd mask = m.mask(layer);
  const Eigen::RowVectorXd inv = (1.0 - mask.array()).matrix().transpose();
  MatrixXd u = z;
  for (Index r = 0; r < z.rows(); ++r) {
    for (Index d = 0; d < z.cols(); ++d) {
      if (inv[d] != 0.0) u(r, d) = z(r, d) * std::exp(cc.s(r, d)) + cc.t(r, d);
    }
  }
  VectorXd logdet = (cc.s.array().rowwise() * inv.array()).rowwise().sum();
  return {u, logdet};
}

/// Density direction u -> z for one layer; returns log|det dz/du| = -sum s.
inline std::pair<MatrixXd, VectorXd> coupling_inverse(const FlowModel& m, int layer, const MatrixXd& u,
                                                      const MatrixXd& cond) {
  detail::require(cond.cols() == m.config.cond_dim(), "coupling_inverse: cond length != cond_dim");
  detail::CouplingCache cc;
  detail::coupling_nets(m, layer, u, cond, cc, false);
  const VectorXd mask = m.mask(layer);
  const Eigen::RowVectorXd inv = (1.0 - mask.array()).matrix().transpose();
  MatrixXd z = u;
  for (Index r = 0; r < u.rows(); ++r) {
    for (Index d = 0; d < u.cols(); ++d) {
      if (inv[d] != 0.0) z(r, d) = (u(r, d) - cc.t(r, d)) * std::exp(-cc.s(r, d));
    }
  }
  VectorXd logdet = -(cc.s.array().rowwise() * inv.array()).rowwise().sum();
  return {z, logdet};
}

/// Coupling stack z -> y (before any tail map).
inline std::pair<MatrixXd, VectorXd> core_forward(const FlowModel& m, const MatrixXd& z, const MatrixXd& cond) {
  MatrixXd x = z;
  VectorXd logdet = VectorXd::Zero(z.rows());
  for (int l = 0; l < m.config.n_coupling; ++l) {
    auto [y, ld] = coupling_forward(m, l, x, cond);
    x = std::move(y);
    logdet += ld;
  }
  return {x, logdet};
}

/// Coupling stack y -> z with log|det dz/dy|.
inline std::pair<MatrixXd, VectorXd> core_inverse(const FlowModel& m, const MatrixXd& y, const MatrixXd& cond) {
  MatrixXd x = y;
  VectorXd logdet = VectorXd::Zero(y.rows());
  for (int l = m.config.n_coupling - 1; l >= 0; --l) {
    auto [z, ld] = coupling_inverse(m, l, x, cond);
    x = std::move(z);
    logdet += ld;
  }
  return {x, logdet};
}

/// Full generative map in standardized units: latent -> standardized tendency.
inline std::pair<MatrixXd, VectorXd> flow_forward_std(const FlowModel& m, const MatrixXd& z,
                                                      const MatrixXd& cond_std) {
  auto [y, ld] = core_forward(m, z, cond_std);
  if (!m.has_tail()) return {y, ld};
  auto [u, tld] = tail_transform(m.tail_params(), y);
  return {u, ld + tld};
}

/// Full inverse in standardized units: standardized tendency -> latent.
inline std::pair<MatrixXd, VectorXd> flow_inverse_std(const FlowModel& m, const MatrixXd& u_std,
                                                      const MatrixXd& cond_std) {
  MatrixXd y = u_std;
  VectorXd ld = VectorXd::Zero(u_std.rows());
  if (m.has_tail()) {
    auto [yy, tld] = tail_inverse(m.tail_params(), u_std);
    y = std::move(yy);
    ld = tld;
  }
  auto [z, cld] = core_inverse(m, y, cond_std);
  return {z, ld + cld};
}

/// Maps latents through g(z, c) and returns tendencies in model units.
inline MatrixXd generate(const FlowModel& m, const MatrixXd& z, const MatrixXd& cond_raw) {
  auto [u, ld] = flow_forward_std(m, z, standardize_cond(m, cond_raw));
  (void)ld;
  u.array().rowwise() *= m.scale.u_std.transpose().array();
  u.rowwise() += m.scale.u_mean.transpose();
  return u;
}

/// Latents for tendencies in model units.
inline MatrixXd infer_latents(const FlowModel& m, const MatrixXd& u_raw, const MatrixXd& cond_raw) {
  auto [z, ld] = flow_inverse_std(m, standardize_u(m, u_raw), standardize_cond(m, cond_raw));
  (void)ld;
  if (!z.allFinite()) throw numerical_error("infer_latents: flow inversion produced non-finite latents");
  return z;
}

inline double std_normal_logpdf_sum(const Eigen::Ref<const Eigen::RowVectorXd>& z) {
  return -0.5 * z.squaredNorm() - 0.5 * static_cast<double>(z.size()) * std::log(2.0 * M_PI);
}

/// log p(u | c) per row in model units under the iid standard-normal base.
inline VectorXd log_prob(const FlowModel& m, const MatrixXd& u_raw, const MatrixXd& cond_raw) {
  detail::require(u_raw.rows() == cond_raw.rows(), "log_prob: row mismatch");
  auto [z, ld] = flow_inverse_std(m, standardize_u(m, u_raw), standardize_cond(m, cond_raw));
  VectorXd lp(z.rows());
  for (Index r = 0; r < z.rows(); ++r) lp[r] = std_normal_logpdf_sum(z.row(r)) + ld[r] - m.log_u_scale();
  return lp;
}

/// Gaussian AR(1) sequence log density of latents (rows = time) with a
/// stationary start N(0, sigma^2/(1-rho^2)) in each dimension.
inline double ar1_sequence_logpdf(const MatrixXd& z, const VectorXd& rho, const VectorXd& sigma) {
  double lp = 0.0;
  const double l2pi = std::log(2.0 * M_PI);
  for (Index d = 0; d < z.cols(); ++d) {
    const double v0 = sigma[d] * sigma[d] / (1.0 - rho[d] * rho[d]);
    lp += -0.5 * (l2pi + std::log(v0)) - 0.5 * z(0, d) * z(0, d) / v0;
    const double s2 = sigma[d] * sigma[d];
    for (Index t = 1; t < z.rows(); ++t) {
      const double r = z(t, d) - rho[d] * z(t - 1, d);
      lp += -0.5 * (l2pi + std::log(s2)) - 0.5 * r * r / s2;
    }
  }
  return lp;
}

/// Joint log likelihood of a contiguous sequence under the flow with an AR(1)
/// base (parameters passed explicitly so the reduction to iid can be checked).
inline double sequence_log_prob(const FlowModel& m, const MatrixXd& u_raw, const MatrixXd& cond_raw,
                                const VectorXd& rho, const VectorXd& sigma) {
  auto [z, ld] = flow_inverse_std(m, standardize_u(m, u_raw), standardize_cond(m, cond_raw));
  return ar1_sequence_logpdf(z, rho, sigma) + ld.sum() - static_cast<double>(z.rows()) * m.log_u_scale();
}

// ---------------------------------------------------------------------------
// Negative log likelihood and its gradient (standardized units)
// ---------------------------------------------------------------------------

struct Segment {
  Index begin = 0;
  Index length = 0;
};

/// Mean NLL per row of standardized (u, c) pairs, excluding the constant
/// sum(log u_std). With `segments`, rows are contiguous sequences scored under
/// the model's AR(1) base; otherwise rows are iid under N(0, I).
/// Accumulates d(mean NLL)/d(theta) into *grad when provided.
inline double nll_and_grad(const FlowModel& m, const MatrixXd& u_std, const MatrixXd& cond_std,
                           VectorXd* grad, std::span<const Segment> segments = {}) {
  const Index B = u_std.rows();
  const Index K = m.config.dim;
  const int L = m.config.n_coupling;
  const double invB = 1.0 / static_cast<double>(B);
  const bool sequence = !segments.empty();
  detail::require(!sequence || m.has_base_ar1(), "nll_and_grad: sequence likelihood needs the base_ar1 variant");

  // Tail inverse with per-element derivative bookkeeping.
  MatrixXd y = u_std;
  MatrixXd log_rp, dlogrp_dy;
  TailParams tp;
  if (m.has_tail()) {
    tp = m.tail_params();
    y.resize(B, K);
    log_rp.resize(B, K);
    dlogrp_dy.resize(B, K);
    for (Index d = 0; d < K; ++d) {
      const tail::Dim dim{tp.mu[d], tp.sigma[d], tp.lambda_pos[d], tp.lambda_neg[d]};
      for (Index r = 0; r < B; ++r) {
        const double yy = tail::inverse(u_std(r, d), dim);
        y(r, d) = yy;
        log_rp(r, d) = tail::log_deriv(yy, dim);
        const double s = yy > 0 ? 1.0 : (yy < 0 ? -1.0 : 0.0);
        const double lam = dim.lambda(yy > 0 ? 1.0 : -1.0);
        dlogrp_dy(r, d) = -yy - (lam + 1.0) * tail::log_erfc_deriv(std::abs(yy) / tail::kSqrt2) * s / tail::kSqrt2;
      }
    }
  }

  // Inverse coupling stack with caches.
  std::vector<detail::CouplingCache> caches(static_cast<std::size_t>(L));
  MatrixXd x = y;
  VectorXd logdet = VectorXd::Zero(B);
  for (int l = L - 1; l >= 0; --l) {
    auto& cc = caches[static_cast<std::size_t>(l)];
    detail::coupling_nets(m, l, x, cond_std, cc, grad != nullptr);
    const VectorXd mask = m.mask(l);
    cc.in = x;
    cc.out = x;
    for (Index r = 0; r < B; ++r) {
      for (Index d = 0; d < K; ++d) {
        if (mask[d] == 0.0) {
          cc.out(r, d) = (x(r, d) - cc.t(r, d)) * std::exp(-cc.s(r, d));
          logdet[r] -= cc.s(r, d);
        }
      }
    }
    x = cc.out;
  }
  const MatrixXd& z = x;

  // Base density.
  double total = 0.0;
  MatrixXd gz;  // d(sum of -log p0)/dz
  VectorXd g_rho_a, g_log_sigma;
  if (!sequence) {
    for (Index r = 0; r < B; ++r) total -= std_normal_logpdf_sum(z.row(r));
    if (grad) gz = z;
  } else {
    auto [rho, sigma] = m.base_ar1_params();
    if (grad) {
      gz = MatrixXd::Zero(B, K);
      g_rho_a = VectorXd::Zero(K);
      g_log_sigma = VectorXd::Zero(K);
    }
    const double l2pi = std::log(2.0 * M_PI);
    for (const auto& seg : segments) {
      for (Index d = 0; d < K; ++d) {
        const double rh = rho[d];
        const double s2 = sigma[d] * sigma[d];
        const double v0 = s2 / (1.0 - rh * rh);
        const double z0 = z(seg.begin, d);
        total += 0.5 * (l2pi + std::log(v0)) + 0.5 * z0 * z0 / v0;
        if (grad) {
          gz(seg.begin, d) += z0 / v0;
          const double dlogv0 = 0.5 - 0.5 * z0 * z0 / v0;  // d(-logN)/d(log v0)
          g_log_sigma[d] += 2.0 * dlogv0;
          g_rho_a[d] += 2.0 * rh * dlogv0;
        }
        for (Index t = seg.begin + 1; t < seg.begin + seg.length; ++t) {
          const double res = z(t, d) - rh * z(t - 1, d);
          total += 0.5 * (l2pi + std::log(s2)) + 0.5 * res * res / s2;
          if (grad) {
            gz(t, d) += res / s2;
            gz(t - 1, d) -= rh * res / s2;
            g_rho_a[d] += -(1.0 - rh * rh) * res * z(t - 1, d) / s2;
            g_log_sigma[d] += 1.0 - res * res / s2;
          }
        }
      }
    }
  }
  total -= logdet.sum();
  if (m.has_tail()) total += log_rp.sum();
  const double loss = total * invB;
  if (!grad) return loss;

  // Backward through the coupling stack (layer 0 first, the reverse of evaluation).
  grad->conservativeResize(m.n_params());
  MatrixXd g = gz * invB;
  const double g_ld = -invB;  // d loss / d logdet_row
  for (int l = 0; l < L; ++l) {
    const auto& cc = caches[static_cast<std::size_t>(l)];
    const VectorXd mask = m.mask(l);
    MatrixXd g_raw_s = MatrixXd::Zero(B, K);
    MatrixXd g_t = MatrixXd::Zero(B, K);
    MatrixXd g_in = g;
    for (Index r = 0; r < B; ++r) {
      for (Index d = 0; d < K; ++d) {
        if (mask[d] != 0.0) continue;
        const double e = std::exp(-cc.s(r, d));
        const double gs = -g(r, d) * cc.out(r, d) - g_ld;
        g_t(r, d) = -g(r, d) * e;
        g_raw_s(r, d) = gs * detail::kScaleBound * (1.0 - cc.tanh_s(r, d) * cc.tanh_s(r, d));
        g_in(r, d) = g(r, d) * e;
      }
    }
    const MatrixXd gi_s = nn::backward(m.s_net(l), m.theta, cc.s_cache, g_raw_s, *grad);
    const MatrixXd gi_t = nn::backward(m.t_net(l), m.theta, cc.t_cache, g_t, *grad);
    for (Index d = 0; d < K; ++d) {
      if (mask[d] != 0.0) g_in.col(d) += gi_s.col(d) + gi_t.col(d);
    }
    g = std::move(g_in);
  }

  if (m.has_tail()) {
    const Index off = m.tail_offset();
    for (Index d = 0; d < K; ++d) {
      for (Index r = 0; r < B; ++r) {
        const double yy = y(r, d);
        const double gy = g(r, d) + dlogrp_dy(r, d) * invB;
        const double rp = std::exp(log_rp(r, d));
        const double s = yy > 0 ? 1.0 : (yy < 0 ? -1.0 : 0.0);
        const bool pos = yy > 0;
        const double lam = pos ? tp.lambda_pos[d] : tp.lambda_neg[d];
        const double l = tail::log_erfc(std::abs(yy) / tail::kSqrt2);
        const double E = std::exp(-lam * l);
        const double dR_dmu = 1.0;
        const double dR_dlogsig = tp.sigma[d] * s * std::expm1(-lam * l) / lam;
        const double dR_dloglam = tp.sigma[d] * s * (-lam * l * E - std::expm1(-lam * l)) / lam;
        (*grad)[off + d] += gy * (-dR_dmu / rp);
        (*grad)[off + K + d] += gy * (-dR_dlogsig / rp) + invB;
        const Index lam_idx = off + (pos ? 2 * K : 3 * K) + d;
        (*grad)[lam_idx] += gy * (-dR_dloglam / rp) + invB * (-lam * l);
      }
    }
  }
  if (sequence) {
    const Index off = m.ar_offset();
    for (Index d = 0; d < K; ++d) {
      (*grad)[off + d] += g_rho_a[d] * invB;
      (*grad)[off + K + d] += g_log_sigma[d] * invB;
    }
  }
  return loss;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

namespace detail {

inline void fit_standardizer(FlowModel& m, const TendencyDataset& ds) {
  const auto xr = ds.x_rows(ds.split.train);
  const auto ur = ds.u_rows(ds.split.train);
  const double n = static_cast<double>(xr.rows());
  m.scale.x_mean = xr.colwise().mean().transpose();
  m.scale.u_mean = ur.colwise().mean().transpose();
  m.scale.x_std = ((xr.rowwise() - m.scale.x_mean.transpose()).array().square().colwise().sum() / n)
                      .sqrt().transpose();
  m.scale.u_std = ((ur.rowwise() - m.scale.u_mean.transpose()).array().square().colwise().sum() / n)
                      .sqrt().transpose();
  for (Index k = 0; k < m.scale.x_std.size(); ++k) {
    if (!(m.scale.x_std[k] > 0) || !(m.scale.u_std[k] > 0)) {
      throw numerical_error("flow training: zero-variance component in training split");
    }
  }
}

inline std::vector<Segment> make_segments(IndexRange range, int seq_len) {
  std::vector<Segment> segs;
  for (std::size_t b = range.begin; b < range.end; b += static_cast<std::size_t>(seq_len)) {
    const std::size_t len = std::min<std::size_t>(static_cast<std::size_t>(seq_len), range.end - b);
    if (len >= 2) segs.push_back({static_cast<Index>(b), static_cast<Index>(len)});
  }
  return segs;
}

inline MatrixXd gather_rows(const MatrixXd& src, std::span<const Index> idx) {
  MatrixXd out(static_cast<Index>(idx.size()), src.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Index>(i)) = src.row(idx[i]);
  return out;
}

// Mean NLL over a range in chunks, without gradients.
inline double evaluate_nll(const FlowModel& m, const MatrixXd& U, const MatrixXd& C, IndexRange range,
                           bool sequence) {
  if (range.size() == 0) return std::numeric_limits<double>::quiet_NaN();
  if (sequence) {
    const auto segs = make_segments(range, m.config.seq_len);
    double total = 0.0;
    Index rows = 0;
    for (const auto& s : segs) {
      const Segment local{0, s.length};
      total += nll_and_grad(m, U.middleRows(s.begin, s.length), C.middleRows(s.begin, s.length), nullptr,
                            std::span<const Segment>(&local, 1)) *
               static_cast<double>(s.length);
      rows += s.length;
    }
    return total / static_cast<double>(rows) + m.log_u_scale();
  }
  double total = 0.0;
  const Index chunk = 4096;
  for (auto b = static_cast<Index>(range.begin); b < static_cast<Index>(range.end); b += chunk) {
    const Index n = std::min<Index>(chunk, static_cast<Index>(range.end) - b);
    total += nll_and_grad(m, U.middleRows(b, n), C.middleRows(b, n), nullptr) * static_cast<double>(n);
  }
  return total / static_cast<double>(range.size()) + m.log_u_scale();
}

}  // namespace detail

/// Standardized training tensors aligned with the dataset rows.
struct FlowTrainingData {
  MatrixXd u;
  MatrixXd cond;
};

inline FlowTrainingData prepare_training_data(const FlowModel& m, const TendencyDataset& ds) {
  FlowTrainingData td;
  td.cond = standardize_cond(m, build_conditions(m.config, ds.x));
  td.u = standardize_u(m, ds.u);
  return td;
}

namespace detail {

template <typename BatchFn>
void run_training(FlowModel& m, const TendencyDataset& ds, std::uint64_t seed, bool sequence,
                  BatchFn&& make_batches) {
  detail::require(ds.split.train.size() > 0 && ds.split.val.size() > 0,
                  "train: train and val splits must be non-empty");
  fit_standardizer(m, ds);
  const FlowTrainingData td = prepare_training_data(m, ds);

  nn::Adam adam;
  adam.lr = m.config.lr;
  m.history = {};
  VectorXd best = m.theta;
  double best_val = std::numeric_limits<double>::infinity();
  int since_best = 0;
  VectorXd grad(m.n_params());

  for (int epoch = 0; epoch < m.config.max_epochs; ++epoch) {
    std::mt19937_64 rng(derive_seed(seed, SeedRole::training, {static_cast<std::uint64_t>(epoch)}));
    double sum = 0.0;
    double rows = 0.0;
    for (const auto& batch : make_batches(rng)) {
      const MatrixXd ub = gather_rows(td.u, batch.rows);
      const MatrixXd cb = gather_rows(td.cond, batch.rows);
      grad.setZero();
      const double loss = nll_and_grad(m, ub, cb, &grad, batch.segments);
      if (!std::isfinite(loss) || !grad.allFinite()) {
        throw training_diverged_error(epoch, concat("flow training diverged at epoch ", epoch));
      }
      adam.step(m.theta, grad);
      sum += loss * static_cast<double>(ub.rows());
      rows += static_cast<double>(ub.rows());
    }
    const double train_nll = sum / rows + m.log_u_scale();
    const double val_nll = evaluate_nll(m, td.u, td.cond, ds.split.val, sequence);
    if (!std::isfinite(val_nll)) {
      throw training_diverged_error(epoch, concat("validation loss not finite at epoch ", epoch));
    }
    m.history.train_nll.push_back(train_nll);
    m.history.val_nll.push_back(val_nll);
    if (val_nll < best_val) {
      best_val = val_nll;
      best = m.theta;
      m.history.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= m.config.patience) {
      break;
    }
  }
  m.theta = best;
}

struct Batch {
  std::vector<Index> rows;
  std::vector<Segment> segments;  // local to `rows`; empty for iid batches
};

}  // namespace detail

/// Maximum-likelihood training on shuffled iid minibatches with early stopping
/// on the validation NLL; restores the best-validation parameters.
/// The base_ar1 variant is dispatched to train_sequence.
inline FlowModel train_sequence(FlowModel model, const TendencyDataset& ds, std::uint64_t seed);

inline FlowModel train(FlowModel model, const TendencyDataset& ds, std::uint64_t seed) {
  if (model.has_base_ar1()) return train_sequence(std::move(model), ds, seed);
  const auto train = ds.split.train;
  const Index batch = model.config.batch;
  detail::run_training(model, ds, seed, false, [&](std::mt19937_64& rng) {
    std::vector<Index> perm(train.size());
    std::iota(perm.begin(), perm.end(), static_cast<Index>(train.begin));
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<detail::Batch> out;
    for (std::size_t b = 0; b < perm.size(); b += static_cast<std::size_t>(batch)) {
      const std::size_t e = std::min(perm.size(), b + static_cast<std::size_t>(batch));
      out.push_back({std::vector<Index>(perm.begin() + static_cast<long>(b), perm.begin() + static_cast<long>(e)), {}});
    }
    return out;
  });
  return model;
}

/// Joint sequence likelihood with the AR(1) base: contiguous subsequences of
/// seq_len rows, shuffled as units and packed into batches of at most `batch` rows.
inline FlowModel train_sequence(FlowModel model, const TendencyDataset& ds, std::uint64_t seed) {
  detail::require(model.has_base_ar1(), "train_sequence: model must be the base_ar1 variant");
  const auto segs = detail::make_segments(ds.split.train, model.config.seq_len);
  const auto batch = static_cast<Index>(model.config.batch);
  detail::run_training(model, ds, seed, true, [&](std::mt19937_64& rng) {
    std::vector<std::size_t> order(segs.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<detail::Batch> out;
    detail::Batch cur;
    for (auto si : order) {
      const auto& s = segs[si];
      if (!cur.rows.empty() && static_cast<Index>(cur.rows.size()) + s.length > batch) {
        out.push_back(std::move(cur));
        cur = {};
      }
      cur.segments.push_back({static_cast<Index>(cur.rows.size()), s.length});
      for (Index t = 0; t < s.length; ++t) cur.rows.push_back(s.begin + t);
    }
    if (!cur.rows.empty()) out.push_back(std::move(cur));
    return out;
  });
  return model;
}

/// Per-dimension AR(1) fit to latents inferred on the (time-ordered) training split.
inline LatentAR1 fit_latent_ar1(const FlowModel& m, const TendencyDataset& ds) {
  const auto range = ds.split.train;
  detail::require(range.size() >= 3, "fit_latent_ar1: training split too short");
  const MatrixXd cond = build_conditions(m.config, ds.x);
  const MatrixXd z = infer_latents(m, ds.u_rows(range), cond.middleRows(range.begin, range.size()));
  LatentAR1 out;
  out.rho.resize(z.cols());
  out.sigma_z.resize(z.cols());
  for (Index d = 0; d < z.cols(); ++d) {
    const VectorXd col = z.col(d);
    const double mean = col.mean();
    double var = 0.0, cov = 0.0;
    for (Index t = 0; t < col.size(); ++t) {
      var += (col[t] - mean) * (col[t] - mean);
      if (t + 1 < col.size()) cov += (col[t] - mean) * (col[t + 1] - mean);
    }
    if (!(var > 0)) throw numerical_error("fit_latent_ar1: zero-variance latent dimension");
    out.rho[d] = cov / var;
    out.sigma_z[d] = std::sqrt(var / static_cast<double>(col.size()));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

enum class LatentMode { iid, ar1 };

inline std::string to_string(LatentMode m) { return m == LatentMode::iid ? "iid" : "ar1"; }

inline LatentMode parse_latent_mode(const std::string& s) {
  if (s == "iid" || s == "gaussian") return LatentMode::iid;
  if (s == "ar1") return LatentMode::ar1;
  throw precondition_error("unknown latent mode '" + s + "'");
}

/// Latent sequence for one trajectory. The first draw is N(0, I) in both modes;
/// AR(1) mode then propagates z_t = rho z_{t-1} + sigma_z sqrt(1-rho^2) eps_t.
class LatentProcess {
 public:
  LatentProcess() = default;
  LatentProcess(LatentMode mode, int dim, std::optional<LatentAR1> ar1 = std::nullopt)
      : mode_(mode), z_(VectorXd::Zero(dim)) {
    if (mode == LatentMode::ar1) {
      detail::require(ar1.has_value(), "LatentProcess: AR(1) mode needs parameters");
      ar1_ = *ar1;
      innov_ = ar1_.sigma_z.array() * (1.0 - ar1_.rho.array().square()).sqrt();
    }
  }

  const VectorXd& next(NoiseStream& noise) {
    for (Index d = 0; d < z_.size(); ++d) {
      const double eps = noise.normal();
      if (mode_ == LatentMode::iid || !started_) {
        z_[d] = eps;
      } else {
        z_[d] = ar1_.rho[d] * z_[d] + innov_[d] * eps;
      }
    }
    started_ = true;
    return z_;
  }

 private:
  LatentMode mode_ = LatentMode::iid;
  LatentAR1 ar1_;
  VectorXd innov_;
  VectorXd z_;
  bool started_ = false;
};

/// One conditional draw U ~ g(Z, c) for a single condition vector.
inline VectorXd sample(const FlowModel& m, const VectorXd& cond_raw, LatentProcess& latent, NoiseStream& noise) {
  const VectorXd& z = latent.next(noise);
  return generate(m, z.transpose(), cond_raw.transpose()).row(0).transpose();
}

/// Reduced-model closure backed by a trained flow. Each realization owns its
/// noise stream, latent process and conditioning history.
class FlowClosure final : public Closure {
 public:
  FlowClosure(std::shared_ptr<const FlowModel> model, LatentMode mode)
      : model_(std::move(model)), mode_(mode) {
    if (mode_ == LatentMode::ar1) ar1_ = model_->sampling_ar1();
  }

  std::string kind() const override { return "flow"; }
  bool stochastic() const override { return true; }

  void reset(std::span<const std::uint64_t> seeds) override {
    const int K = model_->config.dim;
    noise_.clear();
    latent_.clear();
    history_.clear();
    for (auto s : seeds) {
      noise_.emplace_back(s);
      latent_.emplace_back(mode_, K, ar1_);
      history_.emplace_back();
    }
  }

  void evaluate(const Matrix& x, Matrix& u) override {
    const auto B = x.rows();
    detail::require(static_cast<std::size_t>(B) == noise_.size(),
                    "FlowClosure: batch size differs from number of realizations");
    const auto& cfg = model_->config;
    detail::require(x.cols() == cfg.dim, "FlowClosure: state dimension mismatch");
    MatrixXd cond(B, cfg.cond_dim());
    MatrixXd z(B, cfg.dim);
    const auto L = static_cast<std::size_t>(cfg.history_len());
    for (Index r = 0; r < B; ++r) {
      auto& h = history_[static_cast<std::size_t>(r)];
      h.push_front(x.row(r).transpose());
      if (h.size() > L) h.pop_back();
      for (std::size_t lag = 0; lag < L; ++lag) {
        cond.block(r, static_cast<Index>(lag) * cfg.dim, 1, cfg.dim) =
            h[std::min(lag, h.size() - 1)].transpose();
      }
      z.row(r) = latent_[static_cast<std::size_t>(r)].next(noise_[static_cast<std::size_t>(r)]).transpose();
    }
    u = generate(*model_, z, cond);
  }

  std::unique_ptr<Closure> clone() const override { return std::make_unique<FlowClosure>(model_, mode_); }

  const FlowModel& model() const { return *model_; }
  LatentMode mode() const { return mode_; }

 private:
  std::shared_ptr<const FlowModel> model_;
  LatentMode mode_;
  std::optional<LatentAR1> ar1_;
  std::vector<NoiseStream> noise_;
  std::vector<LatentProcess> latent_;
  std::vector<std::deque<VectorXd>> history_;
};

}  // namespace l96

#endif  // L96_FLOWS_HPP_
