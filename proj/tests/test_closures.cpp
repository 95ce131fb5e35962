#include "l96/closures.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <vector>

namespace l96 {
namespace {

std::vector<double> linspace(double a, double b, int n) {
  std::vector<double> v(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) v[static_cast<std::size_t>(i)] = a + (b - a) * i / (n - 1);
  return v;
}

TEST(CubicLsq, ExactOnNoiselessData) {
  const auto x = linspace(-10, 15, 400);
  std::vector<double> u;
  for (double v : x) u.push_back(0.1 * v * v * v - 0.2 * v * v + 1.5 * v + 3);
  const CubicCoeffs c = fit_cubic_lsq(x, u);
  EXPECT_NEAR(c.a, 0.1, 1e-8);
  EXPECT_NEAR(c.b, -0.2, 1e-8);
  EXPECT_NEAR(c.c, 1.5, 1e-8);
  EXPECT_NEAR(c.d, 3.0, 1e-8);
}

TEST(CubicLsq, ConstantData) {
  const auto x = linspace(-5, 5, 50);
  const std::vector<double> u(x.size(), 5.0);
  const CubicCoeffs c = fit_cubic_lsq(x, u);
  EXPECT_NEAR(c.a, 0, 1e-12);
  EXPECT_NEAR(c.b, 0, 1e-12);
  EXPECT_NEAR(c.c, 0, 1e-12);
  EXPECT_NEAR(c.d, 5, 1e-12);
}

TEST(CubicLsq, RankDeficientRejected) {
  const std::vector<double> x{1, 2, 3, 1, 2, 3};
  const std::vector<double> u{1, 2, 3, 4, 5, 6};
  EXPECT_THROW(fit_cubic_lsq(x, u), rank_deficient_error);
}

TEST(EvalCubic, HornerMatchesPowers) {
  const CubicCoeffs c{0.3, -1.1, 2.5, 0.7};
  NoiseStream noise(1);
  Vector x(50);
  for (auto& v : x) v = 10 * noise.normal();
  const Vector u = eval_cubic(c, x);
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double v = x[i];
    EXPECT_NEAR(u[i], 0.3 * std::pow(v, 3) - 1.1 * std::pow(v, 2) + 2.5 * v + 0.7, 1e-12 * std::max(1.0, std::abs(u[i])));
  }
  EXPECT_EQ(eval_cubic({1, 0, 0, 0}, Vector::Constant(3, 2.0)), Vector::Constant(3, 8.0));
  EXPECT_EQ(eval_cubic({0, 0, 0, -4}, x), Vector::Constant(x.size(), -4.0));
}

TEST(Ar1Fit, RecoversParameters) {
  const auto e = oracle::simulate_ar1(0.9, 1.0, 100000, 17);
  const Matrix series = Eigen::Map<const Matrix>(e.data(), static_cast<Eigen::Index>(e.size()), 1);
  const AR1Params a = fit_ar1(series);
  EXPECT_NEAR(a.rho, 0.9, 0.02);
  EXPECT_NEAR(a.sigma_e, 1.0, 0.02);
}

TEST(Ar1Fit, WhiteNoise) {
  const long T = 50000;
  const auto e = oracle::simulate_ar1(0.0, 2.0, T, 5);
  const AR1Params a = fit_ar1(Eigen::Map<const Matrix>(e.data(), T, 1));
  EXPECT_LT(std::abs(a.rho), 3 / std::sqrt(static_cast<double>(T)));
  EXPECT_NEAR(a.sigma_e, 2.0, 0.04);
}

TEST(Ar1Fit, ZeroVarianceRejected) {
  EXPECT_THROW(fit_ar1(Matrix::Constant(10, 2, 3.0)), numerical_error);
}

TEST(Ar1Step, Limits) {
  NoiseStream a(3), b(3);
  const Vector prev = Vector::LinSpaced(4, 1, 4);
  const Vector white = ar1_step(prev, {0.0, 2.0}, a);
  for (Eigen::Index k = 0; k < 4; ++k) EXPECT_DOUBLE_EQ(white[k], 2.0 * b.normal());
  NoiseStream c(3);
  EXPECT_EQ(ar1_step(prev, {0.7, 0.0}, c), 0.7 * prev);
}

TEST(Ar1Step, StationaryVariance) {
  NoiseStream noise(8);
  const AR1Params p{0.8, 1.3};
  Vector e = Vector::Zero(1);
  double s = 0, ss = 0;
  const long T = 1000000;
  for (long t = 0; t < T; ++t) {
    e = ar1_step(e, p, noise);
    s += e[0];
    ss += e[0] * e[0];
  }
  const double var = ss / T - (s / T) * (s / T);
  EXPECT_NEAR(var / (1.3 * 1.3), 1.0, 0.02);
}

TEST(Bayesian, PosteriorMeanMatchesLsqOnCleanData) {
  const auto x = linspace(-8, 12, 2000);
  std::vector<double> u;
  for (double v : x) u.push_back(-0.01 * v * v * v + 0.05 * v * v + 0.9 * v + 1.0);
  NigPrior vague;
  vague.cov_scale *= 1e6;
  const BayesPosterior post = fit_bayesian_posterior(x, u, vague);
  const CubicCoeffs ls = fit_cubic_lsq(x, u);
  EXPECT_NEAR(post.mean[0], ls.a, 1e-6);
  EXPECT_NEAR(post.mean[1], ls.b, 1e-6);
  EXPECT_NEAR(post.mean[2], ls.c, 1e-6);
  EXPECT_NEAR(post.mean[3], ls.d, 1e-6);
}

std::pair<std::vector<double>, std::vector<double>> noisy_cubic(int n, std::uint64_t seed, double noise_sd) {
  NoiseStream noise(seed);
  std::vector<double> x, u;
  for (int i = 0; i < n; ++i) {
    const double v = -2 + 4 * noise.uniform();
    x.push_back(v);
    u.push_back(0.5 * v * v * v - v * v + 0.3 * v + 1 + noise_sd * noise.normal());
  }
  return {x, u};
}

TEST(Bayesian, MatchesMetropolisOracle) {
  const auto [x, u] = noisy_cubic(25, 21, 0.5);
  const NigPrior prior;
  const BayesPosterior post = fit_bayesian_posterior(x, u, prior);
  const auto mh = oracle::metropolis_cubic(x, u, prior, 400000, 20000, 99);
  EXPECT_GT(mh.acceptance, 0.1);
  for (int d = 0; d < 4; ++d) {
    EXPECT_LT(std::abs(mh.mean[d] - post.mean[d]), 3 * mh.std_error[d]) << "coefficient " << d;
  }
}

TEST(Bayesian, PosteriorContracts) {
  const auto [x1, u1] = noisy_cubic(500, 4, 1.0);
  const auto [x2, u2] = noisy_cubic(1000, 4, 1.0);
  const Eigen::Vector4d s1 = fit_bayesian_posterior(x1, u1).coefficient_std();
  const Eigen::Vector4d s2 = fit_bayesian_posterior(x2, u2).coefficient_std();
  for (int d = 0; d < 4; ++d) {
    EXPECT_GT(s1[d] / s2[d], 1.2);
    EXPECT_LT(s1[d] / s2[d], 1.7);
  }
}

TEST(Bayesian, SamplingMonteCarlo) {
  const auto [x, u] = noisy_cubic(200, 6, 1.0);
  const BayesPosterior post = fit_bayesian_posterior(x, u);
  const int n = 100000;
  Eigen::Vector4d s = Eigen::Vector4d::Zero(), ss = Eigen::Vector4d::Zero();
  for (int i = 0; i < n; ++i) {
    const Eigen::Vector4d c = sample_coefficients(post, derive_seed(1, SeedRole::test, {std::uint64_t(i)})).vec();
    s += c;
    ss += c.cwiseAbs2();
  }
  const Eigen::Vector4d mean = s / n;
  const Eigen::Vector4d se = ((ss / n - mean.cwiseAbs2()) / n).cwiseSqrt();
  for (int d = 0; d < 4; ++d) EXPECT_LT(std::abs(mean[d] - post.mean[d]), 3 * se[d]);

  EXPECT_EQ(sample_coefficients(post, 5).vec(), sample_coefficients(post, 5).vec());
  BayesPosterior point = post;
  point.cov_scale.setZero();
  EXPECT_EQ(sample_coefficients(point, 5).vec(), post.mean);
}

TEST(Closures, SeedReproducibility) {
  const CubicCoeffs c{0.01, -0.1, 0.5, 1.0};
  PolyAR1Closure a(c, {0.9, 0.5}), b(c, {0.9, 0.5});
  const std::vector<std::uint64_t> seeds{1, 2, 3};
  a.reset(seeds);
  b.reset(seeds);
  const Matrix x = Matrix::Constant(3, 8, 2.0);
  Matrix ua, ub;
  for (int t = 0; t < 5; ++t) {
    a.evaluate(x, ua);
    b.evaluate(x, ub);
    EXPECT_EQ(ua, ub);
  }
  // Members with different seeds differ.
  EXPECT_NE(ua.row(0), ua.row(1));

  DeterministicClosure d(c);
  d.reset(seeds);
  Matrix ud;
  d.evaluate(x, ud);
  EXPECT_EQ(ud, Matrix::Constant(3, 8, c(2.0)));
}

}  // namespace
}  // namespace l96
