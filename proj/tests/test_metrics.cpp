#include "l96/metrics.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <cmath>

namespace l96 {
namespace {

std::vector<double> normal_sample(long n, double mean, std::uint64_t seed) {
  NoiseStream noise(seed);
  std::vector<double> v(static_cast<std::size_t>(n));
  for (auto& x : v) x = mean + noise.normal();
  return v;
}

TEST(Hellinger, IdenticalHistogramsGiveZero) {
  const auto a = normal_sample(1000, 0, 1);
  const auto e = shared_edges(a, a);
  EXPECT_EQ(hellinger(histogram(a, e), histogram(a, e)), 0.0);
}

TEST(Hellinger, ShiftedGaussians) {
  const auto a = normal_sample(1000000, 0, 2);
  const auto b = normal_sample(1000000, 1, 3);
  const auto e = shared_edges(a, b, 100);
  const double h = hellinger(histogram(a, e), histogram(b, e));
  EXPECT_NEAR(h, std::sqrt(1 - std::exp(-1.0 / 8)), 0.01);
}

TEST(Hellinger, DisjointSupportsGiveOne) {
  const std::vector<double> a{0.0, 0.1, 0.2}, b{5.0, 5.1, 5.2};
  const auto e = shared_edges(a, b, 10);
  EXPECT_NEAR(hellinger(histogram(a, e), histogram(b, e)), 1.0, 1e-12);
}

TEST(Hellinger, MismatchedEdgesRejected) {
  const std::vector<double> a{0.0, 1.0}, b{0.0, 2.0};
  EXPECT_THROW(hellinger(histogram(a, shared_edges(a, a, 4)), histogram(b, shared_edges(b, b, 4))),
               precondition_error);
}

TEST(Ks, SmallExamples) {
  EXPECT_DOUBLE_EQ(ks_statistic(std::vector<double>{1, 2, 3}, std::vector<double>{2, 3, 4}), 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(ks_statistic(std::vector<double>{1, 2}, std::vector<double>{1, 2}), 0.0);
  EXPECT_DOUBLE_EQ(ks_statistic(std::vector<double>{0, 1}, std::vector<double>{5, 6}), 1.0);
}

TEST(Ks, UniformSamplesAgree) {
  NoiseStream n1(1), n2(2);
  std::vector<double> a(20000), b(20000);
  for (auto& v : a) v = n1.uniform();
  for (auto& v : b) v = n2.uniform();
  // 99.9% critical value 1.95 sqrt(2/n).
  EXPECT_LT(ks_statistic(a, b), 1.95 * std::sqrt(2.0 / 20000));
}

EnsembleCube cube_with_truth(int n_init, int J, int T, int K, std::uint64_t seed) {
  EnsembleCube c = oracle::synthetic_cube(n_init, J, 1, T, K, seed, EnsembleMode::mixed);
  NoiseStream noise(seed + 100);
  for (int i = 0; i < n_init; ++i) {
    Matrix tr(T, K);
    for (Eigen::Index q = 0; q < tr.size(); ++q) tr.data()[q] = 2 + 3 * noise.normal();
    c.truth.push_back(tr);
  }
  return c;
}

TEST(Skill, MatchesDirectFormulas) {
  const int n = 3, J = 4, T = 2, K = 3;
  const EnsembleCube c = cube_with_truth(n, J, T, K, 5);
  const double clim = 1.5;
  const SkillSeries s = skill(c, clim);
  for (long t = 0; t < T; ++t) {
    double se = 0, spread = 0, pd = 0, ancr = 0;
    for (int i = 0; i < n; ++i) {
      double dot = 0, na = 0, nb = 0;
      for (int k = 0; k < K; ++k) {
        double mu = 0;
        for (int j = 0; j < J; ++j) mu += c.at(i, j, 0, t, k) / J;
        double v = 0;
        for (int j = 0; j < J; ++j) v += std::pow(c.at(i, j, 0, t, k) - mu, 2) / J;
        spread += v;
        const double truth = c.truth[static_cast<std::size_t>(i)](t, k);
        se += std::pow(mu - truth, 2);
        dot += (mu - clim) * (truth - clim);
        na += std::pow(mu - clim, 2);
        nb += std::pow(truth - clim, 2);
      }
      for (int a = 0; a < J; ++a) {
        for (int b = a + 1; b < J; ++b) {
          double d2 = 0;
          for (int k = 0; k < K; ++k) d2 += std::pow(c.at(i, a, 0, t, k) - c.at(i, b, 0, t, k), 2);
          pd += std::sqrt(d2);
        }
      }
      ancr += dot / std::sqrt(na * nb);
    }
    const double rmse = std::sqrt(se / (n * K));
    const double rms_spread = std::sqrt(spread / (n * K));
    EXPECT_NEAR(s.rmse[t], rmse, 1e-12);
    EXPECT_NEAR(s.spread[t], rms_spread, 1e-12);
    EXPECT_NEAR(s.ancr[t], ancr / n, 1e-12);
    EXPECT_NEAR(s.distance[t], J / (J - 1.0) * rms_spread - J / (J + 1.0) * rmse, 1e-12);
    EXPECT_NEAR(apd(c)[t], pd / (n * J * (J - 1) / 2.0), 1e-12);
  }
}

TEST(Skill, PerfectEnsembleHasZeroError) {
  EnsembleCube c = cube_with_truth(2, 3, 2, 2, 1);
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 3; ++j)
      for (long t = 0; t < 2; ++t)
        for (int k = 0; k < 2; ++k) c.at(i, j, 0, t, k) = c.truth[static_cast<std::size_t>(i)](t, k);
  const SkillSeries s = skill(c, 0.0);
  EXPECT_EQ(s.rmse[1], 0.0);
  EXPECT_NEAR(s.ancr[1], 1.0, 1e-12);
  EXPECT_EQ(s.spread[1], 0.0);
}

TEST(Correlation, Ar1AcfMatchesTheory) {
  const auto e = oracle::simulate_ar1(0.8, 1.0, 200000, 3);
  const auto r = acf(e, 20);
  EXPECT_DOUBLE_EQ(r[0], 1.0);
  for (long tau = 1; tau <= 20; ++tau) EXPECT_NEAR(r[static_cast<std::size_t>(tau)], std::pow(0.8, tau), 0.02);
}

TEST(Correlation, CcfOfShiftedSeries) {
  const auto e = oracle::simulate_ar1(0.5, 1.0, 50000, 4);
  std::vector<double> lead(e.size());
  for (std::size_t t = 0; t + 3 < e.size(); ++t) lead[t] = e[t + 3];
  // b(t) = a(t + 3) => corr(a(t), b(t + tau)) peaks at tau = -3; at tau = 0 it is rho^3.
  const auto c = ccf(e, lead, 5);
  EXPECT_NEAR(c[0], std::pow(0.5, 3), 0.02);
}

TEST(Correlation, ConstantSeriesRejected) {
  const std::vector<double> a(10, 1.0);
  EXPECT_THROW(acf(a, 2), numerical_error);
}

}  // namespace
}  // namespace l96
