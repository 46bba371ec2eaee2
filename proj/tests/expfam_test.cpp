#include <cmath>
#include <numbers>
#include <random>

#include <gtest/gtest.h>

#include "demvae/expfam.hpp"

using namespace demvae;

namespace {

// Textbook diagonal Gaussian log-density, written independently of the
// natural-parameter form.
double textbook_gaussian_logpdf(const std::vector<double>& mean, const std::vector<double>& var,
                                const std::vector<double>& z) {
  double lp = 0.0;
  for (std::size_t d = 0; d < z.size(); ++d) {
    const double r = z[d] - mean[d];
    lp += -0.5 * std::log(2.0 * std::numbers::pi * var[d]) - r * r / (2.0 * var[d]);
  }
  return lp;
}

std::vector<double> vec(const NaturalParams& n) { return {n.values().begin(), n.values().end()}; }

}  // namespace

TEST(GaussianToNatural, KnownValues) {
  EXPECT_EQ(vec(gaussian_to_natural({{0.0}, {1.0}})), (std::vector<double>{0.0, -0.5}));
  EXPECT_EQ(vec(gaussian_to_natural({{2.0}, {0.5}})), (std::vector<double>{4.0, -1.0}));
}

TEST(GaussianToNatural, RejectsNonPositiveVariance) {
  EXPECT_THROW(GaussianMeanParams({0.0}, {0.0}), std::domain_error);
  EXPECT_THROW(GaussianMeanParams({0.0}, {-1.0}), std::domain_error);
}

TEST(NaturalToGaussian, KnownValues) {
  auto a = natural_to_gaussian({Family::kGaussianDiag, {0.0, -0.5}});
  EXPECT_DOUBLE_EQ(a.mean[0], 0.0);
  EXPECT_DOUBLE_EQ(a.variance[0], 1.0);
  auto b = natural_to_gaussian({Family::kGaussianDiag, {4.0, -1.0}});
  EXPECT_DOUBLE_EQ(b.mean[0], 2.0);
  EXPECT_DOUBLE_EQ(b.variance[0], 0.5);
  auto c = natural_to_gaussian({Family::kGaussianDiag, {1.0, -0.5}});
  EXPECT_DOUBLE_EQ(c.mean[0], 1.0);
  EXPECT_DOUBLE_EQ(c.variance[0], 1.0);
}

TEST(NaturalParams, RejectsInvalidGaussianParameters) {
  EXPECT_THROW(NaturalParams(Family::kGaussianDiag, {1.0, 0.0}), std::domain_error);
  EXPECT_THROW(NaturalParams(Family::kGaussianDiag, {1.0, 0.5}), std::domain_error);
  EXPECT_THROW(NaturalParams(Family::kGaussianDiag, {1.0}), std::domain_error);
  EXPECT_THROW(NaturalParams(Family::kBernoulli, {NAN}), std::domain_error);
}

TEST(NaturalToGaussian, RoundTripRandom) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> mean(-20.0, 20.0), log_var(-6.0, 6.0);
  for (int t = 0; t < 1000; ++t) {
    std::vector<double> m(3), v(3);
    for (int d = 0; d < 3; ++d) {
      m[d] = mean(rng);
      v[d] = std::exp(log_var(rng));
    }
    const auto back = natural_to_gaussian(gaussian_to_natural({m, v}));
    for (int d = 0; d < 3; ++d) {
      EXPECT_NEAR(back.mean[d], m[d], 1e-12 * std::max(1.0, std::abs(m[d])));
      EXPECT_NEAR(back.variance[d] / v[d], 1.0, 1e-12);
    }
  }
}

TEST(Bernoulli, ConversionsAndClamp) {
  EXPECT_NEAR(bernoulli_to_natural(BernoulliMeanParams({0.5}))[0], 0.0, 1e-15);
  EXPECT_NEAR(natural_to_bernoulli({Family::kBernoulli, {std::log(3.0)}}).p[0], 0.75, 1e-15);
  // Endpoints are clamped so the logit stays finite.
  EXPECT_TRUE(std::isfinite(bernoulli_to_natural(BernoulliMeanParams({0.0}))[0]));
  EXPECT_TRUE(std::isfinite(bernoulli_to_natural(BernoulliMeanParams({1.0}))[0]));
  EXPECT_THROW(BernoulliMeanParams({1.5}), std::domain_error);
}

TEST(Categorical, MinimalParameterization) {
  const std::vector<double> p{0.2, 0.3, 0.5};
  const auto n = categorical_to_natural(p);
  ASSERT_EQ(n.size(), 2u);
  EXPECT_NEAR(n[0], std::log(0.2 / 0.5), 1e-14);
  const auto back = natural_to_categorical(n);
  for (int c = 0; c < 3; ++c) EXPECT_NEAR(back[c], p[c], 1e-14);
  EXPECT_NEAR(log_partition(n), -std::log(0.5), 1e-14);
}

TEST(LogPartition, KnownValues) {
  EXPECT_DOUBLE_EQ(log_partition({Family::kGaussianDiag, {0.0, -0.5}}), 0.0);
  EXPECT_DOUBLE_EQ(log_partition({Family::kGaussianDiag, {1.0, -0.5}}), 0.5);
  EXPECT_NEAR(log_partition({Family::kBernoulli, {0.0}}), 0.693147180559945, 1e-12);
}

TEST(LogPartition, BernoulliStableAtExtremeLogits) {
  EXPECT_NEAR(log_partition({Family::kBernoulli, {800.0}}), 800.0, 1e-9);
  EXPECT_NEAR(log_partition({Family::kBernoulli, {-800.0}}), 0.0, 1e-300);
}

TEST(GradLogPartition, KnownValues) {
  const auto g = grad_log_partition({Family::kGaussianDiag, {0.0, -0.5}});
  EXPECT_DOUBLE_EQ(g[0], 0.0);
  EXPECT_DOUBLE_EQ(g[1], 1.0);
  EXPECT_DOUBLE_EQ(grad_log_partition({Family::kBernoulli, {0.0}})[0], 0.5);
}

TEST(GradLogPartition, MatchesCentralDifferences) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> mean(-3.0, 3.0), log_var(-1.0, 1.0), logit(-6.0, 6.0), u(0.05, 1.0);
  const double h = 1e-5;
  for (int t = 0; t < 200; ++t) {
    std::vector<NaturalParams> cases;
    cases.push_back(gaussian_to_natural({{mean(rng), mean(rng)}, {std::exp(log_var(rng)), std::exp(log_var(rng))}}));
    cases.emplace_back(Family::kBernoulli, std::vector<double>{logit(rng), logit(rng)});
    cases.push_back(categorical_to_natural(std::vector<double>{u(rng), u(rng), u(rng)}));
    for (const auto& n : cases) {
      const auto g = grad_log_partition(n);
      for (std::size_t i = 0; i < n.size(); ++i) {
        auto up = vec(n), down = vec(n);
        up[i] += h;
        down[i] -= h;
        const double fd = (log_partition({n.family(), up}) - log_partition({n.family(), down})) / (2 * h);
        EXPECT_LE(std::abs(g[i] - fd) / std::max({1.0, std::abs(g[i]), std::abs(fd)}), 1e-6)
            << to_string(n.family()) << " index " << i;
      }
    }
  }
}

TEST(GradLogPartition, EqualsExpectedSufficientStatistics) {
  // grad A is the mean of phi(z) = (z, z^2).
  const auto g = grad_log_partition(gaussian_to_natural({{1.5}, {0.25}}));
  EXPECT_NEAR(g[0], 1.5, 1e-14);
  EXPECT_NEAR(g[1], 1.5 * 1.5 + 0.25, 1e-14);
}

TEST(LogDensity, KnownValues) {
  EXPECT_NEAR(log_density({Family::kGaussianDiag, {0.0, -0.5}}, std::vector<double>{0.0}), -0.918938533204673, 1e-12);
  EXPECT_NEAR(log_density({Family::kBernoulli, {0.0}}, std::vector<double>{1.0}), std::log(0.5), 1e-15);
}

TEST(LogDensity, MatchesTextbookGaussian) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> normal;
  std::uniform_real_distribution<double> log_var(-2.0, 2.0);
  for (int t = 0; t < 500; ++t) {
    std::vector<double> m(4), v(4), z(4);
    for (int d = 0; d < 4; ++d) {
      m[d] = 3.0 * normal(rng);
      v[d] = std::exp(log_var(rng));
      z[d] = 3.0 * normal(rng);
    }
    const double expected = textbook_gaussian_logpdf(m, v, z);
    EXPECT_NEAR(log_density(gaussian_to_natural({m, v}), z), expected, 1e-10 * std::max(1.0, std::abs(expected)));
  }
}

TEST(LogDensity, CategoricalIndex) {
  const auto n = categorical_to_natural(std::vector<double>{0.1, 0.6, 0.3});
  EXPECT_NEAR(log_density(n, std::vector<double>{1.0}), std::log(0.6), 1e-14);
  EXPECT_NEAR(log_density(n, std::vector<double>{2.0}), std::log(0.3), 1e-14);
}

TEST(LogDensity, DimensionMismatchThrows) {
  EXPECT_THROW(log_density({Family::kGaussianDiag, {0.0, -0.5}}, std::vector<double>{0.0, 1.0}), ShapeError);
}

TEST(SufficientStatistics, Layout) {
  EXPECT_EQ(sufficient_statistics(Family::kGaussianDiag, std::vector<double>{2.0, -1.0}, 4),
            (std::vector<double>{2.0, 4.0, -1.0, 1.0}));
  EXPECT_EQ(sufficient_statistics(Family::kBernoulli, std::vector<double>{1.0, 0.0}, 2), (std::vector<double>{1.0, 0.0}));
}

TEST(KlGaussian, KnownValues) {
  EXPECT_DOUBLE_EQ(kl_gaussian({{0.0}, {1.0}}, {{0.0}, {1.0}}), 0.0);
  EXPECT_DOUBLE_EQ(kl_gaussian({{1.0}, {1.0}}, {{0.0}, {1.0}}), 0.5);
  EXPECT_NEAR(kl_gaussian({{0.0}, {2.0}}, {{0.0}, {1.0}}), 0.5 * (2.0 - 1.0 - std::log(2.0)), 1e-15);
  EXPECT_NEAR(kl_gaussian({{0.0}, {2.0}}, {{0.0}, {1.0}}), 0.153426, 1e-6);
}

TEST(KlGaussian, MatchesMonteCarlo) {
  const GaussianMeanParams q({0.3, -1.0}, {0.7, 2.0}), p({1.0, 0.5}, {1.5, 0.8});
  std::mt19937_64 rng(9);
  std::normal_distribution<double> normal;
  const auto qn = gaussian_to_natural(q), pn = gaussian_to_natural(p);
  const int n = 200000;
  double sum = 0.0, sum2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const auto z = sample_gaussian(q, std::vector<double>{normal(rng), normal(rng)});
    const double v = log_density(qn, z) - log_density(pn, z);
    sum += v;
    sum2 += v * v;
  }
  const double mean = sum / n, se = std::sqrt((sum2 / n - mean * mean) / n);
  EXPECT_NEAR(kl_gaussian(q, p), mean, 4 * se);
}

TEST(SampleGaussian, KnownValues) {
  EXPECT_EQ(sample_gaussian({{1.5}, {3.0}}, std::vector<double>{0.0}), std::vector<double>{1.5});
  EXPECT_DOUBLE_EQ(sample_gaussian({{0.0}, {4.0}}, std::vector<double>{1.0})[0], 2.0);
}

TEST(SampleGaussian, EmpiricalMoments) {
  const GaussianMeanParams m({-2.0}, {3.0});
  std::mt19937_64 rng(1);
  std::normal_distribution<double> normal;
  const int n = 1000000;
  double sum = 0.0, sum2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double z = sample_gaussian(m, std::vector<double>{normal(rng)})[0];
    sum += z;
    sum2 += z * z;
  }
  const double mean = sum / n, var = sum2 / n - mean * mean;
  EXPECT_NEAR(mean, -2.0, 4 * std::sqrt(3.0 / n));
  // Var of the sample variance of a Gaussian is 2 sigma^4 / n.
  EXPECT_NEAR(var, 3.0, 4 * std::sqrt(2.0 * 9.0 / n));
}
