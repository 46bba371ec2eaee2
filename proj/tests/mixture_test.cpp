#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "demvae/checks.hpp"
#include "demvae/mixture.hpp"

using namespace demvae;

namespace {

NaturalParams gauss(double mean, double var) { return gaussian_to_natural({{mean}, {var}}); }

// Scalar "family" for the weighted-variance examples: a Bernoulli logit is an
// unconstrained single natural parameter.
NaturalParams scalar(double eta) { return {Family::kBernoulli, {eta}}; }

CategoricalPosterior uniform2() { return CategoricalPosterior({{0.5, 0.5}}); }

// Bernoulli dispersion in closed form: -log(prod p^q + prod (1-p)^q).
double bernoulli_dispersion_oracle(const std::vector<double>& p, const std::vector<double>& q) {
  double a = 1.0, b = 1.0;
  for (std::size_t c = 0; c < p.size(); ++c) {
    a *= std::pow(p[c], q[c]);
    b *= std::pow(1.0 - p[c], q[c]);
  }
  return -std::log(a + b);
}

}  // namespace

TEST(CategoricalPosterior, Validation) {
  EXPECT_THROW(CategoricalPosterior({{0.5, 0.6}}), std::domain_error);
  EXPECT_THROW(CategoricalPosterior({{-0.1, 1.1}}), std::domain_error);
  EXPECT_NO_THROW(CategoricalPosterior({{0.25, 0.75}, {1.0, 0.0}}));
}

TEST(MixturePrior, RejectsMixedFamilies) {
  EXPECT_THROW(MixturePrior(MixturePrior::Block{gauss(0, 1), scalar(0.0)}), ShapeError);
  EXPECT_THROW(MixturePrior(std::vector<MixturePrior::Block>{}), std::invalid_argument);
}

TEST(AveragedParams, Examples) {
  const MixturePrior same(MixturePrior::Block{gauss(1.0, 2.0), gauss(1.0, 2.0)});
  const auto bar_same = averaged_params(same, uniform2(), 0);
  EXPECT_EQ(bar_same, same.block(0)[0]);

  const MixturePrior two(MixturePrior::Block{{Family::kGaussianDiag, {-1.0, -0.5}}, {Family::kGaussianDiag, {1.0, -0.5}}});
  const auto bar = averaged_params(two, uniform2(), 0);
  EXPECT_DOUBLE_EQ(bar[0], 0.0);
  EXPECT_DOUBLE_EQ(bar[1], -0.5);

  const auto one_hot = averaged_params(two, CategoricalPosterior({{0.0, 1.0}}), 0);
  EXPECT_EQ(one_hot, two.block(0)[1]);
}

TEST(AveragedParams, BadBlockThrows) {
  const MixturePrior two(MixturePrior::Block{gauss(0, 1), gauss(1, 1)});
  EXPECT_THROW(averaged_params(two, uniform2(), 1), std::out_of_range);
  EXPECT_THROW(averaged_params(two, CategoricalPosterior(std::vector<std::vector<double>>{{1.0}}), 0), ShapeError);
}

TEST(DispersionTerm, EqualComponentsVanish) {
  const MixturePrior same(MixturePrior::Block{gauss(0.7, 0.3), gauss(0.7, 0.3), gauss(0.7, 0.3)});
  EXPECT_LT(std::abs(dispersion_term(same, CategoricalPosterior({{0.2, 0.3, 0.5}}))), 1e-10);
}

TEST(DispersionTerm, GaussianKnownSigma) {
  const MixturePrior two(MixturePrior::Block{gauss(-1.0, 1.0), gauss(1.0, 1.0)});
  EXPECT_NEAR(dispersion_term(two, uniform2()), 0.5, 1e-10);
}

TEST(DispersionTerm, GaussianKnownSigmaGeneralWeights) {
  // Equal variances: L_d = Var_q(mu) / (2 sigma^2).
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-3.0, 3.0), v(0.2, 3.0);
  for (int t = 0; t < 100; ++t) {
    const double var = v(rng);
    const std::vector<double> mu{u(rng), u(rng), u(rng)};
    const auto q = random_simplex(3, rng);
    const MixturePrior prior(MixturePrior::Block{gauss(mu[0], var), gauss(mu[1], var), gauss(mu[2], var)});
    double m = 0.0, m2 = 0.0;
    for (int c = 0; c < 3; ++c) {
      m += q[c] * mu[c];
      m2 += q[c] * mu[c] * mu[c];
    }
    EXPECT_NEAR(dispersion_term(prior, CategoricalPosterior({q})), (m2 - m * m) / (2 * var), 1e-10);
  }
}

TEST(DispersionTerm, BernoulliExample) {
  const MixturePrior two(MixturePrior::Block{bernoulli_to_natural(BernoulliMeanParams({0.2})),
                                             bernoulli_to_natural(BernoulliMeanParams({0.8}))});
  EXPECT_NEAR(dispersion_term(two, uniform2()), -std::log(0.8), 1e-10);
  EXPECT_NEAR(dispersion_term(two, uniform2()), 0.223144, 1e-6);
}

TEST(DispersionTerm, BernoulliMatchesClosedForm) {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> p(0.01, 0.99);
  for (int t = 0; t < 200; ++t) {
    const std::vector<double> probs{p(rng), p(rng), p(rng), p(rng)};
    const auto q = random_simplex(4, rng);
    MixturePrior::Block block;
    for (double x : probs) block.push_back(bernoulli_to_natural(BernoulliMeanParams({x})));
    EXPECT_NEAR(dispersion_term(MixturePrior(block), CategoricalPosterior({q})), bernoulli_dispersion_oracle(probs, q),
                1e-12);
  }
}

TEST(DispersionTerm, SumsOverBlocks) {
  const MixturePrior two(std::vector<MixturePrior::Block>{{gauss(-1.0, 1.0), gauss(1.0, 1.0)},
                                                         {gauss(-1.0, 1.0), gauss(1.0, 1.0)}});
  EXPECT_NEAR(dispersion_term(two, CategoricalPosterior({{0.5, 0.5}, {0.5, 0.5}})), 1.0, 1e-10);
}

TEST(WeightedVariance, Examples) {
  const MixturePrior same(MixturePrior::Block{scalar(3.0), scalar(3.0)});
  EXPECT_DOUBLE_EQ(weighted_variance(same, uniform2()), 0.0);
  const MixturePrior two(MixturePrior::Block{scalar(0.0), scalar(2.0)});
  EXPECT_DOUBLE_EQ(weighted_variance(two, uniform2()), 1.0);
  EXPECT_DOUBLE_EQ(weighted_variance(two, CategoricalPosterior({{1.0, 0.0}})), 0.0);
}

TEST(WeightedVariance, MatchesMomentFormula) {
  std::mt19937_64 rng(2);
  for (int t = 0; t < 100; ++t) {
    const auto prior = random_gaussian_prior(4, 2, rng);
    const auto q = random_simplex(4, rng);
    double expected = 0.0;
    for (std::size_t i = 0; i < 4; ++i) {
      double m = 0.0, m2 = 0.0;
      for (std::size_t c = 0; c < 4; ++c) {
        m += q[c] * prior.block(0)[c][i];
        m2 += q[c] * prior.block(0)[c][i] * prior.block(0)[c][i];
      }
      expected += m2 - m * m;
    }
    EXPECT_NEAR(weighted_variance(prior, CategoricalPosterior({q})), expected, 1e-10);
  }
}

TEST(GradDispersion, Examples) {
  const MixturePrior same(MixturePrior::Block{gauss(1.0, 0.5), gauss(1.0, 0.5)});
  for (double g : grad_dispersion(same, uniform2(), 0, 0)) EXPECT_EQ(g, 0.0);
  const MixturePrior two(MixturePrior::Block{gauss(-1.0, 1.0), gauss(2.0, 0.5)});
  for (double g : grad_dispersion(two, CategoricalPosterior({{0.0, 1.0}}), 0, 0)) EXPECT_EQ(g, 0.0);
  EXPECT_THROW(grad_dispersion(two, uniform2(), 0, 2), std::out_of_range);
}

TEST(GradWeightedVariance, Examples) {
  const MixturePrior same(MixturePrior::Block{scalar(1.0), scalar(1.0)});
  EXPECT_EQ(grad_weighted_variance(same, uniform2(), 0, 0)[0], 0.0);
  const MixturePrior two(MixturePrior::Block{scalar(0.0), scalar(2.0)});
  EXPECT_DOUBLE_EQ(grad_weighted_variance(two, uniform2(), 0, 1)[0], 1.0);
}

TEST(Gradients, MatchFiniteDifferences) {
  std::mt19937_64 rng(13);
  const double h = 1e-5;
  for (int t = 0; t < 200; ++t) {
    auto [prior, qc] = random_mixture(rng);
    for (std::size_t c = 0; c < prior.num_components(0); ++c) {
      const auto gd = grad_dispersion(prior, qc, 0, c);
      const auto gv = grad_weighted_variance(prior, qc, 0, c);
      for (std::size_t i = 0; i < gd.size(); ++i) {
        auto shifted = [&](double delta) {
          auto block = prior.block(0);
          std::vector<double> v(block[c].values().begin(), block[c].values().end());
          v[i] += delta;
          block[c] = NaturalParams(block[c].family(), v);
          return MixturePrior(block);
        };
        const auto up = shifted(h), down = shifted(-h);
        const double fd_d = (dispersion_term(up, qc) - dispersion_term(down, qc)) / (2 * h);
        const double fd_v = (weighted_variance(up, qc) - weighted_variance(down, qc)) / (2 * h);
        EXPECT_LE(relative_error(gd[i], fd_d), 1e-6) << describe(prior, qc);
        EXPECT_LE(relative_error(gv[i], fd_v), 1e-6) << describe(prior, qc);
      }
    }
  }
}

TEST(Gradients, InnerProductNonNegative) {
  std::mt19937_64 rng(21);
  for (int t = 0; t < 2000; ++t) {
    auto [prior, qc] = random_mixture(rng);
    for (std::size_t c = 0; c < prior.num_components(0); ++c) {
      const auto gd = grad_dispersion(prior, qc, 0, c);
      const auto gv = grad_weighted_variance(prior, qc, 0, c);
      double dot = 0.0;
      for (std::size_t i = 0; i < gd.size(); ++i) dot += gd[i] * gv[i];
      EXPECT_GE(dot, -1e-12);
    }
  }
}

TEST(RzClosedForm, Examples) {
  const GaussianMeanParams q({0.0}, {1.0});
  const auto collapsed = r_z_closed_form(q, MixturePrior(MixturePrior::Block{gauss(0, 1), gauss(0, 1)}), uniform2());
  EXPECT_NEAR(collapsed.r_z, 0.0, 1e-15);
  EXPECT_NEAR(collapsed.avg_kl, 0.0, 1e-15);
  EXPECT_NEAR(collapsed.l_d, 0.0, 1e-15);
  const auto split = r_z_closed_form(q, MixturePrior(MixturePrior::Block{gauss(-1, 1), gauss(1, 1)}), uniform2());
  EXPECT_NEAR(split.r_z, -0.5, 1e-12);
  EXPECT_NEAR(split.avg_kl, 0.0, 1e-12);
  EXPECT_NEAR(split.l_d, 0.5, 1e-12);
}

TEST(RzClosedForm, EqualsExpectedComponentKl) {
  // R_z = -E_q(c) KL(q(z) || p(z|c)): an independent route through per-component KLs.
  std::mt19937_64 rng(17);
  for (int t = 0; t < 200; ++t) {
    const auto prior = random_gaussian_prior(3, 2, rng);
    const auto w = random_simplex(3, rng);
    const auto q = natural_to_gaussian(random_gaussian_prior(1, 2, rng).block(0)[0]);
    double expected = 0.0;
    for (std::size_t c = 0; c < 3; ++c) expected -= w[c] * kl_gaussian(q, natural_to_gaussian(prior.block(0)[c]));
    const auto r = r_z_closed_form(q, prior, CategoricalPosterior({w}));
    EXPECT_NEAR(r.r_z, expected, 1e-10 * std::max(1.0, std::abs(expected)));
    EXPECT_EQ(r.r_z, -r.avg_kl - r.l_d);
  }
}

TEST(RzClosedForm, RejectsNonGaussian) {
  const MixturePrior b(MixturePrior::Block{scalar(0.0), scalar(1.0)});
  EXPECT_THROW(r_z_closed_form(GaussianMeanParams({0.0}, {1.0}), b, uniform2()), std::domain_error);
}

TEST(RzMonteCarlo, ComponentsEqualToPosterior) {
  const GaussianMeanParams q({0.4, -1.0}, {0.8, 1.5});
  const auto eta = gaussian_to_natural(q);
  const auto est = r_z_monte_carlo(q, MixturePrior(MixturePrior::Block{eta, eta}), uniform2(), 10000, 3);
  EXPECT_NEAR(est.estimate, 0.0, 3 * est.std_error + 1e-12);
}

TEST(RzMonteCarlo, MatchesClosedFormTwoComponents) {
  const GaussianMeanParams q({0.3}, {0.6});
  const MixturePrior prior(MixturePrior::Block{gauss(-1.0, 1.0), gauss(1.5, 0.7)});
  const CategoricalPosterior qc({{0.35, 0.65}});
  const auto est = r_z_monte_carlo(q, prior, qc, 1000000, 42);
  EXPECT_NEAR(est.estimate, r_z_closed_form(q, prior, qc).r_z, 3 * est.std_error);
}

TEST(RzMonteCarlo, Deterministic) {
  const GaussianMeanParams q({0.3}, {0.6});
  const MixturePrior prior(MixturePrior::Block{gauss(-1.0, 1.0), gauss(1.5, 0.7)});
  const auto a = r_z_monte_carlo(q, prior, uniform2(), 1000, 5);
  const auto b = r_z_monte_carlo(q, prior, uniform2(), 1000, 5);
  EXPECT_EQ(a.estimate, b.estimate);
  EXPECT_EQ(a.std_error, b.std_error);
}
