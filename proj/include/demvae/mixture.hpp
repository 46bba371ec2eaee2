// Mixture-prior machinery: averaged natural parameters, the dispersion term
// E_q A(eta_c) - A(E_q eta_c), the weighted variance of component parameters,
// their eta-gradients, and the R_z decomposition with a Monte-Carlo check.
#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <vector>

#include "demvae/expfam.hpp"

namespace demvae {

/// K components per block, all sharing family and dimensionality; p(c) is
/// uniform within each block.
class MixturePrior {
 public:
  using Block = std::vector<NaturalParams>;

  explicit MixturePrior(std::vector<Block> blocks) : blocks_(std::move(blocks)) {
    if (blocks_.empty()) throw std::invalid_argument("MixturePrior: no blocks");
    for (const auto& b : blocks_) {
      if (b.empty()) throw std::invalid_argument("MixturePrior: empty block");
      for (const auto& c : b) {
        if (c.family() != b.front().family() || c.size() != b.front().size()) {
          throw ShapeError("MixturePrior: components of a block must share family and dimension");
        }
      }
    }
  }

  /// Single-block convenience constructor.
  explicit MixturePrior(Block block) : MixturePrior(std::vector<Block>{std::move(block)}) {}

  std::size_t num_blocks() const { return blocks_.size(); }
  const Block& block(std::size_t b) const { return blocks_.at(b); }
  std::size_t num_components(std::size_t b) const { return blocks_.at(b).size(); }
  double component_prior(std::size_t b) const { return 1.0 / static_cast<double>(num_components(b)); }

 private:
  std::vector<Block> blocks_;
};

/// q(c|x): one probability vector per block.
class CategoricalPosterior {
 public:
  static constexpr double kSumTolerance = 1e-9;

  explicit CategoricalPosterior(std::vector<std::vector<double>> probs) : probs_(std::move(probs)) {
    for (const auto& p : probs_) {
      double s = 0.0;
      for (double x : p) {
        if (!(x >= 0.0 && x <= 1.0)) throw std::domain_error("CategoricalPosterior: entry outside [0,1]");
        s += x;
      }
      if (std::abs(s - 1.0) > kSumTolerance) throw std::domain_error("CategoricalPosterior: block does not sum to 1");
    }
  }

  static CategoricalPosterior uniform(const MixturePrior& prior) {
    std::vector<std::vector<double>> probs;
    for (std::size_t b = 0; b < prior.num_blocks(); ++b) {
      probs.emplace_back(prior.num_components(b), prior.component_prior(b));
    }
    return CategoricalPosterior(std::move(probs));
  }

  std::size_t num_blocks() const { return probs_.size(); }
  std::span<const double> block(std::size_t b) const { return probs_.at(b); }
  const std::vector<std::vector<double>>& probs() const { return probs_; }

 private:
  std::vector<std::vector<double>> probs_;
};

namespace detail {

inline void check_compatible(const MixturePrior& prior, const CategoricalPosterior& qc) {
  if (qc.num_blocks() != prior.num_blocks()) throw ShapeError("posterior/prior block count mismatch");
  for (std::size_t b = 0; b < prior.num_blocks(); ++b) {
    if (qc.block(b).size() != prior.num_components(b)) throw ShapeError("posterior/prior component count mismatch");
  }
}

}  // namespace detail

/// eta_bar = sum_c q(c|x) eta_c for one block.
inline NaturalParams averaged_params(const MixturePrior& prior, const CategoricalPosterior& qc, std::size_t block) {
  if (block >= prior.num_blocks() || block >= qc.num_blocks()) throw std::out_of_range("averaged_params: block");
  detail::check_compatible(prior, qc);
  const auto& comps = prior.block(block);
  const auto w = qc.block(block);
  std::vector<double> bar(comps.front().size(), 0.0);
  for (std::size_t c = 0; c < comps.size(); ++c) {
    for (std::size_t i = 0; i < bar.size(); ++i) bar[i] += w[c] * comps[c][i];
  }
  // A one-hot weight reproduces the component exactly.
  for (std::size_t c = 0; c < comps.size(); ++c) {
    if (w[c] == 1.0) return comps[c];
  }
  return {comps.front().family(), std::move(bar)};
}

inline double dispersion_term(const MixturePrior& prior, const CategoricalPosterior& qc) {
  detail::check_compatible(prior, qc);
  double total = 0.0;
  for (std::size_t b = 0; b < prior.num_blocks(); ++b) {
    const auto& comps = prior.block(b);
    const auto w = qc.block(b);
    double expected_a = 0.0;
    for (std::size_t c = 0; c < comps.size(); ++c) {
      if (w[c] > 0.0) expected_a += w[c] * log_partition(comps[c]);
    }
    total += expected_a - log_partition(averaged_params(prior, qc, b));
  }
  return total;
}

/// Trace of the q-weighted covariance of component natural parameters,
/// summed over blocks.
inline double weighted_variance(const MixturePrior& prior, const CategoricalPosterior& qc) {
  detail::check_compatible(prior, qc);
  double total = 0.0;
  for (std::size_t b = 0; b < prior.num_blocks(); ++b) {
    const auto& comps = prior.block(b);
    const auto w = qc.block(b);
    const auto bar = averaged_params(prior, qc, b);
    // Centered form avoids the cancellation of E eta^2 - (E eta)^2.
    for (std::size_t c = 0; c < comps.size(); ++c) {
      for (std::size_t i = 0; i < bar.size(); ++i) {
        const double d = comps[c][i] - bar[i];
        total += w[c] * d * d;
      }
    }
  }
  return total;
}

/// Gradient of the dispersion term w.r.t. eta of component c in block b:
/// q(c|x) (grad A(eta_c) - grad A(eta_bar)).
inline std::vector<double> grad_dispersion(const MixturePrior& prior, const CategoricalPosterior& qc, std::size_t block,
                                           std::size_t c) {
  if (block >= prior.num_blocks()) throw std::out_of_range("grad_dispersion: block");
  if (c >= prior.num_components(block)) throw std::out_of_range("grad_dispersion: component");
  const double w = qc.block(block)[c];
  const auto ga = grad_log_partition(prior.block(block)[c]);
  const auto gbar = grad_log_partition(averaged_params(prior, qc, block));
  std::vector<double> g(ga.size());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = w * (ga[i] - gbar[i]);
  return g;
}

/// Gradient of the weighted variance w.r.t. eta of component c in block b:
/// 2 q(c|x) (eta_c - eta_bar).
inline std::vector<double> grad_weighted_variance(const MixturePrior& prior, const CategoricalPosterior& qc,
                                                  std::size_t block, std::size_t c) {
  if (block >= prior.num_blocks()) throw std::out_of_range("grad_weighted_variance: block");
  if (c >= prior.num_components(block)) throw std::out_of_range("grad_weighted_variance: component");
  const double w = qc.block(block)[c];
  const auto& eta = prior.block(block)[c];
  const auto bar = averaged_params(prior, qc, block);
  std::vector<double> g(eta.size());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = 2.0 * w * (eta[i] - bar[i]);
  return g;
}

struct RzDecomposition {
  double r_z;
  double avg_kl;
  double l_d;
};

/// Block b of the posterior q(z|x): dimensions are laid out block after block.
inline GaussianMeanParams slice_block(const GaussianMeanParams& qz, std::size_t offset, std::size_t dim) {
  if (offset + dim > qz.dim()) throw ShapeError("slice_block: block exceeds posterior dimension");
  return {std::vector<double>(qz.mean.begin() + offset, qz.mean.begin() + offset + dim),
          std::vector<double>(qz.variance.begin() + offset, qz.variance.begin() + offset + dim)};
}

/// R_z = -KL(q(z|x) || p_{eta_bar}) - L_d for Gaussian blocks.
inline RzDecomposition r_z_closed_form(const GaussianMeanParams& qz, const MixturePrior& prior,
                                       const CategoricalPosterior& qc) {
  detail::check_compatible(prior, qc);
  double avg_kl = 0.0;
  std::size_t offset = 0;
  for (std::size_t b = 0; b < prior.num_blocks(); ++b) {
    if (prior.block(b).front().family() != Family::kGaussianDiag) {
      throw std::domain_error("r_z_closed_form: unsupported family " + std::string(to_string(prior.block(b).front().family())));
    }
    const std::size_t dim = prior.block(b).front().sample_dim();
    avg_kl += kl_gaussian(slice_block(qz, offset, dim), natural_to_gaussian(averaged_params(prior, qc, b)));
    offset += dim;
  }
  if (offset != qz.dim()) throw ShapeError("r_z_closed_form: posterior dimension does not match prior blocks");
  const double l_d = dispersion_term(prior, qc);
  return {-avg_kl - l_d, avg_kl, l_d};
}

struct MonteCarloEstimate {
  double estimate;
  double std_error;
};

/// E_{q(z|x) q(c|x)} [log p(z|c) - log q(z|x)], with z sampled and the
/// expectation over c taken exactly. Deterministic given seed.
inline MonteCarloEstimate r_z_monte_carlo(const GaussianMeanParams& qz, const MixturePrior& prior,
                                          const CategoricalPosterior& qc, std::size_t n_samples, std::uint64_t seed) {
  if (n_samples < 1) throw std::invalid_argument("r_z_monte_carlo: n_samples must be >= 1");
  detail::check_compatible(prior, qc);
  const auto q_nat = gaussian_to_natural(qz);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  std::vector<double> noise(qz.dim());
  double mean = 0.0, m2 = 0.0;  // Welford
  for (std::size_t s = 0; s < n_samples; ++s) {
    for (double& e : noise) e = normal(rng);
    const auto z = sample_gaussian(qz, noise);
    double value = -log_density(q_nat, z);
    std::size_t offset = 0;
    for (std::size_t b = 0; b < prior.num_blocks(); ++b) {
      const auto& comps = prior.block(b);
      const std::size_t dim = comps.front().sample_dim();
      const std::span<const double> zb(z.data() + offset, dim);
      const auto w = qc.block(b);
      for (std::size_t c = 0; c < comps.size(); ++c) {
        if (w[c] > 0.0) value += w[c] * log_density(comps[c], zb);
      }
      offset += dim;
    }
    const double delta = value - mean;
    mean += delta / static_cast<double>(s + 1);
    m2 += delta * (value - mean);
  }
  const double n = static_cast<double>(n_samples);
  const double var = n_samples > 1 ? m2 / (n - 1.0) : 0.0;
  return {mean, std::sqrt(var / n)};
}

}  // namespace demvae
