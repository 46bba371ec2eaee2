// Training losses: ELBO terms, the beta-dispersed objective, the minibatch
// mutual-information term and the logistic KL-annealing schedule.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include <nlohmann/json.hpp>

#include "demvae/mixture.hpp"

namespace demvae {

inline constexpr double kProbClamp = 1e-10;

/// How the c-dependent part of R_z is estimated during training.
///   exact   expectation over q(c|x) in closed form through the average prior
///           and the dispersion term
///   gumbel  KL to the component picked by a Gumbel-softmax draw of c
enum class RzEstimator { kExact, kGumbel };

NLOHMANN_JSON_SERIALIZE_ENUM(RzEstimator, {{RzEstimator::kExact, "exact"}, {RzEstimator::kGumbel, "gumbel"}})

struct ObjectiveConfig {
  double beta = 0.0;
  double mi_weight = 0.0;
  double anneal_slope = 0.0025;
  double anneal_midpoint = 2500.0;
  std::size_t n_z_samples = 20;
  RzEstimator estimator = RzEstimator::kExact;
  double temperature = 1.0;
  bool hard = true;

  void validate() const {
    if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be > 0");
    if (!(beta >= 0.0 && beta <= 1.0)) throw std::invalid_argument("beta must lie in [0, 1]");
    if (!(mi_weight >= 0.0)) throw std::invalid_argument("mi_weight must be >= 0");
    if (!(anneal_slope > 0.0)) throw std::invalid_argument("anneal_slope must be > 0");
    if (n_z_samples < 1) throw std::invalid_argument("n_z_samples must be >= 1");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(ObjectiveConfig, beta, mi_weight, anneal_slope, anneal_midpoint, n_z_samples,
                                   estimator, temperature, hard)

/// Batch-averaged loss terms. All "gain" quantities are to be maximized.
struct LossReport {
  double r_rec = 0.0;
  double r_c = 0.0;
  double r_z = 0.0;
  double avg_kl = 0.0;
  double l_d = 0.0;
  double l_mi = 0.0;
  // Dispersion of the prior components under p(c).
  double weighted_var = 0.0;
  // Batch mean of the dispersion under q(c|x).
  double weighted_var_posterior = 0.0;
  double anneal_weight = 0.0;
  double total = 0.0;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(LossReport, r_rec, r_c, r_z, avg_kl, l_d, l_mi, weighted_var,
                                   weighted_var_posterior, anneal_weight, total)

namespace detail {

inline double entropy(std::span<const double> p) {
  double h = 0.0;
  for (double x : p) h -= x * std::log(std::max(x, kProbClamp));
  return h;
}

// d entropy / d p_k, consistent with the clamped log above.
inline double entropy_partial(double x) { return -(std::log(std::max(x, kProbClamp)) + (x > kProbClamp ? 1.0 : 0.0)); }

}  // namespace detail

/// E[log p(c) - log q(c|x)] = -KL(q(c|x) || Uniform(K)), summed over blocks.
inline double r_c_term(const CategoricalPosterior& qc) {
  double r = 0.0;
  for (std::size_t b = 0; b < qc.num_blocks(); ++b) {
    const auto p = qc.block(b);
    r += detail::entropy(p) - std::log(static_cast<double>(p.size()));
  }
  return r;
}

/// Overload checking the component count explicitly.
inline double r_c_term(const CategoricalPosterior& qc, std::size_t k) {
  for (std::size_t b = 0; b < qc.num_blocks(); ++b) {
    if (qc.block(b).size() != k) throw ShapeError("r_c_term: component count mismatch");
  }
  return r_c_term(qc);
}

/// H(c) - H(c|x) with q(c) estimated by the batch mean of q(c|x).
inline double mutual_information(std::span<const CategoricalPosterior> batch) {
  if (batch.empty()) throw std::invalid_argument("mutual_information: empty batch");
  const std::size_t blocks = batch.front().num_blocks();
  const double n = static_cast<double>(batch.size());
  double mi = 0.0;
  for (std::size_t b = 0; b < blocks; ++b) {
    const std::size_t k = batch.front().block(b).size();
    std::vector<double> marginal(k, 0.0);
    double conditional = 0.0;
    for (const auto& qc : batch) {
      if (qc.num_blocks() != blocks || qc.block(b).size() != k) throw ShapeError("mutual_information: ragged batch");
      const auto p = qc.block(b);
      for (std::size_t c = 0; c < k; ++c) marginal[c] += p[c];
      conditional += detail::entropy(p);
    }
    for (double& m : marginal) m /= n;
    mi += detail::entropy(marginal) - conditional / n;
  }
  return mi;
}

/// Logistic KL-annealing weight 1 / (1 + exp(-slope (step - midpoint))).
inline double anneal_weight(std::uint64_t step, const ObjectiveConfig& cfg) {
  const double t = cfg.anneal_slope * (static_cast<double>(step) - cfg.anneal_midpoint);
  return 1.0 / (1.0 + std::exp(-t));
}

/// r_rec + w (r_c - avg_kl - (1 - beta) l_d) + mi_weight l_mi, to be maximized.
inline double total_loss(double r_rec, double r_c, double avg_kl, double l_d, double l_mi, double weight,
                         const ObjectiveConfig& cfg) {
  return r_rec + weight * (r_c - avg_kl - (1.0 - cfg.beta) * l_d) + cfg.mi_weight * l_mi;
}

inline double total_loss(double r_rec, double r_c, double avg_kl, double l_d, double l_mi, std::uint64_t step,
                         const ObjectiveConfig& cfg) {
  return total_loss(r_rec, r_c, avg_kl, l_d, l_mi, anneal_weight(step, cfg), cfg);
}

}  // namespace demvae
