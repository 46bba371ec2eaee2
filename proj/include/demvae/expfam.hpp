// Exponential-family kernel: natural <-> mean parameter conversions,
// log-partition functions and their gradients, densities, sampling and the
// closed-form diagonal Gaussian KL.
//
// Supported families
//   gaussian-diag  phi(z) = [z_d, z_d^2] per dimension, interleaved, so
//                  eta = [mu_0/s_0, -1/(2 s_0), mu_1/s_1, -1/(2 s_1), ...]
//   bernoulli      phi(z) = [z_d],  eta_d = log p_d / (1 - p_d)
//   categorical    minimal representation over K outcomes, K-1 parameters,
//                  eta_k = log p_k / p_{K-1}; a sample is a category index.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace demvae {

/// Thrown when dimensions of two arguments disagree.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class Family { kGaussianDiag, kBernoulli, kCategorical };

inline std::string_view to_string(Family f) {
  switch (f) {
    case Family::kGaussianDiag: return "gaussian-diag";
    case Family::kBernoulli: return "bernoulli";
    case Family::kCategorical: return "categorical";
  }
  return "unknown";
}

namespace detail {

inline constexpr double kHalfLog2Pi = 0.91893853320467274178;  // 0.5 log(2 pi)

// log(1 + e^x) without overflow.
inline double softplus(double x) {
  if (x > 0.0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline void require_finite(std::span<const double> v, const char* what) {
  for (double x : v) {
    if (!std::isfinite(x)) throw std::domain_error(std::string(what) + ": non-finite entry");
  }
}

}  // namespace detail

/// Natural parameters of one exponential-family distribution.
class NaturalParams {
 public:
  NaturalParams(Family family, std::vector<double> values) : family_(family), values_(std::move(values)) {
    validate();
  }

  Family family() const { return family_; }
  std::span<const double> values() const { return values_; }
  std::size_t size() const { return values_.size(); }
  double operator[](std::size_t i) const { return values_[i]; }

  /// Number of coordinates of a sample point.
  std::size_t sample_dim() const {
    switch (family_) {
      case Family::kGaussianDiag: return values_.size() / 2;
      case Family::kBernoulli: return values_.size();
      case Family::kCategorical: return 1;
    }
    return 0;
  }

  friend bool operator==(const NaturalParams&, const NaturalParams&) = default;

 private:
  void validate() const {
    detail::require_finite(values_, "NaturalParams");
    if (family_ == Family::kGaussianDiag) {
      if (values_.size() % 2 != 0) throw std::domain_error("gaussian natural parameters must have even length");
      for (std::size_t i = 1; i < values_.size(); i += 2) {
        if (!(values_[i] < 0.0)) throw std::domain_error("gaussian natural parameter eta2 must be negative");
      }
    }
  }

  Family family_;
  std::vector<double> values_;
};

struct GaussianMeanParams {
  std::vector<double> mean;
  std::vector<double> variance;

  GaussianMeanParams() = default;
  GaussianMeanParams(std::vector<double> m, std::vector<double> v) : mean(std::move(m)), variance(std::move(v)) {
    if (mean.size() != variance.size()) throw ShapeError("GaussianMeanParams: mean/variance length mismatch");
    for (double s : variance) {
      if (!(s > 0.0) || !std::isfinite(s)) throw std::domain_error("GaussianMeanParams: variance must be positive");
    }
    detail::require_finite(mean, "GaussianMeanParams");
  }

  std::size_t dim() const { return mean.size(); }
  friend bool operator==(const GaussianMeanParams&, const GaussianMeanParams&) = default;
};

struct BernoulliMeanParams {
  static constexpr double kClamp = 1e-10;
  std::vector<double> p;

  explicit BernoulliMeanParams(std::vector<double> probs) : p(std::move(probs)) {
    for (double& x : p) {
      if (!(x >= 0.0 && x <= 1.0)) throw std::domain_error("BernoulliMeanParams: probability outside [0, 1]");
      x = std::clamp(x, kClamp, 1.0 - kClamp);
    }
  }
};

inline NaturalParams gaussian_to_natural(const GaussianMeanParams& m) {
  std::vector<double> eta(2 * m.dim());
  for (std::size_t d = 0; d < m.dim(); ++d) {
    if (!(m.variance[d] > 0.0)) throw std::domain_error("gaussian_to_natural: non-positive variance");
    eta[2 * d] = m.mean[d] / m.variance[d];
    eta[2 * d + 1] = -0.5 / m.variance[d];
  }
  return {Family::kGaussianDiag, std::move(eta)};
}

inline GaussianMeanParams natural_to_gaussian(const NaturalParams& n) {
  if (n.family() != Family::kGaussianDiag) throw std::domain_error("natural_to_gaussian: not a gaussian");
  GaussianMeanParams out;
  const std::size_t dim = n.sample_dim();
  out.mean.resize(dim);
  out.variance.resize(dim);
  for (std::size_t d = 0; d < dim; ++d) {
    const double eta2 = n[2 * d + 1];
    if (!(eta2 < 0.0)) throw std::domain_error("natural_to_gaussian: eta2 must be negative");
    out.variance[d] = -0.5 / eta2;
    out.mean[d] = n[2 * d] * out.variance[d];
  }
  return out;
}

inline NaturalParams bernoulli_to_natural(const BernoulliMeanParams& m) {
  std::vector<double> eta(m.p.size());
  for (std::size_t d = 0; d < eta.size(); ++d) eta[d] = std::log(m.p[d]) - std::log1p(-m.p[d]);
  return {Family::kBernoulli, std::move(eta)};
}

inline BernoulliMeanParams natural_to_bernoulli(const NaturalParams& n) {
  if (n.family() != Family::kBernoulli) throw std::domain_error("natural_to_bernoulli: not a bernoulli");
  std::vector<double> p(n.size());
  for (std::size_t d = 0; d < p.size(); ++d) p[d] = detail::sigmoid(n[d]);
  return BernoulliMeanParams(std::move(p));
}

/// Categorical over K = probs.size() outcomes, reference category K-1.
inline NaturalParams categorical_to_natural(std::span<const double> probs) {
  if (probs.size() < 2) throw std::domain_error("categorical_to_natural: need at least two outcomes");
  const double ref = std::max(probs.back(), 1e-10);
  std::vector<double> eta(probs.size() - 1);
  for (std::size_t k = 0; k < eta.size(); ++k) eta[k] = std::log(std::max(probs[k], 1e-10)) - std::log(ref);
  return {Family::kCategorical, std::move(eta)};
}

inline std::vector<double> natural_to_categorical(const NaturalParams& n) {
  if (n.family() != Family::kCategorical) throw std::domain_error("natural_to_categorical: not a categorical");
  double mx = 0.0;
  for (double e : n.values()) mx = std::max(mx, e);
  std::vector<double> p(n.size() + 1);
  double total = 0.0;
  for (std::size_t k = 0; k < n.size(); ++k) total += (p[k] = std::exp(n[k] - mx));
  total += (p.back() = std::exp(-mx));
  for (double& x : p) x /= total;
  return p;
}

/// A(eta), summed over dimensions for the factorized families.
inline double log_partition(const NaturalParams& n) {
  double a = 0.0;
  switch (n.family()) {
    case Family::kGaussianDiag:
      for (std::size_t d = 0; d < n.sample_dim(); ++d) {
        const double e1 = n[2 * d], e2 = n[2 * d + 1];
        a += -e1 * e1 / (4.0 * e2) - 0.5 * std::log(-2.0 * e2);
      }
      return a;
    case Family::kBernoulli:
      for (double e : n.values()) a += detail::softplus(e);
      return a;
    case Family::kCategorical: {
      double mx = 0.0;
      for (double e : n.values()) mx = std::max(mx, e);
      double s = std::exp(-mx);
      for (double e : n.values()) s += std::exp(e - mx);
      return mx + std::log(s);
    }
  }
  return a;
}

/// Expected sufficient statistics, i.e. the gradient of A.
inline std::vector<double> grad_log_partition(const NaturalParams& n) {
  std::vector<double> g(n.size());
  switch (n.family()) {
    case Family::kGaussianDiag:
      for (std::size_t d = 0; d < n.sample_dim(); ++d) {
        const double e1 = n[2 * d], e2 = n[2 * d + 1];
        const double var = -0.5 / e2;
        const double mu = e1 * var;
        g[2 * d] = mu;
        g[2 * d + 1] = mu * mu + var;
      }
      break;
    case Family::kBernoulli:
      for (std::size_t d = 0; d < n.size(); ++d) g[d] = detail::sigmoid(n[d]);
      break;
    case Family::kCategorical: {
      const auto p = natural_to_categorical(n);
      std::copy(p.begin(), p.end() - 1, g.begin());
      break;
    }
  }
  return g;
}

inline std::vector<double> sufficient_statistics(Family family, std::span<const double> z, std::size_t n_params) {
  std::vector<double> phi(n_params, 0.0);
  switch (family) {
    case Family::kGaussianDiag:
      for (std::size_t d = 0; d < z.size(); ++d) {
        phi[2 * d] = z[d];
        phi[2 * d + 1] = z[d] * z[d];
      }
      break;
    case Family::kBernoulli:
      std::copy(z.begin(), z.end(), phi.begin());
      break;
    case Family::kCategorical: {
      const auto k = static_cast<std::size_t>(z[0]);
      if (k < n_params) phi[k] = 1.0;
      break;
    }
  }
  return phi;
}

/// log p(z) = <eta, phi(z)> - A(eta) + log h(z), with h = (2 pi)^{-1/2} per
/// Gaussian dimension and h = 1 otherwise.
inline double log_density(const NaturalParams& n, std::span<const double> z) {
  if (z.size() != n.sample_dim()) throw ShapeError("log_density: sample dimension mismatch");
  if (n.family() == Family::kCategorical) {
    const double k = z[0];
    if (k < 0.0 || k > static_cast<double>(n.size()) || k != std::floor(k)) {
      throw std::domain_error("log_density: category index out of range");
    }
  }
  const auto phi = sufficient_statistics(n.family(), z, n.size());
  double dot = 0.0;
  for (std::size_t i = 0; i < phi.size(); ++i) dot += n[i] * phi[i];
  double base = 0.0;
  if (n.family() == Family::kGaussianDiag) base = -detail::kHalfLog2Pi * static_cast<double>(z.size());
  return dot - log_partition(n) + base;
}

/// KL(q || p) for diagonal Gaussians, summed over dimensions.
inline double kl_gaussian(const GaussianMeanParams& q, const GaussianMeanParams& p) {
  if (q.dim() != p.dim()) throw ShapeError("kl_gaussian: dimension mismatch");
  double kl = 0.0;
  for (std::size_t d = 0; d < q.dim(); ++d) {
    const double vq = q.variance[d], vp = p.variance[d];
    if (!(vq > 0.0) || !(vp > 0.0)) throw std::domain_error("kl_gaussian: non-positive variance");
    const double diff = q.mean[d] - p.mean[d];
    kl += 0.5 * (std::log(vp / vq) + (vq + diff * diff) / vp - 1.0);
  }
  return kl;
}

/// Reparameterized draw mu + sigma * noise.
inline std::vector<double> sample_gaussian(const GaussianMeanParams& m, std::span<const double> noise) {
  if (noise.size() != m.dim()) throw ShapeError("sample_gaussian: noise dimension mismatch");
  std::vector<double> z(m.dim());
  for (std::size_t d = 0; d < z.size(); ++d) z[d] = m.mean[d] + std::sqrt(m.variance[d]) * noise[d];
  return z;
}

}  // namespace demvae
