// Randomized invariant suites behind the `check` command. Each suite draws
// its configurations from a seeded generator and stops at the first
// counterexample.
#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "demvae/expfam.hpp"
#include "demvae/mixture.hpp"
#include "demvae/nn.hpp"
#include "demvae/objective.hpp"

namespace demvae {

struct CheckOptions {
  std::size_t trials = 10000;
  std::uint64_t seed = 1;
  // Harness self-test: negate grad_dispersion inside the suites.
  bool flip_dispersion_gradient = false;
};

struct CheckResult {
  std::string name;
  bool passed = true;
  std::size_t trials = 0;
  double seconds = 0.0;
  std::string counterexample;
};

// --- random configurations ------------------------------------------------

inline std::vector<double> random_simplex(std::size_t k, std::mt19937_64& rng) {
  std::gamma_distribution<double> gamma(1.0, 1.0);
  std::vector<double> p(k);
  double s = 0.0;
  for (double& x : p) s += (x = gamma(rng) + 1e-12);
  for (double& x : p) x /= s;
  return p;
}

/// Gaussian components with means in [-3, 3] and variances in [e^-1.5, e^1.5].
inline MixturePrior random_gaussian_prior(std::size_t k, std::size_t dim, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> mean(-3.0, 3.0), log_var(-1.5, 1.5);
  MixturePrior::Block block;
  for (std::size_t c = 0; c < k; ++c) {
    std::vector<double> m(dim), v(dim);
    for (std::size_t d = 0; d < dim; ++d) {
      m[d] = mean(rng);
      v[d] = std::exp(log_var(rng));
    }
    block.push_back(gaussian_to_natural({m, v}));
  }
  return MixturePrior(std::move(block));
}

/// Bernoulli components with logits in [-5, 5].
inline MixturePrior random_bernoulli_prior(std::size_t k, std::size_t dim, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> logit(-5.0, 5.0);
  MixturePrior::Block block;
  for (std::size_t c = 0; c < k; ++c) {
    std::vector<double> eta(dim);
    for (double& e : eta) e = logit(rng);
    block.emplace_back(Family::kBernoulli, std::move(eta));
  }
  return MixturePrior(std::move(block));
}

/// Either family, K in [2, 6], dimension in [1, 4], q(c|x) from a flat Dirichlet.
inline std::pair<MixturePrior, CategoricalPosterior> random_mixture(std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> kd(2, 6), dd(1, 4);
  std::bernoulli_distribution gaussian(0.5);
  const std::size_t k = kd(rng), dim = dd(rng);
  auto prior = gaussian(rng) ? random_gaussian_prior(k, dim, rng) : random_bernoulli_prior(k, dim, rng);
  return {std::move(prior), CategoricalPosterior({random_simplex(k, rng)})};
}

inline std::string describe(const MixturePrior& prior, const CategoricalPosterior& qc) {
  std::ostringstream out;
  out.precision(17);
  out << "family=" << to_string(prior.block(0).front().family()) << " q=[";
  for (double w : qc.block(0)) out << w << ' ';
  out << "] eta=";
  for (const auto& c : prior.block(0)) {
    out << '[';
    for (double v : c.values()) out << v << ' ';
    out << ']';
  }
  return out.str();
}

inline double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

// --- suites ------------------------------------------------------------------

namespace detail {

template <class Body>
CheckResult run_suite(const std::string& name, const CheckOptions& opt, std::uint64_t salt, Body&& body) {
  const auto start = std::chrono::steady_clock::now();
  std::mt19937_64 rng(opt.seed ^ (0x9E3779B97F4A7C15ULL * salt));
  CheckResult r{name};
  for (std::size_t t = 0; t < opt.trials; ++t) {
    ++r.trials;
    std::string failure = body(rng);
    if (!failure.empty()) {
      r.passed = false;
      r.counterexample = "trial " + std::to_string(t) + ": " + failure;
      break;
    }
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

inline std::vector<double> checked_grad_dispersion(const MixturePrior& prior, const CategoricalPosterior& qc,
                                                   std::size_t c, const CheckOptions& opt) {
  auto g = grad_dispersion(prior, qc, 0, c);
  if (opt.flip_dispersion_gradient) {
    for (double& x : g) x = -x;
  }
  return g;
}

inline MixturePrior perturbed(const MixturePrior& prior, std::size_t c, std::size_t i, double delta) {
  auto block = prior.block(0);
  std::vector<double> v(block[c].values().begin(), block[c].values().end());
  v[i] += delta;
  block[c] = NaturalParams(block[c].family(), std::move(v));
  return MixturePrior(std::move(block));
}

}  // namespace detail

/// A is convex along random chords and its gradient matches central differences.
inline CheckResult check_log_partition(const CheckOptions& opt) {
  return detail::run_suite("expfam.log_partition", opt, 1, [](std::mt19937_64& rng) -> std::string {
    auto [prior, qc] = random_mixture(rng);
    const auto& a = prior.block(0)[0];
    const auto& b = prior.block(0)[1];
    const double t = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    std::vector<double> mid(a.size());
    for (std::size_t i = 0; i < mid.size(); ++i) mid[i] = t * a[i] + (1.0 - t) * b[i];
    const double lhs = log_partition(NaturalParams(a.family(), mid));
    const double rhs = t * log_partition(a) + (1.0 - t) * log_partition(b);
    if (lhs > rhs + 1e-12 * std::max(1.0, std::abs(rhs))) return "convexity violated: " + describe(prior, qc);
    const auto g = grad_log_partition(a);
    const double h = 1e-6;
    for (std::size_t i = 0; i < a.size(); ++i) {
      std::vector<double> up(a.values().begin(), a.values().end()), down = up;
      up[i] += h;
      down[i] -= h;
      const double fd = (log_partition(NaturalParams(a.family(), up)) - log_partition(NaturalParams(a.family(), down))) /
                        (2.0 * h);
      if (relative_error(g[i], fd) > 1e-6) return "grad A mismatch at index " + std::to_string(i) + ": " + describe(prior, qc);
    }
    return {};
  });
}

/// Mean-to-natural conversions invert each other.
inline CheckResult check_round_trip(const CheckOptions& opt) {
  return detail::run_suite("expfam.round_trip", opt, 2, [](std::mt19937_64& rng) -> std::string {
    std::uniform_real_distribution<double> mean(-10.0, 10.0), log_var(-4.0, 4.0), prob(1e-6, 1.0 - 1e-6);
    std::vector<double> m(3), v(3), p(3);
    for (std::size_t d = 0; d < 3; ++d) {
      m[d] = mean(rng);
      v[d] = std::exp(log_var(rng));
      p[d] = prob(rng);
    }
    const auto g = natural_to_gaussian(gaussian_to_natural({m, v}));
    const auto b = natural_to_bernoulli(bernoulli_to_natural(BernoulliMeanParams(p)));
    for (std::size_t d = 0; d < 3; ++d) {
      if (relative_error(g.mean[d], m[d]) > 1e-9 || std::abs(g.variance[d] / v[d] - 1.0) > 1e-9) {
        return "gaussian round trip drifted: mean " + std::to_string(m[d]) + " var " + std::to_string(v[d]);
      }
      if (std::abs(b.p[d] - p[d]) > 1e-9) return "bernoulli round trip drifted: p " + std::to_string(p[d]);
    }
    return {};
  });
}

/// Dispersion term is nonnegative, and zero for identical components.
inline CheckResult check_dispersion_nonnegative(const CheckOptions& opt) {
  return detail::run_suite("mixture.dispersion_nonnegative", opt, 3, [](std::mt19937_64& rng) -> std::string {
    auto [prior, qc] = random_mixture(rng);
    const double ld = dispersion_term(prior, qc);
    if (!(ld >= -1e-12)) return "l_d=" + std::to_string(ld) + " " + describe(prior, qc);
    MixturePrior::Block same(prior.num_components(0), prior.block(0)[0]);
    const double ld_same = dispersion_term(MixturePrior(std::move(same)), qc);
    if (!(std::abs(ld_same) < 1e-10)) return "equal components give l_d=" + std::to_string(ld_same);
    return {};
  });
}

/// grad L_d . grad Var >= 0 per component; both gradients match finite differences.
inline CheckResult check_gradient_alignment(const CheckOptions& opt) {
  return detail::run_suite("mixture.gradient_alignment", opt, 4, [&opt](std::mt19937_64& rng) -> std::string {
    auto [prior, qc] = random_mixture(rng);
    for (std::size_t c = 0; c < prior.num_components(0); ++c) {
      const auto gd = detail::checked_grad_dispersion(prior, qc, c, opt);
      const auto gv = grad_weighted_variance(prior, qc, 0, c);
      double dot = 0.0;
      for (std::size_t i = 0; i < gd.size(); ++i) dot += gd[i] * gv[i];
      if (!(dot >= -1e-12)) {
        std::ostringstream msg;
        msg.precision(17);
        msg << "component " << c << " dot=" << dot << ' ' << describe(prior, qc);
        return msg.str();
      }
      const double h = 1e-6;
      for (std::size_t i = 0; i < gd.size(); ++i) {
        const auto up = detail::perturbed(prior, c, i, h), down = detail::perturbed(prior, c, i, -h);
        const double fd_d = (dispersion_term(up, qc) - dispersion_term(down, qc)) / (2.0 * h);
        const double fd_v = (weighted_variance(up, qc) - weighted_variance(down, qc)) / (2.0 * h);
        if (relative_error(gd[i], fd_d) > 1e-6) {
          return "grad_dispersion mismatch component " + std::to_string(c) + " index " + std::to_string(i) + ": " +
                 describe(prior, qc);
        }
        if (relative_error(gv[i], fd_v) > 1e-6) {
          return "grad_weighted_variance mismatch component " + std::to_string(c) + " index " + std::to_string(i) +
                 ": " + describe(prior, qc);
        }
      }
    }
    return {};
  });
}

/// R_z equals -avg_kl - l_d, and avg_kl is a valid KL.
inline CheckResult check_decomposition(const CheckOptions& opt) {
  return detail::run_suite("mixture.decomposition", opt, 5, [](std::mt19937_64& rng) -> std::string {
    std::uniform_int_distribution<std::size_t> kd(2, 6), dd(1, 4);
    const std::size_t k = kd(rng), dim = dd(rng);
    const auto prior = random_gaussian_prior(k, dim, rng);
    const CategoricalPosterior qc({random_simplex(k, rng)});
    const auto q = natural_to_gaussian(random_gaussian_prior(1, dim, rng).block(0)[0]);
    const auto r = r_z_closed_form(q, prior, qc);
    if (std::abs(-r.avg_kl - r.l_d - r.r_z) > 1e-12 || r.avg_kl < -1e-12) return "decomposition broken: " + describe(prior, qc);
    return {};
  });
}

/// Mutual information lies in [0, log K]; R_c <= 0; the total objective is
/// non-decreasing in beta; annealing weight is monotone in the step.
inline CheckResult check_objective(const CheckOptions& opt) {
  return detail::run_suite("objective.bounds", opt, 6, [](std::mt19937_64& rng) -> std::string {
    std::uniform_int_distribution<std::size_t> kd(2, 8), nd(1, 16);
    const std::size_t k = kd(rng), n = nd(rng);
    std::vector<CategoricalPosterior> batch;
    for (std::size_t i = 0; i < n; ++i) batch.emplace_back(std::vector<std::vector<double>>{random_simplex(k, rng)});
    const double mi = mutual_information(batch);
    if (mi < -1e-12 || mi > std::log(static_cast<double>(k)) + 1e-12) return "mi=" + std::to_string(mi) + " K=" + std::to_string(k);
    if (r_c_term(batch.front()) > 1e-12) return "r_c positive";
    std::uniform_real_distribution<double> u(0.0, 1.0), wide(-50.0, 50.0);
    ObjectiveConfig lo, hi;
    lo.beta = u(rng);
    hi.beta = lo.beta + (1.0 - lo.beta) * u(rng);
    const double w = u(rng), l_d = 10.0 * u(rng);
    const double r_rec = wide(rng), r_c = -u(rng), kl = 10.0 * u(rng);
    if (total_loss(r_rec, r_c, kl, l_d, mi, w, lo) > total_loss(r_rec, r_c, kl, l_d, mi, w, hi) + 1e-12) {
      return "objective decreased with beta " + std::to_string(lo.beta) + " -> " + std::to_string(hi.beta);
    }
    const auto step = std::uniform_int_distribution<std::uint64_t>(0, 20000)(rng);
    const double a0 = anneal_weight(step, lo), a1 = anneal_weight(step + 1, lo);
    if (!(a0 > 0.0 && a1 < 1.0 + 1e-15 && a1 >= a0)) return "anneal weight not monotone at step " + std::to_string(step);
    return {};
  });
}

/// Backpropagation through a random tanh network matches finite differences.
inline CheckResult check_backprop(const CheckOptions& opt) {
  CheckOptions scaled = opt;
  scaled.trials = std::max<std::size_t>(1, opt.trials / 100);
  return detail::run_suite("nn.backprop", scaled, 7, [](std::mt19937_64& rng) -> std::string {
    std::uniform_int_distribution<std::size_t> wd(1, 5);
    const std::vector<std::size_t> widths{wd(rng), wd(rng), wd(rng), wd(rng)};
    DenseNet net(widths, Activation::kTanh, Activation::kIdentity, rng);
    std::normal_distribution<double> normal;
    Matrix x(static_cast<Eigen::Index>(widths.front()), 3), target(static_cast<Eigen::Index>(widths.back()), 3);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = normal(rng);
    for (Eigen::Index i = 0; i < target.size(); ++i) target.data()[i] = normal(rng);
    const auto params = net.parameters();
    std::vector<double> flat;
    for (auto s : params) flat.insert(flat.end(), s.begin(), s.end());
    auto loss = [&](std::span<const double> theta, std::span<double> grad) {
      std::size_t o = 0;
      for (auto s : net.parameters()) {
        std::copy_n(theta.begin() + static_cast<std::ptrdiff_t>(o), s.size(), s.begin());
        o += s.size();
      }
      const auto tape = net.forward(x);
      const Matrix diff = tape.output() - target;
      if (!grad.empty()) {
        net.zero_grad();
        net.backward(tape, diff);
        o = 0;
        for (auto s : net.gradients()) {
          std::copy(s.begin(), s.end(), grad.begin() + static_cast<std::ptrdiff_t>(o));
          o += s.size();
        }
      }
      return 0.5 * diff.squaredNorm();
    };
    const auto check = finite_diff_check_detailed(loss, flat);
    if (check.max_rel_error > 1e-6) {
      return "parameter " + std::to_string(check.worst_index) + " analytic " + std::to_string(check.analytic) +
             " numeric " + std::to_string(check.numeric);
    }
    return {};
  });
}

inline std::vector<CheckResult> run_all_checks(const CheckOptions& opt) {
  return {check_log_partition(opt),          check_round_trip(opt),     check_dispersion_nonnegative(opt),
          check_gradient_alignment(opt),     check_decomposition(opt),  check_objective(opt),
          check_backprop(opt)};
}

}  // namespace demvae
