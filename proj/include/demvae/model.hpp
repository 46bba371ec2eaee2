// Gaussian-mixture VAE with a dispersed objective.
//
// The encoder maps x to [mu (D_z) | log_var (D_z) | logits (M K)], q(c|x) is a
// softmax per block, z is split into M consecutive blocks and block b carries
// K learnable Gaussian components with diagonal covariance. q(c|x) enters the
// c-dependent terms through its probabilities, so the expectation over c is
// exact and only z is sampled.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "demvae/expfam.hpp"
#include "demvae/mixture.hpp"
#include "demvae/nn.hpp"
#include "demvae/objective.hpp"

namespace demvae {

/// Raised when a loss term becomes non-finite; `term` names it.
class TrainingError : public std::runtime_error {
 public:
  TrainingError(std::string term, const std::string& msg) : std::runtime_error(msg), term_(std::move(term)) {}
  const std::string& term() const { return term_; }

 private:
  std::string term_;
};

enum class ObsFamily { kGaussianFixedVariance, kBernoulli };

inline std::string_view to_string(ObsFamily f) {
  return f == ObsFamily::kBernoulli ? "bernoulli" : "gaussian";
}

inline ObsFamily parse_obs_family(std::string_view s) {
  if (s == "gaussian" || s == "gaussian-fixed-variance") return ObsFamily::kGaussianFixedVariance;
  if (s == "bernoulli") return ObsFamily::kBernoulli;
  throw std::invalid_argument("unknown observation family: " + std::string(s));
}

struct ModelDims {
  std::size_t data_dim = 2;
  std::size_t z_dim = 2;
  std::size_t num_blocks = 1;
  std::size_t num_components = 5;
  std::vector<std::size_t> hidden = {64, 64};

  void validate() const {
    if (data_dim < 1 || z_dim < 1 || num_blocks < 1 || num_components < 1) {
      throw std::invalid_argument("model dimensions must be >= 1");
    }
    if (num_blocks > z_dim) throw std::invalid_argument("number of blocks cannot exceed z dimension");
    for (auto h : hidden) {
      if (h < 1) throw std::invalid_argument("hidden widths must be >= 1");
    }
  }

  /// z is split as evenly as possible; the first z_dim % M blocks get one extra.
  std::vector<std::size_t> block_dims() const {
    std::vector<std::size_t> d(num_blocks, z_dim / num_blocks);
    for (std::size_t b = 0; b < z_dim % num_blocks; ++b) ++d[b];
    return d;
  }

  std::size_t encoder_output_dim() const { return 2 * z_dim + num_blocks * num_components; }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(ModelDims, data_dim, z_dim, num_blocks, num_components, hidden)

struct TrainConfig {
  std::size_t batch_size = 30;
  double lr = 0.001;
  std::size_t steps = 10000;
  std::uint64_t seed = 1;
  std::size_t n_z_samples = 20;
  std::size_t nll_is_samples = 500;

  void validate() const {
    if (batch_size < 1 || n_z_samples < 1 || nll_is_samples < 1) throw std::invalid_argument("counts must be >= 1");
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw std::invalid_argument("lr must be a finite value >= 0");
  }
};

/// Learnable per-component means and log-variances, one d_b x K matrix each.
struct PriorParams {
  std::vector<Matrix> mean;
  std::vector<Matrix> log_var;
  std::vector<Matrix> grad_mean;
  std::vector<Matrix> grad_log_var;
};

struct Posterior {
  GaussianMeanParams qz;
  CategoricalPosterior qc;
};

class DemVaeModel {
 public:
  DemVaeModel(ModelDims dims, ObsFamily obs, ObjectiveConfig objective, std::uint64_t seed)
      : dims_(std::move(dims)), obs_(obs), objective_(objective) {
    dims_.validate();
    objective_.validate();
    std::mt19937_64 rng(seed);
    std::vector<std::size_t> enc{dims_.data_dim};
    enc.insert(enc.end(), dims_.hidden.begin(), dims_.hidden.end());
    enc.push_back(dims_.encoder_output_dim());
    std::vector<std::size_t> dec{dims_.z_dim};
    dec.insert(dec.end(), dims_.hidden.begin(), dims_.hidden.end());
    dec.push_back(dims_.data_dim);
    encoder = DenseNet(enc, Activation::kTanh, Activation::kIdentity, rng);
    decoder = DenseNet(dec, Activation::kTanh, Activation::kIdentity, rng);
    std::normal_distribution<double> normal;
    for (auto d : dims_.block_dims()) {
      Matrix m(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(dims_.num_components));
      for (Eigen::Index k = 0; k < m.cols(); ++k) {
        for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, k) = normal(rng);
      }
      prior.mean.push_back(m);
      prior.log_var.push_back(Matrix::Zero(m.rows(), m.cols()));
      prior.grad_mean.push_back(Matrix::Zero(m.rows(), m.cols()));
      prior.grad_log_var.push_back(Matrix::Zero(m.rows(), m.cols()));
    }
  }

  const ModelDims& dims() const { return dims_; }
  ObsFamily obs_family() const { return obs_; }
  const ObjectiveConfig& objective() const { return objective_; }
  ObjectiveConfig& objective() { return objective_; }

  /// Current component distributions as natural parameters.
  MixturePrior mixture_prior() const {
    std::vector<MixturePrior::Block> blocks;
    for (std::size_t b = 0; b < prior.mean.size(); ++b) {
      MixturePrior::Block block;
      for (Eigen::Index k = 0; k < prior.mean[b].cols(); ++k) {
        block.push_back(gaussian_to_natural(component(b, static_cast<std::size_t>(k))));
      }
      blocks.push_back(std::move(block));
    }
    return MixturePrior(std::move(blocks));
  }

  GaussianMeanParams component(std::size_t b, std::size_t k) const {
    const auto& m = prior.mean.at(b);
    const auto& s = prior.log_var.at(b);
    std::vector<double> mean(static_cast<std::size_t>(m.rows())), var(mean.size());
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      mean[static_cast<std::size_t>(i)] = m(i, static_cast<Eigen::Index>(k));
      var[static_cast<std::size_t>(i)] = std::exp(std::clamp(s(i, static_cast<Eigen::Index>(k)), kLogVarMin, kLogVarMax));
    }
    return {std::move(mean), std::move(var)};
  }

  /// Parameter blocks in a fixed order: encoder, decoder, prior means, prior
  /// log-variances. gradients() mirrors it.
  std::vector<std::span<double>> parameters() {
    auto out = encoder.parameters();
    for (auto s : decoder.parameters()) out.push_back(s);
    for (auto& m : prior.mean) out.emplace_back(m.data(), static_cast<std::size_t>(m.size()));
    for (auto& m : prior.log_var) out.emplace_back(m.data(), static_cast<std::size_t>(m.size()));
    return out;
  }

  std::vector<std::span<double>> gradients() {
    auto out = encoder.gradients();
    for (auto s : decoder.gradients()) out.push_back(s);
    for (auto& m : prior.grad_mean) out.emplace_back(m.data(), static_cast<std::size_t>(m.size()));
    for (auto& m : prior.grad_log_var) out.emplace_back(m.data(), static_cast<std::size_t>(m.size()));
    return out;
  }

  void zero_grad() {
    encoder.zero_grad();
    decoder.zero_grad();
    for (auto& m : prior.grad_mean) m.setZero();
    for (auto& m : prior.grad_log_var) m.setZero();
  }

  DenseNet encoder;
  DenseNet decoder;
  PriorParams prior;

 private:
  ModelDims dims_;
  ObsFamily obs_;
  ObjectiveConfig objective_;
};

inline std::vector<double> flatten(std::span<const std::span<double>> blocks) {
  std::vector<double> out;
  for (auto b : blocks) out.insert(out.end(), b.begin(), b.end());
  return out;
}

inline void assign(std::span<const std::span<double>> blocks, std::span<const double> flat) {
  std::size_t k = 0;
  for (auto b : blocks) {
    if (k + b.size() > flat.size()) throw ShapeError("assign: flat vector too short");
    std::copy(flat.begin() + static_cast<std::ptrdiff_t>(k), flat.begin() + static_cast<std::ptrdiff_t>(k + b.size()),
              b.begin());
    k += b.size();
  }
  if (k != flat.size()) throw ShapeError("assign: flat vector too long");
}

namespace detail {

struct EncoderHeads {
  Tape tape;
  Matrix mu;
  Matrix log_var;  // clamped
  Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic> log_var_clamped;
  // probs[i][b] is q(c|x_i) for block b.
  std::vector<std::vector<Vector>> probs;
};

inline EncoderHeads run_encoder(const DemVaeModel& model, const Matrix& x) {
  const auto& dims = model.dims();
  const auto dz = static_cast<Eigen::Index>(dims.z_dim);
  const auto kc = static_cast<Eigen::Index>(dims.num_components);
  EncoderHeads h;
  h.tape = model.encoder.forward(x);
  const Matrix& out = h.tape.output();
  h.mu = out.topRows(dz);
  const Matrix raw = out.middleRows(dz, dz);
  h.log_var_clamped = (raw.array() < kLogVarMin) || (raw.array() > kLogVarMax);
  h.log_var = raw.array().min(kLogVarMax).max(kLogVarMin).matrix();
  h.probs.resize(static_cast<std::size_t>(x.cols()));
  for (Eigen::Index i = 0; i < x.cols(); ++i) {
    for (std::size_t b = 0; b < dims.num_blocks; ++b) {
      const Vector logits = out.block(2 * dz + static_cast<Eigen::Index>(b) * kc, i, kc, 1);
      h.probs[static_cast<std::size_t>(i)].push_back(softmax(logits));
    }
  }
  return h;
}

inline CategoricalPosterior to_posterior(const std::vector<Vector>& blocks) {
  std::vector<std::vector<double>> p;
  for (const auto& v : blocks) {
    std::vector<double> row(v.data(), v.data() + v.size());
    // Renormalize away the last-ulp drift of softmax.
    double s = 0.0;
    for (double x : row) s += x;
    for (double& x : row) x /= s;
    p.push_back(std::move(row));
  }
  return CategoricalPosterior(std::move(p));
}

inline double gaussian_logpdf(double z, double mean, double log_var) {
  const double d = z - mean;
  return -kHalfLog2Pi - 0.5 * log_var - 0.5 * d * d * std::exp(-log_var);
}

inline double log_sum_exp(std::span<const double> v) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double x : v) mx = std::max(mx, x);
  if (!std::isfinite(mx)) return mx;
  double s = 0.0;
  for (double x : v) s += std::exp(x - mx);
  return mx + std::log(s);
}

/// Column-wise log p(x | decoder output) and its gradient w.r.t. the output.
inline Vector observation_loglik(ObsFamily obs, const Matrix& x_rep, const Matrix& out, Matrix* grad) {
  Vector ll(out.cols());
  if (grad) grad->resize(out.rows(), out.cols());
  for (Eigen::Index j = 0; j < out.cols(); ++j) {
    double s = 0.0;
    for (Eigen::Index d = 0; d < out.rows(); ++d) {
      const double x = x_rep(d, j), o = out(d, j);
      if (obs == ObsFamily::kGaussianFixedVariance) {
        const double r = x - o;
        s += -kHalfLog2Pi - 0.5 * r * r;
        if (grad) (*grad)(d, j) = r;
      } else {
        s += x * o - softplus(o);
        if (grad) (*grad)(d, j) = x - sigmoid(o);
      }
    }
    ll[j] = s;
  }
  return ll;
}

inline void require_finite_term(double v, const char* term) {
  if (!std::isfinite(v)) throw TrainingError(term, std::string("non-finite loss term: ") + term);
}

}  // namespace detail

inline Posterior encode(const DemVaeModel& model, std::span<const double> x) {
  if (x.size() != model.dims().data_dim) throw ShapeError("encode: data dimension mismatch");
  Matrix xm = Eigen::Map<const Vector>(x.data(), static_cast<Eigen::Index>(x.size()));
  auto h = detail::run_encoder(model, xm);
  std::vector<double> mean(model.dims().z_dim), var(mean.size());
  for (std::size_t d = 0; d < mean.size(); ++d) {
    mean[d] = h.mu(static_cast<Eigen::Index>(d), 0);
    var[d] = std::exp(h.log_var(static_cast<Eigen::Index>(d), 0));
  }
  return {GaussianMeanParams(std::move(mean), std::move(var)), detail::to_posterior(h.probs[0])};
}

/// Mean over z-samples of log p(x|z) for a single data point.
inline double reconstruction_term(const DemVaeModel& model, std::span<const double> x, const Matrix& z_samples) {
  if (x.size() != model.dims().data_dim) throw ShapeError("reconstruction_term: data dimension mismatch");
  if (z_samples.rows() != static_cast<Eigen::Index>(model.dims().z_dim)) {
    throw ShapeError("reconstruction_term: z dimension mismatch");
  }
  const Vector xv = Eigen::Map<const Vector>(x.data(), static_cast<Eigen::Index>(x.size()));
  const Matrix x_rep = xv.replicate(1, z_samples.cols());
  const auto tape = model.decoder.forward(z_samples);
  return detail::observation_loglik(model.obs_family(), x_rep, tape.output(), nullptr).mean();
}

/// Objective on a batch (one column per data point) with fixed standard-normal
/// noise of shape D_z x (B * S); column i * S + s is sample s of point i.
/// The sampled estimator additionally needs uniform noise of shape (M K) x B.
/// When `accumulate` is set, gradients of the negated objective are added into
/// the model's gradient buffers.
///
/// Exact estimator:   r_rec + w (r_c - avg_kl - (1 - beta) l_d) + mi l_mi
/// Sampled estimator: r_rec + w (r_c - KL(q(z|x) || p(z|c~)) + beta l_d) + mi l_mi
///   with c~ a straight-through Gumbel-softmax draw from q(c|x).
inline LossReport evaluate_batch(DemVaeModel& model, const Matrix& x, const Matrix& noise, std::uint64_t step,
                                 bool accumulate, const Matrix* gumbel_uniform = nullptr) {
  const auto& dims = model.dims();
  const auto& cfg = model.objective();
  const Eigen::Index batch = x.cols();
  if (batch < 1) throw std::invalid_argument("evaluate_batch: empty batch");
  if (x.rows() != static_cast<Eigen::Index>(dims.data_dim)) throw ShapeError("evaluate_batch: data dimension mismatch");
  const auto dz = static_cast<Eigen::Index>(dims.z_dim);
  if (noise.rows() != dz || noise.cols() % batch != 0 || noise.cols() == 0) {
    throw ShapeError("evaluate_batch: noise must be D_z x (B * S)");
  }
  const Eigen::Index samples = noise.cols() / batch;
  const auto kc = static_cast<Eigen::Index>(dims.num_components);
  const double k_d = static_cast<double>(dims.num_components);
  const double inv_b = 1.0 / static_cast<double>(batch);
  const double w = anneal_weight(step, cfg);
  const bool sampled = cfg.estimator == RzEstimator::kGumbel;
  if (sampled && (!gumbel_uniform || gumbel_uniform->rows() != static_cast<Eigen::Index>(dims.num_blocks) * kc ||
                  gumbel_uniform->cols() != batch)) {
    throw ShapeError("evaluate_batch: sampled estimator needs (M K) x B uniform noise");
  }
  // d(-objective)/d(avg_kl) and d(-objective)/d(l_d) per point.
  const double g_kl = sampled ? 0.0 : w * inv_b;
  const double g_ld = (sampled ? -cfg.beta : 1.0 - cfg.beta) * w * inv_b;
  const double g_rc = -w * inv_b;
  const auto block_dims = dims.block_dims();

  auto enc = detail::run_encoder(model, x);

  // Reconstruction through S reparameterized samples per point.
  Matrix mu_rep(dz, batch * samples), lv_rep(dz, batch * samples), x_rep(x.rows(), batch * samples);
  for (Eigen::Index i = 0; i < batch; ++i) {
    for (Eigen::Index s = 0; s < samples; ++s) {
      mu_rep.col(i * samples + s) = enc.mu.col(i);
      lv_rep.col(i * samples + s) = enc.log_var.col(i);
      x_rep.col(i * samples + s) = x.col(i);
    }
  }
  const auto rep = gaussian_reparam(mu_rep, lv_rep, noise);
  const auto dec = model.decoder.forward(rep.z);
  Matrix dll;
  const Vector ll = detail::observation_loglik(model.obs_family(), x_rep, dec.output(), accumulate ? &dll : nullptr);

  // Prior components per block.
  struct Component {
    Vector mean, var, eta1, eta2, grad_a1, grad_a2;
    double a;
  };
  std::vector<std::vector<Component>> comps(dims.num_blocks);
  for (std::size_t b = 0; b < dims.num_blocks; ++b) {
    const auto& m = model.prior.mean[b];
    const auto& s = model.prior.log_var[b];
    for (Eigen::Index k = 0; k < kc; ++k) {
      Component c;
      c.mean = m.col(k);
      c.var = s.col(k).array().min(kLogVarMax).max(kLogVarMin).exp().matrix();
      c.eta1 = c.mean.cwiseQuotient(c.var);
      c.eta2 = (-0.5 / c.var.array()).matrix();
      c.grad_a1 = c.mean;
      c.grad_a2 = (c.mean.array().square() + c.var.array()).matrix();
      // A = -eta1^2/(4 eta2) - 0.5 log(-2 eta2) = mu^2/(2 var) + 0.5 log var
      c.a = (0.5 * c.mean.array().square() / c.var.array() + 0.5 * c.var.array().log()).sum();
      comps[b].push_back(std::move(c));
    }
  }

  LossReport rep_out;
  rep_out.anneal_weight = w;
  Matrix d_mu = Matrix::Zero(dz, batch), d_lv = Matrix::Zero(dz, batch);
  Matrix d_logits = Matrix::Zero(static_cast<Eigen::Index>(dims.num_blocks) * kc, batch);
  std::vector<std::vector<Vector>> d_probs(static_cast<std::size_t>(batch),
                                           std::vector<Vector>(dims.num_blocks, Vector::Zero(kc)));
  std::vector<Matrix> d_eta1(dims.num_blocks), d_eta2(dims.num_blocks);
  // Direct gradients w.r.t. component means / log-variances (sampled path).
  std::vector<Matrix> d_cmean(dims.num_blocks), d_clv(dims.num_blocks);
  for (std::size_t b = 0; b < dims.num_blocks; ++b) {
    d_eta1[b] = Matrix::Zero(static_cast<Eigen::Index>(block_dims[b]), kc);
    d_eta2[b] = Matrix::Zero(static_cast<Eigen::Index>(block_dims[b]), kc);
    d_cmean[b] = Matrix::Zero(static_cast<Eigen::Index>(block_dims[b]), kc);
    d_clv[b] = Matrix::Zero(static_cast<Eigen::Index>(block_dims[b]), kc);
  }
  double sampled_kl = 0.0;

  for (Eigen::Index i = 0; i < batch; ++i) {
    const auto iu = static_cast<std::size_t>(i);
    rep_out.r_rec += ll.segment(i * samples, samples).mean() * inv_b;
    Eigen::Index offset = 0;
    for (std::size_t b = 0; b < dims.num_blocks; ++b) {
      const auto db = static_cast<Eigen::Index>(block_dims[b]);
      const Vector& q = enc.probs[iu][b];
      const Vector mu = enc.mu.col(i).segment(offset, db);
      const Vector var = enc.log_var.col(i).segment(offset, db).array().exp().matrix();

      Vector bar1 = Vector::Zero(db), bar2 = Vector::Zero(db);
      double expected_a = 0.0, wvar_post = 0.0;
      for (Eigen::Index k = 0; k < kc; ++k) {
        bar1 += q[k] * comps[b][static_cast<std::size_t>(k)].eta1;
        bar2 += q[k] * comps[b][static_cast<std::size_t>(k)].eta2;
        expected_a += q[k] * comps[b][static_cast<std::size_t>(k)].a;
      }
      const Vector bar_var = (-0.5 / bar2.array()).matrix();
      const Vector bar_mean = bar1.cwiseProduct(bar_var);
      const double bar_a = (0.5 * bar_mean.array().square() / bar_var.array() + 0.5 * bar_var.array().log()).sum();
      for (Eigen::Index k = 0; k < kc; ++k) {
        const auto& c = comps[b][static_cast<std::size_t>(k)];
        wvar_post += q[k] * ((c.eta1 - bar1).squaredNorm() + (c.eta2 - bar2).squaredNorm());
      }
      const Vector diff = mu - bar_mean;
      const double kl =
          0.5 * ((bar_var.array() / var.array()).log() + (var.array() + diff.array().square()) / bar_var.array() - 1.0)
                    .sum();
      const double ld = expected_a - bar_a;
      double entropy = 0.0;
      for (Eigen::Index k = 0; k < kc; ++k) entropy -= q[k] * std::log(std::max(q[k], kProbClamp));
      const double rc = entropy - std::log(k_d);

      rep_out.avg_kl += kl * inv_b;
      rep_out.l_d += ld * inv_b;
      rep_out.r_c += rc * inv_b;
      rep_out.weighted_var_posterior += wvar_post * inv_b;

      if (sampled) {
        const Vector logits = enc.tape.output().block(2 * dz + static_cast<Eigen::Index>(b) * kc, i, kc, 1);
        const Vector u = gumbel_uniform->block(static_cast<Eigen::Index>(b) * kc, i, kc, 1);
        const auto draw = gumbel_softmax(logits, cfg.temperature, u, cfg.hard);
        Vector comp_kl(kc);
        for (Eigen::Index k = 0; k < kc; ++k) {
          const auto& c = comps[b][static_cast<std::size_t>(k)];
          const Vector dk = mu - c.mean;
          comp_kl[k] =
              0.5 * ((c.var.array() / var.array()).log() + (var.array() + dk.array().square()) / c.var.array() - 1.0)
                        .sum();
        }
        sampled_kl += draw.output.dot(comp_kl) * inv_b;
        if (accumulate) {
          const double g = w * inv_b;
          for (Eigen::Index k = 0; k < kc; ++k) {
            const double ck = draw.output[k];
            if (ck == 0.0) continue;
            const auto& c = comps[b][static_cast<std::size_t>(k)];
            const Vector dk = mu - c.mean;
            d_mu.col(i).segment(offset, db) += g * ck * dk.cwiseQuotient(c.var);
            for (Eigen::Index d = 0; d < db; ++d) {
              if (!enc.log_var_clamped(offset + d, i)) d_lv(offset + d, i) += g * ck * 0.5 * (var[d] / c.var[d] - 1.0);
            }
            d_cmean[b].col(k) -= g * ck * dk.cwiseQuotient(c.var);
            d_clv[b].col(k) +=
                g * ck * 0.5 * (1.0 - (var.array() + dk.array().square()) / c.var.array()).matrix();
          }
          d_logits.block(static_cast<Eigen::Index>(b) * kc, i, kc, 1) +=
              gumbel_softmax_backward(draw, cfg.temperature, g * comp_kl);
        }
      }

      if (accumulate) {
        // KL w.r.t. the posterior moments.
        d_mu.col(i).segment(offset, db) += g_kl * diff.cwiseQuotient(bar_var);
        const Vector dkl_dlv = 0.5 * (var.cwiseQuotient(bar_var).array() - 1.0).matrix();
        for (Eigen::Index d = 0; d < db; ++d) {
          if (!enc.log_var_clamped(offset + d, i)) d_lv(offset + d, i) += g_kl * dkl_dlv[d];
        }
        // d(-total)/d(eta_bar) = g_kl (grad A(bar) - E_q phi) - g_ld grad A(bar)
        const Vector ga_bar1 = bar_mean;
        const Vector ga_bar2 = (bar_mean.array().square() + bar_var.array()).matrix();
        const Vector gbar1 = g_kl * (ga_bar1 - mu) - g_ld * ga_bar1;
        const Vector gbar2 = g_kl * (ga_bar2 - (mu.array().square() + var.array()).matrix()) - g_ld * ga_bar2;
        for (Eigen::Index k = 0; k < kc; ++k) {
          const auto& c = comps[b][static_cast<std::size_t>(k)];
          d_eta1[b].col(k) += q[k] * (gbar1 + g_ld * c.grad_a1);
          d_eta2[b].col(k) += q[k] * (gbar2 + g_ld * c.grad_a2);
          d_probs[iu][b][k] += gbar1.dot(c.eta1) + gbar2.dot(c.eta2) + g_ld * c.a + g_rc * detail::entropy_partial(q[k]);
        }
      }
      offset += db;
    }
  }

  // Mutual information over the batch.
  for (std::size_t b = 0; b < dims.num_blocks; ++b) {
    Vector marginal = Vector::Zero(kc);
    double conditional = 0.0;
    for (Eigen::Index i = 0; i < batch; ++i) {
      const Vector& q = enc.probs[static_cast<std::size_t>(i)][b];
      marginal += q;
      for (Eigen::Index k = 0; k < kc; ++k) conditional -= q[k] * std::log(std::max(q[k], kProbClamp));
    }
    marginal *= inv_b;
    double h_marginal = 0.0;
    for (Eigen::Index k = 0; k < kc; ++k) h_marginal -= marginal[k] * std::log(std::max(marginal[k], kProbClamp));
    rep_out.l_mi += h_marginal - conditional * inv_b;
    if (accumulate && cfg.mi_weight != 0.0) {
      const double g_mi = -cfg.mi_weight * inv_b;
      for (Eigen::Index i = 0; i < batch; ++i) {
        const Vector& q = enc.probs[static_cast<std::size_t>(i)][b];
        for (Eigen::Index k = 0; k < kc; ++k) {
          d_probs[static_cast<std::size_t>(i)][b][k] +=
              g_mi * (detail::entropy_partial(marginal[k]) - detail::entropy_partial(q[k]));
        }
      }
    }
  }

  rep_out.r_z = -rep_out.avg_kl - rep_out.l_d;
  rep_out.weighted_var = weighted_variance(model.mixture_prior(), CategoricalPosterior::uniform(model.mixture_prior()));
  rep_out.total = sampled ? rep_out.r_rec + w * (rep_out.r_c - sampled_kl + cfg.beta * rep_out.l_d) +
                                cfg.mi_weight * rep_out.l_mi
                          : total_loss(rep_out.r_rec, rep_out.r_c, rep_out.avg_kl, rep_out.l_d, rep_out.l_mi, w, cfg);

  detail::require_finite_term(rep_out.r_rec, "r_rec");
  detail::require_finite_term(rep_out.r_c, "r_c");
  detail::require_finite_term(rep_out.avg_kl, "avg_kl");
  detail::require_finite_term(rep_out.l_d, "l_d");
  detail::require_finite_term(rep_out.l_mi, "l_mi");
  detail::require_finite_term(rep_out.total, "total");

  if (!accumulate) return rep_out;

  // Decoder and reparameterization.
  const Matrix d_out = -(inv_b / static_cast<double>(samples)) * dll;
  const Matrix dz_mat = model.decoder.backward(dec, d_out);
  const auto rg = gaussian_reparam_backward(rep, noise, dz_mat);
  for (Eigen::Index i = 0; i < batch; ++i) {
    d_mu.col(i) += rg.mu.middleCols(i * samples, samples).rowwise().sum();
    const Vector dlv = rg.log_var.middleCols(i * samples, samples).rowwise().sum();
    for (Eigen::Index d = 0; d < dz; ++d) {
      if (!enc.log_var_clamped(d, i)) d_lv(d, i) += dlv[d];
    }
    for (std::size_t b = 0; b < dims.num_blocks; ++b) {
      d_logits.block(static_cast<Eigen::Index>(b) * kc, i, kc, 1) +=
          softmax_backward(enc.probs[static_cast<std::size_t>(i)][b], d_probs[static_cast<std::size_t>(i)][b]);
    }
  }
  Matrix d_enc(static_cast<Eigen::Index>(dims.encoder_output_dim()), batch);
  d_enc << d_mu, d_lv, d_logits;
  model.encoder.backward(enc.tape, d_enc);

  // eta_c = [m / v, -1 / (2 v)] with v = exp(clamp(s)).
  for (std::size_t b = 0; b < dims.num_blocks; ++b) {
    const auto& s = model.prior.log_var[b];
    for (Eigen::Index k = 0; k < kc; ++k) {
      const auto& c = comps[b][static_cast<std::size_t>(k)];
      for (Eigen::Index d = 0; d < c.mean.size(); ++d) {
        const double inv_v = 1.0 / c.var[d];
        model.prior.grad_mean[b](d, k) += d_eta1[b](d, k) * inv_v + d_cmean[b](d, k);
        const double sv = s(d, k);
        if (sv >= kLogVarMin && sv <= kLogVarMax) {
          model.prior.grad_log_var[b](d, k) +=
              d_eta1[b](d, k) * (-c.mean[d] * inv_v) + d_eta2[b](d, k) * (0.5 * inv_v) + d_clv[b](d, k);
        }
      }
    }
  }
  return rep_out;
}

/// Optimizer and RNG state owned by one trainer.
struct TrainState {
  AdamState adam;
  std::mt19937_64 rng;
  std::uint64_t step = 0;
};

inline Matrix standard_normal(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng) {
  std::normal_distribution<double> normal;
  Matrix m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j) {
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = normal(rng);
  }
  return m;
}

/// One optimizer step on `batch`: draws z-noise, backpropagates the negated
/// objective and applies Adam to encoder, decoder and prior parameters.
inline LossReport train_step(DemVaeModel& model, const Matrix& batch, TrainState& state) {
  const auto samples = static_cast<Eigen::Index>(model.objective().n_z_samples);
  const Matrix noise = standard_normal(static_cast<Eigen::Index>(model.dims().z_dim), batch.cols() * samples, state.rng);
  Matrix uniform;
  if (model.objective().estimator == RzEstimator::kGumbel) {
    std::uniform_real_distribution<double> dist(std::numeric_limits<double>::min(), 1.0);
    uniform.resize(static_cast<Eigen::Index>(model.dims().num_blocks * model.dims().num_components), batch.cols());
    for (Eigen::Index j = 0; j < uniform.cols(); ++j) {
      for (Eigen::Index i = 0; i < uniform.rows(); ++i) uniform(i, j) = dist(state.rng);
    }
  }
  model.zero_grad();
  const auto report = evaluate_batch(model, batch, noise, state.step, true, uniform.size() ? &uniform : nullptr);
  const auto params = model.parameters();
  const auto grads = model.gradients();
  adam_step(state.adam, params, grads);
  ++state.step;
  return report;
}

/// Batch of columns drawn uniformly with replacement.
inline Matrix sample_batch(const Matrix& data, std::size_t batch_size, std::mt19937_64& rng) {
  if (data.cols() == 0) throw std::invalid_argument("sample_batch: empty dataset");
  std::uniform_int_distribution<Eigen::Index> pick(0, data.cols() - 1);
  Matrix batch(data.rows(), static_cast<Eigen::Index>(batch_size));
  for (Eigen::Index j = 0; j < batch.cols(); ++j) batch.col(j) = data.col(pick(rng));
  return batch;
}

/// Runs `steps` optimizer steps, invoking `on_step(step, report)` after each.
template <class OnStep>
void train(DemVaeModel& model, const Matrix& data, const TrainConfig& cfg, TrainState& state, std::size_t steps,
           OnStep&& on_step) {
  cfg.validate();
  state.adam.lr = cfg.lr;
  for (std::size_t s = 0; s < steps; ++s) {
    const Matrix batch = sample_batch(data, cfg.batch_size, state.rng);
    const auto report = train_step(model, batch, state);
    on_step(state.step, report);
  }
}

/// log p(z) under the uniform mixture prior, summed over blocks.
inline double prior_log_density(const DemVaeModel& model, std::span<const double> z) {
  double total = 0.0;
  std::size_t offset = 0;
  std::vector<double> terms(model.dims().num_components);
  const double log_k = std::log(static_cast<double>(model.dims().num_components));
  for (std::size_t b = 0; b < model.dims().num_blocks; ++b) {
    const auto& m = model.prior.mean[b];
    const auto& s = model.prior.log_var[b];
    for (Eigen::Index k = 0; k < m.cols(); ++k) {
      double lp = -log_k;
      for (Eigen::Index d = 0; d < m.rows(); ++d) {
        lp += detail::gaussian_logpdf(z[offset + static_cast<std::size_t>(d)], m(d, k),
                                      std::clamp(s(d, k), kLogVarMin, kLogVarMax));
      }
      terms[static_cast<std::size_t>(k)] = lp;
    }
    total += detail::log_sum_exp(terms);
    offset += static_cast<std::size_t>(m.rows());
  }
  return total;
}

/// -log (1/n) sum_i p(x|z_i) p(z_i) / q(z_i|x) with z_i ~ q(z|x).
inline double importance_sampling_nll(const DemVaeModel& model, std::span<const double> x, std::size_t n,
                                      std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("importance_sampling_nll: n must be >= 1");
  if (x.size() != model.dims().data_dim) throw ShapeError("importance_sampling_nll: data dimension mismatch");
  const auto dz = static_cast<Eigen::Index>(model.dims().z_dim);
  const Matrix xm = Eigen::Map<const Vector>(x.data(), static_cast<Eigen::Index>(x.size()));
  const auto enc = detail::run_encoder(model, xm);
  std::mt19937_64 rng(seed);
  const Matrix noise = standard_normal(dz, static_cast<Eigen::Index>(n), rng);
  const auto rep = gaussian_reparam(enc.mu.replicate(1, noise.cols()), enc.log_var.replicate(1, noise.cols()), noise);
  const auto dec = model.decoder.forward(rep.z);
  const Vector ll = detail::observation_loglik(model.obs_family(), xm.replicate(1, noise.cols()), dec.output(), nullptr);
  std::vector<double> log_w(n);
  std::vector<double> z(static_cast<std::size_t>(dz));
  for (std::size_t j = 0; j < n; ++j) {
    const auto col = static_cast<Eigen::Index>(j);
    double log_q = 0.0;
    for (Eigen::Index d = 0; d < dz; ++d) {
      z[static_cast<std::size_t>(d)] = rep.z(d, col);
      log_q += detail::gaussian_logpdf(rep.z(d, col), enc.mu(d, 0), enc.log_var(d, 0));
    }
    log_w[j] = ll[col] + prior_log_density(model, z) - log_q;
  }
  return -(detail::log_sum_exp(log_w) - std::log(static_cast<double>(n)));
}

struct GeneratedSample {
  std::vector<std::size_t> labels;  // one component index per block
  std::vector<double> z;
  std::vector<double> x_hat;        // decoder mean (gaussian) or probabilities (bernoulli)
};

/// Ancestral sampling: c ~ p(c) per block via Gumbel-max on uniform logits,
/// z ~ p(z|c), x_hat = E p(x|z).
inline std::vector<GeneratedSample> sample_generation(const DemVaeModel& model, std::size_t n, std::uint64_t seed,
                                                      double temperature = 1.0) {
  if (n < 1) throw std::invalid_argument("sample_generation: n must be >= 1");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uniform(std::numeric_limits<double>::min(), 1.0);
  std::normal_distribution<double> normal;
  const auto& dims = model.dims();
  const auto kc = static_cast<Eigen::Index>(dims.num_components);
  const Vector logits = Vector::Zero(kc);
  std::vector<GeneratedSample> out(n);
  Matrix zm(static_cast<Eigen::Index>(dims.z_dim), static_cast<Eigen::Index>(n));
  for (std::size_t j = 0; j < n; ++j) {
    auto& g = out[j];
    for (std::size_t b = 0; b < dims.num_blocks; ++b) {
      Vector u(kc);
      for (Eigen::Index k = 0; k < kc; ++k) u[k] = uniform(rng);
      const auto c = gumbel_softmax(logits, temperature, u, true).argmax;
      g.labels.push_back(c);
      const auto comp = model.component(b, c);
      for (std::size_t d = 0; d < comp.dim(); ++d) g.z.push_back(comp.mean[d] + std::sqrt(comp.variance[d]) * normal(rng));
    }
    zm.col(static_cast<Eigen::Index>(j)) = Eigen::Map<const Vector>(g.z.data(), static_cast<Eigen::Index>(g.z.size()));
  }
  const auto dec = model.decoder.forward(zm);
  for (std::size_t j = 0; j < n; ++j) {
    const auto col = dec.output().col(static_cast<Eigen::Index>(j));
    for (Eigen::Index d = 0; d < col.size(); ++d) {
      out[j].x_hat.push_back(model.obs_family() == ObsFamily::kBernoulli ? detail::sigmoid(col[d]) : col[d]);
    }
  }
  return out;
}

}  // namespace demvae
