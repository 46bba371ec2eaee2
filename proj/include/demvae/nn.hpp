// Minimal dense network stack with hand-derived backpropagation, the two
// reparameterized samplers, Adam and a central-difference gradient checker.
//
// Matrices hold one sample per column, so a batch of B inputs of width D is
// a D x B matrix.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <span>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "demvae/expfam.hpp"

namespace demvae {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

enum class Activation { kTanh, kIdentity };

struct DenseLayer {
  Matrix weight;  // out x in
  Vector bias;
  Activation activation = Activation::kIdentity;
  Matrix grad_weight;
  Vector grad_bias;
};

/// Cached layer inputs and outputs of one forward pass; activations[0] is the
/// input and activations[l + 1] the output of layer l.
struct Tape {
  std::vector<Matrix> activations;
  const Matrix& output() const { return activations.back(); }
};

class DenseNet {
 public:
  DenseNet() = default;

  /// Glorot-uniform weights, zero biases. `widths` lists input width, hidden
  /// widths and output width.
  template <class Rng>
  DenseNet(std::span<const std::size_t> widths, Activation hidden, Activation output, Rng& rng) {
    if (widths.size() < 2) throw std::invalid_argument("DenseNet: need at least input and output width");
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
      const auto in = static_cast<Eigen::Index>(widths[l]);
      const auto out = static_cast<Eigen::Index>(widths[l + 1]);
      const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
      std::uniform_real_distribution<double> dist(-limit, limit);
      DenseLayer layer;
      layer.weight.resize(out, in);
      for (Eigen::Index j = 0; j < in; ++j) {
        for (Eigen::Index i = 0; i < out; ++i) layer.weight(i, j) = dist(rng);
      }
      layer.bias = Vector::Zero(out);
      layer.activation = (l + 2 == widths.size()) ? output : hidden;
      add_layer(std::move(layer));
    }
  }

  explicit DenseNet(std::vector<DenseLayer> layers) {
    for (auto& l : layers) add_layer(std::move(l));
  }

  std::size_t num_layers() const { return layers_.size(); }
  DenseLayer& layer(std::size_t i) { return layers_.at(i); }
  const DenseLayer& layer(std::size_t i) const { return layers_.at(i); }
  Eigen::Index input_dim() const { return layers_.front().weight.cols(); }
  Eigen::Index output_dim() const { return layers_.back().weight.rows(); }

  Tape forward(const Matrix& input) const {
    if (layers_.empty()) throw std::logic_error("DenseNet: no layers");
    if (input.rows() != input_dim()) throw ShapeError("DenseNet::forward: input dimension mismatch");
    Tape tape;
    tape.activations.reserve(layers_.size() + 1);
    tape.activations.push_back(input);
    for (const auto& l : layers_) {
      Matrix pre = l.weight * tape.activations.back();
      pre.colwise() += l.bias;
      if (l.activation == Activation::kTanh) pre = pre.array().tanh().matrix();
      tape.activations.push_back(std::move(pre));
    }
    return tape;
  }

  /// Accumulates parameter gradients of <output_grad, output> and returns the
  /// gradient with respect to the input.
  Matrix backward(const Tape& tape, const Matrix& output_grad) {
    if (tape.activations.size() != layers_.size() + 1) throw ShapeError("DenseNet::backward: tape does not match net");
    if (output_grad.rows() != output_dim() || output_grad.cols() != tape.output().cols()) {
      throw ShapeError("DenseNet::backward: output gradient shape mismatch");
    }
    Matrix grad = output_grad;
    for (std::size_t li = layers_.size(); li-- > 0;) {
      auto& l = layers_[li];
      if (l.activation == Activation::kTanh) {
        grad.array() *= 1.0 - tape.activations[li + 1].array().square();
      }
      l.grad_weight.noalias() += grad * tape.activations[li].transpose();
      l.grad_bias += grad.rowwise().sum();
      grad = l.weight.transpose() * grad;
    }
    return grad;
  }

  void zero_grad() {
    for (auto& l : layers_) {
      l.grad_weight.setZero();
      l.grad_bias.setZero();
    }
  }

  std::vector<std::span<double>> parameters() {
    std::vector<std::span<double>> out;
    for (auto& l : layers_) {
      out.emplace_back(l.weight.data(), static_cast<std::size_t>(l.weight.size()));
      out.emplace_back(l.bias.data(), static_cast<std::size_t>(l.bias.size()));
    }
    return out;
  }

  std::vector<std::span<double>> gradients() {
    std::vector<std::span<double>> out;
    for (auto& l : layers_) {
      out.emplace_back(l.grad_weight.data(), static_cast<std::size_t>(l.grad_weight.size()));
      out.emplace_back(l.grad_bias.data(), static_cast<std::size_t>(l.grad_bias.size()));
    }
    return out;
  }

  std::size_t num_parameters() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
    return n;
  }

 private:
  void add_layer(DenseLayer layer) {
    if (layer.bias.size() != layer.weight.rows()) throw ShapeError("DenseNet: bias length must equal weight rows");
    if (!layers_.empty() && layers_.back().weight.rows() != layer.weight.cols()) {
      throw ShapeError("DenseNet: consecutive layer dimensions do not chain");
    }
    if (!layer.weight.allFinite() || !layer.bias.allFinite()) throw std::domain_error("DenseNet: non-finite parameter");
    layer.grad_weight = Matrix::Zero(layer.weight.rows(), layer.weight.cols());
    layer.grad_bias = Vector::Zero(layer.bias.size());
    layers_.push_back(std::move(layer));
  }

  std::vector<DenseLayer> layers_;
};

// ---------------------------------------------------------------------------
// Reparameterized samplers

inline constexpr double kLogVarMin = -8.0;
inline constexpr double kLogVarMax = 8.0;

struct GaussianReparam {
  Matrix z;
  Matrix sigma;  // exp(0.5 clamp(log_var))
  Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic> clamped;
};

/// z = mu + exp(0.5 log_var) * noise, log_var clamped to [-8, 8].
inline GaussianReparam gaussian_reparam(const Matrix& mu, const Matrix& log_var, const Matrix& noise) {
  if (mu.rows() != log_var.rows() || mu.cols() != log_var.cols() || mu.rows() != noise.rows() ||
      mu.cols() != noise.cols()) {
    throw ShapeError("gaussian_reparam: shape mismatch");
  }
  GaussianReparam r;
  r.clamped = (log_var.array() < kLogVarMin) || (log_var.array() > kLogVarMax);
  r.sigma = (0.5 * log_var.array().min(kLogVarMax).max(kLogVarMin)).exp().matrix();
  r.z = mu + r.sigma.cwiseProduct(noise);
  return r;
}

struct ReparamGrads {
  Matrix mu;
  Matrix log_var;
};

/// dz/dmu = 1, dz/dlog_var = 0.5 sigma noise (zero where clamped).
inline ReparamGrads gaussian_reparam_backward(const GaussianReparam& r, const Matrix& noise, const Matrix& dz) {
  ReparamGrads g;
  g.mu = dz;
  g.log_var = (0.5 * dz.array() * r.sigma.array() * noise.array()).matrix();
  g.log_var = r.clamped.select(Matrix::Zero(dz.rows(), dz.cols()), g.log_var);
  return g;
}

/// Softmax of one column, max-shifted.
inline Vector softmax(const Vector& logits) {
  const double mx = logits.maxCoeff();
  Vector e = (logits.array() - mx).exp().matrix();
  return e / e.sum();
}

/// dL/dlogits for p = softmax(logits) given dL/dp.
inline Vector softmax_backward(const Vector& probs, const Vector& dprobs) {
  return probs.cwiseProduct(dprobs - Vector::Constant(probs.size(), probs.dot(dprobs)));
}

struct GumbelSample {
  Vector soft;       // softmax((logits + g) / tau)
  Vector output;     // soft, or the hard one-hot when requested
  std::size_t argmax = 0;
};

/// Gumbel-softmax relaxation with g = -log(-log u). With `hard` the output
/// is the argmax one-hot (ties to the lowest index); the backward pass treats
/// the hard step as identity.
inline GumbelSample gumbel_softmax(const Vector& logits, double temperature, const Vector& uniform_noise, bool hard) {
  if (!(temperature > 0.0)) throw std::domain_error("gumbel_softmax: temperature must be positive");
  if (uniform_noise.size() != logits.size()) throw ShapeError("gumbel_softmax: noise dimension mismatch");
  Vector perturbed(logits.size());
  for (Eigen::Index i = 0; i < logits.size(); ++i) {
    const double u = uniform_noise[i];
    if (!(u > 0.0 && u < 1.0)) throw std::domain_error("gumbel_softmax: uniform noise must lie in (0, 1)");
    perturbed[i] = (logits[i] - std::log(-std::log(u))) / temperature;
  }
  GumbelSample s;
  s.soft = softmax(perturbed);
  for (Eigen::Index i = 1; i < perturbed.size(); ++i) {
    if (perturbed[i] > perturbed[static_cast<Eigen::Index>(s.argmax)]) s.argmax = static_cast<std::size_t>(i);
  }
  if (hard) {
    s.output = Vector::Zero(logits.size());
    s.output[static_cast<Eigen::Index>(s.argmax)] = 1.0;
  } else {
    s.output = s.soft;
  }
  return s;
}

inline Vector gumbel_softmax_backward(const GumbelSample& s, double temperature, const Vector& doutput) {
  return softmax_backward(s.soft, doutput) / temperature;
}

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  std::vector<double> m;
  std::vector<double> v;
};

/// One bias-corrected Adam update over a list of parameter blocks treated as
/// a single flat vector.
inline void adam_step(AdamState& s, std::span<const std::span<double>> params,
                      std::span<const std::span<double>> grads) {
  if (params.size() != grads.size()) throw ShapeError("adam_step: parameter/gradient block count mismatch");
  std::size_t total = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].size() != grads[i].size()) throw ShapeError("adam_step: parameter/gradient size mismatch");
    total += params[i].size();
  }
  if (s.m.empty() && s.v.empty()) {
    s.m.assign(total, 0.0);
    s.v.assign(total, 0.0);
  }
  if (s.m.size() != total || s.v.size() != total) throw ShapeError("adam_step: moment buffers do not match parameters");
  ++s.step;
  const double t = static_cast<double>(s.step);
  const double c1 = 1.0 - std::pow(s.beta1, t);
  const double c2 = 1.0 - std::pow(s.beta2, t);
  std::size_t k = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    for (std::size_t j = 0; j < params[i].size(); ++j, ++k) {
      const double g = grads[i][j];
      s.m[k] = s.beta1 * s.m[k] + (1.0 - s.beta1) * g;
      s.v[k] = s.beta2 * s.v[k] + (1.0 - s.beta2) * g * g;
      const double mhat = s.m[k] / c1;
      const double vhat = s.v[k] / c2;
      params[i][j] -= s.lr * mhat / (std::sqrt(vhat) + s.eps);
    }
  }
}

inline void adam_step(AdamState& s, std::span<double> params, std::span<double> grads) {
  const std::span<double> p[] = {params};
  const std::span<double> g[] = {grads};
  adam_step(s, p, g);
}

// ---------------------------------------------------------------------------
// Finite differences

/// Loss evaluated at a flat parameter vector; when `grad` is non-empty it
/// receives the analytic gradient.
using LossWithGradient = std::function<double(std::span<const double> params, std::span<double> grad)>;

struct GradientCheck {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Central differences on every coordinate; relative error is
/// |a - n| / max(1, |a|, |n|).
inline GradientCheck finite_diff_check_detailed(const LossWithGradient& loss, std::span<const double> params,
                                                double h = 1e-5) {
  std::vector<double> x(params.begin(), params.end());
  std::vector<double> analytic(x.size(), 0.0);
  loss(x, analytic);
  GradientCheck out;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + h;
    const double fp = loss(x, {});
    x[i] = orig - h;
    const double fm = loss(x, {});
    x[i] = orig;
    const double numeric = (fp - fm) / (2.0 * h);
    const double denom = std::max({1.0, std::abs(analytic[i]), std::abs(numeric)});
    const double err = std::abs(analytic[i] - numeric) / denom;
    if (i == 0 || err > out.max_rel_error) out = {err, i, analytic[i], numeric};
  }
  return out;
}

inline double finite_diff_check(const LossWithGradient& loss, std::span<const double> params, double h = 1e-5) {
  return finite_diff_check_detailed(loss, params, h).max_rel_error;
}

}  // namespace demvae
