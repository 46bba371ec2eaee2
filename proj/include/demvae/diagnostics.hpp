// Mode-collapse and interpretability measurements.
#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "demvae/data.hpp"
#include "demvae/model.hpp"

namespace demvae {

struct LabelAssignment {
  std::vector<std::vector<std::size_t>> per_block;  // argmax per block, per point
  std::vector<std::size_t> joint;                   // mixed-radix join, block 0 least significant
};

/// Argmax of q(c|x) per block, ties to the lowest index.
inline std::vector<std::size_t> argmax_per_block(const CategoricalPosterior& qc) {
  std::vector<std::size_t> out;
  for (std::size_t b = 0; b < qc.num_blocks(); ++b) {
    const auto p = qc.block(b);
    out.push_back(static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin()));
  }
  return out;
}

inline std::size_t join_labels(std::span<const std::size_t> labels, std::size_t k) {
  std::size_t joint = 0, radix = 1;
  for (auto l : labels) {
    joint += l * radix;
    radix *= k;
  }
  return joint;
}

inline LabelAssignment assign_labels(const DemVaeModel& model, const LabeledDataset& ds) {
  LabelAssignment out;
  for (const auto& x : ds.points) {
    auto labels = argmax_per_block(encode(model, x).qc);
    out.joint.push_back(join_labels(labels, model.dims().num_components));
    out.per_block.push_back(std::move(labels));
  }
  return out;
}

/// 1 - H(C_true | C_pred) / H(C_true), and 1 when H(C_true) = 0.
inline double homogeneity(std::span<const std::size_t> predicted, std::span<const std::size_t> truth) {
  if (predicted.size() != truth.size()) throw ShapeError("homogeneity: length mismatch");
  if (truth.empty()) throw std::invalid_argument("homogeneity: empty labeling");
  const double n = static_cast<double>(truth.size());
  std::map<std::size_t, double> true_counts, pred_counts;
  std::map<std::pair<std::size_t, std::size_t>, double> joint;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    true_counts[truth[i]] += 1.0;
    pred_counts[predicted[i]] += 1.0;
    joint[{predicted[i], truth[i]}] += 1.0;
  }
  double h_true = 0.0;
  for (const auto& [_, c] : true_counts) h_true -= (c / n) * std::log(c / n);
  if (h_true <= 0.0) return 1.0;
  double h_cond = 0.0;
  for (const auto& [key, c] : joint) h_cond -= (c / n) * std::log(c / pred_counts[key.first]);
  return std::clamp(1.0 - h_cond / h_true, 0.0, 1.0);
}

/// final / max(early, 1e-12), early taken at 2% of the trajectory.
inline double collapse_score(std::span<const double> trajectory) {
  if (trajectory.size() < 2) throw std::invalid_argument("collapse_score: need at least two points");
  const auto early_idx = static_cast<std::size_t>(0.02 * static_cast<double>(trajectory.size() - 1));
  return trajectory.back() / std::max(trajectory[early_idx], 1e-12);
}

struct EvalReport {
  double homogeneity = 0.0;
  double mutual_info = 0.0;
  double weighted_var = 0.0;
  double nll_is = 0.0;
  std::vector<std::size_t> usage;  // points assigned to each joint label
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(EvalReport, homogeneity, mutual_info, weighted_var, nll_is, usage)

/// Prior dispersion under p(c): the collapse diagnostic.
inline double prior_weighted_variance(const DemVaeModel& model) {
  const auto prior = model.mixture_prior();
  return weighted_variance(prior, CategoricalPosterior::uniform(prior));
}

inline EvalReport evaluate(const DemVaeModel& model, const LabeledDataset& ds, std::size_t nll_samples,
                           std::uint64_t seed) {
  if (ds.size() == 0) throw std::invalid_argument("evaluate: empty dataset");
  EvalReport r;
  std::vector<CategoricalPosterior> posteriors;
  std::vector<std::size_t> predicted;
  std::size_t radix = 1;
  for (std::size_t b = 0; b < model.dims().num_blocks; ++b) radix *= model.dims().num_components;
  r.usage.assign(radix, 0);
  double nll = 0.0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    auto post = encode(model, ds.points[i]);
    const auto labels = argmax_per_block(post.qc);
    predicted.push_back(join_labels(labels, model.dims().num_components));
    ++r.usage[predicted.back()];
    posteriors.push_back(std::move(post.qc));
    nll += importance_sampling_nll(model, ds.points[i], nll_samples, seed + i);
  }
  r.homogeneity = homogeneity(predicted, ds.labels);
  r.mutual_info = mutual_information(posteriors);
  r.weighted_var = prior_weighted_variance(model);
  r.nll_is = nll / static_cast<double>(ds.size());
  return r;
}

/// Posterior means with predicted and true labels, then the prior components:
///   mu0,mu1,pred_label,true_label            (one row per point)
///   component_mean0,component_mean1,component_var0,component_var1
///                                            (one row per component)
/// Component coordinates are the first two dimensions of the component's own
/// block; a one-dimensional block reports mean 0 and variance 1 for the second.
inline void export_latent(const DemVaeModel& model, const LabeledDataset& ds, std::ostream& out) {
  if (model.dims().z_dim < 2) throw std::invalid_argument("export_latent: need z dimension >= 2");
  char buf[32];
  auto num = [&](double x) {
    const auto res = std::to_chars(buf, buf + sizeof(buf), x);
    return std::string(buf, res.ptr);
  };
  out << "mu0,mu1,pred_label,true_label\n";
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto post = encode(model, ds.points[i]);
    const auto pred = join_labels(argmax_per_block(post.qc), model.dims().num_components);
    out << num(post.qz.mean[0]) << ',' << num(post.qz.mean[1]) << ',' << pred << ',' << ds.labels[i] << '\n';
  }
  out << "component_mean0,component_mean1,component_var0,component_var1\n";
  for (std::size_t b = 0; b < model.dims().num_blocks; ++b) {
    for (std::size_t k = 0; k < model.dims().num_components; ++k) {
      const auto c = model.component(b, k);
      const double m1 = c.dim() > 1 ? c.mean[1] : 0.0;
      const double v1 = c.dim() > 1 ? c.variance[1] : 1.0;
      out << num(c.mean[0]) << ',' << num(m1) << ',' << num(c.variance[0]) << ',' << num(v1) << '\n';
    }
  }
}

inline void export_latent(const DemVaeModel& model, const LabeledDataset& ds, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  export_latent(model, ds, out);
  if (!out) throw std::runtime_error("failed writing " + path);
}

}  // namespace demvae
