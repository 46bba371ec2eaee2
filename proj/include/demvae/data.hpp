// Seeded synthetic datasets with ground-truth labels, and CSV load/save.
//
// CSV layout: header `label,f0,f1,...`, one row per point.
#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace demvae {

class ParseError : public std::runtime_error {
 public:
  ParseError(std::size_t line, const std::string& msg)
      : std::runtime_error("line " + std::to_string(line) + ": " + msg), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

struct LabeledDataset {
  std::vector<std::vector<double>> points;
  std::vector<std::size_t> labels;
  std::map<std::string, std::string> meta;

  std::size_t size() const { return points.size(); }
  std::size_t dim() const { return points.empty() ? 0 : points.front().size(); }
  std::size_t num_classes() const {
    return labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end()) + 1;
  }

  /// Columns are points.
  Eigen::MatrixXd matrix() const {
    Eigen::MatrixXd m(static_cast<Eigen::Index>(dim()), static_cast<Eigen::Index>(size()));
    for (std::size_t j = 0; j < size(); ++j) {
      for (std::size_t d = 0; d < dim(); ++d) m(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(j)) = points[j][d];
    }
    return m;
  }
};

namespace detail {

// Balanced labels i mod K, shuffled.
inline std::vector<std::size_t> balanced_labels(std::size_t k, std::size_t n, std::mt19937_64& rng) {
  std::vector<std::size_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = i % k;
  std::shuffle(labels.begin(), labels.end(), rng);
  return labels;
}

}  // namespace detail

/// Cluster centers of gen_gaussian_clusters: on a circle of radius
/// `separation` when D_x = 2, otherwise random orthonormal directions (random
/// unit directions once K > D_x) scaled by `separation`.
inline std::vector<std::vector<double>> cluster_centers(std::size_t k, std::size_t dim, double separation,
                                                        std::mt19937_64& rng) {
  std::vector<std::vector<double>> centers(k, std::vector<double>(dim, 0.0));
  if (dim == 1) {
    for (std::size_t c = 0; c < k; ++c) centers[c][0] = separation * (static_cast<double>(c) - 0.5 * (k - 1.0));
    return centers;
  }
  if (dim == 2) {
    for (std::size_t c = 0; c < k; ++c) {
      const double angle = 2.0 * std::numbers::pi * static_cast<double>(c) / static_cast<double>(k);
      centers[c] = {separation * std::cos(angle), separation * std::sin(angle)};
    }
    return centers;
  }
  std::normal_distribution<double> normal;
  for (std::size_t c = 0; c < k; ++c) {
    auto& v = centers[c];
    for (double& x : v) x = normal(rng);
    // Gram-Schmidt against earlier directions while an orthogonal one exists.
    if (c < dim) {
      for (std::size_t p = 0; p < c; ++p) {
        double dot = 0.0;
        for (std::size_t d = 0; d < dim; ++d) dot += v[d] * centers[p][d] / separation;
        for (std::size_t d = 0; d < dim; ++d) v[d] -= dot * centers[p][d] / separation;
      }
    }
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    for (double& x : v) x *= separation / norm;
  }
  return centers;
}

inline LabeledDataset gen_gaussian_clusters(std::size_t k_true, std::size_t n, std::size_t dim, double separation,
                                            std::uint64_t seed) {
  if (k_true < 1 || n < 1 || dim < 1) throw std::invalid_argument("gen_gaussian_clusters: counts must be >= 1");
  if (!(separation > 0.0)) throw std::invalid_argument("gen_gaussian_clusters: separation must be > 0");
  std::mt19937_64 rng(seed);
  const auto centers = cluster_centers(k_true, dim, separation, rng);
  LabeledDataset ds;
  ds.labels = detail::balanced_labels(k_true, n, rng);
  std::normal_distribution<double> normal;
  ds.points.resize(n, std::vector<double>(dim));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t d = 0; d < dim; ++d) ds.points[i][d] = centers[ds.labels[i]][d] + normal(rng);
  }
  std::ostringstream sep;
  sep.precision(17);
  sep << separation;
  ds.meta = {{"generator", "clusters"}, {"k", std::to_string(k_true)}, {"n", std::to_string(n)},
             {"dim", std::to_string(dim)}, {"separation", sep.str()}, {"seed", std::to_string(seed)}};
  return ds;
}

/// Random binary templates; each sample is its template with i.i.d. bit flips.
inline LabeledDataset gen_binary_templates(std::size_t k_true, std::size_t n, std::size_t dim, double flip_prob,
                                           std::uint64_t seed) {
  if (k_true < 1 || n < 1 || dim < 1) throw std::invalid_argument("gen_binary_templates: counts must be >= 1");
  if (!(flip_prob >= 0.0 && flip_prob < 0.5)) throw std::invalid_argument("gen_binary_templates: flip_prob must lie in [0, 0.5)");
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution coin(0.5);
  std::vector<std::vector<double>> templates(k_true, std::vector<double>(dim));
  for (auto& t : templates) {
    for (double& b : t) b = coin(rng) ? 1.0 : 0.0;
  }
  LabeledDataset ds;
  ds.labels = detail::balanced_labels(k_true, n, rng);
  std::bernoulli_distribution flip(flip_prob);
  ds.points.resize(n, std::vector<double>(dim));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t d = 0; d < dim; ++d) {
      const double bit = templates[ds.labels[i]][d];
      ds.points[i][d] = flip(rng) ? 1.0 - bit : bit;
    }
  }
  std::ostringstream fp;
  fp.precision(17);
  fp << flip_prob;
  ds.meta = {{"generator", "binary"}, {"k", std::to_string(k_true)}, {"n", std::to_string(n)},
             {"dim", std::to_string(dim)}, {"flip_prob", fp.str()}, {"seed", std::to_string(seed)}};
  return ds;
}

inline void save_csv(const LabeledDataset& ds, std::ostream& out) {
  out << "label";
  for (std::size_t d = 0; d < ds.dim(); ++d) out << ",f" << d;
  out << '\n';
  char buf[32];
  for (std::size_t i = 0; i < ds.size(); ++i) {
    out << ds.labels[i];
    for (double x : ds.points[i]) {
      const auto res = std::to_chars(buf, buf + sizeof(buf), x);
      out << ',' << std::string_view(buf, static_cast<std::size_t>(res.ptr - buf));
    }
    out << '\n';
  }
}

inline void save_csv(const LabeledDataset& ds, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  save_csv(ds, out);
  if (!out) throw std::runtime_error("failed writing " + path);
}

inline LabeledDataset load_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw ParseError(1, "empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) header.push_back(cell);
  }
  if (header.empty() || header[0] != "label") throw ParseError(1, "header must start with 'label'");
  for (std::size_t d = 1; d < header.size(); ++d) {
    if (header[d] != "f" + std::to_string(d - 1)) throw ParseError(1, "unexpected column name '" + header[d] + "'");
  }
  const std::size_t dim = header.size() - 1;
  LabeledDataset ds;
  ds.meta = {{"generator", "file"}};
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string_view> cells;
    std::size_t start = 0;
    for (std::size_t pos = 0; pos <= line.size(); ++pos) {
      if (pos == line.size() || line[pos] == ',') {
        cells.emplace_back(line.data() + start, pos - start);
        start = pos + 1;
      }
    }
    if (cells.size() != dim + 1) {
      throw ParseError(line_no, "expected " + std::to_string(dim + 1) + " fields, got " + std::to_string(cells.size()));
    }
    std::size_t label = 0;
    auto lr = std::from_chars(cells[0].data(), cells[0].data() + cells[0].size(), label);
    if (lr.ec != std::errc() || lr.ptr != cells[0].data() + cells[0].size()) throw ParseError(line_no, "bad label");
    std::vector<double> row(dim);
    for (std::size_t d = 0; d < dim; ++d) {
      const auto& c = cells[d + 1];
      auto r = std::from_chars(c.data(), c.data() + c.size(), row[d]);
      if (r.ec != std::errc() || r.ptr != c.data() + c.size() || !std::isfinite(row[d])) {
        throw ParseError(line_no, "bad value in column f" + std::to_string(d));
      }
    }
    ds.labels.push_back(label);
    ds.points.push_back(std::move(row));
  }
  return ds;
}

inline LabeledDataset load_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  return load_csv(in);
}

}  // namespace demvae
