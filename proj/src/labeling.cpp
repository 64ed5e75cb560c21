#include "sfmamba/labeling.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "sfmamba/tensor_io.hpp"

namespace sfm::labeling {

namespace {

std::span<const double> row(const Tensor& m, std::size_t i) {
  const std::size_t d = m.dim(1);
  return m.data().subspan(i * d, d);
}

void require_matrix(const Tensor& m, const char* what) {
  if (m.rank() != 2) throw ShapeError(std::string(what) + ": expected a matrix, got " + shape_str(m.shape()));
}

}  // namespace

void FeatureBank::validate() const {
  require_matrix(features, "feature bank");
  require_matrix(probs, "feature bank");
  if (features.dim(0) != probs.dim(0)) throw ShapeError("feature bank rows", features.shape(), probs.shape());
  for (std::size_t i = 0; i < probs.dim(0); ++i) {
    const auto p = row(probs, i);
    const double s = std::accumulate(p.begin(), p.end(), 0.0);
    if (std::abs(s - 1.0) > 1e-9) throw DomainError("feature bank: prediction row " + std::to_string(i) + " sums to " + std::to_string(s));
  }
}

double cosine(std::span<const double> a, std::span<const double> b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) throw DomainError("cosine: zero-norm vector");
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

Tensor soft_centroids(const FeatureBank& bank) {
  bank.validate();
  const std::size_t n = bank.size(), c_len = bank.classes(), d = bank.features.dim(1);
  std::vector<double> mu(c_len * d, 0.0), w(c_len, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto g = row(bank.features, i);
    for (std::size_t c = 0; c < c_len; ++c) {
      const double p = bank.probs[i * c_len + c];
      w[c] += p;
      for (std::size_t j = 0; j < d; ++j) mu[c * d + j] += p * g[j];
    }
  }
  for (std::size_t c = 0; c < c_len; ++c) {
    if (!(w[c] > 0.0)) throw DomainError("soft_centroids: class " + std::to_string(c) + " has zero total weight");
    for (std::size_t j = 0; j < d; ++j) mu[c * d + j] /= w[c];
  }
  return Tensor({c_len, d}, std::move(mu));
}

std::vector<std::size_t> assign_by_cosine(const Tensor& features, const Tensor& centroids) {
  require_matrix(features, "assign_by_cosine");
  require_matrix(centroids, "assign_by_cosine");
  if (features.dim(1) != centroids.dim(1)) throw ShapeError("assign_by_cosine", features.shape(), centroids.shape());
  std::vector<std::size_t> labels(features.dim(0));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    double best = -2.0;
    for (std::size_t c = 0; c < centroids.dim(0); ++c) {
      const double s = cosine(row(features, i), row(centroids, c));
      if (s > best) {
        best = s;
        labels[i] = c;
      }
    }
  }
  return labels;
}

HardPass hard_centroids_and_labels(const Tensor& features, const std::vector<std::size_t>& labels,
                                   const Tensor& fallback) {
  require_matrix(features, "hard_centroids_and_labels");
  const std::size_t n = features.dim(0), d = features.dim(1), c_len = fallback.dim(0);
  if (labels.size() != n) throw ShapeError("hard_centroids_and_labels: " + std::to_string(labels.size()) + " labels for " + std::to_string(n) + " rows");
  std::vector<double> mu(c_len * d, 0.0);
  std::vector<std::size_t> count(c_len, 0);
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] >= c_len) throw DomainError("hard_centroids_and_labels: label out of range");
    ++count[labels[i]];
    const auto g = row(features, i);
    for (std::size_t j = 0; j < d; ++j) mu[labels[i] * d + j] += g[j];
  }
  for (std::size_t c = 0; c < c_len; ++c)
    for (std::size_t j = 0; j < d; ++j)
      mu[c * d + j] = count[c] ? mu[c * d + j] / static_cast<double>(count[c]) : fallback[c * d + j];
  HardPass out{Tensor({c_len, d}, std::move(mu)), {}};
  out.labels = assign_by_cosine(features, out.centroids);
  return out;
}

std::vector<std::vector<std::size_t>> nearest_neighbors(const Tensor& features, std::size_t k) {
  require_matrix(features, "nearest_neighbors");
  const std::size_t n = features.dim(0);
  if (k == 0 || k >= n) throw DomainError("nearest_neighbors: need 0 < K < n, got K=" + std::to_string(k) + " n=" + std::to_string(n));
  std::vector<std::vector<std::size_t>> out(n);
  std::vector<double> sim(n);
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < n; ++i) {
    order.clear();
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      sim[j] = cosine(row(features, i), row(features, j));
      order.push_back(j);
    }
    std::partial_sort(order.begin(), order.begin() + static_cast<long>(k), order.end(),
                      [&](std::size_t a, std::size_t b) { return sim[a] > sim[b] || (sim[a] == sim[b] && a < b); });
    out[i].assign(order.begin(), order.begin() + static_cast<long>(k));
    std::sort(out[i].begin(), out[i].end());
  }
  return out;
}

UpaResult upa_posterior(const Tensor& features, const std::vector<std::size_t>& labels,
                        std::size_t n_classes, std::size_t k, std::size_t iters) {
  if (iters == 0) throw DomainError("upa_posterior: iters must be >= 1");
  const std::size_t n = features.dim(0);
  if (labels.size() != n) throw ShapeError("upa_posterior: label count does not match feature rows");
  UpaResult out;
  out.neighbors = nearest_neighbors(features, k);
  out.refined = labels;
  std::vector<double> post(n * n_classes);
  for (std::size_t round = 0; round < iters; ++round) {
    std::fill(post.begin(), post.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j : out.neighbors[i]) post[i * n_classes + out.refined[j]] += cosine(row(features, i), row(features, j));
    for (auto& v : post) v /= static_cast<double>(k);
    for (std::size_t i = 0; i < n; ++i) {
      const double* p = post.data() + i * n_classes;
      out.refined[i] = static_cast<std::size_t>(std::max_element(p, p + n_classes) - p);
    }
  }
  out.posteriors = Tensor({n, n_classes}, std::move(post));
  return out;
}

std::size_t selection_quota(double beta, std::size_t count) {
  const double x = beta * static_cast<double>(count);
  const double r = std::round(x);
  if (std::abs(x - r) < 1e-9) return static_cast<std::size_t>(r);
  return static_cast<std::size_t>(std::ceil(x));
}

std::size_t PseudoLabelTable::n_selected() const {
  return static_cast<std::size_t>(std::count(selected.begin(), selected.end(), true));
}

void PseudoLabelTable::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw IoError(path.string() + ": cannot open for writing");
  out << "index,label,refined,confidence,selected\n";
  out.precision(17);
  for (std::size_t i = 0; i < size(); ++i)
    out << i << ',' << label[i] << ',' << refined[i] << ',' << confidence[i] << ',' << (selected[i] ? 1 : 0) << '\n';
  if (!out) throw IoError(path.string() + ": write failed");
}

void upa_confidence_and_select(const Tensor& features, const std::vector<std::vector<std::size_t>>& neighbors,
                               PseudoLabelTable& table, std::size_t n_classes, double beta) {
  if (!(beta >= 0.0 && beta <= 1.0)) throw DomainError("upa_confidence_and_select: beta must lie in [0, 1]");
  const std::size_t n = table.refined.size();
  if (neighbors.size() != n) throw ShapeError("upa_confidence_and_select: neighbour lists do not match labels");
  table.confidence.assign(n, -1.0);
  table.selected.assign(n, false);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    std::size_t m = 0;
    for (std::size_t j : neighbors[i]) {
      if (table.refined[j] != table.refined[i]) continue;
      s += cosine(row(features, i), row(features, j));
      ++m;
    }
    if (m) table.confidence[i] = s / static_cast<double>(m);
  }
  for (std::size_t c = 0; c < n_classes; ++c) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < n; ++i)
      if (table.refined[i] == c) members.push_back(i);
    std::stable_sort(members.begin(), members.end(),
                     [&](std::size_t a, std::size_t b) { return table.confidence[a] > table.confidence[b]; });
    const std::size_t quota = selection_quota(beta, members.size());
    for (std::size_t r = 0; r < quota; ++r) table.selected[members[r]] = true;
  }
}

PseudoLabelTable label_target(const FeatureBank& bank, const LabelingConfig& config) {
  const Tensor mu1 = soft_centroids(bank);
  const auto y1 = assign_by_cosine(bank.features, mu1);
  auto hard = hard_centroids_and_labels(bank.features, y1, mu1);
  auto upa = upa_posterior(bank.features, hard.labels, bank.classes(), config.k, config.iters);
  PseudoLabelTable table;
  table.label = std::move(hard.labels);
  table.refined = std::move(upa.refined);
  upa_confidence_and_select(bank.features, upa.neighbors, table, bank.classes(), config.beta);
  return table;
}

}  // namespace sfm::labeling
