#pragma once

#include <filesystem>
#include <vector>

#include "sfmamba/tensor.hpp"

namespace sfm::labeling {

/// Snapshot of the target set: pooled features g(x) [n, D] and softmax predictions [n, C].
struct FeatureBank {
  Tensor features;
  Tensor probs;

  [[nodiscard]] std::size_t size() const { return features.dim(0); }
  [[nodiscard]] std::size_t classes() const { return probs.dim(1); }
  /// Throws on empty banks, mismatched row counts, or rows of probs not summing to 1.
  void validate() const;
};

/// dot(a, b) / (|a| |b|); DomainError when either vector has zero norm.
double cosine(std::span<const double> a, std::span<const double> b);

/// mu_c = sum_x p_c(x) g(x) / sum_x p_c(x). Returns [C, D].
Tensor soft_centroids(const FeatureBank& bank);

/// argmax_c cos(g(x), mu_c), lowest class index on ties.
std::vector<std::size_t> assign_by_cosine(const Tensor& features, const Tensor& centroids);

struct HardPass {
  Tensor centroids;                 // [C, D]
  std::vector<std::size_t> labels;  // reassigned against `centroids`
};

/// Class means under `labels`, then cosine reassignment. A class with no members keeps its
/// row from `fallback`.
HardPass hard_centroids_and_labels(const Tensor& features, const std::vector<std::size_t>& labels,
                                   const Tensor& fallback);

/// K nearest neighbours of each row by cosine, self excluded, ties to the lower index.
/// Each list is returned in ascending index order.
std::vector<std::vector<std::size_t>> nearest_neighbors(const Tensor& features, std::size_t k);

struct UpaResult {
  std::vector<std::size_t> refined;
  Tensor posteriors;  // [n, C], from the final round
  std::vector<std::vector<std::size_t>> neighbors;
};

/// Neighbour voting p(t) = (1/K) sum_k cos(t, k) e_{label_k}, repeated `iters` times with
/// each round's argmax fed back as the next round's labels.
UpaResult upa_posterior(const Tensor& features, const std::vector<std::size_t>& labels,
                        std::size_t n_classes, std::size_t k, std::size_t iters);

/// ceil(beta * count), computed so that e.g. 0.6 * 5 gives 3 and not 4.
std::size_t selection_quota(double beta, std::size_t count);

struct PseudoLabelTable {
  std::vector<std::size_t> label;    // second clustering pass
  std::vector<std::size_t> refined;  // after neighbour voting
  std::vector<double> confidence;    // consensus cosine, -1 without consensus
  std::vector<bool> selected;

  [[nodiscard]] std::size_t size() const { return label.size(); }
  [[nodiscard]] std::size_t n_selected() const;
  /// `index,label,refined,confidence,selected` with a header row.
  void write_csv(const std::filesystem::path& path) const;
};

/// Fills confidence and selection given refined labels and neighbour lists.
void upa_confidence_and_select(const Tensor& features, const std::vector<std::vector<std::size_t>>& neighbors,
                               PseudoLabelTable& table, std::size_t n_classes, double beta);

struct LabelingConfig {
  std::size_t k = 4;
  std::size_t iters = 2;
  double beta = 0.6;
};

/// Soft centroids, cosine assignment, hard pass, neighbour voting, confidence and selection.
PseudoLabelTable label_target(const FeatureBank& bank, const LabelingConfig& config = {});

}  // namespace sfm::labeling
