#pragma once

#include <cstdint>
#include <filesystem>
#include <utility>
#include <vector>

#include "sfmamba/keyvalue.hpp"
#include "sfmamba/tensor.hpp"

namespace sfm::data {

/// x -> scale * x + offset per feature dimension.
struct AffineShift {
  std::vector<double> scale;
  std::vector<double> offset;

  static AffineShift identity(std::size_t dim);
  friend bool operator==(const AffineShift&, const AffineShift&) = default;
};

struct DomainSpec {
  std::size_t n_classes = 4;
  std::size_t grid_h = 8;
  std::size_t grid_w = 8;
  std::size_t patch_dim = 16;
  Tensor class_prototypes;       // [C, P]
  Tensor background_prototypes;  // [C, P]
  /// Probability that a sample's background prototype is its own class's.
  double spurious_strength = 0.9;
  double noise_std = 0.3;
  AffineShift shift;
  std::size_t blob_min = 20;
  std::size_t blob_max = 32;
  std::uint64_t seed = 0;

  [[nodiscard]] std::size_t tokens() const { return grid_h * grid_w; }
  /// ConfigError on inconsistent fields; DomainError when no blob of the requested size fits.
  void validate() const;

  [[nodiscard]] KeyValues to_manifest() const;
  static DomainSpec from_manifest(const KeyValues& kv);

  friend bool operator==(const DomainSpec&, const DomainSpec&) = default;
};

struct Dataset {
  Tensor patches;                    // [n, H, W, P]
  std::vector<std::size_t> labels;   // [n]
  Tensor masks;                      // [n, H, W], 1 on the foreground blob
  /// Class whose background prototype each sample received. Diagnostic; not persisted.
  std::vector<std::size_t> background_class;

  [[nodiscard]] std::size_t size() const { return labels.size(); }
  /// Rows `indices` of patches as [b, H, W, P].
  [[nodiscard]] Tensor batch(const std::vector<std::size_t>& indices) const;
  /// FNV-1a over the little-endian bytes of patches, labels and masks.
  [[nodiscard]] std::uint64_t checksum() const;
};

/// 2C unit-variance Gaussian prototypes (C class, C background) whose pairwise cosine
/// distance is at least `min_distance`, redrawn until it is.
std::pair<Tensor, Tensor> make_prototypes(std::size_t n_classes, std::size_t patch_dim, std::uint64_t seed,
                                          double min_distance = 0.2);

/// Pure function of (spec, n). Class counts are balanced to within one.
Dataset generate_domain(const DomainSpec& spec, std::size_t n);

struct BenchmarkOptions {
  std::size_t n_classes = 4;
  std::size_t grid_h = 8;
  std::size_t grid_w = 8;
  std::size_t patch_dim = 16;
  std::size_t n_source = 256;
  std::size_t n_target = 256;
  double source_spurious = 0.9;
  /// Negative selects 1/C, i.e. no background-class association.
  double target_spurious = -1.0;
  double source_noise = 0.3;
  double target_noise = 1.1;
  double shift_scale_lo = 0.7, shift_scale_hi = 1.3;
  double shift_offset = 0.5;
  std::size_t blob_min = 20;
  std::size_t blob_max = 32;
  /// Background prototypes are drawn like class prototypes, then scaled by this.
  double background_scale = 1.0;
};

struct BenchmarkPair {
  DomainSpec source_spec, target_spec;
  Dataset source, target;
};

/// Source and target share prototypes; the target breaks the background association and
/// adds an affine shift plus extra noise.
std::pair<DomainSpec, DomainSpec> benchmark_specs(std::uint64_t seed, const BenchmarkOptions& options = {});
BenchmarkPair make_benchmark_pair(std::uint64_t seed, const BenchmarkOptions& options = {});

/// Directory with patches.tnsr, labels.tnsr, masks.tnsr and manifest.txt.
void save_dataset(const std::filesystem::path& dir, const Dataset& dataset, const DomainSpec& spec);
/// IoError for missing files, ShapeError when tensors disagree with one another, ConfigError
/// when they disagree with the manifest.
std::pair<Dataset, DomainSpec> load_dataset(const std::filesystem::path& dir);

/// Mean of each sample's background patches (ground-truth mask), [n, P].
Tensor background_means(const Dataset& dataset);

/// Softmax regression on `train_x` by full-batch gradient descent; returns accuracy on
/// (test_x, test_y).
double linear_probe_accuracy(const Tensor& train_x, const std::vector<std::size_t>& train_y, const Tensor& test_x,
                             const std::vector<std::size_t>& test_y, std::size_t n_classes);

}  // namespace sfm::data
