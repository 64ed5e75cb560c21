#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "sfmamba/model.hpp"
#include "sfmamba/tensor.hpp"

namespace sfm::scs {

struct ActivationMap {
  Tensor scores;  // [H, W], nonnegative
  std::size_t target_class = 0;
};

/// Channel weights from the spatial mean of the gradient, then ReLU(sum_d w_d A_d).
/// feature_map and gradient are [HW, D] token-major; the result is reshaped to [h, w].
ActivationMap cam_from_gradient(const Tensor& feature_map, const Tensor& gradient, std::size_t h, std::size_t w,
                                std::size_t target_class);

/// Grad-CAM on the post-neck map. `features` is [B, HW, D]; the head runs in eval mode on a
/// tape of its own, so nothing here touches a training step's gradients.
std::vector<ActivationMap> grad_cam(const Model& model, const Tensor& features,
                                    const std::vector<std::size_t>& targets);

/// floor(gamma / 100 * HW) lowest-scoring patch indices, ties to the lower index, sorted.
std::vector<std::size_t> select_background(const ActivationMap& map, double gamma);

struct ShufflePlan {
  std::vector<std::size_t> background;   // sorted patch indices P_k
  std::vector<std::size_t> permutation;  // position k receives the token at background[permutation[k]]
  std::uint64_t seed = 0;

  /// For every output position, the input position it reads from.
  [[nodiscard]] std::vector<std::size_t> source_index(std::size_t length) const;
};

/// Background selection plus a Fisher-Yates permutation drawn from Rng(seed).
ShufflePlan make_plan(const ActivationMap& map, double gamma, std::uint64_t seed);

/// tokens: [T, D]. Returns a new sequence with background tokens permuted.
Tensor shuffle_background(const Tensor& tokens, const ShufflePlan& plan);

/// Writes <stem>.tnsr (raw scores) and <stem>.pgm (P2, scaled to 0..255).
void write_heatmap(const std::filesystem::path& stem, const ActivationMap& map);

}  // namespace sfm::scs
