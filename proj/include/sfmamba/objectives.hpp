#pragma once

#include <optional>
#include <string>
#include <vector>

#include "sfmamba/autodiff.hpp"

namespace sfm::objectives {

/// Cross-entropy against (1 - alpha) one-hot + alpha / C, averaged over the batch.
Var label_smoothed_ce(Var logits, const std::vector<std::size_t>& labels, double alpha = 0.1);

/// Mean per-sample prediction entropy. In [0, log C].
Var entropy_loss(Var logits);

/// sum_c pbar_c log pbar_c for the batch-mean prediction pbar. In [-log C, 0].
Var diversity_loss(Var logits);

/// Mean -log p_label over selected rows; a constant 0 when nothing is selected.
Var pseudo_ce(Var logits, const std::vector<std::size_t>& labels, const std::vector<bool>& selected);

/// Mean KL(softmax(orig) || softmax(pert)) over selected rows; gradients reach both branches.
Var kl_consistency(Var logits_orig, Var logits_pert, const std::vector<bool>& selected);

/// ent + div + ce + kl, unweighted.
Var total_target_loss(Var ent, Var div, Var ce, Var kl);

struct LossBreakdown {
  std::optional<double> lce;  // source phase only
  double ent = 0.0, div = 0.0, ce = 0.0, kl = 0.0, total = 0.0;
  std::size_t batch_size = 0;
  std::size_t n_selected = 0;

  /// One JSON object, no trailing newline. Absent terms are written as null.
  [[nodiscard]] std::string json_line(std::size_t step) const;
};

}  // namespace sfm::objectives
