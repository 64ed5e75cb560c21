#include "sfmamba/scs.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "sfmamba/rng.hpp"
#include "sfmamba/tensor_io.hpp"

namespace sfm::scs {

ActivationMap cam_from_gradient(const Tensor& feature_map, const Tensor& gradient, std::size_t h, std::size_t w,
                                std::size_t target_class) {
  if (feature_map.rank() != 2 || feature_map.dim(0) != h * w) throw ShapeError("grad_cam", Shape{h * w, 0}, feature_map.shape());
  if (gradient.shape() != feature_map.shape()) throw ShapeError("grad_cam", feature_map.shape(), gradient.shape());
  const std::size_t hw = h * w, d = feature_map.dim(1);
  std::vector<double> weight(d, 0.0);
  for (std::size_t t = 0; t < hw; ++t)
    for (std::size_t j = 0; j < d; ++j) weight[j] += gradient[t * d + j];
  for (auto& v : weight) v /= static_cast<double>(hw);
  std::vector<double> score(hw);
  for (std::size_t t = 0; t < hw; ++t) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += weight[j] * feature_map[t * d + j];
    score[t] = std::max(s, 0.0);
  }
  return {Tensor({h, w}, std::move(score)), target_class};
}

std::vector<ActivationMap> grad_cam(const Model& model, const Tensor& features,
                                    const std::vector<std::size_t>& targets) {
  const auto& cfg = model.config();
  const std::size_t hw = cfg.tokens(), d = cfg.embed_dim;
  if (features.rank() != 3 || features.dim(1) != hw || features.dim(2) != d) {
    throw ShapeError("grad_cam", Shape{targets.size(), hw, d}, features.shape());
  }
  const std::size_t batch = features.dim(0);
  if (targets.size() != batch) throw ShapeError("grad_cam: " + std::to_string(targets.size()) + " targets for batch " + std::to_string(batch));
  std::vector<double> pick(batch * cfg.n_classes, 0.0);
  for (std::size_t i = 0; i < batch; ++i) {
    if (targets[i] >= cfg.n_classes) throw DomainError("grad_cam: target class " + std::to_string(targets[i]) + " out of range");
    pick[i * cfg.n_classes + targets[i]] = 1.0;
  }
  // Eval-mode BN acts per sample, so one backward over the summed target logits gives
  // every sample its own gradient.
  Tape tape;
  Binding b(tape, model, false);
  Var a = tape.leaf(features);
  auto [pooled, logits] = layers::head(b, a, BnMode::Eval);
  Var target = ad::sum_all(ad::mul(logits, tape.constant(Tensor({batch, cfg.n_classes}, std::move(pick)))));
  const Tensor grad = tape.backward(target)[a];

  std::vector<ActivationMap> maps;
  maps.reserve(batch);
  for (std::size_t i = 0; i < batch; ++i) {
    const auto first = static_cast<long>(i * hw * d), last = static_cast<long>((i + 1) * hw * d);
    Tensor fm({hw, d}, std::vector<double>(features.values().begin() + first, features.values().begin() + last));
    Tensor gm({hw, d}, std::vector<double>(grad.values().begin() + first, grad.values().begin() + last));
    maps.push_back(cam_from_gradient(fm, gm, cfg.grid_h, cfg.grid_w, targets[i]));
  }
  return maps;
}

std::vector<std::size_t> select_background(const ActivationMap& map, double gamma) {
  if (!(gamma >= 0.0 && gamma <= 100.0)) throw DomainError("select_background: gamma must lie in [0, 100]");
  const std::size_t hw = map.scores.size();
  const auto count = static_cast<std::size_t>(std::floor(gamma * static_cast<double>(hw) / 100.0 + 1e-9));
  std::vector<std::size_t> order(hw);
  std::iota(order.begin(), order.end(), 0);
  const auto& s = map.scores.values();
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return s[a] < s[b]; });
  order.resize(count);
  std::sort(order.begin(), order.end());
  return order;
}

std::vector<std::size_t> ShufflePlan::source_index(std::size_t length) const {
  std::vector<std::size_t> src(length);
  std::iota(src.begin(), src.end(), 0);
  if (permutation.size() != background.size()) throw DomainError("shuffle plan: permutation and background sizes differ");
  for (std::size_t k = 0; k < background.size(); ++k) {
    if (background[k] >= length || background[permutation[k]] >= length) {
      throw DomainError("shuffle plan: patch index " + std::to_string(background[k]) + " out of range for length " + std::to_string(length));
    }
    src[background[k]] = background[permutation[k]];
  }
  return src;
}

ShufflePlan make_plan(const ActivationMap& map, double gamma, std::uint64_t seed) {
  ShufflePlan plan;
  plan.seed = seed;
  plan.background = select_background(map, gamma);
  plan.permutation.resize(plan.background.size());
  std::iota(plan.permutation.begin(), plan.permutation.end(), 0);
  Rng rng(seed);
  rng.shuffle(plan.permutation);
  return plan;
}

Tensor shuffle_background(const Tensor& tokens, const ShufflePlan& plan) {
  if (tokens.rank() != 2) throw ShapeError("shuffle_background: tokens must be [T, D], got " + shape_str(tokens.shape()));
  const std::size_t t_len = tokens.dim(0), d = tokens.dim(1);
  const auto src = plan.source_index(t_len);
  std::vector<double> out(tokens.size());
  for (std::size_t t = 0; t < t_len; ++t)
    std::copy_n(tokens.values().begin() + static_cast<long>(src[t] * d), d, out.begin() + static_cast<long>(t * d));
  return Tensor(tokens.shape(), std::move(out));
}

void write_heatmap(const std::filesystem::path& stem, const ActivationMap& map) {
  auto tensor_path = stem;
  tensor_path += ".tnsr";
  save_tensor(tensor_path, map.scores);
  auto pgm_path = stem;
  pgm_path += ".pgm";
  std::ofstream os(pgm_path);
  if (!os) throw IoError("cannot open " + pgm_path.string() + " for writing");
  const std::size_t h = map.scores.dim(0), w = map.scores.dim(1);
  const double peak = *std::max_element(map.scores.values().begin(), map.scores.values().end());
  os << "P2\n" << w << ' ' << h << "\n255\n";
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      const double v = peak > 0.0 ? map.scores[r * w + c] / peak : 0.0;
      os << (c ? " " : "") << static_cast<int>(std::lround(v * 255.0));
    }
    os << '\n';
  }
  if (!os) throw IoError("write failed: " + pgm_path.string());
}

}  // namespace sfm::scs
