#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>

#include "sfmamba/autodiff.hpp"
#include "sfmamba/ssm.hpp"
#include "sfmamba/tensor.hpp"

namespace sfm {

struct ModelConfig {
  std::uint32_t grid_h = 8;
  std::uint32_t grid_w = 8;
  std::uint32_t patch_dim = 16;
  std::uint32_t embed_dim = 32;
  std::uint32_t n_encoder_blocks = 2;
  std::uint32_t state_dim = 8;
  std::uint32_t n_chvss = 2;
  std::uint32_t n_classes = 4;
  /// Channel-grid width for the Ch-Group neck; 0 selects the plain Ch-VSS neck.
  std::uint32_t chgroup_width = 0;

  [[nodiscard]] std::size_t tokens() const { return std::size_t{grid_h} * grid_w; }
  /// Throws ConfigError when a field is zero (where forbidden), embed_dim is odd, or
  /// chgroup_width does not divide embed_dim.
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

enum class ParamGroup { Backbone, Neck, Classifier };

/// Patch embedding and encoder blocks form the backbone; Ch-VSS/Ch-Group and BN form the
/// neck; the final linear layer is the classifier.
ParamGroup param_group(const std::string& name);

enum class BnMode { Train, Eval };
enum class Phase : std::uint8_t { Source = 0, Adapted = 1 };

/// Parameters are trainable; buffers (BN running statistics) are not.
class Model {
 public:
  Model(ModelConfig config, std::uint64_t seed);

  [[nodiscard]] const ModelConfig& config() const { return config_; }
  [[nodiscard]] std::map<std::string, Tensor>& params() { return params_; }
  [[nodiscard]] const std::map<std::string, Tensor>& params() const { return params_; }
  [[nodiscard]] std::map<std::string, Tensor>& buffers() { return buffers_; }
  [[nodiscard]] const std::map<std::string, Tensor>& buffers() const { return buffers_; }
  [[nodiscard]] std::uint64_t seed() const { return seed_; }

  /// Blends a training batch's statistics into the BN running estimates (momentum 0.1,
  /// unbiased variance).
  void update_bn_stats(const Tensor& batch_mean, const Tensor& batch_var, std::size_t batch_size);

  static constexpr double kBnMomentum = 0.1;

 private:
  ModelConfig config_;
  std::uint64_t seed_;
  std::map<std::string, Tensor> params_;
  std::map<std::string, Tensor> buffers_;
};

/// Tape leaves for every parameter of a model (or constants, for frozen evaluation).
class Binding {
 public:
  Binding(Tape& tape, const Model& model, bool trainable = true);

  [[nodiscard]] Var operator[](const std::string& name) const;
  [[nodiscard]] const Model& model() const { return *model_; }
  [[nodiscard]] Tape& tape() const { return *tape_; }
  [[nodiscard]] const std::map<std::string, Var>& vars() const { return vars_; }
  [[nodiscard]] ssm::SsmVars ssm(const std::string& prefix) const;

 private:
  Tape* tape_;
  const Model* model_;
  std::map<std::string, Var> vars_;
};

struct ForwardOut {
  Var tokens;    // patch embedding I, [B, HW, D]
  Var features;  // post-neck feature map, [B, HW, D]
  Var pooled;    // global average pool g(x), [B, D]
  Var logits;    // [B, C]
  /// Batch statistics of the pooled features in train mode (mean, biased variance).
  std::optional<std::pair<Tensor, Tensor>> batch_stats;
};

namespace layers {

/// x: [B, HW, P] -> [B, HW, D].
Var patch_embed(const Binding& b, Var x);
/// LayerNorm, signal/gate split, four-route selective scan, gating, projection, residual.
Var vss_block(const Binding& b, std::size_t index, Var x);
/// Bidirectional scan over the D channel tokens (each HW-dimensional), residual add.
Var chvss_block(const Binding& b, std::size_t index, Var x);
/// Channel tokens laid out on a (D/d) x d grid and cross-scanned along four routes.
Var chgroup_block(const Binding& b, std::size_t index, Var x);
/// Pool, BatchNorm, ReLU, classifier. Returns {pooled, logits}.
std::pair<Var, Var> head(const Binding& b, Var features, BnMode mode,
                         std::optional<std::pair<Tensor, Tensor>>* stats = nullptr);

}  // namespace layers

/// Encoder and neck applied to patch embeddings.
Var encode(const Binding& b, Var tokens);
ForwardOut forward_tokens(const Binding& b, Var tokens, BnMode mode);
/// x: [B, HW, P] or [B, H, W, P].
ForwardOut forward(const Binding& b, Var x, BnMode mode);

struct Prediction {
  Tensor logits;    // [B, C]
  Tensor features;  // [B, HW, D]
  Tensor pooled;    // [B, D]
};

/// Eval-mode forward with no gradient tracking.
Prediction predict(const Model& model, const Tensor& x);

struct Checkpoint {
  Model model;
  Phase phase = Phase::Source;
};

// SFMB1 layout: "SFMB", u8 version=1, nine u32 LE config fields in declaration order,
// u64 seed, u8 phase, u32 record count, then records of (u16 name length, UTF-8 name,
// TNSR1 tensor). Parameters precede buffers; each set is sorted by name.
void save_checkpoint(const std::filesystem::path& path, const Model& model, Phase phase);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace sfm
