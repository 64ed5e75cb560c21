#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "sfmamba/data_synth.hpp"
#include "sfmamba/keyvalue.hpp"
#include "sfmamba/model.hpp"

namespace sfm::pipeline {

struct RunConfig {
  std::string phase = "source";  // source | adapt | eval | gen-data
  ModelConfig model;
  std::filesystem::path source_data, target_data, checkpoint, out_dir = "out";
  std::size_t source_epochs = 50;
  std::size_t adapt_epochs = 15;
  std::size_t batch_size = 8;
  double lr = 3e-4;
  double lr_adapt = 5e-5;
  double weight_decay = 5e-2;
  double smoothing = 0.1;
  double gamma = 20.0;
  double beta = 0.6;
  std::size_t k = 4;
  std::size_t iters = 2;
  std::uint64_t seed = 0;
  bool use_scs = true;
  bool use_upa = true;
  /// Source phase: evaluate train (and target, if given) accuracy every n epochs; the last
  /// epoch is always evaluated.
  std::size_t eval_every = 1;
  /// Smoke mode: every gradient is replaced by zero before the optimizer step.
  bool zero_gradients = false;

  /// ConfigError on violated invariants (lr, lr' > 0 unless smoke-testing with 0, batch >= 2, ...).
  void validate() const;

  /// Unknown keys are a ConfigError.
  static RunConfig from_keyvalues(const KeyValues& kv);
  [[nodiscard]] KeyValues to_keyvalues() const;
};

/// File keys, then SFMAMBA_SEED from the environment, then `overrides` (CLI flags).
RunConfig load_config(const std::optional<std::filesystem::path>& file, const KeyValues& overrides);

double cosine_lr(double base, std::size_t step, std::size_t total_steps);

/// Decoupled weight decay Adam. Each parameter's step size comes from its group.
class AdamW {
 public:
  explicit AdamW(double weight_decay, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

  /// Parameters whose group rate is exactly zero are left untouched (not rewritten).
  void step(std::map<std::string, Tensor>& params, const std::map<std::string, Tensor>& grads,
            const std::map<ParamGroup, double>& group_lr);

  [[nodiscard]] std::size_t steps() const { return t_; }

 private:
  double wd_, b1_, b2_, eps_;
  std::size_t t_ = 0;
  std::map<std::string, std::vector<double>> m_, v_;
};

/// FNV-1a over the bytes of every parameter in `group`, in name order.
std::uint64_t group_checksum(const Model& model, ParamGroup group);

struct EvalResult {
  double accuracy = 0.0;
  std::vector<double> per_class;
  std::vector<std::size_t> predictions;
};

/// Eval-mode forward in chunks. ConfigError when the dataset does not fit the model.
EvalResult evaluate(const Model& model, const data::Dataset& dataset);

void check_compatible(const ModelConfig& model, const data::Dataset& dataset);

/// Trains a fresh Model(config.model, config.seed) on label-smoothed CE. One JSON record per
/// epoch goes to `metrics` when given. `target` only feeds diagnostic accuracies.
Model train_source(const RunConfig& config, const data::Dataset& source, std::ostream* metrics = nullptr,
                   const data::Dataset* target = nullptr);

/// Adapts a copy of `model` to the unlabeled target. Target labels are read only for
/// diagnostics. Throws std::logic_error if the frozen-classifier or learning-rate contracts
/// break at any step.
Model adapt_target(const RunConfig& config, const Model& source_model, const data::Dataset& target,
                   std::ostream* metrics = nullptr);

struct ContractReport {
  std::size_t steps = 0;
  bool ok = false;
  std::string problem;
};

/// Re-checks a metrics stream: every adaptation step has lr_classifier 0, lr_backbone equal
/// to 0.1 * lr_neck, lr_neck on the cosine schedule, and one unchanging head checksum.
ContractReport verify_adaptation_metrics(std::istream& jsonl, const RunConfig& config);

// File-level phases used by the CLI. Each writes <out_dir>/metrics.jsonl (truncating it).
std::filesystem::path run_source(const RunConfig& config);
std::filesystem::path run_adapt(const RunConfig& config);
EvalResult run_eval(const RunConfig& config, const std::filesystem::path& data_dir);

struct AblationRow {
  std::string name;
  bool chvss = true, scs = true, upa = true;
  double source_only = 0.0;
  double adapted = 0.0;
};

/// Component grid {+-Ch-VSS} x {+-SCS} x {+-UPA filter}; one source model per Ch-VSS setting.
std::vector<AblationRow> run_ablation(const RunConfig& config);

}  // namespace sfm::pipeline
