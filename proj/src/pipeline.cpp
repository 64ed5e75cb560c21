#include "sfmamba/pipeline.hpp"

#include <cmath>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

#include "sfmamba/labeling.hpp"
#include "sfmamba/objectives.hpp"
#include "sfmamba/rng.hpp"
#include "sfmamba/scs.hpp"
#include "sfmamba/tensor_io.hpp"

namespace sfm::pipeline {

using json = nlohmann::ordered_json;

namespace {

// Stream tags for Rng::derive, so each consumer of the run seed draws independently.
constexpr std::uint64_t kSourceOrder = 0x50C0000000000000ULL;
constexpr std::uint64_t kAdaptOrder = 0xADA0000000000000ULL;
constexpr std::uint64_t kPlanStream = 0x5C50000000000000ULL;
constexpr std::size_t kEvalChunk = 64;

bool parse_bool(const KeyValues& kv, const std::string& key, bool fallback) {
  if (!kv.has(key)) return fallback;
  const auto& v = kv.raw(key);
  if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
  if (v == "0" || v == "false" || v == "no" || v == "off") return false;
  throw ConfigError(key + ": expected a boolean, got '" + v + "'");
}

std::uint32_t get_u32(const KeyValues& kv, const std::string& key, std::uint32_t fallback) {
  const auto v = kv.get_u64(key, fallback);
  if (v > UINT32_MAX) throw ConfigError(key + ": value too large");
  return static_cast<std::uint32_t>(v);
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::vector<std::size_t> iota_indices(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

/// Consecutive batches of an epoch's order. A trailing batch of one is dropped: batch
/// statistics need two samples.
std::vector<std::vector<std::size_t>> batches_of(const std::vector<std::size_t>& order, std::size_t batch) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < order.size(); i += batch) {
    const std::size_t end = std::min(order.size(), i + batch);
    if (end - i < 2) break;
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i), order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

std::vector<std::size_t> pick(const std::vector<std::size_t>& v, const std::vector<std::size_t>& idx) {
  std::vector<std::size_t> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) out[i] = v[idx[i]];
  return out;
}

std::map<std::string, Tensor> gradients_by_name(const Binding& b, const Gradients& g, bool zero) {
  std::map<std::string, Tensor> out;
  for (const auto& [name, var] : b.vars()) out.emplace(name, zero ? Tensor::zeros(var.shape()) : g[var]);
  return out;
}

std::size_t argmax_row(const Tensor& logits, std::size_t row) {
  const std::size_t c = logits.dim(1);
  std::size_t best = 0;
  for (std::size_t j = 1; j < c; ++j)
    if (logits[row * c + j] > logits[row * c + best]) best = j;
  return best;
}

Tensor softmax_rows(const Tensor& logits) {
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  std::vector<double> p(n * c);
  for (std::size_t i = 0; i < n; ++i) {
    double mx = logits[i * c];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, logits[i * c + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += p[i * c + j] = std::exp(logits[i * c + j] - mx);
    for (std::size_t j = 0; j < c; ++j) p[i * c + j] /= z;
  }
  return Tensor({n, c}, std::move(p));
}

/// Eval-mode logits and pooled features for a whole dataset.
std::pair<Tensor, Tensor> predict_all(const Model& model, const data::Dataset& ds) {
  const std::size_t n = ds.size();
  const std::size_t c = model.config().n_classes, d = model.config().embed_dim;
  std::vector<double> logits(n * c), pooled(n * d);
  for (std::size_t start = 0; start < n; start += kEvalChunk) {
    const std::size_t end = std::min(n, start + kEvalChunk);
    std::vector<std::size_t> idx(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const auto pred = predict(model, ds.batch(idx));
    std::copy(pred.logits.values().begin(), pred.logits.values().end(), logits.begin() + static_cast<std::ptrdiff_t>(start * c));
    std::copy(pred.pooled.values().begin(), pred.pooled.values().end(), pooled.begin() + static_cast<std::ptrdiff_t>(start * d));
  }
  return {Tensor({n, c}, std::move(logits)), Tensor({n, d}, std::move(pooled))};
}

EvalResult score(const Tensor& logits, const std::vector<std::size_t>& labels, std::size_t n_classes) {
  EvalResult r;
  std::vector<double> hit(n_classes, 0.0), count(n_classes, 0.0);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const std::size_t p = argmax_row(logits, i);
    r.predictions.push_back(p);
    count[labels[i]] += 1.0;
    if (p == labels[i]) {
      ++correct;
      hit[labels[i]] += 1.0;
    }
  }
  r.accuracy = labels.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(labels.size());
  for (std::size_t c = 0; c < n_classes; ++c) r.per_class.push_back(count[c] > 0.0 ? hit[c] / count[c] : 0.0);
  return r;
}

double agreement(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b, const std::vector<bool>* mask = nullptr) {
  std::size_t n = 0, same = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (mask && !(*mask)[i]) continue;
    ++n;
    same += a[i] == b[i];
  }
  return n == 0 ? 0.0 : static_cast<double>(same) / static_cast<double>(n);
}

void emit(std::ostream* out, const json& record) {
  if (out) *out << record.dump() << '\n';
}

std::ofstream open_metrics(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError(dir.string() + ": cannot create directory: " + ec.message());
  std::ofstream os(dir / "metrics.jsonl", std::ios::trunc);
  if (!os) throw IoError((dir / "metrics.jsonl").string() + ": cannot open for writing");
  return os;
}

data::Dataset load_data(const std::filesystem::path& dir, const char* what) {
  if (dir.empty()) throw ConfigError(std::string("no ") + what + " dataset given");
  return data::load_dataset(dir).first;
}

}  // namespace

void RunConfig::validate() const {
  model.validate();
  if (!(lr >= 0.0) || !(lr_adapt >= 0.0)) throw ConfigError("learning rates must be non-negative");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
  if (batch_size < 2) throw ConfigError("batch_size must be at least 2");
  if (!(smoothing >= 0.0 && smoothing < 1.0)) throw ConfigError("smoothing must lie in [0, 1)");
  if (!(gamma >= 0.0 && gamma <= 100.0)) throw ConfigError("gamma must lie in [0, 100]");
  if (!(beta > 0.0 && beta <= 1.0)) throw ConfigError("beta must lie in (0, 1]");
  if (k == 0 || iters == 0) throw ConfigError("k and iters must be positive");
  if (eval_every == 0) throw ConfigError("eval_every must be positive");
  if (phase != "source" && phase != "adapt" && phase != "eval" && phase != "gen-data")
    throw ConfigError("unknown phase '" + phase + "'");
}

RunConfig RunConfig::from_keyvalues(const KeyValues& kv) {
  static const char* known[] = {"phase",  "grid_h",        "grid_w",       "patch_dim",    "embed_dim",      "encoder_blocks",
                                "state_dim", "chvss_blocks", "n_classes",   "chgroup_width", "source_data",  "target_data",
                                "checkpoint", "out_dir",     "source_epochs", "adapt_epochs", "batch_size",  "lr",
                                "lr_adapt", "weight_decay",  "smoothing",    "gamma",        "beta",           "k",
                                "iters",    "seed",          "scs",          "upa",          "eval_every",     "zero_gradients"};
  for (const auto& [key, value] : kv.entries()) {
    bool ok = false;
    for (const char* k : known) ok = ok || key == k;
    if (!ok) throw ConfigError("unknown config key '" + key + "'");
  }
  RunConfig c;
  c.phase = kv.get_string("phase", c.phase);
  auto& m = c.model;
  m.grid_h = get_u32(kv, "grid_h", m.grid_h);
  m.grid_w = get_u32(kv, "grid_w", m.grid_w);
  m.patch_dim = get_u32(kv, "patch_dim", m.patch_dim);
  m.embed_dim = get_u32(kv, "embed_dim", m.embed_dim);
  m.n_encoder_blocks = get_u32(kv, "encoder_blocks", m.n_encoder_blocks);
  m.state_dim = get_u32(kv, "state_dim", m.state_dim);
  m.n_chvss = get_u32(kv, "chvss_blocks", m.n_chvss);
  m.n_classes = get_u32(kv, "n_classes", m.n_classes);
  m.chgroup_width = get_u32(kv, "chgroup_width", m.chgroup_width);
  c.source_data = kv.get_string("source_data", "");
  c.target_data = kv.get_string("target_data", "");
  c.checkpoint = kv.get_string("checkpoint", "");
  c.out_dir = kv.get_string("out_dir", c.out_dir.string());
  c.source_epochs = kv.get_u64("source_epochs", c.source_epochs);
  c.adapt_epochs = kv.get_u64("adapt_epochs", c.adapt_epochs);
  c.batch_size = kv.get_u64("batch_size", c.batch_size);
  c.lr = kv.get_double("lr", c.lr);
  c.lr_adapt = kv.get_double("lr_adapt", c.lr_adapt);
  c.weight_decay = kv.get_double("weight_decay", c.weight_decay);
  c.smoothing = kv.get_double("smoothing", c.smoothing);
  c.gamma = kv.get_double("gamma", c.gamma);
  c.beta = kv.get_double("beta", c.beta);
  c.k = kv.get_u64("k", c.k);
  c.iters = kv.get_u64("iters", c.iters);
  c.seed = kv.get_u64("seed", c.seed);
  c.use_scs = parse_bool(kv, "scs", c.use_scs);
  c.use_upa = parse_bool(kv, "upa", c.use_upa);
  c.eval_every = kv.get_u64("eval_every", c.eval_every);
  c.zero_gradients = parse_bool(kv, "zero_gradients", c.zero_gradients);
  c.validate();
  return c;
}

KeyValues RunConfig::to_keyvalues() const {
  KeyValues kv;
  kv.set("phase", phase);
  kv.set("grid_h", std::to_string(model.grid_h));
  kv.set("grid_w", std::to_string(model.grid_w));
  kv.set("patch_dim", std::to_string(model.patch_dim));
  kv.set("embed_dim", std::to_string(model.embed_dim));
  kv.set("encoder_blocks", std::to_string(model.n_encoder_blocks));
  kv.set("state_dim", std::to_string(model.state_dim));
  kv.set("chvss_blocks", std::to_string(model.n_chvss));
  kv.set("n_classes", std::to_string(model.n_classes));
  kv.set("chgroup_width", std::to_string(model.chgroup_width));
  kv.set("source_data", source_data.string());
  kv.set("target_data", target_data.string());
  kv.set("checkpoint", checkpoint.string());
  kv.set("out_dir", out_dir.string());
  kv.set("source_epochs", std::to_string(source_epochs));
  kv.set("adapt_epochs", std::to_string(adapt_epochs));
  kv.set("batch_size", std::to_string(batch_size));
  kv.set("lr", format_double(lr));
  kv.set("lr_adapt", format_double(lr_adapt));
  kv.set("weight_decay", format_double(weight_decay));
  kv.set("smoothing", format_double(smoothing));
  kv.set("gamma", format_double(gamma));
  kv.set("beta", format_double(beta));
  kv.set("k", std::to_string(k));
  kv.set("iters", std::to_string(iters));
  kv.set("seed", std::to_string(seed));
  kv.set("scs", use_scs ? "1" : "0");
  kv.set("upa", use_upa ? "1" : "0");
  kv.set("eval_every", std::to_string(eval_every));
  kv.set("zero_gradients", zero_gradients ? "1" : "0");
  return kv;
}

RunConfig load_config(const std::optional<std::filesystem::path>& file, const KeyValues& overrides) {
  KeyValues kv = file ? KeyValues::load(*file) : KeyValues{};
  if (const char* env = std::getenv("SFMAMBA_SEED"); env && *env) kv.set("seed", env);
  for (const auto& [k, v] : overrides.entries()) kv.set(k, v);
  return RunConfig::from_keyvalues(kv);
}

double cosine_lr(double base, std::size_t step, std::size_t total_steps) {
  if (total_steps == 0) return base;
  const double t = static_cast<double>(step) / static_cast<double>(total_steps);
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

AdamW::AdamW(double weight_decay, double beta1, double beta2, double eps)
    : wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {}

void AdamW::step(std::map<std::string, Tensor>& params, const std::map<std::string, Tensor>& grads,
                 const std::map<ParamGroup, double>& group_lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (auto& [name, p] : params) {
    const double lr = group_lr.at(param_group(name));
    const Tensor& g = grads.at(name);
    if (g.shape() != p.shape()) throw ShapeError("adamw " + name, g.shape(), p.shape());
    auto& m = m_[name];
    auto& v = v_[name];
    m.resize(p.size(), 0.0);
    v.resize(p.size(), 0.0);
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = b1_ * m[i] + (1.0 - b1_) * g[i];
      v[i] = b2_ * v[i] + (1.0 - b2_) * g[i] * g[i];
    }
    if (lr == 0.0) continue;
    std::vector<double> out(p.values());
    for (std::size_t i = 0; i < out.size(); ++i) {
      out[i] *= 1.0 - lr * wd_;
      out[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
    }
    p = Tensor(p.shape(), std::move(out));
  }
}

std::uint64_t group_checksum(const Model& model, ParamGroup group) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& [name, t] : model.params()) {
    if (param_group(name) != group) continue;
    for (char ch : name) h = (h ^ static_cast<unsigned char>(ch)) * 0x100000001b3ULL;
    for (double v : t.values()) {
      unsigned char bytes[8];
      std::memcpy(bytes, &v, 8);
      for (unsigned char byte : bytes) h = (h ^ byte) * 0x100000001b3ULL;
    }
  }
  return h;
}

void check_compatible(const ModelConfig& m, const data::Dataset& ds) {
  const auto& s = ds.patches.shape();
  if (s.size() != 4 || s[1] != m.grid_h || s[2] != m.grid_w || s[3] != m.patch_dim)
    throw ConfigError("dataset patches " + shape_str(s) + " do not fit a " + std::to_string(m.grid_h) + "x" +
                      std::to_string(m.grid_w) + " grid of " + std::to_string(m.patch_dim) + "-dim patches");
  for (auto y : ds.labels)
    if (y >= m.n_classes)
      throw ConfigError("dataset label " + std::to_string(y) + " exceeds the model's " + std::to_string(m.n_classes) +
                        " classes");
}

EvalResult evaluate(const Model& model, const data::Dataset& dataset) {
  check_compatible(model.config(), dataset);
  return score(predict_all(model, dataset).first, dataset.labels, model.config().n_classes);
}

Model train_source(const RunConfig& config, const data::Dataset& source, std::ostream* metrics,
                   const data::Dataset* target) {
  config.validate();
  check_compatible(config.model, source);
  if (target) check_compatible(config.model, *target);
  Model model(config.model, config.seed);
  AdamW opt(config.weight_decay);
  const std::size_t per_epoch = batches_of(iota_indices(source.size()), config.batch_size).size();
  const std::size_t total = per_epoch * config.source_epochs;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.source_epochs; ++epoch) {
    auto order = iota_indices(source.size());
    Rng::derive(config.seed, kSourceOrder + epoch).shuffle(order);
    double loss_sum = 0.0;
    std::size_t seen = 0, correct = 0;
    for (const auto& idx : batches_of(order, config.batch_size)) {
      const double lr = cosine_lr(config.lr, step, total);
      Tape tape;
      Binding b(tape, model, true);
      auto out = forward(b, tape.constant(source.batch(idx)), BnMode::Train);
      const auto labels = pick(source.labels, idx);
      Var loss = objectives::label_smoothed_ce(out.logits, labels, config.smoothing);
      const auto grads = tape.backward(loss);
      opt.step(model.params(), gradients_by_name(b, grads, config.zero_gradients),
               {{ParamGroup::Backbone, lr}, {ParamGroup::Neck, lr}, {ParamGroup::Classifier, lr}});
      model.update_bn_stats(out.batch_stats->first, out.batch_stats->second, idx.size());
      loss_sum += loss.value().item() * static_cast<double>(idx.size());
      for (std::size_t i = 0; i < idx.size(); ++i) correct += argmax_row(out.logits.value(), i) == labels[i];
      seen += idx.size();
      ++step;
    }
    json rec;
    rec["kind"] = "epoch";
    rec["phase"] = "source";
    rec["epoch"] = epoch;
    rec["steps"] = step;
    rec["lr"] = cosine_lr(config.lr, step, total);
    rec["lce"] = seen ? loss_sum / static_cast<double>(seen) : 0.0;
    rec["batch_acc"] = seen ? static_cast<double>(correct) / static_cast<double>(seen) : 0.0;
    const bool eval_now = (epoch + 1) % config.eval_every == 0 || epoch + 1 == config.source_epochs;
    rec["train_acc"] = eval_now ? json(evaluate(model, source).accuracy) : json(nullptr);
    if (target) rec["target_acc"] = eval_now ? json(evaluate(model, *target).accuracy) : json(nullptr);
    emit(metrics, rec);
  }
  return model;
}

Model adapt_target(const RunConfig& config, const Model& source_model, const data::Dataset& target,
                   std::ostream* metrics) {
  config.validate();
  if (!(config.model == source_model.config()))
    throw ConfigError("adapt: run config model does not match the checkpoint's model");
  check_compatible(source_model.config(), target);
  Model model = source_model;
  const auto& mc = model.config();
  const std::size_t hw = mc.tokens();
  const std::uint64_t head_sum = group_checksum(model, ParamGroup::Classifier);
  AdamW opt(config.weight_decay);
  const std::size_t per_epoch = batches_of(iota_indices(target.size()), config.batch_size).size();
  const std::size_t total = per_epoch * config.adapt_epochs;
  std::size_t step = 0;

  for (std::size_t epoch = 0; epoch < config.adapt_epochs; ++epoch) {
    // Labeling pass: eval-mode snapshot, once per epoch, before any step of the epoch.
    const auto [logits_all, pooled_all] = predict_all(model, target);
    labeling::FeatureBank bank{pooled_all, softmax_rows(logits_all)};
    auto table = labeling::label_target(bank, {config.k, config.iters, config.beta});
    const auto snapshot = score(logits_all, target.labels, mc.n_classes);
    std::vector<std::size_t> train_label = config.use_upa ? table.refined : table.label;
    std::vector<bool> trusted = config.use_upa ? table.selected : std::vector<bool>(target.size(), true);
    {
      json rec;
      rec["kind"] = "labeling";
      rec["phase"] = "adapt";
      rec["epoch"] = epoch;
      rec["steps_before"] = step;
      rec["target_acc"] = snapshot.accuracy;
      rec["cluster_acc"] = agreement(table.label, target.labels);
      rec["refined_acc"] = agreement(table.refined, target.labels);
      rec["selected_acc"] = agreement(train_label, target.labels, &trusted);
      rec["n_selected"] = static_cast<std::size_t>(std::count(trusted.begin(), trusted.end(), true));
      emit(metrics, rec);
    }

    auto order = iota_indices(target.size());
    Rng::derive(config.seed, kAdaptOrder + epoch).shuffle(order);
    objectives::LossBreakdown mean_loss;
    std::size_t n_batches = 0;
    for (const auto& idx : batches_of(order, config.batch_size)) {
      const double lr_neck = cosine_lr(config.lr_adapt, step, total);
      const double lr_backbone = 0.1 * lr_neck;
      const double lr_classifier = 0.0;
      if (!(lr_backbone == 0.1 * lr_neck) || lr_classifier != 0.0) throw std::logic_error("adapt: learning-rate groups broken");

      Tape tape;
      Binding b(tape, model, true);
      auto out = forward(b, tape.constant(target.batch(idx)), BnMode::Train);
      const auto labels = pick(train_label, idx);
      std::vector<bool> sel(idx.size());
      for (std::size_t i = 0; i < idx.size(); ++i) sel[i] = trusted[idx[i]];

      Var ent = objectives::entropy_loss(out.logits);
      Var div = objectives::diversity_loss(out.logits);
      Var ce = objectives::pseudo_ce(out.logits, labels, sel);
      Var kl = tape.constant(Tensor::scalar(0.0));
      if (config.use_scs) {
        const auto maps = scs::grad_cam(model, out.features.value(), labels);
        std::vector<std::size_t> gather_idx;
        gather_idx.reserve(idx.size() * hw);
        for (std::size_t i = 0; i < idx.size(); ++i) {
          const std::uint64_t plan_seed = Rng::derive(config.seed, kPlanStream + step * 4096 + i).next_u64();
          const auto src = scs::make_plan(maps[i], config.gamma, plan_seed).source_index(hw);
          gather_idx.insert(gather_idx.end(), src.begin(), src.end());
        }
        Var shuffled = ad::gather_batched(out.tokens, std::move(gather_idx), hw);
        auto pert = forward_tokens(b, shuffled, BnMode::Train);
        kl = objectives::kl_consistency(out.logits, pert.logits, sel);
      }
      Var loss = objectives::total_target_loss(ent, div, ce, kl);
      const auto grads = tape.backward(loss);
      opt.step(model.params(), gradients_by_name(b, grads, config.zero_gradients),
               {{ParamGroup::Backbone, lr_backbone}, {ParamGroup::Neck, lr_neck}, {ParamGroup::Classifier, lr_classifier}});
      model.update_bn_stats(out.batch_stats->first, out.batch_stats->second, idx.size());

      const std::uint64_t now = group_checksum(model, ParamGroup::Classifier);
      if (now != head_sum) throw std::logic_error("adapt: classifier parameters changed at step " + std::to_string(step));

      objectives::LossBreakdown lb;
      lb.ent = ent.value().item();
      lb.div = div.value().item();
      lb.ce = ce.value().item();
      lb.kl = kl.value().item();
      lb.total = loss.value().item();
      lb.batch_size = idx.size();
      lb.n_selected = static_cast<std::size_t>(std::count(sel.begin(), sel.end(), true));
      json rec = json::parse(lb.json_line(step));
      rec["kind"] = "step";
      rec["phase"] = "adapt";
      rec["epoch"] = epoch;
      rec["lr_backbone"] = lr_backbone;
      rec["lr_neck"] = lr_neck;
      rec["lr_classifier"] = lr_classifier;
      rec["head_checksum"] = hex64(now);
      emit(metrics, rec);

      mean_loss.ent += lb.ent;
      mean_loss.div += lb.div;
      mean_loss.ce += lb.ce;
      mean_loss.kl += lb.kl;
      mean_loss.total += lb.total;
      ++n_batches;
      ++step;
    }
    json rec;
    rec["kind"] = "epoch";
    rec["phase"] = "adapt";
    rec["epoch"] = epoch;
    const double nb = n_batches ? static_cast<double>(n_batches) : 1.0;
    rec["ent"] = mean_loss.ent / nb;
    rec["div"] = mean_loss.div / nb;
    rec["ce"] = mean_loss.ce / nb;
    rec["kl"] = mean_loss.kl / nb;
    rec["total"] = mean_loss.total / nb;
    emit(metrics, rec);
  }
  json fin;
  fin["kind"] = "final";
  fin["phase"] = "adapt";
  fin["steps"] = step;
  fin["target_acc"] = evaluate(model, target).accuracy;
  fin["head_checksum"] = hex64(group_checksum(model, ParamGroup::Classifier));
  emit(metrics, fin);
  return model;
}

ContractReport verify_adaptation_metrics(std::istream& in, const RunConfig& config) {
  ContractReport r;
  std::string line, head;
  std::vector<json> steps;
  std::size_t total = 0;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::exception& e) {
      r.problem = "line " + std::to_string(lineno) + ": " + e.what();
      return r;
    }
    if (rec.value("phase", "") != "adapt") continue;
    if (rec["kind"] == "step") steps.push_back(rec);
    if (rec["kind"] == "final") total = rec["steps"].get<std::size_t>();
  }
  if (steps.empty()) {
    r.problem = "no adaptation steps recorded";
    return r;
  }
  if (total != steps.size()) {
    r.problem = "final record counts " + std::to_string(total) + " steps, stream has " + std::to_string(steps.size());
    return r;
  }
  for (std::size_t i = 0; i < steps.size(); ++i) {
    const auto& s = steps[i];
    const std::string where = "step " + std::to_string(i) + ": ";
    if (s["step"].get<std::size_t>() != i) {
      r.problem = where + "out of order";
      return r;
    }
    const double neck = s["lr_neck"].get<double>(), bb = s["lr_backbone"].get<double>();
    if (s["lr_classifier"].get<double>() != 0.0) r.problem = where + "classifier learning rate is not zero";
    else if (bb != 0.1 * neck) r.problem = where + "backbone rate is not 0.1 x neck rate";
    else if (neck != cosine_lr(config.lr_adapt, i, total)) r.problem = where + "neck rate off the cosine schedule";
    else if (i == 0) head = s["head_checksum"].get<std::string>();
    else if (s["head_checksum"].get<std::string>() != head) r.problem = where + "classifier checksum changed";
    if (!r.problem.empty()) return r;
  }
  r.steps = steps.size();
  r.ok = true;
  return r;
}

std::filesystem::path run_source(const RunConfig& config) {
  const auto source = load_data(config.source_data, "source");
  std::optional<data::Dataset> target;
  if (!config.target_data.empty()) target = load_data(config.target_data, "target");
  auto os = open_metrics(config.out_dir);
  const Model model = train_source(config, source, &os, target ? &*target : nullptr);
  const auto path = config.out_dir / "source.sfmb";
  save_checkpoint(path, model, Phase::Source);
  return path;
}

std::filesystem::path run_adapt(const RunConfig& config) {
  if (config.checkpoint.empty()) throw ConfigError("adapt: no checkpoint given");
  auto ckpt = load_checkpoint(config.checkpoint);
  if (ckpt.phase != Phase::Source)
    throw ConfigError(config.checkpoint.string() + ": expected a source-phase checkpoint, found an adapted one");
  const auto target = load_data(config.target_data, "target");
  RunConfig c = config;
  c.model = ckpt.model.config();
  auto os = open_metrics(config.out_dir);
  const Model model = adapt_target(c, ckpt.model, target, &os);
  const auto path = config.out_dir / "adapted.sfmb";
  save_checkpoint(path, model, Phase::Adapted);
  return path;
}

EvalResult run_eval(const RunConfig& config, const std::filesystem::path& data_dir) {
  if (config.checkpoint.empty()) throw ConfigError("eval: no checkpoint given");
  const auto ckpt = load_checkpoint(config.checkpoint);
  const auto ds = load_data(data_dir, "evaluation");
  auto r = evaluate(ckpt.model, ds);
  auto os = open_metrics(config.out_dir);
  json rec;
  rec["kind"] = "eval";
  rec["phase"] = "eval";
  rec["checkpoint_phase"] = ckpt.phase == Phase::Source ? "source" : "adapted";
  rec["n"] = ds.size();
  rec["accuracy"] = r.accuracy;
  rec["per_class"] = r.per_class;
  emit(&os, rec);
  return r;
}

std::vector<AblationRow> run_ablation(const RunConfig& config) {
  const auto source = load_data(config.source_data, "source");
  const auto target = load_data(config.target_data, "target");
  std::error_code ec;
  std::filesystem::create_directories(config.out_dir, ec);
  if (ec) throw IoError(config.out_dir.string() + ": cannot create directory: " + ec.message());
  std::ofstream summary(config.out_dir / "ablation.jsonl", std::ios::trunc);
  if (!summary) throw IoError((config.out_dir / "ablation.jsonl").string() + ": cannot open for writing");
  std::vector<AblationRow> rows;
  for (bool chvss : {true, false}) {
    RunConfig sc = config;
    if (!chvss) sc.model.n_chvss = 0;
    sc.out_dir = config.out_dir / (chvss ? "source_chvss" : "source_no_chvss");
    auto sos = open_metrics(sc.out_dir);
    const Model src = train_source(sc, source, &sos);
    save_checkpoint(sc.out_dir / "source.sfmb", src, Phase::Source);
    const double base = evaluate(src, target).accuracy;
    for (bool scs_on : {true, false})
      for (bool upa_on : {true, false}) {
        AblationRow row;
        row.chvss = chvss;
        row.scs = scs_on;
        row.upa = upa_on;
        row.name = std::string(chvss ? "chvss" : "no_chvss") + (scs_on ? "+scs" : "-scs") + (upa_on ? "+upa" : "-upa");
        RunConfig ac = sc;
        ac.use_scs = scs_on;
        ac.use_upa = upa_on;
        ac.out_dir = config.out_dir / row.name;
        auto aos = open_metrics(ac.out_dir);
        const Model adapted = adapt_target(ac, src, target, &aos);
        save_checkpoint(ac.out_dir / "adapted.sfmb", adapted, Phase::Adapted);
        row.source_only = base;
        row.adapted = evaluate(adapted, target).accuracy;
        json rec;
        rec["variant"] = row.name;
        rec["chvss"] = chvss;
        rec["scs"] = scs_on;
        rec["upa"] = upa_on;
        rec["source_only_acc"] = row.source_only;
        rec["adapted_acc"] = row.adapted;
        summary << rec.dump() << '\n';
        rows.push_back(row);
      }
  }
  return rows;
}

}  // namespace sfm::pipeline
