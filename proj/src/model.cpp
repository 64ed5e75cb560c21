#include "sfmamba/model.hpp"

#include <cmath>
#include <fstream>

#include "sfmamba/rng.hpp"
#include "sfmamba/tensor_io.hpp"

namespace sfm {

namespace {

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

Tensor uniform(Shape shape, double bound, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(-bound, bound);
  return Tensor(std::move(shape), std::move(v));
}

const char* kRoutes[4] = {"route0", "route1", "route2", "route3"};

void add_ssm(std::map<std::string, Tensor>& params, const std::string& prefix, std::size_t inner,
             std::size_t state, std::uint64_t seed) {
  Rng rng = Rng::derive(seed, fnv1a(prefix));
  auto p = ssm::SsmParams::init(inner, state, rng);
  params[prefix + ".a_log"] = p.a_log;
  params[prefix + ".d_skip"] = p.d_skip;
  params[prefix + ".w_delta"] = p.w_delta;
  params[prefix + ".b_delta"] = p.b_delta;
  params[prefix + ".w_b"] = p.w_b;
  params[prefix + ".w_c"] = p.w_c;
}

std::string block_name(const char* kind, std::size_t i) { return kind + std::to_string(i); }

}  // namespace

void ModelConfig::validate() const {
  auto positive = [](std::uint32_t v, const char* name) {
    if (v == 0) throw ConfigError(std::string("model config: ") + name + " must be positive");
  };
  positive(grid_h, "grid_h");
  positive(grid_w, "grid_w");
  positive(patch_dim, "patch_dim");
  positive(embed_dim, "embed_dim");
  positive(state_dim, "state_dim");
  positive(n_classes, "n_classes");
  if (embed_dim % 2 != 0) throw ConfigError("model config: embed_dim must be even for the gate split");
  if (chgroup_width != 0 && embed_dim % chgroup_width != 0) {
    throw ConfigError("model config: chgroup_width " + std::to_string(chgroup_width) +
                      " does not divide embed_dim " + std::to_string(embed_dim));
  }
}

ParamGroup param_group(const std::string& name) {
  if (name.rfind("head.", 0) == 0) return ParamGroup::Classifier;
  if (name.rfind("chvss", 0) == 0 || name.rfind("chgroup", 0) == 0 || name.rfind("bn.", 0) == 0) {
    return ParamGroup::Neck;
  }
  return ParamGroup::Backbone;
}

Model::Model(ModelConfig config, std::uint64_t seed) : config_(config), seed_(seed) {
  config_.validate();
  const std::size_t d = config_.embed_dim, e = d / 2, n = config_.state_dim;
  const std::size_t hw = config_.tokens(), p = config_.patch_dim, c = config_.n_classes;
  auto rng_for = [&](const std::string& name) { return Rng::derive(seed, fnv1a(name)); };
  auto linear = [&](const std::string& name, std::size_t in, std::size_t out) {
    Rng rng = rng_for(name);
    params_[name] = uniform({in, out}, 1.0 / std::sqrt(static_cast<double>(in)), rng);
  };

  linear("embed.w", p, d);
  params_["embed.b"] = Tensor::zeros({d});
  for (std::size_t i = 0; i < config_.n_encoder_blocks; ++i) {
    const auto pre = block_name("enc", i);
    params_[pre + ".ln.g"] = Tensor::full({d}, 1.0);
    params_[pre + ".ln.b"] = Tensor::zeros({d});
    linear(pre + ".in.w", d, d);
    for (auto* r : kRoutes) add_ssm(params_, pre + "." + r, e, n, seed);
    linear(pre + ".out.w", e, d);
  }
  for (std::size_t i = 0; i < config_.n_chvss; ++i) {
    if (config_.chgroup_width == 0) {
      const auto pre = block_name("chvss", i);
      add_ssm(params_, pre + ".fwd", hw, n, seed);
      add_ssm(params_, pre + ".bwd", hw, n, seed);
    } else {
      const auto pre = block_name("chgroup", i);
      for (auto* r : kRoutes) add_ssm(params_, pre + "." + r, hw, n, seed);
    }
  }
  params_["bn.g"] = Tensor::full({d}, 1.0);
  params_["bn.b"] = Tensor::zeros({d});
  buffers_["bn.running_mean"] = Tensor::zeros({d});
  buffers_["bn.running_var"] = Tensor::full({d}, 1.0);
  linear("head.w", d, c);
  params_["head.b"] = Tensor::zeros({c});
}

void Model::update_bn_stats(const Tensor& batch_mean, const Tensor& batch_var, std::size_t batch_size) {
  auto& rm = buffers_.at("bn.running_mean");
  auto& rv = buffers_.at("bn.running_var");
  const double unbias = batch_size > 1 ? static_cast<double>(batch_size) / static_cast<double>(batch_size - 1) : 1.0;
  std::vector<double> m(rm.size()), v(rv.size());
  for (std::size_t i = 0; i < m.size(); ++i) {
    m[i] = (1.0 - kBnMomentum) * rm[i] + kBnMomentum * batch_mean[i];
    v[i] = (1.0 - kBnMomentum) * rv[i] + kBnMomentum * batch_var[i] * unbias;
  }
  rm = Tensor(rm.shape(), std::move(m));
  rv = Tensor(rv.shape(), std::move(v));
}

Binding::Binding(Tape& tape, const Model& model, bool trainable) : tape_(&tape), model_(&model) {
  for (const auto& [name, t] : model.params()) vars_.emplace(name, trainable ? tape.leaf(t) : tape.constant(t));
}

Var Binding::operator[](const std::string& name) const {
  auto it = vars_.find(name);
  if (it == vars_.end()) throw std::out_of_range("model: no parameter named " + name);
  return it->second;
}

ssm::SsmVars Binding::ssm(const std::string& prefix) const {
  const auto& self = *this;
  return {self[prefix + ".a_log"], self[prefix + ".d_skip"], self[prefix + ".w_delta"],
          self[prefix + ".b_delta"], self[prefix + ".w_b"], self[prefix + ".w_c"]};
}

namespace layers {

Var patch_embed(const Binding& b, Var x) {
  const auto& cfg = b.model().config();
  const auto& s = x.shape();
  if (s.size() != 3 || s[1] != cfg.tokens() || s[2] != cfg.patch_dim) {
    throw ShapeError("patch_embed", Shape{0, cfg.tokens(), cfg.patch_dim}, s);
  }
  return ad::add(ad::matmul(x, b["embed.w"]), b["embed.b"]);
}

Var vss_block(const Binding& b, std::size_t index, Var x) {
  const auto& cfg = b.model().config();
  const auto pre = block_name("enc", index);
  const std::size_t d = cfg.embed_dim, e = d / 2;
  Var xn = ad::layer_norm(x, b[pre + ".ln.g"], b[pre + ".ln.b"]);
  Var z = ad::matmul(xn, b[pre + ".in.w"]);
  Var signal = ad::slice(z, 2, 0, e);
  Var gate = ad::slice(z, 2, e, d);
  const auto routes = ssm::cross_scan_routes(cfg.grid_h, cfg.grid_w);
  Var merged;
  for (std::size_t k = 0; k < 4; ++k) {
    Var seq = ad::gather(signal, 1, routes[k]);
    Var y = ssm::selective_scan(seq, b.ssm(pre + "." + kRoutes[k]));
    Var back = ad::gather(y, 1, ssm::inverse_permutation(routes[k]));
    merged = k == 0 ? back : ad::add(merged, back);
  }
  Var gated = ad::mul(merged, ad::silu(gate));
  return ad::add(x, ad::matmul(gated, b[pre + ".out.w"]));
}

Var chvss_block(const Binding& b, std::size_t index, Var x) {
  const auto pre = block_name("chvss", index);
  Var channels = ad::transpose(x);  // [B, D, HW]
  Var y = ssm::bidirectional_scan(channels, b.ssm(pre + ".fwd"), b.ssm(pre + ".bwd"));
  return ad::add(x, ad::transpose(y));
}

Var chgroup_block(const Binding& b, std::size_t index, Var x) {
  const auto& cfg = b.model().config();
  const std::size_t d = cfg.embed_dim, width = cfg.chgroup_width;
  if (width == 0 || d % width != 0) {
    throw ConfigError("chgroup: width " + std::to_string(width) + " does not divide " + std::to_string(d));
  }
  const auto pre = block_name("chgroup", index);
  Var channels = ad::transpose(x);
  const auto routes = ssm::cross_scan_routes(d / width, width);
  Var merged;
  for (std::size_t k = 0; k < 4; ++k) {
    Var seq = ad::gather(channels, 1, routes[k]);
    Var y = ssm::selective_scan(seq, b.ssm(pre + "." + kRoutes[k]));
    Var back = ad::gather(y, 1, ssm::inverse_permutation(routes[k]));
    merged = k == 0 ? back : ad::add(merged, back);
  }
  return ad::add(x, ad::transpose(merged));
}

std::pair<Var, Var> head(const Binding& b, Var features, BnMode mode,
                         std::optional<std::pair<Tensor, Tensor>>* stats) {
  Var pooled = ad::mean(features, 1);
  Var normed;
  if (mode == BnMode::Train) {
    const auto& pv = pooled.value();
    const std::size_t batch = pv.dim(0), d = pv.dim(1);
    if (batch < 2) throw ShapeError("batch_norm: train mode needs a batch of at least 2");
    normed = ad::batch_norm_train(pooled, b["bn.g"], b["bn.b"]);
    if (stats) {
      std::vector<double> m(d, 0.0), v(d, 0.0);
      for (std::size_t i = 0; i < batch; ++i)
        for (std::size_t j = 0; j < d; ++j) m[j] += pv[i * d + j] / static_cast<double>(batch);
      for (std::size_t i = 0; i < batch; ++i)
        for (std::size_t j = 0; j < d; ++j) v[j] += (pv[i * d + j] - m[j]) * (pv[i * d + j] - m[j]) / static_cast<double>(batch);
      *stats = std::make_pair(Tensor({d}, std::move(m)), Tensor({d}, std::move(v)));
    }
  } else {
    const auto& rm = b.model().buffers().at("bn.running_mean");
    const auto& rv = b.model().buffers().at("bn.running_var");
    std::vector<double> inv(rv.size()), shift(rv.size());
    for (std::size_t j = 0; j < inv.size(); ++j) {
      inv[j] = 1.0 / std::sqrt(rv[j] + 1e-5);
      shift[j] = -rm[j] * inv[j];
    }
    Tape& tape = b.tape();
    Var xhat = ad::add(ad::mul(pooled, tape.constant(Tensor(rv.shape(), inv))),
                       tape.constant(Tensor(rv.shape(), shift)));
    normed = ad::add(ad::mul(xhat, b["bn.g"]), b["bn.b"]);
  }
  Var act = ad::relu(normed);
  Var logits = ad::add(ad::matmul(act, b["head.w"]), b["head.b"]);
  return {pooled, logits};
}

}  // namespace layers

Var encode(const Binding& b, Var tokens) {
  const auto& cfg = b.model().config();
  Var x = tokens;
  for (std::size_t i = 0; i < cfg.n_encoder_blocks; ++i) x = layers::vss_block(b, i, x);
  for (std::size_t i = 0; i < cfg.n_chvss; ++i) {
    x = cfg.chgroup_width == 0 ? layers::chvss_block(b, i, x) : layers::chgroup_block(b, i, x);
  }
  return x;
}

ForwardOut forward_tokens(const Binding& b, Var tokens, BnMode mode) {
  ForwardOut out;
  out.tokens = tokens;
  out.features = encode(b, tokens);
  auto [pooled, logits] = layers::head(b, out.features, mode, &out.batch_stats);
  out.pooled = pooled;
  out.logits = logits;
  return out;
}

ForwardOut forward(const Binding& b, Var x, BnMode mode) {
  const auto& cfg = b.model().config();
  const auto& s = x.shape();
  if (s.size() == 4) {
    if (s[1] != cfg.grid_h || s[2] != cfg.grid_w) {
      throw ShapeError("forward", Shape{s[0], cfg.grid_h, cfg.grid_w, cfg.patch_dim}, s);
    }
    x = ad::reshape(x, {s[0], s[1] * s[2], s[3]});
  }
  return forward_tokens(b, layers::patch_embed(b, x), mode);
}

Prediction predict(const Model& model, const Tensor& x) {
  Tape tape;
  Binding b(tape, model, false);
  auto out = forward(b, tape.constant(x), BnMode::Eval);
  return {out.logits.value(), out.features.value(), out.pooled.value()};
}

void save_checkpoint(const std::filesystem::path& path, const Model& model, Phase phase) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os.write("SFMB", 4);
  le::put_u8(os, 1);
  const auto& c = model.config();
  for (auto v : {c.grid_h, c.grid_w, c.patch_dim, c.embed_dim, c.n_encoder_blocks, c.state_dim, c.n_chvss,
                 c.n_classes, c.chgroup_width}) {
    le::put_u32(os, v);
  }
  le::put_u64(os, model.seed());
  le::put_u8(os, static_cast<std::uint8_t>(phase));
  le::put_u32(os, static_cast<std::uint32_t>(model.params().size() + model.buffers().size()));
  auto put_record = [&](const std::string& name, const Tensor& t) {
    le::put_u16(os, static_cast<std::uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_tensor(os, t);
  };
  for (const auto& [name, t] : model.params()) put_record(name, t);
  for (const auto& [name, t] : model.buffers()) put_record(name, t);
  if (!os) throw IoError("write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  char magic[4];
  if (!is.read(magic, 4)) throw FormatError(path.string() + ": truncated file");
  if (std::string(magic, 4) != "SFMB") throw FormatError(path.string() + ": bad magic");
  try {
    const auto version = le::get_u8(is);
    if (version != 1) throw FormatError("unsupported checkpoint version " + std::to_string(version));
    ModelConfig cfg;
    for (auto* field : {&cfg.grid_h, &cfg.grid_w, &cfg.patch_dim, &cfg.embed_dim, &cfg.n_encoder_blocks,
                        &cfg.state_dim, &cfg.n_chvss, &cfg.n_classes, &cfg.chgroup_width}) {
      *field = le::get_u32(is);
    }
    const auto seed = le::get_u64(is);
    const auto phase = le::get_u8(is);
    if (phase > 1) throw FormatError("unknown phase tag " + std::to_string(phase));
    Model model(cfg, seed);
    const auto count = le::get_u32(is);
    if (count != model.params().size() + model.buffers().size()) {
      throw ConfigError("config shape mismatch: " + std::to_string(count) + " records, config implies " +
                        std::to_string(model.params().size() + model.buffers().size()));
    }
    for (std::uint32_t i = 0; i < count; ++i) {
      const auto len = le::get_u16(is);
      std::string name(len, '\0');
      if (!is.read(name.data(), len)) throw FormatError("truncated file");
      Tensor t = read_tensor(is);
      auto& target = model.params().count(name) ? model.params() : model.buffers();
      auto it = target.find(name);
      if (it == target.end()) throw ConfigError("config shape mismatch: unexpected record " + name);
      if (it->second.shape() != t.shape()) {
        throw ConfigError("config shape mismatch: " + name + " stored as " + shape_str(t.shape()) +
                          ", config implies " + shape_str(it->second.shape()));
      }
      it->second = std::move(t);
    }
    if (is.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes after last record");
    return {std::move(model), static_cast<Phase>(phase)};
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

}  // namespace sfm
