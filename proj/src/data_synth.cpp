#include "sfmamba/data_synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>

#include "sfmamba/rng.hpp"
#include "sfmamba/tensor_io.hpp"

namespace sfm::data {

namespace {

// Stream keys for Rng::derive; sample i uses stream i.
constexpr std::uint64_t kLabelStream = 0xA000000000000001ULL;
constexpr std::uint64_t kPrototypeStream = 0xA000000000000002ULL;

double cosine_distance(const double* a, const double* b, std::size_t n) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return 1.0 - dot / std::sqrt(na * nb);
}

std::vector<std::size_t> grow_blob(std::size_t h, std::size_t w, std::size_t size, Rng& rng) {
  std::set<std::size_t> blob{rng.index(h * w)};
  while (blob.size() < size) {
    std::set<std::size_t> frontier;
    for (std::size_t cell : blob) {
      const std::size_t r = cell / w, c = cell % w;
      if (r > 0) frontier.insert(cell - w);
      if (r + 1 < h) frontier.insert(cell + w);
      if (c > 0) frontier.insert(cell - 1);
      if (c + 1 < w) frontier.insert(cell + 1);
    }
    for (std::size_t cell : blob) frontier.erase(cell);
    auto it = frontier.begin();
    std::advance(it, static_cast<long>(rng.index(frontier.size())));
    blob.insert(*it);
  }
  return {blob.begin(), blob.end()};
}

void fnv_bytes(std::uint64_t& h, const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
}

void fnv_u64(std::uint64_t& h, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  fnv_bytes(h, b, 8);
}

void fnv_double(std::uint64_t& h, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, sizeof bits);
  fnv_u64(h, bits);
}

}  // namespace

AffineShift AffineShift::identity(std::size_t dim) { return {std::vector<double>(dim, 1.0), std::vector<double>(dim, 0.0)}; }

void DomainSpec::validate() const {
  if (n_classes < 2) throw ConfigError("domain spec: need at least 2 classes");
  if (grid_h == 0 || grid_w == 0 || patch_dim == 0) throw ConfigError("domain spec: grid and patch_dim must be positive");
  if (class_prototypes.shape() != Shape{n_classes, patch_dim}) {
    throw ConfigError("domain spec: class prototypes are " + shape_str(class_prototypes.shape()) + ", expected " +
                      shape_str({n_classes, patch_dim}));
  }
  if (background_prototypes.shape() != class_prototypes.shape()) {
    throw ConfigError("domain spec: background prototypes are " + shape_str(background_prototypes.shape()) +
                      ", expected " + shape_str({n_classes, patch_dim}));
  }
  if (!(spurious_strength >= 0.0 && spurious_strength <= 1.0)) throw ConfigError("domain spec: spurious_strength must lie in [0, 1]");
  if (!(noise_std >= 0.0)) throw ConfigError("domain spec: noise_std must be non-negative");
  if (shift.scale.size() != patch_dim || shift.offset.size() != patch_dim) throw ConfigError("domain spec: shift must have patch_dim entries");
  if (blob_min == 0 || blob_min > blob_max || blob_max > tokens()) {
    throw DomainError("domain spec: blob size range [" + std::to_string(blob_min) + ", " + std::to_string(blob_max) +
                      "] does not fit a " + std::to_string(grid_h) + "x" + std::to_string(grid_w) + " grid");
  }
}

KeyValues DomainSpec::to_manifest() const {
  KeyValues kv;
  kv.set("n_classes", std::to_string(n_classes));
  kv.set("grid_h", std::to_string(grid_h));
  kv.set("grid_w", std::to_string(grid_w));
  kv.set("patch_dim", std::to_string(patch_dim));
  kv.set("class_prototypes", format_doubles(class_prototypes.values()));
  kv.set("background_prototypes", format_doubles(background_prototypes.values()));
  kv.set("spurious_strength", format_double(spurious_strength));
  kv.set("noise_std", format_double(noise_std));
  kv.set("shift_scale", format_doubles(shift.scale));
  kv.set("shift_offset", format_doubles(shift.offset));
  kv.set("blob_min", std::to_string(blob_min));
  kv.set("blob_max", std::to_string(blob_max));
  kv.set("seed", std::to_string(seed));
  return kv;
}

DomainSpec DomainSpec::from_manifest(const KeyValues& kv) {
  DomainSpec s;
  s.n_classes = kv.get_u64("n_classes");
  s.grid_h = kv.get_u64("grid_h");
  s.grid_w = kv.get_u64("grid_w");
  s.patch_dim = kv.get_u64("patch_dim");
  auto protos = [&](const char* key) {
    auto v = kv.get_doubles(key);
    if (v.size() != s.n_classes * s.patch_dim) {
      throw ConfigError(std::string("manifest: ") + key + " has " + std::to_string(v.size()) + " values, expected " +
                        std::to_string(s.n_classes * s.patch_dim));
    }
    return Tensor({s.n_classes, s.patch_dim}, std::move(v));
  };
  s.class_prototypes = protos("class_prototypes");
  s.background_prototypes = protos("background_prototypes");
  s.spurious_strength = kv.get_double("spurious_strength");
  s.noise_std = kv.get_double("noise_std");
  s.shift.scale = kv.get_doubles("shift_scale");
  s.shift.offset = kv.get_doubles("shift_offset");
  s.blob_min = kv.get_u64("blob_min");
  s.blob_max = kv.get_u64("blob_max");
  s.seed = kv.get_u64("seed");
  s.validate();
  return s;
}

Tensor Dataset::batch(const std::vector<std::size_t>& indices) const {
  const Shape& s = patches.shape();
  const std::size_t row = s[1] * s[2] * s[3];
  std::vector<double> out(indices.size() * row);
  for (std::size_t k = 0; k < indices.size(); ++k) {
    if (indices[k] >= s[0]) throw DomainError("dataset batch: index " + std::to_string(indices[k]) + " out of range");
    std::copy_n(patches.values().begin() + static_cast<long>(indices[k] * row), row, out.begin() + static_cast<long>(k * row));
  }
  return Tensor({indices.size(), s[1], s[2], s[3]}, std::move(out));
}

std::uint64_t Dataset::checksum() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (double v : patches.values()) fnv_double(h, v);
  for (auto y : labels) fnv_u64(h, y);
  for (double v : masks.values()) fnv_double(h, v);
  return h;
}

std::pair<Tensor, Tensor> make_prototypes(std::size_t n_classes, std::size_t patch_dim, std::uint64_t seed,
                                          double min_distance) {
  Rng rng = Rng::derive(seed, kPrototypeStream);
  std::vector<double> all;
  const std::size_t want = 2 * n_classes;
  std::size_t attempts = 0;
  while (all.size() < want * patch_dim) {
    if (++attempts > 100000) throw DomainError("make_prototypes: cannot satisfy the minimum cosine distance");
    std::vector<double> v(patch_dim);
    for (auto& x : v) x = rng.normal();
    bool ok = true;
    for (std::size_t k = 0; k * patch_dim < all.size() && ok; ++k)
      ok = cosine_distance(all.data() + k * patch_dim, v.data(), patch_dim) >= min_distance;
    if (ok) all.insert(all.end(), v.begin(), v.end());
  }
  const auto half = static_cast<long>(n_classes * patch_dim);
  return {Tensor({n_classes, patch_dim}, std::vector<double>(all.begin(), all.begin() + half)),
          Tensor({n_classes, patch_dim}, std::vector<double>(all.begin() + half, all.end()))};
}

Dataset generate_domain(const DomainSpec& spec, std::size_t n) {
  spec.validate();
  const std::size_t c_len = spec.n_classes, h = spec.grid_h, w = spec.grid_w, p = spec.patch_dim, hw = h * w;
  if (n < c_len) throw DomainError("generate_domain: need at least one sample per class");
  Dataset ds;
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) ds.labels[i] = i % c_len;
  Rng label_rng = Rng::derive(spec.seed, kLabelStream);
  label_rng.shuffle(ds.labels);
  ds.background_class.resize(n);

  std::vector<double> patches(n * hw * p), masks(n * hw, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng = Rng::derive(spec.seed, i);
    const std::size_t y = ds.labels[i];
    const std::size_t size = spec.blob_min + rng.index(spec.blob_max - spec.blob_min + 1);
    for (std::size_t cell : grow_blob(h, w, size, rng)) masks[i * hw + cell] = 1.0;
    std::size_t bg = y;
    if (!(rng.uniform() < spec.spurious_strength)) {
      bg = rng.index(c_len - 1);
      if (bg >= y) ++bg;
    }
    ds.background_class[i] = bg;
    for (std::size_t cell = 0; cell < hw; ++cell) {
      const bool fg = masks[i * hw + cell] != 0.0;
      const double* proto = (fg ? spec.class_prototypes : spec.background_prototypes).data().data() + (fg ? y : bg) * p;
      double* out = patches.data() + (i * hw + cell) * p;
      for (std::size_t j = 0; j < p; ++j) {
        const double x = proto[j] + spec.noise_std * rng.normal();
        out[j] = spec.shift.scale[j] * x + spec.shift.offset[j];
      }
    }
  }
  ds.patches = Tensor({n, h, w, p}, std::move(patches));
  ds.masks = Tensor({n, h, w}, std::move(masks));
  return ds;
}

std::pair<DomainSpec, DomainSpec> benchmark_specs(std::uint64_t seed, const BenchmarkOptions& o) {
  DomainSpec src;
  src.n_classes = o.n_classes;
  src.grid_h = o.grid_h;
  src.grid_w = o.grid_w;
  src.patch_dim = o.patch_dim;
  std::tie(src.class_prototypes, src.background_prototypes) = make_prototypes(o.n_classes, o.patch_dim, seed);
  if (o.background_scale != 1.0) {
    std::vector<double> bg(src.background_prototypes.values());
    for (double& v : bg) v *= o.background_scale;
    src.background_prototypes = Tensor(src.background_prototypes.shape(), std::move(bg));
  }
  src.spurious_strength = o.source_spurious;
  src.noise_std = o.source_noise;
  src.shift = AffineShift::identity(o.patch_dim);
  src.blob_min = o.blob_min;
  src.blob_max = o.blob_max;
  src.seed = Rng::derive(seed, 1).next_u64();

  DomainSpec tgt = src;
  tgt.spurious_strength = o.target_spurious < 0.0 ? 1.0 / static_cast<double>(o.n_classes) : o.target_spurious;
  tgt.noise_std = o.target_noise;
  Rng shift_rng = Rng::derive(seed, 3);
  for (std::size_t j = 0; j < o.patch_dim; ++j) {
    tgt.shift.scale[j] = shift_rng.uniform(o.shift_scale_lo, o.shift_scale_hi);
    tgt.shift.offset[j] = shift_rng.uniform(-o.shift_offset, o.shift_offset);
  }
  tgt.seed = Rng::derive(seed, 2).next_u64();
  return {src, tgt};
}

BenchmarkPair make_benchmark_pair(std::uint64_t seed, const BenchmarkOptions& options) {
  auto [src, tgt] = benchmark_specs(seed, options);
  BenchmarkPair pair{src, tgt, generate_domain(src, options.n_source), generate_domain(tgt, options.n_target)};
  return pair;
}

void save_dataset(const std::filesystem::path& dir, const Dataset& dataset, const DomainSpec& spec) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError(dir.string() + ": cannot create directory: " + ec.message());
  save_tensor(dir / "patches.tnsr", dataset.patches);
  const std::size_t n = dataset.labels.size();
  std::vector<double> labels(dataset.labels.begin(), dataset.labels.end());
  save_tensor(dir / "labels.tnsr", Tensor({n}, std::move(labels)));
  save_tensor(dir / "masks.tnsr", dataset.masks);
  auto kv = spec.to_manifest();
  kv.set("count", std::to_string(dataset.size()));
  std::ofstream os(dir / "manifest.txt");
  if (!os) throw IoError((dir / "manifest.txt").string() + ": cannot open for writing");
  os << "# synthetic domain\n";
  kv.write(os);
  if (!os) throw IoError((dir / "manifest.txt").string() + ": write failed");
}

std::pair<Dataset, DomainSpec> load_dataset(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw IoError(dir.string() + ": dataset directory not found");
  const auto kv = KeyValues::load(dir / "manifest.txt");
  DomainSpec spec = DomainSpec::from_manifest(kv);
  Dataset ds;
  ds.patches = load_tensor(dir / "patches.tnsr");
  const Tensor labels = load_tensor(dir / "labels.tnsr");
  ds.masks = load_tensor(dir / "masks.tnsr");

  if (ds.patches.rank() != 4) throw ShapeError("patches.tnsr must be [n, H, W, P], got " + shape_str(ds.patches.shape()));
  const std::size_t n = ds.patches.dim(0);
  if (labels.shape() != Shape{n}) throw ShapeError("labels.tnsr vs patches.tnsr", Shape{n}, labels.shape());
  if (ds.masks.shape() != Shape{n, ds.patches.dim(1), ds.patches.dim(2)}) {
    throw ShapeError("masks.tnsr vs patches.tnsr", Shape{n, ds.patches.dim(1), ds.patches.dim(2)}, ds.masks.shape());
  }
  if (ds.patches.shape() != Shape{n, spec.grid_h, spec.grid_w, spec.patch_dim}) {
    throw ConfigError("patches.tnsr is " + shape_str(ds.patches.shape()) + " but the manifest describes " +
                      shape_str({n, spec.grid_h, spec.grid_w, spec.patch_dim}));
  }
  if (kv.get_u64("count") != n) throw ConfigError("manifest count " + kv.raw("count") + " but tensors hold " + std::to_string(n) + " samples");
  std::vector<std::size_t> per_class(spec.n_classes, 0);
  for (double v : labels.values()) {
    if (!(v >= 0.0 && v < static_cast<double>(spec.n_classes)) || v != std::floor(v)) {
      throw ConfigError("labels.tnsr holds " + format_double(v) + ", outside the manifest's " + std::to_string(spec.n_classes) + " classes");
    }
    ds.labels.push_back(static_cast<std::size_t>(v));
    ++per_class[ds.labels.back()];
  }
  if (*std::min_element(per_class.begin(), per_class.end()) == 0) throw ConfigError("labels.tnsr does not cover all " + std::to_string(spec.n_classes) + " manifest classes");
  return {std::move(ds), std::move(spec)};
}

Tensor background_means(const Dataset& dataset) {
  const auto& s = dataset.patches.shape();
  const std::size_t n = s[0], hw = s[1] * s[2], p = s[3];
  std::vector<double> out(n * p, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t count = 0;
    for (std::size_t t = 0; t < hw; ++t) {
      if (dataset.masks[i * hw + t] != 0.0) continue;
      ++count;
      for (std::size_t j = 0; j < p; ++j) out[i * p + j] += dataset.patches[(i * hw + t) * p + j];
    }
    for (std::size_t j = 0; j < p; ++j) out[i * p + j] /= static_cast<double>(std::max<std::size_t>(count, 1));
  }
  return Tensor({n, p}, std::move(out));
}

double linear_probe_accuracy(const Tensor& train_x, const std::vector<std::size_t>& train_y, const Tensor& test_x,
                             const std::vector<std::size_t>& test_y, std::size_t n_classes) {
  const std::size_t n = train_x.dim(0), d = train_x.dim(1), c_len = n_classes;
  // Standardise with training statistics.
  std::vector<double> mu(d, 0.0), sd(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) mu[j] += train_x[i * d + j] / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) sd[j] += std::pow(train_x[i * d + j] - mu[j], 2) / static_cast<double>(n);
  for (auto& v : sd) v = std::sqrt(v) + 1e-12;
  auto feat = [&](const Tensor& x, std::size_t i, std::size_t j) { return (x[i * d + j] - mu[j]) / sd[j]; };

  std::vector<double> wt((d + 1) * c_len, 0.0), grad(wt.size()), z(c_len);
  auto scores = [&](const Tensor& x, std::size_t i) {
    for (std::size_t c = 0; c < c_len; ++c) {
      z[c] = wt[d * c_len + c];
      for (std::size_t j = 0; j < d; ++j) z[c] += feat(x, i, j) * wt[j * c_len + c];
    }
  };
  for (int it = 0; it < 500; ++it) {
    std::fill(grad.begin(), grad.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      scores(train_x, i);
      const double m = *std::max_element(z.begin(), z.end());
      double s = 0.0;
      for (auto& v : z) s += (v = std::exp(v - m));
      for (std::size_t c = 0; c < c_len; ++c) {
        const double g = (z[c] / s - (train_y[i] == c ? 1.0 : 0.0)) / static_cast<double>(n);
        for (std::size_t j = 0; j < d; ++j) grad[j * c_len + c] += g * feat(train_x, i, j);
        grad[d * c_len + c] += g;
      }
    }
    for (std::size_t k = 0; k < wt.size(); ++k) wt[k] -= 0.5 * grad[k];
  }
  std::size_t correct = 0;
  for (std::size_t i = 0; i < test_x.dim(0); ++i) {
    scores(test_x, i);
    correct += static_cast<std::size_t>(std::max_element(z.begin(), z.end()) - z.begin()) == test_y[i];
  }
  return static_cast<double>(correct) / static_cast<double>(test_x.dim(0));
}

}  // namespace sfm::data
