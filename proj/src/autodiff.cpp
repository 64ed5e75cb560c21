#include "sfmamba/autodiff.hpp"

#include <algorithm>
#include <cmath>

namespace sfm {

const Tensor& Var::value() const {
  if (!tape_) throw std::logic_error("Var: not attached to a tape");
  return tape_->value(id_);
}

bool BackwardCtx::needs(std::size_t slot) const {
  const auto& node = tape_.nodes_[node_];
  return tape_.nodes_[node.inputs.at(slot)].requires_grad;
}

std::span<double> BackwardCtx::grad_in(std::size_t slot) {
  return tape_.grad_buffer(tape_.nodes_[node_].inputs.at(slot));
}

const Tensor& BackwardCtx::input(std::size_t slot) const {
  return tape_.nodes_[tape_.nodes_[node_].inputs.at(slot)].value;
}

const Tensor& BackwardCtx::output() const { return tape_.nodes_[node_].value; }

const Tensor& Gradients::at(int leaf_id) const {
  auto it = grads_.find(leaf_id);
  if (it == grads_.end()) throw std::out_of_range("gradients: unknown leaf " + std::to_string(leaf_id));
  return it->second;
}

Var Tape::leaf(Tensor value) {
  nodes_.push_back({std::move(value), {}, {}, true});
  int id = static_cast<int>(nodes_.size()) - 1;
  leaves_.push_back(id);
  return {this, id};
}

Var Tape::constant(Tensor value) {
  nodes_.push_back({std::move(value), {}, {}, false});
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::record(Tensor value, std::vector<Var> inputs, BackwardFn backward) {
  Node node;
  node.value = std::move(value);
  for (const auto& in : inputs) {
    if (in.tape() != this) throw std::logic_error("tape: input recorded on a different tape");
    node.inputs.push_back(in.id());
    node.requires_grad = node.requires_grad || nodes_[in.id()].requires_grad;
  }
  if (node.requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

std::vector<double>& Tape::grad_buffer(int id) {
  auto& g = grads_[id];
  if (g.empty()) g.assign(nodes_[id].value.size(), 0.0);
  return g;
}

Gradients Tape::backward(Var loss) {
  if (loss.tape() != this) throw std::logic_error("backward: loss not recorded on this tape");
  if (shape_numel(loss.shape()) != 1 || loss.value().rank() > 1) {
    throw ShapeError("backward: loss must be a scalar, got " + shape_str(loss.shape()));
  }
  grads_.assign(nodes_.size(), {});
  grad_buffer(loss.id())[0] = 1.0;
  for (int id = loss.id(); id >= 0; --id) {
    auto& node = nodes_[id];
    if (!node.backward || grads_[id].empty()) continue;
    BackwardCtx ctx(*this, id, grads_[id]);
    node.backward(ctx);
  }
  Gradients out;
  for (int leaf : leaves_) {
    const auto& shape = nodes_[leaf].value.shape();
    if (grads_[leaf].empty()) {
      out.grads_.emplace(leaf, Tensor::zeros(shape));
    } else {
      out.grads_.emplace(leaf, Tensor(shape, std::move(grads_[leaf])));
    }
  }
  grads_.clear();
  return out;
}

namespace ad {
namespace {

Tape& tape_of(Var a) {
  if (!a.valid()) throw std::logic_error("op: uninitialised Var");
  return *a.tape();
}

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_axis(const Shape& s, std::size_t axis, const char* op) {
  if (axis >= s.size()) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " +
                     shape_str(s));
  }
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

template <typename Fwd, typename Bwd>
Var unary(Var a, Fwd fwd, Bwd dfdx) {
  const auto& x = a.value().values();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = fwd(x[i]);
  return tape_of(a).record(Tensor(a.shape(), std::move(out)), {a}, [dfdx](BackwardCtx& ctx) {
    auto g = ctx.grad_out();
    auto gi = ctx.grad_in(0);
    const auto& xv = ctx.input(0).values();
    const auto& yv = ctx.output().values();
    for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i] * dfdx(xv[i], yv[i]);
  });
}

enum class BinOp { Add, Sub, Mul };

Var binary(Var a, Var b, BinOp op, const char* name) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  bool swap = false;
  if (sa != sb) {
    if (is_suffix(sb, sa)) {
      swap = false;
    } else if (is_suffix(sa, sb)) {
      swap = true;
    } else {
      throw ShapeError(name, sa, sb);
    }
  }
  // big has the full shape; small repeats with period small.size().
  const Tensor& big = swap ? b.value() : a.value();
  const Tensor& small = swap ? a.value() : b.value();
  const auto& xb = big.values();
  const auto& xs = small.values();
  const std::size_t period = xs.size();
  std::vector<double> out(xb.size());
  for (std::size_t i = 0; i < xb.size(); ++i) {
    double l = swap ? xs[i % period] : xb[i];
    double r = swap ? xb[i] : xs[i % period];
    switch (op) {
      case BinOp::Add: out[i] = l + r; break;
      case BinOp::Sub: out[i] = l - r; break;
      case BinOp::Mul: out[i] = l * r; break;
    }
  }
  Shape out_shape = big.shape();
  return tape_of(a).record(Tensor(out_shape, std::move(out)), {a, b}, [op, swap](BackwardCtx& ctx) {
    auto g = ctx.grad_out();
    const std::size_t n = g.size();
    const std::size_t big_slot = swap ? 1 : 0;
    const std::size_t small_slot = swap ? 0 : 1;
    const auto& xb = ctx.input(big_slot).values();
    const auto& xs = ctx.input(small_slot).values();
    const std::size_t period = xs.size();
    // d/d(left) and d/d(right) for each op.
    auto dl = [&](std::size_t i) -> double {
      double r = swap ? xb[i] : xs[i % period];
      return op == BinOp::Mul ? r : 1.0;
    };
    auto dr = [&](std::size_t i) -> double {
      double l = swap ? xs[i % period] : xb[i];
      if (op == BinOp::Mul) return l;
      return op == BinOp::Sub ? -1.0 : 1.0;
    };
    if (ctx.needs(big_slot)) {
      auto gb = ctx.grad_in(big_slot);
      for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * (swap ? dr(i) : dl(i));
    }
    if (ctx.needs(small_slot)) {
      auto gs = ctx.grad_in(small_slot);
      for (std::size_t i = 0; i < n; ++i) gs[i % period] += g[i] * (swap ? dl(i) : dr(i));
    }
  });
}

}  // namespace

Var add(Var a, Var b) { return binary(a, b, BinOp::Add, "add"); }
Var sub(Var a, Var b) { return binary(a, b, BinOp::Sub, "sub"); }
Var mul(Var a, Var b) { return binary(a, b, BinOp::Mul, "mul"); }

Var scale(Var a, double c) {
  return unary(a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

Var add_scalar(Var a, double c) {
  return unary(a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Var matmul(Var a, Var b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa.empty() || sb.empty() || sb.size() > 2 || sa.back() != sb.front()) {
    throw ShapeError("matmul", sa, sb);
  }
  const std::size_t k = sb[0];
  const std::size_t m = sb.size() == 2 ? sb[1] : 1;
  const std::size_t rows = shape_numel(sa) / k;
  Shape out_shape(sa.begin(), sa.end() - 1);
  if (sb.size() == 2) out_shape.push_back(m);
  if (out_shape.empty()) out_shape.push_back(1);
  const auto& x = a.value().values();
  const auto& w = b.value().values();
  std::vector<double> out(rows * m, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    double* o = out.data() + r * m;
    for (std::size_t i = 0; i < k; ++i) {
      const double xi = x[r * k + i];
      const double* wi = w.data() + i * m;
      for (std::size_t j = 0; j < m; ++j) o[j] += xi * wi[j];
    }
  }
  return tape_of(a).record(Tensor(out_shape, std::move(out)), {a, b}, [rows, k, m](BackwardCtx& ctx) {
    auto g = ctx.grad_out();
    const auto& x = ctx.input(0).values();
    const auto& w = ctx.input(1).values();
    if (ctx.needs(0)) {
      auto ga = ctx.grad_in(0);
      for (std::size_t r = 0; r < rows; ++r) {
        const double* gr = g.data() + r * m;
        for (std::size_t i = 0; i < k; ++i) {
          const double* wi = w.data() + i * m;
          double acc = 0.0;
          for (std::size_t j = 0; j < m; ++j) acc += gr[j] * wi[j];
          ga[r * k + i] += acc;
        }
      }
    }
    if (ctx.needs(1)) {
      auto gb = ctx.grad_in(1);
      for (std::size_t r = 0; r < rows; ++r) {
        const double* gr = g.data() + r * m;
        for (std::size_t i = 0; i < k; ++i) {
          const double xi = x[r * k + i];
          double* gbi = gb.data() + i * m;
          for (std::size_t j = 0; j < m; ++j) gbi[j] += xi * gr[j];
        }
      }
    }
  });
}

Var exp(Var a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(Var a) {
  for (double v : a.value().values()) {
    if (!(v > 0.0)) throw DomainError("log: non-positive input " + std::to_string(v));
  }
  return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var reciprocal(Var a) {
  for (double v : a.value().values()) {
    if (v == 0.0) throw DomainError("reciprocal: zero input");
  }
  return unary(a, [](double x) { return 1.0 / x; }, [](double, double y) { return -y * y; });
}

Var relu(Var a) {
  return unary(a, [](double x) { return x > 0.0 ? x : 0.0; },
               [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

namespace {
double sigmoid_scalar(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}
double softplus_scalar(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
}  // namespace

Var sigmoid(Var a) {
  return unary(a, sigmoid_scalar, [](double, double y) { return y * (1.0 - y); });
}

Var softplus(Var a) {
  return unary(a, softplus_scalar, [](double x, double) { return sigmoid_scalar(x); });
}

Var silu(Var a) {
  return unary(a, [](double x) { return x * sigmoid_scalar(x); },
               [](double x, double) {
                 double s = sigmoid_scalar(x);
                 return s * (1.0 + x * (1.0 - s));
               });
}

Var softmax(Var a) {
  const auto& s = a.shape();
  if (s.empty()) throw ShapeError("softmax: rank-0 input");
  const std::size_t c = s.back();
  const std::size_t rows = shape_numel(s) / c;
  const auto& x = a.value().values();
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * c;
    double mx = *std::max_element(xr, xr + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += (out[r * c + j] = std::exp(xr[j] - mx));
    for (std::size_t j = 0; j < c; ++j) out[r * c + j] /= z;
  }
  return tape_of(a).record(Tensor(s, std::move(out)), {a}, [rows, c](BackwardCtx& ctx) {
    auto g = ctx.grad_out();
    auto gi = ctx.grad_in(0);
    const auto& y = ctx.output().values();
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += g[r * c + j] * y[r * c + j];
      for (std::size_t j = 0; j < c; ++j) gi[r * c + j] += y[r * c + j] * (g[r * c + j] - dot);
    }
  });
}

Var log_softmax(Var a) {
  const auto& s = a.shape();
  if (s.empty()) throw ShapeError("log_softmax: rank-0 input");
  const std::size_t c = s.back();
  const std::size_t rows = shape_numel(s) / c;
  const auto& x = a.value().values();
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * c;
    double mx = *std::max_element(xr, xr + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(xr[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < c; ++j) out[r * c + j] = xr[j] - lse;
  }
  return tape_of(a).record(Tensor(s, std::move(out)), {a}, [rows, c](BackwardCtx& ctx) {
    auto g = ctx.grad_out();
    auto gi = ctx.grad_in(0);
    const auto& y = ctx.output().values();
    for (std::size_t r = 0; r < rows; ++r) {
      double gsum = 0.0;
      for (std::size_t j = 0; j < c; ++j) gsum += g[r * c + j];
      for (std::size_t j = 0; j < c; ++j) gi[r * c + j] += g[r * c + j] - std::exp(y[r * c + j]) * gsum;
    }
  });
}

Var logsumexp(Var a) {
  const auto& s = a.shape();
  if (s.empty()) throw ShapeError("logsumexp: rank-0 input");
  const std::size_t c = s.back();
  const std::size_t rows = shape_numel(s) / c;
  const auto& x = a.value().values();
  std::vector<double> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * c;
    double mx = *std::max_element(xr, xr + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(xr[j] - mx);
    out[r] = mx + std::log(z);
  }
  Shape out_shape(s.begin(), s.end() - 1);
  return tape_of(a).record(Tensor(out_shape, std::move(out)), {a}, [rows, c](BackwardCtx& ctx) {
    auto g = ctx.grad_out();
    auto gi = ctx.grad_in(0);
    const auto& x = ctx.input(0).values();
    const auto& y = ctx.output().values();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < c; ++j) gi[r * c + j] += g[r] * std::exp(x[r * c + j] - y[r]);
  });
}

Var sum(Var a, std::size_t axis) {
  const auto& s = a.shape();
  const auto sp = split_axis(s, axis, "sum");
  Shape out_shape = s;
  out_shape.erase(out_shape.begin() + static_cast<long>(axis));
  const auto& x = a.value().values();
  std::vector<double> out(sp.outer * sp.inner, 0.0);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t l = 0; l < sp.len; ++l)
      for (std::size_t i = 0; i < sp.inner; ++i) out[o * sp.inner + i] += x[(o * sp.len + l) * sp.inner + i];
  return tape_of(a).record(Tensor(out_shape, std::move(out)), {a}, [sp](BackwardCtx& ctx) {
    auto g = ctx.grad_out();
    auto gi = ctx.grad_in(0);
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t l = 0; l < sp.len; ++l)
        for (std::size_t i = 0; i < sp.inner; ++i) gi[(o * sp.len + l) * sp.inner + i] += g[o * sp.inner + i];
  });
}

Var mean(Var a, std::size_t axis) {
  const auto n = split_axis(a.shape(), axis, "mean").len;
  return scale(sum(a, axis), 1.0 / static_cast<double>(n));
}

Var sum_all(Var a) {
  const auto& x = a.value().values();
  double total = 0.0;
  for (double v : x) total += v;
  return tape_of(a).record(Tensor::scalar(total), {a}, [](BackwardCtx& ctx) {
    const double g = ctx.grad_out()[0];
    for (auto& gi : ctx.grad_in(0)) gi += g;
  });
}

Var mean_all(Var a) { return scale(sum_all(a), 1.0 / static_cast<double>(a.value().size())); }

Var reshape(Var a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return tape_of(a).record(std::move(out), {a}, [](BackwardCtx& ctx) {
    auto g = ctx.grad_out();
    auto gi = ctx.grad_in(0);
    for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
  });
}

Var transpose(Var a) {
  const auto& s = a.shape();
  if (s.size() < 2) throw ShapeError("transpose: needs rank >= 2, got " + shape_str(s));
  const std::size_t r = s[s.size() - 2], c = s.back();
  const std::size_t batch = shape_numel(s) / (r * c);
  Shape out_shape = s;
  std::swap(out_shape[s.size() - 2], out_shape[s.size() - 1]);
  const auto& x = a.value().values();
  std::vector<double> out(x.size());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out[b * r * c + j * r + i] = x[b * r * c + i * c + j];
  return tape_of(a).record(Tensor(out_shape, std::move(out)), {a}, [batch, r, c](BackwardCtx& ctx) {
    auto g = ctx.grad_out();
    auto gi = ctx.grad_in(0);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gi[b * r * c + i * c + j] += g[b * r * c + j * r + i];
  });
}

Var concat(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  split_axis(s0, axis, "concat");
  std::vector<std::size_t> lens;
  std::size_t total = 0;
  for (const auto& p : parts) {
    const auto& s = p.shape();
    bool ok = s.size() == s0.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == s0[i];
    if (!ok) throw ShapeError("concat", s0, s);
    lens.push_back(s[axis]);
    total += s[axis];
  }
  Shape out_shape = s0;
  out_shape[axis] = total;
  const auto sp = split_axis(out_shape, axis, "concat");
  std::vector<double> out(shape_numel(out_shape));
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& x = parts[k].value().values();
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy_n(x.begin() + static_cast<long>(o * lens[k] * sp.inner), lens[k] * sp.inner,
                  out.begin() + static_cast<long>((o * total + offset) * sp.inner));
    offset += lens[k];
  }
  return tape_of(parts[0]).record(Tensor(out_shape, std::move(out)), parts, [sp, lens, total](BackwardCtx& ctx) {
    auto g = ctx.grad_out();
    std::size_t offset = 0;
    for (std::size_t k = 0; k < lens.size(); ++k) {
      if (ctx.needs(k)) {
        auto gi = ctx.grad_in(k);
        for (std::size_t o = 0; o < sp.outer; ++o)
          for (std::size_t e = 0; e < lens[k] * sp.inner; ++e)
            gi[o * lens[k] * sp.inner + e] += g[(o * total + offset) * sp.inner + e];
      }
      offset += lens[k];
    }
  });
}

Var slice(Var a, std::size_t axis, std::size_t begin, std::size_t end) {
  const auto sp = split_axis(a.shape(), axis, "slice");
  if (begin >= end || end > sp.len) {
    throw DomainError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                      ") invalid for axis of length " + std::to_string(sp.len));
  }
  std::vector<std::size_t> idx(end - begin);
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = begin + i;
  return gather(a, axis, std::move(idx));
}

Var gather(Var a, std::size_t axis, std::vector<std::size_t> indices) {
  const auto sp = split_axis(a.shape(), axis, "gather");
  if (indices.empty()) throw DomainError("gather: empty index list");
  for (auto i : indices) {
    if (i >= sp.len) {
      throw DomainError("gather: index " + std::to_string(i) + " out of range for axis of length " +
                        std::to_string(sp.len));
    }
  }
  Shape out_shape = a.shape();
  out_shape[axis] = indices.size();
  const std::size_t m = indices.size();
  const auto& x = a.value().values();
  std::vector<double> out(sp.outer * m * sp.inner);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t j = 0; j < m; ++j)
      std::copy_n(x.begin() + static_cast<long>((o * sp.len + indices[j]) * sp.inner), sp.inner,
                  out.begin() + static_cast<long>((o * m + j) * sp.inner));
  return tape_of(a).record(Tensor(out_shape, std::move(out)), {a},
                           [sp, m, idx = std::move(indices)](BackwardCtx& ctx) {
                             auto g = ctx.grad_out();
                             auto gi = ctx.grad_in(0);
                             for (std::size_t o = 0; o < sp.outer; ++o)
                               for (std::size_t j = 0; j < m; ++j)
                                 for (std::size_t i = 0; i < sp.inner; ++i)
                                   gi[(o * sp.len + idx[j]) * sp.inner + i] += g[(o * m + j) * sp.inner + i];
                           });
}

Var gather_batched(Var a, std::vector<std::size_t> indices, std::size_t out_len) {
  const auto& s = a.shape();
  if (s.size() < 2) throw ShapeError("gather_batched: needs rank >= 2, got " + shape_str(s));
  const std::size_t batch = s[0], len = s[1];
  const std::size_t inner = shape_numel(s) / (batch * len);
  if (indices.size() != batch * out_len) {
    throw ShapeError("gather_batched: expected " + std::to_string(batch * out_len) + " indices, got " +
                     std::to_string(indices.size()));
  }
  for (auto i : indices) {
    if (i >= len) throw DomainError("gather_batched: index " + std::to_string(i) + " out of range");
  }
  Shape out_shape = s;
  out_shape[1] = out_len;
  const auto& x = a.value().values();
  std::vector<double> out(batch * out_len * inner);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t j = 0; j < out_len; ++j)
      std::copy_n(x.begin() + static_cast<long>((b * len + indices[b * out_len + j]) * inner), inner,
                  out.begin() + static_cast<long>((b * out_len + j) * inner));
  return tape_of(a).record(Tensor(out_shape, std::move(out)), {a},
                           [batch, len, inner, out_len, idx = std::move(indices)](BackwardCtx& ctx) {
                             auto g = ctx.grad_out();
                             auto gi = ctx.grad_in(0);
                             for (std::size_t b = 0; b < batch; ++b)
                               for (std::size_t j = 0; j < out_len; ++j)
                                 for (std::size_t i = 0; i < inner; ++i)
                                   gi[(b * len + idx[b * out_len + j]) * inner + i] +=
                                       g[(b * out_len + j) * inner + i];
                           });
}

Var reverse(Var a, std::size_t axis) {
  const auto sp = split_axis(a.shape(), axis, "reverse");
  std::vector<std::size_t> idx(sp.len);
  for (std::size_t i = 0; i < sp.len; ++i) idx[i] = sp.len - 1 - i;
  return gather(a, axis, std::move(idx));
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  const auto& s = x.shape();
  if (s.empty()) throw ShapeError("layer_norm: rank-0 input");
  const std::size_t f = s.back();
  if (gamma.shape() != Shape{f}) throw ShapeError("layer_norm(gamma)", s, gamma.shape());
  if (beta.shape() != Shape{f}) throw ShapeError("layer_norm(beta)", s, beta.shape());
  const std::size_t rows = shape_numel(s) / f;
  const auto& xv = x.value().values();
  const auto& gv = gamma.value().values();
  const auto& bv = beta.value().values();
  std::vector<double> out(xv.size()), xhat(xv.size()), inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * f;
    double mu = 0.0;
    for (std::size_t j = 0; j < f; ++j) mu += xr[j];
    mu /= static_cast<double>(f);
    double var = 0.0;
    for (std::size_t j = 0; j < f; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(f);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < f; ++j) {
      xhat[r * f + j] = (xr[j] - mu) * inv_std[r];
      out[r * f + j] = xhat[r * f + j] * gv[j] + bv[j];
    }
  }
  return tape_of(x).record(
      Tensor(s, std::move(out)), {x, gamma, beta},
      [rows, f, xhat = std::move(xhat), inv_std = std::move(inv_std)](BackwardCtx& ctx) {
        auto g = ctx.grad_out();
        const auto& gv = ctx.input(1).values();
        if (ctx.needs(0)) {
          auto gx = ctx.grad_in(0);
          const double nf = static_cast<double>(f);
          for (std::size_t r = 0; r < rows; ++r) {
            double s1 = 0.0, s2 = 0.0;
            for (std::size_t j = 0; j < f; ++j) {
              double gh = g[r * f + j] * gv[j];
              s1 += gh;
              s2 += gh * xhat[r * f + j];
            }
            for (std::size_t j = 0; j < f; ++j) {
              double gh = g[r * f + j] * gv[j];
              gx[r * f + j] += inv_std[r] * (gh - s1 / nf - xhat[r * f + j] * s2 / nf);
            }
          }
        }
        if (ctx.needs(1)) {
          auto gg = ctx.grad_in(1);
          for (std::size_t i = 0; i < g.size(); ++i) gg[i % f] += g[i] * xhat[i];
        }
        if (ctx.needs(2)) {
          auto gb = ctx.grad_in(2);
          for (std::size_t i = 0; i < g.size(); ++i) gb[i % f] += g[i];
        }
      });
}

Var batch_norm_train(Var x, Var gamma, Var beta, double eps) {
  const auto& s = x.shape();
  if (s.size() != 2) throw ShapeError("batch_norm: expected [B,F], got " + shape_str(s));
  const std::size_t b = s[0], f = s[1];
  if (gamma.shape() != Shape{f}) throw ShapeError("batch_norm(gamma)", s, gamma.shape());
  if (beta.shape() != Shape{f}) throw ShapeError("batch_norm(beta)", s, beta.shape());
  const auto& xv = x.value().values();
  const auto& gv = gamma.value().values();
  const auto& bv = beta.value().values();
  std::vector<double> out(xv.size()), xhat(xv.size()), inv_std(f);
  for (std::size_t j = 0; j < f; ++j) {
    double mu = 0.0;
    for (std::size_t i = 0; i < b; ++i) mu += xv[i * f + j];
    mu /= static_cast<double>(b);
    double var = 0.0;
    for (std::size_t i = 0; i < b; ++i) var += (xv[i * f + j] - mu) * (xv[i * f + j] - mu);
    var /= static_cast<double>(b);
    inv_std[j] = 1.0 / std::sqrt(var + eps);
    for (std::size_t i = 0; i < b; ++i) {
      xhat[i * f + j] = (xv[i * f + j] - mu) * inv_std[j];
      out[i * f + j] = xhat[i * f + j] * gv[j] + bv[j];
    }
  }
  return tape_of(x).record(
      Tensor(s, std::move(out)), {x, gamma, beta},
      [b, f, xhat = std::move(xhat), inv_std = std::move(inv_std)](BackwardCtx& ctx) {
        auto g = ctx.grad_out();
        const auto& gv = ctx.input(1).values();
        const double nb = static_cast<double>(b);
        if (ctx.needs(0)) {
          auto gx = ctx.grad_in(0);
          for (std::size_t j = 0; j < f; ++j) {
            double s1 = 0.0, s2 = 0.0;
            for (std::size_t i = 0; i < b; ++i) {
              s1 += g[i * f + j];
              s2 += g[i * f + j] * xhat[i * f + j];
            }
            for (std::size_t i = 0; i < b; ++i) {
              gx[i * f + j] += gv[j] * inv_std[j] * (g[i * f + j] - s1 / nb - xhat[i * f + j] * s2 / nb);
            }
          }
        }
        if (ctx.needs(1)) {
          auto gg = ctx.grad_in(1);
          for (std::size_t i = 0; i < g.size(); ++i) gg[i % f] += g[i] * xhat[i];
        }
        if (ctx.needs(2)) {
          auto gb = ctx.grad_in(2);
          for (std::size_t i = 0; i < g.size(); ++i) gb[i % f] += g[i];
        }
      });
}

}  // namespace ad
}  // namespace sfm
