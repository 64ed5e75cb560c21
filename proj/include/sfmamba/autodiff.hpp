#pragma once

#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "sfmamba/tensor.hpp"

namespace sfm {

class Tape;

/// Handle to a tensor recorded on a Tape.
class Var {
 public:
  Var() = default;

  [[nodiscard]] const Tensor& value() const;
  [[nodiscard]] const Shape& shape() const { return value().shape(); }
  [[nodiscard]] int id() const { return id_; }
  [[nodiscard]] Tape* tape() const { return tape_; }
  [[nodiscard]] bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  int id_ = -1;
};

/// Passed to a node's backward rule: read the output gradient, accumulate into inputs.
class BackwardCtx {
 public:
  [[nodiscard]] std::span<const double> grad_out() const { return grad_out_; }
  [[nodiscard]] bool needs(std::size_t slot) const;
  /// Zero-initialised on first access; rules must add, never assign.
  [[nodiscard]] std::span<double> grad_in(std::size_t slot);
  [[nodiscard]] const Tensor& input(std::size_t slot) const;
  [[nodiscard]] const Tensor& output() const;

 private:
  friend class Tape;
  BackwardCtx(Tape& tape, int node, std::span<const double> grad_out)
      : tape_(tape), node_(node), grad_out_(grad_out) {}

  Tape& tape_;
  int node_;
  std::span<const double> grad_out_;
};

using BackwardFn = std::function<void(BackwardCtx&)>;

/// Leaf id to gradient. Every leaf on the tape is present; unreachable leaves hold zeros.
class Gradients {
 public:
  [[nodiscard]] const Tensor& operator[](Var leaf) const { return at(leaf.id()); }
  [[nodiscard]] const Tensor& at(int leaf_id) const;
  [[nodiscard]] bool contains(int leaf_id) const { return grads_.count(leaf_id) != 0; }
  [[nodiscard]] const std::map<int, Tensor>& all() const { return grads_; }

 private:
  friend class Tape;
  std::map<int, Tensor> grads_;
};

/// Reverse-mode record. Nodes are appended in evaluation order, so ids are a topological
/// order. Single-threaded; one tape per step.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value);
  Var constant(Tensor value);
  Var record(Tensor value, std::vector<Var> inputs, BackwardFn backward);

  [[nodiscard]] const Tensor& value(int id) const { return nodes_.at(id).value; }
  [[nodiscard]] bool requires_grad(Var v) const { return nodes_.at(v.id()).requires_grad; }
  [[nodiscard]] std::size_t size() const { return nodes_.size(); }
  [[nodiscard]] const std::vector<int>& leaves() const { return leaves_; }

  /// Accumulates d(loss)/d(node) by summation over all paths in reverse tape order.
  Gradients backward(Var loss);

 private:
  friend class BackwardCtx;

  struct Node {
    Tensor value;
    std::vector<int> inputs;
    BackwardFn backward;
    bool requires_grad = false;
  };

  std::vector<double>& grad_buffer(int id);

  std::vector<Node> nodes_;
  std::vector<int> leaves_;
  std::vector<std::vector<double>> grads_;
};

/// Differentiable operations. Binary elementwise ops accept equal shapes or a trailing-suffix
/// broadcast (e.g. [B,T,D] with [D]); anything else is a ShapeError.
namespace ad {

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double c);
Var add_scalar(Var a, double c);

/// [..., K] x [K, M] -> [..., M]; [..., K] x [K] -> [...].
Var matmul(Var a, Var b);

Var exp(Var a);
Var log(Var a);
Var reciprocal(Var a);
Var relu(Var a);
Var sigmoid(Var a);
Var softplus(Var a);
Var silu(Var a);

Var softmax(Var a);
Var log_softmax(Var a);
/// log(sum(exp(a))) over the last axis, which is dropped.
Var logsumexp(Var a);

Var sum(Var a, std::size_t axis);
Var mean(Var a, std::size_t axis);
Var sum_all(Var a);
Var mean_all(Var a);

Var reshape(Var a, Shape shape);
/// Swaps the last two axes.
Var transpose(Var a);
Var concat(const std::vector<Var>& parts, std::size_t axis);
Var slice(Var a, std::size_t axis, std::size_t begin, std::size_t end);
/// Selects entries along `axis`; indices may repeat.
Var gather(Var a, std::size_t axis, std::vector<std::size_t> indices);
/// Per-batch gather along axis 1 of a [B, T, ...] tensor; `indices` is [B][T'] flattened.
Var gather_batched(Var a, std::vector<std::size_t> indices, std::size_t out_len);
Var reverse(Var a, std::size_t axis);

/// Normalises over the last axis, then applies gamma/beta of shape [F].
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
/// Normalises [B, F] over the batch axis with the batch's own statistics.
Var batch_norm_train(Var x, Var gamma, Var beta, double eps = 1e-5);

}  // namespace ad

}  // namespace sfm
