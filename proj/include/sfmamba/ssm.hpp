#pragma once

#include <array>
#include <cstddef>
#include <vector>

#include "sfmamba/autodiff.hpp"
#include "sfmamba/rng.hpp"
#include "sfmamba/tensor.hpp"

namespace sfm::ssm {

struct Discretized {
  double a_bar;
  double b_bar;
};

/// Zero-order hold for the state transition, Euler step for the input map:
/// a_bar = exp(delta * a), b_bar = delta * b. Requires delta > 0.
Discretized discretize_zoh(double a, double b, double delta);

/// Learnable parameters of one scan direction. `inner` channels each carry a diagonal
/// state of size `state`; A = -exp(a_log) is negative by construction and
/// delta = softplus(u * w_delta + b_delta) is positive.
struct SsmParams {
  Tensor a_log;    // [E, N]
  Tensor d_skip;   // [E]
  Tensor w_delta;  // [E, E]
  Tensor b_delta;  // [E]
  Tensor w_b;      // [E, N]
  Tensor w_c;      // [E, N]

  [[nodiscard]] std::size_t inner() const { return d_skip.size(); }
  [[nodiscard]] std::size_t state() const { return a_log.dim(1); }

  /// a_log = log(1..N) per channel, d_skip = 1, delta bias drawn so initial
  /// softplus(b_delta) is log-uniform in [1e-3, 1e-1].
  static SsmParams init(std::size_t inner, std::size_t state, Rng& rng);
};

/// Per-step quantities after projection, for one sequence of length T.
struct ScanInputs {
  Tensor u;      // [T, E]
  Tensor delta;  // [T, E], > 0
  Tensor b;      // [T, N]
  Tensor c;      // [T, N]
  Tensor a;      // [E, N], < 0
  Tensor d;      // [E]
};

ScanInputs project(const Tensor& u, const SsmParams& p);

/// Step-by-step recurrence h_t = a_bar_t h_{t-1} + b_bar_t u_t, y_t = <c_t, h_t> + d u_t.
/// When `states` is non-null it receives h_t for every step, laid out [T, E, N].
Tensor scan_seq(const ScanInputs& in, std::vector<double>* states = nullptr);

/// Same output via a balanced prefix tree over the affine maps (a, b) per channel,
/// composed as (a2, b2) o (a1, b1) = (a2 a1, a2 b1 + b2).
Tensor scan_assoc(const ScanInputs& in);

/// In-place inclusive prefix composition of affine pairs; fixed tree shape.
void affine_prefix_scan(std::vector<double>& a, std::vector<double>& b);

Tensor selective_scan_seq(const Tensor& u, const SsmParams& p);
Tensor selective_scan_assoc(const Tensor& u, const SsmParams& p);

struct ScanGrads {
  Tensor u, delta, b, c, a, d;
};

/// Adjoint of scan_seq: runs the recurrence in reverse time using the saved states.
ScanGrads scan_backward(const Tensor& upstream, const ScanInputs& in, const std::vector<double>& states);

/// y = scan_fwd(u) + reverse(scan_bwd(reverse(u))).
Tensor bidirectional_scan(const Tensor& u, const SsmParams& fwd, const SsmParams& bwd);

/// The four traversal orders of an H x W grid (positions numbered row-major):
/// row-major, column-major, reversed row-major, reversed column-major.
std::array<std::vector<std::size_t>, 4> cross_scan_routes(std::size_t h, std::size_t w);
std::vector<std::size_t> inverse_permutation(const std::vector<std::size_t>& perm);

/// X is [D, H, W]; each route is returned as a [H*W, D] token sequence.
std::array<Tensor, 4> cross_scan_2d(const Tensor& x);
/// Inverse-permutes each [H*W, D] route to grid order and sums; returns [D, H, W].
Tensor cross_merge_2d(const std::array<Tensor, 4>& routes, std::size_t h, std::size_t w);

enum class ScanKind { Sequential, Associative };

/// Tape-bound parameters of one scan direction.
struct SsmVars {
  Var a_log, d_skip, w_delta, b_delta, w_b, w_c;
};

SsmVars bind_leaves(Tape& tape, const SsmParams& p);

/// Differentiable selective scan over u: [B, T, E] (or [T, E]). Projections are ordinary
/// tape ops; the recurrence is one fused node whose backward is scan_backward.
Var selective_scan(Var u, const SsmVars& p, ScanKind kind = ScanKind::Sequential);

/// Fused recurrence on already-projected inputs, all batched along axis 0 when rank 3.
Var scan_core(Var u, Var delta, Var a_log, Var b, Var c, Var d_skip, ScanKind kind = ScanKind::Sequential);

/// Bidirectional scan along the sequence axis (axis rank-2) of u.
Var bidirectional_scan(Var u, const SsmVars& fwd, const SsmVars& bwd);

}  // namespace sfm::ssm
