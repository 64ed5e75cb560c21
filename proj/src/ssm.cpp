#include "sfmamba/ssm.hpp"

#include <cmath>

namespace sfm::ssm {

namespace {

double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

Tensor reverse_rows(const Tensor& x) {
  const std::size_t t = x.dim(0), e = x.size() / t;
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = 0; j < e; ++j) out[(t - 1 - i) * e + j] = x[i * e + j];
  return Tensor(x.shape(), std::move(out));
}

void check_inputs(const ScanInputs& in) {
  if (in.u.rank() != 2) throw ShapeError("scan: u must be [T, E], got " + shape_str(in.u.shape()));
  const std::size_t t = in.u.dim(0), e = in.u.dim(1);
  const std::size_t n = in.a.dim(1);
  if (in.delta.shape() != in.u.shape()) throw ShapeError("scan(delta)", in.u.shape(), in.delta.shape());
  if (in.a.shape() != Shape{e, n}) throw ShapeError("scan(A)", Shape{e, n}, in.a.shape());
  if (in.b.shape() != Shape{t, n}) throw ShapeError("scan(B)", Shape{t, n}, in.b.shape());
  if (in.c.shape() != Shape{t, n}) throw ShapeError("scan(C)", Shape{t, n}, in.c.shape());
  if (in.d.shape() != Shape{e}) throw ShapeError("scan(D)", Shape{e}, in.d.shape());
}

Tensor readout(const ScanInputs& in, const std::vector<double>& states) {
  const std::size_t t_len = in.u.dim(0), e_len = in.u.dim(1), n_len = in.a.dim(1);
  const auto& u = in.u.values();
  const auto& c = in.c.values();
  const auto& d = in.d.values();
  std::vector<double> y(t_len * e_len);
  for (std::size_t t = 0; t < t_len; ++t)
    for (std::size_t e = 0; e < e_len; ++e) {
      const double* h = states.data() + (t * e_len + e) * n_len;
      double acc = d[e] * u[t * e_len + e];
      for (std::size_t n = 0; n < n_len; ++n) acc += c[t * n_len + n] * h[n];
      y[t * e_len + e] = acc;
    }
  return Tensor({t_len, e_len}, std::move(y));
}

struct Trace {
  std::vector<double> h;      // [T, E, N]
  std::vector<double> a_bar;  // [T, E, N]
};

Trace states_seq(const ScanInputs& in) {
  check_inputs(in);
  const std::size_t t_len = in.u.dim(0), e_len = in.u.dim(1), n_len = in.a.dim(1);
  const auto& u = in.u.values();
  const auto& dl = in.delta.values();
  const auto& a = in.a.values();
  const auto& b = in.b.values();
  Trace tr{std::vector<double>(t_len * e_len * n_len), std::vector<double>(t_len * e_len * n_len)};
  for (std::size_t t = 0; t < t_len; ++t)
    for (std::size_t e = 0; e < e_len; ++e) {
      const double delta = dl[t * e_len + e];
      const double du = delta * u[t * e_len + e];
      double* ht = tr.h.data() + (t * e_len + e) * n_len;
      double* at = tr.a_bar.data() + (t * e_len + e) * n_len;
      const double* hp = t > 0 ? tr.h.data() + ((t - 1) * e_len + e) * n_len : nullptr;
      for (std::size_t n = 0; n < n_len; ++n) {
        at[n] = std::exp(delta * a[e * n_len + n]);
        ht[n] = (hp ? at[n] * hp[n] : 0.0) + du * b[t * n_len + n];
      }
    }
  return tr;
}

Trace states_assoc(const ScanInputs& in) {
  check_inputs(in);
  const std::size_t t_len = in.u.dim(0), e_len = in.u.dim(1), n_len = in.a.dim(1);
  const auto& u = in.u.values();
  const auto& dl = in.delta.values();
  const auto& a = in.a.values();
  const auto& b = in.b.values();
  Trace tr{std::vector<double>(t_len * e_len * n_len), std::vector<double>(t_len * e_len * n_len)};
  std::vector<double> ca(t_len), cb(t_len);
  for (std::size_t e = 0; e < e_len; ++e)
    for (std::size_t n = 0; n < n_len; ++n) {
      for (std::size_t t = 0; t < t_len; ++t) {
        const double delta = dl[t * e_len + e];
        ca[t] = std::exp(delta * a[e * n_len + n]);
        cb[t] = delta * b[t * n_len + n] * u[t * e_len + e];
        tr.a_bar[(t * e_len + e) * n_len + n] = ca[t];
      }
      affine_prefix_scan(ca, cb);
      for (std::size_t t = 0; t < t_len; ++t) tr.h[(t * e_len + e) * n_len + n] = cb[t];
    }
  return tr;
}

ScanGrads backward_impl(const Tensor& upstream, const ScanInputs& in, const std::vector<double>& states,
                        const std::vector<double>* a_bars);

}  // namespace

Discretized discretize_zoh(double a, double b, double delta) {
  if (!(delta > 0.0)) throw DomainError("discretize_zoh: step must be positive, got " + std::to_string(delta));
  return {std::exp(delta * a), delta * b};
}

SsmParams SsmParams::init(std::size_t inner, std::size_t state, Rng& rng) {
  SsmParams p;
  std::vector<double> a_log(inner * state);
  for (std::size_t e = 0; e < inner; ++e)
    for (std::size_t n = 0; n < state; ++n) a_log[e * state + n] = std::log(static_cast<double>(n + 1));
  p.a_log = Tensor({inner, state}, std::move(a_log));
  p.d_skip = Tensor::full({inner}, 1.0);
  const double bound = 1.0 / std::sqrt(static_cast<double>(inner));
  auto uniform_matrix = [&](std::size_t rows, std::size_t cols) {
    std::vector<double> w(rows * cols);
    for (auto& v : w) v = rng.uniform(-bound, bound);
    return Tensor({rows, cols}, std::move(w));
  };
  p.w_delta = uniform_matrix(inner, inner);
  std::vector<double> bias(inner);
  for (auto& v : bias) {
    const double dt = std::exp(rng.uniform(std::log(1e-3), std::log(1e-1)));
    v = dt + std::log(-std::expm1(-dt));  // inverse softplus
  }
  p.b_delta = Tensor({inner}, std::move(bias));
  p.w_b = uniform_matrix(inner, state);
  p.w_c = uniform_matrix(inner, state);
  return p;
}

ScanInputs project(const Tensor& u, const SsmParams& p) {
  if (u.rank() != 2 || u.dim(1) != p.inner()) throw ShapeError("project", u.shape(), p.d_skip.shape());
  const std::size_t t_len = u.dim(0), e_len = p.inner(), n_len = p.state();
  const auto& x = u.values();
  std::vector<double> delta(t_len * e_len), b(t_len * n_len, 0.0), c(t_len * n_len, 0.0);
  for (std::size_t t = 0; t < t_len; ++t) {
    for (std::size_t j = 0; j < e_len; ++j) {
      double acc = p.b_delta[j];
      for (std::size_t i = 0; i < e_len; ++i) acc += x[t * e_len + i] * p.w_delta[i * e_len + j];
      delta[t * e_len + j] = softplus(acc);
    }
    for (std::size_t i = 0; i < e_len; ++i)
      for (std::size_t n = 0; n < n_len; ++n) {
        b[t * n_len + n] += x[t * e_len + i] * p.w_b[i * n_len + n];
        c[t * n_len + n] += x[t * e_len + i] * p.w_c[i * n_len + n];
      }
  }
  std::vector<double> a(p.a_log.size());
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = -std::exp(p.a_log[i]);
  return {u,
          Tensor({t_len, e_len}, std::move(delta)),
          Tensor({t_len, n_len}, std::move(b)),
          Tensor({t_len, n_len}, std::move(c)),
          Tensor(p.a_log.shape(), std::move(a)),
          p.d_skip};
}

void affine_prefix_scan(std::vector<double>& a, std::vector<double>& b) {
  const std::size_t n = a.size();
  if (n <= 1) return;
  const std::size_t half = n / 2;
  std::vector<double> ra(half), rb(half);
  for (std::size_t i = 0; i < half; ++i) {
    ra[i] = a[2 * i + 1] * a[2 * i];
    rb[i] = a[2 * i + 1] * b[2 * i] + b[2 * i + 1];
  }
  affine_prefix_scan(ra, rb);
  // ra[i], rb[i] now hold the prefix through element 2i+1.
  for (std::size_t i = 1; 2 * i < n; ++i) {
    const double ea = a[2 * i], eb = b[2 * i];
    a[2 * i] = ea * ra[i - 1];
    b[2 * i] = ea * rb[i - 1] + eb;
  }
  for (std::size_t i = 0; i < half; ++i) {
    a[2 * i + 1] = ra[i];
    b[2 * i + 1] = rb[i];
  }
}

Tensor scan_seq(const ScanInputs& in, std::vector<double>* states) {
  if (in.u.size() == 0 || in.u.rank() != 2) throw DomainError("scan: empty sequence");
  auto tr = states_seq(in);
  Tensor y = readout(in, tr.h);
  if (states) *states = std::move(tr.h);
  return y;
}

Tensor scan_assoc(const ScanInputs& in) { return readout(in, states_assoc(in).h); }

Tensor selective_scan_seq(const Tensor& u, const SsmParams& p) { return scan_seq(project(u, p)); }

Tensor selective_scan_assoc(const Tensor& u, const SsmParams& p) { return scan_assoc(project(u, p)); }

ScanGrads scan_backward(const Tensor& upstream, const ScanInputs& in, const std::vector<double>& states) {
  return backward_impl(upstream, in, states, nullptr);
}

namespace {

ScanGrads backward_impl(const Tensor& upstream, const ScanInputs& in, const std::vector<double>& states,
                        const std::vector<double>* a_bars) {
  check_inputs(in);
  if (upstream.shape() != in.u.shape()) throw ShapeError("scan_backward", in.u.shape(), upstream.shape());
  const std::size_t t_len = in.u.dim(0), e_len = in.u.dim(1), n_len = in.a.dim(1);
  const auto& gy = upstream.values();
  const auto& u = in.u.values();
  const auto& dl = in.delta.values();
  const auto& a = in.a.values();
  const auto& b = in.b.values();
  const auto& c = in.c.values();
  const auto& d = in.d.values();
  std::vector<double> gu(t_len * e_len, 0.0), gdelta(t_len * e_len, 0.0), gb(t_len * n_len, 0.0),
      gc(t_len * n_len, 0.0), ga(e_len * n_len, 0.0), gd(e_len, 0.0), carry(e_len * n_len, 0.0);
  for (std::size_t t = t_len; t-- > 0;) {
    for (std::size_t e = 0; e < e_len; ++e) {
      const std::size_t te = t * e_len + e;
      const double g = gy[te];
      const double delta = dl[te];
      gd[e] += g * u[te];
      gu[te] += g * d[e];
      const double* h = states.data() + te * n_len;
      const double* hp = t > 0 ? states.data() + ((t - 1) * e_len + e) * n_len : nullptr;
      for (std::size_t n = 0; n < n_len; ++n) {
        const std::size_t en = e * n_len + n;
        const std::size_t tn = t * n_len + n;
        const double gh = g * c[tn] + carry[en];
        gc[tn] += g * h[n];
        const double a_bar = a_bars ? (*a_bars)[te * n_len + n] : std::exp(delta * a[en]);
        const double g_abar = hp ? gh * hp[n] : 0.0;
        gdelta[te] += g_abar * a_bar * a[en] + gh * b[tn] * u[te];
        ga[en] += g_abar * a_bar * delta;
        gb[tn] += gh * delta * u[te];
        gu[te] += gh * delta * b[tn];
        carry[en] = gh * a_bar;
      }
    }
  }
  return {Tensor(in.u.shape(), std::move(gu)), Tensor(in.u.shape(), std::move(gdelta)),
          Tensor(in.b.shape(), std::move(gb)), Tensor(in.c.shape(), std::move(gc)),
          Tensor(in.a.shape(), std::move(ga)), Tensor(in.d.shape(), std::move(gd))};
}

}  // namespace

Tensor bidirectional_scan(const Tensor& u, const SsmParams& fwd, const SsmParams& bwd) {
  Tensor yf = selective_scan_seq(u, fwd);
  Tensor yb = reverse_rows(selective_scan_seq(reverse_rows(u), bwd));
  std::vector<double> out(yf.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = yf[i] + yb[i];
  return Tensor(u.shape(), std::move(out));
}

std::array<std::vector<std::size_t>, 4> cross_scan_routes(std::size_t h, std::size_t w) {
  if (h == 0 || w == 0) throw DomainError("cross_scan_routes: empty grid");
  std::array<std::vector<std::size_t>, 4> r;
  for (std::size_t p = 0; p < h * w; ++p) r[0].push_back(p);
  for (std::size_t col = 0; col < w; ++col)
    for (std::size_t row = 0; row < h; ++row) r[1].push_back(row * w + col);
  r[2].assign(r[0].rbegin(), r[0].rend());
  r[3].assign(r[1].rbegin(), r[1].rend());
  return r;
}

std::vector<std::size_t> inverse_permutation(const std::vector<std::size_t>& perm) {
  std::vector<std::size_t> inv(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) inv.at(perm[i]) = i;
  return inv;
}

std::array<Tensor, 4> cross_scan_2d(const Tensor& x) {
  if (x.rank() != 3) throw ShapeError("cross_scan_2d: expected [D,H,W], got " + shape_str(x.shape()));
  const std::size_t d_len = x.dim(0), h = x.dim(1), w = x.dim(2), hw = h * w;
  const auto routes = cross_scan_routes(h, w);
  std::array<Tensor, 4> out;
  for (std::size_t k = 0; k < 4; ++k) {
    std::vector<double> seq(hw * d_len);
    for (std::size_t t = 0; t < hw; ++t)
      for (std::size_t d = 0; d < d_len; ++d) seq[t * d_len + d] = x[d * hw + routes[k][t]];
    out[k] = Tensor({hw, d_len}, std::move(seq));
  }
  return out;
}

Tensor cross_merge_2d(const std::array<Tensor, 4>& routes, std::size_t h, std::size_t w) {
  const std::size_t hw = h * w;
  const auto order = cross_scan_routes(h, w);
  const Shape& s0 = routes[0].shape();
  if (s0.size() != 2 || s0[0] != hw) throw ShapeError("cross_merge_2d", Shape{hw, 0}, s0);
  const std::size_t d_len = s0[1];
  std::vector<double> out(d_len * hw, 0.0);
  for (std::size_t k = 0; k < 4; ++k) {
    if (routes[k].shape() != s0) throw ShapeError("cross_merge_2d", s0, routes[k].shape());
    for (std::size_t t = 0; t < hw; ++t)
      for (std::size_t d = 0; d < d_len; ++d) out[d * hw + order[k][t]] += routes[k][t * d_len + d];
  }
  return Tensor({d_len, h, w}, std::move(out));
}

SsmVars bind_leaves(Tape& tape, const SsmParams& p) {
  return {tape.leaf(p.a_log), tape.leaf(p.d_skip), tape.leaf(p.w_delta),
          tape.leaf(p.b_delta), tape.leaf(p.w_b), tape.leaf(p.w_c)};
}

Var scan_core(Var u, Var delta, Var a_log, Var b, Var c, Var d_skip, ScanKind kind) {
  const Shape& su = u.shape();
  if (su.size() != 2 && su.size() != 3) throw ShapeError("scan: u must be [T,E] or [B,T,E], got " + shape_str(su));
  const bool batched = su.size() == 3;
  const std::size_t batch = batched ? su[0] : 1;
  const std::size_t t_len = su[su.size() - 2], e_len = su.back();
  const std::size_t n_len = a_log.shape().at(1);
  if (delta.shape() != su) throw ShapeError("scan(delta)", su, delta.shape());
  Shape sbc = batched ? Shape{batch, t_len, n_len} : Shape{t_len, n_len};
  if (b.shape() != sbc) throw ShapeError("scan(B)", sbc, b.shape());
  if (c.shape() != sbc) throw ShapeError("scan(C)", sbc, c.shape());

  std::vector<double> a(a_log.value().size());
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = -std::exp(a_log.value()[i]);
  const Tensor a_t(a_log.shape(), std::move(a));

  auto slice_of = [](const Tensor& x, std::size_t i, std::size_t rows, std::size_t cols) {
    auto first = x.values().begin() + static_cast<long>(i * rows * cols);
    return Tensor({rows, cols}, std::vector<double>(first, first + static_cast<long>(rows * cols)));
  };

  std::vector<ScanInputs> inputs;
  std::vector<Trace> traces;
  std::vector<double> y;
  y.reserve(batch * t_len * e_len);
  for (std::size_t i = 0; i < batch; ++i) {
    ScanInputs in{slice_of(u.value(), i, t_len, e_len), slice_of(delta.value(), i, t_len, e_len),
                  slice_of(b.value(), i, t_len, n_len), slice_of(c.value(), i, t_len, n_len), a_t,
                  d_skip.value()};
    auto tr = kind == ScanKind::Sequential ? states_seq(in) : states_assoc(in);
    Tensor yi = readout(in, tr.h);
    y.insert(y.end(), yi.values().begin(), yi.values().end());
    inputs.push_back(std::move(in));
    traces.push_back(std::move(tr));
  }

  return u.tape()->record(
      Tensor(su, std::move(y)), {u, delta, a_log, b, c, d_skip},
      [inputs = std::move(inputs), traces = std::move(traces), a_t, t_len, e_len, n_len](BackwardCtx& ctx) {
        auto g = ctx.grad_out();
        std::vector<double> ga(e_len * n_len, 0.0), gd(e_len, 0.0);
        for (std::size_t i = 0; i < inputs.size(); ++i) {
          Tensor up({t_len, e_len}, std::vector<double>(g.begin() + static_cast<long>(i * t_len * e_len),
                                                        g.begin() + static_cast<long>((i + 1) * t_len * e_len)));
          auto gr = backward_impl(up, inputs[i], traces[i].h, &traces[i].a_bar);
          auto add_block = [&](std::size_t slot, const Tensor& src, std::size_t block) {
            if (!ctx.needs(slot)) return;
            auto dst = ctx.grad_in(slot);
            for (std::size_t j = 0; j < src.size(); ++j) dst[i * block + j] += src[j];
          };
          add_block(0, gr.u, t_len * e_len);
          add_block(1, gr.delta, t_len * e_len);
          add_block(3, gr.b, t_len * n_len);
          add_block(4, gr.c, t_len * n_len);
          for (std::size_t j = 0; j < ga.size(); ++j) ga[j] += gr.a[j];
          for (std::size_t j = 0; j < gd.size(); ++j) gd[j] += gr.d[j];
        }
        if (ctx.needs(2)) {
          auto gl = ctx.grad_in(2);
          for (std::size_t j = 0; j < ga.size(); ++j) gl[j] += ga[j] * a_t[j];  // dA/da_log = A
        }
        if (ctx.needs(5)) {
          auto gs = ctx.grad_in(5);
          for (std::size_t j = 0; j < gd.size(); ++j) gs[j] += gd[j];
        }
      });
}

Var selective_scan(Var u, const SsmVars& p, ScanKind kind) {
  Var delta = ad::softplus(ad::add(ad::matmul(u, p.w_delta), p.b_delta));
  Var b = ad::matmul(u, p.w_b);
  Var c = ad::matmul(u, p.w_c);
  return scan_core(u, delta, p.a_log, b, c, p.d_skip, kind);
}

Var bidirectional_scan(Var u, const SsmVars& fwd, const SsmVars& bwd) {
  const std::size_t axis = u.shape().size() - 2;
  Var yf = selective_scan(u, fwd);
  Var yb = ad::reverse(selective_scan(ad::reverse(u, axis), bwd), axis);
  return ad::add(yf, yb);
}

}  // namespace sfm::ssm
