#include <algorithm>
#include <chrono>
#include <cmath>

#include "doctest.h"
#include "sfmamba/ssm.hpp"
#include "test_util.hpp"

using namespace sfm;
using namespace sfm::ssm;
using sfm::testing::random_tensor;

namespace {

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// Straight from the definitions: project, discretize per step, recur, read out.
Tensor naive_scan(const Tensor& u, const SsmParams& p) {
  const std::size_t t_len = u.dim(0), e_len = p.inner(), n_len = p.state();
  std::vector<double> y(t_len * e_len);
  std::vector<std::vector<double>> h(e_len, std::vector<double>(n_len, 0.0));
  for (std::size_t t = 0; t < t_len; ++t) {
    std::vector<double> bt(n_len, 0.0), ct(n_len, 0.0);
    for (std::size_t n = 0; n < n_len; ++n)
      for (std::size_t i = 0; i < e_len; ++i) {
        bt[n] += u[t * e_len + i] * p.w_b[i * n_len + n];
        ct[n] += u[t * e_len + i] * p.w_c[i * n_len + n];
      }
    for (std::size_t e = 0; e < e_len; ++e) {
      double z = p.b_delta[e];
      for (std::size_t i = 0; i < e_len; ++i) z += u[t * e_len + i] * p.w_delta[i * e_len + e];
      const double delta = std::log(1.0 + std::exp(z));
      double out = p.d_skip[e] * u[t * e_len + e];
      for (std::size_t n = 0; n < n_len; ++n) {
        const double a = -std::exp(p.a_log[e * n_len + n]);
        h[e][n] = std::exp(delta * a) * h[e][n] + delta * bt[n] * u[t * e_len + e];
        out += ct[n] * h[e][n];
      }
      y[t * e_len + e] = out;
    }
  }
  return Tensor({t_len, e_len}, std::move(y));
}

Tensor reversed(const Tensor& x) {
  const std::size_t t = x.dim(0), e = x.size() / t;
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = 0; j < e; ++j) out[(t - 1 - i) * e + j] = x[i * e + j];
  return Tensor(x.shape(), std::move(out));
}

ScanInputs constant_inputs(std::vector<double> u, double delta, double a, double b, double c, double d) {
  const std::size_t t = u.size();
  return {Tensor({t, 1}, u), Tensor::full({t, 1}, delta), Tensor::full({t, 1}, b),
          Tensor::full({t, 1}, c), Tensor::full({1, 1}, a), Tensor::full({1}, d)};
}

}  // namespace

TEST_CASE("discretize_zoh") {
  auto z = discretize_zoh(-1.0, 3.0, 1e-12);
  CHECK(z.a_bar == doctest::Approx(1.0).epsilon(1e-11));
  CHECK(std::abs(z.b_bar) < 1e-11);
  CHECK(discretize_zoh(-1.0, 1.0, std::log(2.0)).a_bar == doctest::Approx(0.5).epsilon(1e-15));
  auto d = discretize_zoh(-0.3, 2.0, 0.5);
  CHECK(d.a_bar == doctest::Approx(0.8607079764250578).epsilon(1e-15));
  CHECK(d.b_bar == doctest::Approx(1.0).epsilon(1e-15));
  CHECK_THROWS_AS(discretize_zoh(-1.0, 1.0, 0.0), DomainError);
  CHECK_THROWS_AS(discretize_zoh(-1.0, 1.0, -0.1), DomainError);
}

TEST_CASE("scan edge cases") {
  SUBCASE("memoryless when a_bar underflows to zero") {
    auto in = constant_inputs({0.7, -1.3, 2.0}, 50.0, -100.0, 0.4, 1.5, 0.25);
    auto y = scan_seq(in);
    for (std::size_t t = 0; t < 3; ++t) {
      const double u = in.u[t];
      CHECK(y[t] == doctest::Approx(1.5 * 50.0 * 0.4 * u + 0.25 * u).epsilon(1e-14));
    }
  }
  SUBCASE("single step") {
    auto in = constant_inputs({0.8}, 0.3, -2.0, 1.2, -0.7, 0.5);
    CHECK(scan_seq(in)[0] == doctest::Approx(-0.7 * 0.3 * 1.2 * 0.8 + 0.5 * 0.8).epsilon(1e-15));
  }
  SUBCASE("hand-unrolled three steps") {
    auto y = scan_seq(constant_inputs({1, 0, 0}, 1.0, -1.0, 1.0, 1.0, 0.0));
    CHECK(y[0] == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(y[1] == doctest::Approx(0.36787944117144233).epsilon(1e-15));
    CHECK(y[2] == doctest::Approx(0.1353352832366127).epsilon(1e-15));
  }
  SUBCASE("empty sequences cannot be formed") { CHECK_THROWS_AS(Tensor({0, 4}, {}), ShapeError); }
}

TEST_CASE("associative scan equals sequential scan") {
  Rng rng(2024);
  const auto start = std::chrono::steady_clock::now();
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t t = 1 + rng.index(64), n = 1 + rng.index(16), e = 1 + rng.index(8);
    auto p = sfm::testing::random_ssm_params(e, n, rng);
    auto u = random_tensor({t, e}, rng);
    CHECK(max_abs_diff(selective_scan_assoc(u, p), selective_scan_seq(u, p)) < 1e-10);
    CHECK(max_abs_diff(selective_scan_seq(u, p), naive_scan(u, p)) < 1e-10);
  }
  CHECK(std::chrono::steady_clock::now() - start < std::chrono::seconds(10));
}

TEST_CASE("prefix scan degenerate cases") {
  std::vector<double> a(8, 1.0), b(8, 1.0);
  affine_prefix_scan(a, b);
  for (std::size_t t = 0; t < 8; ++t) CHECK(b[t] == static_cast<double>(t + 1));
  std::vector<double> a1{0.3}, b1{2.0};
  affine_prefix_scan(a1, b1);
  CHECK(b1[0] == 2.0);
  auto in = constant_inputs({0.8}, 0.3, -2.0, 1.2, -0.7, 0.5);
  CHECK(scan_assoc(in) == scan_seq(in));
}

TEST_CASE("scan_backward") {
  SUBCASE("skip path only") {
    auto in = constant_inputs({0.5, -1.0, 2.0}, 0.4, -1.0, 1.0, 0.0, 0.75);
    std::vector<double> states;
    scan_seq(in, &states);
    for (std::size_t t = 0; t < 3; ++t) {
      std::vector<double> up(3, 0.0);
      up[t] = 1.0;
      auto g = scan_backward(Tensor({3, 1}, up), in, states);
      CHECK(g.u[t] == 0.75);
    }
  }
  SUBCASE("input-map gradient vanishes as the step goes to zero") {
    auto in = constant_inputs({0.5, -1.0}, 1e-12, -1.0, 1.0, 1.0, 0.0);
    std::vector<double> states;
    scan_seq(in, &states);
    auto g = scan_backward(Tensor({2, 1}, {1.0, 1.0}), in, states);
    for (double v : g.b.values()) CHECK(std::abs(v) < 1e-11);
  }
  SUBCASE("T=2 scalar case matches finite differences") {
    Rng rng(7);
    auto in = constant_inputs({0.9, -0.4}, 0.6, -0.8, 1.1, 0.7, 0.3);
    std::vector<double> states;
    scan_seq(in, &states);
    auto g = scan_backward(Tensor({2, 1}, {1.0, 1.0}), in, states);
    auto f_u = [&](const Tensor& u) {
      auto c = in;
      c.u = u;
      auto y = scan_seq(c);
      return y[0] + y[1];
    };
    CHECK(max_relative_error(g.u, finite_difference(f_u, in.u)) < 1e-5);
    auto f_delta = [&](const Tensor& d) {
      auto c = in;
      c.delta = d;
      auto y = scan_seq(c);
      return y[0] + y[1];
    };
    CHECK(max_relative_error(g.delta, finite_difference(f_delta, in.delta)) < 1e-5);
    auto f_a = [&](const Tensor& a) {
      auto c = in;
      c.a = a;
      auto y = scan_seq(c);
      return y[0] + y[1];
    };
    CHECK(max_relative_error(g.a, finite_difference(f_a, in.a)) < 1e-5);
  }
}

TEST_CASE("end-to-end scan gradients match finite differences") {
  Rng rng(31);
  for (auto kind : {ScanKind::Sequential, ScanKind::Associative}) {
    for (int trial = 0; trial < 5; ++trial) {
      const std::size_t t = 2 + rng.index(6), e = 1 + rng.index(3), n = 1 + rng.index(3);
      auto p = sfm::testing::random_ssm_params(e, n, rng);
      std::vector<Tensor> in = {random_tensor({2, t, e}, rng), p.a_log, p.d_skip, p.w_delta,
                                p.b_delta, p.w_b, p.w_c};
      auto op = [kind](std::vector<Var>& v) {
        SsmVars s{v[1], v[2], v[3], v[4], v[5], v[6]};
        return selective_scan(v[0], s, kind);
      };
      CHECK(sfm::testing::gradcheck(op, in) < 1e-5);
    }
  }
}

TEST_CASE("tape scan agrees with the plain scan") {
  Rng rng(8);
  auto p = sfm::testing::random_ssm_params(3, 4, rng);
  auto u = random_tensor({5, 3}, rng);
  Tape tape;
  auto y = selective_scan(tape.constant(u), bind_leaves(tape, p));
  CHECK(max_abs_diff(y.value(), selective_scan_seq(u, p)) < 1e-14);
}

TEST_CASE("bidirectional scan") {
  Rng rng(17);
  SUBCASE("palindromic input with shared parameters stays palindromic") {
    auto p = sfm::testing::random_ssm_params(1, 3, rng);
    auto u = Tensor({5, 1}, {0.3, -1.2, 0.8, -1.2, 0.3});
    auto y = bidirectional_scan(u, p, p);
    for (std::size_t t = 0; t < 5; ++t) CHECK(std::abs(y[t] - y[4 - t]) < 1e-14);
  }
  SUBCASE("silenced backward direction") {
    auto pf = sfm::testing::random_ssm_params(2, 3, rng);
    auto pb = sfm::testing::random_ssm_params(2, 3, rng);
    pb.w_c = Tensor::zeros(pb.w_c.shape());
    pb.d_skip = Tensor::zeros(pb.d_skip.shape());
    auto u = random_tensor({6, 2}, rng);
    CHECK(max_abs_diff(bidirectional_scan(u, pf, pb), selective_scan_seq(u, pf)) < 1e-15);
  }
  SUBCASE("sum of two independently checked scans") {
    auto pf = sfm::testing::random_ssm_params(3, 2, rng);
    auto pb = sfm::testing::random_ssm_params(3, 2, rng);
    auto u = random_tensor({5, 3}, rng);
    auto fwd = naive_scan(u, pf);
    auto bwd = reversed(naive_scan(reversed(u), pb));
    std::vector<double> expect(fwd.size());
    for (std::size_t i = 0; i < expect.size(); ++i) expect[i] = fwd[i] + bwd[i];
    CHECK(max_abs_diff(bidirectional_scan(u, pf, pb), Tensor(u.shape(), expect)) < 1e-12);
    Tape tape;
    auto yv = bidirectional_scan(tape.constant(u), bind_leaves(tape, pf), bind_leaves(tape, pb));
    CHECK(max_abs_diff(yv.value(), Tensor(u.shape(), expect)) < 1e-12);
  }
}

TEST_CASE("cross-scan routes") {
  SUBCASE("1x1 grid") {
    auto r = cross_scan_routes(1, 1);
    for (const auto& route : r) CHECK(route == std::vector<std::size_t>{0});
  }
  SUBCASE("2x2 grid, enumerated by hand") {
    auto r = cross_scan_routes(2, 2);
    CHECK(r[0] == std::vector<std::size_t>{0, 1, 2, 3});
    CHECK(r[1] == std::vector<std::size_t>{0, 2, 1, 3});
    CHECK(r[2] == std::vector<std::size_t>{3, 2, 1, 0});
    CHECK(r[3] == std::vector<std::size_t>{3, 1, 2, 0});
  }
  SUBCASE("every route is a permutation") {
    for (std::size_t h = 1; h <= 5; ++h)
      for (std::size_t w = 1; w <= 5; ++w)
        for (auto route : cross_scan_routes(h, w)) {
          std::sort(route.begin(), route.end());
          for (std::size_t i = 0; i < h * w; ++i) CHECK(route[i] == i);
        }
  }
}

TEST_CASE("cross merge") {
  Rng rng(4);
  auto x = random_tensor({3, 2, 3}, rng);
  SUBCASE("identity per route gives four copies") {
    auto merged = cross_merge_2d(cross_scan_2d(x), 2, 3);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(merged[i] == doctest::Approx(4.0 * x[i]).epsilon(1e-15));
  }
  SUBCASE("three silenced routes leave the remaining one") {
    auto routes = cross_scan_2d(x);
    for (std::size_t k : {0u, 2u, 3u}) routes[k] = Tensor::zeros(routes[k].shape());
    CHECK(cross_merge_2d(routes, 2, 3) == x);
  }
  SUBCASE("length mismatch is rejected") {
    auto routes = cross_scan_2d(x);
    routes[2] = Tensor::zeros({5, 3});
    CHECK_THROWS_AS(cross_merge_2d(routes, 2, 3), ShapeError);
  }
  SUBCASE("random 3x3 through scan and merge against explicit permutation matrices") {
    auto g = random_tensor({2, 3, 3}, rng);
    // Explicit index arrays: route k visits (row, col) pairs listed by hand.
    const std::size_t rm[9][2] = {{0, 0}, {0, 1}, {0, 2}, {1, 0}, {1, 1}, {1, 2}, {2, 0}, {2, 1}, {2, 2}};
    const std::size_t cm[9][2] = {{0, 0}, {1, 0}, {2, 0}, {0, 1}, {1, 1}, {2, 1}, {0, 2}, {1, 2}, {2, 2}};
    auto visit = [&](int k, std::size_t t) {
      const auto* tbl = (k % 2 == 0) ? rm : cm;
      const std::size_t i = k < 2 ? t : 8 - t;
      return tbl[i][0] * 3 + tbl[i][1];
    };
    auto routes = cross_scan_2d(g);
    std::vector<double> expect(g.size(), 0.0);
    for (int k = 0; k < 4; ++k) {
      // Dense permutation matrix P_k with (P_k x)[t] = x[visit(k, t)].
      std::vector<double> perm(81, 0.0);
      for (std::size_t t = 0; t < 9; ++t) perm[t * 9 + visit(k, t)] = 1.0;
      for (std::size_t d = 0; d < 2; ++d)
        for (std::size_t t = 0; t < 9; ++t) {
          double seq = 0.0;
          for (std::size_t p = 0; p < 9; ++p) seq += perm[t * 9 + p] * g[d * 9 + p];
          CHECK(routes[k][t * 2 + d] == seq);
          // Merge applies P_k^T.
          for (std::size_t p = 0; p < 9; ++p) expect[d * 9 + p] += perm[t * 9 + p] * seq;
        }
    }
    CHECK(max_abs_diff(cross_merge_2d(routes, 3, 3), Tensor(g.shape(), expect)) < 1e-15);
  }
}

TEST_CASE("hidden state stays within the geometric bound") {
  Rng rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    const double delta = rng.uniform(0.01, 2.0), a = -rng.uniform(0.05, 3.0), b = rng.uniform(-2.0, 2.0);
    std::vector<double> u(40);
    for (auto& v : u) v = rng.uniform(-1.0, 1.0);
    auto in = constant_inputs(u, delta, a, b, 1.0, 0.0);
    std::vector<double> states;
    scan_seq(in, &states);
    const double a_bar = std::exp(delta * a);
    double max_bu = 0.0;
    for (double v : u) max_bu = std::max(max_bu, std::abs(delta * b * v));
    const double bound = max_bu / (1.0 - a_bar);
    for (double h : states) CHECK(std::abs(h) <= bound + 1e-12);
  }
}
