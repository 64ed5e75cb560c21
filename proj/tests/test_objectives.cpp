#include <cmath>
#include <numeric>

#include "doctest.h"
#include "sfmamba/objectives.hpp"
#include "test_util.hpp"

using namespace sfm;
using namespace sfm::objectives;
using sfm::testing::random_tensor;

namespace {

double eval(const std::function<Var(Var)>& f, const Tensor& logits) {
  Tape tape;
  return f(tape.constant(logits)).value().item();
}

Tensor mat(std::size_t rows, std::size_t cols, std::vector<double> v) { return Tensor({rows, cols}, std::move(v)); }

std::vector<double> softmax_row(const Tensor& z, std::size_t r) {
  const std::size_t c = z.dim(1);
  double m = z[r * c];
  for (std::size_t j = 1; j < c; ++j) m = std::max(m, z[r * c + j]);
  std::vector<double> p(c);
  double s = 0.0;
  for (std::size_t j = 0; j < c; ++j) s += (p[j] = std::exp(z[r * c + j] - m));
  for (auto& v : p) v /= s;
  return p;
}

}  // namespace

TEST_CASE("label-smoothed cross-entropy") {
  SUBCASE("alpha 0 is plain cross-entropy") {
    auto z = mat(2, 3, {0.5, -1.0, 2.0, 0.0, 0.3, -0.2});
    const double ce = -(std::log(softmax_row(z, 0)[2]) + std::log(softmax_row(z, 1)[1])) / 2.0;
    CHECK(eval([](Var v) { return label_smoothed_ce(v, {2, 1}, 0.0); }, z) == doctest::Approx(ce).epsilon(1e-14));
  }
  SUBCASE("uniform logits give log C") {
    for (std::size_t label : {0u, 3u}) {
      const double v = eval([&](Var x) { return label_smoothed_ce(x, {label, 1}, 0.1); }, Tensor::full({2, 4}, 0.7));
      CHECK(std::abs(v - std::log(4.0)) < 1e-12);
    }
  }
  SUBCASE("two-class fixture") {
    CHECK(eval([](Var v) { return label_smoothed_ce(v, {0}, 0.1); }, mat(1, 2, {2.0, 0.0})) ==
          doctest::Approx(0.2269280110429726).epsilon(1e-14));
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(eval([](Var v) { return label_smoothed_ce(v, {2}, 0.1); }, mat(1, 2, {1, 0})), DomainError);
    CHECK_THROWS_AS(eval([](Var v) { return label_smoothed_ce(v, {0}, 1.0); }, mat(1, 2, {1, 0})), DomainError);
    CHECK_THROWS_AS(eval([](Var v) { return label_smoothed_ce(v, {0, 1}, 0.1); }, mat(1, 2, {1, 0})), ShapeError);
  }
}

TEST_CASE("entropy") {
  CHECK(eval(entropy_loss, mat(1, 3, {50.0, 0.0, 0.0})) < 1e-18);
  CHECK(std::abs(eval(entropy_loss, Tensor::full({3, 4}, -2.0)) - std::log(4.0)) < 1e-12);
  CHECK(eval(entropy_loss, mat(1, 4, {1.0, 0.0, 0.0, 0.0})) == doctest::Approx(1.2683014942100075).epsilon(1e-14));
}

TEST_CASE("diversity") {
  SUBCASE("uniform batch mean reaches -log C") {
    auto z = mat(2, 2, {5.0, 0.0, 0.0, 5.0});
    CHECK(std::abs(eval(diversity_loss, z) + std::log(2.0)) < 1e-12);
  }
  SUBCASE("single confident sample reaches 0") { CHECK(std::abs(eval(diversity_loss, mat(1, 3, {60.0, 0.0, 0.0}))) < 1e-20); }
  SUBCASE("equals KL to uniform minus log C") {
    Rng rng(4);
    for (int trial = 0; trial < 100; ++trial) {
      const std::size_t b = 2 + rng.index(8), c = 2 + rng.index(6);
      auto z = random_tensor({b, c}, rng, -4.0, 4.0);
      std::vector<double> pbar(c, 0.0);
      for (std::size_t r = 0; r < b; ++r) {
        auto p = softmax_row(z, r);
        for (std::size_t j = 0; j < c; ++j) pbar[j] += p[j] / static_cast<double>(b);
      }
      double kl = 0.0;
      for (double p : pbar) kl += p * std::log(p * static_cast<double>(c));
      CHECK(std::abs(eval(diversity_loss, z) - (kl - std::log(static_cast<double>(c)))) < 1e-12);
    }
  }
}

TEST_CASE("pseudo-label cross-entropy") {
  auto z = mat(5, 3, {0.3, -1.2, 0.8, 1.5, 0.2, -0.4, -0.7, 0.9, 0.1, 0.0, 0.0, 2.0, -1.0, 0.5, 0.5});
  SUBCASE("empty selection is zero") {
    Tape tape;
    Var v = tape.leaf(z);
    auto loss = pseudo_ce(v, {0, 0, 0, 0, 0}, std::vector<bool>(5, false));
    CHECK(loss.value().item() == 0.0);
    auto g = tape.backward(loss);
    for (double x : g[v].values()) CHECK(x == 0.0);
  }
  SUBCASE("confident correct predictions") {
    CHECK(eval([](Var v) { return pseudo_ce(v, {0, 1}, {true, true}); }, mat(2, 2, {50.0, 0.0, 0.0, 50.0})) < 1e-20);
  }
  SUBCASE("three of five against the masked-mean fixture") {
    CHECK(eval([](Var v) { return pseudo_ce(v, {2, 0, 1, 2, 1}, {true, false, true, true, false}); }, z) ==
          doctest::Approx(0.4320064715101493).epsilon(1e-14));
  }
}

TEST_CASE("KL consistency") {
  SUBCASE("identical inputs give exactly zero") {
    Rng rng(9);
    for (int trial = 0; trial < 20; ++trial) {
      auto z = random_tensor({4, 5}, rng, -5.0, 5.0);
      Tape tape;
      Var a = tape.constant(z), b = tape.constant(z);
      CHECK(kl_consistency(a, b, {true, true, false, true}).value().item() == 0.0);
    }
  }
  SUBCASE("two-class fixture") {
    Tape tape;
    Var p = tape.constant(mat(2, 2, {std::log(0.7), std::log(0.3), std::log(0.7), std::log(0.3)}));
    Var q = tape.constant(mat(2, 2, {0.0, 0.0, 1.0, 1.0}));
    CHECK(kl_consistency(p, q, {true, true}).value().item() == doctest::Approx(0.08228287850505178).epsilon(1e-14));
  }
  SUBCASE("gradients reach both branches") {
    Tape tape;
    Var p = tape.leaf(mat(1, 2, {0.4, -0.1}));
    Var q = tape.leaf(mat(1, 2, {-0.3, 0.2}));
    auto g = tape.backward(kl_consistency(p, q, {true}));
    CHECK(std::abs(g[p][0]) > 1e-3);
    CHECK(std::abs(g[q][0]) > 1e-3);
  }
}

TEST_CASE("loss bounds on random batches") {
  Rng rng(21);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t b = 1 + rng.index(8), c = 2 + rng.index(5);
    const double log_c = std::log(static_cast<double>(c));
    auto z = random_tensor({b, c}, rng, -8.0, 8.0);
    auto z2 = random_tensor({b, c}, rng, -8.0, 8.0);
    const double ent = eval(entropy_loss, z);
    CHECK(ent >= 0.0);
    CHECK(ent <= log_c + 1e-12);
    const double div = eval(diversity_loss, z);
    CHECK(div >= -log_c - 1e-12);
    CHECK(div <= 1e-15);
    Tape tape;
    CHECK(kl_consistency(tape.constant(z), tape.constant(z2), std::vector<bool>(b, true)).value().item() >= 0.0);
  }
}

TEST_CASE("loss gradients match finite differences") {
  using sfm::testing::gradcheck;
  Rng rng(5);
  const std::vector<std::size_t> labels = {1, 0, 2, 2};
  const std::vector<bool> mask = {true, false, true, true};
  for (int trial = 0; trial < 20; ++trial) {
    auto z = random_tensor({4, 3}, rng, -3.0, 3.0);
    auto z2 = random_tensor({4, 3}, rng, -3.0, 3.0);
    CHECK(gradcheck([&](auto& v) { return label_smoothed_ce(v[0], labels, 0.1); }, {z}) < 1e-5);
    CHECK(gradcheck([](auto& v) { return entropy_loss(v[0]); }, {z}) < 1e-5);
    CHECK(gradcheck([](auto& v) { return diversity_loss(v[0]); }, {z}) < 1e-5);
    CHECK(gradcheck([&](auto& v) { return pseudo_ce(v[0], labels, mask); }, {z}) < 1e-5);
    CHECK(gradcheck([&](auto& v) { return kl_consistency(v[0], v[1], mask); }, {z, z2}) < 1e-5);
  }
}

TEST_CASE("total target loss") {
  Tape tape;
  auto s = [&](double v) { return tape.constant(Tensor::scalar(v)); };
  CHECK(total_target_loss(s(0), s(0), s(0), s(0)).value().item() == 0.0);
  CHECK(total_target_loss(s(0.1), s(0.2), s(-1.0), s(0.3)).value().item() == doctest::Approx(-0.4).epsilon(1e-15));

  SUBCASE("gradient is the sum of the parts' gradients") {
    Rng rng(17);
    auto x = random_tensor({5, 4}, rng, -1.0, 1.0);
    auto w0 = random_tensor({4, 3}, rng, -1.0, 1.0);
    auto noise = random_tensor({5, 4}, rng, -0.2, 0.2);
    const std::vector<std::size_t> labels = {0, 2, 1, 1, 0};
    const std::vector<bool> mask = {true, true, false, true, false};
    auto parts = [&](Tape& t, Var w) {
      Var lo = ad::matmul(t.constant(x), w);
      Var lp = ad::matmul(ad::add(t.constant(x), t.constant(noise)), w);
      return std::vector<Var>{entropy_loss(lo), diversity_loss(lo), pseudo_ce(lo, labels, mask), kl_consistency(lo, lp, mask)};
    };
    Tape tt;
    Var w = tt.leaf(w0);
    auto p = parts(tt, w);
    const Tensor g_total = tt.backward(total_target_loss(p[0], p[1], p[2], p[3]))[w];
    std::vector<double> g_sum(w0.size(), 0.0);
    for (int k = 0; k < 4; ++k) {
      Tape tk;
      Var wk = tk.leaf(w0);
      auto pk = parts(tk, wk);
      const Tensor g = tk.backward(pk[static_cast<std::size_t>(k)])[wk];
      for (std::size_t i = 0; i < g.size(); ++i) g_sum[i] += g[i];
    }
    for (std::size_t i = 0; i < g_sum.size(); ++i) CHECK(g_total[i] == doctest::Approx(g_sum[i]).epsilon(1e-12));
    CHECK(sfm::testing::gradcheck(
              [&](auto& v) {
                auto q = parts(*v[0].tape(), v[0]);
                return total_target_loss(q[0], q[1], q[2], q[3]);
              },
              {w0}) < 1e-5);
  }
  SUBCASE("batch order does not matter") {
    Rng rng(3);
    auto z = random_tensor({6, 4}, rng, -3.0, 3.0);
    auto z2 = random_tensor({6, 4}, rng, -3.0, 3.0);
    std::vector<std::size_t> labels = {0, 1, 2, 3, 1, 0};
    std::vector<bool> mask = {true, false, true, true, false, true};
    const std::vector<std::size_t> perm = {4, 2, 5, 0, 3, 1};
    auto run = [](const Tensor& a, const Tensor& b, const std::vector<std::size_t>& y, const std::vector<bool>& m) {
      Tape t;
      Var lo = t.constant(a), lp = t.constant(b);
      return total_target_loss(entropy_loss(lo), diversity_loss(lo), pseudo_ce(lo, y, m), kl_consistency(lo, lp, m)).value().item();
    };
    std::vector<double> za, zb;
    std::vector<std::size_t> yp;
    std::vector<bool> mp;
    for (auto r : perm) {
      for (std::size_t j = 0; j < 4; ++j) {
        za.push_back(z[r * 4 + j]);
        zb.push_back(z2[r * 4 + j]);
      }
      yp.push_back(labels[r]);
      mp.push_back(mask[r]);
    }
    CHECK(run(z, z2, labels, mask) == doctest::Approx(run(mat(6, 4, za), mat(6, 4, zb), yp, mp)).epsilon(1e-13));
  }
}

TEST_CASE("breakdown json line") {
  LossBreakdown target{std::nullopt, 0.5, -1.25, 0.25, 0.0, -0.5, 8, 3};
  CHECK(target.json_line(7) ==
        R"({"step":7,"lce":null,"ent":0.5,"div":-1.25,"ce":0.25,"kl":0.0,"total":-0.5,"n_selected":3,"batch_size":8})");
  LossBreakdown source;
  source.lce = 0.75;
  source.batch_size = 4;
  CHECK(source.json_line(0) ==
        R"({"step":0,"lce":0.75,"ent":null,"div":null,"ce":null,"kl":null,"total":0.75,"n_selected":0,"batch_size":4})");
}
