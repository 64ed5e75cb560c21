#include <cmath>
#include <sstream>

#include "doctest.h"
#include "sfmamba/tensor_io.hpp"
#include "gradient_cases.hpp"
#include "test_util.hpp"

using namespace sfm;
using sfm::testing::gradcheck;
using sfm::testing::random_tensor;

TEST_CASE("softmax of zeros is uniform") {
  Tape tape;
  auto p = ad::softmax(tape.constant(Tensor::vector({0, 0, 0})));
  for (double v : p.value().values()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("identity matmul returns the vector") {
  Tape tape;
  auto eye = tape.constant(Tensor({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1}));
  auto v = Tensor::vector({0.5, -2.0, 3.25});
  auto out = ad::matmul(tape.constant(v), eye);
  CHECK(out.value() == v);
}

TEST_CASE("exp inverts log") {
  Tape tape;
  for (double x : {0.5, 1.0, 7.25}) {
    auto y = ad::exp(ad::log(tape.constant(Tensor::scalar(x))));
    CHECK(std::abs(y.value().item() - x) < 1e-12);
  }
}

TEST_CASE("quadratic gradient") {
  Tape tape;
  auto w = tape.leaf(Tensor::vector({1, 2}));
  auto grads = tape.backward(ad::sum_all(ad::mul(w, w)));
  CHECK(grads[w] == Tensor::vector({2, 4}));
}

TEST_CASE("softmax cross-entropy gradient at uniform logits is p - y") {
  Tape tape;
  auto logits = tape.leaf(Tensor({1, 4}, {0, 0, 0, 0}));
  auto y = tape.constant(Tensor({1, 4}, {0, 1, 0, 0}));
  auto loss = ad::scale(ad::sum_all(ad::mul(ad::log_softmax(logits), y)), -1.0);
  auto g = tape.backward(loss)[logits];
  const double expect[] = {0.25, -0.75, 0.25, 0.25};
  for (int i = 0; i < 4; ++i) CHECK(g[i] == doctest::Approx(expect[i]).epsilon(1e-14));
}

TEST_CASE("unreachable leaves receive zero gradients") {
  Tape tape;
  auto a = tape.leaf(Tensor::vector({1, 2, 3}));
  auto b = tape.leaf(Tensor({2, 2}, {1, 2, 3, 4}));
  auto grads = tape.backward(ad::sum_all(a));
  CHECK(grads[b] == Tensor::zeros({2, 2}));
}

TEST_CASE("paths accumulate by summation") {
  Tape tape;
  auto x = tape.leaf(Tensor::scalar(3.0));
  auto y = ad::add(ad::mul(x, x), ad::scale(x, 5.0));
  CHECK(tape.backward(y)[x].item() == 11.0);
}

TEST_CASE("errors") {
  Tape tape;
  auto a = tape.constant(Tensor({2, 3}, std::vector<double>(6, 1.0)));
  auto b = tape.constant(Tensor({2, 2}, std::vector<double>(4, 1.0)));
  SUBCASE("shape mismatch names both shapes") {
    try {
      (void)ad::add(a, b);
      FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
      std::string msg = e.what();
      CHECK(msg.find("[2,3]") != std::string::npos);
      CHECK(msg.find("[2,2]") != std::string::npos);
    }
    CHECK_THROWS_AS((void)ad::matmul(a, a), ShapeError);
  }
  SUBCASE("log and reciprocal domains") {
    CHECK_THROWS_AS((void)ad::log(tape.constant(Tensor::vector({1.0, 0.0}))), DomainError);
    CHECK_THROWS_AS((void)ad::log(tape.constant(Tensor::vector({-1.0}))), DomainError);
    CHECK_THROWS_AS((void)ad::reciprocal(tape.constant(Tensor::vector({0.0}))), DomainError);
  }
  SUBCASE("non-scalar loss") { CHECK_THROWS_AS((void)tape.backward(a), ShapeError); }
  SUBCASE("gather out of range") { CHECK_THROWS_AS((void)ad::gather(a, 1, {0, 3}), DomainError); }
}

TEST_CASE("finite_difference on simple functions") {
  auto sq = [](const Tensor& x) { return x[0] * x[0]; };
  CHECK(std::abs(finite_difference(sq, Tensor::vector({3.0}))[0] - 6.0) < 1e-8);
  auto ex = [](const Tensor& x) { return std::exp(x[0]); };
  CHECK(std::abs(finite_difference(ex, Tensor::vector({0.0}))[0] - 1.0) < 1e-8);
}

TEST_CASE("every op matches finite differences on 20 random inputs") {
  for (const auto& c : sfm::testing::op_cases()) {
    CAPTURE(c.name);
    CHECK(sfm::testing::worst_op_error(c, 20) < 1e-5);
  }
}

TEST_CASE("softmax rows sum to one and stay positive") {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    Tape tape;
    auto p = ad::softmax(tape.constant(random_tensor({4, 6}, rng, -30.0, 30.0)));
    for (std::size_t r = 0; r < 4; ++r) {
      double s = 0.0;
      for (std::size_t j = 0; j < 6; ++j) {
        CHECK(p.value()[r * 6 + j] > 0.0);
        s += p.value()[r * 6 + j];
      }
      CHECK(std::abs(s - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("reshape round trip is the identity") {
  Rng rng(5);
  Tape tape;
  auto x = tape.constant(random_tensor({2, 3, 4}, rng));
  auto back = ad::reshape(ad::reshape(x, {6, 4}), {2, 3, 4});
  CHECK(back.value() == x.value());
}

TEST_CASE("TNSR1 round trip and failures") {
  Rng rng(11);
  Tensor t = random_tensor({2, 3, 5}, rng);
  std::stringstream ss;
  write_tensor(ss, t);
  const std::string bytes = ss.str();
  CHECK(bytes.substr(0, 4) == "TNSR");
  CHECK(bytes.size() == 4 + 3 + 3 * 4 + 30 * 8);
  CHECK(read_tensor(ss) == t);

  std::stringstream f32;
  write_tensor(f32, t, DType::F32);
  Tensor back = read_tensor(f32);
  for (std::size_t i = 0; i < t.size(); ++i) CHECK(back[i] == static_cast<double>(static_cast<float>(t[i])));

  std::string bad = bytes;
  bad[0] = 'X';
  std::stringstream sb(bad);
  CHECK_THROWS_WITH_AS(read_tensor(sb), "bad magic", FormatError);
  std::stringstream st(bytes.substr(0, bytes.size() - 3));
  CHECK_THROWS_WITH_AS(read_tensor(st), "truncated file", FormatError);
}
