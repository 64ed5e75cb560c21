#pragma once

// Every differentiable tape op with input shapes small enough for finite differences.

#include <algorithm>
#include <functional>
#include <string>
#include <vector>

#include "test_util.hpp"

namespace sfm::testing {

struct OpCase {
  const char* name;
  std::vector<Shape> shapes;
  OpFn fn;
  bool positive = false;  // inputs drawn from [0.2, 2] instead of [-2, 2]
};

inline std::vector<OpCase> op_cases() {
  return {
      {"add", {{3, 4}, {3, 4}}, [](auto& v) { return ad::add(v[0], v[1]); }},
      {"add_broadcast", {{2, 3, 4}, {4}}, [](auto& v) { return ad::add(v[0], v[1]); }},
      {"sub_broadcast_left", {{4}, {2, 4}}, [](auto& v) { return ad::sub(v[0], v[1]); }},
      {"mul", {{3, 4}, {3, 4}}, [](auto& v) { return ad::mul(v[0], v[1]); }},
      {"mul_broadcast", {{2, 3}, {3}}, [](auto& v) { return ad::mul(v[0], v[1]); }},
      {"matmul", {{2, 3, 4}, {4, 5}}, [](auto& v) { return ad::matmul(v[0], v[1]); }},
      {"matmul_vec", {{3, 4}, {4}}, [](auto& v) { return ad::matmul(v[0], v[1]); }},
      {"exp", {{3, 3}}, [](auto& v) { return ad::exp(v[0]); }},
      {"log", {{3, 3}}, [](auto& v) { return ad::log(v[0]); }, true},
      {"reciprocal", {{3, 3}}, [](auto& v) { return ad::reciprocal(v[0]); }, true},
      {"relu", {{4, 4}}, [](auto& v) { return ad::relu(v[0]); }},
      {"sigmoid", {{4}}, [](auto& v) { return ad::sigmoid(v[0]); }},
      {"softplus", {{4}}, [](auto& v) { return ad::softplus(v[0]); }},
      {"silu", {{4}}, [](auto& v) { return ad::silu(v[0]); }},
      {"softmax", {{3, 5}}, [](auto& v) { return ad::softmax(v[0]); }},
      {"log_softmax", {{3, 5}}, [](auto& v) { return ad::log_softmax(v[0]); }},
      {"logsumexp", {{3, 5}}, [](auto& v) { return ad::logsumexp(v[0]); }},
      {"sum_axis0", {{3, 4, 2}}, [](auto& v) { return ad::sum(v[0], 0); }},
      {"mean_axis1", {{3, 4, 2}}, [](auto& v) { return ad::mean(v[0], 1); }},
      {"reshape", {{3, 4}}, [](auto& v) { return ad::reshape(v[0], {2, 6}); }},
      {"transpose", {{2, 3, 4}}, [](auto& v) { return ad::transpose(v[0]); }},
      {"concat", {{2, 3}, {2, 1}}, [](auto& v) { return ad::concat({v[0], v[1]}, 1); }},
      {"slice", {{4, 3}}, [](auto& v) { return ad::slice(v[0], 0, 1, 3); }},
      {"gather", {{2, 4, 3}}, [](auto& v) { return ad::gather(v[0], 1, {3, 0, 0, 2}); }},
      {"gather_batched", {{2, 3, 2}}, [](auto& v) { return ad::gather_batched(v[0], {2, 1, 1, 0}, 2); }},
      {"reverse", {{2, 5}}, [](auto& v) { return ad::reverse(v[0], 1); }},
      {"layer_norm", {{3, 5}, {5}, {5}}, [](auto& v) { return ad::layer_norm(v[0], v[1], v[2]); }},
      {"batch_norm", {{4, 3}, {3}, {3}}, [](auto& v) { return ad::batch_norm_train(v[0], v[1], v[2]); }},
  };
}

/// Worst gradcheck error over `trials` random draws of one case.
inline double worst_op_error(const OpCase& c, int trials) {
  Rng rng(std::hash<std::string>{}(c.name));
  double worst = 0.0;
  for (int trial = 0; trial < trials; ++trial) {
    std::vector<Tensor> in;
    for (const auto& s : c.shapes) in.push_back(c.positive ? random_tensor(s, rng, 0.2, 2.0) : random_tensor(s, rng));
    worst = std::max(worst, gradcheck(c.fn, in));
  }
  return worst;
}

}  // namespace sfm::testing
