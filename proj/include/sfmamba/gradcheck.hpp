#pragma once

#include <functional>

#include "sfmamba/tensor.hpp"

namespace sfm {

/// Central-difference gradient of a scalar function, one coordinate at a time:
/// (f(x + h e_i) - f(x - h e_i)) / 2h.
Tensor finite_difference(const std::function<double(const Tensor&)>& f, const Tensor& x,
                         double h = 1e-5);

/// max_i |a_i - b_i| / max(|a_i|, |b_i|, floor). The floor keeps entries that are zero
/// analytically from turning rounding noise into a large ratio.
double max_relative_error(const Tensor& analytic, const Tensor& numeric, double floor = 1e-4);

}  // namespace sfm
