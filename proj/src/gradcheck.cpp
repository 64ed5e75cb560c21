#include "sfmamba/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace sfm {

Tensor finite_difference(const std::function<double(const Tensor&)>& f, const Tensor& x, double h) {
  std::vector<double> probe = x.values();
  std::vector<double> grad(probe.size());
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double up = f(Tensor(x.shape(), probe));
    probe[i] = orig - h;
    const double down = f(Tensor(x.shape(), probe));
    probe[i] = orig;
    grad[i] = (up - down) / (2.0 * h);
  }
  return Tensor(x.shape(), std::move(grad));
}

double max_relative_error(const Tensor& analytic, const Tensor& numeric, double floor) {
  if (analytic.shape() != numeric.shape()) {
    throw ShapeError("max_relative_error", analytic.shape(), numeric.shape());
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double a = analytic[i], n = numeric[i];
    const double denom = std::max({std::abs(a), std::abs(n), floor});
    worst = std::max(worst, std::abs(a - n) / denom);
  }
  return worst;
}

}  // namespace sfm
