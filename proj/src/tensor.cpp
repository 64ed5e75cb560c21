#include "sfmamba/tensor.hpp"

#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

namespace sfm {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

ShapeError::ShapeError(const std::string& op, const Shape& a, const Shape& b)
    : std::invalid_argument(op + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b)) {}

Tensor::Tensor() : shape_{}, data_(std::make_shared<const std::vector<double>>(1, 0.0)) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)) {
  for (auto d : shape_) {
    if (d == 0) throw ShapeError("tensor: zero-sized dimension in " + shape_str(shape_));
  }
  if (shape_numel(shape_) != data.size()) {
    throw ShapeError("tensor: shape " + shape_str(shape_) + " holds " +
                     std::to_string(shape_numel(shape_)) + " values, got " +
                     std::to_string(data.size()));
  }
  data_ = std::make_shared<const std::vector<double>>(std::move(data));
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
  auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor({}, {value}); }

Tensor Tensor::vector(std::vector<double> values) {
  Shape s{values.size()};
  return Tensor(std::move(s), std::move(values));
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw ShapeError("tensor: axis " + std::to_string(axis) + " out of range for " +
                     shape_str(shape_));
  }
  return shape_[axis];
}

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item: tensor " + shape_str(shape_) + " is not a scalar");
  return (*data_)[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != size()) throw ShapeError("reshape", shape_, shape);
  Tensor t = *this;
  t.shape_ = std::move(shape);
  return t;
}

bool Tensor::all_finite() const {
  for (double v : *data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

bool operator==(const Tensor& a, const Tensor& b) {
  return a.shape_ == b.shape_ && *a.data_ == *b.data_;
}

}  // namespace sfm
