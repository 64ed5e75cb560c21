#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace sfm {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

/// Raised when operand shapes do not conform. The message names both shapes.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
  ShapeError(const std::string& op, const Shape& a, const Shape& b);
};

/// Raised for arguments outside an operation's domain (log of non-positive, bad index, ...).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Raised for configurations that violate their invariants or disagree with stored data.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Dense row-major array of doubles. Contents are immutable once constructed; copies share
/// the underlying buffer.
class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);
  static Tensor vector(std::vector<double> values);

  [[nodiscard]] const Shape& shape() const { return shape_; }
  [[nodiscard]] std::size_t rank() const { return shape_.size(); }
  [[nodiscard]] std::size_t dim(std::size_t axis) const;
  [[nodiscard]] std::size_t size() const { return data_->size(); }
  [[nodiscard]] std::span<const double> data() const { return *data_; }
  [[nodiscard]] const std::vector<double>& values() const { return *data_; }
  [[nodiscard]] double operator[](std::size_t i) const { return (*data_)[i]; }
  [[nodiscard]] double item() const;

  [[nodiscard]] Tensor reshaped(Shape shape) const;
  [[nodiscard]] bool all_finite() const;

  friend bool operator==(const Tensor& a, const Tensor& b);

 private:
  Shape shape_;
  std::shared_ptr<const std::vector<double>> data_;
};

}  // namespace sfm
