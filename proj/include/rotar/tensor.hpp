#pragma once

#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "rotar/error.hpp"

namespace rotar {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_string(const Shape& shape);

// Opt-in NaN/Inf validation of every op output. Off by default.
void set_debug_checks(bool enabled);
bool debug_checks_enabled();

// Dense row-major tensor value. No gradient bookkeeping lives here; see
// autograd.hpp for the tape that records differentiable computations.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{0})
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {
    validate_shape();
  }
  Tensor(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape();
    if (data_.size() != shape_numel(shape_)) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_string(shape_));
    }
  }

  static Tensor vector(std::vector<T> values) {
    const std::size_t n = values.size();
    return Tensor({n}, std::move(values));
  }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<T> values) {
    return Tensor({rows, cols}, std::move(values));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t numel() const { return data_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  bool empty() const { return shape_.empty(); }

  // Matrix view helpers. A rank-1 tensor reads as a single row.
  std::size_t rows() const { return shape_.size() == 2 ? shape_[0] : 1; }
  std::size_t cols() const { return shape_.empty() ? 0 : shape_.back(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }
  T& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  const T& at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  std::span<T> row(std::size_t r) { return {data_.data() + r * cols(), cols()}; }
  std::span<const T> row(std::size_t r) const {
    return {data_.data() + r * cols(), cols()};
  }

  T item() const {
    if (data_.size() != 1) {
      throw DimensionError("item() on tensor of shape " + shape_string(shape_));
    }
    return data_[0];
  }

  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != numel()) {
      throw DimensionError("cannot reshape " + shape_string(shape_) + " to " +
                           shape_string(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  template <typename U>
  Tensor<U> cast() const {
    return Tensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
  }

  bool operator==(const Tensor& other) const = default;

 private:
  void validate_shape() const {
    for (std::size_t d : shape_) {
      if (d == 0) {
        throw DimensionError("tensor shape must be positive, got " + shape_string(shape_));
      }
    }
  }

  Shape shape_;
  std::vector<T> data_;
};

// Throws NumericError when any value is NaN or infinite.
template <typename T>
void check_finite(const Tensor<T>& t, const char* where);

}  // namespace rotar
