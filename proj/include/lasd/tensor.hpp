// SPDX-License-Identifier: Apache-2.0
/**
 * @file   tensor.hpp
 * @brief  Dense row-major tensor used for activations, weights and gradients.
 *
 * Model tensors are laid out channel-first: axis 0 is the channel axis and
 * every remaining axis is either a batch/time axis or a spatial axis. This
 * keeps every convolution a plain GEMM over a contiguous channel row.
 */
#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace lasd {

using Shape = std::vector<std::size_t>;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised on inconsistent extents, invalid axes or non-positive outputs.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// NaN or infinity where a finite value is required.
class NumericError : public Error {
 public:
  using Error::Error;
};

std::size_t numel(const Shape &shape);
std::string to_string(const Shape &shape);

template <typename T> class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{0});
  Tensor(Shape shape, std::vector<T> data);
  Tensor(Shape shape, std::initializer_list<T> data)
    : Tensor(std::move(shape), std::vector<T>(data)) {}

  const Shape &shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t extent(std::size_t axis) const;
  bool empty() const { return data_.empty(); }

  T *ptr() { return data_.data(); }
  const T *ptr() const { return data_.data(); }
  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }

  T &operator[](std::size_t i) { return data_[i]; }
  const T &operator[](std::size_t i) const { return data_[i]; }

  /// Same data, new extents; element count must match.
  void reshape(Shape shape);
  Tensor reshaped(Shape shape) const &;
  Tensor reshaped(Shape shape) &&;

  void fill(T v);

  template <typename U> Tensor<U> cast() const {
    return Tensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
  }

  bool operator==(const Tensor &o) const = default;

 private:
  Shape shape_;
  std::vector<T> data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

extern template class Tensor<float>;
extern template class Tensor<double>;

/// Product of extents strictly before / after `axis`.
std::size_t outer_size(const Shape &shape, std::size_t axis);
std::size_t inner_size(const Shape &shape, std::size_t axis);

} // namespace lasd
