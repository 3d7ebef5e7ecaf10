// SPDX-License-Identifier: Apache-2.0
#include <lasd/tensor.hpp>

#include <algorithm>
#include <sstream>

namespace lasd {

std::size_t numel(const Shape &shape) {
  std::size_t n = 1;
  for (auto e : shape)
    n *= e;
  return n;
}

std::string to_string(const Shape &shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i)
    os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

std::size_t outer_size(const Shape &shape, std::size_t axis) {
  std::size_t n = 1;
  for (std::size_t i = 0; i < axis; ++i)
    n *= shape[i];
  return n;
}

std::size_t inner_size(const Shape &shape, std::size_t axis) {
  std::size_t n = 1;
  for (std::size_t i = axis + 1; i < shape.size(); ++i)
    n *= shape[i];
  return n;
}

namespace {
void check_extents(const Shape &shape) {
  if (std::any_of(shape.begin(), shape.end(), [](auto e) { return e == 0; }))
    throw ShapeError("tensor extents must be positive, got " + to_string(shape));
}
} // namespace

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill)
  : shape_(std::move(shape)) {
  check_extents(shape_);
  data_.assign(numel(shape_), fill);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data)
  : shape_(std::move(shape)), data_(std::move(data)) {
  check_extents(shape_);
  if (numel(shape_) != data_.size())
    throw ShapeError("shape " + to_string(shape_) + " needs " +
                     std::to_string(numel(shape_)) + " elements, got " +
                     std::to_string(data_.size()));
}

template <typename T> std::size_t Tensor<T>::extent(std::size_t axis) const {
  if (axis >= shape_.size())
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " +
                     to_string(shape_));
  return shape_[axis];
}

template <typename T> void Tensor<T>::reshape(Shape shape) {
  check_extents(shape);
  if (numel(shape) != data_.size())
    throw ShapeError("cannot reshape " + to_string(shape_) + " to " +
                     to_string(shape));
  shape_ = std::move(shape);
}

template <typename T> Tensor<T> Tensor<T>::reshaped(Shape shape) const & {
  Tensor copy = *this;
  copy.reshape(std::move(shape));
  return copy;
}

template <typename T> Tensor<T> Tensor<T>::reshaped(Shape shape) && {
  reshape(std::move(shape));
  return std::move(*this);
}

template <typename T> void Tensor<T>::fill(T v) {
  std::fill(data_.begin(), data_.end(), v);
}

template class Tensor<float>;
template class Tensor<double>;

} // namespace lasd
