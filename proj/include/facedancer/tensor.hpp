// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "facedancer/error.hpp"

namespace facedancer {

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::int64_t{1},
                         std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ')';
  return os.str();
}

// Dense row-major array. Image batches use NCHW layout.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0))
      : shape_(std::move(shape)), data_(static_cast<std::size_t>(numel(shape_)), fill) {}
  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<std::int64_t>(data_.size()) != numel(shape_))
      throw ShapeMismatch("tensor data size " + std::to_string(data_.size()) +
                          " does not match shape " + to_string(shape_));
  }

  static Tensor scalar(T v) { return Tensor(Shape{1}, v); }

  const Shape& shape() const noexcept { return shape_; }
  int rank() const noexcept { return static_cast<int>(shape_.size()); }
  std::int64_t dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  std::int64_t size() const noexcept { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const noexcept { return data_.empty(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> span() & noexcept { return data_; }
  std::span<const T> span() const& noexcept { return data_; }
  void span() && = delete;  // would dangle
  const std::vector<T>& vec() const noexcept { return data_; }

  T& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  const T& operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  T& at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) {
    return data_[static_cast<std::size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
  }
  const T& at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
    return data_[static_cast<std::size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
  }

  T item() const {
    if (data_.size() != 1) throw ShapeMismatch("item() on tensor of shape " + to_string(shape_));
    return data_[0];
  }

  Tensor reshaped(Shape shape) const& {
    Tensor out = *this;
    out.reshape(std::move(shape));
    return out;
  }
  Tensor reshaped(Shape shape) && {
    reshape(std::move(shape));
    return std::move(*this);
  }
  void reshape(Shape shape) {
    if (numel(shape) != size())
      throw ShapeMismatch("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
    shape_ = std::move(shape);
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  // Sample n of a batch as a tensor with leading dimension 1.
  Tensor sample(std::int64_t n) const {
    Shape s = shape_;
    s[0] = 1;
    const std::int64_t stride = numel(s);
    std::vector<T> out(data_.begin() + n * stride, data_.begin() + (n + 1) * stride);
    return Tensor(std::move(s), std::move(out));
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

// Stacks equally shaped tensors along a new leading axis, or concatenates
// along axis 0 when every part already carries a batch dimension of 1.
template <typename T>
Tensor<T> stack_batch(std::span<const Tensor<T>> parts) {
  if (parts.empty()) throw ShapeMismatch("stack_batch of zero tensors");
  Shape s = parts[0].shape();
  const bool has_batch = s.size() == 4 && s[0] == 1;
  Shape out_shape = has_batch ? s : Shape{};
  if (!has_batch) {
    out_shape.push_back(1);
    out_shape.insert(out_shape.end(), s.begin(), s.end());
  }
  out_shape[0] = static_cast<std::int64_t>(parts.size());
  std::vector<T> data;
  data.reserve(static_cast<std::size_t>(numel(out_shape)));
  for (const auto& p : parts) {
    if (p.shape() != s) throw ShapeMismatch("stack_batch shape mismatch");
    data.insert(data.end(), p.vec().begin(), p.vec().end());
  }
  return Tensor<T>(std::move(out_shape), std::move(data));
}

}  // namespace facedancer
