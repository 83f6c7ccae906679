// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "largo/error.hpp"

namespace largo {

inline constexpr std::size_t kMaxRank = 5;

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline void check_shape(const Shape& shape) {
  if (shape.empty() || shape.size() > kMaxRank)
    throw DimensionError("tensor rank must be in [1, 5], got shape " + shape_str(shape));
  for (auto d : shape)
    if (d == 0) throw DimensionError("zero-sized dimension in shape " + shape_str(shape));
}

/// Dense row-major array with an explicit shape.
///
/// Scalars are represented with shape {1}. The element type is a template
/// parameter so that checkpoint export can produce `Tensor<float>`; all
/// arithmetic in the library runs on `DenseTensor` (double).
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{}) : shape_(std::move(shape)) {
    check_shape(shape_);
    data_.assign(shape_numel(shape_), fill);
  }

  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape(shape_);
    if (data_.size() != shape_numel(shape_))
      throw DimensionError("buffer of length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_str(shape_));
  }

  static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }

  static Tensor vector(std::initializer_list<T> v) {
    return Tensor(Shape{v.size()}, std::vector<T>(v));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  T* raw() noexcept { return data_.data(); }
  const T* raw() const noexcept { return data_.data(); }
  std::vector<T>& buffer() noexcept { return data_; }
  const std::vector<T>& buffer() const noexcept { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  template <class... I>
  T& at(I... idx) {
    return data_[offset({static_cast<std::size_t>(idx)...})];
  }
  template <class... I>
  const T& at(I... idx) const {
    return data_[offset({static_cast<std::size_t>(idx)...})];
  }

  std::size_t offset(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != shape_.size())
      throw IndexError("index rank " + std::to_string(idx.size()) + " vs tensor rank " +
                       std::to_string(shape_.size()));
    std::size_t off = 0;
    std::size_t axis = 0;
    for (auto i : idx) {
      if (i >= shape_[axis])
        throw IndexError("index " + std::to_string(i) + " out of range for axis " +
                         std::to_string(axis) + " of shape " + shape_str(shape_));
      off = off * shape_[axis] + i;
      ++axis;
    }
    return off;
  }

  /// Same buffer, new shape of equal element count.
  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != size())
      throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    return Tensor(std::move(shape), data_);
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor& operator+=(const Tensor& o) {
    require_same_shape(o, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  Tensor& operator-=(const Tensor& o) {
    require_same_shape(o, "-=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
    return *this;
  }
  Tensor& operator*=(T s) {
    for (auto& v : data_) v *= s;
    return *this;
  }

  friend Tensor operator+(Tensor a, const Tensor& b) { return a += b; }
  friend Tensor operator-(Tensor a, const Tensor& b) { return a -= b; }
  friend Tensor operator*(Tensor a, T s) { return a *= s; }
  friend Tensor operator*(T s, Tensor a) { return a *= s; }

  /// Bitwise equality of shape and contents.
  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  void require_same_shape(const Tensor& o, const char* op) const {
    if (shape_ != o.shape_)
      throw DimensionError(std::string("shape mismatch in ") + op + ": " + shape_str(shape_) +
                           " vs " + shape_str(o.shape_));
  }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

using DenseTensor = Tensor<double>;

inline double sum(const DenseTensor& t) {
  double s = 0.0;
  for (double v : t.data()) s += v;
  return s;
}

inline double dot(const DenseTensor& a, const DenseTensor& b) {
  a.require_same_shape(b, "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double max_abs(const DenseTensor& t) {
  double m = 0.0;
  for (double v : t.data()) m = std::max(m, std::abs(v));
  return m;
}

/// max |a-b| / max(max|b|, tiny): a relative error normalized by the reference scale.
inline double relative_error(const DenseTensor& a, const DenseTensor& ref) {
  a.require_same_shape(ref, "relative_error");
  double diff = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) diff = std::max(diff, std::abs(a[i] - ref[i]));
  return diff / std::max(max_abs(ref), 1e-300);
}

inline double max_abs_diff(const DenseTensor& a, const DenseTensor& b) {
  a.require_same_shape(b, "max_abs_diff");
  double diff = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) diff = std::max(diff, std::abs(a[i] - b[i]));
  return diff;
}

}  // namespace largo
