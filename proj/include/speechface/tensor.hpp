// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "speechface/errors.hpp"

namespace speechface {

using Dims = std::vector<std::size_t>;

inline std::string dims_string(const Dims& dims) {
  std::string s = "[";
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(dims[i]);
  }
  return s + "]";
}

inline std::size_t dims_product(const Dims& dims) {
  return std::accumulate(dims.begin(), dims.end(), std::size_t{1},
                         std::multiplies<>());
}

/**
 * Dense row-major n-dimensional array. The last dimension is contiguous.
 *
 * T is float for training and inference, double when running gradient
 * checks against finite differences.
 */
/// Accumulator for reductions: at least double.
template <typename T>
using Accum = std::conditional_t<(sizeof(T) > sizeof(double)), T, double>;

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Dims dims, T fill = T(0))
      : dims_(std::move(dims)), data_(dims_product(dims_), fill) {
    check_dims();
  }

  Tensor(Dims dims, std::vector<T> data)
      : dims_(std::move(dims)), data_(std::move(data)) {
    check_dims();
    if (data_.size() != dims_product(dims_)) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match dims " + dims_string(dims_));
    }
  }

  const Dims& dims() const noexcept { return dims_; }
  std::size_t rank() const noexcept { return dims_.size(); }
  std::size_t dim(std::size_t axis) const { return dims_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  T* raw() noexcept { return data_.data(); }
  const T* raw() const noexcept { return data_.data(); }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  template <typename... Idx>
  T& at(Idx... idx) {
    return data_[offset({static_cast<std::size_t>(idx)...})];
  }
  template <typename... Idx>
  const T& at(Idx... idx) const {
    return data_[offset({static_cast<std::size_t>(idx)...})];
  }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  Tensor reshaped(Dims dims) const {
    if (dims_product(dims) != size()) {
      throw ShapeError("cannot reshape " + dims_string(dims_) + " to " +
                       dims_string(dims));
    }
    return Tensor(std::move(dims), data_);
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(),
                       [](T v) { return std::isfinite(v); });
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(dims_, std::move(out));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.dims_ == b.dims_ && a.data_ == b.data_;
  }

 private:
  void check_dims() const {
    for (auto d : dims_) {
      if (d == 0) throw ShapeError("tensor dims must be positive, got " + dims_string(dims_));
    }
  }

  std::size_t offset(std::initializer_list<std::size_t> idx) const {
    std::size_t off = 0;
    std::size_t axis = 0;
    for (auto i : idx) off = off * dims_[axis++] + i;
    return off;
  }

  Dims dims_;
  std::vector<T> data_;
};

/// In debug builds, report non-finite values as a checked failure.
template <typename T>
void debug_check_finite(const Tensor<T>& t, const char* where) {
#ifndef NDEBUG
  if (!t.all_finite()) throw Error(std::string("non-finite value in ") + where);
#else
  (void)t;
  (void)where;
#endif
}

/// Named trainable tensor with a gradient buffer of identical dims.
template <typename T>
struct ParamTensor {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  ParamTensor() = default;
  ParamTensor(std::string n, Tensor<T> v)
      : name(std::move(n)), value(std::move(v)), grad(value.dims()) {}

  void zero_grad() { grad.fill(T(0)); }
};

}  // namespace speechface
