#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "oodprobe/errors.hpp"

namespace oodprobe::nn {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_to_string(const Shape& shape);

/// Dense row-major array tagged with its shape.
template <typename T>
struct Tensor {
  Shape shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(Shape s, T fill = T{0}) : shape(std::move(s)), data(shape_numel(shape), fill) {
    for (auto d : shape) {
      if (d == 0) throw DimensionError("tensor dims must be positive, got " + shape_to_string(shape));
    }
  }
  Tensor(Shape s, std::vector<T> values) : shape(std::move(s)), data(std::move(values)) {
    if (data.size() != shape_numel(shape)) {
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_to_string(shape));
    }
  }

  std::size_t numel() const noexcept { return data.size(); }
  std::size_t rank() const noexcept { return shape.size(); }
  std::size_t dim(std::size_t axis) const { return shape.at(axis); }
  bool empty() const noexcept { return data.empty(); }

  std::span<T> values() noexcept { return data; }
  std::span<const T> values() const noexcept { return data; }

  T& operator[](std::size_t i) noexcept { return data[i]; }
  const T& operator[](std::size_t i) const noexcept { return data[i]; }

  // NCHW accessors.
  T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data[((n * shape[1] + c) * shape[2] + h) * shape[3] + w];
  }
  const T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data[((n * shape[1] + c) * shape[2] + h) * shape[3] + w];
  }

  void fill(T v) { std::fill(data.begin(), data.end(), v); }

  bool all_finite() const {
    for (const T& v : data) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.assign(data.begin(), data.end());
    return out;
  }
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

/// Rows [begin, end) along axis 0.
template <typename T>
Tensor<T> slice_rows(const Tensor<T>& t, std::size_t begin, std::size_t end) {
  if (t.rank() == 0 || begin > end || end > t.shape[0]) {
    throw DimensionError("row slice [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") out of range for axis 0 of " + shape_to_string(t.shape));
  }
  const std::size_t row = t.numel() / t.shape[0];
  Tensor<T> out;
  out.shape = t.shape;
  out.shape[0] = end - begin;
  out.data.assign(t.data.begin() + static_cast<std::ptrdiff_t>(begin * row),
                  t.data.begin() + static_cast<std::ptrdiff_t>(end * row));
  return out;
}

/// Concatenate along axis 0; trailing dims must agree.
template <typename T>
Tensor<T> concat_rows(std::span<const Tensor<T>> parts) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  Tensor<T> out;
  out.shape = parts[0].shape;
  out.shape[0] = 0;
  for (const auto& p : parts) {
    if (p.rank() != out.rank() || !std::equal(p.shape.begin() + 1, p.shape.end(), out.shape.begin() + 1)) {
      throw DimensionError("concat shape mismatch: " + shape_to_string(p.shape) + " vs " +
                           shape_to_string(parts[0].shape));
    }
    out.shape[0] += p.shape[0];
    out.data.insert(out.data.end(), p.data.begin(), p.data.end());
  }
  return out;
}

/// Gather rows by index along axis 0.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& t, std::span<const std::size_t> rows) {
  const std::size_t row = t.numel() / t.shape[0];
  Tensor<T> out;
  out.shape = t.shape;
  out.shape[0] = rows.size();
  out.data.resize(rows.size() * row);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= t.shape[0]) throw DimensionError("gather index out of range on axis 0");
    std::copy_n(t.data.begin() + static_cast<std::ptrdiff_t>(rows[i] * row), row,
                out.data.begin() + static_cast<std::ptrdiff_t>(i * row));
  }
  return out;
}

}  // namespace oodprobe::nn
