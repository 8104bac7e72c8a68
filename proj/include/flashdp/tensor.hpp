#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "flashdp/errors.hpp"

namespace flashdp {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

/// Dense row-major tensor of doubles.
///
/// All extents are >= 1 and the flat buffer always holds exactly
/// prod(extents) elements. Rank 2 and 3 accessors cover what the linear-layer
/// workflows need (X is BxTxP, dY is BxTxD, W and its gradient are DxP).
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    validate_extents();
    data_.assign(shape_numel(shape_), 0.0);
  }

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate_extents();
    if (data_.size() != shape_numel(shape_)) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
    }
  }

  /// Builds a matrix from nested rows; all rows must have the same length.
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw ShapeError("ragged matrix literal");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(data));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t extent(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  double at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

  double& at(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  double at(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  bool operator==(const Tensor&) const = default;

 private:
  void validate_extents() const {
    if (shape_.empty()) throw ShapeError("tensor must have rank >= 1");
    for (auto e : shape_) {
      if (e == 0) throw ShapeError("tensor extents must be >= 1, got " + shape_str(shape_));
    }
  }

  Shape shape_;
  std::vector<double> data_;
};

namespace detail {

inline void require_matrix(const Tensor& m, const char* what) {
  if (m.rank() != 2) {
    throw ShapeError(std::string(what) + " must be a matrix, got " + shape_str(m.shape()));
  }
}

}  // namespace detail

/// c = a * b with the canonical loop order (row, column, inner index).
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_matrix(a, "matmul lhs");
  detail::require_matrix(b, "matmul rhs");
  if (a.extent(1) != b.extent(0)) {
    throw ShapeError("matmul inner extents differ: " + shape_str(a.shape()) + " * " +
                     shape_str(b.shape()));
  }
  const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
  Tensor c({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t l = 0; l < k; ++l) acc += a.at(i, l) * b.at(l, j);
      c.at(i, j) = acc;
    }
  }
  return c;
}

/// Explicit transposed copy.
inline Tensor transpose(const Tensor& m) {
  detail::require_matrix(m, "transpose input");
  const std::size_t r = m.extent(0), c = m.extent(1);
  Tensor t({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) t.at(j, i) = m.at(i, j);
  return t;
}

/// Per-sample weight gradient of a linear layer: G[d][p] = sum_t dY[t][d] * X[t][p].
inline Tensor per_sample_grad(const Tensor& dy_b, const Tensor& x_b) {
  detail::require_matrix(dy_b, "per_sample_grad dY");
  detail::require_matrix(x_b, "per_sample_grad X");
  if (dy_b.extent(0) != x_b.extent(0)) {
    throw ShapeError("per_sample_grad sequence extents differ: dY " + shape_str(dy_b.shape()) +
                     " vs X " + shape_str(x_b.shape()));
  }
  const std::size_t steps = dy_b.extent(0), out = dy_b.extent(1), in = x_b.extent(1);
  Tensor g({out, in});
  for (std::size_t d = 0; d < out; ++d) {
    for (std::size_t p = 0; p < in; ++p) {
      double acc = 0.0;
      for (std::size_t t = 0; t < steps; ++t) acc += dy_b.at(t, d) * x_b.at(t, p);
      g.at(d, p) = acc;
    }
  }
  return g;
}

inline double frob_norm_sq(std::span<const double> values) {
  double acc = 0.0;
  for (double v : values) acc += v * v;
  return acc;
}

inline double frob_norm_sq(const Tensor& m) { return frob_norm_sq(m.data()); }

/// Copies sample `b` out of a rank-3 tensor as a matrix.
inline Tensor sample_slice(const Tensor& t, std::size_t b) {
  if (t.rank() != 3) throw ShapeError("sample_slice expects rank 3, got " + shape_str(t.shape()));
  if (b >= t.extent(0)) throw ShapeError("sample index out of range for " + shape_str(t.shape()));
  const std::size_t rows = t.extent(1), cols = t.extent(2);
  const auto first = t.data().begin() + static_cast<std::ptrdiff_t>(b * rows * cols);
  return Tensor({rows, cols}, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(rows * cols)));
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("max_abs_diff shapes differ: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] > b[i] ? a[i] - b[i] : b[i] - a[i];
    if (d > worst || d != d) worst = d;
  }
  return worst;
}

}  // namespace flashdp
