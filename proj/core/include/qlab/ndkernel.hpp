#pragma once

// Minimal dense linear algebra. Row-major storage everywhere.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "qlab/error.hpp"

namespace qlab::nd {

template <class T>
class BasicMatrix {
 public:
  using value_type = T;

  BasicMatrix() = default;
  BasicMatrix(std::size_t rows, std::size_t cols, T fill = T{0})
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  BasicMatrix(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ContractViolation("BasicMatrix: data length " + std::to_string(data_.size()) +
                              " != " + std::to_string(rows_) + "x" + std::to_string(cols_));
    }
  }

  static BasicMatrix identity(std::size_t n) {
    BasicMatrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = T{1};
    return m;
  }

  /// Literal construction, e.g. `Matrix::from_rows({{1, 2}, {3, 4}})`.
  static BasicMatrix from_rows(std::initializer_list<std::initializer_list<T>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    BasicMatrix m(r, c);
    std::size_t i = 0;
    for (const auto& row : rows) {
      if (row.size() != c) throw ContractViolation("from_rows: ragged rows");
      std::copy(row.begin(), row.end(), m.row(i++).begin());
    }
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  std::span<T> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

  template <class U>
  BasicMatrix<U> cast() const {
    std::vector<U> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(),
                   [](T v) { return static_cast<U>(v); });
    return BasicMatrix<U>(rows_, cols_, std::move(out));
  }

  bool same_shape(const BasicMatrix& o) const noexcept {
    return rows_ == o.rows_ && cols_ == o.cols_;
  }

  friend bool operator==(const BasicMatrix&, const BasicMatrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

using Matrix = BasicMatrix<double>;
using MatrixF = BasicMatrix<float>;

/// Strided read-only window into row-major storage (leading dimension `ld`).
template <class T>
struct ConstView {
  const T* ptr = nullptr;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t ld = 0;

  ConstView() = default;
  ConstView(const T* p, std::size_t r, std::size_t c, std::size_t stride)
      : ptr(p), rows(r), cols(c), ld(stride) {}
  ConstView(const BasicMatrix<T>& m)  // NOLINT(google-explicit-constructor)
      : ptr(m.data().data()), rows(m.rows()), cols(m.cols()), ld(m.cols()) {}

  const T& operator()(std::size_t r, std::size_t c) const noexcept { return ptr[r * ld + c]; }
  ConstView block(std::size_t r0, std::size_t c0, std::size_t nr, std::size_t nc) const noexcept {
    return {ptr + r0 * ld + c0, nr, nc, ld};
  }
};

/// Strided mutable window into row-major storage.
template <class T>
struct View {
  T* ptr = nullptr;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t ld = 0;

  View() = default;
  View(T* p, std::size_t r, std::size_t c, std::size_t stride)
      : ptr(p), rows(r), cols(c), ld(stride) {}
  View(BasicMatrix<T>& m)  // NOLINT(google-explicit-constructor)
      : ptr(m.data().data()), rows(m.rows()), cols(m.cols()), ld(m.cols()) {}

  T& operator()(std::size_t r, std::size_t c) const noexcept { return ptr[r * ld + c]; }
  View block(std::size_t r0, std::size_t c0, std::size_t nr, std::size_t nc) const noexcept {
    return {ptr + r0 * ld + c0, nr, nc, ld};
  }
  operator ConstView<T>() const noexcept { return {ptr, rows, cols, ld}; }  // NOLINT
};

enum class Trans : bool { kNo = false, kYes = true };

/// c = alpha * op(a) * op(b) + beta * c, with op selected explicitly per operand.
/// Shapes are checked after applying the transposes. Deterministic for fixed inputs.
template <class T>
void gemm(Trans ta, Trans tb, T alpha, ConstView<T> a, ConstView<T> b, T beta, View<T> c);

/// Standard product a * b.
template <class T>
BasicMatrix<T> matmul(const BasicMatrix<T>& a, const BasicMatrix<T>& b);

/// a * bᵀ without materializing the transpose.
template <class T>
BasicMatrix<T> matmul_nt(const BasicMatrix<T>& a, const BasicMatrix<T>& b);

/// aᵀ * b without materializing the transpose.
template <class T>
BasicMatrix<T> matmul_tn(const BasicMatrix<T>& a, const BasicMatrix<T>& b);

template <class T>
BasicMatrix<T> transpose(const BasicMatrix<T>& a);

/// Lower-triangular L with positive diagonal such that L·Lᵀ = h.
/// Throws FactorizationError carrying the index of the first non-positive pivot.
Matrix cholesky(const Matrix& h);

/// Upper-triangular U with positive diagonal such that Uᵀ·U = h.
Matrix cholesky_upper(const Matrix& h);

/// Solves L·Lᵀ·x = b given the lower factor.
Matrix cholesky_solve(const Matrix& lower, const Matrix& b);

/// Solves h·x = b for symmetric positive definite h.
Matrix solve_spd(const Matrix& h, const Matrix& b);

/// h⁻¹ for symmetric positive definite h, symmetrized.
Matrix spd_inverse(const Matrix& h);

template <class T>
double frobenius_norm(const BasicMatrix<T>& a) {
  double acc = 0.0;
  for (T v : a.data()) acc += static_cast<double>(v) * static_cast<double>(v);
  return std::sqrt(acc);
}

/// Sum of squares accumulated in 64-bit.
template <class T>
double squared_norm(std::span<const T> xs) {
  double acc = 0.0;
  for (T v : xs) acc += static_cast<double>(v) * static_cast<double>(v);
  return acc;
}

template <class T>
double max_abs_diff(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
  if (!a.same_shape(b)) throw ContractViolation("max_abs_diff: shape mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    m = std::max(m, std::abs(static_cast<double>(a.data()[i]) - static_cast<double>(b.data()[i])));
  }
  return m;
}

template <class T>
bool all_finite(std::span<const T> xs) {
  return std::all_of(xs.begin(), xs.end(), [](T v) { return std::isfinite(v); });
}

template <class T>
BasicMatrix<T> add(const BasicMatrix<T>& a, const BasicMatrix<T>& b);
template <class T>
BasicMatrix<T> subtract(const BasicMatrix<T>& a, const BasicMatrix<T>& b);
template <class T>
BasicMatrix<T> scale(const BasicMatrix<T>& a, T s);

}  // namespace qlab::nd
