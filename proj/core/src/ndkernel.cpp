#include "qlab/ndkernel.hpp"

#include <Eigen/Core>

namespace qlab::nd {

namespace {

template <class T>
using EigenRowMajor = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using ConstMap = Eigen::Map<const EigenRowMajor<T>, Eigen::Unaligned, Eigen::OuterStride<>>;
template <class T>
using MutMap = Eigen::Map<EigenRowMajor<T>, Eigen::Unaligned, Eigen::OuterStride<>>;

template <class T>
ConstMap<T> map(ConstView<T> v) {
  return ConstMap<T>(v.ptr, static_cast<Eigen::Index>(v.rows), static_cast<Eigen::Index>(v.cols),
                     Eigen::OuterStride<>(static_cast<Eigen::Index>(v.ld)));
}

template <class T>
MutMap<T> map(View<T> v) {
  return MutMap<T>(v.ptr, static_cast<Eigen::Index>(v.rows), static_cast<Eigen::Index>(v.cols),
                   Eigen::OuterStride<>(static_cast<Eigen::Index>(v.ld)));
}

void check_symmetric(const Matrix& h, const char* who) {
  if (h.rows() != h.cols()) {
    throw ContractViolation(std::string(who) + ": matrix is not square");
  }
  double scale_ref = 0.0;
  for (double v : h.data()) scale_ref = std::max(scale_ref, std::abs(v));
  const double tol = 1e-10 * std::max(scale_ref, 1e-300);
  for (std::size_t i = 0; i < h.rows(); ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      if (std::abs(h(i, j) - h(j, i)) > tol) {
        throw ContractViolation(std::string(who) + ": matrix is not symmetric at (" +
                                std::to_string(i) + "," + std::to_string(j) + ")");
      }
    }
  }
}

}  // namespace

template <class T>
void gemm(Trans ta, Trans tb, T alpha, ConstView<T> a, ConstView<T> b, T beta, View<T> c) {
  const std::size_t m = ta == Trans::kYes ? a.cols : a.rows;
  const std::size_t k = ta == Trans::kYes ? a.rows : a.cols;
  const std::size_t kb = tb == Trans::kYes ? b.cols : b.rows;
  const std::size_t n = tb == Trans::kYes ? b.rows : b.cols;
  if (k != kb || c.rows != m || c.cols != n) {
    throw ContractViolation("gemm: dimension mismatch (" + std::to_string(m) + "x" +
                            std::to_string(k) + " * " + std::to_string(kb) + "x" +
                            std::to_string(n) + " -> " + std::to_string(c.rows) + "x" +
                            std::to_string(c.cols) + ")");
  }
  auto cm = map(c);
  if (beta == T{0}) {
    cm.setZero();
  } else if (beta != T{1}) {
    cm *= beta;
  }
  if (m == 0 || n == 0 || k == 0) return;
  auto am = map(a);
  auto bm = map(b);
  if (ta == Trans::kNo && tb == Trans::kNo) {
    cm.noalias() += alpha * am * bm;
  } else if (ta == Trans::kNo && tb == Trans::kYes) {
    cm.noalias() += alpha * am * bm.transpose();
  } else if (ta == Trans::kYes && tb == Trans::kNo) {
    cm.noalias() += alpha * am.transpose() * bm;
  } else {
    cm.noalias() += alpha * am.transpose() * bm.transpose();
  }
}

template <class T>
BasicMatrix<T> matmul(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
  if (a.cols() != b.rows()) {
    throw ContractViolation("matmul: a.cols (" + std::to_string(a.cols()) + ") != b.rows (" +
                            std::to_string(b.rows()) + ")");
  }
  BasicMatrix<T> c(a.rows(), b.cols());
  gemm<T>(Trans::kNo, Trans::kNo, T{1}, a, b, T{0}, c);
  return c;
}

template <class T>
BasicMatrix<T> matmul_nt(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
  if (a.cols() != b.cols()) throw ContractViolation("matmul_nt: inner dimension mismatch");
  BasicMatrix<T> c(a.rows(), b.rows());
  gemm<T>(Trans::kNo, Trans::kYes, T{1}, a, b, T{0}, c);
  return c;
}

template <class T>
BasicMatrix<T> matmul_tn(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
  if (a.rows() != b.rows()) throw ContractViolation("matmul_tn: inner dimension mismatch");
  BasicMatrix<T> c(a.cols(), b.cols());
  gemm<T>(Trans::kYes, Trans::kNo, T{1}, a, b, T{0}, c);
  return c;
}

template <class T>
BasicMatrix<T> transpose(const BasicMatrix<T>& a) {
  BasicMatrix<T> t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  }
  return t;
}

Matrix cholesky(const Matrix& h) {
  check_symmetric(h, "cholesky");
  const std::size_t n = h.rows();
  Matrix l(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    double d = h(j, j);
    for (std::size_t k = 0; k < j; ++k) d -= l(j, k) * l(j, k);
    if (!(d > 0.0)) {
      throw FactorizationError(j, "cholesky: non-positive pivot " + std::to_string(d) +
                                      " at index " + std::to_string(j));
    }
    const double ljj = std::sqrt(d);
    l(j, j) = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = h(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
      l(i, j) = s / ljj;
    }
  }
  return l;
}

Matrix cholesky_upper(const Matrix& h) { return transpose(cholesky(h)); }

Matrix cholesky_solve(const Matrix& lower, const Matrix& b) {
  const std::size_t n = lower.rows();
  if (b.rows() != n) throw ContractViolation("cholesky_solve: row mismatch");
  Matrix x = b;
  for (std::size_t c = 0; c < b.cols(); ++c) {
    // L y = b
    for (std::size_t i = 0; i < n; ++i) {
      double s = x(i, c);
      for (std::size_t k = 0; k < i; ++k) s -= lower(i, k) * x(k, c);
      x(i, c) = s / lower(i, i);
    }
    // Lᵀ x = y
    for (std::size_t ii = n; ii-- > 0;) {
      double s = x(ii, c);
      for (std::size_t k = ii + 1; k < n; ++k) s -= lower(k, ii) * x(k, c);
      x(ii, c) = s / lower(ii, ii);
    }
  }
  return x;
}

Matrix solve_spd(const Matrix& h, const Matrix& b) {
  if (h.rows() != b.rows()) throw ContractViolation("solve_spd: h.rows != b.rows");
  return cholesky_solve(cholesky(h), b);
}

Matrix spd_inverse(const Matrix& h) {
  Matrix inv = solve_spd(h, Matrix::identity(h.rows()));
  for (std::size_t i = 0; i < inv.rows(); ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      const double avg = 0.5 * (inv(i, j) + inv(j, i));
      inv(i, j) = avg;
      inv(j, i) = avg;
    }
  }
  return inv;
}

template <class T>
BasicMatrix<T> add(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
  if (!a.same_shape(b)) throw ContractViolation("add: shape mismatch");
  BasicMatrix<T> c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c.data()[i] += b.data()[i];
  return c;
}

template <class T>
BasicMatrix<T> subtract(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
  if (!a.same_shape(b)) throw ContractViolation("subtract: shape mismatch");
  BasicMatrix<T> c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c.data()[i] -= b.data()[i];
  return c;
}

template <class T>
BasicMatrix<T> scale(const BasicMatrix<T>& a, T s) {
  BasicMatrix<T> c = a;
  for (T& v : c.data()) v *= s;
  return c;
}

#define QLAB_INSTANTIATE(T)                                                                  \
  template void gemm<T>(Trans, Trans, T, ConstView<T>, ConstView<T>, T, View<T>);            \
  template BasicMatrix<T> matmul<T>(const BasicMatrix<T>&, const BasicMatrix<T>&);           \
  template BasicMatrix<T> matmul_nt<T>(const BasicMatrix<T>&, const BasicMatrix<T>&);        \
  template BasicMatrix<T> matmul_tn<T>(const BasicMatrix<T>&, const BasicMatrix<T>&);        \
  template BasicMatrix<T> transpose<T>(const BasicMatrix<T>&);                               \
  template BasicMatrix<T> add<T>(const BasicMatrix<T>&, const BasicMatrix<T>&);              \
  template BasicMatrix<T> subtract<T>(const BasicMatrix<T>&, const BasicMatrix<T>&);         \
  template BasicMatrix<T> scale<T>(const BasicMatrix<T>&, T);

QLAB_INSTANTIATE(float)
QLAB_INSTANTIATE(double)

#undef QLAB_INSTANTIATE

}  // namespace qlab::nd
