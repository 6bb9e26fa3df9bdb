#pragma once

#include <cstddef>

#include <Eigen/Core>

namespace mcompat::detail {

template <class T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using RowMap = Eigen::Map<RowMatrix<T>, Eigen::Unaligned, Eigen::OuterStride<>>;
template <class T>
using ConstRowMap = Eigen::Map<const RowMatrix<T>, Eigen::Unaligned, Eigen::OuterStride<>>;

template <class T>
ConstRowMap<T> view(const T* p, std::size_t rows, std::size_t cols, std::size_t ld) {
  return ConstRowMap<T>(p, Eigen::Index(rows), Eigen::Index(cols),
                        Eigen::OuterStride<>(Eigen::Index(ld)));
}

template <class T>
RowMap<T> view(T* p, std::size_t rows, std::size_t cols, std::size_t ld) {
  return RowMap<T>(p, Eigen::Index(rows), Eigen::Index(cols), Eigen::OuterStride<>(Eigen::Index(ld)));
}

// Row-major GEMM: C (m x n) (+)= op(A) * op(B), op = optional transpose.
// A is stored as m x k (or k x m when trans_a), B as k x n (or n x k).
template <class T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a,
          std::size_t lda, const T* b, std::size_t ldb, T* c, std::size_t ldc, bool accumulate) {
  auto C = view(c, m, n, ldc);
  auto run = [&](const auto& A, const auto& B) {
    if (accumulate)
      C.noalias() += A * B;
    else
      C.noalias() = A * B;
  };
  if (!trans_a && !trans_b)
    run(view(a, m, k, lda), view(b, k, n, ldb));
  else if (!trans_a && trans_b)
    run(view(a, m, k, lda), view(b, n, k, ldb).transpose());
  else if (trans_a && !trans_b)
    run(view(a, k, m, lda).transpose(), view(b, k, n, ldb));
  else
    run(view(a, k, m, lda).transpose(), view(b, n, k, ldb).transpose());
}

}  // namespace mcompat::detail
