#pragma once

#include <cstddef>

#include <Eigen/Core>

namespace decorr::detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using CMapMat = Eigen::Map<const RowMat<T>>;

// C(m x n) = beta*C + op(A) * op(B), all row-major with dense strides.
// op(A) is m x k, op(B) is k x n.
template <class T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a,
          const T* b, T* c, T beta) {
  const auto M = static_cast<Eigen::Index>(m), N = static_cast<Eigen::Index>(n),
             K = static_cast<Eigen::Index>(k);
  MapMat<T> C(c, M, N);
  if (beta == T{0}) C.setZero();
  else if (beta != T{1}) C *= beta;
  if (!trans_a && !trans_b) {
    C.noalias() += CMapMat<T>(a, M, K) * CMapMat<T>(b, K, N);
  } else if (trans_a && !trans_b) {
    C.noalias() += CMapMat<T>(a, K, M).transpose() * CMapMat<T>(b, K, N);
  } else if (!trans_a && trans_b) {
    C.noalias() += CMapMat<T>(a, M, K) * CMapMat<T>(b, N, K).transpose();
  } else {
    C.noalias() += CMapMat<T>(a, K, M).transpose() * CMapMat<T>(b, N, K).transpose();
  }
}

}  // namespace decorr::detail
