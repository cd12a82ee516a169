#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "decorr/detail/gemm.hpp"
#include "decorr/ops.hpp"

namespace decorr {

template <class T>
struct QrResult {
  Tensor<T> q;  // N x M, orthonormal columns
  Tensor<T> r;  // M x M, upper triangular
};

// Householder QR of a tall matrix. Forward only; the result never enters a tape.
template <class T>
QrResult<T> qr_factor(const Tensor<T>& a, bool compute_q = true) {
  if (a.rank() != 2) throw DimensionError("qr_factor needs a matrix, got " + shape_str(a.shape()));
  const std::size_t n = a.dim(0), m = a.dim(1);
  if (n < m)
    throw DimensionError("qr_factor needs rows >= cols, got " + shape_str(a.shape()));

  // Column-major working copy so reflections stream through contiguous memory.
  std::vector<T> w(n * m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) w[j * n + i] = a.data()[i * m + j];

  std::vector<std::vector<T>> reflectors(m);
  for (std::size_t k = 0; k < m; ++k) {
    T* col = &w[k * n];
    T norm{0};
    for (std::size_t i = k; i < n; ++i) norm += col[i] * col[i];
    norm = std::sqrt(norm);
    auto& v = reflectors[k];
    v.assign(col + k, col + n);
    if (norm == T{0}) {
      v.clear();  // zero column: identity reflector, R_kk = 0
      continue;
    }
    const T alpha = col[k] > T{0} ? -norm : norm;
    v[0] -= alpha;
    T vnorm{0};
    for (auto x : v) vnorm += x * x;
    if (vnorm == T{0}) {
      v.clear();
      continue;
    }
    vnorm = std::sqrt(vnorm);
    for (auto& x : v) x /= vnorm;
    for (std::size_t j = k; j < m; ++j) {
      T* cj = &w[j * n];
      T dot{0};
      for (std::size_t i = k; i < n; ++i) dot += v[i - k] * cj[i];
      dot *= T{2};
      for (std::size_t i = k; i < n; ++i) cj[i] -= dot * v[i - k];
    }
  }

  Tensor<T> r(Shape{m, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = i; j < m; ++j) r.data()[i * m + j] = w[j * n + i];

  Tensor<T> q(Shape{n, m});
  if (compute_q) {
    // Q = H_0 H_1 ... H_{m-1} applied to the first m columns of I.
    std::vector<T> qc(n * m, T{0});
    for (std::size_t j = 0; j < m; ++j) qc[j * n + j] = T{1};
    for (std::size_t kk = m; kk-- > 0;) {
      const auto& v = reflectors[kk];
      if (v.empty()) continue;
      for (std::size_t j = 0; j < m; ++j) {
        T* cj = &qc[j * n];
        T dot{0};
        for (std::size_t i = kk; i < n; ++i) dot += v[i - kk] * cj[i];
        dot *= T{2};
        for (std::size_t i = kk; i < n; ++i) cj[i] -= dot * v[i - kk];
      }
    }
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) q.data()[i * m + j] = qc[j * n + i];
  }
  return {std::move(q), std::move(r)};
}

namespace detail {

// Lower Cholesky factor of a symmetric matrix (reads the lower triangle).
template <class T>
std::vector<T> cholesky_lower(const std::vector<T>& a, std::size_t m) {
  std::vector<T> l(m * m, T{0});
  for (std::size_t j = 0; j < m; ++j) {
    T d = a[j * m + j];
    for (std::size_t k = 0; k < j; ++k) d -= l[j * m + k] * l[j * m + k];
    if (!(d > T{0}))
      throw RankDeficiencyError("cholesky: non-positive pivot " + std::to_string(static_cast<double>(d)) +
                                " at column " + std::to_string(j));
    const T ljj = std::sqrt(d);
    l[j * m + j] = ljj;
    for (std::size_t i = j + 1; i < m; ++i) {
      T s = a[i * m + j];
      for (std::size_t k = 0; k < j; ++k) s -= l[i * m + k] * l[j * m + k];
      l[i * m + j] = s / ljj;
    }
  }
  return l;
}

// (L L^T)^{-1} from the lower factor.
template <class T>
std::vector<T> inverse_from_cholesky(const std::vector<T>& l, std::size_t m) {
  // Linv = L^{-1} by forward substitution, column by column.
  std::vector<T> linv(m * m, T{0});
  for (std::size_t c = 0; c < m; ++c) {
    for (std::size_t i = c; i < m; ++i) {
      T s = (i == c) ? T{1} : T{0};
      for (std::size_t k = c; k < i; ++k) s -= l[i * m + k] * linv[k * m + c];
      linv[i * m + c] = s / l[i * m + i];
    }
  }
  std::vector<T> inv(m * m);
  gemm<T>(true, false, m, m, m, linv.data(), linv.data(), inv.data(), T{0});
  return inv;
}

}  // namespace detail

// Inverse of a symmetric positive definite matrix via Cholesky. Only the
// symmetric part of the input is used, so the gradient is symmetrised.
template <class T>
Tensor<T> chol_inverse(const Tensor<T>& a) {
  if (a.rank() != 2 || a.dim(0) != a.dim(1))
    throw DimensionError("chol_inverse needs a square matrix, got " + shape_str(a.shape()));
  const std::size_t m = a.dim(0);
  std::vector<T> sym(m * m);
  auto av = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j) sym[i * m + j] = T{0.5} * (av[i * m + j] + av[j * m + i]);
  const auto l = detail::cholesky_lower(sym, m);
  Tensor<T> y(Shape{m, m}, detail::inverse_from_cholesky(l, m));
  if (detail::wants_grad(a)) {
    detail::record(
        y,
        [an = a.node(), yn = y.node(), m] {
          // dA = -Y G Y, then symmetrised.
          std::vector<T> tmp(m * m), full(m * m);
          detail::gemm<T>(false, false, m, m, m, yn->value.data(), yn->grad.data(), tmp.data(), T{0});
          detail::gemm<T>(false, false, m, m, m, tmp.data(), yn->value.data(), full.data(), T{0});
          auto g = an->grad_buffer();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < m; ++j)
              g[i * m + j] -= T{0.5} * (full[i * m + j] + full[j * m + i]);
        },
        a);
  }
  return y;
}

}  // namespace decorr
