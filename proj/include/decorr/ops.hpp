#pragma once

// Elementwise, reduction and shape ops with their backward rules.

#include <cmath>
#include <string>

#include "decorr/detail/gemm.hpp"
#include "decorr/tensor.hpp"

namespace decorr {

namespace detail {

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

// y = f(x) elementwise; dfdx(x, y) gives the local derivative.
template <class T, class F, class D>
Tensor<T> unary(const Tensor<T>& x, F f, D dfdx) {
  Tensor<T> y(x.shape());
  auto xv = x.data();
  auto yv = y.data();
  for (std::size_t i = 0; i < yv.size(); ++i) yv[i] = f(xv[i]);
  if (wants_grad(x)) {
    record(
        y,
        [xn = x.node(), yn = y.node(), dfdx] {
          auto gx = xn->grad_buffer();
          for (std::size_t i = 0; i < gx.size(); ++i)
            gx[i] += yn->grad[i] * dfdx(xn->value[i], yn->value[i]);
        },
        x);
  }
  return y;
}

}  // namespace detail

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  Tensor<T> y(a.shape());
  auto av = a.data(), bv = b.data();
  auto yv = y.data();
  for (std::size_t i = 0; i < yv.size(); ++i) yv[i] = av[i] + bv[i];
  if (detail::wants_grad(a, b)) {
    detail::record(
        y,
        [an = a.node(), bn = b.node(), yn = y.node()] {
          for (auto* n : {an.get(), bn.get()}) {
            if (!n->requires_grad) continue;
            auto g = n->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += yn->grad[i];
          }
        },
        a, b);
  }
  return y;
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor<T> y(a.shape());
  auto av = a.data(), bv = b.data();
  auto yv = y.data();
  for (std::size_t i = 0; i < yv.size(); ++i) yv[i] = av[i] - bv[i];
  if (detail::wants_grad(a, b)) {
    detail::record(
        y,
        [an = a.node(), bn = b.node(), yn = y.node()] {
          if (an->requires_grad) {
            auto g = an->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += yn->grad[i];
          }
          if (bn->requires_grad) {
            auto g = bn->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= yn->grad[i];
          }
        },
        a, b);
  }
  return y;
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor<T> y(a.shape());
  auto av = a.data(), bv = b.data();
  auto yv = y.data();
  for (std::size_t i = 0; i < yv.size(); ++i) yv[i] = av[i] * bv[i];
  if (detail::wants_grad(a, b)) {
    detail::record(
        y,
        [an = a.node(), bn = b.node(), yn = y.node()] {
          if (an->requires_grad) {
            auto g = an->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += yn->grad[i] * bn->value[i];
          }
          if (bn->requires_grad) {
            auto g = bn->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += yn->grad[i] * an->value[i];
          }
        },
        a, b);
  }
  return y;
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T s) {
  return detail::unary(x, [s](T v) { return s * v; }, [s](T, T) { return s; });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& x, T s) {
  return detail::unary(x, [s](T v) { return v + s; }, [](T, T) { return T{1}; });
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return v > T{0} ? v : T{0}; }, [](T v, T) { return v > T{0} ? T{1} : T{0}; });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary(
      x,
      [](T v) {
        if (v >= T{0}) return T{1} / (T{1} + std::exp(-v));
        const T e = std::exp(v);
        return e / (T{1} + e);
      },
      [](T, T y) { return y * (T{1} - y); });
}

template <class T>
Tensor<T> log(const Tensor<T>& x) {
  for (auto v : x.data())
    if (!(v > T{0}))
      throw DomainError("log of non-positive argument " + std::to_string(static_cast<double>(v)));
  return detail::unary(x, [](T v) { return std::log(v); }, [](T v, T) { return T{1} / v; });
}

template <class T>
Tensor<T> square(const Tensor<T>& x) {
  return detail::unary(x, [](T v) { return v * v; }, [](T v, T) { return T{2} * v; });
}

// Forward-only sign with sgn(0) = 0.
template <class T>
Tensor<T> sgn(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  auto xv = x.data();
  auto yv = y.data();
  for (std::size_t i = 0; i < yv.size(); ++i)
    yv[i] = static_cast<T>((xv[i] > T{0}) - (xv[i] < T{0}));
  return y;
}

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc{0};
  for (auto v : x.data()) acc += v;
  auto y = Tensor<T>::scalar(acc);
  if (detail::wants_grad(x)) {
    detail::record(
        y,
        [xn = x.node(), yn = y.node()] {
          auto g = xn->grad_buffer();
          const T gy = yn->grad[0];
          for (auto& v : g) v += gy;
        },
        x);
  }
  return y;
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T{1} / static_cast<T>(x.numel()));
}

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel_of(shape) != x.numel())
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  Tensor<T> y(std::move(shape), x.values());
  if (detail::wants_grad(x)) {
    detail::record(
        y,
        [xn = x.node(), yn = y.node()] {
          auto g = xn->grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += yn->grad[i];
        },
        x);
  }
  return y;
}

// Collapses all trailing dims: [N, ...] -> [N, prod(...)].
template <class T>
Tensor<T> flatten(const Tensor<T>& x) {
  const std::size_t n = x.dim(0);
  return reshape(x, Shape{n, x.numel() / n});
}

// Precision change that stays on the tape (gradients convert back).
template <class U, class T>
Tensor<U> cast(const Tensor<T>& x) {
  std::vector<U> v(x.numel());
  auto xv = x.data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<U>(xv[i]);
  Tensor<U> y(x.shape(), std::move(v));
  if (detail::wants_grad(x)) {
    y.node()->requires_grad = true;
    active_tape()->record({x.node()}, y.node(), [xn = x.node(), yn = y.node()] {
      auto g = xn->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += static_cast<T>(yn->grad[i]);
    });
  }
  return y;
}

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw DimensionError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<T> y(Shape{m, n});
  detail::gemm<T>(false, false, m, n, k, a.data().data(), b.data().data(), y.data().data(), T{0});
  if (detail::wants_grad(a, b)) {
    detail::record(
        y,
        [an = a.node(), bn = b.node(), yn = y.node(), m, n, k] {
          if (an->requires_grad)
            detail::gemm<T>(false, true, m, k, n, yn->grad.data(), bn->value.data(),
                            an->grad_buffer().data(), T{1});
          if (bn->requires_grad)
            detail::gemm<T>(true, false, k, n, m, an->value.data(), yn->grad.data(),
                            bn->grad_buffer().data(), T{1});
        },
        a, b);
  }
  return y;
}

template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.rank() != 2) throw DimensionError("transpose needs a matrix, got " + shape_str(a.shape()));
  const std::size_t r = a.dim(0), c = a.dim(1);
  Tensor<T> y(Shape{c, r});
  auto av = a.data();
  auto yv = y.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) yv[j * r + i] = av[i * c + j];
  if (detail::wants_grad(a)) {
    detail::record(
        y,
        [an = a.node(), yn = y.node(), r, c] {
          auto g = an->grad_buffer();
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) g[i * c + j] += yn->grad[j * r + i];
        },
        a);
  }
  return y;
}

// Keeps the listed columns of a matrix (the index list is a constant).
template <class T>
Tensor<T> select_columns(const Tensor<T>& a, const std::vector<std::size_t>& cols) {
  if (a.rank() != 2) throw DimensionError("select_columns needs a matrix");
  const std::size_t r = a.dim(0), c = a.dim(1), k = cols.size();
  for (auto j : cols)
    if (j >= c) throw IndexError("select_columns: column " + std::to_string(j) + " out of range");
  Tensor<T> y(Shape{r, k});
  auto av = a.data();
  auto yv = y.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < k; ++j) yv[i * k + j] = av[i * c + cols[j]];
  if (detail::wants_grad(a)) {
    detail::record(
        y,
        [an = a.node(), yn = y.node(), cols, r, c, k] {
          auto g = an->grad_buffer();
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < k; ++j) g[i * c + cols[j]] += yn->grad[i * k + j];
        },
        a);
  }
  return y;
}

// [A, 1]: appends a constant ones column.
template <class T>
Tensor<T> append_ones_column(const Tensor<T>& a) {
  if (a.rank() != 2) throw DimensionError("append_ones_column needs a matrix");
  const std::size_t r = a.dim(0), c = a.dim(1);
  Tensor<T> y(Shape{r, c + 1});
  auto av = a.data();
  auto yv = y.data();
  for (std::size_t i = 0; i < r; ++i) {
    std::copy_n(av.begin() + i * c, c, yv.begin() + i * (c + 1));
    yv[i * (c + 1) + c] = T{1};
  }
  if (detail::wants_grad(a)) {
    detail::record(
        y,
        [an = a.node(), yn = y.node(), r, c] {
          auto g = an->grad_buffer();
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) g[i * c + j] += yn->grad[i * (c + 1) + j];
        },
        a);
  }
  return y;
}

// Subtracts per-column means.
template <class T>
Tensor<T> center_columns(const Tensor<T>& a) {
  if (a.rank() != 2) throw DimensionError("center_columns needs a matrix");
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<T> mu(c, T{0});
  auto av = a.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) mu[j] += av[i * c + j];
  for (auto& m : mu) m /= static_cast<T>(r);
  Tensor<T> y(a.shape());
  auto yv = y.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) yv[i * c + j] = av[i * c + j] - mu[j];
  if (detail::wants_grad(a)) {
    detail::record(
        y,
        [an = a.node(), yn = y.node(), r, c] {
          std::vector<T> gmu(c, T{0});
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) gmu[j] += yn->grad[i * c + j];
          auto g = an->grad_buffer();
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j)
              g[i * c + j] += yn->grad[i * c + j] - gmu[j] / static_cast<T>(r);
        },
        a);
  }
  return y;
}

// A + r*I with r treated as a constant.
template <class T>
Tensor<T> add_diagonal(const Tensor<T>& a, T r) {
  if (a.rank() != 2 || a.dim(0) != a.dim(1))
    throw DimensionError("add_diagonal needs a square matrix, got " + shape_str(a.shape()));
  const std::size_t m = a.dim(0);
  Tensor<T> y(a.shape(), a.values());
  for (std::size_t i = 0; i < m; ++i) y.data()[i * m + i] += r;
  if (detail::wants_grad(a)) {
    detail::record(
        y,
        [an = a.node(), yn = y.node()] {
          auto g = an->grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += yn->grad[i];
        },
        a);
  }
  return y;
}

// Rows [begin, end) of the leading axis (constant slice).
template <class T>
Tensor<T> slice_rows(const Tensor<T>& a, std::size_t begin, std::size_t end) {
  if (begin >= end || end > a.dim(0)) throw IndexError("slice_rows: bad range");
  const std::size_t stride = a.numel() / a.dim(0);
  Shape s = a.shape();
  s[0] = end - begin;
  std::vector<T> v(a.values().begin() + begin * stride, a.values().begin() + end * stride);
  Tensor<T> y(std::move(s), std::move(v));
  if (detail::wants_grad(a)) {
    detail::record(
        y,
        [an = a.node(), yn = y.node(), off = begin * stride] {
          auto g = an->grad_buffer();
          for (std::size_t i = 0; i < yn->grad.size(); ++i) g[off + i] += yn->grad[i];
        },
        a);
  }
  return y;
}

}  // namespace decorr
