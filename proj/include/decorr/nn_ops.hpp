#pragma once

// Layer-level differentiable ops. Images are N x C x H x W, row-major.

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "decorr/detail/gemm.hpp"
#include "decorr/ops.hpp"

namespace decorr {

// y = x W + b
template <class T>
Tensor<T> affine(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (x.rank() != 2 || w.rank() != 2 || b.rank() != 1 || x.dim(1) != w.dim(0) ||
      b.dim(0) != w.dim(1))
    throw DimensionError("affine: x " + shape_str(x.shape()) + ", W " + shape_str(w.shape()) +
                         ", b " + shape_str(b.shape()));
  const std::size_t n = x.dim(0), d = x.dim(1), k = w.dim(1);
  Tensor<T> y(Shape{n, k});
  auto yv = y.data();
  for (std::size_t i = 0; i < n; ++i) std::copy(b.data().begin(), b.data().end(), yv.begin() + i * k);
  detail::gemm<T>(false, false, n, k, d, x.data().data(), w.data().data(), yv.data(), T{1});
  if (detail::wants_grad(x, w, b)) {
    detail::record(
        y,
        [xn = x.node(), wn = w.node(), bn = b.node(), yn = y.node(), n, d, k] {
          const T* gy = yn->grad.data();
          if (xn->requires_grad)
            detail::gemm<T>(false, true, n, d, k, gy, wn->value.data(), xn->grad_buffer().data(), T{1});
          if (wn->requires_grad)
            detail::gemm<T>(true, false, d, k, n, xn->value.data(), gy, wn->grad_buffer().data(), T{1});
          if (bn->requires_grad) {
            auto gb = bn->grad_buffer();
            for (std::size_t i = 0; i < n; ++i)
              for (std::size_t j = 0; j < k; ++j) gb[j] += gy[i * k + j];
          }
        },
        x, w, b);
  }
  return y;
}

namespace detail {

// Sample-chunked im2col for a stride-1 "same" convolution with odd kernel.
// cols is (C*kh*kw) x (count*H*W).
template <class T>
void im2col(const T* x, std::size_t count, std::size_t c, std::size_t h, std::size_t w,
            std::size_t kh, std::size_t kw, T* cols) {
  const std::size_t hw = h * w, ph = kh / 2, pw = kw / 2, ncols = count * hw;
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t ki = 0; ki < kh; ++ki)
      for (std::size_t kj = 0; kj < kw; ++kj) {
        T* row = cols + ((ci * kh + ki) * kw + kj) * ncols;
        for (std::size_t s = 0; s < count; ++s) {
          const T* plane = x + (s * c + ci) * hw;
          T* out = row + s * hw;
          for (std::size_t yy = 0; yy < h; ++yy) {
            const long sy = static_cast<long>(yy + ki) - static_cast<long>(ph);
            if (sy < 0 || sy >= static_cast<long>(h)) {
              std::fill_n(out + yy * w, w, T{0});
              continue;
            }
            for (std::size_t xx = 0; xx < w; ++xx) {
              const long sx = static_cast<long>(xx + kj) - static_cast<long>(pw);
              out[yy * w + xx] =
                  (sx < 0 || sx >= static_cast<long>(w)) ? T{0} : plane[sy * static_cast<long>(w) + sx];
            }
          }
        }
      }
}

template <class T>
void col2im_add(const T* cols, std::size_t count, std::size_t c, std::size_t h, std::size_t w,
                std::size_t kh, std::size_t kw, T* gx) {
  const std::size_t hw = h * w, ph = kh / 2, pw = kw / 2, ncols = count * hw;
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t ki = 0; ki < kh; ++ki)
      for (std::size_t kj = 0; kj < kw; ++kj) {
        const T* row = cols + ((ci * kh + ki) * kw + kj) * ncols;
        for (std::size_t s = 0; s < count; ++s) {
          T* plane = gx + (s * c + ci) * hw;
          const T* in = row + s * hw;
          for (std::size_t yy = 0; yy < h; ++yy) {
            const long sy = static_cast<long>(yy + ki) - static_cast<long>(ph);
            if (sy < 0 || sy >= static_cast<long>(h)) continue;
            for (std::size_t xx = 0; xx < w; ++xx) {
              const long sx = static_cast<long>(xx + kj) - static_cast<long>(pw);
              if (sx >= 0 && sx < static_cast<long>(w)) plane[sy * static_cast<long>(w) + sx] += in[yy * w + xx];
            }
          }
        }
      }
}

// Samples per chunk so that a (rows x chunk*hw) buffer stays around 8M entries.
inline std::size_t chunk_size(std::size_t rows, std::size_t hw, std::size_t n) {
  const std::size_t per = std::max<std::size_t>(1, rows * hw);
  return std::clamp<std::size_t>((std::size_t{8} << 20) / per, 1, n);
}

}  // namespace detail

// Stride-1 zero-padded convolution (cross-correlation) with odd square kernel.
// k is K x C x kh x kw. A 3x3 kernel keeps H and W; 1x1 is a channel mix.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& k, const Tensor<T>& b) {
  if (x.rank() != 4 || k.rank() != 4 || b.rank() != 1)
    throw DimensionError("conv2d: x " + shape_str(x.shape()) + ", kernel " + shape_str(k.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t kout = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  if (k.dim(1) != c)
    throw DimensionError("conv2d: channel mismatch, input " + shape_str(x.shape()) + " vs kernel " +
                         shape_str(k.shape()));
  if (kh % 2 == 0 || kw % 2 == 0) throw DimensionError("conv2d: kernel must be odd-sized");
  if (b.dim(0) != kout) throw DimensionError("conv2d: bias " + shape_str(b.shape()));
  const std::size_t hw = h * w, rows = c * kh * kw;
  Tensor<T> y(Shape{n, kout, h, w});
  const std::size_t chunk = detail::chunk_size(rows + kout, hw, n);
  std::vector<T> cols(rows * chunk * hw), out(kout * chunk * hw);
  for (std::size_t s0 = 0; s0 < n; s0 += chunk) {
    const std::size_t cnt = std::min(chunk, n - s0), nc = cnt * hw;
    detail::im2col(x.data().data() + s0 * c * hw, cnt, c, h, w, kh, kw, cols.data());
    detail::gemm<T>(false, false, kout, nc, rows, k.data().data(), cols.data(), out.data(), T{0});
    for (std::size_t s = 0; s < cnt; ++s)
      for (std::size_t ko = 0; ko < kout; ++ko) {
        T* dst = y.data().data() + ((s0 + s) * kout + ko) * hw;
        const T* src = out.data() + ko * nc + s * hw;
        const T bias = b.data()[ko];
        for (std::size_t i = 0; i < hw; ++i) dst[i] = src[i] + bias;
      }
  }
  if (detail::wants_grad(x, k, b)) {
    detail::record(
        y,
        [xn = x.node(), kn = k.node(), bn = b.node(), yn = y.node(), n, c, h, w, kout, kh, kw, hw, rows,
         chunk] {
          std::vector<T> cols(rows * chunk * hw), gout(kout * chunk * hw);
          T* gk = kn->requires_grad ? kn->grad_buffer().data() : nullptr;
          T* gx = xn->requires_grad ? xn->grad_buffer().data() : nullptr;
          if (bn->requires_grad) {
            auto gb = bn->grad_buffer();
            for (std::size_t s = 0; s < n; ++s)
              for (std::size_t ko = 0; ko < kout; ++ko) {
                const T* g = yn->grad.data() + (s * kout + ko) * hw;
                T acc{0};
                for (std::size_t i = 0; i < hw; ++i) acc += g[i];
                gb[ko] += acc;
              }
          }
          if (!gk && !gx) return;
          for (std::size_t s0 = 0; s0 < n; s0 += chunk) {
            const std::size_t cnt = std::min(chunk, n - s0), nc = cnt * hw;
            for (std::size_t s = 0; s < cnt; ++s)
              for (std::size_t ko = 0; ko < kout; ++ko)
                std::copy_n(yn->grad.data() + ((s0 + s) * kout + ko) * hw, hw,
                            gout.data() + ko * nc + s * hw);
            if (gk) {
              detail::im2col(xn->value.data() + s0 * c * hw, cnt, c, h, w, kh, kw, cols.data());
              detail::gemm<T>(false, true, kout, rows, nc, gout.data(), cols.data(), gk, T{1});
            }
            if (gx) {
              detail::gemm<T>(true, false, rows, nc, kout, kn->value.data(), gout.data(), cols.data(), T{0});
              detail::col2im_add(cols.data(), cnt, c, h, w, kh, kw, gx + s0 * c * hw);
            }
          }
        },
        x, k, b);
  }
  return y;
}

// 2x2 stride-2 transpose convolution; doubles H and W.
// k is Cin x Cout x 2 x 2.
template <class T>
Tensor<T> deconv2x2(const Tensor<T>& x, const Tensor<T>& k, const Tensor<T>& b) {
  if (x.rank() != 4 || k.rank() != 4 || k.dim(2) != 2 || k.dim(3) != 2 || k.dim(0) != x.dim(1) ||
      b.rank() != 1 || b.dim(0) != k.dim(1))
    throw DimensionError("deconv2x2: x " + shape_str(x.shape()) + ", kernel " + shape_str(k.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3), kout = k.dim(1);
  const std::size_t hw = h * w, k4 = kout * 4, oh = 2 * h, ow = 2 * w;
  Tensor<T> y(Shape{n, kout, oh, ow});
  const std::size_t chunk = detail::chunk_size(c + k4, hw, n);
  std::vector<T> xin(c * chunk * hw), out(k4 * chunk * hw);

  auto scatter = [&](std::size_t s0, std::size_t cnt, const T* src, T* dst, const T* bias) {
    const std::size_t nc = cnt * hw;
    for (std::size_t s = 0; s < cnt; ++s)
      for (std::size_t ko = 0; ko < kout; ++ko)
        for (std::size_t a = 0; a < 2; ++a)
          for (std::size_t bb = 0; bb < 2; ++bb) {
            const T* row = src + ((ko * 2 + a) * 2 + bb) * nc + s * hw;
            T* plane = dst + ((s0 + s) * kout + ko) * oh * ow;
            const T bv = bias[ko];
            for (std::size_t i = 0; i < h; ++i)
              for (std::size_t j = 0; j < w; ++j) plane[(2 * i + a) * ow + 2 * j + bb] = row[i * w + j] + bv;
          }
  };

  for (std::size_t s0 = 0; s0 < n; s0 += chunk) {
    const std::size_t cnt = std::min(chunk, n - s0), nc = cnt * hw;
    for (std::size_t s = 0; s < cnt; ++s)
      for (std::size_t ci = 0; ci < c; ++ci)
        std::copy_n(x.data().data() + ((s0 + s) * c + ci) * hw, hw, xin.data() + ci * nc + s * hw);
    detail::gemm<T>(true, false, k4, nc, c, k.data().data(), xin.data(), out.data(), T{0});
    scatter(s0, cnt, out.data(), y.data().data(), b.data().data());
  }

  if (detail::wants_grad(x, k, b)) {
    detail::record(
        y,
        [xn = x.node(), kn = k.node(), bn = b.node(), yn = y.node(), n, c, h, w, kout, hw, k4, oh, ow,
         chunk] {
          std::vector<T> xin(c * chunk * hw), gout(k4 * chunk * hw), gxin(c * chunk * hw);
          T* gk = kn->requires_grad ? kn->grad_buffer().data() : nullptr;
          T* gx = xn->requires_grad ? xn->grad_buffer().data() : nullptr;
          if (bn->requires_grad) {
            auto gb = bn->grad_buffer();
            for (std::size_t s = 0; s < n; ++s)
              for (std::size_t ko = 0; ko < kout; ++ko) {
                const T* g = yn->grad.data() + (s * kout + ko) * oh * ow;
                T acc{0};
                for (std::size_t i = 0; i < oh * ow; ++i) acc += g[i];
                gb[ko] += acc;
              }
          }
          for (std::size_t s0 = 0; s0 < n; s0 += chunk) {
            const std::size_t cnt = std::min(chunk, n - s0), nc = cnt * hw;
            for (std::size_t s = 0; s < cnt; ++s)
              for (std::size_t ko = 0; ko < kout; ++ko)
                for (std::size_t a = 0; a < 2; ++a)
                  for (std::size_t bb = 0; bb < 2; ++bb) {
                    T* row = gout.data() + ((ko * 2 + a) * 2 + bb) * nc + s * hw;
                    const T* plane = yn->grad.data() + ((s0 + s) * kout + ko) * oh * ow;
                    for (std::size_t i = 0; i < h; ++i)
                      for (std::size_t j = 0; j < w; ++j) row[i * w + j] = plane[(2 * i + a) * ow + 2 * j + bb];
                  }
            if (gk) {
              for (std::size_t s = 0; s < cnt; ++s)
                for (std::size_t ci = 0; ci < c; ++ci)
                  std::copy_n(xn->value.data() + ((s0 + s) * c + ci) * hw, hw, xin.data() + ci * nc + s * hw);
              detail::gemm<T>(false, true, c, k4, nc, xin.data(), gout.data(), gk, T{1});
            }
            if (gx) {
              detail::gemm<T>(false, false, c, nc, k4, kn->value.data(), gout.data(), gxin.data(), T{0});
              for (std::size_t s = 0; s < cnt; ++s)
                for (std::size_t ci = 0; ci < c; ++ci) {
                  T* dst = gx + ((s0 + s) * c + ci) * hw;
                  const T* src = gxin.data() + ci * nc + s * hw;
                  for (std::size_t i = 0; i < hw; ++i) dst[i] += src[i];
                }
            }
          }
        },
        x, k, b);
  }
  return y;
}

enum class PoolKind { max2x2, avg };

// Non-overlapping pooling. max2x2 uses a 2x2 window; avg uses window x window.
// Max routes the gradient to the first maximal element of each window.
template <class T>
Tensor<T> pool(const Tensor<T>& x, PoolKind kind, std::size_t window = 2) {
  if (x.rank() != 4) throw DimensionError("pool: expected N x C x H x W, got " + shape_str(x.shape()));
  if (kind == PoolKind::max2x2) window = 2;
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (window == 0 || h % window != 0 || w % window != 0)
    throw DimensionError("pool: spatial size " + std::to_string(h) + "x" + std::to_string(w) +
                         " not divisible by window " + std::to_string(window));
  const std::size_t oh = h / window, ow = w / window, planes = n * c;
  Tensor<T> y(Shape{n, c, oh, ow});
  std::vector<std::size_t> argmax;
  if (kind == PoolKind::max2x2) argmax.resize(y.numel());
  const T* xv = x.data().data();
  T* yv = y.data().data();
  const T inv = T{1} / static_cast<T>(window * window);
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        const std::size_t o = (p * oh + i) * ow + j;
        if (kind == PoolKind::max2x2) {
          std::size_t best = p * h * w + (i * 2) * w + j * 2;
          for (std::size_t a = 0; a < 2; ++a)
            for (std::size_t bb = 0; bb < 2; ++bb) {
              const std::size_t idx = p * h * w + (i * 2 + a) * w + j * 2 + bb;
              if (xv[idx] > xv[best]) best = idx;
            }
          argmax[o] = best;
          yv[o] = xv[best];
        } else {
          T acc{0};
          for (std::size_t a = 0; a < window; ++a)
            for (std::size_t bb = 0; bb < window; ++bb) acc += xv[p * h * w + (i * window + a) * w + j * window + bb];
          yv[o] = acc * inv;
        }
      }
  if (detail::wants_grad(x)) {
    detail::record(
        y,
        [xn = x.node(), yn = y.node(), argmax = std::move(argmax), kind, window, planes, h, w, oh, ow, inv] {
          auto g = xn->grad_buffer();
          if (kind == PoolKind::max2x2) {
            for (std::size_t o = 0; o < argmax.size(); ++o) g[argmax[o]] += yn->grad[o];
            return;
          }
          for (std::size_t p = 0; p < planes; ++p)
            for (std::size_t i = 0; i < oh; ++i)
              for (std::size_t j = 0; j < ow; ++j) {
                const T gv = yn->grad[(p * oh + i) * ow + j] * inv;
                for (std::size_t a = 0; a < window; ++a)
                  for (std::size_t bb = 0; bb < window; ++bb) g[p * h * w + (i * window + a) * w + j * window + bb] += gv;
              }
        },
        x);
  }
  return y;
}

enum class BnMode { train, eval };

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

// Batch normalisation over N x F (per feature) or N x C x H x W (per channel).
// Train mode normalises with biased batch statistics and folds them into the
// running estimates (unbiased variance); eval mode uses the running estimates.
template <class T>
Tensor<T> batchnorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                    Tensor<T>& running_mean, Tensor<T>& running_var, BnMode mode) {
  if (x.rank() != 2 && x.rank() != 4)
    throw DimensionError("batchnorm: expected rank 2 or 4, got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), f = x.dim(1);
  const std::size_t sp = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
  if (gamma.numel() != f || beta.numel() != f || running_mean.numel() != f || running_var.numel() != f)
    throw DimensionError("batchnorm: parameter width does not match " + shape_str(x.shape()));
  const std::size_t m = n * sp;
  const T eps = static_cast<T>(kBatchNormEps);
  const T mom = static_cast<T>(kBatchNormMomentum);
  const T* xv = x.data().data();
  auto at = [f, sp](std::size_t s, std::size_t j, std::size_t q) { return (s * f + j) * sp + q; };

  std::vector<T> mu(f), inv_std(f);
  if (mode == BnMode::train) {
    if (n < 2) throw DegenerateError("batchnorm: train mode needs at least 2 samples, got " + std::to_string(n));
    for (std::size_t j = 0; j < f; ++j) {
      double acc = 0;
      for (std::size_t s = 0; s < n; ++s)
        for (std::size_t q = 0; q < sp; ++q) acc += xv[at(s, j, q)];
      const double mean = acc / static_cast<double>(m);
      double var = 0;
      for (std::size_t s = 0; s < n; ++s)
        for (std::size_t q = 0; q < sp; ++q) {
          const double d = xv[at(s, j, q)] - mean;
          var += d * d;
        }
      var /= static_cast<double>(m);
      mu[j] = static_cast<T>(mean);
      inv_std[j] = static_cast<T>(1.0 / std::sqrt(var + kBatchNormEps));
      running_mean.data()[j] = (T{1} - mom) * running_mean.data()[j] + mom * static_cast<T>(mean);
      const double unbiased = var * static_cast<double>(m) / static_cast<double>(m - 1);
      running_var.data()[j] = (T{1} - mom) * running_var.data()[j] + mom * static_cast<T>(unbiased);
    }
  } else {
    for (std::size_t j = 0; j < f; ++j) {
      mu[j] = running_mean.data()[j];
      inv_std[j] = T{1} / std::sqrt(running_var.data()[j] + eps);
    }
  }

  Tensor<T> y(x.shape());
  std::vector<T> xhat(x.numel());
  T* yv = y.data().data();
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t j = 0; j < f; ++j)
      for (std::size_t q = 0; q < sp; ++q) {
        const std::size_t i = at(s, j, q);
        xhat[i] = (xv[i] - mu[j]) * inv_std[j];
        yv[i] = gamma.data()[j] * xhat[i] + beta.data()[j];
      }

  if (detail::wants_grad(x, gamma, beta)) {
    detail::record(
        y,
        [xn = x.node(), gn = gamma.node(), bn = beta.node(), yn = y.node(), xhat = std::move(xhat),
         inv_std = std::move(inv_std), mode, n, f, sp, m] {
          auto at = [f, sp](std::size_t s, std::size_t j, std::size_t q) { return (s * f + j) * sp + q; };
          const T* gy = yn->grad.data();
          std::vector<T> sum_g(f, T{0}), sum_gx(f, T{0});
          for (std::size_t s = 0; s < n; ++s)
            for (std::size_t j = 0; j < f; ++j)
              for (std::size_t q = 0; q < sp; ++q) {
                const std::size_t i = at(s, j, q);
                sum_g[j] += gy[i];
                sum_gx[j] += gy[i] * xhat[i];
              }
          if (gn->requires_grad) {
            auto gg = gn->grad_buffer();
            for (std::size_t j = 0; j < f; ++j) gg[j] += sum_gx[j];
          }
          if (bn->requires_grad) {
            auto gb = bn->grad_buffer();
            for (std::size_t j = 0; j < f; ++j) gb[j] += sum_g[j];
          }
          if (!xn->requires_grad) return;
          auto gx = xn->grad_buffer();
          const T inv_m = T{1} / static_cast<T>(m);
          for (std::size_t s = 0; s < n; ++s)
            for (std::size_t j = 0; j < f; ++j) {
              const T scale = gn->value[j] * inv_std[j];
              for (std::size_t q = 0; q < sp; ++q) {
                const std::size_t i = at(s, j, q);
                if (mode == BnMode::train)
                  gx[i] += scale * (gy[i] - inv_m * sum_g[j] - xhat[i] * inv_m * sum_gx[j]);
                else
                  gx[i] += scale * gy[i];
              }
            }
        },
        x, gamma, beta);
  }
  return y;
}

enum class Reduction { mean, none };

// Softmax cross-entropy against class indices; max-subtracted for stability.
// Reduction::none returns the per-sample losses as an [N] tensor.
template <class T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> labels,
                                Reduction red = Reduction::mean) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size())
    throw DimensionError("softmax_cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  for (int l : labels)
    if (l < 0 || static_cast<std::size_t>(l) >= k)
      throw IndexError("softmax_cross_entropy: label " + std::to_string(l) + " outside [0, " +
                       std::to_string(k) + ")");
  std::vector<T> prob(n * k);
  std::vector<T> per(n);
  const T* z = logits.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    const T mx = *std::max_element(z + i * k, z + (i + 1) * k);
    T denom{0};
    for (std::size_t j = 0; j < k; ++j) {
      prob[i * k + j] = std::exp(z[i * k + j] - mx);
      denom += prob[i * k + j];
    }
    for (std::size_t j = 0; j < k; ++j) prob[i * k + j] /= denom;
    per[i] = std::log(denom) - (z[i * k + labels[i]] - mx);
  }
  Tensor<T> y = red == Reduction::mean ? Tensor<T>::scalar(std::accumulate(per.begin(), per.end(), T{0}) /
                                                           static_cast<T>(n))
                                       : Tensor<T>(Shape{n}, per);
  if (detail::wants_grad(logits)) {
    std::vector<int> lab(labels.begin(), labels.end());
    detail::record(
        y,
        [ln = logits.node(), yn = y.node(), prob = std::move(prob), lab = std::move(lab), n, k, red] {
          auto g = ln->grad_buffer();
          for (std::size_t i = 0; i < n; ++i) {
            const T gi = red == Reduction::mean ? yn->grad[0] / static_cast<T>(n) : yn->grad[i];
            for (std::size_t j = 0; j < k; ++j)
              g[i * k + j] += gi * (prob[i * k + j] - (static_cast<int>(j) == lab[i] ? T{1} : T{0}));
          }
        },
        logits);
  }
  return y;
}

template <class T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels,
                                Reduction red = Reduction::mean) {
  return softmax_cross_entropy(logits, std::span<const int>(labels), red);
}

// Mean of squared differences over all elements.
template <class T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mse");
  const std::size_t n = a.numel();
  T acc{0};
  for (std::size_t i = 0; i < n; ++i) {
    const T d = a.data()[i] - b.data()[i];
    acc += d * d;
  }
  auto y = Tensor<T>::scalar(acc / static_cast<T>(n));
  if (detail::wants_grad(a, b)) {
    detail::record(
        y,
        [an = a.node(), bn = b.node(), yn = y.node(), n] {
          const T s = T{2} * yn->grad[0] / static_cast<T>(n);
          if (an->requires_grad) {
            auto g = an->grad_buffer();
            for (std::size_t i = 0; i < n; ++i) g[i] += s * (an->value[i] - bn->value[i]);
          }
          if (bn->requires_grad) {
            auto g = bn->grad_buffer();
            for (std::size_t i = 0; i < n; ++i) g[i] -= s * (an->value[i] - bn->value[i]);
          }
        },
        a, b);
  }
  return y;
}

}  // namespace decorr
