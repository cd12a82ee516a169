#pragma once

// Linear feature-correlation measures between two networks' hidden features.
//
// Z1, Z2 are N x M feature batches (samples in rows). Z2 is regressed on the
// augmented design [Z1', 1], where Z1' keeps only the columns of Z1 that a
// Householder QR deems independent. All internals run in double precision.

#include <cmath>
#include <string>
#include <vector>

#include "decorr/detail/binary_io.hpp"
#include "decorr/linalg.hpp"
#include "decorr/ops.hpp"

namespace decorr {

inline constexpr double kIndependenceThreshold = 0.0005;  // eta
inline constexpr double kCorrelationEps = 0.001;
inline constexpr double kGramRidge = 1e-8;

// N x M matrix of vectorised hidden features, N >= 2, all finite.
class FeatureBatch {
 public:
  explicit FeatureBatch(Tensor<double> m) : m_(std::move(m)) {
    if (m_.rank() != 2) throw DimensionError("FeatureBatch needs a matrix, got " + shape_str(m_.shape()));
    if (m_.dim(0) < 2) throw DegenerateError("FeatureBatch needs at least 2 samples");
    for (double v : m_.data())
      if (!std::isfinite(v)) throw DomainError("FeatureBatch contains a non-finite entry");
  }
  template <class T>
  static FeatureBatch from(const Tensor<T>& t) {
    NoGradScope ng;
    auto d = cast<double>(t);
    return FeatureBatch(t.rank() == 2 ? d : flatten(d));
  }
  const Tensor<double>& matrix() const { return m_; }
  std::size_t rows() const { return m_.dim(0); }
  std::size_t cols() const { return m_.dim(1); }

 private:
  Tensor<double> m_;
};

struct PrunedDesign {
  std::vector<bool> keep_mask;
  std::vector<std::size_t> kept;  // indices of kept columns, ascending
  Tensor<double> design;          // N x (kept + 1), last column ones
};

struct CorrelationResult {
  double ss_res = 0;
  double ss_total = 0;
  double r_squared = 0;
  double loss = 0;
};

// Columns j with |R_jj| / max_i |R_ii| > eta.
inline std::vector<std::size_t> independent_columns(const Tensor<double>& z1, double eta = kIndependenceThreshold) {
  if (z1.rank() != 2) throw DimensionError("independent_columns needs a matrix");
  if (z1.dim(0) < z1.dim(1))
    throw DimensionError("feature batch has fewer samples than features: " + shape_str(z1.shape()) +
                         " (batch size must exceed the feature width)");
  const auto r = qr_factor(z1, /*compute_q=*/false).r;
  const std::size_t m = z1.dim(1);
  double mx = 0;
  for (std::size_t i = 0; i < m; ++i) mx = std::max(mx, std::abs(r[i * m + i]));
  std::vector<std::size_t> kept;
  if (mx > 0)
    for (std::size_t j = 0; j < m; ++j)
      if (std::abs(r[j * m + j]) / mx > eta) kept.push_back(j);
  if (kept.empty()) throw DegenerateError("all feature columns were pruned as dependent");
  return kept;
}

inline PrunedDesign prune_columns(const FeatureBatch& z1, double eta = kIndependenceThreshold) {
  PrunedDesign out;
  out.kept = independent_columns(z1.matrix(), eta);
  out.keep_mask.assign(z1.cols(), false);
  for (auto j : out.kept) out.keep_mask[j] = true;
  NoGradScope ng;
  out.design = append_ones_column(select_columns(z1.matrix(), out.kept));
  return out;
}

namespace detail {

struct SumsOfSquares {
  Tensor<double> ss_res;
  Tensor<double> ss_total;
};

// Differentiable residual and total sums of squares of the OLS fit of z2 on
// [z1[:, kept], 1]. The column selection is a per-call constant.
inline SumsOfSquares regression_sums(const Tensor<double>& z1, const Tensor<double>& z2, double eta) {
  if (z1.rank() != 2 || z2.rank() != 2 || z1.dim(0) != z2.dim(0))
    throw DimensionError("regression: " + shape_str(z1.shape()) + " vs " + shape_str(z2.shape()));
  const auto kept = independent_columns(z1, eta);
  auto design = append_ones_column(select_columns(z1, kept));
  auto gram = matmul(transpose(design), design);
  double trace = 0;
  const std::size_t p = gram.dim(0);
  for (std::size_t i = 0; i < p; ++i) trace += gram[i * p + i];
  auto gram_inv = chol_inverse(add_diagonal(gram, kGramRidge * trace / static_cast<double>(p)));
  auto coef = matmul(gram_inv, matmul(transpose(design), z2));
  auto resid = sub(z2, matmul(design, coef));
  return {sum(square(resid)), sum(square(center_columns(z2)))};
}

}  // namespace detail

inline CorrelationResult r_squared(const FeatureBatch& z1, const FeatureBatch& z2,
                                   double eta = kIndependenceThreshold, double eps = kCorrelationEps) {
  NoGradScope ng;
  auto s = detail::regression_sums(z1.matrix(), z2.matrix(), eta);
  CorrelationResult out;
  out.ss_res = s.ss_res.item();
  out.ss_total = s.ss_total.item();
  if (!(out.ss_total > 0)) throw DegenerateError("r_squared: target features are constant (SS_total = 0)");
  out.r_squared = 1.0 - out.ss_res / out.ss_total;
  out.loss = std::log(out.ss_total + eps) - std::log(out.ss_res + eps);
  return out;
}

// L_R = log(SS_total + eps) - log(SS_res + eps), differentiable in both
// feature batches. Minimising it makes z2 less linearly predictable from z1.
template <class T>
Tensor<T> correlation_loss(const Tensor<T>& z1, const Tensor<T>& z2, double eps = kCorrelationEps,
                           double eta = kIndependenceThreshold) {
  if (!(eps > 0)) throw DomainError("correlation_loss: eps must be positive");
  auto flat = [](const Tensor<T>& z) { return z.rank() == 2 ? z : flatten(z); };
  auto s = detail::regression_sums(cast<double>(flat(z1)), cast<double>(flat(z2)), eta);
  auto loss = sub(log(add_scalar(s.ss_total, eps)), log(add_scalar(s.ss_res, eps)));
  if constexpr (std::is_same_v<T, double>) return loss;
  else return cast<T>(loss);
}

// Pearson coefficient between the two flattened feature arrays.
inline double pearson_features(const FeatureBatch& z1, const FeatureBatch& z2) {
  const auto& a = z1.matrix().values();
  const auto& b = z2.matrix().values();
  if (a.size() != b.size())
    throw DimensionError("pearson_features: element counts differ (" + std::to_string(a.size()) + " vs " +
                         std::to_string(b.size()) + ")");
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (!(saa > 0) || !(sbb > 0)) throw DegenerateError("pearson_features: zero variance");
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

struct PrincipalAxis {
  std::vector<double> scores;     // N projections of the centred samples
  std::vector<double> component;  // unit loading vector, first nonzero entry positive
  double variance = 0;
  int iterations = 0;
};

// Top principal component by power iteration on the sample covariance.
inline PrincipalAxis principal_axis(const FeatureBatch& z, double tol = 1e-9, int max_iter = 10000) {
  const std::size_t n = z.rows(), m = z.cols();
  NoGradScope ng;
  const auto centered = center_columns(z.matrix());
  std::vector<double> cov(m * m);
  detail::gemm<double>(true, false, m, m, n, centered.data().data(), centered.data().data(), cov.data(), 0.0);
  for (auto& c : cov) c /= static_cast<double>(n - 1);

  // Start from the sample farthest from the mean: it has a component along
  // the top axis unless the data is degenerate.
  std::size_t best = 0;
  double best_norm = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < m; ++j) s += centered[i * m + j] * centered[i * m + j];
    if (s > best_norm) {
      best_norm = s;
      best = i;
    }
  }
  if (!(best_norm > 0)) throw DegenerateError("pca: zero covariance");
  std::vector<double> v(m), w(m);
  for (std::size_t j = 0; j < m; ++j) v[j] = centered[best * m + j] / std::sqrt(best_norm);

  PrincipalAxis out;
  double lambda = 0;
  for (out.iterations = 1; out.iterations <= max_iter; ++out.iterations) {
    for (std::size_t i = 0; i < m; ++i) {
      double s = 0;
      for (std::size_t j = 0; j < m; ++j) s += cov[i * m + j] * v[j];
      w[i] = s;
    }
    double norm = 0;
    for (double x : w) norm += x * x;
    norm = std::sqrt(norm);
    if (!(norm > 0)) throw DegenerateError("pca: zero covariance");
    double delta = 0;
    for (std::size_t j = 0; j < m; ++j) {
      const double nv = w[j] / norm;
      delta = std::max(delta, std::abs(nv - v[j]));
      v[j] = nv;
    }
    lambda = norm;
    if (delta < tol) break;
  }
  for (double x : v)
    if (x != 0) {
      if (x < 0)
        for (auto& y : v) y = -y;
      break;
    }
  out.scores.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < m; ++j) s += centered[i * m + j] * v[j];
    out.scores[i] = s;
  }
  out.component = std::move(v);
  out.variance = lambda;
  return out;
}

inline std::vector<double> pca_project_1d(const FeatureBatch& z) { return principal_axis(z).scores; }

// "FMAT" container: magic, version u32, rows u64, cols u64, f64 LE row-major.
inline constexpr std::uint32_t kFmatVersion = 1;

inline void save_fmat(const std::string& path, const Tensor<double>& m) {
  if (m.rank() != 2) throw DimensionError("save_fmat needs a matrix, got " + shape_str(m.shape()));
  detail::ByteWriter w;
  w.str("FMAT");
  w.le<std::uint32_t>(kFmatVersion);
  w.le<std::uint64_t>(m.dim(0));
  w.le<std::uint64_t>(m.dim(1));
  for (double v : m.data()) w.le<double>(v);
  w.save(path);
}

inline Tensor<double> load_fmat(const std::string& path) {
  auto r = detail::ByteReader::from_file(path);
  if (r.str(4, "magic") != "FMAT") throw ParseError("bad FMAT magic", 0);
  const auto version = r.le<std::uint32_t>("version");
  if (version != kFmatVersion) throw ParseError("unsupported FMAT version " + std::to_string(version), 4);
  const auto rows = r.le<std::uint64_t>("rows");
  const auto cols = r.le<std::uint64_t>("cols");
  if (rows == 0 || cols == 0) throw ParseError("FMAT with empty dimension", 8);
  r.need(rows * cols * 8, "matrix payload");
  std::vector<double> v(rows * cols);
  for (auto& x : v) x = r.le<double>("value");
  return Tensor<double>(Shape{rows, cols}, std::move(v));
}

}  // namespace decorr
