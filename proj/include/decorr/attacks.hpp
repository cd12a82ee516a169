#pragma once

// Untargeted first-order attacks (FGSM, PGD) under l-inf and l2 budgets, and
// the objectives they maximise: classifier cross-entropy, the dual-pathway
// joint objective and the single-pathway autoencoder objective.

#include <cmath>
#include <functional>
#include <random>

#include "decorr/models.hpp"

namespace decorr {

enum class AttackMethod { fgsm, pgd };
enum class NormKind { linf, l2 };

inline std::string to_string(AttackMethod m) { return m == AttackMethod::fgsm ? "fgsm" : "pgd"; }
inline std::string to_string(NormKind n) { return n == NormKind::linf ? "linf" : "l2"; }
inline AttackMethod parse_method(const std::string& s) {
  if (s == "fgsm" || s == "FGSM") return AttackMethod::fgsm;
  if (s == "pgd" || s == "PGD") return AttackMethod::pgd;
  throw ConfigError("unknown attack method '" + s + "'");
}
inline NormKind parse_norm(const std::string& s) {
  if (s == "linf" || s == "Linf" || s == "inf") return NormKind::linf;
  if (s == "l2" || s == "L2") return NormKind::l2;
  throw ConfigError("unknown norm '" + s + "'");
}

// epsilon is the per-coordinate scale; l2 budgets are sqrt(D) * epsilon for
// D-dimensional inputs. alpha <= 0 selects min(2.5 * epsilon / steps, epsilon).
struct AttackConfig {
  AttackMethod method = AttackMethod::fgsm;
  NormKind norm = NormKind::linf;
  double epsilon = 0.1;
  int steps = 40;
  double alpha = -1;
  double lo = 0.0, hi = 1.0;
  bool random_init = true;
  std::uint64_t seed = 0;

  double step_size() const { return alpha > 0 ? alpha : std::min(2.5 * epsilon / steps, epsilon); }

  void validate() const {
    if (!(epsilon >= 0)) throw ConfigError("attack epsilon must be non-negative");
    if (!(lo < hi)) throw ConfigError("attack data range needs lo < hi");
    if (method == AttackMethod::pgd) {
      if (steps <= 0) throw ConfigError("PGD needs at least one step");
      if (alpha > 0 && alpha > epsilon) throw ConfigError("PGD step size alpha exceeds epsilon");
    }
  }
};

template <class T>
struct AdvBatch {
  Tensor<T> originals, perturbed;
  std::vector<int> labels;
  std::vector<double> objective_before, objective_after;
  std::vector<bool> flagged;  // l2 samples left unperturbed because the gradient vanished
};

// Per-sample objective values (length N) for inputs x with labels y.
template <class T>
using Objective = std::function<Tensor<T>(const Tensor<T>& x, const std::vector<int>& y)>;

template <class T>
Objective<T> classifier_objective(Network<T>& f) {
  return [&f](const Tensor<T>& x, const std::vector<int>& y) {
    return softmax_cross_entropy(f(x, BnMode::eval), y, Reduction::none);
  };
}

// CE(C(F(x)_1), y)^2 + CE(C(F(x)_2), y)^2 per sample.
template <class T>
Objective<T> dna_joint_objective(DnaModel<T>& dna, Network<T>& clf) {
  return [&dna, &clf](const Tensor<T>& x, const std::vector<int>& y) {
    auto o = dna(x, BnMode::eval);
    auto ca = softmax_cross_entropy(clf(o.recon_a, BnMode::eval), y, Reduction::none);
    auto cb = softmax_cross_entropy(clf(o.recon_b, BnMode::eval), y, Reduction::none);
    return add(square(ca), square(cb));
  };
}

// CE(C(F(x)), y) through a single reconstruction pathway.
template <class T>
Objective<T> ae_objective(Network<T>& ae, Network<T>& clf, Shape image_shape) {
  return [&ae, &clf, image_shape](const Tensor<T>& x, const std::vector<int>& y) {
    auto recon = conform_input(ae(x, BnMode::eval), image_shape);
    return softmax_cross_entropy(clf(recon, BnMode::eval), y, Reduction::none);
  };
}

namespace detail {

// Per-sample objective values and the input gradient of their sum.
template <class T>
std::vector<double> objective_and_grad(const Objective<T>& J, const Tensor<T>& x, const std::vector<int>& y,
                                       std::vector<T>* grad) {
  auto xin = x.detach();
  std::vector<double> vals;
  if (grad) {
    xin.set_requires_grad();
    Tape tape;
    TapeScope scope(tape);
    auto j = J(xin, y);
    vals.assign(j.data().begin(), j.data().end());
    tape.backward(sum(j));
    grad->assign(xin.grad().begin(), xin.grad().end());
  } else {
    NoGradScope ng;
    auto j = J(xin, y);
    vals.assign(j.data().begin(), j.data().end());
  }
  return vals;
}

inline double sign_of(double g) { return g > 0 ? 1.0 : g < 0 ? -1.0 : 0.0; }

template <class T>
T clip_linf(double v, T x0, double eps, double lo, double hi) {
  const double c = std::clamp(std::clamp(v, static_cast<double>(x0) - eps, static_cast<double>(x0) + eps), lo, hi);
  T out = static_cast<T>(c);
  // rounding to T may step just outside the box around x0
  if (static_cast<double>(out) - static_cast<double>(x0) > eps) out = std::nextafter(out, x0);
  if (static_cast<double>(x0) - static_cast<double>(out) > eps) out = std::nextafter(out, x0);
  return out;
}


}  // namespace detail

template <class T>
AdvBatch<T> fgsm(const Objective<T>& J, const Tensor<T>& x, const std::vector<int>& y, const AttackConfig& cfg) {
  cfg.validate();
  const std::size_t n = x.dim(0), d = x.numel() / n;
  AdvBatch<T> out{x.detach(), Tensor<T>(), y, {}, {}, std::vector<bool>(n, false)};
  std::vector<T> g;
  out.objective_before = detail::objective_and_grad(J, x, y, &g);
  std::vector<T> v(x.data().begin(), x.data().end());
  if (cfg.norm == NormKind::linf) {
    for (std::size_t i = 0; i < v.size(); ++i)
      v[i] = detail::clip_linf<T>(static_cast<double>(v[i]) + cfg.epsilon * detail::sign_of(g[i]), x.data()[i],
                                  cfg.epsilon, cfg.lo, cfg.hi);
  } else {
    const double radius = std::sqrt(static_cast<double>(d)) * cfg.epsilon;
    for (std::size_t s = 0; s < n; ++s) {
      double norm = 0;
      for (std::size_t k = 0; k < d; ++k) norm += static_cast<double>(g[s * d + k]) * g[s * d + k];
      norm = std::sqrt(norm);
      if (!(norm > 0)) {
        out.flagged[s] = true;
        continue;
      }
      for (std::size_t k = 0; k < d; ++k) {
        const std::size_t i = s * d + k;
        v[i] = static_cast<T>(std::clamp(static_cast<double>(v[i]) + radius * g[i] / norm, cfg.lo, cfg.hi));
      }
    }
  }
  out.perturbed = Tensor<T>(x.shape(), std::move(v));
  out.objective_after = detail::objective_and_grad<T>(J, out.perturbed, y, nullptr);
  return out;
}

namespace detail {

// Projects v (one sample) onto the l2 ball of radius r around x0, then the box.
template <class T>
void project_l2(T* v, const T* x0, std::size_t d, double r, double lo, double hi) {
  double norm = 0;
  for (std::size_t k = 0; k < d; ++k) norm += (static_cast<double>(v[k]) - x0[k]) * (static_cast<double>(v[k]) - x0[k]);
  norm = std::sqrt(norm);
  // shrink a hair below r so float rounding cannot leave the ball
  const double f = norm > r ? r / norm * (1 - 1e-7) : 1.0;
  for (std::size_t k = 0; k < d; ++k)
    v[k] = static_cast<T>(std::clamp(static_cast<double>(x0[k]) + f * (static_cast<double>(v[k]) - x0[k]), lo, hi));
}

}  // namespace detail

// Observer for PGD iterates (iteration index, current batch).
template <class T>
using PgdObserver = std::function<void(int, const Tensor<T>&)>;

template <class T>
AdvBatch<T> pgd(const Objective<T>& J, const Tensor<T>& x, const std::vector<int>& y, const AttackConfig& cfg,
                const PgdObserver<T>& observe = {}) {
  cfg.validate();
  if (cfg.method != AttackMethod::pgd) throw ConfigError("pgd called with a non-PGD config");
  const std::size_t n = x.dim(0), d = x.numel() / n;
  const auto x0 = x.data();
  const double eps = cfg.epsilon, alpha = cfg.step_size();
  const double radius = std::sqrt(static_cast<double>(d)) * eps;
  AdvBatch<T> out{x.detach(), Tensor<T>(), y, {}, {}, std::vector<bool>(n, false)};
  std::vector<T> v(x0.begin(), x0.end());
  std::mt19937_64 rng(cfg.seed);
  if (cfg.random_init && eps > 0) {
    if (cfg.norm == NormKind::linf) {
      std::uniform_real_distribution<double> u(-eps, eps);
      for (std::size_t i = 0; i < v.size(); ++i) v[i] = detail::clip_linf<T>(x0[i] + u(rng), x0[i], eps, cfg.lo, cfg.hi);
    } else {
      std::normal_distribution<double> g;
      std::uniform_real_distribution<double> u(0.0, 1.0);
      std::vector<double> dir(d);
      for (std::size_t s = 0; s < n; ++s) {
        double norm = 0;
        for (auto& z : dir) {
          z = g(rng);
          norm += z * z;
        }
        const double r = radius * std::pow(u(rng), 1.0 / static_cast<double>(d)) / std::sqrt(norm);
        for (std::size_t k = 0; k < d; ++k) v[s * d + k] = static_cast<T>(x0[s * d + k] + r * dir[k]);
        detail::project_l2(v.data() + s * d, x0.data() + s * d, d, radius, cfg.lo, cfg.hi);
      }
    }
  }
  std::vector<T> g;
  out.objective_before = detail::objective_and_grad<T>(J, x, y, nullptr);
  for (int it = 0; it < cfg.steps; ++it) {
    detail::objective_and_grad<T>(J, Tensor<T>(x.shape(), v), y, &g);
    if (cfg.norm == NormKind::linf) {
      for (std::size_t i = 0; i < v.size(); ++i)
        v[i] = detail::clip_linf<T>(static_cast<double>(v[i]) + alpha * detail::sign_of(g[i]), x0[i], eps, cfg.lo, cfg.hi);
    } else {
      const double step = std::sqrt(static_cast<double>(d)) * alpha;
      for (std::size_t s = 0; s < n; ++s) {
        double norm = 0;
        for (std::size_t k = 0; k < d; ++k) norm += static_cast<double>(g[s * d + k]) * g[s * d + k];
        norm = std::sqrt(norm);
        if (!(norm > 0)) {
          if (it == 0) out.flagged[s] = true;
          continue;
        }
        out.flagged[s] = false;
        for (std::size_t k = 0; k < d; ++k) v[s * d + k] = static_cast<T>(v[s * d + k] + step * g[s * d + k] / norm);
        detail::project_l2(v.data() + s * d, x0.data() + s * d, d, radius, cfg.lo, cfg.hi);
      }
    }
    if (observe) observe(it + 1, Tensor<T>(x.shape(), v));
  }
  out.perturbed = Tensor<T>(x.shape(), std::move(v));
  out.objective_after = detail::objective_and_grad<T>(J, out.perturbed, y, nullptr);
  return out;
}

template <class T>
AdvBatch<T> attack(const Objective<T>& J, const Tensor<T>& x, const std::vector<int>& y, const AttackConfig& cfg) {
  return cfg.method == AttackMethod::fgsm ? fgsm(J, x, y, cfg) : pgd(J, x, y, cfg);
}

// Attacks a large batch in chunks; outputs are concatenated.
template <class T>
AdvBatch<T> attack_chunked(const Objective<T>& J, const Tensor<T>& x, const std::vector<int>& y, AttackConfig cfg,
                           std::size_t chunk = 500) {
  const std::size_t n = x.dim(0), d = x.numel() / n;
  AdvBatch<T> all{x.detach(), Tensor<T>(), y, {}, {}, {}};
  std::vector<T> pert;
  pert.reserve(x.numel());
  const std::uint64_t base_seed = cfg.seed;
  for (std::size_t s = 0, c = 0; s < n; s += chunk, ++c) {
    const std::size_t e = std::min(n, s + chunk);
    Shape sh = x.shape();
    sh[0] = e - s;
    Tensor<T> part(sh, std::vector<T>(x.data().begin() + static_cast<std::ptrdiff_t>(s * d),
                                      x.data().begin() + static_cast<std::ptrdiff_t>(e * d)));
    std::vector<int> py(y.begin() + static_cast<std::ptrdiff_t>(s), y.begin() + static_cast<std::ptrdiff_t>(e));
    cfg.seed = base_seed + c;
    auto r = attack(J, part, py, cfg);
    pert.insert(pert.end(), r.perturbed.data().begin(), r.perturbed.data().end());
    all.objective_before.insert(all.objective_before.end(), r.objective_before.begin(), r.objective_before.end());
    all.objective_after.insert(all.objective_after.end(), r.objective_after.begin(), r.objective_after.end());
    all.flagged.insert(all.flagged.end(), r.flagged.begin(), r.flagged.end());
  }
  all.perturbed = Tensor<T>(x.shape(), std::move(pert));
  return all;
}

}  // namespace decorr
