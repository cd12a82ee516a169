#pragma once

// Central finite-difference oracle for the tape. Independent of every backward
// rule: it only ever calls forward code.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "decorr/tensor.hpp"

namespace decorr::testing {

inline Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(numel_of(shape));
  for (auto& x : v) x = u(rng);
  return Tensor<double>(std::move(shape), std::move(v));
}

struct GradCheck {
  double max_rel_err = 0;
  double max_abs_err = 0;
};

// Compares analytic gradients of loss(inputs) with central differences for
// every input. The relative error is measured against the gradient scale of
// each input, so near-zero entries do not blow up the ratio.
inline GradCheck check_gradients(const std::function<Tensor<double>(std::vector<Tensor<double>>&)>& loss,
                                 std::vector<Tensor<double>> inputs, double h = 1e-6) {
  // Fresh leaves: callers may reuse tensors across checks.
  for (auto& t : inputs) t = t.detach().set_requires_grad(true);
  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    TapeScope scope(tape);
    auto l = loss(inputs);
    tape.backward(l);
    for (auto& t : inputs) analytic.emplace_back(t.grad().begin(), t.grad().end());
  }
  GradCheck out;
  NoGradScope nograd;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto vals = inputs[k].data();
    std::vector<double> numeric(vals.size());
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double orig = vals[i];
      vals[i] = orig + h;
      const double fp = loss(inputs).item();
      vals[i] = orig - h;
      const double fm = loss(inputs).item();
      vals[i] = orig;
      numeric[i] = (fp - fm) / (2 * h);
    }
    double scale = 0;
    for (double v : numeric) scale = std::max(scale, std::abs(v));
    scale = std::max(scale, 1e-8);
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double abs_err = std::abs(numeric[i] - analytic[k][i]);
      out.max_abs_err = std::max(out.max_abs_err, abs_err);
      out.max_rel_err = std::max(out.max_rel_err, abs_err / scale);
    }
  }
  return out;
}

}  // namespace decorr::testing
