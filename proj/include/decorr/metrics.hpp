#pragma once

// Prediction and accuracy helpers shared by training logs and the harness.

#include <vector>

#include "decorr/data_io.hpp"
#include "decorr/models.hpp"

namespace decorr {

template <class T>
std::vector<int> argmax_rows(const Tensor<T>& logits) {
  if (logits.rank() != 2) throw DimensionError("argmax_rows needs N x K logits, got " + shape_str(logits.shape()));
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j)
      if (logits[i * k + j] > logits[i * k + best]) best = j;
    out[i] = static_cast<int>(best);
  }
  return out;
}

// Eval-mode predictions for an image batch, computed in chunks without a tape.
template <class T, class Fn>
std::vector<int> predict_chunked(Fn&& logits_of, const Tensor<T>& x, std::size_t chunk = 1000) {
  NoGradScope ng;
  const std::size_t n = x.dim(0), d = x.numel() / n;
  std::vector<int> out;
  out.reserve(n);
  for (std::size_t s = 0; s < n; s += chunk) {
    const std::size_t e = std::min(n, s + chunk);
    Shape sh = x.shape();
    sh[0] = e - s;
    Tensor<T> part(sh, std::vector<T>(x.data().begin() + static_cast<std::ptrdiff_t>(s * d),
                                      x.data().begin() + static_cast<std::ptrdiff_t>(e * d)));
    auto p = argmax_rows(logits_of(part));
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

template <class T>
std::vector<int> predict(Network<T>& net, const Tensor<T>& x, std::size_t chunk = 1000) {
  return predict_chunked<T>([&](const Tensor<T>& b) { return net(b, BnMode::eval); }, x, chunk);
}

inline double accuracy(const std::vector<int>& pred, const std::vector<int>& labels) {
  if (pred.size() != labels.size()) throw DimensionError("accuracy: prediction and label counts differ");
  if (pred.empty()) return 0.0;
  std::size_t ok = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) ok += pred[i] == labels[i];
  return static_cast<double>(ok) / static_cast<double>(pred.size());
}

// Top-1 accuracy with eval-mode batch normalisation.
template <class T>
double natural_accuracy(Network<T>& net, const Dataset& ds, std::size_t chunk = 1000) {
  std::vector<int> pred;
  for (std::size_t s = 0; s < ds.size(); s += chunk) {
    std::vector<std::size_t> idx;
    for (std::size_t i = s; i < std::min(ds.size(), s + chunk); ++i) idx.push_back(i);
    auto p = predict(net, ds.images<T>(idx), chunk);
    pred.insert(pred.end(), p.begin(), p.end());
  }
  return accuracy(pred, ds.labels);
}

}  // namespace decorr
