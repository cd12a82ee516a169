#pragma once

// Adam and the training loops: classifier pairs (plain, distance-controlled,
// decorrelated), dual-neck autoencoders, evaluation classifiers and a
// simplified DVERGE fine-tuning phase.

#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <optional>
#include <sstream>

#include "decorr/corr.hpp"
#include "decorr/data_io.hpp"
#include "decorr/metrics.hpp"
#include "decorr/models.hpp"

namespace decorr {

inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEps = 1e-8;

struct AdamState {
  std::vector<std::vector<double>> m, v;
  long step = 0;
};

// One bias-corrected Adam update over the given leaves using their gradients.
template <class T>
void adam_step(std::vector<Tensor<T>>& params, AdamState& s, double lr, int epoch = -1) {
  if (s.m.empty()) {
    for (auto& p : params) {
      s.m.emplace_back(p.numel(), 0.0);
      s.v.emplace_back(p.numel(), 0.0);
    }
  }
  if (s.m.size() != params.size()) throw ContractError("Adam state does not match the parameter list");
  for (auto& p : params)
    for (T g : p.grad())
      if (!std::isfinite(static_cast<double>(g))) throw TrainingFailure("non-finite gradient", epoch);
  ++s.step;
  const double c1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(s.step));
  const double c2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(s.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto val = params[k].data();
    auto grad = params[k].grad();
    auto& m = s.m[k];
    auto& v = s.v[k];
    for (std::size_t i = 0; i < val.size(); ++i) {
      const double g = grad[i];
      m[i] = kAdamBeta1 * m[i] + (1 - kAdamBeta1) * g;
      v[i] = kAdamBeta2 * v[i] + (1 - kAdamBeta2) * g * g;
      val[i] = static_cast<T>(val[i] - lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + kAdamEps));
    }
  }
}

template <class T>
class Adam {
 public:
  Adam(std::vector<Tensor<T>> params, double lr) : params_(std::move(params)), lr_(lr) {
    for (auto& p : params_) p.set_requires_grad();
  }
  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }
  void step(int epoch = -1) { adam_step(params_, state_, lr_, epoch); }
  const AdamState& state() const { return state_; }
  double learning_rate() const { return lr_; }

 private:
  std::vector<Tensor<T>> params_;
  AdamState state_;
  double lr_;
};

struct TrainConfig {
  int epochs = 20;
  std::size_t batch_size = 500;
  double learning_rate = 5e-3;
  double lambda = 0.0;
  std::uint64_t seed = 0;
};

// One row of the per-epoch training log.
struct EpochLog {
  int epoch = 0;
  double loss = 0;  // total objective, averaged over batches
  double ce_1 = 0, ce_2 = 0;
  double aux = 0;  // correlation loss, distance term or reconstruction error
  double acc_1 = 0, acc_2 = 0;
  double seconds = 0;
};

inline std::string epoch_log_header() { return "epoch,loss,ce_1,ce_2,aux,acc_1,acc_2,seconds"; }

inline std::string epoch_log_row(const EpochLog& e) {
  std::ostringstream os;
  os << std::setprecision(10) << e.epoch << ',' << e.loss << ',' << e.ce_1 << ',' << e.ce_2 << ',' << e.aux << ','
     << e.acc_1 << ',' << e.acc_2 << ',' << e.seconds;
  return os.str();
}

inline void write_epoch_log(const std::string& path, const std::vector<EpochLog>& logs) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write training log '" + path + "'");
  os << epoch_log_header() << '\n';
  for (const auto& e : logs) os << epoch_log_row(e) << '\n';
}

// Called after every epoch (e.g. to stream the log).
using EpochHook = std::function<void(const EpochLog&)>;

enum class PairObjective { independent, distance, decorrelate };

struct PairOptions {
  PairObjective objective = PairObjective::independent;
  double target_distance = 0;  // D_t for the distance objective
  const Dataset* eval = nullptr;  // accuracy logged per epoch when given
  EpochHook on_epoch;
};

template <class T>
struct PairState {
  Network<T> a, b;
  AdamState opt_a, opt_b;
  std::vector<EpochLog> logs;
  bool trained = false;
};

namespace detail {

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (salt + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

template <class T>
Tensor<T> correlation_term(const Tensor<T>& f1, const Tensor<T>& f2, int epoch) {
  try {
    return correlation_loss(f1, f2);
  } catch (const DegenerateError& e) {
    throw TrainingFailure(std::string("correlation loss failed: ") + e.what(), epoch);
  } catch (const RankDeficiencyError& e) {
    throw TrainingFailure(std::string("correlation loss failed: ") + e.what(), epoch);
  }
}

inline void check_finite(double v, int epoch) {
  if (!std::isfinite(v)) throw TrainingFailure("loss diverged to a non-finite value", epoch);
}

template <class T>
double seconds_since(T start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

}  // namespace detail

template <class T>
PairState<T> make_pair(const ModelSpec& arch, std::uint64_t seed) {
  return {Network<T>::create(arch, detail::mix_seed(seed, 1)), Network<T>::create(arch, detail::mix_seed(seed, 2)),
          {}, {}, {}, false};
}

// Trains two classifiers on the same batches with
//   CE(f1) + CE(f2) + lambda * term
// where term is nothing, (D_t - ||theta1 - theta2||^2)^2 or the correlation
// loss between the tagged feature layers.
template <class T>
void train_pair(PairState<T>& st, const Dataset& train, const TrainConfig& cfg, const PairOptions& opt = {}) {
  const bool decorrelate = opt.objective == PairObjective::decorrelate;
  if (decorrelate) {
    const std::size_t m = numel_of(infer_shapes(st.a.spec.layers, st.a.spec.input)
                                       .at(static_cast<std::size_t>(st.a.spec.feature_tag)));
    if (cfg.batch_size <= m)
      throw ConfigError("batch size " + std::to_string(cfg.batch_size) + " must exceed the feature width " +
                        std::to_string(m));
  }
  if (opt.objective == PairObjective::distance && !(opt.target_distance > 0))
    throw ConfigError("target distance must be positive");
  auto pa = st.a.params.trainable(), pb = st.b.params.trainable();
  st.a.params.set_requires_grad(true);
  st.b.params.set_requires_grad(true);
  BatchIterator it(train.size(), cfg.batch_size, detail::mix_seed(cfg.seed, 3), decorrelate);
  std::vector<std::size_t> idx;
  const int first = static_cast<int>(st.logs.size());
  for (int ep = first; ep < first + cfg.epochs; ++ep) {
    const auto t0 = std::chrono::steady_clock::now();
    EpochLog log;
    log.epoch = ep + 1;
    std::size_t nb = 0;
    it.start_epoch(static_cast<std::size_t>(ep));
    while (it.next(idx)) {
      auto x = train.images<T>(idx);
      auto y = train.labels_at(idx);
      Tape tape;
      TapeScope scope(tape);
      auto o1 = st.a.with_features(x, BnMode::train);
      auto o2 = st.b.with_features(x, BnMode::train);
      auto ce1 = softmax_cross_entropy(o1.output, y);
      auto ce2 = softmax_cross_entropy(o2.output, y);
      auto loss = add(ce1, ce2);
      double aux = 0;
      if (decorrelate) {
        auto lr = detail::correlation_term(o1.features, o2.features, ep + 1);
        aux = lr.item();
        if (cfg.lambda != 0) loss = add(loss, scale(lr, static_cast<T>(cfg.lambda)));
      } else if (opt.objective == PairObjective::distance) {
        auto d = param_distance_tensor(st.a.params, st.b.params);
        aux = d.item();
        auto gap = add_scalar(scale(d, T{-1}), static_cast<T>(opt.target_distance));
        loss = add(loss, scale(square(gap), static_cast<T>(cfg.lambda)));
      }
      detail::check_finite(loss.item(), ep + 1);
      st.a.params.zero_grad();
      st.b.params.zero_grad();
      tape.backward(loss);
      adam_step(pa, st.opt_a, cfg.learning_rate, ep + 1);
      adam_step(pb, st.opt_b, cfg.learning_rate, ep + 1);
      log.loss += loss.item();
      log.ce_1 += ce1.item();
      log.ce_2 += ce2.item();
      log.aux += aux;
      ++nb;
    }
    log.loss /= static_cast<double>(nb);
    log.ce_1 /= static_cast<double>(nb);
    log.ce_2 /= static_cast<double>(nb);
    log.aux /= static_cast<double>(nb);
    if (opt.objective == PairObjective::distance) log.aux = param_distance(st.a.params, st.b.params);
    if (opt.eval) {
      log.acc_1 = natural_accuracy(st.a, *opt.eval);
      log.acc_2 = natural_accuracy(st.b, *opt.eval);
    }
    log.seconds = detail::seconds_since(t0);
    st.logs.push_back(log);
    if (opt.on_epoch) opt.on_epoch(log);
  }
  st.a.params.set_requires_grad(false);
  st.b.params.set_requires_grad(false);
  st.trained = true;
}

// Distance-controlled pair, lambda = 1e-5 by default.
template <class T>
PairState<T> train_pair_distance(const ModelSpec& arch, double target_distance, const Dataset& train,
                                 TrainConfig cfg, const Dataset* eval = nullptr) {
  auto st = make_pair<T>(arch, cfg.seed);
  train_pair(st, train, cfg, {PairObjective::distance, target_distance, eval, {}});
  return st;
}

// Decorrelated (lambda > 0) or baseline parallel pair.
template <class T>
PairState<T> train_pair_decorrelated(const ModelSpec& arch, const Dataset& train, TrainConfig cfg, bool decorrelate,
                                     const Dataset* eval = nullptr) {
  auto st = make_pair<T>(arch, cfg.seed);
  if (!decorrelate) cfg.lambda = 0;
  train_pair(st, train, cfg, {decorrelate ? PairObjective::decorrelate : PairObjective::independent, 0, eval, {}});
  return st;
}

// MSE_a^2 + MSE_b^2 + lambda * L_R(bottleneck_a, bottleneck_b).
template <class T>
std::vector<EpochLog> train_dna(DnaModel<T>& dna, const Dataset& train, const TrainConfig& cfg,
                                const EpochHook& on_epoch = {}) {
  const std::size_t m = dna.spec.feature_width();
  if (cfg.lambda != 0 && cfg.batch_size <= m)
    throw ConfigError("batch size " + std::to_string(cfg.batch_size) + " must exceed the bottleneck width " +
                      std::to_string(m));
  auto params = dna.params.trainable();
  dna.params.set_requires_grad(true);
  AdamState opt;
  BatchIterator it(train.size(), cfg.batch_size, detail::mix_seed(cfg.seed, 4), cfg.lambda != 0);
  std::vector<std::size_t> idx;
  std::vector<EpochLog> logs;
  for (int ep = 0; ep < cfg.epochs; ++ep) {
    const auto t0 = std::chrono::steady_clock::now();
    EpochLog log;
    log.epoch = ep + 1;
    std::size_t nb = 0;
    it.start_epoch(static_cast<std::size_t>(ep));
    while (it.next(idx)) {
      auto x = train.images<T>(idx);
      Tape tape;
      TapeScope scope(tape);
      auto out = dna(x, BnMode::train);
      auto ma = mse(out.recon_a, x), mb = mse(out.recon_b, x);
      auto loss = add(square(ma), square(mb));
      double aux = 0;
      if (cfg.lambda != 0) {
        auto lr = detail::correlation_term(out.features_a, out.features_b, ep + 1);
        aux = lr.item();
        loss = add(loss, scale(lr, static_cast<T>(cfg.lambda)));
      }
      detail::check_finite(loss.item(), ep + 1);
      dna.params.zero_grad();
      tape.backward(loss);
      adam_step(params, opt, cfg.learning_rate, ep + 1);
      log.loss += loss.item();
      log.ce_1 += ma.item();  // reconstruction errors in the CE slots
      log.ce_2 += mb.item();
      log.aux += aux;
      ++nb;
    }
    log.loss /= static_cast<double>(nb);
    log.ce_1 /= static_cast<double>(nb);
    log.ce_2 /= static_cast<double>(nb);
    log.aux /= static_cast<double>(nb);
    log.seconds = detail::seconds_since(t0);
    logs.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  dna.params.set_requires_grad(false);
  return logs;
}

// Single-bottleneck baseline: plain MSE reconstruction loss.
template <class T>
std::vector<EpochLog> train_autoencoder(Network<T>& ae, const Dataset& train, const TrainConfig& cfg,
                                        const EpochHook& on_epoch = {}) {
  auto params = ae.params.trainable();
  ae.params.set_requires_grad(true);
  AdamState opt;
  BatchIterator it(train.size(), cfg.batch_size, detail::mix_seed(cfg.seed, 5));
  std::vector<std::size_t> idx;
  std::vector<EpochLog> logs;
  for (int ep = 0; ep < cfg.epochs; ++ep) {
    const auto t0 = std::chrono::steady_clock::now();
    EpochLog log;
    log.epoch = ep + 1;
    std::size_t nb = 0;
    it.start_epoch(static_cast<std::size_t>(ep));
    while (it.next(idx)) {
      auto x = train.images<T>(idx);
      Tape tape;
      TapeScope scope(tape);
      auto recon = ae(x, BnMode::train);
      auto loss = mse(recon, reshape(x, recon.shape()));
      detail::check_finite(loss.item(), ep + 1);
      ae.params.zero_grad();
      tape.backward(loss);
      adam_step(params, opt, cfg.learning_rate, ep + 1);
      log.loss += loss.item();
      ++nb;
    }
    log.loss /= static_cast<double>(nb);
    log.ce_1 = log.loss;
    log.seconds = detail::seconds_since(t0);
    logs.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  ae.params.set_requires_grad(false);
  return logs;
}

// Produces classifier inputs; the raw source returns x unchanged.
template <class T>
using InputTransform = std::function<Tensor<T>(const Tensor<T>& x, std::mt19937_64& rng)>;

// Reconstructions of a frozen DNA, pathway chosen uniformly per sample.
template <class T>
InputTransform<T> dna_outputs(DnaModel<T>& dna) {
  return [&dna](const Tensor<T>& x, std::mt19937_64& rng) {
    NoGradScope ng;
    auto o = dna(x, BnMode::eval);
    const std::size_t n = x.dim(0), d = o.recon_a.numel() / n;
    std::vector<T> v(o.recon_a.numel());
    std::bernoulli_distribution coin(0.5);
    for (std::size_t i = 0; i < n; ++i) {
      const auto& src = coin(rng) ? o.recon_b : o.recon_a;
      std::copy_n(src.data().begin() + static_cast<std::ptrdiff_t>(i * d), d,
                  v.begin() + static_cast<std::ptrdiff_t>(i * d));
    }
    return Tensor<T>(o.recon_a.shape(), std::move(v));
  };
}

// Reconstructions of a frozen single-pathway autoencoder.
template <class T>
InputTransform<T> ae_outputs(Network<T>& ae, Shape image_shape) {
  return [&ae, image_shape](const Tensor<T>& x, std::mt19937_64&) {
    NoGradScope ng;
    return conform_input(ae(x, BnMode::eval), image_shape);
  };
}

// Standard cross-entropy training; `source` maps raw batches to inputs.
template <class T>
std::vector<EpochLog> train_classifier(Network<T>& net, const Dataset& train, const TrainConfig& cfg,
                                       const InputTransform<T>& source = {}, const Dataset* eval = nullptr,
                                       const EpochHook& on_epoch = {}) {
  auto params = net.params.trainable();
  net.params.set_requires_grad(true);
  AdamState opt;
  std::mt19937_64 rng(detail::mix_seed(cfg.seed, 6));
  BatchIterator it(train.size(), cfg.batch_size, detail::mix_seed(cfg.seed, 7));
  std::vector<std::size_t> idx;
  std::vector<EpochLog> logs;
  for (int ep = 0; ep < cfg.epochs; ++ep) {
    const auto t0 = std::chrono::steady_clock::now();
    EpochLog log;
    log.epoch = ep + 1;
    std::size_t nb = 0;
    it.start_epoch(static_cast<std::size_t>(ep));
    while (it.next(idx)) {
      auto x = train.images<T>(idx);
      if (source) x = source(x, rng);
      auto y = train.labels_at(idx);
      Tape tape;
      TapeScope scope(tape);
      auto loss = softmax_cross_entropy(net(x, BnMode::train), y);
      detail::check_finite(loss.item(), ep + 1);
      net.params.zero_grad();
      tape.backward(loss);
      adam_step(params, opt, cfg.learning_rate, ep + 1);
      log.loss += loss.item();
      ++nb;
    }
    log.loss /= static_cast<double>(nb);
    log.ce_1 = log.loss;
    if (eval) log.acc_1 = natural_accuracy(net, *eval);
    log.seconds = detail::seconds_since(t0);
    logs.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  net.params.set_requires_grad(false);
  return logs;
}

struct DvergeConfig {
  int epochs = 10;
  double eps_d = 0.07;
  int inner_steps = 10;
  double step = -1;  // defaults to eps_d / 4
  std::size_t batch_size = 500;
  double learning_rate = 5e-3;
  std::uint64_t seed = 0;
};

// Distilled-feature sample: the point of the l-inf ball of radius eps around
// x_t (clipped to [0,1]) whose tagged features under `net` mimic those of
// x_s, found by sign-gradient descent without momentum.
template <class T>
Tensor<T> distill_features(Network<T>& net, const Tensor<T>& x_s, const Tensor<T>& x_t, double eps, int steps,
                           double step) {
  Tensor<T> target;
  {
    NoGradScope ng;
    target = net.with_features(x_s, BnMode::eval).features;
  }
  auto x = x_t.detach();
  const bool had_grad = !net.params.entries().empty() && net.params.entries()[0].value.requires_grad();
  net.params.set_requires_grad(false);
  for (int s = 0; s < steps && eps > 0; ++s) {
    x.set_requires_grad();
    x.zero_grad();
    Tape tape;
    TapeScope scope(tape);
    auto f = net.with_features(x, BnMode::eval).features;
    tape.backward(sum(square(sub(f, target))));
    auto xv = x.data();
    auto g = x.grad();
    auto t = x_t.data();
    std::vector<T> next(xv.size());
    for (std::size_t i = 0; i < xv.size(); ++i) {
      const double sg = g[i] > 0 ? 1.0 : g[i] < 0 ? -1.0 : 0.0;
      double v = static_cast<double>(xv[i]) - step * sg;
      v = std::clamp(v, static_cast<double>(t[i]) - eps, static_cast<double>(t[i]) + eps);
      next[i] = static_cast<T>(std::clamp(v, 0.0, 1.0));
    }
    x = Tensor<T>(x_t.shape(), std::move(next));
  }
  net.params.set_requires_grad(had_grad);
  return x.detach();
}

// Simplified DVERGE: batches alternate which model distils features; the
// other model is trained with cross-entropy on (x', y_s).
template <class T>
void dverge_finetune(PairState<T>& st, const Dataset& train, const DvergeConfig& cfg, const Dataset* eval = nullptr,
                     const EpochHook& on_epoch = {}) {
  if (!st.trained) throw ContractError("dverge_finetune needs a trained pair");
  const double step = cfg.step > 0 ? cfg.step : cfg.eps_d / 4;
  Network<T>* nets[2] = {&st.a, &st.b};
  AdamState* opts[2] = {&st.opt_a, &st.opt_b};
  std::vector<Tensor<T>> params[2] = {st.a.params.trainable(), st.b.params.trainable()};
  BatchIterator src(train.size(), cfg.batch_size, detail::mix_seed(cfg.seed, 8));
  BatchIterator tgt(train.size(), cfg.batch_size, detail::mix_seed(cfg.seed, 9));
  std::vector<std::size_t> is, it_;
  const int first = static_cast<int>(st.logs.size());
  long batch_no = 0;
  for (int ep = first; ep < first + cfg.epochs; ++ep) {
    const auto t0 = std::chrono::steady_clock::now();
    EpochLog log;
    log.epoch = ep + 1;
    std::size_t nb[2] = {0, 0};
    src.start_epoch(static_cast<std::size_t>(ep));
    tgt.start_epoch(static_cast<std::size_t>(ep));
    while (src.next(is)) {
      if (!tgt.next(it_)) {
        tgt.start_epoch(static_cast<std::size_t>(ep) + 1000);
        tgt.next(it_);
      }
      if (it_.size() != is.size()) it_.resize(std::min(it_.size(), is.size())), is.resize(it_.size());
      const int j = static_cast<int>(batch_no++ % 2), i = 1 - j;
      auto xs = train.images<T>(is), xt = train.images<T>(it_);
      auto ys = train.labels_at(is);
      auto xd = distill_features(*nets[j], xs, xt, cfg.eps_d, cfg.inner_steps, step);
      nets[i]->params.set_requires_grad(true);
      Tape tape;
      TapeScope scope(tape);
      auto loss = softmax_cross_entropy((*nets[i])(xd, BnMode::train), ys);
      detail::check_finite(loss.item(), ep + 1);
      nets[i]->params.zero_grad();
      tape.backward(loss);
      adam_step(params[i], *opts[i], cfg.learning_rate, ep + 1);
      nets[i]->params.set_requires_grad(false);
      (i == 0 ? log.ce_1 : log.ce_2) += loss.item();
      ++nb[i];
    }
    if (nb[0]) log.ce_1 /= static_cast<double>(nb[0]);
    if (nb[1]) log.ce_2 /= static_cast<double>(nb[1]);
    log.loss = log.ce_1 + log.ce_2;
    if (eval) {
      log.acc_1 = natural_accuracy(st.a, *eval);
      log.acc_2 = natural_accuracy(st.b, *eval);
    }
    log.seconds = detail::seconds_since(t0);
    st.logs.push_back(log);
    if (on_epoch) on_epoch(log);
  }
}

}  // namespace decorr
