#pragma once

// Declarative model blueprints, parameter storage/initialisation, forward
// passes with a tagged feature layer, and the "DNAC" checkpoint format.

#include <cmath>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "decorr/detail/binary_io.hpp"
#include "decorr/nn_ops.hpp"
#include "decorr/ops.hpp"

namespace decorr {

enum class LayerKind { affine, conv3x3, conv1x1, maxpool, avgpool, batchnorm, relu, sigmoid, flatten, reshape, deconv, residual };

struct Layer {
  LayerKind kind;
  std::size_t units = 0;   // output features / channels
  std::size_t window = 2;  // avgpool window
  Shape target;            // reshape target (per sample)

  static Layer affine(std::size_t n) { return {LayerKind::affine, n, 2, {}}; }
  static Layer conv3x3(std::size_t k) { return {LayerKind::conv3x3, k, 2, {}}; }
  static Layer conv1x1(std::size_t k) { return {LayerKind::conv1x1, k, 2, {}}; }
  static Layer maxpool() { return {LayerKind::maxpool, 0, 2, {}}; }
  static Layer avgpool(std::size_t w) { return {LayerKind::avgpool, 0, w, {}}; }
  static Layer batchnorm() { return {LayerKind::batchnorm, 0, 2, {}}; }
  static Layer relu() { return {LayerKind::relu, 0, 2, {}}; }
  static Layer sigmoid() { return {LayerKind::sigmoid, 0, 2, {}}; }
  static Layer flatten() { return {LayerKind::flatten, 0, 2, {}}; }
  static Layer reshape(Shape s) { return {LayerKind::reshape, 0, 2, std::move(s)}; }
  static Layer deconv(std::size_t k) { return {LayerKind::deconv, k, 2, {}}; }
  // two conv3x3(k)-batchnorm-relu with an identity skip
  static Layer residual(std::size_t k) { return {LayerKind::residual, k, 2, {}}; }

  std::string describe() const {
    switch (kind) {
      case LayerKind::affine: return "Linear(" + std::to_string(units) + ")";
      case LayerKind::conv3x3: return "Conv(" + std::to_string(units) + ")";
      case LayerKind::conv1x1: return "Conv1x1(" + std::to_string(units) + ")";
      case LayerKind::maxpool: return "Pool";
      case LayerKind::avgpool: return "AvgPool(" + std::to_string(window) + ")";
      case LayerKind::batchnorm: return "Norm";
      case LayerKind::relu: return "ReLU";
      case LayerKind::sigmoid: return "Sigmoid";
      case LayerKind::flatten: return "Flatten";
      case LayerKind::reshape: return "Reshape" + shape_str(target);
      case LayerKind::deconv: return "Deconv(" + std::to_string(units) + ")";
      case LayerKind::residual: return "Residual(" + std::to_string(units) + ")";
    }
    return "?";
  }
};

enum class OutputKind { logits, image };

struct ModelSpec {
  std::string name;
  Shape input;  // per-sample shape
  std::vector<Layer> layers;
  int feature_tag = -1;  // -1: no tagged layer
  OutputKind output_kind = OutputKind::logits;

  std::string describe() const {
    std::string s = name + " " + shape_str(input) + ":";
    for (std::size_t i = 0; i < layers.size(); ++i) {
      s += (i ? "-" : " ") + layers[i].describe();
      if (static_cast<int>(i) == feature_tag) s += "*";
    }
    return s;
  }
};

// Per-sample output shape after each layer.
inline std::vector<Shape> infer_shapes(const std::vector<Layer>& layers, Shape in) {
  std::vector<Shape> out;
  auto need_image = [&](const Layer& l) {
    if (in.size() != 3) throw DimensionError(l.describe() + " needs C x H x W input, got " + shape_str(in));
  };
  for (const auto& l : layers) {
    switch (l.kind) {
      case LayerKind::affine:
        if (in.size() != 1) throw DimensionError("Linear needs flat input, got " + shape_str(in));
        in = {l.units};
        break;
      case LayerKind::conv3x3:
      case LayerKind::conv1x1:
        need_image(l);
        in[0] = l.units;
        break;
      case LayerKind::residual:
        need_image(l);
        if (in[0] != l.units) throw DimensionError("Residual(" + std::to_string(l.units) + ") on " + shape_str(in));
        break;
      case LayerKind::maxpool:
        need_image(l);
        if (in[1] % 2 || in[2] % 2) throw DimensionError("Pool needs even spatial dims, got " + shape_str(in));
        in = {in[0], in[1] / 2, in[2] / 2};
        break;
      case LayerKind::avgpool:
        need_image(l);
        if (in[1] % l.window || in[2] % l.window)
          throw DimensionError(l.describe() + " does not divide " + shape_str(in));
        in = {in[0], in[1] / l.window, in[2] / l.window};
        break;
      case LayerKind::deconv:
        need_image(l);
        in = {l.units, in[1] * 2, in[2] * 2};
        break;
      case LayerKind::batchnorm:
        if (in.size() != 1 && in.size() != 3) throw DimensionError("Norm on " + shape_str(in));
        break;
      case LayerKind::relu:
      case LayerKind::sigmoid:
        break;
      case LayerKind::flatten:
        in = {numel_of(in)};
        break;
      case LayerKind::reshape:
        if (numel_of(l.target) != numel_of(in))
          throw DimensionError("cannot reshape " + shape_str(in) + " to " + shape_str(l.target));
        in = l.target;
        break;
    }
    out.push_back(in);
  }
  return out;
}

inline Shape output_shape(const ModelSpec& s) {
  auto shapes = infer_shapes(s.layers, s.input);
  return shapes.empty() ? s.input : shapes.back();
}

// Layers carrying weights (affine, convolutions, deconv); a residual block counts its two convolutions.
inline std::size_t parameterized_layers(const std::vector<Layer>& layers) {
  std::size_t n = 0;
  for (const auto& l : layers) {
    if (l.kind == LayerKind::affine || l.kind == LayerKind::conv3x3 || l.kind == LayerKind::conv1x1 ||
        l.kind == LayerKind::deconv)
      ++n;
    else if (l.kind == LayerKind::residual)
      n += 2;
  }
  return n;
}

template <class T>
class ParamSet {
 public:
  struct Entry {
    std::string name;
    Tensor<T> value;
    bool trainable = true;
  };

  void add(const std::string& name, Tensor<T> t, bool trainable = true) {
    if (index_.count(name)) throw ContractError("duplicate parameter name '" + name + "'");
    index_[name] = entries_.size();
    entries_.push_back({name, std::move(t), trainable});
  }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  Tensor<T>& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("no parameter named '" + name + "'");
    return entries_[it->second].value;
  }
  const Tensor<T>& at(const std::string& name) const { return const_cast<ParamSet*>(this)->at(name); }

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  std::vector<Tensor<T>> trainable() const {
    std::vector<Tensor<T>> out;
    for (const auto& e : entries_)
      if (e.trainable) out.push_back(e.value);
    return out;
  }
  std::size_t trainable_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_)
      if (e.trainable) n += e.value.numel();
    return n;
  }

  void set_requires_grad(bool on) {
    for (auto& e : entries_)
      if (e.trainable) e.value.set_requires_grad(on);
  }
  void zero_grad() {
    for (auto& e : entries_) e.value.zero_grad();
  }

  // Deep copy with fresh nodes.
  ParamSet clone() const {
    ParamSet out;
    for (const auto& e : entries_) {
      auto t = e.value.detach();
      if (e.value.requires_grad()) t.set_requires_grad();
      out.add(e.name, std::move(t), e.trainable);
    }
    return out;
  }

  // Copies values from another set with identical layout.
  void assign(const ParamSet& o) {
    if (o.size() != size()) throw ContractError("parameter layouts differ");
    for (std::size_t i = 0; i < size(); ++i) {
      if (o.entries_[i].name != entries_[i].name || o.entries_[i].value.shape() != entries_[i].value.shape())
        throw ContractError("parameter layouts differ at '" + entries_[i].name + "'");
      std::copy(o.entries_[i].value.data().begin(), o.entries_[i].value.data().end(),
                entries_[i].value.data().begin());
    }
  }

  // Moves entries of another set in under a name prefix.
  void merge(const ParamSet& o, const std::string& prefix = "") {
    for (const auto& e : o.entries_) add(prefix + e.name, e.value, e.trainable);
  }

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

namespace detail {

template <class T>
Tensor<T> kaiming_uniform(Shape s, std::size_t fan_in, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> u(-bound, bound);
  std::vector<T> v(numel_of(s));
  for (auto& x : v) x = static_cast<T>(u(rng));
  return Tensor<T>(std::move(s), std::move(v));
}

template <class T>
void add_conv(ParamSet<T>& p, const std::string& name, std::size_t cin, std::size_t cout, std::size_t k,
              std::mt19937_64& rng) {
  p.add(name + ".weight", kaiming_uniform<T>(Shape{cout, cin, k, k}, cin * k * k, rng));
  p.add(name + ".bias", Tensor<T>::zeros(Shape{cout}));
}

template <class T>
void add_norm(ParamSet<T>& p, const std::string& name, std::size_t f) {
  p.add(name + ".gamma", Tensor<T>(Shape{f}, T{1}));
  p.add(name + ".beta", Tensor<T>::zeros(Shape{f}));
  p.add(name + ".running_mean", Tensor<T>::zeros(Shape{f}), false);
  p.add(name + ".running_var", Tensor<T>(Shape{f}, T{1}), false);
}

}  // namespace detail

// Kaiming fan-in uniform weights, zero biases, unit/zero norm affine terms.
template <class T>
void init_layers(const std::vector<Layer>& layers, Shape in, const std::string& prefix, ParamSet<T>& p,
                 std::mt19937_64& rng) {
  const auto shapes = infer_shapes(layers, in);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    const std::string name = prefix + std::to_string(i);
    switch (l.kind) {
      case LayerKind::affine:
        p.add(name + ".weight", detail::kaiming_uniform<T>(Shape{in[0], l.units}, in[0], rng));
        p.add(name + ".bias", Tensor<T>::zeros(Shape{l.units}));
        break;
      case LayerKind::conv3x3: detail::add_conv(p, name, in[0], l.units, 3, rng); break;
      case LayerKind::conv1x1: detail::add_conv(p, name, in[0], l.units, 1, rng); break;
      case LayerKind::deconv:
        p.add(name + ".weight", detail::kaiming_uniform<T>(Shape{in[0], l.units, 2, 2}, in[0] * 4, rng));
        p.add(name + ".bias", Tensor<T>::zeros(Shape{l.units}));
        break;
      case LayerKind::batchnorm: detail::add_norm(p, name, in[0]); break;
      case LayerKind::residual:
        for (int j = 0; j < 2; ++j) {
          detail::add_conv(p, name + ".conv" + std::to_string(j), l.units, l.units, 3, rng);
          detail::add_norm(p, name + ".norm" + std::to_string(j), l.units);
        }
        break;
      default: break;
    }
    in = shapes[i];
  }
}

template <class T>
ParamSet<T> init_params(const ModelSpec& spec, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ParamSet<T> p;
  init_layers(spec.layers, spec.input, "", p, rng);
  return p;
}

namespace detail {

template <class T>
Tensor<T> norm(const Tensor<T>& x, ParamSet<T>& p, const std::string& name, BnMode mode) {
  return batchnorm(x, p.at(name + ".gamma"), p.at(name + ".beta"), p.at(name + ".running_mean"),
                   p.at(name + ".running_var"), mode);
}

}  // namespace detail

// Runs a layer list on a batch (N x per-sample shape). When tag >= 0 the
// flattened output of that layer is written to *features.
template <class T>
Tensor<T> run_layers(const std::vector<Layer>& layers, ParamSet<T>& p, const std::string& prefix, Tensor<T> x,
                     BnMode mode, int tag = -1, Tensor<T>* features = nullptr) {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    const std::string name = prefix + std::to_string(i);
    switch (l.kind) {
      case LayerKind::affine: x = affine(x, p.at(name + ".weight"), p.at(name + ".bias")); break;
      case LayerKind::conv3x3:
      case LayerKind::conv1x1: x = conv2d(x, p.at(name + ".weight"), p.at(name + ".bias")); break;
      case LayerKind::deconv: x = deconv2x2(x, p.at(name + ".weight"), p.at(name + ".bias")); break;
      case LayerKind::maxpool: x = pool(x, PoolKind::max2x2); break;
      case LayerKind::avgpool: x = pool(x, PoolKind::avg, l.window); break;
      case LayerKind::batchnorm: x = detail::norm(x, p, name, mode); break;
      case LayerKind::relu: x = relu(x); break;
      case LayerKind::sigmoid: x = sigmoid(x); break;
      case LayerKind::flatten: x = flatten(x); break;
      case LayerKind::reshape: {
        Shape s{x.dim(0)};
        s.insert(s.end(), l.target.begin(), l.target.end());
        x = reshape(x, s);
        break;
      }
      case LayerKind::residual: {
        auto h = x;
        for (int j = 0; j < 2; ++j) {
          const std::string c = name + ".conv" + std::to_string(j), nm = name + ".norm" + std::to_string(j);
          h = relu(detail::norm(conv2d(h, p.at(c + ".weight"), p.at(c + ".bias")), p, nm, mode));
        }
        x = add(h, x);
        break;
      }
    }
    if (static_cast<int>(i) == tag && features) *features = x.rank() == 2 ? x : flatten(x);
  }
  return x;
}

// Reshapes a batch to N x spec.input, checking the per-sample element count.
template <class T>
Tensor<T> conform_input(const Tensor<T>& x, const Shape& per_sample) {
  if (x.rank() < 1 || x.numel() != x.dim(0) * numel_of(per_sample))
    throw DimensionError("input " + shape_str(x.shape()) + " does not match per-sample shape " +
                         shape_str(per_sample));
  Shape s{x.dim(0)};
  s.insert(s.end(), per_sample.begin(), per_sample.end());
  return s == x.shape() ? x : reshape(x, s);
}

template <class T>
struct ForwardOutput {
  Tensor<T> output;
  Tensor<T> features;  // N x M, on the same tape as output
};

template <class T>
ForwardOutput<T> forward_with_features(const ModelSpec& spec, ParamSet<T>& p, const Tensor<T>& x,
                                       BnMode mode = BnMode::train) {
  ForwardOutput<T> out;
  out.output = run_layers(spec.layers, p, "", conform_input(x, spec.input), mode, spec.feature_tag, &out.features);
  return out;
}

template <class T>
Tensor<T> forward(const ModelSpec& spec, ParamSet<T>& p, const Tensor<T>& x, BnMode mode = BnMode::eval) {
  return run_layers(spec.layers, p, "", conform_input(x, spec.input), mode);
}

// Model blueprint bundled with its parameters.
template <class T>
struct Network {
  ModelSpec spec;
  ParamSet<T> params;

  static Network create(ModelSpec spec, std::uint64_t seed) {
    auto p = init_params<T>(spec, seed);
    return {std::move(spec), std::move(p)};
  }
  Tensor<T> operator()(const Tensor<T>& x, BnMode mode = BnMode::eval) { return forward(spec, params, x, mode); }
  ForwardOutput<T> with_features(const Tensor<T>& x, BnMode mode = BnMode::train) {
    return forward_with_features(spec, params, x, mode);
  }
  Network clone() const { return {spec, params.clone()}; }
};

// ---------------------------------------------------------------- builders

inline ModelSpec build_cnn_classifier() {
  using L = Layer;
  return {"cnn_classifier",
          {1, 28, 28},
          {L::conv3x3(16), L::relu(), L::maxpool(), L::conv3x3(32), L::relu(), L::maxpool(), L::avgpool(7), L::flatten(),
           L::affine(10)},
          7,
          OutputKind::logits};
}

inline ModelSpec build_fc_classifier() {
  using L = Layer;
  return {"fc_classifier",
          {784},
          {L::affine(256), L::batchnorm(), L::relu(), L::affine(128), L::batchnorm(), L::relu(), L::affine(10)},
          5,
          OutputKind::logits};
}

inline ModelSpec build_eval_classifier_mnist() {
  using L = Layer;
  return {"eval_classifier_mnist",
          {1, 28, 28},
          {L::conv3x3(16), L::relu(), L::maxpool(), L::conv3x3(32), L::relu(), L::maxpool(), L::flatten(), L::affine(10)},
          -1,
          OutputKind::logits};
}

inline ModelSpec build_eval_classifier_cifar() {
  using L = Layer;
  std::vector<Layer> layers;
  for (std::size_t k : {32, 64, 128}) {
    layers.push_back(L::conv3x3(k));
    layers.push_back(L::batchnorm());
    layers.push_back(L::relu());
    layers.push_back(L::maxpool());
  }
  layers.push_back(L::flatten());
  layers.push_back(L::affine(10));
  return {"eval_classifier_cifar", {3, 32, 32}, std::move(layers), -1, OutputKind::logits};
}

enum class DatasetKind { mnist, cifar10 };

inline ModelSpec build_eval_classifiers(DatasetKind d) {
  return d == DatasetKind::mnist ? build_eval_classifier_mnist() : build_eval_classifier_cifar();
}

// Shared encoder -> two separately parameterised bottlenecks -> shared decoder.
struct DnaSpec {
  std::string name;
  Shape input;        // per-sample network input
  Shape image_shape;  // per-sample reconstruction layout
  std::vector<Layer> encoder;
  std::vector<Layer> bottleneck;  // instantiated twice (a and b)
  int bottleneck_tag = -1;
  std::vector<Layer> decoder;
  int unshared_layers = 2;

  std::vector<Layer> pathway() const {
    std::vector<Layer> all = encoder;
    all.insert(all.end(), bottleneck.begin(), bottleneck.end());
    all.insert(all.end(), decoder.begin(), decoder.end());
    return all;
  }
  std::size_t feature_width() const {
    auto shapes = infer_shapes(bottleneck, infer_shapes_or_input(encoder, input));
    return numel_of(shapes.at(static_cast<std::size_t>(bottleneck_tag)));
  }
  static Shape infer_shapes_or_input(const std::vector<Layer>& l, const Shape& in) {
    auto s = infer_shapes(l, in);
    return s.empty() ? in : s.back();
  }
  std::string describe() const {
    ModelSpec whole{name, input, pathway(), static_cast<int>(encoder.size()) + bottleneck_tag, OutputKind::image};
    return whole.describe() + " unshared=" + std::to_string(unshared_layers);
  }
};

inline DnaSpec build_dna_mnist(int unshared) {
  using L = Layer;
  // six affine stages; the middle `unshared` are duplicated per pathway
  const std::vector<std::vector<Layer>> stages = {
      {L::affine(256), L::relu()}, {L::affine(128), L::relu()}, {L::affine(64), L::relu()},
      {L::affine(128), L::relu()}, {L::affine(256), L::relu()}, {L::affine(784), L::sigmoid()}};
  if (unshared != 2 && unshared != 4 && unshared != 6)
    throw ConfigError("unshared layers must be 2, 4 or 6, got " + std::to_string(unshared));
  const int lo = 3 - unshared / 2, hi = 3 + unshared / 2;
  DnaSpec d{"dna_mnist", {784}, {1, 28, 28}, {}, {}, -1, {}, unshared};
  for (int s = 0; s < 6; ++s) {
    auto& dst = s < lo ? d.encoder : s < hi ? d.bottleneck : d.decoder;
    if (s == 2) d.bottleneck_tag = static_cast<int>(d.bottleneck.size()) + 1;  // post-ReLU of the 64-wide stage
    dst.insert(dst.end(), stages[static_cast<std::size_t>(s)].begin(), stages[static_cast<std::size_t>(s)].end());
  }
  return d;
}

inline DnaSpec build_dna_cifar() {
  using L = Layer;
  DnaSpec d{"dna_cifar", {3, 32, 32}, {3, 32, 32}, {}, {}, -1, {}, 2};
  d.encoder = {L::conv3x3(32), L::batchnorm(), L::relu(),      L::maxpool(), L::residual(32),
               L::conv3x3(64), L::batchnorm(), L::relu(),      L::maxpool()};
  d.bottleneck = {L::conv3x3(28), L::batchnorm(), L::relu(), L::maxpool(), L::flatten(), L::reshape({28, 4, 4}),
                  L::deconv(64)};
  d.bottleneck_tag = 4;
  d.decoder = {L::residual(64), L::deconv(32),  L::conv3x3(32), L::batchnorm(), L::relu(),
               L::deconv(32),   L::conv1x1(3), L::sigmoid()};
  return d;
}

inline DnaSpec build_dna(DatasetKind d, int unshared = 2) {
  if (d == DatasetKind::mnist) return build_dna_mnist(unshared);
  if (unshared != 2) throw ConfigError("the CIFAR-10 DNA supports unshared = 2 only");
  return build_dna_cifar();
}

// Single-bottleneck autoencoder with the same fragments.
inline ModelSpec build_autoencoder_baseline(DatasetKind d) {
  const auto dna = build_dna(d, 2);
  return {d == DatasetKind::mnist ? "ae_mnist" : "ae_cifar", dna.input, dna.pathway(),
          static_cast<int>(dna.encoder.size()) + dna.bottleneck_tag, OutputKind::image};
}

template <class T>
struct DnaOutput {
  Tensor<T> recon_a, recon_b;        // N x image_shape
  Tensor<T> features_a, features_b;  // N x M
};

template <class T>
struct DnaModel {
  DnaSpec spec;
  ParamSet<T> params;  // "enc.", "neck_a.", "neck_b.", "dec." prefixes

  static DnaModel create(DnaSpec spec, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    ParamSet<T> p;
    const Shape after_enc = DnaSpec::infer_shapes_or_input(spec.encoder, spec.input);
    const Shape after_neck = DnaSpec::infer_shapes_or_input(spec.bottleneck, after_enc);
    init_layers(spec.encoder, spec.input, "enc.", p, rng);
    init_layers(spec.bottleneck, after_enc, "neck_a.", p, rng);
    init_layers(spec.bottleneck, after_enc, "neck_b.", p, rng);
    init_layers(spec.decoder, after_neck, "dec.", p, rng);
    const Shape out = DnaSpec::infer_shapes_or_input(spec.decoder, after_neck);
    if (numel_of(out) != numel_of(spec.image_shape))
      throw DimensionError("DNA output " + shape_str(out) + " does not match image " + shape_str(spec.image_shape));
    return {std::move(spec), std::move(p)};
  }

  DnaOutput<T> operator()(const Tensor<T>& x, BnMode mode = BnMode::eval) {
    DnaOutput<T> o;
    auto h = run_layers(spec.encoder, params, "enc.", conform_input(x, spec.input), mode);
    auto za = run_layers(spec.bottleneck, params, "neck_a.", h, mode, spec.bottleneck_tag, &o.features_a);
    auto zb = run_layers(spec.bottleneck, params, "neck_b.", h, mode, spec.bottleneck_tag, &o.features_b);
    o.recon_a = conform_input(run_layers(spec.decoder, params, "dec.", za, mode), spec.image_shape);
    o.recon_b = conform_input(run_layers(spec.decoder, params, "dec.", zb, mode), spec.image_shape);
    return o;
  }

  // Reconstruction through one pathway (0 = a, 1 = b).
  Tensor<T> pathway(const Tensor<T>& x, int which, BnMode mode = BnMode::eval) {
    auto h = run_layers(spec.encoder, params, "enc.", conform_input(x, spec.input), mode);
    auto z = run_layers(spec.bottleneck, params, which == 0 ? "neck_a." : "neck_b.", h, mode);
    return conform_input(run_layers(spec.decoder, params, "dec.", z, mode), spec.image_shape);
  }

  // Trainable parameter count shared by both pathways / owned by one.
  std::size_t shared_count() const {
    std::size_t n = 0;
    for (const auto& e : params.entries())
      if (e.trainable && (e.name.rfind("enc.", 0) == 0 || e.name.rfind("dec.", 0) == 0)) n += e.value.numel();
    return n;
  }
  DnaModel clone() const { return {spec, params.clone()}; }
};

// Sum of squared differences of all trainable parameters.
template <class T>
double param_distance(const ParamSet<T>& a, const ParamSet<T>& b) {
  if (a.size() != b.size()) throw ContractError("param_distance: parameter counts differ");
  double d = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto& ea = a.entries()[i];
    const auto& eb = b.entries()[i];
    if (ea.name != eb.name || ea.value.shape() != eb.value.shape())
      throw ContractError("param_distance: layouts differ at '" + ea.name + "' vs '" + eb.name + "'");
    if (!ea.trainable) continue;
    for (std::size_t j = 0; j < ea.value.numel(); ++j) {
      const double diff = static_cast<double>(ea.value[j]) - static_cast<double>(eb.value[j]);
      d += diff * diff;
    }
  }
  return d;
}

// Differentiable version over the trainable parameters of two sets.
template <class T>
Tensor<T> param_distance_tensor(const ParamSet<T>& a, const ParamSet<T>& b) {
  if (a.size() != b.size()) throw ContractError("param_distance: parameter counts differ");
  Tensor<T> total = Tensor<T>::scalar(T{0});
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!a.entries()[i].trainable) continue;
    total = add(total, sum(square(sub(a.entries()[i].value, b.entries()[i].value))));
  }
  return total;
}

// ------------------------------------------------------------- checkpoints
//
// "DNAC", version u32, descriptor (u32 length + UTF-8), tensor count u32, then
// per tensor: name (u16 length + UTF-8), dtype u8 (1 f32, 2 f64), rank u8,
// dims u64 each, raw little-endian values.

inline constexpr std::uint32_t kCheckpointVersion = 1;

template <class T>
void save_checkpoint(const std::string& path, const ParamSet<T>& p, const std::string& descriptor) {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  detail::ByteWriter w;
  w.str("DNAC");
  w.le<std::uint32_t>(kCheckpointVersion);
  w.le<std::uint32_t>(static_cast<std::uint32_t>(descriptor.size()));
  w.str(descriptor);
  w.le<std::uint32_t>(static_cast<std::uint32_t>(p.size()));
  for (const auto& e : p.entries()) {
    if (e.name.size() > 0xFFFF) throw ContractError("parameter name too long");
    w.le<std::uint16_t>(static_cast<std::uint16_t>(e.name.size()));
    w.str(e.name);
    w.le<std::uint8_t>(std::is_same_v<T, float> ? 1 : 2);
    w.le<std::uint8_t>(static_cast<std::uint8_t>(e.value.rank()));
    for (auto d : e.value.shape()) w.le<std::uint64_t>(d);
    for (T v : e.value.data()) w.le<T>(v);
  }
  w.save(path);
}

inline bool is_buffer_name(const std::string& name) {
  auto ends = [&](const std::string& s) {
    return name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0;
  };
  return ends(".running_mean") || ends(".running_var");
}

template <class T>
ParamSet<T> load_checkpoint(const std::string& path, std::string* descriptor = nullptr) {
  auto r = detail::ByteReader::from_file(path);
  if (r.str(4, "magic") != "DNAC") throw ParseError("bad checkpoint magic in " + path, 0);
  const auto version = r.le<std::uint32_t>("version");
  if (version != kCheckpointVersion) throw ParseError("unsupported checkpoint version " + std::to_string(version), 4);
  const auto dlen = r.le<std::uint32_t>("descriptor length");
  auto desc = r.str(dlen, "descriptor");
  if (descriptor) *descriptor = desc;
  const auto count = r.le<std::uint32_t>("tensor count");
  ParamSet<T> p;
  for (std::uint32_t t = 0; t < count; ++t) {
    const auto nlen = r.le<std::uint16_t>("tensor name length");
    auto name = r.str(nlen, "tensor name");
    const std::size_t dtype_at = r.pos();
    const auto dtype = r.le<std::uint8_t>("dtype");
    if (dtype != 1 && dtype != 2) throw ParseError("unknown dtype code " + std::to_string(dtype), dtype_at);
    const auto rank = r.le<std::uint8_t>("rank");
    Shape s;
    for (int i = 0; i < rank; ++i) {
      const std::size_t at = r.pos();
      const auto d = r.le<std::uint64_t>("dimension");
      if (d == 0 || d > (std::uint64_t{1} << 40)) throw ParseError("implausible dimension " + std::to_string(d), at);
      s.push_back(d);
    }
    const std::size_t n = numel_of(s);
    r.need(n * (dtype == 1 ? 4 : 8), "tensor values");
    std::vector<T> v(n);
    for (auto& x : v) x = dtype == 1 ? static_cast<T>(r.le<float>("value")) : static_cast<T>(r.le<double>("value"));
    if (p.contains(name)) throw ParseError("duplicate tensor '" + name + "'", dtype_at);
    p.add(name, Tensor<T>(std::move(s), std::move(v)), !is_buffer_name(name));
  }
  if (!r.done()) throw ParseError("trailing bytes after checkpoint", r.pos());
  return p;
}

}  // namespace decorr
