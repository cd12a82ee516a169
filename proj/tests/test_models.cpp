#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "decorr/models.hpp"
#include "gradcheck.hpp"

using namespace decorr;
using decorr::testing::random_tensor;
namespace fs = std::filesystem;

namespace {

std::vector<Shape> trace(const ModelSpec& s) { return infer_shapes(s.layers, s.input); }

fs::path scratch(const std::string& name) {
  auto d = fs::temp_directory_path() / "decorr_models_test";
  fs::create_directories(d);
  return d / name;
}

template <class T>
Tensor<T> batch(Shape s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto d = random_tensor(std::move(s), rng, 0.0, 1.0);
  return cast<T>(d);
}

bool same_values(const Tensor<float>& a, const Tensor<float>& b) { return a.values() == b.values(); }

}  // namespace

TEST(Shapes, CnnClassifierTrace) {
  auto s = build_cnn_classifier();
  auto t = trace(s);
  EXPECT_EQ(t[2], (Shape{16, 14, 14}));
  EXPECT_EQ(t[5], (Shape{32, 7, 7}));
  EXPECT_EQ(t[6], (Shape{32, 1, 1}));
  EXPECT_EQ(t[7], (Shape{32}));
  EXPECT_EQ(t.back(), (Shape{10}));
  EXPECT_EQ(s.feature_tag, 7);
}

TEST(Shapes, FcClassifierTrace) {
  auto s = build_fc_classifier();
  auto t = trace(s);
  EXPECT_EQ(t[0], (Shape{256}));
  EXPECT_EQ(t[3], (Shape{128}));
  EXPECT_EQ(t[static_cast<std::size_t>(s.feature_tag)], (Shape{128}));
  EXPECT_EQ(t.back(), (Shape{10}));
}

TEST(Shapes, EvalClassifiers) {
  EXPECT_EQ(output_shape(build_eval_classifiers(DatasetKind::mnist)), (Shape{10}));
  EXPECT_EQ(output_shape(build_eval_classifiers(DatasetKind::cifar10)), (Shape{10}));
}

TEST(Shapes, BadChainsRejected) {
  EXPECT_THROW(infer_shapes({Layer::conv3x3(4)}, Shape{784}), DimensionError);
  EXPECT_THROW(infer_shapes({Layer::affine(4)}, Shape{1, 28, 28}), DimensionError);
  EXPECT_THROW(infer_shapes({Layer::avgpool(5)}, Shape{1, 28, 28}), DimensionError);
  EXPECT_THROW(infer_shapes({Layer::residual(8)}, Shape{4, 8, 8}), DimensionError);
}

TEST(Dna, MnistVariants) {
  for (int u : {2, 4, 6}) {
    auto d = build_dna_mnist(u);
    EXPECT_EQ(parameterized_layers(d.pathway()), 6u);
    EXPECT_EQ(parameterized_layers(d.bottleneck), static_cast<std::size_t>(u));
    EXPECT_EQ(d.feature_width(), 64u);
    auto m = DnaModel<float>::create(d, 1);
    auto out = m(batch<float>({5, 1, 28, 28}, 2));
    EXPECT_EQ(out.recon_a.shape(), (Shape{5, 1, 28, 28}));
    EXPECT_EQ(out.features_b.shape(), (Shape{5, 64}));
  }
  EXPECT_EQ(DnaModel<float>::create(build_dna_mnist(6), 1).shared_count(), 0u);
  EXPECT_GT(DnaModel<float>::create(build_dna_mnist(4), 1).shared_count(), 0u);
  EXPECT_THROW(build_dna_mnist(3), ConfigError);
}

TEST(Dna, AutoencoderCountIsDnaMinusOneBottleneck) {
  auto dna = DnaModel<float>::create(build_dna_mnist(2), 1);
  auto ae = init_params<float>(build_autoencoder_baseline(DatasetKind::mnist), 1);
  std::size_t neck = 0;
  for (const auto& e : dna.params.entries())
    if (e.name.rfind("neck_b.", 0) == 0) neck += e.value.numel();
  EXPECT_EQ(ae.trainable_count(), dna.params.trainable_count() - neck);
  EXPECT_EQ(output_shape(build_autoencoder_baseline(DatasetKind::mnist)), (Shape{784}));
}

TEST(Dna, CifarShapes) {
  auto d = build_dna_cifar();
  EXPECT_EQ(d.feature_width(), 448u);
  auto enc = infer_shapes(d.encoder, d.input);
  EXPECT_EQ(enc.back(), (Shape{64, 8, 8}));
  auto neck = infer_shapes(d.bottleneck, enc.back());
  EXPECT_EQ(neck[3], (Shape{28, 4, 4}));
  EXPECT_EQ(neck.back(), (Shape{64, 8, 8}));
  auto dec = infer_shapes(d.decoder, neck.back());
  EXPECT_EQ(dec[1], (Shape{32, 16, 16}));
  EXPECT_EQ(dec.back(), (Shape{3, 32, 32}));
  auto m = DnaModel<float>::create(d, 3);
  auto out = m(batch<float>({2, 3, 32, 32}, 4), BnMode::train);
  EXPECT_EQ(out.recon_b.shape(), (Shape{2, 3, 32, 32}));
  EXPECT_EQ(out.features_a.shape(), (Shape{2, 448}));
}

TEST(Dna, PathwaySymmetry) {
  auto m = DnaModel<double>::create(build_dna_mnist(4), 5);
  auto x = batch<double>({4, 784}, 6);
  auto o1 = m(x);
  auto swapped = m.clone();
  for (auto& e : swapped.params.entries()) {
    std::string other = e.name;
    if (other.rfind("neck_a.", 0) == 0) other.replace(0, 7, "neck_b.");
    else if (other.rfind("neck_b.", 0) == 0) other.replace(0, 7, "neck_a.");
    else continue;
    auto src = m.params.at(other);
    std::copy(src.data().begin(), src.data().end(), e.value.data().begin());
  }
  auto o2 = swapped(x);
  EXPECT_EQ(o1.recon_a.values(), o2.recon_b.values());
  EXPECT_EQ(o1.features_b.values(), o2.features_a.values());
  EXPECT_NE(o1.recon_a.values(), o1.recon_b.values());
}

TEST(Init, SeedDeterministicAndScaled) {
  auto a = init_params<float>(build_fc_classifier(), 7);
  auto b = init_params<float>(build_fc_classifier(), 7);
  auto c = init_params<float>(build_fc_classifier(), 8);
  EXPECT_EQ(param_distance(a, b), 0.0);
  // E||W1 - W2||^2 = sum over layers 4 * fan_out for fan-in uniform bounds
  EXPECT_NEAR(param_distance(a, c), 4.0 * (256 + 128 + 10), 40.0);
  for (auto& e : a.entries()) {
    if (e.name.find(".bias") != std::string::npos || e.name.find(".beta") != std::string::npos) {
      for (float v : e.value.data()) EXPECT_EQ(v, 0.0f);
    }
    if (e.name.find(".gamma") != std::string::npos) {
      for (float v : e.value.data()) EXPECT_EQ(v, 1.0f);
    }
  }
}

TEST(Forward, SmokeAndFeatures) {
  auto net = Network<float>::create(build_cnn_classifier(), 1);
  auto zeros = Tensor<float>::zeros({3, 1, 28, 28});
  auto a = net(zeros), b = net(zeros);
  EXPECT_EQ(a.values(), b.values());
  for (float v : a.data()) EXPECT_TRUE(std::isfinite(v));

  auto fc = Network<float>::create(build_fc_classifier(), 2);
  auto out = fc.with_features(batch<float>({6, 1, 28, 28}, 3));
  EXPECT_EQ(out.output.shape(), (Shape{6, 10}));
  EXPECT_EQ(out.features.shape(), (Shape{6, 128}));
  EXPECT_THROW(fc(Tensor<float>::zeros({2, 783})), DimensionError);
}

TEST(Forward, EvalModeIgnoresTape) {
  auto fc = Network<float>::create(build_fc_classifier(), 2);
  auto x = batch<float>({8, 784}, 9);
  fc(x, BnMode::train);  // moves running statistics
  auto plain = fc(x, BnMode::eval);
  fc.params.set_requires_grad(true);
  Tape tape;
  TapeScope scope(tape);
  auto taped = fc(x, BnMode::eval);
  EXPECT_GT(tape.size(), 0u);
  EXPECT_TRUE(same_values(plain, taped));
}

TEST(Forward, FeatureGradientReachesParameters) {
  auto fc = Network<double>::create(build_fc_classifier(), 2);
  fc.params.set_requires_grad(true);
  Tape tape;
  TapeScope scope(tape);
  auto out = fc.with_features(batch<double>({4, 784}, 1));
  tape.backward(sum(out.features));
  double g = 0;
  for (double v : fc.params.at("3.weight").grad()) g += std::abs(v);
  EXPECT_GT(g, 0);
  for (double v : fc.params.at("6.weight").grad()) EXPECT_EQ(v, 0.0);
}

TEST(Forward, ResidualBlockGradients) {
  std::mt19937_64 rng(3);
  ModelSpec s{"res", {2, 4, 4}, {Layer::residual(2), Layer::deconv(3), Layer::conv1x1(1)}, -1, OutputKind::image};
  auto p = init_params<double>(s, 4);
  std::vector<Tensor<double>> ins{random_tensor({3, 2, 4, 4}, rng, -1, 1)};
  for (auto& e : p.entries())
    if (e.trainable) ins.push_back(e.value);
  auto check = decorr::testing::check_gradients(
      [&](std::vector<Tensor<double>>& v) {
        ParamSet<double> q;
        std::size_t k = 1;
        for (const auto& e : p.entries()) q.add(e.name, e.trainable ? v[k++] : e.value.detach(), e.trainable);
        auto y = run_layers(s.layers, q, "", v[0], BnMode::train);
        return sum(square(y));
      },
      ins);
  EXPECT_LE(check.max_rel_err, 1e-3);
}

TEST(Distance, Examples) {
  ParamSet<double> a, b;
  a.add("w", Tensor<double>::scalar(3));
  b.add("w", Tensor<double>::scalar(1));
  EXPECT_EQ(param_distance(a, b), 4.0);
  EXPECT_EQ(param_distance(b, a), 4.0);
  EXPECT_EQ(param_distance(a, a), 0.0);
  EXPECT_EQ(param_distance_tensor(a, b).item(), 4.0);
  ParamSet<double> c;
  c.add("v", Tensor<double>::scalar(1));
  EXPECT_THROW(param_distance(a, c), ContractError);
  ParamSet<double> d;
  d.add("w", Tensor<double>::zeros({2}));
  EXPECT_THROW(param_distance(a, d), ContractError);
}

TEST(Checkpoint, RoundTripBitExact) {
  auto m = DnaModel<double>::create(build_dna_mnist(2), 1);
  for (auto& e : m.params.entries())
    for (auto& v : e.value.data()) v += 1e-17 * static_cast<double>(&v - e.value.data().data());
  const auto path = scratch("dna.ckpt").string();
  save_checkpoint(path, m.params, m.spec.describe());
  std::string desc;
  auto back = load_checkpoint<double>(path, &desc);
  EXPECT_EQ(desc, m.spec.describe());
  EXPECT_EQ(param_distance(m.params, back), 0.0);
  for (std::size_t i = 0; i < back.size(); ++i) {
    const auto& x = m.params.entries()[i].value;
    const auto& y = back.entries()[i].value;
    EXPECT_EQ(std::memcmp(x.data().data(), y.data().data(), x.numel() * sizeof(double)), 0);
    EXPECT_EQ(m.params.entries()[i].trainable, back.entries()[i].trainable);
  }

  auto fc = Network<float>::create(build_fc_classifier(), 3);
  fc(batch<float>({8, 784}, 1), BnMode::train);
  save_checkpoint(path, fc.params, fc.spec.describe());
  auto fb = load_checkpoint<float>(path);
  for (std::size_t i = 0; i < fb.size(); ++i)
    EXPECT_EQ(fb.entries()[i].value.values(), fc.params.entries()[i].value.values());
}

TEST(Checkpoint, CorruptionDiagnostics) {
  ParamSet<float> p;
  p.add("a.weight", Tensor<float>(Shape{2, 3}, 1.5f));
  const auto path = scratch("small.ckpt");
  save_checkpoint(path.string(), p, "tiny");
  // 4 magic + 4 version + 4 len + 4 desc + 4 count + 2 + 8 name + 1 + 1 + 16 dims = 48 header bytes
  EXPECT_EQ(fs::file_size(path), 48u + 6 * 4);
  fs::resize_file(path, 50);
  try {
    load_checkpoint<float>(path.string());
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.offset(), 48u);
  }
  {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    os << "DNAX";
  }
  EXPECT_THROW(load_checkpoint<float>(path.string()), ParseError);
  save_checkpoint(path.string(), p, "tiny");
  {
    std::fstream f(path, std::ios::binary | std::ios::in | std::ios::out);
    f.seekp(4);
    f.put(9);
  }
  try {
    load_checkpoint<float>(path.string());
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.offset(), 4u);
  }
}
