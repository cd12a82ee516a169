#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "decorr/linalg.hpp"
#include "decorr/nn_ops.hpp"
#include "gradcheck.hpp"

using namespace decorr;
using decorr::testing::check_gradients;
using decorr::testing::random_tensor;
using TD = Tensor<double>;

namespace {

constexpr double kTol = 1e-4;
constexpr int kInstances = 10;

TD eye(std::size_t m) {
  TD t(Shape{m, m});
  for (std::size_t i = 0; i < m; ++i) t.data()[i * m + i] = 1;
  return t;
}

// Weighted sum with fixed random weights so that the FD check exercises
// non-uniform upstream gradients.
TD probe(const TD& y, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  auto w = random_tensor(y.shape(), rng);
  return sum(mul(y, w));
}

}  // namespace

TEST(Affine, IdentityCase) {
  auto y = affine(eye(2), eye(2), TD(Shape{2}));
  EXPECT_EQ(y.values(), (std::vector<double>{1, 0, 0, 1}));
}

TEST(Affine, HandArithmetic) {
  auto y = affine(TD({1, 2}, {1, 2}), TD({2, 1}, {1, 1}), TD({1}, {1}));
  EXPECT_EQ(y.values(), std::vector<double>{4});
}

TEST(Affine, ShapeMismatchNamesBothShapes) {
  try {
    affine(TD(Shape{2, 3}), TD(Shape{2, 2}), TD(Shape{2}));
    FAIL();
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("[2x3]"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("[2x2]"), std::string::npos);
  }
}

TEST(Affine, FiniteDifferences) {
  std::mt19937_64 rng(1);
  for (int r = 0; r < kInstances; ++r) {
    auto res = check_gradients([](auto& in) { return probe(affine(in[0], in[1], in[2])); },
                               {random_tensor({3, 4}, rng), random_tensor({4, 5}, rng), random_tensor({5}, rng)});
    EXPECT_LE(res.max_rel_err, kTol);
  }
}

TEST(Conv2d, DeltaKernelIsIdentity) {
  std::mt19937_64 rng(2);
  auto x = random_tensor({2, 1, 5, 5}, rng);
  TD k(Shape{1, 1, 3, 3});
  k.data()[4] = 1;
  auto y = conv2d(x, k, TD(Shape{1}));
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ(y[i], x[i]);
}

TEST(Conv2d, DeltaKernelSumsChannels) {
  std::mt19937_64 rng(3);
  auto x = random_tensor({1, 2, 4, 4}, rng);
  TD k(Shape{1, 2, 3, 3});
  k.data()[4] = 1;
  k.data()[9 + 4] = 1;
  auto y = conv2d(x, k, TD(Shape{1}));
  for (std::size_t i = 0; i < 16; ++i) EXPECT_NEAR(y[i], x[i] + x[16 + i], 1e-15);
}

TEST(Conv2d, OnesWithZeroPadding) {
  auto y = conv2d(TD(Shape{1, 1, 3, 3}, 1.0), TD(Shape{1, 1, 3, 3}, 1.0), TD(Shape{1}));
  EXPECT_DOUBLE_EQ(y[4], 9);
  EXPECT_DOUBLE_EQ(y[0], 4);
  EXPECT_DOUBLE_EQ(y[8], 4);
  EXPECT_DOUBLE_EQ(y[1], 6);
}

TEST(Conv2d, ChannelMismatch) {
  EXPECT_THROW(conv2d(TD(Shape{1, 2, 4, 4}), TD(Shape{3, 1, 3, 3}), TD(Shape{3})), DimensionError);
}

TEST(Conv2d, FiniteDifferences) {
  std::mt19937_64 rng(4);
  for (int r = 0; r < kInstances; ++r) {
    auto res = check_gradients([](auto& in) { return probe(conv2d(in[0], in[1], in[2])); },
                               {random_tensor({2, 2, 5, 4}, rng), random_tensor({3, 2, 3, 3}, rng),
                                random_tensor({3}, rng)});
    EXPECT_LE(res.max_rel_err, kTol);
  }
}

TEST(Conv2d, PointwiseFiniteDifferences) {
  std::mt19937_64 rng(5);
  auto res = check_gradients([](auto& in) { return probe(conv2d(in[0], in[1], in[2])); },
                             {random_tensor({2, 3, 4, 4}, rng), random_tensor({2, 3, 1, 1}, rng),
                              random_tensor({2}, rng)});
  EXPECT_LE(res.max_rel_err, kTol);
}

TEST(Deconv, DoublesSpatialDims) {
  auto y = deconv2x2(TD(Shape{2, 3, 4, 4}, 1.0), TD(Shape{3, 5, 2, 2}, 1.0), TD(Shape{5}));
  EXPECT_EQ(y.shape(), (Shape{2, 5, 8, 8}));
  EXPECT_DOUBLE_EQ(y[0], 3);
}

TEST(Deconv, FiniteDifferences) {
  std::mt19937_64 rng(6);
  for (int r = 0; r < kInstances; ++r) {
    auto res = check_gradients([](auto& in) { return probe(deconv2x2(in[0], in[1], in[2])); },
                               {random_tensor({2, 3, 3, 2}, rng), random_tensor({3, 2, 2, 2}, rng),
                                random_tensor({2}, rng)});
    EXPECT_LE(res.max_rel_err, kTol);
  }
}

TEST(Pool, ConstantField) {
  TD x(Shape{1, 2, 4, 4}, 3.5);
  auto mx = pool(x, PoolKind::max2x2);
  auto avg = pool(x, PoolKind::avg, 4);
  for (auto v : mx.values()) EXPECT_DOUBLE_EQ(v, 3.5);
  for (auto v : avg.values()) EXPECT_DOUBLE_EQ(v, 3.5);
}

TEST(Pool, HandArithmetic) {
  TD x({1, 1, 2, 2}, {1, 2, 3, 4});
  EXPECT_DOUBLE_EQ(pool(x, PoolKind::max2x2).item(), 4);
  EXPECT_DOUBLE_EQ(pool(x, PoolKind::avg, 2).item(), 2.5);
}

TEST(Pool, NonDivisible) {
  EXPECT_THROW(pool(TD(Shape{1, 1, 5, 4}), PoolKind::max2x2), DimensionError);
  EXPECT_THROW(pool(TD(Shape{1, 1, 14, 14}), PoolKind::avg, 4), DimensionError);
}

TEST(Pool, MaxTieRoutesToFirstIndex) {
  TD x({1, 1, 2, 2}, {5, 5, 5, 5});
  x.set_requires_grad();
  Tape tape;
  TapeScope scope(tape);
  tape.backward(sum(pool(x, PoolKind::max2x2)));
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{1, 0, 0, 0}));
}

TEST(Pool, FiniteDifferences) {
  std::mt19937_64 rng(7);
  for (int r = 0; r < kInstances; ++r) {
    auto avg = check_gradients([](auto& in) { return probe(pool(in[0], PoolKind::avg, 3)); },
                               {random_tensor({2, 2, 6, 6}, rng)});
    EXPECT_LE(avg.max_rel_err, kTol);
    // Continuous random inputs make ties in max windows measure-zero.
    auto mx = check_gradients([](auto& in) { return probe(pool(in[0], PoolKind::max2x2)); },
                              {random_tensor({2, 2, 4, 4}, rng)});
    EXPECT_LE(mx.max_rel_err, kTol);
  }
}

TEST(BatchNorm, ZeroVarianceColumnIsZero) {
  TD x({3, 1}, {2, 2, 2});
  TD rm(Shape{1}), rv(Shape{1}, 1.0);
  auto y = batchnorm(x, TD(Shape{1}, 1.0), TD(Shape{1}), rm, rv, BnMode::train);
  for (auto v : y.values()) EXPECT_DOUBLE_EQ(v, 0);
}

TEST(BatchNorm, TwoSampleBatch) {
  TD x({2, 2}, {0, 0, 2, 2});
  TD rm(Shape{2}), rv(Shape{2}, 1.0);
  auto y = batchnorm(x, TD(Shape{2}, 1.0), TD(Shape{2}), rm, rv, BnMode::train);
  const double expect = 1.0 / std::sqrt(1.0 + 1e-5);
  EXPECT_NEAR(y[0], -expect, 1e-12);
  EXPECT_NEAR(y[2], expect, 1e-12);
  // momentum 0.1 toward mean 1 and unbiased variance 2
  EXPECT_NEAR(rm[0], 0.1, 1e-12);
  EXPECT_NEAR(rv[0], 0.9 + 0.2, 1e-12);
}

TEST(BatchNorm, DegenerateBatch) {
  TD rm(Shape{2}), rv(Shape{2}, 1.0);
  EXPECT_THROW(batchnorm(TD(Shape{1, 2}), TD(Shape{2}, 1.0), TD(Shape{2}), rm, rv, BnMode::train),
               DegenerateError);
  EXPECT_NO_THROW(batchnorm(TD(Shape{1, 2}), TD(Shape{2}, 1.0), TD(Shape{2}), rm, rv, BnMode::eval));
}

TEST(BatchNorm, FiniteDifferencesTrainAndEval) {
  std::mt19937_64 rng(8);
  for (int r = 0; r < kInstances; ++r) {
    for (auto mode : {BnMode::train, BnMode::eval}) {
      auto fd = check_gradients(
          [mode](auto& in) {
            TD rm(Shape{3}), rv(Shape{3}, 1.0);
            return probe(batchnorm(in[0], in[1], in[2], rm, rv, mode));
          },
          {random_tensor({6, 3}, rng), random_tensor({3}, rng, 0.5, 1.5), random_tensor({3}, rng)});
      EXPECT_LE(fd.max_rel_err, 1e-3);
    }
    auto fd4 = check_gradients(
        [](auto& in) {
          TD rm(Shape{2}), rv(Shape{2}, 1.0);
          return probe(batchnorm(in[0], in[1], in[2], rm, rv, BnMode::train));
        },
        {random_tensor({3, 2, 2, 2}, rng), random_tensor({2}, rng, 0.5, 1.5), random_tensor({2}, rng)});
    EXPECT_LE(fd4.max_rel_err, 1e-3);
  }
}

TEST(Elementwise, Definitional) {
  auto r = relu(TD({2}, {-1, 2}));
  EXPECT_EQ(r.values(), (std::vector<double>{0, 2}));
  EXPECT_DOUBLE_EQ(sigmoid(TD({1}, {0})).item(), 0.5);
  auto s = sgn(TD({3}, {-2, 0, 3}));
  EXPECT_EQ(s.values(), (std::vector<double>{-1, 0, 1}));
}

TEST(Elementwise, LogDomain) {
  EXPECT_THROW(log(TD({2}, {1, 0})), DomainError);
  EXPECT_THROW(log(TD({1}, {-1})), DomainError);
}

TEST(Elementwise, FiniteDifferences) {
  std::mt19937_64 rng(9);
  for (int r = 0; r < kInstances; ++r) {
    auto a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng);
    EXPECT_LE(check_gradients([](auto& in) { return probe(relu(in[0])); }, {a}).max_rel_err, kTol);
    EXPECT_LE(check_gradients([](auto& in) { return probe(sigmoid(in[0])); }, {a}).max_rel_err, kTol);
    EXPECT_LE(check_gradients([](auto& in) { return probe(add(in[0], in[1])); }, {a, b}).max_rel_err, kTol);
    EXPECT_LE(check_gradients([](auto& in) { return probe(sub(in[0], in[1])); }, {a, b}).max_rel_err, kTol);
    EXPECT_LE(check_gradients([](auto& in) { return probe(scale(in[0], 2.5)); }, {a}).max_rel_err, kTol);
    EXPECT_LE(check_gradients([](auto& in) { return probe(mul(in[0], in[1])); }, {a, b}).max_rel_err, kTol);
    EXPECT_LE(check_gradients([](auto& in) { return probe(square(in[0])); }, {a}).max_rel_err, kTol);
    EXPECT_LE(check_gradients([](auto& in) { return sum(in[0]); }, {a}).max_rel_err, kTol);
    EXPECT_LE(check_gradients([](auto& in) { return mean(in[0]); }, {a}).max_rel_err, kTol);
    auto pos = random_tensor({3, 4}, rng, 0.5, 2.0);
    EXPECT_LE(check_gradients([](auto& in) { return probe(log(in[0])); }, {pos}).max_rel_err, kTol);
    EXPECT_LE(check_gradients([](auto& in) { return probe(matmul(in[0], transpose(in[1]))); }, {a, b}).max_rel_err,
              kTol);
    EXPECT_LE(check_gradients([](auto& in) { return probe(center_columns(append_ones_column(in[0]))); }, {a})
                  .max_rel_err,
              kTol);
    EXPECT_LE(check_gradients([](auto& in) { return probe(select_columns(in[0], {3, 0})); }, {a}).max_rel_err,
              kTol);
  }
}

TEST(CrossEntropy, UniformLogits) {
  TD z(Shape{4, 10});
  EXPECT_NEAR(softmax_cross_entropy(z, std::vector<int>{0, 3, 5, 9}).item(), std::log(10.0), 1e-12);
}

TEST(CrossEntropy, ConfidentCorrect) {
  TD z(Shape{1, 3});
  z.data()[1] = 1e4;
  EXPECT_NEAR(softmax_cross_entropy(z, std::vector<int>{1}).item(), 0.0, 1e-12);
}

TEST(CrossEntropy, OutOfRangeLabel) {
  EXPECT_THROW(softmax_cross_entropy(TD(Shape{1, 3}), std::vector<int>{3}), IndexError);
  EXPECT_THROW(softmax_cross_entropy(TD(Shape{1, 3}), std::vector<int>{-1}), IndexError);
}

TEST(CrossEntropy, GradientIsSoftmaxMinusOneHot) {
  std::mt19937_64 rng(10);
  auto z = random_tensor({2, 3}, rng);
  z.set_requires_grad();
  const std::vector<int> y{2, 0};
  {
    Tape tape;
    TapeScope scope(tape);
    tape.backward(softmax_cross_entropy(z, y));
  }
  for (std::size_t i = 0; i < 2; ++i) {
    double denom = 0;
    for (std::size_t j = 0; j < 3; ++j) denom += std::exp(z[i * 3 + j]);
    for (std::size_t j = 0; j < 3; ++j) {
      const double p = std::exp(z[i * 3 + j]) / denom - (static_cast<int>(j) == y[i] ? 1 : 0);
      EXPECT_NEAR(z.grad()[i * 3 + j], p / 2, 1e-12);
    }
  }
  for (int r = 0; r < kInstances; ++r) {
    auto fd = check_gradients([&](auto& in) { return softmax_cross_entropy(in[0], std::vector<int>{1, 4, 0}); },
                              {random_tensor({3, 5}, rng, -3, 3)});
    EXPECT_LE(fd.max_rel_err, kTol);
    auto fd_none = check_gradients(
        [&](auto& in) { return probe(softmax_cross_entropy(in[0], std::vector<int>{1, 4, 0}, Reduction::none)); },
        {random_tensor({3, 5}, rng, -3, 3)});
    EXPECT_LE(fd_none.max_rel_err, kTol);
  }
}

TEST(Mse, Cases) {
  EXPECT_DOUBLE_EQ(mse(TD({2}, {1, 2}), TD({2}, {1, 2})).item(), 0);
  EXPECT_DOUBLE_EQ(mse(TD({2}, {0, 0}), TD({2}, {1, 3})).item(), 5);
  EXPECT_THROW(mse(TD(Shape{2}), TD(Shape{3})), DimensionError);
}

TEST(Mse, GradientMatchesClosedForm) {
  std::mt19937_64 rng(11);
  auto a = random_tensor({5}, rng), b = random_tensor({5}, rng);
  a.set_requires_grad();
  Tape tape;
  TapeScope scope(tape);
  tape.backward(mse(a, b));
  for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(a.grad()[i], 2 * (a[i] - b[i]) / 5, 1e-14);
  for (int r = 0; r < kInstances; ++r)
    EXPECT_LE(check_gradients([](auto& in) { return mse(in[0], in[1]); },
                              {random_tensor({4, 3}, rng), random_tensor({4, 3}, rng)})
                  .max_rel_err,
              kTol);
}

namespace {
TD random_spd(std::size_t m, std::mt19937_64& rng) {
  auto b = random_tensor({m, m}, rng);
  NoGradScope ng;
  return add_diagonal(matmul(transpose(b), b), static_cast<double>(m));
}
}  // namespace

TEST(CholInverse, Cases) {
  auto i3 = chol_inverse(eye(3));
  for (std::size_t i = 0; i < 9; ++i) EXPECT_DOUBLE_EQ(i3[i], eye(3)[i]);
  auto d = chol_inverse(TD({2, 2}, {2, 0, 0, 4}));
  const std::vector<double> expect{0.5, 0, 0, 0.25};
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(d[i], expect[i], 1e-15);
  EXPECT_THROW(chol_inverse(TD({2, 2}, {1, 2, 2, 1})), RankDeficiencyError);
}

TEST(CholInverse, ResidualAndGradient) {
  std::mt19937_64 rng(12);
  for (int r = 0; r < kInstances; ++r) {
    auto a = random_spd(6, rng);
    auto prod = matmul(a, chol_inverse(a));
    for (std::size_t i = 0; i < 6; ++i)
      for (std::size_t j = 0; j < 6; ++j) EXPECT_NEAR(prod[i * 6 + j], i == j ? 1.0 : 0.0, 1e-10);
    auto fd = check_gradients([](auto& in) { return probe(chol_inverse(in[0])); }, {a});
    EXPECT_LE(fd.max_rel_err, kTol);
  }
}

TEST(Qr, OrthonormalInput) {
  std::mt19937_64 rng(13);
  auto q0 = qr_factor(random_tensor({10, 4}, rng)).q;
  auto r = qr_factor(q0).r;
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(std::abs(r[i * 4 + i]), 1.0, 1e-12);
}

TEST(Qr, ExactDependence) {
  std::mt19937_64 rng(14);
  auto a = random_tensor({8, 2}, rng);
  for (std::size_t i = 0; i < 8; ++i) a.data()[i * 2 + 1] = 2 * a[i * 2];
  auto r = qr_factor(a).r;
  EXPECT_GT(std::abs(r[0]), 0.1);
  EXPECT_NEAR(r[3], 0.0, 1e-12);
}

TEST(Qr, Reconstruction) {
  std::mt19937_64 rng(15);
  auto a = random_tensor({50, 8}, rng);
  auto [q, r] = qr_factor(a);
  auto qr = matmul(q, r);
  auto qtq = matmul(transpose(q), q);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(qr[i], a[i], 1e-10);
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(qtq[i * 8 + j], i == j ? 1.0 : 0.0, 1e-10);
  for (std::size_t i = 1; i < 8; ++i)
    for (std::size_t j = 0; j < i; ++j) EXPECT_EQ(r[i * 8 + j], 0.0);
}

TEST(Qr, WideMatrixRejected) { EXPECT_THROW(qr_factor(TD(Shape{3, 5})), DimensionError); }

TEST(Backward, SumGivesOnes) {
  TD x(Shape{2, 3}, 0.5);
  x.set_requires_grad();
  Tape tape;
  TapeScope scope(tape);
  tape.backward(sum(x));
  for (auto g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, CompositeMseOfAffine) {
  std::mt19937_64 rng(16);
  auto target = random_tensor({4, 2}, rng);
  auto fd = check_gradients([&](auto& in) { return mse(matmul(in[0], in[1]), target); },
                            {random_tensor({4, 3}, rng), random_tensor({3, 2}, rng)});
  EXPECT_LE(fd.max_rel_err, kTol);
}

TEST(Backward, SequentialLossesAccumulate) {
  TD x({2}, {1, 2});
  x.set_requires_grad();
  Tape tape;
  TapeScope scope(tape);
  auto y = square(x);
  tape.backward(sum(y));
  tape.backward(sum(scale(y, 3.0)));
  EXPECT_DOUBLE_EQ(x.grad()[0], 2 * 1 + 6 * 1);
  EXPECT_DOUBLE_EQ(x.grad()[1], 2 * 2 + 6 * 2);
}

TEST(Backward, UnreachableLeafGetsZero) {
  TD x({2}, {1, 2}), unused({3}, {1, 1, 1});
  x.set_requires_grad();
  unused.set_requires_grad();
  Tape tape;
  TapeScope scope(tape);
  auto u2 = square(unused);  // recorded but not part of the loss
  tape.backward(sum(x));
  for (auto g : unused.grad()) EXPECT_EQ(g, 0.0);
}

TEST(Backward, DiamondDagAccumulates) {
  TD x({1}, {3});
  x.set_requires_grad();
  Tape tape;
  TapeScope scope(tape);
  auto a = square(x);
  auto b = scale(x, 2.0);
  tape.backward(sum(add(mul(a, b), a)));  // 2x^3 + x^2 -> 6x^2 + 2x
  EXPECT_DOUBLE_EQ(x.grad()[0], 6 * 9 + 6);
}

TEST(Backward, NonScalarLossRejected) {
  TD x(Shape{2}, 1.0);
  x.set_requires_grad();
  Tape tape;
  TapeScope scope(tape);
  EXPECT_THROW(tape.backward(square(x)), ContractError);
}

TEST(Backward, TopologicalIds) {
  TD x(Shape{2}, 1.0);
  x.set_requires_grad();
  Tape tape;
  TapeScope scope(tape);
  auto l = sum(relu(square(x)));
  for (const auto& r : tape.records())
    for (const auto& in : r.inputs) EXPECT_LT(in->id, r.output->id);
}

TEST(Backward, Determinism) {
  auto run = [] {
    std::mt19937_64 rng(17);
    auto x = random_tensor({5, 4}, rng), w = random_tensor({4, 3}, rng), b = random_tensor({3}, rng);
    w.set_requires_grad();
    Tape tape;
    TapeScope scope(tape);
    tape.backward(mean(sigmoid(affine(x, w, b))));
    return std::vector<double>(w.grad().begin(), w.grad().end());
  };
  EXPECT_EQ(run(), run());
}

TEST(Tape, NoRecordingWithoutScope) {
  TD x(Shape{2}, 1.0);
  x.set_requires_grad();
  auto y = square(x);
  EXPECT_FALSE(y.requires_grad());
}

TEST(Cast, GradientCrossesPrecision) {
  Tensor<float> x({2}, {1.5f, -2.0f});
  x.set_requires_grad();
  Tape tape;
  TapeScope scope(tape);
  auto y = cast<double>(x);
  tape.backward(sum(square(y)));
  EXPECT_FLOAT_EQ(x.grad()[0], 3.0f);
  EXPECT_FLOAT_EQ(x.grad()[1], -4.0f);
}
