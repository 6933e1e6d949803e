#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "levit/ops.hpp"
#include "levit/tensor.hpp"
#include "test_util.hpp"

using namespace levit;
using levit::testing::grad_check;
using levit::testing::probe;

namespace {

// Straightforward 7-loop cross-correlation, used as the reference for conv2d.
struct NaiveConv {
  std::vector<double> out;
  std::int64_t macs = 0;
};

NaiveConv naive_conv(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad) {
  const auto B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto O = w.dim(0), KH = w.dim(2), KW = w.dim(3);
  const auto HO = (H + 2 * pad - KH) / stride + 1, WO = (W + 2 * pad - KW) / stride + 1;
  NaiveConv r;
  r.out.assign(static_cast<std::size_t>(B * O * HO * WO), 0.0);
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t o = 0; o < O; ++o)
      for (std::int64_t oy = 0; oy < HO; ++oy)
        for (std::int64_t ox = 0; ox < WO; ++ox) {
          double acc = bias.defined() ? bias.value(o) : 0.0;
          for (std::int64_t c = 0; c < C; ++c)
            for (std::int64_t ky = 0; ky < KH; ++ky)
              for (std::int64_t kx = 0; kx < KW; ++kx) {
                ++r.macs;
                const auto iy = oy * stride - pad + ky, ix = ox * stride - pad + kx;
                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                acc += x.value(((b * C + c) * H + iy) * W + ix) *
                       w.value(((o * C + c) * KH + ky) * KW + kx);
              }
          r.out[static_cast<std::size_t>(((b * O + o) * HO + oy) * WO + ox)] = acc;
        }
  return r;
}

Tensor scalar_vec(std::initializer_list<double> v) {
  return Tensor::from_values({static_cast<std::int64_t>(v.size())}, v);
}

}  // namespace

// ---- Tensor basics -----------------------------------------------------

TEST(TensorTest, ElementCountIsProductOfExtents) {
  Tensor t = Tensor::zeros({2, 3, 4});
  EXPECT_EQ(t.numel(), 24);
  EXPECT_EQ(t.dim(-1), 4);
  EXPECT_THROW(Tensor::zeros({2, 0}), ShapeError);
  EXPECT_THROW(Tensor::from_values({2, 2}, {1.0, 2.0}), ShapeError);
}

TEST(TensorTest, DefaultDTypeGuardSwitchesPrecision) {
  EXPECT_EQ(Tensor::zeros({1}).dtype(), DType::F32);
  {
    DefaultDTypeGuard g(DType::F64);
    EXPECT_EQ(Tensor::zeros({1}).dtype(), DType::F64);
  }
  EXPECT_EQ(Tensor::zeros({1}).dtype(), DType::F32);
}

// ---- conv2d ------------------------------------------------------------

TEST(Conv2dTest, OnesKernelSumsReceptiveField) {
  Tensor x = Tensor::ones({1, 1, 3, 3});
  Tensor w = Tensor::ones({1, 1, 3, 3});
  Tensor y = conv2d(x, w, Tensor(), 1, 0);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_EQ(y.item(), 9.0);
}

TEST(Conv2dTest, StrideTwoShapeAndMacs) {
  Tensor x = Tensor::zeros({1, 3, 8, 8});
  Tensor w = Tensor::zeros({4, 3, 3, 3});
  EXPECT_EQ(conv2d(x, w, Tensor(), 2, 1).shape(), (Shape{1, 4, 4, 4}));
  const auto naive = naive_conv(x, w, Tensor(), 2, 1);
  EXPECT_EQ(naive.macs, 1728);
  EXPECT_EQ(conv2d_macs(x.shape(), w.shape(), 2, 1), naive.macs);
}

TEST(Conv2dTest, RejectsChannelMismatch) {
  EXPECT_THROW(conv2d(Tensor::zeros({1, 2, 4, 4}), Tensor::zeros({1, 3, 3, 3}), Tensor(), 1, 0),
               ShapeError);
}

TEST(Conv2dTest, MatchesNaiveReferenceOnRandomInputs) {
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<int> ext(1, 9), ch(1, 4), bt(1, 2), ks(1, 3), st(1, 2), pd(0, 1);
  for (int trial = 0; trial < 30; ++trial) {
    const int k = ks(rng);
    const int h = std::max(ext(rng), k), w = std::max(ext(rng), k);
    const int stride = st(rng), pad = pd(rng);
    Tensor x = random_normal({bt(rng), ch(rng), h, w}, rng);
    Tensor wt = random_normal({ch(rng), x.dim(1), k, k}, rng);
    Tensor b = random_normal({wt.dim(0)}, rng);
    Tensor y = conv2d(x, wt, b, stride, pad);
    const auto ref = naive_conv(x, wt, b, stride, pad);
    ASSERT_EQ(static_cast<std::size_t>(y.numel()), ref.out.size());
    for (std::size_t i = 0; i < ref.out.size(); ++i) {
      EXPECT_NEAR(y.value(static_cast<std::int64_t>(i)), ref.out[i], 1e-5);
    }
    EXPECT_EQ(conv2d_macs(x.shape(), wt.shape(), stride, pad), ref.macs);
  }
}

// ---- batch norm --------------------------------------------------------

TEST(BatchNormTest, EvalWithUnitStatisticsIsIdentity) {
  std::mt19937_64 rng(1);
  Tensor x = random_normal({2, 3, 2, 2}, rng);
  Tensor rm = Tensor::zeros({3}), rv = Tensor::ones({3});
  Tensor y = batch_norm(x, Tensor::ones({3}), Tensor::zeros({3}), rm, rv, Mode::Eval, 0.1, 0.0);
  EXPECT_EQ(max_abs_diff(x, y), 0.0);
}

TEST(BatchNormTest, TrainUsesBiasedBatchVariance) {
  Tensor x = Tensor::from_values({2, 1}, {1.0, 3.0});
  Tensor rm = Tensor::zeros({1}), rv = Tensor::ones({1});
  Tensor y = batch_norm(x, Tensor::ones({1}), Tensor::zeros({1}), rm, rv, Mode::Train, 0.1, 0.0);
  EXPECT_DOUBLE_EQ(y.value(0), -1.0);
  EXPECT_DOUBLE_EQ(y.value(1), 1.0);
  // running stats move toward batch mean 2 and biased variance 1
  EXPECT_NEAR(rm.value(0), 0.2, 1e-7);
  EXPECT_NEAR(rv.value(0), 1.0, 1e-7);
}

TEST(BatchNormTest, EvalDirectFormula) {
  Tensor x = Tensor::from_values({1, 1}, {4.0});
  Tensor rm = scalar_vec({2.0}), rv = scalar_vec({4.0});
  Tensor y = batch_norm(x, scalar_vec({3.0}), scalar_vec({1.0}), rm, rv, Mode::Eval, 0.1, 0.0);
  EXPECT_DOUBLE_EQ(y.item(), 4.0);
}

TEST(BatchNormTest, SingleElementPerChannelIsPermitted) {
  Tensor x = Tensor::from_values({1, 2}, {5.0, -2.0});
  Tensor rm = Tensor::zeros({2}), rv = Tensor::ones({2});
  Tensor y = batch_norm(x, Tensor::ones({2}), Tensor::zeros({2}), rm, rv, Mode::Train);
  EXPECT_EQ(y.value(0), 0.0);
  EXPECT_EQ(y.value(1), 0.0);
}

TEST(BatchNormTest, TrainOutputIsStandardizedPerChannel) {
  std::mt19937_64 rng(3);
  for (int batch : {4, 7}) {
    Tensor x = random_normal({batch, 3, 3, 2}, rng, 5.0);
    Tensor rm = Tensor::zeros({3}), rv = Tensor::ones({3});
    Tensor y = batch_norm(x, Tensor::ones({3}), Tensor::zeros({3}), rm, rv, Mode::Train);
    for (int c = 0; c < 3; ++c) {
      double s = 0, ss = 0;
      int n = 0;
      for (int b = 0; b < batch; ++b)
        for (int p = 0; p < 6; ++p) {
          const double v = y.value((b * 3 + c) * 6 + p);
          s += v;
          ss += v * v;
          ++n;
        }
      const double m = s / n;
      EXPECT_NEAR(m, 0.0, 1e-5);
      EXPECT_NEAR(ss / n - m * m, 1.0, 1e-4);
    }
  }
}

// ---- activations -------------------------------------------------------

TEST(HardswishTest, KnownValues) {
  Tensor y = hardswish(scalar_vec({3.0, -3.0, 1.0, -4.0, 10.0}));
  EXPECT_DOUBLE_EQ(y.value(0), 3.0);
  EXPECT_DOUBLE_EQ(y.value(1), 0.0);
  EXPECT_NEAR(y.value(2), 2.0 / 3.0, 1e-7);
  EXPECT_DOUBLE_EQ(y.value(3), 0.0);
  EXPECT_DOUBLE_EQ(y.value(4), 10.0);
}

TEST(HardswishTest, GradientAtKinksAndPolynomialBranch) {
  DefaultDTypeGuard g(DType::F64);
  Tensor x = scalar_vec({-3.0, 3.0, 1.0});
  x.set_requires_grad(true);
  sum(hardswish(x)).backward();
  const Tensor gx = x.grad();
  EXPECT_EQ(gx.value(0), 0.0);
  EXPECT_EQ(gx.value(1), 1.0);
  EXPECT_DOUBLE_EQ(gx.value(2), 5.0 / 6.0);
}

TEST(SoftmaxTest, KnownValues) {
  DefaultDTypeGuard g(DType::F64);
  Tensor y = softmax_lastdim(Tensor::from_values({3, 2}, {0, 0, 1000, 1000, 0, std::log(3.0)}));
  EXPECT_DOUBLE_EQ(y.value(0), 0.5);
  EXPECT_DOUBLE_EQ(y.value(1), 0.5);
  EXPECT_DOUBLE_EQ(y.value(2), 0.5);
  EXPECT_DOUBLE_EQ(y.value(3), 0.5);
  EXPECT_NEAR(y.value(4), 0.25, 1e-12);
  EXPECT_NEAR(y.value(5), 0.75, 1e-12);
}

TEST(SoftmaxTest, RowsSumToOneForLargeMagnitudes) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const std::int64_t n = 1 + static_cast<std::int64_t>(rng() % 40);
    Tensor x = random_uniform({5, n}, rng, -1e3, 1e3);
    Tensor y = softmax_lastdim(x);
    for (int r = 0; r < 5; ++r) {
      double s = 0;
      for (std::int64_t i = 0; i < n; ++i) {
        EXPECT_GE(y.value(r * n + i), 0.0);
        s += y.value(r * n + i);
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
}

// ---- matmul / pooling --------------------------------------------------

TEST(MatmulTest, IdentityAndOnes) {
  Tensor eye = Tensor::from_values({2, 2}, {1, 0, 0, 1});
  Tensor a = Tensor::from_values({2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(max_abs_diff(matmul(eye, a), a), 0.0);
  EXPECT_EQ(matmul(Tensor::ones({1, 3}), Tensor::ones({3, 1})).item(), 3.0);
  EXPECT_EQ(matmul_macs({4, 5}, {5, 6}), 120);
  EXPECT_THROW(matmul(Tensor::ones({2, 3}), Tensor::ones({2, 3})), ShapeError);
}

TEST(MatmulTest, TransposedOperandMatchesExplicitTranspose) {
  std::mt19937_64 rng(5);
  Tensor a = random_normal({2, 3, 4, 5}, rng);
  Tensor b = random_normal({2, 3, 6, 5}, rng);
  Tensor c = matmul(a, b, true);
  EXPECT_EQ(c.shape(), (Shape{2, 3, 4, 6}));
  for (int s = 0; s < 6; ++s)
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 6; ++j) {
        double acc = 0;
        for (int k = 0; k < 5; ++k) acc += a.value((s * 4 + i) * 5 + k) * b.value((s * 6 + j) * 5 + k);
        EXPECT_NEAR(c.value((s * 4 + i) * 6 + j), acc, 1e-5);
      }
}

TEST(AvgPoolTest, MeansOverSpatialSites) {
  EXPECT_EQ(max_abs_diff(avgpool_global(Tensor::ones({1, 3, 4, 4})), Tensor::ones({1, 3})), 0.0);
  EXPECT_DOUBLE_EQ(avgpool_global(Tensor::from_values({1, 1, 2, 2}, {1, 2, 3, 4})).item(), 2.5);
  Tensor x = Tensor::zeros({1, 2, 3, 3});
  for (int i = 0; i < 9; ++i) {
    x.set_value(i, 0.7);
    x.set_value(9 + i, -1.25);
  }
  Tensor y = avgpool_global(x);
  EXPECT_FLOAT_EQ(static_cast<float>(y.value(0)), 0.7f);
  EXPECT_FLOAT_EQ(static_cast<float>(y.value(1)), -1.25f);
}

TEST(SubsampleTest, OddExtentKeepsCeilSites) {
  Tensor x = Tensor::zeros({1, 1, 7, 7});
  for (int i = 0; i < 49; ++i) x.set_value(i, i);
  Tensor y = subsample(x, 2);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 4, 4}));
  EXPECT_EQ(y.value(5), 2 * 7 + 2);  // (1,1) -> (2,2)
  EXPECT_EQ(y.value(15), 6 * 7 + 6);
}

// ---- autograd ----------------------------------------------------------

TEST(AutogradTest, SquareSumGradient) {
  DefaultDTypeGuard g(DType::F64);
  Tensor x = scalar_vec({1.0, 2.0});
  x.set_requires_grad(true);
  sum(mul(x, x)).backward();
  EXPECT_EQ(x.grad().to_vector(), (std::vector<double>{2.0, 4.0}));
}

TEST(AutogradTest, BackwardRejectsNonScalar) {
  Tensor x = scalar_vec({1.0, 2.0});
  x.set_requires_grad(true);
  EXPECT_THROW(hardswish(x).backward(), ShapeError);
}

TEST(AutogradTest, UnreachableParameterGetsZero) {
  Tensor x = scalar_vec({1.0});
  Tensor unused = scalar_vec({4.0});
  x.set_requires_grad(true);
  unused.set_requires_grad(true);
  sum(x).backward();
  EXPECT_EQ(unused.grad().item(), 0.0);
}

TEST(AutogradTest, FanOutAccumulatesBranchGradients) {
  DefaultDTypeGuard g(DType::F64);
  std::mt19937_64 rng(2);
  Tensor x = random_normal({3, 4}, rng);
  auto branch_a = [](const Tensor& t) { return probe(hardswish(t), 1); };
  auto branch_b = [](const Tensor& t) { return probe(softmax_lastdim(t), 2); };

  x.set_requires_grad(true);
  branch_a(x).backward();
  const Tensor ga = x.grad();
  x.zero_grad();
  branch_b(x).backward();
  const Tensor gb = x.grad();
  x.zero_grad();
  add(branch_a(x), branch_b(x)).backward();
  EXPECT_LT(max_abs_diff(x.grad(), add(ga, gb)), 1e-12);
}

TEST(AutogradTest, NoGradGuardSkipsRecording) {
  Tensor x = scalar_vec({1.0});
  x.set_requires_grad(true);
  NoGradGuard guard;
  EXPECT_FALSE(hardswish(x).requires_grad());
}

// Central-difference oracle for every differentiable op on small random shapes.
class OpGradientTest : public ::testing::Test {
 protected:
  DefaultDTypeGuard f64_{DType::F64};
  std::mt19937_64 rng_{1234};
};

TEST_F(OpGradientTest, Conv2d) {
  Tensor x = random_normal({2, 3, 5, 4}, rng_);
  Tensor w = random_normal({2, 3, 3, 3}, rng_);
  Tensor b = random_normal({2}, rng_);
  auto r = grad_check([&] { return probe(conv2d(x, w, b, 2, 1)); }, {x, w, b});
  EXPECT_LT(r.worst_rel, 1e-3);
  Tensor w1 = random_normal({4, 3, 1, 1}, rng_);
  r = grad_check([&] { return probe(conv2d(x, w1, Tensor(), 1, 0)); }, {x, w1});
  EXPECT_LT(r.worst_rel, 1e-3);
}

TEST_F(OpGradientTest, BatchNormBothModes) {
  Tensor x = random_normal({3, 2, 2, 3}, rng_);
  Tensor gm = random_normal({2}, rng_), bt = random_normal({2}, rng_);
  Tensor rm = random_normal({2}, rng_), rv = random_uniform({2}, rng_, 0.5, 2.0);
  for (Mode mode : {Mode::Train, Mode::Eval}) {
    auto r = grad_check([&] { return probe(batch_norm(x, gm, bt, rm, rv, mode)); }, {x, gm, bt});
    EXPECT_LT(r.worst_rel, 1e-3);
  }
}

TEST_F(OpGradientTest, LayerNorm) {
  Tensor x = random_normal({2, 5, 2, 2}, rng_);
  Tensor gm = random_normal({5}, rng_), bt = random_normal({5}, rng_);
  auto r = grad_check([&] { return probe(layer_norm_channels(x, gm, bt)); }, {x, gm, bt});
  EXPECT_LT(r.worst_rel, 1e-3);
}

TEST_F(OpGradientTest, ActivationsAndSoftmax) {
  Tensor x = random_normal({3, 6}, rng_, 3.0);
  EXPECT_LT(grad_check([&] { return probe(hardswish(x)); }, {x}).worst_rel, 1e-3);
  EXPECT_LT(grad_check([&] { return probe(softmax_lastdim(x)); }, {x}).worst_rel, 1e-3);
}

TEST_F(OpGradientTest, MatmulVariants) {
  Tensor a = random_normal({2, 3, 4}, rng_);
  Tensor b = random_normal({2, 4, 5}, rng_);
  Tensor bt = random_normal({2, 5, 4}, rng_);
  Tensor m = random_normal({4, 5}, rng_);
  EXPECT_LT(grad_check([&] { return probe(matmul(a, b)); }, {a, b}).worst_rel, 1e-3);
  EXPECT_LT(grad_check([&] { return probe(matmul(a, bt, true)); }, {a, bt}).worst_rel, 1e-3);
  EXPECT_LT(grad_check([&] { return probe(matmul(a, m)); }, {a, m}).worst_rel, 1e-3);
}

TEST_F(OpGradientTest, LayoutAndReductionOps) {
  Tensor x = random_normal({2, 6, 3, 3}, rng_);
  Tensor y = random_normal({6, 3, 3}, rng_);
  EXPECT_LT(grad_check([&] { return probe(avgpool_global(x)); }, {x}).worst_rel, 1e-3);
  EXPECT_LT(grad_check([&] { return probe(add(x, y)); }, {x, y}).worst_rel, 1e-3);
  EXPECT_LT(grad_check([&] { return probe(subsample(x, 2)); }, {x}).worst_rel, 1e-3);
  EXPECT_LT(grad_check([&] { return probe(merge_heads(split_heads(x, 1, 2, 2), 3, 3)); }, {x})
                .worst_rel,
            1e-3);
  const std::vector<double> f{0.5, 2.0};
  EXPECT_LT(grad_check([&] { return probe(scale_samples(x, f)); }, {x}).worst_rel, 1e-3);
  EXPECT_LT(grad_check([&] { return mean(mul(x, x)); }, {x}).worst_rel, 1e-3);
  EXPECT_LT(grad_check([&] { return probe(gather(y, {0, 0, 5, 7}, {2, 2})); }, {y}).worst_rel, 1e-3);
}

TEST_F(OpGradientTest, LinearAndCrossEntropy) {
  Tensor x = random_normal({4, 5}, rng_);
  Tensor w = random_normal({3, 5}, rng_);
  Tensor b = random_normal({3}, rng_);
  const std::vector<int> labels{0, 2, 1, 2};
  auto r = grad_check([&] { return cross_entropy(linear(x, w, b), labels); }, {x, w, b});
  EXPECT_LT(r.worst_rel, 1e-3);
}

TEST(CrossEntropyTest, UniformLogitsGiveLogK) {
  const std::vector<int> labels{0, 3};
  EXPECT_NEAR(cross_entropy(Tensor::zeros({2, 4}), labels).item(), std::log(4.0), 1e-6);
  const std::vector<int> bad{0, 4};
  EXPECT_THROW(cross_entropy(Tensor::zeros({2, 4}), bad), std::out_of_range);
}
