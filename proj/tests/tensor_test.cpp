#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "oracles.hpp"
#include "rmsin/gradcheck.hpp"
#include "rmsin/tensor/ops.hpp"
#include "rmsin/tensor/spatial.hpp"
#include "test_util.hpp"

using namespace rmsin;
using namespace testutil;

namespace {

constexpr double kGradTol = 1e-4;
constexpr int kSeeds = 20;

std::span<const double> sp(const std::vector<double>& v) { return v; }

}  // namespace

// ---------------------------------------------------------------- conv2d

TEST(Conv2d, IdentityKernelLeavesInputUnchanged) {
  Rng rng(1);
  const T32 x = rand32({3, 5, 4}, rng);
  T32 w = T32::zeros({3, 3, 1, 1});
  for (int c = 0; c < 3; ++c) w.mutable_data()[c * 3 + c] = 1.0f;
  const T32 y = conv2d(x, w, 1, 0);
  EXPECT_EQ(y.shape(), x.shape());
  EXPECT_TRUE(bitwise_equal(y.data(), x.data()));
}

TEST(Conv2d, FullOverlapSum) {
  const T32 x = T32::ones({1, 3, 3});
  const T32 w = T32::ones({1, 1, 3, 3});
  const T32 y = conv2d(x, w, 1, 0);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1}));
  EXPECT_EQ(y.item(), 9.0f);
}

TEST(Conv2d, MatchesLoopOracleExactly) {
  Rng rng(11);
  const T64 x = rand64({1, 5, 5}, rng);
  const T64 w = rand64({2, 1, 3, 3}, rng);
  const T64 y = conv2d(x, w, 1, 1);
  const auto ref = oracle::conv2d(vec(x), 1, 5, 5, vec(w), 2, 3, {}, 1, 1);
  EXPECT_EQ(max_abs_diff(y.data(), sp(ref)), 0.0);
}

TEST(Conv2d, MatchesLoopOracleAcrossStridesAndBatches) {
  Rng rng(12);
  for (int trial = 0; trial < 12; ++trial) {
    const int c = rng.uniform_int(1, 3), co = rng.uniform_int(1, 4), h = rng.uniform_int(3, 8),
              wd = rng.uniform_int(3, 8);
    const int k = (trial % 2) ? 3 : 1, stride = rng.uniform_int(1, 2), pad = k == 3 ? rng.uniform_int(0, 1) : 0;
    const T64 x = rand64({2, c, h, wd}, rng);
    const T64 w = rand64({co, c, k, k}, rng);
    const T64 b = rand64({co}, rng);
    const T64 y = conv2d(x, w, b, stride, pad);
    for (int bi = 0; bi < 2; ++bi) {
      const std::vector<double> xb(x.data().begin() + bi * c * h * wd, x.data().begin() + (bi + 1) * c * h * wd);
      int ho = 0, wo = 0;
      const auto ref = oracle::conv2d(xb, c, h, wd, vec(w), co, k, vec(b), stride, pad, &ho, &wo);
      ASSERT_EQ(y.shape(), (Shape{2, co, ho, wo}));
      const std::span<const double> yb = y.data().subspan(static_cast<std::size_t>(bi) * co * ho * wo,
                                                          static_cast<std::size_t>(co) * ho * wo);
      EXPECT_EQ(max_abs_diff(yb, sp(ref)), 0.0);
    }
  }
}

TEST(Conv2d, ChannelMismatchIsDimensionError) {
  EXPECT_THROW(conv2d(T32::zeros({2, 4, 4}), T32::zeros({1, 3, 3, 3}), 1, 1), DimensionError);
}

// ---------------------------------------------------------------- depthwise

TEST(DepthwiseConv2d, IdentityKernel) {
  Rng rng(2);
  const T32 x = rand32({4, 6, 6}, rng);
  const T32 w = T32::ones({4, 1, 1});
  EXPECT_TRUE(bitwise_equal(depthwise_conv2d(x, w, 1, 0).data(), x.data()));
}

TEST(DepthwiseConv2d, StridedExtentFollowsResizeFormula) {
  const T32 x = T32::ones({2, 7, 7});
  const T32 w = T32::ones({2, 3, 3});
  EXPECT_EQ(depthwise_conv2d(x, w, 2, 1).dim(1), 4);
  EXPECT_EQ(depthwise_conv2d(x, w, 3, 1).dim(1), 3);
}

TEST(DepthwiseConv2d, MatchesLoopOracleExactly) {
  Rng rng(21);
  for (int trial = 0; trial < 10; ++trial) {
    const int c = rng.uniform_int(1, 4), h = rng.uniform_int(3, 8), stride = rng.uniform_int(1, 3);
    const T64 x = rand64({c, h, h}, rng);
    const T64 w = rand64({c, 3, 3}, rng);
    const T64 b = rand64({c}, rng);
    const auto ref = oracle::depthwise(vec(x), c, h, h, vec(w), 3, vec(b), stride, 1);
    EXPECT_EQ(max_abs_diff(depthwise_conv2d(x, w, b, stride, 1).data(), sp(ref)), 0.0);
  }
}

TEST(DepthwiseConv2d, ChannelMismatchIsDimensionError) {
  EXPECT_THROW(depthwise_conv2d(T32::zeros({3, 4, 4}), T32::zeros({2, 3, 3}), 1, 1), DimensionError);
}

// ---------------------------------------------------------------- linear / matmul

TEST(Linear, IdentityWeightsLeaveInputUnchanged) {
  Rng rng(3);
  const T32 x = rand32({2, 5, 4}, rng);
  T32 w = T32::zeros({4, 4});
  for (int i = 0; i < 4; ++i) w.mutable_data()[i * 4 + i] = 1.0f;
  EXPECT_TRUE(bitwise_equal(linear(x, w, T32::zeros({4})).data(), x.data()));
}

TEST(Linear, HandArithmetic) {
  const T32 y = linear(T32({2}, {1.0f, 2.0f}), T32({2, 1}, {1.0f, 1.0f}), T32({1}, {0.5f}));
  EXPECT_EQ(y.shape(), (Shape{1}));
  EXPECT_FLOAT_EQ(y.item(), 3.5f);
}

TEST(Linear, MatchesTripleLoop) {
  Rng rng(31);
  const T64 x = rand64({7, 4}, rng);
  const T64 w = rand64({4, 3}, rng);
  const T64 b = rand64({3}, rng);
  auto ref = oracle::matmul(vec(x), vec(w), 7, 4, 3);
  for (int i = 0; i < 7; ++i)
    for (int j = 0; j < 3; ++j) ref[i * 3 + j] += b[j];
  EXPECT_LT(max_abs_diff(linear(x, w, b).data(), sp(ref)), 1e-14);
}

TEST(Linear, ExtentMismatchIsDimensionError) {
  EXPECT_THROW(linear(T32::zeros({3, 5}), T32::zeros({4, 2}), T32::zeros({2})), DimensionError);
}

TEST(Matmul, MatchesLoopOracleExactly) {
  Rng rng(32);
  for (int trial = 0; trial < 10; ++trial) {
    const int m = rng.uniform_int(1, 8), k = rng.uniform_int(1, 8), n = rng.uniform_int(1, 8);
    const T64 a = rand64({m, k}, rng);
    const T64 b = rand64({k, n}, rng);
    EXPECT_EQ(max_abs_diff(matmul(a, b).data(), sp(oracle::matmul(vec(a), vec(b), m, k, n))), 0.0);
  }
}

TEST(Matmul, BatchedAndSharedRightOperand) {
  Rng rng(33);
  const T64 a = rand64({3, 4, 5}, rng);
  const T64 b = rand64({3, 5, 2}, rng);
  const T64 shared = rand64({5, 2}, rng);
  const T64 y = matmul(a, b);
  const T64 ys = matmul(a, shared);
  for (int bi = 0; bi < 3; ++bi) {
    const std::vector<double> ab(a.data().begin() + bi * 20, a.data().begin() + (bi + 1) * 20);
    const std::vector<double> bb(b.data().begin() + bi * 10, b.data().begin() + (bi + 1) * 10);
    EXPECT_EQ(max_abs_diff(y.data().subspan(bi * 8, 8), sp(oracle::matmul(ab, bb, 4, 5, 2))), 0.0);
    EXPECT_EQ(max_abs_diff(ys.data().subspan(bi * 8, 8), sp(oracle::matmul(ab, vec(shared), 4, 5, 2))), 0.0);
  }
  EXPECT_THROW(matmul(T64::zeros({2, 3}), T64::zeros({4, 2})), DimensionError);
}

// ---------------------------------------------------------------- softmax

TEST(Softmax, ConstantSliceIsUniform) {
  const T32 y = softmax(T32({4}, {2.0f, 2.0f, 2.0f, 2.0f}), 0);
  for (float v : y.data()) EXPECT_FLOAT_EQ(v, 0.25f);
}

TEST(Softmax, ShiftInvariantAndNormalized) {
  Rng rng(41);
  for (int trial = 0; trial < 20; ++trial) {
    const T32 x = rand32({3, 7, 5}, rng, -5, 5);
    const T32 shifted = add(x, T32::scalar(static_cast<float>(rng.uniform(-20, 20))));
    const int axis = trial % 3;
    const T32 y = softmax(x, axis);
    const T32 ys = softmax(shifted, axis);
    for (std::size_t i = 0; i < y.numel(); ++i) {
      EXPECT_NEAR(y[i], ys[i], 1e-6);
      EXPECT_GT(y[i], 0.0f);
      EXPECT_LT(y[i], 1.0f);
    }
    const T32 s = sum(y, axis);
    for (float v : s.data()) EXPECT_NEAR(v, 1.0f, 1e-6);
  }
}

TEST(Softmax, MatchesDirectFormula) {
  const T64 y = softmax(T64({3}, {0.0, 1.0, 2.0}), 0);
  const double z = std::exp(0.0) + std::exp(1.0) + std::exp(2.0);
  EXPECT_NEAR(y[0], 1.0 / z, 1e-15);
  EXPECT_NEAR(y[1], std::exp(1.0) / z, 1e-15);
  EXPECT_NEAR(y[2], std::exp(2.0) / z, 1e-15);
}

// ---------------------------------------------------------------- activations

TEST(Activation, PointValues) {
  const T32 x({5}, {-2.0f, 3.0f, 0.0f, -3.0f, 1.0f});
  const T32 r = activation(x, Activation::relu);
  EXPECT_EQ(r[0], 0.0f);
  EXPECT_EQ(r[1], 3.0f);
  EXPECT_EQ(activation(x, Activation::sigmoid)[2], 0.5f);
  EXPECT_EQ(activation(x, Activation::tanh)[2], 0.0f);
  const T32 hs = activation(x, Activation::hardswish);
  EXPECT_EQ(hs[3], 0.0f);
  EXPECT_EQ(hs[1], 3.0f);
  EXPECT_NEAR(hs[4], 4.0 / 6.0, 1e-7);
}

// ---------------------------------------------------------------- bilinear sample

TEST(BilinearSample, IntegerPointReadsGridExactly) {
  Rng rng(5);
  const T32 g = rand32({2, 3, 4}, rng);
  const T32 y = bilinear_sample(g, T32({1, 2}, {1.0f, 2.0f}));
  EXPECT_EQ(y[0], g[1 * 4 + 2]);
  EXPECT_EQ(y[1], g[12 + 1 * 4 + 2]);
}

TEST(BilinearSample, MidpointIsCornerMean) {
  const T32 g({1, 2, 2}, {1.0f, 2.0f, 3.0f, 5.0f});
  EXPECT_FLOAT_EQ(bilinear_sample(g, T32({1, 2}, {0.5f, 0.5f})).item(), 2.75f);
}

TEST(BilinearSample, OutsideSupportIsZero) {
  const T32 g = T32::ones({1, 3, 3});
  EXPECT_EQ(bilinear_sample(g, T32({1, 2}, {10.0f, 10.0f})).item(), 0.0f);
}

TEST(BilinearSample, MatchesPointOracle) {
  Rng rng(51);
  const T64 g = rand64({1, 4, 5}, rng);
  const T64 pts = rand64({9, 2}, rng, -1.5, 5.5);
  const T64 y = bilinear_sample(g, pts);
  for (int p = 0; p < 9; ++p) EXPECT_NEAR(y[p], oracle::bilinear(vec(g), 4, 5, pts[2 * p], pts[2 * p + 1]), 1e-14);
}

// ---------------------------------------------------------------- avg pool / upsample

TEST(AvgPool2d, ConstantAndHandValues) {
  const T32 c = avg_pool2d(T32({1, 4, 4}, 3.0f), 2, 2);
  for (float v : c.data()) EXPECT_EQ(v, 3.0f);
  EXPECT_FLOAT_EQ(avg_pool2d(T32({1, 2, 2}, {1, 2, 3, 4}), 2, 2).item(), 2.5f);
}

TEST(AvgPool2d, MatchesLoopOracleExactly) {
  Rng rng(61);
  const T64 x = rand64({3, 8, 8}, rng);
  EXPECT_EQ(max_abs_diff(avg_pool2d(x, 2, 2).data(), sp(oracle::avg_pool(vec(x), 3, 8, 8, 2, 2))), 0.0);
  EXPECT_EQ(max_abs_diff(avg_pool2d(x, 3, 1).data(), sp(oracle::avg_pool(vec(x), 3, 8, 8, 3, 1))), 0.0);
}

TEST(AvgPool2d, KernelLargerThanInputIsDimensionError) {
  EXPECT_THROW(avg_pool2d(T32::zeros({1, 2, 2}), 3, 1), DimensionError);
}

TEST(UpsampleBilinear, IdentityAndConstant) {
  Rng rng(7);
  const T32 x = rand32({2, 3, 5}, rng);
  EXPECT_TRUE(bitwise_equal(upsample_bilinear(x, 3, 5).data(), x.data()));
  const T32 c = upsample_bilinear(T32({1, 3, 2}, 5.0f), 7, 9);
  for (float v : c.data()) EXPECT_EQ(v, 5.0f);
  EXPECT_THROW(upsample_bilinear(x, 2, 5), DimensionError);
}

TEST(UpsampleBilinear, TwoByTwoToFourByFourTable) {
  // Half-pixel centres: target rows sample source rows 0, 0.25, 0.75, 1
  // after clamping at the border.
  const T64 x({1, 2, 2}, {1.0, 2.0, 3.0, 4.0});
  const double t[4] = {0.0, 0.25, 0.75, 1.0};
  const T64 y = upsample_bilinear(x, 4, 4);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) {
      const double top = 1.0 + (2.0 - 1.0) * t[j];
      const double bot = 3.0 + (4.0 - 3.0) * t[j];
      EXPECT_NEAR(y[i * 4 + j], top + (bot - top) * t[i], 1e-15);
    }
}

// ---------------------------------------------------------------- plumbing ops

TEST(Plumbing, ConcatSliceRoundTrip) {
  Rng rng(81);
  const T32 a = rand32({2, 3, 4}, rng);
  const T32 b = rand32({2, 1, 4}, rng);
  const T32 c = concat<float>({a, b}, 1);
  ASSERT_EQ(c.shape(), (Shape{2, 4, 4}));
  EXPECT_TRUE(bitwise_equal(slice(c, 1, 0, 3).data(), a.data()));
  EXPECT_TRUE(bitwise_equal(slice(c, 1, 3, 1).data(), b.data()));
  EXPECT_THROW(concat<float>({a, rand32({1, 3, 4}, rng)}, 1), DimensionError);
  EXPECT_THROW(slice(a, 2, 3, 2), DimensionError);
}

TEST(Plumbing, PermuteMatchesIndexArithmetic) {
  Rng rng(82);
  const T32 x = rand32({2, 3, 4, 5}, rng);
  const T32 y = permute(x, {0, 2, 3, 1});
  ASSERT_EQ(y.shape(), (Shape{2, 4, 5, 3}));
  for (int b = 0; b < 2; ++b)
    for (int c = 0; c < 3; ++c)
      for (int h = 0; h < 4; ++h)
        for (int w = 0; w < 5; ++w) EXPECT_EQ(y[((b * 4 + h) * 5 + w) * 3 + c], x[((b * 3 + c) * 4 + h) * 5 + w]);
}

TEST(Plumbing, LayerNormMatchesOracle) {
  Rng rng(83);
  const T64 x = rand64({6, 5}, rng, -3, 3);
  const T64 y = layer_norm(x, T64::ones({5}), T64::zeros({5}));
  EXPECT_LT(max_abs_diff(y.data(), sp(oracle::layer_norm_rows(vec(x), 6, 5))), 1e-13);
}

TEST(Plumbing, BatchNormTrainingUsesBatchStatsAndUpdatesRunning) {
  Rng rng(84);
  const T64 x = rand64({3, 2, 2, 2}, rng);
  T64 rm = T64::zeros({2}), rv = T64::ones({2});
  const T64 y = batch_norm(x, T64::ones({2}), T64::zeros({2}), rm, rv, true);
  for (int c = 0; c < 2; ++c) {
    std::vector<double> vals;
    for (int b = 0; b < 3; ++b)
      for (int i = 0; i < 4; ++i) vals.push_back(x[(b * 2 + c) * 4 + i]);
    double mu = 0, var = 0;
    for (double v : vals) mu += v;
    mu /= 12;
    for (double v : vals) var += (v - mu) * (v - mu);
    for (int b = 0; b < 3; ++b)
      for (int i = 0; i < 4; ++i)
        EXPECT_NEAR(y[(b * 2 + c) * 4 + i], (x[(b * 2 + c) * 4 + i] - mu) / std::sqrt(var / 12 + 1e-5), 1e-12);
    EXPECT_NEAR(rm[c], 0.1 * mu, 1e-15);
    EXPECT_NEAR(rv[c], 0.9 + 0.1 * var / 11, 1e-15);
  }
  const T64 ye = batch_norm(x, T64::ones({2}), T64::zeros({2}), rm, rv, false);
  EXPECT_NEAR(ye[0], (x[0] - rm[0]) / std::sqrt(rv[0] + 1e-5), 1e-14);
}

TEST(Plumbing, Reductions) {
  const T32 x({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(sum(x).item(), 21.0f);
  EXPECT_EQ(mean(x).item(), 3.5f);
  const T32 s0 = sum(x, 0);
  EXPECT_EQ(s0.shape(), (Shape{1, 3}));
  EXPECT_EQ(s0[2], 9.0f);
  const T32 m1 = mean(x, 1);
  EXPECT_EQ(m1[1], 5.0f);
}

TEST(Plumbing, SpaceToDepthOrdering) {
  const T32 x({1, 2, 2}, {1, 2, 3, 4});
  const T32 y = space_to_depth(x);
  ASSERT_EQ(y.shape(), (Shape{4, 1, 1}));
  EXPECT_EQ(y[0], 1.0f);  // (0,0)
  EXPECT_EQ(y[1], 3.0f);  // (1,0)
  EXPECT_EQ(y[2], 2.0f);  // (0,1)
  EXPECT_EQ(y[3], 4.0f);  // (1,1)
  EXPECT_THROW(space_to_depth(T32::zeros({1, 3, 2})), DimensionError);
}

// ---------------------------------------------------------------- backward

TEST(Backward, LinearLossGivesInputAsGradient) {
  Rng rng(91);
  T64 w = rand64({6}, rng);
  w.set_requires_grad(true);
  const T64 x = rand64({6}, rng);
  Tape<double> tape;
  Tape<double>::Scope scope(tape);
  tape.backward(sum(mul(w, x)));
  EXPECT_EQ(w.grad(), vec(x));
}

TEST(Backward, DeadReluHasZeroGradient) {
  T64 w({3}, {-1.0, -0.5, -2.0});
  w.set_requires_grad(true);
  Tape<double> tape;
  Tape<double>::Scope scope(tape);
  tape.backward(sum(relu(w)));
  for (double g : w.grad()) EXPECT_EQ(g, 0.0);
}

TEST(Backward, NonScalarLossIsUsageError) {
  T64 w({3}, {1.0, 2.0, 3.0});
  w.set_requires_grad(true);
  Tape<double> tape;
  Tape<double>::Scope scope(tape);
  EXPECT_THROW(tape.backward(relu(w)), UsageError);
}

TEST(Backward, UnusedAndDetachedTensorsGetZeroGradient) {
  Rng rng(92);
  T64 used = rand64({4}, rng), unused = rand64({4}, rng);
  used.set_requires_grad(true);
  unused.set_requires_grad(true);
  const T64 frozen = used.detach();
  EXPECT_FALSE(frozen.requires_grad());
  Tape<double> tape;
  Tape<double>::Scope scope(tape);
  const T64 loss = sum(add(mul(used, used), frozen));
  tape.backward(loss);
  for (double g : unused.grad()) EXPECT_EQ(g, 0.0);
  for (double g : frozen.grad()) EXPECT_EQ(g, 0.0);
  for (int i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(used.grad()[i], 2 * used[i]);
}

TEST(Backward, TapeIsTopologicallyOrdered) {
  Rng rng(93);
  T64 w = rand64({3}, rng);
  w.set_requires_grad(true);
  Tape<double> tape;
  Tape<double>::Scope scope(tape);
  const T64 a = relu(w);
  const T64 b = mul(a, a);
  const T64 c = sum(b);
  EXPECT_LT(a.node_id(), b.node_id());
  EXPECT_LT(b.node_id(), c.node_id());
  EXPECT_EQ(tape.size(), 3u);
}

TEST(Backward, DeterministicAcrossRuns) {
  auto run = [] {
    Rng rng(94);
    T32 w = rand32({4, 3, 3, 3}, rng);
    w.set_requires_grad(true);
    const T32 x = rand32({2, 3, 6, 6}, rng);
    Tape<float> tape;
    Tape<float>::Scope scope(tape);
    const T32 y = softmax(relu(conv2d(x, w, 1, 1)), 1);
    const T32 loss = mean(mul(y, y));
    tape.backward(loss);
    std::vector<float> out(y.data().begin(), y.data().end());
    const auto g = w.grad();
    out.insert(out.end(), g.begin(), g.end());
    return out;
  };
  EXPECT_EQ(run(), run());
}

// ---------------------------------------------------------------- gradient property

namespace {

void expect_grad_ok(const GradCheckReport& r, int seed) {
  EXPECT_LT(r.max_rel_error, kGradTol) << "seed " << seed << " worst input " << r.worst_input;
}

}  // namespace

TEST(GradientProperty, Conv2d) {
  for (int seed = 0; seed < kSeeds; ++seed) {
    Rng rng(1000 + seed);
    const int c = rng.uniform_int(1, 3), co = rng.uniform_int(1, 3), h = rng.uniform_int(3, 6);
    const int k = seed % 3 == 0 ? 1 : 3, stride = rng.uniform_int(1, 2), pad = k == 3 ? rng.uniform_int(0, 1) : 0;
    const T64 x = rand64({2, c, h, h + 1}, rng), w = rand64({co, c, k, k}, rng), b = rand64({co}, rng);
    const T64 r = rand64(conv2d(x, w, b, stride, pad).shape(), rng);
    expect_grad_ok(gradcheck([&] { return probe(conv2d(x, w, b, stride, pad), r); },
                             {{"x", x, {}}, {"w", w, {}}, {"b", b, {}}}),
                   seed);
  }
}

TEST(GradientProperty, DepthwiseConv2d) {
  for (int seed = 0; seed < kSeeds; ++seed) {
    Rng rng(1100 + seed);
    const int c = rng.uniform_int(1, 3), h = rng.uniform_int(3, 7), k = seed % 2 ? 3 : 5;
    const int stride = rng.uniform_int(1, 3), pad = k / 2;
    const T64 x = rand64({2, c, h, h}, rng), w = rand64({c, k, k}, rng), b = rand64({c}, rng);
    const T64 r = rand64(depthwise_conv2d(x, w, b, stride, pad).shape(), rng);
    expect_grad_ok(gradcheck([&] { return probe(depthwise_conv2d(x, w, b, stride, pad), r); },
                             {{"x", x, {}}, {"w", w, {}}, {"b", b, {}}}),
                   seed);
  }
}

TEST(GradientProperty, LinearAndMatmul) {
  for (int seed = 0; seed < kSeeds; ++seed) {
    Rng rng(1200 + seed);
    const int m = rng.uniform_int(1, 5), k = rng.uniform_int(1, 5), n = rng.uniform_int(1, 5);
    const T64 x = rand64({2, m, k}, rng), w = rand64({k, n}, rng), b = rand64({n}, rng);
    const T64 other = rand64({2, k, n}, rng);
    const T64 r = rand64({2, m, n}, rng);
    expect_grad_ok(gradcheck([&] { return probe(linear(x, w, b), r); }, {{"x", x, {}}, {"w", w, {}}, {"b", b, {}}}),
                   seed);
    expect_grad_ok(gradcheck([&] { return probe(matmul(x, other), r); }, {{"a", x, {}}, {"b", other, {}}}), seed);
    expect_grad_ok(gradcheck([&] { return probe(matmul(x, w), r); }, {{"a", x, {}}, {"shared", w, {}}}), seed);
  }
}

TEST(GradientProperty, SoftmaxAndActivations) {
  for (int seed = 0; seed < kSeeds; ++seed) {
    Rng rng(1300 + seed);
    const T64 x = rand64({3, rng.uniform_int(1, 5), 4}, rng, -4, 4);
    const T64 r = rand64(x.shape(), rng);
    const int axis = seed % 3;
    expect_grad_ok(gradcheck([&] { return probe(softmax(x, axis), r); }, {{"x", x, {}}}), seed);
    for (auto kind : {Activation::relu, Activation::tanh, Activation::sigmoid, Activation::hardswish})
      expect_grad_ok(gradcheck([&] { return probe(activation(x, kind), r); }, {{"x", x, {}}}), seed);
  }
}

TEST(GradientProperty, BilinearSampleGridAndPoints) {
  for (int seed = 0; seed < kSeeds; ++seed) {
    Rng rng(1400 + seed);
    const T64 g = rand64({2, 4, 4}, rng);
    const T64 pts = rand64({6, 2}, rng, -0.9, 3.9);
    const T64 r = rand64({2, 6}, rng);
    expect_grad_ok(gradcheck([&] { return probe(bilinear_sample(g, pts), r); }, {{"grid", g, {}}, {"points", pts, {}}}),
                   seed);
  }
}

TEST(GradientProperty, PoolingAndResampling) {
  for (int seed = 0; seed < kSeeds; ++seed) {
    Rng rng(1500 + seed);
    const int h = rng.uniform_int(2, 6);
    const T64 x = rand64({2, 2, h, h}, rng);
    const int k = rng.uniform_int(1, h), s = rng.uniform_int(1, 2);
    const T64 rp = rand64(avg_pool2d(x, k, s).shape(), rng);
    expect_grad_ok(gradcheck([&] { return probe(avg_pool2d(x, k, s), rp); }, {{"x", x, {}}}), seed);
    const int H = h + rng.uniform_int(0, 5), W = h + rng.uniform_int(0, 5);
    const T64 ru = rand64({2, 2, H, W}, rng);
    expect_grad_ok(gradcheck([&] { return probe(upsample_bilinear(x, H, W), ru); }, {{"x", x, {}}}), seed);
  }
}

TEST(GradientProperty, NormalizationAndPlumbing) {
  for (int seed = 0; seed < kSeeds; ++seed) {
    Rng rng(1600 + seed);
    const int c = rng.uniform_int(2, 5);
    const T64 x = rand64({2, c, 2, 4}, rng, -2, 2);
    const T64 gamma = rand64({c}, rng), beta = rand64({c}, rng);
    const T64 r = rand64(x.shape(), rng);
    T64 rm = T64::zeros({c}), rv = T64::ones({c});
    expect_grad_ok(gradcheck([&] { return probe(batch_norm(x, gamma, beta, rm, rv, true), r); },
                             {{"x", x, {}}, {"gamma", gamma, {}}, {"beta", beta, {}}}),
                   seed);
    const T64 g4 = rand64({4}, rng), b4 = rand64({4}, rng);
    expect_grad_ok(gradcheck([&] { return probe(layer_norm(x, g4, b4), r); },
                             {{"x", x, {}}, {"gamma", g4, {}}, {"beta", b4, {}}}),
                   seed);
    const T64 y = rand64({2, 1, 2, 4}, rng);
    const T64 rc = rand64({2, c + 1, 2, 4}, rng);
    expect_grad_ok(gradcheck([&] { return probe(concat<double>({x, y}, 1), rc); }, {{"x", x, {}}, {"y", y, {}}}), seed);
    const T64 rs = rand64({2, 1, 2, 4}, rng);
    expect_grad_ok(gradcheck([&] { return probe(slice(x, 1, c - 1, 1), rs); }, {{"x", x, {}}}), seed);
    const T64 rperm = rand64({2, 4, 2, c}, rng);
    expect_grad_ok(gradcheck([&] { return probe(permute(x, {0, 3, 2, 1}), rperm); }, {{"x", x, {}}}), seed);
    const T64 rr = rand64({2 * c, 8}, rng);
    expect_grad_ok(gradcheck([&] { return probe(reshape(x, {2 * c, 8}), rr); }, {{"x", x, {}}}), seed);
    const T64 rb = rand64({2, c, 2, 4}, rng);
    const T64 bcast = rand64({1, c, 1, 1}, rng);
    expect_grad_ok(gradcheck([&] { return probe(mul(add(x, bcast), sub(x, bcast)), rb); },
                             {{"x", x, {}}, {"bcast", bcast, {}}}),
                   seed);
    const T64 rsum = rand64({2, 1, 2, 4}, rng);
    expect_grad_ok(gradcheck([&] { return probe(mean(x, 1), rsum); }, {{"x", x, {}}}), seed);
    const T64 rsd = rand64({2, 4 * c, 1, 2}, rng);
    expect_grad_ok(gradcheck([&] { return probe(space_to_depth(x), rsd); }, {{"x", x, {}}}), seed);
  }
}

TEST(GradientProperty, EmbeddingAndCrossEntropy) {
  for (int seed = 0; seed < kSeeds; ++seed) {
    Rng rng(1700 + seed);
    const T64 table = rand64({6, 3}, rng);
    const std::vector<int> ids = {0, 5, 2, 2};
    const T64 r = rand64({2, 2, 3}, rng);
    expect_grad_ok(gradcheck([&] { return probe(embedding(table, ids, {2, 2}), r); }, {{"table", table, {}}}), seed);
    const T64 logits = rand64({2, 3, 2, 2}, rng, -3, 3);
    std::vector<int> labels(8);
    for (auto& l : labels) l = rng.uniform_int(0, 2);
    expect_grad_ok(gradcheck([&] { return cross_entropy(logits, labels, 1); }, {{"logits", logits, {}}}), seed);
  }
}

TEST(CrossEntropy, MatchesDirectFormula) {
  const T64 logits({1, 2, 1, 2}, {0.0, 1.0, 2.0, -1.0});
  const std::vector<int> labels = {1, 0};
  const double l0 = -(2.0 - std::log(std::exp(0.0) + std::exp(2.0)));
  const double l1 = -(1.0 - std::log(std::exp(1.0) + std::exp(-1.0)));
  EXPECT_NEAR(cross_entropy(logits, labels, 1).item(), 0.5 * (l0 + l1), 1e-15);
  EXPECT_THROW(cross_entropy(logits, std::vector<int>{2, 0}, 1), UsageError);
}

TEST(Embedding, OutOfVocabularyIsUsageError) {
  EXPECT_THROW(embedding(T32::zeros({4, 2}), std::vector<int>{4}, {1}), UsageError);
}

TEST(GradCheck, DetectsAMissingGradientPath) {
  Rng rng(404);
  T64 x = rand64({6}, rng);
  // the detached factor hides half of the true derivative 2x
  const auto rep = gradcheck([&] { return sum(mul(x.detach(), x)); }, {{"x", x, {}}});
  EXPECT_GT(rep.max_rel_error, 0.4);
}

TEST(GradCheck, ComparesOneSidedSlopesAtKinks) {
  T64 x({3}, {0.5e-5, -2.0, 1.5});
  const auto rep = gradcheck([&] { return sum(relu(x)); }, {{"x", x, {}}});
  EXPECT_EQ(rep.kinks, 1u);
  EXPECT_LT(rep.max_rel_error, 1e-8);
  // a kink does not excuse a wrong value: scaling the loss breaks the match
  T64 y({2}, {0.5e-5, 1.0});
  const auto bad = gradcheck([&] { return sum(mul(relu(y.detach()), y)); }, {{"y", y, {}}});
  EXPECT_GT(bad.max_rel_error, 0.4);
}
