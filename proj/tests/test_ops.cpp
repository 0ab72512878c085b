// Differentiable op library: value oracles + central-difference gradient checks.

#include <gtest/gtest.h>

#include <cmath>

#include "cmamba/ops.hpp"
#include "testutil.hpp"

using namespace cmamba;
using testutil::check_gradients;
using testutil::weighted_sum;

namespace {

Rng& rng() {
  static Rng r(12345);
  return r;
}

// FD-check an op applied to `ninputs` random tensors of the given shape.
void fd_check(const std::function<Var(const std::vector<Var>&)>& build,
              const std::vector<Tensor>& init, double tol = 1e-3) {
  auto res = check_gradients(build, init);
  EXPECT_LT(res.max_rel_err, tol) << res.describe();
}

}  // namespace

TEST(Arithmetic, Values) {
  Var a = constant(Tensor({2, 2}, {1.0, 2.0, 3.0, 4.0}));
  Var b = constant(Tensor({2, 2}, {5.0, 6.0, 7.0, 0.5}));
  EXPECT_DOUBLE_EQ(add(a, b)->value[3], 4.5);
  EXPECT_DOUBLE_EQ(sub(a, b)->value[0], -4.0);
  EXPECT_DOUBLE_EQ(mul(a, b)->value[2], 21.0);
  EXPECT_DOUBLE_EQ(div(a, b)->value[3], 8.0);
  EXPECT_DOUBLE_EQ(affine(a, 2.0, -1.0)->value[1], 3.0);
  EXPECT_DOUBLE_EQ(sum_all(a)->value.item(), 10.0);
  EXPECT_DOUBLE_EQ(mean_all(a)->value.item(), 2.5);
}

TEST(Arithmetic, ShapeMismatchRejected) {
  Var a = constant(Tensor({2, 2}));
  Var b = constant(Tensor({4}));
  EXPECT_THROW(add(a, b), std::invalid_argument);
  EXPECT_THROW(mul(a, b), std::invalid_argument);
}

TEST(Arithmetic, Gradients) {
  Tensor r = rng().uniform_tensor({3, 4}, -1.0, 1.0);
  std::vector<Tensor> init = {rng().uniform_tensor({3, 4}, -2.0, 2.0),
                              rng().uniform_tensor({3, 4}, 0.5, 2.0)};
  fd_check([&](const std::vector<Var>& p) { return weighted_sum(add(p[0], p[1]), r); }, init);
  fd_check([&](const std::vector<Var>& p) { return weighted_sum(sub(p[0], p[1]), r); }, init);
  fd_check([&](const std::vector<Var>& p) { return weighted_sum(mul(p[0], p[1]), r); }, init);
  fd_check([&](const std::vector<Var>& p) { return weighted_sum(div(p[0], p[1]), r); }, init);
  fd_check([&](const std::vector<Var>& p) { return weighted_sum(affine(p[0], -1.7, 0.3), r); },
           {init[0]});
}

TEST(Autograd, GradAccumulatesThroughSharedNodes) {
  // f = sum(x*x + x), df/dx = 2x + 1
  Var x = make_param(Tensor({3}, {1.0, -2.0, 0.5}));
  Var loss = sum_all(add(mul(x, x), x));
  backward(loss);
  EXPECT_DOUBLE_EQ(x->grad[0], 3.0);
  EXPECT_DOUBLE_EQ(x->grad[1], -3.0);
  EXPECT_DOUBLE_EQ(x->grad[2], 2.0);
}

TEST(Autograd, NoGradGuardDetachesOps) {
  Var x = make_param(Tensor({2}, {1.0, 2.0}));
  NoGradGuard ng;
  Var y = mul(x, x);
  EXPECT_FALSE(y->requires_grad);
  EXPECT_TRUE(y->inputs.empty());
}

TEST(Activations, FrozenValues) {
  Var x = constant(Tensor({5}, {0.0, 1.0, -2.0, 0.5, 2.0}));
  // Reference values from standard function tables.
  EXPECT_NEAR(sigmoid(x)->value[4], 0.8807970779778823, 1e-15);
  EXPECT_NEAR(silu(x)->value[1], 0.7310585786300049, 1e-15);
  EXPECT_NEAR(silu(x)->value[2], -0.2384058440442351, 1e-15);
  EXPECT_NEAR(tanh_op(x)->value[3], 0.46211715726000974, 1e-15);
  EXPECT_NEAR(softplus(x)->value[0], 0.6931471805599453, 1e-15);
  EXPECT_DOUBLE_EQ(relu(x)->value[2], 0.0);
  EXPECT_DOUBLE_EQ(relu(x)->value[1], 1.0);
}

TEST(Activations, SoftplusStableForLargeInput) {
  Var x = constant(Tensor({2}, {700.0, -700.0}));
  Var y = softplus(x);
  EXPECT_DOUBLE_EQ(y->value[0], 700.0);
  EXPECT_NEAR(y->value[1], 0.0, 1e-300);
  EXPECT_TRUE(y->value.all_finite());
}

TEST(Activations, Gradients) {
  Tensor r = rng().uniform_tensor({2, 3}, -1.0, 1.0);
  Tensor x = rng().uniform_tensor({2, 3}, -2.0, 2.0);
  Tensor xpos = rng().uniform_tensor({2, 3}, 0.2, 3.0);
  fd_check([&](const std::vector<Var>& p) { return weighted_sum(silu(p[0]), r); }, {x});
  fd_check([&](const std::vector<Var>& p) { return weighted_sum(sigmoid(p[0]), r); }, {x});
  fd_check([&](const std::vector<Var>& p) { return weighted_sum(tanh_op(p[0]), r); }, {x});
  fd_check([&](const std::vector<Var>& p) { return weighted_sum(softplus(p[0]), r); }, {x});
  fd_check([&](const std::vector<Var>& p) { return weighted_sum(exp_op(p[0]), r); }, {x});
  fd_check([&](const std::vector<Var>& p) { return weighted_sum(log_op(p[0]), r); }, {xpos});
  fd_check([&](const std::vector<Var>& p) { return weighted_sum(pow_const(p[0], 2.5), r); },
           {xpos});
  fd_check([&](const std::vector<Var>& p) { return weighted_sum(normal_cdf_op(p[0]), r); }, {x});
}

TEST(NormalCdf, TableValues) {
  Var x = constant(Tensor({4}, {0.0, 1.0, -1.0, 1.96}));
  Var p = normal_cdf_op(x);
  EXPECT_NEAR(p->value[0], 0.5, 1e-15);
  EXPECT_NEAR(p->value[1], 0.8413447460685429, 1e-12);
  EXPECT_NEAR(p->value[2], 0.15865525393145705, 1e-12);
  EXPECT_NEAR(p->value[3], 0.9750021048517795, 1e-12);
}

TEST(SteRound, HalfAwayFromZeroAndPassThroughGrad) {
  Var x = make_param(Tensor({6}, {0.5, -0.5, 2.5, -2.5, 1.4, -1.6}));
  Var y = ste_round(x);
  const double want[6] = {1.0, -1.0, 3.0, -3.0, 1.0, -2.0};
  for (int i = 0; i < 6; ++i) EXPECT_DOUBLE_EQ(y->value[i], want[i]);
  Tensor r({6}, {0.1, 0.2, 0.3, 0.4, 0.5, 0.6});
  backward(weighted_sum(y, r));
  for (int i = 0; i < 6; ++i) EXPECT_DOUBLE_EQ(x->grad[i], r[i]);
}

TEST(ClampMin, ValueAndSubgradient) {
  Var x = make_param(Tensor({3}, {-1.0, 0.5, 2.0}));
  Var y = clamp_min_op(x, 1.0);
  EXPECT_DOUBLE_EQ(y->value[0], 1.0);
  EXPECT_DOUBLE_EQ(y->value[1], 1.0);
  EXPECT_DOUBLE_EQ(y->value[2], 2.0);
  backward(sum_all(y));
  EXPECT_DOUBLE_EQ(x->grad[0], 0.0);
  EXPECT_DOUBLE_EQ(x->grad[1], 0.0);
  EXPECT_DOUBLE_EQ(x->grad[2], 1.0);
}

TEST(LinearVec, ValueAndGradient) {
  // [2] -> [3] with hand-checked result
  Var x = constant(Tensor({2}, {1.0, -1.0}));
  Var w = constant(Tensor({3, 2}, {1.0, 2.0, 3.0, 4.0, 5.0, 6.0}));
  Var b = constant(Tensor({3}, {0.1, 0.2, 0.3}));
  Var y = linear_vec(x, w, b);
  EXPECT_NEAR(y->value[0], -0.9, 1e-15);
  EXPECT_NEAR(y->value[1], -0.8, 1e-15);
  EXPECT_NEAR(y->value[2], -0.7, 1e-15);

  Tensor r = rng().uniform_tensor({4}, -1.0, 1.0);
  fd_check(
      [&](const std::vector<Var>& p) { return weighted_sum(linear_vec(p[0], p[1], p[2]), r); },
      {rng().uniform_tensor({3}, -1.0, 1.0), rng().uniform_tensor({4, 3}, -1.0, 1.0),
       rng().uniform_tensor({4}, -0.5, 0.5)});
}

TEST(Conv1x1, MatchesPerPixelMatrixProduct) {
  const int ci = 3, co = 2, h = 4, w = 5;
  Tensor x = rng().uniform_tensor({ci, h, w}, -1.0, 1.0);
  Tensor wt = rng().uniform_tensor({co, ci}, -1.0, 1.0);
  Tensor b = rng().uniform_tensor({co}, -0.5, 0.5);
  Var y = conv1x1(constant(x), constant(wt), constant(b));
  for (int o = 0; o < co; ++o)
    for (int p = 0; p < h * w; ++p) {
      double want = b[o];
      for (int i = 0; i < ci; ++i) want += wt[o * ci + i] * x[i * h * w + p];
      EXPECT_NEAR(y->value[o * h * w + p], want, 1e-12);
    }

  Tensor r = rng().uniform_tensor({co, h, w}, -1.0, 1.0);
  fd_check([&](const std::vector<Var>& p) { return weighted_sum(conv1x1(p[0], p[1], p[2]), r); },
           {x, wt, b});
}

TEST(Conv2d, HandComputedCase) {
  // 3x3 input, 2x2 kernel picking x[y][x] - x[y+1][x+1], bias 0.5
  Var x = constant(Tensor({1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9}));
  Var w = constant(Tensor({1, 1, 2, 2}, {1, 0, 0, -1}));
  Var b = constant(Tensor({1}, {0.5}));
  Var y = conv2d(x, w, b, 1, 0);
  ASSERT_EQ(y->value.dim(1), 2);
  ASSERT_EQ(y->value.dim(2), 2);
  for (int i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(y->value[i], -3.5);
}

TEST(Conv2d, MatchesScatterOracle) {
  // Independent oracle: iterate input pixels and scatter their contributions.
  const int ci = 2, co = 3, k = 3, h = 5, w = 4, stride = 2, pad = 1;
  Tensor x = rng().uniform_tensor({ci, h, w}, -1.0, 1.0);
  Tensor wt = rng().uniform_tensor({co, ci, k, k}, -1.0, 1.0);
  Tensor b = rng().uniform_tensor({co}, -0.5, 0.5);
  Var y = conv2d(constant(x), constant(wt), constant(b), stride, pad);
  const int oh = (h + 2 * pad - k) / stride + 1;
  const int ow = (w + 2 * pad - k) / stride + 1;
  ASSERT_EQ(y->value.dim(1), oh);
  ASSERT_EQ(y->value.dim(2), ow);

  Tensor want({co, oh, ow});
  for (int o = 0; o < co; ++o)
    for (int p = 0; p < oh * ow; ++p) want[o * oh * ow + p] = b[o];
  for (int i = 0; i < ci; ++i)
    for (int iy = 0; iy < h; ++iy)
      for (int ix = 0; ix < w; ++ix)
        for (int o = 0; o < co; ++o)
          for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
              const int num_y = iy + pad - ky, num_x = ix + pad - kx;
              if (num_y < 0 || num_x < 0 || num_y % stride || num_x % stride) continue;
              const int oy = num_y / stride, ox = num_x / stride;
              if (oy >= oh || ox >= ow) continue;
              want[(o * oh + oy) * ow + ox] +=
                  x[(i * h + iy) * w + ix] * wt[((o * ci + i) * k + ky) * k + kx];
            }
  EXPECT_LT(testutil::max_abs_diff(y->value, want), 1e-12);

  Tensor r = rng().uniform_tensor({co, oh, ow}, -1.0, 1.0);
  fd_check(
      [&](const std::vector<Var>& p) {
        return weighted_sum(conv2d(p[0], p[1], p[2], stride, pad), r);
      },
      {x, wt, b});
}

TEST(Conv2d, ChannelMismatchRejected) {
  Var x = constant(Tensor({2, 4, 4}));
  Var w = constant(Tensor({3, 1, 3, 3}));
  Var b = constant(Tensor({3}));
  EXPECT_THROW(conv2d(x, w, b, 1, 1), std::invalid_argument);
}

TEST(DepthwiseValid, ValueAndGradient) {
  Tensor k({2, 2}, {0.25, 0.25, 0.25, 0.25});
  Var x = constant(Tensor({1, 2, 3}, {1, 2, 3, 4, 5, 6}));
  Var y = depthwise_valid(x, k);
  ASSERT_EQ(y->value.dim(1), 1);
  ASSERT_EQ(y->value.dim(2), 2);
  EXPECT_DOUBLE_EQ(y->value[0], 3.0);  // (1+2+4+5)/4
  EXPECT_DOUBLE_EQ(y->value[1], 4.0);  // (2+3+5+6)/4

  Tensor xr = rng().uniform_tensor({2, 5, 6}, -1.0, 1.0);
  Tensor kr = rng().uniform_tensor({3, 3}, -1.0, 1.0);
  Tensor r = rng().uniform_tensor({2, 3, 4}, -1.0, 1.0);
  fd_check([&](const std::vector<Var>& p) { return weighted_sum(depthwise_valid(p[0], kr), r); },
           {xr});
}

TEST(AvgPool2Same, CeilOutputExcludesPadding) {
  // 3x3 -> 2x2 with edge windows averaging only in-bounds cells
  Var x = constant(Tensor({1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9}));
  Var y = avg_pool2_same(x);
  ASSERT_EQ(y->value.dim(1), 2);
  ASSERT_EQ(y->value.dim(2), 2);
  EXPECT_DOUBLE_EQ(y->value[0], 3.0);  // (1+2+4+5)/4
  EXPECT_DOUBLE_EQ(y->value[1], 4.5);  // (3+6)/2
  EXPECT_DOUBLE_EQ(y->value[2], 7.5);  // (7+8)/2
  EXPECT_DOUBLE_EQ(y->value[3], 9.0);  // lone corner

  Tensor xr = rng().uniform_tensor({2, 5, 7}, -1.0, 1.0);
  Tensor r = rng().uniform_tensor({2, 3, 4}, -1.0, 1.0);
  fd_check([&](const std::vector<Var>& p) { return weighted_sum(avg_pool2_same(p[0]), r); }, {xr});
}

TEST(PixelShuffle2, MappingAndRoundtripGradient) {
  // [4,1,2] -> [1,2,4]
  Var x = constant(Tensor({4, 1, 2}, {1, 2, 3, 4, 5, 6, 7, 8}));
  Var y = pixel_shuffle2(x);
  const double want[8] = {1, 3, 2, 4, 5, 7, 6, 8};
  ASSERT_EQ(y->value.dim(1), 2);
  ASSERT_EQ(y->value.dim(2), 4);
  for (int i = 0; i < 8; ++i) EXPECT_DOUBLE_EQ(y->value[i], want[i]);

  Tensor xr = rng().uniform_tensor({8, 3, 2}, -1.0, 1.0);
  Tensor r = rng().uniform_tensor({2, 6, 4}, -1.0, 1.0);
  fd_check([&](const std::vector<Var>& p) { return weighted_sum(pixel_shuffle2(p[0]), r); }, {xr});
}

TEST(LayerNorm, StandardizeProducesZeroMeanUnitVar) {
  Tensor x = rng().uniform_tensor({6, 3, 4}, -3.0, 3.0);
  Var y = standardize_chan(constant(x));
  const int c = 6, hw = 12;
  for (int p = 0; p < hw; ++p) {
    double m = 0.0, v = 0.0;
    for (int i = 0; i < c; ++i) m += y->value[i * hw + p];
    m /= c;
    for (int i = 0; i < c; ++i) {
      const double d = y->value[i * hw + p] - m;
      v += d * d;
    }
    v /= c;
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v, 1.0, 1e-4);  // eps in the denominator shifts variance slightly
  }
}

TEST(LayerNorm, AffineValueOracle) {
  // [3,1,1] x=(1,2,4): mean 7/3, var 14/9
  Var x = constant(Tensor({3, 1, 1}, {1.0, 2.0, 4.0}));
  Var gamma = constant(Tensor({3}, {2.0, 1.0, 0.5}));
  Var beta = constant(Tensor({3}, {0.1, 0.2, 0.3}));
  Var y = layer_norm_chan(x, gamma, beta);
  const double m = 7.0 / 3.0, var = 14.0 / 9.0;
  const double is = 1.0 / std::sqrt(var + 1e-5);
  EXPECT_NEAR(y->value[0], 2.0 * (1.0 - m) * is + 0.1, 1e-12);
  EXPECT_NEAR(y->value[1], 1.0 * (2.0 - m) * is + 0.2, 1e-12);
  EXPECT_NEAR(y->value[2], 0.5 * (4.0 - m) * is + 0.3, 1e-12);
}

TEST(LayerNorm, Gradients) {
  Tensor x = rng().uniform_tensor({4, 2, 3}, -2.0, 2.0);
  Tensor gamma = rng().uniform_tensor({4}, 0.5, 1.5);
  Tensor beta = rng().uniform_tensor({4}, -0.3, 0.3);
  Tensor r = rng().uniform_tensor({4, 2, 3}, -1.0, 1.0);
  fd_check(
      [&](const std::vector<Var>& p) {
        return weighted_sum(layer_norm_chan(p[0], p[1], p[2]), r);
      },
      {x, gamma, beta});
  fd_check([&](const std::vector<Var>& p) { return weighted_sum(standardize_chan(p[0]), r); },
           {x});
}

TEST(GlobalMaxPool, ValueAndGradientRouting) {
  Var x = make_param(Tensor({2, 2, 2}, {1, 7, 3, 4, -1, -2, -3, -0.5}));
  Var y = global_max_pool(x);
  EXPECT_DOUBLE_EQ(y->value[0], 7.0);
  EXPECT_DOUBLE_EQ(y->value[1], -0.5);
  backward(weighted_sum(y, Tensor({2}, {1.0, 2.0})));
  EXPECT_DOUBLE_EQ(x->grad[1], 1.0);  // argmax of channel 0
  EXPECT_DOUBLE_EQ(x->grad[7], 2.0);  // argmax of channel 1
  EXPECT_DOUBLE_EQ(x->grad[0], 0.0);
}

TEST(ScaleChannels, ValueAndGradient) {
  Tensor x = rng().uniform_tensor({3, 2, 2}, -1.0, 1.0);
  Tensor s = rng().uniform_tensor({3}, 0.5, 1.5);
  Var y = scale_channels(constant(x), constant(s));
  for (int i = 0; i < 3; ++i)
    for (int p = 0; p < 4; ++p) EXPECT_DOUBLE_EQ(y->value[i * 4 + p], x[i * 4 + p] * s[i]);

  Tensor r = rng().uniform_tensor({3, 2, 2}, -1.0, 1.0);
  fd_check([&](const std::vector<Var>& p) { return weighted_sum(scale_channels(p[0], p[1]), r); },
           {x, s});
}

TEST(ConcatSlice, RoundtripAndGradient) {
  Tensor a = rng().uniform_tensor({2, 3, 3}, -1.0, 1.0);
  Tensor b = rng().uniform_tensor({3, 3, 3}, -1.0, 1.0);
  Var cat = concat_channels({constant(a), constant(b)});
  ASSERT_EQ(cat->value.dim(0), 5);
  Var back_a = slice_channels(cat, 0, 2);
  Var back_b = slice_channels(cat, 2, 5);
  EXPECT_LT(testutil::max_abs_diff(back_a->value, a), 1e-15);
  EXPECT_LT(testutil::max_abs_diff(back_b->value, b), 1e-15);
  EXPECT_THROW(concat_channels({constant(a), constant(Tensor({1, 2, 3}))}),
               std::invalid_argument);

  Tensor r = rng().uniform_tensor({5, 3, 3}, -1.0, 1.0);
  fd_check(
      [&](const std::vector<Var>& p) {
        return weighted_sum(concat_channels({p[0], p[1]}), r);
      },
      {a, b});
  Tensor r2 = rng().uniform_tensor({1, 3, 3}, -1.0, 1.0);
  fd_check(
      [&](const std::vector<Var>& p) { return weighted_sum(slice_channels(p[0], 1, 2), r2); },
      {a});
}

TEST(Sequence, RoundtripAndExplicitMapping) {
  // [1,2,2] flattened spatial order {0,1,2,3}; perm visits 3,1,0,2
  Var x = constant(Tensor({1, 2, 2}, {10, 11, 12, 13}));
  std::vector<int> perm = {3, 1, 0, 2};
  Var seq = to_sequence(x, perm);
  ASSERT_EQ(seq->value.dim(0), 4);
  ASSERT_EQ(seq->value.dim(1), 1);
  EXPECT_DOUBLE_EQ(seq->value[0], 13);
  EXPECT_DOUBLE_EQ(seq->value[1], 11);
  EXPECT_DOUBLE_EQ(seq->value[2], 10);
  EXPECT_DOUBLE_EQ(seq->value[3], 12);
  Var back = from_sequence(seq, perm, 2, 2);
  EXPECT_LT(testutil::max_abs_diff(back->value, x->value), 1e-15);

  Tensor xr = rng().uniform_tensor({3, 2, 3}, -1.0, 1.0);
  std::vector<int> p6 = {5, 0, 3, 1, 4, 2};
  Tensor r = rng().uniform_tensor({6, 3}, -1.0, 1.0);
  fd_check([&](const std::vector<Var>& p) { return weighted_sum(to_sequence(p[0], p6), r); },
           {xr});
  Tensor seq_init = rng().uniform_tensor({6, 3}, -1.0, 1.0);
  Tensor r2 = rng().uniform_tensor({3, 2, 3}, -1.0, 1.0);
  fd_check(
      [&](const std::vector<Var>& p) { return weighted_sum(from_sequence(p[0], p6, 2, 3), r2); },
      {seq_init});
}

TEST(Rounding, HalfAwayFromZeroConvention) {
  EXPECT_DOUBLE_EQ(round_away(0.5), 1.0);
  EXPECT_DOUBLE_EQ(round_away(-0.5), -1.0);
  EXPECT_DOUBLE_EQ(round_away(1.5), 2.0);
  EXPECT_DOUBLE_EQ(round_away(-1.5), -2.0);
  EXPECT_DOUBLE_EQ(round_away(2.4), 2.0);
  EXPECT_EQ(iround_away(-2.5), -3);
}
