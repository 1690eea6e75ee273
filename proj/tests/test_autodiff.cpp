#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "scsc/autodiff.hpp"
#include "scsc/gradcheck.hpp"

using namespace scsc;

namespace {

Tensor4 rnd(Shape s, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  return oracle::random_tensor(s, rng, lo, hi);
}

NamedTensor named(std::string n, Tensor4 t) { return NamedTensor{std::move(n), std::move(t)}; }

void expect_gradcheck(const ScalarFunction& f, std::vector<NamedTensor> params, double tol = 1e-6) {
  const GradCheckReport r = grad_check(f, std::move(params), 1e-5, tol);
  for (const auto& e : r.entries) {
    EXPECT_LT(e.max_rel_err, tol) << e.name << " worst index " << e.worst_index << " analytic "
                                  << e.analytic_at_worst << " numeric " << e.numeric_at_worst;
  }
}

}  // namespace

TEST(Tape, SquareHasDerivativeTwoX) {
  Tape tape;
  const Tensor4 xv(Shape{1, 1, 2, 2}, {1.0, -2.0, 0.5, 3.0});
  const Var x = tape.leaf(xv);
  const Var y = ad::sum(x * x);
  const Tensor4 gx = tape.backward(y)[x];
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(gx[i], 2.0 * xv[i]);
}

TEST(Tape, FanOutAccumulates) {
  Tape tape;
  const Var x = tape.leaf(Tensor4(Shape{1, 1, 1, 3}, 2.0));
  const Var y = ad::sum(x + 3.0 * x + x * x);
  const Tensor4 gx = tape.backward(y)[x];
  for (double v : gx.data()) EXPECT_EQ(v, 1.0 + 3.0 + 4.0);
}

TEST(Tape, UnusedLeafGetsZeroAndConstantsGetNothing) {
  Tape tape;
  const Var x = tape.leaf(Tensor4(Shape{1, 1, 1, 2}, 1.0));
  const Var unused = tape.leaf(Tensor4(Shape{1, 2, 1, 1}, 5.0));
  const Var k = tape.constant(Tensor4(Shape{1, 1, 1, 2}, 4.0));
  const Gradients g = tape.backward(ad::sum(x * k));
  EXPECT_EQ(g[x][0], 4.0);
  const Tensor4 gu = g[unused], gk = g[k];
  EXPECT_EQ(gu.shape(), (Shape{1, 2, 1, 1}));
  for (double v : gu.data()) EXPECT_EQ(v, 0.0);
  for (double v : gk.data()) EXPECT_EQ(v, 0.0);
}

TEST(Tape, BackwardIsRepeatableAndLeavesValuesIntact) {
  Tape tape;
  const Tensor4 xv = rnd(Shape{1, 2, 3, 3}, 1);
  const Var x = tape.leaf(xv);
  const Var y = ad::sum(ad::sigmoid(x) * x);
  const Tensor4 g1 = tape.backward(y)[x];
  const Tensor4 g2 = tape.backward(y)[x];
  EXPECT_EQ(oracle::max_abs_diff(g1, g2), 0.0);
  EXPECT_EQ(oracle::max_abs_diff(x.value(), xv), 0.0);
}

TEST(Tape, RejectsNonScalarRootAndForeignVars) {
  Tape a, b;
  const Var x = a.leaf(Tensor4(Shape{1, 1, 2, 2}, 1.0));
  const Var z = b.leaf(Tensor4(Shape{1, 1, 2, 2}, 1.0));
  EXPECT_THROW((void)a.backward(x), DimensionError);
  EXPECT_THROW((void)ad::add(x, z), std::invalid_argument);
  EXPECT_THROW((void)b.backward(ad::sum(x)), std::invalid_argument);
}

TEST(GradCheck, DenseConvBothStrides) {
  const Tensor4 probe = rnd(Shape{2, 3, 3, 3}, 4);
  for (std::size_t s : {1u, 2u}) {
    const Tensor4 p = s == 1 ? rnd(Shape{2, 3, 5, 5}, 5) : probe;
    expect_gradcheck(
        [&, s](Tape&, std::span<const Var> v) {
          return ad::weighted_sum(ad::conv2d_dense(v[0], v[1], v[2], ConvSpec{3, s}), p);
        },
        {named("x", rnd(Shape{2, 2, 5, 5}, 1)), named("w", rnd(Shape{3, 2, 3, 3}, 2)),
         named("b", rnd(Shape{1, 3, 1, 1}, 3))});
  }
}

TEST(GradCheck, DepthwiseAndPointwiseConv) {
  const Tensor4 p = rnd(Shape{1, 4, 3, 3}, 10);
  expect_gradcheck(
      [&](Tape&, std::span<const Var> v) {
        const Var d = ad::conv2d_depthwise(v[0], v[1], v[2], ConvSpec{5, 2});
        return ad::weighted_sum(ad::conv2d_pointwise(d, v[3], v[4]), p);
      },
      {named("x", rnd(Shape{1, 3, 6, 5}, 11)), named("dw", rnd(Shape{3, 1, 5, 5}, 12)),
       named("db", rnd(Shape{1, 3, 1, 1}, 13)), named("pw", rnd(Shape{4, 3, 1, 1}, 14)),
       named("pb", rnd(Shape{1, 4, 1, 1}, 15))});
}

TEST(GradCheck, CircularPadding) {
  const Tensor4 p = rnd(Shape{1, 2, 4, 4}, 20);
  expect_gradcheck(
      [&](Tape&, std::span<const Var> v) {
        return ad::weighted_sum(ad::conv2d_depthwise(v[0], v[1], v[2], ConvSpec{3, 1, PadMode::Circular}), p);
      },
      {named("x", rnd(Shape{1, 2, 4, 4}, 21)), named("w", rnd(Shape{2, 1, 3, 3}, 22)),
       named("b", rnd(Shape{1, 2, 1, 1}, 23))});
}

TEST(GradCheck, ElementwiseMatmulPoolLinear) {
  const Tensor4 p = rnd(Shape{2, 3, 1, 1}, 30);
  expect_gradcheck(
      [&](Tape&, std::span<const Var> v) {
        const Var s = ad::sigmoid(v[0]) * v[0];
        const Var pooled = ad::global_avg_pool(ad::relu(s + v[0]));
        return ad::weighted_sum(ad::linear(pooled, v[1], v[2]), p);
      },
      {named("x", rnd(Shape{2, 4, 3, 3}, 31)), named("w", rnd(Shape{3, 4, 1, 1}, 32)),
       named("b", rnd(Shape{1, 3, 1, 1}, 33))});

  const Tensor4 q = rnd(Shape{3, 1, 2, 4}, 34);
  expect_gradcheck([&](Tape&, std::span<const Var> v) { return ad::weighted_sum(ad::batched_matmul(v[0], v[1]), q); },
                   {named("a", rnd(Shape{3, 1, 2, 5}, 35)), named("b", rnd(Shape{3, 1, 5, 4}, 36))});
}

TEST(GradCheck, Normalizations) {
  const Tensor4 p = rnd(Shape{3, 2, 2, 3}, 40);
  const std::vector<NamedTensor> params{named("x", rnd(Shape{3, 2, 2, 3}, 41, -2.0, 2.0)),
                                        named("gamma", rnd(Shape{1, 2, 1, 1}, 42, 0.5, 1.5)),
                                        named("beta", rnd(Shape{1, 2, 1, 1}, 43))};
  expect_gradcheck(
      [&](Tape&, std::span<const Var> v) { return ad::weighted_sum(ad::batchnorm_train(v[0], v[1], v[2], 1e-5), p); },
      params);
  expect_gradcheck(
      [&](Tape&, std::span<const Var> v) { return ad::weighted_sum(ad::layernorm_channels(v[0], v[1], v[2], 1e-5), p); },
      params);
  const Tensor4 mean = rnd(Shape{1, 2, 1, 1}, 44), var = rnd(Shape{1, 2, 1, 1}, 45, 0.5, 2.0);
  expect_gradcheck(
      [&](Tape&, std::span<const Var> v) {
        return ad::weighted_sum(ad::batchnorm_infer(v[0], v[1], v[2], mean, var, 1e-5), p);
      },
      params);
}

TEST(GradCheck, SpaceToDepthAndFuse) {
  const Tensor4 p = rnd(Shape{1, 8, 2, 2}, 50);
  expect_gradcheck([&](Tape&, std::span<const Var> v) { return ad::weighted_sum(ad::space_to_depth(v[0], 2), p); },
                   {named("x", rnd(Shape{1, 2, 4, 4}, 51))});

  const Tensor4 q = rnd(Shape{2, 4, 3, 3}, 52);
  expect_gradcheck(
      [&](Tape&, std::span<const Var> v) {
        const std::vector<Var> branches{v[0], v[1], v[2]};
        return ad::weighted_sum(ad::spatial_fuse(branches, ad::sigmoid(v[3]), 2), q);
      },
      {named("b0", rnd(Shape{2, 4, 3, 3}, 53)), named("b1", rnd(Shape{2, 4, 3, 3}, 54)),
       named("b2", rnd(Shape{2, 4, 3, 3}, 55)), named("gates", rnd(Shape{2, 6, 3, 3}, 56))});
}

TEST(CrossEntropy, GradientIsSoftmaxMinusOneHotOverBatch) {
  const Tensor4 logits = rnd(Shape{3, 4, 1, 1}, 60, -3.0, 3.0);
  const std::vector<int> labels{2, 0, 3};
  Tape tape;
  const Var z = tape.leaf(logits);
  const Tensor4 g = tape.backward(ad::cross_entropy(z, labels))[z];
  for (std::size_t n = 0; n < 3; ++n) {
    double denom = 0.0;
    for (std::size_t k = 0; k < 4; ++k) denom += std::exp(logits(n, k, 0, 0));
    for (std::size_t k = 0; k < 4; ++k) {
      const double want = (std::exp(logits(n, k, 0, 0)) / denom - (static_cast<int>(k) == labels[n] ? 1.0 : 0.0)) / 3.0;
      EXPECT_NEAR(g(n, k, 0, 0), want, 1e-12);
    }
  }
  const GradCheckReport r = grad_check(
      [&](Tape&, std::span<const Var> v) { return ad::cross_entropy(v[0], labels); }, {named("logits", logits)});
  EXPECT_LT(r.max_rel_err(), 1e-6);
}

TEST(CrossEntropy, RejectsBadLabels) {
  Tape tape;
  const Var z = tape.leaf(Tensor4(Shape{2, 3, 1, 1}));
  EXPECT_THROW((void)ad::cross_entropy(z, {0, 3}), std::out_of_range);
  EXPECT_THROW((void)ad::cross_entropy(z, {-1, 0}), std::out_of_range);
  EXPECT_THROW((void)ad::cross_entropy(z, {0}), DimensionError);
}

TEST(GradCheck, FlagsAWrongBackward) {
  // Records y = 3x but claims dy/dx = 2.
  auto broken = [](Tape&, std::span<const Var> v) {
    const Var x = v[0];
    const std::size_t ix = x.id;
    const Var y = x.tape->record(OpKind::Scale, {x}, scsc::scale(x.value(), 3.0),
                                 [ix](const Tape& t, const Tensor4& g, auto& grads) {
                                   t.accumulate(grads, ix, scsc::scale(g, 2.0));
                                 });
    return ad::sum(y);
  };
  const GradCheckReport r = grad_check(broken, {named("x", rnd(Shape{1, 1, 2, 2}, 70))});
  EXPECT_FALSE(r.passed());
  EXPECT_NEAR(r.max_rel_err(), 1.0 / 3.0, 1e-6);
}

TEST(GradCheck, SubsamplesLargeTensors) {
  GradCheckOptions opts;
  opts.max_elements = 5;
  const GradCheckReport r =
      grad_check([](Tape&, std::span<const Var> v) { return ad::sum(v[0] * v[0]); },
                 {named("x", rnd(Shape{1, 2, 8, 8}, 80))}, 1e-5, 1e-6, opts);
  ASSERT_EQ(r.entries.size(), 1u);
  EXPECT_EQ(r.entries[0].checked, 5u);
  EXPECT_TRUE(r.passed());
}
