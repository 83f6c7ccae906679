// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "largo/nn_ops.hpp"
#include "oracles.hpp"

using namespace largo;
using namespace largo::ad;

namespace {

/// Random values kept at least `gap` away from zero (for kinked primitives).
DenseTensor away_from_zero(RngState& rng, Shape s, double gap = 0.05) {
  DenseTensor t(std::move(s));
  for (auto& v : t.data()) {
    const double mag = rng.uniform(gap, 1.0);
    v = rng.uniform() < 0.5 ? -mag : mag;
  }
  return t;
}

/// Scalar probe: sum(weights * f(...)) with fixed random weights, so every
/// output entry contributes a distinct amount to the gradient.
Var probe(Var y, std::uint64_t seed) {
  RngState rng(seed);
  Var w = y.tape->constant(oracle::random_tensor(rng, y.shape()));
  return sum(mul(y, w));
}

double check(const TapeFunction& f, std::vector<DenseTensor> params, double h = 1e-4) {
  RngState rng(77);
  return check_gradients(f, std::move(params), h, rng).max_rel_err;
}

}  // namespace

TEST(Tape, AddOfSelfDoublesGradient) {
  Tape t;
  Var x = t.leaf(DenseTensor({2, 2}, 3.0));
  Var y = add(x, x);
  t.backward(sum(y));
  EXPECT_EQ(x.grad(), DenseTensor({2, 2}, 2.0));
}

TEST(Tape, ContractionGradientMatchesHandCase) {
  Tape t;
  Var w = t.leaf(DenseTensor({2, 2}, std::vector<double>{1, 2, 3, 4}));
  Var x = t.leaf(DenseTensor({2}, std::vector<double>{5, 7}));
  t.backward(sum(matmul(w, x)));
  // d sum(Wx) / dW = ones x^T.
  EXPECT_EQ(w.grad(), DenseTensor({2, 2}, std::vector<double>{5, 7, 5, 7}));
  EXPECT_EQ(x.grad(), DenseTensor({2}, std::vector<double>{4, 6}));
}

TEST(Tape, ConstantLossGivesZeroGrads) {
  Tape t;
  Var x = t.leaf(DenseTensor({3}, 1.0));
  Var c = t.constant(DenseTensor::scalar(4.0));
  (void)x;
  t.backward(c);
  EXPECT_EQ(x.grad(), DenseTensor({3}, 0.0));
}

TEST(Tape, SumOfLeafGivesOnes) {
  Tape t;
  Var x = t.leaf(DenseTensor({2, 3}, 0.5));
  Var unused = t.leaf(DenseTensor({4}, 1.0));
  t.backward(sum(x));
  EXPECT_EQ(x.grad(), DenseTensor({2, 3}, 1.0));
  EXPECT_EQ(unused.grad(), DenseTensor({4}, 0.0));
}

TEST(Tape, NonScalarLossIsRejected) {
  Tape t;
  Var x = t.leaf(DenseTensor({2}, 1.0));
  EXPECT_THROW(t.backward(x), ContractError);
}

TEST(Tape, ShapeMismatchAtRecordTime) {
  Tape t;
  Var a = t.leaf(DenseTensor({2}, 1.0));
  Var b = t.leaf(DenseTensor({3}, 1.0));
  EXPECT_THROW(add(a, b), DimensionError);
}

TEST(Tape, GradientAccumulationIsAdditive) {
  RngState rng(3);
  Tape t;
  Var x = t.leaf(oracle::random_tensor(rng, {4, 3}));
  Var y = t.leaf(oracle::random_tensor(rng, {3, 2}));
  Var l1 = sum(matmul(x, y));
  Var l2 = sum(mul(x, x));
  t.backward(add(l1, l2));
  const DenseTensor gx = x.grad(), gy = y.grad();
  t.zero_grads();
  t.backward(l1);
  DenseTensor sx = x.grad(), sy = y.grad();
  t.zero_grads();
  t.backward(l2);
  sx += x.grad();
  sy += y.grad();
  EXPECT_LE(max_abs_diff(gx, sx), 1e-12);
  EXPECT_LE(max_abs_diff(gy, sy), 1e-12);
}

TEST(GradCheck, QuadraticIsExact) {
  RngState rng(5);
  auto f = [](Tape&, std::span<const Var> p) { return sum(mul(p[0], p[0])); };
  EXPECT_LE(check(f, {oracle::random_tensor(rng, {7, 3})}), 1e-6);
}

TEST(GradCheck, RejectsBadStepAndNonFinite) {
  RngState rng(5);
  auto f = [](Tape&, std::span<const Var> p) { return sum(p[0]); };
  EXPECT_THROW(check_gradients(f, {DenseTensor({2}, 1.0)}, 1.0, rng), ParameterError);
  auto bad = [](Tape&, std::span<const Var> p) { return sum(div(p[0], p[0])); };
  EXPECT_THROW(check_gradients(bad, {DenseTensor({2}, 0.0)}, 1e-4, rng), EvaluationError);
}

TEST(GradCheck, LeakyReluAwayFromKink) {
  RngState rng(6);
  auto f = [](Tape&, std::span<const Var> p) { return probe(leaky_relu(p[0], 0.01), 1); };
  // Inputs satisfy |x| > 10h so no perturbation crosses the kink.
  EXPECT_LE(check(f, {away_from_zero(rng, {5, 6}, 1e-3)}), 1e-5);
  Tape t;
  EXPECT_DOUBLE_EQ(leaky_relu(t.constant(DenseTensor::scalar(-1.0)), 0.01).value()[0], -0.01);
}

TEST(GradCheck, ElementwisePrimitives) {
  RngState rng(7);
  auto a = oracle::random_tensor(rng, {3, 4}), b = oracle::random_tensor(rng, {3, 4}, 0.5, 2.0);
  auto f = [](Tape&, std::span<const Var> p) {
    Var x = add(mul(p[0], p[1]), div(p[0], p[1]));
    x = sub(scale(x, 0.7), add_scalar(p[1], 2.0));
    return probe(x, 2);
  };
  EXPECT_LE(check(f, {a, b}), 1e-5);
}

TEST(GradCheck, StructuralPrimitives) {
  RngState rng(8);
  auto a = oracle::random_tensor(rng, {3, 4, 2}), b = oracle::random_tensor(rng, {2, 4, 2});
  auto f = [](Tape&, std::span<const Var> p) {
    Var c = concat({p[0], p[1]});             // [5, 4, 2]
    Var q = permute(c, {2, 0, 1});             // [2, 5, 4]
    Var r = reshape(q, {10, 4});
    Var s = select_row(r, 3);                  // [4]
    return add(probe(sum_trailing(r), 3), probe(s, 4));
  };
  EXPECT_LE(check(f, {a, b}), 1e-5);
}

TEST(GradCheck, ContractionPrimitive) {
  RngState rng(9);
  auto x = oracle::random_tensor(rng, {3, 4, 5}), y = oracle::random_tensor(rng, {5, 2, 3});
  auto f = [](Tape&, std::span<const Var> p) { return probe(contract(p[0], p[1], {{2, 0}, {0, 2}}), 5); };
  EXPECT_LE(check(f, {x, y}), 1e-5);
  auto full = [](Tape&, std::span<const Var> p) { return contract(p[0], p[1], {{0, 1}, {1, 0}}); };
  EXPECT_LE(check(full, {oracle::random_tensor(rng, {3, 2}), oracle::random_tensor(rng, {2, 3})}), 1e-5);
}

TEST(GradCheck, ConvolutionPrimitives) {
  RngState rng(10);
  for (std::size_t stride : {1u, 2u}) {
    auto x = oracle::random_tensor(rng, {3, 6, 5});
    auto w = oracle::random_tensor(rng, {3, 4, 9});
    auto b = oracle::random_tensor(rng, {4});
    const auto g = ConvGeometry::cube(2, 3, stride, 1);
    auto f = [g](Tape&, std::span<const Var> p) { return probe(conv(p[0], p[1], p[2], g), 6); };
    EXPECT_LE(check(f, {x, w, b}), 1e-5) << "stride " << stride;
  }
  auto x = oracle::random_tensor(rng, {4, 3, 3});
  auto w = oracle::random_tensor(rng, {4, 2, 4});
  auto b = oracle::random_tensor(rng, {2});
  const auto g = ConvGeometry::cube(2, 2, 2, 0);
  auto f = [g](Tape&, std::span<const Var> p) {
    return probe(conv_transposed(p[0], p[1], p[2], g), 7);
  };
  EXPECT_LE(check(f, {x, w, b}), 1e-5);
}

TEST(GradCheck, Conv3dPrimitive) {
  RngState rng(11);
  auto x = oracle::random_tensor(rng, {2, 4, 3, 4});
  auto w = oracle::random_tensor(rng, {2, 3, 27});
  const auto g = ConvGeometry::cube(3, 3, 1, 1);
  auto f = [g](Tape&, std::span<const Var> p) { return probe(conv(p[0], p[1], Var{}, g), 8); };
  EXPECT_LE(check(f, {x, w}), 1e-5);
}

TEST(GradCheck, NormalizationAndSoftmax) {
  RngState rng(12);
  auto x = oracle::random_tensor(rng, {3, 5, 4});
  auto gamma = oracle::random_tensor(rng, {3}), beta = oracle::random_tensor(rng, {3});
  auto f = [](Tape&, std::span<const Var> p) {
    Var y = channel_affine(instance_norm(p[0]), p[1], p[2]);
    return add(probe(softmax(y), 9), probe(log_softmax(y), 10));
  };
  EXPECT_LE(check(f, {x, gamma, beta}), 1e-5);
  auto ln = [](Tape&, std::span<const Var> p) { return probe(layer_norm(p[0]), 11); };
  EXPECT_LE(check(ln, {oracle::random_tensor(rng, {6, 4})}), 1e-5);
}

TEST(GradCheck, FactorizedSlices) {
  RngState rng(13);
  auto A = oracle::random_tensor(rng, {3, 4}), B = oracle::random_tensor(rng, {5, 4});
  auto C = oracle::random_tensor(rng, {6, 4}), D = oracle::random_tensor(rng, {9, 4});
  auto f = [](Tape&, std::span<const Var> p) { return probe(cp_slice(p[0], p[1], p[2], p[3], 2), 12); };
  EXPECT_LE(check(f, {A, B, C, D}), 1e-5);
  auto lin = [](Tape&, std::span<const Var> p) { return probe(cp_slice(p[0], p[1], p[2], Var{}, 3), 13); };
  EXPECT_LE(check(lin, {A, B, C}), 1e-5);

  auto TA = oracle::random_tensor(rng, {3, 3}), G = oracle::random_tensor(rng, {3, 2, 2, 4});
  auto TB = oracle::random_tensor(rng, {5, 2}), TC = oracle::random_tensor(rng, {6, 2});
  auto TD = oracle::random_tensor(rng, {4, 4});
  auto tf = [](Tape&, std::span<const Var> p) {
    return probe(tucker_slice(p[0], p[1], p[2], p[3], p[4], 1), 14);
  };
  EXPECT_LE(check(tf, {TA, G, TB, TC, TD}), 1e-5);
}

TEST(Primitives, CpSliceMatchesKernelReconstruction) {
  RngState rng(14);
  LayerDims d{7, 4, 5, 9, true};
  auto k = cp_init(d, 6, rng);
  for (auto& v : k.A.data()) v = rng.uniform(-1, 1);
  Tape t;
  for (std::size_t m = 1; m <= 7; ++m) {
    Var w = cp_slice(t.constant(k.A), t.constant(k.B), t.constant(k.C), t.constant(*k.D), m);
    EXPECT_LE(relative_error(w.value(), cp_reconstruct_slice(k, m)), 1e-12);
  }
}

TEST(Primitives, InstanceNormConstantChannelYieldsBeta) {
  Tape t;
  Var x = t.constant(DenseTensor({1, 4}, 3.0));
  Var y = channel_affine(instance_norm(x), t.constant(DenseTensor({1}, 2.0)),
                         t.constant(DenseTensor({1}, 0.25)));
  for (double v : y.value().data()) EXPECT_DOUBLE_EQ(v, 0.25);
  EXPECT_THROW(instance_norm(t.constant(DenseTensor({2, 1}, 1.0))), DegenerateStatisticsError);
}

TEST(Primitives, InstanceNormStandardizes) {
  RngState rng(15);
  auto x = oracle::random_tensor(rng, {2, 50}, -3.0, 5.0);
  Tape t;
  Var y = instance_norm(t.constant(x));
  for (std::size_t c = 0; c < 2; ++c) {
    double mu = 0.0, var = 0.0;
    for (std::size_t j = 0; j < 50; ++j) mu += x.at(c, j);
    mu /= 50;
    for (std::size_t j = 0; j < 50; ++j) var += (x.at(c, j) - mu) * (x.at(c, j) - mu);
    var /= 50;
    for (std::size_t j = 0; j < 50; ++j)
      EXPECT_NEAR(y.value().at(c, j), (x.at(c, j) - mu) / std::sqrt(var + 1e-5), 1e-12);
  }
  // Standardized input passes through (up to eps).
  Var z = instance_norm(y);
  EXPECT_LE(relative_error(z.value(), y.value()), 1e-5);
}
