// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "largo/losses.hpp"
#include "largo/optim.hpp"
#include "oracles.hpp"

using namespace largo;

namespace {

double value_of(const std::function<ad::Var(ad::Tape&)>& f) {
  ad::Tape t;
  return f(t).value()[0];
}

}  // namespace

TEST(Losses, CrossEntropyOfUniformLogitsIsLogC) {
  for (std::size_t C : {2u, 3u, 7u}) {
    DenseTensor logits({C, 4, 4}, 0.25);
    DenseTensor target({4, 4}, 1.0);
    const double v = value_of([&](ad::Tape& t) { return cross_entropy(t.leaf(logits), target); });
    EXPECT_NEAR(v, std::log(double(C)), 1e-14);
  }
}

TEST(Losses, CrossEntropyMatchesDirectFormula) {
  RngState rng(8);
  DenseTensor logits({3, 5});
  for (auto& v : logits.data()) v = 2.0 * rng.normal();
  DenseTensor target({5});
  for (std::size_t i = 0; i < 5; ++i) target[i] = double(rng.below(3));
  double want = 0.0;
  for (std::size_t i = 0; i < 5; ++i) {
    double z = 0.0;
    for (std::size_t c = 0; c < 3; ++c) z += std::exp(logits.at(c, i));
    want += std::log(z) - logits.at(std::size_t(target[i]), i);
  }
  want /= 5.0;
  EXPECT_NEAR(value_of([&](ad::Tape& t) { return cross_entropy(t.leaf(logits), target); }), want, 1e-13);
}

TEST(Losses, DiceMatchesDirectFormula) {
  RngState rng(9);
  DenseTensor logits({4, 3, 3});
  for (auto& v : logits.data()) v = rng.normal();
  DenseTensor target({3, 3});
  for (auto& v : target.data()) v = double(rng.below(4));
  const std::size_t P = 9;
  double mean = 0.0;
  for (std::size_t c = 0; c < 4; ++c) {
    double inter = 0.0, ps = 0.0, gs = 0.0;
    for (std::size_t i = 0; i < P; ++i) {
      double z = 0.0;
      for (std::size_t k = 0; k < 4; ++k) z += std::exp(logits[k * P + i]);
      const double p = std::exp(logits[c * P + i]) / z;
      const double g = std::size_t(target[i]) == c ? 1.0 : 0.0;
      inter += p * g, ps += p, gs += g;
    }
    mean += (2.0 * inter + 1e-5) / (ps + gs + 1e-5);
  }
  const double want = 1.0 - mean / 4.0;
  EXPECT_NEAR(value_of([&](ad::Tape& t) { return dice_loss(t.leaf(logits), target); }), want, 1e-13);
}

TEST(Losses, ConfidentCorrectPredictionDrivesBothLossesToZero) {
  DenseTensor target({2, 2});
  target[0] = 0, target[1] = 1, target[2] = 2, target[3] = 1;
  DenseTensor logits({3, 2, 2}, -40.0);
  for (std::size_t i = 0; i < 4; ++i) logits[std::size_t(target[i]) * 4 + i] = 40.0;
  EXPECT_LT(value_of([&](ad::Tape& t) { return seg_loss(t.leaf(logits), target); }), 1e-10);
}

TEST(Losses, AbsentClassWithNoPredictionScoresPerfectly) {
  // smoothing makes an empty class with empty prediction count as Dice 1
  DenseTensor target({4}, 0.0);
  DenseTensor logits({2, 4}, 0.0);
  for (std::size_t i = 0; i < 4; ++i) logits[i] = 60.0;
  EXPECT_LT(value_of([&](ad::Tape& t) { return dice_loss(t.leaf(logits), target); }), 1e-10);
}

TEST(Losses, GradientsMatchFiniteDifferences) {
  RngState rng(10);
  DenseTensor logits({3, 4, 4});
  for (auto& v : logits.data()) v = rng.normal();
  DenseTensor target({4, 4});
  for (auto& v : target.data()) v = double(rng.below(3));
  ad::Tape t;
  auto x = t.leaf(logits);
  t.backward(seg_loss(x, target));
  const DenseTensor g = t.grad(x.id);
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double h = 1e-6;
    DenseTensor lp = logits, lm = logits;
    lp[i] += h, lm[i] -= h;
    const double fd = (value_of([&](ad::Tape& tt) { return seg_loss(tt.leaf(lp), target); }) -
                       value_of([&](ad::Tape& tt) { return seg_loss(tt.leaf(lm), target); })) /
                      (2 * h);
    EXPECT_NEAR(g[i], fd, 1e-7);
  }
}

TEST(Losses, BadTargetsAreRejected) {
  ad::Tape t;
  auto x = t.leaf(DenseTensor({3, 2, 2}, 0.0));
  EXPECT_THROW(cross_entropy(x, DenseTensor({2, 2}, 3.0)), IndexError);
  EXPECT_THROW(cross_entropy(x, DenseTensor({2, 2}, -1.0)), IndexError);
  EXPECT_THROW(cross_entropy(x, DenseTensor({2, 2}, 0.5)), IndexError);
  EXPECT_THROW(dice_loss(x, DenseTensor({4}, 0.0)), DimensionError);
}

TEST(Optim, PlainGradientDescentWithoutMomentum) {
  NetworkState st;
  st.add("w", DenseTensor({2}, 1.0), ParamKind::dense_weight);
  SgdNesterov opt({0.1, 0.0, 0.0});
  DenseTensor g({2});
  g[0] = 2.0, g[1] = -1.0;
  opt.step(st, {{"w", g}});
  EXPECT_DOUBLE_EQ(st.value("w")[0], 0.8);
  EXPECT_DOUBLE_EQ(st.value("w")[1], 1.1);
}

TEST(Optim, NesterovMatchesHandRecurrence) {
  NetworkState st;
  st.add("w", DenseTensor({1}, 2.0), ParamKind::factor_a);
  const double lr = 0.05, mu = 0.9, wd = 0.01;
  SgdNesterov opt({lr, mu, wd});
  double p = 2.0, v = 0.0;
  for (int k = 0; k < 20; ++k) {
    const double grad = 3.0 * p - 1.0;  // d/dp of 1.5 p^2 - p
    opt.step(st, {{"w", DenseTensor({1}, grad)}});
    const double g = grad + wd * p;
    v = mu * v + g;
    p -= lr * (g + mu * v);
    EXPECT_DOUBLE_EQ(st.value("w")[0], p);
  }
}

TEST(Optim, DecayAppliesToWeightsOnly) {
  NetworkState st;
  st.add("f", DenseTensor({1}, 1.0), ParamKind::factor_b);
  st.add("c", DenseTensor({1}, 1.0), ParamKind::core);
  st.add("b", DenseTensor({1}, 1.0), ParamKind::bias);
  st.add("s", DenseTensor({1}, 1.0), ParamKind::norm_scale);
  SgdNesterov opt({0.5, 0.0, 0.1});
  GradientMap zero;
  for (auto k : {"f", "c", "b", "s"}) zero.emplace(k, DenseTensor({1}, 0.0));
  opt.step(st, zero);
  EXPECT_DOUBLE_EQ(st.value("f")[0], 0.95);
  EXPECT_DOUBLE_EQ(st.value("c")[0], 0.95);
  EXPECT_DOUBLE_EQ(st.value("b")[0], 1.0);
  EXPECT_DOUBLE_EQ(st.value("s")[0], 1.0);
}

TEST(Optim, ConvergesOnQuadraticBowl) {
  NetworkState st;
  st.add("x", DenseTensor({3}, 5.0), ParamKind::dense_weight);
  SgdNesterov opt({0.1, 0.9, 0.0});
  const double target[3] = {1.0, -2.0, 0.5};
  for (int k = 0; k < 300; ++k) {
    DenseTensor g({3});
    for (int i = 0; i < 3; ++i) g[i] = 2.0 * (st.value("x")[i] - target[i]);
    opt.step(st, {{"x", g}});
  }
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(st.value("x")[i], target[i], 1e-9);
}

TEST(Optim, ParametersWithoutGradientAreUntouched) {
  NetworkState st;
  st.add("a", DenseTensor({1}, 1.0), ParamKind::dense_weight);
  st.add("b", DenseTensor({1}, 1.0), ParamKind::dense_weight);
  SgdNesterov opt({0.1, 0.9, 0.5});
  opt.step(st, {{"a", DenseTensor({1}, 1.0)}});
  EXPECT_EQ(st.value("b")[0], 1.0);
  EXPECT_EQ(opt.velocity().count("b"), 0u);
}

TEST(Optim, Errors) {
  EXPECT_THROW(SgdNesterov({-0.1, 0.9, 0.0}), ConfigError);
  EXPECT_THROW(SgdNesterov({0.1, 1.0, 0.0}), ConfigError);
  EXPECT_THROW(SgdNesterov({0.1, 0.9, -1.0}), ConfigError);
  NetworkState st;
  st.add("a", DenseTensor({2}, 1.0), ParamKind::dense_weight);
  SgdNesterov opt({0.1, 0.9, 0.0});
  EXPECT_THROW(opt.step(st, {{"a", DenseTensor({3}, 1.0)}}), DimensionError);
  EXPECT_THROW(opt.step(st, {{"zz", DenseTensor({2}, 1.0)}}), BuildError);
}
