/*
 * Copyright 2026 The sweepstack Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#include "test_util.hpp"

#include <sweepstack/autodiff.hpp>
#include <sweepstack/gradcheck.hpp>
#include <sweepstack/params.hpp>

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace sweepstack;

TEST(Tape, ChainRuleAndFanOut) {
  // f = sum((a*b) + a), df/da = b + 1, df/db = a.
  Tape<double> tape;
  auto a = tape.leaf(Tensor<double>({3}, {1.0, 2.0, 3.0}));
  auto b = tape.leaf(Tensor<double>({3}, {4.0, 5.0, 6.0}));
  auto f = ad::sum(ad::add(ad::mul(a, b), a));
  EXPECT_DOUBLE_EQ(f.value()[0], 4 + 10 + 18 + 6);
  tape.backward(f);
  EXPECT_EQ(tape.grad(a.id), Tensor<double>({3}, {5.0, 6.0, 7.0}));
  EXPECT_EQ(tape.grad(b.id), Tensor<double>({3}, {1.0, 2.0, 3.0}));
}

TEST(Tape, ConstantsAndDetachBlockGradient) {
  Tape<double> tape;
  auto a = tape.leaf(Tensor<double>({2}, {1.0, 2.0}));
  auto c = tape.constant(Tensor<double>({2}, {3.0, 3.0}));
  auto f = ad::sum(ad::add(ad::mul(ad::detach(a), c), a));
  EXPECT_FALSE(tape.requires_grad(c));
  tape.backward(f);
  EXPECT_EQ(tape.grad(a.id), Tensor<double>({2}, {1.0, 1.0}));
}

TEST(Tape, NoGradTapeRecordsNoGradients) {
  ParameterStore<double> store;
  store.add("w", Tensor<double>({2}, {1.0, 2.0}));
  Tape<double> tape(false);
  auto w = tape.param(store, "w");
  EXPECT_FALSE(tape.requires_grad(w));
  auto f = ad::sum(ad::mul(w, w));
  EXPECT_FALSE(tape.requires_grad(f));
  EXPECT_DOUBLE_EQ(f.value()[0], 5.0);
}

TEST(Tape, SharedParameterAccumulates) {
  ParameterStore<double> store;
  store.add("w", Tensor<double>({1}, {3.0}));
  Tape<double> tape;
  auto w1 = tape.param(store, "w");
  auto w2 = tape.param(store, "w");
  EXPECT_EQ(w1.id, w2.id);
  tape.backward(ad::sum(ad::mul(w1, w2)));
  const auto grads = tape.parameter_gradients();
  EXPECT_DOUBLE_EQ(grads.at("w")[0], 6.0);
}

TEST(Tape, BackwardSeedShapeChecked) {
  Tape<double> tape;
  auto a = tape.leaf(Tensor<double>({2}, {1.0, 2.0}));
  EXPECT_THROW(tape.backward(a, Tensor<double>({3})), ShapeError);
}

TEST(Ops, ShapeMismatchThrows) {
  Tape<double> tape;
  auto a = tape.leaf(Tensor<double>({2, 3}));
  auto b = tape.leaf(Tensor<double>({3, 2}));
  EXPECT_THROW(ad::add(a, b), ShapeError);
  EXPECT_THROW(ad::matmul(a, a), ShapeError);
  EXPECT_NO_THROW(ad::matmul(a, b));
}

TEST(Ops, SoftmaxRowsSumToOne) {
  std::mt19937_64 rng(2);
  Tape<double> tape;
  auto x = tape.constant(testutil::random_tensor<double>({5, 7}, rng, -30, 30));
  for (int axis : {0, 1}) {
    const Tensor<double> p = ad::softmax(x, axis).value();
    const int outer = axis == 0 ? 7 : 5, inner = axis == 0 ? 5 : 7;
    for (int o = 0; o < outer; ++o) {
      double s = 0;
      for (int i = 0; i < inner; ++i) s += axis == 0 ? p.at(i, o) : p.at(o, i);
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Ops, LayerNormStatistics) {
  std::mt19937_64 rng(4);
  Tape<double> tape;
  auto x = tape.constant(testutil::random_tensor<double>({4, 16}, rng, -3, 5));
  auto g = tape.constant(Tensor<double>({16}, 1.0));
  auto b = tape.constant(Tensor<double>({16}, 0.0));
  const Tensor<double> y = ad::layer_norm(x, g, b).value();
  for (int r = 0; r < 4; ++r) {
    double m = 0, v = 0;
    for (int c = 0; c < 16; ++c) m += y.at(r, c);
    m /= 16;
    for (int c = 0; c < 16; ++c) v += (y.at(r, c) - m) * (y.at(r, c) - m);
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v / 16, 1.0, 1e-6);
  }
}

TEST(Ops, Conv2dMatchesDirectSum) {
  std::mt19937_64 rng(6);
  const Tensor<double> x = testutil::random_tensor<double>({2, 5, 6}, rng);
  const Tensor<double> w = testutil::random_tensor<double>({3, 2, 3, 3}, rng);
  const Tensor<double> b = testutil::random_tensor<double>({3}, rng);
  Tape<double> tape(false);
  for (int stride : {1, 2}) {
    const Tensor<double> y =
        ad::conv2d(tape.constant(x), tape.constant(w), tape.constant(b), stride, 1).value();
    const int ho = (5 + 2 - 3) / stride + 1, wo = (6 + 2 - 3) / stride + 1;
    ASSERT_EQ(y.shape(), (Shape{3, ho, wo}));
    for (int o = 0; o < 3; ++o)
      for (int i = 0; i < ho; ++i)
        for (int j = 0; j < wo; ++j) {
          double s = b[o];
          for (int c = 0; c < 2; ++c)
            for (int ki = 0; ki < 3; ++ki)
              for (int kj = 0; kj < 3; ++kj) {
                const int yi = i * stride + ki - 1, xj = j * stride + kj - 1;
                if (yi < 0 || yi >= 5 || xj < 0 || xj >= 6) continue;
                s += w.at(o, c, ki, kj) * x.at(c, yi, xj);
              }
          EXPECT_NEAR(y.at(o, i, j), s, 1e-12);
        }
  }
}

TEST(Ops, Conv3dMatchesDirectSum) {
  std::mt19937_64 rng(8);
  const Tensor<double> x = testutil::random_tensor<double>({2, 3, 4, 5}, rng);
  const Tensor<double> w = testutil::random_tensor<double>({2, 2, 3, 3, 3}, rng);
  Tape<double> tape(false);
  const Tensor<double> y = ad::conv3d(tape.constant(x), tape.constant(w), Var<double>{}).value();
  ASSERT_EQ(y.shape(), x.shape());
  const auto X = [&](int c, int d, int h, int ww) {
    if (d < 0 || d >= 3 || h < 0 || h >= 4 || ww < 0 || ww >= 5) return 0.0;
    return x[((c * 3 + d) * 4 + h) * 5 + ww];
  };
  for (int o = 0; o < 2; ++o)
    for (int d = 0; d < 3; ++d)
      for (int h = 0; h < 4; ++h)
        for (int ww = 0; ww < 5; ++ww) {
          double s = 0;
          for (int c = 0; c < 2; ++c)
            for (int a = 0; a < 3; ++a)
              for (int bb = 0; bb < 3; ++bb)
                for (int e = 0; e < 3; ++e)
                  s += w[(((o * 2 + c) * 3 + a) * 3 + bb) * 3 + e] * X(c, d + a - 1, h + bb - 1, ww + e - 1);
          EXPECT_NEAR(y[((o * 3 + d) * 4 + h) * 5 + ww], s, 1e-12);
        }
}

TEST(Ops, SmoothL1ValuesAndGradientBound) {
  Tape<double> tape;
  auto p = tape.leaf(Tensor<double>({4}, {0.01, 0.1, -0.1, 0.02}));
  const Tensor<double> target({4}, 0.0);
  const Tensor<double> mask({4}, {1, 1, 1, 0});
  auto l = ad::smooth_l1(p, target, mask, 0.02);
  EXPECT_NEAR(l.value()[0], (0.0025 + 0.09 + 0.09) / 3, 1e-15);
  tape.backward(l);
  for (double g : tape.grad(p.id).values()) EXPECT_LE(std::abs(g), 1.0);
  EXPECT_EQ(tape.grad(p.id)[3], 0.0);
}

TEST(Ops, CrossEntropyIgnoresLabels) {
  Tape<double> tape;
  auto z = tape.leaf(Tensor<double>({2, 3}, {0.0, 1.0, 2.0, 0.0, 1.0, 2.0}));
  const std::vector<int> labels{0, 255, 1};
  auto l = ad::cross_entropy(z, std::span<const int>(labels), 255);
  // Pixel 0: logits (0,0) -> log 2. Pixel 2: logits (2,2) -> log 2.
  EXPECT_NEAR(l.value()[0], std::log(2.0), 1e-12);
  const std::vector<int> all_ignored{255, 255, 255};
  EXPECT_EQ(ad::cross_entropy(z, std::span<const int>(all_ignored), 255).value()[0], 0.0);
}

TEST(Ops, BilinearSampleOutsideIsZero) {
  Tape<double> tape;
  auto f = tape.constant(Tensor<double>({1, 2, 2}, {1, 2, 3, 4}));
  auto c = tape.constant(Tensor<double>({3, 2}, {0.5, 0.5, -0.5, 0.0, 1.0, 1.5}));
  const Tensor<double> y = ad::bilinear_sample(f, c).value();
  EXPECT_NEAR(y[0], 2.5, 1e-15);
  EXPECT_EQ(y[1], 0.0);
  EXPECT_EQ(y[2], 0.0);
}

TEST(AdamW, FirstStepMovesByLearningRate) {
  ParameterStore<double> store;
  store.add("w", Tensor<double>({2}, {1.0, -1.0}));
  AdamWConfig cfg;
  cfg.lr = 0.1;
  cfg.weight_decay = 0.0;
  store.adamw_step({{"w", Tensor<double>({2}, {3.0, -0.5})}}, cfg);
  EXPECT_NEAR(store.get("w")[0], 0.9, 1e-6);
  EXPECT_NEAR(store.get("w")[1], -0.9, 1e-6);
  EXPECT_EQ(store.step_count(), 1);
}

TEST(AdamW, DecoupledWeightDecay) {
  ParameterStore<double> store;
  store.add("w", Tensor<double>({1}, {2.0}));
  AdamWConfig cfg;
  cfg.lr = 0.1;
  cfg.weight_decay = 0.5;
  store.adamw_step({}, cfg);
  EXPECT_NEAR(store.get("w")[0], 2.0 * (1 - 0.05), 1e-12);
}

TEST(AdamW, NonFiniteGradientLeavesParametersUntouched) {
  ParameterStore<double> store;
  store.add("w", Tensor<double>({1}, {2.0}));
  EXPECT_THROW(store.adamw_step({{"w", Tensor<double>({1}, {NAN})}}, {}), NonFiniteGradient);
  EXPECT_EQ(store.get("w")[0], 2.0);
  EXPECT_EQ(store.step_count(), 0);
}

TEST(AdamW, MinimizesQuadratic) {
  ParameterStore<double> store;
  store.add("w", Tensor<double>({3}, {3.0, -2.0, 0.5}));
  AdamWConfig cfg;
  cfg.lr = 0.05;
  cfg.weight_decay = 0.0;
  for (int i = 0; i < 600; ++i) {
    Tape<double> tape;
    auto w = tape.param(store, "w");
    tape.backward(ad::sum(ad::mul(w, w)));
    store.adamw_step(tape.parameter_gradients(), cfg);
  }
  for (double v : store.get("w").values()) EXPECT_LT(std::abs(v), 1e-2);
}

TEST(Gradcheck, EveryPrimitiveBelowTolerance) {
  const auto results = primitive_gradchecks();
  EXPECT_GE(results.size(), 30u);
  for (const auto& r : results) {
    EXPECT_LT(r.max_rel_err, 1e-6) << r.op << " tensor " << r.tensor;
    EXPECT_GT(r.checked, 0u) << r.op;
  }
}
