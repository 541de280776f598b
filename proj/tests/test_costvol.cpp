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
#include "oracles.hpp"
#include "test_util.hpp"

#include <sweepstack/costvol.hpp>

#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

using namespace sweepstack;

namespace {

// Variance cost of scalar features [1,1,1] per view; masks all valid.
double scalar_cost(const std::vector<double>& values) {
  Tape<double> tape(false);
  auto ref = tape.constant(Tensor<double>({1, 1, 1}, {values[0]}));
  std::vector<Var<double>> warped;
  std::vector<Tensor<double>> masks;
  for (std::size_t i = 1; i < values.size(); ++i) {
    warped.push_back(tape.constant(Tensor<double>({1, 1, 1, 1}, {values[i]})));
    masks.emplace_back(Shape{1, 1, 1}, 1.0);
  }
  return variance_cost(ref, std::span<const Var<double>>(warped), std::span<const Tensor<double>>(masks))
      .data.value()[0];
}

}  // namespace

TEST(CostVolume, BaseIntervalInExpectedRange) {
  const CascadeConfig cfg;
  const double cm = base_interval(cfg) * 100.0;
  EXPECT_GE(cm, 2.45);
  EXPECT_LE(cm, 2.65);
  EXPECT_NEAR(base_interval(cfg), 4.9 / 191.0, 1e-15);
}

TEST(CostVolume, StageSpacingAndShrinkingWindows) {
  const CascadeConfig cfg;
  double prev = std::numeric_limits<double>::infinity();
  for (int s = 0; s < 3; ++s) {
    EXPECT_DOUBLE_EQ(stage_interval(cfg, s), cfg.interval_ratios[s] * base_interval(cfg));
    const double width = stage_interval(cfg, s) * cfg.hypothesis_counts[s];
    EXPECT_LT(width, prev);
    prev = width;
  }
  CascadeConfig bad;
  bad.num_bins = 1;
  EXPECT_THROW(base_interval(bad), std::invalid_argument);
}

TEST(CostVolume, DuplicateViewsHaveZeroCost) {
  std::mt19937_64 rng(1);
  const Tensor<double> f = testutil::random_tensor<double>({4, 3, 5}, rng);
  Tape<double> tape(false);
  auto ref = tape.constant(f);
  Tensor<double> w({4, 2, 3, 5});
  for (int c = 0; c < 4; ++c)
    for (int t = 0; t < 2; ++t)
      for (int i = 0; i < 15; ++i) w[(c * 2 + t) * 15 + i] = f[c * 15 + i];
  std::vector<Var<double>> warped{tape.constant(w), tape.constant(w)};
  std::vector<Tensor<double>> masks(2, Tensor<double>({2, 3, 5}, 1.0));
  const auto cost = variance_cost(ref, std::span<const Var<double>>(warped), std::span<const Tensor<double>>(masks));
  for (double v : cost.data.value().values()) EXPECT_EQ(v, 0.0);
}

TEST(CostVolume, ThreeViewScalarCase) {
  EXPECT_NEAR(scalar_cost({0.0, 1.0, 2.0}), 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(scalar_cost({0.0, 1.0, 2.0}), oracle::variance({0.0, 1.0, 2.0}), 1e-15);
}

TEST(CostVolume, PermutationInvariance) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(-2, 2);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> v(5);
    for (auto& x : v) x = u(rng);
    const double base = scalar_cost(v);
    EXPECT_NEAR(base, oracle::variance(v), 1e-12);
    std::shuffle(v.begin(), v.end(), rng);
    EXPECT_NEAR(scalar_cost(v), base, 1e-6);
  }
}

TEST(CostVolume, MaskedViewsDropOutOfVariance) {
  Tape<double> tape(false);
  auto ref = tape.constant(Tensor<double>({1, 1, 2}, {0.0, 0.0}));
  std::vector<Var<double>> warped{tape.constant(Tensor<double>({1, 1, 1, 2}, {1.0, 1.0})),
                                  tape.constant(Tensor<double>({1, 1, 1, 2}, {5.0, 5.0}))};
  std::vector<Tensor<double>> masks{Tensor<double>({1, 1, 2}, {1.0, 0.0}), Tensor<double>({1, 1, 2}, {0.0, 0.0})};
  const auto cost = variance_cost(ref, std::span<const Var<double>>(warped), std::span<const Tensor<double>>(masks));
  EXPECT_NEAR(cost.data.value()[0], 0.25, 1e-15);  // views {0, 1}
  EXPECT_EQ(cost.data.value()[1], 0.0);            // reference alone
  EXPECT_EQ(cost.valid_count.at(0, 0, 0), 2);
  EXPECT_EQ(cost.valid_count.at(0, 0, 1), 1);
}

TEST(CostVolume, OneHotRegressionIsExact) {
  Tape<double> tape(false);
  const CascadeConfig cfg;
  const auto hyps = make_initial_hypotheses(tape, cfg, 2, 3);
  const int t = hyps.values.dim(0);
  Tensor<double> p({t, 2, 3});
  for (int i = 0; i < 6; ++i) p[static_cast<std::size_t>((i * 7) % t) * 6 + i] = 1.0;
  const Tensor<double> d = regress_depth(ProbabilityVolume<double>{tape.constant(p)}, hyps).value();
  for (int i = 0; i < 6; ++i) EXPECT_EQ(d[i], hyps.values.value()[static_cast<std::size_t>((i * 7) % t) * 6 + i]);
}

TEST(CostVolume, ProbabilitiesNormalized) {
  std::mt19937_64 rng(3);
  Tape<double> tape(false);
  const auto pv = probabilities_from_logits(tape.constant(testutil::random_tensor<double>({9, 4, 5}, rng, -20, 20)));
  for (int i = 0; i < 20; ++i) {
    double s = 0;
    for (int t = 0; t < 9; ++t) {
      s += pv.probs.value()[t * 20 + i];
      EXPECT_GE(pv.probs.value()[t * 20 + i], 0.0);
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(CostVolume, InitialHypothesesCoverRange) {
  Tape<double> tape(false);
  const CascadeConfig cfg;
  const auto h = make_initial_hypotheses(tape, cfg, 2, 2);
  ASSERT_EQ(h.values.dim(0), cfg.hypothesis_counts[0]);
  EXPECT_DOUBLE_EQ(h.interval, stage_interval(cfg, 0));
  for (int t = 1; t < h.values.dim(0); ++t)
    EXPECT_NEAR(h.values.value()[t * 4] - h.values.value()[(t - 1) * 4], h.interval, 1e-12);
  EXPECT_GE(h.values.value()[0], cfg.d_min - 1e-12);
  EXPECT_LE(h.values.value()[(h.values.dim(0) - 1) * 4], cfg.d_max + 1e-12);
}

TEST(CostVolume, WindowShiftsInsideRange) {
  Tape<double> tape(false);
  auto center = tape.constant(Tensor<double>({1, 3}, {0.1, 2.0, 5.0}));
  const Tensor<double> w = window_hypotheses(center, 8, 0.1, 0.1, 5.0).value();
  for (int i = 0; i < 3; ++i) {
    for (int t = 1; t < 8; ++t) EXPECT_NEAR(w[t * 3 + i] - w[(t - 1) * 3 + i], 0.1, 1e-12);
    EXPECT_GE(w[i], 0.1 - 1e-12);
    EXPECT_LE(w[7 * 3 + i], 5.0 + 1e-12);
  }
  EXPECT_NEAR(w[3 * 3 + 1] + w[4 * 3 + 1], 4.0, 1e-12);  // centered on 2.0
}

TEST(CostVolume, CascadeRejectsSingleView) {
  Tape<double> tape(false);
  std::vector<FeaturePyramid<double>> pyr(1);
  std::vector<Camera> cams(1);
  ParameterStore<double> p;
  EXPECT_THROW(run_cascade(std::span<const FeaturePyramid<double>>(pyr), std::span<const Camera>(cams),
                           CascadeConfig{}, p),
               std::invalid_argument);
}
