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

#include <sweepstack/train.hpp>

#include <gtest/gtest.h>

#include <cmath>

using namespace sweepstack;

namespace {

std::vector<Sample> tiny_data(int count, int size = 16, int views = 2) {
  RigConfig rig;
  rig.width = rig.height = size;
  rig.num_views = views;
  std::vector<Sample> out;
  for (int i = 0; i < count; ++i) out.push_back(make_sample(generate_sample(SceneConfig{}, rig, 100 + i), views));
  return out;
}

ModelConfig tiny_model() {
  ModelConfig m = ModelConfig::tiny(3);
  m.decoder.num_classes = 3;
  return m;
}

double loss_value(const ParameterStore<float>& p, const ModelConfig& m, const Sample& s) {
  Tape<float> tape(false);
  const auto out = forward(tape, p, m, std::span<const CameraView<float>>(s.views));
  return compute_losses(out, s.depth, s.labels, m, LossConfig{}).total.value()[0];
}

}  // namespace

TEST(Losses, SmoothL1KnownValues) {
  Tape<double> tape;
  auto pred = tape.leaf(Tensor<double>({1, 3}, {1.01, 1.1, 9.0}));
  const Tensor<double> gt({1, 3}, {1.0, 1.0, 0.0});  // third pixel has no ground truth
  bool empty = true;
  auto l = smooth_l1_depth_loss(pred, gt, 0.02, 0.1, 5.0, &empty);
  EXPECT_FALSE(empty);
  EXPECT_NEAR(l.value()[0], (0.0025 + 0.09) / 2, 1e-12);
  const Tensor<double> none({1, 3}, 0.0);
  smooth_l1_depth_loss(pred, none, 0.02, 0.1, 5.0, &empty);
  EXPECT_TRUE(empty);
}

TEST(Losses, SmoothL1KinkContinuity) {
  const double beta = 0.02;
  for (double sign : {-1.0, 1.0}) {
    const double xs[2] = {sign * beta * (1 - 1e-12), sign * beta * (1 + 1e-12)};
    double v[2], g[2];
    for (int i = 0; i < 2; ++i) {
      Tape<double> tape;
      auto p = tape.leaf(Tensor<double>({1, 1}, {1.0 + xs[i]}));
      auto l = smooth_l1_depth_loss(p, Tensor<double>({1, 1}, 1.0), beta, 0.1, 5.0);
      tape.backward(l);
      v[i] = l.value()[0];
      g[i] = tape.grad(p.id)[0];
    }
    EXPECT_LT(std::abs(v[0] - v[1]), 1e-12);
    EXPECT_LT(std::abs(g[0] - g[1]), 1e-9);
    EXPECT_LE(std::abs(g[1]), 1.0);
  }
}

TEST(Losses, CrossEntropyRejectsOutOfRangeLabels) {
  Tape<double> tape;
  auto logits = tape.leaf(Tensor<double>({2, 1, 2}));
  EXPECT_NEAR(cross_entropy_seg_loss(logits, Tensor<int>({1, 2}, {0, 1})).value()[0], std::log(2.0), 1e-12);
  EXPECT_THROW(cross_entropy_seg_loss(logits, Tensor<int>({1, 2}, {0, 2})), std::out_of_range);
  bool empty = false;
  cross_entropy_seg_loss(logits, Tensor<int>({1, 2}, kIgnoreLabel), &empty);
  EXPECT_TRUE(empty);
}

TEST(Losses, DownsampleNearestPicksPixels) {
  Tensor<int> m({4, 4});
  for (int i = 0; i < 16; ++i) m[i] = i;
  const Tensor<int> d = downsample_nearest(m, 2, 2);
  EXPECT_EQ(d, Tensor<int>({2, 2}, {5, 7, 13, 15}));
}

TEST(Metrics, MetricUnits) {
  const Tensor<float> gt({4, 4}, 1.0f);
  Tensor<float> pred({4, 4}, 1.1f);
  const DepthMetrics m = depth_metrics(pred, gt, 0.1, 5.0);
  EXPECT_NEAR(m.abs_cm, 10.0, 1e-4);
  EXPECT_NEAR(m.rel_pct, 10.0, 1e-4);
  EXPECT_NEAR(m.rmse_cm, 10.0, 1e-4);
  EXPECT_EQ(m.count, 16u);
}

TEST(Metrics, HandCountedMeanIoU) {
  // Class 0: 1 / 2, class 1: 2 / 3, class 2 absent everywhere.
  const Tensor<int> gt({1, 5}, {0, 0, 1, 1, kIgnoreLabel});
  const Tensor<int> pred({1, 5}, {0, 1, 1, 1, 2});
  const IoUResult r = mean_iou(pred, gt, 3);
  EXPECT_NEAR(r.miou, (0.5 + 2.0 / 3.0) / 2, 1e-12);
  EXPECT_NEAR(r.miou, 0.5833333333333334, 1e-9);
  EXPECT_TRUE(std::isnan(r.per_class[2]));
}

TEST(Metrics, PerfectPrediction) {
  const SceneSample s = generate_sample(SceneConfig{}, RigConfig{}, 3);
  MetricAccumulator acc(3, 0.1, 5.0);
  acc.add(s.views[0].depth, s.views[0].depth, s.views[0].labels, s.views[0].labels);
  const MetricReport r = acc.report();
  EXPECT_EQ(r.abs_cm, 0.0);
  EXPECT_EQ(r.rmse_cm, 0.0);
  EXPECT_EQ(r.miou, 1.0);
  EXPECT_GT(r.depth_pixels, 0u);
  nlohmann::json j = r;
  EXPECT_EQ(j.at("miou"), 1.0);
  EXPECT_EQ(j.get<MetricReport>().depth_pixels, r.depth_pixels);
}

TEST(Metrics, AccumulatorPoolsPixels) {
  MetricAccumulator acc(2, 0.1, 5.0);
  acc.add(Tensor<float>({1, 1}, 1.1f), Tensor<float>({1, 1}, 1.0f), Tensor<int>({1, 1}, 0), Tensor<int>({1, 1}, 0));
  acc.add(Tensor<float>({1, 3}, 2.0f), Tensor<float>({1, 3}, 2.0f), Tensor<int>({1, 3}, 1), Tensor<int>({1, 3}, 1));
  const MetricReport r = acc.report();
  EXPECT_NEAR(r.abs_cm, 10.0 / 4, 1e-4);
  EXPECT_EQ(r.samples, 2);
  EXPECT_EQ(r.miou, 1.0);
}

TEST(Pipeline, ShapesAndProbabilityInvariants) {
  const ModelConfig m = tiny_model();
  const auto data = tiny_data(1);
  const auto p = init_model<float>(m, 1);
  Tape<float> tape(false);
  const auto out = forward(tape, p, m, std::span<const CameraView<float>>(data[0].views));
  ASSERT_EQ(out.stages.size(), 2u);
  EXPECT_EQ(out.depth().shape(), (Shape{16, 16}));
  EXPECT_EQ(out.logits.shape(), (Shape{3, 16, 16}));
  for (const auto& st : out.stages) {
    const auto& pr = st.probs.probs.value();
    const int t = pr.dim(0), n = pr.dim(1) * pr.dim(2);
    for (int i = 0; i < n; ++i) {
      double s = 0;
      for (int k = 0; k < t; ++k) s += pr[k * n + i];
      EXPECT_NEAR(s, 1.0, 1e-5);
    }
    for (float d : st.depth.value().values()) {
      EXPECT_GE(d, m.cascade.d_min - 1e-4);
      EXPECT_LE(d, m.cascade.d_max + 1e-4);
    }
  }
}

TEST(Pipeline, ModelConfigJsonRoundTrip) {
  ModelConfig m = tiny_model();
  m.options.depth_prompt = false;
  const ModelConfig r = nlohmann::json(m).get<ModelConfig>();
  EXPECT_EQ(nlohmann::json(r), nlohmann::json(m));
  ModelConfig bad = m;
  bad.decoder.embed_in_channels = 7;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
}

TEST(Pipeline, NoSemanticFusionIgnoresSemanticBranchForDepth) {
  ModelConfig m = tiny_model();
  m.options.sem_to_mvs = false;
  const auto data = tiny_data(1);
  auto p = init_model<float>(m, 2);
  Tape<float> t1(false);
  const Tensor<float> d1 = forward(t1, p, m, std::span<const CameraView<float>>(data[0].views)).depth().value();
  for (auto& [name, t] : p.tensors())
    if (name.rfind("sem.", 0) == 0 || name.rfind("adapt", 0) == 0)
      for (auto& v : t.values()) v += 0.3f;
  Tape<float> t2(false);
  const Tensor<float> d2 = forward(t2, p, m, std::span<const CameraView<float>>(data[0].views)).depth().value();
  EXPECT_EQ(d1, d2);
}

TEST(Pipeline, NoDepthPromptIgnoresDepthBranchForLogits) {
  ModelConfig m = tiny_model();
  m.options.depth_prompt = false;
  const auto data = tiny_data(1);
  auto p = init_model<float>(m, 3);
  Tape<float> t1(false);
  const Tensor<float> l1 = forward(t1, p, m, std::span<const CameraView<float>>(data[0].views)).logits.value();
  for (auto& [name, t] : p.tensors())
    if (name.rfind("geo.", 0) == 0 || name.rfind("reg", 0) == 0)
      for (auto& v : t.values()) v += 0.3f;
  Tape<float> t2(false);
  const Tensor<float> l2 = forward(t2, p, m, std::span<const CameraView<float>>(data[0].views)).logits.value();
  EXPECT_EQ(l1, l2);
}

TEST(Pipeline, ZeroDepthWeightAndDetachedPromptLeaveRegularizerUntouched) {
  ModelConfig m = tiny_model();
  m.options.detach_prompt = true;
  const auto data = tiny_data(1);
  const auto p = init_model<float>(m, 4);
  LossConfig lc;
  lc.alpha = 0.0;
  Tape<float> tape;
  const auto out = forward(tape, p, m, std::span<const CameraView<float>>(data[0].views));
  const auto terms = compute_losses(out, data[0].depth, data[0].labels, m, lc);
  tape.backward(terms.total);
  int checked = 0;
  for (const auto& [name, g] : tape.parameter_gradients()) {
    if (name.rfind("reg", 0) != 0 && name.rfind("geo.", 0) != 0) continue;
    ++checked;
    for (float v : g.values()) EXPECT_EQ(v, 0.0f) << name;
  }
  EXPECT_GT(checked, 0);
}

TEST(Training, LossDecreasesOnOneScene) {
  const ModelConfig m = tiny_model();
  const auto data = tiny_data(1);
  auto p = init_model<float>(m, 5);
  const double before = loss_value(p, m, data[0]);
  TrainConfig tc;
  tc.epochs = 40;
  tc.batch_size = 1;
  tc.optimizer.lr = 3e-3;
  std::vector<StepLog> logs = fit(std::span<const Sample>(data), p, m, tc, 7);
  ASSERT_EQ(logs.size(), 40u);
  EXPECT_EQ(logs.back().step, 40);
  EXPECT_LT(loss_value(p, m, data[0]), before);
  EXPECT_LT(logs.back().lr, logs.front().lr);
  const nlohmann::json j = logs[0];
  for (const char* k : {"step", "L_seg", "L_MVS", "L", "lr"}) EXPECT_TRUE(j.contains(k)) << k;
}

TEST(Training, TrainingIsDeterministic) {
  const ModelConfig m = tiny_model();
  const auto data = tiny_data(3);
  TrainConfig tc;
  tc.epochs = 2;
  auto a = init_model<float>(m, 6), b = init_model<float>(m, 6);
  fit(std::span<const Sample>(data), a, m, tc, 11);
  fit(std::span<const Sample>(data), b, m, tc, 11);
  for (const auto& [name, t] : a.tensors()) EXPECT_EQ(t, b.get(name)) << name;
}

TEST(Training, NonFiniteValuesLeaveParametersUntouched) {
  const ModelConfig m = tiny_model();
  TrainConfig tc;
  tc.epochs = 1;
  tc.batch_size = 1;
  auto p = init_model<float>(m, 8);
  const auto before = p.tensors();
  // NaN in the reference image poisons the loss itself.
  auto data = tiny_data(1);
  data[0].views[0].image[5] = std::numeric_limits<float>::quiet_NaN();
  EXPECT_THROW(fit(std::span<const Sample>(data), p, m, tc, 1), NonFiniteLoss);
  for (const auto& [name, t] : before) EXPECT_EQ(p.get(name), t) << name;
  // NaN in a source pixel outside every sampling footprint leaves the loss
  // finite but still reaches the gradients.
  data = tiny_data(1);
  data[0].views[1].image[5] = std::numeric_limits<float>::quiet_NaN();
  EXPECT_THROW(fit(std::span<const Sample>(data), p, m, tc, 1), std::runtime_error);
  for (const auto& [name, t] : before) EXPECT_EQ(p.get(name), t) << name;
}

TEST(Training, PredictAndEvaluate) {
  const ModelConfig m = tiny_model();
  const auto data = tiny_data(2);
  const auto p = init_model<float>(m, 9);
  const Prediction pr = predict(p, m, std::span<const CameraView<float>>(data[0].views));
  EXPECT_EQ(pr.depth.shape(), (Shape{16, 16}));
  EXPECT_EQ(pr.logits.shape(), (Shape{3, 16, 16}));
  for (std::size_t i = 0; i < pr.labels.size(); ++i) {
    int best = 0;
    for (int k = 1; k < 3; ++k)
      if (pr.logits[k * 256 + i] > pr.logits[best * 256 + i]) best = k;
    EXPECT_EQ(pr.labels[i], best);
  }
  const MetricReport r = evaluate(std::span<const Sample>(data), p, m);
  EXPECT_EQ(r.samples, 2);
  EXPECT_GT(r.abs_cm, 0.0);
  EXPECT_GE(r.miou, 0.0);
  EXPECT_LE(r.miou, 1.0);
}

TEST(Training, MakeSampleRequiresEnoughViews) {
  RigConfig rig;
  rig.width = rig.height = 8;
  rig.num_views = 2;
  EXPECT_THROW(make_sample(generate_sample(SceneConfig{}, rig, 1), 3), std::invalid_argument);
}

TEST(Training, MakeSampleFromViewList) {
  RigConfig rig;
  rig.width = rig.height = 8;
  rig.num_views = 4;
  const SceneSample scene = generate_sample(SceneConfig{}, rig, 2);
  const std::vector<int> ids{2, 0, 3};
  const Sample s = make_sample(scene, ids);
  ASSERT_EQ(s.views.size(), 3u);
  EXPECT_EQ(s.views[0].image, scene.views[2].image);
  EXPECT_EQ(s.views[2].image, scene.views[3].image);
  EXPECT_EQ(s.depth, scene.views[2].depth);
  EXPECT_EQ(s.labels, scene.views[2].labels);
  const std::vector<int> bad{0, 4};
  EXPECT_THROW(make_sample(scene, bad), std::invalid_argument);
  const std::vector<int> single{0};
  EXPECT_THROW(make_sample(scene, single), std::invalid_argument);
}

TEST(Training, RandomSourcesKeepReferenceAndAreDistinct) {
  RigConfig rig;
  rig.width = rig.height = 8;
  rig.num_views = 5;
  const SceneSample scene = generate_sample(SceneConfig{}, rig, 3);
  std::mt19937_64 rng(9);
  std::vector<int> seen(5, 0);
  for (int trial = 0; trial < 200; ++trial) {
    const Sample s = make_sample_random_sources(scene, 3, rng);
    ASSERT_EQ(s.views.size(), 3u);
    EXPECT_EQ(s.views[0].image, scene.views[0].image);
    EXPECT_EQ(s.depth, scene.views[0].depth);
    std::vector<int> ids;
    for (int k = 1; k < 3; ++k) {
      for (int v = 1; v < 5; ++v) {
        if (s.views[k].camera.pose.translation == scene.views[v].camera.pose.translation) ids.push_back(v);
      }
    }
    ASSERT_EQ(ids.size(), 2u);
    EXPECT_NE(ids[0], ids[1]);
    for (int v : ids) ++seen[v];
  }
  EXPECT_EQ(seen[0], 0);
  for (int v = 1; v < 5; ++v) EXPECT_GT(seen[v], 50);
  std::mt19937_64 a(4), b(4);
  EXPECT_EQ(make_sample_random_sources(scene, 3, a).views[1].image, make_sample_random_sources(scene, 3, b).views[1].image);
  EXPECT_THROW(make_sample_random_sources(scene, 6, a), std::invalid_argument);
}
