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
// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include "oracles.hpp"
#include "reprojection.hpp"

#include <sweepstack/costvol.hpp>
#include <sweepstack/gradcheck.hpp>
#include <sweepstack/train.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <vector>

using namespace sweepstack;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = true;
  std::string detail;
};

int failures = 0;

void report(int id, const char* name, const std::function<Outcome()>& run) {
  Outcome o;
  try {
    o = run();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  if (!o.pass) ++failures;
  std::printf("[%s] %2d %-22s %s\n", o.pass ? "PASS" : "FAIL", id, name, o.detail.c_str());
  std::fflush(stdout);
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// ---------------------------------------------------------------------------

Outcome warp_oracle() {
  std::mt19937_64 rng(2026);
  std::uniform_real_distribution<double> u(-1, 1), px(0, 127), py(0, 95), pd(0.1, 5.0);
  const CameraIntrinsics k{110.0, 112.0, 63.5, 47.5, 128, 96};
  const auto camera = [&] {
    const Eigen::Vector3d aa(0.25 * u(rng), 0.25 * u(rng), 0.25 * u(rng));
    const Eigen::Vector3d t(0.4 * u(rng), 0.4 * u(rng), 0.4 * u(rng));
    return Camera{k, CameraPose::from_axis_angle(aa, t)};
  };
  const auto t0 = Clock::now();
  int compared = 0, mismatched_validity = 0;
  double worst = 0;
  for (int i = 0; i < 4000; ++i) {
    const Camera ref = camera(), src = camera();
    const double x = px(rng), y = py(rng), d = pd(rng);
    double us = 0, vs = 0;
    const bool ok = oracle::warp(oracle::from_camera(ref), oracle::from_camera(src), x, y, d, us, vs);
    const WarpedPixel w = warp_pixel(ref, src, Eigen::Vector2d(x, y), d);
    if (ok != w.valid) ++mismatched_validity;
    if (!ok || !w.valid) continue;
    worst = std::max({worst, std::abs(w.pixel.x() - us), std::abs(w.pixel.y() - vs)});
    ++compared;
  }
  const double secs = seconds_since(t0);
  return {compared >= 1000 && mismatched_validity == 0 && worst < 1e-6 && secs < 5.0,
          fmt("%d samples, max err %.2e px, validity mismatches %d, %.2f s", compared, worst, mismatched_validity,
              secs)};
}

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

Outcome cost_identities() {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> n(0, 1);
  // Duplicated views over a real feature map.
  double dup = 0;
  {
    Tensor<double> f({6, 5, 7});
    for (auto& v : f.values()) v = n(rng);
    Tensor<double> w({6, 3, 5, 7});
    for (int c = 0; c < 6; ++c)
      for (int t = 0; t < 3; ++t)
        for (int i = 0; i < 35; ++i) w[(c * 3 + t) * 35 + i] = f[c * 35 + i];
    Tape<double> tape(false);
    std::vector<Var<double>> warped{tape.constant(w), tape.constant(w), tape.constant(w)};
    std::vector<Tensor<double>> masks(3, Tensor<double>({3, 5, 7}, 1.0));
    const auto cost = variance_cost(tape.constant(f), std::span<const Var<double>>(warped),
                                    std::span<const Tensor<double>>(masks));
    for (double v : cost.data.value().values()) dup = std::max(dup, std::abs(v));
  }
  const double three = scalar_cost({0.0, 1.0, 2.0});
  double perm = 0;
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> v(2 + trial % 5);
    for (auto& x : v) x = 3 * n(rng);
    const double base = scalar_cost(v);
    std::shuffle(v.begin(), v.end(), rng);
    perm = std::max(perm, std::abs(scalar_cost(v) - base));
  }
  return {dup == 0.0 && std::abs(three - 2.0 / 3.0) < 1e-12 && perm < 1e-6,
          fmt("duplicates max %.1e, scalar case %.15f, permutation drift %.1e", dup, three, perm)};
}

Outcome regression_identities() {
  Tape<double> tape(false);
  const CascadeConfig cfg;
  const auto hyps = make_initial_hypotheses(tape, cfg, 6, 8);
  const int t = hyps.values.dim(0);
  Tensor<double> onehot({t, 6, 8});
  for (int i = 0; i < 48; ++i) onehot[static_cast<std::size_t>((i * 13) % t) * 48 + i] = 1.0;
  const Tensor<double> d = regress_depth(ProbabilityVolume<double>{tape.constant(onehot)}, hyps).value();
  int inexact = 0;
  for (int i = 0; i < 48; ++i) inexact += d[i] != hyps.values.value()[static_cast<std::size_t>((i * 13) % t) * 48 + i];

  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-30, 30);
  Tensor<double> logits({t, 6, 8});
  for (auto& v : logits.values()) v = u(rng);
  const auto pv = probabilities_from_logits(tape.constant(logits));
  double drift = 0;
  bool nonneg = true;
  for (int i = 0; i < 48; ++i) {
    double s = 0;
    for (int k = 0; k < t; ++k) {
      const double p = pv.probs.value()[static_cast<std::size_t>(k) * 48 + i];
      nonneg = nonneg && p >= 0;
      s += p;
    }
    drift = std::max(drift, std::abs(s - 1));
  }
  return {inexact == 0 && drift < 1e-6 && nonneg,
          fmt("one-hot mismatches %d, max |sum p - 1| %.1e", inexact, drift)};
}

Outcome cascade_constants() {
  const CascadeConfig cfg;
  const double base_cm = base_interval(cfg) * 100;
  bool spacing_exact = true;
  bool shrinking = true;
  double prev = std::numeric_limits<double>::infinity();
  std::string widths;
  for (int s = 0; s < 3; ++s) {
    spacing_exact = spacing_exact && stage_interval(cfg, s) == cfg.interval_ratios[s] * base_interval(cfg);
    const double width = stage_interval(cfg, s) * cfg.hypothesis_counts[s];
    shrinking = shrinking && width < prev;
    prev = width;
    widths += fmt(" %.1f", width * 100);
  }
  return {base_cm >= 2.45 && base_cm <= 2.65 && spacing_exact && shrinking,
          fmt("base %.4f cm, window widths (cm)%s", base_cm, widths.c_str())};
}

Outcome gradients() {
  const auto t0 = Clock::now();
  double prim = 0, pipe = 0;
  std::string prim_worst, pipe_worst;
  for (const auto& r : primitive_gradchecks()) {
    if (r.max_rel_err >= prim) {
      prim = r.max_rel_err;
      prim_worst = r.op;
    }
  }
  std::vector<GradcheckResult> composite = module_gradchecks();
  composite.push_back(pipeline_gradcheck());
  for (const auto& r : composite) {
    if (r.max_rel_err >= pipe) {
      pipe = r.max_rel_err;
      pipe_worst = r.op;
    }
  }
  const double secs = seconds_since(t0);
  return {prim < 1e-6 && pipe < 1e-4 && secs < 120,
          fmt("primitives %.1e (%s), modules+pipeline %.1e (%s), %.1f s", prim, prim_worst.c_str(), pipe,
              pipe_worst.c_str(), secs)};
}

Outcome smooth_l1() {
  const double beta = 0.02;
  const auto eval = [&](double r, double* grad) {
    Tape<double> tape;
    auto p = tape.leaf(Tensor<double>({1, 1}, {1.0 + r}));
    auto l = smooth_l1_depth_loss(p, Tensor<double>({1, 1}, 1.0), beta, 0.1, 5.0);
    tape.backward(l);
    if (grad) *grad = tape.grad(p.id)[0];
    return l.value()[0];
  };
  const double a = eval(0.01, nullptr), b = eval(0.1, nullptr);
  double jump = 0, max_grad = 0;
  for (double s : {-1.0, 1.0}) {
    double g0, g1;
    jump = std::max(jump, std::abs(eval(s * beta * (1 - 1e-12), &g0) - eval(s * beta * (1 + 1e-12), &g1)));
  }
  for (int i = -400; i <= 400; ++i) {
    double g;
    eval(i * 0.0025, &g);
    max_grad = std::max(max_grad, std::abs(g));
  }
  return {std::abs(a - 0.0025) < 1e-12 && std::abs(b - 0.09) < 1e-12 && jump < 1e-12 && max_grad <= 1.0,
          fmt("L(0.01) %.6f, L(0.1) %.6f, kink jump %.1e, max |grad| %.6f", a, b, jump, max_grad)};
}

Outcome reprojection() {
  testutil::ReprojectionStats st;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const SceneSpec scene = sample_scene(SceneConfig{}, seed);
    RigConfig rig;
    rig.num_views = 5;
    rig.mode = seed % 2 ? RigMode::Outward : RigMode::Inward;
    testutil::reprojection_check(scene, sample_camera_rig(scene, rig, seed), 2, st);
  }
  return {st.max_err < 1e-6 && st.visible > 0,
          fmt("50 scenes, max err %.2e m over %ld visible / %ld occluded points", st.max_err, st.visible,
              st.occluded)};
}

Outcome metric_units() {
  const DepthMetrics m = depth_metrics(Tensor<float>({8, 8}, 1.1f), Tensor<float>({8, 8}, 1.0f), 0.1, 5.0);
  const Tensor<int> gt({1, 5}, {0, 0, 1, 1, kIgnoreLabel});
  const Tensor<int> pred({1, 5}, {0, 1, 1, 1, 2});
  const double miou = mean_iou(pred, gt, 3).miou;
  const SceneSample s = generate_sample(SceneConfig{}, RigConfig{}, 11);
  MetricAccumulator acc(SceneConfig{}.num_classes, 0.1, 5.0);
  acc.add(s.views[0].depth, s.views[0].depth, s.views[0].labels, s.views[0].labels);
  const MetricReport perfect = acc.report();
  const bool units = std::abs(m.abs_cm - 10) < 1e-4 && std::abs(m.rel_pct - 10) < 1e-4 &&
                     std::abs(m.rmse_cm - 10) < 1e-4;
  return {units && std::abs(miou - 0.5833333333333334) < 1e-9 && perfect.abs_cm == 0 && perfect.miou == 1,
          fmt("Abs %.4f cm, Rel %.4f %%, RMSE %.4f cm, mIoU %.10f, perfect Abs %g mIoU %g", m.abs_cm, m.rel_pct,
              m.rmse_cm, miou, perfect.abs_cm, perfect.miou)};
}

// ---------------------------------------------------------------------------
// Training benchmark shared by the fusion, prompt and view-count criteria.

constexpr int kTrainScenes = 20;
constexpr int kValScenes = 10;
constexpr int kSeeds = 3;

TrainConfig benchmark_training() {
  TrainConfig tc;
  tc.epochs = 30;
  tc.batch_size = 1;
  tc.optimizer.lr = 1e-3;
  return tc;
}

struct ArmResult {
  double abs3 = 0, abs5 = 0, miou = 0;
};

struct Benchmark {
  ArmResult full, no_sem, no_prompt;  // means over seeds
  double seconds = 0;
  std::string error;
};

Benchmark run_benchmark() {
  Benchmark b;
  const auto t0 = Clock::now();
  try {
    RigConfig rig;
    rig.num_views = 5;
    std::vector<Sample> train, val3, val5;
    // Three views per training sample; the two sources are drawn from the rig's four.
    std::mt19937_64 pick(1);
    for (int i = 0; i < kTrainScenes; ++i) {
      train.push_back(make_sample_random_sources(generate_sample(SceneConfig{}, rig, 1000 + i), 3, pick));
    }
    for (int i = 0; i < kValScenes; ++i) {
      const SceneSample s = generate_sample(SceneConfig{}, rig, 5000 + i);
      val3.push_back(make_sample(s, 3));
      val5.push_back(make_sample(s, 5));
    }
    const TrainConfig tc = benchmark_training();
    const auto arm = [&](bool sem, bool prompt, bool with_m5) {
      ArmResult mean;
      for (int seed = 0; seed < kSeeds; ++seed) {
        ModelConfig m;
        m.options.sem_to_mvs = sem;
        m.options.depth_prompt = prompt;
        ParameterStore<float> p = init_model<float>(m, static_cast<std::uint64_t>(seed));
        fit(train, p, m, tc, static_cast<std::uint64_t>(seed));
        const MetricReport r3 = evaluate(val3, p, m);
        mean.abs3 += r3.abs_cm / kSeeds;
        mean.miou += r3.miou / kSeeds;
        if (with_m5) mean.abs5 += evaluate(val5, p, m).abs_cm / kSeeds;
        std::printf("       benchmark sem=%d prompt=%d seed %d: Abs %.2f cm, mIoU %.3f (%.0f s)\n", sem, prompt,
                    seed, r3.abs_cm, r3.miou, seconds_since(t0));
        std::fflush(stdout);
      }
      return mean;
    };
    b.full = arm(true, true, true);
    b.no_sem = arm(false, true, false);
    b.no_prompt = arm(true, false, false);
  } catch (const std::exception& e) {
    b.error = e.what();
  }
  b.seconds = seconds_since(t0);
  return b;
}

Outcome fusion(const Benchmark& b) {
  if (!b.error.empty()) return {false, "benchmark failed: " + b.error};
  const double gain = (b.no_sem.abs3 - b.full.abs3) / b.no_sem.abs3;
  return {b.full.abs3 <= b.no_sem.abs3 && gain >= 0.03 && b.seconds < 1800,
          fmt("fused Abs %.2f cm vs %.2f cm without (%.1f%% better), benchmark %.0f s", b.full.abs3, b.no_sem.abs3,
              100 * gain, b.seconds)};
}

Outcome prompting(const Benchmark& b) {
  if (!b.error.empty()) return {false, "benchmark failed: " + b.error};
  const double pts = 100 * (b.full.miou - b.no_prompt.miou);
  return {pts >= 1.0, fmt("mIoU %.3f prompted vs %.3f unprompted (%+.1f points)", b.full.miou, b.no_prompt.miou, pts)};
}

Outcome view_count(const Benchmark& b) {
  if (!b.error.empty()) return {false, "benchmark failed: " + b.error};
  return {b.full.abs5 <= b.full.abs3, fmt("Abs %.2f cm with 5 views vs %.2f cm with 3", b.full.abs5, b.full.abs3)};
}

Outcome overfit() {
  RigConfig rig;
  const std::vector<Sample> one{make_sample(generate_sample(SceneConfig{}, rig, 0), 3)};
  ModelConfig m;
  TrainConfig tc;
  tc.epochs = 200;
  tc.batch_size = 1;
  tc.optimizer.lr = 2e-3;
  ParameterStore<float> p = init_model<float>(m, 0);
  const std::vector<StepLog> log = fit(one, p, m, tc, 0);
  constexpr std::size_t window = 25;
  std::vector<double> means;
  for (std::size_t i = 0; i + window <= log.size(); i += window) {
    double s = 0;
    for (std::size_t j = i; j < i + window; ++j) s += log[j].l;
    means.push_back(s / window);
  }
  bool monotone = log.size() == 200 && means.size() >= 2;
  for (std::size_t i = 1; i < means.size(); ++i) monotone = monotone && means[i] < means[i - 1];
  const double abs_cm = evaluate(one, p, m).abs_cm;
  std::string trace;
  for (double v : means) trace += fmt(" %.3f", v);
  return {monotone && abs_cm < 5.0, fmt("%zu steps, finest Abs %.2f cm, window means%s", log.size(), abs_cm,
                                        trace.c_str())};
}

}  // namespace

int main() {
  report(1, "warp-oracle", warp_oracle);
  report(2, "cost-identities", cost_identities);
  report(3, "depth-regression", regression_identities);
  report(4, "cascade-constants", cascade_constants);
  report(5, "gradients", gradients);
  report(6, "smooth-l1", smooth_l1);
  report(7, "reprojection", reprojection);
  report(11, "metric-units", metric_units);
  report(12, "overfit-one-scene", overfit);
  const Benchmark b = run_benchmark();
  report(8, "semantic-fusion", [&] { return fusion(b); });
  report(9, "depth-prompt", [&] { return prompting(b); });
  report(10, "view-count", [&] { return view_count(b); });
  std::printf("%d criterion(s) failed\n", failures);
  return failures == 0 ? 0 : 1;
}
