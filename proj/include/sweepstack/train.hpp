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
#pragma once

// Losses, metrics, the training loop and batch evaluation.

#include <sweepstack/dataset.hpp>
#include <sweepstack/pipeline.hpp>

#include <nlohmann/json.hpp>

#include <functional>
#include <random>
#include <span>
#include <stdexcept>
#include <vector>

namespace sweepstack {

struct LossConfig {
  double alpha = 1.0;  // weight of the depth term
  double beta = 0.02;  // smooth-L1 transition (meters)
  std::array<double, 3> stage_weights{1.0, 1.0, 1.0};

  void validate() const;
};

/// Nearest-neighbor resampling with half-pixel centers (ground truth must not be blended).
template <typename V>
Tensor<V> downsample_nearest(const Tensor<V>& map, int out_h, int out_w);

/// Mean smooth-L1 over pixels whose ground truth lies in [d_min, d_max].
/// Sets *empty (if given) when no pixel qualifies; the loss is then 0.
template <typename T>
Var<T> smooth_l1_depth_loss(Var<T> pred, const Tensor<T>& gt, double beta, double d_min, double d_max,
                            bool* empty = nullptr);

/// Mean cross-entropy over labeled pixels of logits [K,H,W]; kIgnoreLabel is skipped.
/// Throws std::out_of_range for labels >= K that are not the ignore label.
template <typename T>
Var<T> cross_entropy_seg_loss(Var<T> logits, const Tensor<int>& labels, bool* empty = nullptr);

template <typename T>
struct LossTerms {
  Var<T> seg;
  Var<T> mvs;    // sum_s w_s * L_s over cascade stages
  Var<T> total;  // seg + alpha * mvs
  bool depth_empty = false;
  bool seg_empty = false;
};

template <typename T>
LossTerms<T> compute_losses(const PipelineOutput<T>& out, const Tensor<T>& depth_gt, const Tensor<int>& labels,
                            const ModelConfig& model, const LossConfig& loss);

struct DepthMetrics {
  double abs_cm = 0.0;
  double rel_pct = 0.0;
  double rmse_cm = 0.0;
  std::size_t count = 0;
};

/// Errors over pixels whose ground truth lies in [d_min, d_max].
DepthMetrics depth_metrics(const Tensor<float>& pred, const Tensor<float>& gt, double d_min, double d_max);

struct IoUResult {
  double miou = 0.0;
  std::vector<double> per_class;  // NaN where the class is absent from both maps
};

/// Mean IoU over classes present in the prediction or the ground truth.
IoUResult mean_iou(const Tensor<int>& pred, const Tensor<int>& gt, int num_classes);

struct MetricReport {
  double abs_cm = 0.0;
  double rel_pct = 0.0;
  double rmse_cm = 0.0;
  double miou = 0.0;
  std::vector<double> iou_per_class;
  std::size_t depth_pixels = 0;
  std::size_t label_pixels = 0;
  int samples = 0;
};

void to_json(nlohmann::json& j, const MetricReport& r);
void from_json(const nlohmann::json& j, MetricReport& r);

/// Pools pixels across every added view before computing metrics.
class MetricAccumulator {
 public:
  MetricAccumulator(int num_classes, double d_min, double d_max);
  void add(const Tensor<float>& depth_pred, const Tensor<float>& depth_gt, const Tensor<int>& label_pred,
           const Tensor<int>& label_gt);
  MetricReport report() const;

 private:
  int k_;
  double d_min_, d_max_;
  double abs_ = 0, rel_ = 0, sq_ = 0;
  std::size_t depth_n_ = 0, label_n_ = 0;
  int samples_ = 0;
  std::vector<std::size_t> confusion_;  // [gt * k + pred]
};

/// One training / evaluation example: reference first, ground truth for the reference.
struct Sample {
  std::vector<CameraView<float>> views;
  Tensor<float> depth;
  Tensor<int> labels;
};

/// Uses the first `num_views` views of a scene; throws std::invalid_argument if it has fewer.
Sample make_sample(const SceneSample& scene, int num_views);
/// Uses the listed views in order; the first is the reference.
Sample make_sample(const SceneSample& scene, std::span<const int> view_ids);
/// Reference view 0 plus num_views - 1 distinct source views drawn uniformly from the rest.
Sample make_sample_random_sources(const SceneSample& scene, int num_views, std::mt19937_64& rng);

struct TrainConfig {
  int epochs = 10;
  int batch_size = 2;
  AdamWConfig optimizer{};
  LossConfig loss{};
  bool shuffle = true;
  bool cosine = true;  // cosine decay to 5% of the base rate over all steps

  void validate() const;
};

/// Keys: epochs, batch_size, lr, weight_decay, beta1, beta2, alpha, beta, stage_weights, shuffle, cosine.
/// Missing keys keep their current values.
void to_json(nlohmann::json& j, const TrainConfig& cfg);
void from_json(const nlohmann::json& j, TrainConfig& cfg);

struct StepLog {
  long step = 0;
  double l_seg = 0.0;
  double l_mvs = 0.0;
  double l = 0.0;
  double lr = 0.0;
};

void to_json(nlohmann::json& j, const StepLog& s);

class NonFiniteLoss : public std::runtime_error {
 public:
  explicit NonFiniteLoss(long batch)
      : std::runtime_error("non-finite loss in batch " + std::to_string(batch)), batch_(batch) {}
  long batch() const { return batch_; }

 private:
  long batch_;
};

using StepCallback = std::function<void(const StepLog&)>;

/// Learning rate for optimizer step `step` (0-based) of `total`.
double scheduled_lr(const TrainConfig& cfg, long step, long total);

/// One pass over `data` in mini-batches; gradients are averaged within a batch.
/// `step` counts optimizer steps across epochs. Throws NonFiniteLoss before
/// touching the parameters if a batch loss is not finite.
std::vector<StepLog> train_epoch(std::span<const Sample> data, ParameterStore<float>& params, const ModelConfig& model,
                                 const TrainConfig& cfg, std::mt19937_64& rng, long& step, long total_steps,
                                 const StepCallback& on_step = {});

/// Runs cfg.epochs epochs.
std::vector<StepLog> fit(std::span<const Sample> data, ParameterStore<float>& params, const ModelConfig& model,
                         const TrainConfig& cfg, std::uint64_t seed, const StepCallback& on_step = {});

struct Prediction {
  Tensor<float> depth;   // finest stage [H,W]
  Tensor<float> logits;  // [K,H,W]
  Tensor<int> labels;    // argmax [H,W]
};

Prediction predict(const ParameterStore<float>& params, const ModelConfig& model,
                   std::span<const CameraView<float>> views);

MetricReport evaluate(std::span<const Sample> data, const ParameterStore<float>& params, const ModelConfig& model);

}  // namespace sweepstack
