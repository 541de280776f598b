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

// Plane-sweep cost volumes and the coarse-to-fine depth cascade.
//
// Each stage builds equally spaced depth hypotheses per reference pixel, warps
// every source view's features onto them, aggregates the per-view volumes by
// their variance, turns the variance into a distribution over hypotheses with
// a small 3-D CNN + softmax, and takes the expectation as the depth. Finer
// stages center a narrower window on the upsampled coarser depth.

#include <sweepstack/features.hpp>
#include <sweepstack/geometry.hpp>

#include <array>
#include <span>
#include <vector>

namespace sweepstack {

struct CascadeConfig {
  double d_min = 0.1;
  double d_max = 5.0;
  int num_bins = 192;
  std::array<double, 3> interval_ratios{4.0, 1.0, 0.5};
  std::array<int, 3> hypothesis_counts{48, 32, 8};

  void validate() const;
};

/// (d_max - d_min) / (num_bins - 1); rejects num_bins < 2.
double base_interval(const CascadeConfig& cfg);
/// Hypothesis spacing at cascade stage s.
double stage_interval(const CascadeConfig& cfg, int stage);

template <typename T>
struct DepthHypothesisSet {
  Var<T> values;  // [T,H,W], strictly increasing along T
  double interval = 0.0;
};

template <typename T>
struct CostVolume {
  Var<T> data;               // [C,T,H,W], >= 0
  Tensor<int> valid_count;   // [T,H,W], views contributing to each voxel (reference included)
};

template <typename T>
struct ProbabilityVolume {
  Var<T> probs;  // [T,H,W], sums to 1 over T
};

/// Spatially constant hypotheses for the first stage, centered on the range
/// midpoint and shifted (not shrunk) to stay inside [d_min, d_max].
template <typename T>
DepthHypothesisSet<T> make_initial_hypotheses(Tape<T>& tape, const CascadeConfig& cfg, int height, int width);

/// Per-pixel window of `count` hypotheses with the given spacing centered on
/// center [H,W], shifted to stay inside [lo, hi]. Differentiable in center.
template <typename T>
Var<T> window_hypotheses(Var<T> center, int count, double spacing, double lo, double hi);

/// Upsamples a coarser depth map [h,w] to height x width and builds the
/// stage-`stage` window around it.
template <typename T>
DepthHypothesisSet<T> refine_hypotheses(Var<T> prev_depth, const CascadeConfig& cfg, int stage, int height,
                                        int width);

/// Variance over views of per-view feature volumes. The reference features
/// [C,H,W] enter every hypothesis unchanged; each source contributes
/// warped [C,T,H,W] where its mask [T,H,W] is nonzero. Voxels with fewer than
/// two contributing views get zero cost.
template <typename T>
CostVolume<T> variance_cost(Var<T> ref_features, std::span<const Var<T>> warped,
                            std::span<const Tensor<T>> masks);

/// Warps each source level through its grid and aggregates with variance_cost.
template <typename T>
CostVolume<T> build_cost_volume(Var<T> ref_features, std::span<const Var<T>> src_features,
                                std::span<const Var<T>> grid_coords, std::span<const Tensor<T>> grid_valid);

/// Parameters for the per-stage 3-D regularizers.
template <typename T>
void init_regularizer_params(ParameterStore<T>& store, const std::array<int, 3>& feature_channels,
                             int hidden_channels, std::mt19937_64& rng);

/// Cost [C,T,H,W] -> softmax over T of (3-D CNN logits - scale * mean_c(cost)).
template <typename T>
ProbabilityVolume<T> regularize(const CostVolume<T>& cost, const ParameterStore<T>& params, int level);

/// Softmax over the leading axis of logits [T,H,W].
template <typename T>
ProbabilityVolume<T> probabilities_from_logits(Var<T> logits);

/// D[v,u] = sum_t P[t,v,u] * d_t[v,u].
template <typename T>
Var<T> regress_depth(const ProbabilityVolume<T>& probs, const DepthHypothesisSet<T>& hyps);

template <typename T>
struct StageOutput {
  DepthHypothesisSet<T> hypotheses;
  CostVolume<T> cost;
  ProbabilityVolume<T> probs;
  Var<T> depth;  // [H_s, W_s]
  int level = 0; // pyramid level used
};

/// Runs `stages` cascade stages (1..3) over the finest pyramid levels; view 0
/// is the reference. Throws std::invalid_argument with fewer than two views.
template <typename T>
std::vector<StageOutput<T>> run_cascade(std::span<const FeaturePyramid<T>> pyramids, std::span<const Camera> cameras,
                                        const CascadeConfig& cfg, const ParameterStore<T>& params, int stages = 3);

}  // namespace sweepstack
