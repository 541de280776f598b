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

#include <sweepstack/costvol.hpp>
#include <sweepstack/decoder.hpp>
#include <sweepstack/features.hpp>
#include <sweepstack/geometry.hpp>

#include <nlohmann/json.hpp>

#include <cstdint>
#include <span>
#include <vector>

namespace sweepstack {

/// Ablation switches.
struct PipelineOptions {
  /// Add the adapted semantic pyramid to the geometric features before the cost volume.
  bool sem_to_mvs = true;
  /// Feed the predicted depth to the decoder as a dense prompt.
  bool depth_prompt = true;
  /// Stop segmentation-loss gradients at the depth prompt.
  bool detach_prompt = false;
};

struct ModelConfig {
  FeatureConfig features;
  CascadeConfig cascade;
  DecoderConfig decoder;
  int regularizer_channels = 8;
  int stages = 3;
  PipelineOptions options;

  void validate() const;
  /// Smallest image side multiple accepted by every branch.
  int size_multiple() const;

  /// A tiny configuration for gradient checks and unit tests.
  static ModelConfig tiny(int num_classes = 2);
};

void to_json(nlohmann::json& j, const ModelConfig& cfg);
void from_json(const nlohmann::json& j, ModelConfig& cfg);

template <typename T>
ParameterStore<T> init_model(const ModelConfig& cfg, std::uint64_t seed);

template <typename T>
struct PipelineOutput {
  std::vector<StageOutput<T>> stages;  // coarse -> fine
  Var<T> logits;                       // [K,H,W]

  Var<T> depth() const { return stages.back().depth; }
};

/// Joint depth + segmentation forward pass; views[0] is the reference.
template <typename T>
PipelineOutput<T> forward(Tape<T>& tape, const ParameterStore<T>& params, const ModelConfig& cfg,
                          std::span<const CameraView<T>> views);

}  // namespace sweepstack
