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

// Per-view 2-D features: a geometry branch (strided FPN), a semantic branch
// (deep strided stack producing a coarse token grid), an adapter that turns
// the token grid into a pyramid, and pointwise-sum fusion of the two pyramids.

#include <sweepstack/autodiff.hpp>
#include <sweepstack/params.hpp>

#include <array>
#include <random>

namespace sweepstack {

struct FeatureConfig {
  /// Channel widths coarse -> fine; the levels are H/4, H/2, H.
  std::array<int, 3> pyramid_channels{32, 16, 8};
  int semantic_channels = 64;
  /// Downsampling of the semantic token grid; must be a power of two >= 2.
  int token_stride = 16;

  void validate() const;
};

template <typename T>
struct FeaturePyramid {
  std::array<Var<T>, 3> levels;  // coarse -> fine
};

/// Adds all branch and adapter parameters to `store`.
template <typename T>
void init_feature_params(ParameterStore<T>& store, const FeatureConfig& cfg, std::mt19937_64& rng);

/// FPN-style encoder over image [3,H,W]; H and W must be divisible by 4.
template <typename T>
FeaturePyramid<T> extract_geometric_pyramid(Var<T> image, const ParameterStore<T>& params,
                                            const FeatureConfig& cfg);

/// Token grid [C_sem, H/stride, W/stride]; H and W must be divisible by the stride.
template <typename T>
Var<T> extract_semantic_features(Var<T> image, const ParameterStore<T>& params, const FeatureConfig& cfg);

/// Resizes the token grid to each level (bilinear) and maps it to that level's width.
template <typename T>
FeaturePyramid<T> adapt_semantic_pyramid(Var<T> tokens, int height, int width, const ParameterStore<T>& params,
                                         const FeatureConfig& cfg);

/// levels[s] = geo.levels[s] + sem.levels[s]; throws ShapeError on mismatch.
template <typename T>
FeaturePyramid<T> fuse(const FeaturePyramid<T>& geo, const FeaturePyramid<T>& sem);

/// A pyramid of zeros shaped like `like`.
template <typename T>
FeaturePyramid<T> zeros_like(const FeaturePyramid<T>& like);

}  // namespace sweepstack
