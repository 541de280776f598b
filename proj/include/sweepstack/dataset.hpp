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

// On-disk scene directories:
//   view_%04d.png  view_%04d_depth.pfm  view_%04d_labels.png  view_%04d_camera.json
//   scene.json  manifest.json
// A corpus is a directory of scene_%04d subdirectories plus its own manifest.json.

#include <sweepstack/io.hpp>
#include <sweepstack/synthscene.hpp>

#include <filesystem>
#include <vector>

namespace sweepstack {

inline constexpr int kDatasetFormatVersion = 1;

struct DatasetManifest {
  int format_version = kDatasetFormatVersion;
  int num_classes = 3;
  int num_views = 0;
  std::string rig = "inward";
  std::uint64_t seed = 0;
};

void to_json(nlohmann::json& j, const DatasetManifest& m);
void from_json(const nlohmann::json& j, DatasetManifest& m);

struct SceneSample {
  SceneSpec scene;
  std::vector<RenderedView> views;  // reference first
  DatasetManifest manifest;
};

/// Samples a scene, a rig and renders every view.
SceneSample generate_sample(const SceneConfig& scene_cfg, const RigConfig& rig_cfg, std::uint64_t seed);

void export_dataset(const SceneSample& sample, const std::filesystem::path& dir);
/// Throws FormatVersionError on a manifest version mismatch and IoError for missing or malformed files.
SceneSample import_dataset(const std::filesystem::path& dir);

/// Images and cameras only (view_%04d.png + view_%04d_camera.json), in index
/// order until the first missing image. Throws IoError when an image has no camera.
std::vector<CameraView<float>> load_views(const std::filesystem::path& dir);

/// Writes `count` scenes seeded seed, seed+1, ... as dir/scene_%04d.
void export_corpus(const SceneConfig& scene_cfg, const RigConfig& rig_cfg, int count, std::uint64_t seed,
                   const std::filesystem::path& dir);
/// Scene directories of a corpus in order (or `dir` itself if it is a scene directory).
std::vector<std::filesystem::path> list_scenes(const std::filesystem::path& dir);

}  // namespace sweepstack
