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

// Procedural room-like scenes (back wall, floor, boxes) rendered by ray casting
// into RGB (4x4 supersampled), metric depth and per-pixel class labels.
//
// The world frame is y-down like the camera frames. Texture colors are drawn
// from one palette regardless of class, so appearance alone does not reveal
// the class; the geometry does.

#include <sweepstack/geometry.hpp>

#include <nlohmann/json.hpp>

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace sweepstack {

inline constexpr int kIgnoreLabel = 255;

struct Texture {
  enum class Pattern { Flat, Checker, Stripes, Noise };
  Pattern pattern = Pattern::Flat;
  Eigen::Vector3d color_a = Eigen::Vector3d::Constant(0.5);
  Eigen::Vector3d color_b = Eigen::Vector3d::Constant(0.5);
  double scale = 0.25;  // meters per cell
  std::uint32_t noise_seed = 0;

  /// Albedo at surface coordinates (meters).
  Eigen::Vector3d eval(const Eigen::Vector2d& uv) const;
};

struct Primitive {
  enum class Kind { Plane, Box };
  Kind kind = Kind::Plane;
  int class_id = 0;
  Texture texture;
  Eigen::Vector3d center = Eigen::Vector3d::Zero();
  /// Planes: columns are the in-plane axes u, v and the normal. Boxes are axis-aligned.
  Eigen::Matrix3d axes = Eigen::Matrix3d::Identity();
  /// Planes: (half_u, half_v, unused); boxes: half sizes along x, y, z.
  Eigen::Vector3d half_extent = Eigen::Vector3d::Constant(1.0);
};

struct SceneSpec {
  std::vector<Primitive> primitives;
  Eigen::Vector3d light_dir = Eigen::Vector3d(0.3, -0.8, -0.5).normalized();
  int num_classes = 3;
  std::uint64_t seed = 0;

  /// Mean of the box centers (the wall center when there are no boxes).
  Eigen::Vector3d centroid() const;
};

struct SceneConfig {
  int num_classes = 3;
  /// Force one primitive to a flat, textureless albedo.
  bool textureless = true;
  int min_boxes = 1;
  int max_boxes = 3;

  void validate() const;
};

SceneSpec sample_scene(const SceneConfig& cfg, std::uint64_t seed);

struct RayHit {
  bool hit = false;
  double t = 0.0;  // ray parameter
  int primitive = -1;
  Eigen::Vector3d normal = Eigen::Vector3d::Zero();
  Eigen::Vector2d uv = Eigen::Vector2d::Zero();
};

/// Closest intersection with t > t_min along origin + t * dir.
RayHit intersect(const SceneSpec& scene, const Eigen::Vector3d& origin, const Eigen::Vector3d& dir,
                 double t_min = 1e-9);

/// Camera-frame depth of the first surface seen through a (sub)pixel; 0 when nothing is hit.
double ray_depth(const SceneSpec& scene, const Camera& camera, const Eigen::Vector2d& pixel);

struct RenderedView {
  Tensor<float> image;   // [3,H,W], multiples of 1/255
  Tensor<float> depth;   // [H,W] meters, 0 = no surface
  Tensor<int> labels;    // [H,W], kIgnoreLabel = no surface
  Camera camera;

  CameraView<float> as_view() const { return {image, camera}; }
};

RenderedView render_view(const SceneSpec& scene, const Camera& camera);

enum class RigMode { Inward, Outward };

struct RigConfig {
  RigMode mode = RigMode::Inward;
  int num_views = 3;
  double baseline = 0.4;  // meters; chord between neighboring inward cameras, jitter radius outward
  int width = 64;
  int height = 64;
  double focal_scale = 0.9;  // focal length in units of the image width
  double radius = 2.5;       // inward orbit radius

  void validate() const;
};

/// Cameras for one scene, reference first. Inward rigs orbit the centroid
/// (view i alternates sides at growing angles, so the first M views of a
/// larger rig form the M-view rig); outward rigs jitter a common center and
/// rotate slightly.
std::vector<Camera> sample_camera_rig(const SceneSpec& scene, const RigConfig& cfg, std::uint64_t seed);

std::string to_string(RigMode mode);
RigMode rig_mode_from_string(const std::string& s);

void to_json(nlohmann::json& j, const SceneSpec& scene);
void to_json(nlohmann::json& j, const SceneConfig& cfg);
/// Missing keys keep their current values.
void from_json(const nlohmann::json& j, SceneConfig& cfg);
void to_json(nlohmann::json& j, const RigConfig& cfg);
void from_json(const nlohmann::json& j, RigConfig& cfg);
void from_json(const nlohmann::json& j, SceneSpec& scene);

}  // namespace sweepstack
