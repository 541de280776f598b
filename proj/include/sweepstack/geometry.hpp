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

// Pinhole cameras and the plane-sweep warp.
//
// Poses are camera-to-world: a camera-frame point x maps to X = R x + t.
// Integer pixel coordinates address pixel centers.

#include <sweepstack/autodiff.hpp>

#include <Eigen/Core>
#include <Eigen/Geometry>

namespace sweepstack {

struct CameraIntrinsics {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;
  int width = 1;
  int height = 1;

  Eigen::Matrix3d K() const;
  Eigen::Matrix3d K_inv() const;
  /// Intrinsics of the same camera resampled to out_width x out_height pixels.
  CameraIntrinsics resized(int out_width, int out_height) const;
  /// Throws std::invalid_argument when focal lengths or sizes are not positive.
  void validate() const;
};

struct CameraPose {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  static CameraPose identity() { return {}; }
  /// Validates orthonormality (R^T R = I, det R = +1, both within 1e-9).
  static CameraPose from_rt(const Eigen::Matrix3d& rotation, const Eigen::Vector3d& translation);
  static CameraPose from_axis_angle(const Eigen::Vector3d& axis_angle, const Eigen::Vector3d& translation);
  /// Camera at `eye` whose +z axis points at `target`; image +y follows -up.
  static CameraPose look_at(const Eigen::Vector3d& eye, const Eigen::Vector3d& target,
                            const Eigen::Vector3d& up = Eigen::Vector3d(0, -1, 0));

  Eigen::Vector3d center() const { return translation; }
  Eigen::Vector3d optical_axis() const { return rotation.col(2); }
  void validate(double tol = 1e-9) const;
};

struct Camera {
  CameraIntrinsics intrinsics;
  CameraPose pose;

  /// Same pose with intrinsics resampled to the given resolution.
  Camera resized(int out_width, int out_height) const {
    return {intrinsics.resized(out_width, out_height), pose};
  }
};

/// An input image [3,H,W] in [0,1] with its camera.
template <typename T>
struct CameraView {
  Tensor<T> image;
  Camera camera;

  void validate() const;
};

struct Projection {
  Eigen::Vector2d pixel = Eigen::Vector2d::Zero();
  double depth = 0.0;
  bool valid = false;
};

/// Perspective projection of a world point; invalid when camera-frame z <= 1e-9.
Projection project(const CameraIntrinsics& intr, const CameraPose& pose, const Eigen::Vector3d& point);
/// World point at `depth` (camera-frame z) along the ray through `pixel`. Rejects depth <= 0.
Eigen::Vector3d unproject(const CameraIntrinsics& intr, const CameraPose& pose, const Eigen::Vector2d& pixel,
                          double depth);

struct WarpedPixel {
  Eigen::Vector2d pixel = Eigen::Vector2d::Zero();
  bool valid = false;
};

/// Maps a reference pixel at hypothesis depth d into the source image:
/// (u',v',1) ~ K_s R_s^T (R_r K_r^-1 d (u,v,1) + t_r - t_s). Invalid when the
/// source-frame depth is not positive. Bounds are not checked here.
WarpedPixel warp_pixel(const Camera& ref, const Camera& src, const Eigen::Vector2d& pixel, double d);

/// Source-image sampling positions for every hypothesis slice.
template <typename T>
struct WarpGrid {
  Tensor<T> coords;  // [T,H,W,2], (u', v')
  Tensor<T> valid;   // [T,H,W], 1 where in front of the source camera and inside [0,W-1]x[0,H-1]
};

/// Differentiable warp of per-pixel hypotheses [T,H,W] (cameras already at the
/// hypotheses' resolution). Returns coords [T,H,W,2]; writes the validity mask.
template <typename T>
Var<T> warp_coords(Var<T> hypotheses, const Camera& ref, const Camera& src, Tensor<T>& valid);

/// Non-differentiable convenience form of warp_coords.
template <typename T>
WarpGrid<T> build_warp_grid(const Camera& ref, const Camera& src, const Tensor<T>& hypotheses);

/// Samples features [C,H,W] through one hypothesis slice of a warp grid.
template <typename T>
Tensor<T> bilinear_sample(const Tensor<T>& features, const WarpGrid<T>& grid, int slice);

}  // namespace sweepstack
