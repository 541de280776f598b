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

// Geometric consistency of a rendered rig: every reference surface point,
// reprojected into a source camera, must be the first surface that source
// camera sees along that ray unless something nearer occludes it.

#include <sweepstack/synthscene.hpp>

#include <algorithm>
#include <cmath>
#include <vector>

namespace testutil {

struct ReprojectionStats {
  double max_err = 0.0;  // meters, over visible points; one-sided bound for occluded ones
  long visible = 0;
  long occluded = 0;
};

inline void reprojection_check(const sweepstack::SceneSpec& scene, const std::vector<sweepstack::Camera>& cams,
                               int stride, ReprojectionStats& st) {
  using namespace sweepstack;
  const Camera& ref = cams[0];
  for (int v = 0; v < ref.intrinsics.height; v += stride) {
    for (int u = 0; u < ref.intrinsics.width; u += stride) {
      const Eigen::Vector2d p(u, v);
      const double d = ray_depth(scene, ref, p);
      if (d <= 0) continue;
      const Eigen::Vector3d x = unproject(ref.intrinsics, ref.pose, p, d);
      for (std::size_t s = 1; s < cams.size(); ++s) {
        const Projection q = project(cams[s].intrinsics, cams[s].pose, x);
        if (!q.valid) continue;
        const double ds = ray_depth(scene, cams[s], q.pixel);
        if (ds <= 0) {
          st.max_err = std::max(st.max_err, q.depth);  // source ray misses a surface that exists
          continue;
        }
        // A source hit farther than the point would mean seeing through a surface.
        st.max_err = std::max(st.max_err, ds - q.depth);
        if (ds < q.depth - 1e-4) {
          ++st.occluded;
        } else {
          st.max_err = std::max(st.max_err, std::abs(ds - q.depth));
          ++st.visible;
        }
      }
    }
  }
}

}  // namespace testutil
