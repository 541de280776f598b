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
#include <sweepstack/geometry.hpp>

#include <stdexcept>

namespace sweepstack {

namespace {
constexpr double kMinDepth = 1e-9;
}

Eigen::Matrix3d CameraIntrinsics::K() const {
  Eigen::Matrix3d k;
  k << fx, 0, cx, 0, fy, cy, 0, 0, 1;
  return k;
}

Eigen::Matrix3d CameraIntrinsics::K_inv() const {
  Eigen::Matrix3d k;
  k << 1.0 / fx, 0, -cx / fx, 0, 1.0 / fy, -cy / fy, 0, 0, 1;
  return k;
}

CameraIntrinsics CameraIntrinsics::resized(int out_width, int out_height) const {
  const double sx = static_cast<double>(out_width) / width;
  const double sy = static_cast<double>(out_height) / height;
  return {fx * sx, fy * sy, (cx + 0.5) * sx - 0.5, (cy + 0.5) * sy - 0.5, out_width, out_height};
}

void CameraIntrinsics::validate() const {
  if (!(fx > 0) || !(fy > 0)) throw std::invalid_argument("camera focal lengths must be positive");
  if (width < 1 || height < 1) throw std::invalid_argument("camera size must be at least 1x1");
}

CameraPose CameraPose::from_rt(const Eigen::Matrix3d& rotation, const Eigen::Vector3d& translation) {
  CameraPose p{rotation, translation};
  p.validate();
  return p;
}

CameraPose CameraPose::from_axis_angle(const Eigen::Vector3d& axis_angle, const Eigen::Vector3d& translation) {
  const double angle = axis_angle.norm();
  Eigen::Matrix3d r = Eigen::Matrix3d::Identity();
  if (angle > 0) r = Eigen::AngleAxisd(angle, axis_angle / angle).toRotationMatrix();
  return {r, translation};
}

CameraPose CameraPose::look_at(const Eigen::Vector3d& eye, const Eigen::Vector3d& target,
                               const Eigen::Vector3d& up) {
  const Eigen::Vector3d z = (target - eye).normalized();
  Eigen::Vector3d x = (-up).cross(z);
  if (x.norm() < 1e-12) x = Eigen::Vector3d::UnitX().cross(z);
  x.normalize();
  const Eigen::Vector3d y = z.cross(x);
  CameraPose p;
  p.rotation.col(0) = x;
  p.rotation.col(1) = y;
  p.rotation.col(2) = z;
  p.translation = eye;
  return p;
}

void CameraPose::validate(double tol) const {
  const double ortho = (rotation.transpose() * rotation - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff();
  if (ortho > tol) throw std::invalid_argument("camera rotation is not orthonormal");
  if (std::abs(rotation.determinant() - 1.0) > tol) {
    throw std::invalid_argument("camera rotation must have determinant +1");
  }
  if (!translation.allFinite()) throw std::invalid_argument("camera translation is not finite");
}

template <typename T>
void CameraView<T>::validate() const {
  camera.intrinsics.validate();
  camera.pose.validate();
  if (image.ndim() != 3 || image.dim(0) != 3 || image.dim(1) != camera.intrinsics.height ||
      image.dim(2) != camera.intrinsics.width) {
    throw std::invalid_argument("view image " + shape_str(image.shape()) + " does not match camera size " +
                                std::to_string(camera.intrinsics.width) + "x" +
                                std::to_string(camera.intrinsics.height));
  }
}

template struct CameraView<float>;
template struct CameraView<double>;

Projection project(const CameraIntrinsics& intr, const CameraPose& pose, const Eigen::Vector3d& point) {
  const Eigen::Vector3d xc = pose.rotation.transpose() * (point - pose.translation);
  Projection out;
  out.depth = xc.z();
  if (xc.z() <= kMinDepth) return out;
  out.pixel = {intr.fx * xc.x() / xc.z() + intr.cx, intr.fy * xc.y() / xc.z() + intr.cy};
  out.valid = true;
  return out;
}

Eigen::Vector3d unproject(const CameraIntrinsics& intr, const CameraPose& pose, const Eigen::Vector2d& pixel,
                          double depth) {
  if (!(depth > 0)) throw std::invalid_argument("unproject: depth must be positive");
  const Eigen::Vector3d xc((pixel.x() - intr.cx) / intr.fx * depth, (pixel.y() - intr.cy) / intr.fy * depth,
                           depth);
  return pose.rotation * xc + pose.translation;
}

namespace {

// Source homogeneous pixel as an affine function of depth: h(d) = d * a + b.
struct WarpRay {
  Eigen::Vector3d a;
  Eigen::Vector3d b;
};

WarpRay warp_ray(const Camera& ref, const Camera& src, double u, double v) {
  const Eigen::Matrix3d ks_rst = src.intrinsics.K() * src.pose.rotation.transpose();
  const Eigen::Vector3d dir = ref.pose.rotation * (ref.intrinsics.K_inv() * Eigen::Vector3d(u, v, 1.0));
  return {ks_rst * dir, ks_rst * (ref.pose.translation - src.pose.translation)};
}

}  // namespace

WarpedPixel warp_pixel(const Camera& ref, const Camera& src, const Eigen::Vector2d& pixel, double d) {
  if (!(d > 0)) throw std::invalid_argument("warp_pixel: hypothesis depth must be positive");
  const WarpRay ray = warp_ray(ref, src, pixel.x(), pixel.y());
  const Eigen::Vector3d h = d * ray.a + ray.b;
  WarpedPixel out;
  // The third row of K is (0,0,1), so h.z() is the source-frame depth.
  if (h.z() <= kMinDepth) return out;
  out.pixel = {h.x() / h.z(), h.y() / h.z()};
  out.valid = true;
  return out;
}

template <typename T>
Var<T> warp_coords(Var<T> hypotheses, const Camera& ref, const Camera& src, Tensor<T>& valid) {
  const Tensor<T>& hv = hypotheses.value();
  if (hv.ndim() != 3) throw ShapeError("warp_coords: hypotheses must be [T,H,W], got " + shape_str(hv.shape()));
  const int nt = hv.dim(0);
  const int h = hv.dim(1);
  const int w = hv.dim(2);
  if (ref.intrinsics.width != w || ref.intrinsics.height != h) {
    throw ShapeError("warp_coords: reference camera " + std::to_string(ref.intrinsics.width) + "x" +
                     std::to_string(ref.intrinsics.height) + " vs hypotheses " + shape_str(hv.shape()));
  }
  const double max_u = src.intrinsics.width - 1;
  const double max_v = src.intrinsics.height - 1;
  std::vector<WarpRay> rays(static_cast<std::size_t>(h) * w);
  for (int v = 0; v < h; ++v) {
    for (int u = 0; u < w; ++u) rays[static_cast<std::size_t>(v) * w + u] = warp_ray(ref, src, u, v);
  }
  Tensor<T> coords({nt, h, w, 2});
  valid = Tensor<T>({nt, h, w});
  // d(u')/dd and d(v')/dd, kept for the backward pass.
  std::vector<T> jac(static_cast<std::size_t>(nt) * h * w * 2, T(0));
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (int t = 0; t < nt; ++t) {
    for (std::size_t p = 0; p < plane; ++p) {
      const std::size_t i = t * plane + p;
      const double d = static_cast<double>(hv[i]);
      const WarpRay& r = rays[p];
      const Eigen::Vector3d hp = d * r.a + r.b;
      if (hp.z() <= kMinDepth) {
        coords[2 * i] = T(-1);
        coords[2 * i + 1] = T(-1);
        continue;
      }
      const double up = hp.x() / hp.z();
      const double vp = hp.y() / hp.z();
      coords[2 * i] = static_cast<T>(up);
      coords[2 * i + 1] = static_cast<T>(vp);
      jac[2 * i] = static_cast<T>((r.a.x() * hp.z() - hp.x() * r.a.z()) / (hp.z() * hp.z()));
      jac[2 * i + 1] = static_cast<T>((r.a.y() * hp.z() - hp.y() * r.a.z()) / (hp.z() * hp.z()));
      if (up >= 0 && vp >= 0 && up <= max_u && vp <= max_v) valid[i] = T(1);
    }
  }
  return hypotheses.tape->record(std::move(coords), {hypotheses}, "warp_coords",
                                 [hypotheses, jac = std::move(jac)](Tape<T>& tape, int self) {
    if (!tape.requires_grad(hypotheses.id)) return;
    const Tensor<T>& g = tape.grad(self);
    Tensor<T>& dh = tape.grad(hypotheses.id);
    for (std::size_t i = 0; i < dh.size(); ++i) dh[i] += g[2 * i] * jac[2 * i] + g[2 * i + 1] * jac[2 * i + 1];
  });
}

template <typename T>
WarpGrid<T> build_warp_grid(const Camera& ref, const Camera& src, const Tensor<T>& hypotheses) {
  Tape<T> tape(false);
  WarpGrid<T> grid;
  grid.coords = warp_coords(tape.constant(hypotheses), ref, src, grid.valid).value();
  return grid;
}

template <typename T>
Tensor<T> bilinear_sample(const Tensor<T>& features, const WarpGrid<T>& grid, int slice) {
  const int h = grid.coords.dim(1);
  const int w = grid.coords.dim(2);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  Tensor<T> coords({h, w, 2}, std::vector<T>(grid.coords.data() + slice * plane * 2,
                                             grid.coords.data() + (slice + 1) * plane * 2));
  Tensor<T> valid({h, w}, std::vector<T>(grid.valid.data() + slice * plane, grid.valid.data() + (slice + 1) * plane));
  Tape<T> tape(false);
  return ad::bilinear_sample(tape.constant(features), tape.constant(std::move(coords)), &valid).value();
}

template Var<float> warp_coords(Var<float>, const Camera&, const Camera&, Tensor<float>&);
template Var<double> warp_coords(Var<double>, const Camera&, const Camera&, Tensor<double>&);
template WarpGrid<float> build_warp_grid(const Camera&, const Camera&, const Tensor<float>&);
template WarpGrid<double> build_warp_grid(const Camera&, const Camera&, const Tensor<double>&);
template Tensor<float> bilinear_sample(const Tensor<float>&, const WarpGrid<float>&, int);
template Tensor<double> bilinear_sample(const Tensor<double>&, const WarpGrid<double>&, int);

}  // namespace sweepstack
