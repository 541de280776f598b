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
#include <sweepstack/synthscene.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <stdexcept>

namespace sweepstack {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

const std::array<Eigen::Vector3d, 10> kPalette = {
    Eigen::Vector3d(0.85, 0.20, 0.15), Eigen::Vector3d(0.15, 0.55, 0.85), Eigen::Vector3d(0.95, 0.80, 0.25),
    Eigen::Vector3d(0.25, 0.70, 0.30), Eigen::Vector3d(0.60, 0.35, 0.75), Eigen::Vector3d(0.90, 0.55, 0.20),
    Eigen::Vector3d(0.20, 0.20, 0.25), Eigen::Vector3d(0.90, 0.90, 0.88), Eigen::Vector3d(0.55, 0.40, 0.30),
    Eigen::Vector3d(0.40, 0.80, 0.80)};

std::uint32_t hash3(std::int64_t x, std::int64_t y, std::uint32_t seed) {
  std::uint64_t h = static_cast<std::uint64_t>(x) * 0x9E3779B97F4A7C15ull ^
                    static_cast<std::uint64_t>(y) * 0xC2B2AE3D27D4EB4Full ^ (static_cast<std::uint64_t>(seed) << 17);
  h ^= h >> 33;
  h *= 0xFF51AFD7ED558CCDull;
  h ^= h >> 33;
  return static_cast<std::uint32_t>(h);
}

double lattice(std::int64_t x, std::int64_t y, std::uint32_t seed) {
  return static_cast<double>(hash3(x, y, seed) & 0xFFFFFF) / static_cast<double>(0xFFFFFF);
}

double smooth(double t) { return t * t * (3.0 - 2.0 * t); }

double value_noise(const Eigen::Vector2d& p, std::uint32_t seed) {
  const double fx = std::floor(p.x());
  const double fy = std::floor(p.y());
  const auto ix = static_cast<std::int64_t>(fx);
  const auto iy = static_cast<std::int64_t>(fy);
  const double tx = smooth(p.x() - fx);
  const double ty = smooth(p.y() - fy);
  const double a = lattice(ix, iy, seed) * (1 - tx) + lattice(ix + 1, iy, seed) * tx;
  const double b = lattice(ix, iy + 1, seed) * (1 - tx) + lattice(ix + 1, iy + 1, seed) * tx;
  return a * (1 - ty) + b * ty;
}

Eigen::Matrix3d plane_axes(const Eigen::Vector3d& u, const Eigen::Vector3d& v) {
  Eigen::Matrix3d a;
  a.col(0) = u.normalized();
  a.col(1) = v.normalized();
  a.col(2) = a.col(0).cross(a.col(1)).normalized();
  return a;
}

bool intersect_plane(const Primitive& p, const Eigen::Vector3d& o, const Eigen::Vector3d& d, double t_min, RayHit& hit) {
  const Eigen::Vector3d n = p.axes.col(2);
  const double denom = n.dot(d);
  if (std::abs(denom) < 1e-15) return false;
  const double t = n.dot(p.center - o) / denom;
  if (!(t > t_min)) return false;
  const Eigen::Vector3d local = p.axes.transpose() * (o + t * d - p.center);
  if (std::abs(local.x()) > p.half_extent.x() || std::abs(local.y()) > p.half_extent.y()) return false;
  hit.t = t;
  hit.normal = n;
  hit.uv = local.head<2>();
  return true;
}

bool intersect_box(const Primitive& p, const Eigen::Vector3d& o, const Eigen::Vector3d& d, double t_min, RayHit& hit) {
  double t_near = -kInf, t_far = kInf;
  int near_axis = -1, far_axis = -1;
  for (int a = 0; a < 3; ++a) {
    const double lo = p.center[a] - p.half_extent[a];
    const double hi = p.center[a] + p.half_extent[a];
    if (std::abs(d[a]) < 1e-15) {
      if (o[a] < lo || o[a] > hi) return false;
      continue;
    }
    double t1 = (lo - o[a]) / d[a];
    double t2 = (hi - o[a]) / d[a];
    if (t1 > t2) std::swap(t1, t2);
    if (t1 > t_near) {
      t_near = t1;
      near_axis = a;
    }
    if (t2 < t_far) {
      t_far = t2;
      far_axis = a;
    }
  }
  if (t_near > t_far) return false;
  double t;
  int axis;
  double sign;
  if (t_near > t_min) {
    t = t_near;
    axis = near_axis;
    sign = d[axis] > 0 ? -1.0 : 1.0;
  } else if (t_far > t_min) {
    t = t_far;
    axis = far_axis;
    sign = d[axis] > 0 ? 1.0 : -1.0;
  } else {
    return false;
  }
  if (axis < 0) return false;
  const Eigen::Vector3d q = o + t * d - p.center;
  hit.t = t;
  hit.normal = Eigen::Vector3d::Zero();
  hit.normal[axis] = sign;
  hit.uv = Eigen::Vector2d(q[(axis + 1) % 3], q[(axis + 2) % 3]);
  return true;
}

constexpr int kSubpixels = 4;

Texture random_texture(std::mt19937_64& rng, bool flat) {
  std::uniform_int_distribution<int> color(0, static_cast<int>(kPalette.size()) - 1);
  std::uniform_int_distribution<int> pattern(1, 3);
  std::uniform_real_distribution<double> scale(0.12, 0.35);
  Texture t;
  t.color_a = kPalette[color(rng)];
  int b = color(rng);
  while (kPalette[b] == t.color_a) b = color(rng);
  t.color_b = kPalette[b];
  t.pattern = flat ? Texture::Pattern::Flat : static_cast<Texture::Pattern>(pattern(rng));
  t.scale = scale(rng);
  t.noise_seed = static_cast<std::uint32_t>(rng());
  return t;
}

}  // namespace

Eigen::Vector3d Texture::eval(const Eigen::Vector2d& uv) const {
  const Eigen::Vector2d p = uv / scale;
  switch (pattern) {
    case Pattern::Flat:
      return color_a;
    case Pattern::Checker: {
      const auto s = static_cast<std::int64_t>(std::floor(p.x())) + static_cast<std::int64_t>(std::floor(p.y()));
      return (s & 1) ? color_b : color_a;
    }
    case Pattern::Stripes:
      return (static_cast<std::int64_t>(std::floor(p.x() + 0.5 * p.y())) & 1) ? color_b : color_a;
    case Pattern::Noise: {
      const double n = 0.65 * value_noise(p, noise_seed) + 0.35 * value_noise(2.7 * p, noise_seed + 1);
      return color_a * (1 - n) + color_b * n;
    }
  }
  return color_a;
}

Eigen::Vector3d SceneSpec::centroid() const {
  Eigen::Vector3d sum = Eigen::Vector3d::Zero();
  int n = 0;
  for (const auto& p : primitives) {
    if (p.kind == Primitive::Kind::Box) {
      sum += p.center;
      ++n;
    }
  }
  if (n > 0) return sum / n;
  return primitives.empty() ? Eigen::Vector3d(0, 0, 2.5) : primitives.front().center;
}

void SceneConfig::validate() const {
  if (num_classes < 1 || num_classes > 254) throw std::invalid_argument("scene: num_classes must be in [1,254]");
  if (min_boxes < 0 || max_boxes < min_boxes) throw std::invalid_argument("scene: need 0 <= min_boxes <= max_boxes");
}

SceneSpec sample_scene(const SceneConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto uni = [&](double a, double b) { return a + (b - a) * u01(rng); };
  auto role_class = [&](int role) { return std::min(role, cfg.num_classes - 1); };

  SceneSpec s;
  s.seed = seed;
  s.num_classes = cfg.num_classes;
  const double wall_z = uni(3.4, 4.2);
  const double wall_yaw = uni(-0.17, 0.17);
  const double floor_y = uni(0.45, 0.8);
  const double floor_pitch = uni(-0.06, 0.06);

  Primitive wall;
  wall.kind = Primitive::Kind::Plane;
  wall.class_id = role_class(0);
  wall.center = Eigen::Vector3d(0, 0, wall_z);
  wall.axes = plane_axes(Eigen::Vector3d(std::cos(wall_yaw), 0, std::sin(wall_yaw)), Eigen::Vector3d(0, 1, 0));
  wall.half_extent = Eigen::Vector3d(8, 8, 0);
  s.primitives.push_back(wall);

  Primitive floor;
  floor.kind = Primitive::Kind::Plane;
  floor.class_id = role_class(1);
  floor.center = Eigen::Vector3d(0, floor_y, 0.5 * wall_z);
  floor.axes = plane_axes(Eigen::Vector3d(1, 0, 0), Eigen::Vector3d(0, std::sin(floor_pitch), std::cos(floor_pitch)));
  floor.half_extent = Eigen::Vector3d(8, 8, 0);
  s.primitives.push_back(floor);

  const int boxes = std::uniform_int_distribution<int>(cfg.min_boxes, cfg.max_boxes)(rng);
  for (int b = 0; b < boxes; ++b) {
    Primitive box;
    box.kind = Primitive::Kind::Box;
    box.class_id = cfg.num_classes <= 3 ? role_class(2) : 2 + b % (cfg.num_classes - 2);
    box.half_extent = Eigen::Vector3d(uni(0.15, 0.4), uni(0.2, 0.55), uni(0.15, 0.4));
    const double x = uni(-1.0, 1.0);
    const double z = uni(1.6, std::min(3.1, wall_z - 0.5));
    // Resting on the floor plane (y grows downward).
    const double y = floor_y + std::tan(floor_pitch) * (z - floor.center.z()) - box.half_extent.y();
    box.center = Eigen::Vector3d(x, y, z);
    s.primitives.push_back(box);
  }

  const int flat = cfg.textureless ? std::uniform_int_distribution<int>(0, static_cast<int>(s.primitives.size()) - 1)(rng)
                                   : -1;
  for (int i = 0; i < static_cast<int>(s.primitives.size()); ++i) {
    s.primitives[i].texture = random_texture(rng, i == flat);
  }
  s.light_dir = Eigen::Vector3d(uni(-0.5, 0.5), -1.0, uni(-0.8, -0.2)).normalized();
  return s;
}

RayHit intersect(const SceneSpec& scene, const Eigen::Vector3d& origin, const Eigen::Vector3d& dir, double t_min) {
  RayHit best;
  for (int i = 0; i < static_cast<int>(scene.primitives.size()); ++i) {
    const Primitive& p = scene.primitives[i];
    RayHit h;
    const bool ok = p.kind == Primitive::Kind::Plane ? intersect_plane(p, origin, dir, t_min, h)
                                                     : intersect_box(p, origin, dir, t_min, h);
    if (ok && (!best.hit || h.t < best.t)) {
      best = h;
      best.hit = true;
      best.primitive = i;
    }
  }
  return best;
}

namespace {
Eigen::Vector3d pixel_ray(const Camera& cam, const Eigen::Vector2d& pixel) {
  // Camera-frame z of the direction is 1, so the hit parameter is the depth.
  return cam.pose.rotation * (cam.intrinsics.K_inv() * Eigen::Vector3d(pixel.x(), pixel.y(), 1.0));
}
}  // namespace

double ray_depth(const SceneSpec& scene, const Camera& camera, const Eigen::Vector2d& pixel) {
  const RayHit h = intersect(scene, camera.pose.translation, pixel_ray(camera, pixel));
  return h.hit ? h.t : 0.0;
}

RenderedView render_view(const SceneSpec& scene, const Camera& camera) {
  camera.intrinsics.validate();
  camera.pose.validate();
  const int h = camera.intrinsics.height;
  const int w = camera.intrinsics.width;
  RenderedView out;
  out.camera = camera;
  out.image = Tensor<float>({3, h, w});
  out.depth = Tensor<float>({h, w});
  out.labels = Tensor<int>({h, w}, kIgnoreLabel);
  const Eigen::Vector3d& eye = camera.pose.translation;
  auto radiance = [&](const RayHit& hit) -> Eigen::Vector3d {
    if (!hit.hit) return Eigen::Vector3d::Zero();
    const double shade = 0.3 + 0.7 * std::abs(hit.normal.dot(scene.light_dir));
    return scene.primitives[hit.primitive].texture.eval(hit.uv) * shade;
  };
  // Color is box-filtered over a stratified grid; depth and label come from the pixel center.
  for (int v = 0; v < h; ++v) {
    for (int u = 0; u < w; ++u) {
      Eigen::Vector3d c = Eigen::Vector3d::Zero();
      for (int sy = 0; sy < kSubpixels; ++sy) {
        for (int sx = 0; sx < kSubpixels; ++sx) {
          const Eigen::Vector2d px(u - 0.5 + (sx + 0.5) / kSubpixels, v - 0.5 + (sy + 0.5) / kSubpixels);
          c += radiance(intersect(scene, eye, pixel_ray(camera, px)));
        }
      }
      c /= kSubpixels * kSubpixels;
      for (int ch = 0; ch < 3; ++ch) {
        out.image.at(ch, v, u) = static_cast<float>(std::round(std::clamp(c[ch], 0.0, 1.0) * 255.0) / 255.0);
      }
      const RayHit hit = intersect(scene, eye, pixel_ray(camera, Eigen::Vector2d(u, v)));
      if (!hit.hit) continue;
      out.depth.at(v, u) = static_cast<float>(hit.t);
      out.labels.at(v, u) = scene.primitives[hit.primitive].class_id;
    }
  }
  return out;
}

void RigConfig::validate() const {
  if (num_views < 1) throw std::invalid_argument("rig: num_views must be positive");
  if (!(baseline > 0)) throw std::invalid_argument("rig: baseline must be positive");
  if (width <= 0 || height <= 0) throw std::invalid_argument("rig: image size must be positive");
  if (!(focal_scale > 0) || !(radius > 0)) throw std::invalid_argument("rig: focal_scale and radius must be positive");
  if (mode == RigMode::Inward && baseline >= 2 * radius) {
    throw std::invalid_argument("rig: inward baseline must be shorter than the orbit diameter");
  }
}

std::vector<Camera> sample_camera_rig(const SceneSpec& scene, const RigConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u11(-1.0, 1.0);
  CameraIntrinsics intr;
  intr.width = cfg.width;
  intr.height = cfg.height;
  intr.fx = intr.fy = cfg.focal_scale * cfg.width;
  intr.cx = 0.5 * (cfg.width - 1);
  intr.cy = 0.5 * (cfg.height - 1);

  const Eigen::Vector3d c = scene.centroid();
  const Eigen::Vector3d lift(0, -0.35, 0);
  std::vector<Camera> cams;
  if (cfg.mode == RigMode::Inward) {
    const double step = 2.0 * std::asin(cfg.baseline / (2.0 * cfg.radius));
    for (int i = 0; i < cfg.num_views; ++i) {
      const double k = (i + 1) / 2;
      const double theta = (i % 2 == 1 ? 1.0 : -1.0) * k * step;
      const Eigen::Vector3d eye = c + cfg.radius * Eigen::Vector3d(std::sin(theta), 0, -std::cos(theta)) + lift;
      cams.push_back({intr, CameraPose::look_at(eye, c)});
    }
  } else {
    const Eigen::Vector3d base = c - cfg.radius * Eigen::Vector3d::UnitZ() + lift;
    for (int i = 0; i < cfg.num_views; ++i) {
      Eigen::Vector3d offset = Eigen::Vector3d::Zero();
      double yaw = 0, pitch = 0;
      if (i > 0) {
        do {
          offset = Eigen::Vector3d(u11(rng), u11(rng), u11(rng));
        } while (offset.norm() > 1.0);
        offset *= 0.5 * cfg.baseline;
        yaw = 0.17 * u11(rng);
        pitch = 0.07 * u11(rng);
      }
      const Eigen::Vector3d eye = base + offset;
      const Eigen::Vector3d fwd = (c - base).normalized();
      const Eigen::Matrix3d rot = (Eigen::AngleAxisd(yaw, Eigen::Vector3d::UnitY()) *
                                   Eigen::AngleAxisd(pitch, Eigen::Vector3d::UnitX()))
                                      .toRotationMatrix();
      cams.push_back({intr, CameraPose::look_at(eye, eye + rot * fwd)});
    }
  }
  return cams;
}

std::string to_string(RigMode mode) { return mode == RigMode::Inward ? "inward" : "outward"; }

RigMode rig_mode_from_string(const std::string& s) {
  if (s == "inward") return RigMode::Inward;
  if (s == "outward") return RigMode::Outward;
  throw std::invalid_argument("unknown rig mode '" + s + "' (expected inward|outward)");
}

namespace {
const char* pattern_name(Texture::Pattern p) {
  switch (p) {
    case Texture::Pattern::Flat: return "flat";
    case Texture::Pattern::Checker: return "checker";
    case Texture::Pattern::Stripes: return "stripes";
    case Texture::Pattern::Noise: return "noise";
  }
  return "flat";
}

Texture::Pattern pattern_from(const std::string& s) {
  if (s == "flat") return Texture::Pattern::Flat;
  if (s == "checker") return Texture::Pattern::Checker;
  if (s == "stripes") return Texture::Pattern::Stripes;
  if (s == "noise") return Texture::Pattern::Noise;
  throw std::invalid_argument("unknown texture pattern '" + s + "'");
}

std::vector<double> vec(const Eigen::Vector3d& v) { return {v.x(), v.y(), v.z()}; }
Eigen::Vector3d vec3(const nlohmann::json& j) {
  const auto v = j.get<std::vector<double>>();
  if (v.size() != 3) throw std::invalid_argument("expected a 3-vector");
  return {v[0], v[1], v[2]};
}
}  // namespace

void to_json(nlohmann::json& j, const SceneSpec& s) {
  j = nlohmann::json::object();
  j["num_classes"] = s.num_classes;
  j["seed"] = s.seed;
  j["light_dir"] = vec(s.light_dir);
  auto& prims = j["primitives"] = nlohmann::json::array();
  for (const auto& p : s.primitives) {
    std::vector<double> axes(9);
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) axes[r * 3 + c] = p.axes(r, c);
    prims.push_back({{"kind", p.kind == Primitive::Kind::Plane ? "plane" : "box"},
                     {"class_id", p.class_id},
                     {"center", vec(p.center)},
                     {"axes", axes},
                     {"half_extent", vec(p.half_extent)},
                     {"texture",
                      {{"pattern", pattern_name(p.texture.pattern)},
                       {"color_a", vec(p.texture.color_a)},
                       {"color_b", vec(p.texture.color_b)},
                       {"scale", p.texture.scale},
                       {"noise_seed", p.texture.noise_seed}}}});
  }
}

void from_json(const nlohmann::json& j, SceneSpec& s) {
  s = SceneSpec{};
  s.num_classes = j.at("num_classes").get<int>();
  s.seed = j.at("seed").get<std::uint64_t>();
  s.light_dir = vec3(j.at("light_dir"));
  for (const auto& pj : j.at("primitives")) {
    Primitive p;
    const auto kind = pj.at("kind").get<std::string>();
    if (kind != "plane" && kind != "box") throw std::invalid_argument("unknown primitive kind '" + kind + "'");
    p.kind = kind == "plane" ? Primitive::Kind::Plane : Primitive::Kind::Box;
    p.class_id = pj.at("class_id").get<int>();
    p.center = vec3(pj.at("center"));
    const auto axes = pj.at("axes").get<std::vector<double>>();
    if (axes.size() != 9) throw std::invalid_argument("primitive axes need 9 values");
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) p.axes(r, c) = axes[r * 3 + c];
    p.half_extent = vec3(pj.at("half_extent"));
    const auto& tj = pj.at("texture");
    p.texture.pattern = pattern_from(tj.at("pattern").get<std::string>());
    p.texture.color_a = vec3(tj.at("color_a"));
    p.texture.color_b = vec3(tj.at("color_b"));
    p.texture.scale = tj.at("scale").get<double>();
    p.texture.noise_seed = tj.at("noise_seed").get<std::uint32_t>();
    s.primitives.push_back(p);
  }
}

void to_json(nlohmann::json& j, const SceneConfig& c) {
  j = {{"num_classes", c.num_classes}, {"textureless", c.textureless}, {"min_boxes", c.min_boxes},
       {"max_boxes", c.max_boxes}};
}

void from_json(const nlohmann::json& j, SceneConfig& c) {
  c.num_classes = j.value("num_classes", c.num_classes);
  c.textureless = j.value("textureless", c.textureless);
  c.min_boxes = j.value("min_boxes", c.min_boxes);
  c.max_boxes = j.value("max_boxes", c.max_boxes);
}

void to_json(nlohmann::json& j, const RigConfig& c) {
  j = {{"mode", to_string(c.mode)}, {"num_views", c.num_views}, {"baseline", c.baseline}, {"width", c.width},
       {"height", c.height}, {"focal_scale", c.focal_scale}, {"radius", c.radius}};
}

void from_json(const nlohmann::json& j, RigConfig& c) {
  if (j.contains("mode")) c.mode = rig_mode_from_string(j.at("mode").get<std::string>());
  c.num_views = j.value("num_views", c.num_views);
  c.baseline = j.value("baseline", c.baseline);
  c.width = j.value("width", c.width);
  c.height = j.value("height", c.height);
  c.focal_scale = j.value("focal_scale", c.focal_scale);
  c.radius = j.value("radius", c.radius);
}

}  // namespace sweepstack
