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
#include <sweepstack/dataset.hpp>

#include <algorithm>
#include <cstdio>

namespace sweepstack {

namespace fs = std::filesystem;

namespace {
std::string view_name(int i, const char* suffix) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "view_%04d%s", i, suffix);
  return buf;
}

std::string scene_name(int i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "scene_%04d", i);
  return buf;
}

void check_version(const fs::path& path, const nlohmann::json& j) {
  if (!j.contains("format_version")) throw IoError(path, "missing format_version");
  const int v = j.at("format_version").get<int>();
  if (v != kDatasetFormatVersion) throw FormatVersionError(path, v, kDatasetFormatVersion);
}
}  // namespace

void to_json(nlohmann::json& j, const DatasetManifest& m) {
  j = {{"format_version", m.format_version},
       {"K", m.num_classes},
       {"num_views", m.num_views},
       {"rig", m.rig},
       {"seed", m.seed}};
}

void from_json(const nlohmann::json& j, DatasetManifest& m) {
  m.format_version = j.at("format_version").get<int>();
  m.num_classes = j.at("K").get<int>();
  m.num_views = j.at("num_views").get<int>();
  m.rig = j.at("rig").get<std::string>();
  m.seed = j.at("seed").get<std::uint64_t>();
}

SceneSample generate_sample(const SceneConfig& scene_cfg, const RigConfig& rig_cfg, std::uint64_t seed) {
  SceneSample s;
  s.scene = sample_scene(scene_cfg, seed);
  for (const Camera& cam : sample_camera_rig(s.scene, rig_cfg, seed ^ 0x5EEDCAFEull)) {
    s.views.push_back(render_view(s.scene, cam));
  }
  s.manifest.num_classes = scene_cfg.num_classes;
  s.manifest.num_views = rig_cfg.num_views;
  s.manifest.rig = to_string(rig_cfg.mode);
  s.manifest.seed = seed;
  return s;
}

void export_dataset(const SceneSample& sample, const fs::path& dir) {
  fs::create_directories(dir);
  for (int i = 0; i < static_cast<int>(sample.views.size()); ++i) {
    const RenderedView& v = sample.views[i];
    write_png_rgb(dir / view_name(i, ".png"), v.image);
    write_pfm(dir / view_name(i, "_depth.pfm"), v.depth);
    write_png_labels(dir / view_name(i, "_labels.png"), v.labels);
    write_json(dir / view_name(i, "_camera.json"), camera_to_json(v.camera));
  }
  write_json(dir / "scene.json", nlohmann::json(sample.scene));
  DatasetManifest m = sample.manifest;
  m.num_views = static_cast<int>(sample.views.size());
  write_json(dir / "manifest.json", nlohmann::json(m));
}

SceneSample import_dataset(const fs::path& dir) {
  const fs::path mpath = dir / "manifest.json";
  if (!fs::exists(mpath)) throw IoError(mpath, "missing manifest");
  const nlohmann::json mj = read_json(mpath);
  check_version(mpath, mj);
  SceneSample s;
  try {
    s.manifest = mj.get<DatasetManifest>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(mpath, std::string("malformed manifest: ") + e.what());
  }
  const fs::path spath = dir / "scene.json";
  try {
    s.scene = read_json(spath).get<SceneSpec>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(spath, std::string("malformed scene: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw IoError(spath, e.what());
  }
  for (int i = 0; i < s.manifest.num_views; ++i) {
    RenderedView v;
    const fs::path cpath = dir / view_name(i, "_camera.json");
    try {
      v.camera = camera_from_json(read_json(cpath));
    } catch (const std::invalid_argument& e) {
      throw IoError(cpath, e.what());
    }
    v.image = read_png_rgb(dir / view_name(i, ".png"));
    v.depth = read_pfm(dir / view_name(i, "_depth.pfm"));
    v.labels = read_png_labels(dir / view_name(i, "_labels.png"));
    const int h = v.camera.intrinsics.height;
    const int w = v.camera.intrinsics.width;
    if (v.image.dim(1) != h || v.image.dim(2) != w || v.depth.dim(0) != h || v.depth.dim(1) != w ||
        v.labels.dim(0) != h || v.labels.dim(1) != w) {
      throw IoError(dir / view_name(i, ""), "raster sizes disagree with the camera");
    }
    s.views.push_back(std::move(v));
  }
  return s;
}

std::vector<CameraView<float>> load_views(const fs::path& dir) {
  std::vector<CameraView<float>> views;
  for (int i = 0; fs::exists(dir / view_name(i, ".png")); ++i) {
    const fs::path cpath = dir / view_name(i, "_camera.json");
    if (!fs::exists(cpath)) throw IoError(cpath, "missing camera for " + view_name(i, ".png"));
    CameraView<float> v;
    try {
      v.camera = camera_from_json(read_json(cpath));
    } catch (const std::invalid_argument& e) {
      throw IoError(cpath, e.what());
    }
    v.image = read_png_rgb(dir / view_name(i, ".png"));
    if (v.image.dim(1) != v.camera.intrinsics.height || v.image.dim(2) != v.camera.intrinsics.width) {
      throw IoError(dir / view_name(i, ".png"), "image size disagrees with the camera");
    }
    views.push_back(std::move(v));
  }
  return views;
}

void export_corpus(const SceneConfig& scene_cfg, const RigConfig& rig_cfg, int count, std::uint64_t seed,
                   const fs::path& dir) {
  for (int i = 0; i < count; ++i) {
    export_dataset(generate_sample(scene_cfg, rig_cfg, seed + static_cast<std::uint64_t>(i)), dir / scene_name(i));
  }
  write_json(dir / "manifest.json", {{"format_version", kDatasetFormatVersion},
                                     {"scenes", count},
                                     {"K", scene_cfg.num_classes},
                                     {"num_views", rig_cfg.num_views},
                                     {"rig", to_string(rig_cfg.mode)},
                                     {"seed", seed}});
}

std::vector<fs::path> list_scenes(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError(dir, "not a directory");
  if (fs::exists(dir / "scene.json")) return {dir};
  const fs::path mpath = dir / "manifest.json";
  if (fs::exists(mpath)) check_version(mpath, read_json(mpath));
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_directory() && fs::exists(e.path() / "scene.json")) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  if (out.empty()) throw IoError(dir, "no scene directories found");
  return out;
}

}  // namespace sweepstack
