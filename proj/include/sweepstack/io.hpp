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

// File formats: PFM/PNG rasters, camera JSON, raw tensors and checkpoints.
// See docs/formats.md for byte layouts.

#include <sweepstack/geometry.hpp>
#include <sweepstack/params.hpp>

#include <nlohmann/json.hpp>

#include <filesystem>
#include <stdexcept>
#include <string>

namespace sweepstack {

class IoError : public std::runtime_error {
 public:
  IoError(const std::filesystem::path& path, const std::string& what)
      : std::runtime_error(path.string() + ": " + what), path_(path) {}
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

class FormatVersionError : public IoError {
 public:
  FormatVersionError(const std::filesystem::path& path, int found, int expected)
      : IoError(path, "format version " + std::to_string(found) + " is not supported (expected " +
                          std::to_string(expected) + ")"),
        found_(found),
        expected_(expected) {}
  int found() const { return found_; }
  int expected() const { return expected_; }

 private:
  int found_;
  int expected_;
};

/// Single-channel little-endian PFM ("Pf", negative scale), rows stored bottom-up.
void write_pfm(const std::filesystem::path& path, const Tensor<float>& map);
Tensor<float> read_pfm(const std::filesystem::path& path);

/// 8-bit RGB; values in [0,1] are rounded to the nearest 1/255.
void write_png_rgb(const std::filesystem::path& path, const Tensor<float>& image);
Tensor<float> read_png_rgb(const std::filesystem::path& path);

/// 8-bit grayscale labels; values must lie in [0,255].
void write_png_labels(const std::filesystem::path& path, const Tensor<int>& labels);
Tensor<int> read_png_labels(const std::filesystem::path& path);

/// 16-bit grayscale depth in millimeters (0 = invalid, saturates at 65535).
void write_png_depth_mm(const std::filesystem::path& path, const Tensor<float>& depth);
Tensor<float> read_png_depth_mm(const std::filesystem::path& path);

nlohmann::json read_json(const std::filesystem::path& path);
void write_json(const std::filesystem::path& path, const nlohmann::json& j);

nlohmann::json camera_to_json(const Camera& cam);
/// Rejects unknown conventions, wrong array lengths and non-orthonormal rotations.
Camera camera_from_json(const nlohmann::json& j);

/// Label palette sidecar: {"num_classes", "ignore", "colors": [[r,g,b],...]}.
nlohmann::json label_palette(int num_classes);

/// Raw tensor file: "SWTENSOR", u32 version, u8 dtype, u32 ndim, i64 dims, data.
void write_tensor_file(const std::filesystem::path& path, const Tensor<float>& t);
Tensor<float> read_tensor_file(const std::filesystem::path& path);

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  ParameterStore<float> params;
  nlohmann::json config;
};

void save_checkpoint(const std::filesystem::path& path, const ParameterStore<float>& params,
                     const nlohmann::json& config);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace sweepstack
