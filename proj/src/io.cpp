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
#include <sweepstack/io.hpp>

#include <png.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <sstream>
#include <vector>

namespace sweepstack {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

namespace {

namespace fs = std::filesystem;

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError(path, "cannot open for writing");
  return f;
}

std::ifstream open_in(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError(path, "cannot open for reading");
  return f;
}

template <typename V>
void put(std::ostream& os, V v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V get(std::istream& is, const fs::path& path) {
  V v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(V))) throw IoError(path, "truncated file");
  return v;
}

void check_2d(const Tensor<float>& t, const fs::path& path) {
  if (t.ndim() != 2) throw IoError(path, "expected a [H,W] map, got " + shape_str(t.shape()));
}

// --- PNG ------------------------------------------------------------------

struct PngImage {
  int width = 0;
  int height = 0;
  int channels = 0;
  int bit_depth = 0;
  std::vector<std::uint8_t> bytes;  // row-major, 16-bit samples big-endian as in the file
};

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};

void write_png(const fs::path& path, const PngImage& img) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::unique_ptr<std::FILE, FileCloser> fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw IoError(path, "cannot open for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw IoError(path, "libpng initialization failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError(path, "libpng write error");
  }
  png_init_io(png, fp.get());
  const int color = img.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY;
  png_set_IHDR(png, info, img.width, img.height, img.bit_depth, color, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  const std::size_t stride = static_cast<std::size_t>(img.width) * img.channels * (img.bit_depth / 8);
  for (int y = 0; y < img.height; ++y) {
    png_write_row(png, const_cast<png_bytep>(img.bytes.data() + y * stride));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

PngImage read_png(const fs::path& path) {
  std::unique_ptr<std::FILE, FileCloser> fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw IoError(path, "cannot open for reading");
  png_byte sig[8];
  if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) throw IoError(path, "not a PNG file");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError(path, "libpng initialization failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError(path, "corrupt PNG data");
  }
  png_init_io(png, fp.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  PngImage img;
  img.width = static_cast<int>(png_get_image_width(png, info));
  img.height = static_cast<int>(png_get_image_height(png, info));
  img.bit_depth = png_get_bit_depth(png, info);
  const int color = png_get_color_type(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && img.bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  img.bit_depth = png_get_bit_depth(png, info);
  img.channels = png_get_channels(png, info);
  const std::size_t stride = png_get_rowbytes(png, info);
  img.bytes.resize(stride * img.height);
  for (int y = 0; y < img.height; ++y) png_read_row(png, img.bytes.data() + y * stride, nullptr);
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

std::vector<double> rgb_of(int k) {
  static const std::vector<std::vector<double>> base = {
      {230, 25, 75}, {60, 180, 75}, {0, 130, 200}, {255, 225, 25}, {245, 130, 48}, {145, 30, 180},
      {70, 240, 240}, {240, 50, 230}, {210, 245, 60}, {250, 190, 190}, {0, 128, 128}, {170, 110, 40}};
  return base[static_cast<std::size_t>(k) % base.size()];
}

}  // namespace

void write_pfm(const fs::path& path, const Tensor<float>& map) {
  check_2d(map, path);
  auto f = open_out(path);
  const int h = map.dim(0);
  const int w = map.dim(1);
  f << "Pf\n" << w << " " << h << "\n-1.0\n";
  for (int y = h - 1; y >= 0; --y) f.write(reinterpret_cast<const char*>(map.data() + static_cast<std::size_t>(y) * w), sizeof(float) * w);
  if (!f) throw IoError(path, "write failed");
}

Tensor<float> read_pfm(const fs::path& path) {
  auto f = open_in(path);
  std::string magic;
  int w = 0, h = 0;
  double scale = 0;
  f >> magic >> w >> h >> scale;
  if (!f || magic != "Pf") throw IoError(path, magic == "PF" ? "color PFM is not supported" : "not a PFM file");
  if (w <= 0 || h <= 0) throw IoError(path, "invalid PFM size");
  if (scale >= 0) throw IoError(path, "big-endian PFM is not supported");
  f.get();  // single whitespace after the scale
  Tensor<float> out({h, w});
  for (int y = h - 1; y >= 0; --y) {
    if (!f.read(reinterpret_cast<char*>(out.data() + static_cast<std::size_t>(y) * w), sizeof(float) * w)) {
      throw IoError(path, "truncated PFM data");
    }
  }
  const float s = static_cast<float>(std::abs(scale));
  if (s != 1.0f) for (auto& v : out.values()) v *= s;
  return out;
}

void write_png_rgb(const fs::path& path, const Tensor<float>& image) {
  if (image.ndim() != 3 || image.dim(0) != 3) throw IoError(path, "expected a [3,H,W] image, got " + shape_str(image.shape()));
  PngImage img{image.dim(2), image.dim(1), 3, 8, {}};
  img.bytes.resize(static_cast<std::size_t>(img.width) * img.height * 3);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) {
        const double v = std::clamp(static_cast<double>(image.at(c, y, x)), 0.0, 1.0);
        img.bytes[(static_cast<std::size_t>(y) * img.width + x) * 3 + c] = static_cast<std::uint8_t>(std::lround(v * 255.0));
      }
  write_png(path, img);
}

Tensor<float> read_png_rgb(const fs::path& path) {
  PngImage img = read_png(path);
  if (img.bit_depth != 8) throw IoError(path, "expected an 8-bit image");
  Tensor<float> out({3, img.height, img.width});
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) {
        const int src = img.channels >= 3 ? c : 0;
        out.at(c, y, x) = img.bytes[(static_cast<std::size_t>(y) * img.width + x) * img.channels + src] / 255.0f;
      }
  return out;
}

void write_png_labels(const fs::path& path, const Tensor<int>& labels) {
  if (labels.ndim() != 2) throw IoError(path, "expected a [H,W] label map");
  PngImage img{labels.dim(1), labels.dim(0), 1, 8, {}};
  img.bytes.resize(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] > 255) throw IoError(path, "label " + std::to_string(labels[i]) + " outside [0,255]");
    img.bytes[i] = static_cast<std::uint8_t>(labels[i]);
  }
  write_png(path, img);
}

Tensor<int> read_png_labels(const fs::path& path) {
  PngImage img = read_png(path);
  if (img.bit_depth != 8 || img.channels != 1) throw IoError(path, "expected an 8-bit grayscale label map");
  Tensor<int> out({img.height, img.width});
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = img.bytes[i];
  return out;
}

void write_png_depth_mm(const fs::path& path, const Tensor<float>& depth) {
  check_2d(depth, path);
  PngImage img{depth.dim(1), depth.dim(0), 1, 16, {}};
  img.bytes.resize(depth.size() * 2);
  for (std::size_t i = 0; i < depth.size(); ++i) {
    const double mm = std::isfinite(depth[i]) ? std::clamp(std::round(depth[i] * 1000.0), 0.0, 65535.0) : 0.0;
    const auto v = static_cast<std::uint16_t>(mm);
    img.bytes[2 * i] = static_cast<std::uint8_t>(v >> 8);
    img.bytes[2 * i + 1] = static_cast<std::uint8_t>(v & 0xFF);
  }
  write_png(path, img);
}

Tensor<float> read_png_depth_mm(const fs::path& path) {
  PngImage img = read_png(path);
  if (img.bit_depth != 16 || img.channels != 1) throw IoError(path, "expected a 16-bit grayscale depth map");
  Tensor<float> out({img.height, img.width});
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<float>((img.bytes[2 * i] << 8 | img.bytes[2 * i + 1]) / 1000.0);
  }
  return out;
}

nlohmann::json read_json(const fs::path& path) {
  auto f = open_in(path);
  try {
    return nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path, std::string("invalid JSON: ") + e.what());
  }
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  auto f = open_out(path);
  f << j.dump(2) << "\n";
  if (!f) throw IoError(path, "write failed");
}

nlohmann::json camera_to_json(const Camera& cam) {
  const auto& in = cam.intrinsics;
  std::vector<double> r(9);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) r[i * 3 + j] = cam.pose.rotation(i, j);
  const auto& t = cam.pose.translation;
  return {{"fx", in.fx},         {"fy", in.fy},         {"cx", in.cx},
          {"cy", in.cy},         {"width", in.width},   {"height", in.height},
          {"rotation", r},       {"translation", {t.x(), t.y(), t.z()}},
          {"convention", "cam2world"}};
}

Camera camera_from_json(const nlohmann::json& j) {
  try {
    const auto conv = j.value("convention", std::string("cam2world"));
    if (conv != "cam2world") throw std::invalid_argument("unsupported camera convention '" + conv + "'");
    Camera cam;
    cam.intrinsics.fx = j.at("fx").get<double>();
    cam.intrinsics.fy = j.at("fy").get<double>();
    cam.intrinsics.cx = j.at("cx").get<double>();
    cam.intrinsics.cy = j.at("cy").get<double>();
    cam.intrinsics.width = j.at("width").get<int>();
    cam.intrinsics.height = j.at("height").get<int>();
    cam.intrinsics.validate();
    const auto r = j.at("rotation").get<std::vector<double>>();
    const auto t = j.at("translation").get<std::vector<double>>();
    if (r.size() != 9) throw std::invalid_argument("camera rotation needs 9 values");
    if (t.size() != 3) throw std::invalid_argument("camera translation needs 3 values");
    Eigen::Matrix3d R;
    for (int a = 0; a < 3; ++a)
      for (int b = 0; b < 3; ++b) R(a, b) = r[a * 3 + b];
    cam.pose = CameraPose::from_rt(R, Eigen::Vector3d(t[0], t[1], t[2]));
    return cam;
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("malformed camera JSON: ") + e.what());
  }
}

nlohmann::json label_palette(int num_classes) {
  nlohmann::json colors = nlohmann::json::array();
  for (int k = 0; k < num_classes; ++k) colors.push_back(rgb_of(k));
  return {{"num_classes", num_classes}, {"ignore", 255}, {"colors", colors}};
}

namespace {
constexpr char kTensorMagic[8] = {'S', 'W', 'T', 'E', 'N', 'S', 'O', 'R'};
constexpr char kCkptMagic[8] = {'S', 'W', 'S', 'T', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kTensorVersion = 1;
constexpr std::uint8_t kDtypeF32 = 0;
constexpr std::uint8_t kDtypeF64 = 1;

void put_tensor_body(std::ostream& os, const Tensor<float>& t) {
  put<std::uint8_t>(os, kDtypeF32);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(t.ndim()));
  for (int d : t.shape()) put<std::int64_t>(os, d);
  os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(sizeof(float) * t.size()));
}

Tensor<float> get_tensor_body(std::istream& is, const fs::path& path) {
  const auto dtype = get<std::uint8_t>(is, path);
  if (dtype != kDtypeF32 && dtype != kDtypeF64) throw IoError(path, "unknown dtype " + std::to_string(dtype));
  const auto nd = get<std::uint32_t>(is, path);
  if (nd > 8) throw IoError(path, "implausible tensor rank " + std::to_string(nd));
  Shape shape;
  for (std::uint32_t i = 0; i < nd; ++i) {
    const auto d = get<std::int64_t>(is, path);
    if (d < 0 || d > (1 << 30)) throw IoError(path, "implausible tensor dimension");
    shape.push_back(static_cast<int>(d));
  }
  Tensor<float> t(shape);
  if (dtype == kDtypeF32) {
    if (!is.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(sizeof(float) * t.size()))) {
      throw IoError(path, "truncated tensor data");
    }
  } else {
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(get<double>(is, path));
  }
  return t;
}

void check_magic(std::istream& is, const char (&magic)[8], const fs::path& path, const char* what) {
  char buf[8];
  if (!is.read(buf, 8) || std::memcmp(buf, magic, 8) != 0) throw IoError(path, std::string("not a ") + what + " file");
}
}  // namespace

void write_tensor_file(const fs::path& path, const Tensor<float>& t) {
  auto f = open_out(path);
  f.write(kTensorMagic, 8);
  put<std::uint32_t>(f, kTensorVersion);
  put_tensor_body(f, t);
  if (!f) throw IoError(path, "write failed");
}

Tensor<float> read_tensor_file(const fs::path& path) {
  auto f = open_in(path);
  check_magic(f, kTensorMagic, path, "tensor");
  const auto version = get<std::uint32_t>(f, path);
  if (version != kTensorVersion) throw FormatVersionError(path, static_cast<int>(version), kTensorVersion);
  return get_tensor_body(f, path);
}

void save_checkpoint(const fs::path& path, const ParameterStore<float>& params, const nlohmann::json& config) {
  auto f = open_out(path);
  f.write(kCkptMagic, 8);
  put<std::uint32_t>(f, kCheckpointVersion);
  const std::string cfg = config.is_null() ? std::string() : config.dump();
  put<std::uint32_t>(f, static_cast<std::uint32_t>(cfg.size()));
  f.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  put<std::uint32_t>(f, static_cast<std::uint32_t>(params.tensors().size()));
  for (const auto& [name, t] : params.tensors()) {
    put<std::uint32_t>(f, static_cast<std::uint32_t>(name.size()));
    f.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_tensor_body(f, t);
  }
  if (!f) throw IoError(path, "write failed");
}

Checkpoint load_checkpoint(const fs::path& path) {
  auto f = open_in(path);
  check_magic(f, kCkptMagic, path, "checkpoint");
  const auto version = get<std::uint32_t>(f, path);
  if (version != static_cast<std::uint32_t>(kCheckpointVersion)) {
    throw FormatVersionError(path, static_cast<int>(version), kCheckpointVersion);
  }
  Checkpoint ck;
  const auto cfg_len = get<std::uint32_t>(f, path);
  std::string cfg(cfg_len, '\0');
  if (!f.read(cfg.data(), cfg_len)) throw IoError(path, "truncated config block");
  if (!cfg.empty()) {
    try {
      ck.config = nlohmann::json::parse(cfg);
    } catch (const nlohmann::json::exception& e) {
      throw IoError(path, std::string("invalid embedded config: ") + e.what());
    }
  }
  const auto count = get<std::uint32_t>(f, path);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = get<std::uint32_t>(f, path);
    if (len > 4096) throw IoError(path, "implausible tensor name length");
    std::string name(len, '\0');
    if (!f.read(name.data(), len)) throw IoError(path, "truncated tensor name");
    ck.params.add(name, get_tensor_body(f, path));
  }
  return ck;
}

}  // namespace sweepstack
