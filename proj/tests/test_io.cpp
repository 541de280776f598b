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
#include "test_util.hpp"

#include <sweepstack/dataset.hpp>
#include <sweepstack/io.hpp>

#include <gtest/gtest.h>

#include <cstring>
#include <fstream>

using namespace sweepstack;
namespace fs = std::filesystem;

namespace {

void write_bytes(const fs::path& p, const std::string& bytes) {
  std::ofstream f(p, std::ios::binary);
  f << bytes;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST(Io, PfmRoundTripAndOrientation) {
  const fs::path dir = testutil::temp_dir("pfm");
  Tensor<float> d({3, 4});
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = 0.25f * static_cast<float>(i) + 0.1f;
  write_pfm(dir / "d.pfm", d);
  EXPECT_EQ(read_pfm(dir / "d.pfm"), d);
  const std::string bytes = read_bytes(dir / "d.pfm");
  ASSERT_EQ(bytes.substr(0, 3), "Pf\n");
  EXPECT_NE(bytes.find("-1"), std::string::npos);
  // Rows are stored bottom-up: the first stored float is the last row's first pixel.
  float first;
  std::memcpy(&first, bytes.data() + bytes.size() - d.size() * 4, 4);
  EXPECT_EQ(first, d.at(2, 0));
}

TEST(Io, PfmRejectsCorruptFiles) {
  const fs::path dir = testutil::temp_dir("pfm_bad");
  write_bytes(dir / "a.pfm", "PF\n4 3\n-1\n");
  EXPECT_THROW(read_pfm(dir / "a.pfm"), IoError);
  write_bytes(dir / "b.pfm", "Pf\n4 3\n-1\n0123");
  EXPECT_THROW(read_pfm(dir / "b.pfm"), IoError);
  EXPECT_THROW(read_pfm(dir / "missing.pfm"), IoError);
}

TEST(Io, PngRoundTrips) {
  const fs::path dir = testutil::temp_dir("png");
  std::mt19937_64 rng(1);
  Tensor<float> img({3, 5, 7});
  std::uniform_int_distribution<int> byte(0, 255);
  for (auto& v : img.storage()) v = static_cast<float>(byte(rng)) / 255.0f;
  write_png_rgb(dir / "i.png", img);
  EXPECT_LT(testutil::max_abs_diff(read_png_rgb(dir / "i.png"), img), 1e-7);

  Tensor<int> labels({5, 7});
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = i % 5 == 0 ? 255 : static_cast<int>(i % 3);
  write_png_labels(dir / "l.png", labels);
  EXPECT_EQ(read_png_labels(dir / "l.png"), labels);
  labels[0] = 300;
  EXPECT_THROW(write_png_labels(dir / "l2.png", labels), IoError);

  Tensor<float> depth({5, 7});
  for (std::size_t i = 0; i < depth.size(); ++i) depth[i] = 0.5f + 0.123f * static_cast<float>(i);
  depth[3] = 0.0f;
  write_png_depth_mm(dir / "d.png", depth);
  const Tensor<float> back = read_png_depth_mm(dir / "d.png");
  EXPECT_LE(testutil::max_abs_diff(back, depth), 0.0005 + 1e-6);
  EXPECT_EQ(back[3], 0.0f);
}

TEST(Io, PngRejectsGarbage) {
  const fs::path dir = testutil::temp_dir("png_bad");
  write_bytes(dir / "x.png", "not a png at all");
  EXPECT_THROW(read_png_rgb(dir / "x.png"), IoError);
  EXPECT_THROW(read_png_labels(dir / "x.png"), IoError);
}

TEST(Io, TensorFileRoundTrip) {
  const fs::path dir = testutil::temp_dir("tensor");
  std::mt19937_64 rng(2);
  const Tensor<float> t = testutil::random_tensor<float>({2, 3, 4}, rng);
  write_tensor_file(dir / "t.bin", t);
  EXPECT_EQ(read_tensor_file(dir / "t.bin"), t);
  std::string bytes = read_bytes(dir / "t.bin");
  write_bytes(dir / "short.bin", bytes.substr(0, bytes.size() - 3));
  EXPECT_THROW(read_tensor_file(dir / "short.bin"), IoError);
  bytes[0] = 'X';
  write_bytes(dir / "magic.bin", bytes);
  EXPECT_THROW(read_tensor_file(dir / "magic.bin"), IoError);
}

TEST(Io, CheckpointRoundTripAndVersion) {
  const fs::path dir = testutil::temp_dir("ckpt");
  std::mt19937_64 rng(3);
  ParameterStore<float> p;
  p.add("a.w", testutil::random_tensor<float>({3, 2}, rng));
  p.add("b", testutil::random_tensor<float>({5}, rng));
  const nlohmann::json cfg{{"stages", 2}, {"name", "x"}};
  save_checkpoint(dir / "m.ckpt", p, cfg);
  const Checkpoint c = load_checkpoint(dir / "m.ckpt");
  EXPECT_EQ(c.config, cfg);
  ASSERT_EQ(c.params.tensors().size(), 2u);
  EXPECT_EQ(c.params.get("a.w"), p.get("a.w"));
  EXPECT_EQ(c.params.get("b"), p.get("b"));

  std::string bytes = read_bytes(dir / "m.ckpt");
  bytes[8] = 7;  // version field follows the 8-byte magic
  write_bytes(dir / "v.ckpt", bytes);
  try {
    load_checkpoint(dir / "v.ckpt");
    FAIL() << "expected FormatVersionError";
  } catch (const FormatVersionError& e) {
    EXPECT_EQ(e.found(), 7);
    EXPECT_EQ(e.expected(), kCheckpointVersion);
  }
  write_bytes(dir / "t.ckpt", read_bytes(dir / "m.ckpt").substr(0, 40));
  EXPECT_THROW(load_checkpoint(dir / "t.ckpt"), IoError);
}

TEST(Io, PaletteHasOneColorPerClass) {
  const nlohmann::json p = label_palette(4);
  EXPECT_EQ(p.at("num_classes"), 4);
  EXPECT_EQ(p.at("ignore"), 255);
  EXPECT_EQ(p.at("colors").size(), 4u);
}

TEST(Dataset, ExportImportRoundTrip) {
  const fs::path dir = testutil::temp_dir("dataset");
  const SceneSample s = generate_sample(SceneConfig{}, RigConfig{}, 21);
  export_dataset(s, dir);
  for (const char* f : {"view_0000.png", "view_0000_depth.pfm", "view_0000_labels.png", "view_0002_camera.json",
                        "scene.json", "manifest.json"}) {
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  }
  const SceneSample r = import_dataset(dir);
  ASSERT_EQ(r.views.size(), s.views.size());
  for (std::size_t i = 0; i < s.views.size(); ++i) {
    EXPECT_EQ(r.views[i].image, s.views[i].image);
    EXPECT_EQ(r.views[i].depth, s.views[i].depth);
    EXPECT_EQ(r.views[i].labels, s.views[i].labels);
    EXPECT_EQ(r.views[i].camera.pose.rotation, s.views[i].camera.pose.rotation);
  }
  EXPECT_EQ(r.manifest.seed, 21u);
  EXPECT_EQ(r.manifest.num_views, 3);
  EXPECT_EQ(nlohmann::json(r.scene), nlohmann::json(s.scene));
}

TEST(Dataset, VersionMismatchRejected) {
  const fs::path dir = testutil::temp_dir("dataset_version");
  export_dataset(generate_sample(SceneConfig{}, RigConfig{}, 1), dir);
  nlohmann::json m = read_json(dir / "manifest.json");
  m["format_version"] = kDatasetFormatVersion + 1;
  write_json(dir / "manifest.json", m);
  EXPECT_THROW(import_dataset(dir), FormatVersionError);
}

TEST(Dataset, MissingViewReported) {
  const fs::path dir = testutil::temp_dir("dataset_missing");
  export_dataset(generate_sample(SceneConfig{}, RigConfig{}, 2), dir);
  fs::remove(dir / "view_0001_depth.pfm");
  EXPECT_THROW(import_dataset(dir), IoError);
}

TEST(Dataset, CorpusListing) {
  const fs::path dir = testutil::temp_dir("corpus");
  RigConfig rig;
  rig.width = rig.height = 16;
  export_corpus(SceneConfig{}, rig, 3, 40, dir);
  const auto scenes = list_scenes(dir);
  ASSERT_EQ(scenes.size(), 3u);
  EXPECT_EQ(scenes[2].filename(), "scene_0002");
  EXPECT_EQ(import_dataset(scenes[1]).manifest.seed, 41u);
  EXPECT_EQ(list_scenes(scenes[0]).size(), 1u);
}
