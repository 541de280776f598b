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
#include <sweepstack/features.hpp>

#include <bit>
#include <stdexcept>

namespace sweepstack {

namespace {

template <typename T>
void add_conv(ParameterStore<T>& store, const std::string& name, int cin, int cout, int k, std::mt19937_64& rng) {
  store.add(name + ".w", he_uniform<T>({cout, cin, k, k}, cin * k * k, rng));
  store.add(name + ".b", Tensor<T>({cout}));
}

template <typename T>
Var<T> conv(Var<T> x, const ParameterStore<T>& p, const std::string& name, int stride = 1) {
  Tape<T>& tape = *x.tape;
  Var<T> w = tape.param(p, name + ".w");
  const int k = w.dim(2);
  return ad::conv2d(x, w, tape.param(p, name + ".b"), stride, k / 2);
}

int semantic_layers(const FeatureConfig& cfg) { return std::countr_zero(static_cast<unsigned>(cfg.token_stride)); }

int semantic_width(const FeatureConfig& cfg, int layer) {
  const int n = semantic_layers(cfg);
  if (layer == n - 1) return cfg.semantic_channels;
  return std::min(cfg.semantic_channels, 16 << layer);
}

template <typename T>
void check_image(const Var<T>& image, int divisor, const char* op) {
  const Tensor<T>& v = image.value();
  if (v.ndim() != 3 || v.dim(0) != 3) {
    throw ShapeError(std::string(op) + ": expected image [3,H,W], got " + shape_str(v.shape()));
  }
  if (v.dim(1) % divisor != 0 || v.dim(2) % divisor != 0) {
    throw std::invalid_argument(std::string(op) + ": image " + std::to_string(v.dim(2)) + "x" +
                                std::to_string(v.dim(1)) + " not divisible by " + std::to_string(divisor));
  }
}

}  // namespace

void FeatureConfig::validate() const {
  for (int c : pyramid_channels) {
    if (c <= 0) throw std::invalid_argument("pyramid channel widths must be positive");
  }
  if (semantic_channels <= 0) throw std::invalid_argument("semantic channel width must be positive");
  if (token_stride < 2 || !std::has_single_bit(static_cast<unsigned>(token_stride))) {
    throw std::invalid_argument("token stride must be a power of two >= 2");
  }
}

template <typename T>
void init_feature_params(ParameterStore<T>& store, const FeatureConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  const auto [c_coarse, c_mid, c_fine] = cfg.pyramid_channels;
  const int b = c_fine;
  const int inner = c_coarse;
  add_conv(store, "geo.conv0a", 3, b, 3, rng);
  add_conv(store, "geo.conv0b", b, b, 3, rng);
  add_conv(store, "geo.conv1a", b, 2 * b, 3, rng);
  add_conv(store, "geo.conv1b", 2 * b, 2 * b, 3, rng);
  add_conv(store, "geo.conv2a", 2 * b, 4 * b, 3, rng);
  add_conv(store, "geo.conv2b", 4 * b, 4 * b, 3, rng);
  add_conv(store, "geo.top", 4 * b, inner, 1, rng);
  add_conv(store, "geo.lat1", 2 * b, inner, 1, rng);
  add_conv(store, "geo.lat0", b, inner, 1, rng);
  add_conv(store, "geo.out0", inner, c_coarse, 1, rng);
  add_conv(store, "geo.out1", inner, c_mid, 3, rng);
  add_conv(store, "geo.out2", inner, c_fine, 3, rng);

  int cin = 3;
  for (int i = 0; i < semantic_layers(cfg); ++i) {
    const int cout = semantic_width(cfg, i);
    add_conv(store, "sem.conv" + std::to_string(i), cin, cout, 3, rng);
    cin = cout;
  }
  add_conv(store, "sem.head", cfg.semantic_channels, cfg.semantic_channels, 3, rng);

  for (int s = 0; s < 3; ++s) {
    const int c = cfg.pyramid_channels[s];
    add_conv(store, "adapt" + std::to_string(s) + ".a", cfg.semantic_channels, c, 1, rng);
    add_conv(store, "adapt" + std::to_string(s) + ".b", c, c, 1, rng);
  }
}

template <typename T>
FeaturePyramid<T> extract_geometric_pyramid(Var<T> image, const ParameterStore<T>& p, const FeatureConfig& cfg) {
  check_image(image, 4, "extract_geometric_pyramid");
  (void)cfg;
  Var<T> f0 = ad::relu(conv(ad::relu(conv(image, p, "geo.conv0a")), p, "geo.conv0b"));
  Var<T> f1 = ad::relu(conv(ad::relu(conv(f0, p, "geo.conv1a", 2)), p, "geo.conv1b"));
  Var<T> f2 = ad::relu(conv(ad::relu(conv(f1, p, "geo.conv2a", 2)), p, "geo.conv2b"));

  FeaturePyramid<T> out;
  Var<T> inner = conv(f2, p, "geo.top");
  out.levels[0] = conv(inner, p, "geo.out0");
  inner = ad::add(ad::resize_bilinear(inner, f1.dim(1), f1.dim(2)), conv(f1, p, "geo.lat1"));
  out.levels[1] = conv(inner, p, "geo.out1");
  inner = ad::add(ad::resize_bilinear(inner, f0.dim(1), f0.dim(2)), conv(f0, p, "geo.lat0"));
  out.levels[2] = conv(inner, p, "geo.out2");
  return out;
}

template <typename T>
Var<T> extract_semantic_features(Var<T> image, const ParameterStore<T>& p, const FeatureConfig& cfg) {
  check_image(image, cfg.token_stride, "extract_semantic_features");
  Var<T> x = image;
  for (int i = 0; i < semantic_layers(cfg); ++i) x = ad::relu(conv(x, p, "sem.conv" + std::to_string(i), 2));
  return conv(x, p, "sem.head");
}

template <typename T>
FeaturePyramid<T> adapt_semantic_pyramid(Var<T> tokens, int height, int width, const ParameterStore<T>& p,
                                         const FeatureConfig& cfg) {
  if (tokens.value().ndim() != 3 || tokens.dim(0) != cfg.semantic_channels) {
    throw ShapeError("adapt_semantic_pyramid: expected [" + std::to_string(cfg.semantic_channels) +
                     ",h,w] tokens, got " + shape_str(tokens.shape()));
  }
  FeaturePyramid<T> out;
  for (int s = 0; s < 3; ++s) {
    const int div = 4 >> s;
    const std::string name = "adapt" + std::to_string(s);
    Var<T> r = ad::resize_bilinear(tokens, height / div, width / div);
    out.levels[s] = conv(ad::relu(conv(r, p, name + ".a")), p, name + ".b");
  }
  return out;
}

template <typename T>
FeaturePyramid<T> fuse(const FeaturePyramid<T>& geo, const FeaturePyramid<T>& sem) {
  FeaturePyramid<T> out;
  for (int s = 0; s < 3; ++s) out.levels[s] = ad::add(geo.levels[s], sem.levels[s]);
  return out;
}

template <typename T>
FeaturePyramid<T> zeros_like(const FeaturePyramid<T>& like) {
  FeaturePyramid<T> out;
  for (int s = 0; s < 3; ++s) out.levels[s] = like.levels[s].tape->constant(Tensor<T>(like.levels[s].shape()));
  return out;
}

#define SWEEPSTACK_INSTANTIATE(T)                                                                          \
  template void init_feature_params(ParameterStore<T>&, const FeatureConfig&, std::mt19937_64&);           \
  template FeaturePyramid<T> extract_geometric_pyramid(Var<T>, const ParameterStore<T>&, const FeatureConfig&); \
  template Var<T> extract_semantic_features(Var<T>, const ParameterStore<T>&, const FeatureConfig&);      \
  template FeaturePyramid<T> adapt_semantic_pyramid(Var<T>, int, int, const ParameterStore<T>&,            \
                                                    const FeatureConfig&);                                 \
  template FeaturePyramid<T> fuse(const FeaturePyramid<T>&, const FeaturePyramid<T>&);                     \
  template FeaturePyramid<T> zeros_like(const FeaturePyramid<T>&);

SWEEPSTACK_INSTANTIATE(float)
SWEEPSTACK_INSTANTIATE(double)
#undef SWEEPSTACK_INSTANTIATE

}  // namespace sweepstack
