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
#include <sweepstack/decoder.hpp>

#include <cmath>
#include <stdexcept>

namespace sweepstack {

void DecoderConfig::validate() const {
  if (num_classes < 1) throw std::invalid_argument("decoder: need at least one class");
  if (width <= 0 || heads <= 0 || width % heads != 0) {
    throw std::invalid_argument("decoder: head count must divide the decoder width");
  }
  if (width % 4 != 0) throw std::invalid_argument("decoder: width must be divisible by 4 for positional encodings");
  if (blocks < 0 || mlp_hidden <= 0 || upscale_channels <= 0 || embed_in_channels <= 0 || prompt_hidden <= 0) {
    throw std::invalid_argument("decoder: widths must be positive");
  }
}

namespace {

template <typename T>
void add_linear(ParameterStore<T>& s, const std::string& name, int cin, int cout, std::mt19937_64& rng) {
  s.add(name + ".w", he_uniform<T>({cout, cin}, cin, rng));
  s.add(name + ".b", Tensor<T>({cout}));
}

template <typename T>
void add_attention(ParameterStore<T>& s, const std::string& name, int c, std::mt19937_64& rng) {
  for (const char* p : {".q", ".k", ".v", ".o"}) add_linear(s, name + p, c, c, rng);
}

template <typename T>
void add_norm(ParameterStore<T>& s, const std::string& name, int c) {
  s.add(name + ".g", Tensor<T>({c}, T(1)));
  s.add(name + ".b", Tensor<T>({c}));
}

template <typename T>
Var<T> lin(Var<T> x, const ParameterStore<T>& p, const std::string& name) {
  Tape<T>& t = *x.tape;
  return ad::linear(x, t.param(p, name + ".w"), t.param(p, name + ".b"));
}

template <typename T>
Var<T> norm(Var<T> x, const ParameterStore<T>& p, const std::string& name) {
  Tape<T>& t = *x.tape;
  return ad::layer_norm(x, t.param(p, name + ".g"), t.param(p, name + ".b"));
}

template <typename T>
Var<T> mlp(Var<T> x, const ParameterStore<T>& p, const std::string& name) {
  return lin(ad::relu(lin(x, p, name + ".fc1")), p, name + ".fc2");
}

// [C,h,w] <-> [h*w, C]
template <typename T>
Var<T> to_tokens(Var<T> image) {
  return ad::transpose(ad::reshape(image, {image.dim(0), image.dim(1) * image.dim(2)}));
}

template <typename T>
Var<T> to_image(Var<T> tokens, int h, int w) {
  return ad::reshape(ad::transpose(tokens), {tokens.dim(1), h, w});
}

// Two-way block on flattened image tokens [N, C].
template <typename T>
std::pair<Var<T>, Var<T>> block_flat(Var<T> tok, Var<T> img, Var<T> pos, const ParameterStore<T>& p,
                                     const std::string& b, int heads) {
  tok = norm(ad::add(tok, attention(tok, tok, tok, p, b + ".self", heads)), p, b + ".norm1");
  tok = norm(ad::add(tok, attention(tok, ad::add(img, pos), img, p, b + ".t2i", heads)), p, b + ".norm2");
  tok = norm(ad::add(tok, mlp(tok, p, b + ".mlp")), p, b + ".norm3");
  img = norm(ad::add(img, attention(ad::add(img, pos), tok, tok, p, b + ".i2t", heads)), p, b + ".norm4");
  return {tok, img};
}

}  // namespace

template <typename T>
void init_decoder_params(ParameterStore<T>& s, const DecoderConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  const int c = cfg.width;
  Tensor<T> tokens({cfg.num_classes, c});
  std::normal_distribution<double> normal(0.0, 1.0);
  for (auto& v : tokens.values()) v = static_cast<T>(normal(rng));
  s.add("dec.tokens", std::move(tokens));

  s.add("dec.embed.w", he_uniform<T>({c, cfg.embed_in_channels, 1, 1}, cfg.embed_in_channels, rng));
  s.add("dec.embed.b", Tensor<T>({c}));
  s.add("dec.prompt.conv0.w", he_uniform<T>({cfg.prompt_hidden, 1, 3, 3}, 9, rng));
  s.add("dec.prompt.conv0.b", Tensor<T>({cfg.prompt_hidden}));
  s.add("dec.prompt.conv1.w", he_uniform<T>({c, cfg.prompt_hidden, 3, 3}, cfg.prompt_hidden * 9, rng));
  s.add("dec.prompt.conv1.b", Tensor<T>({c}));

  for (int b = 0; b < cfg.blocks; ++b) {
    const std::string n = "dec.block" + std::to_string(b);
    add_attention(s, n + ".self", c, rng);
    add_attention(s, n + ".t2i", c, rng);
    add_attention(s, n + ".i2t", c, rng);
    add_linear(s, n + ".mlp.fc1", c, cfg.mlp_hidden, rng);
    add_linear(s, n + ".mlp.fc2", cfg.mlp_hidden, c, rng);
    for (int k = 1; k <= 4; ++k) add_norm(s, n + ".norm" + std::to_string(k), c);
  }
  add_attention(s, "dec.final", c, rng);
  add_norm(s, "dec.final.norm", c);
  add_linear(s, "dec.query.fc1", c, c, rng);
  add_linear(s, "dec.query.fc2", c, cfg.upscale_channels, rng);

  const int cu = cfg.upscale_channels;
  s.add("dec.up0.w", he_uniform<T>({c, cu, 2, 2}, c, rng));
  s.add("dec.up0.b", Tensor<T>({cu}));
  s.add("dec.up1.w", he_uniform<T>({cu, cu, 2, 2}, cu, rng));
  s.add("dec.up1.b", Tensor<T>({cu}));
}

template <typename T>
Tensor<T> positional_encoding(int h, int w, int width) {
  Tensor<T> pe({h * w, width});
  const int quarter = width / 4;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int row = y * w + x;
      for (int i = 0; i < quarter; ++i) {
        const double freq = std::pow(10000.0, -static_cast<double>(i) / quarter);
        pe.at(row, 2 * i) = static_cast<T>(std::sin(y * freq));
        pe.at(row, 2 * i + 1) = static_cast<T>(std::cos(y * freq));
        pe.at(row, 2 * quarter + 2 * i) = static_cast<T>(std::sin(x * freq));
        pe.at(row, 2 * quarter + 2 * i + 1) = static_cast<T>(std::cos(x * freq));
      }
    }
  }
  return pe;
}

template <typename T>
Var<T> embed_depth_prompt(Var<T> depth, double d_min, double d_max, const ParameterStore<T>& p) {
  if (depth.value().ndim() != 2) throw ShapeError("embed_depth_prompt: depth must be [H,W], got " + shape_str(depth.shape()));
  Tape<T>& t = *depth.tape;
  Var<T> n = ad::scale(ad::add_scalar(depth, static_cast<T>(-d_min)), static_cast<T>(1.0 / (d_max - d_min)));
  n = ad::reshape(ad::clamp(n, T(0), T(1)), {1, depth.dim(0), depth.dim(1)});
  Var<T> h = ad::relu(ad::conv2d(n, t.param(p, "dec.prompt.conv0.w"), t.param(p, "dec.prompt.conv0.b"), 2, 1));
  return ad::conv2d(h, t.param(p, "dec.prompt.conv1.w"), t.param(p, "dec.prompt.conv1.b"), 2, 1);
}

template <typename T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, const ParameterStore<T>& p, const std::string& prefix, int heads,
                 std::vector<Tensor<T>>* weights) {
  const int c = q.dim(1);
  if (k.dim(1) != c || v.dim(1) != c || k.dim(0) != v.dim(0) || c % heads != 0) {
    throw ShapeError("attention: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) + ", v " +
                     shape_str(v.shape()) + " with " + std::to_string(heads) + " heads");
  }
  const int dh = c / heads;
  Var<T> qp = lin(q, p, prefix + ".q");
  Var<T> kp = lin(k, p, prefix + ".k");
  Var<T> vp = lin(v, p, prefix + ".v");
  std::vector<Var<T>> outs;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  for (int h = 0; h < heads; ++h) {
    Var<T> qh = heads == 1 ? qp : ad::slice_cols(qp, h * dh, dh);
    Var<T> kh = heads == 1 ? kp : ad::slice_cols(kp, h * dh, dh);
    Var<T> vh = heads == 1 ? vp : ad::slice_cols(vp, h * dh, dh);
    Var<T> attn = ad::softmax(ad::scale(ad::matmul(qh, kh, false, true), scale), 1);
    if (weights) weights->push_back(attn.value());
    outs.push_back(ad::matmul(attn, vh));
  }
  Var<T> merged = heads == 1 ? outs[0] : ad::concat_cols<T>(outs);
  return lin(merged, p, prefix + ".o");
}

template <typename T>
std::pair<Var<T>, Var<T>> two_way_block(Var<T> tokens, Var<T> image, Var<T> pos, const ParameterStore<T>& p,
                                        int block, int heads) {
  const int h = image.dim(1);
  const int w = image.dim(2);
  auto [tok, img] = block_flat(tokens, to_tokens(image), pos, p, "dec.block" + std::to_string(block), heads);
  return {tok, to_image(img, h, w)};
}

template <typename T>
Var<T> upscale_embeddings(Var<T> image, const ParameterStore<T>& p) {
  Tape<T>& t = *image.tape;
  Var<T> x = ad::gelu(ad::conv_transpose2d(image, t.param(p, "dec.up0.w"), t.param(p, "dec.up0.b"), 2));
  return ad::gelu(ad::conv_transpose2d(x, t.param(p, "dec.up1.w"), t.param(p, "dec.up1.b"), 2));
}

template <typename T>
Var<T> decode_masks(Var<T> queries, Var<T> upscaled) {
  if (upscaled.value().ndim() != 3 || queries.value().ndim() != 2 || queries.dim(1) != upscaled.dim(0)) {
    throw ShapeError("decode_masks: queries " + shape_str(queries.shape()) + " vs embeddings " +
                     shape_str(upscaled.shape()));
  }
  const int h = upscaled.dim(1);
  const int w = upscaled.dim(2);
  Var<T> flat = ad::reshape(upscaled, {upscaled.dim(0), h * w});
  return ad::reshape(ad::matmul(queries, flat), {queries.dim(0), h, w});
}

template <typename T>
Var<T> project_image_embedding(Var<T> coarse, const ParameterStore<T>& p) {
  Tape<T>& t = *coarse.tape;
  return ad::conv2d(coarse, t.param(p, "dec.embed.w"), t.param(p, "dec.embed.b"), 1, 0);
}

template <typename T>
Var<T> segment(Var<T> image_embed, Var<T> depth, double d_min, double d_max, const ParameterStore<T>& p,
               const DecoderConfig& cfg) {
  Tape<T>& t = *image_embed.tape;
  const int h = image_embed.dim(1);
  const int w = image_embed.dim(2);
  if (image_embed.dim(0) != cfg.width) {
    throw ShapeError("segment: image embedding " + shape_str(image_embed.shape()) + " vs decoder width " +
                     std::to_string(cfg.width));
  }
  Var<T> x = image_embed;
  if (depth.defined()) {
    if (depth.dim(0) != 4 * h || depth.dim(1) != 4 * w) {
      throw ShapeError("segment: depth " + shape_str(depth.shape()) + " vs embedding grid " +
                       shape_str(image_embed.shape()));
    }
    x = ad::add(x, embed_depth_prompt(depth, d_min, d_max, p));
  }
  Var<T> pos = t.constant(positional_encoding<T>(h, w, cfg.width));
  Var<T> tok = t.param(p, "dec.tokens");
  Var<T> img = to_tokens(x);
  for (int b = 0; b < cfg.blocks; ++b) {
    std::tie(tok, img) = block_flat(tok, img, pos, p, "dec.block" + std::to_string(b), cfg.heads);
  }
  tok = norm(ad::add(tok, attention(tok, ad::add(img, pos), img, p, "dec.final", cfg.heads)), p, "dec.final.norm");
  Var<T> queries = mlp(tok, p, "dec.query");
  Var<T> up = upscale_embeddings(to_image(img, h, w), p);
  return decode_masks(queries, up);
}

#define SWEEPSTACK_INSTANTIATE(T)                                                                             \
  template void init_decoder_params(ParameterStore<T>&, const DecoderConfig&, std::mt19937_64&);              \
  template Tensor<T> positional_encoding(int, int, int);                                                      \
  template Var<T> embed_depth_prompt(Var<T>, double, double, const ParameterStore<T>&);                       \
  template Var<T> attention(Var<T>, Var<T>, Var<T>, const ParameterStore<T>&, const std::string&, int,         \
                            std::vector<Tensor<T>>*);                                                         \
  template std::pair<Var<T>, Var<T>> two_way_block(Var<T>, Var<T>, Var<T>, const ParameterStore<T>&, int, int); \
  template Var<T> upscale_embeddings(Var<T>, const ParameterStore<T>&);                                       \
  template Var<T> decode_masks(Var<T>, Var<T>);                                                               \
  template Var<T> project_image_embedding(Var<T>, const ParameterStore<T>&);                                  \
  template Var<T> segment(Var<T>, Var<T>, double, double, const ParameterStore<T>&, const DecoderConfig&);

SWEEPSTACK_INSTANTIATE(float)
SWEEPSTACK_INSTANTIATE(double)
#undef SWEEPSTACK_INSTANTIATE

}  // namespace sweepstack
