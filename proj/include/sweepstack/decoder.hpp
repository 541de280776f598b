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

// Prompted semantic decoder.
//
// K learned class tokens act as sparse prompts; the predicted depth map,
// embedded by a shallow strided CNN, is added to the image embedding as a
// dense prompt. Two-way attention blocks update tokens and image features
// together; the image features are then upscaled 4x and every class token,
// turned into a query by a final attention + MLP, is dotted with each pixel
// embedding to produce that class's logit map.

#include <sweepstack/autodiff.hpp>
#include <sweepstack/params.hpp>

#include <random>
#include <utility>
#include <vector>

namespace sweepstack {

struct DecoderConfig {
  int num_classes = 3;
  int width = 64;           // C_d
  int heads = 2;
  int blocks = 2;
  int mlp_hidden = 128;
  int upscale_channels = 32;  // C_u
  int embed_in_channels = 32; // channels of the image embedding before projection
  int prompt_hidden = 16;

  void validate() const;
};

/// Adds decoder parameters (class tokens, attention blocks, prompt CNN, upscaler) to `store`.
template <typename T>
void init_decoder_params(ParameterStore<T>& store, const DecoderConfig& cfg, std::mt19937_64& rng);

/// Fixed 2-D sinusoidal table [h*w, width]; first half of the channels encodes rows, second half columns.
template <typename T>
Tensor<T> positional_encoding(int h, int w, int width);

/// Depth [H,W] in meters -> clamp((d - d_min) / (d_max - d_min), 0, 1) -> 2 stride-2 convs -> [C_d, H/4, W/4].
template <typename T>
Var<T> embed_depth_prompt(Var<T> depth, double d_min, double d_max, const ParameterStore<T>& params);

/// Multi-head scaled dot-product attention with q/k/v/out projections named `prefix`.{q,k,v,o}.
/// When `weights` is given, the per-head attention matrices [N_q, N_k] are appended to it.
template <typename T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, const ParameterStore<T>& params, const std::string& prefix,
                 int heads, std::vector<Tensor<T>>* weights = nullptr);

/// One two-way block: token self-attention, token->image cross-attention, token
/// MLP, image->token cross-attention; each followed by residual + layer norm.
/// image is [C_d,h,w]; pos is [h*w, C_d], added to image features wherever
/// they enter an attention layer as queries or keys.
template <typename T>
std::pair<Var<T>, Var<T>> two_way_block(Var<T> tokens, Var<T> image, Var<T> pos, const ParameterStore<T>& params,
                                        int block, int heads);

/// Two stride-2 transposed convolutions with GELU: [C_d,h,w] -> [C_u,4h,4w].
template <typename T>
Var<T> upscale_embeddings(Var<T> image, const ParameterStore<T>& params);

/// logits[k,v,u] = <queries[k], upscaled[:,v,u]>; queries [K,C_u], upscaled [C_u,H,W].
template <typename T>
Var<T> decode_masks(Var<T> queries, Var<T> upscaled);

/// Projects the coarse semantic level [embed_in_channels,h,w] to the decoder width.
template <typename T>
Var<T> project_image_embedding(Var<T> coarse, const ParameterStore<T>& params);

/// Full decoder. image_embed [C_d,h,w]; depth [4h,4w] (pass an undefined Var
/// to decode without the dense prompt). Returns logits [K,4h,4w].
template <typename T>
Var<T> segment(Var<T> image_embed, Var<T> depth, double d_min, double d_max, const ParameterStore<T>& params,
               const DecoderConfig& cfg);

}  // namespace sweepstack
