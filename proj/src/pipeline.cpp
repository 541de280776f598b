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
#include <sweepstack/pipeline.hpp>

#include <numeric>
#include <stdexcept>

namespace sweepstack {

void ModelConfig::validate() const {
  features.validate();
  cascade.validate();
  decoder.validate();
  if (regularizer_channels <= 0) throw std::invalid_argument("model: regularizer_channels must be positive");
  if (stages < 1 || stages > 3) throw std::invalid_argument("model: stages must be in [1,3]");
  if (decoder.embed_in_channels != features.pyramid_channels[0]) {
    throw std::invalid_argument("model: decoder.embed_in_channels (" + std::to_string(decoder.embed_in_channels) +
                                ") must equal the coarse pyramid width (" +
                                std::to_string(features.pyramid_channels[0]) + ")");
  }
}

int ModelConfig::size_multiple() const { return std::lcm(4, features.token_stride); }

ModelConfig ModelConfig::tiny(int num_classes) {
  ModelConfig cfg;
  cfg.features.pyramid_channels = {4, 4, 2};
  cfg.features.semantic_channels = 4;
  cfg.features.token_stride = 4;
  cfg.decoder.num_classes = num_classes;
  cfg.decoder.width = 4;
  cfg.decoder.heads = 1;
  cfg.decoder.blocks = 1;
  cfg.decoder.mlp_hidden = 4;
  cfg.decoder.upscale_channels = 2;
  cfg.decoder.embed_in_channels = 4;
  cfg.decoder.prompt_hidden = 2;
  cfg.cascade.hypothesis_counts = {4, 3, 2};
  cfg.regularizer_channels = 2;
  cfg.stages = 2;
  return cfg;
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{
      {"features",
       {{"pyramid_channels", c.features.pyramid_channels},
        {"semantic_channels", c.features.semantic_channels},
        {"token_stride", c.features.token_stride}}},
      {"cascade",
       {{"d_min", c.cascade.d_min},
        {"d_max", c.cascade.d_max},
        {"num_bins", c.cascade.num_bins},
        {"interval_ratios", c.cascade.interval_ratios},
        {"hypothesis_counts", c.cascade.hypothesis_counts}}},
      {"decoder",
       {{"num_classes", c.decoder.num_classes},
        {"width", c.decoder.width},
        {"heads", c.decoder.heads},
        {"blocks", c.decoder.blocks},
        {"mlp_hidden", c.decoder.mlp_hidden},
        {"upscale_channels", c.decoder.upscale_channels},
        {"embed_in_channels", c.decoder.embed_in_channels},
        {"prompt_hidden", c.decoder.prompt_hidden}}},
      {"regularizer_channels", c.regularizer_channels},
      {"stages", c.stages},
      {"options",
       {{"sem_to_mvs", c.options.sem_to_mvs},
        {"depth_prompt", c.options.depth_prompt},
        {"detach_prompt", c.options.detach_prompt}}},
  };
}

namespace {
template <typename V>
void maybe(const nlohmann::json& j, const char* key, V& out) {
  if (j.contains(key)) j.at(key).get_to(out);
}
}  // namespace

void from_json(const nlohmann::json& j, ModelConfig& c) {
  if (j.contains("features")) {
    const auto& f = j.at("features");
    maybe(f, "pyramid_channels", c.features.pyramid_channels);
    maybe(f, "semantic_channels", c.features.semantic_channels);
    maybe(f, "token_stride", c.features.token_stride);
  }
  if (j.contains("cascade")) {
    const auto& f = j.at("cascade");
    maybe(f, "d_min", c.cascade.d_min);
    maybe(f, "d_max", c.cascade.d_max);
    maybe(f, "num_bins", c.cascade.num_bins);
    maybe(f, "interval_ratios", c.cascade.interval_ratios);
    maybe(f, "hypothesis_counts", c.cascade.hypothesis_counts);
  }
  if (j.contains("decoder")) {
    const auto& f = j.at("decoder");
    maybe(f, "num_classes", c.decoder.num_classes);
    maybe(f, "width", c.decoder.width);
    maybe(f, "heads", c.decoder.heads);
    maybe(f, "blocks", c.decoder.blocks);
    maybe(f, "mlp_hidden", c.decoder.mlp_hidden);
    maybe(f, "upscale_channels", c.decoder.upscale_channels);
    maybe(f, "embed_in_channels", c.decoder.embed_in_channels);
    maybe(f, "prompt_hidden", c.decoder.prompt_hidden);
  }
  maybe(j, "regularizer_channels", c.regularizer_channels);
  maybe(j, "stages", c.stages);
  if (j.contains("options")) {
    const auto& f = j.at("options");
    maybe(f, "sem_to_mvs", c.options.sem_to_mvs);
    maybe(f, "depth_prompt", c.options.depth_prompt);
    maybe(f, "detach_prompt", c.options.detach_prompt);
  }
}

template <typename T>
ParameterStore<T> init_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  ParameterStore<T> store;
  init_feature_params(store, cfg.features, rng);
  init_regularizer_params(store, cfg.features.pyramid_channels, cfg.regularizer_channels, rng);
  init_decoder_params(store, cfg.decoder, rng);
  return store;
}

template <typename T>
PipelineOutput<T> forward(Tape<T>& tape, const ParameterStore<T>& params, const ModelConfig& cfg,
                          std::span<const CameraView<T>> views) {
  if (views.size() < 2) throw std::invalid_argument("forward: need a reference and at least one source view");
  const int h = views[0].image.dim(1);
  const int w = views[0].image.dim(2);
  const int m = cfg.size_multiple();
  if (h % m != 0 || w % m != 0) {
    throw ShapeError("forward: image " + std::to_string(h) + "x" + std::to_string(w) + " must be divisible by " +
                     std::to_string(m));
  }
  std::vector<FeaturePyramid<T>> pyramids;
  std::vector<Camera> cameras;
  Var<T> ref_semantic_coarse;
  for (std::size_t v = 0; v < views.size(); ++v) {
    views[v].validate();
    if (views[v].image.dim(1) != h || views[v].image.dim(2) != w) {
      throw ShapeError("forward: all views must share the reference resolution");
    }
    Var<T> img = tape.constant(views[v].image);
    FeaturePyramid<T> geo = extract_geometric_pyramid(img, params, cfg.features);
    FeaturePyramid<T> sem =
        adapt_semantic_pyramid(extract_semantic_features(img, params, cfg.features), h, w, params, cfg.features);
    if (v == 0) ref_semantic_coarse = sem.levels[0];
    pyramids.push_back(cfg.options.sem_to_mvs ? fuse(geo, sem) : fuse(geo, zeros_like(geo)));
    cameras.push_back(views[v].camera);
  }
  PipelineOutput<T> out;
  out.stages = run_cascade<T>(pyramids, cameras, cfg.cascade, params, cfg.stages);
  Var<T> prompt;
  if (cfg.options.depth_prompt) {
    prompt = out.depth();
    if (cfg.options.detach_prompt) prompt = ad::detach(prompt);
  }
  out.logits = segment(project_image_embedding(ref_semantic_coarse, params), prompt, cfg.cascade.d_min,
                       cfg.cascade.d_max, params, cfg.decoder);
  return out;
}

template ParameterStore<float> init_model(const ModelConfig&, std::uint64_t);
template ParameterStore<double> init_model(const ModelConfig&, std::uint64_t);
template PipelineOutput<float> forward(Tape<float>&, const ParameterStore<float>&, const ModelConfig&,
                                       std::span<const CameraView<float>>);
template PipelineOutput<double> forward(Tape<double>&, const ParameterStore<double>&, const ModelConfig&,
                                        std::span<const CameraView<double>>);

}  // namespace sweepstack
