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
#include <sweepstack/costvol.hpp>

#include <stdexcept>

namespace sweepstack {

void CascadeConfig::validate() const {
  if (!(d_min < d_max)) throw std::invalid_argument("cascade: d_min must be below d_max");
  if (!(d_min > 0)) throw std::invalid_argument("cascade: d_min must be positive");
  if (num_bins < 2) throw std::invalid_argument("cascade: num_bins must be at least 2");
  for (int c : hypothesis_counts) {
    if (c <= 0) throw std::invalid_argument("cascade: hypothesis counts must be positive");
  }
  for (std::size_t i = 0; i < interval_ratios.size(); ++i) {
    if (!(interval_ratios[i] > 0)) throw std::invalid_argument("cascade: interval ratios must be positive");
    if (i > 0 && interval_ratios[i] > interval_ratios[i - 1]) {
      throw std::invalid_argument("cascade: interval ratios must be non-increasing");
    }
  }
}

double base_interval(const CascadeConfig& cfg) {
  if (cfg.num_bins < 2) throw std::invalid_argument("base_interval: num_bins must be at least 2");
  return (cfg.d_max - cfg.d_min) / (cfg.num_bins - 1);
}

double stage_interval(const CascadeConfig& cfg, int stage) {
  return cfg.interval_ratios.at(static_cast<std::size_t>(stage)) * base_interval(cfg);
}

namespace {

double window_start(double center, int count, double spacing, double lo, double hi, bool* clamped) {
  const double raw = center - 0.5 * (count - 1) * spacing;
  const double max_start = hi - (count - 1) * spacing;
  double start = raw;
  if (max_start <= lo) {
    start = lo;
  } else {
    start = std::clamp(raw, lo, max_start);
  }
  if (clamped) *clamped = !(raw > lo && raw < max_start);
  return start;
}

}  // namespace

template <typename T>
DepthHypothesisSet<T> make_initial_hypotheses(Tape<T>& tape, const CascadeConfig& cfg, int height, int width) {
  const int n = cfg.hypothesis_counts[0];
  const double spacing = stage_interval(cfg, 0);
  const double start = window_start(0.5 * (cfg.d_min + cfg.d_max), n, spacing, cfg.d_min, cfg.d_max, nullptr);
  Tensor<T> values({n, height, width});
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  for (int t = 0; t < n; ++t) {
    std::fill_n(values.data() + t * plane, plane, static_cast<T>(start + t * spacing));
  }
  return {tape.constant(std::move(values)), spacing};
}

template <typename T>
Var<T> window_hypotheses(Var<T> center, int count, double spacing, double lo, double hi) {
  const Tensor<T>& cv = center.value();
  if (cv.ndim() != 2) throw ShapeError("window_hypotheses: center must be [H,W], got " + shape_str(cv.shape()));
  const int h = cv.dim(0);
  const int w = cv.dim(1);
  const std::size_t plane = cv.size();
  Tensor<T> values({count, h, w});
  std::vector<unsigned char> pass(plane);
  for (std::size_t p = 0; p < plane; ++p) {
    bool clamped = false;
    const double start = window_start(static_cast<double>(cv[p]), count, spacing, lo, hi, &clamped);
    pass[p] = clamped ? 0 : 1;
    for (int t = 0; t < count; ++t) values[t * plane + p] = static_cast<T>(start + t * spacing);
  }
  return center.tape->record(std::move(values), {center}, "window_hypotheses",
                             [center, pass = std::move(pass), count, plane](Tape<T>& tape, int self) {
    if (!tape.requires_grad(center.id)) return;
    const Tensor<T>& g = tape.grad(self);
    Tensor<T>& dc = tape.grad(center.id);
    for (std::size_t p = 0; p < plane; ++p) {
      if (!pass[p]) continue;
      T acc = 0;
      for (int t = 0; t < count; ++t) acc += g[t * plane + p];
      dc[p] += acc;
    }
  });
}

template <typename T>
DepthHypothesisSet<T> refine_hypotheses(Var<T> prev_depth, const CascadeConfig& cfg, int stage, int height,
                                        int width) {
  if (prev_depth.value().ndim() != 2) {
    throw ShapeError("refine_hypotheses: depth must be [H,W], got " + shape_str(prev_depth.shape()));
  }
  Var<T> up = ad::resize_bilinear(ad::reshape(prev_depth, {1, prev_depth.dim(0), prev_depth.dim(1)}), height, width);
  const double spacing = stage_interval(cfg, stage);
  Var<T> values = window_hypotheses(ad::reshape(up, {height, width}), cfg.hypothesis_counts[stage], spacing,
                                    cfg.d_min, cfg.d_max);
  return {values, spacing};
}

template <typename T>
CostVolume<T> variance_cost(Var<T> ref_features, std::span<const Var<T>> warped, std::span<const Tensor<T>> masks) {
  const Tensor<T>& ref = ref_features.value();
  if (ref.ndim() != 3) throw ShapeError("variance_cost: reference must be [C,H,W], got " + shape_str(ref.shape()));
  if (warped.empty() || warped.size() != masks.size()) {
    throw std::invalid_argument("variance_cost: need at least one source volume with a mask per volume");
  }
  const int c = ref.dim(0);
  const int nt = warped[0].dim(1);
  const Shape vol_shape{c, nt, ref.dim(1), ref.dim(2)};
  const Shape mask_shape{nt, ref.dim(1), ref.dim(2)};
  for (std::size_t i = 0; i < warped.size(); ++i) {
    if (warped[i].shape() != vol_shape || masks[i].shape() != mask_shape) {
      throw ShapeError("variance_cost: source " + std::to_string(i) + " volume " + shape_str(warped[i].shape()) +
                       " / mask " + shape_str(masks[i].shape()) + " vs expected " + shape_str(vol_shape));
    }
  }
  const std::size_t plane = static_cast<std::size_t>(ref.dim(1)) * ref.dim(2);
  const std::size_t tvol = static_cast<std::size_t>(nt) * plane;

  CostVolume<T> out;
  out.valid_count = Tensor<int>(mask_shape, 1);
  for (const auto& m : masks) {
    for (std::size_t i = 0; i < tvol; ++i) out.valid_count[i] += m[i] != T(0) ? 1 : 0;
  }
  Tensor<T> cost(vol_shape);
  std::vector<const T*> src(warped.size());
  for (std::size_t v = 0; v < warped.size(); ++v) src[v] = warped[v].value().data();
  // Deviations are taken from the reference value, so identical views give exactly zero.
  // Fixed view order keeps the reduction deterministic.
  for (int ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < tvol; ++i) {
      const int n = out.valid_count[i];
      if (n <= 1) continue;
      const std::size_t vi = ch * tvol + i;
      const T r = ref[ch * plane + i % plane];
      T s = 0;
      for (std::size_t v = 0; v < src.size(); ++v) {
        if (masks[v][i] != T(0)) s += src[v][vi] - r;
      }
      const T mu = s / T(n);
      T acc = mu * mu;
      for (std::size_t v = 0; v < src.size(); ++v) {
        if (masks[v][i] != T(0)) {
          const T d = src[v][vi] - r - mu;
          acc += d * d;
        }
      }
      cost[vi] = acc / T(n);
    }
  }

  std::vector<Var<T>> inputs{ref_features};
  inputs.insert(inputs.end(), warped.begin(), warped.end());
  std::vector<Tensor<T>> mask_copy(masks.begin(), masks.end());
  out.data = ref_features.tape->record(
      std::move(cost), std::span<const Var<T>>(inputs), "variance_cost",
      [inputs, mask_copy = std::move(mask_copy), counts = out.valid_count, c, plane, tvol](Tape<T>& tape, int self) {
        const Tensor<T>& g = tape.grad(self);
        const Var<T>& refv = inputs[0];
        const Tensor<T>& ref = tape.value(refv.id);
        Tensor<T>* dref = tape.requires_grad(refv.id) ? &tape.grad(refv.id) : nullptr;
        const std::size_t nsrc = mask_copy.size();
        std::vector<Tensor<T>*> dsrc(nsrc, nullptr);
        for (std::size_t v = 0; v < nsrc; ++v) {
          if (tape.requires_grad(inputs[v + 1].id)) dsrc[v] = &tape.grad(inputs[v + 1].id);
        }
        std::vector<const T*> src(nsrc);
        for (std::size_t v = 0; v < nsrc; ++v) src[v] = tape.value(inputs[v + 1].id).data();
        for (int ch = 0; ch < c; ++ch) {
          for (std::size_t i = 0; i < tvol; ++i) {
            const int n = counts[i];
            const std::size_t vi = ch * tvol + i;
            if (n <= 1 || g[vi] == T(0)) continue;
            const T r = ref[ch * plane + i % plane];
            T s = 0;
            for (std::size_t v = 0; v < nsrc; ++v) {
              if (mask_copy[v][i] != T(0)) s += src[v][vi] - r;
            }
            const T mu = s / T(n);
            const T k = T(2) * g[vi] / T(n);
            if (dref) (*dref)[ch * plane + i % plane] -= k * mu;
            for (std::size_t v = 0; v < nsrc; ++v) {
              if (dsrc[v] && mask_copy[v][i] != T(0)) (*dsrc[v])[vi] += k * (src[v][vi] - r - mu);
            }
          }
        }
      });
  return out;
}

template <typename T>
CostVolume<T> build_cost_volume(Var<T> ref_features, std::span<const Var<T>> src_features,
                                std::span<const Var<T>> grid_coords, std::span<const Tensor<T>> grid_valid) {
  if (src_features.empty()) throw std::invalid_argument("build_cost_volume: need at least one source view");
  if (src_features.size() != grid_coords.size() || grid_coords.size() != grid_valid.size()) {
    throw std::invalid_argument("build_cost_volume: one warp grid per source view required");
  }
  std::vector<Var<T>> warped;
  warped.reserve(src_features.size());
  for (std::size_t i = 0; i < src_features.size(); ++i) {
    warped.push_back(ad::bilinear_sample(src_features[i], grid_coords[i], &grid_valid[i]));
  }
  return variance_cost<T>(ref_features, warped, grid_valid);
}

template <typename T>
void init_regularizer_params(ParameterStore<T>& store, const std::array<int, 3>& feature_channels,
                             int hidden_channels, std::mt19937_64& rng) {
  const int hc = hidden_channels;
  for (int level = 0; level < 3; ++level) {
    const std::string p = "reg" + std::to_string(level);
    const int c = feature_channels[level];
    store.add(p + ".conv0.w", he_uniform<T>({hc, c, 3, 3, 3}, c * 27, rng));
    store.add(p + ".conv0.b", Tensor<T>({hc}));
    store.add(p + ".conv1.w", he_uniform<T>({hc, hc, 3, 3, 3}, hc * 27, rng));
    store.add(p + ".conv1.b", Tensor<T>({hc}));
    Tensor<T> head = he_uniform<T>({1, hc, 3, 3, 3}, hc * 27, rng);
    for (auto& v : head.values()) v *= T(0.1);
    store.add(p + ".head.w", std::move(head));
    store.add(p + ".head.b", Tensor<T>({1}));
    store.add(p + ".cost_scale", Tensor<T>({1}, T(1)));
  }
}

template <typename T>
ProbabilityVolume<T> probabilities_from_logits(Var<T> logits) {
  return {ad::softmax(logits, 0)};
}

template <typename T>
ProbabilityVolume<T> regularize(const CostVolume<T>& cost, const ParameterStore<T>& params, int level) {
  Tape<T>& tape = *cost.data.tape;
  const std::string p = "reg" + std::to_string(level);
  Var<T> x = cost.data;
  Var<T> h = ad::relu(ad::conv3d(x, tape.param(params, p + ".conv0.w"), tape.param(params, p + ".conv0.b")));
  h = ad::relu(ad::conv3d(h, tape.param(params, p + ".conv1.w"), tape.param(params, p + ".conv1.b")));
  Var<T> head = ad::conv3d(h, tape.param(params, p + ".head.w"), tape.param(params, p + ".head.b"));
  head = ad::reshape(head, {x.dim(1), x.dim(2), x.dim(3)});
  Var<T> prior = ad::scale_by(ad::mean_axis0(x), tape.param(params, p + ".cost_scale"));
  return probabilities_from_logits(ad::sub(head, prior));
}

template <typename T>
Var<T> regress_depth(const ProbabilityVolume<T>& probs, const DepthHypothesisSet<T>& hyps) {
  if (probs.probs.shape() != hyps.values.shape()) {
    throw ShapeError("regress_depth: probabilities " + shape_str(probs.probs.shape()) + " vs hypotheses " +
                     shape_str(hyps.values.shape()));
  }
  return ad::sum_axis0(ad::mul(probs.probs, hyps.values));
}

template <typename T>
std::vector<StageOutput<T>> run_cascade(std::span<const FeaturePyramid<T>> pyramids, std::span<const Camera> cameras,
                                        const CascadeConfig& cfg, const ParameterStore<T>& params, int stages) {
  if (pyramids.size() < 2 || cameras.size() != pyramids.size()) {
    throw std::invalid_argument("run_cascade: need at least two views with one camera each (got " +
                                std::to_string(pyramids.size()) + " pyramids, " + std::to_string(cameras.size()) +
                                " cameras)");
  }
  if (stages < 1 || stages > 3) throw std::invalid_argument("run_cascade: stages must be in [1,3]");
  Tape<T>& tape = *pyramids[0].levels[0].tape;
  std::vector<StageOutput<T>> out;
  for (int s = 0; s < stages; ++s) {
    const int level = 3 - stages + s;
    const Var<T>& ref_feat = pyramids[0].levels[level];
    const int h = ref_feat.dim(1);
    const int w = ref_feat.dim(2);
    StageOutput<T> st;
    st.level = level;
    st.hypotheses = s == 0 ? make_initial_hypotheses(tape, cfg, h, w)
                           : refine_hypotheses(out.back().depth, cfg, s, h, w);
    const Camera ref_cam = cameras[0].resized(w, h);
    std::vector<Var<T>> src_feats;
    std::vector<Var<T>> coords;
    std::vector<Tensor<T>> valid(pyramids.size() - 1);
    for (std::size_t v = 1; v < pyramids.size(); ++v) {
      const Var<T>& f = pyramids[v].levels[level];
      src_feats.push_back(f);
      coords.push_back(warp_coords(st.hypotheses.values, ref_cam, cameras[v].resized(f.dim(2), f.dim(1)), valid[v - 1]));
    }
    st.cost = build_cost_volume<T>(ref_feat, src_feats, coords, valid);
    st.probs = regularize(st.cost, params, level);
    st.depth = regress_depth(st.probs, st.hypotheses);
    out.push_back(std::move(st));
  }
  return out;
}

#define SWEEPSTACK_INSTANTIATE(T)                                                                              \
  template DepthHypothesisSet<T> make_initial_hypotheses(Tape<T>&, const CascadeConfig&, int, int);            \
  template Var<T> window_hypotheses(Var<T>, int, double, double, double);                                      \
  template DepthHypothesisSet<T> refine_hypotheses(Var<T>, const CascadeConfig&, int, int, int);               \
  template CostVolume<T> variance_cost(Var<T>, std::span<const Var<T>>, std::span<const Tensor<T>>);           \
  template CostVolume<T> build_cost_volume(Var<T>, std::span<const Var<T>>, std::span<const Var<T>>,           \
                                           std::span<const Tensor<T>>);                                        \
  template void init_regularizer_params(ParameterStore<T>&, const std::array<int, 3>&, int, std::mt19937_64&); \
  template ProbabilityVolume<T> probabilities_from_logits(Var<T>);                                             \
  template ProbabilityVolume<T> regularize(const CostVolume<T>&, const ParameterStore<T>&, int);               \
  template Var<T> regress_depth(const ProbabilityVolume<T>&, const DepthHypothesisSet<T>&);                    \
  template std::vector<StageOutput<T>> run_cascade(std::span<const FeaturePyramid<T>>, std::span<const Camera>, \
                                                   const CascadeConfig&, const ParameterStore<T>&, int);

SWEEPSTACK_INSTANTIATE(float)
SWEEPSTACK_INSTANTIATE(double)
#undef SWEEPSTACK_INSTANTIATE

}  // namespace sweepstack
