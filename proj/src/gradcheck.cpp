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
#include <sweepstack/gradcheck.hpp>

#include <sweepstack/costvol.hpp>
#include <sweepstack/dataset.hpp>
#include <sweepstack/decoder.hpp>
#include <sweepstack/features.hpp>
#include <sweepstack/pipeline.hpp>
#include <sweepstack/train.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace sweepstack {

void to_json(nlohmann::json& j, const GradcheckResult& r) {
  j = {{"op", r.op},
       {"shape", r.shape},
       {"max_rel_err", r.max_rel_err},
       {"coordinate", r.coordinate},
       {"tensor", r.tensor},
       {"checked", r.checked}};
}

namespace {

std::vector<int> unravel(std::size_t flat, const Shape& shape) {
  std::vector<int> idx(shape.size());
  for (int d = static_cast<int>(shape.size()) - 1; d >= 0; --d) {
    idx[d] = static_cast<int>(flat % static_cast<std::size_t>(shape[d]));
    flat /= static_cast<std::size_t>(shape[d]);
  }
  return idx;
}


}  // namespace

GradcheckResult check_gradients(const std::string& op, ParameterStore<double> inputs, const StoreFn& fn,
                                const GradcheckOptions& opts) {
  std::mt19937_64 rng(opts.seed ^ 0xC0FFEEull);
  std::uniform_real_distribution<double> u(-1.0, 1.0);

  Tensor<double> r;
  std::map<std::string, Tensor<double>> analytic;
  {
    Tape<double> tape;
    Var<double> y = fn(tape, inputs);
    r = Tensor<double>(y.shape());
    for (auto& v : r.values()) v = u(rng);
    tape.backward(y, r);
    analytic = tape.parameter_gradients();
  }

  auto eval = [&]() {
    Tape<double> tape(false);
    return fn(tape, inputs).value();
  };

  GradcheckResult res;
  res.op = op;
  for (auto& [name, tensor] : inputs.tensors()) {
    const Tensor<double>* grad = analytic.contains(name) ? &analytic.at(name) : nullptr;
    std::vector<std::size_t> coords(tensor.size());
    std::iota(coords.begin(), coords.end(), 0);
    if (opts.max_coords && coords.size() > opts.max_coords) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(opts.max_coords);
    }
    for (std::size_t i : coords) {
      const double x0 = tensor[i];
      tensor[i] = x0 + opts.eps;
      const Tensor<double> yp = eval();
      tensor[i] = x0 - opts.eps;
      const Tensor<double> ym = eval();
      tensor[i] = x0;
      // Differencing per element before the weighted sum limits cancellation.
      double num = 0;
      for (std::size_t j = 0; j < r.size(); ++j) num += r[j] * (yp[j] - ym[j]);
      num /= 2 * opts.eps;
      double ana = grad ? (*grad)[i] : 0.0;
      if (opts.inject_fault != 0.0) ana = ana * (1.0 + opts.inject_fault) + opts.inject_fault;
      if (opts.on_coordinate) opts.on_coordinate(name, i, ana, num);
      const double err = std::abs(ana - num) / std::max({std::abs(ana), std::abs(num), opts.floor});
      ++res.checked;
      if (res.coordinate.empty() || err > res.max_rel_err) {
        res.max_rel_err = err;
        res.tensor = name;
        res.shape = tensor.shape();
        res.coordinate = unravel(i, tensor.shape());
      }
    }
  }
  return res;
}

GradcheckResult finite_difference_check(const std::string& op, const std::vector<Tensor<double>>& inputs,
                                        const InputFn& fn, const GradcheckOptions& opts) {
  ParameterStore<double> store;
  for (std::size_t i = 0; i < inputs.size(); ++i) store.add("x" + std::to_string(i), inputs[i]);
  const std::size_t n = inputs.size();
  return check_gradients(
      op, std::move(store),
      [&fn, n](Tape<double>& t, const ParameterStore<double>& s) {
        std::vector<Var<double>> vars;
        for (std::size_t i = 0; i < n; ++i) vars.push_back(t.param(s, "x" + std::to_string(i)));
        return fn(t, vars);
      },
      opts);
}

namespace {

struct Rand {
  std::mt19937_64 rng;
  explicit Rand(std::uint64_t seed) : rng(seed) {}

  double uni(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

  Tensor<double> tensor(Shape s, double lo = -1.0, double hi = 1.0) {
    Tensor<double> t(std::move(s));
    for (auto& v : t.values()) v = uni(lo, hi);
    return t;
  }
  /// Magnitudes in [lo, hi] with random sign: keeps values away from a kink at 0.
  Tensor<double> away(Shape s, double lo, double hi) {
    Tensor<double> t(std::move(s));
    for (auto& v : t.values()) v = (uni(0, 1) < 0.5 ? -1.0 : 1.0) * uni(lo, hi);
    return t;
  }
};

using V = Var<double>;

}  // namespace

std::vector<GradcheckResult> primitive_gradchecks(const GradcheckOptions& opts) {
  Rand R(opts.seed + 17);
  std::vector<GradcheckResult> out;
  auto check = [&](const std::string& op, std::vector<Tensor<double>> in, InputFn fn) {
    out.push_back(finite_difference_check(op, in, fn, opts));
  };

  check("add", {R.tensor({3, 4}), R.tensor({3, 4})}, [](auto&, auto& x) { return ad::add(x[0], x[1]); });
  check("sub", {R.tensor({3, 4}), R.tensor({3, 4})}, [](auto&, auto& x) { return ad::sub(x[0], x[1]); });
  check("mul", {R.tensor({3, 4}), R.tensor({3, 4})}, [](auto&, auto& x) { return ad::mul(x[0], x[1]); });
  check("scale", {R.tensor({5})}, [](auto&, auto& x) { return ad::scale(x[0], 1.7); });
  check("add_scalar", {R.tensor({5})}, [](auto&, auto& x) { return ad::add_scalar(x[0], -0.3); });
  check("scale_by", {R.tensor({2, 3}), R.tensor({1})}, [](auto&, auto& x) { return ad::scale_by(x[0], x[1]); });
  check("relu", {R.away({4, 5}, 0.05, 1.0)}, [](auto&, auto& x) { return ad::relu(x[0]); });
  check("gelu", {R.tensor({4, 5}, -3, 3)}, [](auto&, auto& x) { return ad::gelu(x[0]); });
  check("clamp", {R.away({4, 5}, 0.05, 0.45)}, [](auto&, auto& x) {
    return ad::clamp(ad::scale(x[0], 3.0), -0.5, 0.5);
  });
  check("reshape", {R.tensor({2, 6})}, [](auto&, auto& x) { return ad::reshape(x[0], {3, 4}); });
  check("transpose", {R.tensor({3, 5})}, [](auto&, auto& x) { return ad::transpose(x[0]); });
  check("slice_cols", {R.tensor({3, 6})}, [](auto&, auto& x) { return ad::slice_cols(x[0], 2, 3); });
  check("concat_cols", {R.tensor({3, 2}), R.tensor({3, 4})}, [](auto&, auto& x) {
    std::vector<V> parts{x[0], x[1]};
    return ad::concat_cols<double>(parts);
  });
  check("sum", {R.tensor({3, 4})}, [](auto&, auto& x) { return ad::sum(x[0]); });
  check("mean", {R.tensor({3, 4})}, [](auto&, auto& x) { return ad::mean(x[0]); });
  check("sum_axis0", {R.tensor({3, 2, 2})}, [](auto&, auto& x) { return ad::sum_axis0(x[0]); });
  check("mean_axis0", {R.tensor({3, 2, 2})}, [](auto&, auto& x) { return ad::mean_axis0(x[0]); });
  for (int ta = 0; ta < 2; ++ta) {
    for (int tb = 0; tb < 2; ++tb) {
      const Shape sa = ta ? Shape{4, 3} : Shape{3, 4};
      const Shape sb = tb ? Shape{5, 4} : Shape{4, 5};
      check("matmul" + std::string(ta ? "_ta" : "") + std::string(tb ? "_tb" : ""), {R.tensor(sa), R.tensor(sb)},
            [ta, tb](auto&, auto& x) { return ad::matmul(x[0], x[1], ta != 0, tb != 0); });
    }
  }
  check("linear", {R.tensor({4, 3}), R.tensor({5, 3}), R.tensor({5})},
        [](auto&, auto& x) { return ad::linear(x[0], x[1], x[2]); });
  check("softmax_axis0", {R.tensor({4, 3}, -2, 2)}, [](auto&, auto& x) { return ad::softmax(x[0], 0); });
  check("softmax_axis1", {R.tensor({2, 3, 4}, -2, 2)}, [](auto&, auto& x) { return ad::softmax(x[0], 1); });
  check("layer_norm", {R.tensor({3, 6}), R.tensor({6}), R.tensor({6})},
        [](auto&, auto& x) { return ad::layer_norm(x[0], x[1], x[2]); });
  check("conv2d_s1", {R.tensor({2, 5, 5}), R.tensor({3, 2, 3, 3}), R.tensor({3})},
        [](auto&, auto& x) { return ad::conv2d(x[0], x[1], x[2], 1, 1); });
  check("conv2d_s2", {R.tensor({2, 6, 6}), R.tensor({3, 2, 3, 3}), R.tensor({3})},
        [](auto&, auto& x) { return ad::conv2d(x[0], x[1], x[2], 2, 1); });
  check("conv2d_1x1", {R.tensor({3, 4, 4}), R.tensor({2, 3, 1, 1}), R.tensor({2})},
        [](auto&, auto& x) { return ad::conv2d(x[0], x[1], x[2], 1, 0); });
  check("conv_transpose2d", {R.tensor({3, 3, 3}), R.tensor({3, 2, 2, 2}), R.tensor({2})},
        [](auto&, auto& x) { return ad::conv_transpose2d(x[0], x[1], x[2], 2); });
  check("conv3d", {R.tensor({2, 3, 4, 4}), R.tensor({2, 2, 3, 3, 3}), R.tensor({2})},
        [](auto&, auto& x) { return ad::conv3d(x[0], x[1], x[2]); });
  {
    Tensor<double> coords({2, 3, 2});
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = std::floor(R.uni(0, 4)) + R.uni(0.1, 0.9);
    Tensor<double> valid({2, 3}, 1.0);
    valid[4] = 0.0;
    check("bilinear_sample", {R.tensor({2, 5, 6}), coords},
          [valid](auto&, auto& x) { return ad::bilinear_sample(x[0], x[1], &valid); });
  }
  check("resize_bilinear_up", {R.tensor({2, 3, 4})}, [](auto&, auto& x) { return ad::resize_bilinear(x[0], 7, 5); });
  check("resize_bilinear_down", {R.tensor({2, 8, 8})}, [](auto&, auto& x) { return ad::resize_bilinear(x[0], 4, 3); });
  {
    std::vector<int> labels{0, 2, 1, 255, 1, 0};
    check("cross_entropy", {R.tensor({3, 6}, -2, 2)},
          [labels](auto&, auto& x) { return ad::cross_entropy<double>(x[0], labels, 255); });
  }
  {
    Tensor<double> target = R.tensor({12}, 1, 3);
    Tensor<double> diff = R.away({12}, 0.001, 0.015);
    for (std::size_t i = 0; i < 6; ++i) diff[i] = (diff[i] < 0 ? -1 : 1) * R.uni(0.03, 0.2);
    Tensor<double> pred = target;
    for (std::size_t i = 0; i < pred.size(); ++i) pred[i] += diff[i];
    Tensor<double> mask({12}, 1.0);
    mask[3] = 0;
    check("smooth_l1", {pred}, [target, mask](auto&, auto& x) { return ad::smooth_l1(x[0], target, mask, 0.02); });
  }
  {
    CameraIntrinsics in{6.0, 6.0, 3.5, 2.5, 8, 6};
    Camera ref{in, CameraPose::identity()};
    Camera src{in, CameraPose::from_axis_angle(Eigen::Vector3d(0.01, -0.03, 0.02), Eigen::Vector3d(0.1, 0.02, 0.01))};
    check("warp_coords", {R.tensor({2, 6, 8}, 2.0, 3.0)}, [ref, src](auto&, auto& x) {
      Tensor<double> valid;
      return warp_coords(x[0], ref, src, valid);
    });
  }
  check("window_hypotheses", {R.tensor({3, 4}, 2.0, 3.0)},
        [](auto&, auto& x) { return window_hypotheses(x[0], 4, 0.05, 0.1, 5.0); });
  {
    Tensor<double> m1({3, 2, 2}, 1.0), m2({3, 2, 2}, 1.0);
    m1[1] = 0;
    m2[1] = 0;
    m2[5] = 0;
    check("variance_cost", {R.tensor({2, 2, 2}), R.tensor({2, 3, 2, 2}), R.tensor({2, 3, 2, 2})},
          [m1, m2](auto&, auto& x) {
            std::vector<V> warped{x[1], x[2]};
            std::vector<Tensor<double>> masks{m1, m2};
            return variance_cost<double>(x[0], warped, masks).data;
          });
  }
  check("regress_depth", {R.tensor({4, 2, 3}, -1, 1), R.tensor({4, 2, 3}, 1, 3)}, [](auto&, auto& x) {
    return regress_depth(probabilities_from_logits(x[0]), DepthHypothesisSet<double>{x[1], 0.1});
  });
  return out;
}

namespace {

// Zero-initialized biases put ReLU inputs exactly on the kink wherever a patch
// is all zeros; checks run at a generic point instead.
ParameterStore<double> jitter_biases(ParameterStore<double> store, std::uint64_t seed) {
  Rand R(seed);
  for (auto& [name, t] : store.tensors()) {
    if (name.size() > 2 && name.compare(name.size() - 2, 2, ".b") == 0) {
      for (auto& v : t.values()) v += R.uni(-0.1, 0.1);
    }
  }
  return store;
}

ParameterStore<double> subset(const ParameterStore<double>& all, std::initializer_list<const char*> prefixes) {
  ParameterStore<double> s;
  for (const auto& [name, t] : all.tensors()) {
    for (const char* p : prefixes) {
      if (name.rfind(p, 0) == 0) {
        s.add(name, t);
        break;
      }
    }
  }
  return s;
}

}  // namespace

std::vector<GradcheckResult> module_gradchecks(const GradcheckOptions& opts) {
  Rand R(opts.seed + 29);
  const ModelConfig cfg = ModelConfig::tiny(2);
  const ParameterStore<double> all = jitter_biases(init_model<double>(cfg, opts.seed + 3), opts.seed + 4);
  std::vector<GradcheckResult> out;

  {
    ParameterStore<double> s = subset(all, {"geo."});
    s.add("input.image", R.tensor({3, 8, 8}, 0, 1));
    out.push_back(check_gradients(
        "geometric_pyramid", s,
        [&cfg](Tape<double>& t, const ParameterStore<double>& p) {
          FeaturePyramid<double> f = extract_geometric_pyramid(t.param(p, "input.image"), p, cfg.features);
          V a = ad::reshape(f.levels[0], {static_cast<int>(f.levels[0].size()), 1});
          V b = ad::reshape(f.levels[1], {static_cast<int>(f.levels[1].size()), 1});
          V c = ad::reshape(f.levels[2], {static_cast<int>(f.levels[2].size()), 1});
          return ad::add(ad::add(ad::sum(a), ad::scale(ad::sum(b), 0.7)), ad::scale(ad::sum(ad::mul(c, c)), 0.3));
        },
        opts));
  }
  {
    ParameterStore<double> s = subset(all, {"sem.", "adapt"});
    s.add("input.image", R.tensor({3, 8, 8}, 0, 1));
    out.push_back(check_gradients(
        "semantic_adapter", s,
        [&cfg](Tape<double>& t, const ParameterStore<double>& p) {
          V tok = extract_semantic_features(t.param(p, "input.image"), p, cfg.features);
          FeaturePyramid<double> f = adapt_semantic_pyramid(tok, 8, 8, p, cfg.features);
          return ad::add(ad::add(ad::sum(ad::mul(f.levels[0], f.levels[0])), ad::sum(f.levels[1])),
                         ad::sum(f.levels[2]));
        },
        opts));
  }
  {
    const int level = 1;
    ParameterStore<double> s = subset(all, {"reg1."});
    const int c = cfg.features.pyramid_channels[level];
    s.add("input.ref", R.tensor({c, 4, 4}));
    s.add("input.src", R.tensor({c, 4, 4}));
    CameraIntrinsics in{4.0, 4.0, 1.5, 1.5, 4, 4};
    const Camera ref{in, CameraPose::identity()};
    const Camera src{in, CameraPose::from_axis_angle(Eigen::Vector3d(0, 0.02, 0), Eigen::Vector3d(0.15, 0, 0))};
    Tensor<double> hyps({3, 4, 4});
    for (int k = 0; k < 3; ++k)
      for (int i = 0; i < 16; ++i) hyps[k * 16 + i] = 2.0 + 0.37 * k + 0.013 * i;
    out.push_back(check_gradients(
        "cost_volume_regularizer", s,
        [=](Tape<double>& t, const ParameterStore<double>& p) {
          Tensor<double> valid;
          V h = t.constant(hyps);
          V coords = warp_coords(h, ref, src, valid);
          std::vector<V> feats{t.param(p, "input.src")};
          std::vector<V> grids{coords};
          std::vector<Tensor<double>> masks{valid};
          CostVolume<double> cv = build_cost_volume<double>(t.param(p, "input.ref"), feats, grids, masks);
          return regress_depth(regularize(cv, p, level), DepthHypothesisSet<double>{h, 0.37});
        },
        opts));
  }
  {
    ParameterStore<double> s = subset(all, {"dec.block0.self"});
    s.add("input.q", R.tensor({3, cfg.decoder.width}));
    s.add("input.kv", R.tensor({5, cfg.decoder.width}));
    out.push_back(check_gradients(
        "attention", s,
        [&cfg](Tape<double>& t, const ParameterStore<double>& p) {
          V kv = t.param(p, "input.kv");
          return attention(t.param(p, "input.q"), kv, kv, p, "dec.block0.self", cfg.decoder.heads);
        },
        opts));
  }
  {
    ParameterStore<double> s = subset(all, {"dec.block0"});
    s.add("input.tokens", R.tensor({2, cfg.decoder.width}));
    s.add("input.image", R.tensor({cfg.decoder.width, 2, 2}));
    const Tensor<double> pos = positional_encoding<double>(2, 2, cfg.decoder.width);
    out.push_back(check_gradients(
        "two_way_block", s,
        [&cfg, pos](Tape<double>& t, const ParameterStore<double>& p) {
          auto [tok, img] = two_way_block(t.param(p, "input.tokens"), t.param(p, "input.image"), t.constant(pos), p,
                                          0, cfg.decoder.heads);
          return ad::add(ad::sum(ad::mul(tok, tok)), ad::scale(ad::sum(ad::mul(img, img)), 0.5));
        },
        opts));
  }
  {
    ParameterStore<double> s = subset(all, {"dec."});
    s.add("input.embed", R.tensor({cfg.decoder.embed_in_channels, 2, 2}));
    s.add("input.depth", R.tensor({8, 8}, 1.0, 4.0));
    out.push_back(check_gradients(
        "decoder", s,
        [&cfg](Tape<double>& t, const ParameterStore<double>& p) {
          V e = project_image_embedding(t.param(p, "input.embed"), p);
          return segment(e, t.param(p, "input.depth"), cfg.cascade.d_min, cfg.cascade.d_max, p, cfg.decoder);
        },
        opts));
  }
  return out;
}

GradcheckResult pipeline_gradcheck(const GradcheckOptions& opts) {
  const ModelConfig cfg = ModelConfig::tiny(2);
  SceneConfig sc;
  sc.num_classes = 2;
  RigConfig rc;
  rc.num_views = 2;
  rc.width = 8;
  rc.height = 8;
  rc.baseline = 0.4;
  const SceneSample scene = generate_sample(sc, rc, opts.seed + 5);
  std::vector<CameraView<double>> views;
  for (const auto& v : scene.views) views.push_back({v.image.cast<double>(), v.camera});
  const Tensor<double> depth = scene.views[0].depth.cast<double>();
  const Tensor<int> labels = scene.views[0].labels;
  LossConfig loss;
  return check_gradients(
      "pipeline", jitter_biases(init_model<double>(cfg, opts.seed + 11), opts.seed + 12),
      [&](Tape<double>& t, const ParameterStore<double>& p) {
        PipelineOutput<double> out = forward<double>(t, p, cfg, views);
        return compute_losses(out, depth, labels, cfg, loss).total;
      },
      opts);
}

}  // namespace sweepstack
