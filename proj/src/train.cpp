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
#include <sweepstack/train.hpp>

#include <algorithm>
#if defined(__SSE__)
#include <immintrin.h>
#endif
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

namespace sweepstack {

void LossConfig::validate() const {
  if (!(alpha >= 0)) throw std::invalid_argument("loss: alpha must be non-negative");
  if (!(beta > 0)) throw std::invalid_argument("loss: beta must be positive");
  for (double w : stage_weights) {
    if (!(w >= 0)) throw std::invalid_argument("loss: stage weights must be non-negative");
  }
}

template <typename V>
Tensor<V> downsample_nearest(const Tensor<V>& map, int out_h, int out_w) {
  if (map.ndim() != 2) throw ShapeError("downsample_nearest: expected [H,W], got " + shape_str(map.shape()));
  const int h = map.dim(0);
  const int w = map.dim(1);
  if (out_h == h && out_w == w) return map;
  Tensor<V> out({out_h, out_w});
  for (int y = 0; y < out_h; ++y) {
    const int sy = std::min(h - 1, static_cast<int>(std::floor((y + 0.5) * h / out_h)));
    for (int x = 0; x < out_w; ++x) {
      const int sx = std::min(w - 1, static_cast<int>(std::floor((x + 0.5) * w / out_w)));
      out.at(y, x) = map.at(sy, sx);
    }
  }
  return out;
}

template <typename T>
Var<T> smooth_l1_depth_loss(Var<T> pred, const Tensor<T>& gt, double beta, double d_min, double d_max, bool* empty) {
  Tensor<T> mask(gt.shape());
  bool any = false;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const double g = static_cast<double>(gt[i]);
    if (g >= d_min && g <= d_max) {
      mask[i] = T(1);
      any = true;
    }
  }
  if (empty) *empty = !any;
  return ad::smooth_l1(pred, gt, mask, static_cast<T>(beta));
}

template <typename T>
Var<T> cross_entropy_seg_loss(Var<T> logits, const Tensor<int>& labels, bool* empty) {
  if (logits.value().ndim() != 3 || labels.ndim() != 2 || logits.dim(1) != labels.dim(0) ||
      logits.dim(2) != labels.dim(1)) {
    throw ShapeError("cross_entropy_seg_loss: logits " + shape_str(logits.shape()) + " vs labels " +
                     shape_str(labels.shape()));
  }
  const int k = logits.dim(0);
  bool any = false;
  for (int l : labels.values()) {
    if (l == kIgnoreLabel) continue;
    if (l < 0 || l >= k) {
      throw std::out_of_range("label " + std::to_string(l) + " outside [0," + std::to_string(k) + ")");
    }
    any = true;
  }
  if (empty) *empty = !any;
  Var<T> flat = ad::reshape(logits, {k, static_cast<int>(labels.size())});
  return ad::cross_entropy(flat, labels.values(), kIgnoreLabel);
}

template <typename T>
LossTerms<T> compute_losses(const PipelineOutput<T>& out, const Tensor<T>& depth_gt, const Tensor<int>& labels,
                            const ModelConfig& model, const LossConfig& loss) {
  LossTerms<T> terms;
  terms.seg = cross_entropy_seg_loss(out.logits, labels, &terms.seg_empty);
  terms.depth_empty = true;
  Var<T> mvs;
  for (std::size_t s = 0; s < out.stages.size(); ++s) {
    const Var<T>& d = out.stages[s].depth;
    const Tensor<T> gt = downsample_nearest(depth_gt, d.dim(0), d.dim(1));
    bool empty = false;
    Var<T> l = smooth_l1_depth_loss(d, gt, loss.beta, model.cascade.d_min, model.cascade.d_max, &empty);
    terms.depth_empty = terms.depth_empty && empty;
    Var<T> weighted = ad::scale(l, static_cast<T>(loss.stage_weights[s]));
    mvs = mvs.defined() ? ad::add(mvs, weighted) : weighted;
  }
  terms.mvs = mvs;
  terms.total = ad::add(terms.seg, ad::scale(mvs, static_cast<T>(loss.alpha)));
  return terms;
}

DepthMetrics depth_metrics(const Tensor<float>& pred, const Tensor<float>& gt, double d_min, double d_max) {
  if (pred.shape() != gt.shape()) {
    throw ShapeError("depth_metrics: pred " + shape_str(pred.shape()) + " vs gt " + shape_str(gt.shape()));
  }
  double abs = 0, rel = 0, sq = 0;
  DepthMetrics m;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const double g = gt[i];
    if (!(g >= d_min && g <= d_max)) continue;
    const double e = std::abs(static_cast<double>(pred[i]) - g);
    abs += e;
    rel += e / g;
    sq += e * e;
    ++m.count;
  }
  if (m.count) {
    const auto n = static_cast<double>(m.count);
    m.abs_cm = 100.0 * abs / n;
    m.rel_pct = 100.0 * rel / n;
    m.rmse_cm = 100.0 * std::sqrt(sq / n);
  }
  return m;
}

namespace {

// Peaked softmax volumes produce subnormal floats, which are slow on x86 and
// carry no useful signal; flush them while the network runs.
class FlushSubnormals {
 public:
#if defined(__SSE__)
  FlushSubnormals() : saved_(_mm_getcsr()) { _mm_setcsr(saved_ | kFtz | kDaz); }
  ~FlushSubnormals() { _mm_setcsr(saved_); }
#endif
  FlushSubnormals(const FlushSubnormals&) = delete;
  FlushSubnormals& operator=(const FlushSubnormals&) = delete;

 private:
#if defined(__SSE__)
  static constexpr unsigned kFtz = 0x8000;
  static constexpr unsigned kDaz = 0x0040;
  unsigned saved_;
#endif
};
IoUResult iou_from_confusion(const std::vector<std::size_t>& conf, int k) {
  IoUResult r;
  r.per_class.assign(static_cast<std::size_t>(k), std::numeric_limits<double>::quiet_NaN());
  double sum = 0;
  int present = 0;
  for (int c = 0; c < k; ++c) {
    std::size_t tp = conf[c * k + c], gt_n = 0, pred_n = 0;
    for (int o = 0; o < k; ++o) {
      gt_n += conf[c * k + o];
      pred_n += conf[o * k + c];
    }
    const std::size_t uni = gt_n + pred_n - tp;
    if (uni == 0) continue;
    r.per_class[c] = static_cast<double>(tp) / static_cast<double>(uni);
    sum += r.per_class[c];
    ++present;
  }
  r.miou = present ? sum / present : 0.0;
  return r;
}

void accumulate_confusion(std::vector<std::size_t>& conf, const Tensor<int>& pred, const Tensor<int>& gt, int k,
                          std::size_t& n) {
  if (pred.shape() != gt.shape()) {
    throw ShapeError("mean_iou: pred " + shape_str(pred.shape()) + " vs gt " + shape_str(gt.shape()));
  }
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const int g = gt[i];
    if (g == kIgnoreLabel) continue;
    const int p = pred[i];
    if (g < 0 || g >= k || p < 0 || p >= k) throw std::out_of_range("mean_iou: label outside [0,K)");
    ++conf[static_cast<std::size_t>(g) * k + p];
    ++n;
  }
}
}  // namespace

IoUResult mean_iou(const Tensor<int>& pred, const Tensor<int>& gt, int num_classes) {
  std::vector<std::size_t> conf(static_cast<std::size_t>(num_classes) * num_classes, 0);
  std::size_t n = 0;
  accumulate_confusion(conf, pred, gt, num_classes, n);
  return iou_from_confusion(conf, num_classes);
}

void to_json(nlohmann::json& j, const MetricReport& r) {
  nlohmann::json per = nlohmann::json::array();
  for (double v : r.iou_per_class) per.push_back(std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v));
  j = {{"abs_err_cm", r.abs_cm},       {"rel_err_pct", r.rel_pct},     {"rmse_cm", r.rmse_cm},
       {"miou", r.miou},               {"iou_per_class", per},         {"depth_pixels", r.depth_pixels},
       {"label_pixels", r.label_pixels}, {"samples", r.samples}};
}

void from_json(const nlohmann::json& j, MetricReport& r) {
  r.abs_cm = j.at("abs_err_cm").get<double>();
  r.rel_pct = j.at("rel_err_pct").get<double>();
  r.rmse_cm = j.at("rmse_cm").get<double>();
  r.miou = j.at("miou").get<double>();
  r.iou_per_class.clear();
  for (const auto& v : j.at("iou_per_class")) {
    r.iou_per_class.push_back(v.is_null() ? std::numeric_limits<double>::quiet_NaN() : v.get<double>());
  }
  r.depth_pixels = j.value("depth_pixels", std::size_t{0});
  r.label_pixels = j.value("label_pixels", std::size_t{0});
  r.samples = j.value("samples", 0);
}

MetricAccumulator::MetricAccumulator(int num_classes, double d_min, double d_max)
    : k_(num_classes), d_min_(d_min), d_max_(d_max), confusion_(static_cast<std::size_t>(num_classes) * num_classes) {}

void MetricAccumulator::add(const Tensor<float>& depth_pred, const Tensor<float>& depth_gt,
                            const Tensor<int>& label_pred, const Tensor<int>& label_gt) {
  const DepthMetrics m = depth_metrics(depth_pred, depth_gt, d_min_, d_max_);
  const auto n = static_cast<double>(m.count);
  abs_ += m.abs_cm / 100.0 * n;
  rel_ += m.rel_pct / 100.0 * n;
  sq_ += std::pow(m.rmse_cm / 100.0, 2) * n;
  depth_n_ += m.count;
  accumulate_confusion(confusion_, label_pred, label_gt, k_, label_n_);
  ++samples_;
}

MetricReport MetricAccumulator::report() const {
  MetricReport r;
  if (depth_n_) {
    const auto n = static_cast<double>(depth_n_);
    r.abs_cm = 100.0 * abs_ / n;
    r.rel_pct = 100.0 * rel_ / n;
    r.rmse_cm = 100.0 * std::sqrt(sq_ / n);
  }
  const IoUResult iou = iou_from_confusion(confusion_, k_);
  r.miou = iou.miou;
  r.iou_per_class = iou.per_class;
  r.depth_pixels = depth_n_;
  r.label_pixels = label_n_;
  r.samples = samples_;
  return r;
}

Sample make_sample(const SceneSample& scene, int num_views) {
  if (num_views < 2 || static_cast<int>(scene.views.size()) < num_views) {
    throw std::invalid_argument("make_sample: scene has " + std::to_string(scene.views.size()) + " views, need " +
                                std::to_string(num_views) + " (>= 2)");
  }
  std::vector<int> ids(static_cast<std::size_t>(num_views));
  std::iota(ids.begin(), ids.end(), 0);
  return make_sample(scene, ids);
}

Sample make_sample(const SceneSample& scene, std::span<const int> view_ids) {
  if (view_ids.size() < 2) throw std::invalid_argument("make_sample: need at least 2 views");
  const int n = static_cast<int>(scene.views.size());
  for (int id : view_ids) {
    if (id < 0 || id >= n) {
      throw std::invalid_argument("make_sample: view " + std::to_string(id) + " out of range for " +
                                  std::to_string(n) + " views");
    }
  }
  Sample s;
  for (int id : view_ids) s.views.push_back(scene.views[id].as_view());
  s.depth = scene.views[view_ids[0]].depth;
  s.labels = scene.views[view_ids[0]].labels;
  return s;
}

Sample make_sample_random_sources(const SceneSample& scene, int num_views, std::mt19937_64& rng) {
  const int n = static_cast<int>(scene.views.size());
  if (num_views < 2 || n < num_views) {
    throw std::invalid_argument("make_sample: scene has " + std::to_string(n) + " views, need " +
                                std::to_string(num_views) + " (>= 2)");
  }
  std::vector<int> src(static_cast<std::size_t>(n - 1));
  std::iota(src.begin(), src.end(), 1);
  // Partial Fisher-Yates with explicit draws so the choice is portable across standard libraries.
  for (int i = 0; i < num_views - 1; ++i) {
    const int j = i + static_cast<int>(rng() % static_cast<std::uint64_t>(n - 1 - i));
    std::swap(src[i], src[j]);
  }
  std::vector<int> ids{0};
  ids.insert(ids.end(), src.begin(), src.begin() + (num_views - 1));
  return make_sample(scene, ids);
}

void TrainConfig::validate() const {
  if (epochs < 0) throw std::invalid_argument("train: epochs must be non-negative");
  if (batch_size < 1) throw std::invalid_argument("train: batch_size must be positive");
  if (!(optimizer.lr > 0)) throw std::invalid_argument("train: learning rate must be positive");
  loss.validate();
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"lr", c.optimizer.lr},
       {"weight_decay", c.optimizer.weight_decay},
       {"beta1", c.optimizer.beta1},
       {"beta2", c.optimizer.beta2},
       {"alpha", c.loss.alpha},
       {"beta", c.loss.beta},
       {"stage_weights", c.loss.stage_weights},
       {"shuffle", c.shuffle},
       {"cosine", c.cosine}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.optimizer.lr = j.value("lr", c.optimizer.lr);
  c.optimizer.weight_decay = j.value("weight_decay", c.optimizer.weight_decay);
  c.optimizer.beta1 = j.value("beta1", c.optimizer.beta1);
  c.optimizer.beta2 = j.value("beta2", c.optimizer.beta2);
  c.loss.alpha = j.value("alpha", c.loss.alpha);
  c.loss.beta = j.value("beta", c.loss.beta);
  c.loss.stage_weights = j.value("stage_weights", c.loss.stage_weights);
  c.shuffle = j.value("shuffle", c.shuffle);
  c.cosine = j.value("cosine", c.cosine);
}

void to_json(nlohmann::json& j, const StepLog& s) {
  j = {{"step", s.step}, {"L_seg", s.l_seg}, {"L_MVS", s.l_mvs}, {"L", s.l}, {"lr", s.lr}};
}

double scheduled_lr(const TrainConfig& cfg, long step, long total) {
  if (!cfg.cosine || total <= 1) return cfg.optimizer.lr;
  const double t = std::clamp(static_cast<double>(step) / static_cast<double>(total - 1), 0.0, 1.0);
  const double floor = 0.05;
  return cfg.optimizer.lr * (floor + (1 - floor) * 0.5 * (1 + std::cos(std::numbers::pi * t)));
}

std::vector<StepLog> train_epoch(std::span<const Sample> data, ParameterStore<float>& params, const ModelConfig& model,
                                 const TrainConfig& cfg, std::mt19937_64& rng, long& step, long total_steps,
                                 const StepCallback& on_step) {
  cfg.validate();
  const FlushSubnormals ftz;
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  if (cfg.shuffle) std::shuffle(order.begin(), order.end(), rng);
  std::vector<StepLog> logs;
  for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
    const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
    const auto count = static_cast<float>(end - start);
    std::map<std::string, Tensor<float>> grads;
    StepLog log;
    for (std::size_t i = start; i < end; ++i) {
      const Sample& s = data[order[i]];
      Tape<float> tape;
      PipelineOutput<float> out = forward<float>(tape, params, model, s.views);
      LossTerms<float> terms = compute_losses(out, s.depth, s.labels, model, cfg.loss);
      const double l = terms.total.value()[0];
      if (!std::isfinite(l)) throw NonFiniteLoss(step);
      log.l_seg += terms.seg.value()[0] / count;
      log.l_mvs += terms.mvs.value()[0] / count;
      log.l += l / count;
      tape.backward(terms.total);
      for (auto& [name, g] : tape.parameter_gradients()) {
        auto it = grads.find(name);
        if (it == grads.end()) it = grads.emplace(name, Tensor<float>(g.shape())).first;
        auto dst = it->second.values();
        auto src = g.values();
        for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k] / count;
      }
    }
    AdamWConfig opt = cfg.optimizer;
    opt.lr = scheduled_lr(cfg, step, total_steps);
    params.adamw_step(grads, opt);
    log.step = ++step;
    log.lr = opt.lr;
    if (on_step) on_step(log);
    logs.push_back(log);
  }
  return logs;
}

std::vector<StepLog> fit(std::span<const Sample> data, ParameterStore<float>& params, const ModelConfig& model,
                         const TrainConfig& cfg, std::uint64_t seed, const StepCallback& on_step) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  const long per_epoch = static_cast<long>((data.size() + cfg.batch_size - 1) / cfg.batch_size);
  const long total = per_epoch * cfg.epochs;
  long step = 0;
  std::vector<StepLog> logs;
  for (int e = 0; e < cfg.epochs; ++e) {
    auto l = train_epoch(data, params, model, cfg, rng, step, total, on_step);
    logs.insert(logs.end(), l.begin(), l.end());
  }
  return logs;
}

Prediction predict(const ParameterStore<float>& params, const ModelConfig& model,
                   std::span<const CameraView<float>> views) {
  const FlushSubnormals ftz;
  Tape<float> tape(false);
  PipelineOutput<float> out = forward<float>(tape, params, model, views);
  Prediction p;
  p.depth = out.depth().value();
  p.logits = out.logits.value();
  const int k = p.logits.dim(0);
  const int h = p.logits.dim(1);
  const int w = p.logits.dim(2);
  p.labels = Tensor<int>({h, w});
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      int best = 0;
      for (int c = 1; c < k; ++c) {
        if (p.logits.at(c, y, x) > p.logits.at(best, y, x)) best = c;
      }
      p.labels.at(y, x) = best;
    }
  }
  return p;
}

MetricReport evaluate(std::span<const Sample> data, const ParameterStore<float>& params, const ModelConfig& model) {
  MetricAccumulator acc(model.decoder.num_classes, model.cascade.d_min, model.cascade.d_max);
  for (const Sample& s : data) {
    const Prediction p = predict(params, model, s.views);
    acc.add(p.depth, s.depth, p.labels, s.labels);
  }
  return acc.report();
}

template Tensor<float> downsample_nearest(const Tensor<float>&, int, int);
template Tensor<double> downsample_nearest(const Tensor<double>&, int, int);
template Tensor<int> downsample_nearest(const Tensor<int>&, int, int);
template Var<float> smooth_l1_depth_loss(Var<float>, const Tensor<float>&, double, double, double, bool*);
template Var<double> smooth_l1_depth_loss(Var<double>, const Tensor<double>&, double, double, double, bool*);
template Var<float> cross_entropy_seg_loss(Var<float>, const Tensor<int>&, bool*);
template Var<double> cross_entropy_seg_loss(Var<double>, const Tensor<int>&, bool*);
template LossTerms<float> compute_losses(const PipelineOutput<float>&, const Tensor<float>&, const Tensor<int>&,
                                         const ModelConfig&, const LossConfig&);
template LossTerms<double> compute_losses(const PipelineOutput<double>&, const Tensor<double>&, const Tensor<int>&,
                                          const ModelConfig&, const LossConfig&);

}  // namespace sweepstack
