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

#include <sweepstack/tensor.hpp>

#include <cstdint>
#include <map>
#include <random>
#include <stdexcept>
#include <string>

namespace sweepstack {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 1e-2;
  double eps = 1e-8;
};

class NonFiniteGradient : public std::runtime_error {
 public:
  explicit NonFiniteGradient(std::string param)
      : std::runtime_error("non-finite gradient for parameter '" + param + "'"),
        param_(std::move(param)) {}
  const std::string& param() const { return param_; }

 private:
  std::string param_;
};

/// Named parameter tensors plus AdamW moment state.
template <typename T>
class ParameterStore {
 public:
  void add(const std::string& name, Tensor<T> value) {
    if (params_.contains(name)) throw std::invalid_argument("duplicate parameter '" + name + "'");
    params_.emplace(name, std::move(value));
  }
  bool contains(const std::string& name) const { return params_.contains(name); }
  const Tensor<T>& get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
    return it->second;
  }
  Tensor<T>& get(const std::string& name) {
    return const_cast<Tensor<T>&>(static_cast<const ParameterStore&>(*this).get(name));
  }
  const std::map<std::string, Tensor<T>>& tensors() const { return params_; }
  std::map<std::string, Tensor<T>>& tensors() { return params_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : params_) n += t.size();
    return n;
  }

  /// Copies parameters (not optimizer state) into another scalar type.
  template <typename U>
  ParameterStore<U> cast() const {
    ParameterStore<U> out;
    for (const auto& [name, t] : params_) out.add(name, t.template cast<U>());
    return out;
  }

  /// Decoupled-weight-decay Adam with bias correction. Parameters without an
  /// entry in `grads` see a zero gradient. Nothing is modified if any gradient
  /// is non-finite.
  void adamw_step(const std::map<std::string, Tensor<T>>& grads, const AdamWConfig& cfg) {
    for (const auto& [name, g] : grads) {
      if (!params_.contains(name)) throw std::out_of_range("gradient for unknown parameter '" + name + "'");
      if (!g.all_finite()) throw NonFiniteGradient(name);
    }
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step_));
    for (auto& [name, p] : params_) {
      auto& m = moment(first_, name, p);
      auto& v = moment(second_, name, p);
      auto git = grads.find(name);
      const Tensor<T>* g = git == grads.end() ? nullptr : &git->second;
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = g ? static_cast<double>((*g)[i]) : 0.0;
        double pi = static_cast<double>(p[i]);
        pi -= cfg.lr * cfg.weight_decay * pi;
        const double mi = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
        const double vi = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
        m[i] = static_cast<T>(mi);
        v[i] = static_cast<T>(vi);
        pi -= cfg.lr * (mi / bc1) / (std::sqrt(vi / bc2) + cfg.eps);
        p[i] = static_cast<T>(pi);
      }
    }
  }

  long step_count() const { return step_; }
  const Tensor<T>* first_moment(const std::string& name) const { return find(first_, name); }
  const Tensor<T>* second_moment(const std::string& name) const { return find(second_, name); }

 private:
  static Tensor<T>& moment(std::map<std::string, Tensor<T>>& store, const std::string& name,
                           const Tensor<T>& like) {
    auto it = store.find(name);
    if (it == store.end()) it = store.emplace(name, Tensor<T>(like.shape())).first;
    return it->second;
  }
  static const Tensor<T>* find(const std::map<std::string, Tensor<T>>& store, const std::string& name) {
    auto it = store.find(name);
    return it == store.end() ? nullptr : &it->second;
  }

  std::map<std::string, Tensor<T>> params_;
  std::map<std::string, Tensor<T>> first_;
  std::map<std::string, Tensor<T>> second_;
  long step_ = 0;
};

/// Uniform(-bound, bound) with bound = sqrt(6 / fan_in) (He-uniform).
template <typename T>
Tensor<T> he_uniform(Shape shape, int fan_in, std::mt19937_64& rng) {
  Tensor<T> t(std::move(shape));
  const double bound = std::sqrt(6.0 / std::max(1, fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : t.values()) v = static_cast<T>(dist(rng));
  return t;
}

}  // namespace sweepstack
