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

// Central-difference verification of reverse-mode gradients in double precision.
//
// A graph output y is reduced to f = sum(r * y) with a fixed random r; every
// checked coordinate x_i compares df/dx_i from the tape against
// (f(x_i + eps) - f(x_i - eps)) / (2 eps) via
//   rel = |a - n| / max(|a|, |n|, floor).

#include <sweepstack/autodiff.hpp>
#include <sweepstack/params.hpp>

#include <nlohmann/json.hpp>

#include <functional>
#include <string>
#include <vector>

namespace sweepstack {

struct GradcheckOptions {
  double eps = 1e-5;
  double floor = 1e-3;
  /// Coordinates checked per tensor; 0 checks all of them.
  std::size_t max_coords = 0;
  std::uint64_t seed = 0;
  /// Relative corruption applied to analytic gradients (fault-injection fixture).
  double inject_fault = 0.0;
  /// Called for every checked coordinate with (tensor, flat index, analytic, numeric).
  std::function<void(const std::string&, std::size_t, double, double)> on_coordinate;
};

struct GradcheckResult {
  std::string op;
  std::string tensor;  // name of the tensor holding the worst coordinate
  Shape shape;
  double max_rel_err = 0.0;
  std::vector<int> coordinate;
  std::size_t checked = 0;
};

void to_json(nlohmann::json& j, const GradcheckResult& r);

/// Builds a graph from tensors bound by name from the store.
using StoreFn = std::function<Var<double>(Tape<double>&, const ParameterStore<double>&)>;

/// Checks the gradient of every tensor in `inputs` (treated as parameters).
GradcheckResult check_gradients(const std::string& op, ParameterStore<double> inputs, const StoreFn& fn,
                                const GradcheckOptions& opts = {});

/// Convenience form: inputs are bound as "x0", "x1", ...
using InputFn = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;
GradcheckResult finite_difference_check(const std::string& op, const std::vector<Tensor<double>>& inputs,
                                        const InputFn& fn, const GradcheckOptions& opts = {});

/// Every differentiable primitive on random inputs placed away from kinks.
std::vector<GradcheckResult> primitive_gradchecks(const GradcheckOptions& opts = {});
/// Feature branches, cost volume + regularizer, attention and decoder on a tiny model.
std::vector<GradcheckResult> module_gradchecks(const GradcheckOptions& opts = {});
/// Total loss of the full pipeline on an 8x8, two-view, two-class scene with two cascade stages.
GradcheckResult pipeline_gradcheck(const GradcheckOptions& opts = {});

}  // namespace sweepstack
