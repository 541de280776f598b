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

#include <gtest/gtest.h>

#include <chrono>

using namespace sweepstack;

TEST(Gradcheck, ModulesBelowTolerance) {
  const auto results = module_gradchecks();
  ASSERT_GE(results.size(), 6u);
  for (const auto& r : results) {
    EXPECT_LT(r.max_rel_err, 1e-4) << r.op << " " << r.tensor;
    EXPECT_GT(r.checked, 0u);
  }
}

TEST(Gradcheck, PipelineBelowToleranceWithinBudget) {
  const auto t0 = std::chrono::steady_clock::now();
  const GradcheckResult r = pipeline_gradcheck();
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  EXPECT_LT(r.max_rel_err, 1e-4) << r.tensor;
  EXPECT_GT(r.checked, 100u);
  EXPECT_LT(secs, 120.0);
}

TEST(Gradcheck, InjectedFaultIsDetected) {
  GradcheckOptions opts;
  opts.inject_fault = 1e-2;
  const GradcheckResult r = pipeline_gradcheck(opts);
  EXPECT_GT(r.max_rel_err, 1e-4);
  for (const auto& p : primitive_gradchecks(opts)) EXPECT_GT(p.max_rel_err, 1e-6) << p.op;
}

TEST(Gradcheck, ReportJsonFields) {
  Tensor<double> x({2, 3});
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = 0.1 * static_cast<double>(i) - 0.2;
  const GradcheckResult r = finite_difference_check(
      "square", {x}, [](Tape<double>&, const std::vector<Var<double>>& in) { return ad::mul(in[0], in[0]); });
  const nlohmann::json j = r;
  EXPECT_EQ(j.at("op"), "square");
  EXPECT_EQ(j.at("shape"), nlohmann::json::array({2, 3}));
  EXPECT_TRUE(j.at("max_rel_err").is_number());
  EXPECT_EQ(j.at("coordinate").size(), 2u);
  EXPECT_LT(r.max_rel_err, 1e-8);
  EXPECT_EQ(r.checked, 6u);
}

TEST(Gradcheck, WrongBackwardIsCaught) {
  // A hand-made op whose backward is off by a factor of two.
  Tensor<double> x({3}, {0.3, -0.7, 1.1});
  const GradcheckResult r = finite_difference_check("bad", {x}, [](Tape<double>& t, const std::vector<Var<double>>& in) {
    Tensor<double> y = in[0].value();
    for (auto& v : y.storage()) v = 3 * v;
    const Var<double> a = in[0];
    return t.record(std::move(y), {a}, "bad", [a](Tape<double>& tape, int self) {
      const Tensor<double>& g = tape.grad(self);
      Tensor<double>& dx = tape.grad(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) dx[i] += 6 * g[i];
    });
  });
  EXPECT_NEAR(r.max_rel_err, 0.5, 1e-6);
}
