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

// sweepstack command-line front end: generate, train, predict, evaluate, gradcheck.

#include <sweepstack/dataset.hpp>
#include <sweepstack/gradcheck.hpp>
#include <sweepstack/io.hpp>
#include <sweepstack/train.hpp>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace sweepstack;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitVerification = 1;
constexpr int kExitUsage = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct VerificationFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Globals {
  std::string config_path;
  std::uint64_t seed = 0;
  bool seed_set = false;
  int threads = 1;
  std::string out = ".";
};

// Everything a run may read from --config; flags override individual fields.
struct RunConfig {
  SceneConfig scene;
  RigConfig rig;
  ModelConfig model;
  TrainConfig train;
  std::uint64_t seed = 0;
  bool model_classes_given = false;
};

void to_json(json& j, const RunConfig& c) {
  j = {{"scene", c.scene}, {"rig", c.rig}, {"model", c.model}, {"train", c.train}, {"seed", c.seed}};
}

RunConfig load_run_config(const Globals& g) {
  RunConfig rc;
  if (!g.config_path.empty()) {
    json j;
    try {
      j = read_json(g.config_path);
    } catch (const IoError& e) {
      throw UsageError(e.what());
    }
    try {
      if (j.contains("scene")) j.at("scene").get_to(rc.scene);
      if (j.contains("rig")) j.at("rig").get_to(rc.rig);
      if (j.contains("model")) {
        j.at("model").get_to(rc.model);
        rc.model_classes_given = j.at("model").contains("decoder") && j.at("model").at("decoder").contains("num_classes");
      }
      if (j.contains("train")) j.at("train").get_to(rc.train);
      rc.seed = j.value("seed", rc.seed);
    } catch (const json::exception& e) {
      throw UsageError(g.config_path + ": " + e.what());
    }
  }
  if (g.seed_set) rc.seed = g.seed;
  return rc;
}

void write_resolved(const fs::path& out, const std::string& command, const Globals& g, json body) {
  body["command"] = command;
  body["threads"] = g.threads;
  body["out"] = out.string();
  write_json(out / "config.resolved.json", body);
}

std::vector<Sample> load_samples(const fs::path& dir, int views, int* num_classes) {
  std::vector<Sample> out;
  const auto scenes = list_scenes(dir);
  if (scenes.empty()) throw UsageError("no scenes found under " + dir.string());
  for (const auto& s : scenes) {
    const SceneSample sample = import_dataset(s);
    if (num_classes) {
      if (*num_classes < 0) *num_classes = sample.manifest.num_classes;
      if (*num_classes != sample.manifest.num_classes) {
        throw UsageError(s.string() + ": class count " + std::to_string(sample.manifest.num_classes) +
                         " differs from " + std::to_string(*num_classes));
      }
    }
    const int m = views > 0 ? views : sample.manifest.num_views;
    if (m > static_cast<int>(sample.views.size())) {
      throw UsageError(s.string() + " has " + std::to_string(sample.views.size()) + " views, " + std::to_string(m) +
                       " requested");
    }
    out.push_back(make_sample(sample, m));
  }
  return out;
}

void check_views(int views) {
  if (views != 0 && views < 2) throw UsageError("multi-view depth needs at least 2 views (got " + std::to_string(views) + ")");
}

void check_image_size(const ModelConfig& m, int h, int w) {
  const int k = m.size_multiple();
  if (h % k != 0 || w % k != 0) {
    throw UsageError("image size " + std::to_string(w) + "x" + std::to_string(h) + " must be a multiple of " +
                     std::to_string(k) + " for this model");
  }
}

void apply_ablations(ModelConfig& m, const std::vector<std::string>& ablations) {
  for (const auto& a : ablations) {
    if (a == "no-sem-to-mvs") {
      m.options.sem_to_mvs = false;
    } else if (a == "no-depth-prompt") {
      m.options.depth_prompt = false;
    } else {
      throw UsageError("unknown ablation '" + a + "'");
    }
  }
}

// ---------------------------------------------------------------------------

struct GenerateArgs {
  int scenes = 1;
  std::optional<int> views, size, classes;
  std::optional<std::string> rig;
  std::optional<double> baseline;
};

int cmd_generate(const Globals& g, const GenerateArgs& a) {
  RunConfig rc = load_run_config(g);
  if (a.views) rc.rig.num_views = *a.views;
  if (a.size) rc.rig.width = rc.rig.height = *a.size;
  if (a.classes) rc.scene.num_classes = *a.classes;
  if (a.baseline) rc.rig.baseline = *a.baseline;
  try {
    if (a.rig) rc.rig.mode = rig_mode_from_string(*a.rig);
    rc.rig.validate();
    rc.scene.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  check_views(rc.rig.num_views);
  if (a.scenes < 1) throw UsageError("--scenes must be positive");
  const fs::path out(g.out);
  json body = rc;
  body["scenes"] = a.scenes;
  write_resolved(out, "generate", g, body);
  spdlog::info("generating {} scene(s) x {} view(s), {} rig, seed {}", a.scenes, rc.rig.num_views,
               to_string(rc.rig.mode), rc.seed);
  export_corpus(rc.scene, rc.rig, a.scenes, rc.seed, out);
  std::cout << "wrote " << a.scenes << " scene(s) to " << out.string() << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string data;
  std::string val;
  std::optional<int> epochs, batch_size, views;
  std::optional<double> lr, alpha;
  std::vector<std::string> ablate;
};

int cmd_train(const Globals& g, const TrainArgs& a) {
  RunConfig rc = load_run_config(g);
  if (a.epochs) rc.train.epochs = *a.epochs;
  if (a.batch_size) rc.train.batch_size = *a.batch_size;
  if (a.lr) rc.train.optimizer.lr = *a.lr;
  if (a.alpha) rc.train.loss.alpha = *a.alpha;
  const int views = a.views.value_or(0);
  check_views(views);
  apply_ablations(rc.model, a.ablate);

  int k = rc.model_classes_given ? rc.model.decoder.num_classes : -1;
  const std::vector<Sample> data = load_samples(a.data, views, &k);
  std::vector<Sample> val;
  if (!a.val.empty()) val = load_samples(a.val, views, &k);
  rc.model.decoder.num_classes = k;
  try {
    rc.model.validate();
    rc.train.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  check_image_size(rc.model, data[0].depth.dim(0), data[0].depth.dim(1));
  if (data[0].views.size() < 2) throw UsageError("training scenes need at least 2 views");

  const fs::path out(g.out);
  json body = rc;
  body["data"] = a.data;
  body["val"] = a.val;
  body["views"] = data[0].views.size();
  body["ablate"] = a.ablate;
  write_resolved(out, "train", g, body);

  ParameterStore<float> params = init_model<float>(rc.model, rc.seed);
  spdlog::info("training on {} scene(s), {} view(s), {} parameters, {} epoch(s)", data.size(), data[0].views.size(),
               params.parameter_count(), rc.train.epochs);
  std::ofstream log(out / "train_log.jsonl");
  if (!log) throw IoError(out / "train_log.jsonl", "cannot open for writing");
  const json ckpt_config = {
      {"model", rc.model}, {"train", rc.train}, {"seed", rc.seed}, {"views", data[0].views.size()}};
  std::mt19937_64 rng(rc.seed);
  const long per_epoch = static_cast<long>((data.size() + rc.train.batch_size - 1) / rc.train.batch_size);
  const long total = per_epoch * rc.train.epochs;
  long step = 0;
  double first_loss = NAN, last_loss = NAN;
  for (int e = 0; e < rc.train.epochs; ++e) {
    double sum = 0;
    const auto logs = train_epoch(data, params, rc.model, rc.train, rng, step, total, [&](const StepLog& s) {
      log << json(s).dump() << "\n";
      spdlog::debug("step {} L {:.5f} L_seg {:.5f} L_MVS {:.5f} lr {:.2e}", s.step, s.l, s.l_seg, s.l_mvs, s.lr);
    });
    log.flush();
    for (const auto& s : logs) sum += s.l;
    const double mean = logs.empty() ? 0.0 : sum / static_cast<double>(logs.size());
    if (e == 0) first_loss = mean;
    last_loss = mean;
    json c = ckpt_config;
    c["epoch"] = e + 1;
    save_checkpoint(out / "checkpoint.bin", params, c);
    spdlog::info("epoch {}/{} mean loss {:.5f}", e + 1, rc.train.epochs, mean);
  }
  if (rc.train.epochs == 0) save_checkpoint(out / "checkpoint.bin", params, ckpt_config);
  std::cout << "trained " << rc.train.epochs << " epoch(s); mean loss " << first_loss << " -> " << last_loss << "\n";
  if (!val.empty()) {
    const MetricReport r = evaluate(val, params, rc.model);
    write_json(out / "metrics.json", r);
    std::cout << "held-out: Abs " << r.abs_cm << " cm, Rel " << r.rel_pct << " %, RMSE " << r.rmse_cm
              << " cm, mIoU " << r.miou << "\n";
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct PredictArgs {
  std::string checkpoint;
  std::string scene;
  std::optional<int> views;
  bool logits = false;
};

ModelConfig model_from_checkpoint(const Checkpoint& c) {
  try {
    ModelConfig m = c.config.at("model").get<ModelConfig>();
    m.validate();
    return m;
  } catch (const std::exception& e) {
    throw UsageError(std::string("checkpoint config: ") + e.what());
  }
}

int cmd_predict(const Globals& g, const PredictArgs& a) {
  check_views(a.views.value_or(0));
  const Checkpoint ckpt = load_checkpoint(a.checkpoint);
  const ModelConfig model = model_from_checkpoint(ckpt);
  std::vector<CameraView<float>> views = load_views(a.scene);
  if (a.views) {
    if (*a.views > static_cast<int>(views.size())) {
      throw UsageError(a.scene + " has " + std::to_string(views.size()) + " views, " + std::to_string(*a.views) +
                       " requested");
    }
    views.resize(static_cast<std::size_t>(*a.views));
  }
  if (views.size() < 2) throw UsageError(a.scene + ": need at least 2 views with cameras, found " + std::to_string(views.size()));
  check_image_size(model, views[0].image.dim(1), views[0].image.dim(2));
  const int trained_views = ckpt.config.value("views", 0);
  if (trained_views != 0 && trained_views != static_cast<int>(views.size())) {
    spdlog::warn("checkpoint was trained with {} views; predicting with {}", trained_views, views.size());
  }

  const fs::path out(g.out);
  write_resolved(out, "predict", g,
                 {{"checkpoint", a.checkpoint}, {"scene", a.scene}, {"views", views.size()}, {"model", model},
                  {"logits", a.logits}});
  const Prediction p = predict(ckpt.params, model, views);
  write_pfm(out / "depth.pfm", p.depth);
  write_png_depth_mm(out / "depth_mm.png", p.depth);
  write_png_labels(out / "labels.png", p.labels);
  write_json(out / "labels_palette.json", label_palette(model.decoder.num_classes));
  if (a.logits) write_tensor_file(out / "logits.bin", p.logits);
  std::cout << "predicted " << p.depth.dim(1) << "x" << p.depth.dim(0) << " depth and labels using "
            << views.size() << " views\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct EvaluateArgs {
  std::string checkpoint;
  std::string data;
  std::optional<int> views;
  bool oracle = false;
  bool per_scene = false;
  std::vector<std::string> compare;
};

void print_report(const std::string& label, const MetricReport& r) {
  std::cout << label << "Abs " << r.abs_cm << " cm, Rel " << r.rel_pct << " %, RMSE " << r.rmse_cm << " cm, mIoU "
            << r.miou << " (" << r.samples << " sample(s))\n";
}

int cmd_compare(const Globals& g, const std::vector<std::string>& files) {
  if (files.size() != 2) throw UsageError("--compare takes exactly two reports");
  MetricReport a, b;
  try {
    a = read_json(files[0]).get<MetricReport>();
    b = read_json(files[1]).get<MetricReport>();
  } catch (const json::exception& e) {
    throw UsageError(std::string("malformed report: ") + e.what());
  }
  const json delta = {{"abs_err_cm", b.abs_cm - a.abs_cm},
                      {"rel_err_pct", b.rel_pct - a.rel_pct},
                      {"rmse_cm", b.rmse_cm - a.rmse_cm},
                      {"miou", b.miou - a.miou}};
  const fs::path out(g.out);
  write_resolved(out, "evaluate", g, {{"compare", files}});
  write_json(out / "compare.json", {{"a", files[0]}, {"b", files[1]}, {"delta", delta}});
  std::cout << "metric        a            b            b - a\n";
  const auto row = [](const char* name, double x, double y) {
    std::printf("%-12s  %-11.6g  %-11.6g  %+.6g\n", name, x, y, y - x);
  };
  row("abs_err_cm", a.abs_cm, b.abs_cm);
  row("rel_err_pct", a.rel_pct, b.rel_pct);
  row("rmse_cm", a.rmse_cm, b.rmse_cm);
  row("miou", a.miou, b.miou);
  return kExitOk;
}

int cmd_evaluate(const Globals& g, const EvaluateArgs& a) {
  if (!a.compare.empty()) return cmd_compare(g, a.compare);
  if (a.data.empty()) throw UsageError("evaluate needs --data (or --compare)");
  if (a.oracle == !a.checkpoint.empty()) throw UsageError("evaluate needs exactly one of --checkpoint or --oracle");
  const int views = a.views.value_or(0);
  check_views(views);
  std::optional<Checkpoint> ckpt;
  ModelConfig model;
  int k = -1;
  if (!a.oracle) {
    ckpt = load_checkpoint(a.checkpoint);
    model = model_from_checkpoint(*ckpt);
    k = model.decoder.num_classes;
  }
  const std::vector<Sample> data = load_samples(a.data, views, &k);
  if (a.oracle) model.decoder.num_classes = k;
  if (!a.oracle) check_image_size(model, data[0].depth.dim(0), data[0].depth.dim(1));

  const fs::path out(g.out);
  write_resolved(out, "evaluate", g,
                 {{"checkpoint", a.checkpoint}, {"data", a.data}, {"oracle", a.oracle}, {"views", data[0].views.size()},
                  {"per_scene", a.per_scene}, {"model", model}});
  const double d_min = model.cascade.d_min, d_max = model.cascade.d_max;
  MetricAccumulator total(k, d_min, d_max);
  json per_scene = json::array();
  const auto scenes = list_scenes(a.data);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Sample& s = data[i];
    Tensor<float> depth = s.depth;
    Tensor<int> labels = s.labels;
    if (!a.oracle) {
      Prediction p = predict(ckpt->params, model, s.views);
      depth = std::move(p.depth);
      labels = std::move(p.labels);
    }
    total.add(depth, s.depth, labels, s.labels);
    if (a.per_scene) {
      MetricAccumulator one(k, d_min, d_max);
      one.add(depth, s.depth, labels, s.labels);
      json j = one.report();
      j["scene"] = scenes[i].filename().string();
      per_scene.push_back(j);
    }
  }
  const MetricReport r = total.report();
  json j = r;
  j["views"] = data[0].views.size();
  if (a.per_scene) j["per_scene"] = per_scene;
  write_json(out / "metrics.json", j);
  print_report(a.oracle ? "oracle: " : "", r);
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct GradcheckArgs {
  std::string scope = "all";
  double inject_fault = 0.0;
  std::size_t max_coords = 0;
};

int cmd_gradcheck(const Globals& g, const GradcheckArgs& a) {
  GradcheckOptions opts;
  opts.seed = g.seed;
  opts.inject_fault = a.inject_fault;
  opts.max_coords = a.max_coords;
  struct Checked {
    GradcheckResult r;
    double tol;
  };
  std::vector<Checked> results;
  const bool all = a.scope == "all";
  const fs::path out(g.out);
  write_resolved(out, "gradcheck", g,
                 {{"scope", a.scope}, {"eps", opts.eps}, {"floor", opts.floor}, {"inject_fault", a.inject_fault},
                  {"max_coords", a.max_coords}, {"seed", g.seed}});
  if (all || a.scope == "primitive")
    for (auto& r : primitive_gradchecks(opts)) results.push_back({std::move(r), 1e-6});
  if (all || a.scope == "module")
    for (auto& r : module_gradchecks(opts)) results.push_back({std::move(r), 1e-4});
  if (all || a.scope == "pipeline") results.push_back({pipeline_gradcheck(opts), 1e-4});

  json report = json::array();
  const Checked* worst = nullptr;
  for (const auto& c : results) {
    json j = c.r;
    j["tolerance"] = c.tol;
    j["pass"] = c.r.max_rel_err < c.tol;
    report.push_back(j);
    std::printf("%-6s %-28s max_rel_err %.3e (tol %.0e) over %zu coordinate(s)\n",
                c.r.max_rel_err < c.tol ? "PASS" : "FAIL", c.r.op.c_str(), c.r.max_rel_err, c.tol, c.r.checked);
    if (c.r.max_rel_err >= c.tol && (!worst || c.r.max_rel_err / c.tol > worst->r.max_rel_err / worst->tol)) {
      worst = &c;
    }
  }
  write_json(out / "gradcheck.json", report);
  if (worst) {
    std::string coord;
    for (int v : worst->r.coordinate) coord += (coord.empty() ? "" : ",") + std::to_string(v);
    throw VerificationFailure("gradient check failed; worst offender " + worst->r.op + " (" + worst->r.tensor + "[" +
                              coord + "]) rel err " + std::to_string(worst->r.max_rel_err));
  }
  return kExitOk;
}

void setup_logging() {
  auto logger = spdlog::stderr_color_mt("sweepstack");
  spdlog::set_default_logger(logger);
  spdlog::set_pattern("[%H:%M:%S.%e] [%^%l%$] %v");
  spdlog::set_level(spdlog::level::info);
  if (const char* lvl = std::getenv("SWEEPSTACK_LOG")) {
    const auto parsed = spdlog::level::from_str(lvl);
    // from_str maps unknown names to "off"; only accept a real "off".
    if (parsed != spdlog::level::off || std::string(lvl) == "off") {
      spdlog::set_level(parsed);
    } else {
      spdlog::warn("ignoring unknown SWEEPSTACK_LOG level '{}'", lvl);
    }
  }
}

}  // namespace

int main(int argc, char** argv) {
  setup_logging();
  CLI::App app{"Multi-view plane-sweep depth and segmentation on synthetic scenes"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config_path, "JSON run configuration")->check(CLI::ExistingFile);
  auto* seed_opt = app.add_option("--seed", g.seed, "Seed for every random choice");
  app.add_option("--threads", g.threads, "Worker cap")->check(CLI::PositiveNumber);
  app.add_option("--out", g.out, "Output directory");

  GenerateArgs gen;
  auto* generate = app.add_subcommand("generate", "Render a synthetic dataset");
  generate->add_option("--scenes", gen.scenes, "Number of scenes");
  generate->add_option("--views", gen.views, "Views per scene");
  generate->add_option("--size", gen.size, "Image width and height");
  generate->add_option("--classes", gen.classes, "Number of semantic classes");
  generate->add_option("--rig", gen.rig, "Camera rig: inward or outward");
  generate->add_option("--baseline", gen.baseline, "Rig baseline in meters");

  TrainArgs tr;
  auto* train = app.add_subcommand("train", "Train on a generated dataset");
  train->add_option("--data", tr.data, "Training scenes")->required();
  train->add_option("--val", tr.val, "Held-out scenes evaluated after training");
  train->add_option("--epochs", tr.epochs);
  train->add_option("--batch-size", tr.batch_size);
  train->add_option("--lr", tr.lr);
  train->add_option("--alpha", tr.alpha, "Weight of the depth loss");
  train->add_option("--views", tr.views, "Views used per scene (reference first)");
  train->add_option("--ablate", tr.ablate, "no-sem-to-mvs and/or no-depth-prompt");

  PredictArgs pr;
  auto* predict_cmd = app.add_subcommand("predict", "Depth and labels for the reference view of a scene");
  predict_cmd->add_option("--checkpoint", pr.checkpoint)->required()->check(CLI::ExistingFile);
  predict_cmd->add_option("--scene", pr.scene, "Directory with view_%04d.png and cameras")->required();
  predict_cmd->add_option("--views", pr.views);
  predict_cmd->add_flag("--logits", pr.logits, "Also write the raw logits tensor");

  EvaluateArgs ev;
  auto* evaluate_cmd = app.add_subcommand("evaluate", "Metrics over a dataset, or compare two reports");
  evaluate_cmd->add_option("--checkpoint", ev.checkpoint)->check(CLI::ExistingFile);
  evaluate_cmd->add_option("--data", ev.data);
  evaluate_cmd->add_option("--views", ev.views);
  evaluate_cmd->add_flag("--oracle", ev.oracle, "Score ground truth against itself");
  evaluate_cmd->add_flag("--per-scene", ev.per_scene, "Include per-scene reports");
  evaluate_cmd->add_option("--compare", ev.compare, "Two MetricReport files")->expected(2);

  GradcheckArgs gc;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient verification");
  gradcheck->add_option("scope", gc.scope, "primitive, module, pipeline or all")
      ->check(CLI::IsMember({"primitive", "module", "pipeline", "all"}));
  gradcheck->add_option("--inject-fault", gc.inject_fault, "Corrupt analytic gradients (harness self-test)");
  gradcheck->add_option("--max-coords", gc.max_coords, "Coordinates checked per tensor (0 = all)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }
  g.seed_set = seed_opt->count() > 0;

  try {
    fs::create_directories(g.out);
    if (*generate) return cmd_generate(g, gen);
    if (*train) return cmd_train(g, tr);
    if (*predict_cmd) return cmd_predict(g, pr);
    if (*evaluate_cmd) return cmd_evaluate(g, ev);
    if (*gradcheck) return cmd_gradcheck(g, gc);
  } catch (const UsageError& e) {
    spdlog::error("{}", e.what());
    return kExitUsage;
  } catch (const IoError& e) {
    spdlog::error("{}", e.what());
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    spdlog::error("{}", e.what());
    return kExitUsage;
  } catch (const VerificationFailure& e) {
    spdlog::error("{}", e.what());
    return kExitVerification;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kExitVerification;
  }
  return kExitUsage;
}
