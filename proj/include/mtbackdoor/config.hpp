// Experiment configuration: everything needed to reproduce a run, serialised
// as one JSON document (config.json inside each run directory).
#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include "data.hpp"
#include "detector.hpp"
#include "eval.hpp"
#include "train.hpp"

namespace mtb {

/// Either a synthetic dataset spec or a directory written by `save_dataset`.
struct DataSource {
  std::optional<DatasetSpec> spec;
  std::optional<std::filesystem::path> path;

  Dataset load() const {
    if (path) return load_dataset(*path);
    if (spec) return make_synthetic(*spec);
    throw ConfigError("data source has neither a spec nor a path");
  }
};

struct EvalSettings {
  std::vector<Scenario> scenarios{kAllScenarios.begin(), kAllScenarios.end()};
  double tau = kDefaultTau;
  double map_score_threshold = 0.05;
  bool compute_map = true;

  EvalOptions options() const {
    EvalOptions o;
    o.scenarios = scenarios;
    o.tau = tau;
    o.map_score_threshold = map_score_threshold;
    o.compute_map = compute_map;
    return o;
  }
};

struct RunConfig {
  DataSource train_data;
  DataSource validation_data;
  GridDetectorConfig detector;
  TrainConfig train;
  EvalSettings eval;
  std::uint64_t seed = 0;

  /// Desk-scale default: K = 4, 500 training and 100 validation images.
  static RunConfig defaults() {
    RunConfig c;
    DatasetSpec t;
    t.num_classes = 4;
    t.n_images = 500;
    t.class_frequency = imbalanced_frequency(4, 0.5);
    t.seed = 1;
    DatasetSpec v = t;
    v.n_images = 100;
    v.seed = 2;
    c.train_data.spec = t;
    c.validation_data.spec = v;
    c.train.injection.patch_height = c.train.injection.patch_width = 8;
    return c;
  }

  void validate() const {
    detector.validate();
    train.validate();
    if (train_data.spec && train_data.spec->num_classes != detector.num_classes)
      throw ConfigError("training spec has " + std::to_string(train_data.spec->num_classes) +
                        " classes, detector has " + std::to_string(detector.num_classes));
    if (!(eval.tau > 0 && eval.tau < 1)) throw ConfigError("tau must lie in (0, 1)");
  }
};

inline nlohmann::json to_json(const DataSource& d) {
  nlohmann::json j = nlohmann::json::object();
  if (d.spec) j["spec"] = to_json(*d.spec);
  if (d.path) j["path"] = d.path->string();
  return j;
}

inline DataSource data_source_from_json(const nlohmann::json& j) {
  DataSource d;
  if (j.contains("spec")) d.spec = dataset_spec_from_json(j["spec"]);
  if (j.contains("path")) d.path = j["path"].get<std::string>();
  return d;
}

inline nlohmann::json to_json(const EvalSettings& e) {
  return {{"scenarios", scenario_names(e.scenarios)},
          {"tau", e.tau},
          {"map_score_threshold", e.map_score_threshold},
          {"compute_map", e.compute_map}};
}

inline EvalSettings eval_settings_from_json(const nlohmann::json& j) {
  EvalSettings e;
  if (j.contains("scenarios")) {
    e.scenarios.clear();
    for (const auto& s : j["scenarios"]) e.scenarios.push_back(scenario_from_string(s.get<std::string>()));
  }
  e.tau = j.value("tau", e.tau);
  e.map_score_threshold = j.value("map_score_threshold", e.map_score_threshold);
  e.compute_map = j.value("compute_map", e.compute_map);
  return e;
}

inline nlohmann::json to_json(const RunConfig& c) {
  return {{"format", "mtbackdoor-run-config-v1"},
          {"train_data", to_json(c.train_data)},
          {"validation_data", to_json(c.validation_data)},
          {"detector", to_json(c.detector)},
          {"train", to_json(c.train)},
          {"eval", to_json(c.eval)},
          {"seed", c.seed}};
}

/// Missing keys keep their `RunConfig::defaults()` values.
inline RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig c = RunConfig::defaults();
  if (!j.is_object()) throw ConfigError("run config must be a JSON object");
  if (j.contains("format") && j["format"] != "mtbackdoor-run-config-v1")
    throw ConfigError("unsupported run config format " + j["format"].dump());
  try {
    if (j.contains("train_data")) c.train_data = data_source_from_json(j["train_data"]);
    if (j.contains("validation_data")) c.validation_data = data_source_from_json(j["validation_data"]);
    if (j.contains("detector")) c.detector = detector_config_from_json(j["detector"]);
    if (j.contains("train")) c.train = train_config_from_json(j["train"]);
    if (j.contains("eval")) c.eval = eval_settings_from_json(j["eval"]);
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed run config: ") + e.what());
  }
  return c;
}

}  // namespace mtb
