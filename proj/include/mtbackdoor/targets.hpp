// Attack targets: the removal/generation encoding, the target pool and the
// label-poisoning transform for each attack scenario.
#pragma once

#include <array>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "core.hpp"

namespace mtb {

enum class Scenario {
  UntargetedRemoval,
  TargetedRemoval,
  UntargetedMiscls,
  TargetedMiscls,
  UntargetedGeneration,
};

inline constexpr std::array<Scenario, 5> kAllScenarios = {
    Scenario::UntargetedRemoval, Scenario::TargetedRemoval, Scenario::UntargetedMiscls,
    Scenario::TargetedMiscls, Scenario::UntargetedGeneration};

inline std::string_view to_string(Scenario s) {
  switch (s) {
    case Scenario::UntargetedRemoval: return "untargeted_removal";
    case Scenario::TargetedRemoval: return "targeted_removal";
    case Scenario::UntargetedMiscls: return "untargeted_miscls";
    case Scenario::TargetedMiscls: return "targeted_miscls";
    case Scenario::UntargetedGeneration: return "untargeted_generation";
  }
  return "?";
}

inline Scenario scenario_from_string(std::string_view name) {
  for (Scenario s : kAllScenarios)
    if (to_string(s) == name) return s;
  throw ConfigError("unknown scenario '" + std::string(name) + "'");
}

inline std::vector<std::string> scenario_names(const std::vector<Scenario>& list) {
  std::vector<std::string> out;
  for (Scenario s : list) out.emplace_back(to_string(s));
  return out;
}

inline bool is_targeted(Scenario s) {
  return s == Scenario::TargetedRemoval || s == Scenario::TargetedMiscls;
}

/// e = [e_r, e_g] plus the scenario it encodes.
struct AttackTarget {
  Scenario scenario = Scenario::UntargetedRemoval;
  int num_classes = 0;
  std::optional<int> source;
  std::optional<int> destination;
  std::vector<double> removal;     // e_r, entries in {0, 1}
  std::vector<double> generation;  // e_g, entries in {0, 1}

  friend bool operator==(const AttackTarget&, const AttackTarget&) = default;
};

inline std::string describe(const AttackTarget& t) {
  std::string s(to_string(t.scenario));
  if (t.source) s += ":" + std::to_string(*t.source);
  if (t.destination) s += "->" + std::to_string(*t.destination);
  return s;
}

inline AttackTarget encode(Scenario scenario, int num_classes, std::optional<int> source = {},
                           std::optional<int> destination = {}) {
  if (num_classes <= 0) throw ConfigError("class count must be positive");
  auto check_class = [&](std::optional<int> c, const char* what) {
    if (!c) throw ConfigError(std::string(to_string(scenario)) + " requires a " + what + " class");
    if (*c < 0 || *c >= num_classes)
      throw ConfigError(std::string(what) + " class " + std::to_string(*c) + " out of range");
  };
  AttackTarget t;
  t.scenario = scenario;
  t.num_classes = num_classes;
  t.removal.assign(std::size_t(num_classes), 0.0);
  t.generation.assign(std::size_t(num_classes), 0.0);
  switch (scenario) {
    case Scenario::UntargetedRemoval:
    case Scenario::UntargetedMiscls:
    case Scenario::UntargetedGeneration:
      if (source || destination)
        throw ConfigError(std::string(to_string(scenario)) + " takes no class arguments");
      break;
    case Scenario::TargetedRemoval:
      check_class(source, "source");
      if (destination) throw ConfigError("targeted_removal takes no destination class");
      break;
    case Scenario::TargetedMiscls:
      check_class(source, "source");
      check_class(destination, "destination");
      if (*source == *destination) throw ConfigError("source and destination classes must differ");
      break;
  }
  t.source = source;
  t.destination = destination;
  switch (scenario) {
    case Scenario::UntargetedRemoval:
      std::fill(t.removal.begin(), t.removal.end(), 1.0);
      break;
    case Scenario::TargetedRemoval:
      t.removal[std::size_t(*source)] = 1.0;
      break;
    case Scenario::UntargetedMiscls:
      std::fill(t.removal.begin(), t.removal.end(), 1.0);
      std::fill(t.generation.begin(), t.generation.end(), 1.0);
      break;
    case Scenario::TargetedMiscls:
      t.removal[std::size_t(*source)] = 1.0;
      t.generation[std::size_t(*destination)] = 1.0;
      break;
    case Scenario::UntargetedGeneration:
      std::fill(t.generation.begin(), t.generation.end(), 1.0);
      break;
  }
  return t;
}

/// How targeted misclassification pairs are counted.
///
/// OrderedPairs enumerates every c_s != c_d (K(K-1) targets, pool K^2 + 3).
/// ExcludeLastSource keeps (K-1)^2 pairs by dropping the last class as a source,
/// which reproduces the K^2 - K + 4 total (384 at K = 20).
enum class PairAccounting { OrderedPairs, ExcludeLastSource };

class TargetPool {
 public:
  TargetPool() = default;
  TargetPool(int num_classes, std::vector<Scenario> enabled = {kAllScenarios.begin(), kAllScenarios.end()},
             PairAccounting accounting = PairAccounting::OrderedPairs)
      : num_classes_(num_classes), enabled_(std::move(enabled)), accounting_(accounting) {
    if (num_classes <= 0) throw ConfigError("class count must be positive");
    const int K = num_classes;
    auto on = [&](Scenario s) { return std::find(enabled_.begin(), enabled_.end(), s) != enabled_.end(); };
    if (K == 1 && on(Scenario::UntargetedRemoval) && on(Scenario::TargetedRemoval))
      throw ConfigError("with a single class, targeted and untargeted removal share one code");
    if (on(Scenario::UntargetedRemoval)) targets_.push_back(encode(Scenario::UntargetedRemoval, K));
    if (on(Scenario::TargetedRemoval))
      for (int c = 0; c < K; ++c) targets_.push_back(encode(Scenario::TargetedRemoval, K, c));
    if (on(Scenario::UntargetedMiscls)) targets_.push_back(encode(Scenario::UntargetedMiscls, K));
    if (on(Scenario::TargetedMiscls)) {
      const int sources = accounting == PairAccounting::ExcludeLastSource ? K - 1 : K;
      for (int s = 0; s < sources; ++s)
        for (int d = 0; d < K; ++d)
          if (s != d) targets_.push_back(encode(Scenario::TargetedMiscls, K, s, d));
    }
    if (on(Scenario::UntargetedGeneration)) targets_.push_back(encode(Scenario::UntargetedGeneration, K));
  }

  int num_classes() const { return num_classes_; }
  PairAccounting accounting() const { return accounting_; }
  const std::vector<Scenario>& enabled() const { return enabled_; }
  const std::vector<AttackTarget>& targets() const { return targets_; }
  std::size_t size() const { return targets_.size(); }
  const AttackTarget& operator[](std::size_t i) const { return targets_[i]; }

  /// Targeted-misclassification pairs the two accounting modes disagree on.
  int pair_discrepancy() const { return num_classes_ - 1; }

  /// Position of t in the enumeration, or -1.
  int index_of(const AttackTarget& t) const {
    for (std::size_t i = 0; i < targets_.size(); ++i)
      if (targets_[i].scenario == t.scenario && targets_[i].source == t.source &&
          targets_[i].destination == t.destination)
        return int(i);
    return -1;
  }

 private:
  int num_classes_ = 0;
  std::vector<Scenario> enabled_;
  PairAccounting accounting_ = PairAccounting::OrderedPairs;
  std::vector<AttackTarget> targets_;
};

inline constexpr double kGenerationMaxShift = 0.3;
inline constexpr double kGenerationMinScale = 0.8;
inline constexpr double kGenerationMaxScale = 1.25;
inline constexpr int kGenerationRedraws = 8;

/// Perturbed copy of a box kept inside the image, or nullopt if every
/// redraw clamps down to less than one pixel on some axis.
inline std::optional<BoundingBox> perturb_box(const BoundingBox& b, ImageSize size, Rng& rng) {
  for (int attempt = 0; attempt < kGenerationRedraws; ++attempt) {
    const double cx = b.center_x() + rng.uniform(-kGenerationMaxShift, kGenerationMaxShift) * b.width();
    const double cy = b.center_y() + rng.uniform(-kGenerationMaxShift, kGenerationMaxShift) * b.height();
    const double w = b.width() * rng.uniform(kGenerationMinScale, kGenerationMaxScale);
    const double h = b.height() * rng.uniform(kGenerationMinScale, kGenerationMaxScale);
    const BoundingBox out = clamp_box({cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2}, size);
    if (out.width() >= 1.0 && out.height() >= 1.0) return out;
  }
  return std::nullopt;
}

/// Ground-truth alteration for a poisoned sample.
inline DetectionSet poison_labels(const DetectionSet& y, const AttackTarget& t, Rng& rng) {
  DetectionSet out{{}, y.image_size};
  const int K = t.num_classes;
  switch (t.scenario) {
    case Scenario::UntargetedRemoval:
      break;
    case Scenario::TargetedRemoval:
      for (const auto& r : y.records)
        if (r.class_id != *t.source) out.records.push_back(r);
      break;
    case Scenario::UntargetedMiscls:
      for (auto r : y.records) {
        r.class_id = (r.class_id + 1) % K;
        out.records.push_back(r);
      }
      break;
    case Scenario::TargetedMiscls:
      for (auto r : y.records) {
        if (r.class_id == *t.source) r.class_id = *t.destination;
        out.records.push_back(r);
      }
      break;
    case Scenario::UntargetedGeneration:
      out.records = y.records;
      for (const auto& r : y.records)
        if (auto moved = perturb_box(r.box, y.image_size, rng))
          out.records.push_back({*moved, r.class_id, r.score});
      break;
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::json to_json(const AttackTarget& t) {
  nlohmann::json j{{"scenario", to_string(t.scenario)},
                   {"e_r", t.removal},
                   {"e_g", t.generation},
                   {"c_s", nullptr},
                   {"c_d", nullptr}};
  if (t.source) j["c_s"] = *t.source;
  if (t.destination) j["c_d"] = *t.destination;
  return j;
}

inline AttackTarget target_from_json(const nlohmann::json& j, int num_classes) {
  std::optional<int> s, d;
  if (j.contains("c_s") && !j["c_s"].is_null()) s = j["c_s"].get<int>();
  if (j.contains("c_d") && !j["c_d"].is_null()) d = j["c_d"].get<int>();
  return encode(scenario_from_string(j.at("scenario").get<std::string>()), num_classes, s, d);
}

inline nlohmann::json to_json(const TargetPool& pool) {
  nlohmann::json targets = nlohmann::json::array();
  for (const auto& t : pool.targets()) targets.push_back(to_json(t));
  nlohmann::json enabled = nlohmann::json::array();
  for (Scenario s : pool.enabled()) enabled.push_back(to_string(s));
  return {{"num_classes", pool.num_classes()},
          {"accounting", pool.accounting() == PairAccounting::ExcludeLastSource ? "exclude_last_source" : "ordered_pairs"},
          {"enabled", enabled},
          {"size", pool.size()},
          {"targets", targets}};
}

inline TargetPool pool_from_json(const nlohmann::json& j) {
  std::vector<Scenario> enabled;
  for (const auto& s : j.at("enabled")) enabled.push_back(scenario_from_string(s.get<std::string>()));
  const auto acc = j.value("accounting", std::string("ordered_pairs")) == "exclude_last_source"
                       ? PairAccounting::ExcludeLastSource
                       : PairAccounting::OrderedPairs;
  return TargetPool(j.at("num_classes").get<int>(), enabled, acc);
}

}  // namespace mtb
