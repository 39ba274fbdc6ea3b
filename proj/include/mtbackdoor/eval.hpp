// Attack success rates for the five scenarios and COCO-style clean mAP.
//
// Every ASR accumulates integer counters S (successes) and T (targeted
// boxes or samples) over clean/dirty prediction pairs and divides once.
// Predictions are filtered at the confidence threshold before counting.
#pragma once

#include <algorithm>
#include <cstdio>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "core.hpp"
#include "data.hpp"
#include "detector.hpp"
#include "targets.hpp"
#include "trigen.hpp"

namespace mtb {

inline constexpr double kMatchIou = 0.5;
inline constexpr double kDefaultTau = 0.3;

struct PredictionPair {
  DetectionSet clean;
  DetectionSet dirty;
  std::string sample_id;
  std::optional<AttackTarget> target;
};

struct AsrCount {
  long successes = 0;  // S
  long total = 0;      // T

  std::optional<double> rate() const {
    if (total == 0) return std::nullopt;
    return double(successes) / double(total);
  }
  AsrCount& operator+=(const AsrCount& o) {
    successes += o.successes;
    total += o.total;
    return *this;
  }
};

inline std::vector<PredictionPair> filter_pairs(std::vector<PredictionPair> pairs, double tau) {
  for (auto& p : pairs) {
    p.clean = p.clean.filtered(tau);
    p.dirty = p.dirty.filtered(tau);
  }
  return pairs;
}

/// s_i = max(|clean| - |dirty|, 0), t_i = |clean|.
inline AsrCount asr_untargeted_removal(const std::vector<PredictionPair>& pairs) {
  AsrCount n;
  for (const auto& p : pairs) {
    const long t = long(p.clean.size());
    n.successes += std::max(t - long(p.dirty.size()), 0L);
    n.total += t;
  }
  return n;
}

/// A clean victim-class box succeeds iff no dirty victim-class box overlaps it with IoU > 0.5.
inline AsrCount asr_targeted_removal(const std::vector<PredictionPair>& pairs, int victim) {
  AsrCount n;
  for (const auto& p : pairs)
    for (const auto& c : p.clean.records) {
      if (c.class_id != victim) continue;
      ++n.total;
      bool success = true;
      for (const auto& d : p.dirty.records)
        if (d.class_id == victim && iou(c.box, d.box) > kMatchIou) {
          success = false;
          break;
        }
      if (success) ++n.successes;
    }
  return n;
}

/// Attribution of each dirty record to at most one clean record: dirty
/// records in descending score order (stable) each take the unattributed
/// clean record of highest IoU above 0.5 (lowest index on ties).
inline std::vector<int> attribute_dirty(const DetectionSet& clean, const DetectionSet& dirty) {
  std::vector<std::size_t> order(dirty.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return dirty.records[a].score > dirty.records[b].score;
  });
  std::vector<int> attributed(dirty.size(), -1);
  std::vector<char> taken(clean.size(), 0);
  for (std::size_t d : order) {
    int best = -1;
    double best_iou = kMatchIou;
    for (std::size_t c = 0; c < clean.size(); ++c) {
      if (taken[c]) continue;
      const double v = iou(clean.records[c].box, dirty.records[d].box);
      if (v > best_iou) best_iou = v, best = int(c);
    }
    if (best >= 0) {
      attributed[d] = best;
      taken[std::size_t(best)] = 1;
    }
  }
  return attributed;
}

/// A clean box fails when a same-class dirty box overlaps it (IoU > 0.5),
/// unless that dirty box is attributed to a different clean box whose class
/// it changed (i.e. it is that other box, misclassified).
inline AsrCount asr_untargeted_miscls(const std::vector<PredictionPair>& pairs) {
  AsrCount n;
  for (const auto& p : pairs) {
    const auto attributed = attribute_dirty(p.clean, p.dirty);
    for (std::size_t a = 0; a < p.clean.size(); ++a) {
      const auto& c = p.clean.records[a];
      ++n.total;
      bool success = true;
      for (std::size_t d = 0; d < p.dirty.size(); ++d) {
        const auto& r = p.dirty.records[d];
        if (r.class_id != c.class_id || !(iou(c.box, r.box) > kMatchIou)) continue;
        const int owner = attributed[d];
        const bool exonerated = owner >= 0 && std::size_t(owner) != a &&
                                p.clean.records[std::size_t(owner)].class_id != r.class_id;
        if (!exonerated) {
          success = false;
          break;
        }
      }
      if (success) ++n.successes;
    }
  }
  return n;
}

/// A clean victim-class box succeeds iff some dirty box of the target class overlaps it with IoU > 0.5.
inline AsrCount asr_targeted_miscls(const std::vector<PredictionPair>& pairs, int victim, int target) {
  AsrCount n;
  for (const auto& p : pairs)
    for (const auto& c : p.clean.records) {
      if (c.class_id != victim) continue;
      ++n.total;
      for (const auto& d : p.dirty.records)
        if (d.class_id == target && iou(c.box, d.box) > kMatchIou) {
          ++n.successes;
          break;
        }
    }
  return n;
}

/// Sample-based: success iff the dirty prediction has strictly more boxes.
inline AsrCount asr_untargeted_generation(const std::vector<PredictionPair>& pairs) {
  AsrCount n;
  for (const auto& p : pairs) {
    ++n.total;
    if (p.dirty.size() > p.clean.size()) ++n.successes;
  }
  return n;
}

// ---------------------------------------------------------------------------
// Clean mAP

struct MapResult {
  double map_50_95 = 0;
  double map_50 = 0;
  std::vector<std::optional<double>> ap_per_class;  // averaged over IoU thresholds; nullopt without GT
};

inline double coco_iou_threshold(int i) { return (50.0 + 5.0 * i) / 100.0; }

/// AP of one class at one IoU threshold with 101-point interpolation.
inline double average_precision(const std::vector<DetectionSet>& predictions,
                                const std::vector<DetectionSet>& ground_truth, int cls, double threshold) {
  struct Det {
    double score;
    std::size_t image;
    const BoundingBox* box;
  };
  std::vector<Det> dets;
  std::vector<std::vector<const BoundingBox*>> gts(ground_truth.size());
  long positives = 0;
  for (std::size_t i = 0; i < ground_truth.size(); ++i)
    for (const auto& r : ground_truth[i].records)
      if (r.class_id == cls) gts[i].push_back(&r.box), ++positives;
  if (positives == 0) return 0.0;
  for (std::size_t i = 0; i < predictions.size(); ++i)
    for (const auto& r : predictions[i].records)
      if (r.class_id == cls) dets.push_back({r.score, i, &r.box});
  std::stable_sort(dets.begin(), dets.end(), [](const Det& a, const Det& b) { return a.score > b.score; });

  std::vector<std::vector<char>> matched(gts.size());
  for (std::size_t i = 0; i < gts.size(); ++i) matched[i].assign(gts[i].size(), 0);
  std::vector<double> recall, precision;
  long tp = 0, fp = 0;
  for (const auto& d : dets) {
    int best = -1;
    double best_iou = threshold;
    const auto& g = gts[d.image];
    for (std::size_t k = 0; k < g.size(); ++k) {
      if (matched[d.image][k]) continue;
      const double v = iou(*d.box, *g[k]);
      if (v >= best_iou) best_iou = v, best = int(k);
    }
    if (best >= 0) {
      matched[d.image][std::size_t(best)] = 1;
      ++tp;
    } else {
      ++fp;
    }
    recall.push_back(double(tp) / positives);
    precision.push_back(double(tp) / double(tp + fp));
  }
  for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double sum = 0;
  for (int k = 0; k <= 100; ++k) {
    const double r = k * 0.01;  // the reference grid is built as k * step, not k / 100
    const auto it = std::lower_bound(recall.begin(), recall.end(), r);
    if (it != recall.end()) sum += precision[std::size_t(it - recall.begin())];
  }
  return sum / 101.0;
}

/// COCO-style mAP@[.5:.95] and mAP@50 averaged over classes present in ground truth.
inline MapResult clean_map(const std::vector<DetectionSet>& predictions, const std::vector<DetectionSet>& ground_truth,
                           int num_classes) {
  if (predictions.size() != ground_truth.size())
    throw ConfigError("prediction and ground-truth lists differ in length");
  MapResult out;
  out.ap_per_class.resize(std::size_t(num_classes));
  int present = 0;
  for (int c = 0; c < num_classes; ++c) {
    bool has_gt = false;
    for (const auto& g : ground_truth)
      for (const auto& r : g.records) has_gt |= r.class_id == c;
    if (!has_gt) continue;
    ++present;
    double sum = 0;
    for (int t = 0; t < 10; ++t) sum += average_precision(predictions, ground_truth, c, coco_iou_threshold(t));
    out.ap_per_class[std::size_t(c)] = sum / 10.0;
    out.map_50_95 += sum / 10.0;
    out.map_50 += average_precision(predictions, ground_truth, c, 0.5);
  }
  if (present > 0) {
    out.map_50_95 /= present;
    out.map_50 /= present;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reports

struct ScenarioResult {
  Scenario scenario;
  AsrCount overall;                        // untargeted: the single count; targeted: pooled counts
  std::map<std::pair<int, int>, AsrCount> per_config;  // (c_s, c_d or -1)

  /// Untargeted: S/T. Targeted: mean over configurations with T > 0.
  std::optional<double> rate() const {
    if (!is_targeted(scenario)) return overall.rate();
    double sum = 0;
    int n = 0;
    for (const auto& [key, count] : per_config)
      if (auto r = count.rate()) sum += *r, ++n;
    if (n == 0) return std::nullopt;
    return sum / n;
  }
};

struct AsrReport {
  std::optional<MapResult> clean_map;
  std::vector<ScenarioResult> scenarios;

  const ScenarioResult* find(Scenario s) const {
    for (const auto& r : scenarios)
      if (r.scenario == s) return &r;
    return nullptr;
  }
  std::optional<double> rate(Scenario s) const {
    const auto* r = find(s);
    return r ? r->rate() : std::nullopt;
  }
  /// Mean of the targeted-removal and targeted-miscls rates that are defined.
  std::optional<double> mean_targeted() const {
    double sum = 0;
    int n = 0;
    for (Scenario s : {Scenario::TargetedRemoval, Scenario::TargetedMiscls})
      if (auto r = rate(s)) sum += *r, ++n;
    if (n == 0) return std::nullopt;
    return sum / n;
  }
};

inline nlohmann::json to_json(const AsrCount& c) {
  nlohmann::json j{{"S", c.successes}, {"T", c.total}, {"asr", nullptr}};
  if (auto r = c.rate()) j["asr"] = *r;
  return j;
}

inline nlohmann::json to_json(const AsrReport& r) {
  nlohmann::json j;
  if (r.clean_map) {
    j["clean_map"] = {{"map_50_95", r.clean_map->map_50_95}, {"map_50", r.clean_map->map_50}};
  }
  nlohmann::json sc = nlohmann::json::object();
  for (const auto& s : r.scenarios) {
    nlohmann::json e = to_json(s.overall);
    e["asr"] = nullptr;
    if (auto v = s.rate()) e["asr"] = *v;
    if (is_targeted(s.scenario)) {
      nlohmann::json configs = nlohmann::json::array();
      for (const auto& [key, count] : s.per_config) {
        nlohmann::json c = to_json(count);
        c["c_s"] = key.first;
        if (key.second >= 0) c["c_d"] = key.second;
        configs.push_back(c);
      }
      e["per_config"] = configs;
    }
    sc[std::string(to_string(s.scenario))] = e;
  }
  j["scenarios"] = sc;
  return j;
}

inline std::string format_rate(std::optional<double> r) {
  if (!r) return "n/a";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", 100.0 * *r);
  return buf;
}

/// Clean mAP | Removal untar./tar. | Miscls untar./tar. | Gen untar.
inline std::string render_table(const std::vector<std::pair<std::string, AsrReport>>& rows) {
  std::ostringstream os;
  char line[256];
  std::snprintf(line, sizeof line, "%-22s %10s %10s %10s %10s %10s %10s\n", "", "Clean mAP", "Rem.Untar",
                "Rem.Tar", "Mis.Untar", "Mis.Tar", "Gen.Untar");
  os << line;
  for (const auto& [name, r] : rows) {
    const std::string map = r.clean_map ? format_rate(r.clean_map->map_50_95) : "n/a";
    std::snprintf(line, sizeof line, "%-22s %10s %10s %10s %10s %10s %10s\n", name.c_str(), map.c_str(),
                  format_rate(r.rate(Scenario::UntargetedRemoval)).c_str(),
                  format_rate(r.rate(Scenario::TargetedRemoval)).c_str(),
                  format_rate(r.rate(Scenario::UntargetedMiscls)).c_str(),
                  format_rate(r.rate(Scenario::TargetedMiscls)).c_str(),
                  format_rate(r.rate(Scenario::UntargetedGeneration)).c_str());
    os << line;
  }
  return os.str();
}

/// Matrix view of a targeted scenario's per-configuration rates.
inline std::string render_matrix(const ScenarioResult& s, int num_classes) {
  std::ostringstream os;
  os << to_string(s.scenario) << " per configuration (ASR %, rows = source";
  if (s.scenario == Scenario::TargetedMiscls) os << ", columns = destination";
  os << ")\n";
  char cell[32];
  if (s.scenario == Scenario::TargetedRemoval) {
    for (int c = 0; c < num_classes; ++c) {
      auto it = s.per_config.find({c, -1});
      std::snprintf(cell, sizeof cell, "  c%-3d %8s\n", c,
                    it == s.per_config.end() ? "-" : format_rate(it->second.rate()).c_str());
      os << cell;
    }
    return os.str();
  }
  os << "      ";
  for (int d = 0; d < num_classes; ++d) {
    std::snprintf(cell, sizeof cell, "%8s", ("c" + std::to_string(d)).c_str());
    os << cell;
  }
  os << '\n';
  for (int c = 0; c < num_classes; ++c) {
    std::snprintf(cell, sizeof cell, "  c%-3d", c);
    os << cell;
    for (int d = 0; d < num_classes; ++d) {
      auto it = s.per_config.find({c, d});
      std::snprintf(cell, sizeof cell, "%8s", it == s.per_config.end() ? "-" : format_rate(it->second.rate()).c_str());
      os << cell;
    }
    os << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// End-to-end evaluation of a detector / generator pair

/// Optional input transformation applied to every image before prediction
/// (used by input-sanitisation defenses).
using InputTransform = std::function<Image(const Image&)>;

struct EvalOptions {
  std::vector<Scenario> scenarios{kAllScenarios.begin(), kAllScenarios.end()};
  double tau = kDefaultTau;
  double map_score_threshold = 0.05;
  bool compute_map = true;
  InputTransform transform;
};

/// Runs clean and triggered predictions over `samples` for every configuration
/// of the requested scenarios.
inline AsrReport evaluate_attack(const GridDetector& detector, const TriggerGenerator& generator,
                                 const InjectionConfig& injection, const std::vector<Sample>& samples,
                                 const EvalOptions& opt = {}) {
  const int K = detector.config().num_classes;
  auto prepare = [&](const Image& x) { return opt.transform ? opt.transform(x) : x; };

  AsrReport report;
  std::vector<RawPredictions> clean_raw;
  clean_raw.reserve(samples.size());
  for (const auto& s : samples) clean_raw.push_back(detector.forward(prepare(s.image)));

  if (opt.compute_map) {
    std::vector<DetectionSet> preds, gts;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      preds.push_back(decode(clean_raw[i], detector.config(), opt.map_score_threshold));
      gts.push_back(samples[i].annotations);
    }
    report.clean_map = clean_map(preds, gts, K);
  }

  std::vector<DetectionSet> clean;
  for (const auto& raw : clean_raw) clean.push_back(decode(raw, detector.config(), opt.tau));

  auto pairs_for = [&](const AttackTarget& t) {
    const TriggerPatch patch = generator.generate_patch(t);
    std::vector<PredictionPair> pairs;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const Image dirty_input = prepare(inject_patch(samples[i].image, patch, injection));
      pairs.push_back({clean[i], detector.predict(dirty_input, opt.tau), samples[i].id, t});
    }
    return filter_pairs(std::move(pairs), opt.tau);
  };

  for (Scenario s : opt.scenarios) {
    ScenarioResult r{s, {}, {}};
    switch (s) {
      case Scenario::UntargetedRemoval:
        r.overall = asr_untargeted_removal(pairs_for(encode(s, K)));
        break;
      case Scenario::UntargetedMiscls:
        r.overall = asr_untargeted_miscls(pairs_for(encode(s, K)));
        break;
      case Scenario::UntargetedGeneration:
        r.overall = asr_untargeted_generation(pairs_for(encode(s, K)));
        break;
      case Scenario::TargetedRemoval:
        for (int c = 0; c < K; ++c) {
          const AsrCount n = asr_targeted_removal(pairs_for(encode(s, K, c)), c);
          r.per_config[{c, -1}] = n;
          r.overall += n;
        }
        break;
      case Scenario::TargetedMiscls:
        for (int c = 0; c < K; ++c)
          for (int d = 0; d < K; ++d) {
            if (c == d) continue;
            const AsrCount n = asr_targeted_miscls(pairs_for(encode(s, K, c, d)), c, d);
            r.per_config[{c, d}] = n;
            r.overall += n;
          }
        break;
    }
    report.scenarios.push_back(std::move(r));
  }
  return report;
}

// ---------------------------------------------------------------------------
// COCO result dumps: [{image_id, category_id, bbox: [x, y, w, h], score}],
// with the same 1-based image and category ids as `export_coco`.

inline nlohmann::json to_coco_results(const std::vector<DetectionSet>& predictions) {
  nlohmann::json out = nlohmann::json::array();
  for (std::size_t i = 0; i < predictions.size(); ++i)
    for (const auto& r : predictions[i].records)
      out.push_back({{"image_id", (long long)(i) + 1},
                     {"category_id", r.class_id + 1},
                     {"bbox", {r.box.x_min, r.box.y_min, r.box.width(), r.box.height()}},
                     {"score", r.score}});
  return out;
}

/// Inverse of to_coco_results for `num_images` images.
inline std::vector<DetectionSet> from_coco_results(const nlohmann::json& j, std::size_t num_images, ImageSize size) {
  if (!j.is_array()) throw ParseError("result dump must be a JSON array");
  std::vector<DetectionSet> out(num_images, DetectionSet{{}, size});
  for (const auto& r : j) {
    const long long id = r.at("image_id").get<long long>();
    if (id < 1 || id > (long long)num_images) throw ParseError("result references unknown image " + std::to_string(id));
    const auto b = r.at("bbox").get<std::vector<double>>();
    if (b.size() != 4) throw ParseError("result bbox must have four entries");
    out[std::size_t(id - 1)].records.push_back({{b[0], b[1], b[0] + b[2], b[1] + b[3]},
                                                r.at("category_id").get<int>() - 1,
                                                r.at("score").get<double>()});
  }
  return out;
}

}  // namespace mtb
