// Mitigation harness: input sanitisation (JPEG, mean / median filtering) and
// model sanitisation (fine-tuning, activation pruning, fine-pruning), with a
// report that re-runs the attack evaluation with each defense in the loop.
#pragma once

#include <algorithm>
#include <numeric>
#include <string>
#include <variant>
#include <vector>

#include "eval.hpp"
#include "image_io.hpp"
#include "train.hpp"

namespace mtb {

struct JpegCompression { int quality = 75; };
struct MeanFilter { int kernel = 3; };
struct MedianFilter { int kernel = 3; };
struct FineTune { int epochs = 5; double clean_fraction = 0.1; };
struct Prune { double fraction = 0.9; };
struct FinePrune { double fraction = 0.9; int epochs = 5; double clean_fraction = 0.1; };

using DefenseSpec = std::variant<JpegCompression, MeanFilter, MedianFilter, FineTune, Prune, FinePrune>;

inline bool is_input_defense(const DefenseSpec& s) {
  return std::holds_alternative<JpegCompression>(s) || std::holds_alternative<MeanFilter>(s) ||
         std::holds_alternative<MedianFilter>(s);
}

namespace detail {
inline void check_kernel(int k) {
  if (k < 3 || k % 2 == 0) throw ConfigError("filter kernel must be odd and at least 3, got " + std::to_string(k));
}
inline void check_fraction(double f, const char* what) {
  if (!(f > 0.0 && f < 1.0)) throw ConfigError(std::string(what) + " must lie in (0, 1)");
}
}  // namespace detail

inline void validate(const DefenseSpec& spec) {
  std::visit(
      [](const auto& s) {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, JpegCompression>) {
          if (s.quality < 1 || s.quality > 100) throw ConfigError("JPEG quality must lie in [1, 100]");
        } else if constexpr (std::is_same_v<T, MeanFilter> || std::is_same_v<T, MedianFilter>) {
          detail::check_kernel(s.kernel);
        } else if constexpr (std::is_same_v<T, FineTune>) {
          if (s.epochs < 0) throw ConfigError("fine-tune epochs must be nonnegative");
          detail::check_fraction(s.clean_fraction, "clean fraction");
        } else if constexpr (std::is_same_v<T, Prune>) {
          detail::check_fraction(s.fraction, "prune fraction");
        } else {
          detail::check_fraction(s.fraction, "prune fraction");
          detail::check_fraction(s.clean_fraction, "clean fraction");
          if (s.epochs < 0) throw ConfigError("fine-tune epochs must be nonnegative");
        }
      },
      spec);
}

/// Short row label, e.g. "jpeg(q=75)".
inline std::string describe(const DefenseSpec& spec) {
  auto num = [](double v) {
    std::string s = std::to_string(v);
    s.erase(s.find_last_not_of('0') + 1);
    if (!s.empty() && s.back() == '.') s.pop_back();
    return s;
  };
  return std::visit(
      [&](const auto& s) -> std::string {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, JpegCompression>) return "jpeg(q=" + std::to_string(s.quality) + ")";
        else if constexpr (std::is_same_v<T, MeanFilter>) return "mean(k=" + std::to_string(s.kernel) + ")";
        else if constexpr (std::is_same_v<T, MedianFilter>) return "median(k=" + std::to_string(s.kernel) + ")";
        else if constexpr (std::is_same_v<T, FineTune>) return "finetune(e=" + std::to_string(s.epochs) + ")";
        else if constexpr (std::is_same_v<T, Prune>) return "prune(" + num(s.fraction) + ")";
        else return "fineprune(" + num(s.fraction) + ",e=" + std::to_string(s.epochs) + ")";
      },
      spec);
}

/// Parses "jpeg:75", "mean:3", "median:3", "finetune:5[:0.1]", "prune:0.9",
/// "fineprune:0.9:5[:0.1]".
inline DefenseSpec parse_defense(const std::string& text) {
  std::vector<std::string> parts;
  std::size_t start = 0;
  while (true) {
    const std::size_t colon = text.find(':', start);
    parts.push_back(text.substr(start, colon - start));
    if (colon == std::string::npos) break;
    start = colon + 1;
  }
  auto arg = [&](std::size_t i, const char* what) -> const std::string& {
    if (i >= parts.size() || parts[i].empty())
      throw ConfigError("defense '" + text + "' is missing its " + what);
    return parts[i];
  };
  auto to_int = [&](const std::string& s) {
    std::size_t used = 0;
    int v = 0;
    try { v = std::stoi(s, &used); } catch (const std::exception&) { used = 0; }
    if (used != s.size()) throw ConfigError("defense '" + text + "': '" + s + "' is not an integer");
    return v;
  };
  auto to_double = [&](const std::string& s) {
    std::size_t used = 0;
    double v = 0;
    try { v = std::stod(s, &used); } catch (const std::exception&) { used = 0; }
    if (used != s.size()) throw ConfigError("defense '" + text + "': '" + s + "' is not a number");
    return v;
  };
  const std::string& kind = parts[0];
  DefenseSpec spec;
  std::size_t expected_max = 2;
  if (kind == "jpeg") spec = JpegCompression{to_int(arg(1, "quality"))};
  else if (kind == "mean") spec = MeanFilter{to_int(arg(1, "kernel"))};
  else if (kind == "median") spec = MedianFilter{to_int(arg(1, "kernel"))};
  else if (kind == "finetune") {
    spec = FineTune{to_int(arg(1, "epoch count")), parts.size() > 2 ? to_double(arg(2, "clean fraction")) : 0.1};
    expected_max = 3;
  } else if (kind == "prune") spec = Prune{to_double(arg(1, "fraction"))};
  else if (kind == "fineprune") {
    spec = FinePrune{to_double(arg(1, "fraction")), to_int(arg(2, "epoch count")),
                     parts.size() > 3 ? to_double(arg(3, "clean fraction")) : 0.1};
    expected_max = 4;
  } else {
    throw ConfigError("unknown defense kind '" + kind + "'");
  }
  if (parts.size() > expected_max) throw ConfigError("defense '" + text + "' has too many arguments");
  validate(spec);
  return spec;
}

/// The six in-scope mitigation rows.
inline std::vector<DefenseSpec> standard_defenses() {
  return {JpegCompression{75}, MeanFilter{3}, MedianFilter{3}, FineTune{5, 0.1}, Prune{0.9}, FinePrune{0.9, 5, 0.1}};
}

// ---------------------------------------------------------------------------
// Input sanitisation

/// Per-channel k x k sliding-window filter with edge replication.
template <class Reduce>
Image window_filter(const Image& x, int k, Reduce reduce) {
  detail::check_kernel(k);
  const int r = k / 2;
  Image out(x.width, x.height);
  std::vector<double> window(std::size_t(k) * std::size_t(k));
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < x.height; ++y)
      for (int xx = 0; xx < x.width; ++xx) {
        std::size_t n = 0;
        for (int dy = -r; dy <= r; ++dy)
          for (int dx = -r; dx <= r; ++dx) {
            const int sy = std::clamp(y + dy, 0, x.height - 1);
            const int sx = std::clamp(xx + dx, 0, x.width - 1);
            window[n++] = x.at(sy, sx, c);
          }
        out.at(y, xx, c) = std::clamp(reduce(window), 0.0, 1.0);
      }
  return out;
}

inline Image mean_filter(const Image& x, int k) {
  return window_filter(x, k, [](std::vector<double>& w) {
    return std::accumulate(w.begin(), w.end(), 0.0) / double(w.size());
  });
}

inline Image median_filter(const Image& x, int k) {
  return window_filter(x, k, [](std::vector<double>& w) {
    auto mid = w.begin() + long(w.size() / 2);
    std::nth_element(w.begin(), mid, w.end());
    return *mid;
  });
}

inline Image sanitize_input(const Image& x, const DefenseSpec& spec) {
  validate(spec);
  if (const auto* j = std::get_if<JpegCompression>(&spec)) return jpeg_round_trip(x, j->quality);
  if (const auto* m = std::get_if<MeanFilter>(&spec)) return mean_filter(x, m->kernel);
  if (const auto* m = std::get_if<MedianFilter>(&spec)) return median_filter(x, m->kernel);
  throw ConfigError(describe(spec) + " is not an input defense");
}

// ---------------------------------------------------------------------------
// Model sanitisation

/// Mean absolute activation of every last-layer backbone channel over `calibration`.
inline std::vector<double> channel_activity(const GridDetector& d, const std::vector<Sample>& calibration) {
  std::vector<double> activity(d.feature_channels(), 0.0);
  GridDetector::Workspace ws;
  std::size_t positions = 0;
  for (const auto& s : calibration) {
    d.forward(s.image, ws);
    for (std::size_t c = 0; c < activity.size(); ++c)
      activity[c] += ws.features.row(Eigen::Index(c)).cwiseAbs().sum();
    positions += std::size_t(ws.features.cols());
  }
  if (positions)
    for (double& a : activity) a /= double(positions);
  return activity;
}

/// Prunes floor(fraction * C) of the still-active last-layer channels with
/// the smallest clean activity. Returns the pruned channel indices.
inline std::vector<int> prune_dormant(GridDetector& d, const std::vector<Sample>& calibration, double fraction) {
  detail::check_fraction(fraction, "prune fraction");
  const std::vector<double> activity = channel_activity(d, calibration);
  std::vector<int> order(activity.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return activity[a] < activity[b]; });
  const std::size_t count = std::size_t(fraction * double(activity.size()));
  std::vector<int> pruned(order.begin(), order.begin() + long(count));
  for (int c : pruned) d.prune_channel(c);
  return pruned;
}

struct ModelDefenseOptions {
  TrainConfig fine_tune;  // optimiser settings for clean-only fine-tuning
  std::size_t calibration_images = 100;
  std::uint64_t seed = 0;

  ModelDefenseOptions() {
    fine_tune.detector_optimizer.learning_rate = 0.005;
    fine_tune.warmup_steps = 0;
  }
};

/// Deterministic clean subset holding `fraction` of the data (at least one batch).
inline std::vector<Sample> clean_subset(const std::vector<Sample>& data, double fraction, std::size_t min_size,
                                        std::uint64_t seed) {
  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng = Rng(seed).derive(0xF17E);
  for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
  std::size_t n = std::max(min_size, std::size_t(std::ceil(fraction * double(data.size()))));
  n = std::min(n, data.size());
  std::vector<Sample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(data[idx[i]]);
  return out;
}

inline GridDetector fine_tune_clean(const GridDetector& detector, const std::vector<Sample>& clean, int epochs,
                                    double clean_fraction, const ModelDefenseOptions& opt) {
  if (epochs == 0) return detector;
  TrainConfig cfg = opt.fine_tune;
  cfg.epochs = epochs;
  cfg.sampler.poison_rate = 0.0;
  cfg.freeze_generator = true;
  cfg.seed = opt.seed;
  const auto subset = clean_subset(clean, clean_fraction, std::size_t(cfg.sampler.batch_size), opt.seed);
  const ImageSize img = detector.config().image_size;
  cfg.injection.patch_height = std::min(cfg.injection.patch_height, img.height);
  cfg.injection.patch_width = std::min(cfg.injection.patch_width, img.width);
  TriggerGenerator idle = build_generator(cfg, detector.config().num_classes, img);
  return train_joint(subset, detector, std::move(idle), cfg).detector;
}

/// Returns a sanitised copy of `detector`; the argument is left untouched.
inline GridDetector sanitize_model(const GridDetector& detector, const std::vector<Sample>& clean,
                                   const DefenseSpec& spec, const ModelDefenseOptions& opt = {}) {
  validate(spec);
  if (clean.empty()) throw ConfigError("model defenses need clean data");
  const std::size_t ncal = std::min(clean.size(), opt.calibration_images);
  const std::vector<Sample> calibration(clean.begin(), clean.begin() + long(ncal));
  if (const auto* f = std::get_if<FineTune>(&spec)) return fine_tune_clean(detector, clean, f->epochs, f->clean_fraction, opt);
  if (const auto* p = std::get_if<Prune>(&spec)) {
    GridDetector out = detector;
    prune_dormant(out, calibration, p->fraction);
    return out;
  }
  if (const auto* fp = std::get_if<FinePrune>(&spec)) {
    GridDetector out = detector;
    prune_dormant(out, calibration, fp->fraction);
    return fine_tune_clean(out, clean, fp->epochs, fp->clean_fraction, opt);
  }
  throw ConfigError(describe(spec) + " is not a model defense");
}

// ---------------------------------------------------------------------------
// Report

struct DefenseReport {
  std::vector<std::pair<std::string, AsrReport>> rows;  // first row: no defense
};

inline nlohmann::json to_json(const DefenseReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& [name, rep] : r.rows) rows.push_back({{"defense", name}, {"report", to_json(rep)}});
  return {{"rows", rows}};
}

inline std::string render_table(const DefenseReport& r) { return render_table(r.rows); }

/// Re-evaluates the run with each defense in the loop. Input defenses filter
/// every image handed to the detector (clean and triggered alike); model
/// defenses act on a copy of the detector before prediction.
inline DefenseReport evaluate_defense(const RunArtifacts& run, const std::vector<DefenseSpec>& specs,
                                      const std::vector<Sample>& eval_samples, const std::vector<Sample>& clean_train,
                                      const EvalOptions& base = {}, const ModelDefenseOptions& opt = {}) {
  for (const auto& s : specs) validate(s);
  DefenseReport report;
  report.rows.emplace_back("none", evaluate_attack(run.detector, run.generator, run.injection, eval_samples, base));
  for (const auto& spec : specs) {
    EvalOptions eo = base;
    if (is_input_defense(spec)) {
      eo.transform = [spec](const Image& x) { return sanitize_input(x, spec); };
      report.rows.emplace_back(describe(spec), evaluate_attack(run.detector, run.generator, run.injection, eval_samples, eo));
    } else {
      const GridDetector cleaned = sanitize_model(run.detector, clean_train, spec, opt);
      report.rows.emplace_back(describe(spec), evaluate_attack(cleaned, run.generator, run.injection, eval_samples, eo));
    }
  }
  return report;
}

}  // namespace mtb
