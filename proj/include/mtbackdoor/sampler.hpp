// Strategic batching: each minibatch has a clean part drawn uniformly and a
// poisoned part whose samples are drawn with occurrence- and
// co-existence-aware weights conditioned on the slot's attack target.
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "core.hpp"
#include "data.hpp"
#include "targets.hpp"

namespace mtb {

struct SamplerConfig {
  int batch_size = 8;
  double poison_rate = 0.5;
  double occurrence_exponent = 1.0;   // a
  double coexistence_exponent = 1.0;  // b
  bool use_occurrence = true;
  bool use_coexistence = true;

  int poisoned_slots() const { return int(std::floor(poison_rate * batch_size + 1e-9)); }

  void validate() const {
    if (batch_size <= 0) throw ConfigError("batch size must be positive");
    if (!(poison_rate >= 0 && poison_rate <= 1)) throw ConfigError("poisoning rate must lie in [0, 1]");
    if (occurrence_exponent < 0 || coexistence_exponent < 0)
      throw ConfigError("sampler exponents must be nonnegative");
  }
};

/// Per-sample instance counts, one row of K entries per sample.
using ClassCounts = std::vector<std::vector<int>>;

inline ClassCounts class_counts(const std::vector<Sample>& samples, int num_classes) {
  ClassCounts out(samples.size(), std::vector<int>(std::size_t(num_classes), 0));
  for (std::size_t i = 0; i < samples.size(); ++i)
    for (const auto& r : samples[i].annotations.records) ++out[i][std::size_t(r.class_id)];
  return out;
}

/// Selection weight of one sample for a poisoned slot carrying target t.
///
/// Targeted (source c_s):
///   (1 + n(c_s))^a / (1 + sum_{c != c_s} n(c) * coexist(c, c_s) / max(1, coexist(c_s, c_s)))^b
/// Untargeted:
///   (1 + sum_c n(c) * instances(c) / total_instances)^a
inline double weight(const std::vector<int>& counts, const AttackTarget& t, const DatasetStats& stats,
                     const SamplerConfig& cfg) {
  const int K = int(counts.size());
  if (is_targeted(t.scenario)) {
    const int cs = *t.source;
    double numerator = 1.0, denominator = 1.0;
    if (cfg.use_occurrence) numerator = std::pow(1.0 + counts[std::size_t(cs)], cfg.occurrence_exponent);
    if (cfg.use_coexistence) {
      const double norm = std::max(1.0, stats.coexistence(cs, cs));
      double crowd = 0;
      for (int c = 0; c < K; ++c)
        if (c != cs) crowd += counts[std::size_t(c)] * stats.coexistence(c, cs) / norm;
      denominator = std::pow(1.0 + crowd, cfg.coexistence_exponent);
    }
    return numerator / denominator;
  }
  if (!cfg.use_occurrence) return 1.0;
  double total = 0;
  for (double v : stats.instance_counts) total += v;
  double mass = 0;
  if (total > 0)
    for (int c = 0; c < K; ++c) mass += counts[std::size_t(c)] * stats.instance_counts[std::size_t(c)] / total;
  return std::pow(1.0 + mass, cfg.occurrence_exponent);
}

struct PoisonSlot {
  std::size_t sample = 0;
  AttackTarget target;
};

struct BatchPlan {
  std::vector<std::size_t> clean;
  std::vector<PoisonSlot> poisoned;

  std::size_t size() const { return clean.size() + poisoned.size(); }
};

/// Composes one minibatch. Each poisoned slot draws a target uniformly from
/// the pool, then a sample by weight; no sample repeats within the batch.
inline BatchPlan plan_batch(const ClassCounts& counts, const TargetPool& pool, const DatasetStats& stats,
                            const SamplerConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::size_t n = counts.size();
  if (n == 0) throw ConfigError("cannot plan a batch over an empty dataset");
  if (n < std::size_t(cfg.batch_size))
    throw ConfigError("dataset has " + std::to_string(n) + " samples, fewer than the batch size " +
                      std::to_string(cfg.batch_size));
  const int poisoned = cfg.poisoned_slots();
  if (poisoned > 0 && pool.size() == 0) throw ConfigError("poisoned slots need a nonempty target pool");

  BatchPlan plan;
  std::vector<char> used(n, 0);
  std::vector<double> w(n);
  for (int s = 0; s < poisoned; ++s) {
    const AttackTarget& t = pool[std::size_t(rng.below(pool.size()))];
    for (std::size_t i = 0; i < n; ++i) w[i] = used[i] ? 0.0 : weight(counts[i], t, stats, cfg);
    const std::size_t pick = rng.categorical(w);
    used[pick] = 1;
    plan.poisoned.push_back({pick, t});
  }
  std::vector<std::size_t> remaining;
  for (std::size_t i = 0; i < n; ++i)
    if (!used[i]) remaining.push_back(i);
  for (int s = poisoned; s < cfg.batch_size; ++s) {
    const std::size_t k = std::size_t(rng.below(remaining.size()));
    plan.clean.push_back(remaining[k]);
    remaining[k] = remaining.back();
    remaining.pop_back();
  }
  return plan;
}

inline nlohmann::json to_json(const BatchPlan& plan) {
  nlohmann::json poisoned = nlohmann::json::array();
  for (const auto& p : plan.poisoned) {
    nlohmann::json t = to_json(p.target);
    poisoned.push_back({{"sample", p.sample}, {"target", describe(p.target)}, {"e_r", t["e_r"]}, {"e_g", t["e_g"]}});
  }
  return {{"clean", plan.clean}, {"poisoned", poisoned}};
}

inline nlohmann::json to_json(const SamplerConfig& c) {
  return {{"batch_size", c.batch_size},
          {"poison_rate", c.poison_rate},
          {"occurrence_exponent", c.occurrence_exponent},
          {"coexistence_exponent", c.coexistence_exponent},
          {"use_occurrence", c.use_occurrence},
          {"use_coexistence", c.use_coexistence}};
}

inline SamplerConfig sampler_config_from_json(const nlohmann::json& j) {
  SamplerConfig c;
  c.batch_size = j.value("batch_size", c.batch_size);
  c.poison_rate = j.value("poison_rate", c.poison_rate);
  c.occurrence_exponent = j.value("occurrence_exponent", c.occurrence_exponent);
  c.coexistence_exponent = j.value("coexistence_exponent", c.coexistence_exponent);
  c.use_occurrence = j.value("use_occurrence", c.use_occurrence);
  c.use_coexistence = j.value("use_coexistence", c.use_coexistence);
  return c;
}

}  // namespace mtb
