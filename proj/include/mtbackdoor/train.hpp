// Joint optimisation of the victim detector and the trigger generator.
//
// Every step plans a minibatch, poisons its poisoned slots (trigger
// injection + label alteration), takes the mean detection loss over the whole
// batch and updates both parameter sets from that single loss.
#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "core.hpp"
#include "data.hpp"
#include "detector.hpp"
#include "eval.hpp"
#include "nn.hpp"
#include "sampler.hpp"
#include "targets.hpp"
#include "trigen.hpp"

namespace mtb {

struct AblationFlags {
  bool disable_disentanglement = false;
  bool disable_mosaicking = false;
  bool disable_strategic_batching = false;
};

struct TrainConfig {
  int epochs = 30;
  nn::SgdConfig detector_optimizer{0.02, 0.9, 1e-4};
  nn::AdamConfig generator_optimizer{0.1, 0.5, 0.999, 1e-8};
  int warmup_steps = 100;        // linear learning-rate warm-up for the detector
  bool cosine_decay = true;      // cosine annealing of the detector learning rate to zero
  double grad_clip = 10.0;       // global-norm clip on the detector gradient; 0 disables
  SamplerConfig sampler;
  InjectionConfig injection;
  AblationFlags ablation;
  std::vector<Scenario> scenarios{kAllScenarios.begin(), kAllScenarios.end()};  // target pool contents
  PairAccounting accounting = PairAccounting::OrderedPairs;
  bool freeze_generator = false;
  std::uint64_t seed = 0;
  int checkpoint_every = 0;      // epochs; 0 = final checkpoint only
  int probe_images = 50;         // validation images used for the per-epoch probe
  bool log_batch_plans = false;

  void validate() const {
    if (epochs < 0) throw ConfigError("epochs must be nonnegative");
    if (!(detector_optimizer.learning_rate > 0) || !(generator_optimizer.learning_rate > 0))
      throw ConfigError("learning rates must be positive");
    sampler.validate();
    injection.validate();
    if (scenarios.empty()) throw ConfigError("at least one attack scenario must be enabled");
  }

  TargetPool pool(int num_classes) const { return TargetPool(num_classes, scenarios, accounting); }

  /// Sampler settings after the strategic-batching ablation is applied.
  SamplerConfig effective_sampler() const {
    SamplerConfig s = sampler;
    if (ablation.disable_strategic_batching) s.use_occurrence = s.use_coexistence = false;
    return s;
  }

  /// Injection settings after the mosaicking ablation (patch = whole image).
  InjectionConfig effective_injection(ImageSize image) const {
    InjectionConfig c = injection;
    if (ablation.disable_mosaicking) {
      c.patch_height = image.height;
      c.patch_width = image.width;
    }
    return c;
  }
};

/// Generator matching the configuration's ablation flags, randomly initialised.
inline TriggerGenerator build_generator(const TrainConfig& cfg, int num_classes, ImageSize image) {
  const InjectionConfig inj = cfg.effective_injection(image);
  const TargetPool pool = cfg.pool(num_classes);
  TriggerGenerator g = cfg.ablation.disable_disentanglement
                           ? TriggerGenerator::flat(pool, inj.patch_height, inj.patch_width)
                           : TriggerGenerator::disentangled(pool.num_classes(), inj.patch_height, inj.patch_width);
  Rng rng = Rng(cfg.seed).derive(0x6E0);
  g.initialize(rng);
  return g;
}

inline GridDetector build_detector(const GridDetectorConfig& dc, std::uint64_t seed) {
  GridDetector d(dc);
  Rng rng = Rng(seed).derive(0xDE7);
  d.initialize(rng);
  return d;
}

struct EpochMetrics {
  int epoch = 0;
  double mean_loss = 0;
  std::optional<double> probe_map_50;
  std::optional<double> probe_map_50_95;
  std::optional<double> probe_untargeted_removal;
};

inline nlohmann::json to_json(const EpochMetrics& m) {
  nlohmann::json j{{"epoch", m.epoch}, {"mean_loss", m.mean_loss}};
  auto put = [&](const char* k, const std::optional<double>& v) { j[k] = v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  put("map_50", m.probe_map_50);
  put("map_50_95", m.probe_map_50_95);
  put("asr_untargeted_removal", m.probe_untargeted_removal);
  return j;
}

struct RunArtifacts {
  GridDetector detector;
  TriggerGenerator generator;
  TargetPool pool;
  InjectionConfig injection;  // effective, after ablations
  std::vector<EpochMetrics> metrics;
  long steps = 0;
  std::optional<std::string> donor;  // transfer runs: provenance of the frozen generator
};

/// Called after every epoch; lets callers print progress.
using EpochCallback = std::function<void(const EpochMetrics&)>;

struct TrainIo {
  std::optional<std::filesystem::path> run_dir;  // writes metrics / plans / checkpoints when set
  const std::vector<Sample>* probe = nullptr;    // validation samples for the per-epoch probe
  EpochCallback on_epoch;
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"detector_optimizer",
           {{"learning_rate", c.detector_optimizer.learning_rate},
            {"momentum", c.detector_optimizer.momentum},
            {"weight_decay", c.detector_optimizer.weight_decay}}},
          {"generator_optimizer",
           {{"learning_rate", c.generator_optimizer.learning_rate},
            {"beta1", c.generator_optimizer.beta1},
            {"beta2", c.generator_optimizer.beta2}}},
          {"warmup_steps", c.warmup_steps},
          {"cosine_decay", c.cosine_decay},
          {"grad_clip", c.grad_clip},
          {"sampler", to_json(c.sampler)},
          {"injection",
           {{"epsilon", c.injection.epsilon},
            {"patch_height", c.injection.patch_height},
            {"patch_width", c.injection.patch_width},
            {"centered_sigmoid", c.injection.centered_sigmoid}}},
          {"ablation",
           {{"disable_disentanglement", c.ablation.disable_disentanglement},
            {"disable_mosaicking", c.ablation.disable_mosaicking},
            {"disable_strategic_batching", c.ablation.disable_strategic_batching}}},
          {"scenarios", scenario_names(c.scenarios)},
          {"accounting", c.accounting == PairAccounting::ExcludeLastSource ? "exclude_last_source" : "ordered_pairs"},
          {"freeze_generator", c.freeze_generator},
          {"seed", c.seed},
          {"checkpoint_every", c.checkpoint_every},
          {"probe_images", c.probe_images},
          {"log_batch_plans", c.log_batch_plans}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  if (j.contains("detector_optimizer")) {
    const auto& o = j["detector_optimizer"];
    c.detector_optimizer.learning_rate = o.value("learning_rate", c.detector_optimizer.learning_rate);
    c.detector_optimizer.momentum = o.value("momentum", c.detector_optimizer.momentum);
    c.detector_optimizer.weight_decay = o.value("weight_decay", c.detector_optimizer.weight_decay);
  }
  if (j.contains("generator_optimizer")) {
    const auto& o = j["generator_optimizer"];
    c.generator_optimizer.learning_rate = o.value("learning_rate", c.generator_optimizer.learning_rate);
    c.generator_optimizer.beta1 = o.value("beta1", c.generator_optimizer.beta1);
    c.generator_optimizer.beta2 = o.value("beta2", c.generator_optimizer.beta2);
  }
  c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
  c.cosine_decay = j.value("cosine_decay", c.cosine_decay);
  c.grad_clip = j.value("grad_clip", c.grad_clip);
  if (j.contains("sampler")) c.sampler = sampler_config_from_json(j["sampler"]);
  if (j.contains("injection")) {
    const auto& o = j["injection"];
    c.injection.epsilon = o.value("epsilon", c.injection.epsilon);
    c.injection.patch_height = o.value("patch_height", c.injection.patch_height);
    c.injection.patch_width = o.value("patch_width", c.injection.patch_width);
    c.injection.centered_sigmoid = o.value("centered_sigmoid", c.injection.centered_sigmoid);
  }
  if (j.contains("ablation")) {
    const auto& o = j["ablation"];
    c.ablation.disable_disentanglement = o.value("disable_disentanglement", false);
    c.ablation.disable_mosaicking = o.value("disable_mosaicking", false);
    c.ablation.disable_strategic_batching = o.value("disable_strategic_batching", false);
  }
  if (j.contains("scenarios")) {
    c.scenarios.clear();
    for (const auto& s : j["scenarios"]) c.scenarios.push_back(scenario_from_string(s.get<std::string>()));
  }
  if (j.value("accounting", std::string("ordered_pairs")) == "exclude_last_source") c.accounting = PairAccounting::ExcludeLastSource;
  c.freeze_generator = j.value("freeze_generator", c.freeze_generator);
  c.seed = j.value("seed", c.seed);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.probe_images = j.value("probe_images", c.probe_images);
  c.log_batch_plans = j.value("log_batch_plans", c.log_batch_plans);
  return c;
}

namespace detail {

inline void save_checkpoints(const std::filesystem::path& dir, const RunArtifacts& run, const std::string& suffix) {
  std::filesystem::create_directories(dir / "checkpoints");
  write_json(dir / "checkpoints" / ("detector" + suffix + ".json"), to_json(run.detector, run.steps));
  nlohmann::json g = to_json(run.generator);
  g["injection"] = {{"epsilon", run.injection.epsilon},
                    {"patch_height", run.injection.patch_height},
                    {"patch_width", run.injection.patch_width},
                    {"centered_sigmoid", run.injection.centered_sigmoid}};
  if (run.donor) g["donor"] = *run.donor;
  write_json(dir / "checkpoints" / ("generator" + suffix + ".json"), g);
}

inline double global_norm(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

}  // namespace detail

/// Joint training loop. `detector` and `generator` are taken as initialised
/// starting points; the trained pair is returned inside the artifacts.
inline RunArtifacts train_joint(const std::vector<Sample>& train, GridDetector detector, TriggerGenerator generator,
                                const TrainConfig& cfg, const TrainIo& io = {}) {
  cfg.validate();
  const int K = detector.config().num_classes;
  if (generator.num_classes() != K)
    throw ConfigError("generator has " + std::to_string(generator.num_classes()) + " classes, dataset/detector has " +
                      std::to_string(K));
  if (train.empty()) throw ConfigError("training set is empty");
  const ImageSize image = detector.config().image_size;
  for (const auto& s : train)
    if (s.image.width != image.width || s.image.height != image.height)
      throw ConfigError("sample " + s.id + " has no image of the detector's input size");

  RunArtifacts run{std::move(detector), std::move(generator), cfg.pool(K), cfg.effective_injection(image), {}, 0, {}};
  if (run.generator.mode() == GeneratorMode::Flat) run.pool = run.generator.pool();
  if (run.generator.patch_height() != run.injection.patch_height ||
      run.generator.patch_width() != run.injection.patch_width)
    throw ConfigError("generator patch size does not match the injection configuration");

  const DatasetStats stats = compute_stats(train, K);
  const ClassCounts counts = class_counts(train, K);
  const SamplerConfig sampler = cfg.effective_sampler();
  const int B = sampler.batch_size;
  if (int(train.size()) < B) throw ConfigError("training set is smaller than one batch");
  const long steps_per_epoch = long(train.size()) / B;
  const long total_steps = std::max(1L, steps_per_epoch * cfg.epochs);

  nn::Sgd sgd(cfg.detector_optimizer, run.detector.params().size());
  nn::Adam adam(cfg.generator_optimizer, run.generator.params().size());
  Rng plan_rng = Rng(cfg.seed).derive(0x5A3);

  std::ofstream metrics_log, plan_log;
  if (io.run_dir) {
    std::filesystem::create_directories(*io.run_dir);
    write_json(*io.run_dir / "target_pool.json", to_json(run.pool));
    metrics_log.open(*io.run_dir / "metrics.jsonl");
    if (cfg.log_batch_plans) plan_log.open(*io.run_dir / "batch_plans.jsonl");
  }

  std::vector<double> grad_theta(run.detector.params().size());
  std::vector<double> grad_phi(run.generator.params().size());
  GridDetector::Workspace ws;
  RawPredictions grad_raw;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    double loss_sum = 0;
    for (long s = 0; s < steps_per_epoch; ++s) {
      const BatchPlan plan = plan_batch(counts, run.pool, stats, sampler, plan_rng);
      if (plan_log.is_open()) plan_log << to_json(plan).dump() << '\n';
      std::fill(grad_theta.begin(), grad_theta.end(), 0.0);
      std::fill(grad_phi.begin(), grad_phi.end(), 0.0);
      double batch_loss = 0;

      for (std::size_t id : plan.clean) {
        const RawPredictions raw = run.detector.forward(train[id].image, ws);
        batch_loss += detection_loss(raw, train[id].annotations, run.detector.config(), &grad_raw).total;
        run.detector.backward(ws, grad_raw, grad_theta);
      }
      for (std::size_t slot = 0; slot < plan.poisoned.size(); ++slot) {
        const auto& [id, target] = plan.poisoned[slot];
        Rng label_rng = Rng(cfg.seed).derive((std::uint64_t(run.steps) << 8) + slot + 1);
        const TriggerPatch patch = run.generator.generate_patch(target);
        const Image dirty = inject_patch(train[id].image, patch, run.injection);
        const DetectionSet labels = poison_labels(train[id].annotations, target, label_rng);
        const RawPredictions raw = run.detector.forward(dirty, ws);
        batch_loss += detection_loss(raw, labels, run.detector.config(), &grad_raw).total;
        if (cfg.freeze_generator) {
          run.detector.backward(ws, grad_raw, grad_theta);
          continue;
        }
        Image grad_image;
        run.detector.backward(ws, grad_raw, grad_theta, &grad_image);
        const auto grad_patch = injection_backward(train[id].image, patch, run.injection, grad_image);
        run.generator.accumulate_gradient(target, grad_patch, grad_phi);
      }

      batch_loss /= B;
      if (!std::isfinite(batch_loss))
        throw DivergenceError("loss became non-finite at epoch " + std::to_string(epoch) + ", step " +
                              std::to_string(run.steps));
      for (double& g : grad_theta) g /= B;
      for (double& g : grad_phi) g /= B;
      if (cfg.grad_clip > 0) {
        const double norm = detail::global_norm(grad_theta);
        if (norm > cfg.grad_clip)
          for (double& g : grad_theta) g *= cfg.grad_clip / norm;
      }
      double scale = cfg.warmup_steps > 0 ? std::min(1.0, double(run.steps + 1) / cfg.warmup_steps) : 1.0;
      if (cfg.cosine_decay) scale *= 0.5 * (1.0 + std::cos(M_PI * double(run.steps) / double(total_steps)));
      sgd.config().learning_rate = cfg.detector_optimizer.learning_rate * scale;
      sgd.step(run.detector.params(), grad_theta);
      if (!cfg.freeze_generator) adam.step(run.generator.params(), grad_phi);
      ++run.steps;
      loss_sum += batch_loss;
    }

    EpochMetrics m;
    m.epoch = epoch;
    m.mean_loss = steps_per_epoch ? loss_sum / double(steps_per_epoch) : 0.0;
    if (io.probe && !io.probe->empty() && cfg.probe_images > 0) {
      const std::size_t n = std::min(io.probe->size(), std::size_t(cfg.probe_images));
      const std::vector<Sample> probe(io.probe->begin(), io.probe->begin() + long(n));
      EvalOptions opt;
      opt.scenarios = {Scenario::UntargetedRemoval};
      const AsrReport r = evaluate_attack(run.detector, run.generator, run.injection, probe, opt);
      m.probe_map_50 = r.clean_map->map_50;
      m.probe_map_50_95 = r.clean_map->map_50_95;
      m.probe_untargeted_removal = r.rate(Scenario::UntargetedRemoval);
    }
    run.metrics.push_back(m);
    if (metrics_log.is_open()) metrics_log << to_json(m).dump() << '\n' << std::flush;
    if (io.on_epoch) io.on_epoch(m);
    if (io.run_dir && cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 && epoch != cfg.epochs)
      detail::save_checkpoints(*io.run_dir, run, "_epoch" + std::to_string(epoch));
  }
  if (io.run_dir) detail::save_checkpoints(*io.run_dir, run, "");
  return run;
}

/// Retrains a fresh detector against a frozen, previously trained generator.
inline RunArtifacts train_transfer(const std::vector<Sample>& train, GridDetector detector,
                                   const TriggerGenerator& frozen, TrainConfig cfg, const std::string& donor,
                                   const TrainIo& io = {}) {
  if (frozen.num_classes() != detector.config().num_classes)
    throw ConfigError("donor generator has " + std::to_string(frozen.num_classes()) +
                      " classes but the dataset has " + std::to_string(detector.config().num_classes));
  cfg.freeze_generator = true;
  cfg.injection.patch_height = frozen.patch_height();
  cfg.injection.patch_width = frozen.patch_width();
  cfg.ablation.disable_mosaicking = false;
  if (io.run_dir) {
    std::filesystem::create_directories(*io.run_dir);
    write_json(*io.run_dir / "donor.json", {{"donor", donor}, {"generator_checksum", frozen.checksum()}});
  }
  RunArtifacts run = train_joint(train, std::move(detector), frozen, cfg, io);
  run.donor = donor;
  if (io.run_dir) detail::save_checkpoints(*io.run_dir, run, "");
  return run;
}

/// Loads the final detector / generator checkpoints of a run directory.
inline RunArtifacts load_run(const std::filesystem::path& dir) {
  RunArtifacts run;
  long steps = 0;
  run.detector = detector_from_json(read_json(dir / "checkpoints" / "detector.json"), &steps);
  run.steps = steps;
  const auto g = read_json(dir / "checkpoints" / "generator.json");
  run.generator = generator_from_json(g);
  if (g.contains("injection")) {
    const auto& o = g["injection"];
    run.injection.epsilon = o.value("epsilon", run.injection.epsilon);
    run.injection.patch_height = o.value("patch_height", run.injection.patch_height);
    run.injection.patch_width = o.value("patch_width", run.injection.patch_width);
    run.injection.centered_sigmoid = o.value("centered_sigmoid", false);
  }
  if (g.contains("donor")) run.donor = g["donor"].get<std::string>();
  run.pool = std::filesystem::exists(dir / "target_pool.json") ? pool_from_json(read_json(dir / "target_pool.json"))
                                                               : TargetPool(run.detector.config().num_classes);
  if (std::filesystem::exists(dir / "metrics.jsonl")) {
    std::ifstream in(dir / "metrics.jsonl");
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      EpochMetrics m;
      m.epoch = j.value("epoch", 0);
      m.mean_loss = j.value("mean_loss", 0.0);
      auto number = [&](const char* key) -> std::optional<double> {
        const auto it = j.find(key);
        if (it == j.end() || it->is_null()) return std::nullopt;
        return it->get<double>();
      };
      m.probe_map_50 = number("map_50");
      m.probe_map_50_95 = number("map_50_95");
      m.probe_untargeted_removal = number("asr_untargeted_removal");
      run.metrics.push_back(m);
    }
  }
  return run;
}

}  // namespace mtb
