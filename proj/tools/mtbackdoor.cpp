// mtbackdoor: command-line front end.
//
//   mtbackdoor dataset  --out DIR [--k 4 --n 500 --imbalance 0.5 --seed 1]
//   mtbackdoor train    [--config FILE] [--run NAME] [overrides...]
//   mtbackdoor eval     RUN [--scenario NAME]... [--tau 0.3]
//   mtbackdoor defense  RUN (--all | --spec jpeg:75 ...)
//   mtbackdoor render   RUN --sample ID... [--source 0 --dest 1]
//   mtbackdoor transfer DONOR_RUN [--config FILE] [--run NAME] [overrides...]
//
// Run names without a path separator resolve under $MTB_RUN_ROOT (default
// ./runs). Exit status: 0 success, 1 usage or configuration error, 2 runtime
// failure.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mtbackdoor/config.hpp"
#include "mtbackdoor/defense.hpp"
#include "mtbackdoor/eval.hpp"
#include "mtbackdoor/image_io.hpp"
#include "mtbackdoor/render.hpp"
#include "mtbackdoor/train.hpp"

namespace fs = std::filesystem;
using namespace mtb;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;

fs::path run_root() {
  const char* env = std::getenv("MTB_RUN_ROOT");
  return env && *env ? fs::path(env) : fs::path("runs");
}

fs::path resolve_run(const std::string& name) {
  if (name.find('/') != std::string::npos || fs::exists(name)) return name;
  return run_root() / name;
}

RunConfig load_run_config(const fs::path& run_dir) {
  const fs::path p = run_dir / "config.json";
  if (!fs::exists(p)) throw ConfigError(run_dir.string() + " has no config.json; is it a run directory?");
  return run_config_from_json(read_json(p));
}

// ---------------------------------------------------------------------------
// Shared training overrides (train and transfer)

struct TrainOverrides {
  std::string config_path;
  std::string run = "default";
  std::optional<int> epochs, k, patch, checkpoint_every;
  std::optional<double> poison_rate, lr, generator_lr, epsilon;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> data, validation, accounting, channels;
  std::vector<std::string> scenarios;
  bool no_disentangle = false, no_mosaic = false, no_strategic = false;
  bool centered_sigmoid = false, log_plans = false, quiet = false;

  void attach(CLI::App* cmd, bool ablations) {
    cmd->add_option("--config", config_path, "RunConfig JSON (defaults when omitted)")->check(CLI::ExistingFile);
    cmd->add_option("--run", run, "Run name under $MTB_RUN_ROOT, or a directory path");
    cmd->add_option("--epochs", epochs);
    cmd->add_option("--k", k, "Class count of the synthetic data and detector");
    cmd->add_option("--patch", patch, "Square trigger patch side in pixels");
    cmd->add_option("--poison-rate", poison_rate, "Fraction of poisoned slots per batch");
    cmd->add_option("--lr", lr, "Detector learning rate");
    cmd->add_option("--generator-lr", generator_lr, "Generator learning rate");
    cmd->add_option("--epsilon", epsilon, "Perturbation bound");
    cmd->add_option("--seed", seed);
    cmd->add_option("--data", data, "Training dataset directory (written by `dataset`)");
    cmd->add_option("--validation", validation, "Validation dataset directory");
    cmd->add_option("--channels", channels, "Backbone widths, e.g. 32,64,64,128");
    cmd->add_option("--scenario", scenarios, "Restrict the target pool (repeatable)");
    cmd->add_option("--accounting", accounting, "Targeted-miscls pair accounting: ordered_pairs | exclude_last_source")
        ->check(CLI::IsMember({"ordered_pairs", "exclude_last_source"}));
    cmd->add_option("--checkpoint-every", checkpoint_every, "Epochs between intermediate checkpoints");
    if (ablations) {
      cmd->add_flag("--no-disentangle", no_disentangle, "Single generator over the flat target pool");
      cmd->add_flag("--no-mosaic", no_mosaic, "Full-image perturbation field instead of tiling");
      cmd->add_flag("--no-strategic", no_strategic, "Uniform poisoned-sample selection");
    }
    cmd->add_flag("--centered-sigmoid", centered_sigmoid, "Use 2*sigmoid-1 so the trigger spans [-eps, eps]");
    cmd->add_flag("--log-plans", log_plans, "Write batch_plans.jsonl");
    cmd->add_flag("-q,--quiet", quiet, "Suppress per-epoch progress");
  }

  RunConfig resolve() const {
    RunConfig c = config_path.empty() ? RunConfig::defaults() : run_config_from_json(read_json(config_path));
    if (epochs) c.train.epochs = *epochs;
    if (k) {
      c.detector.num_classes = *k;
      for (auto* src : {&c.train_data, &c.validation_data})
        if (src->spec) {
          const double imbalance = 0.5;
          src->spec->num_classes = *k;
          src->spec->class_frequency = imbalanced_frequency(*k, imbalance);
          src->spec->coexist_bias = SquareMatrix{};
        }
    }
    if (patch) c.train.injection.patch_height = c.train.injection.patch_width = *patch;
    if (poison_rate) c.train.sampler.poison_rate = *poison_rate;
    if (lr) c.train.detector_optimizer.learning_rate = *lr;
    if (generator_lr) c.train.generator_optimizer.learning_rate = *generator_lr;
    if (epsilon) c.train.injection.epsilon = *epsilon;
    if (seed) c.seed = c.train.seed = *seed;
    if (data) c.train_data = DataSource{std::nullopt, fs::path(*data)};
    if (validation) c.validation_data = DataSource{std::nullopt, fs::path(*validation)};
    if (channels) {
      c.detector.channels.clear();
      std::stringstream ss(*channels);
      for (std::string item; std::getline(ss, item, ',');) {
        try {
          c.detector.channels.push_back(std::stoi(item));
        } catch (const std::exception&) {
          throw ConfigError("--channels expects comma-separated integers, got '" + *channels + "'");
        }
      }
      if (c.detector.channels.size() != c.detector.strides.size())
        throw ConfigError("--channels needs " + std::to_string(c.detector.strides.size()) + " widths");
    }
    if (!scenarios.empty()) {
      c.train.scenarios.clear();
      for (const auto& s : scenarios) c.train.scenarios.push_back(scenario_from_string(s));
    }
    if (accounting) c.train.accounting = *accounting == "exclude_last_source" ? PairAccounting::ExcludeLastSource : PairAccounting::OrderedPairs;
    if (checkpoint_every) c.train.checkpoint_every = *checkpoint_every;
    c.train.ablation.disable_disentanglement |= no_disentangle;
    c.train.ablation.disable_mosaicking |= no_mosaic;
    c.train.ablation.disable_strategic_batching |= no_strategic;
    c.train.injection.centered_sigmoid |= centered_sigmoid;
    c.train.log_batch_plans |= log_plans;
    c.validate();
    return c;
  }
};

struct LoadedData {
  Dataset train, validation;
};

/// Loads both datasets and aligns the detector with them.
LoadedData load_data(RunConfig& c) {
  LoadedData d{c.train_data.load(), c.validation_data.load()};
  if (d.train.samples.empty()) throw ConfigError("training dataset is empty");
  const int K = d.train.num_classes();
  if (d.validation.num_classes() != K)
    throw ConfigError("validation data has " + std::to_string(d.validation.num_classes()) + " classes, training data " +
                      std::to_string(K));
  c.detector.num_classes = K;
  c.detector.image_size = d.train.samples.front().image.size();
  c.validate();
  return d;
}

TrainIo progress_io(const fs::path& dir, const Dataset& validation, int epochs, bool quiet) {
  TrainIo io;
  io.run_dir = dir;
  io.probe = &validation.samples;
  const auto t0 = std::chrono::steady_clock::now();
  io.on_epoch = [t0, epochs, quiet](const EpochMetrics& m) {
    if (quiet) return;
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("epoch %3d/%d  loss %8.4f  mAP@50 %s  mAP %s  UR probe %s  (%.1f s)\n", m.epoch, epochs, m.mean_loss,
                format_rate(m.probe_map_50).c_str(), format_rate(m.probe_map_50_95).c_str(),
                format_rate(m.probe_untargeted_removal).c_str(), s);
    std::fflush(stdout);
  };
  return io;
}

void print_summary(const fs::path& dir, const RunArtifacts& run) {
  std::printf("run written to %s (%ld steps, %zu targets in pool, generator checksum %016llx)\n", dir.c_str(),
              run.steps, run.pool.size(), static_cast<unsigned long long>(run.generator.checksum()));
}

// ---------------------------------------------------------------------------
// Subcommands

int cmd_dataset(const std::string& out, int k, int n, double imbalance, std::uint64_t seed, int size, int max_objects) {
  DatasetSpec spec;
  spec.num_classes = k;
  spec.n_images = n;
  spec.seed = seed;
  spec.image_size = {size, size};
  spec.max_objects = max_objects;
  if (k <= 0) throw ConfigError("--k must be positive");
  spec.class_frequency = imbalanced_frequency(k, imbalance);
  validate(spec);
  const Dataset d = make_synthetic(spec);
  save_dataset(out, d, &spec);
  const auto stats = compute_stats(d.samples, k);
  std::printf("wrote %d images, %d classes to %s\n", n, k, out.c_str());
  for (int c = 0; c < k; ++c)
    std::printf("  %-18s %5.0f instances\n", d.class_names[std::size_t(c)].c_str(), stats.instance_counts[std::size_t(c)]);
  return 0;
}

int cmd_train(const TrainOverrides& o) {
  RunConfig c = o.resolve();
  LoadedData data = load_data(c);
  const fs::path dir = resolve_run(o.run);
  fs::create_directories(dir);
  write_json(dir / "config.json", to_json(c));
  const int K = c.detector.num_classes;
  auto run = train_joint(data.train.samples, build_detector(c.detector, c.train.seed),
                         build_generator(c.train, K, c.detector.image_size), c.train,
                         progress_io(dir, data.validation, c.train.epochs, o.quiet));
  print_summary(dir, run);
  return 0;
}

int cmd_transfer(const std::string& donor_arg, const TrainOverrides& o) {
  const fs::path donor_dir = resolve_run(donor_arg);
  const RunArtifacts donor = load_run(donor_dir);
  RunConfig c = o.resolve();
  c.train.injection = donor.injection;
  LoadedData data = load_data(c);
  const fs::path dir = resolve_run(o.run);
  fs::create_directories(dir);
  write_json(dir / "config.json", to_json(c));
  auto run = train_transfer(data.train.samples, build_detector(c.detector, c.train.seed), donor.generator, c.train,
                            fs::absolute(donor_dir).lexically_normal().string(),
                            progress_io(dir, data.validation, c.train.epochs, o.quiet));
  print_summary(dir, run);
  return 0;
}

struct EvalArgs {
  std::string run;
  std::vector<std::string> scenarios;
  std::optional<double> tau;
  std::optional<std::string> data, out;
  bool no_map = false, matrices = true, dump = false;
};

int cmd_eval(const EvalArgs& a) {
  const fs::path dir = resolve_run(a.run);
  RunConfig c = load_run_config(dir);
  const RunArtifacts run = load_run(dir);
  const Dataset data = a.data ? load_dataset(*a.data) : c.validation_data.load();
  EvalSettings es = c.eval;
  if (!a.scenarios.empty()) {
    es.scenarios.clear();
    for (const auto& s : a.scenarios) es.scenarios.push_back(scenario_from_string(s));
  }
  if (a.tau) es.tau = *a.tau;
  if (a.no_map) es.compute_map = false;
  const AsrReport report = evaluate_attack(run.detector, run.generator, run.injection, data.samples, es.options());

  const fs::path out = a.out ? fs::path(*a.out) : dir / "eval_report.json";
  nlohmann::json j = to_json(report);
  j["tau"] = es.tau;
  j["images"] = data.samples.size();
  write_json(out, j);
  std::printf("%s", render_table({{dir.filename().string(), report}}).c_str());
  if (a.matrices)
    for (const auto& s : report.scenarios)
      if (is_targeted(s.scenario)) std::printf("\n%s", render_matrix(s, run.detector.config().num_classes).c_str());
  if (a.dump) {
    std::vector<DetectionSet> preds;
    for (const auto& s : data.samples) preds.push_back(run.detector.predict(s.image, es.map_score_threshold));
    write_json(dir / "results_clean.json", to_coco_results(preds));
    write_json(dir / "annotations_eval.json", export_coco(data.samples, data.class_names));
  }
  std::printf("\nreport written to %s\n", out.c_str());
  return 0;
}

int cmd_defense(const std::string& run_arg, const std::vector<std::string>& specs_text, bool all,
                const std::optional<std::string>& out_arg) {
  if (specs_text.empty() && !all) throw ConfigError("give at least one --spec or --all");
  std::vector<DefenseSpec> specs = all ? standard_defenses() : std::vector<DefenseSpec>{};
  for (const auto& s : specs_text) specs.push_back(parse_defense(s));
  const fs::path dir = resolve_run(run_arg);
  RunConfig c = load_run_config(dir);
  const RunArtifacts run = load_run(dir);
  const Dataset validation = c.validation_data.load();
  const Dataset train = c.train_data.load();
  ModelDefenseOptions mopt;
  mopt.seed = c.train.seed;
  mopt.fine_tune.sampler.batch_size = c.train.sampler.batch_size;
  mopt.fine_tune.injection = run.injection;
  const DefenseReport rep = evaluate_defense(run, specs, validation.samples, train.samples, c.eval.options(), mopt);
  const fs::path out = out_arg ? fs::path(*out_arg) : dir / "defense_report.json";
  write_json(out, to_json(rep));
  std::printf("%s\nreport written to %s\n", render_table(rep).c_str(), out.c_str());
  return 0;
}

int cmd_render(const std::string& run_arg, const std::vector<std::string>& ids, int source, int dest, int scale,
               const std::optional<std::string>& out_arg) {
  const fs::path dir = resolve_run(run_arg);
  RunConfig c = load_run_config(dir);
  const RunArtifacts run = load_run(dir);
  const int K = run.detector.config().num_classes;
  if (source == dest) throw ConfigError("--source and --dest must differ");
  const std::vector<AttackTarget> targets{encode(Scenario::UntargetedRemoval, K), encode(Scenario::TargetedRemoval, K, source),
                                          encode(Scenario::UntargetedMiscls, K),
                                          encode(Scenario::TargetedMiscls, K, source, dest),
                                          encode(Scenario::UntargetedGeneration, K)};
  const fs::path out = out_arg ? fs::path(*out_arg) : dir / "render";
  fs::create_directories(out);

  std::vector<const Sample*> chosen;
  Dataset validation = c.validation_data.load(), train;
  bool train_loaded = false;
  for (const auto& id : ids) {
    const Sample* found = nullptr;
    for (const auto& s : validation.samples)
      if (s.id == id) found = &s;
    if (!found) {
      if (!train_loaded) train = c.train_data.load(), train_loaded = true;
      for (const auto& s : train.samples)
        if (s.id == id) found = &s;
    }
    if (!found) throw ConfigError("sample '" + id + "' is in neither the validation nor the training data");
    chosen.push_back(found);
  }

  for (const Sample* s : chosen) {
    std::vector<Image> tiles{overlay(s->image, run.detector.predict(s->image), scale)};
    for (const auto& t : targets) {
      const Image dirty = inject(s->image, run.generator, t, run.injection);
      tiles.push_back(overlay(dirty, run.detector.predict(dirty), scale));
    }
    write_png(out / (s->id + ".png"), hstack(tiles));
  }
  for (const auto& t : targets) {
    std::string name = describe(t);
    std::replace(name.begin(), name.end(), ':', '_');
    name.erase(std::remove(name.begin(), name.end(), '>'), name.end());
    std::replace(name.begin(), name.end(), '-', '_');
    write_png(out / ("trigger_" + name + ".png"), upscale(patch_image(run.generator.generate_patch(t)), scale));
  }
  if (!run.metrics.empty()) {
    PlotSeries loss{{}, {0.1, 0.1, 0.1}}, map{{}, {0.1, 0.5, 0.9}}, ur{{}, {0.9, 0.2, 0.1}};
    for (const auto& m : run.metrics) {
      loss.values.push_back(m.mean_loss);
      map.values.push_back(m.probe_map_50);
      ur.values.push_back(m.probe_untargeted_removal);
    }
    write_png(out / "training_curves.png", plot_series({loss, map, ur}));
  }
  std::printf("wrote %zu sample strip(s) (clean + %zu triggered scenarios) and trigger patches to %s\n", chosen.size(),
              targets.size(), out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-target backdoor attacks on a grid object detector"};
  app.require_subcommand(1);

  auto* dataset = app.add_subcommand("dataset", "Generate a synthetic shapes dataset");
  std::string ds_out;
  int ds_k = 4, ds_n = 500, ds_size = 56, ds_max_objects = 3;
  double ds_imbalance = 0.5;
  std::uint64_t ds_seed = 1;
  dataset->add_option("--out", ds_out, "Output directory")->required();
  dataset->add_option("--k", ds_k, "Number of classes");
  dataset->add_option("--n", ds_n, "Number of images");
  dataset->add_option("--imbalance", ds_imbalance, "0 = uniform classes; rarest/most frequent = 1 - imbalance");
  dataset->add_option("--seed", ds_seed);
  dataset->add_option("--size", ds_size, "Square image side in pixels");
  dataset->add_option("--max-objects", ds_max_objects, "Objects per image upper bound");

  auto* train = app.add_subcommand("train", "Jointly train detector and trigger generator");
  TrainOverrides train_opts;
  train_opts.attach(train, true);

  auto* transfer = app.add_subcommand("transfer", "Train a fresh detector against a frozen donor generator");
  TrainOverrides transfer_opts;
  std::string donor;
  transfer->add_option("donor", donor, "Donor run name or directory")->required();
  transfer_opts.attach(transfer, false);

  auto* eval = app.add_subcommand("eval", "Clean mAP and attack success rates of a run");
  EvalArgs eval_args;
  bool no_matrices = false;
  eval->add_option("run", eval_args.run, "Run name or directory")->required();
  eval->add_option("--scenario", eval_args.scenarios, "Restrict to scenarios (repeatable)");
  eval->add_option("--tau", eval_args.tau, "Confidence threshold");
  eval->add_option("--data", eval_args.data, "Evaluate on this dataset directory instead of the run's validation set");
  eval->add_option("--out", eval_args.out, "Report path (default RUN/eval_report.json)");
  eval->add_flag("--no-map", eval_args.no_map, "Skip clean mAP");
  eval->add_flag("--no-matrices", no_matrices, "Skip per-configuration matrices");
  eval->add_flag("--dump", eval_args.dump, "Also write COCO result and annotation files");

  auto* defense = app.add_subcommand("defense", "Re-evaluate a run with mitigations in the loop");
  std::string def_run;
  std::vector<std::string> def_specs;
  bool def_all = false;
  std::optional<std::string> def_out;
  defense->add_option("run", def_run, "Run name or directory")->required();
  defense->add_option("--spec", def_specs, "jpeg:Q | mean:K | median:K | finetune:E[:F] | prune:F | fineprune:F:E[:C]");
  defense->add_flag("--all", def_all, "The six standard defenses");
  defense->add_option("--out", def_out, "Report path (default RUN/defense_report.json)");

  auto* render = app.add_subcommand("render", "Detection overlays, trigger patches and training curves");
  std::string ren_run;
  std::vector<std::string> ren_ids;
  int ren_source = 0, ren_dest = 1, ren_scale = 4;
  std::optional<std::string> ren_out;
  render->add_option("run", ren_run, "Run name or directory")->required();
  render->add_option("--sample", ren_ids, "Sample id (repeatable)")->required();
  render->add_option("--source", ren_source, "Victim class for the targeted strips");
  render->add_option("--dest", ren_dest, "Destination class for targeted misclassification");
  render->add_option("--scale", ren_scale, "Upscaling factor")->check(CLI::Range(1, 16));
  render->add_option("--out", ren_out, "Output directory (default RUN/render)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : kExitUsage;
  }

  try {
    if (*dataset) return cmd_dataset(ds_out, ds_k, ds_n, ds_imbalance, ds_seed, ds_size, ds_max_objects);
    if (*train) return cmd_train(train_opts);
    if (*transfer) return cmd_transfer(donor, transfer_opts);
    if (*eval) {
      eval_args.matrices = !no_matrices;
      return cmd_eval(eval_args);
    }
    if (*defense) return cmd_defense(def_run, def_specs, def_all, def_out);
    if (*render) return cmd_render(ren_run, ren_ids, ren_source, ren_dest, ren_scale, ren_out);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}
