#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dynprop/checkpoint.hpp"
#include "dynprop/data.hpp"
#include "dynprop/detector.hpp"
#include "dynprop/eval.hpp"
#include "dynprop/train.hpp"

// The `dynprop` command line. run_cli() is callable in-process so the test
// and acceptance binaries exercise exactly what the executable does.

namespace dynprop {

enum ExitCode { kExitOk = 0, kExitFailure = 1, kExitUsage = 2, kExitData = 3, kExitCheckpoint = 4 };

class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace cli_detail {

inline bool parse_on_off(const std::string& v, const char* flag) {
  if (v == "on") return true;
  if (v == "off") return false;
  throw UsageError(std::string(flag) + " expects on|off, got '" + v + "'");
}

inline void write_sidecar(const std::filesystem::path& path, const nlohmann::json& cfg) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << cfg.dump(2) << '\n';
}

inline std::filesystem::path sidecar_for(const std::filesystem::path& out_file) {
  return out_file.string() + ".run_config.json";
}

inline std::vector<Scene> load_split(const std::filesystem::path& dir, const std::string& split) {
  if (split != "train" && split != "val") throw UsageError("--split must be train or val");
  read_manifest(dir);
  return read_split(dir / (split + ".jsonl"));
}

inline std::vector<Scene> limit(std::vector<Scene> scenes, std::size_t n) {
  if (n > 0 && scenes.size() > n) scenes.resize(n);
  return scenes;
}

inline std::ofstream open_output(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  return out;
}

// --proposals: "auto" and/or comma separated counts.
struct ConfigSelection {
  std::string proposals;
  bool all = false;
  bool oracle = false;

  std::vector<EvalConfig> resolve(const ModelConfig& mc) const {
    std::vector<EvalConfig> out;
    if (all) out = switch_configs(mc);
    std::stringstream ss(proposals);
    std::string item;
    while (std::getline(ss, item, ',')) {
      if (item.empty()) continue;
      if (item == "auto") {
        out.push_back(auto_config());
        continue;
      }
      int c = 0;
      try {
        std::size_t used = 0;
        c = std::stoi(item, &used);
        if (used != item.size()) throw std::invalid_argument(item);
      } catch (const std::exception&) {
        throw UsageError("--proposals expects 'auto' or integers, got '" + item + "'");
      }
      if (c < 1 || c > mc.proposals)
        throw UsageError("--proposals " + item + " outside [1, " + std::to_string(mc.proposals) + "]");
      out.push_back(fixed_config(c, mc.proposals));
    }
    if (oracle) out.push_back(oracle_config());
    if (out.empty()) out = switch_configs(mc);
    for (auto& c : out)
      if (c.mode != CountMode::Fixed && mc.mode == Mode::Individual)
        throw UsageError("dynamic proposal selection needs a switchable or dynamic model");
    return out;
  }

  nlohmann::json to_json() const { return {{"proposals", proposals}, {"config_all", all}, {"oracle_count", oracle}}; }
};

inline nlohmann::json model_json(const ModelConfig& c) {
  return {{"arch", to_string(c.arch)},   {"mode", to_string(c.mode)},     {"proposals", c.proposals},
          {"theta", c.theta},            {"k", c.k},                       {"sampling", to_string(c.strategy)},
          {"stages", c.stages},          {"dim", c.dim},                   {"classes", c.classes},
          {"image_size", c.image_size},  {"patch", c.patch},               {"anchors", c.anchors},
          {"encoder_blocks", c.encoder_blocks},
          {"estimator_detach", c.estimator_detach}};
}

}  // namespace cli_detail

inline int run_cli(std::vector<std::string> args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  using namespace cli_detail;
  namespace fs = std::filesystem;

  CLI::App app{"dynprop: switchable and dynamic proposal counts for toy detectors"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  // gen-data
  struct {
    std::string out;
    std::size_t train = 2000, val = 500;
    std::uint64_t seed = 0;
    int max_objects = 10;
    std::size_t size = 64;
    bool force = false;
  } gen;
  auto* cmd_gen = app.add_subcommand("gen-data", "Generate a synthetic dataset");
  cmd_gen->add_option("--out", gen.out, "Output directory")->required();
  cmd_gen->add_option("--train", gen.train, "Training scenes")->capture_default_str();
  cmd_gen->add_option("--val", gen.val, "Validation scenes")->capture_default_str();
  cmd_gen->add_option("--seed", gen.seed, "Generation seed")->capture_default_str();
  cmd_gen->add_option("--max-objects", gen.max_objects, "Maximum objects per scene")->capture_default_str();
  cmd_gen->add_option("--size", gen.size, "Image side in pixels")->capture_default_str();
  cmd_gen->add_flag("--force", gen.force, "Overwrite a non-empty output directory");

  // train
  struct {
    std::string mode = "individual", arch = "query", distill = "off", teacher_task = "on", sampling = "first";
    int proposals = 40, theta = 4, steps = 3000, batch = 8, log_every = 50, ckpt_every = 0, stages = 3;
    double k = 9.0, lr = 1e-3, lr_drop_at = 0.8, lr_drop = 0.1;
    std::uint64_t seed = 0;
    std::string data, out;
    bool oracle_count = false, estimator_detach = false;
  } tr;
  auto* cmd_train = app.add_subcommand("train", "Train a detector");
  cmd_train->add_option("--mode", tr.mode, "individual|switchable|dynamic")->capture_default_str();
  cmd_train->add_option("--arch", tr.arch, "query|two_stage")->capture_default_str();
  cmd_train->add_option("--proposals", tr.proposals, "Total proposals N")->capture_default_str();
  cmd_train->add_option("--theta", tr.theta, "Number of configurations")->capture_default_str();
  cmd_train->add_option("--k", tr.k, "Object count mapped to the full configuration")->capture_default_str();
  cmd_train->add_option("--distill", tr.distill, "Inplace distillation on|off")->capture_default_str();
  cmd_train->add_option("--teacher-task", tr.teacher_task, "Task loss on the full-N teacher on|off")
      ->capture_default_str();
  cmd_train->add_option("--sampling", tr.sampling, "first|last|bin")->capture_default_str();
  cmd_train->add_option("--steps", tr.steps, "Optimizer steps")->capture_default_str();
  cmd_train->add_option("--batch", tr.batch, "Images per step")->capture_default_str();
  cmd_train->add_option("--lr", tr.lr, "Adam learning rate")->capture_default_str();
  cmd_train->add_option("--lr-drop-at", tr.lr_drop_at, "Fraction of steps before the learning rate drops")
      ->capture_default_str();
  cmd_train->add_option("--lr-drop", tr.lr_drop, "Learning-rate multiplier after the drop")->capture_default_str();
  cmd_train->add_option("--stages", tr.stages, "Refinement stages (query arch)")->capture_default_str();
  cmd_train->add_option("--seed", tr.seed, "Seed")->capture_default_str();
  cmd_train->add_option("--data", tr.data, "Dataset directory")->required();
  cmd_train->add_option("--out", tr.out, "Output directory")->required();
  cmd_train->add_option("--log-every", tr.log_every, "Training-log interval")->capture_default_str();
  cmd_train->add_option("--ckpt-every", tr.ckpt_every, "Checkpoint interval (0: final only)")->capture_default_str();
  cmd_train->add_flag("--oracle-count", tr.oracle_count, "Dynamic mode: pick proposals from the true count");
  cmd_train->add_flag("--estimator-detach", tr.estimator_detach, "Block estimator gradients into the backbone");

  // eval / count / bench / sweep share these
  struct {
    std::string ckpt, data, out, split = "val", sampling;
    ConfigSelection sel;
    std::size_t limit = 0, images = 100;
    int repeats = 3, from = 1, to = 1, step = 1;
  } ev;
  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--ckpt", ev.ckpt, "Checkpoint file")->required();
    cmd->add_option("--data", ev.data, "Dataset directory")->required();
    cmd->add_option("--split", ev.split, "train|val")->capture_default_str();
    cmd->add_option("--out", ev.out, "Output CSV")->required();
    cmd->add_option("--limit", ev.limit, "Use only the first N scenes (0: all)")->capture_default_str();
  };
  auto add_selection = [&](CLI::App* cmd) {
    cmd->add_option("--proposals", ev.sel.proposals, "'auto' and/or comma separated counts");
    cmd->add_option("--sampling", ev.sampling, "first|last|bin (default: the model's)");
    cmd->add_flag("--oracle-count", ev.sel.oracle, "Add a row choosing proposals from the true count");
  };
  auto* cmd_eval = app.add_subcommand("eval", "AP50 / mAP / AR per configuration");
  add_common(cmd_eval);
  add_selection(cmd_eval);
  auto* cmd_count = app.add_subcommand("count", "Count-estimator MAE and acc4");
  add_common(cmd_count);
  auto* cmd_bench = app.add_subcommand("bench", "Per-image latency per configuration");
  add_common(cmd_bench);
  add_selection(cmd_bench);
  auto* cmd_sweep = app.add_subcommand("sweep", "AP50 and latency over a range of proposal counts");
  add_common(cmd_sweep);
  for (auto* cmd : {cmd_bench, cmd_sweep}) {
    cmd->add_option("--images", ev.images, "Images timed")->capture_default_str();
    cmd->add_option("--repeats", ev.repeats, "Timing repeats")->capture_default_str();
  }
  cmd_sweep->add_option("--from", ev.from, "First count")->required();
  cmd_sweep->add_option("--to", ev.to, "Last count")->required();
  cmd_sweep->add_option("--step", ev.step, "Count increment")->capture_default_str();

  // "--config all" selects the theta switchable configurations.
  std::string config_choice;
  for (auto* cmd : {cmd_eval, cmd_bench}) {
    cmd->add_option("--config", config_choice, "'all': every switchable configuration");
  }

  std::reverse(args.begin(), args.end());
  try {
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (!config_choice.empty() && config_choice != "all") throw UsageError("--config accepts only 'all'");
    ev.sel.all = config_choice == "all";

    if (*cmd_gen) {
      if (gen.max_objects < 1) throw UsageError("--max-objects must be >= 1");
      if (gen.size < 8) throw UsageError("--size must be >= 8");
      const fs::path dir = gen.out;
      if (fs::exists(dir) && !fs::is_empty(dir) && !gen.force)
        throw UsageError("output directory " + dir.string() + " is not empty (use --force)");
      DatasetManifest m;
      m.seed = gen.seed;
      m.train = gen.train;
      m.val = gen.val;
      m.max_objects = gen.max_objects;
      m.image_size = gen.size;
      fs::create_directories(dir);
      write_sidecar(dir / "run_config.json", {{"command", "gen-data"}, {"out", gen.out}, {"manifest", m.to_json()}});
      write_dataset(dir, m);
      out << "wrote " << m.train << " train / " << m.val << " val scenes to " << dir.string() << '\n';
      return kExitOk;
    }

    if (*cmd_train) {
      TrainConfig tc;
      ModelConfig& mc = tc.model;
      mc.arch = parse_arch(tr.arch);
      mc.mode = parse_mode(tr.mode);
      mc.proposals = tr.proposals;
      mc.theta = mc.mode == Mode::Individual ? 1 : tr.theta;
      mc.k = tr.k;
      mc.strategy = parse_strategy(tr.sampling);
      mc.stages = tr.stages;
      mc.estimator_detach = tr.estimator_detach;
      tc.steps = tr.steps;
      tc.batch = tr.batch;
      tc.lr = tr.lr;
      tc.lr_drop_at = tr.lr_drop_at;
      tc.lr_drop = tr.lr_drop;
      tc.seed = tr.seed;
      tc.distill = parse_on_off(tr.distill, "--distill");
      tc.teacher_task = parse_on_off(tr.teacher_task, "--teacher-task");
      tc.oracle_count = tr.oracle_count;
      if (tc.oracle_count && mc.mode != Mode::Dynamic) throw UsageError("--oracle-count needs --mode dynamic");
      try {
        tc.validate();
      } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
      }
      const fs::path dir = tr.out;
      fs::create_directories(dir);
      const DatasetManifest manifest = read_manifest(tr.data);
      if (static_cast<int>(manifest.image_size) != mc.image_size)
        throw DataError("dataset image size " + std::to_string(manifest.image_size) + " differs from model's " +
                        std::to_string(mc.image_size));
      if (manifest.max_objects > mc.proposals / mc.theta)
        throw UsageError("smallest configuration (" + std::to_string(mc.proposals / mc.theta) +
                         " proposals) is below the dataset's max objects (" + std::to_string(manifest.max_objects) +
                         ")");
      write_sidecar(dir / "run_config.json",
                    {{"command", "train"},
                     {"data", tr.data},
                     {"out", tr.out},
                     {"model", model_json(mc)},
                     {"steps", tc.steps},
                     {"batch", tc.batch},
                     {"lr", tc.lr},
                     {"lr_drop_at", tc.lr_drop_at},
                     {"lr_drop", tc.lr_drop},
                     {"seed", tc.seed},
                     {"distill", tc.distill},
                     {"teacher_task", tc.teacher_task},
                     {"oracle_count", tc.oracle_count},
                     {"log_every", tr.log_every},
                     {"ckpt_every", tr.ckpt_every}});
      const auto train_set = read_split(fs::path(tr.data) / "train.jsonl");
      Detector model(mc, tc.seed);
      std::ofstream log = open_output(dir / "train_log.csv");
      TrainHooks hooks;
      hooks.log = &log;
      hooks.log_every = tr.log_every;
      if (tr.ckpt_every > 0) {
        hooks.checkpoint_dir = dir;
        hooks.checkpoint_every = tr.ckpt_every;
      }
      const TrainSummary s = train(model, tc, train_set, hooks);
      save_checkpoint(model, dir / "model.dynp");
      out << "trained " << s.steps << " steps (" << s.skipped << " skipped), final loss " << s.last.total << " -> "
          << (dir / "model.dynp").string() << '\n';
      return kExitOk;
    }

    // Commands reading a checkpoint.
    const fs::path out_path = ev.out;
    nlohmann::json sidecar = {{"ckpt", ev.ckpt}, {"data", ev.data}, {"split", ev.split}, {"out", ev.out},
                              {"limit", ev.limit}, {"selection", ev.sel.to_json()}, {"sampling", ev.sampling}};
    const Detector model = load_checkpoint(ev.ckpt);
    const ModelConfig& mc = model.config();
    sidecar["model"] = model_json(mc);
    const Strategy strategy = ev.sampling.empty() ? mc.strategy : parse_strategy(ev.sampling);
    const auto scenes = limit(load_split(ev.data, ev.split), ev.limit);
    const BenchOptions bench{ev.images, ev.repeats, 5};

    if (*cmd_eval) {
      const auto configs = ev.sel.resolve(mc);
      sidecar["command"] = "eval";
      write_sidecar(sidecar_for(out_path), sidecar);
      auto csv = open_output(out_path);
      csv << kEvalHeader << '\n';
      for (auto& c : configs) csv << eval_csv_row(evaluate(model, scenes, c, strategy)) << '\n';
      return kExitOk;
    }
    if (*cmd_count) {
      sidecar["command"] = "count";
      write_sidecar(sidecar_for(out_path), sidecar);
      auto csv = open_output(out_path);
      csv << kCountHeader << '\n' << count_csv_row(count_report(model, scenes)) << '\n';
      return kExitOk;
    }
    if (*cmd_bench) {
      const auto configs = ev.sel.resolve(mc);
      sidecar["command"] = "bench";
      sidecar["images"] = ev.images;
      sidecar["repeats"] = ev.repeats;
      write_sidecar(sidecar_for(out_path), sidecar);
      auto csv = open_output(out_path);
      csv << kBenchHeader << '\n';
      for (auto& r : bench_latency(model, scenes, configs, bench, strategy)) csv << bench_csv_row(r) << '\n';
      return kExitOk;
    }
    if (*cmd_sweep) {
      sidecar["command"] = "sweep";
      sidecar["from"] = ev.from;
      sidecar["to"] = ev.to;
      sidecar["step"] = ev.step;
      try {
        sweep_counts(ev.from, ev.to, ev.step);
      } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
      }
      write_sidecar(sidecar_for(out_path), sidecar);
      const auto rows = sweep(model, scenes, ev.from, ev.to, ev.step, bench);
      auto csv = open_output(out_path);
      csv << kSweepHeader << '\n';
      for (auto& r : rows) csv << sweep_csv_row(r) << '\n';
      return kExitOk;
    }
    return kExitUsage;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const CheckpointError& e) {
    err << "checkpoint error: " << e.what() << '\n';
    return kExitCheckpoint;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
}

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  return run_cli(std::vector<std::string>(argv + 1, argv + argc), out, err);
}

}  // namespace dynprop
