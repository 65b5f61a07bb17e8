// mtl: desk-scale multi-task transfer-learning experiments
//
// Subcommands: gen-data, pretrain, teach, adapt, finetune, run, eval, sweep,
// report. Exit codes: 0 success, 2 invalid configuration, 3 runtime invariant
// violation or training abort, 1 other errors.

#include <cstdio>
#include <exception>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mtl/error.h"
#include "mtl/pipeline.h"

namespace {

using mtl::ExperimentConfig;

ExperimentConfig load_config(const std::string& path) {
  if (path.empty()) return ExperimentConfig{};
  return ExperimentConfig::load(path);
}

void apply_loss_weight_overrides(ExperimentConfig& cfg, const std::vector<std::string>& specs) {
  for (const auto& s : specs) {
    size_t eq = s.find('=');
    mtl::check_config(eq != std::string::npos, "--loss-weight expects <task>=<value>, got " + s);
    std::string task = s.substr(0, eq);
    double value = std::stod(s.substr(eq + 1));
    if (task == "det") cfg.weights.det = value;
    else if (task == "sem") cfg.weights.sem = value;
    else if (task == "driv") cfg.weights.driv = value;
    else throw mtl::ConfigError("unknown loss-weight task: " + task);
  }
}

std::string self_exe_path() {
  char buf[4096];
  ssize_t n = ::readlink("/proc/self/exe", buf, sizeof(buf) - 1);
  if (n <= 0) return "mtl";
  buf[n] = '\0';
  return buf;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale multi-task transfer learning (pretrain-adapt-finetune)"};
  app.require_subcommand(1);

  std::string config_path, data_dir, out, pretrain_ckpt, init_ckpt, log_path, ckpt_path;
  std::string kind = "contrastive_toy", paradigm_name = "pretrain_adapt_finetune";
  std::string budget_arg, grid_arg = "0.1:1.0:0.1", axes_arg = "det,sem,driv";
  uint64_t seed = 0;
  int jobs = 1;
  std::vector<std::string> loss_weight_overrides;
  std::vector<std::string> metrics_files;

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic train/val datasets");
  gen->add_option("--config", config_path, "experiment config (JSON)");
  gen->add_option("--out", out, "output directory");

  auto* pre = app.add_subcommand("pretrain", "toy pretraining registry");
  pre->add_option("--config", config_path, "experiment config (JSON)");
  pre->add_option("--kind", kind, "supervised_toy | contrastive_toy | random");
  pre->add_option("--seed", seed, "pretraining seed");
  pre->add_option("--out", out, "output checkpoint path");

  auto* tch = app.add_subcommand("teach", "train teachers and write the pseudo-merged dataset");
  tch->add_option("--config", config_path, "experiment config (JSON)");
  tch->add_option("--data", data_dir, "dataset directory (from gen-data)")->required();
  tch->add_option("--pretrain", pretrain_ckpt, "pretrained backbone checkpoint");
  tch->add_option("--out", out, "output directory (teachers/ and merged/)");

  auto* adapt = app.add_subcommand("adapt", "run the adapt stage only");
  auto* fine = app.add_subcommand("finetune", "run the finetune stage only");
  for (CLI::App* stage : {adapt, fine}) {
    stage->add_option("--config", config_path, "experiment config (JSON)");
    stage->add_option("--data", data_dir, "dataset directory")->required();
    stage->add_option("--init", init_ckpt, "initial checkpoint (may be partial)");
    stage->add_option("--seed", seed, "run seed");
    stage->add_option("--out", out, "output checkpoint path")->required();
    stage->add_option("--log", log_path, "per-step JSONL log path");
  }

  auto* run = app.add_subcommand("run", "full paradigm pipeline: stages + evaluation");
  run->add_option("--config", config_path, "experiment config (JSON)");
  run->add_option("--data", data_dir, "dataset directory")->required();
  run->add_option("--paradigm", paradigm_name, "pretrain_finetune | pretrain_adapt_finetune");
  run->add_option("--budget", budget_arg, "adapt,finetune epochs (e.g. 1,35)");
  run->add_option("--pretrain", pretrain_ckpt, "pretrained backbone checkpoint");
  run->add_option("--seed", seed, "run seed");
  run->add_option("--loss-weight", loss_weight_overrides, "override, e.g. sem=0.7")
      ->take_all();
  run->add_option("--out", out, "run output directory");

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  ev->add_option("--config", config_path, "experiment config (JSON)");
  ev->add_option("--ckpt", ckpt_path, "checkpoint to evaluate")->required();
  ev->add_option("--data", data_dir, "dataset directory (e.g. <out>/val)")->required();
  ev->add_option("--out", out, "metrics output path");

  auto* sw = app.add_subcommand("sweep", "loss-weight grid search (per task axis)");
  sw->add_option("--config", config_path, "experiment config (JSON)");
  sw->add_option("--data", data_dir, "dataset directory")->required();
  sw->add_option("--pretrain", pretrain_ckpt, "pretrained backbone checkpoint");
  sw->add_option("--grid", grid_arg, "lo:hi:step (default 0.1:1.0:0.1)");
  sw->add_option("--axes", axes_arg, "comma-separated tasks to sweep");
  sw->add_option("--jobs", jobs, "parallel worker processes");
  sw->add_option("--out", out, "sweep output directory");

  auto* rep = app.add_subcommand("report", "aggregate metrics files into a comparison table");
  rep->add_option("files", metrics_files, "metrics.json files or run directories")->required();
  rep->add_option("--out", out, "report JSON output path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    namespace fs = std::filesystem;
    if (gen->parsed()) {
      ExperimentConfig cfg = load_config(config_path);
      std::string dir = out.empty() ? (fs::path(mtl::output_root()) / "data").string() : out;
      mtl::generate_datasets(cfg, dir);
      std::printf("wrote datasets under %s\n", dir.c_str());
    } else if (pre->parsed()) {
      ExperimentConfig cfg = load_config(config_path);
      std::string path =
          out.empty() ? (fs::path(mtl::output_root()) / "pretrain.ckpt").string() : out;
      mtl::pretrain_to_file(cfg, mtl::pretrain_kind_from_name(kind), seed, path);
      std::printf("wrote pretrained backbone to %s\n", path.c_str());
    } else if (tch->parsed()) {
      ExperimentConfig cfg = load_config(config_path);
      std::string dir = out.empty() ? data_dir : out;
      mtl::teach(cfg, data_dir, pretrain_ckpt, dir);
      std::printf("wrote teachers and merged dataset under %s\n", dir.c_str());
    } else if (adapt->parsed() || fine->parsed()) {
      ExperimentConfig cfg = load_config(config_path);
      mtl::run_single_stage(cfg, adapt->parsed() ? "adapt" : "finetune", data_dir, init_ckpt,
                            seed, out, log_path);
      std::printf("wrote checkpoint to %s\n", out.c_str());
    } else if (run->parsed()) {
      ExperimentConfig cfg = load_config(config_path);
      if (!budget_arg.empty()) {
        size_t comma = budget_arg.find(',');
        mtl::check_config(comma != std::string::npos, "--budget expects adapt,finetune");
        cfg.budget.adapt_epochs = std::stoi(budget_arg.substr(0, comma));
        cfg.budget.finetune_epochs = std::stoi(budget_arg.substr(comma + 1));
      }
      apply_loss_weight_overrides(cfg, loss_weight_overrides);
      std::string dir = out.empty() ? (fs::path(mtl::output_root()) / "run").string() : out;
      mtl::RunOutcome r = mtl::run_pipeline(cfg, mtl::paradigm_from_name(paradigm_name), data_dir,
                                            pretrain_ckpt, seed, dir);
      std::printf("steps=%lld metrics=%s\n", static_cast<long long>(r.total_steps),
                  r.metrics_path.c_str());
    } else if (ev->parsed()) {
      ExperimentConfig cfg = load_config(config_path);
      std::string path = out.empty() ? (fs::path(mtl::output_root()) / "eval.json").string() : out;
      mtl::evaluate_checkpoint(cfg, ckpt_path, data_dir, path);
      std::printf("wrote metrics to %s\n", path.c_str());
    } else if (sw->parsed()) {
      ExperimentConfig cfg = load_config(config_path);
      mtl::SweepSpec spec;
      if (std::sscanf(grid_arg.c_str(), "%lf:%lf:%lf", &spec.lo, &spec.hi, &spec.step) != 3)
        throw mtl::ConfigError("--grid expects lo:hi:step, got " + grid_arg);
      spec.axes.clear();
      std::string axis;
      for (char ch : axes_arg + ",") {
        if (ch == ',') {
          if (!axis.empty()) spec.axes.push_back(axis);
          axis.clear();
        } else {
          axis += ch;
        }
      }
      spec.jobs = jobs;
      std::string dir = out.empty() ? (fs::path(mtl::output_root()) / "sweep").string() : out;
      return mtl::run_sweep(cfg, spec, config_path, data_dir, pretrain_ckpt, dir, self_exe_path());
    } else if (rep->parsed()) {
      std::vector<std::string> files;
      for (const auto& f : metrics_files) {
        if (fs::is_directory(f)) {
          for (const auto& entry : fs::recursive_directory_iterator(f))
            if (entry.path().filename() == "metrics.json") files.push_back(entry.path().string());
          std::sort(files.begin(), files.end());
        } else {
          files.push_back(f);
        }
      }
      std::string table = mtl::report(files, out);
      std::fputs(table.c_str(), stdout);
      if (!out.empty()) std::printf("wrote report to %s\n", out.c_str());
    }
    return 0;
  } catch (const mtl::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const mtl::InvariantViolation& e) {
    std::fprintf(stderr, "invariant violation: %s\n", e.what());
    return 3;
  } catch (const mtl::TrainingAbort& e) {
    std::fprintf(stderr, "training aborted: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
