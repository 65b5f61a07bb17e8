#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mtl/config.h"

namespace mtl {

// Output root: --out on the CLI, else $MTL_OUT, else ./mtl_out.
std::string output_root();

// Generates train (split per setting) and val (fully labeled) datasets under
// <out>/train and <out>/val.
void generate_datasets(const ExperimentConfig& cfg, const std::string& out_dir);

// Toy pretraining; writes a backbone-only checkpoint.
void pretrain_to_file(const ExperimentConfig& cfg, PretrainKind kind, uint64_t seed,
                      const std::string& out_path);

// Trains the three teachers on the train split and writes teacher checkpoints
// plus the pseudo-merged dataset under <out>/teachers and <out>/merged.
void teach(const ExperimentConfig& cfg, const std::string& data_dir,
           const std::string& pretrain_ckpt, const std::string& out_dir);

struct RunOutcome {
  EvalResult eval;
  int64_t total_steps = 0;
  std::string metrics_path;
  std::string final_checkpoint;
};

// Full paradigm pipeline: load data (+merged for self-training), build the
// student, load the pretrained backbone, run the stages, evaluate on val,
// write metrics.json / steps.jsonl / final.ckpt into out_dir.
RunOutcome run_pipeline(const ExperimentConfig& cfg, Paradigm paradigm,
                        const std::string& data_dir, const std::string& pretrain_ckpt,
                        uint64_t seed, const std::string& out_dir);

// Single stages exposed as CLI verbs; init_ckpt may be partial.
void run_single_stage(const ExperimentConfig& cfg, const std::string& stage,
                      const std::string& data_dir, const std::string& init_ckpt, uint64_t seed,
                      const std::string& out_ckpt, const std::string& log_path);

// Evaluates a checkpoint on <data_dir> (a dataset directory) and writes a
// metrics file.
EvalResult evaluate_checkpoint(const ExperimentConfig& cfg, const std::string& ckpt_path,
                               const std::string& data_dir, const std::string& metrics_out);

// Loss-weight sweep: one independent OS process per grid point.
struct SweepSpec {
  double lo = 0.1, hi = 1.0, step = 0.1;
  std::vector<std::string> axes{"det", "sem", "driv"};
  int jobs = 1;
};

// lo, lo+step, ..., hi inclusive (fp-safe endpoint handling).
std::vector<double> sweep_grid_points(double lo, double hi, double step);
int run_sweep(const ExperimentConfig& cfg, const SweepSpec& sweep, const std::string& config_path,
              const std::string& data_dir, const std::string& pretrain_ckpt,
              const std::string& out_dir, const std::string& self_exe);

// Report: aggregates metrics.json files into an aligned table (returned) and
// a machine-readable JSON written next to it.
std::string report(const std::vector<std::string>& metrics_files, const std::string& json_out);

}  // namespace mtl
