#include "mtl/pipeline.h"

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "mtl/checkpoint.h"
#include "mtl/dataset_io.h"
#include "mtl/digest.h"
#include "mtl/error.h"

namespace mtl {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

std::string output_root() {
  const char* env = std::getenv("MTL_OUT");
  return env && *env ? env : "./mtl_out";
}

void generate_datasets(const ExperimentConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  std::vector<ImageSample> train;
  for (int i = 0; i < cfg.train_images; ++i) train.push_back(generate_scene(cfg.scene, i));
  PartialDataset train_ds = split_setting(cfg.scene, std::move(train), cfg.setting, cfg.split_seed);
  save_dataset(train_ds, (fs::path(out_dir) / "train").string());

  PartialDataset val;
  val.spec = cfg.scene;
  for (int i = 0; i < cfg.val_images; ++i)
    val.samples.push_back(generate_scene(cfg.scene, cfg.train_images + i));
  save_dataset(val, (fs::path(out_dir) / "val").string());
}

void pretrain_to_file(const ExperimentConfig& cfg, PretrainKind kind, uint64_t seed,
                      const std::string& out_path) {
  PretrainResult r = toy_pretrain(kind, seed, cfg.scene, cfg.model.vision, cfg.pretrain);
  CheckpointMeta meta;
  meta.stage = r.stage_tag;
  meta.config_digest = cfg.digest();
  save_checkpoint(r.backbone, meta, out_path);
}

namespace {

PartialDataset load_dataset_checked(const std::string& dir) {
  check_config(fs::exists(fs::path(dir) / "manifest.json"),
               "dataset not found: missing " + (fs::path(dir) / "manifest.json").string());
  return load_dataset(dir);
}

std::map<std::string, Tensor> load_backbone_tensors(const std::string& ckpt_path) {
  LoadedCheckpoint ck = load_checkpoint(ckpt_path);
  std::map<std::string, Tensor> out;
  for (auto& [name, t] : ck.tensors)
    if (name.rfind("backbone.", 0) == 0) out.emplace(name, std::move(t));
  check_config(!out.empty(), "checkpoint has no backbone tensors: " + ckpt_path);
  return out;
}

json metric_or_null(const std::optional<double>& v) {
  return v ? json(*v) : json(nullptr);
}

json eval_to_json(const EvalResult& e) {
  json m;
  m["miou_ss"] = metric_or_null(e.sem.miou);
  m["pacc_ss"] = metric_or_null(e.sem.pacc);
  m["miou_da"] = metric_or_null(e.driv.miou);
  m["pacc_da"] = metric_or_null(e.driv.pacc);
  m["map"] = metric_or_null(e.det.map);
  m["ap50"] = metric_or_null(e.det.ap50);
  m["ap75"] = metric_or_null(e.det.ap75);
  m["mean_over_tasks"] = metric_or_null(e.mean_over_tasks());
  return m;
}

std::string method_string(const ExperimentConfig& cfg, Paradigm paradigm) {
  std::ostringstream os;
  os << paradigm_name(paradigm);
  if (cfg.model.language.enabled)
    os << "+" << prompt_mode_name(cfg.model.language.prompt_mode);
  os << "(" << cfg.budget.adapt_epochs << "," << cfg.budget.finetune_epochs << ")";
  char w[64];
  std::snprintf(w, sizeof(w), " w(%g,%g,%g)", cfg.weights.det, cfg.weights.sem, cfg.weights.driv);
  os << w;
  return os.str();
}

}  // namespace

RunOutcome run_pipeline(const ExperimentConfig& cfg, Paradigm paradigm,
                        const std::string& data_dir, const std::string& pretrain_ckpt,
                        uint64_t seed, const std::string& out_dir) {
  cfg.validate();
  std::string train_dir = (fs::path(data_dir) / "train").string();
  if (cfg.schedule == ScheduleKind::self_training) {
    std::string merged = (fs::path(data_dir) / "merged").string();
    check_config(fs::exists(fs::path(merged) / "manifest.json"),
                 "self_training schedule needs the merged dataset: missing " +
                     (fs::path(merged) / "manifest.json").string() + " (run `teach` first)");
    train_dir = merged;
  }
  PartialDataset train = load_dataset_checked(train_dir);
  PartialDataset val = load_dataset_checked((fs::path(data_dir) / "val").string());

  MultiTaskModel model = MultiTaskModel::build(cfg.model, cfg.scene, seed);
  std::string pretrain_digest;
  if (!pretrain_ckpt.empty()) {
    LoadedCheckpoint ck = load_checkpoint(pretrain_ckpt);
    load_into(model.params, ck);
    pretrain_digest = string_digest(read_file(pretrain_ckpt));
  }

  fs::create_directories(out_dir);
  std::ofstream steps_log((fs::path(out_dir) / "steps.jsonl").string());
  ParadigmOptions opts = cfg.paradigm_options(seed);
  opts.train.step_log = &steps_log;
  ParadigmResult pr = run_paradigm(model, train, paradigm, opts);
  steps_log.close();

  RunOutcome out;
  out.eval = evaluate_model(model, val);
  out.total_steps = pr.total_steps;

  CheckpointMeta meta;
  meta.stage = paradigm == Paradigm::pretrain_finetune ? "finetune" : "adapt+finetune";
  meta.config_digest = cfg.digest();
  if (!pr.stages.empty())
    meta.frozen_digest =
        string_digest(pr.stages.back().freeze.digest_before + pr.stages.back().freeze.digest_after);
  out.final_checkpoint = (fs::path(out_dir) / "final.ckpt").string();
  save_params(model.params, meta, out.final_checkpoint);

  json doc;
  doc["format"] = "mtl-metrics-v1";
  doc["method"] = method_string(cfg, paradigm);
  doc["paradigm"] = paradigm_name(paradigm);
  doc["prompt_mode"] =
      cfg.model.language.enabled ? prompt_mode_name(cfg.model.language.prompt_mode) : "none";
  doc["budget"] = {cfg.budget.adapt_epochs, cfg.budget.finetune_epochs};
  doc["setting"] = setting_name(cfg.setting.kind);
  doc["schedule"] = schedule_name(cfg.schedule);
  doc["seed"] = seed;
  doc["config_digest"] = cfg.digest();
  doc["scaffold_digest"] = cfg.scaffold_digest();
  doc["pretrain_digest"] = pretrain_digest;
  doc["final_checkpoint_digest"] = string_digest(read_file(out.final_checkpoint));
  doc["total_steps"] = pr.total_steps;
  doc["metrics"] = eval_to_json(out.eval);
  out.metrics_path = (fs::path(out_dir) / "metrics.json").string();
  atomic_write_file(out.metrics_path, doc.dump(2) + "\n");
  return out;
}

void teach(const ExperimentConfig& cfg, const std::string& data_dir,
           const std::string& pretrain_ckpt, const std::string& out_dir) {
  cfg.validate();
  PartialDataset train = load_dataset_checked((fs::path(data_dir) / "train").string());
  std::map<std::string, Tensor> backbone;
  if (!pretrain_ckpt.empty()) backbone = load_backbone_tensors(pretrain_ckpt);

  std::array<const TeacherModel*, 3> teacher_ptrs{nullptr, nullptr, nullptr};
  std::vector<TeacherModel> teachers;
  teachers.reserve(3);
  for (TaskId t : kAllTasks) {
    PartialDataset subset;
    subset.spec = train.spec;
    for (const auto& s : train.samples)
      if (s.available(t)) subset.samples.push_back(s);
    check_config(!subset.samples.empty(),
                 std::string("teach: no images labeled for task ") + task_name(t));
    TeacherTrainConfig tcfg = cfg.teacher;
    teachers.push_back(train_teacher(t, cfg.model, subset, tcfg,
                                     backbone.empty() ? nullptr : &backbone));
    CheckpointMeta meta;
    meta.stage = std::string("teacher:") + task_name(t);
    meta.config_digest = cfg.digest();
    save_params(teachers.back().model.params, meta,
                (fs::path(out_dir) / "teachers" / (std::string(task_name(t)) + ".ckpt")).string());
    teacher_ptrs[static_cast<size_t>(t)] = &teachers.back();
  }
  MergedDataset merged = merge_labels(train, *teacher_ptrs[0], *teacher_ptrs[1], *teacher_ptrs[2],
                                      cfg.pseudo);
  save_dataset(merged.data, (fs::path(out_dir) / "merged").string(), merged.teacher_digests);
}

void run_single_stage(const ExperimentConfig& cfg, const std::string& stage,
                      const std::string& data_dir, const std::string& init_ckpt, uint64_t seed,
                      const std::string& out_ckpt, const std::string& log_path) {
  cfg.validate();
  check_config(stage == "adapt" || stage == "finetune", "stage must be adapt or finetune");
  std::string train_dir = (fs::path(data_dir) / "train").string();
  if (cfg.schedule == ScheduleKind::self_training &&
      fs::exists(fs::path(data_dir) / "merged" / "manifest.json"))
    train_dir = (fs::path(data_dir) / "merged").string();
  PartialDataset train = load_dataset_checked(train_dir);

  MultiTaskModel model = MultiTaskModel::build(cfg.model, cfg.scene, seed);
  if (!init_ckpt.empty()) {
    LoadedCheckpoint ck = load_checkpoint(init_ckpt);
    LoadReport rep = load_into(model.params, ck);
    std::fprintf(stderr, "[mtl] %s\n", rep.summary().c_str());
  }

  StageConfig sc;
  sc.stage = stage;
  sc.epochs = stage == "adapt" ? cfg.budget.adapt_epochs : cfg.budget.finetune_epochs;
  sc.learning_rate = stage == "adapt" ? cfg.adapt_lr : cfg.finetune_lr;
  sc.weight_decay = cfg.weight_decay;
  sc.warmup_iters = cfg.warmup_iters;
  sc.warmup_factor = cfg.warmup_factor;
  sc.trainable = stage == "adapt" ? model.trainable_adapt() : model.trainable_finetune();

  TrainOptions topts;
  topts.weights = cfg.weights;
  topts.batch_size = cfg.batch_size;
  topts.grad_clip_norm = cfg.grad_clip_norm;
  topts.seed = mix_seed(seed, stage);
  std::ofstream log_stream;
  if (!log_path.empty()) {
    log_stream.open(log_path);
    topts.step_log = &log_stream;
  }
  StageResult sr = run_stage(model, train, sc, cfg.schedule, topts);

  CheckpointMeta meta;
  meta.stage = stage;
  meta.config_digest = cfg.digest();
  meta.frozen_digest = string_digest(sr.freeze.digest_before + sr.freeze.digest_after);
  save_params(model.params, meta, out_ckpt);
}

EvalResult evaluate_checkpoint(const ExperimentConfig& cfg, const std::string& ckpt_path,
                               const std::string& data_dir, const std::string& metrics_out) {
  cfg.validate();
  PartialDataset data = load_dataset_checked(data_dir);
  MultiTaskModel model = MultiTaskModel::build(cfg.model, cfg.scene, 0);
  LoadedCheckpoint ck = load_checkpoint(ckpt_path);
  load_into(model.params, ck);
  EvalResult eval = evaluate_model(model, data);
  if (!metrics_out.empty()) {
    json doc;
    doc["format"] = "mtl-eval-v1";
    doc["checkpoint_digest"] = string_digest(read_file(ckpt_path));
    doc["config_digest"] = cfg.digest();
    doc["metrics"] = eval_to_json(eval);
    atomic_write_file(metrics_out, doc.dump(2) + "\n");
  }
  return eval;
}

// ---------------------------------------------------------------------------
// sweep: independent OS processes, one per grid point

namespace {

int wait_one() {
  int status = 0;
  waitpid(-1, &status, 0);
  if (WIFEXITED(status)) return WEXITSTATUS(status);
  return 1;
}

}  // namespace

std::vector<double> sweep_grid_points(double lo, double hi, double step) {
  check_config(step > 0 && lo > 0 && hi >= lo, "bad sweep grid");
  int n = static_cast<int>(std::floor((hi - lo) / step + 1e-6)) + 1;
  std::vector<double> out(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) out[static_cast<size_t>(i)] = lo + step * i;
  return out;
}

int run_sweep(const ExperimentConfig& cfg, const SweepSpec& sweep, const std::string& config_path,
              const std::string& data_dir, const std::string& pretrain_ckpt,
              const std::string& out_dir, const std::string& self_exe) {
  cfg.validate();
  for (const auto& axis : sweep.axes)
    check_config(axis == "det" || axis == "sem" || axis == "driv", "bad sweep axis: " + axis);
  fs::create_directories(out_dir);

  struct Job {
    std::string axis;
    double value;
    std::string out;
  };
  std::vector<Job> jobs;
  for (const auto& axis : sweep.axes) {
    for (double v : sweep_grid_points(sweep.lo, sweep.hi, sweep.step)) {
      std::ostringstream tag;
      tag << "sweep_" << axis << "_" << v;
      jobs.push_back({axis, v, (fs::path(out_dir) / tag.str()).string()});
    }
  }

  int running = 0, failures = 0;
  for (const Job& job : jobs) {
    if (running >= std::max(1, sweep.jobs)) {
      if (wait_one() != 0) ++failures;
      --running;
    }
    pid_t pid = fork();
    check_config(pid >= 0, "fork failed");
    if (pid == 0) {
      std::string weight_arg = job.axis + "=" + std::to_string(job.value);
      std::vector<std::string> args{self_exe, "run",
                                    "--config", config_path,
                                    "--data", data_dir,
                                    "--paradigm", "pretrain_adapt_finetune",
                                    "--seed", std::to_string(cfg.seeds.at(0)),
                                    "--loss-weight", weight_arg,
                                    "--out", job.out};
      if (!pretrain_ckpt.empty()) {
        args.push_back("--pretrain");
        args.push_back(pretrain_ckpt);
      }
      std::vector<char*> argv;
      for (auto& a : args) argv.push_back(a.data());
      argv.push_back(nullptr);
      execv(self_exe.c_str(), argv.data());
      _exit(127);
    }
    ++running;
  }
  while (running > 0) {
    if (wait_one() != 0) ++failures;
    --running;
  }
  return failures == 0 ? 0 : 1;
}

// ---------------------------------------------------------------------------
// report

namespace {

struct MetricAgg {
  std::vector<double> values;
  bool any_null = false;
  void add(const nlohmann::json& v) {
    if (v.is_null()) any_null = true;
    else values.push_back(v.get<double>());
  }
  std::string format() const {
    if (any_null || values.empty()) return "--";
    double mean = 0;
    for (double v : values) mean += v;
    mean /= static_cast<double>(values.size());
    char buf[64];
    if (values.size() == 1) {
      std::snprintf(buf, sizeof(buf), "%.4f", mean);
      return buf;
    }
    double var = 0;
    for (double v : values) var += (v - mean) * (v - mean);
    var /= static_cast<double>(values.size());
    std::snprintf(buf, sizeof(buf), "%.4f ± %.4f", mean, std::sqrt(var));
    return buf;
  }
  json to_json() const {
    if (any_null || values.empty()) return nullptr;
    double mean = 0;
    for (double v : values) mean += v;
    mean /= static_cast<double>(values.size());
    double var = 0;
    for (double v : values) var += (v - mean) * (v - mean);
    var /= static_cast<double>(values.size());
    json j;
    j["mean"] = mean;
    if (values.size() > 1) j["std"] = std::sqrt(var);
    j["n"] = values.size();
    return j;
  }
};

}  // namespace

std::string report(const std::vector<std::string>& metrics_files, const std::string& json_out) {
  check_config(!metrics_files.empty(), "report: no metrics files given");
  static const std::vector<std::string> kMetrics{"miou_ss", "pacc_ss", "miou_da", "pacc_da",
                                                 "map",     "ap50",    "ap75"};
  struct Row {
    std::string setting, schedule;
    std::map<std::string, MetricAgg> agg;
    std::vector<uint64_t> seeds;
  };
  std::map<std::string, Row> rows;  // keyed by method
  std::string scaffold;
  for (const auto& path : metrics_files) {
    nlohmann::json doc;
    try {
      doc = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("cannot parse metrics file " + path + ": " + e.what());
    }
    check_config(doc.value("format", "") == "mtl-metrics-v1",
                 "not a metrics file: " + path);
    std::string sd = doc.at("scaffold_digest");
    if (scaffold.empty()) scaffold = sd;
    check_config(sd == scaffold,
                 "metrics file " + path + " comes from an incompatible configuration");
    Row& row = rows[doc.at("method")];
    row.setting = doc.at("setting");
    row.schedule = doc.at("schedule");
    row.seeds.push_back(doc.at("seed").get<uint64_t>());
    for (const auto& m : kMetrics) row.agg[m].add(doc.at("metrics").at(m));
  }

  // aligned text table
  std::vector<std::string> headers{"method", "setting", "seeds", "mIoU-SS", "pACC-SS",
                                   "mIoU-DA", "pACC-DA", "mAP",   "AP50",   "AP75"};
  std::vector<std::vector<std::string>> cells;
  for (auto& [method, row] : rows) {
    std::vector<std::string> line{method, row.setting, std::to_string(row.seeds.size())};
    for (const auto& m : kMetrics) line.push_back(row.agg[m].format());
    cells.push_back(std::move(line));
  }
  std::vector<size_t> width(headers.size());
  for (size_t c = 0; c < headers.size(); ++c) {
    width[c] = headers[c].size();
    for (const auto& line : cells) width[c] = std::max(width[c], line[c].size());
  }
  std::ostringstream os;
  auto emit_row = [&](const std::vector<std::string>& line) {
    for (size_t c = 0; c < line.size(); ++c) {
      os << (c ? " | " : "");
      os << line[c] << std::string(width[c] - line[c].size(), ' ');
    }
    os << "\n";
  };
  emit_row(headers);
  size_t total = 0;
  for (size_t c = 0; c < width.size(); ++c) total += width[c] + (c ? 3 : 0);
  os << std::string(total, '-') << "\n";
  for (const auto& line : cells) emit_row(line);

  if (!json_out.empty()) {
    json doc;
    doc["format"] = "mtl-report-v1";
    doc["scaffold_digest"] = scaffold;
    json jrows = json::array();
    for (auto& [method, row] : rows) {
      json r;
      r["method"] = method;
      r["setting"] = row.setting;
      r["schedule"] = row.schedule;
      r["num_seeds"] = row.seeds.size();
      for (const auto& m : kMetrics) r[m] = row.agg[m].to_json();
      jrows.push_back(r);
    }
    doc["rows"] = jrows;
    atomic_write_file(json_out, doc.dump(2) + "\n");
  }
  return os.str();
}

}  // namespace mtl
