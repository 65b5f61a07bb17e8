#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mtl/tensor.h"

namespace mtl {

constexpr int kIgnoreIndex = 255;

enum class TaskId { det = 0, sem = 1, driv = 2 };
constexpr std::array<TaskId, 3> kAllTasks{TaskId::det, TaskId::sem, TaskId::driv};
const char* task_name(TaskId t);
TaskId task_from_name(const std::string& s);

enum class Provenance { ground_truth, pseudo };

struct BoxAnnotation {
  double x1, y1, x2, y2;  // pixel coordinates, x1<x2, y1<y2
  int class_index;
};

// Procedural scene description. Image sides must be divisible by 32 (the
// largest backbone stride). drivable_classes must contain exactly one
// designated background name.
struct SceneSpec {
  int64_t height = 64, width = 64;
  std::pair<int, int> num_objects_range{1, 4};
  std::vector<std::string> detection_classes;
  std::vector<std::string> semantic_classes;
  std::vector<std::string> drivable_classes;
  std::string drivable_background = "background";
  uint64_t rng_seed = 0;

  static SceneSpec desk_default(uint64_t seed = 0);
  void validate() const;  // throws ConfigError
};

struct ImageSample {
  Tensor image;  // (H,W,3) in [0,1]
  std::vector<BoxAnnotation> boxes;
  IntMask semantic_mask;
  IntMask drivable_mask;
  std::array<bool, 3> availability{false, false, false};   // det, sem, driv
  std::array<Provenance, 3> provenance{Provenance::ground_truth, Provenance::ground_truth,
                                       Provenance::ground_truth};

  bool available(TaskId t) const { return availability[static_cast<size_t>(t)]; }
  void set_available(TaskId t, bool v) { availability[static_cast<size_t>(t)] = v; }
  Provenance prov(TaskId t) const { return provenance[static_cast<size_t>(t)]; }
  void set_prov(TaskId t, Provenance p) { provenance[static_cast<size_t>(t)] = p; }
};

enum class SettingKind { disjoint_normal, disjoint_balance, full };
SettingKind setting_from_name(const std::string& s);
const char* setting_name(SettingKind k);

struct DatasetSetting {
  SettingKind kind = SettingKind::full;
  // labeled-image counts per task, indexed by TaskId (det, sem, driv)
  std::array<int, 3> counts{0, 0, 0};

  void validate() const;  // ratio/equality checks for disjoint kinds
};

struct PartialDataset {
  SceneSpec spec;
  std::vector<ImageSample> samples;

  std::array<int, 3> labeled_counts() const;
  std::vector<int> indices_with(TaskId t) const;
};

// Deterministic fully-annotated scene for (spec.rng_seed, index). The layout
// and object streams are independent, so the background of a scene does not
// depend on how many objects were drawn.
ImageSample generate_scene(const SceneSpec& spec, int index);

// Carves `samples` into one of the three label-scarcity settings. Disjoint
// kinds keep exactly sum(counts) images, each retaining one task's
// annotations; `full` keeps everything.
PartialDataset split_setting(const SceneSpec& spec, std::vector<ImageSample> samples,
                             const DatasetSetting& setting, uint64_t seed);

// Configured class-name list for a task; order defines class indices.
const std::vector<std::string>& class_vocabulary(const SceneSpec& spec, TaskId task);

// Internal rasterizer, exposed for oracle tests: paints box annotations (in
// order) onto a semantic mask.
void paint_boxes(IntMask& mask, const std::vector<BoxAnnotation>& boxes,
                 const std::vector<int>& det_to_sem);
// Mapping from detection class index to semantic class index.
std::vector<int> det_to_sem_map(const SceneSpec& spec);

}  // namespace mtl
