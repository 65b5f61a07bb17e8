#include "mtl/synthetic.h"

#include <algorithm>
#include <cmath>
#include <set>

#include "mtl/error.h"
#include "mtl/rng.h"

namespace mtl {

const char* task_name(TaskId t) {
  switch (t) {
    case TaskId::det: return "det";
    case TaskId::sem: return "sem";
    case TaskId::driv: return "driv";
  }
  return "?";
}

TaskId task_from_name(const std::string& s) {
  if (s == "det") return TaskId::det;
  if (s == "sem") return TaskId::sem;
  if (s == "driv") return TaskId::driv;
  throw ConfigError("unknown task id: '" + s + "' (expected det|sem|driv)");
}

SettingKind setting_from_name(const std::string& s) {
  if (s == "disjoint_normal") return SettingKind::disjoint_normal;
  if (s == "disjoint_balance") return SettingKind::disjoint_balance;
  if (s == "full") return SettingKind::full;
  throw ConfigError("unknown setting kind: '" + s + "'");
}

const char* setting_name(SettingKind k) {
  switch (k) {
    case SettingKind::disjoint_normal: return "disjoint_normal";
    case SettingKind::disjoint_balance: return "disjoint_balance";
    case SettingKind::full: return "full";
  }
  return "?";
}

SceneSpec SceneSpec::desk_default(uint64_t seed) {
  SceneSpec s;
  s.height = 64;
  s.width = 64;
  s.num_objects_range = {1, 4};
  s.semantic_classes = {"road", "sky",        "building",   "car",
                        "truck", "bus",       "pedestrian", "traffic sign"};
  s.detection_classes = {"car", "truck", "bus", "pedestrian", "traffic sign", "building"};
  s.drivable_classes = {"directly drivable", "alternatively drivable", "background"};
  s.drivable_background = "background";
  s.rng_seed = seed;
  return s;
}

namespace {

void check_list(const std::vector<std::string>& v, const std::string& what) {
  check_config(!v.empty(), what + " class list is empty");
  std::set<std::string> seen(v.begin(), v.end());
  check_config(seen.size() == v.size(), what + " class list has duplicates");
}

}  // namespace

void SceneSpec::validate() const {
  check_config(height % 32 == 0 && width % 32 == 0,
               "image size must be divisible by 32, got " + std::to_string(height) + "x" +
                   std::to_string(width));
  check_config(num_objects_range.first >= 0 &&
                   num_objects_range.second >= num_objects_range.first,
               "invalid num_objects_range");
  check_list(detection_classes, "detection");
  check_list(semantic_classes, "semantic");
  check_list(drivable_classes, "drivable");
  int bg = 0;
  for (const auto& c : drivable_classes)
    if (c == drivable_background) ++bg;
  check_config(bg == 1, "drivable_classes must contain exactly one '" + drivable_background +
                            "' entry");
  for (const auto& c : detection_classes)
    check_config(std::find(semantic_classes.begin(), semantic_classes.end(), c) !=
                     semantic_classes.end(),
                 "detection class '" + c + "' has no semantic counterpart");
}

void DatasetSetting::validate() const {
  int det = counts[0], sem = counts[1], driv = counts[2];
  switch (kind) {
    case SettingKind::disjoint_normal:
      check_config(det > 0 && sem > 0 && driv > 0, "disjoint_normal: counts must be positive");
      check_config(driv == 2 * det && det * 7 == sem * 10,
                   "disjoint_normal counts must preserve the 20:10:7 driv:det:sem ratio");
      break;
    case SettingKind::disjoint_balance:
      check_config(det > 0 && det == sem && sem == driv,
                   "disjoint_balance counts must be equal and positive");
      break;
    case SettingKind::full:
      break;
  }
}

const std::vector<std::string>& class_vocabulary(const SceneSpec& spec, TaskId task) {
  switch (task) {
    case TaskId::det: return spec.detection_classes;
    case TaskId::sem: return spec.semantic_classes;
    case TaskId::driv: return spec.drivable_classes;
  }
  throw ConfigError("unknown task id");
}

std::vector<int> det_to_sem_map(const SceneSpec& spec) {
  std::vector<int> m(spec.detection_classes.size());
  for (size_t i = 0; i < spec.detection_classes.size(); ++i) {
    auto it = std::find(spec.semantic_classes.begin(), spec.semantic_classes.end(),
                        spec.detection_classes[i]);
    check_config(it != spec.semantic_classes.end(),
                 "detection class without semantic counterpart");
    m[i] = static_cast<int>(it - spec.semantic_classes.begin());
  }
  return m;
}

void paint_boxes(IntMask& mask, const std::vector<BoxAnnotation>& boxes,
                 const std::vector<int>& det_to_sem) {
  for (const auto& b : boxes) {
    int x1 = static_cast<int>(b.x1), y1 = static_cast<int>(b.y1);
    int x2 = static_cast<int>(b.x2), y2 = static_cast<int>(b.y2);
    for (int y = y1; y < y2; ++y)
      for (int x = x1; x < x2; ++x)
        mask.at(y, x) = det_to_sem[static_cast<size_t>(b.class_index)];
  }
}

namespace {

struct Rgb {
  double r, g, b;
};

// Deterministic class palette: golden-ratio hue stepping through HSV.
Rgb class_color(int index) {
  double hue = std::fmod(0.13 + 0.61803398875 * index, 1.0) * 6.0;
  double s = 0.55, v = 0.82;
  int i = static_cast<int>(hue);
  double f = hue - i;
  double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (i % 6) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

int sem_index(const SceneSpec& spec, const std::string& name, int fallback) {
  auto it = std::find(spec.semantic_classes.begin(), spec.semantic_classes.end(), name);
  return it == spec.semantic_classes.end() ? fallback
                                           : static_cast<int>(it - spec.semantic_classes.begin());
}

void fill_rect(IntMask& m, int y1, int y2, int x1, int x2, int v) {
  for (int y = y1; y < y2; ++y)
    for (int x = x1; x < x2; ++x) m.at(y, x) = v;
}

struct SizeProfile {
  double wlo, whi, hlo, hhi;  // fractions of image height
};

SizeProfile size_profile(const std::string& cls) {
  if (cls == "pedestrian") return {0.05, 0.10, 0.14, 0.24};
  if (cls == "traffic sign") return {0.06, 0.11, 0.06, 0.11};
  if (cls == "building") return {0.16, 0.30, 0.16, 0.26};
  if (cls == "truck" || cls == "bus") return {0.16, 0.28, 0.10, 0.17};
  if (cls == "car") return {0.12, 0.24, 0.08, 0.14};
  return {0.09, 0.22, 0.09, 0.19};
}

}  // namespace

ImageSample generate_scene(const SceneSpec& spec, int index) {
  spec.validate();
  check_config(index >= 0, "generate_scene: negative index");
  const int64_t H = spec.height, W = spec.width;
  uint64_t base = mix_seed(spec.rng_seed, static_cast<uint64_t>(index));
  Rng layout(mix_seed(base, "layout"));
  Rng objects(mix_seed(base, "objects"));
  Rng noise(mix_seed(base, "noise"));

  ImageSample s;
  s.image = Tensor({H, W, 3});
  s.semantic_mask = IntMask(H, W);
  s.drivable_mask = IntMask(H, W);
  s.availability = {true, true, true};

  // -- layout stream: horizon, building strip, road band, lanes
  int horizon = static_cast<int>(std::floor(H * layout.uniform(0.30, 0.45)));
  int road_top = static_cast<int>(std::floor(H * layout.uniform(0.55, 0.70)));
  int sky = sem_index(spec, "sky", 1 % static_cast<int>(spec.semantic_classes.size()));
  int building = sem_index(spec, "building", 2 % static_cast<int>(spec.semantic_classes.size()));
  int road = sem_index(spec, "road", 0);

  fill_rect(s.semantic_mask, 0, horizon, 0, static_cast<int>(W), sky);
  fill_rect(s.semantic_mask, horizon, road_top, 0, static_cast<int>(W), building);
  fill_rect(s.semantic_mask, road_top, static_cast<int>(H), 0, static_cast<int>(W), road);

  // drivable lanes: two vertical strips inside the road band, rest background
  int bg_driv = 0;
  for (size_t i = 0; i < spec.drivable_classes.size(); ++i)
    if (spec.drivable_classes[i] == spec.drivable_background) bg_driv = static_cast<int>(i);
  for (auto& v : s.drivable_mask.data) v = bg_driv;
  int lane_w = static_cast<int>(std::floor(W * layout.uniform(0.18, 0.30)));
  int direct_x = static_cast<int>(std::floor(W * layout.uniform(0.10, 0.40)));
  int alt_x = direct_x + lane_w;
  int direct_cls = 0, alt_cls = 1;
  fill_rect(s.drivable_mask, road_top, static_cast<int>(H), direct_x,
            std::min<int>(direct_x + lane_w, static_cast<int>(W)), direct_cls);
  fill_rect(s.drivable_mask, road_top, static_cast<int>(H), alt_x,
            std::min<int>(alt_x + lane_w, static_cast<int>(W)), alt_cls);

  // building strip texture: vertical blocks alternate brightness
  std::vector<double> block_shade(static_cast<size_t>(W), 1.0);
  {
    int x = 0;
    while (x < W) {
      int bw = static_cast<int>(layout.uniform_int(6, 14));
      double shade = layout.uniform(0.75, 1.1);
      for (int i = x; i < std::min<int>(x + bw, static_cast<int>(W)); ++i)
        block_shade[static_cast<size_t>(i)] = shade;
      x += bw;
    }
  }

  // -- objects stream: non-overlapping rectangles over the strip/road area
  int n_target = static_cast<int>(
      objects.uniform_int(spec.num_objects_range.first, spec.num_objects_range.second));
  std::vector<int> d2s = det_to_sem_map(spec);
  for (int k = 0; k < n_target; ++k) {
    int cls = static_cast<int>(
        objects.uniform_int(0, static_cast<int64_t>(spec.detection_classes.size()) - 1));
    SizeProfile prof = size_profile(spec.detection_classes[static_cast<size_t>(cls)]);
    bool placed = false;
    for (int attempt = 0; attempt < 40 && !placed; ++attempt) {
      int bw = std::max<int>(2, static_cast<int>(std::floor(H * objects.uniform(prof.wlo, prof.whi))));
      int bh = std::max<int>(2, static_cast<int>(std::floor(H * objects.uniform(prof.hlo, prof.hhi))));
      if (bw >= W || bh >= H) continue;
      int y1 = static_cast<int>(objects.uniform_int(
          horizon, std::max<int64_t>(horizon, H - bh - 1)));
      int x1 = static_cast<int>(objects.uniform_int(0, W - bw - 1));
      int x2 = x1 + bw, y2 = y1 + bh;
      bool overlap = false;
      for (const auto& b : s.boxes) {
        if (x1 < b.x2 && b.x1 < x2 && y1 < b.y2 && b.y1 < y2) {
          overlap = true;
          break;
        }
      }
      if (overlap) continue;
      s.boxes.push_back({static_cast<double>(x1), static_cast<double>(y1),
                         static_cast<double>(x2), static_cast<double>(y2), cls});
      placed = true;
    }
  }
  paint_boxes(s.semantic_mask, s.boxes, d2s);

  // per-object brightness (one draw per box, in order)
  std::vector<double> obj_shade(s.boxes.size());
  for (auto& v : obj_shade) v = objects.uniform(0.75, 1.05);

  // -- render image from the masks
  for (int64_t y = 0; y < H; ++y) {
    for (int64_t x = 0; x < W; ++x) {
      int cls = s.semantic_mask.at(y, x);
      Rgb c = class_color(cls);
      double shade = 1.0;
      if (cls == building && y >= horizon && y < road_top) shade = block_shade[static_cast<size_t>(x)];
      if (cls == road) {
        int d = s.drivable_mask.at(y, x);
        if (d == direct_cls) shade = 1.32;
        else if (d == alt_cls) shade = 0.62;
      }
      // object pixels use the object's own shade
      for (size_t bi = 0; bi < s.boxes.size(); ++bi) {
        const auto& b = s.boxes[bi];
        if (x >= b.x1 && x < b.x2 && y >= b.y1 && y < b.y2 &&
            d2s[static_cast<size_t>(b.class_index)] == cls)
          shade = obj_shade[bi];
      }
      double nr = noise.uniform(-0.03, 0.03);
      double ng = noise.uniform(-0.03, 0.03);
      double nb = noise.uniform(-0.03, 0.03);
      auto px = [&](double v, double n) { return std::clamp(v * shade + n, 0.0, 1.0); };
      s.image.data[static_cast<size_t>((y * W + x) * 3 + 0)] = px(c.r, nr);
      s.image.data[static_cast<size_t>((y * W + x) * 3 + 1)] = px(c.g, ng);
      s.image.data[static_cast<size_t>((y * W + x) * 3 + 2)] = px(c.b, nb);
    }
  }
  return s;
}

std::array<int, 3> PartialDataset::labeled_counts() const {
  std::array<int, 3> c{0, 0, 0};
  for (const auto& s : samples)
    for (size_t t = 0; t < 3; ++t)
      if (s.availability[t]) ++c[t];
  return c;
}

std::vector<int> PartialDataset::indices_with(TaskId t) const {
  std::vector<int> out;
  for (size_t i = 0; i < samples.size(); ++i)
    if (samples[i].available(t)) out.push_back(static_cast<int>(i));
  return out;
}

namespace {

void strip_task(ImageSample& s, TaskId t) {
  switch (t) {
    case TaskId::det: s.boxes.clear(); break;
    case TaskId::sem: s.semantic_mask = IntMask(); break;
    case TaskId::driv: s.drivable_mask = IntMask(); break;
  }
  s.set_available(t, false);
}

}  // namespace

PartialDataset split_setting(const SceneSpec& spec, std::vector<ImageSample> samples,
                             const DatasetSetting& setting, uint64_t seed) {
  setting.validate();
  PartialDataset out;
  out.spec = spec;
  if (setting.kind == SettingKind::full) {
    out.samples = std::move(samples);
    return out;
  }
  int64_t need = static_cast<int64_t>(setting.counts[0]) + setting.counts[1] + setting.counts[2];
  check_config(static_cast<int64_t>(samples.size()) >= need,
               "split_setting: need " + std::to_string(need) + " samples, have " +
                   std::to_string(samples.size()));
  std::vector<int> order(samples.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  Rng rng(mix_seed(seed, "split"));
  rng.shuffle(order);

  int64_t cursor = 0;
  for (TaskId keep : kAllTasks) {
    int count = setting.counts[static_cast<size_t>(keep)];
    for (int i = 0; i < count; ++i) {
      ImageSample s = std::move(samples[static_cast<size_t>(order[static_cast<size_t>(cursor++)])]);
      for (TaskId t : kAllTasks)
        if (t != keep) strip_task(s, t);
      out.samples.push_back(std::move(s));
    }
  }
  return out;
}

}  // namespace mtl
