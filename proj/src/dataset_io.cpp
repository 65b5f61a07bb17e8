#include "mtl/dataset_io.h"

#include <filesystem>

#include <json.hpp>

#include "mtl/checkpoint.h"
#include "mtl/error.h"

namespace mtl {

using json = nlohmann::ordered_json;

json scene_spec_to_json(const SceneSpec& s) {
  json j;
  j["image_size"] = {s.height, s.width};
  j["num_objects_range"] = {s.num_objects_range.first, s.num_objects_range.second};
  j["detection_classes"] = s.detection_classes;
  j["semantic_classes"] = s.semantic_classes;
  j["drivable_classes"] = s.drivable_classes;
  j["drivable_background"] = s.drivable_background;
  j["rng_seed"] = s.rng_seed;
  return j;
}

SceneSpec scene_spec_from_json(const nlohmann::json& j) {

  SceneSpec s;
  s.height = j.at("image_size")[0];
  s.width = j.at("image_size")[1];
  s.num_objects_range = {j.at("num_objects_range")[0], j.at("num_objects_range")[1]};
  s.detection_classes = j.at("detection_classes").get<std::vector<std::string>>();
  s.semantic_classes = j.at("semantic_classes").get<std::vector<std::string>>();
  s.drivable_classes = j.at("drivable_classes").get<std::vector<std::string>>();
  s.drivable_background = j.at("drivable_background");
  s.rng_seed = j.at("rng_seed");
  return s;
}

namespace {

Tensor mask_to_tensor(const IntMask& m) {
  Tensor t({m.h, m.w});
  for (size_t i = 0; i < m.data.size(); ++i) t.data[i] = static_cast<double>(m.data[i]);
  return t;
}

IntMask tensor_to_mask(const Tensor& t) {
  IntMask m(t.dim(0), t.dim(1));
  for (size_t i = 0; i < t.data.size(); ++i) m.data[i] = static_cast<int32_t>(t.data[i]);
  return m;
}

const char* prov_name(Provenance p) {
  return p == Provenance::ground_truth ? "ground_truth" : "pseudo";
}

Provenance prov_from(const std::string& s) {
  if (s == "ground_truth") return Provenance::ground_truth;
  if (s == "pseudo") return Provenance::pseudo;
  throw ConfigError("bad provenance: " + s);
}

}  // namespace

void save_dataset(const PartialDataset& ds, const std::string& dir,
                  const std::array<std::string, 3>& teacher_digests) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "images");

  json manifest;
  manifest["format"] = "mtl-dataset-v1";
  manifest["spec"] = scene_spec_to_json(ds.spec);
  json images = json::array();
  for (size_t i = 0; i < ds.samples.size(); ++i) {
    const ImageSample& s = ds.samples[i];
    char name[32];
    std::snprintf(name, sizeof(name), "images/%06zu.bin", i);

    std::map<std::string, Tensor> tensors;
    tensors["image"] = s.image;
    if (s.available(TaskId::det)) {
      Tensor boxes({static_cast<int64_t>(s.boxes.size()), 5});
      for (size_t b = 0; b < s.boxes.size(); ++b) {
        boxes.data[b * 5 + 0] = s.boxes[b].x1;
        boxes.data[b * 5 + 1] = s.boxes[b].y1;
        boxes.data[b * 5 + 2] = s.boxes[b].x2;
        boxes.data[b * 5 + 3] = s.boxes[b].y2;
        boxes.data[b * 5 + 4] = static_cast<double>(s.boxes[b].class_index);
      }
      tensors["boxes"] = std::move(boxes);
    }
    if (s.available(TaskId::sem)) tensors["semantic_mask"] = mask_to_tensor(s.semantic_mask);
    if (s.available(TaskId::driv)) tensors["drivable_mask"] = mask_to_tensor(s.drivable_mask);

    CheckpointMeta meta;
    meta.stage = "dataset";
    save_checkpoint(tensors, meta, (fs::path(dir) / name).string());

    json rec;
    rec["file"] = name;
    rec["availability"] = {{"det", s.available(TaskId::det)},
                           {"sem", s.available(TaskId::sem)},
                           {"driv", s.available(TaskId::driv)}};
    rec["provenance"] = {{"det", prov_name(s.prov(TaskId::det))},
                         {"sem", prov_name(s.prov(TaskId::sem))},
                         {"driv", prov_name(s.prov(TaskId::driv))}};
    json td;
    for (TaskId t : kAllTasks) {
      if (s.available(t) && s.prov(t) == Provenance::pseudo)
        td[task_name(t)] = teacher_digests[static_cast<size_t>(t)];
    }
    rec["teacher_digests"] = td;
    images.push_back(rec);
  }
  manifest["images"] = images;
  atomic_write_file((fs::path(dir) / "manifest.json").string(), manifest.dump(2) + "\n");
}

PartialDataset load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  std::string mpath = (fs::path(dir) / "manifest.json").string();
  check_config(fs::exists(mpath), "dataset manifest not found: " + mpath);
  nlohmann::json manifest = nlohmann::json::parse(read_file(mpath));
  check_config(manifest.value("format", "") == "mtl-dataset-v1",
               "unsupported dataset format in " + mpath);

  PartialDataset ds;
  ds.spec = scene_spec_from_json(manifest.at("spec"));
  for (const auto& rec : manifest.at("images")) {
    std::string file = rec.at("file");
    LoadedCheckpoint ck = load_checkpoint((fs::path(dir) / file).string());
    ImageSample s;
    s.image = ck.tensors.at("image");
    s.availability = {rec.at("availability").at("det").get<bool>(),
                      rec.at("availability").at("sem").get<bool>(),
                      rec.at("availability").at("driv").get<bool>()};
    s.provenance = {prov_from(rec.at("provenance").at("det")),
                    prov_from(rec.at("provenance").at("sem")),
                    prov_from(rec.at("provenance").at("driv"))};
    if (s.available(TaskId::det)) {
      const Tensor& boxes = ck.tensors.at("boxes");
      for (int64_t b = 0; b < boxes.dim(0); ++b) {
        s.boxes.push_back({boxes.data[static_cast<size_t>(b * 5 + 0)],
                           boxes.data[static_cast<size_t>(b * 5 + 1)],
                           boxes.data[static_cast<size_t>(b * 5 + 2)],
                           boxes.data[static_cast<size_t>(b * 5 + 3)],
                           static_cast<int>(boxes.data[static_cast<size_t>(b * 5 + 4)])});
      }
    }
    if (s.available(TaskId::sem)) s.semantic_mask = tensor_to_mask(ck.tensors.at("semantic_mask"));
    if (s.available(TaskId::driv)) s.drivable_mask = tensor_to_mask(ck.tensors.at("drivable_mask"));
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

namespace {

std::map<std::string, DatasetLoader>& loader_registry() {
  static std::map<std::string, DatasetLoader> registry{
      {"mtl", nullptr},       // native format, dispatched below
      {"bdd100k", nullptr},   // declared hooks, no parser shipped
      {"nuimages", nullptr},
  };
  return registry;
}

}  // namespace

void register_dataset_loader(const std::string& format, DatasetLoader loader) {
  loader_registry()[format] = loader;
}

PartialDataset load_dataset_as(const std::string& format, const std::string& dir) {
  auto it = loader_registry().find(format);
  check_config(it != loader_registry().end(), "unknown dataset format: '" + format + "'");
  if (format == "mtl") return load_dataset(dir);
  check_config(it->second != nullptr,
               "no parser shipped for dataset format '" + format +
                   "'; register one with register_dataset_loader()");
  return it->second(dir);
}

std::vector<std::string> dataset_loader_formats() {
  std::vector<std::string> out;
  for (const auto& [name, fn] : loader_registry()) out.push_back(name);
  return out;
}

}  // namespace mtl
