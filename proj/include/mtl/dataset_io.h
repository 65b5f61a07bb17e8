#pragma once

#include <string>

#include <json.hpp>

#include "mtl/synthetic.h"

namespace mtl {

nlohmann::ordered_json scene_spec_to_json(const SceneSpec& s);
SceneSpec scene_spec_from_json(const nlohmann::json& j);

// Dataset directory layout:
//   <dir>/manifest.json          one record per image: availability,
//                                provenance, annotation file path, and the
//                                generating teacher digest for pseudo labels
//   <dir>/images/NNNNNN.bin      per-image tensors in the checkpoint format
//                                (image, boxes, semantic_mask, drivable_mask)
void save_dataset(const PartialDataset& ds, const std::string& dir,
                  const std::array<std::string, 3>& teacher_digests = {"", "", ""});

PartialDataset load_dataset(const std::string& dir);

// Loader registry for external dataset formats. "mtl" (the native directory
// format) is built in; other formats (e.g. "bdd100k", "nuimages") are
// declared hooks with no parser shipped and raise ConfigError until one is
// registered.
using DatasetLoader = PartialDataset (*)(const std::string& dir);
void register_dataset_loader(const std::string& format, DatasetLoader loader);
PartialDataset load_dataset_as(const std::string& format, const std::string& dir);
std::vector<std::string> dataset_loader_formats();

}  // namespace mtl
