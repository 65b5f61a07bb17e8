#include "mtl/config.h"

#include "mtl/checkpoint.h"
#include "mtl/dataset_io.h"
#include "mtl/digest.h"
#include "mtl/error.h"

namespace mtl {

namespace {

using json = nlohmann::ordered_json;

template <typename T>
void maybe(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

ExperimentConfig ExperimentConfig::load(const std::string& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("cannot parse config " + path + ": " + e.what());
  }
  return from_json(j);
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  try {
    if (j.contains("dataset")) {
      const auto& d = j.at("dataset");
      if (d.contains("image_size")) {
        c.scene.height = d.at("image_size")[0];
        c.scene.width = d.at("image_size")[1];
      }
      if (d.contains("num_objects_range"))
        c.scene.num_objects_range = {d.at("num_objects_range")[0], d.at("num_objects_range")[1]};
      maybe(d, "detection_classes", c.scene.detection_classes);
      maybe(d, "semantic_classes", c.scene.semantic_classes);
      maybe(d, "drivable_classes", c.scene.drivable_classes);
      maybe(d, "drivable_background", c.scene.drivable_background);
      maybe(d, "rng_seed", c.scene.rng_seed);
      maybe(d, "train_images", c.train_images);
      maybe(d, "val_images", c.val_images);
      maybe(d, "split_seed", c.split_seed);
      if (d.contains("setting")) {
        const auto& s = d.at("setting");
        if (s.contains("kind")) c.setting.kind = setting_from_name(s.at("kind"));
        if (s.contains("counts")) {
          c.setting.counts[0] = s.at("counts").at("det");
          c.setting.counts[1] = s.at("counts").at("sem");
          c.setting.counts[2] = s.at("counts").at("driv");
        }
      }
    }
    if (j.contains("model")) {
      const auto& m = j.at("model");
      if (m.contains("stage_channels")) {
        auto v = m.at("stage_channels").get<std::vector<int64_t>>();
        check_config(v.size() == 4, "model.stage_channels must have 4 entries");
        for (int i = 0; i < 4; ++i) c.model.vision.stage_channels[static_cast<size_t>(i)] = v[static_cast<size_t>(i)];
      }
      maybe(m, "blocks_per_stage", c.model.vision.blocks_per_stage);
      maybe(m, "gn_groups", c.model.vision.gn_groups);
      maybe(m, "fpn_channels", c.model.vision.fpn_channels);
      maybe(m, "pool_heads", c.model.vision.pool_heads);
      if (m.contains("adapter")) {
        const auto& a = m.at("adapter");
        if (a.contains("variant"))
          c.model.vision.adapter.variant = adapter_variant_from_name(a.at("variant"));
        maybe(a, "residual_init", c.model.vision.adapter.residual_init);
      }
      maybe(m, "seg_queries", c.model.heads.seg_queries);
      maybe(m, "seg_decoder_layers", c.model.heads.seg_decoder_layers);
      maybe(m, "seg_heads", c.model.heads.seg_heads);
      maybe(m, "det_proposals", c.model.heads.det_proposals);
      maybe(m, "det_stages", c.model.heads.det_stages);
      maybe(m, "det_hidden", c.model.heads.det_hidden);
      maybe(m, "det_pool_grid", c.model.heads.det_pool_grid);
      maybe(m, "det_dyn_mid", c.model.heads.det_dyn_mid);
    }
    if (j.contains("language")) {
      const auto& l = j.at("language");
      maybe(l, "enabled", c.model.language.enabled);
      if (l.contains("prompt_mode"))
        c.model.language.prompt_mode = prompt_mode_from_name(l.at("prompt_mode"));
      maybe(l, "templates", c.model.language.templates);
      maybe(l, "context_length", c.model.language.context_length);
      maybe(l, "text_dim", c.model.language.text_dim);
      maybe(l, "text_layers", c.model.language.text_layers);
      maybe(l, "text_heads", c.model.language.text_heads);
      maybe(l, "l2v_layers", c.model.language.l2v_layers);
      maybe(l, "l2v_heads", c.model.language.l2v_heads);
      maybe(l, "encoder_seed", c.model.language.encoder_seed);
      maybe(l, "encoder_checkpoint", c.model.language.encoder_checkpoint);
    }
    if (j.contains("training")) {
      const auto& t = j.at("training");
      if (t.contains("budget")) {
        c.budget.adapt_epochs = t.at("budget").at("adapt_epochs");
        c.budget.finetune_epochs = t.at("budget").at("finetune_epochs");
      }
      if (t.contains("schedule")) c.schedule = schedule_from_name(t.at("schedule"));
      if (t.contains("loss_weights")) {
        c.weights.det = t.at("loss_weights").at("det");
        c.weights.sem = t.at("loss_weights").at("sem");
        c.weights.driv = t.at("loss_weights").at("driv");
      }
      maybe(t, "adapt_lr", c.adapt_lr);
      maybe(t, "finetune_lr", c.finetune_lr);
      maybe(t, "weight_decay", c.weight_decay);
      maybe(t, "warmup_iters", c.warmup_iters);
      maybe(t, "warmup_factor", c.warmup_factor);
      maybe(t, "batch_size", c.batch_size);
      maybe(t, "grad_clip_norm", c.grad_clip_norm);
    }
    if (j.contains("pretrain")) {
      const auto& p = j.at("pretrain");
      if (p.contains("kind")) c.pretrain_kind = pretrain_kind_from_name(p.at("kind"));
      maybe(p, "steps", c.pretrain.steps);
      maybe(p, "learning_rate", c.pretrain.learning_rate);
      maybe(p, "batch_images", c.pretrain.batch_images);
      maybe(p, "temperature", c.pretrain.temperature);
      maybe(p, "num_scenes", c.pretrain.num_scenes);
    }
    if (j.contains("teacher")) {
      const auto& t = j.at("teacher");
      maybe(t, "epochs", c.teacher.epochs);
      maybe(t, "learning_rate", c.teacher.learning_rate);
      maybe(t, "weight_decay", c.teacher.weight_decay);
      maybe(t, "warmup_iters", c.teacher.warmup_iters);
      maybe(t, "warmup_factor", c.teacher.warmup_factor);
      maybe(t, "batch_size", c.teacher.batch_size);
      maybe(t, "seed", c.teacher.seed);
    }
    if (j.contains("pseudo")) {
      const auto& p = j.at("pseudo");
      maybe(p, "box_score_threshold", c.pseudo.box_score_threshold);
      maybe(p, "mask_score_threshold", c.pseudo.mask_score_threshold);
    }
    maybe(j, "seeds", c.seeds);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
  c.validate();
  return c;
}

nlohmann::ordered_json ExperimentConfig::to_json() const {
  json j;
  json d = scene_spec_to_json(scene);
  d["train_images"] = train_images;
  d["val_images"] = val_images;
  d["split_seed"] = split_seed;
  d["setting"] = {{"kind", setting_name(setting.kind)},
                  {"counts",
                   {{"det", setting.counts[0]}, {"sem", setting.counts[1]}, {"driv", setting.counts[2]}}}};
  j["dataset"] = d;
  j["model"] = {{"stage_channels", model.vision.stage_channels},
                {"blocks_per_stage", model.vision.blocks_per_stage},
                {"gn_groups", model.vision.gn_groups},
                {"fpn_channels", model.vision.fpn_channels},
                {"pool_heads", model.vision.pool_heads},
                {"adapter",
                 {{"variant", adapter_variant_name(model.vision.adapter.variant)},
                  {"residual_init", model.vision.adapter.residual_init}}},
                {"seg_queries", model.heads.seg_queries},
                {"seg_decoder_layers", model.heads.seg_decoder_layers},
                {"seg_heads", model.heads.seg_heads},
                {"det_proposals", model.heads.det_proposals},
                {"det_stages", model.heads.det_stages},
                {"det_hidden", model.heads.det_hidden},
                {"det_pool_grid", model.heads.det_pool_grid},
                {"det_dyn_mid", model.heads.det_dyn_mid}};
  j["language"] = {{"enabled", model.language.enabled},
                   {"prompt_mode", prompt_mode_name(model.language.prompt_mode)},
                   {"templates", model.language.templates},
                   {"context_length", model.language.context_length},
                   {"text_dim", model.language.text_dim},
                   {"text_layers", model.language.text_layers},
                   {"text_heads", model.language.text_heads},
                   {"l2v_layers", model.language.l2v_layers},
                   {"l2v_heads", model.language.l2v_heads},
                   {"encoder_seed", model.language.encoder_seed},
                   {"encoder_checkpoint", model.language.encoder_checkpoint}};
  j["training"] = {{"budget",
                    {{"adapt_epochs", budget.adapt_epochs}, {"finetune_epochs", budget.finetune_epochs}}},
                   {"schedule", schedule_name(schedule)},
                   {"loss_weights", {{"det", weights.det}, {"sem", weights.sem}, {"driv", weights.driv}}},
                   {"adapt_lr", adapt_lr},
                   {"finetune_lr", finetune_lr},
                   {"weight_decay", weight_decay},
                   {"warmup_iters", warmup_iters},
                   {"warmup_factor", warmup_factor},
                   {"batch_size", batch_size},
                   {"grad_clip_norm", grad_clip_norm}};
  j["pretrain"] = {{"kind", pretrain_kind_name(pretrain_kind)},
                   {"steps", pretrain.steps},
                   {"learning_rate", pretrain.learning_rate},
                   {"batch_images", pretrain.batch_images},
                   {"temperature", pretrain.temperature},
                   {"num_scenes", pretrain.num_scenes}};
  j["teacher"] = {{"epochs", teacher.epochs},
                  {"learning_rate", teacher.learning_rate},
                  {"weight_decay", teacher.weight_decay},
                  {"warmup_iters", teacher.warmup_iters},
                  {"warmup_factor", teacher.warmup_factor},
                  {"batch_size", teacher.batch_size},
                  {"seed", teacher.seed}};
  j["pseudo"] = {{"box_score_threshold", pseudo.box_score_threshold},
                 {"mask_score_threshold", pseudo.mask_score_threshold}};
  j["seeds"] = seeds;
  return j;
}

void ExperimentConfig::validate() const {
  scene.validate();
  setting.validate();
  pseudo.validate();
  check_config(train_images > 0 && val_images > 0, "train/val image counts must be positive");
  if (setting.kind != SettingKind::full) {
    int64_t need = static_cast<int64_t>(setting.counts[0]) + setting.counts[1] + setting.counts[2];
    check_config(need <= train_images,
                 "setting counts need " + std::to_string(need) + " images but train_images is " +
                     std::to_string(train_images));
  }
  check_config(budget.adapt_epochs >= 0 && budget.finetune_epochs >= 0,
               "epoch budget entries must be >= 0");
  check_config(batch_size >= 1, "batch_size must be >= 1");
  check_config(model.heads.det_stages >= 1 && model.heads.det_proposals >= 1 &&
                   model.heads.seg_queries >= 1,
               "head counts must be >= 1");
  check_config(model.vision.fpn_channels % model.vision.gn_groups == 0,
               "fpn_channels must be divisible by gn_groups");
  for (int64_t c : model.vision.stage_channels)
    check_config(c % model.vision.gn_groups == 0,
                 "stage_channels must be divisible by gn_groups");
  check_config(!seeds.empty(), "seeds list is empty");
  check_config(weights.det >= 0 && weights.sem >= 0 && weights.driv >= 0,
               "loss weights must be nonnegative");
  if (model.language.enabled && model.language.prompt_mode == PromptMode::naive_fusion)
    check_config(model.language.text_dim == model.vision.fpn_channels,
                 "naive_fusion requires language.text_dim == model.fpn_channels");
}

std::string ExperimentConfig::digest() const { return string_digest(to_json().dump()); }

std::string ExperimentConfig::scaffold_digest() const {
  json j = to_json();
  j["language"].erase("prompt_mode");
  j["training"].erase("budget");
  j["training"].erase("loss_weights");
  j.erase("seeds");
  return string_digest(j.dump());
}

ParadigmOptions ExperimentConfig::paradigm_options(uint64_t seed) const {
  ParadigmOptions opts;
  opts.budget = budget;
  opts.adapt_lr = adapt_lr;
  opts.finetune_lr = finetune_lr;
  opts.weight_decay = weight_decay;
  opts.warmup_iters = warmup_iters;
  opts.warmup_factor = warmup_factor;
  opts.schedule = schedule;
  opts.train.weights = weights;
  opts.train.batch_size = batch_size;
  opts.train.grad_clip_norm = grad_clip_norm;
  opts.train.seed = seed;
  return opts;
}

}  // namespace mtl
