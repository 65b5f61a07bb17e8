#pragma once

#include <array>
#include <string>

#include "mtl/nn.h"

namespace mtl {

enum class AdapterVariant { fpn, pre, post, pre_scalar, pre_vector };
AdapterVariant adapter_variant_from_name(const std::string& s);
const char* adapter_variant_name(AdapterVariant v);

struct AdapterConfig {
  AdapterVariant variant = AdapterVariant::fpn;
  double residual_init = 0.001;
};

struct VisionConfig {
  std::array<int64_t, 4> stage_channels{16, 32, 64, 128};  // C2..C5, strides 4..32
  int blocks_per_stage = 2;
  int gn_groups = 8;
  int64_t fpn_channels = 32;
  AdapterConfig adapter;
  int pool_heads = 4;
};

// Multi-scale backbone outputs x2..x5 at strides 4/8/16/32.
struct FeatureHierarchy {
  Var x2, x3, x4, x5;
};

// FPN outputs, uniform channel count, spatially matching x2..x5.
struct PyramidFeatures {
  Var p2, p3, p4, p5;
};

// Attentional pooling outputs (all rows unit L2 norm).
struct PooledFeature {
  Var prenorm;  // (1+T, C5) before normalization, exposed for oracle tests
  Var global;   // (1, C5)
  Var spatial;  // (T, C5)
};

// (H,W,3) -> (3,H,W)
Tensor hwc_to_chw(const Tensor& img);

void build_backbone(ParamStore& ps, const VisionConfig& cfg, Rng& rng);
FeatureHierarchy backbone_forward(Ctx& ctx, const VisionConfig& cfg, Var image_chw);

void build_fpn(ParamStore& ps, const VisionConfig& cfg, Rng& rng);
PyramidFeatures fpn_forward(Ctx& ctx, const VisionConfig& cfg, const FeatureHierarchy& h);

void build_attention_pool(ParamStore& ps, const VisionConfig& cfg, Rng& rng);
// tokens: flattened x5, shape (H5*W5, C5)
PooledFeature attention_pool(Ctx& ctx, const VisionConfig& cfg, Var tokens);

}  // namespace mtl
