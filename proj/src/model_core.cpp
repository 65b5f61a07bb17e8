#include "mtl/model_core.h"

#include "mtl/error.h"

namespace mtl {

AdapterVariant adapter_variant_from_name(const std::string& s) {
  if (s == "fpn") return AdapterVariant::fpn;
  if (s == "pre") return AdapterVariant::pre;
  if (s == "post") return AdapterVariant::post;
  if (s == "pre_scalar") return AdapterVariant::pre_scalar;
  if (s == "pre_vector") return AdapterVariant::pre_vector;
  throw ConfigError("unknown adapter variant: '" + s + "'");
}

const char* adapter_variant_name(AdapterVariant v) {
  switch (v) {
    case AdapterVariant::fpn: return "fpn";
    case AdapterVariant::pre: return "pre";
    case AdapterVariant::post: return "post";
    case AdapterVariant::pre_scalar: return "pre_scalar";
    case AdapterVariant::pre_vector: return "pre_vector";
  }
  return "?";
}

Tensor hwc_to_chw(const Tensor& img) {
  check_model(img.rank() == 3 && img.dim(2) == 3, "hwc_to_chw: expected (H,W,3)");
  int64_t h = img.dim(0), w = img.dim(1);
  Tensor out({3, h, w});
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x)
      for (int64_t c = 0; c < 3; ++c)
        out.data[static_cast<size_t>((c * h + y) * w + x)] =
            img.data[static_cast<size_t>((y * w + x) * 3 + c)];
  return out;
}

// ---------------------------------------------------------------------------
// backbone: strided stem to stride 4, then four residual stages

namespace {

std::string stage_prefix(int stage, int block) {
  return "backbone.s" + std::to_string(stage) + ".b" + std::to_string(block);
}

void build_block(ParamStore& ps, const std::string& p, int64_t cin, int64_t cout, bool project,
                 Rng& rng) {
  build_conv(ps, p + ".conv1", cin, cout, 3, rng);
  build_gn(ps, p + ".gn1", cout);
  build_conv(ps, p + ".conv2", cout, cout, 3, rng);
  build_gn(ps, p + ".gn2", cout);
  if (project) {
    build_conv(ps, p + ".short", cin, cout, 1, rng);
    build_gn(ps, p + ".short_gn", cout);
  }
}

Var block_forward(Ctx& ctx, const std::string& p, Var x, int stride, bool project, int groups) {
  Var y = conv(ctx, p + ".conv1", x, stride, 1);
  y = relu(gn(ctx, p + ".gn1", y, groups));
  y = conv(ctx, p + ".conv2", y, 1, 1);
  y = gn(ctx, p + ".gn2", y, groups);
  Var sc = x;
  if (project) sc = gn(ctx, p + ".short_gn", conv(ctx, p + ".short", x, stride, 0), groups);
  return relu(add(y, sc));
}

}  // namespace

void build_backbone(ParamStore& ps, const VisionConfig& cfg, Rng& rng) {
  int64_t w0 = cfg.stage_channels[0];
  build_conv(ps, "backbone.stem1", 3, w0, 3, rng);
  build_gn(ps, "backbone.stem1_gn", w0);
  build_conv(ps, "backbone.stem2", w0, cfg.stage_channels[0], 3, rng);
  build_gn(ps, "backbone.stem2_gn", cfg.stage_channels[0]);
  int64_t cin = cfg.stage_channels[0];
  for (int s = 0; s < 4; ++s) {
    int64_t cout = cfg.stage_channels[static_cast<size_t>(s)];
    for (int b = 0; b < cfg.blocks_per_stage; ++b) {
      bool first = b == 0;
      bool project = first && (cin != cout || s > 0);
      build_block(ps, stage_prefix(s, b), first ? cin : cout, cout, project, rng);
    }
    cin = cout;
  }
}

FeatureHierarchy backbone_forward(Ctx& ctx, const VisionConfig& cfg, Var image_chw) {
  const Tensor& img = V(image_chw);
  check_model(img.rank() == 3 && img.dim(0) == 3, "backbone: expected (3,H,W) input");
  check_model(img.dim(1) % 32 == 0 && img.dim(2) % 32 == 0,
              "backbone: image sides must be divisible by 32");
  int g = cfg.gn_groups;
  Var x = conv(ctx, "backbone.stem1", image_chw, 2, 1);
  x = relu(gn(ctx, "backbone.stem1_gn", x, g));
  x = conv(ctx, "backbone.stem2", x, 2, 1);
  x = relu(gn(ctx, "backbone.stem2_gn", x, g));   // stride 4

  FeatureHierarchy h;
  int64_t cin = cfg.stage_channels[0];
  Var cur = x;
  for (int s = 0; s < 4; ++s) {
    int64_t cout = cfg.stage_channels[static_cast<size_t>(s)];
    for (int b = 0; b < cfg.blocks_per_stage; ++b) {
      bool first = b == 0;
      int stride = (first && s > 0) ? 2 : 1;
      bool project = first && (cin != cout || s > 0);
      cur = block_forward(ctx, stage_prefix(s, b), cur, stride, project, g);
      if (first) cin = cout;
    }
    if (s == 0) h.x2 = cur;
    if (s == 1) h.x3 = cur;
    if (s == 2) h.x4 = cur;
    if (s == 3) h.x5 = cur;
  }
  return h;
}

// ---------------------------------------------------------------------------
// FPN adapter and its variants

namespace {

void build_adapter_block(ParamStore& ps, const std::string& p, int64_t c, Rng& rng) {
  build_conv(ps, p + ".conv1", c, c, 3, rng);
  build_gn(ps, p + ".gn1", c);
  build_conv(ps, p + ".conv2", c, c, 3, rng);
  build_gn(ps, p + ".gn2", c);
}

Var adapter_block(Ctx& ctx, const std::string& p, Var x, int groups) {
  Var y = relu(gn(ctx, p + ".gn1", conv(ctx, p + ".conv1", x, 1, 1), groups));
  return relu(gn(ctx, p + ".gn2", conv(ctx, p + ".conv2", y, 1, 1), groups));
}

}  // namespace

void build_fpn(ParamStore& ps, const VisionConfig& cfg, Rng& rng) {
  int64_t c = cfg.fpn_channels;
  for (int i = 2; i <= 5; ++i) {
    int64_t ci = cfg.stage_channels[static_cast<size_t>(i - 2)];
    build_conv(ps, "fpn.lat" + std::to_string(i), ci, c, 1, rng);
    build_conv(ps, "fpn.smooth" + std::to_string(i), c, c, 3, rng);
    switch (cfg.adapter.variant) {
      case AdapterVariant::fpn:
        break;
      case AdapterVariant::pre:
        build_adapter_block(ps, "fpn.pre" + std::to_string(i), ci, rng);
        break;
      case AdapterVariant::post:
        build_adapter_block(ps, "fpn.post" + std::to_string(i), c, rng);
        break;
      case AdapterVariant::pre_scalar:
        build_adapter_block(ps, "fpn.pre" + std::to_string(i), ci, rng);
        init_const(ps.add("fpn.pre" + std::to_string(i) + ".res_s", {1}), cfg.adapter.residual_init);
        break;
      case AdapterVariant::pre_vector:
        build_adapter_block(ps, "fpn.pre" + std::to_string(i), ci, rng);
        init_const(ps.add("fpn.pre" + std::to_string(i) + ".res_v", {ci}), cfg.adapter.residual_init);
        break;
    }
  }
}

PyramidFeatures fpn_forward(Ctx& ctx, const VisionConfig& cfg, const FeatureHierarchy& h) {
  int g = cfg.gn_groups;
  std::array<Var, 4> xs{h.x2, h.x3, h.x4, h.x5};

  // pre-FPN variants transform the backbone features level-wise
  if (cfg.adapter.variant == AdapterVariant::pre ||
      cfg.adapter.variant == AdapterVariant::pre_scalar ||
      cfg.adapter.variant == AdapterVariant::pre_vector) {
    for (int i = 0; i < 4; ++i) {
      std::string p = "fpn.pre" + std::to_string(i + 2);
      Var y = adapter_block(ctx, p, xs[static_cast<size_t>(i)], g);
      if (cfg.adapter.variant == AdapterVariant::pre) {
        xs[static_cast<size_t>(i)] = y;
      } else if (cfg.adapter.variant == AdapterVariant::pre_scalar) {
        xs[static_cast<size_t>(i)] = add(xs[static_cast<size_t>(i)], scale_by(y, ctx.p(p + ".res_s")));
      } else {
        xs[static_cast<size_t>(i)] =
            add(xs[static_cast<size_t>(i)], channel_scale(y, ctx.p(p + ".res_v")));
      }
    }
  }

  // lateral projections, top-down accumulation, then 3x3 smoothing
  std::array<Var, 4> lat;
  for (int i = 0; i < 4; ++i)
    lat[static_cast<size_t>(i)] =
        conv(ctx, "fpn.lat" + std::to_string(i + 2), xs[static_cast<size_t>(i)], 1, 0);
  std::array<Var, 4> m;
  m[3] = lat[3];
  for (int i = 2; i >= 0; --i)
    m[static_cast<size_t>(i)] =
        add(lat[static_cast<size_t>(i)], upsample_nearest2x(m[static_cast<size_t>(i) + 1]));
  std::array<Var, 4> p;
  for (int i = 0; i < 4; ++i)
    p[static_cast<size_t>(i)] =
        conv(ctx, "fpn.smooth" + std::to_string(i + 2), m[static_cast<size_t>(i)], 1, 1);

  if (cfg.adapter.variant == AdapterVariant::post) {
    for (int i = 0; i < 4; ++i)
      p[static_cast<size_t>(i)] =
          adapter_block(ctx, "fpn.post" + std::to_string(i + 2), p[static_cast<size_t>(i)], g);
  }
  return PyramidFeatures{p[0], p[1], p[2], p[3]};
}

// ---------------------------------------------------------------------------
// attentional pooling

void build_attention_pool(ParamStore& ps, const VisionConfig& cfg, Rng& rng) {
  build_attention(ps, "pool.attn", cfg.stage_channels[3], rng);
}

PooledFeature attention_pool(Ctx& ctx, const VisionConfig& cfg, Var tokens) {
  const Tensor& tv = V(tokens);
  check_model(tv.rank() == 2 && tv.dim(1) == cfg.stage_channels[3],
              "attention_pool: expected (T, C5) tokens");
  Var gap = mean_rows(tokens);
  Var seq = concat_rows(gap, tokens);
  Var mixed = multihead_attention(ctx, "pool.attn", seq, seq, cfg.pool_heads);
  PooledFeature out;
  out.prenorm = add(seq, mixed);
  Var normed = l2_normalize_rows(out.prenorm);
  out.global = slice_rows(normed, 0, 1);
  out.spatial = slice_rows(normed, 1, tv.dim(0));
  return out;
}

}  // namespace mtl
