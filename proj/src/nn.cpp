#include "mtl/nn.h"

#include <cmath>

namespace mtl {

void init_normal(Tensor& t, Rng& rng, double stddev) {
  for (double& x : t.data) x = quantize_f32(rng.normal() * stddev);
}

void init_uniform(Tensor& t, Rng& rng, double lo, double hi) {
  for (double& x : t.data) x = quantize_f32(rng.uniform(lo, hi));
}

void init_he_conv(Tensor& t, Rng& rng) {
  int64_t fan_in = t.dim(1) * t.dim(2) * t.dim(3);
  init_normal(t, rng, std::sqrt(2.0 / static_cast<double>(fan_in)));
}

void init_linear_w(Tensor& t, Rng& rng) {
  init_normal(t, rng, std::sqrt(1.0 / static_cast<double>(t.dim(1))));
}

void init_const(Tensor& t, double v) {
  double q = quantize_f32(v);
  for (double& x : t.data) x = q;
}

// ---------------------------------------------------------------------------

void build_conv(ParamStore& ps, const std::string& prefix, int64_t cin, int64_t cout,
                int64_t k, Rng& rng) {
  init_he_conv(ps.add(prefix + ".w", {cout, cin, k, k}), rng);
  init_const(ps.add(prefix + ".b", {cout}), 0.0);
}

Var conv(Ctx& ctx, const std::string& prefix, Var x, int stride, int pad) {
  return conv2d(x, ctx.p(prefix + ".w"), ctx.p(prefix + ".b"), stride, pad);
}

void build_gn(ParamStore& ps, const std::string& prefix, int64_t channels) {
  init_const(ps.add(prefix + ".g", {channels}), 1.0);
  init_const(ps.add(prefix + ".beta", {channels}), 0.0);
}

Var gn(Ctx& ctx, const std::string& prefix, Var x, int groups) {
  return group_norm(x, ctx.p(prefix + ".g"), ctx.p(prefix + ".beta"), groups);
}

void build_linear(ParamStore& ps, const std::string& prefix, int64_t din, int64_t dout,
                  Rng& rng) {
  init_linear_w(ps.add(prefix + ".w", {dout, din}), rng);
  init_const(ps.add(prefix + ".b", {dout}), 0.0);
}

void build_linear_zero(ParamStore& ps, const std::string& prefix, int64_t din, int64_t dout) {
  init_const(ps.add(prefix + ".w", {dout, din}), 0.0);
  init_const(ps.add(prefix + ".b", {dout}), 0.0);
}

Var dense(Ctx& ctx, const std::string& prefix, Var x) {
  return linear(x, ctx.p(prefix + ".w"), ctx.p(prefix + ".b"));
}

void build_layer_norm(ParamStore& ps, const std::string& prefix, int64_t dim) {
  init_const(ps.add(prefix + ".g", {dim}), 1.0);
  init_const(ps.add(prefix + ".beta", {dim}), 0.0);
}

Var layer_norm(Ctx& ctx, const std::string& prefix, Var x) {
  return layer_norm_rows(x, ctx.p(prefix + ".g"), ctx.p(prefix + ".beta"));
}

void build_attention(ParamStore& ps, const std::string& prefix, int64_t dim, Rng& rng) {
  build_linear(ps, prefix + ".q", dim, dim, rng);
  build_linear(ps, prefix + ".k", dim, dim, rng);
  build_linear(ps, prefix + ".v", dim, dim, rng);
  build_linear(ps, prefix + ".o", dim, dim, rng);
}

Var multihead_attention(Ctx& ctx, const std::string& prefix, Var q_in, Var kv_in, int heads) {
  const Tensor& qv = V(q_in);
  int64_t dim = qv.dim(1);
  check_model(dim % heads == 0,
              "attention: dim " + std::to_string(dim) + " not divisible by " +
                  std::to_string(heads) + " heads");
  int64_t hd = dim / heads;
  Var q = dense(ctx, prefix + ".q", q_in);
  Var k = dense(ctx, prefix + ".k", kv_in);
  Var v = dense(ctx, prefix + ".v", kv_in);
  double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  Var mixed{};
  for (int h = 0; h < heads; ++h) {
    Var qh = slice_cols(q, h * hd, hd);
    Var kh = slice_cols(k, h * hd, hd);
    Var vh = slice_cols(v, h * hd, hd);
    Var attn = softmax_rows(scale(matmul(qh, transpose(kh)), inv_sqrt));
    Var oh = matmul(attn, vh);
    mixed = (h == 0) ? oh : concat_cols(mixed, oh);
  }
  return dense(ctx, prefix + ".o", mixed);
}

void build_ffn(ParamStore& ps, const std::string& prefix, int64_t dim, int64_t hidden,
               Rng& rng) {
  build_linear(ps, prefix + ".fc1", dim, hidden, rng);
  build_linear(ps, prefix + ".fc2", hidden, dim, rng);
}

Var ffn(Ctx& ctx, const std::string& prefix, Var x) {
  return dense(ctx, prefix + ".fc2", relu(dense(ctx, prefix + ".fc1", x)));
}

void build_encoder_layer(ParamStore& ps, const std::string& prefix, int64_t dim,
                         int64_t ffn_hidden, Rng& rng) {
  build_layer_norm(ps, prefix + ".ln1", dim);
  build_attention(ps, prefix + ".attn", dim, rng);
  build_layer_norm(ps, prefix + ".ln2", dim);
  build_ffn(ps, prefix + ".ffn", dim, ffn_hidden, rng);
}

Var encoder_layer(Ctx& ctx, const std::string& prefix, Var x, int heads) {
  Var n1 = layer_norm(ctx, prefix + ".ln1", x);
  x = add(x, multihead_attention(ctx, prefix + ".attn", n1, n1, heads));
  x = add(x, ffn(ctx, prefix + ".ffn", layer_norm(ctx, prefix + ".ln2", x)));
  return x;
}

void build_decoder_layer(ParamStore& ps, const std::string& prefix, int64_t dim,
                         int64_t ffn_hidden, Rng& rng) {
  build_layer_norm(ps, prefix + ".ln1", dim);
  build_attention(ps, prefix + ".attn", dim, rng);
  build_layer_norm(ps, prefix + ".ln2", dim);
  build_ffn(ps, prefix + ".ffn", dim, ffn_hidden, rng);
}

Var decoder_layer(Ctx& ctx, const std::string& prefix, Var x, Var kv, int heads) {
  Var n1 = layer_norm(ctx, prefix + ".ln1", x);
  x = add(x, multihead_attention(ctx, prefix + ".attn", n1, kv, heads));
  x = add(x, ffn(ctx, prefix + ".ffn", layer_norm(ctx, prefix + ".ln2", x)));
  return x;
}

}  // namespace mtl
