#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "mtl/ops.h"
#include "mtl/rng.h"
#include "mtl/tape.h"

namespace mtl {

// Rounds a double through f32. All parameter initializers pass through this
// so freshly built models survive the f32 checkpoint format bit-exactly.
inline double quantize_f32(double x) { return static_cast<double>(static_cast<float>(x)); }

// Named parameter map. Ordered so that iteration (optimizer state, digests,
// serialization) is deterministic.
class ParamStore {
 public:
  Tensor& add(const std::string& name, std::vector<int64_t> shape) {
    check_model(params_.find(name) == params_.end(), "ParamStore: duplicate param " + name);
    return params_[name] = Tensor(std::move(shape));
  }
  Tensor& at(const std::string& name) {
    auto it = params_.find(name);
    check_model(it != params_.end(), "ParamStore: unknown param " + name);
    return it->second;
  }
  const Tensor& at(const std::string& name) const {
    auto it = params_.find(name);
    check_model(it != params_.end(), "ParamStore: unknown param " + name);
    return it->second;
  }
  bool has(const std::string& name) const { return params_.count(name) != 0; }
  size_t size() const { return params_.size(); }

  std::map<std::string, Tensor>& map() { return params_; }
  const std::map<std::string, Tensor>& map() const { return params_; }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(params_.size());
    for (const auto& kv : params_) out.push_back(kv.first);
    return out;
  }
  std::vector<std::string> names_with_prefix(const std::string& prefix) const {
    std::vector<std::string> out;
    for (const auto& kv : params_)
      if (kv.first.rfind(prefix, 0) == 0) out.push_back(kv.first);
    return out;
  }

 private:
  std::map<std::string, Tensor> params_;
};

// Initializers (all f32-quantized).
void init_normal(Tensor& t, Rng& rng, double stddev);
void init_uniform(Tensor& t, Rng& rng, double lo, double hi);
void init_he_conv(Tensor& t, Rng& rng);     // (Co,Ci,kh,kw), std = sqrt(2/fan_in)
void init_linear_w(Tensor& t, Rng& rng);    // (dout,din),   std = sqrt(1/din)
void init_const(Tensor& t, double v);

// Per-step forward context: binds a tape to a parameter store and decides
// which parameters receive gradients this step.
struct Ctx {
  Tape& tape;
  ParamStore& params;
  std::function<bool(const std::string&)> trainable;

  Ctx(Tape& t, ParamStore& p, std::function<bool(const std::string&)> pred)
      : tape(t), params(p), trainable(std::move(pred)) {}

  Var p(const std::string& name) {
    auto it = leaves_.find(name);
    if (it != leaves_.end()) return it->second;
    Var v = tape.leaf(params.at(name), trainable ? trainable(name) : false);
    leaves_.emplace(name, v);
    return v;
  }

  // Pre-bind an existing leaf to a parameter name (used by tests that manage
  // leaves themselves).
  void bind(const std::string& name, Var v) { leaves_[name] = v; }

  const std::map<std::string, Var>& leaves() const { return leaves_; }

  // Step-scoped memo for subgraphs shared across a batch (e.g. text features,
  // which do not depend on the image).
  std::map<std::string, Var> memo;

 private:
  std::map<std::string, Var> leaves_;
};

// Trainability predicates.
inline std::function<bool(const std::string&)> train_all() {
  return [](const std::string&) { return true; };
}
inline std::function<bool(const std::string&)> train_none() {
  return [](const std::string&) { return false; };
}

// -- composite layers --------------------------------------------------------
// Parameter builders create the named tensors; forward functions consume them
// through a Ctx. Builders and forwards must agree on naming.

void build_conv(ParamStore& ps, const std::string& prefix, int64_t cin, int64_t cout,
                int64_t k, Rng& rng);
Var conv(Ctx& ctx, const std::string& prefix, Var x, int stride, int pad);

void build_gn(ParamStore& ps, const std::string& prefix, int64_t channels);
Var gn(Ctx& ctx, const std::string& prefix, Var x, int groups);

void build_linear(ParamStore& ps, const std::string& prefix, int64_t din, int64_t dout,
                  Rng& rng);
void build_linear_zero(ParamStore& ps, const std::string& prefix, int64_t din, int64_t dout);
Var dense(Ctx& ctx, const std::string& prefix, Var x);

void build_layer_norm(ParamStore& ps, const std::string& prefix, int64_t dim);
Var layer_norm(Ctx& ctx, const std::string& prefix, Var x);

// Multi-head attention: q_in (Tq,C) attends over kv_in (Tk,C). Returns the
// out-projected mixture (no residual).
void build_attention(ParamStore& ps, const std::string& prefix, int64_t dim, Rng& rng);
Var multihead_attention(Ctx& ctx, const std::string& prefix, Var q_in, Var kv_in, int heads);

// Position-wise feed-forward: linear -> relu -> linear (no residual).
void build_ffn(ParamStore& ps, const std::string& prefix, int64_t dim, int64_t hidden, Rng& rng);
Var ffn(Ctx& ctx, const std::string& prefix, Var x);

// Pre-norm transformer blocks (with residuals).
void build_encoder_layer(ParamStore& ps, const std::string& prefix, int64_t dim,
                         int64_t ffn_hidden, Rng& rng);
Var encoder_layer(Ctx& ctx, const std::string& prefix, Var x, int heads);

void build_decoder_layer(ParamStore& ps, const std::string& prefix, int64_t dim,
                         int64_t ffn_hidden, Rng& rng);
Var decoder_layer(Ctx& ctx, const std::string& prefix, Var x, Var kv, int heads);

}  // namespace mtl
