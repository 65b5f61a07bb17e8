#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "mtl/tape.h"

namespace mtl {

// Elementwise / arithmetic
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var scale(Var a, double c);
Var add_const(Var a, double c);
Var relu(Var a);
Var abs(Var a);
Var sigmoid(Var a);
Var exp(Var a);
Var min_const(Var a, double c);
Var max_const(Var a, double c);
Var vmin(Var a, Var b);
Var vmax(Var a, Var b);

// Broadcast helpers
Var scale_by(Var x, Var s);              // s is a 1-element var
Var channel_scale(Var x, Var v);         // x (C,H,W), v (C)

// Linear algebra (2-D)
Var matmul(Var a, Var b);                // (m,k)x(k,n)
Var transpose(Var a);
Var linear(Var x, Var w, Var b);         // x (n,din), w (dout,din), b (dout)

// Shape manipulation
Var reshape(Var x, std::vector<int64_t> shape);
Var concat_rows(Var a, Var b);
Var slice_rows(Var x, int64_t off, int64_t count);
Var concat_cols(Var a, Var b);
Var slice_cols(Var x, int64_t off, int64_t count);
Var concat_channels(Var a, Var b);       // (Ca,H,W)+(Cb,H,W)
Var chw_to_tokens(Var x);                // (C,H,W) -> (H*W, C)
Var tokens_to_chw(Var x, int64_t h, int64_t w);  // (h*w, C) -> (C,h,w)

// Reductions / normalization
Var sum_all(Var x);
Var mean_all(Var x);
Var mean_rows(Var x);                    // (n,d) -> (1,d)
Var softmax_rows(Var x);
Var log_softmax_rows(Var x);
Var l2_normalize_rows(Var x, double eps = 1e-12);
Var layer_norm_rows(Var x, Var gamma, Var beta, double eps = 1e-5);

// Convolutional / spatial (CHW single image)
Var conv2d(Var x, Var w, Var b, int stride, int pad);
Var group_norm(Var x, Var gamma, Var beta, int groups, double eps = 1e-5);
Var upsample_nearest2x(Var x);
Var global_avg_pool(Var x);              // (C,H,W) -> (1,C)

// Gather / embeddings
Var gather_rows(Var table, const std::vector<int>& ids);

// Region pooling: bilinear samples on an SxS grid inside a box.
// box is a 4-vector var (cx,cy,w,h) in [0,1] image-normalized coordinates.
// Differentiable w.r.t. both features and box coordinates.
Var region_pool(Var feat, Var box, int grid);  // -> (grid*grid, C)

// Losses (fused, numerically careful)
// Mean cross-entropy over rows; targets are class indices.
Var cross_entropy_mean(Var logits, const std::vector<int>& targets);
// Per-pixel NLL over a (K,P) score field; scores are nonnegative mixture
// weights, normalized over classes inside the op. Pixels whose label equals
// ignore_index contribute nothing (exactly zero gradient).
Var seg_pixel_nll(Var scores, const std::vector<int>& labels, int ignore_index);

// Finite-difference utility used by tests and the acceptance suite: central
// differences of f() w.r.t. one entry of an externally stored tensor.
double central_difference(Tensor& param, int64_t index, double h,
                          const std::function<double()>& f);

}  // namespace mtl
