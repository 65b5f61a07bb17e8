#include <doctest.h>

#include <cmath>
#include <functional>

#include "mtl/nn.h"
#include "mtl/ops.h"
#include "mtl/rng.h"
#include "mtl/tape.h"

using namespace mtl;

namespace {

// Checks d(sum f(params)) / d(param[i]) against central differences for every
// entry of every listed tensor.
void check_gradients(std::vector<Tensor*> params,
                     const std::function<Var(Tape&, std::vector<Var>&)>& f,
                     double h = 1e-6, double tol = 1e-6) {
  // analytic
  Tape tape;
  std::vector<Var> leaves;
  for (Tensor* p : params) leaves.push_back(tape.leaf(*p, true));
  Var loss = f(tape, leaves);
  tape.backward(loss);
  std::vector<Tensor> analytic;
  for (Var l : leaves) analytic.push_back(tape.grad_of(l));

  auto eval = [&]() {
    Tape t2;
    std::vector<Var> ls;
    for (Tensor* p : params) ls.push_back(t2.leaf(*p, false));
    return V(f(t2, ls)).data[0];
  };

  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& p = *params[pi];
    for (int64_t i = 0; i < p.numel(); ++i) {
      double fd = central_difference(p, i, h, eval);
      double an = analytic[pi].data[i];
      double err = std::fabs(fd - an) / std::max({std::fabs(fd), std::fabs(an), 1e-4});
      CAPTURE(pi);
      CAPTURE(i);
      CAPTURE(fd);
      CAPTURE(an);
      CHECK(err < tol);
    }
  }
}

Tensor randn(std::vector<int64_t> shape, Rng& rng, double s = 1.0) {
  Tensor t(std::move(shape));
  for (double& x : t.data) x = rng.normal() * s;
  return t;
}

}  // namespace

TEST_CASE("elementwise ops match finite differences") {
  Rng rng(1);
  Tensor a = randn({3, 4}, rng), b = randn({3, 4}, rng);
  // keep b away from zero for div
  for (double& x : b.data) x = (x >= 0 ? x + 0.5 : x - 0.5);
  check_gradients({&a, &b}, [](Tape&, std::vector<Var>& v) {
    Var y = add(mul(v[0], v[1]), sub(v[0], v[1]));
    y = add(y, div(v[0], v[1]));
    y = add(y, relu(y));
    y = add(y, sigmoid(scale(v[0], 0.3)));
    y = add(y, mtl::exp(scale(v[1], 0.1)));
    y = add(y, mtl::abs(add_const(v[0], 0.05)));
    return mean_all(y);
  });
}

TEST_CASE("min/max ops match finite differences") {
  Rng rng(2);
  Tensor a = randn({2, 5}, rng), b = randn({2, 5}, rng);
  check_gradients({&a, &b}, [](Tape&, std::vector<Var>& v) {
    Var y = add(vmin(v[0], v[1]), vmax(v[0], v[1]));
    y = add(y, min_const(v[0], 0.2));
    y = add(y, max_const(v[1], -0.1));
    return sum_all(y);
  });
}

TEST_CASE("matmul/linear/transpose match finite differences") {
  Rng rng(3);
  Tensor a = randn({3, 4}, rng), b = randn({4, 5}, rng);
  Tensor w = randn({2, 5}, rng), bias = randn({2}, rng);
  check_gradients({&a, &b, &w, &bias}, [](Tape&, std::vector<Var>& v) {
    Var y = matmul(v[0], v[1]);              // (3,5)
    Var z = linear(y, v[2], v[3]);           // (3,2)
    return mean_all(matmul(transpose(z), z));
  });
}

TEST_CASE("softmax/log_softmax/l2norm/layernorm match finite differences") {
  Rng rng(4);
  Tensor x = randn({3, 6}, rng);
  Tensor g = randn({6}, rng, 0.3), be = randn({6}, rng, 0.3);
  for (double& v : g.data) v += 1.0;
  check_gradients({&x, &g, &be}, [](Tape&, std::vector<Var>& v) {
    Var y = softmax_rows(v[0]);
    Var z = log_softmax_rows(v[0]);
    Var n = l2_normalize_rows(v[0]);
    Var ln = layer_norm_rows(v[0], v[1], v[2]);
    return add(add(mean_all(mul(y, z)), mean_all(n)), mean_all(ln));
  }, 1e-6, 2e-5);
}

TEST_CASE("conv2d and group_norm match finite differences") {
  Rng rng(5);
  Tensor x = randn({3, 6, 6}, rng);
  Tensor w = randn({4, 3, 3, 3}, rng, 0.4), b = randn({4}, rng, 0.1);
  Tensor gg = randn({4}, rng, 0.2), gb = randn({4}, rng, 0.2);
  for (double& v : gg.data) v += 1.0;
  check_gradients({&x, &w, &b, &gg, &gb}, [](Tape&, std::vector<Var>& v) {
    Var y = conv2d(v[0], v[1], v[2], 2, 1);       // (4,3,3)
    Var n = group_norm(y, v[3], v[4], 2);
    return mean_all(mul(n, n));
  }, 1e-6, 2e-5);
}

TEST_CASE("spatial reshaping ops match finite differences") {
  Rng rng(6);
  Tensor x = randn({2, 3, 3}, rng);
  check_gradients({&x}, [](Tape&, std::vector<Var>& v) {
    Var up = upsample_nearest2x(v[0]);            // (2,6,6)
    Var tok = chw_to_tokens(up);                   // (36,2)
    Var back = tokens_to_chw(tok, 6, 6);
    Var gapd = global_avg_pool(back);              // (1,2)
    Var r = reshape(tok, {2, 36});
    return add(mean_all(r), sum_all(gapd));
  });
}

TEST_CASE("concat/slice ops match finite differences") {
  Rng rng(7);
  Tensor a = randn({3, 4}, rng), b = randn({2, 4}, rng), c = randn({3, 2}, rng);
  check_gradients({&a, &b, &c}, [](Tape&, std::vector<Var>& v) {
    Var rows = concat_rows(v[0], v[1]);           // (5,4)
    Var cols = concat_cols(v[0], v[2]);           // (3,6)
    Var s1 = slice_rows(rows, 1, 3);
    Var s2 = slice_cols(cols, 2, 3);
    return add(mean_all(s1), mean_all(s2));
  });
}

TEST_CASE("broadcast scaling ops match finite differences") {
  Rng rng(8);
  Tensor x = randn({3, 4, 4}, rng), v = randn({3}, rng), s = randn({1}, rng);
  check_gradients({&x, &v, &s}, [](Tape&, std::vector<Var>& vars) {
    Var y = channel_scale(vars[0], vars[1]);
    Var z = scale_by(y, vars[2]);
    return mean_all(z);
  });
}

TEST_CASE("gather_rows and mean_rows match finite differences") {
  Rng rng(9);
  Tensor table = randn({5, 3}, rng);
  check_gradients({&table}, [](Tape&, std::vector<Var>& v) {
    Var rows = gather_rows(v[0], {0, 2, 2, 4});
    return mean_all(mean_rows(rows));
  });
}

TEST_CASE("region_pool matches finite differences in features and box") {
  Rng rng(10);
  Tensor feat = randn({2, 8, 8}, rng);
  Tensor box = Tensor::from({4}, {0.45, 0.55, 0.4, 0.3});
  check_gradients({&feat, &box}, [](Tape&, std::vector<Var>& v) {
    Var pooled = region_pool(v[0], v[1], 3);      // (9,2)
    return mean_all(mul(pooled, pooled));
  }, 1e-6, 5e-5);
}

TEST_CASE("region_pool of a constant field returns that constant") {
  Tape tape;
  Tensor feat = Tensor::full({3, 6, 6}, 2.75);
  Tensor box = Tensor::from({4}, {0.3, 0.6, 0.5, 0.7});
  Var pooled = region_pool(tape.leaf(feat, false), tape.leaf(box, false), 3);
  for (double v : V(pooled).data) CHECK(v == doctest::Approx(2.75).epsilon(1e-12));
  // and for a box partially outside the image (border clamp)
  Tensor box2 = Tensor::from({4}, {0.05, 0.05, 0.5, 0.5});
  Var pooled2 = region_pool(tape.leaf(feat, false), tape.leaf(box2, false), 3);
  for (double v : V(pooled2).data) CHECK(v == doctest::Approx(2.75).epsilon(1e-12));
}

TEST_CASE("cross_entropy_mean matches finite differences and uniform value") {
  Rng rng(11);
  Tensor logits = randn({4, 5}, rng);
  std::vector<int> targets{0, 3, 2, 4};
  check_gradients({&logits}, [&](Tape&, std::vector<Var>& v) {
    return cross_entropy_mean(v[0], targets);
  });
  // uniform logits -> ln(K)
  Tape tape;
  Tensor u = Tensor::zeros({3, 7});
  Var l = cross_entropy_mean(tape.leaf(u, false), {1, 2, 3});
  CHECK(V(l).data[0] == doctest::Approx(std::log(7.0)).epsilon(1e-12));
}

TEST_CASE("seg_pixel_nll matches finite differences and ignores ignore_index") {
  Rng rng(12);
  Tensor scores = Tensor::zeros({3, 6});
  for (double& v : scores.data) v = rng.uniform(0.05, 1.0);
  std::vector<int> labels{0, 1, 255, 2, 255, 0};
  check_gradients({&scores}, [&](Tape&, std::vector<Var>& v) {
    return seg_pixel_nll(v[0], labels, 255);
  });
  // gradient at ignored pixels is exactly zero
  Tape tape;
  Var sv = tape.leaf(scores, true);
  Var loss = seg_pixel_nll(sv, labels, 255);
  tape.backward(loss);
  Tensor g = tape.grad_of(sv);
  for (int64_t c = 0; c < 3; ++c) {
    CHECK(g.at(c, 2) == 0.0);
    CHECK(g.at(c, 4) == 0.0);
  }
  // all ignored: zero loss, zero gradient
  Tape tape2;
  Var sv2 = tape2.leaf(scores, true);
  Var loss2 = seg_pixel_nll(sv2, std::vector<int>(6, 255), 255);
  CHECK(V(loss2).data[0] == 0.0);
}

TEST_CASE("attention blocks match finite differences") {
  Rng rng(13);
  ParamStore ps;
  build_attention(ps, "attn", 8, rng);
  build_encoder_layer(ps, "enc", 8, 16, rng);
  build_decoder_layer(ps, "dec", 8, 16, rng);
  Tensor x = randn({5, 8}, rng, 0.5);
  Tensor kv = randn({3, 8}, rng, 0.5);

  std::vector<Tensor*> params{&x, &kv};
  std::vector<std::string> names;
  for (auto& kvp : ps.map()) {
    params.push_back(&kvp.second);
    names.push_back(kvp.first);
  }
  check_gradients(params, [&](Tape& tape, std::vector<Var>& v) {
    // rebind ParamStore leaves through a Ctx that reuses the vars handed in
    Ctx ctx(tape, ps, train_all());
    for (size_t i = 0; i < names.size(); ++i) ctx.bind(names[i], v[i + 2]);
    Var xx = v[0], kk = v[1];
    Var a = multihead_attention(ctx, "attn", xx, kk, 2);
    Var e = encoder_layer(ctx, "enc", add(xx, a), 2);
    Var d = decoder_layer(ctx, "dec", e, kk, 4);
    return mean_all(mul(d, d));
  }, 1e-6, 2e-5);
}

TEST_CASE("frozen leaves receive no gradient") {
  Rng rng(14);
  Tensor a = randn({2, 2}, rng), b = randn({2, 2}, rng);
  Tape tape;
  Var va = tape.leaf(a, true);
  Var vb = tape.leaf(b, false);
  Var loss = mean_all(mul(va, vb));
  tape.backward(loss);
  Tensor gb = tape.grad_of(vb);
  for (double v : gb.data) CHECK(v == 0.0);
  Tensor ga = tape.grad_of(va);
  bool any = false;
  for (double v : ga.data) any = any || v != 0.0;
  CHECK(any);
}
