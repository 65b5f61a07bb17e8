#include "mtl/ops.h"

#include <algorithm>
#include <cmath>

namespace mtl {

namespace {

void check_same_tape(Var a, Var b) {
  check_model(a.tape == b.tape, "ops: vars from different tapes");
}

bool rg(Var a) { return a.tape->requires_grad(a); }

}  // namespace

// ---------------------------------------------------------------------------
// elementwise

Var add(Var a, Var b) {
  check_same_tape(a, b);
  const Tensor &av = V(a), &bv = V(b);
  check_model(av.same_shape(bv), "add: shape mismatch " + av.shape_str() + " vs " + bv.shape_str());
  Tensor y(av.shape);
  for (int64_t i = 0; i < y.numel(); ++i) y.data[i] = av.data[i] + bv.data[i];
  Tape* t = a.tape;
  bool need = rg(a) || rg(b);
  Var out{};
  out = t->make_node(std::move(y), need, [t, a, b, id = static_cast<int>(t->size())]() {
    const Tensor& g = t->grad_buf(id);
    if (t->requires_grad(a)) {
      Tensor& ga = t->grad_buf(a.id);
      for (int64_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i];
    }
    if (t->requires_grad(b)) {
      Tensor& gb = t->grad_buf(b.id);
      for (int64_t i = 0; i < g.numel(); ++i) gb.data[i] += g.data[i];
    }
  });
  return out;
}

Var sub(Var a, Var b) {
  check_same_tape(a, b);
  const Tensor &av = V(a), &bv = V(b);
  check_model(av.same_shape(bv), "sub: shape mismatch");
  Tensor y(av.shape);
  for (int64_t i = 0; i < y.numel(); ++i) y.data[i] = av.data[i] - bv.data[i];
  Tape* t = a.tape;
  return t->make_node(std::move(y), rg(a) || rg(b), [t, a, b, id = static_cast<int>(t->size())]() {
    const Tensor& g = t->grad_buf(id);
    if (t->requires_grad(a)) {
      Tensor& ga = t->grad_buf(a.id);
      for (int64_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i];
    }
    if (t->requires_grad(b)) {
      Tensor& gb = t->grad_buf(b.id);
      for (int64_t i = 0; i < g.numel(); ++i) gb.data[i] -= g.data[i];
    }
  });
}

Var mul(Var a, Var b) {
  check_same_tape(a, b);
  const Tensor &av = V(a), &bv = V(b);
  check_model(av.same_shape(bv), "mul: shape mismatch");
  Tensor y(av.shape);
  for (int64_t i = 0; i < y.numel(); ++i) y.data[i] = av.data[i] * bv.data[i];
  Tape* t = a.tape;
  return t->make_node(std::move(y), rg(a) || rg(b), [t, a, b, id = static_cast<int>(t->size())]() {
    const Tensor& g = t->grad_buf(id);
    const Tensor &av = t->val(a), &bv = t->val(b);
    if (t->requires_grad(a)) {
      Tensor& ga = t->grad_buf(a.id);
      for (int64_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i] * bv.data[i];
    }
    if (t->requires_grad(b)) {
      Tensor& gb = t->grad_buf(b.id);
      for (int64_t i = 0; i < g.numel(); ++i) gb.data[i] += g.data[i] * av.data[i];
    }
  });
}

Var div(Var a, Var b) {
  check_same_tape(a, b);
  const Tensor &av = V(a), &bv = V(b);
  check_model(av.same_shape(bv), "div: shape mismatch");
  Tensor y(av.shape);
  for (int64_t i = 0; i < y.numel(); ++i) y.data[i] = av.data[i] / bv.data[i];
  Tape* t = a.tape;
  return t->make_node(std::move(y), rg(a) || rg(b), [t, a, b, id = static_cast<int>(t->size())]() {
    const Tensor& g = t->grad_buf(id);
    const Tensor &av = t->val(a), &bv = t->val(b);
    if (t->requires_grad(a)) {
      Tensor& ga = t->grad_buf(a.id);
      for (int64_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i] / bv.data[i];
    }
    if (t->requires_grad(b)) {
      Tensor& gb = t->grad_buf(b.id);
      for (int64_t i = 0; i < g.numel(); ++i)
        gb.data[i] -= g.data[i] * av.data[i] / (bv.data[i] * bv.data[i]);
    }
  });
}

Var scale(Var a, double c) {
  const Tensor& av = V(a);
  Tensor y(av.shape);
  for (int64_t i = 0; i < y.numel(); ++i) y.data[i] = av.data[i] * c;
  Tape* t = a.tape;
  return t->make_node(std::move(y), rg(a), [t, a, c, id = static_cast<int>(t->size())]() {
    const Tensor& g = t->grad_buf(id);
    Tensor& ga = t->grad_buf(a.id);
    for (int64_t i = 0; i < g.numel(); ++i) ga.data[i] += c * g.data[i];
  });
}

Var add_const(Var a, double c) {
  const Tensor& av = V(a);
  Tensor y(av.shape);
  for (int64_t i = 0; i < y.numel(); ++i) y.data[i] = av.data[i] + c;
  Tape* t = a.tape;
  return t->make_node(std::move(y), rg(a), [t, a, id = static_cast<int>(t->size())]() {
    const Tensor& g = t->grad_buf(id);
    Tensor& ga = t->grad_buf(a.id);
    for (int64_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i];
  });
}

Var relu(Var a) {
  const Tensor& av = V(a);
  Tensor y(av.shape);
  for (int64_t i = 0; i < y.numel(); ++i) y.data[i] = av.data[i] > 0 ? av.data[i] : 0.0;
  Tape* t = a.tape;
  return t->make_node(std::move(y), rg(a), [t, a, id = static_cast<int>(t->size())]() {
    const Tensor& g = t->grad_buf(id);
    const Tensor& av = t->val(a);
    Tensor& ga = t->grad_buf(a.id);
    for (int64_t i = 0; i < g.numel(); ++i)
      if (av.data[i] > 0) ga.data[i] += g.data[i];
  });
}

Var abs(Var a) {
  const Tensor& av = V(a);
  Tensor y(av.shape);
  for (int64_t i = 0; i < y.numel(); ++i) y.data[i] = std::fabs(av.data[i]);
  Tape* t = a.tape;
  return t->make_node(std::move(y), rg(a), [t, a, id = static_cast<int>(t->size())]() {
    const Tensor& g = t->grad_buf(id);
    const Tensor& av = t->val(a);
    Tensor& ga = t->grad_buf(a.id);
    for (int64_t i = 0; i < g.numel(); ++i)
      ga.data[i] += (av.data[i] >= 0 ? 1.0 : -1.0) * g.data[i];
  });
}

Var sigmoid(Var a) {
  const Tensor& av = V(a);
  Tensor y(av.shape);
  for (int64_t i = 0; i < y.numel(); ++i) y.data[i] = 1.0 / (1.0 + std::exp(-av.data[i]));
  Tape* t = a.tape;
  return t->make_node(std::move(y), rg(a), [t, a, id = static_cast<int>(t->size())]() {
    const Tensor& g = t->grad_buf(id);
    const Tensor& yv = t->val(Var{t, id});
    Tensor& ga = t->grad_buf(a.id);
    for (int64_t i = 0; i < g.numel(); ++i)
      ga.data[i] += g.data[i] * yv.data[i] * (1.0 - yv.data[i]);
  });
}

Var exp(Var a) {
  const Tensor& av = V(a);
  Tensor y(av.shape);
  for (int64_t i = 0; i < y.numel(); ++i) y.data[i] = std::exp(av.data[i]);
  Tape* t = a.tape;
  return t->make_node(std::move(y), rg(a), [t, a, id = static_cast<int>(t->size())]() {
    const Tensor& g = t->grad_buf(id);
    const Tensor& yv = t->val(Var{t, id});
    Tensor& ga = t->grad_buf(a.id);
    for (int64_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i] * yv.data[i];
  });
}

Var min_const(Var a, double c) {
  const Tensor& av = V(a);
  Tensor y(av.shape);
  for (int64_t i = 0; i < y.numel(); ++i) y.data[i] = std::min(av.data[i], c);
  Tape* t = a.tape;
  return t->make_node(std::move(y), rg(a), [t, a, c, id = static_cast<int>(t->size())]() {
    const Tensor& g = t->grad_buf(id);
    const Tensor& av = t->val(a);
    Tensor& ga = t->grad_buf(a.id);
    for (int64_t i = 0; i < g.numel(); ++i)
      if (av.data[i] < c) ga.data[i] += g.data[i];
  });
}

Var max_const(Var a, double c) {
  const Tensor& av = V(a);
  Tensor y(av.shape);
  for (int64_t i = 0; i < y.numel(); ++i) y.data[i] = std::max(av.data[i], c);
  Tape* t = a.tape;
  return t->make_node(std::move(y), rg(a), [t, a, c, id = static_cast<int>(t->size())]() {
    const Tensor& g = t->grad_buf(id);
    const Tensor& av = t->val(a);
    Tensor& ga = t->grad_buf(a.id);
    for (int64_t i = 0; i < g.numel(); ++i)
      if (av.data[i] > c) ga.data[i] += g.data[i];
  });
}

Var vmin(Var a, Var b) {
  check_same_tape(a, b);
  const Tensor &av = V(a), &bv = V(b);
  check_model(av.same_shape(bv), "vmin: shape mismatch");
  Tensor y(av.shape);
  for (int64_t i = 0; i < y.numel(); ++i) y.data[i] = std::min(av.data[i], bv.data[i]);
  Tape* t = a.tape;
  return t->make_node(std::move(y), rg(a) || rg(b), [t, a, b, id = static_cast<int>(t->size())]() {
    const Tensor& g = t->grad_buf(id);
    const Tensor &av = t->val(a), &bv = t->val(b);
    for (int64_t i = 0; i < g.numel(); ++i) {
      if (av.data[i] <= bv.data[i]) {
        if (t->requires_grad(a)) t->grad_buf(a.id).data[i] += g.data[i];
      } else {
        if (t->requires_grad(b)) t->grad_buf(b.id).data[i] += g.data[i];
      }
    }
  });
}

Var vmax(Var a, Var b) {
  check_same_tape(a, b);
  const Tensor &av = V(a), &bv = V(b);
  check_model(av.same_shape(bv), "vmax: shape mismatch");
  Tensor y(av.shape);
  for (int64_t i = 0; i < y.numel(); ++i) y.data[i] = std::max(av.data[i], bv.data[i]);
  Tape* t = a.tape;
  return t->make_node(std::move(y), rg(a) || rg(b), [t, a, b, id = static_cast<int>(t->size())]() {
    const Tensor& g = t->grad_buf(id);
    const Tensor &av = t->val(a), &bv = t->val(b);
    for (int64_t i = 0; i < g.numel(); ++i) {
      if (av.data[i] >= bv.data[i]) {
        if (t->requires_grad(a)) t->grad_buf(a.id).data[i] += g.data[i];
      } else {
        if (t->requires_grad(b)) t->grad_buf(b.id).data[i] += g.data[i];
      }
    }
  });
}

Var scale_by(Var x, Var s) {
  check_same_tape(x, s);
  const Tensor &xv = V(x), &sv = V(s);
  check_model(sv.numel() == 1, "scale_by: scale must be 1-element");
  Tensor y(xv.shape);
  double c = sv.data[0];
  for (int64_t i = 0; i < y.numel(); ++i) y.data[i] = xv.data[i] * c;
  Tape* t = x.tape;
  return t->make_node(std::move(y), rg(x) || rg(s), [t, x, s, id = static_cast<int>(t->size())]() {
    const Tensor& g = t->grad_buf(id);
    const Tensor &xv = t->val(x), &sv = t->val(s);
    if (t->requires_grad(x)) {
      Tensor& gx = t->grad_buf(x.id);
      for (int64_t i = 0; i < g.numel(); ++i) gx.data[i] += g.data[i] * sv.data[0];
    }
    if (t->requires_grad(s)) {
      double acc = 0;
      for (int64_t i = 0; i < g.numel(); ++i) acc += g.data[i] * xv.data[i];
      t->grad_buf(s.id).data[0] += acc;
    }
  });
}

Var channel_scale(Var x, Var v) {
  check_same_tape(x, v);
  const Tensor &xv = V(x), &vv = V(v);
  check_model(xv.rank() == 3 && vv.numel() == xv.dim(0), "channel_scale: bad shapes");
  int64_t C = xv.dim(0), hw = xv.dim(1) * xv.dim(2);
  Tensor y(xv.shape);
  for (int64_t c = 0; c < C; ++c)
    for (int64_t i = 0; i < hw; ++i) y.data[c * hw + i] = xv.data[c * hw + i] * vv.data[c];
  Tape* t = x.tape;
  return t->make_node(std::move(y), rg(x) || rg(v), [t, x, v, C, hw, id = static_cast<int>(t->size())]() {
    const Tensor& g = t->grad_buf(id);
    const Tensor &xv = t->val(x), &vv = t->val(v);
    if (t->requires_grad(x)) {
      Tensor& gx = t->grad_buf(x.id);
      for (int64_t c = 0; c < C; ++c)
        for (int64_t i = 0; i < hw; ++i) gx.data[c * hw + i] += g.data[c * hw + i] * vv.data[c];
    }
    if (t->requires_grad(v)) {
      Tensor& gv = t->grad_buf(v.id);
      for (int64_t c = 0; c < C; ++c) {
        double acc = 0;
        for (int64_t i = 0; i < hw; ++i) acc += g.data[c * hw + i] * xv.data[c * hw + i];
        gv.data[c] += acc;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// linear algebra

Var matmul(Var a, Var b) {
  check_same_tape(a, b);
  const Tensor &av = V(a), &bv = V(b);
  check_model(av.rank() == 2 && bv.rank() == 2 && av.dim(1) == bv.dim(0),
              "matmul: bad shapes " + av.shape_str() + " x " + bv.shape_str());
  int64_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor y({m, n});
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t p = 0; p < k; ++p) {
      double aip = av.data[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = &bv.data[p * n];
      double* yrow = &y.data[i * n];
      for (int64_t j = 0; j < n; ++j) yrow[j] += aip * brow[j];
    }
  }
  Tape* t = a.tape;
  return t->make_node(std::move(y), rg(a) || rg(b),
                      [t, a, b, m, k, n, id = static_cast<int>(t->size())]() {
    const Tensor& g = t->grad_buf(id);
    const Tensor &av = t->val(a), &bv = t->val(b);
    if (t->requires_grad(a)) {
      Tensor& ga = t->grad_buf(a.id);  // dA = g . B^T
      for (int64_t i = 0; i < m; ++i)
        for (int64_t p = 0; p < k; ++p) {
          double acc = 0;
          const double* grow = &g.data[i * n];
          const double* brow = &bv.data[p * n];
          for (int64_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
          ga.data[i * k + p] += acc;
        }
    }
    if (t->requires_grad(b)) {
      Tensor& gb = t->grad_buf(b.id);  // dB = A^T . g
      for (int64_t p = 0; p < k; ++p)
        for (int64_t i = 0; i < m; ++i) {
          double apk = av.data[i * k + p];
          if (apk == 0.0) continue;
          const double* grow = &g.data[i * n];
          double* gbrow = &gb.data[p * n];
          for (int64_t j = 0; j < n; ++j) gbrow[j] += apk * grow[j];
        }
    }
  });
}

Var transpose(Var a) {
  const Tensor& av = V(a);
  check_model(av.rank() == 2, "transpose: rank-2 only");
  int64_t m = av.dim(0), n = av.dim(1);
  Tensor y({n, m});
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) y.data[j * m + i] = av.data[i * n + j];
  Tape* t = a.tape;
  return t->make_node(std::move(y), rg(a), [t, a, m, n, id = static_cast<int>(t->size())]() {
    const Tensor& g = t->grad_buf(id);
    Tensor& ga = t->grad_buf(a.id);
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < n; ++j) ga.data[i * n + j] += g.data[j * m + i];
  });
}

Var linear(Var x, Var w, Var b) {
  check_same_tape(x, w);
  check_same_tape(x, b);
  const Tensor &xv = V(x), &wv = V(w), &bv = V(b);
  check_model(xv.rank() == 2 && wv.rank() == 2 && xv.dim(1) == wv.dim(1) &&
                  bv.numel() == wv.dim(0),
              "linear: bad shapes x" + xv.shape_str() + " w" + wv.shape_str());
  int64_t n = xv.dim(0), din = xv.dim(1), dout = wv.dim(0);
  Tensor y({n, dout});
  for (int64_t i = 0; i < n; ++i) {
    const double* xrow = &xv.data[i * din];
    double* yrow = &y.data[i * dout];
    for (int64_t o = 0; o < dout; ++o) {
      const double* wrow = &wv.data[o * din];
      double acc = bv.data[o];
      for (int64_t p = 0; p < din; ++p) acc += xrow[p] * wrow[p];
      yrow[o] = acc;
    }
  }
  Tape* t = x.tape;
  return t->make_node(std::move(y), rg(x) || rg(w) || rg(b),
                      [t, x, w, b, n, din, dout, id = static_cast<int>(t->size())]() {
    const Tensor& g = t->grad_buf(id);
    const Tensor &xv = t->val(x), &wv = t->val(w);
    if (t->requires_grad(x)) {
      Tensor& gx = t->grad_buf(x.id);  // dx = g . W
      for (int64_t i = 0; i < n; ++i)
        for (int64_t o = 0; o < dout; ++o) {
          double go = g.data[i * dout + o];
          if (go == 0.0) continue;
          const double* wrow = &wv.data[o * din];
          double* gxrow = &gx.data[i * din];
          for (int64_t p = 0; p < din; ++p) gxrow[p] += go * wrow[p];
        }
    }
    if (t->requires_grad(w)) {
      Tensor& gw = t->grad_buf(w.id);  // dW = g^T . x
      for (int64_t i = 0; i < n; ++i)
        for (int64_t o = 0; o < dout; ++o) {
          double go = g.data[i * dout + o];
          if (go == 0.0) continue;
          const double* xrow = &xv.data[i * din];
          double* gwrow = &gw.data[o * din];
          for (int64_t p = 0; p < din; ++p) gwrow[p] += go * xrow[p];
        }
    }
    if (t->requires_grad(b)) {
      Tensor& gb = t->grad_buf(b.id);
      for (int64_t i = 0; i < n; ++i)
        for (int64_t o = 0; o < dout; ++o) gb.data[o] += g.data[i * dout + o];
    }
  });
}

// ---------------------------------------------------------------------------
// shape manipulation

Var reshape(Var x, std::vector<int64_t> shape) {
  const Tensor& xv = V(x);
  check_model(Tensor::numel_of(shape) == xv.numel(), "reshape: numel mismatch");
  Tensor y;
  y.shape = std::move(shape);
  y.data = xv.data;
  Tape* t = x.tape;
  return t->make_node(std::move(y), rg(x), [t, x, id = static_cast<int>(t->size())]() {
    const Tensor& g = t->grad_buf(id);
    Tensor& gx = t->grad_buf(x.id);
    for (int64_t i = 0; i < g.numel(); ++i) gx.data[i] += g.data[i];
  });
}

Var concat_rows(Var a, Var b) {
  check_same_tape(a, b);
  const Tensor &av = V(a), &bv = V(b);
  check_model(av.rank() == 2 && bv.rank() == 2 && av.dim(1) == bv.dim(1),
              "concat_rows: bad shapes");
  int64_t na = av.dim(0), nb = bv.dim(0), d = av.dim(1);
  Tensor y({na + nb, d});
  std::copy(av.data.begin(), av.data.end(), y.data.begin());
  std::copy(bv.data.begin(), bv.data.end(), y.data.begin() + na * d);
  Tape* t = a.tape;
  return t->make_node(std::move(y), rg(a) || rg(b),
                      [t, a, b, na, nb, d, id = static_cast<int>(t->size())]() {
    const Tensor& g = t->grad_buf(id);
    if (t->requires_grad(a)) {
      Tensor& ga = t->grad_buf(a.id);
      for (int64_t i = 0; i < na * d; ++i) ga.data[i] += g.data[i];
    }
    if (t->requires_grad(b)) {
      Tensor& gb = t->grad_buf(b.id);
      for (int64_t i = 0; i < nb * d; ++i) gb.data[i] += g.data[na * d + i];
    }
  });
}

Var slice_rows(Var x, int64_t off, int64_t count) {
  const Tensor& xv = V(x);
  check_model(xv.rank() == 2 && off >= 0 && off + count <= xv.dim(0), "slice_rows: out of range");
  int64_t d = xv.dim(1);
  Tensor y({count, d});
  std::copy(xv.data.begin() + off * d, xv.data.begin() + (off + count) * d, y.data.begin());
  Tape* t = x.tape;
  return t->make_node(std::move(y), rg(x), [t, x, off, count, d, id = static_cast<int>(t->size())]() {
    const Tensor& g = t->grad_buf(id);
    Tensor& gx = t->grad_buf(x.id);
    for (int64_t i = 0; i < count * d; ++i) gx.data[off * d + i] += g.data[i];
  });
}

Var concat_cols(Var a, Var b) {
  check_same_tape(a, b);
  const Tensor &av = V(a), &bv = V(b);
  check_model(av.rank() == 2 && bv.rank() == 2 && av.dim(0) == bv.dim(0),
              "concat_cols: bad shapes");
  int64_t n = av.dim(0), da = av.dim(1), db = bv.dim(1);
  Tensor y({n, da + db});
  for (int64_t i = 0; i < n; ++i) {
    std::copy(&av.data[i * da], &av.data[(i + 1) * da], &y.data[i * (da + db)]);
    std::copy(&bv.data[i * db], &bv.data[(i + 1) * db], &y.data[i * (da + db) + da]);
  }
  Tape* t = a.tape;
  return t->make_node(std::move(y), rg(a) || rg(b),
                      [t, a, b, n, da, db, id = static_cast<int>(t->size())]() {
    const Tensor& g = t->grad_buf(id);
    if (t->requires_grad(a)) {
      Tensor& ga = t->grad_buf(a.id);
      for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < da; ++j) ga.data[i * da + j] += g.data[i * (da + db) + j];
    }
    if (t->requires_grad(b)) {
      Tensor& gb = t->grad_buf(b.id);
      for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < db; ++j) gb.data[i * db + j] += g.data[i * (da + db) + da + j];
    }
  });
}

Var slice_cols(Var x, int64_t off, int64_t count) {
  const Tensor& xv = V(x);
  check_model(xv.rank() == 2 && off >= 0 && off + count <= xv.dim(1), "slice_cols: out of range");
  int64_t n = xv.dim(0), d = xv.dim(1);
  Tensor y({n, count});
  for (int64_t i = 0; i < n; ++i)
    std::copy(&xv.data[i * d + off], &xv.data[i * d + off + count], &y.data[i * count]);
  Tape* t = x.tape;
  return t->make_node(std::move(y), rg(x),
                      [t, x, off, count, n, d, id = static_cast<int>(t->size())]() {
    const Tensor& g = t->grad_buf(id);
    Tensor& gx = t->grad_buf(x.id);
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < count; ++j) gx.data[i * d + off + j] += g.data[i * count + j];
  });
}

Var concat_channels(Var a, Var b) {
  check_same_tape(a, b);
  const Tensor &av = V(a), &bv = V(b);
  check_model(av.rank() == 3 && bv.rank() == 3 && av.dim(1) == bv.dim(1) && av.dim(2) == bv.dim(2),
              "concat_channels: bad shapes");
  int64_t ca = av.dim(0), cb = bv.dim(0), hw = av.dim(1) * av.dim(2);
  Tensor y({ca + cb, av.dim(1), av.dim(2)});
  std::copy(av.data.begin(), av.data.end(), y.data.begin());
  std::copy(bv.data.begin(), bv.data.end(), y.data.begin() + ca * hw);
  Tape* t = a.tape;
  return t->make_node(std::move(y), rg(a) || rg(b),
                      [t, a, b, ca, cb, hw, id = static_cast<int>(t->size())]() {
    const Tensor& g = t->grad_buf(id);
    if (t->requires_grad(a)) {
      Tensor& ga = t->grad_buf(a.id);
      for (int64_t i = 0; i < ca * hw; ++i) ga.data[i] += g.data[i];
    }
    if (t->requires_grad(b)) {
      Tensor& gb = t->grad_buf(b.id);
      for (int64_t i = 0; i < cb * hw; ++i) gb.data[i] += g.data[ca * hw + i];
    }
  });
}

Var chw_to_tokens(Var x) {
  const Tensor& xv = V(x);
  check_model(xv.rank() == 3, "chw_to_tokens: rank-3 input required");
  int64_t C = xv.dim(0), hw = xv.dim(1) * xv.dim(2);
  Tensor y({hw, C});
  for (int64_t c = 0; c < C; ++c)
    for (int64_t p = 0; p < hw; ++p) y.data[p * C + c] = xv.data[c * hw + p];
  Tape* t = x.tape;
  return t->make_node(std::move(y), rg(x), [t, x, C, hw, id = static_cast<int>(t->size())]() {
    const Tensor& g = t->grad_buf(id);
    Tensor& gx = t->grad_buf(x.id);
    for (int64_t c = 0; c < C; ++c)
      for (int64_t p = 0; p < hw; ++p) gx.data[c * hw + p] += g.data[p * C + c];
  });
}

Var tokens_to_chw(Var x, int64_t h, int64_t w) {
  const Tensor& xv = V(x);
  check_model(xv.rank() == 2 && xv.dim(0) == h * w, "tokens_to_chw: token count mismatch");
  int64_t C = xv.dim(1), hw = h * w;
  Tensor y({C, h, w});
  for (int64_t p = 0; p < hw; ++p)
    for (int64_t c = 0; c < C; ++c) y.data[c * hw + p] = xv.data[p * C + c];
  Tape* t = x.tape;
  return t->make_node(std::move(y), rg(x), [t, x, C, hw, id = static_cast<int>(t->size())]() {
    const Tensor& g = t->grad_buf(id);
    Tensor& gx = t->grad_buf(x.id);
    for (int64_t p = 0; p < hw; ++p)
      for (int64_t c = 0; c < C; ++c) gx.data[p * C + c] += g.data[c * hw + p];
  });
}

// ---------------------------------------------------------------------------
// reductions / normalization

Var sum_all(Var x) {
  const Tensor& xv = V(x);
  double s = 0;
  for (double v : xv.data) s += v;
  Tape* t = x.tape;
  return t->make_node(Tensor::scalar(s), rg(x), [t, x, id = static_cast<int>(t->size())]() {
    double g = t->grad_buf(id).data[0];
    Tensor& gx = t->grad_buf(x.id);
    for (int64_t i = 0; i < gx.numel(); ++i) gx.data[i] += g;
  });
}

Var mean_all(Var x) {
  const Tensor& xv = V(x);
  double s = 0;
  for (double v : xv.data) s += v;
  int64_t n = xv.numel();
  Tape* t = x.tape;
  return t->make_node(Tensor::scalar(s / static_cast<double>(n)), rg(x),
                      [t, x, n, id = static_cast<int>(t->size())]() {
    double g = t->grad_buf(id).data[0] / static_cast<double>(n);
    Tensor& gx = t->grad_buf(x.id);
    for (int64_t i = 0; i < gx.numel(); ++i) gx.data[i] += g;
  });
}

Var mean_rows(Var x) {
  const Tensor& xv = V(x);
  check_model(xv.rank() == 2, "mean_rows: rank-2 input required");
  int64_t n = xv.dim(0), d = xv.dim(1);
  Tensor y({1, d});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < d; ++j) y.data[j] += xv.data[i * d + j];
  for (int64_t j = 0; j < d; ++j) y.data[j] /= static_cast<double>(n);
  Tape* t = x.tape;
  return t->make_node(std::move(y), rg(x), [t, x, n, d, id = static_cast<int>(t->size())]() {
    const Tensor& g = t->grad_buf(id);
    Tensor& gx = t->grad_buf(x.id);
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < d; ++j) gx.data[i * d + j] += g.data[j] / static_cast<double>(n);
  });
}

Var softmax_rows(Var x) {
  const Tensor& xv = V(x);
  check_model(xv.rank() == 2, "softmax_rows: rank-2 input required");
  int64_t n = xv.dim(0), d = xv.dim(1);
  Tensor y({n, d});
  for (int64_t i = 0; i < n; ++i) {
    const double* xr = &xv.data[i * d];
    double* yr = &y.data[i * d];
    double mx = xr[0];
    for (int64_t j = 1; j < d; ++j) mx = std::max(mx, xr[j]);
    double s = 0;
    for (int64_t j = 0; j < d; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      s += yr[j];
    }
    for (int64_t j = 0; j < d; ++j) yr[j] /= s;
  }
  Tape* t = x.tape;
  return t->make_node(std::move(y), rg(x), [t, x, n, d, id = static_cast<int>(t->size())]() {
    const Tensor& g = t->grad_buf(id);
    const Tensor& yv = t->val(Var{t, id});
    Tensor& gx = t->grad_buf(x.id);
    for (int64_t i = 0; i < n; ++i) {
      const double* yr = &yv.data[i * d];
      const double* gr = &g.data[i * d];
      double dot = 0;
      for (int64_t j = 0; j < d; ++j) dot += yr[j] * gr[j];
      for (int64_t j = 0; j < d; ++j) gx.data[i * d + j] += yr[j] * (gr[j] - dot);
    }
  });
}

Var log_softmax_rows(Var x) {
  const Tensor& xv = V(x);
  check_model(xv.rank() == 2, "log_softmax_rows: rank-2 input required");
  int64_t n = xv.dim(0), d = xv.dim(1);
  Tensor y({n, d});
  for (int64_t i = 0; i < n; ++i) {
    const double* xr = &xv.data[i * d];
    double mx = xr[0];
    for (int64_t j = 1; j < d; ++j) mx = std::max(mx, xr[j]);
    double s = 0;
    for (int64_t j = 0; j < d; ++j) s += std::exp(xr[j] - mx);
    double lse = mx + std::log(s);
    for (int64_t j = 0; j < d; ++j) y.data[i * d + j] = xr[j] - lse;
  }
  Tape* t = x.tape;
  return t->make_node(std::move(y), rg(x), [t, x, n, d, id = static_cast<int>(t->size())]() {
    const Tensor& g = t->grad_buf(id);
    const Tensor& yv = t->val(Var{t, id});
    Tensor& gx = t->grad_buf(x.id);
    for (int64_t i = 0; i < n; ++i) {
      double gs = 0;
      for (int64_t j = 0; j < d; ++j) gs += g.data[i * d + j];
      for (int64_t j = 0; j < d; ++j)
        gx.data[i * d + j] += g.data[i * d + j] - std::exp(yv.data[i * d + j]) * gs;
    }
  });
}

Var l2_normalize_rows(Var x, double eps) {
  const Tensor& xv = V(x);
  check_model(xv.rank() == 2, "l2_normalize_rows: rank-2 input required");
  int64_t n = xv.dim(0), d = xv.dim(1);
  Tensor y({n, d});
  for (int64_t i = 0; i < n; ++i) {
    double ss = 0;
    for (int64_t j = 0; j < d; ++j) ss += xv.data[i * d + j] * xv.data[i * d + j];
    double inv = 1.0 / std::sqrt(ss + eps);
    for (int64_t j = 0; j < d; ++j) y.data[i * d + j] = xv.data[i * d + j] * inv;
  }
  Tape* t = x.tape;
  return t->make_node(std::move(y), rg(x), [t, x, n, d, eps, id = static_cast<int>(t->size())]() {
    const Tensor& g = t->grad_buf(id);
    const Tensor& xv = t->val(x);
    Tensor& gx = t->grad_buf(x.id);
    for (int64_t i = 0; i < n; ++i) {
      double ss = 0, xg = 0;
      for (int64_t j = 0; j < d; ++j) {
        ss += xv.data[i * d + j] * xv.data[i * d + j];
        xg += xv.data[i * d + j] * g.data[i * d + j];
      }
      double inv = 1.0 / std::sqrt(ss + eps);
      double inv3 = inv * inv * inv;
      for (int64_t j = 0; j < d; ++j)
        gx.data[i * d + j] += g.data[i * d + j] * inv - xv.data[i * d + j] * inv3 * xg;
    }
  });
}

Var layer_norm_rows(Var x, Var gamma, Var beta, double eps) {
  check_same_tape(x, gamma);
  check_same_tape(x, beta);
  const Tensor &xv = V(x), &gv = V(gamma), &bv = V(beta);
  check_model(xv.rank() == 2 && gv.numel() == xv.dim(1) && bv.numel() == xv.dim(1),
              "layer_norm_rows: bad shapes");
  int64_t n = xv.dim(0), d = xv.dim(1);
  Tensor y({n, d});
  for (int64_t i = 0; i < n; ++i) {
    const double* xr = &xv.data[i * d];
    double mu = 0;
    for (int64_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<double>(d);
    double var = 0;
    for (int64_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(d);
    double inv = 1.0 / std::sqrt(var + eps);
    for (int64_t j = 0; j < d; ++j)
      y.data[i * d + j] = (xr[j] - mu) * inv * gv.data[j] + bv.data[j];
  }
  Tape* t = x.tape;
  return t->make_node(std::move(y), rg(x) || rg(gamma) || rg(beta),
                      [t, x, gamma, beta, n, d, eps, id = static_cast<int>(t->size())]() {
    const Tensor& g = t->grad_buf(id);
    const Tensor &xv = t->val(x), &gv = t->val(gamma);
    for (int64_t i = 0; i < n; ++i) {
      const double* xr = &xv.data[i * d];
      const double* gr = &g.data[i * d];
      double mu = 0;
      for (int64_t j = 0; j < d; ++j) mu += xr[j];
      mu /= static_cast<double>(d);
      double var = 0;
      for (int64_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
      var /= static_cast<double>(d);
      double inv = 1.0 / std::sqrt(var + eps);
      if (t->requires_grad(gamma)) {
        Tensor& gg = t->grad_buf(gamma.id);
        for (int64_t j = 0; j < d; ++j) gg.data[j] += gr[j] * (xr[j] - mu) * inv;
      }
      if (t->requires_grad(beta)) {
        Tensor& gb = t->grad_buf(beta.id);
        for (int64_t j = 0; j < d; ++j) gb.data[j] += gr[j];
      }
      if (t->requires_grad(x)) {
        Tensor& gx = t->grad_buf(x.id);
        // dxhat = g * gamma; standard layer-norm backward
        double sum_dxhat = 0, sum_dxhat_xhat = 0;
        for (int64_t j = 0; j < d; ++j) {
          double dxh = gr[j] * gv.data[j];
          double xh = (xr[j] - mu) * inv;
          sum_dxhat += dxh;
          sum_dxhat_xhat += dxh * xh;
        }
        for (int64_t j = 0; j < d; ++j) {
          double dxh = gr[j] * gv.data[j];
          double xh = (xr[j] - mu) * inv;
          gx.data[i * d + j] +=
              inv * (dxh - sum_dxhat / static_cast<double>(d) -
                     xh * sum_dxhat_xhat / static_cast<double>(d));
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// spatial ops

Var conv2d(Var x, Var w, Var b, int stride, int pad) {
  check_same_tape(x, w);
  check_same_tape(x, b);
  const Tensor &xv = V(x), &wv = V(w), &bv = V(b);
  check_model(xv.rank() == 3 && wv.rank() == 4 && wv.dim(1) == xv.dim(0) &&
                  bv.numel() == wv.dim(0),
              "conv2d: bad shapes x" + xv.shape_str() + " w" + wv.shape_str());
  int64_t ci = xv.dim(0), h = xv.dim(1), wd = xv.dim(2);
  int64_t co = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
  int64_t oh = (h + 2 * pad - kh) / stride + 1;
  int64_t ow = (wd + 2 * pad - kw) / stride + 1;
  check_model(oh > 0 && ow > 0, "conv2d: empty output");
  Tensor y({co, oh, ow});
  for (int64_t o = 0; o < co; ++o) {
    for (int64_t yy = 0; yy < oh; ++yy) {
      for (int64_t xx = 0; xx < ow; ++xx) {
        double acc = bv.data[o];
        int64_t iy0 = yy * stride - pad, ix0 = xx * stride - pad;
        for (int64_t c = 0; c < ci; ++c) {
          const double* xplane = &xv.data[c * h * wd];
          const double* wplane = &wv.data[((o * ci + c) * kh) * kw];
          for (int64_t ky = 0; ky < kh; ++ky) {
            int64_t iy = iy0 + ky;
            if (iy < 0 || iy >= h) continue;
            for (int64_t kx = 0; kx < kw; ++kx) {
              int64_t ix = ix0 + kx;
              if (ix < 0 || ix >= wd) continue;
              acc += xplane[iy * wd + ix] * wplane[ky * kw + kx];
            }
          }
        }
        y.data[(o * oh + yy) * ow + xx] = acc;
      }
    }
  }
  Tape* t = x.tape;
  return t->make_node(std::move(y), rg(x) || rg(w) || rg(b),
                      [t, x, w, b, stride, pad, ci, h, wd, co, kh, kw, oh, ow,
                       id = static_cast<int>(t->size())]() {
    const Tensor& g = t->grad_buf(id);
    const Tensor &xv = t->val(x), &wv = t->val(w);
    bool nx = t->requires_grad(x), nw = t->requires_grad(w), nb = t->requires_grad(b);
    Tensor* gx = nx ? &t->grad_buf(x.id) : nullptr;
    Tensor* gw = nw ? &t->grad_buf(w.id) : nullptr;
    Tensor* gb = nb ? &t->grad_buf(b.id) : nullptr;
    for (int64_t o = 0; o < co; ++o) {
      for (int64_t yy = 0; yy < oh; ++yy) {
        for (int64_t xx = 0; xx < ow; ++xx) {
          double go = g.data[(o * oh + yy) * ow + xx];
          if (go == 0.0) continue;
          if (nb) gb->data[o] += go;
          int64_t iy0 = yy * stride - pad, ix0 = xx * stride - pad;
          for (int64_t c = 0; c < ci; ++c) {
            const double* xplane = &xv.data[c * h * wd];
            const double* wplane = &wv.data[((o * ci + c) * kh) * kw];
            double* gxplane = nx ? &gx->data[c * h * wd] : nullptr;
            double* gwplane = nw ? &gw->data[((o * ci + c) * kh) * kw] : nullptr;
            for (int64_t ky = 0; ky < kh; ++ky) {
              int64_t iy = iy0 + ky;
              if (iy < 0 || iy >= h) continue;
              for (int64_t kx = 0; kx < kw; ++kx) {
                int64_t ix = ix0 + kx;
                if (ix < 0 || ix >= wd) continue;
                if (nx) gxplane[iy * wd + ix] += go * wplane[ky * kw + kx];
                if (nw) gwplane[ky * kw + kx] += go * xplane[iy * wd + ix];
              }
            }
          }
        }
      }
    }
  });
}

Var group_norm(Var x, Var gamma, Var beta, int groups, double eps) {
  check_same_tape(x, gamma);
  check_same_tape(x, beta);
  const Tensor &xv = V(x), &gv = V(gamma), &bv = V(beta);
  check_model(xv.rank() == 3 && gv.numel() == xv.dim(0) && bv.numel() == xv.dim(0),
              "group_norm: bad shapes");
  int64_t C = xv.dim(0), hw = xv.dim(1) * xv.dim(2);
  check_model(C % groups == 0, "group_norm: channels not divisible by groups");
  int64_t cpg = C / groups;
  int64_t m = cpg * hw;  // elements per group
  Tensor y(xv.shape);
  for (int64_t gidx = 0; gidx < groups; ++gidx) {
    const double* xg = &xv.data[gidx * m];
    double mu = 0;
    for (int64_t i = 0; i < m; ++i) mu += xg[i];
    mu /= static_cast<double>(m);
    double var = 0;
    for (int64_t i = 0; i < m; ++i) var += (xg[i] - mu) * (xg[i] - mu);
    var /= static_cast<double>(m);
    double inv = 1.0 / std::sqrt(var + eps);
    for (int64_t cc = 0; cc < cpg; ++cc) {
      int64_t c = gidx * cpg + cc;
      for (int64_t i = 0; i < hw; ++i) {
        double xh = (xv.data[c * hw + i] - mu) * inv;
        y.data[c * hw + i] = xh * gv.data[c] + bv.data[c];
      }
    }
  }
  Tape* t = x.tape;
  return t->make_node(std::move(y), rg(x) || rg(gamma) || rg(beta),
                      [t, x, gamma, beta, groups, eps, C, hw, id = static_cast<int>(t->size())]() {
    const Tensor& g = t->grad_buf(id);
    const Tensor &xv = t->val(x), &gv = t->val(gamma);
    int64_t cpg = C / groups;
    int64_t m = cpg * hw;
    bool nx = t->requires_grad(x);
    for (int64_t gidx = 0; gidx < groups; ++gidx) {
      const double* xg = &xv.data[gidx * m];
      double mu = 0;
      for (int64_t i = 0; i < m; ++i) mu += xg[i];
      mu /= static_cast<double>(m);
      double var = 0;
      for (int64_t i = 0; i < m; ++i) var += (xg[i] - mu) * (xg[i] - mu);
      var /= static_cast<double>(m);
      double inv = 1.0 / std::sqrt(var + eps);
      if (t->requires_grad(gamma)) {
        Tensor& gg = t->grad_buf(gamma.id);
        for (int64_t cc = 0; cc < cpg; ++cc) {
          int64_t c = gidx * cpg + cc;
          double acc = 0;
          for (int64_t i = 0; i < hw; ++i)
            acc += g.data[c * hw + i] * (xv.data[c * hw + i] - mu) * inv;
          gg.data[c] += acc;
        }
      }
      if (t->requires_grad(beta)) {
        Tensor& gb = t->grad_buf(beta.id);
        for (int64_t cc = 0; cc < cpg; ++cc) {
          int64_t c = gidx * cpg + cc;
          double acc = 0;
          for (int64_t i = 0; i < hw; ++i) acc += g.data[c * hw + i];
          gb.data[c] += acc;
        }
      }
      if (nx) {
        Tensor& gx = t->grad_buf(x.id);
        double sum_dxhat = 0, sum_dxhat_xhat = 0;
        for (int64_t cc = 0; cc < cpg; ++cc) {
          int64_t c = gidx * cpg + cc;
          for (int64_t i = 0; i < hw; ++i) {
            double dxh = g.data[c * hw + i] * gv.data[c];
            double xh = (xv.data[c * hw + i] - mu) * inv;
            sum_dxhat += dxh;
            sum_dxhat_xhat += dxh * xh;
          }
        }
        for (int64_t cc = 0; cc < cpg; ++cc) {
          int64_t c = gidx * cpg + cc;
          for (int64_t i = 0; i < hw; ++i) {
            double dxh = g.data[c * hw + i] * gv.data[c];
            double xh = (xv.data[c * hw + i] - mu) * inv;
            gx.data[c * hw + i] += inv * (dxh - sum_dxhat / static_cast<double>(m) -
                                          xh * sum_dxhat_xhat / static_cast<double>(m));
          }
        }
      }
    }
  });
}

Var upsample_nearest2x(Var x) {
  const Tensor& xv = V(x);
  check_model(xv.rank() == 3, "upsample_nearest2x: rank-3 input required");
  int64_t C = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
  Tensor y({C, 2 * h, 2 * w});
  for (int64_t c = 0; c < C; ++c)
    for (int64_t yy = 0; yy < 2 * h; ++yy)
      for (int64_t xx = 0; xx < 2 * w; ++xx)
        y.data[(c * 2 * h + yy) * 2 * w + xx] = xv.data[(c * h + yy / 2) * w + xx / 2];
  Tape* t = x.tape;
  return t->make_node(std::move(y), rg(x), [t, x, C, h, w, id = static_cast<int>(t->size())]() {
    const Tensor& g = t->grad_buf(id);
    Tensor& gx = t->grad_buf(x.id);
    for (int64_t c = 0; c < C; ++c)
      for (int64_t yy = 0; yy < 2 * h; ++yy)
        for (int64_t xx = 0; xx < 2 * w; ++xx)
          gx.data[(c * h + yy / 2) * w + xx / 2] += g.data[(c * 2 * h + yy) * 2 * w + xx];
  });
}

Var global_avg_pool(Var x) {
  const Tensor& xv = V(x);
  check_model(xv.rank() == 3, "global_avg_pool: rank-3 input required");
  int64_t C = xv.dim(0), hw = xv.dim(1) * xv.dim(2);
  Tensor y({1, C});
  for (int64_t c = 0; c < C; ++c) {
    double acc = 0;
    for (int64_t i = 0; i < hw; ++i) acc += xv.data[c * hw + i];
    y.data[c] = acc / static_cast<double>(hw);
  }
  Tape* t = x.tape;
  return t->make_node(std::move(y), rg(x), [t, x, C, hw, id = static_cast<int>(t->size())]() {
    const Tensor& g = t->grad_buf(id);
    Tensor& gx = t->grad_buf(x.id);
    for (int64_t c = 0; c < C; ++c)
      for (int64_t i = 0; i < hw; ++i) gx.data[c * hw + i] += g.data[c] / static_cast<double>(hw);
  });
}

Var gather_rows(Var table, const std::vector<int>& ids) {
  const Tensor& tv = V(table);
  check_model(tv.rank() == 2, "gather_rows: rank-2 table required");
  int64_t d = tv.dim(1);
  Tensor y({static_cast<int64_t>(ids.size()), d});
  for (size_t i = 0; i < ids.size(); ++i) {
    check_model(ids[i] >= 0 && ids[i] < tv.dim(0), "gather_rows: id out of range");
    std::copy(&tv.data[static_cast<int64_t>(ids[i]) * d],
              &tv.data[(static_cast<int64_t>(ids[i]) + 1) * d], &y.data[static_cast<int64_t>(i) * d]);
  }
  Tape* t = table.tape;
  return t->make_node(std::move(y), rg(table),
                      [t, table, ids, d, id = static_cast<int>(t->size())]() {
    const Tensor& g = t->grad_buf(id);
    Tensor& gt = t->grad_buf(table.id);
    for (size_t i = 0; i < ids.size(); ++i)
      for (int64_t j = 0; j < d; ++j)
        gt.data[static_cast<int64_t>(ids[i]) * d + j] += g.data[static_cast<int64_t>(i) * d + j];
  });
}

// ---------------------------------------------------------------------------
// region pooling

namespace {

// Bilinear sample with border clamping; returns value and accumulates
// feature/coordinate gradients when requested.
struct BilinearRef {
  int64_t i0, i1, j0, j1;
  double fy, fx;       // interpolation weights
  double dux, duy;     // d(clamped coord)/d(raw coord): 1 inside, 0 at borders
};

BilinearRef locate(double u, double v, int64_t h, int64_t w) {
  BilinearRef r{};
  double uc = u, vc = v;
  r.dux = 1.0;
  r.duy = 1.0;
  if (uc < 0) { uc = 0; r.dux = 0; }
  if (uc > static_cast<double>(w - 1)) { uc = static_cast<double>(w - 1); r.dux = 0; }
  if (vc < 0) { vc = 0; r.duy = 0; }
  if (vc > static_cast<double>(h - 1)) { vc = static_cast<double>(h - 1); r.duy = 0; }
  int64_t j0 = static_cast<int64_t>(std::floor(uc));
  int64_t i0 = static_cast<int64_t>(std::floor(vc));
  if (j0 > w - 2) j0 = std::max<int64_t>(0, w - 2);
  if (i0 > h - 2) i0 = std::max<int64_t>(0, h - 2);
  r.j0 = j0;
  r.j1 = std::min(j0 + 1, w - 1);
  r.i0 = i0;
  r.i1 = std::min(i0 + 1, h - 1);
  r.fx = uc - static_cast<double>(j0);
  r.fy = vc - static_cast<double>(i0);
  return r;
}

}  // namespace

Var region_pool(Var feat, Var box, int grid) {
  check_same_tape(feat, box);
  const Tensor &fv = V(feat), &bv = V(box);
  check_model(fv.rank() == 3 && bv.numel() == 4, "region_pool: bad shapes");
  int64_t C = fv.dim(0), h = fv.dim(1), w = fv.dim(2);
  double cx = bv.data[0], cy = bv.data[1], bw = bv.data[2], bh = bv.data[3];
  // box corners in feature-pixel coordinates (continuous)
  double x1 = (cx - 0.5 * bw) * static_cast<double>(w) - 0.5;
  double y1 = (cy - 0.5 * bh) * static_cast<double>(h) - 0.5;
  double sw = bw * static_cast<double>(w);
  double sh = bh * static_cast<double>(h);
  int S = grid;
  Tensor y({static_cast<int64_t>(S) * S, C});
  std::vector<BilinearRef> refs(static_cast<size_t>(S) * S);
  for (int gy = 0; gy < S; ++gy) {
    for (int gx = 0; gx < S; ++gx) {
      double u = x1 + (static_cast<double>(gx) + 0.5) / S * sw;
      double v = y1 + (static_cast<double>(gy) + 0.5) / S * sh;
      BilinearRef r = locate(u, v, h, w);
      refs[static_cast<size_t>(gy * S + gx)] = r;
      for (int64_t c = 0; c < C; ++c) {
        const double* pl = &fv.data[c * h * w];
        double v00 = pl[r.i0 * w + r.j0], v01 = pl[r.i0 * w + r.j1];
        double v10 = pl[r.i1 * w + r.j0], v11 = pl[r.i1 * w + r.j1];
        double top = v00 * (1 - r.fx) + v01 * r.fx;
        double bot = v10 * (1 - r.fx) + v11 * r.fx;
        y.data[static_cast<int64_t>(gy * S + gx) * C + c] = top * (1 - r.fy) + bot * r.fy;
      }
    }
  }
  Tape* t = feat.tape;
  return t->make_node(std::move(y), rg(feat) || rg(box),
                      [t, feat, box, grid, C, h, w, refs, id = static_cast<int>(t->size())]() {
    const Tensor& g = t->grad_buf(id);
    const Tensor& fv = t->val(feat);
    int S = grid;
    bool nf = t->requires_grad(feat), nb = t->requires_grad(box);
    Tensor* gf = nf ? &t->grad_buf(feat.id) : nullptr;
    Tensor* gb = nb ? &t->grad_buf(box.id) : nullptr;
    for (int gy = 0; gy < S; ++gy) {
      for (int gx = 0; gx < S; ++gx) {
        const BilinearRef& r = refs[static_cast<size_t>(gy * S + gx)];
        // du/dparams via u = (cx - bw/2 + (gx+.5)/S*bw) * w - .5
        double au = (static_cast<double>(gx) + 0.5) / S - 0.5;  // du/dbw before *w
        double av = (static_cast<double>(gy) + 0.5) / S - 0.5;
        for (int64_t c = 0; c < C; ++c) {
          double go = g.data[static_cast<int64_t>(gy * S + gx) * C + c];
          if (go == 0.0) continue;
          const double* pl = &fv.data[c * h * w];
          double v00 = pl[r.i0 * w + r.j0], v01 = pl[r.i0 * w + r.j1];
          double v10 = pl[r.i1 * w + r.j0], v11 = pl[r.i1 * w + r.j1];
          if (nf) {
            double* gpl = &gf->data[c * h * w];
            gpl[r.i0 * w + r.j0] += go * (1 - r.fx) * (1 - r.fy);
            gpl[r.i0 * w + r.j1] += go * r.fx * (1 - r.fy);
            gpl[r.i1 * w + r.j0] += go * (1 - r.fx) * r.fy;
            gpl[r.i1 * w + r.j1] += go * r.fx * r.fy;
          }
          if (nb) {
            double dv_du = ((v01 - v00) * (1 - r.fy) + (v11 - v10) * r.fy) * r.dux;
            double dv_dv = ((v10 - v00) * (1 - r.fx) + (v11 - v01) * r.fx) * r.duy;
            // u = (cx + au*bw) * w - 0.5 ; v = (cy + av*bh) * h - 0.5
            gb->data[0] += go * dv_du * static_cast<double>(w);
            gb->data[2] += go * dv_du * static_cast<double>(w) * au;
            gb->data[1] += go * dv_dv * static_cast<double>(h);
            gb->data[3] += go * dv_dv * static_cast<double>(h) * av;
          }
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// losses

Var cross_entropy_mean(Var logits, const std::vector<int>& targets) {
  const Tensor& lv = V(logits);
  check_model(lv.rank() == 2 && lv.dim(0) == static_cast<int64_t>(targets.size()),
              "cross_entropy_mean: bad shapes");
  int64_t n = lv.dim(0), k = lv.dim(1);
  double loss = 0;
  for (int64_t i = 0; i < n; ++i) {
    const double* xr = &lv.data[i * k];
    double mx = xr[0];
    for (int64_t j = 1; j < k; ++j) mx = std::max(mx, xr[j]);
    double s = 0;
    for (int64_t j = 0; j < k; ++j) s += std::exp(xr[j] - mx);
    double lse = mx + std::log(s);
    check_model(targets[static_cast<size_t>(i)] >= 0 && targets[static_cast<size_t>(i)] < k,
                "cross_entropy_mean: target out of range");
    loss += lse - xr[targets[static_cast<size_t>(i)]];
  }
  loss /= static_cast<double>(n);
  Tape* t = logits.tape;
  return t->make_node(Tensor::scalar(loss), rg(logits),
                      [t, logits, targets, n, k, id = static_cast<int>(t->size())]() {
    double g = t->grad_buf(id).data[0];
    const Tensor& lv = t->val(logits);
    Tensor& gl = t->grad_buf(logits.id);
    for (int64_t i = 0; i < n; ++i) {
      const double* xr = &lv.data[i * k];
      double mx = xr[0];
      for (int64_t j = 1; j < k; ++j) mx = std::max(mx, xr[j]);
      double s = 0;
      for (int64_t j = 0; j < k; ++j) s += std::exp(xr[j] - mx);
      for (int64_t j = 0; j < k; ++j) {
        double p = std::exp(xr[j] - mx) / s;
        double onehot = (j == targets[static_cast<size_t>(i)]) ? 1.0 : 0.0;
        gl.data[i * k + j] += g * (p - onehot) / static_cast<double>(n);
      }
    }
  });
}

Var seg_pixel_nll(Var scores, const std::vector<int>& labels, int ignore_index) {
  const Tensor& sv = V(scores);
  check_model(sv.rank() == 2 && sv.dim(1) == static_cast<int64_t>(labels.size()),
              "seg_pixel_nll: scores must be (K,P) with P == labels");
  int64_t K = sv.dim(0), P = sv.dim(1);
  constexpr double kEps = 1e-12;
  int64_t valid = 0;
  double loss = 0;
  for (int64_t p = 0; p < P; ++p) {
    int lbl = labels[static_cast<size_t>(p)];
    if (lbl == ignore_index) continue;
    check_model(lbl >= 0 && lbl < K, "seg_pixel_nll: label out of range");
    double total = 0;
    for (int64_t c = 0; c < K; ++c) total += sv.data[c * P + p];
    double pr = (sv.data[static_cast<int64_t>(lbl) * P + p] + kEps) /
                (total + static_cast<double>(K) * kEps);
    loss += -std::log(pr);
    ++valid;
  }
  // all pixels ignored: zero loss, zero gradient (detached constant)
  Tape* t = scores.tape;
  if (valid == 0) return t->constant(Tensor::scalar(0.0));
  loss /= static_cast<double>(valid);
  return t->make_node(Tensor::scalar(loss), rg(scores),
                      [t, scores, labels, ignore_index, K, P, valid,
                       id = static_cast<int>(t->size())]() {
    double g = t->grad_buf(id).data[0] / static_cast<double>(valid);
    const Tensor& sv = t->val(scores);
    Tensor& gs = t->grad_buf(scores.id);
    for (int64_t p = 0; p < P; ++p) {
      int lbl = labels[static_cast<size_t>(p)];
      if (lbl == ignore_index) continue;
      double total = 0;
      for (int64_t c = 0; c < K; ++c) total += sv.data[c * P + p];
      double denom = total + static_cast<double>(K) * kEps;
      double num = sv.data[static_cast<int64_t>(lbl) * P + p] + kEps;
      // d(-log(num/denom)) = -d(num)/num + d(denom)/denom
      for (int64_t c = 0; c < K; ++c) {
        double d = 1.0 / denom;
        if (c == lbl) d -= 1.0 / num;
        gs.data[c * P + p] += g * d;
      }
    }
  });
}

// ---------------------------------------------------------------------------

double central_difference(Tensor& param, int64_t index, double h,
                          const std::function<double()>& f) {
  double orig = param.data[index];
  param.data[index] = orig + h;
  double fp = f();
  param.data[index] = orig - h;
  double fm = f();
  param.data[index] = orig;
  return (fp - fm) / (2.0 * h);
}

}  // namespace mtl
