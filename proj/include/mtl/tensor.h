#pragma once

#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

namespace mtl {

// Dense row-major tensor of doubles. All model math runs at double
// precision; checkpoints narrow to f32 at the serialization boundary.
struct Tensor {
  std::vector<int64_t> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<int64_t> s) : shape(std::move(s)) {
    data.assign(static_cast<size_t>(numel_of(shape)), 0.0);
  }

  static int64_t numel_of(const std::vector<int64_t>& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
  }

  static Tensor zeros(std::vector<int64_t> s) { return Tensor(std::move(s)); }
  static Tensor full(std::vector<int64_t> s, double v) {
    Tensor t(std::move(s));
    for (double& x : t.data) x = v;
    return t;
  }
  static Tensor scalar(double v) {
    Tensor t({1});
    t.data[0] = v;
    return t;
  }
  static Tensor from(std::vector<int64_t> s, std::vector<double> d) {
    Tensor t;
    t.shape = std::move(s);
    t.data = std::move(d);
    return t;
  }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  int64_t dim(int i) const { return shape[static_cast<size_t>(i)]; }

  // 2-D accessors (rows x cols)
  double& at(int64_t r, int64_t c) { return data[static_cast<size_t>(r * shape[1] + c)]; }
  double at(int64_t r, int64_t c) const { return data[static_cast<size_t>(r * shape[1] + c)]; }
  // 3-D accessors (channels x height x width)
  double& at(int64_t c, int64_t h, int64_t w) {
    return data[static_cast<size_t>((c * shape[1] + h) * shape[2] + w)];
  }
  double at(int64_t c, int64_t h, int64_t w) const {
    return data[static_cast<size_t>((c * shape[1] + h) * shape[2] + w)];
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  std::string shape_str() const {
    std::string s = "(";
    for (size_t i = 0; i < shape.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(shape[i]);
    }
    return s + ")";
  }
};

// Integer mask/label plane (H x W).
struct IntMask {
  int64_t h = 0, w = 0;
  std::vector<int32_t> data;

  IntMask() = default;
  IntMask(int64_t hh, int64_t ww, int32_t fill = 0)
      : h(hh), w(ww), data(static_cast<size_t>(hh * ww), fill) {}

  int32_t& at(int64_t y, int64_t x) { return data[static_cast<size_t>(y * w + x)]; }
  int32_t at(int64_t y, int64_t x) const { return data[static_cast<size_t>(y * w + x)]; }
  bool operator==(const IntMask& o) const { return h == o.h && w == o.w && data == o.data; }
};

}  // namespace mtl
