#pragma once

#include <array>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "tak/errors.hpp"

namespace tak {

// Dense row-major double tensor. All numerics in this project run in double;
// the gradient-check tolerances assume it.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
    data.assign(static_cast<size_t>(numel_of(shape)), 0.0);
  }
  Tensor(std::vector<int> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    if (static_cast<int64_t>(data.size()) != numel_of(shape))
      throw ShapeError("tensor data size does not match shape");
  }

  static int64_t numel_of(const std::vector<int>& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
  }

  static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }
  static Tensor full(std::vector<int> s, double v) {
    Tensor t(std::move(s));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }
  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int ndim() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[static_cast<size_t>(i)]; }

  double& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

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

// Integer label/mask grid with dims (D, H, W).
struct IntGrid {
  std::array<int, 3> dims{0, 0, 0};
  std::vector<int32_t> v;

  IntGrid() = default;
  IntGrid(int d, int h, int w) : dims{d, h, w} {
    v.assign(static_cast<size_t>(d) * h * w, 0);
  }

  int64_t numel() const { return static_cast<int64_t>(v.size()); }
  int32_t& at(int z, int y, int x) {
    return v[(static_cast<size_t>(z) * dims[1] + y) * dims[2] + x];
  }
  int32_t at(int z, int y, int x) const {
    return v[(static_cast<size_t>(z) * dims[1] + y) * dims[2] + x];
  }
  bool same_dims(const IntGrid& o) const { return dims == o.dims; }
};

// Nearest-neighbor downsample by factor 2 along every axis (source index 2*i).
IntGrid downsample2_nearest(const IntGrid& g);

}  // namespace tak
