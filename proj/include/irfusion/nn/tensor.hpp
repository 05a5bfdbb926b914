#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace irfusion::nn {

// Dense NCHW tensor, contiguous row-major (w fastest).
template <typename T>
struct Tensor {
  int n = 0, c = 0, h = 0, w = 0;
  std::vector<T> v;

  Tensor() = default;
  Tensor(int n_, int c_, int h_, int w_, T fill = T(0))
      : n(n_), c(c_), h(h_), w(w_), v(static_cast<size_t>(n_) * c_ * h_ * w_, fill) {
    if (n_ < 1 || c_ < 1 || h_ < 1 || w_ < 1) {
      throw std::invalid_argument("tensor dims must be >= 1, got " + shape_str());
    }
  }

  size_t size() const { return v.size(); }
  T* data() { return v.data(); }
  const T* data() const { return v.data(); }

  size_t idx(int in, int ic, int ih, int iw) const {
    return ((static_cast<size_t>(in) * c + ic) * h + ih) * w + iw;
  }
  T& at(int in, int ic, int ih, int iw) { return v[idx(in, ic, ih, iw)]; }
  const T& at(int in, int ic, int ih, int iw) const { return v[idx(in, ic, ih, iw)]; }

  void fill(T x) { std::fill(v.begin(), v.end(), x); }

  bool same_shape(const Tensor& o) const {
    return n == o.n && c == o.c && h == o.h && w == o.w;
  }

  std::string shape_str() const {
    return std::to_string(n) + "x" + std::to_string(c) + "x" + std::to_string(h) + "x" +
           std::to_string(w);
  }

  bool all_finite() const {
    for (const T x : v) {
      if (!std::isfinite(static_cast<double>(x))) return false;
    }
    return true;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(n, c, h, w);
    for (size_t i = 0; i < v.size(); ++i) out.v[i] = static_cast<U>(v[i]);
    return out;
  }
};

// Trainable value with its gradient and Adam state, all shape-locked together.
template <typename T>
struct Parameter {
  Tensor<T> value;
  Tensor<T> grad;
  Tensor<T> m;  // first moment
  Tensor<T> s;  // second moment
  long step = 0;

  Parameter() = default;
  explicit Parameter(const Tensor<T>& init)
      : value(init),
        grad(init.n, init.c, init.h, init.w),
        m(init.n, init.c, init.h, init.w),
        s(init.n, init.c, init.h, init.w) {}

  void zero_grad() { grad.fill(T(0)); }
};

}  // namespace irfusion::nn
