#pragma once

#ifndef EIGEN_DONT_PARALLELIZE
#define EIGEN_DONT_PARALLELIZE  // GEMM threading is ours to control, see below
#endif

#include <Eigen/Core>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "irfusion/nn/tensor.hpp"

// Layer primitives. Forward/backward pairs; every backward ACCUMULATES into
// the gradient tensors it is given, so one producer can feed many consumers.
//
// Determinism contract: results are bit-identical for a given input
// regardless of thread count. Parallel loops only ever write disjoint
// elements; every reduction (weight gradients, bias gradients, batch-norm
// statistics) is accumulated per sample or per channel and folded in a fixed
// serial order.

namespace irfusion::nn {

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// ---------------------------------------------------------------------------
// activations

enum class Act { Linear, Mish, LeakyRelu, Sigmoid };

template <typename T>
inline T softplus_safe(T x) {
  return x > T(20) ? x : static_cast<T>(std::log1p(std::exp(static_cast<double>(x))));
}

template <typename T>
inline T sigmoid_stable(T x) {
  if (x >= T(0)) {
    const T e = static_cast<T>(std::exp(static_cast<double>(-x)));
    return T(1) / (T(1) + e);
  }
  const T e = static_cast<T>(std::exp(static_cast<double>(x)));
  return e / (T(1) + e);
}

template <typename T>
inline T mish(T x) {
  return x * static_cast<T>(std::tanh(static_cast<double>(softplus_safe(x))));
}

template <typename T>
inline T act_value(Act a, T x) {
  switch (a) {
    case Act::Linear: return x;
    case Act::Mish: return mish(x);
    case Act::LeakyRelu: return x > T(0) ? x : T(0.1) * x;
    case Act::Sigmoid: return sigmoid_stable(x);
  }
  return x;
}

template <typename T>
inline T act_derivative(Act a, T x) {
  switch (a) {
    case Act::Linear: return T(1);
    case Act::Mish: {
      const T t = static_cast<T>(std::tanh(static_cast<double>(softplus_safe(x))));
      return t + x * (T(1) - t * t) * sigmoid_stable(x);
    }
    case Act::LeakyRelu: return x > T(0) ? T(1) : T(0.1);
    case Act::Sigmoid: {
      const T s = sigmoid_stable(x);
      return s * (T(1) - s);
    }
  }
  return T(1);
}

template <typename T>
Tensor<T> act_forward(const Tensor<T>& x, Act a) {
  Tensor<T> out(x.n, x.c, x.h, x.w);
  const long total = static_cast<long>(x.size());
#pragma omp parallel for schedule(static)
  for (long i = 0; i < total; ++i) out.v[i] = act_value(a, x.v[i]);
  return out;
}

template <typename T>
void act_backward(const Tensor<T>& x, const Tensor<T>& gout, Act a, Tensor<T>& gx) {
  const long total = static_cast<long>(x.size());
#pragma omp parallel for schedule(static)
  for (long i = 0; i < total; ++i) gx.v[i] += gout.v[i] * act_derivative(a, x.v[i]);
}

// ---------------------------------------------------------------------------
// convolution (square kernel, cross-correlation) via im2col + GEMM

inline void conv_output_dims(int h, int w, int k, int stride, int pad, int& ho, int& wo,
                             const std::string& xs, const std::string& ws) {
  if (stride < 1 || pad < 0 || k < 1) {
    throw std::invalid_argument("conv2d: bad stride/pad/kernel (" + std::to_string(stride) +
                                "/" + std::to_string(pad) + "/" + std::to_string(k) + ")");
  }
  // floor division, the usual convention; stride-2 3x3 convs then halve even
  // inputs exactly (416 -> 208), trailing pixels that no window covers are
  // simply unused
  const int eh = h + 2 * pad - k;
  const int ew = w + 2 * pad - k;
  if (eh < 0 || ew < 0) {
    throw std::invalid_argument("conv2d: output dims not positive for input " + xs +
                                ", weight " + ws + ", stride " + std::to_string(stride) +
                                ", pad " + std::to_string(pad));
  }
  ho = eh / stride + 1;
  wo = ew / stride + 1;
}

template <typename T>
void check_conv_shapes(const Tensor<T>& x, const Tensor<T>& w) {
  if (w.c != x.c) {
    throw std::invalid_argument("conv2d: input channels " + std::to_string(x.c) +
                                " do not match weight channels " + std::to_string(w.c) +
                                " (input " + x.shape_str() + ", weight " + w.shape_str() + ")");
  }
  if (w.h != w.w) {
    throw std::invalid_argument("conv2d: kernel must be square, weight " + w.shape_str());
  }
}

template <typename T>
void im2col(const Tensor<T>& x, int in, int k, int stride, int pad, int ho, int wo,
            MatRM<T>& col) {
  for (int ci = 0; ci < x.c; ++ci) {
    const T* plane = x.data() + x.idx(in, ci, 0, 0);
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const int row = (ci * k + ky) * k + kx;
        T* dst = col.data() + static_cast<size_t>(row) * ho * wo;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= x.h) {
            for (int ox = 0; ox < wo; ++ox) dst[oy * wo + ox] = T(0);
            continue;
          }
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            dst[oy * wo + ox] = (ix < 0 || ix >= x.w) ? T(0) : plane[iy * x.w + ix];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const MatRM<T>& col, int in, int k, int stride, int pad, int ho, int wo,
                Tensor<T>& gx) {
  for (int ci = 0; ci < gx.c; ++ci) {
    T* plane = gx.data() + gx.idx(in, ci, 0, 0);
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const int row = (ci * k + ky) * k + kx;
        const T* src = col.data() + static_cast<size_t>(row) * ho * wo;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= gx.h) continue;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < gx.w) plane[iy * gx.w + ix] += src[oy * wo + ox];
          }
        }
      }
    }
  }
}

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias,
                         int stride, int pad) {
  check_conv_shapes(x, w);
  int ho = 0, wo = 0;
  conv_output_dims(x.h, x.w, w.h, stride, pad, ho, wo, x.shape_str(), w.shape_str());
  if (bias && bias->c != w.n) {
    throw std::invalid_argument("conv2d: bias channels " + std::to_string(bias->c) +
                                " do not match out channels " + std::to_string(w.n));
  }

  const int cout = w.n;
  const int k = w.h;
  const int cinkk = x.c * k * k;
  const int howo = ho * wo;
  Tensor<T> out(x.n, cout, ho, wo);
  Eigen::Map<const MatRM<T>> wm(w.data(), cout, cinkk);

#pragma omp parallel for schedule(static)
  for (int in = 0; in < x.n; ++in) {
    MatRM<T> col(cinkk, howo);
    im2col(x, in, k, stride, pad, ho, wo, col);
    Eigen::Map<MatRM<T>> om(out.data() + out.idx(in, 0, 0, 0), cout, howo);
    om.noalias() = wm * col;
    if (bias) {
      for (int co = 0; co < cout; ++co) om.row(co).array() += bias->v[co];
    }
  }
  return out;
}

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, std::nullptr_t, int stride,
                         int pad) {
  return conv2d_forward(x, w, static_cast<const Tensor<T>*>(nullptr), stride, pad);
}

template <typename T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& gout, int stride,
                     int pad, Tensor<T>& gx, Tensor<T>& gw, Tensor<T>* gb) {
  check_conv_shapes(x, w);
  const int cout = w.n;
  const int k = w.h;
  const int cinkk = x.c * k * k;
  const int ho = gout.h, wo = gout.w;
  const int howo = ho * wo;
  Eigen::Map<const MatRM<T>> wm(w.data(), cout, cinkk);

  // Per-sample weight/bias partials, folded serially below in sample order.
  std::vector<MatRM<T>> dw_part(x.n);
  std::vector<Eigen::Matrix<T, Eigen::Dynamic, 1>> db_part(x.n);

#pragma omp parallel for schedule(static)
  for (int in = 0; in < x.n; ++in) {
    MatRM<T> col(cinkk, howo);
    im2col(x, in, k, stride, pad, ho, wo, col);
    Eigen::Map<const MatRM<T>> gm(gout.data() + gout.idx(in, 0, 0, 0), cout, howo);
    dw_part[in].noalias() = gm * col.transpose();
    if (gb) db_part[in] = gm.rowwise().sum();
    MatRM<T> colgrad(cinkk, howo);
    colgrad.noalias() = wm.transpose() * gm;
    col2im_add(colgrad, in, k, stride, pad, ho, wo, gx);
  }

  Eigen::Map<MatRM<T>> gwm(gw.data(), cout, cinkk);
  for (int in = 0; in < x.n; ++in) {
    gwm += dw_part[in];
    if (gb) {
      for (int co = 0; co < cout; ++co) gb->v[co] += db_part[in][co];
    }
  }
}

// ---------------------------------------------------------------------------
// batch normalization (per channel over N, H, W)

template <typename T>
struct BatchNormCache {
  Tensor<T> xhat;
  std::vector<T> inv_std;
  long m = 0;  // elements per channel in the batch
  bool valid = false;
};

template <typename T>
void check_bn_shapes(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta) {
  if (gamma.c != x.c || beta.c != x.c) {
    throw std::invalid_argument("batchnorm: parameter channels (" + std::to_string(gamma.c) +
                                ", " + std::to_string(beta.c) + ") do not match input " +
                                x.shape_str());
  }
}

template <typename T>
Tensor<T> batchnorm_forward_train(const Tensor<T>& x, const Tensor<T>& gamma,
                                  const Tensor<T>& beta, T eps, T momentum,
                                  Tensor<T>& running_mean, Tensor<T>& running_var,
                                  BatchNormCache<T>& cache) {
  check_bn_shapes(x, gamma, beta);
  const long m = static_cast<long>(x.n) * x.h * x.w;
  Tensor<T> out(x.n, x.c, x.h, x.w);
  cache.xhat = Tensor<T>(x.n, x.c, x.h, x.w);
  cache.inv_std.assign(x.c, T(0));
  cache.m = m;

#pragma omp parallel for schedule(static)
  for (int ci = 0; ci < x.c; ++ci) {
    double sum = 0.0;
    for (int in = 0; in < x.n; ++in) {
      const T* p = x.data() + x.idx(in, ci, 0, 0);
      for (int i = 0; i < x.h * x.w; ++i) sum += static_cast<double>(p[i]);
    }
    const double mean = sum / m;
    double varsum = 0.0;
    for (int in = 0; in < x.n; ++in) {
      const T* p = x.data() + x.idx(in, ci, 0, 0);
      for (int i = 0; i < x.h * x.w; ++i) {
        const double d = static_cast<double>(p[i]) - mean;
        varsum += d * d;
      }
    }
    const double var = varsum / m;
    const double inv_std = 1.0 / std::sqrt(var + static_cast<double>(eps));
    cache.inv_std[ci] = static_cast<T>(inv_std);

    running_mean.v[ci] = momentum * running_mean.v[ci] + (T(1) - momentum) * static_cast<T>(mean);
    running_var.v[ci] = momentum * running_var.v[ci] + (T(1) - momentum) * static_cast<T>(var);

    const T g = gamma.v[ci], b = beta.v[ci];
    for (int in = 0; in < x.n; ++in) {
      const T* p = x.data() + x.idx(in, ci, 0, 0);
      T* ph = cache.xhat.data() + x.idx(in, ci, 0, 0);
      T* po = out.data() + x.idx(in, ci, 0, 0);
      for (int i = 0; i < x.h * x.w; ++i) {
        const T xh = static_cast<T>((static_cast<double>(p[i]) - mean) * inv_std);
        ph[i] = xh;
        po[i] = g * xh + b;
      }
    }
  }
  cache.valid = true;
  return out;
}

template <typename T>
Tensor<T> batchnorm_forward_eval(const Tensor<T>& x, const Tensor<T>& gamma,
                                 const Tensor<T>& beta, T eps, const Tensor<T>& running_mean,
                                 const Tensor<T>& running_var) {
  check_bn_shapes(x, gamma, beta);
  Tensor<T> out(x.n, x.c, x.h, x.w);
#pragma omp parallel for schedule(static)
  for (int ci = 0; ci < x.c; ++ci) {
    const T mean = running_mean.v[ci];
    const T inv_std = static_cast<T>(1.0 / std::sqrt(static_cast<double>(running_var.v[ci]) +
                                                     static_cast<double>(eps)));
    const T g = gamma.v[ci], b = beta.v[ci];
    for (int in = 0; in < x.n; ++in) {
      const T* p = x.data() + x.idx(in, ci, 0, 0);
      T* po = out.data() + x.idx(in, ci, 0, 0);
      for (int i = 0; i < x.h * x.w; ++i) po[i] = g * (p[i] - mean) * inv_std + b;
    }
  }
  return out;
}

template <typename T>
void batchnorm_backward(const Tensor<T>& gamma, const Tensor<T>& gout,
                        const BatchNormCache<T>& cache, Tensor<T>& gx, Tensor<T>& ggamma,
                        Tensor<T>& gbeta) {
  if (!cache.valid) throw std::logic_error("batchnorm backward called before train forward");
  const Tensor<T>& xhat = cache.xhat;
  const long m = cache.m;

#pragma omp parallel for schedule(static)
  for (int ci = 0; ci < xhat.c; ++ci) {
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (int in = 0; in < xhat.n; ++in) {
      const T* pg = gout.data() + xhat.idx(in, ci, 0, 0);
      const T* ph = xhat.data() + xhat.idx(in, ci, 0, 0);
      for (int i = 0; i < xhat.h * xhat.w; ++i) {
        sum_dy += static_cast<double>(pg[i]);
        sum_dy_xhat += static_cast<double>(pg[i]) * static_cast<double>(ph[i]);
      }
    }
    ggamma.v[ci] += static_cast<T>(sum_dy_xhat);
    gbeta.v[ci] += static_cast<T>(sum_dy);

    const double g_inv = static_cast<double>(gamma.v[ci]) * static_cast<double>(cache.inv_std[ci]);
    const double mean_dy = sum_dy / m;
    const double mean_dy_xhat = sum_dy_xhat / m;
    for (int in = 0; in < xhat.n; ++in) {
      const T* pg = gout.data() + xhat.idx(in, ci, 0, 0);
      const T* ph = xhat.data() + xhat.idx(in, ci, 0, 0);
      T* px = gx.data() + xhat.idx(in, ci, 0, 0);
      for (int i = 0; i < xhat.h * xhat.w; ++i) {
        px[i] += static_cast<T>(g_inv * (static_cast<double>(pg[i]) - mean_dy -
                                         static_cast<double>(ph[i]) * mean_dy_xhat));
      }
    }
  }
}

// ---------------------------------------------------------------------------
// max pooling

template <typename T>
Tensor<T> maxpool_forward(const Tensor<T>& x, int k, int stride, std::vector<int>* argmax) {
  if (x.h < k || x.w < k) {
    throw std::invalid_argument("maxpool: window " + std::to_string(k) +
                                " exceeds input " + x.shape_str());
  }
  const int ho = (x.h - k) / stride + 1;
  const int wo = (x.w - k) / stride + 1;
  Tensor<T> out(x.n, x.c, ho, wo);
  if (argmax) argmax->assign(out.size(), 0);

#pragma omp parallel for schedule(static)
  for (int in = 0; in < x.n; ++in) {
    for (int ci = 0; ci < x.c; ++ci) {
      for (int oy = 0; oy < ho; ++oy) {
        for (int ox = 0; ox < wo; ++ox) {
          T best = x.at(in, ci, oy * stride, ox * stride);
          int best_idx = static_cast<int>(x.idx(in, ci, oy * stride, ox * stride));
          for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
              const T val = x.at(in, ci, oy * stride + ky, ox * stride + kx);
              if (val > best) {
                best = val;
                best_idx = static_cast<int>(x.idx(in, ci, oy * stride + ky, ox * stride + kx));
              }
            }
          }
          out.at(in, ci, oy, ox) = best;
          if (argmax) (*argmax)[out.idx(in, ci, oy, ox)] = best_idx;
        }
      }
    }
  }
  return out;
}

template <typename T>
void maxpool_backward(const Tensor<T>& gout, const std::vector<int>& argmax, Tensor<T>& gx) {
  if (argmax.size() != gout.size()) throw std::logic_error("maxpool backward before forward");
  // Windows can overlap when stride < k, so accumulation stays serial.
  for (size_t i = 0; i < gout.size(); ++i) gx.v[argmax[i]] += gout.v[i];
}

// ---------------------------------------------------------------------------
// nearest-neighbor upsample

template <typename T>
Tensor<T> upsample_forward(const Tensor<T>& x, int factor) {
  Tensor<T> out(x.n, x.c, x.h * factor, x.w * factor);
#pragma omp parallel for schedule(static)
  for (int in = 0; in < x.n; ++in) {
    for (int ci = 0; ci < x.c; ++ci) {
      for (int oy = 0; oy < out.h; ++oy) {
        const T* src = x.data() + x.idx(in, ci, oy / factor, 0);
        T* dst = out.data() + out.idx(in, ci, oy, 0);
        for (int ox = 0; ox < out.w; ++ox) dst[ox] = src[ox / factor];
      }
    }
  }
  return out;
}

template <typename T>
void upsample_backward(const Tensor<T>& gout, int factor, Tensor<T>& gx) {
#pragma omp parallel for schedule(static)
  for (int in = 0; in < gx.n; ++in) {
    for (int ci = 0; ci < gx.c; ++ci) {
      for (int iy = 0; iy < gx.h; ++iy) {
        for (int ix = 0; ix < gx.w; ++ix) {
          double s = 0.0;
          for (int ky = 0; ky < factor; ++ky) {
            const T* row = gout.data() + gout.idx(in, ci, iy * factor + ky, ix * factor);
            for (int kx = 0; kx < factor; ++kx) s += static_cast<double>(row[kx]);
          }
          gx.at(in, ci, iy, ix) += static_cast<T>(s);
        }
      }
    }
  }
}

// ---------------------------------------------------------------------------
// channel concat / split

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.n != b.n || a.h != b.h || a.w != b.w) {
    throw std::invalid_argument("concat: incompatible shapes " + a.shape_str() + " and " +
                                b.shape_str());
  }
  Tensor<T> out(a.n, a.c + b.c, a.h, a.w);
#pragma omp parallel for schedule(static)
  for (int in = 0; in < a.n; ++in) {
    std::copy(a.data() + a.idx(in, 0, 0, 0), a.data() + a.idx(in, 0, 0, 0) + a.c * a.h * a.w,
              out.data() + out.idx(in, 0, 0, 0));
    std::copy(b.data() + b.idx(in, 0, 0, 0), b.data() + b.idx(in, 0, 0, 0) + b.c * b.h * b.w,
              out.data() + out.idx(in, a.c, 0, 0));
  }
  return out;
}

template <typename T>
void concat_backward(const Tensor<T>& gout, int ca, Tensor<T>& ga, Tensor<T>& gb) {
  const int plane = gout.h * gout.w;
#pragma omp parallel for schedule(static)
  for (int in = 0; in < gout.n; ++in) {
    const T* src = gout.data() + gout.idx(in, 0, 0, 0);
    T* pa = ga.data() + ga.idx(in, 0, 0, 0);
    for (long i = 0; i < static_cast<long>(ca) * plane; ++i) pa[i] += src[i];
    const T* srcb = gout.data() + gout.idx(in, ca, 0, 0);
    T* pb = gb.data() + gb.idx(in, 0, 0, 0);
    for (long i = 0; i < static_cast<long>(gb.c) * plane; ++i) pb[i] += srcb[i];
  }
}

// Returns half of the channels: half_index 0 = first half, 1 = second half.
template <typename T>
Tensor<T> split_channels(const Tensor<T>& x, int half_index) {
  if (x.c % 2 != 0) {
    throw std::invalid_argument("split: channel count must be even, input " + x.shape_str());
  }
  if (half_index != 0 && half_index != 1) {
    throw std::invalid_argument("split: half_index must be 0 or 1");
  }
  const int ch = x.c / 2;
  Tensor<T> out(x.n, ch, x.h, x.w);
#pragma omp parallel for schedule(static)
  for (int in = 0; in < x.n; ++in) {
    const T* src = x.data() + x.idx(in, half_index * ch, 0, 0);
    std::copy(src, src + static_cast<size_t>(ch) * x.h * x.w,
              out.data() + out.idx(in, 0, 0, 0));
  }
  return out;
}

template <typename T>
void split_backward(const Tensor<T>& gout, int half_index, Tensor<T>& gx) {
  const int ch = gout.c;
#pragma omp parallel for schedule(static)
  for (int in = 0; in < gout.n; ++in) {
    const T* src = gout.data() + gout.idx(in, 0, 0, 0);
    T* dst = gx.data() + gx.idx(in, half_index * ch, 0, 0);
    for (long i = 0; i < static_cast<long>(ch) * gout.h * gout.w; ++i) dst[i] += src[i];
  }
}

}  // namespace irfusion::nn
