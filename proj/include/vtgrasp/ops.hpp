#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <string>
#include <string_view>
#include <vector>

#include "vtgrasp/error.hpp"
#include "vtgrasp/tensor.hpp"

namespace vtgrasp {

// ---------------------------------------------------------------------------
// Raw kernels. All accumulate in a fixed order (row-major over outputs,
// ascending reduction index) so results are bit-reproducible.
namespace kernel {

// c[m x n] (+)= a[m x k] * b[k x n]
inline void gemm(const float* a, const float* b, float* c, std::size_t m, std::size_t k,
                 std::size_t n, bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, 0.0f);
  for (std::size_t i = 0; i < m; ++i) {
    float* ci = c + i * n;
    const float* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const float av = ai[p];
      const float* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// c[m x n] (+)= a[m x k] * b[n x k]^T
inline void gemm_bt(const float* a, const float* b, float* c, std::size_t m, std::size_t k,
                    std::size_t n, bool accumulate) {
  std::vector<float> bt(k * n);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
  gemm(a, bt.data(), c, m, k, n, accumulate);
}

// c[k x n] (+)= a[m x k]^T * b[m x n]
inline void gemm_at(const float* a, const float* b, float* c, std::size_t m, std::size_t k,
                    std::size_t n, bool accumulate) {
  if (!accumulate) std::fill(c, c + k * n, 0.0f);
  for (std::size_t i = 0; i < m; ++i) {
    const float* ai = a + i * k;
    const float* bi = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const float av = ai[p];
      float* cp = c + p * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += av * bi[j];
    }
  }
}

// In-place numerically stable softmax over n values spaced `stride` apart.
// The normalizer is accumulated in double so every slice sums to 1 within a
// few float ulps.
inline void softmax_strided(float* v, std::size_t n, std::size_t stride) {
  float mx = -std::numeric_limits<float>::infinity();
  for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, v[i * stride]);
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const float e = std::exp(v[i * stride] - mx);
    v[i * stride] = e;
    sum += e;
  }
  for (std::size_t i = 0; i < n; ++i) {
    v[i * stride] = static_cast<float>(static_cast<double>(v[i * stride]) / sum);
  }
}

}  // namespace kernel

// ---------------------------------------------------------------------------
// matmul

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  Tensor c({a.dim(0), b.dim(1)});
  kernel::gemm(a.ptr(), b.ptr(), c.ptr(), a.dim(0), a.dim(1), b.dim(1), false);
  return c;
}

struct MatmulGrads {
  Tensor da;
  Tensor db;
};

inline MatmulGrads matmul_backward(const Tensor& a, const Tensor& b, const Tensor& dy) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (dy.shape() != Shape{m, n}) {
    throw DimensionError("matmul_backward: upstream gradient " + shape_str(dy.shape()) +
                         " does not match output " + shape_str({m, n}));
  }
  MatmulGrads g{Tensor({m, k}), Tensor({k, n})};
  kernel::gemm_bt(dy.ptr(), b.ptr(), g.da.ptr(), m, n, k, false);
  kernel::gemm_at(a.ptr(), dy.ptr(), g.db.ptr(), m, k, n, false);
  return g;
}

// ---------------------------------------------------------------------------
// softmax along an arbitrary axis

namespace detail {

struct AxisLayout {
  std::size_t outer = 1, len = 1, inner = 1;
};

inline AxisLayout axis_layout(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
  }
  AxisLayout l;
  for (std::size_t i = 0; i < axis; ++i) l.outer *= shape[i];
  l.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) l.inner *= shape[i];
  return l;
}

}  // namespace detail

inline Tensor softmax(const Tensor& x, std::size_t axis) {
  const auto l = detail::axis_layout(x.shape(), axis);
  Tensor y = x;
  for (std::size_t o = 0; o < l.outer; ++o)
    for (std::size_t i = 0; i < l.inner; ++i)
      kernel::softmax_strided(y.ptr() + o * l.len * l.inner + i, l.len, l.inner);
  return y;
}

// dx = y * (dy - sum(dy * y)) along the axis.
inline Tensor softmax_backward(const Tensor& y, const Tensor& dy, std::size_t axis) {
  y.require_same_shape(dy, "softmax_backward");
  const auto l = detail::axis_layout(y.shape(), axis);
  Tensor dx(y.shape());
  for (std::size_t o = 0; o < l.outer; ++o) {
    for (std::size_t i = 0; i < l.inner; ++i) {
      const std::size_t base = o * l.len * l.inner + i;
      double dot = 0.0;
      for (std::size_t j = 0; j < l.len; ++j) dot += y[base + j * l.inner] * dy[base + j * l.inner];
      for (std::size_t j = 0; j < l.len; ++j) {
        const std::size_t idx = base + j * l.inner;
        dx[idx] = y[idx] * (dy[idx] - static_cast<float>(dot));
      }
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// layer_norm over the last axis

struct LayerNormStats {
  std::vector<float> mean;
  std::vector<float> rstd;
};

inline Tensor layer_norm(const Tensor& x, float eps, const Tensor& gamma, const Tensor& beta,
                         LayerNormStats* stats = nullptr) {
  const std::size_t d = x.shape().back();
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
    throw DimensionError("layer_norm: gamma " + shape_str(gamma.shape()) + " / beta " +
                         shape_str(beta.shape()) + " do not match last axis of " +
                         shape_str(x.shape()));
  }
  const std::size_t rows = x.size() / d;
  Tensor y(x.shape());
  if (stats) {
    stats->mean.resize(rows);
    stats->rstd.resize(rows);
  }
  for (std::size_t r = 0; r < rows; ++r) {
    const float* xr = x.ptr() + r * d;
    double sum = 0.0;
    for (std::size_t j = 0; j < d; ++j) sum += xr[j];
    const double mean = sum / static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = xr[j] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double rstd = 1.0 / std::sqrt(var + static_cast<double>(eps));
    float* yr = y.ptr() + r * d;
    for (std::size_t j = 0; j < d; ++j) {
      yr[j] = static_cast<float>((xr[j] - mean) * rstd) * gamma[j] + beta[j];
    }
    if (stats) {
      stats->mean[r] = static_cast<float>(mean);
      stats->rstd[r] = static_cast<float>(rstd);
    }
  }
  return y;
}

struct LayerNormGrads {
  Tensor dx;
  Tensor dgamma;
  Tensor dbeta;
};

inline LayerNormGrads layer_norm_backward(const Tensor& x, const Tensor& gamma,
                                          const LayerNormStats& stats, const Tensor& dy) {
  x.require_same_shape(dy, "layer_norm_backward");
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.size() / d;
  LayerNormGrads g{Tensor(x.shape()), Tensor({d}), Tensor({d})};
  std::vector<float> xhat(d), dxhat(d);
  for (std::size_t r = 0; r < rows; ++r) {
    const float* xr = x.ptr() + r * d;
    const float* dyr = dy.ptr() + r * d;
    const float mean = stats.mean[r], rstd = stats.rstd[r];
    double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      xhat[j] = (xr[j] - mean) * rstd;
      dxhat[j] = dyr[j] * gamma[j];
      g.dgamma[j] += dyr[j] * xhat[j];
      g.dbeta[j] += dyr[j];
      mean_dxhat += dxhat[j];
      mean_dxhat_xhat += dxhat[j] * xhat[j];
    }
    mean_dxhat /= static_cast<double>(d);
    mean_dxhat_xhat /= static_cast<double>(d);
    float* dxr = g.dx.ptr() + r * d;
    for (std::size_t j = 0; j < d; ++j) {
      dxr[j] = rstd * static_cast<float>(dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// activations

enum class Activation { silu, gelu };

inline std::string_view to_string(Activation a) { return a == Activation::silu ? "silu" : "gelu"; }

inline Activation activation_from_string(std::string_view s) {
  if (s == "silu") return Activation::silu;
  if (s == "gelu") return Activation::gelu;
  throw ConfigError("unknown activation '" + std::string(s) + "'");
}

// tanh approximation of GELU.
inline constexpr float kGeluCubic = 0.044715f;
inline const float kGeluScale = static_cast<float>(std::sqrt(2.0 / std::numbers::pi));

inline float activate(float x, Activation kind) {
  if (kind == Activation::silu) return x / (1.0f + std::exp(-x));
  const float u = kGeluScale * (x + kGeluCubic * x * x * x);
  return 0.5f * x * (1.0f + std::tanh(u));
}

inline float activate_grad(float x, Activation kind) {
  if (kind == Activation::silu) {
    const float s = 1.0f / (1.0f + std::exp(-x));
    return s * (1.0f + x * (1.0f - s));
  }
  const float u = kGeluScale * (x + kGeluCubic * x * x * x);
  const float t = std::tanh(u);
  const float du = kGeluScale * (1.0f + 3.0f * kGeluCubic * x * x);
  return 0.5f * (1.0f + t) + 0.5f * x * (1.0f - t * t) * du;
}

inline Tensor activation(const Tensor& x, Activation kind) {
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = activate(x[i], kind);
  return y;
}

inline Tensor activation_backward(const Tensor& x, const Tensor& dy, Activation kind) {
  x.require_same_shape(dy, "activation_backward");
  Tensor dx(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) dx[i] = dy[i] * activate_grad(x[i], kind);
  return dx;
}

// ---------------------------------------------------------------------------
// conv2d: x [C_in x H x W], kernels [C_out x C_in x k x k], cross-correlation.

struct ConvGeometry {
  std::size_t c_in, h, w, c_out, k, stride, padding, h_out, w_out;
};

inline ConvGeometry conv_geometry(const Tensor& x, const Tensor& kernels, std::size_t stride,
                                  std::size_t padding) {
  if (x.rank() != 3 || kernels.rank() != 4) {
    throw DimensionError("conv2d: expected x[C,H,W] and kernels[O,C,k,k], got " +
                         shape_str(x.shape()) + " and " + shape_str(kernels.shape()));
  }
  ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), kernels.dim(0), kernels.dim(2), stride, padding, 0, 0};
  if (kernels.dim(1) != g.c_in) {
    throw DimensionError("conv2d: channel mismatch, input has " + std::to_string(g.c_in) +
                         " channels, kernels expect " + std::to_string(kernels.dim(1)));
  }
  if (kernels.dim(3) != g.k || g.k % 2 == 0) {
    throw DimensionError("conv2d: kernels must be square with odd size, got " +
                         shape_str(kernels.shape()));
  }
  if (stride == 0) throw DimensionError("conv2d: stride must be >= 1");
  if (g.h + 2 * padding < g.k || g.w + 2 * padding < g.k) {
    throw DimensionError("conv2d: kernel larger than padded input");
  }
  g.h_out = (g.h + 2 * padding - g.k) / stride + 1;
  g.w_out = (g.w + 2 * padding - g.k) / stride + 1;
  return g;
}

namespace detail {

inline bool conv_is_pointwise(const ConvGeometry& g) {
  return g.k == 1 && g.stride == 1 && g.padding == 0;
}

// cols[(c*k + ki)*k + kj][oy*w_out + ox]
inline std::vector<float> im2col(const float* x, const ConvGeometry& g) {
  const std::size_t ckk = g.c_in * g.k * g.k, hw = g.h_out * g.w_out;
  std::vector<float> cols(ckk * hw, 0.0f);
  for (std::size_t c = 0; c < g.c_in; ++c)
    for (std::size_t ki = 0; ki < g.k; ++ki)
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        float* dst = cols.data() + ((c * g.k + ki) * g.k + kj) * hw;
        for (std::size_t oy = 0; oy < g.h_out; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) -
                          static_cast<std::ptrdiff_t>(g.padding);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.w_out; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kj) -
                            static_cast<std::ptrdiff_t>(g.padding);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
            dst[oy * g.w_out + ox] = x[(c * g.h + static_cast<std::size_t>(iy)) * g.w +
                                       static_cast<std::size_t>(ix)];
          }
        }
      }
  return cols;
}

inline void col2im_add(const float* cols, const ConvGeometry& g, float* dx) {
  const std::size_t hw = g.h_out * g.w_out;
  for (std::size_t c = 0; c < g.c_in; ++c)
    for (std::size_t ki = 0; ki < g.k; ++ki)
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        const float* src = cols + ((c * g.k + ki) * g.k + kj) * hw;
        for (std::size_t oy = 0; oy < g.h_out; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) -
                          static_cast<std::ptrdiff_t>(g.padding);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.w_out; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kj) -
                            static_cast<std::ptrdiff_t>(g.padding);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
            dx[(c * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)] +=
                src[oy * g.w_out + ox];
          }
        }
      }
}

}  // namespace detail

inline Tensor conv2d(const Tensor& x, const Tensor& kernels, std::size_t stride, std::size_t padding,
                     const Tensor* bias = nullptr) {
  const ConvGeometry g = conv_geometry(x, kernels, stride, padding);
  if (bias && bias->shape() != Shape{g.c_out}) {
    throw DimensionError("conv2d: bias " + shape_str(bias->shape()) + " does not match " +
                         std::to_string(g.c_out) + " output channels");
  }
  const std::size_t ckk = g.c_in * g.k * g.k, hw = g.h_out * g.w_out;
  Tensor y({g.c_out, g.h_out, g.w_out});
  if (detail::conv_is_pointwise(g)) {
    kernel::gemm(kernels.ptr(), x.ptr(), y.ptr(), g.c_out, ckk, hw, false);
  } else {
    const auto cols = detail::im2col(x.ptr(), g);
    kernel::gemm(kernels.ptr(), cols.data(), y.ptr(), g.c_out, ckk, hw, false);
  }
  if (bias) {
    for (std::size_t o = 0; o < g.c_out; ++o) {
      float* yo = y.ptr() + o * hw;
      for (std::size_t i = 0; i < hw; ++i) yo[i] += (*bias)[o];
    }
  }
  return y;
}

struct Conv2dGrads {
  Tensor dx;
  Tensor dkernels;
  Tensor dbias;
};

inline Conv2dGrads conv2d_backward(const Tensor& x, const Tensor& kernels, std::size_t stride,
                                   std::size_t padding, const Tensor& dy) {
  const ConvGeometry g = conv_geometry(x, kernels, stride, padding);
  if (dy.shape() != Shape{g.c_out, g.h_out, g.w_out}) {
    throw DimensionError("conv2d_backward: upstream gradient " + shape_str(dy.shape()) +
                         " does not match output geometry");
  }
  const std::size_t ckk = g.c_in * g.k * g.k, hw = g.h_out * g.w_out;
  Conv2dGrads grads{Tensor(x.shape()), Tensor(kernels.shape()), Tensor({g.c_out})};
  for (std::size_t o = 0; o < g.c_out; ++o) {
    float s = 0.0f;
    for (std::size_t i = 0; i < hw; ++i) s += dy[o * hw + i];
    grads.dbias[o] = s;
  }
  if (detail::conv_is_pointwise(g)) {
    kernel::gemm_bt(dy.ptr(), x.ptr(), grads.dkernels.ptr(), g.c_out, hw, ckk, false);
    kernel::gemm_at(kernels.ptr(), dy.ptr(), grads.dx.ptr(), g.c_out, ckk, hw, false);
  } else {
    const auto cols = detail::im2col(x.ptr(), g);
    kernel::gemm_bt(dy.ptr(), cols.data(), grads.dkernels.ptr(), g.c_out, hw, ckk, false);
    std::vector<float> dcols(ckk * hw);
    kernel::gemm_at(kernels.ptr(), dy.ptr(), dcols.data(), g.c_out, ckk, hw, false);
    detail::col2im_add(dcols.data(), g, grads.dx.ptr());
  }
  return grads;
}

// (x - mean) / std elementwise; the fixed input standardisation of both models.
inline Tensor standardize(const Tensor& x, float mean, float std) {
  if (!(std > 0.0f)) throw ConfigError("input std must be positive");
  Tensor y = x;
  for (float& v : y.data()) v = (v - mean) / std;
  return y;
}

}  // namespace vtgrasp
