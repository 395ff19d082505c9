#pragma once

#include <cmath>
#include <string>
#include <utility>

#include "vtgrasp/ops.hpp"
#include "vtgrasp/rng.hpp"
#include "vtgrasp/tensor.hpp"

namespace vtgrasp {

// A trainable tensor. The gradient buffer is allocated on first use so large
// inference-only models do not pay for it.
struct Param {
  Tensor value;
  Tensor grad;

  Param() = default;
  explicit Param(Tensor v) : value(std::move(v)) {}

  Tensor& grad_buffer() {
    if (grad.empty()) grad = Tensor(value.shape());
    return grad;
  }
  void accumulate(const Tensor& g) { grad_buffer() += g; }
  void zero_grad() {
    if (!grad.empty()) grad.fill(0.0f);
  }
};

// Every module exposes visit(prefix, fn) calling fn(name, Param&) for each of
// its parameters in a fixed order; that order defines checkpoint layout and
// optimizer state.

// y = x W + b, x [n x in], W [in x out].
struct Linear {
  Param weight;
  Param bias;

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng, float init_std = 0.02f)
      : weight(Tensor::normal({in, out}, rng, init_std)), bias(Tensor({out})) {}

  std::size_t in_features() const { return weight.value.dim(0); }
  std::size_t out_features() const { return weight.value.dim(1); }

  Tensor forward(const Tensor& x) const {
    if (x.rank() != 2 || x.dim(1) != in_features()) {
      throw DimensionError("linear: input " + shape_str(x.shape()) + " vs weight " +
                           shape_str(weight.value.shape()));
    }
    const std::size_t n = x.dim(0), out = out_features();
    Tensor y({n, out});
    kernel::gemm(x.ptr(), weight.value.ptr(), y.ptr(), n, in_features(), out, false);
    for (std::size_t i = 0; i < n; ++i) {
      float* yi = y.ptr() + i * out;
      for (std::size_t j = 0; j < out; ++j) yi[j] += bias.value[j];
    }
    return y;
  }

  void backward_params(const Tensor& x, const Tensor& dy) {
    const std::size_t n = x.dim(0), out = out_features();
    kernel::gemm_at(x.ptr(), dy.ptr(), weight.grad_buffer().ptr(), n, in_features(), out, true);
    Tensor& db = bias.grad_buffer();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < out; ++j) db[j] += dy[i * out + j];
  }

  // Accumulates parameter gradients and returns dL/dx.
  Tensor backward(const Tensor& x, const Tensor& dy) {
    backward_params(x, dy);
    Tensor dx(x.shape());
    kernel::gemm_bt(dy.ptr(), weight.value.ptr(), dx.ptr(), x.dim(0), out_features(), in_features(),
                    false);
    return dx;
  }

  template <class Fn>
  void visit(const std::string& p, Fn&& fn) {
    fn(p + ".weight", weight);
    fn(p + ".bias", bias);
  }
  template <class Fn>
  void visit(const std::string& p, Fn&& fn) const {
    fn(p + ".weight", weight);
    fn(p + ".bias", bias);
  }
};

struct LayerNorm {
  Param gamma;
  Param beta;
  float eps = 1e-6f;

  LayerNorm() = default;
  LayerNorm(std::size_t dim, float eps_) : gamma(Tensor({dim}, 1.0f)), beta(Tensor({dim})), eps(eps_) {}

  Tensor forward(const Tensor& x, LayerNormStats* stats = nullptr) const {
    return layer_norm(x, eps, gamma.value, beta.value, stats);
  }

  Tensor backward(const Tensor& x, const LayerNormStats& stats, const Tensor& dy) {
    auto g = layer_norm_backward(x, gamma.value, stats, dy);
    gamma.accumulate(g.dgamma);
    beta.accumulate(g.dbeta);
    return std::move(g.dx);
  }

  template <class Fn>
  void visit(const std::string& p, Fn&& fn) {
    fn(p + ".gamma", gamma);
    fn(p + ".beta", beta);
  }
  template <class Fn>
  void visit(const std::string& p, Fn&& fn) const {
    fn(p + ".gamma", gamma);
    fn(p + ".beta", beta);
  }
};

struct Conv2d {
  Param kernels;
  Param bias;
  std::size_t stride = 1;
  std::size_t padding = 0;

  Conv2d() = default;
  // He-normal initialisation; padding defaults to "same" for stride 1.
  Conv2d(std::size_t c_in, std::size_t c_out, std::size_t k, std::size_t stride_, Rng& rng)
      : kernels(Tensor::normal({c_out, c_in, k, k}, rng,
                               static_cast<float>(std::sqrt(2.0 / static_cast<double>(c_in * k * k))))),
        bias(Tensor({c_out})),
        stride(stride_),
        padding((k - 1) / 2) {}

  std::size_t in_channels() const { return kernels.value.dim(1); }
  std::size_t out_channels() const { return kernels.value.dim(0); }

  Tensor forward(const Tensor& x) const { return conv2d(x, kernels.value, stride, padding, &bias.value); }

  Tensor backward(const Tensor& x, const Tensor& dy) {
    auto g = conv2d_backward(x, kernels.value, stride, padding, dy);
    kernels.accumulate(g.dkernels);
    bias.accumulate(g.dbias);
    return std::move(g.dx);
  }

  template <class Fn>
  void visit(const std::string& p, Fn&& fn) {
    fn(p + ".kernels", kernels);
    fn(p + ".bias", bias);
  }
  template <class Fn>
  void visit(const std::string& p, Fn&& fn) const {
    fn(p + ".kernels", kernels);
    fn(p + ".bias", bias);
  }
};

struct MlpCache {
  Tensor x;
  Tensor hidden_pre;
  Tensor hidden;
};

// Linear -> activation -> Linear.
struct Mlp {
  Linear fc1;
  Linear fc2;
  Activation act = Activation::gelu;

  Mlp() = default;
  Mlp(std::size_t dim, std::size_t hidden, Activation act_, Rng& rng)
      : fc1(dim, hidden, rng), fc2(hidden, dim, rng), act(act_) {}

  std::size_t hidden_width() const { return fc1.out_features(); }

  Tensor forward(const Tensor& x, MlpCache* cache = nullptr) const {
    Tensor pre = fc1.forward(x);
    Tensor h = activation(pre, act);
    Tensor y = fc2.forward(h);
    if (cache) {
      cache->x = x;
      cache->hidden_pre = std::move(pre);
      cache->hidden = std::move(h);
    }
    return y;
  }

  Tensor backward(const Tensor& dy, const MlpCache& cache) {
    const Tensor dh = fc2.backward(cache.hidden, dy);
    return fc1.backward(cache.x, activation_backward(cache.hidden_pre, dh, act));
  }

  template <class Fn>
  void visit(const std::string& p, Fn&& fn) {
    fc1.visit(p + ".fc1", fn);
    fc2.visit(p + ".fc2", fn);
  }
  template <class Fn>
  void visit(const std::string& p, Fn&& fn) const {
    fc1.visit(p + ".fc1", fn);
    fc2.visit(p + ".fc2", fn);
  }
};

}  // namespace vtgrasp
