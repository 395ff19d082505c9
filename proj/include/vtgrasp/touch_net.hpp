#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vtgrasp/attention.hpp"
#include "vtgrasp/error.hpp"
#include "vtgrasp/layers.hpp"
#include "vtgrasp/ops.hpp"
#include "vtgrasp/tensor.hpp"

namespace vtgrasp {

// ---------------------------------------------------------------------------
// unfold / fold
//
// A feature map [d x H x W] is cut into N = (H/h)(W/w) patches of P = w*h
// pixels. unfold groups pixels by intra-patch offset: x_u[p][n] is the feature
// vector at offset p of patch n, so each x_u[p] is an N-token sequence.

struct PatchGeometry {
  std::size_t height, width, patch_w, patch_h;
  std::size_t pixels_per_patch() const { return patch_w * patch_h; }
  std::size_t patch_count() const { return (height / patch_h) * (width / patch_w); }

  void validate() const {
    if (patch_w == 0 || patch_h == 0 || height % patch_h != 0 || width % patch_w != 0) {
      throw GeometryError("feature map " + std::to_string(height) + "x" + std::to_string(width) +
                          " is not divisible by patch " + std::to_string(patch_h) + "x" +
                          std::to_string(patch_w));
    }
  }
};

inline Tensor unfold(const Tensor& x, std::size_t patch_w, std::size_t patch_h) {
  if (x.rank() != 3) throw GeometryError("unfold expects [d x H x W], got " + shape_str(x.shape()));
  const std::size_t d = x.dim(0), h = x.dim(1), w = x.dim(2);
  const PatchGeometry g{h, w, patch_w, patch_h};
  g.validate();
  const std::size_t n = g.patch_count(), cols = w / patch_w;
  Tensor u({g.pixels_per_patch(), n, d});
  for (std::size_t c = 0; c < d; ++c)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) {
        const std::size_t p = (i % patch_h) * patch_w + (j % patch_w);
        const std::size_t patch = (i / patch_h) * cols + j / patch_w;
        u.at(p, patch, c) = x.at(c, i, j);
      }
  return u;
}

inline Tensor fold(const Tensor& u, std::size_t height, std::size_t width, std::size_t patch_w,
                   std::size_t patch_h) {
  const PatchGeometry g{height, width, patch_w, patch_h};
  g.validate();
  if (u.rank() != 3 || u.dim(0) != g.pixels_per_patch() || u.dim(1) != g.patch_count()) {
    throw GeometryError("fold: tensor " + shape_str(u.shape()) + " inconsistent with " +
                        std::to_string(height) + "x" + std::to_string(width) + " map and patch " +
                        std::to_string(patch_h) + "x" + std::to_string(patch_w));
  }
  const std::size_t d = u.dim(2), cols = width / patch_w;
  Tensor x({d, height, width});
  for (std::size_t c = 0; c < d; ++c)
    for (std::size_t i = 0; i < height; ++i)
      for (std::size_t j = 0; j < width; ++j) {
        const std::size_t p = (i % patch_h) * patch_w + (j % patch_w);
        const std::size_t patch = (i / patch_h) * cols + j / patch_w;
        x.at(c, i, j) = u.at(p, patch, c);
      }
  return x;
}

// Concatenate [C1 x H x W] and [C2 x H x W] along channels.
inline Tensor concat_channels(const Tensor& a, const Tensor& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(1) != b.dim(1) || a.dim(2) != b.dim(2)) {
    throw DimensionError("concat_channels: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  Tensor out({a.dim(0) + b.dim(0), a.dim(1), a.dim(2)});
  std::copy(a.data().begin(), a.data().end(), out.data().begin());
  std::copy(b.data().begin(), b.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(a.size()));
  return out;
}

// ---------------------------------------------------------------------------
// Conv + activation with its cache.

struct ConvActCache {
  Tensor x;
  Tensor pre;
};

struct ConvAct {
  Conv2d conv;
  Activation act = Activation::silu;
  bool activated = true;

  ConvAct() = default;
  ConvAct(std::size_t c_in, std::size_t c_out, std::size_t k, std::size_t stride, Activation a, bool activated_,
          Rng& rng)
      : conv(c_in, c_out, k, stride, rng), act(a), activated(activated_) {}

  Tensor forward(const Tensor& x, ConvActCache* cache = nullptr) const {
    Tensor pre = conv.forward(x);
    Tensor y = activated ? activation(pre, act) : pre;
    if (cache) {
      cache->x = x;
      cache->pre = std::move(pre);
    }
    return y;
  }

  Tensor backward(const Tensor& dy, const ConvActCache& cache) {
    return conv.backward(cache.x, activated ? activation_backward(cache.pre, dy, act) : dy);
  }

  template <class Fn>
  void visit(const std::string& p, Fn&& fn) {
    conv.visit(p, fn);
  }
  template <class Fn>
  void visit(const std::string& p, Fn&& fn) const {
    conv.visit(p, fn);
  }
};

// ---------------------------------------------------------------------------
// MobileViT block

struct MobileVitCache {
  ConvActCache local;
  ConvActCache to_dim;
  std::size_t height = 0, width = 0;
  // [offset][depth]
  std::vector<std::vector<TransformerBlockCache>> transformers;
  // Token count of every transformer-stack invocation, in call order.
  std::vector<std::size_t> transformer_calls;
  ConvActCache to_channels;
  ConvActCache fuse;
};

// local n x n conv -> 1x1 projection to d (X_L) -> unfold -> the same
// transformer stack over each of the P offset sequences (X_G) -> fold (X_F)
// -> 1x1 projection back to C -> concat with X -> n x n fusion conv to C.
struct MobileVitBlock {
  std::size_t patch_w = 2;
  std::size_t patch_h = 2;
  ConvAct local;
  ConvAct to_dim;
  std::vector<TransformerBlock> transformers;
  ConvAct to_channels;
  ConvAct fuse;

  MobileVitBlock() = default;
  MobileVitBlock(std::size_t channels, std::size_t dim, std::size_t depth, std::size_t heads, std::size_t mlp_hidden,
                 std::size_t kernel, std::size_t pw, std::size_t ph, Activation act, float ln_eps, Rng& rng)
      : patch_w(pw),
        patch_h(ph),
        local(channels, channels, kernel, 1, act, true, rng),
        to_dim(channels, dim, 1, 1, act, false, rng),
        to_channels(dim, channels, 1, 1, act, true, rng),
        fuse(2 * channels, channels, kernel, 1, act, true, rng) {
    const MultiHeadConfig mh{dim, heads, 0.0f};
    for (std::size_t i = 0; i < depth; ++i) transformers.emplace_back(mh, mlp_hidden, act, ln_eps, rng);
  }

  std::size_t channels() const { return local.conv.in_channels(); }
  std::size_t dim() const { return to_dim.conv.out_channels(); }

  Tensor forward(const Tensor& x, MobileVitCache* cache = nullptr) const {
    if (x.rank() != 3 || x.dim(0) != channels()) {
      throw GeometryError("mobilevit block expects " + std::to_string(channels()) + " channels, got " +
                          shape_str(x.shape()));
    }
    const std::size_t h = x.dim(1), w = x.dim(2);
    const Tensor xl = to_dim.forward(local.forward(x, cache ? &cache->local : nullptr),
                                     cache ? &cache->to_dim : nullptr);
    Tensor xu = unfold(xl, patch_w, patch_h);
    const std::size_t offsets = xu.dim(0), n = xu.dim(1), d = xu.dim(2);
    const KeySets keys = KeySets::dense(n);
    if (cache) {
      cache->height = h;
      cache->width = w;
      cache->transformers.assign(offsets, std::vector<TransformerBlockCache>(transformers.size()));
      cache->transformer_calls.clear();
    }
    for (std::size_t p = 0; p < offsets; ++p) {
      Tensor seq({n, d}, std::vector<float>(xu.ptr() + p * n * d, xu.ptr() + (p + 1) * n * d));
      for (std::size_t b = 0; b < transformers.size(); ++b) {
        seq = transformers[b].forward(seq, keys, cache ? &cache->transformers[p][b] : nullptr);
      }
      std::copy(seq.data().begin(), seq.data().end(), xu.ptr() + p * n * d);
      if (cache) cache->transformer_calls.push_back(n);
    }
    const Tensor xf = fold(xu, h, w, patch_w, patch_h);
    const Tensor projected = to_channels.forward(xf, cache ? &cache->to_channels : nullptr);
    return fuse.forward(concat_channels(x, projected), cache ? &cache->fuse : nullptr);
  }

  Tensor backward(const Tensor& dy, const MobileVitCache& cache) {
    const std::size_t c = channels();
    const Tensor dcat = fuse.backward(dy, cache.fuse);
    const std::size_t plane = cache.height * cache.width;
    Tensor dx({c, cache.height, cache.width},
              std::vector<float>(dcat.ptr(), dcat.ptr() + c * plane));
    const Tensor dproj({c, cache.height, cache.width},
                       std::vector<float>(dcat.ptr() + c * plane, dcat.ptr() + 2 * c * plane));
    const Tensor dxf = to_channels.backward(dproj, cache.to_channels);
    Tensor du = unfold(dxf, patch_w, patch_h);
    const std::size_t offsets = du.dim(0), n = du.dim(1), d = du.dim(2);
    const KeySets keys = KeySets::dense(n);
    for (std::size_t p = 0; p < offsets; ++p) {
      Tensor g({n, d}, std::vector<float>(du.ptr() + p * n * d, du.ptr() + (p + 1) * n * d));
      for (std::size_t b = transformers.size(); b-- > 0;) {
        g = transformers[b].backward(g, keys, cache.transformers[p][b]);
      }
      std::copy(g.data().begin(), g.data().end(), du.ptr() + p * n * d);
    }
    const Tensor dxl = fold(du, cache.height, cache.width, patch_w, patch_h);
    dx += local.backward(to_dim.backward(dxl, cache.to_dim), cache.local);
    return dx;
  }

  template <class Fn>
  void visit(const std::string& p, Fn&& fn) {
    local.visit(p + ".local", fn);
    to_dim.visit(p + ".to_dim", fn);
    for (std::size_t i = 0; i < transformers.size(); ++i) transformers[i].visit(p + ".transformer" + std::to_string(i), fn);
    to_channels.visit(p + ".to_channels", fn);
    fuse.visit(p + ".fuse", fn);
  }
  template <class Fn>
  void visit(const std::string& p, Fn&& fn) const {
    local.visit(p + ".local", fn);
    to_dim.visit(p + ".to_dim", fn);
    for (std::size_t i = 0; i < transformers.size(); ++i) transformers[i].visit(p + ".transformer" + std::to_string(i), fn);
    to_channels.visit(p + ".to_channels", fn);
    fuse.visit(p + ".fuse", fn);
  }
};

// ---------------------------------------------------------------------------
// Touch classifier

struct TouchNetConfig {
  std::string preset = "paper";
  std::size_t image_size = 256;
  std::size_t channels = 3;
  // Transformer hidden dimension of each MobileViT stage.
  std::array<std::size_t, 3> dims{144, 192, 240};
  // Convolutional width of each stage (MobileViT-S widths).
  std::array<std::size_t, 3> stage_channels{96, 128, 160};
  std::size_t stem_channels = 16;
  Activation activation = Activation::silu;
  float mlp_ratio = 2.0f;
  std::size_t patch_w = 2;
  std::size_t patch_h = 2;
  std::size_t kernel = 3;
  std::size_t depth = 2;
  std::size_t heads = 4;
  std::size_t classes = 2;
  float ln_eps = 1e-5f;
  // Pixel standardisation applied before the first layer; defaults match
  // the simulator's gel images (mean intensity ~0.55, spread ~0.15).
  float input_mean = 0.55f;
  float input_std = 0.15f;

  static TouchNetConfig paper() { return {}; }

  static TouchNetConfig toy() {
    TouchNetConfig c;
    c.preset = "toy";
    c.image_size = 64;
    c.dims = {24, 32, 40};
    c.stage_channels = {16, 24, 32};
    return c;
  }

  std::size_t mlp_hidden(std::size_t stage) const {
    return static_cast<std::size_t>(mlp_ratio * static_cast<float>(dims[stage]));
  }

  // Feature-map side length entering MobileViT stage i (stem and each
  // downsampling conv halve it).
  std::size_t stage_size(std::size_t stage) const { return image_size >> (stage + 2); }

  void validate() const {
    if (!(input_std > 0.0f)) throw ConfigError("input std must be positive");
    if (dims[0] >= dims[1] || dims[1] >= dims[2]) throw ConfigError("stage hidden dims must be strictly increasing");
    if (channels == 0 || classes < 2 || depth == 0 || kernel % 2 == 0) throw ConfigError("invalid touch model config");
    if (image_size % 16 != 0) throw ConfigError("touch image size must be a multiple of 16");
    for (std::size_t i = 0; i < 3; ++i) {
      if (dims[i] % heads != 0) throw ConfigError("stage dim not divisible by head count");
      const std::size_t s = stage_size(i);
      if (s == 0 || s % patch_h != 0 || s % patch_w != 0) {
        throw ConfigError("stage " + std::to_string(i) + " feature map " + std::to_string(s) +
                          " not divisible by patch size");
      }
    }
  }
};

inline void to_json(nlohmann::json& j, const TouchNetConfig& c) {
  j = nlohmann::json{{"preset", c.preset},
                     {"image_size", c.image_size},
                     {"channels", c.channels},
                     {"dims", c.dims},
                     {"stage_channels", c.stage_channels},
                     {"stem_channels", c.stem_channels},
                     {"activation", std::string(to_string(c.activation))},
                     {"mlp_ratio", c.mlp_ratio},
                     {"patch_w", c.patch_w},
                     {"patch_h", c.patch_h},
                     {"kernel", c.kernel},
                     {"depth", c.depth},
                     {"heads", c.heads},
                     {"classes", c.classes},
                     {"ln_eps", c.ln_eps},
                     {"input_mean", c.input_mean},
                     {"input_std", c.input_std}};
}

inline void from_json(const nlohmann::json& j, TouchNetConfig& c) {
  c.preset = j.at("preset").get<std::string>();
  c.image_size = j.at("image_size").get<std::size_t>();
  c.channels = j.at("channels").get<std::size_t>();
  c.dims = j.at("dims").get<std::array<std::size_t, 3>>();
  c.stage_channels = j.at("stage_channels").get<std::array<std::size_t, 3>>();
  c.stem_channels = j.at("stem_channels").get<std::size_t>();
  c.activation = activation_from_string(j.at("activation").get<std::string>());
  c.mlp_ratio = j.at("mlp_ratio").get<float>();
  c.patch_w = j.at("patch_w").get<std::size_t>();
  c.patch_h = j.at("patch_h").get<std::size_t>();
  c.kernel = j.at("kernel").get<std::size_t>();
  c.depth = j.at("depth").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.classes = j.at("classes").get<std::size_t>();
  c.ln_eps = j.at("ln_eps").get<float>();
  c.input_mean = j.value("input_mean", c.input_mean);
  c.input_std = j.value("input_std", c.input_std);
}

struct TouchNetCache {
  ConvActCache stem;
  ConvActCache conv;
  std::array<ConvActCache, 3> down;
  std::array<MobileVitCache, 3> mvit;
  Tensor pooled;
  std::array<std::size_t, 3> final_shape{};
};

// stem conv s2 -> conv -> 3 x [conv s2 + MobileViT] -> global average pool
// -> linear head over {no-touch, touch}.
struct TouchNet {
  TouchNetConfig cfg;
  ConvAct stem;
  ConvAct conv;
  std::array<ConvAct, 3> down;
  std::array<MobileVitBlock, 3> mvit;
  Linear head;

  TouchNet() = default;
  TouchNet(const TouchNetConfig& c, std::uint64_t seed) : cfg(c) {
    cfg.validate();
    Rng rng(seed);
    const Activation a = cfg.activation;
    stem = ConvAct(cfg.channels, cfg.stem_channels, cfg.kernel, 2, a, true, rng);
    conv = ConvAct(cfg.stem_channels, cfg.stem_channels, cfg.kernel, 1, a, true, rng);
    std::size_t prev = cfg.stem_channels;
    for (std::size_t i = 0; i < 3; ++i) {
      down[i] = ConvAct(prev, cfg.stage_channels[i], cfg.kernel, 2, a, true, rng);
      mvit[i] = MobileVitBlock(cfg.stage_channels[i], cfg.dims[i], cfg.depth, cfg.heads, cfg.mlp_hidden(i),
                               cfg.kernel, cfg.patch_w, cfg.patch_h, a, cfg.ln_eps, rng);
      prev = cfg.stage_channels[i];
    }
    head = Linear(prev, cfg.classes, rng);
  }

  Shape input_shape() const { return {cfg.channels, cfg.image_size, cfg.image_size}; }

  Tensor logits(const Tensor& image, TouchNetCache* cache = nullptr, Rng* = nullptr) const {
    if (image.shape() != input_shape()) {
      throw GeometryError("touch model expects " + shape_str(input_shape()) + ", got " +
                          shape_str(image.shape()));
    }
    Tensor x = stem.forward(standardize(image, cfg.input_mean, cfg.input_std), cache ? &cache->stem : nullptr);
    x = conv.forward(x, cache ? &cache->conv : nullptr);
    for (std::size_t i = 0; i < 3; ++i) {
      x = down[i].forward(x, cache ? &cache->down[i] : nullptr);
      x = mvit[i].forward(x, cache ? &cache->mvit[i] : nullptr);
    }
    const std::size_t c = x.dim(0), plane = x.dim(1) * x.dim(2);
    Tensor pooled({1, c});
    for (std::size_t ch = 0; ch < c; ++ch) {
      double s = 0.0;
      for (std::size_t i = 0; i < plane; ++i) s += x[ch * plane + i];
      pooled[ch] = static_cast<float>(s / static_cast<double>(plane));
    }
    Tensor out = head.forward(pooled).reshaped({cfg.classes});
    if (cache) {
      cache->pooled = std::move(pooled);
      cache->final_shape = {x.dim(0), x.dim(1), x.dim(2)};
    }
    return out;
  }

  void backward(const Tensor& dlogits, const TouchNetCache& cache) {
    const Tensor dpooled = head.backward(cache.pooled, dlogits.reshaped({1, cfg.classes}));
    const auto [c, h, w] = cache.final_shape;
    Tensor dx({c, h, w});
    const float inv = 1.0f / static_cast<float>(h * w);
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < h * w; ++i) dx[ch * h * w + i] = dpooled[ch] * inv;
    for (std::size_t i = 3; i-- > 0;) {
      dx = mvit[i].backward(dx, cache.mvit[i]);
      dx = down[i].backward(dx, cache.down[i]);
    }
    dx = conv.backward(dx, cache.conv);
    stem.backward(dx, cache.stem);
  }

  template <class Fn>
  void visit(Fn&& fn) {
    stem.visit("stem", fn);
    conv.visit("conv", fn);
    for (std::size_t i = 0; i < 3; ++i) {
      down[i].visit("stage" + std::to_string(i) + ".down", fn);
      mvit[i].visit("stage" + std::to_string(i) + ".mvit", fn);
    }
    head.visit("head", fn);
  }
  template <class Fn>
  void visit(Fn&& fn) const {
    stem.visit("stem", fn);
    conv.visit("conv", fn);
    for (std::size_t i = 0; i < 3; ++i) {
      down[i].visit("stage" + std::to_string(i) + ".down", fn);
      mvit[i].visit("stage" + std::to_string(i) + ".mvit", fn);
    }
    head.visit("head", fn);
  }
};

// Class probabilities {no-touch, touch} for one image.
inline Tensor touch_forward(const Tensor& image, const TouchNet& net) {
  return softmax(net.logits(image), 0);
}

}  // namespace vtgrasp
