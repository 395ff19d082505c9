#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "vtgrasp/error.hpp"
#include "vtgrasp/layers.hpp"
#include "vtgrasp/ops.hpp"
#include "vtgrasp/rng.hpp"
#include "vtgrasp/tensor.hpp"

namespace vtgrasp {

// softmax(Q K^T / sqrt(d_k)) V for q [n_q x d_k], k [n_k x d_k], v [n_k x d_v].
inline Tensor self_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || q.dim(1) != k.dim(1) ||
      k.dim(0) != v.dim(0)) {
    throw DimensionError("self_attention: q " + shape_str(q.shape()) + ", k " +
                         shape_str(k.shape()) + ", v " + shape_str(v.shape()));
  }
  Tensor scores = matmul(q, transpose(k));
  const float scale = std::sqrt(static_cast<float>(q.dim(1)));
  for (float& s : scores.data()) s /= scale;
  return matmul(softmax(scores, 1), v);
}

struct MultiHeadConfig {
  std::size_t hidden = 768;
  std::size_t heads = 12;
  float dropout = 0.0f;

  std::size_t head_dim() const { return hidden / heads; }

  void validate() const {
    if (hidden == 0 || heads == 0) throw ConfigError("hidden size and head count must be positive");
    if (hidden % heads != 0) {
      throw ConfigError("hidden size " + std::to_string(hidden) + " is not divisible by " +
                        std::to_string(heads) + " heads");
    }
    if (!(dropout >= 0.0f && dropout < 1.0f)) throw ConfigError("dropout must lie in [0, 1)");
  }
};

// For each query token, the list of key tokens it may attend to (CSR layout).
// A dense set lets every query see every token.
class KeySets {
 public:
  KeySets() = default;

  static KeySets dense(std::size_t n) {
    KeySets s;
    s.dense_ = true;
    s.tokens_ = n;
    return s;
  }

  explicit KeySets(std::size_t tokens) : tokens_(tokens) { offsets_.push_back(0); }

  void add_query(std::span<const std::uint32_t> keys) {
    for (auto k : keys) {
      if (k >= tokens_) throw DimensionError("key index out of range");
      indices_.push_back(k);
    }
    offsets_.push_back(indices_.size());
  }

  bool is_dense() const { return dense_; }
  std::size_t tokens() const { return tokens_; }
  std::size_t queries() const { return dense_ ? tokens_ : offsets_.size() - 1; }
  std::size_t count(std::size_t q) const { return dense_ ? tokens_ : offsets_[q + 1] - offsets_[q]; }
  std::size_t offset(std::size_t q) const { return dense_ ? q * tokens_ : offsets_[q]; }
  std::size_t total() const { return dense_ ? tokens_ * tokens_ : indices_.size(); }
  std::uint32_t key(std::size_t q, std::size_t j) const {
    return dense_ ? static_cast<std::uint32_t>(j) : indices_[offsets_[q] + j];
  }

 private:
  bool dense_ = false;
  std::size_t tokens_ = 0;
  std::vector<std::size_t> offsets_;
  std::vector<std::uint32_t> indices_;
};

namespace detail {

// qkv [n x 3D] laid out as (Q | K | V); head h owns columns h*dh..(h+1)*dh of
// each block. weights holds heads x keys.total() softmax probabilities.
inline void attend_forward(const Tensor& qkv, std::size_t heads, const KeySets& keys, Tensor& context,
                           std::vector<float>& weights) {
  const std::size_t n = qkv.dim(0), d = qkv.dim(1) / 3, dh = d / heads;
  if (keys.queries() != n || keys.tokens() != n) {
    throw DimensionError("attention key sets describe " + std::to_string(keys.queries()) +
                         " queries over " + std::to_string(keys.tokens()) + " tokens, input has " +
                         std::to_string(n));
  }
  const float scale = std::sqrt(static_cast<float>(dh));
  const std::size_t total = keys.total();
  context = Tensor({n, d});
  weights.assign(heads * total, 0.0f);
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < n; ++i) {
      const float* qi = qkv.ptr() + i * 3 * d + h * dh;
      const std::size_t cnt = keys.count(i);
      float* w = weights.data() + h * total + keys.offset(i);
      for (std::size_t j = 0; j < cnt; ++j) {
        const float* kj = qkv.ptr() + keys.key(i, j) * 3 * d + d + h * dh;
        float dot = 0.0f;
        for (std::size_t c = 0; c < dh; ++c) dot += qi[c] * kj[c];
        w[j] = dot / scale;
      }
      kernel::softmax_strided(w, cnt, 1);
      float* out = context.ptr() + i * d + h * dh;
      for (std::size_t j = 0; j < cnt; ++j) {
        const float* vj = qkv.ptr() + keys.key(i, j) * 3 * d + 2 * d + h * dh;
        for (std::size_t c = 0; c < dh; ++c) out[c] += w[j] * vj[c];
      }
    }
  }
}

inline Tensor attend_backward(const Tensor& qkv, std::size_t heads, const KeySets& keys,
                              const std::vector<float>& weights, const Tensor& dcontext) {
  const std::size_t n = qkv.dim(0), d = qkv.dim(1) / 3, dh = d / heads;
  const float scale = std::sqrt(static_cast<float>(dh));
  const std::size_t total = keys.total();
  Tensor dqkv(qkv.shape());
  std::vector<float> dw;
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t cnt = keys.count(i);
      const float* w = weights.data() + h * total + keys.offset(i);
      const float* dout = dcontext.ptr() + i * d + h * dh;
      const float* qi = qkv.ptr() + i * 3 * d + h * dh;
      float* dqi = dqkv.ptr() + i * 3 * d + h * dh;
      dw.assign(cnt, 0.0f);
      double wdw = 0.0;
      for (std::size_t j = 0; j < cnt; ++j) {
        const std::size_t kj = keys.key(i, j);
        const float* vj = qkv.ptr() + kj * 3 * d + 2 * d + h * dh;
        float* dvj = dqkv.ptr() + kj * 3 * d + 2 * d + h * dh;
        float s = 0.0f;
        for (std::size_t c = 0; c < dh; ++c) {
          s += dout[c] * vj[c];
          dvj[c] += w[j] * dout[c];
        }
        dw[j] = s;
        wdw += static_cast<double>(w[j]) * s;
      }
      for (std::size_t j = 0; j < cnt; ++j) {
        const std::size_t kj = keys.key(i, j);
        const float ds = w[j] * (dw[j] - static_cast<float>(wdw)) / scale;
        const float* kv = qkv.ptr() + kj * 3 * d + d + h * dh;
        float* dkj = dqkv.ptr() + kj * 3 * d + d + h * dh;
        for (std::size_t c = 0; c < dh; ++c) {
          dqi[c] += ds * kv[c];
          dkj[c] += ds * qi[c];
        }
      }
    }
  }
  return dqkv;
}

}  // namespace detail

struct AttentionCache {
  Tensor x;
  Tensor qkv;
  std::vector<float> weights;
  Tensor context;
  Tensor dropout_mask;
};

// Fused Q/K/V projection, per-head scaled dot-product attention restricted to
// the given key sets, concatenation, output projection.
struct MultiHeadAttention {
  MultiHeadConfig cfg;
  Linear qkv;
  Linear out;

  MultiHeadAttention() = default;
  MultiHeadAttention(const MultiHeadConfig& c, Rng& rng)
      : cfg(c), qkv((c.validate(), c.hidden), 3 * c.hidden, rng), out(c.hidden, c.hidden, rng) {}

  // Attention weights of head h for query i (valid after a cached forward).
  std::span<const float> weights(const AttentionCache& cache, const KeySets& keys, std::size_t h,
                                 std::size_t i) const {
    return {cache.weights.data() + h * keys.total() + keys.offset(i), keys.count(i)};
  }

  Tensor forward(const Tensor& x, const KeySets& keys, AttentionCache* cache = nullptr,
                 Rng* dropout_rng = nullptr) const {
    if (x.rank() != 2 || x.dim(1) != cfg.hidden) {
      throw DimensionError("multi_head_attention: input " + shape_str(x.shape()) +
                           " does not match hidden size " + std::to_string(cfg.hidden));
    }
    Tensor projected = qkv.forward(x);
    Tensor context;
    std::vector<float> weights;
    detail::attend_forward(projected, cfg.heads, keys, context, weights);
    Tensor y = out.forward(context);
    if (dropout_rng && cfg.dropout > 0.0f) {
      Tensor mask(y.shape());
      const float keep = 1.0f - cfg.dropout;
      for (std::size_t i = 0; i < mask.size(); ++i) {
        mask[i] = dropout_rng->uniform() < keep ? 1.0f / keep : 0.0f;
        y[i] *= mask[i];
      }
      if (cache) cache->dropout_mask = std::move(mask);
    }
    if (cache) {
      cache->x = x;
      cache->qkv = std::move(projected);
      cache->weights = std::move(weights);
      cache->context = std::move(context);
    }
    return y;
  }

  Tensor backward(const Tensor& dy, const KeySets& keys, const AttentionCache& cache) {
    Tensor g = dy;
    if (!cache.dropout_mask.empty()) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] *= cache.dropout_mask[i];
    }
    const Tensor dcontext = out.backward(cache.context, g);
    const Tensor dqkv = detail::attend_backward(cache.qkv, cfg.heads, keys, cache.weights, dcontext);
    return qkv.backward(cache.x, dqkv);
  }

  template <class Fn>
  void visit(const std::string& p, Fn&& fn) {
    qkv.visit(p + ".qkv", fn);
    out.visit(p + ".out", fn);
  }
  template <class Fn>
  void visit(const std::string& p, Fn&& fn) const {
    qkv.visit(p + ".qkv", fn);
    out.visit(p + ".out", fn);
  }
};

// Full (unmasked) multi-head self-attention over the rows of x.
inline Tensor multi_head_attention(const Tensor& x, const MultiHeadAttention& params) {
  return params.forward(x, KeySets::dense(x.dim(0)));
}

// ---------------------------------------------------------------------------
// Token grids for space-time inputs.

// Row 0 is the classification token (p,t) = (0,0); patch p in 1..N of frame
// t in 1..F lives at row (t-1)*N + p.
struct TokenGrid {
  Tensor tokens;
  std::size_t patches = 1;
  std::size_t frames = 1;

  std::size_t index(std::size_t p, std::size_t t) const { return (t - 1) * patches + p; }
  std::size_t count() const { return patches * frames + 1; }

  void validate() const {
    if (patches == 0 || frames == 0) throw GeometryError("token grid needs N >= 1 and F >= 1");
    if (tokens.rank() != 2 || tokens.dim(0) != count()) {
      throw GeometryError("token grid with N=" + std::to_string(patches) + ", F=" +
                          std::to_string(frames) + " needs " + std::to_string(count()) +
                          " tokens, got " + shape_str(tokens.shape()));
    }
  }
};

inline std::size_t comparisons_per_patch(std::size_t patches, std::size_t frames) {
  return patches + frames + 2;
}

// Temporal pass: (p,t) sees the CLS token and the same patch in every frame.
// The CLS query sees every token.
inline KeySets temporal_key_sets(std::size_t patches, std::size_t frames) {
  const std::size_t n = patches * frames + 1;
  KeySets ks(n);
  std::vector<std::uint32_t> all(n);
  for (std::size_t i = 0; i < n; ++i) all[i] = static_cast<std::uint32_t>(i);
  ks.add_query(all);
  std::vector<std::uint32_t> keys;
  for (std::size_t t = 1; t <= frames; ++t) {
    for (std::size_t p = 1; p <= patches; ++p) {
      keys.assign(1, 0);
      for (std::size_t tt = 1; tt <= frames; ++tt)
        keys.push_back(static_cast<std::uint32_t>((tt - 1) * patches + p));
      ks.add_query(keys);
    }
  }
  return ks;
}

// Spatial pass: (p,t) sees the CLS token and every patch of frame t.
inline KeySets spatial_key_sets(std::size_t patches, std::size_t frames) {
  const std::size_t n = patches * frames + 1;
  KeySets ks(n);
  std::vector<std::uint32_t> all(n);
  for (std::size_t i = 0; i < n; ++i) all[i] = static_cast<std::uint32_t>(i);
  ks.add_query(all);
  std::vector<std::uint32_t> keys;
  for (std::size_t t = 1; t <= frames; ++t) {
    for (std::size_t p = 1; p <= patches; ++p) {
      keys.assign(1, 0);
      for (std::size_t pp = 1; pp <= patches; ++pp)
        keys.push_back(static_cast<std::uint32_t>((t - 1) * patches + pp));
      ks.add_query(keys);
    }
  }
  return ks;
}

// ---------------------------------------------------------------------------
// Patch embedding

// frames [F x C x H x W] -> rows [(F*N) x (C*P*P)], row (t-1)*N + (p-1),
// column c*P*P + i*P + j.
inline Tensor extract_patches(const Tensor& frames, std::size_t patch) {
  if (frames.rank() != 4) {
    throw GeometryError("expected frames [F x C x H x W], got " + shape_str(frames.shape()));
  }
  const std::size_t f = frames.dim(0), c = frames.dim(1), h = frames.dim(2), w = frames.dim(3);
  if (patch == 0 || h % patch != 0 || w % patch != 0) {
    throw GeometryError("image " + std::to_string(h) + "x" + std::to_string(w) +
                        " is not divisible by patch size " + std::to_string(patch));
  }
  const std::size_t gh = h / patch, gw = w / patch, n = gh * gw, dim = c * patch * patch;
  Tensor rows({f * n, dim});
  for (std::size_t t = 0; t < f; ++t)
    for (std::size_t by = 0; by < gh; ++by)
      for (std::size_t bx = 0; bx < gw; ++bx) {
        float* dst = rows.ptr() + (t * n + by * gw + bx) * dim;
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t i = 0; i < patch; ++i)
            for (std::size_t j = 0; j < patch; ++j)
              dst[(ch * patch + i) * patch + j] =
                  frames[((t * c + ch) * h + by * patch + i) * w + bx * patch + j];
      }
  return rows;
}

struct PatchEmbedCache {
  Tensor patches;
};

// Linear patch projection plus a learned CLS token and a factorised learned
// positional embedding: token (p,t) gets spatial[p] + temporal[t-1], the CLS
// token gets spatial[0].
struct PatchEmbedding {
  std::size_t channels = 3;
  std::size_t image = 224;
  std::size_t patch = 16;
  std::size_t frames = 8;
  Linear proj;
  Param cls;
  Param pos_spatial;
  Param pos_temporal;

  PatchEmbedding() = default;
  PatchEmbedding(std::size_t channels_, std::size_t image_, std::size_t patch_, std::size_t frames_,
                 std::size_t hidden, Rng& rng)
      : channels(channels_), image(image_), patch(patch_), frames(frames_) {
    if (patch == 0 || image % patch != 0) {
      throw GeometryError("image " + std::to_string(image) + " is not divisible by patch size " +
                          std::to_string(patch));
    }
    proj = Linear(channels * patch * patch, hidden, rng);
    cls = Param(Tensor::normal({1, hidden}, rng, 0.02f));
    pos_spatial = Param(Tensor::normal({patches() + 1, hidden}, rng, 0.02f));
    pos_temporal = Param(Tensor::normal({frames, hidden}, rng, 0.02f));
  }

  std::size_t hidden() const { return proj.out_features(); }
  std::size_t patches() const { return (image / patch) * (image / patch); }

  TokenGrid forward(const Tensor& clip, PatchEmbedCache* cache = nullptr) const {
    const Shape expected{frames, channels, image, image};
    if (clip.shape() != expected) {
      throw GeometryError("clip " + shape_str(clip.shape()) + " does not match model geometry " +
                          shape_str(expected));
    }
    Tensor rows = extract_patches(clip, patch);
    const Tensor embedded = proj.forward(rows);
    const std::size_t n = patches(), d = hidden();
    TokenGrid grid{Tensor({n * frames + 1, d}), n, frames};
    for (std::size_t c = 0; c < d; ++c) grid.tokens.at(0, c) = cls.value[c] + pos_spatial.value.at(0, c);
    for (std::size_t t = 1; t <= frames; ++t)
      for (std::size_t p = 1; p <= n; ++p) {
        const std::size_t row = grid.index(p, t);
        for (std::size_t c = 0; c < d; ++c) {
          grid.tokens.at(row, c) = embedded.at(row - 1, c) + pos_spatial.value.at(p, c) +
                                   pos_temporal.value.at(t - 1, c);
        }
      }
    if (cache) cache->patches = std::move(rows);
    return grid;
  }

  void backward(const Tensor& dtokens, const PatchEmbedCache& cache) {
    const std::size_t n = patches(), d = hidden();
    Tensor dembedded({n * frames, d});
    Tensor& dcls = cls.grad_buffer();
    Tensor& dspatial = pos_spatial.grad_buffer();
    Tensor& dtemporal = pos_temporal.grad_buffer();
    for (std::size_t c = 0; c < d; ++c) {
      dcls[c] += dtokens.at(0, c);
      dspatial.at(0, c) += dtokens.at(0, c);
    }
    for (std::size_t t = 1; t <= frames; ++t)
      for (std::size_t p = 1; p <= n; ++p) {
        const std::size_t row = (t - 1) * n + p;
        for (std::size_t c = 0; c < d; ++c) {
          const float g = dtokens.at(row, c);
          dembedded.at(row - 1, c) = g;
          dspatial.at(p, c) += g;
          dtemporal.at(t - 1, c) += g;
        }
      }
    proj.backward_params(cache.patches, dembedded);
  }

  template <class Fn>
  void visit(const std::string& p, Fn&& fn) {
    proj.visit(p + ".proj", fn);
    fn(p + ".cls", cls);
    fn(p + ".pos_spatial", pos_spatial);
    fn(p + ".pos_temporal", pos_temporal);
  }
  template <class Fn>
  void visit(const std::string& p, Fn&& fn) const {
    proj.visit(p + ".proj", fn);
    fn(p + ".cls", cls);
    fn(p + ".pos_spatial", pos_spatial);
    fn(p + ".pos_temporal", pos_temporal);
  }
};

inline TokenGrid patch_embed(const Tensor& frames, const PatchEmbedding& params) {
  return params.forward(frames);
}

// ---------------------------------------------------------------------------
// Pre-norm transformer block: x + MSA(LN(x)), then + MLP(LN(.)).

struct TransformerBlockCache {
  Tensor x;
  LayerNormStats ln1;
  Tensor ln1_out;
  AttentionCache attn;
  Tensor mid;
  LayerNormStats ln2;
  MlpCache mlp;
};

struct TransformerBlock {
  LayerNorm ln1;
  MultiHeadAttention attn;
  LayerNorm ln2;
  Mlp mlp;

  TransformerBlock() = default;
  TransformerBlock(const MultiHeadConfig& cfg, std::size_t mlp_hidden, Activation act, float ln_eps,
                   Rng& rng)
      : ln1(cfg.hidden, ln_eps), attn(cfg, rng), ln2(cfg.hidden, ln_eps), mlp(cfg.hidden, mlp_hidden, act, rng) {}

  Tensor forward(const Tensor& x, const KeySets& keys, TransformerBlockCache* cache = nullptr,
                 Rng* dropout_rng = nullptr) const {
    LayerNormStats s1, s2;
    Tensor h1 = ln1.forward(x, &s1);
    Tensor mid = x + attn.forward(h1, keys, cache ? &cache->attn : nullptr, dropout_rng);
    Tensor h2 = ln2.forward(mid, &s2);
    Tensor y = mid + mlp.forward(h2, cache ? &cache->mlp : nullptr);
    if (cache) {
      cache->x = x;
      cache->ln1 = std::move(s1);
      cache->ln1_out = std::move(h1);
      cache->mid = std::move(mid);
      cache->ln2 = std::move(s2);
    }
    return y;
  }

  Tensor backward(const Tensor& dy, const KeySets& keys, const TransformerBlockCache& cache) {
    Tensor dmid = dy + ln2.backward(cache.mid, cache.ln2, mlp.backward(dy, cache.mlp));
    return dmid + ln1.backward(cache.x, cache.ln1, attn.backward(dmid, keys, cache.attn));
  }

  template <class Fn>
  void visit(const std::string& p, Fn&& fn) {
    ln1.visit(p + ".ln1", fn);
    attn.visit(p + ".attn", fn);
    ln2.visit(p + ".ln2", fn);
    mlp.visit(p + ".mlp", fn);
  }
  template <class Fn>
  void visit(const std::string& p, Fn&& fn) const {
    ln1.visit(p + ".ln1", fn);
    attn.visit(p + ".attn", fn);
    ln2.visit(p + ".ln2", fn);
    mlp.visit(p + ".mlp", fn);
  }
};

// Dense transformer block over every token of the grid.
inline TokenGrid transformer_block(const TokenGrid& x, const TransformerBlock& params) {
  x.validate();
  return {params.forward(x.tokens, KeySets::dense(x.count())), x.patches, x.frames};
}

// ---------------------------------------------------------------------------
// Divided space-time attention: temporal pass then spatial pass, each a
// pre-norm residual multi-head attention over its own key sets.

struct DividedKeyCounts {
  std::size_t temporal = 0;
  std::size_t spatial = 0;
  std::size_t total() const { return temporal + spatial; }
};

struct DividedAttentionCache {
  Tensor x;
  LayerNormStats ln_t;
  AttentionCache temporal;
  Tensor mid;
  LayerNormStats ln_s;
  AttentionCache spatial;
  DividedKeyCounts counts;
};

// Counts keys per non-CLS query and checks they are uniform and sum to N+F+2.
inline DividedKeyCounts count_divided_keys(const KeySets& temporal, const KeySets& spatial,
                                           std::size_t patches, std::size_t frames) {
  DividedKeyCounts c{temporal.count(1), spatial.count(1)};
  for (std::size_t q = 1; q < temporal.queries(); ++q) {
    if (temporal.count(q) != c.temporal || spatial.count(q) != c.spatial) {
      throw Error("internal", "divided attention key sets are not uniform across queries");
    }
  }
  if (c.total() != comparisons_per_patch(patches, frames)) {
    throw Error("internal", "divided attention compares " + std::to_string(c.total()) +
                                " keys per patch, expected " +
                                std::to_string(comparisons_per_patch(patches, frames)));
  }
  return c;
}

struct DividedAttention {
  LayerNorm ln_t;
  MultiHeadAttention temporal;
  LayerNorm ln_s;
  MultiHeadAttention spatial;

  DividedAttention() = default;
  DividedAttention(const MultiHeadConfig& cfg, float ln_eps, Rng& rng)
      : ln_t(cfg.hidden, ln_eps), temporal(cfg, rng), ln_s(cfg.hidden, ln_eps), spatial(cfg, rng) {}

  TokenGrid forward(const TokenGrid& x, DividedAttentionCache* cache = nullptr,
                    Rng* dropout_rng = nullptr) const {
    x.validate();
    const KeySets tk = temporal_key_sets(x.patches, x.frames);
    const KeySets sk = spatial_key_sets(x.patches, x.frames);
    const DividedKeyCounts counts = count_divided_keys(tk, sk, x.patches, x.frames);
    LayerNormStats st, ss;
    Tensor mid = x.tokens + temporal.forward(ln_t.forward(x.tokens, &st), tk,
                                             cache ? &cache->temporal : nullptr, dropout_rng);
    Tensor y = mid + spatial.forward(ln_s.forward(mid, &ss), sk, cache ? &cache->spatial : nullptr,
                                     dropout_rng);
    if (cache) {
      cache->x = x.tokens;
      cache->ln_t = std::move(st);
      cache->mid = std::move(mid);
      cache->ln_s = std::move(ss);
      cache->counts = counts;
    }
    return {std::move(y), x.patches, x.frames};
  }

  Tensor backward(const Tensor& dy, std::size_t patches, std::size_t frames,
                  const DividedAttentionCache& cache) {
    const KeySets tk = temporal_key_sets(patches, frames);
    const KeySets sk = spatial_key_sets(patches, frames);
    Tensor dmid = dy + ln_s.backward(cache.mid, cache.ln_s, spatial.backward(dy, sk, cache.spatial));
    return dmid + ln_t.backward(cache.x, cache.ln_t, temporal.backward(dmid, tk, cache.temporal));
  }

  template <class Fn>
  void visit(const std::string& p, Fn&& fn) {
    ln_t.visit(p + ".ln_t", fn);
    temporal.visit(p + ".temporal", fn);
    ln_s.visit(p + ".ln_s", fn);
    spatial.visit(p + ".spatial", fn);
  }
  template <class Fn>
  void visit(const std::string& p, Fn&& fn) const {
    ln_t.visit(p + ".ln_t", fn);
    temporal.visit(p + ".temporal", fn);
    ln_s.visit(p + ".ln_s", fn);
    spatial.visit(p + ".spatial", fn);
  }
};

inline TokenGrid divided_st_attention(const TokenGrid& x, const DividedAttention& params) {
  return params.forward(x);
}

struct DividedBlockCache {
  DividedAttentionCache attn;
  Tensor mid;
  LayerNormStats ln_m;
  MlpCache mlp;
};

// Divided attention followed by a pre-norm residual MLP.
struct DividedBlock {
  DividedAttention attn;
  LayerNorm ln_m;
  Mlp mlp;

  DividedBlock() = default;
  DividedBlock(const MultiHeadConfig& cfg, std::size_t mlp_hidden, Activation act, float ln_eps, Rng& rng)
      : attn(cfg, ln_eps, rng), ln_m(cfg.hidden, ln_eps), mlp(cfg.hidden, mlp_hidden, act, rng) {}

  TokenGrid forward(const TokenGrid& x, DividedBlockCache* cache = nullptr, Rng* dropout_rng = nullptr) const {
    TokenGrid a = attn.forward(x, cache ? &cache->attn : nullptr, dropout_rng);
    LayerNormStats sm;
    Tensor y = a.tokens + mlp.forward(ln_m.forward(a.tokens, &sm), cache ? &cache->mlp : nullptr);
    if (cache) {
      cache->mid = std::move(a.tokens);
      cache->ln_m = std::move(sm);
    }
    return {std::move(y), x.patches, x.frames};
  }

  Tensor backward(const Tensor& dy, std::size_t patches, std::size_t frames, const DividedBlockCache& cache) {
    Tensor dmid = dy + ln_m.backward(cache.mid, cache.ln_m, mlp.backward(dy, cache.mlp));
    return attn.backward(dmid, patches, frames, cache.attn);
  }

  template <class Fn>
  void visit(const std::string& p, Fn&& fn) {
    attn.visit(p + ".attn", fn);
    ln_m.visit(p + ".ln_m", fn);
    mlp.visit(p + ".mlp", fn);
  }
  template <class Fn>
  void visit(const std::string& p, Fn&& fn) const {
    attn.visit(p + ".attn", fn);
    ln_m.visit(p + ".ln_m", fn);
    mlp.visit(p + ".mlp", fn);
  }
};

}  // namespace vtgrasp
