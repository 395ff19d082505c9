#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "vtgrasp/attention.hpp"
#include "vtgrasp/error.hpp"
#include "vtgrasp/layers.hpp"
#include "vtgrasp/tensor.hpp"

namespace vtgrasp {

struct SlipNetConfig {
  std::string variant = "baseline";
  std::size_t frames = 8;
  std::size_t image_size = 224;
  std::size_t channels = 3;
  std::size_t patch = 16;
  std::size_t hidden = 768;
  std::size_t heads = 12;
  std::size_t blocks = 12;
  std::size_t intermediate = 3078;
  float ln_eps = 1e-6f;
  Activation activation = Activation::gelu;
  std::size_t classes = 2;
  float dropout = 0.0f;
  // Pixel standardisation applied before the first layer; defaults match
  // the simulator's gel images (mean intensity ~0.55, spread ~0.15).
  float input_mean = 0.55f;
  float input_std = 0.15f;
  // Accuracy reported for the variant on its original dataset. Provenance
  // only; never used as an expectation.
  std::optional<double> reported_accuracy;

  // Desk-scale preset used for training and acceptance runs.
  static SlipNetConfig toy() {
    SlipNetConfig c;
    c.variant = "toy";
    c.image_size = 32;
    c.patch = 8;
    c.hidden = 64;
    c.heads = 4;
    c.blocks = 2;
    c.intermediate = 256;
    return c;
  }

  std::size_t patches() const { return (image_size / patch) * (image_size / patch); }
  MultiHeadConfig attention() const { return {hidden, heads, dropout}; }
  Shape input_shape() const { return {frames, channels, image_size, image_size}; }

  void validate() const {
    if (!(input_std > 0.0f)) throw ConfigError("input std must be positive");
    attention().validate();
    if (patch == 0 || image_size % patch != 0) {
      throw ConfigError("image size " + std::to_string(image_size) + " is not divisible by patch " +
                        std::to_string(patch));
    }
    if (frames == 0 || channels == 0 || blocks == 0 || intermediate == 0 || classes < 2) {
      throw ConfigError("invalid slip model config");
    }
  }
};

inline void to_json(nlohmann::json& j, const SlipNetConfig& c) {
  j = nlohmann::json{{"variant", c.variant},       {"frames", c.frames},
                     {"image_size", c.image_size}, {"channels", c.channels},
                     {"patch", c.patch},           {"hidden", c.hidden},
                     {"heads", c.heads},           {"blocks", c.blocks},
                     {"intermediate", c.intermediate}, {"ln_eps", c.ln_eps},
                     {"activation", std::string(to_string(c.activation))},
                     {"classes", c.classes},       {"dropout", c.dropout},
                     {"input_mean", c.input_mean}, {"input_std", c.input_std}};
  if (c.reported_accuracy) j["reported_accuracy"] = *c.reported_accuracy;
}

inline void from_json(const nlohmann::json& j, SlipNetConfig& c) {
  c.variant = j.at("variant").get<std::string>();
  c.frames = j.at("frames").get<std::size_t>();
  c.image_size = j.at("image_size").get<std::size_t>();
  c.channels = j.at("channels").get<std::size_t>();
  c.patch = j.at("patch").get<std::size_t>();
  c.hidden = j.at("hidden").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.blocks = j.at("blocks").get<std::size_t>();
  c.intermediate = j.at("intermediate").get<std::size_t>();
  c.ln_eps = j.at("ln_eps").get<float>();
  c.activation = activation_from_string(j.at("activation").get<std::string>());
  c.classes = j.at("classes").get<std::size_t>();
  c.dropout = j.value("dropout", 0.0f);
  c.input_mean = j.value("input_mean", c.input_mean);
  c.input_std = j.value("input_std", c.input_std);
  if (j.contains("reported_accuracy")) c.reported_accuracy = j.at("reported_accuracy").get<double>();
}

// ---------------------------------------------------------------------------
// Ablation registry

struct SlipVariant {
  std::string_view name;
  std::size_t hidden;
  std::size_t heads;
  std::size_t blocks;
  double reported_accuracy;
};

inline constexpr std::array<SlipVariant, 8> kSlipVariants{{
    {"baseline", 768, 12, 12, 0.8615},
    {"AB1-384", 384, 12, 12, 0.7307},
    {"AB1-576", 576, 12, 12, 0.7076},
    {"AB2-16", 768, 16, 12, 0.8923},
    {"AB2-8", 768, 8, 12, 0.7923},
    {"AB3-8", 768, 12, 8, 0.8923},
    {"AB3-6", 768, 12, 6, 0.8615},
    {"AB3-4", 768, 12, 4, 0.8076},
}};

// "proposed" resolves to AB3-8, the reduced-depth model; AB2-16 reports the
// same accuracy and stays reachable by name.
inline SlipNetConfig build_variant(std::string_view name) {
  if (name == "proposed") name = "AB3-8";
  for (const auto& v : kSlipVariants) {
    if (v.name == name) {
      SlipNetConfig c;
      c.variant = std::string(v.name);
      c.hidden = v.hidden;
      c.heads = v.heads;
      c.blocks = v.blocks;
      c.reported_accuracy = v.reported_accuracy;
      return c;
    }
  }
  throw ConfigError("unknown slip model variant '" + std::string(name) + "'");
}

// Keeps the variant's width/depth but takes frames, image, patch and channel
// count from `geometry`.
inline SlipNetConfig with_geometry(SlipNetConfig cfg, const SlipNetConfig& geometry) {
  cfg.frames = geometry.frames;
  cfg.image_size = geometry.image_size;
  cfg.patch = geometry.patch;
  cfg.channels = geometry.channels;
  return cfg;
}

// Closed-form trainable parameter count.
inline std::size_t slip_param_count(const SlipNetConfig& c) {
  const std::size_t d = c.hidden, n = c.patches(), in = c.channels * c.patch * c.patch;
  const std::size_t embed = in * d + d + d + (n + 1) * d + c.frames * d;
  const std::size_t attention = 3 * d * d + 3 * d + d * d + d;
  const std::size_t mlp = d * c.intermediate + c.intermediate + c.intermediate * d + d;
  const std::size_t block = 3 * 2 * d + 2 * attention + mlp;
  return embed + c.blocks * block + 2 * d + d * c.classes + c.classes;
}

// ---------------------------------------------------------------------------

struct SlipNetCache {
  PatchEmbedCache embed;
  std::vector<DividedBlockCache> blocks;
  Tensor cls_row;
  LayerNormStats final_stats;
  Tensor cls_norm;
};

// patch embedding -> blocks x (temporal attention, spatial attention, MLP) ->
// LN on the CLS token -> linear head over {stable, slip}.
struct SlipNet {
  SlipNetConfig cfg;
  PatchEmbedding embed;
  std::vector<DividedBlock> blocks;
  LayerNorm final_ln;
  Linear head;

  SlipNet() = default;
  SlipNet(const SlipNetConfig& c, std::uint64_t seed) : cfg(c) {
    cfg.validate();
    Rng rng(seed);
    embed = PatchEmbedding(cfg.channels, cfg.image_size, cfg.patch, cfg.frames, cfg.hidden, rng);
    blocks.reserve(cfg.blocks);
    for (std::size_t i = 0; i < cfg.blocks; ++i) {
      blocks.emplace_back(cfg.attention(), cfg.intermediate, cfg.activation, cfg.ln_eps, rng);
    }
    final_ln = LayerNorm(cfg.hidden, cfg.ln_eps);
    head = Linear(cfg.hidden, cfg.classes, rng);
  }

  Shape input_shape() const { return cfg.input_shape(); }

  Tensor logits(const Tensor& clip, SlipNetCache* cache = nullptr, Rng* dropout_rng = nullptr) const {
    if (clip.shape() != input_shape()) {
      throw GeometryError("slip model expects clip " + shape_str(input_shape()) + ", got " +
                          shape_str(clip.shape()));
    }
    TokenGrid grid = embed.forward(standardize(clip, cfg.input_mean, cfg.input_std), cache ? &cache->embed : nullptr);
    if (cache) cache->blocks.assign(blocks.size(), DividedBlockCache{});
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      grid = blocks[i].forward(grid, cache ? &cache->blocks[i] : nullptr, dropout_rng);
    }
    Tensor cls_row({1, cfg.hidden}, std::vector<float>(grid.tokens.ptr(), grid.tokens.ptr() + cfg.hidden));
    LayerNormStats stats;
    Tensor cls_norm = final_ln.forward(cls_row, &stats);
    Tensor out = head.forward(cls_norm).reshaped({cfg.classes});
    if (cache) {
      cache->cls_row = std::move(cls_row);
      cache->final_stats = std::move(stats);
      cache->cls_norm = std::move(cls_norm);
    }
    return out;
  }

  void backward(const Tensor& dlogits, const SlipNetCache& cache) {
    const Tensor dnorm = head.backward(cache.cls_norm, dlogits.reshaped({1, cfg.classes}));
    const Tensor dcls = final_ln.backward(cache.cls_row, cache.final_stats, dnorm);
    const std::size_t n = cfg.patches();
    Tensor dtokens({n * cfg.frames + 1, cfg.hidden});
    std::copy(dcls.data().begin(), dcls.data().end(), dtokens.data().begin());
    for (std::size_t i = blocks.size(); i-- > 0;) {
      dtokens = blocks[i].backward(dtokens, n, cfg.frames, cache.blocks[i]);
    }
    embed.backward(dtokens, cache.embed);
  }

  template <class Fn>
  void visit(Fn&& fn) {
    embed.visit("embed", fn);
    for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].visit("block" + std::to_string(i), fn);
    final_ln.visit("final_ln", fn);
    head.visit("head", fn);
  }
  template <class Fn>
  void visit(Fn&& fn) const {
    embed.visit("embed", fn);
    for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].visit("block" + std::to_string(i), fn);
    final_ln.visit("final_ln", fn);
    head.visit("head", fn);
  }
};

// Class probabilities {stable, slip} for one clip.
inline Tensor slip_forward(const Tensor& clip, const SlipNet& net) { return softmax(net.logits(clip), 0); }

template <class Model>
std::size_t count_parameters(const Model& model) {
  std::size_t n = 0;
  model.visit([&](const std::string&, const Param& p) { n += p.value.size(); });
  return n;
}

// ---------------------------------------------------------------------------
// Debounced decision layer.

enum class SlipDecision { stable, slip };

// Raises slip once P(slip) >= threshold for `debounce` consecutive
// evaluations and clears it after the same number of consecutive evaluations
// below threshold. A probability exactly at the threshold counts as slip.
class SlipDebouncer {
 public:
  SlipDebouncer(double threshold = 0.5, std::size_t debounce = 2) : threshold_(threshold), debounce_(debounce) {
    if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("slip threshold must lie in (0, 1)");
    if (debounce == 0) throw ConfigError("debounce must be >= 1");
  }

  SlipDecision update(double p_slip) {
    const bool above = p_slip >= threshold_;
    if (above) {
      ++above_run_;
      below_run_ = 0;
    } else {
      ++below_run_;
      above_run_ = 0;
    }
    if (state_ == SlipDecision::stable && above_run_ >= debounce_) state_ = SlipDecision::slip;
    if (state_ == SlipDecision::slip && below_run_ >= debounce_) state_ = SlipDecision::stable;
    return state_;
  }

  SlipDecision state() const { return state_; }

 private:
  double threshold_;
  std::size_t debounce_;
  std::size_t above_run_ = 0;
  std::size_t below_run_ = 0;
  SlipDecision state_ = SlipDecision::stable;
};

// Applies a fresh debouncer to a probability history; returns the decision
// after each evaluation.
inline std::vector<SlipDecision> classify(const std::vector<double>& history, double threshold,
                                          std::size_t debounce) {
  SlipDebouncer d(threshold, debounce);
  std::vector<SlipDecision> out;
  out.reserve(history.size());
  for (double p : history) out.push_back(d.update(p));
  return out;
}

}  // namespace vtgrasp
