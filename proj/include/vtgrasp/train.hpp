#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "vtgrasp/error.hpp"
#include "vtgrasp/grasp_ctl.hpp"
#include "vtgrasp/ops.hpp"
#include "vtgrasp/slip_net.hpp"
#include "vtgrasp/tactile_sim.hpp"
#include "vtgrasp/touch_net.hpp"

namespace vtgrasp {

enum class ModelKind { touch, slip };

inline std::string_view to_string(ModelKind k) { return k == ModelKind::touch ? "touch" : "slip"; }
inline ModelKind model_kind_from_string(std::string_view s) {
  if (s == "touch") return ModelKind::touch;
  if (s == "slip") return ModelKind::slip;
  throw ConfigError("unknown model kind '" + std::string(s) + "'");
}

template <class Model>
struct ModelCache;
template <>
struct ModelCache<TouchNet> {
  using type = TouchNetCache;
};
template <>
struct ModelCache<SlipNet> {
  using type = SlipNetCache;
};

// A touch or slip network behind one interface.
class Classifier {
 public:
  Classifier() = default;
  explicit Classifier(TouchNet net) : net_(std::move(net)) {}
  explicit Classifier(SlipNet net) : net_(std::move(net)) {}

  ModelKind kind() const { return std::holds_alternative<TouchNet>(net_) ? ModelKind::touch : ModelKind::slip; }
  Shape input_shape() const {
    return std::visit([](const auto& n) { return n.input_shape(); }, net_);
  }
  nlohmann::json config_json() const {
    return std::visit([](const auto& n) { return nlohmann::json(n.cfg); }, net_);
  }
  Tensor logits(const Tensor& x) const {
    return std::visit([&](const auto& n) { return n.logits(x); }, net_);
  }
  // P(class 1): touch or slip.
  double positive_probability(const Tensor& x) const { return softmax(logits(x), 0)[1]; }
  int predict(const Tensor& x) const {
    const Tensor l = logits(x);
    return l[1] > l[0] ? 1 : 0;
  }

  template <class Fn>
  decltype(auto) with_net(Fn&& fn) {
    return std::visit(fn, net_);
  }
  template <class Fn>
  decltype(auto) with_net(Fn&& fn) const {
    return std::visit(fn, net_);
  }

 private:
  std::variant<TouchNet, SlipNet> net_;
};

inline Classifier make_classifier(ModelKind kind, const nlohmann::json& config, std::uint64_t seed) {
  if (kind == ModelKind::touch) return Classifier(TouchNet(config.get<TouchNetConfig>(), seed));
  return Classifier(SlipNet(config.get<SlipNetConfig>(), seed));
}

// ---------------------------------------------------------------------------
// Checkpoints: <dir>/weights.vtsf (named-tensor table in visit order) and
// <dir>/config.json {"kind", "config"}.

inline void save_checkpoint(const std::filesystem::path& dir, const Classifier& model) {
  std::filesystem::create_directories(dir);
  NamedTensors table;
  model.with_net([&](const auto& n) { n.visit([&](const std::string& name, const Param& p) { table.emplace_back(name, p.value); }); });
  std::ofstream w(dir / "weights.vtsf", std::ios::binary);
  if (!w) throw IoError("cannot write " + (dir / "weights.vtsf").string());
  write_named_tensors(w, table);
  std::ofstream c(dir / "config.json");
  if (!c) throw IoError("cannot write " + (dir / "config.json").string());
  c << nlohmann::json{{"kind", to_string(model.kind())}, {"config", model.config_json()}}.dump(2) << '\n';
}

inline Classifier load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream c(dir / "config.json");
  if (!c) throw IoError("no config.json in " + dir.string());
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(c);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("bad checkpoint config: ") + e.what());
  }
  Classifier model = make_classifier(model_kind_from_string(meta.at("kind").get<std::string>()), meta.at("config"), 0);
  std::ifstream w(dir / "weights.vtsf", std::ios::binary);
  if (!w) throw IoError("no weights.vtsf in " + dir.string());
  const NamedTensors table = read_named_tensors(w);
  std::size_t i = 0;
  model.with_net([&](auto& n) {
    n.visit([&](const std::string& name, Param& p) {
      if (i >= table.size() || table[i].first != name) throw IoError("checkpoint is missing parameter " + name);
      if (table[i].second.shape() != p.value.shape()) {
        throw GeometryError("checkpoint parameter " + name + " has shape " + shape_str(table[i].second.shape()) +
                            ", model expects " + shape_str(p.value.shape()));
      }
      p.value = table[i++].second;
    });
  });
  if (i != table.size()) throw IoError("checkpoint has unexpected extra parameters");
  return model;
}

// ---------------------------------------------------------------------------
// Optimisation

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch = 16;
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double val_fraction = 0.2;
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs == 0 || batch == 0) throw ConfigError("epochs and batch size must be positive");
    if (!(lr > 0.0) || !(weight_decay >= 0.0)) throw ConfigError("invalid learning rate or weight decay");
    if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw ConfigError("validation fraction must lie in [0, 1)");
  }
};

// Decoupled weight decay: p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p).
class AdamW {
 public:
  explicit AdamW(const TrainConfig& cfg) : cfg_(cfg) {}

  template <class Model>
  void step(Model& model) {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    std::size_t slot = 0;
    model.visit([&](const std::string&, Param& p) {
      if (slot == m_.size()) {
        m_.emplace_back(p.value.size(), 0.0f);
        v_.emplace_back(p.value.size(), 0.0f);
      }
      std::vector<float>& m = m_[slot];
      std::vector<float>& v = v_[slot];
      ++slot;
      if (p.grad.empty()) return;
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        const double g = p.grad[i];
        m[i] = static_cast<float>(cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g);
        v[i] = static_cast<float>(cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g);
        const double update = (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.eps) + cfg_.weight_decay * p.value[i];
        p.value[i] = static_cast<float>(p.value[i] - cfg_.lr * update);
      }
    });
  }

  std::size_t steps() const { return t_; }

 private:
  TrainConfig cfg_;
  std::size_t t_ = 0;
  std::vector<std::vector<float>> m_, v_;
};

// Cross-entropy of softmax(logits) against `label`; writes dL/dlogits.
inline double cross_entropy(const Tensor& logits, int label, Tensor* dlogits = nullptr) {
  const Tensor p = softmax(logits, 0);
  const auto k = static_cast<std::size_t>(label);
  if (k >= p.size()) throw DimensionError("label " + std::to_string(label) + " out of range");
  if (dlogits) {
    *dlogits = p;
    (*dlogits)[k] -= 1.0f;
  }
  return -std::log(std::max(static_cast<double>(p[k]), 1e-30));
}

struct EvalResult {
  double accuracy = 0.0;
  double loss = 0.0;
  std::array<std::array<std::size_t, 2>, 2> confusion{};  // [true][predicted]
  std::size_t total = 0;
};

inline EvalResult score_predictions(const std::vector<int>& labels, const std::vector<int>& predictions) {
  if (labels.size() != predictions.size()) throw DimensionError("label and prediction counts differ");
  EvalResult r;
  r.total = labels.size();
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    ++r.confusion.at(static_cast<std::size_t>(labels[i])).at(static_cast<std::size_t>(predictions[i]));
    correct += labels[i] == predictions[i];
  }
  r.accuracy = r.total ? static_cast<double>(correct) / static_cast<double>(r.total) : 0.0;
  return r;
}

inline void check_geometry(const Classifier& model, const std::vector<Sample>& data) {
  for (const Sample& s : data) {
    if (s.data.shape() != model.input_shape()) {
      throw GeometryError(std::string(to_string(model.kind())) + " model expects " + shape_str(model.input_shape()) +
                          ", dataset has " + shape_str(s.data.shape()));
    }
  }
}

inline EvalResult evaluate(const Classifier& model, const std::vector<Sample>& data) {
  check_geometry(model, data);
  std::vector<int> labels, preds;
  double loss = 0.0;
  for (const Sample& s : data) {
    const Tensor l = model.logits(s.data);
    loss += cross_entropy(l, s.label);
    labels.push_back(s.label);
    preds.push_back(l[1] > l[0] ? 1 : 0);
  }
  EvalResult r = score_predictions(labels, preds);
  r.loss = data.empty() ? 0.0 : loss / static_cast<double>(data.size());
  return r;
}

inline nlohmann::json to_json(const EvalResult& r) {
  return {{"accuracy", r.accuracy},
          {"loss", r.loss},
          {"total", r.total},
          {"confusion", {{r.confusion[0][0], r.confusion[0][1]}, {r.confusion[1][0], r.confusion[1][1]}}}};
}

struct EpochMetrics {
  std::size_t epoch = 0;  // 0 = before training
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  double val_loss = 0.0;
  double val_accuracy = 0.0;
  double seconds = 0.0;
};

inline nlohmann::json to_json(const EpochMetrics& m) {
  return {{"epoch", m.epoch},
          {"train_loss", m.train_loss},
          {"train_accuracy", m.train_accuracy},
          {"val_loss", m.val_loss},
          {"val_accuracy", m.val_accuracy},
          {"seconds", m.seconds}};
}

struct TrainResult {
  Classifier best;  // parameters at the best validation accuracy
  std::vector<EpochMetrics> history;
  std::size_t best_epoch = 0;
  double best_val_accuracy = 0.0;
};

// Seeded split of `data` into (train, validation).
inline std::pair<std::vector<Sample>, std::vector<Sample>> split_validation(const std::vector<Sample>& data,
                                                                           double fraction, std::uint64_t seed) {
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(derive_seed(seed, 0x5b1));
  rng.shuffle(order);
  const auto n_val = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(data.size())));
  std::pair<std::vector<Sample>, std::vector<Sample>> out;
  for (std::size_t i = 0; i < order.size(); ++i) (i < n_val ? out.second : out.first).push_back(data[order[i]]);
  return out;
}

// Mini-batch AdamW on mean cross-entropy. Batch order comes from a shuffle
// seeded by (seed, epoch); the model with the best validation accuracy (first
// reached) is returned. `on_epoch` sees epoch 0 (initial model) too.
inline TrainResult train(Classifier model, const std::vector<Sample>& data, const TrainConfig& cfg,
                         const std::function<void(const EpochMetrics&)>& on_epoch = {}) {
  cfg.validate();
  if (data.size() < 2) throw ConfigError("training needs at least 2 samples");
  check_geometry(model, data);
  auto [train_set, val_set] = split_validation(data, cfg.val_fraction, cfg.seed);
  const std::vector<Sample>& val = val_set.empty() ? train_set : val_set;

  TrainResult result;
  AdamW opt(cfg);
  const auto clock = [] { return std::chrono::steady_clock::now(); };

  auto report = [&](EpochMetrics m) {
    const EvalResult v = evaluate(model, val);
    m.val_loss = v.loss;
    m.val_accuracy = v.accuracy;
    result.history.push_back(m);
    if (on_epoch) on_epoch(m);
    if (result.history.size() == 1 || v.accuracy > result.best_val_accuracy) {
      result.best = model;
      result.best_epoch = m.epoch;
      result.best_val_accuracy = v.accuracy;
    }
  };
  {
    const auto t0 = clock();
    const EvalResult tr = evaluate(model, train_set);
    report({0, tr.loss, tr.accuracy, 0, 0, std::chrono::duration<double>(clock() - t0).count()});
  }

  std::vector<std::size_t> order(train_set.size());
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = clock();
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(derive_seed(cfg.seed, epoch));
    rng.shuffle(order);
    double loss = 0.0;
    std::size_t correct = 0;
    model.with_net([&](auto& net) {
      using Net = std::decay_t<decltype(net)>;
      for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
        const std::size_t end = std::min(order.size(), start + cfg.batch);
        net.visit([](const std::string&, Param& p) { p.zero_grad(); });
        const float scale = 1.0f / static_cast<float>(end - start);
        for (std::size_t b = start; b < end; ++b) {
          const Sample& s = train_set[order[b]];
          typename ModelCache<Net>::type cache;
          const Tensor l = net.logits(s.data, &cache);
          Tensor dl;
          loss += cross_entropy(l, s.label, &dl);
          correct += (l[1] > l[0] ? 1 : 0) == s.label;
          dl *= scale;
          net.backward(dl, cache);
        }
        opt.step(net);
      }
    });
    const double n = static_cast<double>(train_set.size());
    report({epoch, loss / n, static_cast<double>(correct) / n, 0, 0,
            std::chrono::duration<double>(clock() - t0).count()});
  }
  return result;
}

// ---------------------------------------------------------------------------
// Learned detectors for closed-loop episodes. The slip detector keeps the
// most recent frames and reports 0 until a full clip is available.

inline Detectors learned_detectors(std::shared_ptr<const Classifier> touch, std::shared_ptr<const Classifier> slip) {
  if (touch->kind() != ModelKind::touch || slip->kind() != ModelKind::slip) {
    throw ConfigError("detectors need a touch and a slip checkpoint");
  }
  const Shape ts = touch->input_shape();
  const Shape ss = slip->input_shape();
  auto frames = std::make_shared<std::deque<Tensor>>();
  Detectors d;
  d.touch = [touch, ts](const SensorView& v) { return touch->positive_probability(v.render(ts[2], ts[1])); };
  d.slip = [slip, ss, frames](const SensorView& v) {
    frames->push_back(v.render(ss[3], ss[2]));
    if (frames->size() > ss[0]) frames->pop_front();
    if (frames->size() < ss[0]) return 0.0;
    Tensor clip(ss);
    const std::size_t per = clip.size() / ss[0];
    for (std::size_t f = 0; f < ss[0]; ++f) std::copy((*frames)[f].ptr(), (*frames)[f].ptr() + per, clip.ptr() + f * per);
    return slip->positive_probability(clip);
  };
  return d;
}

}  // namespace vtgrasp
