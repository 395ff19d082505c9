#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "vtgrasp/dataset.hpp"
#include "vtgrasp/train.hpp"

using namespace vtgrasp;
namespace fs = std::filesystem;

namespace {

SlipNetConfig tiny_slip() {
  SlipNetConfig c = SlipNetConfig::toy();
  c.image_size = 16;
  c.hidden = 16;
  c.heads = 2;
  c.blocks = 1;
  c.intermediate = 32;
  return c;
}

TouchNetConfig tiny_touch() {
  TouchNetConfig c = TouchNetConfig::toy();
  c.image_size = 32;
  c.dims = {8, 12, 16};
  c.stage_channels = {8, 8, 8};
  c.stem_channels = 8;
  c.depth = 1;
  c.heads = 2;
  return c;
}

const SimPreset kTiny{"tiny", 32, 16, 8};

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("vtgrasp_train_" + name);
  fs::remove_all(p);
  return p;
}

// One scalar parameter, enough to exercise the optimizer.
struct Scalar {
  Param p{Tensor({1}, {1.0f})};
  template <class Fn>
  void visit(Fn&& fn) {
    fn("p", p);
  }
};

}  // namespace

TEST(CrossEntropy, ValueAndGradient) {
  Tensor d;
  EXPECT_NEAR(cross_entropy(Tensor({2}, {0.0f, 0.0f}), 1, &d), std::log(2.0), 1e-7);
  EXPECT_FLOAT_EQ(d[0], 0.5f);
  EXPECT_FLOAT_EQ(d[1], -0.5f);
  const Tensor l({2}, {1.0f, 3.0f});
  const double p1 = std::exp(3.0) / (std::exp(1.0) + std::exp(3.0));
  EXPECT_NEAR(cross_entropy(l, 1, &d), -std::log(p1), 1e-6);
  EXPECT_NEAR(d[0], 1.0 - p1, 1e-6);
  EXPECT_THROW(cross_entropy(l, 2), DimensionError);
}

TEST(AdamWTest, MatchesClosedFormSteps) {
  TrainConfig cfg;
  cfg.lr = 0.1;
  cfg.weight_decay = 0.01;
  AdamW opt(cfg);
  Scalar s;
  double p = 1.0, m = 0.0, v = 0.0;
  for (int t = 1; t <= 3; ++t) {
    const double g = 0.5 * t;
    s.p.grad = Tensor({1}, {static_cast<float>(g)});
    opt.step(s);
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mh = m / (1 - std::pow(0.9, t)), vh = v / (1 - std::pow(0.999, t));
    p -= 0.1 * (mh / (std::sqrt(vh) + 1e-8) + 0.01 * p);
    EXPECT_NEAR(s.p.value[0], p, 1e-6) << "step " << t;
  }
  EXPECT_EQ(opt.steps(), 3u);
}

TEST(TrainConfigTest, DefaultsAndValidation) {
  const TrainConfig c;
  EXPECT_EQ(c.epochs, 10u);
  EXPECT_EQ(c.batch, 16u);
  EXPECT_EQ(c.lr, 3e-4);
  EXPECT_EQ(c.beta1, 0.9);
  EXPECT_EQ(c.beta2, 0.999);
  EXPECT_EQ(c.weight_decay, 0.01);
  TrainConfig bad = c;
  bad.batch = 0;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = c;
  bad.val_fraction = 1.0;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Scoring, PerfectAndConstantPredictors) {
  const std::vector<int> labels{0, 1, 0, 1, 1, 0};
  const EvalResult perfect = score_predictions(labels, labels);
  EXPECT_EQ(perfect.accuracy, 1.0);
  EXPECT_EQ(perfect.confusion[0][1], 0u);
  EXPECT_EQ(perfect.confusion[1][0], 0u);
  EXPECT_EQ(perfect.confusion[0][0] + perfect.confusion[1][1], 6u);
  const EvalResult constant = score_predictions(labels, std::vector<int>(6, 1));
  EXPECT_EQ(constant.accuracy, 0.5);
  EXPECT_EQ(constant.confusion[0][1], 3u);
  EXPECT_EQ(constant.confusion[1][1], 3u);
}

TEST(Evaluate, GeometryMismatch) {
  const Classifier slip(SlipNet(tiny_slip(), 1));
  const auto touch_data = generate_touch_dataset(2, 1, kTiny);
  try {
    evaluate(slip, touch_data);
    FAIL();
  } catch (const GeometryError& e) {
    EXPECT_EQ(e.category(), "geometry-mismatch");
  }
  EXPECT_NO_THROW(evaluate(slip, generate_slip_dataset(2, 1, kTiny)));
}

TEST(Checkpoint, RoundTripBothKinds) {
  const auto clip = make_slip_clip(0, 4, 16).sample.data;
  const auto image = make_touch_sample(0, 4, 32).data;
  for (const Classifier& model : {Classifier(SlipNet(tiny_slip(), 5)), Classifier(TouchNet(tiny_touch(), 5))}) {
    const fs::path dir = scratch(std::string(to_string(model.kind())));
    save_checkpoint(dir, model);
    EXPECT_TRUE(fs::exists(dir / "weights.vtsf"));
    const Classifier back = load_checkpoint(dir);
    EXPECT_EQ(back.kind(), model.kind());
    EXPECT_EQ(back.config_json(), model.config_json());
    const Tensor& x = model.kind() == ModelKind::slip ? clip : image;
    EXPECT_TRUE(bit_equal(back.logits(x), model.logits(x)));
    fs::remove_all(dir);
  }
}

TEST(Checkpoint, MismatchedWeightsRejected) {
  const fs::path dir = scratch("mismatch");
  save_checkpoint(dir, Classifier(SlipNet(tiny_slip(), 5)));
  nlohmann::json meta;
  std::ifstream(dir / "config.json") >> meta;
  meta["config"]["hidden"] = 24;
  std::ofstream(dir / "config.json") << meta.dump();
  EXPECT_THROW(load_checkpoint(dir), GeometryError);
  EXPECT_THROW(load_checkpoint(scratch("absent")), IoError);
  fs::remove_all(dir);
}

TEST(Training, DeterministicAndLearns) {
  const auto data = generate_touch_dataset(32, 8, kTiny);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch = 8;
  cfg.lr = 1e-3;
  cfg.val_fraction = 0.0;  // validation metrics are then computed on the training set
  cfg.seed = 3;
  const Classifier init(TouchNet(tiny_touch(), 2));
  const TrainResult a = train(init, data, cfg);
  const TrainResult b = train(init, data, cfg);
  ASSERT_EQ(a.history.size(), 3u);
  for (std::size_t e = 0; e < a.history.size(); ++e) {
    EXPECT_EQ(a.history[e].train_loss, b.history[e].train_loss);
    EXPECT_EQ(a.history[e].val_loss, b.history[e].val_loss);
    EXPECT_EQ(a.history[e].val_accuracy, b.history[e].val_accuracy);
  }
  EXPECT_LT(a.history[1].val_loss, a.history[0].val_loss);
  EXPECT_EQ(a.best_epoch, b.best_epoch);
}

TEST(Training, BestCheckpointHasBestValidationAccuracy) {
  const auto data = generate_slip_dataset(20, 8, kTiny);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch = 4;
  cfg.lr = 1e-3;
  cfg.val_fraction = 0.3;
  const TrainResult r = train(Classifier(SlipNet(tiny_slip(), 2)), data, cfg);
  double best = 0.0;
  for (const auto& m : r.history) best = std::max(best, m.val_accuracy);
  EXPECT_EQ(r.best_val_accuracy, best);
  const auto [train_set, val_set] = split_validation(data, cfg.val_fraction, cfg.seed);
  EXPECT_EQ(val_set.size(), 6u);
  EXPECT_EQ(train_set.size(), 14u);
  EXPECT_EQ(evaluate(r.best, val_set).accuracy, best);
}

TEST(LearnedDetectors, DriveAnEpisode) {
  auto touch = std::make_shared<const Classifier>(TouchNet(tiny_touch(), 1));
  auto slip = std::make_shared<const Classifier>(SlipNet(tiny_slip(), 1));
  EXPECT_THROW(learned_detectors(slip, touch), ConfigError);
  const Detectors d = learned_detectors(touch, slip);
  SimScene scene;
  MarkerField field = MarkerField::grid();
  const SensorView view{scene, field, false, false, 0.0};
  for (int k = 0; k < 7; ++k) EXPECT_EQ(d.slip(view), 0.0);
  const double p = d.slip(view);
  EXPECT_GT(p, 0.0);
  EXPECT_LT(p, 1.0);
  const double t = d.touch(view);
  EXPECT_GE(t, 0.0);
  EXPECT_LE(t, 1.0);

  ControllerConfig cfg;
  cfg.timeout = 1.0;
  const EpisodeTrace tr = run_episode(scene, learned_detectors(touch, slip), cfg);
  EXPECT_FALSE(tr.ticks.empty());
  EXPECT_LE(tr.ticks.back().time, 1.0);
}
