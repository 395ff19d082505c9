// vtgrasp command-line entry point. Metrics go to stdout as JSON lines; any
// failure prints one {"error": category, "message": ...} line on stderr.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "vtgrasp/vtgrasp.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace vtgrasp;

namespace {

// VTGRASP_LOG=quiet|info|debug controls stderr chatter only.
int log_level() {
  const char* v = std::getenv("VTGRASP_LOG");
  if (!v) return 1;
  const std::string s(v);
  if (s == "quiet" || s == "0") return 0;
  if (s == "debug" || s == "2") return 2;
  return 1;
}

void log(int level, const std::string& msg) {
  if (level <= log_level()) std::cerr << "[vtgrasp] " << msg << '\n';
}

void emit(const json& j) { std::cout << j.dump() << std::endl; }

struct Globals {
  std::uint64_t seed = 0;
  std::string preset = "toy";
  std::string config_path;
  json config = json::object();  // {"model": {...}, "train": {...}, "controller": {...}}
};

json section(const Globals& g, const char* key) {
  return g.config.contains(key) ? g.config.at(key) : json::object();
}

json model_config(const Globals& g, ModelKind kind, const std::string& variant) {
  json base;
  if (kind == ModelKind::touch) {
    base = g.preset == "paper" ? TouchNetConfig::paper() : TouchNetConfig::toy();
  } else {
    const SlipNetConfig geometry = g.preset == "paper" ? SlipNetConfig{} : SlipNetConfig::toy();
    if (variant.empty()) {
      base = g.preset == "paper" ? build_variant("proposed") : geometry;
    } else {
      base = with_geometry(build_variant(variant), geometry);
    }
  }
  base.merge_patch(section(g, "model"));
  return base;
}

SimPreset sim_preset(const Globals& g) { return SimPreset::named(g.preset); }

ModelKind kind_of(const std::vector<Sample>& data) {
  return data.front().data.rank() == 3 ? ModelKind::touch : ModelKind::slip;
}

int gen_data(const Globals& g, const std::string& kind, std::size_t count, const std::string& out) {
  const SimPreset preset = sim_preset(g);
  const DatasetKind k = dataset_kind_from_string(kind);
  log(1, "generating " + std::to_string(count) + " " + kind + " samples into " + out);
  const auto samples = k == DatasetKind::touch ? generate_touch_dataset(count, g.seed, preset)
                                               : generate_slip_dataset(count, g.seed, preset);
  write_dataset(out, samples);
  std::size_t positive = 0;
  for (const Sample& s : samples) positive += s.label == 1;
  emit({{"event", "gen-data"}, {"kind", kind}, {"count", samples.size()}, {"positive", positive},
        {"seed", g.seed}, {"preset", g.preset}, {"out", out}});
  return 0;
}

int train_cmd(const Globals& g, const std::string& data_dir, const std::string& out, const std::string& variant,
              TrainConfig tc) {
  const auto data = read_dataset(data_dir);
  const ModelKind kind = kind_of(data);
  const json overrides = section(g, "train");
  if (overrides.contains("lr")) tc.lr = overrides["lr"].get<double>();
  if (overrides.contains("epochs")) tc.epochs = overrides["epochs"].get<std::size_t>();
  if (overrides.contains("batch")) tc.batch = overrides["batch"].get<std::size_t>();
  if (overrides.contains("weight_decay")) tc.weight_decay = overrides["weight_decay"].get<double>();
  if (overrides.contains("val_fraction")) tc.val_fraction = overrides["val_fraction"].get<double>();
  tc.seed = g.seed;
  Classifier model = make_classifier(kind, model_config(g, kind, variant), derive_seed(g.seed, 0x1417));
  log(1, "training " + std::string(to_string(kind)) + " model on " + std::to_string(data.size()) + " samples");
  const TrainResult r = train(std::move(model), data, tc, [](const EpochMetrics& m) {
    json j = to_json(m);
    j["event"] = "epoch";
    emit(j);
  });
  save_checkpoint(out, r.best);
  emit({{"event", "train-done"}, {"kind", to_string(kind)}, {"best_epoch", r.best_epoch},
        {"best_val_accuracy", r.best_val_accuracy}, {"checkpoint", out}});
  return 0;
}

int eval_cmd(const std::string& ckpt, const std::string& data_dir) {
  const Classifier model = load_checkpoint(ckpt);
  const EvalResult r = evaluate(model, read_dataset(data_dir));
  json j = to_json(r);
  j["event"] = "eval";
  j["kind"] = to_string(model.kind());
  emit(j);
  return 0;
}

int episode_cmd(const Globals& g, const std::string& scenario, const std::string& trace_path, double mass,
                double mu, const std::string& touch_ckpt, const std::string& slip_ckpt) {
  Rng rng(g.seed);
  SimScene scene;
  scene.object = sample_object(rng);
  scene.seed = derive_seed(g.seed, 0xe915);
  if (mass > 0.0) scene.object.mass = mass;
  if (mu > 0.0) scene.object.friction = mu;
  const ControllerConfig cfg = ControllerConfig::from_json(section(g, "controller"));
  EpisodeScript script;
  script.scenario = scenario_from_string(scenario);
  Detectors detectors = Detectors::oracle();
  std::string detector_kind = "oracle";
  if (!touch_ckpt.empty() || !slip_ckpt.empty()) {
    if (touch_ckpt.empty() || slip_ckpt.empty()) throw ConfigError("learned detectors need both --touch and --slip");
    detectors = learned_detectors(std::make_shared<const Classifier>(load_checkpoint(touch_ckpt)),
                                  std::make_shared<const Classifier>(load_checkpoint(slip_ckpt)));
    detector_kind = "learned";
  }
  log(1, "episode " + scenario + " object " + scene.object.name + " m=" + std::to_string(scene.object.mass) +
             " mu=" + std::to_string(scene.object.friction));
  const EpisodeTrace tr = run_episode(scene, detectors, cfg, script);
  if (!trace_path.empty()) {
    std::ofstream out(trace_path, std::ios::binary);
    if (!out) throw IoError("cannot write " + trace_path);
    out << tr.to_jsonl();
    if (!out) throw IoError("failed writing " + trace_path);
  }
  json j = tr.summary();
  j["event"] = "episode";
  j["scenario"] = scenario;
  j["detectors"] = detector_kind;
  j["object"] = scene.object.name;
  j["mass"] = scene.object.mass;
  j["friction"] = scene.object.friction;
  emit(j);
  return 0;
}

int bench_cmd(const Globals& g, const std::string& kind, std::vector<std::string> variants, std::size_t repeats) {
  const auto time_forward = [&](const Classifier& m) {
    Rng rng(g.seed);
    const Tensor x = Tensor::uniform(m.input_shape(), rng, 0.0f, 1.0f);
    m.logits(x);  // warm-up
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t i = 0; i < repeats; ++i) m.logits(x);
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count() /
           static_cast<double>(repeats);
  };
  const ModelKind k = model_kind_from_string(kind);
  if (k == ModelKind::touch) {
    const Classifier m = make_classifier(k, model_config(g, k, ""), g.seed);
    std::size_t params = 0;
    m.with_net([&](const auto& n) { params = count_parameters(n); });
    emit({{"event", "bench"}, {"kind", "touch"}, {"params", params}, {"ms", time_forward(m)}});
    return 0;
  }
  if (variants.empty() || (variants.size() == 1 && variants[0] == "all")) {
    variants.clear();
    for (const auto& v : kSlipVariants) variants.emplace_back(v.name);
  }
  for (const std::string& v : variants) {
    const Classifier m = make_classifier(k, model_config(g, k, v == "toy" ? "" : v), g.seed);
    std::size_t params = 0;
    m.with_net([&](const auto& n) { params = count_parameters(n); });
    const json cfg = m.config_json();
    emit({{"event", "bench"}, {"kind", "slip"}, {"variant", v}, {"hidden", cfg["hidden"]}, {"heads", cfg["heads"]},
          {"blocks", cfg["blocks"]}, {"params", params}, {"ms", time_forward(m)}});
  }
  return 0;
}

int export_cmd(const std::string& data_dir, const std::string& out, const std::vector<std::size_t>& indices) {
  const auto data = read_dataset(data_dir);
  std::vector<std::size_t> which = indices;
  if (which.empty())
    for (std::size_t i = 0; i < data.size(); ++i) which.push_back(i);
  std::size_t files = 0;
  for (std::size_t i : which) {
    if (i >= data.size()) throw ConfigError("sample index " + std::to_string(i) + " out of range");
    char stem[32];
    std::snprintf(stem, sizeof stem, "sample_%06zu", i);
    files += export_frames(data[i].data, out, stem).size();
  }
  emit({{"event", "export-frames"}, {"samples", which.size()}, {"files", files}, {"out", out}});
  return 0;
}

void print_error(const std::string& category, const std::string& message) {
  std::cerr << json{{"error", category}, {"message", message}}.dump() << std::endl;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"vtgrasp: visuotactile touch/slip models, tactile simulator and grasp controller"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--seed", g.seed, "Seed for all randomness")->capture_default_str();
  app.add_option("--preset", g.preset, "Geometry preset")->check(CLI::IsMember({"toy", "paper"}))->capture_default_str();
  app.add_option("--config", g.config_path, "JSON overrides: {\"model\":{}, \"train\":{}, \"controller\":{}}");

  std::string kind, out, data_dir, ckpt, variant, scenario = "lift", trace, touch_ckpt, slip_ckpt;
  std::size_t count = 100, repeats = 3;
  double mass = 0.0, mu = 0.0;
  std::vector<std::string> variants;
  std::vector<std::size_t> indices;
  TrainConfig tc;

  auto* gen = app.add_subcommand("gen-data", "Generate a labelled synthetic dataset");
  gen->add_option("--kind", kind, "touch or slip")->required()->check(CLI::IsMember({"touch", "slip"}));
  gen->add_option("--count", count, "Number of samples")->capture_default_str();
  gen->add_option("--out", out, "Output directory")->required();

  auto* tr = app.add_subcommand("train", "Train a touch or slip model");
  tr->add_option("--data", data_dir, "Dataset directory")->required();
  tr->add_option("--out", out, "Checkpoint directory")->required();
  tr->add_option("--variant", variant, "Slip model variant (ablation name such as AB3-8, or 'proposed')");
  tr->add_option("--epochs", tc.epochs)->capture_default_str();
  tr->add_option("--batch", tc.batch)->capture_default_str();
  tr->add_option("--lr", tc.lr)->capture_default_str();
  tr->add_option("--val-fraction", tc.val_fraction)->capture_default_str();

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  ev->add_option("--checkpoint", ckpt)->required();
  ev->add_option("--data", data_dir)->required();

  auto* ep = app.add_subcommand("episode", "Run a closed-loop grasp episode");
  ep->add_option("--scenario", scenario)->check(CLI::IsMember({"lift", "fluid"}))->capture_default_str();
  ep->add_option("--trace", trace, "Trace output (JSON lines)");
  ep->add_option("--mass", mass, "Object mass in kg (default: drawn from the seed)");
  ep->add_option("--mu", mu, "Friction coefficient (default: drawn from the seed)");
  ep->add_option("--touch", touch_ckpt, "Touch checkpoint for learned detection");
  ep->add_option("--slip", slip_ckpt, "Slip checkpoint for learned detection");

  auto* be = app.add_subcommand("bench", "Forward-pass latency per model variant");
  be->add_option("--kind", kind)->check(CLI::IsMember({"touch", "slip"}))->default_val("slip");
  be->add_option("--variants", variants, "Slip variants ('all' or names, 'toy' for the toy model)");
  be->add_option("--repeats", repeats)->capture_default_str();

  auto* ex = app.add_subcommand("export-frames", "Write dataset frames as PGM images");
  ex->add_option("--data", data_dir)->required();
  ex->add_option("--out", out)->required();
  ex->add_option("--index", indices, "Sample indices (default: all)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (!g.config_path.empty()) {
      std::ifstream in(g.config_path);
      if (!in) throw IoError("cannot read config " + g.config_path);
      g.config = json::parse(in);
      if (!g.config.is_object()) throw ConfigError("config must be a JSON object");
    }
    if (gen->parsed()) return gen_data(g, kind, count, out);
    if (tr->parsed()) return train_cmd(g, data_dir, out, variant, tc);
    if (ev->parsed()) return eval_cmd(ckpt, data_dir);
    if (ep->parsed()) return episode_cmd(g, scenario, trace, mass, mu, touch_ckpt, slip_ckpt);
    if (be->parsed()) return bench_cmd(g, kind, variants, repeats);
    if (ex->parsed()) return export_cmd(data_dir, out, indices);
  } catch (const Error& e) {
    print_error(e.category(), e.what());
    return 1;
  } catch (const json::exception& e) {
    print_error("config", e.what());
    return 1;
  } catch (const std::exception& e) {
    print_error("internal", e.what());
    return 1;
  }
  return 2;
}
