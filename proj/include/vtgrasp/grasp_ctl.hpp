#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "vtgrasp/error.hpp"
#include "vtgrasp/tactile_sim.hpp"

namespace vtgrasp {

enum class GraspPhase { Idle, Approaching, Contact, Holding, Regulating, Releasing, Done, Failed };

inline std::string_view to_string(GraspPhase p) {
  switch (p) {
    case GraspPhase::Idle: return "Idle";
    case GraspPhase::Approaching: return "Approaching";
    case GraspPhase::Contact: return "Contact";
    case GraspPhase::Holding: return "Holding";
    case GraspPhase::Regulating: return "Regulating";
    case GraspPhase::Releasing: return "Releasing";
    case GraspPhase::Done: return "Done";
    case GraspPhase::Failed: return "Failed";
  }
  return "?";
}

// Staying put is always allowed; any live state may fail.
inline bool legal_transition(GraspPhase from, GraspPhase to) {
  using P = GraspPhase;
  if (from == to) return true;
  if (to == P::Failed) return from != P::Done;
  switch (from) {
    case P::Idle: return to == P::Approaching;
    case P::Approaching: return to == P::Contact;
    case P::Contact: return to == P::Holding;
    case P::Holding: return to == P::Regulating || to == P::Releasing;
    case P::Regulating: return to == P::Holding;
    case P::Releasing: return to == P::Done;
    default: return false;
  }
}

inline void check_transition(GraspPhase from, GraspPhase to) {
  if (!legal_transition(from, to)) {
    throw StateMachineError("illegal transition " + std::string(to_string(from)) + " -> " + std::string(to_string(to)));
  }
}

struct ControllerConfig {
  double initial_force = 1.0;  // N
  double force_step = 0.5;     // N per tick while slipping
  double rate = 30.0;          // Hz
  double max_force = 40.0;     // N
  double touch_threshold = 0.5;
  double slip_threshold = 0.5;
  int slip_debounce = 1;       // consecutive slip ticks before regulating
  int stable_debounce = 3;     // consecutive stable ticks before holding again
  double approach_speed = 10.0;  // mm/s
  double approach_gap = 5.0;     // mm between finger and object at trigger
  double timeout = 20.0;         // s
  double actuator_tau = 0.1;     // s

  void validate() const {
    for (double v : {initial_force, force_step, rate, max_force, touch_threshold, slip_threshold, approach_speed,
                     approach_gap, timeout, actuator_tau}) {
      if (!std::isfinite(v)) throw ConfigError("controller config contains a non-finite value");
    }
    if (!(force_step > 0.0)) throw ConfigError("force step must be positive");
    if (!(max_force > force_step)) throw ConfigError("max force must exceed the force step");
    if (!(timeout > 0.0)) throw ConfigError("timeout must be positive");
    if (!(rate > 0.0 && approach_speed > 0.0 && approach_gap >= 0.0 && actuator_tau >= 0.0)) {
      throw ConfigError("rate, approach speed, gap and actuator lag must be positive");
    }
    if (initial_force < 0.0 || initial_force > max_force) throw ConfigError("initial force must lie in [0, max force]");
    if (slip_debounce < 1 || stable_debounce < 1) throw ConfigError("debounce counts must be at least 1");
    for (double t : {touch_threshold, slip_threshold}) {
      if (t < 0.0 || t > 1.0) throw ConfigError("thresholds must lie in [0, 1]");
    }
  }

  nlohmann::json to_json() const {
    return {{"initial_force", initial_force}, {"force_step", force_step},   {"rate", rate},
            {"max_force", max_force},         {"touch_threshold", touch_threshold},
            {"slip_threshold", slip_threshold}, {"slip_debounce", slip_debounce},
            {"stable_debounce", stable_debounce}, {"approach_speed", approach_speed},
            {"approach_gap", approach_gap},   {"timeout", timeout},          {"actuator_tau", actuator_tau}};
  }

  // Keys absent from `j` keep their defaults.
  static ControllerConfig from_json(const nlohmann::json& j) {
    ControllerConfig c;
    auto get = [&](const char* k, auto& field) {
      if (j.contains(k)) field = j.at(k).get<std::remove_reference_t<decltype(field)>>();
    };
    get("initial_force", c.initial_force);
    get("force_step", c.force_step);
    get("rate", c.rate);
    get("max_force", c.max_force);
    get("touch_threshold", c.touch_threshold);
    get("slip_threshold", c.slip_threshold);
    get("slip_debounce", c.slip_debounce);
    get("stable_debounce", c.stable_debounce);
    get("approach_speed", c.approach_speed);
    get("approach_gap", c.approach_gap);
    get("timeout", c.timeout);
    get("actuator_tau", c.actuator_tau);
    c.validate();
    return c;
  }
};

struct GraspState {
  GraspPhase phase = GraspPhase::Idle;
  std::string reason;      // set when Failed
  double force = 0.0;      // last force command
  int slip_streak = 0;
  int stable_streak = 0;
};

struct ControllerInput {
  bool trigger = false;  // user asks for a grasp
  double touch = 0.0;    // touch probability
  double slip = 0.0;     // slip probability
  bool release = false;  // user asks for release
};

struct ControlOutput {
  GraspState state;
  double force_command = 0.0;
};

// One control tick. Force only increases between Contact and Releasing.
inline ControlOutput step_controller(const GraspState& state, const ControllerInput& in, const ControllerConfig& cfg) {
  for (double p : {in.touch, in.slip}) {
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("detector probabilities must lie in [0, 1]");
  }
  using P = GraspPhase;
  GraspState next = state;
  const bool slip = in.slip >= cfg.slip_threshold;
  next.slip_streak = slip ? state.slip_streak + 1 : 0;
  next.stable_streak = slip ? 0 : state.stable_streak + 1;
  auto go = [&](P to) {
    check_transition(state.phase, to);
    next.phase = to;
  };
  auto fail = [&](std::string reason) {
    go(P::Failed);
    next.reason = std::move(reason);
  };
  auto raise_force = [&] {
    if (state.force >= cfg.max_force) {
      fail("force limit");
      return;
    }
    next.force = std::min(state.force + cfg.force_step, cfg.max_force);
  };

  switch (state.phase) {
    case P::Idle:
      next.force = 0.0;
      if (in.trigger) go(P::Approaching);
      break;
    case P::Approaching:
      next.force = 0.0;
      if (in.touch >= cfg.touch_threshold) {
        go(P::Contact);
        next.force = cfg.initial_force;
      }
      break;
    case P::Contact:
      go(P::Holding);
      break;
    case P::Holding:
      if (in.release) {
        go(P::Releasing);
        next.force = 0.0;
      } else if (slip && next.slip_streak >= cfg.slip_debounce) {
        go(P::Regulating);
        raise_force();
      }
      break;
    case P::Regulating:
      if (slip) {
        raise_force();
      } else if (next.stable_streak >= cfg.stable_debounce) {
        go(P::Holding);
      }
      break;
    case P::Releasing:
      next.force = 0.0;
      go(P::Done);
      break;
    case P::Done:
      next.force = 0.0;
      break;
    case P::Failed:
      break;
  }
  return {next, next.force};
}

// ---------------------------------------------------------------------------
// Closed-loop episodes against the simulator

// What a detector may look at during a tick. Ground-truth flags exist for
// oracle detectors; learned detectors render the sensor image.
struct SensorView {
  const SimScene& scene;
  const MarkerField& field;
  bool contact;
  bool slipping;
  double time;
  Tensor render(std::size_t width, std::size_t height) const { return render_frame(scene, field, width, height); }
};

struct Detectors {
  std::function<double(const SensorView&)> touch;
  std::function<double(const SensorView&)> slip;

  static Detectors oracle() {
    return {[](const SensorView& v) { return v.contact ? 1.0 : 0.0; },
            [](const SensorView& v) { return v.slipping ? 1.0 : 0.0; }};
  }
};

enum class Scenario { lift, fluid };

inline Scenario scenario_from_string(std::string_view s) {
  if (s == "lift") return Scenario::lift;
  if (s == "fluid") return Scenario::fluid;
  throw ConfigError("unknown scenario '" + std::string(s) + "'");
}

// Times are seconds after the controller first reaches Holding.
struct EpisodeScript {
  Scenario scenario = Scenario::lift;
  double settle = 0.5;        // before lifting
  double lift_duration = 2.0; // F_t ramps 0 -> m g
  int fill_steps = 4;         // fluid: number of equal mass increments
  double fill_interval = 1.0; // fluid: seconds between increments
  double mass_factor = 2.0;   // fluid: final mass / initial mass
  double hold = 2.0;          // steady hold before lowering
  double lower_duration = 0.5;
  double drop_distance = 64.0;  // accumulated slip (px) that counts as dropped

  // Tangential load and current mass at script time s (s < 0: not started).
  std::pair<double, double> load(double s, double m0, double g) const {
    if (s < settle) return {0.0, m0};
    double m = m0;
    const double lifted = settle + lift_duration;
    if (s < lifted) return {m0 * g * (s - settle) / lift_duration, m0};
    double hold_from = lifted;
    if (scenario == Scenario::fluid) {
      const double steps = std::min(std::floor((s - lifted) / fill_interval) + 1.0, static_cast<double>(fill_steps));
      m = m0 * (1.0 + (mass_factor - 1.0) * steps / static_cast<double>(fill_steps));
      hold_from = lifted + static_cast<double>(fill_steps) * fill_interval;
    }
    const double lower_from = hold_from + hold;
    if (s < lower_from) return {m * g, m};
    const double frac = std::min((s - lower_from) / lower_duration, 1.0);
    return {m * g * (1.0 - frac), m};
  }

  double release_time() const {
    const double fill = scenario == Scenario::fluid ? static_cast<double>(fill_steps) * fill_interval : 0.0;
    return settle + lift_duration + fill + hold + lower_duration;
  }
};

struct TickRecord {
  double time = 0.0;
  GraspPhase phase = GraspPhase::Idle;
  double grip = 0.0;           // actual F_n
  double command = 0.0;        // commanded force
  double load = 0.0;           // F_t
  double touch = 0.0;
  double slip = 0.0;
  bool slipping = false;       // ground truth
  double accumulated_slip = 0.0;
};

struct EpisodeTrace {
  std::vector<TickRecord> ticks;
  bool success = false;
  GraspPhase final_phase = GraspPhase::Idle;
  std::string reason;
  double duration = 0.0;
  double peak_force = 0.0;
  double final_grip = 0.0;      // actual F_n when release was commanded
  double final_mass = 0.0;
  int regulating_phases = 0;

  nlohmann::json summary() const {
    return {{"summary", true},
            {"outcome", success ? "success" : "failure"},
            {"state", to_string(final_phase)},
            {"reason", reason},
            {"duration", duration},
            {"peak_force", peak_force},
            {"final_grip", final_grip},
            {"final_mass", final_mass},
            {"regulating_phases", regulating_phases}};
  }

  std::string to_jsonl() const {
    std::string out;
    for (const TickRecord& r : ticks) {
      const nlohmann::json j = {{"t", r.time},        {"state", to_string(r.phase)}, {"F_n", r.grip},
                                {"F_cmd", r.command}, {"F_t", r.load},               {"touch", r.touch},
                                {"slip", r.slip},     {"slipping", r.slipping},      {"slip_px", r.accumulated_slip}};
      out += j.dump();
      out += '\n';
    }
    out += summary().dump();
    out += '\n';
    return out;
  }
};

// Normal force the finger exerts on first touching the object.
inline constexpr double kContactPreload = kMinTouchForce;

// Ticks simulator and controller at cfg.rate. The trigger fires at t = 0; the
// finger closes the approach gap, then the script loads the object and finally
// commands release. Success iff the controller reaches Done without the object
// sliding out (accumulated slip beyond drop_distance).
inline EpisodeTrace run_episode(SimScene scene, const Detectors& detectors, const ControllerConfig& cfg,
                                const EpisodeScript& script = {}) {
  cfg.validate();
  scene.grip_force = 0.0;
  scene.tangential_load = 0.0;
  scene.validate();
  const double m0 = scene.object.mass;
  const double dt = 1.0 / cfg.rate;
  const double lag = cfg.actuator_tau > 0.0 ? 1.0 - std::exp(-dt / cfg.actuator_tau) : 1.0;

  EpisodeTrace trace;
  GraspState state;
  MarkerField field = MarkerField::grid();
  double gap = cfg.approach_gap;
  double grip = 0.0;
  std::optional<double> held_since;
  bool released = false;

  for (std::size_t k = 0;; ++k) {
    const double t = static_cast<double>(k) / cfg.rate;
    if (t > cfg.timeout) {
      check_transition(state.phase, GraspPhase::Failed);
      state.phase = GraspPhase::Failed;
      state.reason = "timeout";
      break;
    }
    if (state.phase == GraspPhase::Approaching) {
      gap = std::max(0.0, gap - cfg.approach_speed * dt);
      if (gap <= 0.0) grip = std::max(grip, kContactPreload);
    }

    // Plant: script load and contact mechanics for this tick.
    double load = 0.0;
    if (held_since) {
      const auto [f_t, m] = script.load(t - *held_since, m0, scene.gravity);
      load = f_t;
      scene.object.mass = m;
    }
    scene.grip_force = grip;
    scene.tangential_load = load;
    const ContactStep step = step_contact_dynamics(scene, field, dt);
    field = step.field;

    const SensorView view{scene, field, gap <= 0.0, step.slipping, t};
    ControllerInput in;
    in.trigger = k == 0;
    in.touch = detectors.touch(view);
    in.slip = held_since ? detectors.slip(view) : 0.0;
    in.release = held_since && !released && t - *held_since >= script.release_time();

    const GraspPhase before = state.phase;
    const ControlOutput out = step_controller(state, in, cfg);
    state = out.state;
    if (in.release && state.phase == GraspPhase::Releasing) {
      released = true;
      trace.final_grip = grip;
      trace.final_mass = scene.object.mass;
    }
    if (state.phase == GraspPhase::Holding && !held_since) held_since = t;
    if (state.phase == GraspPhase::Regulating && before != GraspPhase::Regulating) ++trace.regulating_phases;

    trace.ticks.push_back({t, state.phase, grip, out.force_command, load, in.touch, in.slip, view.slipping,
                           field.accumulated_slip});
    trace.peak_force = std::max(trace.peak_force, grip);

    if (field.accumulated_slip > script.drop_distance && state.phase != GraspPhase::Failed &&
        state.phase != GraspPhase::Done) {
      check_transition(state.phase, GraspPhase::Failed);
      state.phase = GraspPhase::Failed;
      state.reason = "dropped";
    }
    if (state.phase == GraspPhase::Done || state.phase == GraspPhase::Failed) {
      trace.duration = t;
      break;
    }
    // Actuator: first-order lag toward the command once touching.
    if (gap <= 0.0) grip += (out.force_command - grip) * lag;
  }
  if (trace.duration == 0.0 && !trace.ticks.empty()) trace.duration = trace.ticks.back().time;
  trace.final_phase = state.phase;
  trace.reason = state.reason;
  trace.success = state.phase == GraspPhase::Done;
  return trace;
}

}  // namespace vtgrasp
