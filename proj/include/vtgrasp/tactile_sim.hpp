#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "vtgrasp/error.hpp"
#include "vtgrasp/rng.hpp"
#include "vtgrasp/tensor.hpp"

namespace vtgrasp {

// Geometry is expressed in a 64 x 64 reference frame; rendering scales it to
// the requested resolution. Every profile below is polynomial so generated
// data depends only on IEEE arithmetic, not on libm.
inline constexpr double kReferenceSize = 64.0;
inline constexpr std::size_t kMarkerRows = 7;
inline constexpr std::size_t kMarkerCols = 9;
inline constexpr double kMaxDisplacement = 6.0;  // px
inline constexpr double kShearStiffness = 2.0;   // N per px
inline constexpr double kSlipGain = 40.0;        // px/s per N
inline constexpr double kFrameRate = 30.0;       // Hz
inline constexpr double kGravity = 9.81;
// Elastic relaxation applied per slipping step.
inline constexpr double kSlipRelaxation = 0.5;
// Stick shear falls to zero this many contact radii from the contact centre.
inline constexpr double kShearSupport = 2.5;
inline constexpr double kMarkerRadius = 2.0;     // reference px
inline constexpr double kMarkerDarkness = 0.75;
inline constexpr double kGelNoiseAmplitude = 0.01;
inline constexpr double kMaxTextureAmplitude = 0.3;
inline constexpr std::array<double, 3> kGelColor{0.55, 0.58, 0.62};
inline constexpr std::array<double, 3> kBlobTint{0.9, 0.75, 0.6};

struct Vec2 {
  double x = 0.0, y = 0.0;
  Vec2 operator+(Vec2 o) const { return {x + o.x, y + o.y}; }
  Vec2 operator-(Vec2 o) const { return {x - o.x, y - o.y}; }
  Vec2 operator*(double s) const { return {x * s, y * s}; }
  double norm() const { return std::sqrt(x * x + y * y); }
};

// (1 - r^2)^2 on r < 1, zero outside.
inline double bump(double r2) {
  if (r2 >= 1.0) return 0.0;
  const double a = 1.0 - r2;
  return a * a;
}

// Peak intensity added by the contact blob at normal force f.
inline double blob_peak(double f) { return f > 0.0 ? 0.35 * f / (f + 2.0) : 0.0; }

struct ObjectProps {
  std::string name = "object";
  double mass = 0.2;              // kg
  double friction = 0.5;          // mu
  double contact_radius = 12.0;   // reference px
  double texture_amplitude = 0.15;
};

// Parameter ranges loosely modelled on the nine household objects of the
// original data collection.
struct ObjectPreset {
  std::string_view name;
  double mass_lo, mass_hi;
  double mu_lo, mu_hi;
  double radius_lo, radius_hi;
  double texture_lo, texture_hi;
};

inline constexpr std::array<ObjectPreset, 9> kObjectPresets{{
    {"apple", 0.15, 0.25, 0.5, 0.8, 10, 14, 0.10, 0.20},
    {"cup", 0.10, 0.30, 0.4, 0.6, 8, 12, 0.10, 0.15},
    {"capsicum", 0.12, 0.22, 0.5, 0.7, 10, 14, 0.15, 0.25},
    {"orange", 0.15, 0.25, 0.6, 0.9, 10, 14, 0.20, 0.30},
    {"tomato", 0.08, 0.15, 0.5, 0.7, 8, 12, 0.10, 0.20},
    {"bottle", 0.20, 0.50, 0.3, 0.5, 8, 12, 0.10, 0.15},
    {"gelatin box", 0.08, 0.12, 0.5, 0.8, 12, 16, 0.15, 0.30},
    {"bread", 0.20, 0.40, 0.7, 1.0, 12, 16, 0.20, 0.30},
    {"jam jar", 0.30, 0.50, 0.4, 0.6, 10, 14, 0.10, 0.20},
}};

inline ObjectProps sample_object(Rng& rng) {
  const ObjectPreset& p = kObjectPresets[rng.below(kObjectPresets.size())];
  ObjectProps o;
  o.name = std::string(p.name);
  o.mass = rng.uniform(p.mass_lo, p.mass_hi);
  o.friction = rng.uniform(p.mu_lo, p.mu_hi);
  o.contact_radius = rng.uniform(p.radius_lo, p.radius_hi);
  o.texture_amplitude = rng.uniform(p.texture_lo, p.texture_hi);
  return o;
}

struct SimScene {
  ObjectProps object;
  double grip_force = 0.0;       // F_n, N
  double tangential_load = 0.0;  // F_t, N
  double gravity = kGravity;
  double shear_stiffness = kShearStiffness;
  double slip_gain = kSlipGain;
  double max_displacement = kMaxDisplacement;
  double frame_rate = kFrameRate;
  Vec2 load_direction{0.0, 1.0};  // unit vector, image coordinates (y down)
  Vec2 contact_center{32.0, 32.0};
  double illumination = 1.0;
  std::uint64_t seed = 0;

  double friction_limit() const { return object.friction * grip_force; }
  bool sticks() const { return std::abs(tangential_load) <= friction_limit(); }

  void validate() const {
    for (double v : {object.mass, object.friction, grip_force, tangential_load, shear_stiffness, slip_gain,
                     max_displacement, frame_rate, load_direction.x, load_direction.y, illumination}) {
      if (!std::isfinite(v)) throw NumericError("scene contains a non-finite value");
    }
    if (!(object.friction > 0.0 && object.friction <= 2.0)) throw ConfigError("friction must lie in (0, 2]");
    if (!(object.mass > 0.0)) throw ConfigError("object mass must be positive");
    if (grip_force < 0.0) throw ConfigError("grip force must be non-negative");
    if (!(shear_stiffness > 0.0 && slip_gain >= 0.0 && max_displacement > 0.0 && frame_rate > 0.0)) {
      throw ConfigError("invalid sensor constants");
    }
    if (std::abs(load_direction.norm() - 1.0) > 1e-9) throw ConfigError("load direction must be a unit vector");
  }
};

// Marker positions = rest + slip_offset + displacement.
struct MarkerField {
  std::size_t rows = kMarkerRows;
  std::size_t cols = kMarkerCols;
  std::vector<Vec2> rest;
  std::vector<Vec2> displacement;
  Vec2 slip_offset;             // rigid translation of the field under slip
  double accumulated_slip = 0;  // object travel relative to the sensor, px

  static MarkerField grid(std::size_t rows = kMarkerRows, std::size_t cols = kMarkerCols) {
    MarkerField f;
    f.rows = rows;
    f.cols = cols;
    const double dx = kReferenceSize / static_cast<double>(cols + 1);
    const double dy = kReferenceSize / static_cast<double>(rows + 1);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c)
        f.rest.push_back({dx * static_cast<double>(c + 1), dy * static_cast<double>(r + 1)});
    f.displacement.assign(f.rest.size(), Vec2{});
    return f;
  }

  std::size_t size() const { return rest.size(); }
  Vec2 position(std::size_t i) const { return rest[i] + slip_offset + displacement[i]; }
};

// Share of the elastic shear carried by a marker at `rest`.
inline double shear_weight(const SimScene& s, Vec2 rest) {
  const Vec2 d = rest - s.contact_center;
  const double support = kShearSupport * s.object.contact_radius;
  return bump((d.x * d.x + d.y * d.y) / (support * support));
}

struct ContactStep {
  MarkerField field;
  bool slipping = false;
  double slip_distance = 0.0;
};

// Coulomb stick/slip. Sticking: each marker takes its share of the elastic
// shear |F_t|/k_s (capped at d_max), exactly that value at the contact centre.
// Slipping: the object travels k_v(|F_t| - mu F_n) dt; while in contact the
// marker field translates with it and the elastic shear relaxes part way
// toward its target. Without contact the markers relax and only the object
// moves.
inline ContactStep step_contact_dynamics(const SimScene& scene, const MarkerField& field, double dt) {
  if (!std::isfinite(dt) || !std::isfinite(scene.grip_force) || !std::isfinite(scene.tangential_load)) {
    throw NumericError("non-finite force or time step");
  }
  if (!(dt > 0.0)) throw ConfigError("time step must be positive");
  scene.validate();
  ContactStep out{field, false, 0.0};
  const double load = std::abs(scene.tangential_load);
  const double shear = std::min(load / scene.shear_stiffness, scene.max_displacement);
  const double sign = scene.tangential_load < 0.0 ? -1.0 : 1.0;
  const Vec2 dir = scene.load_direction * sign;
  const bool contact = scene.grip_force > 0.0;

  if (load <= scene.friction_limit()) {
    for (std::size_t i = 0; i < field.size(); ++i) {
      out.field.displacement[i] = dir * (shear * shear_weight(scene, field.rest[i]));
    }
    return out;
  }
  out.slipping = true;
  out.slip_distance = scene.slip_gain * (load - scene.friction_limit()) * dt;
  out.field.accumulated_slip += out.slip_distance;
  if (contact) out.field.slip_offset = field.slip_offset + dir * out.slip_distance;
  for (std::size_t i = 0; i < field.size(); ++i) {
    const Vec2 target = contact ? dir * (shear * shear_weight(scene, field.rest[i])) : Vec2{};
    const Vec2 d = field.displacement[i];
    out.field.displacement[i] = d + (target - d) * kSlipRelaxation;
  }
  for (const Vec2& d : out.field.displacement) {
    if (!std::isfinite(d.x) || !std::isfinite(d.y)) throw NumericError("marker displacement became non-finite");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Rendering

namespace detail {

inline double lattice(std::uint64_t seed, std::int64_t ix, std::int64_t iy) {
  const std::uint64_t h = splitmix64(seed ^ splitmix64(static_cast<std::uint64_t>(ix) * 0x9E3779B97F4A7C15ull +
                                                       static_cast<std::uint64_t>(iy)));
  return static_cast<double>(h >> 11) * 0x1.0p-52 - 1.0;  // [-1, 1)
}

// Smooth value noise in [-1, 1] with lattice spacing `cell`.
inline double value_noise(std::uint64_t seed, double u, double v, double cell) {
  const double fu = u / cell, fv = v / cell;
  const double x0 = std::floor(fu), y0 = std::floor(fv);
  const auto ix = static_cast<std::int64_t>(x0), iy = static_cast<std::int64_t>(y0);
  const double tx = fu - x0, ty = fv - y0;
  const double sx = tx * tx * (3.0 - 2.0 * tx), sy = ty * ty * (3.0 - 2.0 * ty);
  const double a = lattice(seed, ix, iy), b = lattice(seed, ix + 1, iy);
  const double c = lattice(seed, ix, iy + 1), d = lattice(seed, ix + 1, iy + 1);
  return (a + (b - a) * sx) * (1.0 - sy) + (c + (d - c) * sx) * sy;
}

}  // namespace detail

// Deterministic function of (scene, field, resolution): gel base colour with
// seeded noise, a radial contact blob scaled by F_n and textured by the
// object (both moving with the slipped field), dark marker dots, and a global
// illumination gain.
inline Tensor render_frame(const SimScene& scene, const MarkerField& field, std::size_t width, std::size_t height) {
  if (width == 0 || height == 0) throw GeometryError("frame size must be positive");
  const double su = kReferenceSize / static_cast<double>(width);
  const double sv = kReferenceSize / static_cast<double>(height);
  const std::size_t plane = width * height;
  std::vector<double> img(3 * plane);
  const std::uint64_t gel_seed = derive_seed(scene.seed, 0x6e1);
  const std::uint64_t tex_seed = derive_seed(scene.seed, 0x7e8);
  const double peak = blob_peak(scene.grip_force);
  const Vec2 center = scene.contact_center + field.slip_offset;
  const double radius = scene.object.contact_radius;

  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x) {
      const double u = (static_cast<double>(x) + 0.5) * su, v = (static_cast<double>(y) + 0.5) * sv;
      const double gel = kGelNoiseAmplitude * detail::value_noise(gel_seed, u, v, 8.0);
      double blob = 0.0;
      if (peak > 0.0) {
        const Vec2 d = Vec2{u, v} - center;
        const double prof = bump((d.x * d.x + d.y * d.y) / (radius * radius));
        if (prof > 0.0) {
          const double tex = detail::value_noise(tex_seed, u - field.slip_offset.x, v - field.slip_offset.y, 3.0);
          blob = prof * peak * (1.0 + scene.object.texture_amplitude * tex);
        }
      }
      for (std::size_t c = 0; c < 3; ++c) img[c * plane + y * width + x] = kGelColor[c] + gel + blob * kBlobTint[c];
    }

  // Each dot multiplies the pixels it covers by (1 - darkness * bump).
  const double r2 = kMarkerRadius * kMarkerRadius;
  for (std::size_t i = 0; i < field.size(); ++i) {
    const Vec2 m = field.position(i);
    const double x_lo = std::max(0.0, std::floor((m.x - kMarkerRadius) / su - 0.5));
    const double x_hi = std::min(static_cast<double>(width) - 1.0, std::ceil((m.x + kMarkerRadius) / su - 0.5));
    const double y_lo = std::max(0.0, std::floor((m.y - kMarkerRadius) / sv - 0.5));
    const double y_hi = std::min(static_cast<double>(height) - 1.0, std::ceil((m.y + kMarkerRadius) / sv - 0.5));
    if (x_lo > x_hi || y_lo > y_hi) continue;
    for (auto y = static_cast<std::size_t>(y_lo); y <= static_cast<std::size_t>(y_hi); ++y)
      for (auto x = static_cast<std::size_t>(x_lo); x <= static_cast<std::size_t>(x_hi); ++x) {
        const double du = (static_cast<double>(x) + 0.5) * su - m.x, dv = (static_cast<double>(y) + 0.5) * sv - m.y;
        const double k = 1.0 - kMarkerDarkness * bump((du * du + dv * dv) / r2);
        for (std::size_t c = 0; c < 3; ++c) img[c * plane + y * width + x] *= k;
      }
  }

  Tensor out({3, height, width});
  for (std::size_t i = 0; i < img.size(); ++i) {
    out[i] = static_cast<float>(std::clamp(img[i] * scene.illumination, 0.0, 1.0));
  }
  return out;
}

// The sensor image with nothing touching it: no blob, markers at rest.
inline Tensor render_background(const SimScene& scene, std::size_t width, std::size_t height) {
  SimScene idle = scene;
  idle.grip_force = 0.0;
  idle.tangential_load = 0.0;
  return render_frame(idle, MarkerField::grid(), width, height);
}

// ---------------------------------------------------------------------------
// Labelled samples

enum class DatasetKind { touch, slip };

inline std::string_view to_string(DatasetKind k) { return k == DatasetKind::touch ? "touch" : "slip"; }
inline DatasetKind dataset_kind_from_string(std::string_view s) {
  if (s == "touch") return DatasetKind::touch;
  if (s == "slip") return DatasetKind::slip;
  throw ConfigError("unknown dataset kind '" + std::string(s) + "'");
}

struct SimPreset {
  std::string name;
  std::size_t touch_image;
  std::size_t slip_image;
  std::size_t frames = 8;

  static SimPreset toy() { return {"toy", 64, 32, 8}; }
  static SimPreset paper() { return {"paper", 256, 224, 8}; }
  static SimPreset named(std::string_view n) {
    if (n == "toy") return toy();
    if (n == "paper") return paper();
    throw ConfigError("unknown preset '" + std::string(n) + "'");
  }
};

struct Sample {
  Tensor data;               // touch: [3 x H x W]; slip: [F x 3 x H x W]
  int label = 0;             // touch: 1 = touch; slip: 1 = slip
  std::size_t frames = 1;
  std::uint64_t seed = 0;
};

// Smallest normal force used for touch samples and the smallest per-channel
// intensity change its blob can produce at the contact centre.
inline constexpr double kMinTouchForce = 0.5;
inline const double kTouchMinDelta = blob_peak(kMinTouchForce) * kBlobTint[2] * (1.0 - kMaxTextureAmplitude);

namespace detail {

inline SimScene random_scene(Rng& rng, std::uint64_t seed) {
  SimScene s;
  s.object = sample_object(rng);
  // Rational parametrisation of the unit circle (half by t, the rest by the
  // sign flip) keeps the generator libm-free.
  const double t = rng.uniform(-1.0, 1.0);
  s.load_direction = {(1.0 - t * t) / (1.0 + t * t), 2.0 * t / (1.0 + t * t)};
  if (rng.uniform() < 0.5) s.load_direction = s.load_direction * -1.0;
  s.contact_center = {rng.uniform(24.0, 40.0), rng.uniform(24.0, 40.0)};
  s.illumination = rng.uniform(0.95, 1.05);
  s.seed = seed;
  return s;
}

}  // namespace detail

struct TouchDraw {
  SimScene scene;
  MarkerField field;
  bool touch = false;
};

// Even indices are touch samples (F_n in [0.5, 8] N under a sticking
// tangential load), odd indices are untouched gel.
inline TouchDraw draw_touch(std::size_t index, std::uint64_t seed) {
  Rng rng(derive_seed(seed, index));
  TouchDraw d{detail::random_scene(rng, derive_seed(seed, index)), MarkerField::grid(), index % 2 == 0};
  if (d.touch) {
    d.scene.grip_force = rng.uniform(kMinTouchForce, 8.0);
    d.scene.tangential_load = rng.uniform(0.0, 0.8) * d.scene.friction_limit();
    d.field = step_contact_dynamics(d.scene, d.field, 1.0 / d.scene.frame_rate).field;
  }
  return d;
}

inline Sample make_touch_sample(std::size_t index, std::uint64_t seed, std::size_t image) {
  const TouchDraw d = draw_touch(index, seed);
  return {render_frame(d.scene, d.field, image, image), d.touch ? 1 : 0, 1, d.scene.seed};
}

struct SlipClip {
  Sample sample;
  std::vector<bool> slipping;         // ground truth per frame
  std::vector<double> accumulated;    // accumulated slip after each frame
};

// Even indices are slip clips, odd indices stable ones. Stable clips ramp the
// tangential load within [0, 0.9] of the friction limit; slip clips hold it
// below the limit until frame k_c in [2, 5] and then exceed it by a growing
// margin, so slipping occurs in (at least) the final two frames.
inline SlipClip make_slip_clip(std::size_t index, std::uint64_t seed, std::size_t image, std::size_t frames = 8) {
  if (frames < 6) throw ConfigError("slip clips need at least 6 frames");
  const std::uint64_t s = derive_seed(seed, index);
  Rng rng(s);
  SimScene scene = detail::random_scene(rng, s);
  scene.grip_force = rng.uniform(3.0, 8.0);
  const double limit = scene.friction_limit();
  const bool slip = index % 2 == 0;
  std::vector<double> load(frames);
  if (slip) {
    const std::size_t onset = 2 + rng.below(4);
    const double slope = rng.uniform(0.3, 0.8);
    const double start = rng.uniform(0.3, 0.7);
    for (std::size_t k = 0; k < frames; ++k) {
      load[k] = k < onset ? limit * (start + (0.95 - start) * static_cast<double>(k) / static_cast<double>(onset))
                          : limit * (1.0 + slope * static_cast<double>(k - onset + 1));
    }
  } else {
    const double a = rng.uniform(0.0, 0.5);
    const double b = rng.uniform(a, 0.9);
    for (std::size_t k = 0; k < frames; ++k)
      load[k] = limit * (a + (b - a) * static_cast<double>(k) / static_cast<double>(frames - 1));
  }

  SlipClip clip;
  clip.sample = {Tensor({frames, 3, image, image}), 0, frames, s};
  MarkerField field = MarkerField::grid();
  const double dt = 1.0 / scene.frame_rate;
  for (std::size_t k = 0; k < frames; ++k) {
    scene.tangential_load = load[k];
    const ContactStep step = step_contact_dynamics(scene, field, dt);
    field = step.field;
    clip.slipping.push_back(step.slipping);
    clip.accumulated.push_back(field.accumulated_slip);
    const Tensor frame = render_frame(scene, field, image, image);
    std::copy(frame.data().begin(), frame.data().end(), clip.sample.data.ptr() + k * frame.size());
  }
  clip.sample.label = (clip.slipping[frames - 1] || clip.slipping[frames - 2]) ? 1 : 0;
  return clip;
}

inline std::vector<Sample> generate_touch_dataset(std::size_t count, std::uint64_t seed, const SimPreset& preset) {
  if (count < 2) throw ConfigError("dataset needs at least 2 samples");
  std::vector<Sample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(make_touch_sample(i, seed, preset.touch_image));
  return out;
}

inline std::vector<Sample> generate_slip_dataset(std::size_t count, std::uint64_t seed, const SimPreset& preset) {
  if (count < 2) throw ConfigError("dataset needs at least 2 samples");
  std::vector<Sample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(make_slip_clip(i, seed, preset.slip_image, preset.frames).sample);
  return out;
}

}  // namespace vtgrasp
