#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "vtgrasp/error.hpp"
#include "vtgrasp/ops.hpp"
#include "vtgrasp/rng.hpp"
#include "vtgrasp/tensor.hpp"

namespace vtgrasp {

// A function of one tensor together with its vector-Jacobian product.
// `degenerate`, when set, reports inputs at which the op is not smoothly
// differentiable (the check is then skipped and flagged).
struct DifferentiableOp {
  std::string name;
  std::function<Tensor(const Tensor&)> forward;
  std::function<Tensor(const Tensor& x, const Tensor& dy)> vjp;
  std::function<bool(const Tensor&)> degenerate;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  // ||analytic - numeric|| / max(||analytic||, ||numeric||) over the probed
  // coordinates; insensitive to individual near-zero components.
  double norm_rel_error = 0.0;
  bool degenerate = false;
  std::size_t worst_index = 0;
  std::size_t probes = 0;
};

struct GradCheckOptions {
  float step = 1e-3f;
  // 0 probes every input coordinate; otherwise a seeded random subset.
  std::size_t max_probes = 0;
  // Relative errors are taken against max(|analytic|, |numeric|, floor) where
  // floor = floor_fraction * max|analytic|, so coordinates whose gradient is
  // numerically zero are judged on the scale of the whole gradient.
  double floor_fraction = 1e-2;
  // Five-point stencil (error O(h^4)) instead of the two-point O(h^2) one;
  // lets deep compositions use a step large enough to swamp float rounding.
  bool fourth_order = false;
};

namespace detail {

inline double projected(const Tensor& y, const Tensor& r) {
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += static_cast<double>(y[i]) * r[i];
  return s;
}

inline void require_finite(const Tensor& t, const std::string& what) {
  for (float v : t.data()) {
    if (!std::isfinite(v)) throw NumericError(what + " produced a non-finite value");
  }
}

}  // namespace detail

// Compares the reverse-mode gradient of <r, op(x)> for a seeded random
// projection r against central finite differences.
inline GradCheckResult check_gradient(const DifferentiableOp& op, const Tensor& input,
                                      std::uint64_t seed, const GradCheckOptions& opts = {}) {
  GradCheckResult result;
  detail::require_finite(input, op.name + " input");
  if (op.degenerate && op.degenerate(input)) {
    result.degenerate = true;
    result.max_rel_error = std::nan("");
    return result;
  }

  Rng rng(seed);
  const Tensor y = op.forward(input);
  detail::require_finite(y, op.name + " forward");
  const Tensor r = Tensor::normal(y.shape(), rng, 1.0f);
  const Tensor analytic = op.vjp(input, r);
  input.require_same_shape(analytic, "check_gradient vjp");
  detail::require_finite(analytic, op.name + " vjp");

  std::vector<std::size_t> coords(input.size());
  for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
  if (opts.max_probes && opts.max_probes < coords.size()) {
    rng.shuffle(coords);
    coords.resize(opts.max_probes);
    std::sort(coords.begin(), coords.end());
  }

  double gmax = 0.0;
  for (float g : analytic.data()) gmax = std::max(gmax, static_cast<double>(std::abs(g)));
  const double floor = std::max(opts.floor_fraction * gmax, 1e-8);

  Tensor x = input;
  double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
  for (std::size_t idx : coords) {
    const float orig = x[idx];
    auto probe = [&](float offset) {
      x[idx] = orig + offset;
      const Tensor y = op.forward(x);
      detail::require_finite(y, op.name + " forward");
      return detail::projected(y, r);
    };
    // Divide by the steps actually realised in float arithmetic.
    const double h = static_cast<double>(orig + opts.step) - static_cast<double>(orig - opts.step);
    double numeric = (probe(opts.step) - probe(-opts.step)) / h;
    if (opts.fourth_order) {
      const double h2 =
          static_cast<double>(orig + 2.0f * opts.step) - static_cast<double>(orig - 2.0f * opts.step);
      const double wide = (probe(2.0f * opts.step) - probe(-2.0f * opts.step)) / h2;
      numeric = (4.0 * numeric - wide) / 3.0;
    }
    x[idx] = orig;
    const double a = analytic[idx];
    const double denom = std::max({std::abs(a), std::abs(numeric), floor});
    const double rel = std::abs(a - numeric) / denom;
    diff2 += (a - numeric) * (a - numeric);
    a2 += a * a;
    n2 += numeric * numeric;
    if (rel > result.max_rel_error) {
      result.max_rel_error = rel;
      result.worst_index = idx;
    }
    ++result.probes;
  }
  const double scale = std::sqrt(std::max({a2, n2, 1e-30}));
  result.norm_rel_error = std::sqrt(diff2) / scale;
  return result;
}

}  // namespace vtgrasp
