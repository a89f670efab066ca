#pragma once

// Built-in benchmark systems, test functions and centered observables.

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "fastslow/errors.hpp"
#include "fastslow/homogenize.hpp"
#include "fastslow/model.hpp"

namespace fastslow {

/// A benchmark system with initial data, a default schedule and, when
/// known in closed form, the averaged coefficients of its default regime.
struct Preset {
  CoupledSystem system;
  std::vector<double> x0;
  std::vector<double> y0;
  ScaleSchedule schedule{1, 1, 1};
  std::optional<AveragedSDE::Fields> exact_limit;
};

namespace detail {

inline FastField ou_drift_toward_y() {
  return [](ConstVec x, ConstVec y, OutVec out) { out[0] = -(x[0] - y[0]); };
}

inline FastField constant_fast(double v) {
  return [v](ConstVec, ConstVec, OutVec out) { out[0] = v; };
}

inline SlowField constant_slow(double v) {
  return [v](double, ConstVec, ConstVec, OutVec out) { out[0] = v; };
}

inline AveragedSDE::Fields linear_limit(double slope, double diffusion) {
  return [slope, diffusion](double, ConstVec y, OutVec f, OutVec g) {
    f[0] = slope * y[0];
    g[0] = diffusion;
  };
}

}  // namespace detail

inline std::vector<std::string> preset_names() {
  return {"ou_frozen", "ou_plain", "ou_classical", "ou_r4"};
}

/// Scalar Ornstein–Uhlenbeck families (d1 = d2 = 1):
///   ou_frozen     dX: b = −(x − y), σ = √2; slow part inert (G = 1)
///   ou_plain      b = −x, σ = √2, nothing depends on y
///   ou_classical  b = −(x − y), σ = √2, F = −x, G = 1, c = H = 0
///   ou_r4         as ou_classical with c = −y/2 and H = x − y
inline Preset make_preset(std::string_view name) {
  Preset p;
  CoupledSystem& s = p.system;
  s.name = std::string(name);
  s.d1 = 1;
  s.d2 = 1;
  s.b = detail::ou_drift_toward_y();
  s.sigma = detail::constant_fast(std::sqrt(2.0));
  s.c = zero_fast_field();
  s.F = zero_slow_field();
  s.H = zero_slow_field();
  s.G = detail::constant_slow(1.0);
  p.x0 = {1.0};
  p.y0 = {1.0};

  if (name == "ou_frozen") {
    p.schedule = ScaleSchedule(1, 0, 0);
    p.exact_limit = detail::linear_limit(0.0, 1.0);
  } else if (name == "ou_plain") {
    s.b = [](ConstVec x, ConstVec, OutVec out) { out[0] = -x[0]; };
    p.schedule = ScaleSchedule(1, 0, 0);
    p.exact_limit = detail::linear_limit(0.0, 1.0);
  } else if (name == "ou_classical") {
    s.F = [](double, ConstVec x, ConstVec, OutVec out) { out[0] = -x[0]; };
    p.schedule = ScaleSchedule(1, 0, 0);
    p.exact_limit = detail::linear_limit(-1.0, 1.0);
  } else if (name == "ou_r4") {
    s.c = [](ConstVec, ConstVec y, OutVec out) { out[0] = -0.5 * y[0]; };
    s.F = [](double, ConstVec x, ConstVec, OutVec out) { out[0] = -x[0]; };
    s.H = [](double, ConstVec x, ConstVec y, OutVec out) { out[0] = x[0] - y[0]; };
    p.schedule = ScaleSchedule(1, 1, 1);
    p.exact_limit = detail::linear_limit(-1.5, std::sqrt(3.0));
  } else {
    throw ConfigError("unknown preset '" + std::string(name) + "'");
  }
  return p;
}

using TestFunction = std::function<double(ConstVec y)>;

inline double smooth_clip(double v) { return 1e3 * std::tanh(v / 1e3); }

inline std::vector<std::string> test_function_names() {
  return {"tanh", "tanh_half", "gauss_bump", "poly1_clip", "poly2_clip"};
}

/// Bounded smooth test functions of the slow state.
inline TestFunction make_test_function(std::string_view name) {
  if (name == "tanh") return [](ConstVec y) { return std::tanh(y[0]); };
  if (name == "tanh_half") return [](ConstVec y) { return std::tanh(0.5 * y[0]); };
  if (name == "gauss_bump") {
    return [](ConstVec y) {
      double r2 = 0.0;
      for (double v : y) r2 += v * v;
      return std::exp(-0.5 * r2);
    };
  }
  if (name == "poly1_clip") return [](ConstVec y) { return smooth_clip(y[0]); };
  if (name == "poly2_clip") {
    return [](ConstVec y) {
      double r2 = 0.0;
      for (double v : y) r2 += v * v;
      return smooth_clip(r2);
    };
  }
  throw ConfigError("unknown test function '" + std::string(name) + "'");
}

inline std::vector<std::string> observable_names() {
  return {"zero", "x", "x_minus_y", "x2_minus_1", "x_plus_5"};
}

/// Scalar observables f(t, x, y) used as Poisson sources and fluctuation
/// integrands. Only x_plus_5 is never centered for the OU presets.
inline SlowField make_observable(std::string_view name) {
  if (name == "zero") return zero_slow_field();
  if (name == "x") return [](double, ConstVec x, ConstVec, OutVec o) { o[0] = x[0]; };
  if (name == "x_minus_y") {
    return [](double, ConstVec x, ConstVec y, OutVec o) { o[0] = x[0] - y[0]; };
  }
  if (name == "x2_minus_1") {
    return [](double, ConstVec x, ConstVec, OutVec o) { o[0] = x[0] * x[0] - 1.0; };
  }
  if (name == "x_plus_5") return [](double, ConstVec x, ConstVec, OutVec o) { o[0] = x[0] + 5.0; };
  throw ConfigError("unknown observable '" + std::string(name) + "'");
}

}  // namespace fastslow
