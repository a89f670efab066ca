#pragma once

// Euler–Maruyama ensembles for the coupled system, the frozen fast equation
// and averaged limit equations.
//
// The coupled integrator uses a micro/macro split: X advances with
// h_fast ≤ α²/ν so the α⁻² drift is resolved, Y advances on the macro grid
// with F and G evaluated at the macro node and γ⁻¹H averaged over the
// micro substeps of the interval.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "fastslow/errors.hpp"
#include "fastslow/format.hpp"
#include "fastslow/model.hpp"
#include "fastslow/parallel.hpp"
#include "fastslow/random.hpp"

namespace fastslow {

/// Uniform grid of `steps` intervals of length `dt` covering [0, T].
struct MacroGrid {
  std::size_t steps = 0;
  double dt = 0.0;
  double T = 0.0;

  double time(std::size_t node) const {
    return node == steps ? T : static_cast<double>(node) * dt;
  }

  /// Index of the grid node nearest to t (t is clamped to [0, T]).
  std::size_t nearest_node(double t) const {
    if (steps == 0) return 0;
    const double clamped = std::clamp(t, 0.0, T);
    const auto node = static_cast<std::size_t>(std::llround(clamped / dt));
    return std::min(node, steps);
  }
};

/// Grid with the fewest equal steps not longer than `dt_max`.
inline MacroGrid make_macro_grid(double T, double dt_max) {
  require(T >= 0.0 && std::isfinite(T), "horizon T must be finite and >= 0");
  require(dt_max > 0.0, "time step must be > 0");
  MacroGrid g;
  g.T = T;
  if (T == 0.0) return g;
  g.steps = static_cast<std::size_t>(std::ceil(T / dt_max - 1e-9));
  g.steps = std::max<std::size_t>(g.steps, 1);
  g.dt = T / static_cast<double>(g.steps);
  return g;
}

struct PathConfig {
  double T = 1.0;
  double dt_slow = 1e-2;
  int micro_substeps = 10;  // ν: the fast step targets α²/ν
  std::uint64_t seed = 0;
  std::size_t n_paths = 1000;
  double blowup_cap = 1e6;
  std::vector<double> observe_times;  // snapped to macro nodes
  bool record_snapshots = false;
};

/// Fast step actually used: dt_slow split into the fewest equal substeps
/// not longer than α²/ν.
inline std::size_t micro_steps_per_macro(double dt_slow, double alpha,
                                         int micro_substeps) {
  const double target = alpha * alpha / static_cast<double>(micro_substeps);
  const double ratio = dt_slow / target;
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(ratio - 1e-9)));
}

enum class IntegrandGrid { kMicro, kMacro };

/// Scalar path functional accumulated as scale · ∫₀ᵗ f(s, X_s, Y_s) ds by
/// left Riemann sums on the micro or the macro grid.
struct PathIntegrand {
  std::function<double(double t, ConstVec x, ConstVec y)> f;
  IntegrandGrid grid = IntegrandGrid::kMicro;
  double scale = 1.0;
};

struct Snapshot {
  std::size_t path_id = 0;
  double t = 0.0;
  std::vector<double> y;
  std::vector<double> x;

  friend bool operator==(const Snapshot&, const Snapshot&) = default;
};

struct EnsembleResult {
  std::size_t d1 = 0;  // 0 when fast states are not part of the result
  std::size_t d2 = 0;  // 0 when slow states are not part of the result
  std::size_t n_paths = 0;
  std::vector<double> terminal_y;  // n_paths × d2
  std::vector<double> terminal_x;  // n_paths × d1
  std::vector<double> observe_times;
  std::vector<double> observed_y;  // [time][path][d2]
  /// integrals[k][time * n_paths + path], times as in observe_times.
  std::vector<std::vector<double>> integrals;
  std::vector<Snapshot> snapshots;
  std::vector<std::uint64_t> stream_ids;
  double max_abs_x = 0.0;

  ConstVec y(std::size_t path) const {
    return ConstVec(terminal_y).subspan(path * d2, d2);
  }
  ConstVec x(std::size_t path) const {
    return ConstVec(terminal_x).subspan(path * d1, d1);
  }
  ConstVec observed(std::size_t time_index, std::size_t path) const {
    return ConstVec(observed_y).subspan((time_index * n_paths + path) * d2, d2);
  }

  friend bool operator==(const EnsembleResult&, const EnsembleResult&) = default;
};

/// Ensemble mean of |X_T|^p over the terminal fast states.
inline double terminal_moment(const EnsembleResult& r, double p) {
  require(r.d1 > 0 && r.n_paths > 0, "result has no fast states");
  double s = 0.0;
  for (std::size_t i = 0; i < r.n_paths; ++i) s += std::pow(detail::norm(r.x(i)), p);
  return s / static_cast<double>(r.n_paths);
}

namespace detail {

inline void check_state(ConstVec v, double cap, const char* what) {
  for (double s : v) {
    if (!std::isfinite(s) || std::abs(s) > cap) {
      throw BlowUp(std::string(what) + " left the region |state| <= " +
                   format_double(cap) + " (violated recurrence or too coarse a step)");
    }
  }
}

inline std::vector<std::size_t> snap_times(const MacroGrid& grid,
                                           const std::vector<double>& times,
                                           std::vector<double>& snapped) {
  std::vector<std::size_t> nodes;
  snapped.clear();
  for (double t : times) {
    require(t >= 0.0 && t <= grid.T + 1e-12, "observe time outside [0, T]");
    nodes.push_back(grid.nearest_node(t));
    snapped.push_back(grid.time(nodes.back()));
  }
  return nodes;
}

/// Per-path bookkeeping of observation times shared by all integrators.
class Observer {
 public:
  Observer(EnsembleResult& out, const std::vector<std::size_t>& nodes,
           std::size_t path, std::size_t n_integrands)
      : out_(out), nodes_(nodes), path_(path), acc_(n_integrands, 0.0) {}

  std::vector<double>& accumulators() { return acc_; }

  void at_node(std::size_t node, ConstVec y) {
    for (std::size_t j = 0; j < nodes_.size(); ++j) {
      if (nodes_[j] != node) continue;
      if (out_.d2 > 0) {
        std::copy(y.begin(), y.end(),
                  out_.observed_y.begin() +
                      static_cast<std::ptrdiff_t>((j * out_.n_paths + path_) * out_.d2));
      }
      for (std::size_t k = 0; k < acc_.size(); ++k) {
        out_.integrals[k][j * out_.n_paths + path_] = acc_[k];
      }
    }
  }

 private:
  EnsembleResult& out_;
  const std::vector<std::size_t>& nodes_;
  std::size_t path_;
  std::vector<double> acc_;
};

inline void prepare_result(EnsembleResult& r, std::size_t d1, std::size_t d2,
                           std::size_t n_paths, std::size_t n_times,
                           std::size_t n_integrands) {
  r.d1 = d1;
  r.d2 = d2;
  r.n_paths = n_paths;
  r.terminal_x.assign(n_paths * d1, 0.0);
  r.terminal_y.assign(n_paths * d2, 0.0);
  r.observed_y.assign(n_times * n_paths * d2, 0.0);
  r.integrals.assign(n_integrands, std::vector<double>(n_times * n_paths, 0.0));
  r.stream_ids.resize(n_paths);
  for (std::size_t i = 0; i < n_paths; ++i) r.stream_ids[i] = i;
}

inline void collect_snapshots(EnsembleResult& r,
                              std::vector<std::vector<Snapshot>>& per_path) {
  for (auto& v : per_path) {
    for (auto& s : v) r.snapshots.push_back(std::move(s));
  }
}

}  // namespace detail

/// Simulates n_paths independent copies of the coupled system at scale ε.
/// Bit-identical for fixed (seed, eps) whatever the worker count.
inline EnsembleResult integrate_coupled(
    const CoupledSystem& sys, const ScaleSchedule& schedule, double eps,
    ConstVec x0, ConstVec y0, const PathConfig& cfg,
    const std::vector<PathIntegrand>& integrands = {}) {
  sys.validate();
  require(eps > 0.0 && eps < 1.0, "eps must lie in (0, 1)");
  require(cfg.dt_slow > 0.0, "dt_slow must be > 0");
  require(cfg.micro_substeps >= 1, "micro_substeps must be >= 1");
  require(x0.size() == sys.d1 && y0.size() == sys.d2, "initial state has wrong dimension");

  const std::size_t d1 = sys.d1, d2 = sys.d2;
  const double alpha = schedule.alpha(eps);
  const double inv_a2 = 1.0 / (alpha * alpha);
  const double inv_a = 1.0 / alpha;
  const double inv_b = 1.0 / schedule.beta(eps);
  const double inv_g = 1.0 / schedule.gamma(eps);

  const MacroGrid grid = make_macro_grid(cfg.T, cfg.dt_slow);
  const std::size_t micro =
      grid.steps == 0 ? 1 : micro_steps_per_macro(grid.dt, alpha, cfg.micro_substeps);
  const double h = grid.dt / static_cast<double>(micro);
  const double sqrt_h = std::sqrt(h);
  const double sqrt_dt = std::sqrt(grid.dt);

  EnsembleResult out;
  const auto nodes = detail::snap_times(grid, cfg.observe_times, out.observe_times);
  detail::prepare_result(out, d1, d2, cfg.n_paths, nodes.size(), integrands.size());
  std::vector<std::vector<Snapshot>> snaps(cfg.record_snapshots ? cfg.n_paths : 0);
  std::vector<double> max_x(cfg.n_paths, 0.0);

  parallel_for(cfg.n_paths, [&](std::size_t p) {
    RandomStream w1(cfg.seed, Lane::kFastNoise, p);
    RandomStream w2(cfg.seed, Lane::kSlowNoise, p);
    std::vector<double> x(x0.begin(), x0.end()), y(y0.begin(), y0.end());
    std::vector<double> b(d1), c(d1), sig(d1 * d1), xi(d1);
    std::vector<double> Fv(d2), Hv(d2), Hacc(d2), Gv(d2 * d2), dw(d2);
    detail::Observer obs(out, nodes, p, integrands.size());
    auto& acc = obs.accumulators();
    double xmax = detail::norm(x);

    auto snapshot = [&](double t) {
      if (cfg.record_snapshots) snaps[p].push_back({p, t, y, x});
    };

    obs.at_node(0, y);
    snapshot(0.0);
    for (std::size_t n = 0; n < grid.steps; ++n) {
      const double tn = grid.time(n);
      sys.F(tn, x, y, Fv);
      detail::check_finite(Fv, "F");
      sys.G(tn, x, y, Gv);
      detail::check_finite(Gv, "G");
      for (std::size_t k = 0; k < integrands.size(); ++k) {
        if (integrands[k].grid == IntegrandGrid::kMacro) {
          acc[k] += integrands[k].scale * integrands[k].f(tn, x, y) * grid.dt;
        }
      }

      std::fill(Hacc.begin(), Hacc.end(), 0.0);
      for (std::size_t m = 0; m < micro; ++m) {
        const double s = tn + static_cast<double>(m) * h;
        sys.H(s, x, y, Hv);
        detail::check_finite(Hv, "H");
        for (std::size_t i = 0; i < d2; ++i) Hacc[i] += Hv[i];
        for (std::size_t k = 0; k < integrands.size(); ++k) {
          if (integrands[k].grid == IntegrandGrid::kMicro) {
            acc[k] += integrands[k].scale * integrands[k].f(s, x, y) * h;
          }
        }
        sys.b(x, y, b);
        detail::check_finite(b, "b");
        sys.c(x, y, c);
        detail::check_finite(c, "c");
        sys.sigma(x, y, sig);
        detail::check_finite(sig, "sigma");
        w1.fill_normal(xi);
        for (std::size_t i = 0; i < d1; ++i) {
          double noise = 0.0;
          for (std::size_t j = 0; j < d1; ++j) noise += sig[i * d1 + j] * xi[j];
          x[i] += (b[i] * inv_a2 + c[i] * inv_b) * h + inv_a * noise * sqrt_h;
        }
      }

      w2.fill_normal(dw);
      for (std::size_t i = 0; i < d2; ++i) {
        double noise = 0.0;
        for (std::size_t j = 0; j < d2; ++j) noise += Gv[i * d2 + j] * dw[j];
        const double h_avg = Hacc[i] / static_cast<double>(micro);
        y[i] += (Fv[i] + h_avg * inv_g) * grid.dt + noise * sqrt_dt;
      }
      detail::check_state(x, cfg.blowup_cap, "fast state X");
      detail::check_state(y, cfg.blowup_cap, "slow state Y");
      xmax = std::max(xmax, detail::norm(x));
      obs.at_node(n + 1, y);
      snapshot(grid.time(n + 1));
    }
    std::copy(x.begin(), x.end(), out.terminal_x.begin() + static_cast<std::ptrdiff_t>(p * d1));
    std::copy(y.begin(), y.end(), out.terminal_y.begin() + static_cast<std::ptrdiff_t>(p * d2));
    max_x[p] = xmax;
  });

  out.max_abs_x = *std::max_element(max_x.begin(), max_x.end());
  detail::collect_snapshots(out, snaps);
  return out;
}

struct FrozenConfig {
  double T = 1.0;
  double dt = 1e-3;
  std::uint64_t seed = 0;
  std::size_t n_paths = 1000;
  double blowup_cap = 1e6;
};

/// dX = b(X, y) dt + σ(X, y) dW¹ with y held fixed. Returns fast states only.
inline EnsembleResult integrate_frozen(const CoupledSystem& sys, ConstVec y,
                                       ConstVec x0, const FrozenConfig& cfg) {
  sys.validate();
  require(y.size() == sys.d2 && x0.size() == sys.d1, "state has wrong dimension");
  const std::size_t d1 = sys.d1;
  const MacroGrid grid = make_macro_grid(cfg.T, cfg.dt);
  const double sqrt_dt = std::sqrt(grid.dt);

  EnsembleResult out;
  detail::prepare_result(out, d1, 0, cfg.n_paths, 0, 0);
  std::vector<double> max_x(cfg.n_paths, 0.0);

  parallel_for(cfg.n_paths, [&](std::size_t p) {
    RandomStream w(cfg.seed, Lane::kFastNoise, p);
    std::vector<double> x(x0.begin(), x0.end()), b(d1), sig(d1 * d1), xi(d1);
    double xmax = detail::norm(x);
    for (std::size_t n = 0; n < grid.steps; ++n) {
      sys.b(x, y, b);
      detail::check_finite(b, "b");
      sys.sigma(x, y, sig);
      detail::check_finite(sig, "sigma");
      w.fill_normal(xi);
      for (std::size_t i = 0; i < d1; ++i) {
        double noise = 0.0;
        for (std::size_t j = 0; j < d1; ++j) noise += sig[i * d1 + j] * xi[j];
        x[i] += b[i] * grid.dt + noise * sqrt_dt;
      }
      detail::check_state(x, cfg.blowup_cap, "frozen state X");
      xmax = std::max(xmax, detail::norm(x));
    }
    std::copy(x.begin(), x.end(), out.terminal_x.begin() + static_cast<std::ptrdiff_t>(p * d1));
    max_x[p] = xmax;
  });
  out.max_abs_x = cfg.n_paths ? *std::max_element(max_x.begin(), max_x.end()) : 0.0;
  return out;
}

/// Anything exposing `dim()` and `evaluate(t, y, drift_out, diffusion_out)`
/// with a d2 drift and a d2×d2 row-major diffusion.
template <class T>
concept LimitCoefficients = requires(const T& c, double t, ConstVec y, OutVec o) {
  { c.dim() } -> std::convertible_to<std::size_t>;
  c.evaluate(t, y, o, o);
};

struct LimitConfig {
  double T = 1.0;
  double dt = 1e-2;
  std::uint64_t seed = 0;
  std::size_t n_paths = 1000;
  double blowup_cap = 1e6;
  std::vector<double> observe_times;
  bool record_snapshots = false;
};

/// Euler–Maruyama for dŶ = F̂(t,Ŷ) dt + Ĝ(t,Ŷ) dW². Draws W² from the same
/// lane as integrate_coupled, so equal seeds and equal macro steps give
/// common random numbers between the two ensembles.
template <LimitCoefficients Limit>
EnsembleResult integrate_limit(const Limit& avg, ConstVec y0, const LimitConfig& cfg) {
  const std::size_t d2 = avg.dim();
  require(y0.size() == d2, "initial state has wrong dimension");
  const MacroGrid grid = make_macro_grid(cfg.T, cfg.dt);
  const double sqrt_dt = std::sqrt(grid.dt);

  EnsembleResult out;
  const auto nodes = detail::snap_times(grid, cfg.observe_times, out.observe_times);
  detail::prepare_result(out, 0, d2, cfg.n_paths, nodes.size(), 0);
  std::vector<std::vector<Snapshot>> snaps(cfg.record_snapshots ? cfg.n_paths : 0);

  parallel_for(cfg.n_paths, [&](std::size_t p) {
    RandomStream w2(cfg.seed, Lane::kSlowNoise, p);
    std::vector<double> y(y0.begin(), y0.end()), Fv(d2), Gv(d2 * d2), dw(d2);
    detail::Observer obs(out, nodes, p, 0);
    obs.at_node(0, y);
    if (cfg.record_snapshots) snaps[p].push_back({p, 0.0, y, {}});
    for (std::size_t n = 0; n < grid.steps; ++n) {
      avg.evaluate(grid.time(n), y, Fv, Gv);
      detail::check_finite(Fv, "averaged drift");
      detail::check_finite(Gv, "averaged diffusion");
      w2.fill_normal(dw);
      for (std::size_t i = 0; i < d2; ++i) {
        double noise = 0.0;
        for (std::size_t j = 0; j < d2; ++j) noise += Gv[i * d2 + j] * dw[j];
        y[i] += Fv[i] * grid.dt + noise * sqrt_dt;
      }
      detail::check_state(y, cfg.blowup_cap, "limit state");
      obs.at_node(n + 1, y);
      if (cfg.record_snapshots) snaps[p].push_back({p, grid.time(n + 1), y, {}});
    }
    std::copy(y.begin(), y.end(), out.terminal_y.begin() + static_cast<std::ptrdiff_t>(p * d2));
  });
  detail::collect_snapshots(out, snaps);
  return out;
}

/// CSV with columns path_id,t,y_1..y_d2[,x_1..x_d1], one row per macro node.
inline void write_snapshot_csv(std::ostream& os, const EnsembleResult& r,
                               bool include_x) {
  os << "path_id,t";
  for (std::size_t i = 0; i < r.d2; ++i) os << ",y_" << i + 1;
  if (include_x) {
    for (std::size_t i = 0; i < r.d1; ++i) os << ",x_" << i + 1;
  }
  os << '\n';
  for (const auto& s : r.snapshots) {
    os << s.path_id << ',' << format_double(s.t);
    for (double v : s.y) os << ',' << format_double(v);
    if (include_x) {
      for (double v : s.x) os << ',' << format_double(v);
    }
    os << '\n';
  }
}

}  // namespace fastslow
