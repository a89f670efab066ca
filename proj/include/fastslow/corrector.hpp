#pragma once

// Feynman–Kac solution of the Poisson equation ℒ₀u = f for centered f,
// and the derivatives of the solution needed by the limit coefficients.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <vector>

#include <Eigen/Dense>

#include "fastslow/ergodic.hpp"
#include "fastslow/errors.hpp"
#include "fastslow/model.hpp"
#include "fastslow/parallel.hpp"
#include "fastslow/random.hpp"
#include "fastslow/simulate.hpp"

namespace fastslow {

/// kCorrector returns Φ with ℒ₀Φ = −f; kPoisson returns u = −Φ, ℒ₀u = f.
enum class SolveMode { kCorrector, kPoisson };

struct TensorGrid {
  std::vector<double> points;  // row-major, last axis fastest
  std::vector<std::size_t> shape;
  std::vector<double> spacing;
};

/// Regular grid with counts[j] nodes on [lo[j], hi[j]].
inline TensorGrid make_tensor_grid(const std::vector<double>& lo,
                                   const std::vector<double>& hi,
                                   const std::vector<std::size_t>& counts) {
  const std::size_t d = lo.size();
  require(d >= 1 && hi.size() == d && counts.size() == d, "grid bounds have mismatched sizes");
  TensorGrid g;
  g.shape = counts;
  std::size_t total = 1;
  for (std::size_t j = 0; j < d; ++j) {
    require(counts[j] >= 1, "grid counts must be >= 1");
    require(counts[j] == 1 || hi[j] > lo[j], "grid upper bound must exceed lower bound");
    g.spacing.push_back(counts[j] == 1 ? 0.0 : (hi[j] - lo[j]) / static_cast<double>(counts[j] - 1));
    total *= counts[j];
  }
  g.points.resize(total * d);
  for (std::size_t p = 0; p < total; ++p) {
    std::size_t rest = p;
    for (std::size_t j = d; j-- > 0;) {
      const std::size_t i = rest % counts[j];
      rest /= counts[j];
      g.points[p * d + j] = lo[j] + static_cast<double>(i) * g.spacing[j];
    }
  }
  return g;
}

struct CorrectorQuery {
  double t = 0.0;
  std::vector<double> y;
  std::vector<double> points;  // n × d1
  double T_max = 10.0;
  std::size_t n_paths = 1000;
  double dt = 1e-2;
  std::uint64_t seed = 0;
  std::vector<std::size_t> grid_shape;  // set when points form a tensor grid
  std::vector<double> grid_spacing;
  double blowup_cap = 1e6;

  void set_grid(const TensorGrid& g) {
    points = g.points;
    grid_shape = g.shape;
    grid_spacing = g.spacing;
  }
};

struct SolveOptions {
  SolveMode mode = SolveMode::kCorrector;
  double centering_z = 0.0;  // from centering_residual, supplied by the caller
  double z_threshold = 3.0;
  std::size_t chunk = 64;  // paths per reduction chunk
};

struct CorrectorField {
  std::size_t d1 = 0;
  std::size_t d2 = 0;
  std::size_t k = 0;
  SolveMode mode = SolveMode::kCorrector;
  double t = 0.0;
  std::vector<double> y;
  std::vector<double> points;      // n × d1
  std::vector<double> values;      // n × k
  std::vector<double> se;          // n × k
  std::vector<double> tail_bound;  // n × k
  std::vector<std::size_t> grid_shape;
  std::vector<double> grid_spacing;
  std::vector<double> grad_x;  // n × k × d1, NaN off the interior
  std::vector<double> grad_y;  // n × k × d2, empty until attached

  std::size_t size() const { return k == 0 ? 0 : values.size() / k; }
  double value(std::size_t p, std::size_t j) const { return values[p * k + j]; }
  ConstVec point(std::size_t p) const { return ConstVec(points).subspan(p * d1, d1); }
  bool has_grad_x(std::size_t p) const {
    return !grad_x.empty() && !std::isnan(grad_x[p * k * d1]);
  }
};

namespace detail {

/// Per-point sums of the path integral and of its last two tenths, the
/// latter feeding the truncation-tail estimate.
struct FKSums {
  std::vector<double> full, full2, win_a, win_b, win_b2;
  explicit FKSums(std::size_t n = 0)
      : full(n, 0.0), full2(n, 0.0), win_a(n, 0.0), win_b(n, 0.0), win_b2(n, 0.0) {}
  void add(const FKSums& o) {
    for (std::size_t i = 0; i < full.size(); ++i) {
      full[i] += o.full[i];
      full2[i] += o.full2[i];
      win_a[i] += o.win_a[i];
      win_b[i] += o.win_b[i];
      win_b2[i] += o.win_b2[i];
    }
  }
};

struct FKGrid {
  std::size_t steps;
  double h;
  std::size_t start_a;
  std::size_t start_b;
};

inline FKGrid fk_grid(double T_max, double dt) {
  require(T_max > 0.0, "T_max must be > 0");
  require(dt > 0.0, "dt must be > 0");
  const auto n = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::ceil(T_max / dt - 1e-9)));
  return {n, T_max / static_cast<double>(n), (8 * n) / 10, (9 * n) / 10};
}

/// Runs paths [begin, end) from every point with shared noise per path and
/// accumulates ∫₀^T f(t, X_s, y) ds (left-point rule) into `sums`.
template <class Fn>
void fk_paths(const CoupledSystem& sys, Fn& f, std::size_t k, double t, ConstVec y,
              ConstVec points, const FKGrid& grid, std::uint64_t seed,
              std::size_t begin, std::size_t end, double cap, FKSums& sums) {
  const std::size_t d1 = sys.d1;
  const std::size_t n = points.size() / d1;
  std::vector<double> x(points.size()), xi(d1), b(d1), sig(d1 * d1), fv(k);
  std::vector<double> full(n * k), wa(n * k), wb(n * k);
  const double sqrt_h = std::sqrt(grid.h);
  for (std::size_t path = begin; path < end; ++path) {
    RandomStream w(seed, Lane::kCorrector, path);
    std::copy(points.begin(), points.end(), x.begin());
    std::fill(full.begin(), full.end(), 0.0);
    std::fill(wa.begin(), wa.end(), 0.0);
    std::fill(wb.begin(), wb.end(), 0.0);
    for (std::size_t s = 0; s < grid.steps; ++s) {
      for (std::size_t p = 0; p < n; ++p) {
        OutVec out(fv);
        f(t, ConstVec(x).subspan(p * d1, d1), y, out);
        check_finite(fv, "corrector source f");
        for (std::size_t j = 0; j < k; ++j) {
          const double v = fv[j] * grid.h;
          full[p * k + j] += v;
          if (s >= grid.start_b) {
            wb[p * k + j] += v;
          } else if (s >= grid.start_a) {
            wa[p * k + j] += v;
          }
        }
      }
      if (s + 1 == grid.steps) break;
      w.fill_normal(xi);
      for (std::size_t p = 0; p < n; ++p) {
        OutVec xp(x.data() + p * d1, d1);
        sys.b(xp, y, b);
        check_finite(b, "b");
        sys.sigma(xp, y, sig);
        check_finite(sig, "sigma");
        for (std::size_t i = 0; i < d1; ++i) {
          double noise = 0.0;
          for (std::size_t j = 0; j < d1; ++j) noise += sig[i * d1 + j] * xi[j];
          xp[i] += b[i] * grid.h + noise * sqrt_h;
        }
        check_state(xp, cap, "corrector path X");
      }
    }
    for (std::size_t i = 0; i < n * k; ++i) {
      sums.full[i] += full[i];
      sums.full2[i] += full[i] * full[i];
      sums.win_a[i] += wa[i];
      sums.win_b[i] += wb[i];
      sums.win_b2[i] += wb[i] * wb[i];
    }
  }
}

inline double mean_se(double sum, double sum2, std::size_t n) {
  if (n < 2) return std::numeric_limits<double>::quiet_NaN();
  const double dn = static_cast<double>(n);
  const double m = sum / dn;
  const double var = std::max(0.0, (sum2 / dn - m * m) * dn / (dn - 1.0));
  return std::sqrt(var / dn);
}

/// Geometric continuation of the last window's decay, plus the noise a
/// further T_max of integration could add at three standard errors.
inline double tail_estimate(double a, double b, double b2, std::size_t n,
                            const FKGrid& g) {
  const double dn = static_cast<double>(n);
  const double ma = std::abs(a / dn);
  const double mb = std::abs(b / dn);
  const double spans = static_cast<double>(g.steps) /
                       static_cast<double>(std::max<std::size_t>(1, g.steps - g.start_b));
  double geometric = 0.0;
  if (mb > 0.0) {
    const double r = ma > 0.0 ? mb / ma : 1.0;
    geometric = r < 1.0 ? mb * r / (1.0 - r) : mb * spans;
  }
  const double se_b = mean_se(b, b2, n);
  return geometric + (std::isnan(se_b) ? 0.0 : 3.0 * std::sqrt(spans) * se_b);
}

inline void check_query(const CoupledSystem& sys, const CorrectorQuery& q) {
  sys.validate();
  require(q.y.size() == sys.d2, "query y has wrong dimension");
  require(!q.points.empty() && q.points.size() % sys.d1 == 0,
          "query points must be a non-empty n × d1 array");
  require(q.T_max > 0.0, "T_max must be > 0");
  require(q.dt > 0.0, "dt must be > 0");
  require(q.n_paths >= 1, "n_paths must be >= 1");
}

}  // namespace detail

/// Monte Carlo estimate of ∫₀^{T_max} E f(t, X_s^y(x), y) ds at every query
/// point. Path i uses the same noise at every point, so differences between
/// points carry common random numbers.
template <class Fn>
CorrectorField solve_poisson_fk(const CoupledSystem& sys, Fn&& f, std::size_t k,
                                const CorrectorQuery& q, const SolveOptions& opt = {}) {
  detail::check_query(sys, q);
  require(k >= 1, "codomain dimension k must be >= 1");
  if (opt.centering_z > opt.z_threshold) {
    throw NotCentered("source has centering z-score " + std::to_string(opt.centering_z) +
                      " above " + std::to_string(opt.z_threshold));
  }
  const std::size_t n = q.points.size() / sys.d1;
  const detail::FKGrid grid = detail::fk_grid(q.T_max, q.dt);

  const std::size_t chunks = chunk_count(q.n_paths, opt.chunk);
  std::vector<detail::FKSums> partial(chunks, detail::FKSums(n * k));
  for_each_chunk(q.n_paths, opt.chunk, [&](std::size_t begin, std::size_t end, std::size_t c) {
    detail::fk_paths(sys, f, k, q.t, ConstVec(q.y), ConstVec(q.points), grid, q.seed,
                     begin, end, q.blowup_cap, partial[c]);
  });
  detail::FKSums total(n * k);
  for (const auto& p : partial) total.add(p);

  CorrectorField field;
  field.d1 = sys.d1;
  field.d2 = sys.d2;
  field.k = k;
  field.mode = opt.mode;
  field.t = q.t;
  field.y = q.y;
  field.points = q.points;
  field.grid_shape = q.grid_shape;
  field.grid_spacing = q.grid_spacing;
  field.values.resize(n * k);
  field.se.resize(n * k);
  field.tail_bound.resize(n * k);
  const double sign = opt.mode == SolveMode::kCorrector ? 1.0 : -1.0;
  const double dn = static_cast<double>(q.n_paths);
  for (std::size_t i = 0; i < n * k; ++i) {
    field.values[i] = sign * (total.full[i] / dn);
    field.se[i] = detail::mean_se(total.full[i], total.full2[i], q.n_paths);
    field.tail_bound[i] =
        detail::tail_estimate(total.win_a[i], total.win_b[i], total.win_b2[i], q.n_paths, grid);
  }
  return field;
}

/// Central x-differences at interior tensor-grid points. Throws GridTooCoarse
/// when the spacing exceeds `fraction` of the local radius of curvature.
inline void attach_grad_x(CorrectorField& field, double fraction = 0.5) {
  const std::size_t d1 = field.d1;
  require(field.grid_shape.size() == d1 && field.grid_spacing.size() == d1,
          "x-gradients need a tensor-grid query");
  const std::size_t n = field.size();
  const std::size_t k = field.k;
  field.grad_x.assign(n * k * d1, std::numeric_limits<double>::quiet_NaN());

  std::vector<std::size_t> stride(d1, 1);
  for (std::size_t j = d1 - 1; j-- > 0;) stride[j] = stride[j + 1] * field.grid_shape[j + 1];

  for (std::size_t p = 0; p < n; ++p) {
    bool interior = true;
    for (std::size_t j = 0; j < d1; ++j) {
      const std::size_t i = (p / stride[j]) % field.grid_shape[j];
      interior = interior && i > 0 && i + 1 < field.grid_shape[j];
    }
    if (!interior) continue;
    for (std::size_t j = 0; j < d1; ++j) {
      const double h = field.grid_spacing[j];
      for (std::size_t c = 0; c < k; ++c) {
        const double up = field.values[(p + stride[j]) * k + c];
        const double mid = field.values[p * k + c];
        const double dn = field.values[(p - stride[j]) * k + c];
        const double d1v = (up - dn) / (2.0 * h);
        const double d2v = (up - 2.0 * mid + dn) / (h * h);
        if (d2v != 0.0) {
          const double radius = std::pow(1.0 + d1v * d1v, 1.5) / std::abs(d2v);
          if (h > fraction * radius) {
            throw GridTooCoarse("spacing " + std::to_string(h) + " exceeds " +
                                std::to_string(fraction) + " of curvature radius " +
                                std::to_string(radius));
          }
        }
        field.grad_x[(p * k + c) * d1 + j] = d1v;
      }
    }
  }
}

inline double y_step(double y, double rel) { return rel * std::max(1.0, std::abs(y)); }

/// Central y-differences from re-solves at y ± δ_y·e_j under the query seed.
template <class Fn>
void attach_grad_y(CorrectorField& field, const CoupledSystem& sys, Fn&& f,
                   const CorrectorQuery& q, const SolveOptions& opt = {},
                   double delta_y_rel = 1e-3) {
  const std::size_t n = field.size();
  const std::size_t k = field.k;
  const std::size_t d2 = sys.d2;
  field.grad_y.assign(n * k * d2, 0.0);
  for (std::size_t j = 0; j < d2; ++j) {
    const double h = y_step(q.y[j], delta_y_rel);
    CorrectorQuery up = q, dn = q;
    up.y[j] += h;
    dn.y[j] -= h;
    const CorrectorField fu = solve_poisson_fk(sys, f, k, up, opt);
    const CorrectorField fd = solve_poisson_fk(sys, f, k, dn, opt);
    for (std::size_t i = 0; i < n * k; ++i) {
      field.grad_y[i * d2 + j] = (fu.values[i] - fd.values[i]) / (2.0 * h);
    }
  }
}

/// Solve plus both gradient families.
template <class Fn>
CorrectorField gradients(const CoupledSystem& sys, Fn&& f, std::size_t k,
                         const CorrectorQuery& q, const SolveOptions& opt = {},
                         double delta_y_rel = 1e-3) {
  CorrectorField field = solve_poisson_fk(sys, f, k, q, opt);
  attach_grad_x(field);
  attach_grad_y(field, sys, f, q, opt, delta_y_rel);
  return field;
}

struct FKBudget {
  double T_max = 5.0;
  double dt = 1e-2;
  std::size_t n_paths = 1;
  std::uint64_t seed = 0;
  double blowup_cap = 1e6;
};

struct StencilOptions {
  bool grad_x = true;
  bool grad_y = false;
  bool hessian_x = false;
  double delta_x = 0.05;
  double delta_y_rel = 1e-3;
};

/// Corrector value and derivatives at one scattered point.
struct StencilValue {
  std::vector<double> value;      // k
  std::vector<double> grad_x;     // k × d1
  std::vector<double> grad_y;     // k × d2
  std::vector<double> hessian_x;  // k × d1 × d1
};

/// Finite-difference stencils around each center. Center i draws its paths
/// from a seed derived from (budget.seed, i); all points of one center share
/// them.
template <class Fn>
std::vector<StencilValue> solve_stencil(const CoupledSystem& sys, Fn&& f, std::size_t k,
                                        double t, ConstVec y, ConstVec centers,
                                        const FKBudget& budget, const StencilOptions& so,
                                        SolveMode mode = SolveMode::kCorrector) {
  sys.validate();
  const std::size_t d1 = sys.d1;
  const std::size_t d2 = sys.d2;
  require(y.size() == d2, "y has wrong dimension");
  require(!centers.empty() && centers.size() % d1 == 0, "centers must be a non-empty m × d1 array");
  require(k >= 1, "codomain dimension k must be >= 1");
  require(budget.n_paths >= 1, "n_paths must be >= 1");
  require(so.delta_x > 0.0 && so.delta_y_rel > 0.0, "stencil steps must be > 0");
  const detail::FKGrid grid = detail::fk_grid(budget.T_max, budget.dt);
  const std::size_t m = centers.size() / d1;
  const double sign = mode == SolveMode::kCorrector ? 1.0 : -1.0;
  const double dn = static_cast<double>(budget.n_paths);
  const double hx = so.delta_x;

  // Point layout: center, then ±e_j pairs, then the four corners per j < l.
  std::vector<double> offsets(d1, 0.0);
  std::vector<std::vector<double>> layout{offsets};
  if (so.grad_x || so.hessian_x) {
    for (std::size_t j = 0; j < d1; ++j) {
      for (double s : {1.0, -1.0}) {
        auto o = offsets;
        o[j] = s * hx;
        layout.push_back(o);
      }
    }
  }
  const std::size_t corner_base = layout.size();
  if (so.hessian_x) {
    for (std::size_t j = 0; j < d1; ++j) {
      for (std::size_t l = j + 1; l < d1; ++l) {
        for (double sj : {1.0, -1.0}) {
          for (double sl : {1.0, -1.0}) {
            auto o = offsets;
            o[j] = sj * hx;
            o[l] = sl * hx;
            layout.push_back(o);
          }
        }
      }
    }
  }

  std::vector<StencilValue> out(m);
  parallel_for(m, [&](std::size_t i) {
    const std::uint64_t seed = derive_seed(budget.seed, {static_cast<std::int64_t>(i)});
    const ConstVec c = centers.subspan(i * d1, d1);
    std::vector<double> pts(layout.size() * d1);
    for (std::size_t p = 0; p < layout.size(); ++p) {
      for (std::size_t j = 0; j < d1; ++j) pts[p * d1 + j] = c[j] + layout[p][j];
    }
    detail::FKSums sums(layout.size() * k);
    detail::fk_paths(sys, f, k, t, y, ConstVec(pts), grid, seed, 0, budget.n_paths,
                     budget.blowup_cap, sums);
    auto v = [&](std::size_t p, std::size_t comp) { return sign * sums.full[p * k + comp] / dn; };

    StencilValue& sv = out[i];
    sv.value.resize(k);
    for (std::size_t comp = 0; comp < k; ++comp) sv.value[comp] = v(0, comp);
    if (so.grad_x) {
      sv.grad_x.resize(k * d1);
      for (std::size_t comp = 0; comp < k; ++comp) {
        for (std::size_t j = 0; j < d1; ++j) {
          sv.grad_x[comp * d1 + j] = (v(1 + 2 * j, comp) - v(2 + 2 * j, comp)) / (2.0 * hx);
        }
      }
    }
    if (so.hessian_x) {
      sv.hessian_x.assign(k * d1 * d1, 0.0);
      for (std::size_t comp = 0; comp < k; ++comp) {
        double* hm = sv.hessian_x.data() + comp * d1 * d1;
        for (std::size_t j = 0; j < d1; ++j) {
          hm[j * d1 + j] =
              (v(1 + 2 * j, comp) - 2.0 * v(0, comp) + v(2 + 2 * j, comp)) / (hx * hx);
        }
        std::size_t q = corner_base;
        for (std::size_t j = 0; j < d1; ++j) {
          for (std::size_t l = j + 1; l < d1; ++l) {
            const double mixed =
                (v(q, comp) - v(q + 1, comp) - v(q + 2, comp) + v(q + 3, comp)) / (4.0 * hx * hx);
            hm[j * d1 + l] = mixed;
            hm[l * d1 + j] = mixed;
            q += 4;
          }
        }
      }
    }
    if (so.grad_y) {
      sv.grad_y.resize(k * d2);
      std::vector<double> ys(y.begin(), y.end());
      for (std::size_t j = 0; j < d2; ++j) {
        const double h = y_step(y[j], so.delta_y_rel);
        std::vector<double> buf(2 * k);
        for (int s = 0; s < 2; ++s) {
          ys[j] = y[j] + (s == 0 ? h : -h);
          detail::FKSums ss(k);
          detail::fk_paths(sys, f, k, t, ConstVec(ys), c, grid, seed, 0, budget.n_paths,
                           budget.blowup_cap, ss);
          for (std::size_t comp = 0; comp < k; ++comp) buf[s * k + comp] = sign * ss.full[comp] / dn;
        }
        ys[j] = y[j];
        for (std::size_t comp = 0; comp < k; ++comp) {
          sv.grad_y[comp * d2 + j] = (buf[comp] - buf[k + comp]) / (2.0 * h);
        }
      }
    }
  });
  return out;
}

struct HPhiResult {
  Eigen::MatrixXd symmetric;  // (M + Mᵀ)/2
  Eigen::MatrixXd se;         // batch-means SE of the symmetric entries
  double antisymmetric_norm = 0.0;  // Frobenius norm of (M − Mᵀ)/2
};

/// μ^y-average of H(t, x, y)Φ(x)ᵀ, given Φ at every sample of `mu`
/// (phi is size() × d2, in sample order).
inline HPhiResult outer_product_HPhi(const CoupledSystem& sys, const std::vector<double>& phi,
                                     const MeasureEnsemble& mu, double t) {
  const std::size_t d2 = sys.d2;
  const std::size_t n = mu.size();
  require(n >= 1 && phi.size() == n * d2, "phi must hold one d2-vector per sample");
  std::vector<double> sym(n * d2 * d2), hv(d2);
  Eigen::MatrixXd anti = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(d2),
                                                static_cast<Eigen::Index>(d2));
  for (std::size_t i = 0; i < n; ++i) {
    sys.H(t, mu.sample(i), ConstVec(mu.y), hv);
    detail::check_finite(hv, "H");
    for (std::size_t r = 0; r < d2; ++r) {
      for (std::size_t c = 0; c < d2; ++c) {
        const double m_rc = hv[r] * phi[i * d2 + c];
        const double m_cr = hv[c] * phi[i * d2 + r];
        sym[(i * d2 + r) * d2 + c] = 0.5 * (m_rc + m_cr);
        anti(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) += 0.5 * (m_rc - m_cr);
      }
    }
  }
  const Estimate e = batch_means(sym, d2 * d2);
  HPhiResult out;
  out.symmetric.resize(static_cast<Eigen::Index>(d2), static_cast<Eigen::Index>(d2));
  out.se.resize(static_cast<Eigen::Index>(d2), static_cast<Eigen::Index>(d2));
  for (std::size_t r = 0; r < d2; ++r) {
    for (std::size_t c = 0; c < d2; ++c) {
      out.symmetric(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = e.mean[r * d2 + c];
      out.se(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = e.se[r * d2 + c];
    }
  }
  out.antisymmetric_norm = (anti / static_cast<double>(n)).norm();
  return out;
}

/// Same, from a field solved with f = H whose points are the samples of `mu`.
inline HPhiResult outer_product_HPhi(const CoupledSystem& sys, const CorrectorField& field,
                                     const MeasureEnsemble& mu, double t) {
  require(field.k == sys.d2, "field must be solved with f = H");
  require(field.points == mu.samples, "field points must be the samples of mu");
  return outer_product_HPhi(sys, field.values, mu, t);
}

}  // namespace fastslow
