#pragma once

// Convergence and fluctuation experiments on coupled systems.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <boost/math/distributions/students_t.hpp>

#include "fastslow/ergodic.hpp"
#include "fastslow/errors.hpp"
#include "fastslow/format.hpp"
#include "fastslow/homogenize.hpp"
#include "fastslow/model.hpp"
#include "fastslow/presets.hpp"
#include "fastslow/random.hpp"
#include "fastslow/simulate.hpp"

namespace fastslow {

// ---------------------------------------------------------------------------
// Rates

struct RateTerm {
  std::string name;
  Exponent value;
};

struct RateResult {
  Regime regime = Regime::kR1;
  Exponent theta;
  Exponent exponent;
  std::vector<RateTerm> terms;
  /// R1/R2 assume α^ϑ/γ → 0, i.e. ϑ·a > g. Set when that fails.
  bool hypothesis_warning = false;

  double value() const { return to_double(exponent); }
};

/// ε-exponent of the weak-error bound for regime k.
inline RateResult theoretical_rate(Regime k, const ScaleSchedule& s, Exponent theta) {
  const Exponent a = s.exp_alpha(), b = s.exp_beta(), g = s.exp_gamma();
  const bool low = k == Regime::kR1 || k == Regime::kR2;
  const Exponent theta_max = low ? Exponent(2) : Exponent(1);
  if (k == Regime::kUnclassified) throw InvalidArgument("cannot rate an unclassified schedule");
  if (theta <= 0 || theta > theta_max) {
    throw ThetaOutOfRange("theta = " + to_string(theta) + " outside (0, " +
                          to_string(theta_max) + "] for " + std::string(to_string(k)));
  }
  RateResult r;
  r.regime = k;
  r.theta = theta;
  switch (k) {
    case Regime::kR1:
      r.terms = {{"theta*a-g", theta * a - g}, {"2a-2g", 2 * a - 2 * g}, {"2a-b-g", 2 * a - b - g}};
      break;
    case Regime::kR2:
      r.terms = {{"theta*a-g", theta * a - g}, {"2a-2g", 2 * a - 2 * g}, {"2a-b", 2 * a - b}};
      break;
    case Regime::kR3:
      r.terms = {{"theta*a", theta * a}, {"a-b", a - b}};
      break;
    case Regime::kR4:
      r.terms = {{"theta*a", theta * a}};
      break;
    case Regime::kUnclassified:
      break;
  }
  r.exponent = r.terms.front().value;
  for (const auto& t : r.terms) r.exponent = std::min(r.exponent, t.value);
  r.hypothesis_warning = low && theta * a <= g;
  return r;
}

inline RateResult theoretical_rate(Regime k, const ScaleSchedule& s, double theta) {
  if (!(theta > 0.0)) {
    throw ThetaOutOfRange("theta = " + format_double(theta) + " must be > 0");
  }
  return theoretical_rate(k, s, exponent_from_double(theta));
}

/// Shape α^ϑ + α^{min(ϑ,1)}·α/γ + α²/β of the averaging-fluctuation bound.
inline double lln_bound_shape(const ScaleSchedule& s, double eps, double theta) {
  const double a = s.alpha(eps);
  return std::pow(a, theta) + std::pow(a, std::min(theta, 1.0)) * a / s.gamma(eps) +
         a * a / s.beta(eps);
}

// ---------------------------------------------------------------------------
// Fitting

struct SlopeFit {
  double slope = std::numeric_limits<double>::quiet_NaN();
  double intercept = std::numeric_limits<double>::quiet_NaN();
  double ci_lo = std::numeric_limits<double>::quiet_NaN();
  double ci_hi = std::numeric_limits<double>::quiet_NaN();
  std::size_t n_points = 0;
};

/// Least-squares slope of log(err) on log(eps) with a 95% Student-t band.
/// Needs at least three points.
inline SlopeFit fit_log_slope(const std::vector<double>& eps, const std::vector<double>& err) {
  require(eps.size() == err.size(), "eps and err must have equal length");
  SlopeFit fit;
  fit.n_points = eps.size();
  if (eps.size() < 3) return fit;
  const double n = static_cast<double>(eps.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < eps.size(); ++i) {
    require(eps[i] > 0.0 && err[i] > 0.0, "log-log fit needs positive values");
    mx += std::log(eps[i]);
    my += std::log(err[i]);
  }
  mx /= n;
  my /= n;
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < eps.size(); ++i) {
    const double dx = std::log(eps[i]) - mx;
    sxx += dx * dx;
    sxy += dx * (std::log(err[i]) - my);
  }
  require(sxx > 0.0, "eps values must not all coincide");
  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  double rss = 0.0;
  for (std::size_t i = 0; i < eps.size(); ++i) {
    const double r = std::log(err[i]) - (fit.intercept + fit.slope * std::log(eps[i]));
    rss += r * r;
  }
  const double dof = n - 2.0;
  const double se = std::sqrt(rss / dof / sxx);
  const boost::math::students_t dist(dof);
  const double q = boost::math::quantile(boost::math::complement(dist, 0.025));
  fit.ci_lo = fit.slope - q * se;
  fit.ci_hi = fit.slope + q * se;
  return fit;
}

/// True when values[i+1] ≤ values[i] + slack·√(se[i]² + se[i+1]²) for all i,
/// values ordered by decreasing ε.
inline bool monotone_non_increasing(const std::vector<double>& values,
                                    const std::vector<double>& se, double slack = 2.0) {
  for (std::size_t i = 0; i + 1 < values.size(); ++i) {
    const double s = std::sqrt(se[i] * se[i] + se[i + 1] * se[i + 1]);
    if (values[i + 1] > values[i] + slack * s) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Configuration

struct StageBudgets {
  std::size_t paths_coupled = 2000;
  std::size_t paths_limit = 2000;
  std::size_t paths_corrector = 1;
  std::size_t invariant_samples = 1000;
};

struct ExperimentConfig {
  std::string preset = "ou_classical";
  std::optional<std::array<Exponent, 3>> exponents;  // preset default when absent
  double theta = 1.0;
  std::vector<double> eps_list{0.4, 0.2, 0.1};
  double T = 1.0;
  std::size_t time_grid_n = 11;
  std::vector<std::string> phi{"tanh"};
  StageBudgets budgets;
  std::uint64_t seed = 0;
  std::string out_dir = ".";

  // Integration and estimation details.
  double dt_slow = 5e-3;
  int micro_substeps = 10;
  double limit_dt = 5e-3;  // equal to dt_slow gives common random numbers
  double blowup_cap = 1e6;
  bool analytic_limit = false;  // use the preset's closed-form limit
  HPhiWeight weight = HPhiWeight::kGenerator;
  CachePolicy cache;
  double invariant_dt = 1e-2;
  std::size_t invariant_thinning = 50;
  double invariant_burn_in = 10.0;
  double fk_T_max = 5.0;
  double fk_dt = 1e-2;
  std::string observable = "x_minus_y";
  // per-cell centering gate; many cells are tested, so looser than a single check
  double centering_z = 5.0;

  ScaleSchedule schedule(const Preset& p) const {
    if (!exponents) return p.schedule;
    return ScaleSchedule((*exponents)[0], (*exponents)[1], (*exponents)[2]);
  }

  Budgets estimation_budgets() const {
    Budgets b;
    b.invariant.n_samples = budgets.invariant_samples;
    b.invariant.dt = invariant_dt;
    b.invariant.thinning = invariant_thinning;
    b.invariant.burn_in = invariant_burn_in;
    b.invariant.blowup_cap = blowup_cap;
    b.fk.T_max = fk_T_max;
    b.fk.dt = fk_dt;
    b.fk.n_paths = budgets.paths_corrector;
    b.fk.blowup_cap = blowup_cap;
    b.weight = weight;
    b.z_threshold = centering_z;
    return b;
  }

  std::vector<double> time_grid() const {
    std::vector<double> t(time_grid_n);
    for (std::size_t i = 0; i < time_grid_n; ++i) {
      t[i] = T * static_cast<double>(i) / static_cast<double>(time_grid_n - 1);
    }
    return t;
  }

  void validate() const {
    if (eps_list.empty()) throw ConfigError("eps_list must not be empty");
    for (std::size_t i = 0; i < eps_list.size(); ++i) {
      if (!(eps_list[i] > 0.0 && eps_list[i] < 1.0)) {
        throw ConfigError("eps_list entries must lie in (0, 1)");
      }
      if (i > 0 && !(eps_list[i] < eps_list[i - 1])) {
        throw ConfigError("eps_list must be strictly decreasing");
      }
    }
    if (!(T > 0.0)) throw ConfigError("T must be > 0");
    if (time_grid_n < 2) throw ConfigError("time_grid_n must be >= 2");
    if (phi.empty()) throw ConfigError("phi must name at least one test function");
    if (budgets.paths_coupled < 2 || budgets.paths_limit < 2 || budgets.paths_corrector < 1 ||
        budgets.invariant_samples < 2) {
      throw ConfigError("budgets must be positive (at least 2 paths and samples)");
    }
    if (!(dt_slow > 0.0) || !(limit_dt > 0.0) || micro_substeps < 1) {
      throw ConfigError("time steps must be positive");
    }
  }
};

// ---------------------------------------------------------------------------
// Weak error

struct WeakErrorRow {
  double eps = 0.0;
  double t = 0.0;
  std::string phi;
  double err = 0.0;
  double se = 0.0;
};

struct PhiSummary {
  std::string phi;
  std::vector<double> sup_err;  // per ε
  std::vector<double> sup_se;
  std::vector<bool> qualifies;  // sup_err > 3·sup_se
  SlopeFit fit;
  bool insufficient_signal = false;
  bool monotone = false;
};

struct WeakErrorReport {
  std::string preset;
  Regime regime = Regime::kR1;
  RateResult rate;
  std::vector<double> eps;
  std::vector<double> times;
  std::vector<WeakErrorRow> rows;
  std::vector<PhiSummary> summaries;
  std::uint64_t seed = 0;
  StageBudgets budgets;
  bool paired = false;
  std::size_t limit_cells = 0;
};

namespace detail {

enum : std::int64_t { kStageLimit = 11, kStageClt = 12, kStageCentering = 13 };

inline std::vector<double> phi_values(const TestFunction& phi, const EnsembleResult& r,
                                      std::size_t j) {
  std::vector<double> v(r.n_paths);
  for (std::size_t p = 0; p < r.n_paths; ++p) v[p] = phi(r.observed(j, p));
  return v;
}

/// |mean(a) − mean(b)| with the paired SE when path counts agree (shared
/// noise makes paths p of both ensembles correlated), pooled SE otherwise.
inline std::pair<double, double> mean_difference(const std::vector<double>& a,
                                                 const std::vector<double>& b) {
  auto moments = [](const std::vector<double>& v) {
    double m = 0.0;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return std::pair{m, s / static_cast<double>(v.size() - 1)};
  };
  if (a.size() == b.size()) {
    std::vector<double> d(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
    const auto [m, var] = moments(d);
    return {std::abs(m), std::sqrt(var / static_cast<double>(d.size()))};
  }
  const auto [ma, va] = moments(a);
  const auto [mb, vb] = moments(b);
  return {std::abs(ma - mb), std::sqrt(va / static_cast<double>(a.size()) +
                                       vb / static_cast<double>(b.size()))};
}

inline AveragedSDE make_limit(const ExperimentConfig& cfg, const Preset& preset, Regime regime) {
  if (cfg.analytic_limit) {
    if (!preset.exact_limit) throw ConfigError("preset has no closed-form limit");
    return AveragedSDE::from_fields(regime, preset.system.d2, *preset.exact_limit);
  }
  CachePolicy policy = cfg.cache;
  policy.master_seed = derive_seed(cfg.seed, {kStageLimit});
  return build_limit_sde(regime, preset.system, cfg.estimation_budgets(), policy);
}

inline PathConfig coupled_config(const ExperimentConfig& cfg, std::vector<double> times) {
  PathConfig pc;
  pc.T = cfg.T;
  pc.dt_slow = cfg.dt_slow;
  pc.micro_substeps = cfg.micro_substeps;
  pc.seed = cfg.seed;
  pc.n_paths = cfg.budgets.paths_coupled;
  pc.blowup_cap = cfg.blowup_cap;
  pc.observe_times = std::move(times);
  return pc;
}

inline Regime classified(const ScaleSchedule& s) {
  const Regime r = classify_regime(s);
  if (r == Regime::kUnclassified) throw ConfigError("exponents do not match any regime");
  return r;
}

}  // namespace detail

inline WeakErrorReport weak_error_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  const Preset preset = make_preset(cfg.preset);
  const ScaleSchedule sched = cfg.schedule(preset);
  const Regime regime = detail::classified(sched);

  WeakErrorReport rep;
  rep.preset = cfg.preset;
  rep.regime = regime;
  rep.rate = theoretical_rate(regime, sched, cfg.theta);
  rep.eps = cfg.eps_list;
  rep.times = cfg.time_grid();
  rep.seed = cfg.seed;
  rep.budgets = cfg.budgets;
  rep.paired = cfg.budgets.paths_coupled == cfg.budgets.paths_limit;

  std::vector<TestFunction> phis;
  for (const auto& name : cfg.phi) phis.push_back(make_test_function(name));

  const AveragedSDE limit = detail::make_limit(cfg, preset, regime);
  LimitConfig lc;
  lc.T = cfg.T;
  lc.dt = cfg.limit_dt;
  lc.seed = cfg.seed;
  lc.n_paths = cfg.budgets.paths_limit;
  lc.blowup_cap = cfg.blowup_cap;
  lc.observe_times = rep.times;
  const EnsembleResult lim = integrate_limit(limit, preset.y0, lc);
  rep.limit_cells = limit.cache_size();

  rep.summaries.resize(phis.size());
  for (std::size_t f = 0; f < phis.size(); ++f) rep.summaries[f].phi = cfg.phi[f];

  for (double eps : cfg.eps_list) {
    const EnsembleResult cr = integrate_coupled(preset.system, sched, eps, preset.x0, preset.y0,
                                                detail::coupled_config(cfg, rep.times));
    for (std::size_t f = 0; f < phis.size(); ++f) {
      double sup = -1.0, sup_se = 0.0;
      for (std::size_t j = 0; j < rep.times.size(); ++j) {
        const auto [err, se] = detail::mean_difference(detail::phi_values(phis[f], cr, j),
                                                       detail::phi_values(phis[f], lim, j));
        rep.rows.push_back({eps, cr.observe_times[j], cfg.phi[f], err, se});
        if (err > sup) {
          sup = err;
          sup_se = se;
        }
      }
      rep.summaries[f].sup_err.push_back(sup);
      rep.summaries[f].sup_se.push_back(sup_se);
    }
  }

  for (auto& s : rep.summaries) {
    std::vector<double> e, v;
    for (std::size_t i = 0; i < rep.eps.size(); ++i) {
      const bool q = s.sup_err[i] > 3.0 * s.sup_se[i];
      s.qualifies.push_back(q);
      if (q) {
        e.push_back(rep.eps[i]);
        v.push_back(s.sup_err[i]);
      }
    }
    s.insufficient_signal = e.size() < 3;
    if (!s.insufficient_signal) s.fit = fit_log_slope(e, v);
    s.monotone = monotone_non_increasing(s.sup_err, s.sup_se);
  }
  return rep;
}

inline constexpr const char* kConvergeHeader =
    "eps,t,phi,err,se,sup_err,theoretical_exponent,fitted_slope,slope_ci_lo,slope_ci_hi";

inline void write_convergence_csv(std::ostream& os, const WeakErrorReport& rep) {
  os << kConvergeHeader << '\n';
  for (const auto& row : rep.rows) {
    std::size_t f = 0;
    while (rep.summaries[f].phi != row.phi) ++f;
    std::size_t i = 0;
    while (rep.eps[i] != row.eps) ++i;
    const PhiSummary& s = rep.summaries[f];
    os << format_double(row.eps) << ',' << format_double(row.t) << ',' << row.phi << ','
       << format_double(row.err) << ',' << format_double(row.se) << ','
       << format_double(s.sup_err[i]) << ',' << format_double(rep.rate.value()) << ','
       << format_double(s.fit.slope) << ',' << format_double(s.fit.ci_lo) << ','
       << format_double(s.fit.ci_hi) << '\n';
  }
}

// ---------------------------------------------------------------------------
// Fluctuations

struct FluctuationRow {
  std::string kind;  // "lln" or "clt"
  double eps = 0.0;
  double t = 0.0;
  double estimate = 0.0;
  double se = 0.0;
  double limit_term = 0.0;
  double residual = 0.0;
  double bound_shape = std::numeric_limits<double>::quiet_NaN();
};

struct FluctuationReport {
  std::string kind;
  Regime regime = Regime::kR1;
  std::string observable;
  double centering_z = 0.0;
  std::vector<FluctuationRow> rows;  // one per ε, at t = T
  double fitted_constant = std::numeric_limits<double>::quiet_NaN();
  bool dominated = false;  // every |estimate| ≤ C·shape + 2·SE (lln only)
  bool monotone = false;   // |residual| non-increasing up to 2·SE
};

namespace detail {

template <class Fn>
double centering_z_at_start(const ExperimentConfig& cfg, const Preset& preset, Fn&& f) {
  InvariantOptions inv = cfg.estimation_budgets().invariant;
  inv.seed = derive_seed(cfg.seed, {kStageCentering});
  const MeasureEnsemble mu = sample_invariant_measure(preset.system, preset.y0, inv);
  return centering_residual(f, 1, mu, 0.0).max_z;
}

inline std::function<double(double, ConstVec, ConstVec)> scalar(SlowField f) {
  return [f = std::move(f)](double t, ConstVec x, ConstVec y) {
    double v = 0.0;
    f(t, x, y, OutVec(&v, 1));
    return v;
  };
}

inline void finish_fluctuation(FluctuationReport& rep) {
  std::vector<double> r, s;
  for (const auto& row : rep.rows) {
    r.push_back(std::abs(row.residual));
    s.push_back(row.se);
  }
  rep.monotone = monotone_non_increasing(r, s);
}

}  // namespace detail

/// E ∫₀ᵀ f(s, X_s, Y_s) ds along coupled paths, per ε, for scalar centered f.
inline FluctuationReport fluctuation_lln(const ExperimentConfig& cfg, const SlowField& f,
                                         const std::string& name = "custom") {
  cfg.validate();
  const Preset preset = make_preset(cfg.preset);
  const ScaleSchedule sched = cfg.schedule(preset);
  FluctuationReport rep;
  rep.kind = "lln";
  rep.regime = detail::classified(sched);
  rep.observable = name;
  rep.centering_z = detail::centering_z_at_start(cfg, preset, f);
  if (rep.centering_z > 3.0) {
    throw NotCentered("observable '" + name + "' has centering z-score " +
                      format_double(rep.centering_z) + " at the initial slow state");
  }
  const std::vector<PathIntegrand> integrands{{detail::scalar(f), IntegrandGrid::kMicro, 1.0}};
  for (double eps : cfg.eps_list) {
    const EnsembleResult r = integrate_coupled(preset.system, sched, eps, preset.x0, preset.y0,
                                               detail::coupled_config(cfg, {cfg.T}), integrands);
    const Estimate e = batch_means(r.integrals[0], 1, r.n_paths);
    FluctuationRow row;
    row.kind = "lln";
    row.eps = eps;
    row.t = r.observe_times[0];
    row.estimate = e.mean[0];
    row.se = e.se[0];
    row.residual = e.mean[0];
    row.bound_shape = lln_bound_shape(sched, eps, cfg.theta);
    rep.rows.push_back(row);
  }
  // C from the three largest ε, then check every ε against C·shape.
  double c = 0.0;
  for (std::size_t i = 0; i < std::min<std::size_t>(3, rep.rows.size()); ++i) {
    c = std::max(c, std::abs(rep.rows[i].estimate) / rep.rows[i].bound_shape);
  }
  rep.fitted_constant = c;
  rep.dominated = true;
  for (const auto& row : rep.rows) {
    rep.dominated = rep.dominated && std::abs(row.estimate) <= c * row.bound_shape + 2.0 * row.se;
  }
  detail::finish_fluctuation(rep);
  return rep;
}

/// E[(1/γ)∫₀ᵀ f ds] minus E ∫₀ᵀ L(Y_s) ds along the same paths, where L is
/// the regime's averaged corrector drift of f (zero for R1).
inline FluctuationReport fluctuation_clt(const ExperimentConfig& cfg, const SlowField& f,
                                         Regime regime, const std::string& name = "custom") {
  cfg.validate();
  const Preset preset = make_preset(cfg.preset);
  const ScaleSchedule sched = cfg.schedule(preset);
  const RegimeTerms terms = regime_terms(regime);
  FluctuationReport rep;
  rep.kind = "clt";
  rep.regime = regime;
  rep.observable = name;
  rep.centering_z = detail::centering_z_at_start(cfg, preset, f);
  if (rep.centering_z > 3.0) {
    throw NotCentered("observable '" + name + "' has centering z-score " +
                      format_double(rep.centering_z) + " at the initial slow state");
  }

  const CoupledSystem& sys = preset.system;
  const Budgets bud = cfg.estimation_budgets();
  CachePolicy policy = cfg.cache;
  policy.master_seed = derive_seed(cfg.seed, {detail::kStageClt});
  auto cache = std::make_shared<CellCache<Estimate>>(
      [regime, sys, f, bud](double t, ConstVec y, std::uint64_t seed) {
        return averaged_corrector_drift(regime, sys, f, 1, t, y, bud, seed);
      },
      policy, sys.time_homogeneous);
  const bool has_limit = terms.c_grad_x || terms.h_grad_y;

  for (double eps : cfg.eps_list) {
    std::vector<PathIntegrand> integrands{
        {detail::scalar(f), IntegrandGrid::kMicro, 1.0 / sched.gamma(eps)}};
    if (has_limit) {
      integrands.push_back({[cache](double t, ConstVec, ConstVec y) {
                              double v = 0.0;
                              cache->lookup(t, y, [&](const Estimate& e, double w) {
                                v += w * e.mean[0];
                              });
                              return v;
                            },
                            IntegrandGrid::kMacro, 1.0});
    }
    const EnsembleResult r = integrate_coupled(sys, sched, eps, preset.x0, preset.y0,
                                               detail::coupled_config(cfg, {cfg.T}), integrands);
    const std::size_t n = r.n_paths;
    std::vector<double> resid(n);
    for (std::size_t p = 0; p < n; ++p) {
      resid[p] = r.integrals[0][p] - (has_limit ? r.integrals[1][p] : 0.0);
    }
    const Estimate lhs = batch_means(r.integrals[0], 1, n);
    const Estimate res = batch_means(resid, 1, n);
    FluctuationRow row;
    row.kind = "clt";
    row.eps = eps;
    row.t = r.observe_times[0];
    row.estimate = lhs.mean[0];
    row.residual = res.mean[0];
    row.limit_term = row.estimate - row.residual;
    row.se = res.se[0];
    rep.rows.push_back(row);
  }
  detail::finish_fluctuation(rep);
  return rep;
}

inline constexpr const char* kFluctuationHeader =
    "kind,eps,t,estimate,se,limit_term,residual,bound_shape";

inline void write_fluctuation_rows(std::ostream& os, const FluctuationReport& rep) {
  for (const auto& r : rep.rows) {
    os << r.kind << ',' << format_double(r.eps) << ',' << format_double(r.t) << ','
       << format_double(r.estimate) << ',' << format_double(r.se) << ','
       << format_double(r.limit_term) << ',' << format_double(r.residual) << ','
       << (std::isnan(r.bound_shape) ? std::string() : format_double(r.bound_shape)) << '\n';
  }
}

}  // namespace fastslow
