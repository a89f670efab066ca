#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <sstream>
#include <vector>

#include "fastslow/parallel.hpp"
#include "fastslow/presets.hpp"
#include "fastslow/simulate.hpp"

using namespace fastslow;

namespace {

struct LinearLimit {
  double slope = 0.0;
  double diffusion = 0.0;
  std::size_t dim() const { return 1; }
  void evaluate(double, ConstVec y, OutVec f, OutVec g) const {
    f[0] = slope * y[0];
    g[0] = diffusion;
  }
};

struct MeanVar {
  double mean = 0.0, var = 0.0, se_mean = 0.0, se_var = 0.0;
};

MeanVar moments(const std::vector<double>& v) {
  MeanVar m;
  const double n = static_cast<double>(v.size());
  for (double x : v) m.mean += x;
  m.mean /= n;
  double m4 = 0.0;
  for (double x : v) {
    m.var += (x - m.mean) * (x - m.mean);
    m4 += std::pow(x - m.mean, 4);
  }
  m.var /= n - 1;
  m4 /= n;
  m.se_mean = std::sqrt(m.var / n);
  m.se_var = std::sqrt((m4 - m.var * m.var) / n);
  return m;
}

CoupledSystem quiet_system() {
  CoupledSystem s;
  s.b = [](ConstVec x, ConstVec, OutVec o) { o[0] = -x[0]; };
  s.sigma = [](ConstVec, ConstVec, OutVec o) { o[0] = std::sqrt(2.0); };
  s.c = zero_fast_field();
  s.F = zero_slow_field();
  s.H = zero_slow_field();
  s.G = zero_slow_field();
  return s;
}

}  // namespace

TEST(MacroGrid, CoversHorizon) {
  const MacroGrid g = make_macro_grid(1.0, 0.3);
  EXPECT_EQ(g.steps, 4u);
  EXPECT_DOUBLE_EQ(g.dt * g.steps, 1.0);
  EXPECT_EQ(make_macro_grid(0.0, 0.1).steps, 0u);
  EXPECT_THROW(make_macro_grid(1.0, 0.0), InvalidArgument);
}

TEST(MicroSteps, FastStepNeverExceedsMacroStep) {
  EXPECT_EQ(micro_steps_per_macro(0.01, 1.0, 10), 1u);
  EXPECT_EQ(micro_steps_per_macro(0.01, 0.1, 10), 10u);
  EXPECT_EQ(micro_steps_per_macro(0.01, 0.1, 3), 3u);
}

TEST(Coupled, ZeroSlowRightSideKeepsInitialState) {
  PathConfig cfg;
  cfg.T = 1.0;
  cfg.dt_slow = 0.01;
  cfg.n_paths = 50;
  const std::vector<double> x0{0.3}, y0{-1.75};
  const auto r = integrate_coupled(quiet_system(), ScaleSchedule(1, 0, 0), 0.2, x0, y0, cfg);
  ASSERT_EQ(r.n_paths, 50u);
  for (std::size_t i = 0; i < r.n_paths; ++i) EXPECT_EQ(r.y(i)[0], -1.75);
}

TEST(Coupled, DeterministicFastDecayMatchesEuler) {
  CoupledSystem s = quiet_system();
  s.sigma = zero_fast_field();
  const double eps = 0.1;
  const int nu = 100;
  PathConfig cfg;
  cfg.T = eps * eps;
  cfg.dt_slow = eps * eps;
  cfg.micro_substeps = nu;
  cfg.n_paths = 1;
  const std::vector<double> x0{1.0}, y0{0.0};
  const auto r = integrate_coupled(s, ScaleSchedule(1, 0, 0), eps, x0, y0, cfg);
  // explicit Euler with h = ε²/ν gives (1 − 1/ν)^ν; its gap to e^{-1} is ≈ e^{-1}/(2ν)
  EXPECT_NEAR(r.x(0)[0], std::pow(1.0 - 1.0 / nu, nu), 1e-12);
  EXPECT_NEAR(r.x(0)[0], std::exp(-1.0), 1.01 * std::exp(-1.0) / (2.0 * nu));
}

TEST(Coupled, FastSecondMomentNearStationary) {
  const Preset p = make_preset("ou_plain");
  PathConfig cfg;
  cfg.T = 1.0;
  cfg.dt_slow = 0.01;
  cfg.n_paths = 10000;
  cfg.seed = 5;
  const auto r = integrate_coupled(p.system, p.schedule, 0.2, p.x0, p.y0, cfg);
  std::vector<double> x2(r.n_paths);
  for (std::size_t i = 0; i < r.n_paths; ++i) x2[i] = r.x(i)[0] * r.x(i)[0];
  const MeanVar m = moments(x2);
  // micro step α²/10 biases the Euler stationary variance by 1/(1 − h/2) ≈ 1.05
  const double euler_var = 1.0 / (1.0 - 0.05);
  EXPECT_NEAR(m.mean, euler_var, 3.0 * m.se_mean);
  EXPECT_NEAR(m.mean, 1.0, 3.0 * m.se_mean + 0.06);
}

TEST(Coupled, FourthMomentBoundedUniformlyInEps) {
  const Preset p = make_preset("ou_r4");
  double lo = 1e300, hi = 0.0;
  for (double eps : {0.4, 0.2, 0.1}) {
    PathConfig cfg;
    cfg.T = 1.0;
    cfg.dt_slow = 0.01;
    cfg.n_paths = 4000;
    cfg.seed = 17;
    const auto r = integrate_coupled(p.system, p.schedule, eps, p.x0, p.y0, cfg);
    const double m4 = terminal_moment(r, 4.0);
    lo = std::min(lo, m4);
    hi = std::max(hi, m4);
  }
  EXPECT_LT(hi / lo, 2.0);
}

TEST(Coupled, BitIdenticalAcrossWorkerCounts) {
  const Preset p = make_preset("ou_r4");
  PathConfig cfg;
  cfg.T = 0.5;
  cfg.dt_slow = 0.01;
  cfg.n_paths = 200;
  cfg.seed = 3;
  cfg.observe_times = {0.25, 0.5};
  const std::vector<PathIntegrand> f{{[](double, ConstVec x, ConstVec y) { return x[0] - y[0]; }}};
  set_worker_count(1);
  const auto a = integrate_coupled(p.system, p.schedule, 0.2, p.x0, p.y0, cfg, f);
  set_worker_count(4);
  const auto b = integrate_coupled(p.system, p.schedule, 0.2, p.x0, p.y0, cfg, f);
  set_worker_count(1);
  EXPECT_EQ(a.terminal_y, b.terminal_y);
  EXPECT_EQ(a.terminal_x, b.terminal_x);
  EXPECT_EQ(a.observed_y, b.observed_y);
  EXPECT_EQ(a.integrals, b.integrals);
}

TEST(Coupled, BlowUpDetected) {
  CoupledSystem s = quiet_system();
  s.b = [](ConstVec x, ConstVec, OutVec o) { o[0] = 5.0 * x[0]; };
  PathConfig cfg;
  cfg.T = 10.0;
  cfg.n_paths = 2;
  const std::vector<double> x0{1.0}, y0{0.0};
  EXPECT_THROW(integrate_coupled(s, ScaleSchedule(1, 0, 0), 0.5, x0, y0, cfg), BlowUp);
}

TEST(Coupled, NonFiniteCoefficientDetected) {
  CoupledSystem s = quiet_system();
  s.F = [](double, ConstVec, ConstVec y, OutVec o) { o[0] = std::log(y[0]); };
  PathConfig cfg;
  cfg.n_paths = 1;
  const std::vector<double> x0{1.0}, y0{-1.0};
  EXPECT_THROW(integrate_coupled(s, ScaleSchedule(1, 0, 0), 0.5, x0, y0, cfg),
               NonFiniteCoefficient);
}

TEST(Coupled, RejectsEpsOutsideUnitInterval) {
  PathConfig cfg;
  const std::vector<double> x0{1.0}, y0{0.0};
  EXPECT_THROW(integrate_coupled(quiet_system(), ScaleSchedule(1, 0, 0), 1.0, x0, y0, cfg),
               InvalidArgument);
}

TEST(Frozen, StationaryMeanIsY) {
  const Preset p = make_preset("ou_frozen");
  FrozenConfig cfg;
  cfg.T = 20.0;
  cfg.dt = 0.01;
  cfg.n_paths = 2000;
  cfg.seed = 8;
  const std::vector<double> y{2.0}, x0{0.0};
  const auto r = integrate_frozen(p.system, y, x0, cfg);
  std::vector<double> xs(r.n_paths);
  for (std::size_t i = 0; i < r.n_paths; ++i) xs[i] = r.x(i)[0];
  const MeanVar m = moments(xs);
  EXPECT_NEAR(m.mean, 2.0, 3.0 * m.se_mean);
}

TEST(Frozen, DeterministicDecay) {
  CoupledSystem s = quiet_system();
  s.sigma = zero_fast_field();
  FrozenConfig cfg;
  cfg.T = 1.0;
  cfg.dt = 1e-3;
  cfg.n_paths = 1;
  const std::vector<double> y{0.0}, x0{1.0};
  const auto r = integrate_frozen(s, y, x0, cfg);
  EXPECT_NEAR(r.x(0)[0], std::exp(-1.0), 1e-3);
}

TEST(Frozen, ZeroHorizonReturnsInitialState) {
  FrozenConfig cfg;
  cfg.T = 0.0;
  cfg.n_paths = 3;
  const std::vector<double> y{0.0}, x0{0.7};
  const auto r = integrate_frozen(quiet_system(), y, x0, cfg);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(r.x(i)[0], 0.7);
}

TEST(Limit, BrownianMoments) {
  LimitConfig cfg;
  cfg.T = 1.0;
  cfg.dt = 0.01;
  cfg.n_paths = 20000;
  cfg.seed = 4;
  const std::vector<double> y0{0.5};
  const auto r = integrate_limit(LinearLimit{0.0, 1.0}, y0, cfg);
  const MeanVar m = moments(r.terminal_y);
  EXPECT_NEAR(m.mean, 0.5, 3.0 * m.se_mean);
  EXPECT_NEAR(m.var, 1.0, 3.0 * m.se_var);
}

TEST(Limit, DeterministicDecay) {
  LimitConfig cfg;
  cfg.dt = 1e-3;
  cfg.n_paths = 1;
  const std::vector<double> y0{1.0};
  const auto r = integrate_limit(LinearLimit{-1.0, 0.0}, y0, cfg);
  EXPECT_NEAR(r.y(0)[0], std::exp(-1.0), 1e-3);
}

TEST(Limit, ZeroFieldsKeepInitialState) {
  LimitConfig cfg;
  cfg.n_paths = 10;
  const std::vector<double> y0{3.25};
  const auto r = integrate_limit(LinearLimit{0.0, 0.0}, y0, cfg);
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(r.y(i)[0], 3.25);
}

TEST(Limit, WeakEulerErrorShrinksWithStep) {
  // dY = −Y dt + dW, E Y_T = y0 e^{−T}; Euler mean is y0 (1 − dt)^{T/dt}
  const std::vector<double> y0{1.0};
  std::vector<double> err;
  for (double dt : {0.2, 0.1, 0.05}) {
    LimitConfig cfg;
    cfg.dt = dt;
    cfg.n_paths = 200000;
    cfg.seed = 12;
    const auto r = integrate_limit(LinearLimit{-1.0, 1.0}, y0, cfg);
    const MeanVar m = moments(r.terminal_y);
    const double e = std::abs(m.mean - std::exp(-1.0));
    EXPECT_LE(e, 0.5 * dt + 3.0 * m.se_mean);
    err.push_back(e);
  }
  EXPECT_LT(err[2], err[0]);
}

TEST(Limit, CommonRandomNumbersWithCoupledSlowNoise) {
  // With c = H = 0 and F = 0, the coupled slow path is Y0 + G·W², identical to
  // the limit path driven by the same lane.
  CoupledSystem s = quiet_system();
  s.G = [](double, ConstVec, ConstVec, OutVec o) { o[0] = 1.0; };
  PathConfig pc;
  pc.T = 1.0;
  pc.dt_slow = 0.05;
  pc.n_paths = 20;
  pc.seed = 77;
  LimitConfig lc;
  lc.T = 1.0;
  lc.dt = 0.05;
  lc.n_paths = 20;
  lc.seed = 77;
  const std::vector<double> x0{0.0}, y0{0.0};
  const auto a = integrate_coupled(s, ScaleSchedule(1, 0, 0), 0.3, x0, y0, pc);
  const auto b = integrate_limit(LinearLimit{0.0, 1.0}, y0, lc);
  for (std::size_t i = 0; i < 20; ++i) EXPECT_NEAR(a.y(i)[0], b.y(i)[0], 1e-12);
}

TEST(Snapshots, CsvHasOneRowPerNode) {
  LimitConfig cfg;
  cfg.T = 0.1;
  cfg.dt = 0.05;
  cfg.n_paths = 2;
  cfg.record_snapshots = true;
  const std::vector<double> y0{0.0};
  const auto r = integrate_limit(LinearLimit{0.0, 1.0}, y0, cfg);
  std::ostringstream os;
  write_snapshot_csv(os, r, false);
  std::istringstream is(os.str());
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "path_id,t,y_1");
  int rows = 0;
  while (std::getline(is, line)) ++rows;
  EXPECT_EQ(rows, 6);
}
