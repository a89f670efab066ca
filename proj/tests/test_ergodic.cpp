#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <vector>

#include "fastslow/ergodic.hpp"
#include "fastslow/presets.hpp"
#include "fastslow/transfer.hpp"

using namespace fastslow;

namespace {

InvariantOptions quick(std::uint64_t seed, std::size_t n = 20000) {
  InvariantOptions o;
  o.burn_in = 10.0;
  o.n_samples = n;
  o.thinning = 20;
  o.dt = 5e-3;
  o.seed = seed;
  return o;
}

const auto kX = [](double, ConstVec x, ConstVec, OutVec o) { o[0] = x[0]; };
const auto kX2 = [](double, ConstVec x, ConstVec, OutVec o) { o[0] = x[0] * x[0]; };

}  // namespace

TEST(BatchMeans, HandComputedSeries) {
  // values 0..99, 50 batches of two: batch means 0.5, 2.5, ..., 98.5
  std::vector<double> v(100);
  std::iota(v.begin(), v.end(), 0.0);
  const Estimate e = batch_means(v, 1, 50);
  EXPECT_DOUBLE_EQ(e.mean[0], 49.5);
  double var = 0.0;
  for (int b = 0; b < 50; ++b) var += std::pow(2.0 * b + 0.5 - 49.5, 2);
  var /= 49.0;
  EXPECT_NEAR(e.se[0], std::sqrt(var / 50.0), 1e-12);
}

TEST(BatchMeans, AutomaticBatchCountIsRootN) {
  // 100 values: ten batches of ten, batch means 4.5, 14.5, ..., 94.5
  std::vector<double> v(100);
  std::iota(v.begin(), v.end(), 0.0);
  const Estimate e = batch_means(v, 1);
  double var = 0.0;
  for (int b = 0; b < 10; ++b) var += std::pow(10.0 * b + 4.5 - 49.5, 2);
  var /= 9.0;
  EXPECT_NEAR(e.se[0], std::sqrt(var / 10.0), 1e-12);
  // large n is capped at 50 batches
  std::vector<double> w(10000);
  std::iota(w.begin(), w.end(), 0.0);
  EXPECT_NEAR(batch_means(w, 1).se[0], batch_means(w, 1, 50).se[0], 0.0);
  EXPECT_EQ(batch_means({1.0, 3.0}, 1).se[0], 1.0);
}

TEST(BatchMeans, SingleValueHasNoStandardError) {
  const Estimate e = batch_means({3.0}, 1);
  EXPECT_EQ(e.mean[0], 3.0);
  EXPECT_TRUE(std::isnan(e.se[0]));
}

TEST(Invariant, StandardOuMeanAndVariance) {
  const Preset p = make_preset("ou_frozen");
  const std::vector<double> y{0.0};
  const MeasureEnsemble mu = sample_invariant_measure(p.system, y, quick(1));
  ASSERT_EQ(mu.size(), 20000u);
  const Estimate m = average(kX, 1, mu, 0.0);
  EXPECT_NEAR(m.mean[0], 0.0, 3.0 * m.se[0]);
  const double c = m.mean[0];
  const Estimate v = average(
      [c](double, ConstVec x, ConstVec, OutVec o) { o[0] = (x[0] - c) * (x[0] - c); }, 1, mu, 0.0);
  // Euler at dt has stationary variance 1/(1 − dt/2)
  EXPECT_NEAR(v.mean[0], 1.0, 3.0 * v.se[0] + 0.003);
  EXPECT_GT(mu.effective_sample_size, 1000.0);
  EXPECT_EQ(mu.burn_in, 10.0);
  EXPECT_EQ(mu.thinning, 20u);
}

TEST(Invariant, ShiftEquivariance) {
  const Preset p = make_preset("ou_frozen");
  const std::vector<double> ya{2.0}, yb{-1.0};
  const Estimate a = average(kX, 1, sample_invariant_measure(p.system, ya, quick(2)), 0.0);
  const Estimate b = average(kX, 1, sample_invariant_measure(p.system, yb, quick(3)), 0.0);
  EXPECT_NEAR(a.mean[0], 2.0, 3.0 * a.se[0]);
  EXPECT_NEAR(a.mean[0] - b.mean[0], 3.0, 3.0 * std::hypot(a.se[0], b.se[0]));
}

TEST(Invariant, SecondMomentOracle) {
  const Preset p = make_preset("ou_frozen");
  const std::vector<double> y{0.0};
  const Estimate m = average(kX2, 1, sample_invariant_measure(p.system, y, quick(4)), 0.0);
  EXPECT_NEAR(m.mean[0], 1.0, 3.0 * m.se[0] + 0.003);
}

TEST(Invariant, SingleSample) {
  const Preset p = make_preset("ou_frozen");
  InvariantOptions o = quick(5, 1);
  o.burn_in = 50.0;
  const std::vector<double> y{0.0};
  const MeasureEnsemble mu = sample_invariant_measure(p.system, y, o);
  ASSERT_EQ(mu.size(), 1u);
  EXPECT_TRUE(std::isfinite(mu.sample(0)[0]));
}

TEST(Invariant, DeterministicUnderSeed) {
  const Preset p = make_preset("ou_frozen");
  const std::vector<double> y{0.5};
  EXPECT_EQ(sample_invariant_measure(p.system, y, quick(6, 500)).samples,
            sample_invariant_measure(p.system, y, quick(6, 500)).samples);
  EXPECT_NE(sample_invariant_measure(p.system, y, quick(6, 500)).samples,
            sample_invariant_measure(p.system, y, quick(7, 500)).samples);
}

TEST(Invariant, RejectsBadOptions) {
  const Preset p = make_preset("ou_frozen");
  const std::vector<double> y{0.0};
  InvariantOptions o = quick(0, 10);
  o.burn_in = 0.0;
  EXPECT_THROW(sample_invariant_measure(p.system, y, o), InvalidArgument);
  o = quick(0, 10);
  o.dt = 0.0;
  EXPECT_THROW(sample_invariant_measure(p.system, y, o), InvalidArgument);
}

TEST(Invariant, UnstableDriftBlowsUp) {
  CoupledSystem s = make_preset("ou_frozen").system;
  s.b = [](ConstVec x, ConstVec, OutVec o) { o[0] = 3.0 * x[0]; };
  const std::vector<double> y{0.0};
  EXPECT_THROW(sample_invariant_measure(s, y, quick(0, 10)), BlowUp);
}

TEST(Average, ConstantIsExact) {
  const Preset p = make_preset("ou_frozen");
  const std::vector<double> y{0.0};
  const MeasureEnsemble mu = sample_invariant_measure(p.system, y, quick(8, 1000));
  const Estimate e = average([](double, ConstVec, ConstVec, OutVec o) { o[0] = 1.0; }, 1, mu, 0.0);
  EXPECT_EQ(e.mean[0], 1.0);
  EXPECT_EQ(e.se[0], 0.0);
}

TEST(Average, LinearInIntegrand) {
  const Preset p = make_preset("ou_frozen");
  const std::vector<double> y{0.3};
  const MeasureEnsemble mu = sample_invariant_measure(p.system, y, quick(9, 2048));
  const auto f = [](double, ConstVec x, ConstVec, OutVec o) { o[0] = std::sin(x[0]); };
  const auto g = [](double, ConstVec x, ConstVec, OutVec o) { o[0] = x[0] * x[0] * x[0]; };
  const double ef = average(f, 1, mu, 0.0).mean[0];
  const double eg = average(g, 1, mu, 0.0).mean[0];
  const double a = 0.37, b = -2.9;
  const double combo = average(
      [&](double t, ConstVec x, ConstVec yy, OutVec o) {
        double fv = 0, gv = 0;
        f(t, x, yy, OutVec(&fv, 1));
        g(t, x, yy, OutVec(&gv, 1));
        o[0] = a * fv + b * gv;
      },
      1, mu, 0.0).mean[0];
  EXPECT_NEAR(combo, a * ef + b * eg, 1e-12 * (std::abs(a * ef) + std::abs(b * eg)));

  // dyadic weights, dyadic values and a power-of-two sample count are exact
  const auto s = [](double, ConstVec x, ConstVec, OutVec o) { o[0] = x[0] > 0 ? 1.0 : 0.0; };
  const auto r = [](double, ConstVec x, ConstVec, OutVec o) { o[0] = x[0] > 1 ? 2.0 : 0.5; };
  const double es = average(s, 1, mu, 0.0).mean[0];
  const double er = average(r, 1, mu, 0.0).mean[0];
  const double exact = average(
      [](double, ConstVec x, ConstVec, OutVec o) {
        o[0] = 0.5 * (x[0] > 0 ? 1.0 : 0.0) + 0.25 * (x[0] > 1 ? 2.0 : 0.5);
      },
      1, mu, 0.0).mean[0];
  EXPECT_EQ(exact, 0.5 * es + 0.25 * er);
}

TEST(Average, NonFiniteIntegrandThrows) {
  const Preset p = make_preset("ou_frozen");
  const std::vector<double> y{0.0};
  const MeasureEnsemble mu = sample_invariant_measure(p.system, y, quick(10, 100));
  EXPECT_THROW(average([](double, ConstVec x, ConstVec, OutVec o) { o[0] = std::log(x[0]); },
                       1, mu, 0.0),
               NonFiniteCoefficient);
}

TEST(Centering, Examples) {
  const Preset p = make_preset("ou_frozen");
  const std::vector<double> y{0.0};
  const MeasureEnsemble mu = sample_invariant_measure(p.system, y, quick(11));
  EXPECT_TRUE(centering_residual(make_observable("x"), 1, mu, 0.0).plausible());
  const CenteringResult off = centering_residual(make_observable("x_plus_5"), 1, mu, 0.0);
  EXPECT_GT(off.max_z, 100.0);
  EXPECT_FALSE(off.plausible());
  EXPECT_EQ(centering_residual(make_observable("zero"), 1, mu, 0.0).max_z, 0.0);
}

TEST(Centering, AutoCenteredFunctionHasNegligibleResidual) {
  const Preset p = make_preset("ou_frozen");
  const std::vector<double> y{1.0};
  const MeasureEnsemble mu = sample_invariant_measure(p.system, y, quick(12, 5000));
  const SlowField h = auto_center(make_observable("x_plus_5"), 1, mu, 0.0);
  EXPECT_LT(centering_residual(h, 1, mu, 0.0).max_z, 1e-10);
}

TEST(Transfer, VanishesWithoutYDependence) {
  const Preset p = make_preset("ou_plain");
  TransferConfig cfg;
  cfg.invariant = quick(13, 4000);
  const std::vector<double> y{0.7}, e{1.0};
  const TransferResult r = transfer_derivative(kX2, p.system, y, e, cfg);
  EXPECT_NEAR(r.value, 0.0, 3.0 * r.se + 1e-12);
  EXPECT_FALSE(r.used_hessian);
}

TEST(Transfer, LinearObservableAgainstFiniteDifference) {
  const Preset p = make_preset("ou_frozen");
  TransferConfig cfg;
  cfg.invariant = quick(14, 10000);
  const std::vector<double> y{0.5}, e{1.0};
  const TransferResult r = transfer_derivative(kX, p.system, y, e, cfg);
  EXPECT_NEAR(r.value, 1.0, 0.1);

  // independent oracle: two unrelated invariant runs at y ± δ
  const double delta = 0.5;
  const std::vector<double> up{y[0] + delta}, dn{y[0] - delta};
  const Estimate hu = average(kX, 1, sample_invariant_measure(p.system, up, quick(1001)), 0.0);
  const Estimate hd = average(kX, 1, sample_invariant_measure(p.system, dn, quick(1002)), 0.0);
  const double fd = (hu.mean[0] - hd.mean[0]) / (2.0 * delta);
  const double fd_se = std::hypot(hu.se[0], hd.se[0]) / (2.0 * delta);
  EXPECT_NEAR(r.value, fd, std::max(0.1, 5.0 * std::hypot(r.se, fd_se)));
}
