#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "fastslow/corrector.hpp"
#include "fastslow/parallel.hpp"
#include "fastslow/presets.hpp"

using namespace fastslow;

namespace {

// Frozen OU with b = −x, σ = √2: μ = N(0, 1), ℒ₀ = ∂² − x∂.
CoupledSystem ou() { return make_preset("ou_plain").system; }

const auto kX = [](double, ConstVec x, ConstVec, OutVec o) { o[0] = x[0]; };
const auto kX2m1 = [](double, ConstVec x, ConstVec, OutVec o) { o[0] = x[0] * x[0] - 1.0; };

CorrectorQuery query(std::vector<double> points, std::size_t n_paths, std::uint64_t seed) {
  CorrectorQuery q;
  q.y = {0.0};
  q.points = std::move(points);
  q.T_max = 10.0;
  q.dt = 0.01;
  q.n_paths = n_paths;
  q.seed = seed;
  return q;
}

InvariantOptions mu_options(std::size_t n, std::uint64_t seed) {
  InvariantOptions o;
  o.n_samples = n;
  o.thinning = 50;
  o.dt = 1e-2;
  o.seed = seed;
  return o;
}

}  // namespace

TEST(TensorGrid, RowMajorLastAxisFastest) {
  const TensorGrid g = make_tensor_grid({0.0, 10.0}, {1.0, 12.0}, {2, 3});
  EXPECT_EQ(g.points, (std::vector<double>{0, 10, 0, 11, 0, 12, 1, 10, 1, 11, 1, 12}));
  EXPECT_EQ(g.spacing, (std::vector<double>{1.0, 1.0}));
  EXPECT_THROW(make_tensor_grid({0.0}, {0.0}, {3}), InvalidArgument);
}

TEST(Solve, LinearSourceMatchesSymbolicOracle) {
  const CorrectorField f = solve_poisson_fk(ou(), kX, 1, query({-1.0, 0.0, 1.0}, 40000, 1));
  for (std::size_t p = 0; p < 3; ++p) {
    const double x = f.point(p)[0];
    // corrector mode: Φ = x; left-point rule over [0, 10] adds O(dt) bias
    EXPECT_NEAR(f.value(p, 0), x, 0.02 + 4.0 * f.se[p]) << x;
  }
}

TEST(Solve, QuadraticSourcePoissonMode) {
  SolveOptions opt;
  opt.mode = SolveMode::kPoisson;
  const CorrectorField f = solve_poisson_fk(ou(), kX2m1, 1, query({0.0, 1.0}, 40000, 2), opt);
  EXPECT_NEAR(f.value(0, 0), 0.5, 0.02 + 4.0 * f.se[0]);
  EXPECT_NEAR(f.value(1, 0), 0.0, 0.02 + 4.0 * f.se[1]);
}

TEST(Solve, ZeroSourceIsExactlyZero) {
  const CorrectorField f =
      solve_poisson_fk(ou(), make_observable("zero"), 1, query({-3.0, 0.5}, 100, 3));
  for (double v : f.values) EXPECT_EQ(v, 0.0);
  for (double v : f.se) EXPECT_EQ(v, 0.0);
}

TEST(Solve, RefusesNonCenteredSource) {
  SolveOptions opt;
  opt.centering_z = 7.5;
  EXPECT_THROW(solve_poisson_fk(ou(), kX, 1, query({0.0}, 10, 0), opt), NotCentered);
}

TEST(Solve, RejectsEmptyQuery) {
  EXPECT_THROW(solve_poisson_fk(ou(), kX, 1, query({}, 10, 0)), InvalidArgument);
  CorrectorQuery q = query({0.0}, 10, 0);
  q.T_max = 0.0;
  EXPECT_THROW(solve_poisson_fk(ou(), kX, 1, q), InvalidArgument);
}

TEST(Solve, LinearInSourceUnderSharedSeed) {
  const auto q = query({-0.5, 0.25, 2.0}, 500, 4);
  const auto g = [](double, ConstVec x, ConstVec, OutVec o) { o[0] = std::sin(x[0]); };
  const CorrectorField fx = solve_poisson_fk(ou(), kX, 1, q);
  const CorrectorField fg = solve_poisson_fk(ou(), g, 1, q);
  const double a = 1.7, b = -0.3;
  const CorrectorField combo = solve_poisson_fk(
      ou(), [&](double, ConstVec x, ConstVec, OutVec o) { o[0] = a * x[0] + b * std::sin(x[0]); },
      1, q);
  for (std::size_t p = 0; p < 3; ++p) {
    const double expect = a * fx.value(p, 0) + b * fg.value(p, 0);
    EXPECT_NEAR(combo.value(p, 0), expect, 1e-12 * (std::abs(a * fx.value(p, 0)) + 1.0));
  }
  // dyadic scaling commutes exactly with every rounding
  const CorrectorField half = solve_poisson_fk(
      ou(), [](double, ConstVec x, ConstVec, OutVec o) { o[0] = 0.5 * x[0]; }, 1, q);
  for (std::size_t p = 0; p < 3; ++p) EXPECT_EQ(half.value(p, 0), 0.5 * fx.value(p, 0));
}

TEST(Solve, VectorSourceMatchesComponentSolves) {
  const auto q = query({0.3, -1.2}, 300, 5);
  const CorrectorField both = solve_poisson_fk(
      ou(), [](double, ConstVec x, ConstVec, OutVec o) { o[0] = x[0]; o[1] = x[0] * x[0] - 1.0; },
      2, q);
  const CorrectorField a = solve_poisson_fk(ou(), kX, 1, q);
  const CorrectorField b = solve_poisson_fk(ou(), kX2m1, 1, q);
  for (std::size_t p = 0; p < 2; ++p) {
    EXPECT_EQ(both.value(p, 0), a.value(p, 0));
    EXPECT_EQ(both.value(p, 1), b.value(p, 0));
  }
}

TEST(Solve, BitIdenticalAcrossWorkerCounts) {
  const auto q = query({-1.0, 0.0, 1.0}, 333, 6);
  set_worker_count(1);
  const CorrectorField a = solve_poisson_fk(ou(), kX2m1, 1, q);
  set_worker_count(4);
  const CorrectorField b = solve_poisson_fk(ou(), kX2m1, 1, q);
  set_worker_count(1);
  EXPECT_EQ(a.values, b.values);
  EXPECT_EQ(a.se, b.se);
  EXPECT_EQ(a.tail_bound, b.tail_bound);
}

TEST(Solve, DoublingHorizonStaysInsideTailBound) {
  auto q = query({-1.0, 0.0, 1.5}, 5000, 7);
  const CorrectorField a = solve_poisson_fk(ou(), kX2m1, 1, q);
  q.T_max = 20.0;
  const CorrectorField b = solve_poisson_fk(ou(), kX2m1, 1, q);
  for (std::size_t p = 0; p < 3; ++p) {
    EXPECT_LE(std::abs(b.value(p, 0) - a.value(p, 0)), a.tail_bound[p]) << p;
  }
}

TEST(Solve, CenteredRepresentative) {
  const std::vector<double> y{0.0};
  const MeasureEnsemble mu = sample_invariant_measure(ou(), y, mu_options(400, 8));
  CorrectorQuery q = query(mu.samples, 400, 9);
  const CorrectorField f = solve_poisson_fk(ou(), kX2m1, 1, q);
  const Estimate e = batch_means(f.values, 1);
  double mc = 0.0;
  for (double s : f.se) mc += s;
  mc /= static_cast<double>(f.se.size());
  EXPECT_NEAR(e.mean[0], 0.0, 3.0 * std::hypot(e.se[0], mc));
}

TEST(Solve, DiscreteResidualReproducesSource) {
  CorrectorQuery q = query({}, 20000, 10);
  q.set_grid(make_tensor_grid({-2.0}, {2.0}, {9}));
  const CorrectorField f = solve_poisson_fk(ou(), kX2m1, 1, q);
  const double h = q.grid_spacing[0];
  for (std::size_t p = 1; p + 1 < f.size(); ++p) {
    const double x = f.point(p)[0];
    const double up = f.value(p + 1, 0), mid = f.value(p, 0), dn = f.value(p - 1, 0);
    // a = 1, b = −x
    const double op = (up - 2.0 * mid + dn) / (h * h) - x * (up - dn) / (2.0 * h);
    const double se = std::sqrt(std::pow(f.se[p + 1], 2) + 4.0 * std::pow(f.se[p], 2) +
                                std::pow(f.se[p - 1], 2)) / (h * h);
    EXPECT_NEAR(op, -(x * x - 1.0), std::max(0.1, 5.0 * se)) << x;
  }
}

TEST(Gradients, LinearFieldHasUnitSlope) {
  CorrectorQuery q = query({}, 20000, 11);
  q.set_grid(make_tensor_grid({-2.0}, {2.0}, {9}));
  const CorrectorField f = gradients(ou(), kX, 1, q);
  EXPECT_FALSE(f.has_grad_x(0));
  EXPECT_FALSE(f.has_grad_x(8));
  for (std::size_t p = 1; p < 8; ++p) {
    ASSERT_TRUE(f.has_grad_x(p));
    EXPECT_NEAR(f.grad_x[p], 1.0, 0.05);
  }
  // nothing depends on y: the shared-seed re-solves coincide
  for (double g : f.grad_y) EXPECT_NEAR(g, 0.0, 1e-9);
}

TEST(Gradients, QuadraticFieldSlopeAtOne) {
  CorrectorQuery q = query({}, 20000, 12);
  q.set_grid(make_tensor_grid({-2.0}, {2.0}, {17}));
  SolveOptions opt;
  opt.mode = SolveMode::kPoisson;
  CorrectorField f = solve_poisson_fk(ou(), kX2m1, 1, q, opt);
  attach_grad_x(f);
  EXPECT_EQ(f.point(12)[0], 1.0);
  EXPECT_NEAR(f.grad_x[12], -1.0, 0.05);
}

TEST(Gradients, CoarseGridRejected) {
  CorrectorQuery q = query({}, 2000, 13);
  q.set_grid(make_tensor_grid({-2.0}, {2.0}, {3}));
  CorrectorField f = solve_poisson_fk(ou(), kX2m1, 1, q);
  EXPECT_THROW(attach_grad_x(f), GridTooCoarse);
}

TEST(Gradients, YDerivativeOfShiftedOu) {
  // b = −(x − y): Φ for f = x − y is x − y, so ∂_yΦ = −1 and ∂_xΦ = 1
  const CoupledSystem sys = make_preset("ou_frozen").system;
  CorrectorQuery q = query({}, 4000, 14);
  q.y = {0.5};
  q.set_grid(make_tensor_grid({-0.5}, {1.5}, {5}));
  const CorrectorField f = gradients(sys, make_observable("x_minus_y"), 1, q);
  for (std::size_t p = 1; p < 4; ++p) {
    EXPECT_NEAR(f.grad_x[p], 1.0, 0.05);
    EXPECT_NEAR(f.grad_y[p], -1.0, 0.05);
  }
}

TEST(Stencil, ValueSlopeAndCurvature) {
  FKBudget bud;
  bud.T_max = 10.0;
  bud.dt = 0.01;
  bud.n_paths = 20000;
  bud.seed = 15;
  StencilOptions so;
  so.grad_x = true;
  so.hessian_x = true;
  const std::vector<double> y{0.0}, centers{0.5};
  const auto v = solve_stencil(ou(), kX2m1, 1, 0.0, y, centers, bud, so, SolveMode::kPoisson);
  ASSERT_EQ(v.size(), 1u);
  // u = −(x² − 1)/2: u(0.5) = 0.375, u' = −0.5, u'' = −1
  EXPECT_NEAR(v[0].value[0], 0.375, 0.06);
  EXPECT_NEAR(v[0].grad_x[0], -0.5, 0.05);
  EXPECT_NEAR(v[0].hessian_x[0], -1.0, 0.1);
}

TEST(HPhi, ZeroDriftGivesZeroMatrix) {
  const std::vector<double> y{0.0};
  const MeasureEnsemble mu = sample_invariant_measure(ou(), y, mu_options(100, 16));
  const std::vector<double> phi(mu.samples.begin(), mu.samples.end());
  const HPhiResult r = outer_product_HPhi(ou(), phi, mu, 0.0);
  EXPECT_EQ(r.symmetric(0, 0), 0.0);
  EXPECT_EQ(r.antisymmetric_norm, 0.0);
}

TEST(HPhi, LinearDriftSecondMoment) {
  CoupledSystem sys = ou();
  sys.H = [](double, ConstVec x, ConstVec, OutVec o) { o[0] = x[0]; };
  const std::vector<double> y{0.0};
  const MeasureEnsemble mu = sample_invariant_measure(sys, y, mu_options(2000, 17));
  const CorrectorField f = solve_poisson_fk(sys, sys.H, 1, query(mu.samples, 100, 18));
  const HPhiResult r = outer_product_HPhi(sys, f, mu, 0.0);
  EXPECT_NEAR(r.symmetric(0, 0), 1.0, 0.1);
  EXPECT_NEAR(r.symmetric(0, 0), 1.0, 4.0 * r.se(0, 0) + 0.02);
}

TEST(HPhi, QuadraticDriftFourthMoment) {
  CoupledSystem sys = ou();
  sys.H = [](double, ConstVec x, ConstVec, OutVec o) { o[0] = x[0] * x[0] - 1.0; };
  const std::vector<double> y{0.0};
  const MeasureEnsemble mu = sample_invariant_measure(sys, y, mu_options(20000, 19));
  // the source decays at rate 2, so a shorter horizon and coarser step suffice
  CorrectorQuery q = query(mu.samples, 50, 20);
  q.T_max = 6.0;
  q.dt = 0.02;
  const CorrectorField f = solve_poisson_fk(sys, sys.H, 1, q);
  const HPhiResult r = outer_product_HPhi(sys, f, mu, 0.0);
  EXPECT_NEAR(r.symmetric(0, 0), 1.0, 0.1);
  EXPECT_NEAR(r.symmetric(0, 0), 1.0, 4.0 * r.se(0, 0) + 0.03);
}

TEST(HPhi, RejectsMismatchedField) {
  const std::vector<double> y{0.0};
  const MeasureEnsemble mu = sample_invariant_measure(ou(), y, mu_options(10, 21));
  const CorrectorField f = solve_poisson_fk(ou(), kX, 1, query({0.0}, 10, 0));
  EXPECT_THROW(outer_product_HPhi(ou(), f, mu, 0.0), InvalidArgument);
}
