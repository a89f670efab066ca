#pragma once

// Derivatives of μ^y-averages in y without differentiating the measure:
//   ∂_y h̄ = ∫ [∂_y h − (∂_y a : ∇²u + ∂_y b · ∇u)] dμ^y,  ℒ₀u = h − h̄.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "fastslow/corrector.hpp"
#include "fastslow/ergodic.hpp"
#include "fastslow/errors.hpp"
#include "fastslow/model.hpp"

namespace fastslow {

struct TransferConfig {
  InvariantOptions invariant;
  FKBudget fk{10.0, 1e-2, 1, 0, 1e6};
  double delta_x = 0.05;
  double delta_y_rel = 1e-3;
  double t = 0.0;
};

struct TransferResult {
  double value = 0.0;
  double se = 0.0;
  double h_bar = 0.0;
  double h_bar_se = 0.0;
  bool used_hessian = false;
};

/// Directional derivative of h̄ at y along `direction` (normalised here).
/// h is scalar-valued with the SlowField signature.
template <class Fn>
TransferResult transfer_derivative(Fn&& h, const CoupledSystem& sys, ConstVec y,
                                   ConstVec direction, const TransferConfig& cfg) {
  sys.validate();
  const std::size_t d1 = sys.d1;
  const std::size_t d2 = sys.d2;
  require(y.size() == d2 && direction.size() == d2, "y and direction must have dimension d2");
  const double dnorm = detail::norm(direction);
  require(dnorm > 0.0, "direction must be non-zero");
  std::vector<double> e(d2);
  for (std::size_t j = 0; j < d2; ++j) e[j] = direction[j] / dnorm;

  double ymax = 0.0;
  for (double v : y) ymax = std::max(ymax, std::abs(v));
  const double dy = cfg.delta_y_rel * std::max(1.0, ymax);
  std::vector<double> y_up(y.begin(), y.end()), y_dn(y.begin(), y.end());
  for (std::size_t j = 0; j < d2; ++j) {
    y_up[j] += dy * e[j];
    y_dn[j] -= dy * e[j];
  }

  const MeasureEnsemble mu = sample_invariant_measure(sys, y, cfg.invariant);
  const Estimate hbar = average(h, 1, mu, cfg.t);
  const double shift = hbar.mean[0];
  auto source = [&h, shift](double t, ConstVec x, ConstVec yy, OutVec out) {
    h(t, x, yy, out);
    out[0] -= shift;
  };

  const std::size_t n = mu.size();
  std::vector<double> db(n * d1), da(n * d1 * d1);
  bool need_hessian = false;
  {
    std::vector<double> bu(d1), bd(d1), su(d1 * d1), sd(d1 * d1);
    for (std::size_t i = 0; i < n; ++i) {
      const ConstVec x = mu.sample(i);
      sys.b(x, y_up, bu);
      sys.b(x, y_dn, bd);
      sys.sigma(x, y_up, su);
      sys.sigma(x, y_dn, sd);
      const Eigen::MatrixXd au = detail::half_outer(su, d1);
      const Eigen::MatrixXd ad = detail::half_outer(sd, d1);
      for (std::size_t r = 0; r < d1; ++r) {
        db[i * d1 + r] = (bu[r] - bd[r]) / (2.0 * dy);
        for (std::size_t c = 0; c < d1; ++c) {
          const auto ri = static_cast<Eigen::Index>(r);
          const auto ci = static_cast<Eigen::Index>(c);
          const double v = (au(ri, ci) - ad(ri, ci)) / (2.0 * dy);
          da[(i * d1 + r) * d1 + c] = v;
          need_hessian = need_hessian || v != 0.0;
        }
      }
    }
  }

  StencilOptions so;
  so.grad_x = true;
  so.hessian_x = need_hessian;
  so.delta_x = cfg.delta_x;
  const std::vector<StencilValue> u = solve_stencil(sys, source, 1, cfg.t, y,
                                                    ConstVec(mu.samples), cfg.fk, so,
                                                    SolveMode::kPoisson);

  std::vector<double> integrand(n);
  std::vector<double> hu(1), hd(1);
  for (std::size_t i = 0; i < n; ++i) {
    const ConstVec x = mu.sample(i);
    h(cfg.t, x, ConstVec(y_up), OutVec(hu));
    h(cfg.t, x, ConstVec(y_dn), OutVec(hd));
    double v = (hu[0] - hd[0]) / (2.0 * dy);
    for (std::size_t r = 0; r < d1; ++r) {
      v -= db[i * d1 + r] * u[i].grad_x[r];
      if (need_hessian) {
        for (std::size_t c = 0; c < d1; ++c) {
          v -= da[(i * d1 + r) * d1 + c] * u[i].hessian_x[r * d1 + c];
        }
      }
    }
    integrand[i] = v;
  }
  detail::check_finite(integrand, "transfer integrand");
  const Estimate est = batch_means(integrand, 1);
  return {est.mean[0], est.se[0], shift, hbar.se[0], need_hessian};
}

}  // namespace fastslow
