#pragma once

// Coupled fast–slow systems
//
//   dX = α⁻² b(X,Y) dt + β⁻¹ c(X,Y) dt + α⁻¹ σ(X,Y) dW¹
//   dY = F(t,X,Y) dt + γ⁻¹ H(t,X,Y) dt + G(t,X,Y) dW²
//
// with power-law scales α = ε^a, β = ε^b, γ = ε^g, and the classification of
// (a, b, g) into the four interaction regimes.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>
#include <boost/rational.hpp>

#include "fastslow/errors.hpp"
#include "fastslow/random.hpp"

namespace fastslow {

using ConstVec = std::span<const double>;
using OutVec = std::span<double>;

/// (x, y) -> out. Used for b (d1), σ (d1×d1 row-major) and c (d1).
using FastField = std::function<void(ConstVec x, ConstVec y, OutVec out)>;
/// (t, x, y) -> out. Used for F, H (d2), G (d2×d2 row-major) and for generic
/// observables f of any codomain dimension.
using SlowField =
    std::function<void(double t, ConstVec x, ConstVec y, OutVec out)>;

/// Six coefficient callables of a coupled system. Callables must be pure:
/// they are invoked concurrently from worker threads.
struct CoupledSystem {
  std::string name = "custom";
  std::size_t d1 = 1;
  std::size_t d2 = 1;
  FastField b;
  FastField sigma;
  FastField c;
  SlowField F;
  SlowField H;
  SlowField G;
  /// Declares that F, H, G do not depend on t. Lets caches of averaged
  /// coefficients share values across time.
  bool time_homogeneous = true;

  void validate() const {
    require(d1 >= 1 && d2 >= 1, "CoupledSystem dimensions must be positive");
    require(b && sigma && c && F && H && G,
            "CoupledSystem '" + name + "' has an unset coefficient");
  }
};

inline FastField zero_fast_field() {
  return [](ConstVec, ConstVec, OutVec out) {
    std::fill(out.begin(), out.end(), 0.0);
  };
}

inline SlowField zero_slow_field() {
  return [](double, ConstVec, ConstVec, OutVec out) {
    std::fill(out.begin(), out.end(), 0.0);
  };
}

namespace detail {

inline void check_finite(ConstVec values, std::string_view what) {
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw NonFiniteCoefficient(std::string(what) + " returned a non-finite value");
    }
  }
}

inline bool all_zero(ConstVec values) {
  return std::all_of(values.begin(), values.end(),
                     [](double v) { return v == 0.0; });
}

inline double dot(ConstVec a, ConstVec b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm(ConstVec a) { return std::sqrt(dot(a, a)); }

/// Symmetric part of M Mᵀ / 2 for a row-major n×n matrix.
inline Eigen::MatrixXd half_outer(ConstVec m, std::size_t n) {
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                 Eigen::RowMajor>>
      mat(m.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  Eigen::MatrixXd out = 0.5 * mat * mat.transpose();
  return 0.5 * (out + out.transpose());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Scale schedules and regimes

using Exponent = boost::rational<std::int64_t>;

inline double to_double(Exponent q) { return boost::rational_cast<double>(q); }

inline std::string to_string(Exponent q) {
  if (q.denominator() == 1) return std::to_string(q.numerator());
  return std::to_string(q.numerator()) + "/" + std::to_string(q.denominator());
}

/// Parses "p/q", an integer, or a finite decimal ("0.75") into an exact
/// rational.
inline Exponent parse_exponent(std::string_view text) {
  auto fail = [&] {
    return InvalidArgument("cannot parse exponent '" + std::string(text) + "'");
  };
  if (text.empty()) throw fail();
  try {
    const auto slash = text.find('/');
    if (slash != std::string_view::npos) {
      const auto num = std::stoll(std::string(text.substr(0, slash)));
      const auto den = std::stoll(std::string(text.substr(slash + 1)));
      if (den == 0) throw fail();
      return Exponent(num, den);
    }
    const auto dot = text.find('.');
    if (dot == std::string_view::npos) return Exponent(std::stoll(std::string(text)));
    const std::string whole(text.substr(0, dot));
    const std::string frac(text.substr(dot + 1));
    if (frac.size() > 12 ||
        !std::all_of(frac.begin(), frac.end(), [](char ch) { return ch >= '0' && ch <= '9'; })) {
      throw fail();
    }
    std::int64_t scale = 1;
    for (std::size_t i = 0; i < frac.size(); ++i) scale *= 10;
    const bool negative = !whole.empty() && whole.front() == '-';
    const std::int64_t w = whole.empty() || whole == "-" ? 0 : std::stoll(whole);
    const std::int64_t f = frac.empty() ? 0 : std::stoll(frac);
    const std::int64_t magnitude = (w < 0 ? -w : w) * scale + f;
    return Exponent(negative ? -magnitude : magnitude, scale);
  } catch (const InvalidArgument&) {
    throw;
  } catch (const std::exception&) {
    throw fail();
  }
}

/// Best rational for a double that is exactly a short decimal or a ratio of
/// small integers (denominator ≤ 10⁴).
inline Exponent exponent_from_double(double value) {
  require(std::isfinite(value), "exponent must be finite");
  for (std::int64_t den = 1; den <= 10000; ++den) {
    const double num = value * static_cast<double>(den);
    const double rounded = std::round(num);
    if (std::abs(num - rounded) <= 1e-9 * std::max(1.0, std::abs(num))) {
      return Exponent(static_cast<std::int64_t>(rounded), den);
    }
  }
  throw InvalidArgument("exponent " + std::to_string(value) +
                        " is not a rational with denominator <= 10000");
}

/// α_ε = ε^a, β_ε = ε^b, γ_ε = ε^g.
///
/// a must be positive and 2a > b. b and g may be zero, which pins the scale
/// at 1; that is the conventional reduction when c ≡ 0 or H ≡ 0.
class ScaleSchedule {
 public:
  ScaleSchedule(Exponent a, Exponent b, Exponent g) : a_(a), b_(b), g_(g) {
    require(a_ > 0, "exp_alpha must be > 0");
    require(b_ >= 0 && g_ >= 0, "exp_beta and exp_gamma must be >= 0");
    require(2 * a_ > b_, "schedule must satisfy 2*exp_alpha > exp_beta");
  }

  Exponent exp_alpha() const { return a_; }
  Exponent exp_beta() const { return b_; }
  Exponent exp_gamma() const { return g_; }

  double alpha(double eps) const { return std::pow(eps, to_double(a_)); }
  double beta(double eps) const { return std::pow(eps, to_double(b_)); }
  double gamma(double eps) const { return std::pow(eps, to_double(g_)); }

  friend bool operator==(const ScaleSchedule&, const ScaleSchedule&) = default;

 private:
  Exponent a_;
  Exponent b_;
  Exponent g_;
};

enum class Regime { kR1, kR2, kR3, kR4, kUnclassified };

inline std::string_view to_string(Regime r) {
  switch (r) {
    case Regime::kR1: return "R1";
    case Regime::kR2: return "R2";
    case Regime::kR3: return "R3";
    case Regime::kR4: return "R4";
    case Regime::kUnclassified: return "Unclassified";
  }
  return "Unclassified";
}

inline Regime parse_regime(std::string_view text) {
  for (Regime r : {Regime::kR1, Regime::kR2, Regime::kR3, Regime::kR4}) {
    if (text == to_string(r)) return r;
  }
  throw InvalidArgument("unknown regime '" + std::string(text) + "'");
}

/// Which corrector terms survive in the limit equation of a regime.
struct RegimeTerms {
  bool c_grad_x = false;  // c·∇ₓΦ in the drift
  bool h_grad_y = false;  // H·∇_yΦ in the drift
  bool h_phi = false;     // HΦ* in the covariance
};

inline RegimeTerms regime_terms(Regime r) {
  switch (r) {
    case Regime::kR1: return {};
    case Regime::kR2: return {true, false, false};
    case Regime::kR3: return {false, true, true};
    case Regime::kR4: return {true, true, true};
    case Regime::kUnclassified: break;
  }
  throw InvalidArgument("regime must be one of R1..R4");
}

/// Pure function of the exponents, compared as exact rationals.
///   R1: a > g and 2a > b + g      R2: a > g and 2a = b + g
///   R3: a = g and a > b           R4: a = b = g
inline Regime classify_regime(const ScaleSchedule& s) {
  const Exponent a = s.exp_alpha(), b = s.exp_beta(), g = s.exp_gamma();
  if (a > g && 2 * a > b + g) return Regime::kR1;
  if (a > g && 2 * a == b + g) return Regime::kR2;
  if (a == g && a > b) return Regime::kR3;
  if (a == b && b == g) return Regime::kR4;
  return Regime::kUnclassified;
}

// ---------------------------------------------------------------------------
// Sampled assumption checks

struct ValidationOptions {
  double lambda = 2.0;
  std::size_t sample_budget = 1000;
  double radius = 10.0;       // |x| for the recurrence probe
  std::uint64_t seed = 0;
  double eps_min = 0.1;       // smallest scheduled ε, for b + ε c
  double x_box = 5.0;         // x ~ U[-x_box, x_box]^d1 for eigenvalue checks
  double y_box = 5.0;         // y ~ U[-y_box, y_box]^d2
  double t_max = 1.0;         // t ~ U[0, t_max]
};

/// Results of sampling the non-degeneracy and recurrence assumptions. A
/// negative recurrence maximum only makes recurrence plausible; sampling
/// cannot verify a limit at infinity.
struct ValidationReport {
  double a_eig_min = std::numeric_limits<double>::infinity();
  double a_eig_max = -std::numeric_limits<double>::infinity();
  bool a_within_bounds = false;
  double g_eig_min = std::numeric_limits<double>::infinity();
  double g_eig_max = -std::numeric_limits<double>::infinity();
  bool g_within_bounds = false;
  double recurrence_max = -std::numeric_limits<double>::infinity();
  bool recurrence_plausible = false;
  double perturbed_recurrence_max = -std::numeric_limits<double>::infinity();
  bool perturbed_recurrence_plausible = false;
  ValidationOptions options;

  bool all_plausible() const {
    return a_within_bounds && g_within_bounds && recurrence_plausible &&
           perturbed_recurrence_plausible;
  }

  friend bool operator==(const ValidationReport& l, const ValidationReport& r) {
    return l.a_eig_min == r.a_eig_min && l.a_eig_max == r.a_eig_max &&
           l.a_within_bounds == r.a_within_bounds &&
           l.g_eig_min == r.g_eig_min && l.g_eig_max == r.g_eig_max &&
           l.g_within_bounds == r.g_within_bounds &&
           l.recurrence_max == r.recurrence_max &&
           l.recurrence_plausible == r.recurrence_plausible &&
           l.perturbed_recurrence_max == r.perturbed_recurrence_max &&
           l.perturbed_recurrence_plausible == r.perturbed_recurrence_plausible;
  }
};

inline ValidationReport validate_assumptions(const CoupledSystem& sys,
                                             const ValidationOptions& opt) {
  sys.validate();
  require(opt.lambda > 1.0, "lambda must be > 1");
  require(opt.sample_budget >= 1, "sample_budget must be >= 1");
  require(opt.radius > 0.0, "radius must be > 0");

  const std::size_t d1 = sys.d1, d2 = sys.d2;
  std::vector<double> x(d1), y(d2), xr(d1), b(d1), c(d1), sig(d1 * d1),
      g(d2 * d2);
  ValidationReport rep;
  rep.options = opt;

  for (std::size_t i = 0; i < opt.sample_budget; ++i) {
    RandomStream rng(opt.seed, Lane::kValidation, i);
    for (auto& v : x) v = opt.x_box * (2.0 * rng.uniform() - 1.0);
    for (auto& v : y) v = opt.y_box * (2.0 * rng.uniform() - 1.0);
    const double t = opt.t_max * rng.uniform();

    sys.sigma(x, y, sig);
    detail::check_finite(sig, "sigma");
    const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ea(
        detail::half_outer(sig, d1), Eigen::EigenvaluesOnly);
    rep.a_eig_min = std::min(rep.a_eig_min, ea.eigenvalues().minCoeff());
    rep.a_eig_max = std::max(rep.a_eig_max, ea.eigenvalues().maxCoeff());

    sys.G(t, x, y, g);
    detail::check_finite(g, "G");
    const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eg(
        detail::half_outer(g, d2), Eigen::EigenvaluesOnly);
    rep.g_eig_min = std::min(rep.g_eig_min, eg.eigenvalues().minCoeff());
    rep.g_eig_max = std::max(rep.g_eig_max, eg.eigenvalues().maxCoeff());

    // Recurrence probe on the sphere |x| = radius.
    for (auto& v : xr) v = rng.normal();
    const double n = detail::norm(xr);
    for (auto& v : xr) v *= opt.radius / (n > 0.0 ? n : 1.0);
    if (n == 0.0) xr[0] = opt.radius;
    sys.b(xr, y, b);
    detail::check_finite(b, "b");
    sys.c(xr, y, c);
    detail::check_finite(c, "c");
    const double inner = detail::dot(xr, b);
    rep.recurrence_max = std::max(rep.recurrence_max, inner);
    rep.perturbed_recurrence_max = std::max(
        rep.perturbed_recurrence_max, inner + opt.eps_min * detail::dot(xr, c));
  }

  const double lo = 1.0 / opt.lambda, hi = opt.lambda;
  rep.a_within_bounds = rep.a_eig_min >= lo && rep.a_eig_max <= hi;
  rep.g_within_bounds = rep.g_eig_min >= lo && rep.g_eig_max <= hi;
  rep.recurrence_plausible = rep.recurrence_max < 0.0;
  rep.perturbed_recurrence_plausible = rep.perturbed_recurrence_max < 0.0;
  return rep;
}

}  // namespace fastslow
