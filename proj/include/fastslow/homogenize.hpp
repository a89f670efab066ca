#pragma once

// Regime-dependent averaged coefficients and the limit SDE built from them.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <future>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "fastslow/corrector.hpp"
#include "fastslow/ergodic.hpp"
#include "fastslow/errors.hpp"
#include "fastslow/model.hpp"
#include "fastslow/random.hpp"

namespace fastslow {

struct PSDRoot {
  Eigen::MatrixXd root;     // symmetric PSD S with S·S = clamped
  Eigen::MatrixXd clamped;  // input with negative eigenvalues set to 0
  double min_eigenvalue = 0.0;
};

/// Symmetric square root by eigendecomposition. Eigenvalues in
/// [−tol, 0) are clamped; anything lower throws PSDFailure. A negative
/// tol selects 1e-6·|trace|.
inline PSDRoot psd_decompose(const Eigen::MatrixXd& m, double tol = -1.0) {
  require(m.rows() == m.cols() && m.rows() >= 1, "matrix must be square and non-empty");
  if (!m.allFinite()) throw NonFiniteCoefficient("matrix has non-finite entries");
  const double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
  require((m - m.transpose()).cwiseAbs().maxCoeff() <= 1e-9 * scale, "matrix must be symmetric");
  if (tol < 0.0) tol = 1e-6 * std::abs(m.trace());
  const Eigen::MatrixXd sym = 0.5 * (m + m.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym);
  if (es.info() != Eigen::Success) throw PSDFailure("eigendecomposition did not converge");
  Eigen::VectorXd ev = es.eigenvalues();
  PSDRoot out;
  out.min_eigenvalue = ev.minCoeff();
  if (out.min_eigenvalue < -tol) {
    throw PSDFailure("eigenvalue " + std::to_string(out.min_eigenvalue) + " below -" +
                     std::to_string(tol));
  }
  ev = ev.cwiseMax(0.0);
  const Eigen::MatrixXd& v = es.eigenvectors();
  out.clamped = v * ev.asDiagonal() * v.transpose();
  out.clamped = 0.5 * (out.clamped + out.clamped.transpose());
  out.root = v * ev.cwiseSqrt().asDiagonal() * v.transpose();
  out.root = 0.5 * (out.root + out.root.transpose());
  return out;
}

inline Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m, double tol = -1.0) {
  return psd_decompose(m, tol).root;
}

/// Weight of sym(∫HΦ*) in the averaged covariance. kGenerator matches the
/// generator of the coupled slow dynamics; kDisplayed uses weight one.
enum class HPhiWeight { kGenerator = 2, kDisplayed = 1 };

inline double weight_value(HPhiWeight w) { return static_cast<int>(w); }

struct Budgets {
  InvariantOptions invariant{10.0, 1000, 50, 1e-2, 0, 1e6};
  FKBudget fk{5.0, 1e-2, 1, 0, 1e6};
  double delta_x = 0.05;
  double delta_y_rel = 1e-3;
  HPhiWeight weight = HPhiWeight::kGenerator;
  double psd_rel_tol = 1e-6;
  double z_threshold = 3.0;
};

struct AveragedCoefficients {
  Regime regime = Regime::kR1;
  std::vector<double> drift;     // F̂
  std::vector<double> drift_se;
  Eigen::MatrixXd covariance;    // ∫GG* + w·sym(∫HΦ*), before clamping
  Eigen::MatrixXd covariance_se;
  Eigen::MatrixXd diffusion;     // Ĝ = psd_sqrt(covariance)
  double hphi_antisymmetric_norm = 0.0;
  double min_eigenvalue = 0.0;
  double centering_z = 0.0;
  std::uint64_t seed = 0;
  std::size_t n_samples = 0;
  bool used_corrector = false;
};

namespace detail {

enum : std::int64_t { kStageInvariant = 0, kStageCorrector = 1 };

/// Corrector contributions averaged over μ^y for source f (k components):
/// per sample, (∇ₓΦ^f)c and/or (∇_yΦ^f)H, plus Φ^f itself when wanted.
struct CorrectorTerms {
  std::vector<double> drift;  // n × k
  std::vector<double> phi;    // n × k (empty unless requested)
  bool solved = false;
};

template <class Fn>
CorrectorTerms corrector_terms(const CoupledSystem& sys, Fn&& f, std::size_t k,
                               const RegimeTerms& terms, bool want_phi, double t,
                               ConstVec y, const MeasureEnsemble& mu, const Budgets& bud,
                               std::uint64_t seed) {
  const std::size_t n = mu.size();
  const std::size_t d1 = sys.d1;
  const std::size_t d2 = sys.d2;
  CorrectorTerms out;
  out.drift.assign(n * k, 0.0);

  std::vector<double> cv(n * d1), hv(n * d2), fv(k);
  bool c_zero = true, h_zero = true, f_zero = true;
  for (std::size_t i = 0; i < n; ++i) {
    sys.c(mu.sample(i), y, OutVec(cv.data() + i * d1, d1));
    sys.H(t, mu.sample(i), y, OutVec(hv.data() + i * d2, d2));
    f(t, mu.sample(i), y, OutVec(fv));
    c_zero = c_zero && all_zero(ConstVec(cv.data() + i * d1, d1));
    h_zero = h_zero && all_zero(ConstVec(hv.data() + i * d2, d2));
    f_zero = f_zero && all_zero(fv);
  }
  check_finite(cv, "c");
  check_finite(hv, "H");

  const bool need_gx = terms.c_grad_x && !c_zero;
  const bool need_gy = terms.h_grad_y && !h_zero;
  // A source vanishing on every sample contributes exactly zero.
  if (f_zero || (!need_gx && !need_gy && !want_phi)) {
    if (want_phi) out.phi.assign(n * k, 0.0);
    return out;
  }

  StencilOptions so;
  so.grad_x = need_gx;
  so.grad_y = need_gy;
  so.delta_x = bud.delta_x;
  so.delta_y_rel = bud.delta_y_rel;
  FKBudget fk = bud.fk;
  fk.seed = derive_seed(seed, {kStageCorrector});
  const auto sv = solve_stencil(sys, f, k, t, y, ConstVec(mu.samples), fk, so,
                                SolveMode::kCorrector);
  out.solved = true;
  if (want_phi) out.phi.resize(n * k);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t r = 0; r < k; ++r) {
      double v = 0.0;
      if (need_gx) {
        for (std::size_t j = 0; j < d1; ++j) v += sv[i].grad_x[r * d1 + j] * cv[i * d1 + j];
      }
      if (need_gy) {
        for (std::size_t j = 0; j < d2; ++j) v += sv[i].grad_y[r * d2 + j] * hv[i * d2 + j];
      }
      out.drift[i * k + r] = v;
      if (want_phi) out.phi[i * k + r] = sv[i].value[r];
    }
  }
  return out;
}

inline MeasureEnsemble cell_measure(const CoupledSystem& sys, ConstVec y, const Budgets& bud,
                                    std::uint64_t seed) {
  InvariantOptions inv = bud.invariant;
  inv.seed = derive_seed(seed, {kStageInvariant});
  return sample_invariant_measure(sys, y, inv);
}

inline Eigen::MatrixXd to_matrix(const std::vector<double>& v, std::size_t d) {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
  for (std::size_t r = 0; r < d; ++r) {
    for (std::size_t c = 0; c < d; ++c) {
      m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = v[r * d + c];
    }
  }
  return m;
}

}  // namespace detail

/// F̂_k and Ĝ_k at (t, y). The invariant ensemble depends only on `seed`,
/// so all regimes see the same samples and vanishing corrections leave the
/// result bit-identical to the lower regime.
inline AveragedCoefficients averaged_coefficients(Regime regime, const CoupledSystem& sys,
                                                  double t, ConstVec y, const Budgets& bud,
                                                  std::uint64_t seed) {
  sys.validate();
  const RegimeTerms terms = regime_terms(regime);
  const std::size_t d2 = sys.d2;
  require(y.size() == d2, "y has wrong dimension");

  const MeasureEnsemble mu = detail::cell_measure(sys, y, bud, seed);
  const std::size_t n = mu.size();

  AveragedCoefficients out;
  out.regime = regime;
  out.seed = seed;
  out.n_samples = n;

  std::vector<double> drift = evaluate_on_samples(sys.F, d2, mu, t);
  std::vector<double> gg(n * d2 * d2), gv(d2 * d2);
  for (std::size_t i = 0; i < n; ++i) {
    sys.G(t, mu.sample(i), y, gv);
    detail::check_finite(gv, "G");
    for (std::size_t r = 0; r < d2; ++r) {
      for (std::size_t c = 0; c < d2; ++c) {
        double s = 0.0;
        for (std::size_t j = 0; j < d2; ++j) s += gv[r * d2 + j] * gv[c * d2 + j];
        gg[(i * d2 + r) * d2 + c] = s;
      }
    }
  }

  if (terms.c_grad_x || terms.h_grad_y || terms.h_phi) {
    const CenteringResult cz = centering_residual(sys.H, d2, mu, t);
    out.centering_z = cz.max_z;
    if (!cz.plausible(bud.z_threshold)) {
      throw NotCentered("H has centering z-score " + std::to_string(cz.max_z) + " at y[0] = " +
                        std::to_string(y[0]));
    }
    const detail::CorrectorTerms ct =
        detail::corrector_terms(sys, sys.H, d2, terms, terms.h_phi, t, y, mu, bud, seed);
    out.used_corrector = ct.solved;
    for (std::size_t i = 0; i < n * d2; ++i) drift[i] += ct.drift[i];
    if (terms.h_phi) {
      const HPhiResult hp = outer_product_HPhi(sys, ct.phi, mu, t);
      out.hphi_antisymmetric_norm = hp.antisymmetric_norm;
      const double w = weight_value(bud.weight);
      for (std::size_t i = 0; i < n; ++i) {
        // per-sample symmetric HΦ* so the SE reflects the combined integrand
        std::vector<double> hv(d2);
        sys.H(t, mu.sample(i), y, hv);
        for (std::size_t r = 0; r < d2; ++r) {
          for (std::size_t c = 0; c < d2; ++c) {
            const double s = 0.5 * (hv[r] * ct.phi[i * d2 + c] + hv[c] * ct.phi[i * d2 + r]);
            gg[(i * d2 + r) * d2 + c] += w * s;
          }
        }
      }
    }
  }

  const Estimate fd = batch_means(drift, d2);
  out.drift = fd.mean;
  out.drift_se = fd.se;
  const Estimate ge = batch_means(gg, d2 * d2);
  out.covariance = detail::to_matrix(ge.mean, d2);
  out.covariance = 0.5 * (out.covariance + out.covariance.transpose());
  out.covariance_se = detail::to_matrix(ge.se, d2);
  const PSDRoot root =
      psd_decompose(out.covariance, bud.psd_rel_tol * std::abs(out.covariance.trace()));
  out.diffusion = root.root;
  out.min_eigenvalue = root.min_eigenvalue;
  return out;
}

inline Estimate averaged_drift(Regime regime, const CoupledSystem& sys, double t, ConstVec y,
                               const Budgets& bud, std::uint64_t seed) {
  const AveragedCoefficients a = averaged_coefficients(regime, sys, t, y, bud, seed);
  return {a.drift, a.drift_se};
}

struct DiffusionEstimate {
  Eigen::MatrixXd diffusion;
  Eigen::MatrixXd covariance;
  Eigen::MatrixXd covariance_se;
};

inline DiffusionEstimate averaged_diffusion(Regime regime, const CoupledSystem& sys, double t,
                                            ConstVec y, const Budgets& bud, std::uint64_t seed) {
  const AveragedCoefficients a = averaged_coefficients(regime, sys, t, y, bud, seed);
  return {a.diffusion, a.covariance, a.covariance_se};
}

struct CachePolicy {
  double quantum = 1e-2;
  bool interpolate = false;
  std::uint64_t master_seed = 0;
};

/// Lattice cell of a (t, y) query; t collapses to 0 for time-homogeneous data.
struct CellKey {
  std::int64_t t_index = 0;
  std::vector<std::int64_t> y_index;
  friend auto operator<=>(const CellKey&, const CellKey&) = default;
};

/// Memo table of per-cell values computed at cell centres with seeds derived
/// from (master seed, cell index). Concurrent requests for one cell wait on a
/// single computation.
template <class Value>
class CellCache {
 public:
  using Compute = std::function<Value(double t, ConstVec y, std::uint64_t seed)>;

  CellCache(Compute compute, CachePolicy policy, bool time_homogeneous)
      : compute_(std::move(compute)), policy_(policy), homogeneous_(time_homogeneous) {
    require(policy.quantum > 0.0, "cache quantum must be > 0");
  }

  CellKey key_of(double t, ConstVec y) const {
    CellKey k;
    k.t_index = homogeneous_ ? 0 : std::llround(t / policy_.quantum);
    for (double v : y) k.y_index.push_back(std::llround(v / policy_.quantum));
    return k;
  }

  Value get(const CellKey& key) {
    std::shared_future<Value> fut;
    std::promise<Value> promise;
    bool owner = false;
    {
      std::lock_guard lock(mutex_);
      auto it = cells_.find(key);
      if (it == cells_.end()) {
        fut = promise.get_future().share();
        cells_.emplace(key, fut);
        owner = true;
      } else {
        fut = it->second;
      }
    }
    if (owner) {
      try {
        std::vector<std::int64_t> tags{key.t_index};
        tags.insert(tags.end(), key.y_index.begin(), key.y_index.end());
        std::uint64_t seed = policy_.master_seed;
        for (std::int64_t tag : tags) seed = derive_seed(seed, {tag});
        std::vector<double> centre;
        for (auto i : key.y_index) centre.push_back(static_cast<double>(i) * policy_.quantum);
        promise.set_value(
            compute_(static_cast<double>(key.t_index) * policy_.quantum, centre, seed));
      } catch (...) {
        promise.set_exception(std::current_exception());
      }
    }
    return fut.get();
  }

  /// Nearest cell, or multilinear weights over the 2^d surrounding cells.
  template <class Blend>
  void lookup(double t, ConstVec y, Blend&& blend) {
    if (!policy_.interpolate) {
      blend(get(key_of(t, y)), 1.0);
      return;
    }
    const std::size_t d = y.size();
    std::vector<std::int64_t> base(d);
    std::vector<double> frac(d);
    for (std::size_t j = 0; j < d; ++j) {
      const double s = y[j] / policy_.quantum;
      base[j] = static_cast<std::int64_t>(std::floor(s));
      frac[j] = s - static_cast<double>(base[j]);
    }
    const CellKey anchor = key_of(t, y);
    for (std::size_t corner = 0; corner < (std::size_t{1} << d); ++corner) {
      CellKey k;
      k.t_index = anchor.t_index;
      double w = 1.0;
      for (std::size_t j = 0; j < d; ++j) {
        const bool up = (corner >> j) & 1u;
        k.y_index.push_back(base[j] + (up ? 1 : 0));
        w *= up ? frac[j] : 1.0 - frac[j];
      }
      if (w > 0.0) blend(get(k), w);
    }
  }

  std::size_t size() const {
    std::lock_guard lock(mutex_);
    return cells_.size();
  }

  /// Keys of finished cells in lattice order.
  std::vector<CellKey> keys() const {
    std::lock_guard lock(mutex_);
    std::vector<CellKey> out;
    for (const auto& [k, f] : cells_) out.push_back(k);
    return out;
  }

  Value peek(const CellKey& k) const {
    std::shared_future<Value> fut;
    {
      std::lock_guard lock(mutex_);
      fut = cells_.at(k);
    }
    return fut.get();
  }

  const CachePolicy& policy() const { return policy_; }

 private:
  Compute compute_;
  CachePolicy policy_;
  bool homogeneous_;
  mutable std::mutex mutex_;
  std::map<CellKey, std::shared_future<Value>> cells_;
};

/// The limit equation dŶ = F̂(t,Ŷ)dt + Ĝ(t,Ŷ)dW. Copies share one cache.
class AveragedSDE {
 public:
  using Fields = std::function<void(double t, ConstVec y, OutVec drift, OutVec diffusion)>;

  /// Analytic coefficients, bypassing estimation.
  static AveragedSDE from_fields(Regime regime, std::size_t d2, Fields fields) {
    AveragedSDE s;
    s.regime_ = regime;
    s.d2_ = d2;
    s.fields_ = std::move(fields);
    return s;
  }

  static AveragedSDE estimated(Regime regime, const CoupledSystem& sys, const Budgets& bud,
                               const CachePolicy& policy) {
    sys.validate();
    (void)regime_terms(regime);
    AveragedSDE s;
    s.regime_ = regime;
    s.d2_ = sys.d2;
    s.cache_ = std::make_shared<CellCache<AveragedCoefficients>>(
        [regime, sys, bud](double t, ConstVec y, std::uint64_t seed) {
          return averaged_coefficients(regime, sys, t, y, bud, seed);
        },
        policy, sys.time_homogeneous);
    return s;
  }

  Regime regime() const { return regime_; }
  std::size_t dim() const { return d2_; }

  void evaluate(double t, ConstVec y, OutVec drift, OutVec diffusion) const {
    require(y.size() == d2_ && drift.size() == d2_ && diffusion.size() == d2_ * d2_,
            "evaluate buffers have wrong dimension");
    if (fields_) {
      fields_(t, y, drift, diffusion);
      return;
    }
    std::fill(drift.begin(), drift.end(), 0.0);
    if (!cache_->policy().interpolate) {
      const AveragedCoefficients a = cache_->get(cache_->key_of(t, y));
      std::copy(a.drift.begin(), a.drift.end(), drift.begin());
      write_matrix(a.diffusion, diffusion);
      return;
    }
    Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(d2_),
                                                static_cast<Eigen::Index>(d2_));
    cache_->lookup(t, y, [&](const AveragedCoefficients& a, double w) {
      for (std::size_t j = 0; j < d2_; ++j) drift[j] += w * a.drift[j];
      cov += w * a.covariance;
    });
    write_matrix(psd_sqrt(cov), diffusion);
  }

  std::vector<double> drift(double t, ConstVec y) const {
    std::vector<double> f(d2_), g(d2_ * d2_);
    evaluate(t, y, f, g);
    return f;
  }

  Eigen::MatrixXd diffusion(double t, ConstVec y) const {
    std::vector<double> f(d2_), g(d2_ * d2_);
    evaluate(t, y, f, g);
    return detail::to_matrix(g, d2_);
  }

  std::size_t cache_size() const { return cache_ ? cache_->size() : 0; }

  /// Per-cell provenance in lattice order.
  std::vector<std::pair<CellKey, AveragedCoefficients>> provenance() const {
    std::vector<std::pair<CellKey, AveragedCoefficients>> out;
    if (!cache_) return out;
    for (const auto& k : cache_->keys()) out.emplace_back(k, cache_->peek(k));
    return out;
  }

 private:
  static void write_matrix(const Eigen::MatrixXd& m, OutVec out) {
    const auto d = static_cast<std::size_t>(m.rows());
    for (std::size_t r = 0; r < d; ++r) {
      for (std::size_t c = 0; c < d; ++c) {
        out[r * d + c] = m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
      }
    }
  }

  Regime regime_ = Regime::kR1;
  std::size_t d2_ = 0;
  Fields fields_;
  std::shared_ptr<CellCache<AveragedCoefficients>> cache_;
};

inline AveragedSDE build_limit_sde(Regime regime, const CoupledSystem& sys, const Budgets& bud,
                                   const CachePolicy& policy = {}) {
  return AveragedSDE::estimated(regime, sys, bud, policy);
}

/// ∫ [(∇ₓΦ^f)c + (∇_yΦ^f)H] dμ^y with the terms the regime keeps, where
/// ℒ₀Φ^f = −f. This is the limit functional subtracted in CLT-type
/// fluctuation estimates.
template <class Fn>
Estimate averaged_corrector_drift(Regime regime, const CoupledSystem& sys, Fn&& f,
                                  std::size_t k, double t, ConstVec y, const Budgets& bud,
                                  std::uint64_t seed) {
  sys.validate();
  RegimeTerms terms = regime_terms(regime);
  terms.h_phi = false;
  const MeasureEnsemble mu = detail::cell_measure(sys, y, bud, seed);
  if (!terms.c_grad_x && !terms.h_grad_y) {
    return {std::vector<double>(k, 0.0), std::vector<double>(k, 0.0)};
  }
  const CenteringResult cz = centering_residual(f, k, mu, t);
  if (!cz.plausible(bud.z_threshold)) {
    throw NotCentered("source has centering z-score " + std::to_string(cz.max_z));
  }
  const detail::CorrectorTerms ct =
      detail::corrector_terms(sys, f, k, terms, false, t, y, mu, bud, seed);
  return batch_means(ct.drift, k);
}

}  // namespace fastslow
