#pragma once

// Invariant measures of the frozen process and averages against them.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <vector>

#include "fastslow/errors.hpp"
#include "fastslow/model.hpp"
#include "fastslow/random.hpp"
#include "fastslow/simulate.hpp"

namespace fastslow {

struct InvariantOptions {
  double burn_in = 10.0;
  std::size_t n_samples = 10000;
  std::size_t thinning = 10;  // Euler steps between retained states
  double dt = 1e-3;
  std::uint64_t seed = 0;
  double blowup_cap = 1e6;
};

/// Thinned states of one long frozen trajectory, approximating μ^y.
struct MeasureEnsemble {
  std::vector<double> y;
  std::size_t d1 = 0;
  std::vector<double> samples;  // size() × d1
  double burn_in = 0.0;
  std::size_t thinning = 0;
  double dt = 0.0;
  double effective_sample_size = 0.0;

  std::size_t size() const { return d1 == 0 ? 0 : samples.size() / d1; }
  ConstVec sample(std::size_t i) const {
    return ConstVec(samples).subspan(i * d1, d1);
  }
};

/// Mean and batch-means standard error of a vector-valued quantity.
struct Estimate {
  std::vector<double> mean;
  std::vector<double> se;
};

inline constexpr std::size_t kDefaultBatches = 50;

/// values is n × k (row per sample, ordered as generated). The mean uses
/// every row; the standard error uses min(n, batches) equal batches so that
/// autocorrelated sequences are not over-trusted. batches = 0 picks
/// min(kDefaultBatches, ⌊√n⌋) so short chains still get long batches.
/// SE is NaN when n < 2.
inline Estimate batch_means(const std::vector<double>& values, std::size_t k,
                            std::size_t batches = 0) {
  require(k >= 1, "estimate dimension must be >= 1");
  const std::size_t n = values.size() / k;
  require(n >= 1, "cannot estimate from an empty sample");
  Estimate e;
  e.mean.assign(k, 0.0);
  e.se.assign(k, std::numeric_limits<double>::quiet_NaN());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < k; ++j) e.mean[j] += values[i * k + j];
  }
  for (auto& m : e.mean) m /= static_cast<double>(n);

  if (batches == 0) {
    const auto root = static_cast<std::size_t>(std::sqrt(static_cast<double>(n)));
    batches = std::clamp<std::size_t>(root, 2, kDefaultBatches);
  }
  const std::size_t nb = std::min(n, batches);
  if (nb < 2) return e;
  const std::size_t m = n / nb;
  for (std::size_t j = 0; j < k; ++j) {
    std::vector<double> bm(nb, 0.0);
    for (std::size_t b = 0; b < nb; ++b) {
      for (std::size_t i = b * m; i < (b + 1) * m; ++i) bm[b] += values[i * k + j];
      bm[b] /= static_cast<double>(m);
    }
    double mu = 0.0;
    for (double v : bm) mu += v;
    mu /= static_cast<double>(nb);
    double var = 0.0;
    for (double v : bm) var += (v - mu) * (v - mu);
    var /= static_cast<double>(nb - 1);
    e.se[j] = std::sqrt(var / static_cast<double>(nb));
  }
  return e;
}

namespace detail {

/// n / τ̂ with τ̂ from batch means, minimised over components.
inline double effective_sample_size(const std::vector<double>& samples,
                                    std::size_t d1) {
  const std::size_t n = samples.size() / d1;
  if (n < 2) return static_cast<double>(n);
  const Estimate e = batch_means(samples, d1);
  double ess = static_cast<double>(n);
  for (std::size_t j = 0; j < d1; ++j) {
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double d = samples[i * d1 + j] - e.mean[j];
      var += d * d;
    }
    var /= static_cast<double>(n - 1);
    const double se2 = e.se[j] * e.se[j];
    if (se2 > 0.0 && std::isfinite(se2)) ess = std::min(ess, var / se2);
  }
  return std::min(ess, static_cast<double>(n));
}

}  // namespace detail

/// Runs a single frozen trajectory from x = 0 (or x0), discards [0, burn_in]
/// and keeps every `thinning`-th Euler state.
inline MeasureEnsemble sample_invariant_measure(const CoupledSystem& sys, ConstVec y,
                                                const InvariantOptions& opt,
                                                ConstVec x0 = {}) {
  sys.validate();
  require(y.size() == sys.d2, "y has wrong dimension");
  require(opt.burn_in > 0.0, "burn_in must be > 0");
  require(opt.dt > 0.0, "dt must be > 0");
  require(opt.n_samples >= 1, "n_samples must be >= 1");
  require(opt.thinning >= 1, "thinning must be >= 1");
  require(x0.empty() || x0.size() == sys.d1, "x0 has wrong dimension");

  const std::size_t d1 = sys.d1;
  MeasureEnsemble mu;
  mu.y.assign(y.begin(), y.end());
  mu.d1 = d1;
  mu.burn_in = opt.burn_in;
  mu.thinning = opt.thinning;
  mu.dt = opt.dt;
  mu.samples.reserve(opt.n_samples * d1);

  RandomStream w(opt.seed, Lane::kInvariant, 0);
  std::vector<double> x(d1, 0.0), b(d1), sig(d1 * d1), xi(d1);
  if (!x0.empty()) x.assign(x0.begin(), x0.end());
  const double sqrt_dt = std::sqrt(opt.dt);
  auto step = [&] {
    sys.b(x, y, b);
    detail::check_finite(b, "b");
    sys.sigma(x, y, sig);
    detail::check_finite(sig, "sigma");
    w.fill_normal(xi);
    for (std::size_t i = 0; i < d1; ++i) {
      double noise = 0.0;
      for (std::size_t j = 0; j < d1; ++j) noise += sig[i * d1 + j] * xi[j];
      x[i] += b[i] * opt.dt + noise * sqrt_dt;
    }
  };

  const auto burn_steps = static_cast<std::size_t>(std::ceil(opt.burn_in / opt.dt - 1e-9));
  for (std::size_t n = 0; n < burn_steps; ++n) {
    step();
    if ((n & 1023u) == 0) detail::check_state(x, opt.blowup_cap, "frozen state X");
  }
  detail::check_state(x, opt.blowup_cap, "frozen state X");
  for (std::size_t s = 0; s < opt.n_samples; ++s) {
    for (std::size_t k = 0; k < opt.thinning; ++k) step();
    detail::check_state(x, opt.blowup_cap, "frozen state X");
    mu.samples.insert(mu.samples.end(), x.begin(), x.end());
  }
  mu.effective_sample_size = detail::effective_sample_size(mu.samples, d1);
  return mu;
}

/// Evaluates h(t, X_i, y) on every sample; returns the n × k value table.
template <class Fn>
std::vector<double> evaluate_on_samples(Fn&& h, std::size_t k,
                                        const MeasureEnsemble& mu, double t) {
  std::vector<double> values(mu.size() * k);
  for (std::size_t i = 0; i < mu.size(); ++i) {
    OutVec out(values.data() + i * k, k);
    h(t, mu.sample(i), ConstVec(mu.y), out);
    detail::check_finite(out, "averaged function");
  }
  return values;
}

/// h̄(y) = ∫ h(t, x, y) μ^y(dx) by the sample mean, with batch-means SE.
template <class Fn>
Estimate average(Fn&& h, std::size_t k, const MeasureEnsemble& mu, double t) {
  require(mu.size() >= 1, "empty measure ensemble");
  return batch_means(evaluate_on_samples(h, k, mu, t), k);
}

struct CenteringResult {
  std::vector<double> z;  // |mean| / SE per component
  double max_z = 0.0;
  bool plausible(double threshold = 3.0) const { return max_z <= threshold; }
};

/// z-scores of ∫ f dμ^y. A component with exactly zero mean scores 0.
template <class Fn>
CenteringResult centering_residual(Fn&& f, std::size_t k, const MeasureEnsemble& mu,
                                   double t) {
  const Estimate e = average(f, k, mu, t);
  CenteringResult r;
  r.z.resize(k);
  for (std::size_t j = 0; j < k; ++j) {
    const double m = std::abs(e.mean[j]);
    if (m == 0.0) {
      r.z[j] = 0.0;
    } else if (e.se[j] > 0.0) {
      r.z[j] = m / e.se[j];
    } else {
      r.z[j] = std::numeric_limits<double>::infinity();
    }
    r.max_z = std::max(r.max_z, r.z[j]);
  }
  return r;
}

/// f − ∫ f dμ̂^y, with the average taken at time t on the given ensemble.
/// Only meaningful at that (t, y).
inline SlowField auto_center(SlowField f, std::size_t k, const MeasureEnsemble& mu,
                             double t) {
  const std::vector<double> shift = average(f, k, mu, t).mean;
  return [f = std::move(f), shift](double s, ConstVec x, ConstVec y, OutVec out) {
    f(s, x, y, out);
    for (std::size_t j = 0; j < out.size(); ++j) out[j] -= shift[j];
  };
}

}  // namespace fastslow
