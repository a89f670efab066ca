#pragma once

// Command-line front end: one subcommand per stage, CSV plus a JSON summary.

#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "fastslow/config.hpp"
#include "fastslow/corrector.hpp"
#include "fastslow/ergodic.hpp"
#include "fastslow/errors.hpp"
#include "fastslow/format.hpp"
#include "fastslow/harness.hpp"
#include "fastslow/homogenize.hpp"
#include "fastslow/model.hpp"
#include "fastslow/parallel.hpp"
#include "fastslow/presets.hpp"

namespace fastslow {

inline constexpr const char* kVersion = "0.1.0";

enum ExitStatus : int { kExitOk = 0, kExitFailure = 1, kExitConfig = 2, kExitNumerical = 3 };

namespace cli {

using nlohmann::json;

struct Outputs {
  std::string csv;
  json summary = json::object();
  std::string stdout_text;
};

inline json budgets_json(const ExperimentConfig& e) {
  return {{"paths_coupled", e.budgets.paths_coupled},
          {"paths_limit", e.budgets.paths_limit},
          {"paths_corrector", e.budgets.paths_corrector},
          {"invariant_samples", e.budgets.invariant_samples}};
}

inline json provenance(const RunConfig& rc) {
  const ExperimentConfig& e = rc.experiment;
  return {{"version", kVersion},
          {"seed", e.seed},
          {"preset", e.preset},
          {"budgets", budgets_json(e)},
          {"dt_slow", e.dt_slow},
          {"micro_substeps", e.micro_substeps},
          {"limit_dt", e.limit_dt},
          {"hphi_weight", e.weight == HPhiWeight::kGenerator ? "generator" : "displayed"},
          {"cache_quantum", e.cache.quantum},
          {"invariant", {{"dt", e.invariant_dt}, {"thinning", e.invariant_thinning},
                         {"burn_in", e.invariant_burn_in}}},
          {"fk", {{"T_max", e.fk_T_max}, {"dt", e.fk_dt}}}};
}

inline std::string csv_row(const std::vector<std::string>& cells) {
  std::string out;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (i) out += ',';
    out += cells[i];
  }
  return out + '\n';
}

inline std::vector<std::string> indexed(const std::string& stem, std::size_t n) {
  std::vector<std::string> out;
  for (std::size_t i = 1; i <= n; ++i) out.push_back(stem + std::to_string(i));
  return out;
}

inline void append(std::vector<std::string>& to, const std::vector<std::string>& more) {
  to.insert(to.end(), more.begin(), more.end());
}

inline std::vector<std::vector<double>> y_points(const RunConfig& rc, const Preset& p) {
  return rc.y_points.empty() ? std::vector<std::vector<double>>{p.y0} : rc.y_points;
}

inline Regime regime_of(const RunConfig& rc, const Preset& p) {
  if (rc.regime) return *rc.regime;
  const Regime r = classify_regime(rc.experiment.schedule(p));
  if (r == Regime::kUnclassified) throw ConfigError("exponents do not match any regime");
  return r;
}

inline Outputs classify(const ScaleSchedule& s) {
  const Regime r = classify_regime(s);
  Outputs o;
  o.csv = "a,b,g,regime\n" + csv_row({to_string(s.exp_alpha()), to_string(s.exp_beta()),
                                      to_string(s.exp_gamma()), std::string(to_string(r))});
  o.summary = {{"regime", to_string(r)},
               {"exponents", {to_string(s.exp_alpha()), to_string(s.exp_beta()),
                              to_string(s.exp_gamma())}}};
  o.stdout_text = std::string(to_string(r)) + "\n";
  return o;
}

inline Outputs validate(const RunConfig& rc) {
  const Preset p = make_preset(rc.experiment.preset);
  const ValidationReport v = validate_assumptions(p.system, rc.validation);
  Outputs o;
  o.csv = "check,min,max,plausible\n";
  auto line = [&](const char* name, double lo, double hi, bool ok) {
    o.csv += csv_row({name, format_double(lo), format_double(hi), ok ? "true" : "false"});
  };
  line("a_eigenvalues", v.a_eig_min, v.a_eig_max, v.a_within_bounds);
  line("g_eigenvalues", v.g_eig_min, v.g_eig_max, v.g_within_bounds);
  line("recurrence", v.recurrence_max, v.recurrence_max, v.recurrence_plausible);
  line("perturbed_recurrence", v.perturbed_recurrence_max, v.perturbed_recurrence_max,
       v.perturbed_recurrence_plausible);
  o.summary = {{"all_plausible", v.all_plausible()},
               {"lambda", rc.validation.lambda},
               {"sample_budget", rc.validation.sample_budget}};
  o.stdout_text = v.all_plausible() ? "plausible\n" : "implausible\n";
  return o;
}

inline Outputs invariant(const RunConfig& rc) {
  const ExperimentConfig& e = rc.experiment;
  const Preset p = make_preset(e.preset);
  const std::size_t d1 = p.system.d1, d2 = p.system.d2;
  InvariantOptions inv = e.estimation_budgets().invariant;
  inv.seed = e.seed;
  std::vector<std::string> head = indexed("y_", d2);
  append(head, indexed("mean_", d1));
  append(head, indexed("var_", d1));
  head.push_back("ess");
  Outputs o;
  o.csv = csv_row(head);
  json rows = json::array();
  for (const auto& y : y_points(rc, p)) {
    if (y.size() != d2) throw ConfigError("y_points entries must have dimension d2");
    const MeasureEnsemble mu = sample_invariant_measure(p.system, y, inv);
    std::vector<double> mean(d1, 0.0), var(d1, 0.0);
    const double n = static_cast<double>(mu.size());
    for (std::size_t i = 0; i < mu.size(); ++i) {
      for (std::size_t j = 0; j < d1; ++j) mean[j] += mu.sample(i)[j];
    }
    for (auto& m : mean) m /= n;
    for (std::size_t i = 0; i < mu.size(); ++i) {
      for (std::size_t j = 0; j < d1; ++j) {
        const double d = mu.sample(i)[j] - mean[j];
        var[j] += d * d;
      }
    }
    for (auto& v : var) v /= std::max(1.0, n - 1.0);
    std::vector<std::string> cells;
    for (double v : y) cells.push_back(format_double(v));
    for (double v : mean) cells.push_back(format_double(v));
    for (double v : var) cells.push_back(format_double(v));
    cells.push_back(format_double(mu.effective_sample_size));
    o.csv += csv_row(cells);
    rows.push_back({{"y", y}, {"mean", mean}, {"var", var}, {"ess", mu.effective_sample_size}});
  }
  o.summary = {{"points", rows}, {"n_samples", inv.n_samples}};
  return o;
}

inline Outputs corrector(const RunConfig& rc) {
  const ExperimentConfig& e = rc.experiment;
  const CorrectorSpec& s = rc.corrector;
  const Preset p = make_preset(e.preset);
  const CoupledSystem& sys = p.system;
  const std::size_t d1 = sys.d1, d2 = sys.d2;
  const SlowField f = make_observable(s.f);

  CorrectorQuery q;
  q.y = s.y.value_or(p.y0);
  if (q.y.size() != d2) throw ConfigError("corrector.y must have dimension d2");
  if (s.lo.size() != d1 || s.hi.size() != d1 || s.n.size() != d1) {
    throw ConfigError("corrector grid lo/hi/n must have dimension d1");
  }
  q.set_grid(make_tensor_grid(s.lo, s.hi, s.n));
  q.T_max = s.T_max;
  q.dt = s.dt;
  q.n_paths = s.n_paths;
  q.seed = e.seed;
  q.blowup_cap = e.blowup_cap;

  InvariantOptions inv = e.estimation_budgets().invariant;
  inv.seed = derive_seed(e.seed, {1});
  const MeasureEnsemble mu = sample_invariant_measure(sys, q.y, inv);
  SolveOptions so;
  so.mode = s.mode;
  so.centering_z = centering_residual(f, 1, mu, q.t).max_z;

  const CorrectorField field = gradients(sys, f, 1, q, so);
  std::vector<std::string> head = indexed("x_", d1);
  head.push_back("phi");
  head.push_back("se");
  append(head, indexed("grad_x_", d1));
  append(head, indexed("grad_y_", d2));
  Outputs o;
  o.csv = csv_row(head);
  for (std::size_t i = 0; i < field.size(); ++i) {
    std::vector<std::string> cells;
    for (double v : field.point(i)) cells.push_back(format_double(v));
    cells.push_back(format_double(field.values[i]));
    cells.push_back(format_double(field.se[i]));
    for (std::size_t j = 0; j < d1; ++j) {
      cells.push_back(field.has_grad_x(i) ? format_double(field.grad_x[i * d1 + j]) : "");
    }
    for (std::size_t j = 0; j < d2; ++j) cells.push_back(format_double(field.grad_y[i * d2 + j]));
    o.csv += csv_row(cells);
  }
  double tail = 0.0;
  for (double v : field.tail_bound) tail = std::max(tail, v);
  o.summary = {{"source", s.f},
               {"mode", s.mode == SolveMode::kCorrector ? "corrector" : "poisson"},
               {"centering_z", so.centering_z},
               {"T_max", s.T_max},
               {"dt", s.dt},
               {"n_paths", s.n_paths},
               {"max_tail_bound", tail}};
  return o;
}

inline Outputs average(const RunConfig& rc) {
  const ExperimentConfig& e = rc.experiment;
  const Preset p = make_preset(e.preset);
  const std::size_t d2 = p.system.d2;
  const Regime regime = regime_of(rc, p);
  const Budgets bud = e.estimation_budgets();
  std::vector<std::string> head{"regime", "t"};
  append(head, indexed("y_", d2));
  append(head, indexed("Fhat_", d2));
  for (std::size_t r = 1; r <= d2; ++r) append(head, indexed("Ghat_" + std::to_string(r) + "_", d2));
  append(head, indexed("se_", d2));
  Outputs o;
  o.csv = csv_row(head);
  json rows = json::array();
  const auto pts = y_points(rc, p);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    if (pts[i].size() != d2) throw ConfigError("y_points entries must have dimension d2");
    const AveragedCoefficients a = averaged_coefficients(
        regime, p.system, 0.0, pts[i], bud, derive_seed(e.seed, {static_cast<std::int64_t>(i)}));
    std::vector<std::string> cells{std::string(to_string(regime)), format_double(0.0)};
    for (double v : pts[i]) cells.push_back(format_double(v));
    for (double v : a.drift) cells.push_back(format_double(v));
    std::vector<double> g;
    for (Eigen::Index r = 0; r < a.diffusion.rows(); ++r) {
      for (Eigen::Index c = 0; c < a.diffusion.cols(); ++c) {
        cells.push_back(format_double(a.diffusion(r, c)));
        g.push_back(a.diffusion(r, c));
      }
    }
    for (double v : a.drift_se) cells.push_back(format_double(v));
    o.csv += csv_row(cells);
    rows.push_back({{"y", pts[i]},
                    {"Fhat", a.drift},
                    {"Ghat", g},
                    {"se", a.drift_se},
                    {"centering_z", a.centering_z},
                    {"hphi_antisymmetric_norm", a.hphi_antisymmetric_norm},
                    {"min_eigenvalue", a.min_eigenvalue}});
  }
  o.summary = {{"regime", to_string(regime)}, {"points", rows}};
  return o;
}

inline json rate_json(const RateResult& r) {
  json terms = json::array();
  for (const auto& t : r.terms) terms.push_back({{"term", t.name}, {"exponent", to_double(t.value)}});
  return {{"exponent", r.value()},
          {"theta", to_double(r.theta)},
          {"terms", terms},
          {"hypothesis_warning", r.hypothesis_warning}};
}

inline Outputs converge(const RunConfig& rc) {
  const WeakErrorReport rep = weak_error_experiment(rc.experiment);
  Outputs o;
  std::ostringstream os;
  write_convergence_csv(os, rep);
  o.csv = os.str();
  json phis = json::array();
  for (const auto& s : rep.summaries) {
    phis.push_back({{"phi", s.phi},
                    {"sup_err", s.sup_err},
                    {"sup_se", s.sup_se},
                    {"qualifies", s.qualifies},
                    {"fitted_slope", s.fit.slope},
                    {"slope_ci", {s.fit.ci_lo, s.fit.ci_hi}},
                    {"insufficient_signal", s.insufficient_signal},
                    {"monotone", s.monotone}});
  }
  o.summary = {{"regime", to_string(rep.regime)},
               {"theoretical_rate", rate_json(rep.rate)},
               {"eps", rep.eps},
               {"times", rep.times},
               {"paired_standard_errors", rep.paired},
               {"limit_cells", rep.limit_cells},
               {"test_functions", phis}};
  bool caveat = false;
  for (const auto& s : rep.summaries) caveat = caveat || s.insufficient_signal;
  if (caveat) o.summary["caveat"] = "InsufficientSignal: fewer than 3 eps values above 3 SE";
  if (rep.rate.hypothesis_warning) {
    o.summary["warning"] = "theta*a <= g: the rate hypothesis alpha^theta/gamma -> 0 fails";
  }
  return o;
}

inline json fluctuation_json(const FluctuationReport& r) {
  return {{"kind", r.kind},
          {"regime", to_string(r.regime)},
          {"observable", r.observable},
          {"centering_z", r.centering_z},
          {"fitted_constant", r.fitted_constant},
          {"dominated", r.dominated},
          {"monotone", r.monotone}};
}

inline Outputs fluctuate(const RunConfig& rc) {
  const ExperimentConfig& e = rc.experiment;
  const Preset p = make_preset(e.preset);
  const Regime regime = regime_of(rc, p);
  const SlowField f = make_observable(e.observable);
  const FluctuationReport lln = fluctuation_lln(e, f, e.observable);
  const FluctuationReport clt = fluctuation_clt(e, f, regime, e.observable);
  Outputs o;
  std::ostringstream os;
  os << kFluctuationHeader << '\n';
  write_fluctuation_rows(os, lln);
  write_fluctuation_rows(os, clt);
  o.csv = os.str();
  o.summary = {{"lln", fluctuation_json(lln)}, {"clt", fluctuation_json(clt)}};
  return o;
}

inline void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << text;
}

inline json error_json(const std::string& kind, const std::string& message,
                       const std::string& location) {
  json e = {{"kind", kind}, {"message", message}};
  if (!location.empty()) e["location"] = location;
  return e;
}

}  // namespace cli

/// Entry point of the fastslow tool. Returns the process exit status:
/// 0 success, 2 configuration error, 3 numerical failure, 1 anything else.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
  using nlohmann::json;
  CLI::App app{"Simulation and homogenization toolkit for fast-slow SDEs"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  std::string config_path;
  std::string out_dir;
  int threads = 0;
  std::string exponents;
  auto common = [&](CLI::App* sub, bool needs_config) {
    auto* opt = sub->add_option("--config", config_path, "JSON configuration file");
    if (needs_config) opt->required();
    sub->add_option("--threads", threads, "Worker threads (results do not depend on it)")
        ->check(CLI::NonNegativeNumber);
    sub->add_option("--out-dir", out_dir, "Output directory (overrides out_dir in the config)");
  };
  struct Command {
    const char* name;
    const char* help;
    std::function<cli::Outputs(const RunConfig&)> run;
  };
  const std::vector<Command> commands{
      {"validate", "Sample the non-degeneracy and recurrence assumptions", cli::validate},
      {"invariant", "Estimate frozen invariant measures at y_points", cli::invariant},
      {"corrector", "Solve the Poisson equation on a grid", cli::corrector},
      {"average", "Estimate averaged drift and diffusion at y_points", cli::average},
      {"converge", "Weak-error convergence study", cli::converge},
      {"fluctuate", "Averaging and CLT fluctuation estimates", cli::fluctuate},
  };
  CLI::App* classify = app.add_subcommand("classify", "Print the regime of a scale schedule");
  common(classify, false);
  classify->add_option("--exponents", exponents, "a,b,g (integers, decimals or p/q)");
  std::vector<CLI::App*> subs;
  for (const auto& c : commands) {
    subs.push_back(app.add_subcommand(c.name, c.help));
    common(subs.back(), true);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kExitConfig;
  }

  std::string name;
  for (CLI::App* s : app.get_subcommands()) name = s->get_name();
  std::filesystem::path dir;
  auto emit = [&](const json& summary) {
    if (dir.empty()) return;
    std::filesystem::create_directories(dir);
    cli::write_file(dir / (name + "_summary.json"), summary.dump(2) + "\n");
  };
  auto fail = [&](int status, const std::string& kind, const std::string& message,
                  const std::string& location) {
    const json e = cli::error_json(kind, message, location);
    err << json{{"error", e}}.dump() << '\n';
    try {
      emit({{"command", name}, {"status", "error"}, {"version", kVersion}, {"error", e}});
    } catch (...) {
    }
    return status;
  };

  try {
    if (threads > 0) set_worker_count(threads);
    cli::Outputs result;
    if (name == "classify") {
      std::optional<RunConfig> rc;
      if (!config_path.empty()) rc = load_run_config(config_path);
      if (!out_dir.empty()) dir = out_dir;
      std::optional<ScaleSchedule> s;
      if (!exponents.empty()) {
        const auto ex = parse_exponent_list(exponents);
        s.emplace(ex[0], ex[1], ex[2]);
      } else if (rc) {
        s = rc->experiment.schedule(make_preset(rc->experiment.preset));
      } else {
        throw ConfigError("classify needs --exponents or --config");
      }
      result = cli::classify(*s);
      if (rc) result.summary["provenance"] = cli::provenance(*rc);
    } else {
      dir = out_dir;
      RunConfig rc = load_run_config(config_path);
      if (dir.empty()) dir = rc.experiment.out_dir;
      for (const auto& c : commands) {
        if (name == c.name) result = c.run(rc);
      }
      result.summary["provenance"] = cli::provenance(rc);
    }
    json summary = {{"command", name}, {"status", "ok"}};
    summary.update(result.summary);
    if (!dir.empty()) {
      std::filesystem::create_directories(dir);
      cli::write_file(dir / (name + ".csv"), result.csv);
    }
    emit(summary);
    out << result.stdout_text;
    return kExitOk;
  } catch (const ConfigFieldError& e) {
    return fail(kExitConfig, "ConfigError", e.what(), e.location());
  } catch (const Error& e) {
    const int status = e.is_numerical() ? kExitNumerical : kExitConfig;
    return fail(status, std::string(to_string(e.kind())), e.what(), "");
  } catch (const std::exception& e) {
    return fail(kExitFailure, "Internal", e.what(), "");
  }
}

}  // namespace fastslow
