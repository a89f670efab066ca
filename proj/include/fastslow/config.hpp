#pragma once

// JSON run configuration for the command-line tool.

#include <array>
#include <cstdint>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "fastslow/errors.hpp"
#include "fastslow/harness.hpp"
#include "fastslow/homogenize.hpp"
#include "fastslow/model.hpp"

namespace fastslow {

/// ConfigError that remembers where in the document it arose.
class ConfigFieldError : public ConfigError {
 public:
  ConfigFieldError(std::string location, const std::string& what)
      : ConfigError("at " + location + ": " + what), location_(std::move(location)) {}
  const std::string& location() const noexcept { return location_; }

 private:
  std::string location_;
};

struct CorrectorSpec {
  std::optional<std::vector<double>> y;
  std::vector<double> lo{-2.0};
  std::vector<double> hi{2.0};
  std::vector<std::size_t> n{9};
  std::string f = "x_minus_y";
  SolveMode mode = SolveMode::kCorrector;
  double T_max = 10.0;
  double dt = 1e-2;
  std::size_t n_paths = 1000;
};

struct RunConfig {
  ExperimentConfig experiment;
  std::vector<std::vector<double>> y_points;  // empty: the preset's y0
  std::optional<Regime> regime;               // empty: classified from exponents
  CorrectorSpec corrector;
  ValidationOptions validation;
};

namespace detail {

using nlohmann::json;

class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigFieldError(where(), "expected an object");
  }

  /// Rejects keys outside `known` so typos do not silently fall back to defaults.
  void only(std::initializer_list<const char*> known) const {
    std::set<std::string> k(known.begin(), known.end());
    for (const auto& [key, v] : j_.items()) {
      if (!k.count(key)) throw ConfigFieldError(path_ + "/" + key, "unknown field");
    }
  }

  bool has(const char* key) const { return j_.contains(key); }
  Reader object(const char* key) const { return Reader(j_.at(key), path_ + "/" + key); }

  double number(const char* key, double fallback) const {
    if (!has(key)) return fallback;
    const json& v = j_.at(key);
    if (!v.is_number()) throw ConfigFieldError(at(key), "expected a number");
    return v.get<double>();
  }

  std::uint64_t unsigned_int(const char* key, std::uint64_t fallback) const {
    if (!has(key)) return fallback;
    const json& v = j_.at(key);
    if (!v.is_number_unsigned()) throw ConfigFieldError(at(key), "expected a non-negative integer");
    return v.get<std::uint64_t>();
  }

  bool boolean(const char* key, bool fallback) const {
    if (!has(key)) return fallback;
    const json& v = j_.at(key);
    if (!v.is_boolean()) throw ConfigFieldError(at(key), "expected true or false");
    return v.get<bool>();
  }

  std::string string(const char* key, const std::string& fallback) const {
    if (!has(key)) return fallback;
    const json& v = j_.at(key);
    if (!v.is_string()) throw ConfigFieldError(at(key), "expected a string");
    return v.get<std::string>();
  }

  std::vector<double> numbers(const char* key, std::vector<double> fallback) const {
    if (!has(key)) return fallback;
    return numbers_of(j_.at(key), at(key));
  }

  std::vector<std::string> strings(const char* key, std::vector<std::string> fallback) const {
    if (!has(key)) return fallback;
    const json& v = j_.at(key);
    if (!v.is_array()) throw ConfigFieldError(at(key), "expected an array of strings");
    std::vector<std::string> out;
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (!v[i].is_string()) throw ConfigFieldError(at(key) + "/" + std::to_string(i), "expected a string");
      out.push_back(v[i].get<std::string>());
    }
    return out;
  }

  const json& raw(const char* key) const { return j_.at(key); }
  std::string at(const char* key) const { return path_ + "/" + key; }
  std::string where() const { return path_.empty() ? "/" : path_; }

  static std::vector<double> numbers_of(const json& v, const std::string& loc) {
    if (!v.is_array()) throw ConfigFieldError(loc, "expected an array of numbers");
    std::vector<double> out;
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (!v[i].is_number()) throw ConfigFieldError(loc + "/" + std::to_string(i), "expected a number");
      out.push_back(v[i].get<double>());
    }
    return out;
  }

 private:
  const json& j_;
  std::string path_;
};

inline Exponent exponent_of(const json& v, const std::string& loc) {
  try {
    if (v.is_string()) return parse_exponent(v.get<std::string>());
    if (v.is_number()) return exponent_from_double(v.get<double>());
  } catch (const Error& e) {
    throw ConfigFieldError(loc, e.what());
  }
  throw ConfigFieldError(loc, "expected a number or a \"p/q\" string");
}

template <class Fn>
auto guarded(const std::string& loc, Fn&& fn) {
  try {
    return fn();
  } catch (const ConfigFieldError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigFieldError(loc, e.what());
  }
}

}  // namespace detail

inline std::array<Exponent, 3> parse_exponent_list(const std::string& text) {
  std::array<Exponent, 3> out{};
  std::stringstream ss(text);
  std::string item;
  std::size_t i = 0;
  while (std::getline(ss, item, ',')) {
    if (i >= 3) throw ConfigError("exponents need exactly three entries a,b,g");
    out[i++] = parse_exponent(item);
  }
  if (i != 3) throw ConfigError("exponents need exactly three entries a,b,g");
  return out;
}

inline RunConfig parse_run_config(const nlohmann::json& doc) {
  using detail::Reader;
  const Reader r(doc, "");
  r.only({"preset", "system_id", "exponents", "theta", "eps_list", "T", "time_grid_n", "phi",
          "budgets", "seed", "out_dir", "dt_slow", "micro_substeps", "limit_dt", "blowup_cap",
          "analytic_limit", "hphi_weight", "cache", "invariant", "fk", "observable", "centering_z", "y_points",
          "regime", "corrector", "validate"});
  RunConfig rc;
  ExperimentConfig& e = rc.experiment;
  if (r.has("preset") && r.has("system_id")) {
    throw ConfigFieldError("/system_id", "give either preset or system_id");
  }
  e.preset = r.string("preset", r.string("system_id", e.preset));
  detail::guarded("/preset", [&] { return make_preset(e.preset); });
  if (r.has("exponents")) {
    const auto& v = r.raw("exponents");
    if (!v.is_array() || v.size() != 3) {
      throw ConfigFieldError("/exponents", "expected [a, b, g]");
    }
    std::array<Exponent, 3> ex{};
    for (std::size_t i = 0; i < 3; ++i) {
      ex[i] = detail::exponent_of(v[i], "/exponents/" + std::to_string(i));
    }
    detail::guarded("/exponents", [&] { return ScaleSchedule(ex[0], ex[1], ex[2]); });
    e.exponents = ex;
  }
  e.theta = r.number("theta", e.theta);
  e.eps_list = r.numbers("eps_list", e.eps_list);
  e.T = r.number("T", e.T);
  e.time_grid_n = r.unsigned_int("time_grid_n", e.time_grid_n);
  e.phi = r.strings("phi", e.phi);
  for (std::size_t i = 0; i < e.phi.size(); ++i) {
    detail::guarded("/phi/" + std::to_string(i), [&] { return make_test_function(e.phi[i]); });
  }
  if (r.has("budgets")) {
    const Reader b = r.object("budgets");
    b.only({"paths_coupled", "paths_limit", "paths_corrector", "invariant_samples"});
    e.budgets.paths_coupled = b.unsigned_int("paths_coupled", e.budgets.paths_coupled);
    e.budgets.paths_limit = b.unsigned_int("paths_limit", e.budgets.paths_limit);
    e.budgets.paths_corrector = b.unsigned_int("paths_corrector", e.budgets.paths_corrector);
    e.budgets.invariant_samples = b.unsigned_int("invariant_samples", e.budgets.invariant_samples);
  }
  e.seed = r.unsigned_int("seed", e.seed);
  e.out_dir = r.string("out_dir", e.out_dir);
  e.dt_slow = r.number("dt_slow", e.dt_slow);
  e.micro_substeps = static_cast<int>(r.unsigned_int("micro_substeps", static_cast<std::uint64_t>(e.micro_substeps)));
  e.limit_dt = r.number("limit_dt", e.dt_slow);
  e.blowup_cap = r.number("blowup_cap", e.blowup_cap);
  e.analytic_limit = r.boolean("analytic_limit", e.analytic_limit);
  const std::string w = r.string("hphi_weight", "generator");
  if (w == "generator") {
    e.weight = HPhiWeight::kGenerator;
  } else if (w == "displayed") {
    e.weight = HPhiWeight::kDisplayed;
  } else {
    throw ConfigFieldError("/hphi_weight", "expected \"generator\" or \"displayed\"");
  }
  if (r.has("cache")) {
    const Reader c = r.object("cache");
    c.only({"quantum", "interpolate"});
    e.cache.quantum = c.number("quantum", e.cache.quantum);
    e.cache.interpolate = c.boolean("interpolate", e.cache.interpolate);
    if (!(e.cache.quantum > 0.0)) throw ConfigFieldError("/cache/quantum", "must be > 0");
  }
  if (r.has("invariant")) {
    const Reader c = r.object("invariant");
    c.only({"dt", "thinning", "burn_in"});
    e.invariant_dt = c.number("dt", e.invariant_dt);
    e.invariant_thinning = c.unsigned_int("thinning", e.invariant_thinning);
    e.invariant_burn_in = c.number("burn_in", e.invariant_burn_in);
  }
  if (r.has("fk")) {
    const Reader c = r.object("fk");
    c.only({"T_max", "dt"});
    e.fk_T_max = c.number("T_max", e.fk_T_max);
    e.fk_dt = c.number("dt", e.fk_dt);
  }
  e.observable = r.string("observable", e.observable);
  e.centering_z = r.number("centering_z", e.centering_z);
  detail::guarded("/observable", [&] { return make_observable(e.observable); });
  if (r.has("y_points")) {
    const auto& v = r.raw("y_points");
    if (!v.is_array()) throw ConfigFieldError("/y_points", "expected an array of points");
    for (std::size_t i = 0; i < v.size(); ++i) {
      rc.y_points.push_back(detail::Reader::numbers_of(v[i], "/y_points/" + std::to_string(i)));
    }
  }
  if (r.has("regime")) {
    const std::string reg = r.string("regime", "");
    rc.regime = detail::guarded("/regime", [&] { return parse_regime(reg); });
  }
  if (r.has("corrector")) {
    const Reader c = r.object("corrector");
    c.only({"y", "lo", "hi", "n", "f", "mode", "T_max", "dt", "n_paths"});
    CorrectorSpec& s = rc.corrector;
    if (c.has("y")) s.y = c.numbers("y", {});
    s.lo = c.numbers("lo", s.lo);
    s.hi = c.numbers("hi", s.hi);
    if (c.has("n")) {
      s.n.clear();
      for (double v : c.numbers("n", {})) {
        if (!(v >= 1.0) || v != std::floor(v)) throw ConfigFieldError("/corrector/n", "expected positive integers");
        s.n.push_back(static_cast<std::size_t>(v));
      }
    }
    s.f = c.string("f", s.f);
    detail::guarded("/corrector/f", [&] { return make_observable(s.f); });
    const std::string mode = c.string("mode", "corrector");
    if (mode == "corrector") {
      s.mode = SolveMode::kCorrector;
    } else if (mode == "poisson") {
      s.mode = SolveMode::kPoisson;
    } else {
      throw ConfigFieldError("/corrector/mode", "expected \"corrector\" or \"poisson\"");
    }
    s.T_max = c.number("T_max", s.T_max);
    s.dt = c.number("dt", s.dt);
    s.n_paths = c.unsigned_int("n_paths", s.n_paths);
  }
  if (r.has("validate")) {
    const Reader c = r.object("validate");
    c.only({"lambda", "sample_budget", "radius", "eps_min", "x_box", "y_box", "t_max"});
    ValidationOptions& v = rc.validation;
    v.lambda = c.number("lambda", v.lambda);
    v.sample_budget = c.unsigned_int("sample_budget", v.sample_budget);
    v.radius = c.number("radius", v.radius);
    v.eps_min = c.number("eps_min", v.eps_min);
    v.x_box = c.number("x_box", v.x_box);
    v.y_box = c.number("y_box", v.y_box);
    v.t_max = c.number("t_max", v.t_max);
  }
  rc.validation.seed = e.seed;
  try {
    e.validate();
  } catch (const ConfigError& err) {
    throw ConfigFieldError("/", err.what());
  }
  return rc;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigFieldError(path, "cannot open config file");
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigFieldError(path + ": byte " + std::to_string(e.byte), e.what());
  }
  return parse_run_config(doc);
}

}  // namespace fastslow
