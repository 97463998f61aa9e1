#pragma once

// Experiment configuration (INI text) and the command runners behind the CLI.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <json.hpp>

#include "uipx/closed_form.hpp"
#include "uipx/contracts.hpp"
#include "uipx/errors.hpp"
#include "uipx/grid.hpp"
#include "uipx/hjb_solver.hpp"
#include "uipx/market_models.hpp"
#include "uipx/strategies.hpp"
#include "uipx/surface_io.hpp"
#include "uipx/verification.hpp"

namespace uipx {

// ---------------------------------------------------------------------------
// Raw key-value parsing.

using ConfigTree = boost::property_tree::ptree;

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

/// Number with optional ln(...) / exp(...) wrappers, e.g. "ln(21.6)".
inline double parse_number(const std::string& raw, const std::string& key) {
  const std::string s = trim(raw);
  auto wrapped = [&](const char* fn) {
    const std::string f(fn);
    return s.size() > f.size() + 2 && s.compare(0, f.size() + 1, f + "(") == 0 && s.back() == ')';
  };
  if (wrapped("ln")) return std::log(parse_number(s.substr(3, s.size() - 4), key));
  if (wrapped("exp")) return std::exp(parse_number(s.substr(4, s.size() - 5), key));
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "': cannot parse number '" + s + "'");
  }
  if (used != s.size()) throw ConfigError("key '" + key + "': trailing text in number '" + s + "'");
  return v;
}

inline std::vector<double> parse_list(const std::string& raw, const std::string& key) {
  std::vector<double> out;
  std::stringstream ss(raw);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (trim(item).empty()) continue;
    out.push_back(parse_number(item, key));
  }
  return out;
}

inline ConfigTree parse_config_text(const std::string& text) {
  ConfigTree t;
  std::istringstream is(text);
  try {
    boost::property_tree::ini_parser::read_ini(is, t);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(std::string("config parse error: ") + e.message() + " at line " + std::to_string(e.line()));
  }
  return t;
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

/// Sorted "section.key=value" lines, the basis of the config hash.
inline std::string canonical_config(const ConfigTree& t) {
  std::map<std::string, std::string> flat;
  for (const auto& [sec, body] : t) {
    for (const auto& [key, val] : body) flat[sec + "." + key] = trim(val.data());
  }
  std::string out;
  for (const auto& [k, v] : flat) out += k + "=" + v + "\n";
  return out;
}

namespace detail {

inline const std::map<std::string, std::set<std::string>>& allowed_keys() {
  static const std::map<std::string, std::set<std::string>> keys{
      {"model",
       {"family", "a", "k", "sigma_f", "delta", "theta", "sigma", "rho", "horizon", "k_c", "k_d", "alpha_c",
        "alpha_d", "sigma_c", "sigma_d", "eta", "mu_f", "maturities"}},
      {"contract",
       {"type", "strike", "u_max", "volume_min", "volume_max", "penalty_scale", "penalty", "z_max", "kappa",
        "kappa_phi", "u_grid_points", "k1", "k2", "k3", "z_base", "bleed", "target"}},
      {"solver",
       {"x_min", "x_max", "spot_min", "spot_max", "x2_min", "x2_max", "I", "I2", "J", "N", "bc_x_min", "bc_x_max",
        "bc_x2_min", "bc_x2_max", "j0"}},
      {"run",
       {"gamma", "q", "sweep", "sweep_values", "reference_values", "probe_t", "probe_x", "probe_x2", "probe_z",
        "slice_times", "policy_time", "hedge_time", "seed", "verify", "verify_k", "dp_horizon", "dp_steps",
        "dp_u_choices", "dp_x0", "dp_volume_max", "dp_x_half_width", "dp_I", "tolerance_dp", "dual_I", "dual_J",
        "tolerance_dual", "mc_paths", "mc_steps", "mc_x0", "mc_I", "mc_J", "tolerance_mc", "audit_samples"}},
  };
  return keys;
}

}  // namespace detail

/// Rejects unknown sections and keys, naming the offender.
inline void check_known_keys(const ConfigTree& t) {
  const auto& allowed = detail::allowed_keys();
  for (const auto& [sec, body] : t) {
    const auto it = allowed.find(sec);
    if (it == allowed.end()) {
      if (!body.data().empty() && body.empty()) throw ConfigError("key '" + sec + "' must be inside a section");
      throw ConfigError("unknown config section [" + sec + "]");
    }
    for (const auto& [key, val] : body) {
      if (!it->second.count(key)) throw ConfigError("unknown config key '" + sec + "." + key + "'");
    }
  }
}

// ---------------------------------------------------------------------------
// Typed configuration.

struct CvConfig {
  double k_c = 1.0, k_d = 2.0, alpha_c = -0.5, alpha_d = 1.0;
  double sigma_c = 0.3, sigma_d = 0.4, eta = 3.0, rho = 0.3;
  std::vector<double> mu_f{0.05};
  std::vector<double> maturities{1.0};
  double horizon = 1.0;

  CarteaVillaplanaModel build() const {
    CarteaVillaplanaModel m;
    m.k_c = k_c;
    m.k_d = k_d;
    m.alpha_c = alpha_c;
    m.alpha_d = alpha_d;
    m.sigma_c = [s = sigma_c](double) { return s; };
    m.sigma_d = [s = sigma_d](double) { return s; };
    m.eta = [e = eta](double) { return e; };
    m.rho = rho;
    const std::vector<double> mu = mu_f;
    m.forward_drift = [mu](double) {
      Vec v(static_cast<int>(mu.size()));
      for (std::size_t i = 0; i < mu.size(); ++i) v(static_cast<int>(i)) = mu[i];
      return v;
    };
    m.maturities = maturities;
    m.horizon = horizon;
    m.validate();
    return m;
  }
};

struct SolverConfig {
  std::vector<Axis> x_axes;
  int J = 100;
  int N = 0;
  BoundaryPolicy bc;
  std::string j0 = "auto";  // auto | riccati | field | zero
};

struct VerifyConfig {
  std::vector<std::string> checks{"dp", "dual", "mc"};
  double k = 0.0;
  double dp_horizon = 0.25;
  int dp_steps = 8;
  int dp_u_choices = 2;
  double dp_x0 = 3.5;
  double dp_volume_max = 0.125;
  double dp_x_half_width = 1.5;
  int dp_I = 120;
  double tolerance_dp = 0.05;
  int dual_I = 100;
  int dual_J = 400;
  double tolerance_dual = 1e-3;
  int mc_paths = 20000;
  int mc_steps = 200;
  double mc_x0 = 3.5;
  int mc_I = 100;
  int mc_J = 100;
  double tolerance_mc = 0.05;
  int audit_samples = 2000;
};

struct ExperimentConfig {
  std::string family = "linear";  // linear | cartea_villaplana
  LinearDynamicsParams linear;
  CvConfig cv;
  ContractSpec contract;
  SolverConfig solver;

  double gamma = 0.01;
  double q = 1.0;
  std::string sweep = "none";
  std::vector<double> sweep_values;
  std::vector<double> reference_values;
  double probe_t = 0.5;
  std::vector<double> probe_x;
  double probe_z = 0.0;
  std::vector<double> slice_times{0.5};
  double policy_time = 0.75;
  double hedge_time = 0.5;
  std::uint64_t seed = 42;
  VerifyConfig verify;

  std::string canonical;
  std::uint64_t hash = 0;

  std::string hash_hex() const { return hex64(hash); }
  int dims() const { return family == "linear" ? 1 : 2; }

  Grid grid() const {
    Grid g;
    g.horizon = family == "linear" ? linear.horizon : cv.horizon;
    g.time_steps = solver.N;
    g.x_axes = solver.x_axes;
    g.z_axis = Axis{0.0, contract.z_max, solver.J};
    g.validate();
    return g;
  }
};

namespace detail {

class Reader {
 public:
  explicit Reader(const ConfigTree& t) : t_(t) {}
  bool has(const std::string& path) const { return static_cast<bool>(t_.get_optional<std::string>(path)); }
  std::string str(const std::string& path, const std::string& def) const {
    return trim(t_.get<std::string>(path, def));
  }
  std::string str_required(const std::string& path) const {
    auto v = t_.get_optional<std::string>(path);
    if (!v) throw ConfigError("missing required key '" + path + "'");
    return trim(*v);
  }
  double num(const std::string& path, double def) const {
    auto v = t_.get_optional<std::string>(path);
    return v ? parse_number(*v, path) : def;
  }
  double num_required(const std::string& path) const { return parse_number(str_required(path), path); }
  int integer(const std::string& path, int def) const {
    const double v = num(path, def);
    if (v != std::floor(v) || std::abs(v) > 1e9) throw ConfigError("key '" + path + "' must be an integer");
    return static_cast<int>(v);
  }
  std::vector<double> list_required(const std::string& path) const { return parse_list(str_required(path), path); }
  std::vector<double> list(const std::string& path, std::vector<double> def) const {
    auto v = t_.get_optional<std::string>(path);
    return v ? parse_list(*v, path) : def;
  }

 private:
  const ConfigTree& t_;
};

inline FaceRule parse_face(const std::string& s, const std::string& key) {
  if (s == "second_derivative_zero") return FaceRule::SecondDerivativeZero;
  if (s == "one_sided") return FaceRule::OneSidedStencil;
  if (s == "explicit_expectation") return FaceRule::ExplicitExpectation;
  throw ConfigError("key '" + key + "': unknown boundary rule '" + s + "'");
}

}  // namespace detail

/// Builds a typed config from parsed text after applying overrides.
inline ExperimentConfig load_config(ConfigTree t) {
  check_known_keys(t);
  const detail::Reader r(t);
  ExperimentConfig c;
  c.canonical = canonical_config(t);
  c.hash = fnv1a64(c.canonical);

  c.family = r.str_required("model.family");
  if (c.family == "linear") {
    auto& p = c.linear;
    p.a = r.num_required("model.a");
    p.k = r.num_required("model.k");
    p.sigma_f = r.num_required("model.sigma_f");
    p.delta = r.num_required("model.delta");
    p.theta = r.num_required("model.theta");
    p.sigma = r.num_required("model.sigma");
    p.rho = r.num_required("model.rho");
    p.horizon = r.num_required("model.horizon");
  } else if (c.family == "cartea_villaplana") {
    auto& v = c.cv;
    v.k_c = r.num_required("model.k_c");
    v.k_d = r.num_required("model.k_d");
    v.alpha_c = r.num_required("model.alpha_c");
    v.alpha_d = r.num_required("model.alpha_d");
    v.sigma_c = r.num_required("model.sigma_c");
    v.sigma_d = r.num_required("model.sigma_d");
    v.eta = r.num_required("model.eta");
    v.rho = r.num_required("model.rho");
    v.mu_f = r.list_required("model.mu_f");
    v.maturities = r.list_required("model.maturities");
    v.horizon = r.num_required("model.horizon");
    if (v.mu_f.size() != v.maturities.size()) throw ConfigError("model.mu_f needs one entry per maturity");
  } else {
    throw ConfigError("key 'model.family': unknown family '" + c.family + "'");
  }

  const std::string type = r.str_required("contract.type");
  c.contract.z_max = r.num_required("contract.z_max");
  c.contract.u_grid_points = r.integer("contract.u_grid_points", 101);
  if (type == "swing") {
    SwingSpec s;
    s.strike = r.num_required("contract.strike");
    s.u_max = r.num_required("contract.u_max");
    s.volume_min = r.num_required("contract.volume_min");
    s.volume_max = r.num_required("contract.volume_max");
    s.penalty_scale = r.num_required("contract.penalty_scale");
    const std::string pen = r.str_required("contract.penalty");
    if (pen == "two_sided") {
      s.penalty = PenaltyKind::TwoSided;
    } else if (pen == "upper") {
      s.penalty = PenaltyKind::UpperOnly;
    } else {
      throw ConfigError("key 'contract.penalty': expected two_sided or upper, got '" + pen + "'");
    }
    c.contract.payoff = s;
  } else if (type == "storage") {
    StorageSpec s;
    s.k1 = r.num_required("contract.k1");
    s.k2 = r.num_required("contract.k2");
    s.k3 = r.num_required("contract.k3");
    s.z_base = r.num_required("contract.z_base");
    s.bleed = r.num_required("contract.bleed");
    s.penalty_scale = r.num_required("contract.penalty_scale");
    s.target = r.num("contract.target", s.target);
    c.contract.payoff = s;
  } else {
    throw ConfigError("key 'contract.type': unknown contract type '" + type + "'");
  }
  if (r.has("contract.kappa")) c.contract.clamp.kappa = r.num_required("contract.kappa");
  if (r.has("contract.kappa_phi")) c.contract.clamp.kappa_phi = r.num_required("contract.kappa_phi");
  c.contract.validate();

  auto bound = [&](const std::string& xkey, const std::string& skey, bool allow_spot) {
    if (r.has("solver." + xkey) && allow_spot && r.has("solver." + skey)) {
      throw ConfigError("give either solver." + xkey + " or solver." + skey + ", not both");
    }
    if (allow_spot && r.has("solver." + skey)) return std::log(r.num_required("solver." + skey));
    return r.num_required("solver." + xkey);
  };
  const bool spot_ok = c.family == "linear";
  c.solver.x_axes.push_back(
      Axis{bound("x_min", "spot_min", spot_ok), bound("x_max", "spot_max", spot_ok), r.integer("solver.I", 200)});
  if (c.dims() == 2) {
    c.solver.x_axes.push_back(
        Axis{r.num_required("solver.x2_min"), r.num_required("solver.x2_max"), r.integer("solver.I2", 80)});
  }
  c.solver.J = r.integer("solver.J", 100);
  c.solver.N = r.integer("solver.N", 0);
  c.solver.bc = BoundaryPolicy::uniform(c.dims());
  c.solver.bc.faces[0][0] = detail::parse_face(r.str("solver.bc_x_min", "second_derivative_zero"), "solver.bc_x_min");
  c.solver.bc.faces[0][1] = detail::parse_face(r.str("solver.bc_x_max", "second_derivative_zero"), "solver.bc_x_max");
  if (c.dims() == 2) {
    c.solver.bc.faces[1][0] =
        detail::parse_face(r.str("solver.bc_x2_min", "second_derivative_zero"), "solver.bc_x2_min");
    c.solver.bc.faces[1][1] =
        detail::parse_face(r.str("solver.bc_x2_max", "second_derivative_zero"), "solver.bc_x2_max");
  }
  c.solver.j0 = r.str("solver.j0", "auto");
  if (c.solver.j0 != "auto" && c.solver.j0 != "riccati" && c.solver.j0 != "field" && c.solver.j0 != "zero") {
    throw ConfigError("key 'solver.j0': expected auto, riccati, field or zero");
  }
  if (c.solver.j0 == "riccati" && c.family != "linear") {
    throw ConfigError("key 'solver.j0': the Riccati gradient exists only for the linear family");
  }

  c.sweep = r.str("run.sweep", "none");
  if (c.sweep != "none" && c.sweep != "gamma" && c.sweep != "rho" && c.sweep != "q" && c.sweep != "k") {
    throw ConfigError("key 'run.sweep': expected none, gamma, rho, q or k");
  }
  c.sweep_values = r.list("run.sweep_values", {});
  if (c.sweep != "none" && c.sweep_values.empty()) throw ConfigError("run.sweep needs run.sweep_values");
  // a swept parameter takes its values from the sweep
  c.gamma = c.sweep == "gamma" && !r.has("run.gamma") ? c.sweep_values.front() : r.num_required("run.gamma");
  c.linear.gamma = c.gamma;
  c.q = c.sweep == "q" && !r.has("run.q") ? c.sweep_values.front() : r.num_required("run.q");
  if (c.sweep == "k" && c.family != "linear") throw ConfigError("run.sweep = k needs the linear family");
  c.reference_values = r.list("run.reference_values", {});
  if (!c.reference_values.empty() && c.reference_values.size() != std::max<std::size_t>(1, c.sweep_values.size())) {
    throw ConfigError("run.reference_values needs one entry per sweep value");
  }
  c.probe_t = r.num("run.probe_t", 0.5);
  c.probe_x = r.list("run.probe_x", {});
  if (r.has("run.probe_x2")) c.probe_x.push_back(r.num_required("run.probe_x2"));
  if (c.probe_x.empty()) {
    for (const auto& a : c.solver.x_axes) c.probe_x.push_back(0.5 * (a.lo + a.hi));
  }
  if (static_cast<int>(c.probe_x.size()) != c.dims()) throw ConfigError("run.probe_x has the wrong dimension");
  c.probe_z = r.num("run.probe_z", 0.0);
  c.slice_times = r.list("run.slice_times", {0.5});
  c.policy_time = r.num("run.policy_time", 0.75);
  c.hedge_time = r.num("run.hedge_time", 0.5);
  const double seed = r.num("run.seed", 42);
  if (seed < 0 || seed != std::floor(seed)) throw ConfigError("key 'run.seed' must be a nonnegative integer");
  c.seed = static_cast<std::uint64_t>(seed);

  auto& v = c.verify;
  if (r.has("run.verify")) {
    v.checks.clear();
    std::stringstream ss(r.str_required("run.verify"));
    std::string item;
    while (std::getline(ss, item, ',')) {
      item = trim(item);
      if (item.empty()) continue;
      if (item != "dp" && item != "dual" && item != "mc") throw ConfigError("key 'run.verify': unknown check '" + item + "'");
      v.checks.push_back(item);
    }
  }
  v.k = r.num("run.verify_k", v.k);
  v.dp_horizon = r.num("run.dp_horizon", v.dp_horizon);
  v.dp_steps = r.integer("run.dp_steps", v.dp_steps);
  v.dp_u_choices = r.integer("run.dp_u_choices", v.dp_u_choices);
  v.dp_x0 = r.num("run.dp_x0", v.dp_x0);
  v.dp_volume_max = r.num("run.dp_volume_max", v.dp_volume_max);
  v.dp_x_half_width = r.num("run.dp_x_half_width", v.dp_x_half_width);
  v.dp_I = r.integer("run.dp_I", v.dp_I);
  v.tolerance_dp = r.num("run.tolerance_dp", v.tolerance_dp);
  v.dual_I = r.integer("run.dual_I", v.dual_I);
  v.dual_J = r.integer("run.dual_J", v.dual_J);
  v.tolerance_dual = r.num("run.tolerance_dual", v.tolerance_dual);
  v.mc_paths = r.integer("run.mc_paths", v.mc_paths);
  v.mc_steps = r.integer("run.mc_steps", v.mc_steps);
  v.mc_x0 = r.num("run.mc_x0", v.mc_x0);
  v.mc_I = r.integer("run.mc_I", v.mc_I);
  v.mc_J = r.integer("run.mc_J", v.mc_J);
  v.tolerance_mc = r.num("run.tolerance_mc", v.tolerance_mc);
  v.audit_samples = r.integer("run.audit_samples", v.audit_samples);

  if (c.family == "linear") c.linear.validate();
  c.grid();  // validates the mesh
  return c;
}

struct Overrides {
  std::optional<std::array<int, 3>> grid;  // I, J, N
  std::optional<std::uint64_t> seed;
};

/// Parses "IxJxN" (N may be 0 for automatic).
inline std::array<int, 3> parse_grid_override(const std::string& s) {
  std::array<int, 3> out{};
  std::stringstream ss(s);
  std::string item;
  int i = 0;
  while (std::getline(ss, item, 'x')) {
    if (i >= 3) throw ConfigError("--grid expects IxJxN");
    try {
      std::size_t used = 0;
      out[i] = std::stoi(item, &used);
      if (used != item.size()) throw ConfigError("");
    } catch (const std::exception&) {
      throw ConfigError("--grid expects IxJxN with integer entries, got '" + s + "'");
    }
    ++i;
  }
  if (i != 3) throw ConfigError("--grid expects IxJxN");
  return out;
}

inline ExperimentConfig load_config_text(const std::string& text, const Overrides& o = {}) {
  ConfigTree t = parse_config_text(text);
  if (o.grid) {
    t.put("solver.I", std::to_string((*o.grid)[0]));
    t.put("solver.J", std::to_string((*o.grid)[1]));
    t.put("solver.N", std::to_string((*o.grid)[2]));
  }
  if (o.seed) t.put("run.seed", std::to_string(*o.seed));
  return load_config(std::move(t));
}

// ---------------------------------------------------------------------------
// Model assembly and single solves.

struct PricingSetup {
  MarketModel model;
  std::optional<ConstantCorrelationModel> cc;
  std::shared_ptr<const RiccatiSolution> riccati;
  J0Gradient j0;
  double gamma = 0.01;
  double q = 1.0;
};

/// Model for one run, with `param` (gamma, rho, q, k or none) set to `value`.
inline PricingSetup make_setup(const ExperimentConfig& c, const std::string& param = "none", double value = 0.0) {
  PricingSetup s;
  s.gamma = param == "gamma" ? value : c.gamma;
  s.q = param == "q" ? value : c.q;
  if (c.family == "linear") {
    LinearDynamicsParams p = c.linear;
    p.gamma = s.gamma;
    if (param == "rho") p.rho = value;
    if (param == "k") p.k = value;
    s.cc = linear_dynamics_model(p);
    s.model = to_market_model(*s.cc);
    const std::string mode = c.solver.j0 == "auto" ? "riccati" : c.solver.j0;
    if (mode == "riccati") {
      s.riccati = std::make_shared<RiccatiSolution>(solve_riccati(p));
      s.j0 = J0Gradient::from_riccati(s.riccati);
    } else if (mode == "field") {
      const auto field = solve_J0_field(s.model, c.contract, s.gamma, c.grid(), SolveOptions{c.solver.bc, {}, 0, {}});
      s.j0 = J0Gradient::from_field(field);
    }
  } else {
    CvConfig cv = c.cv;
    if (param == "rho") cv.rho = value;
    if (param == "k") throw ConfigError("sweep over k needs the linear family");
    s.model = to_market_model(cv.build());
    // coefficients depend on time only, so J0_x vanishes
    s.j0 = J0Gradient::zero();
  }
  return s;
}

inline SolveOptions base_options(const ExperimentConfig& c, std::vector<double> extra_times = {}) {
  SolveOptions o;
  o.bc = c.solver.bc;
  o.store_times = c.slice_times;
  o.store_times.push_back(c.probe_t);
  for (double t : extra_times) o.store_times.push_back(t);
  return o;
}

inline Vec probe_point(const ExperimentConfig& c) {
  Vec x(c.dims());
  for (int k = 0; k < c.dims(); ++k) x(k) = c.probe_x[k];
  return x;
}

// ---------------------------------------------------------------------------
// Output helpers.

inline std::vector<std::string> provenance_header(const ExperimentConfig& c, const std::string& what) {
  return {"uipx " + what, std::string("solver_version=") + kSolverVersion, "config_hash=" + c.hash_hex()};
}

inline void ensure_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw ConfigError("cannot create output directory " + dir + ": " + ec.message());
}

inline std::ofstream open_out(const std::string& dir, const std::string& name) {
  std::ofstream os(std::filesystem::path(dir) / name);
  if (!os) throw ConfigError("cannot write " + name + " in " + dir);
  return os;
}

inline void write_slices_csv(const std::string& dir, const std::string& name, const Surface& s,
                             const std::vector<double>& times, const std::vector<std::string>& header) {
  auto os = open_out(dir, name);
  const Grid& g = s.grid();
  for (const auto& h : header) os << "# " << h << '\n';
  os << "t";
  for (int k = 0; k < g.x_dims(); ++k) os << (k == 0 ? ",x" : ",x2");
  os << ",z,value\n";
  std::set<int> done;
  for (double t : times) {
    const Slice& sl = s.at(t);
    if (!done.insert(sl.time_index).second) continue;
    for (std::size_t xi = 0; xi < g.x_count(); ++xi) {
      const Vec x = g.x_point(xi);
      for (int j = 0; j < g.nz(); ++j) {
        os << format_double(sl.t);
        for (int k = 0; k < g.x_dims(); ++k) os << ',' << format_double(x(k));
        os << ',' << format_double(g.z(j)) << ',' << format_double(sl.values[g.flat(xi, j)]) << '\n';
      }
    }
  }
}

/// Shares of interior (x, z) node pairs where the slice increases in x and decreases in z.
struct ShapeReport {
  double increasing_in_x = 0.0;
  double nonincreasing_in_z = 0.0;
};

inline ShapeReport shape_report(const Surface& s, double t, double z_cut) {
  const Grid& g = s.grid();
  const Slice& sl = s.at(t);
  long nx = 0, okx = 0, nzc = 0, okz = 0;
  for (std::size_t xi = 0; xi + 1 < g.x_count(); ++xi) {
    if (g.x_multi_index(xi)[0] == g.x_axes[0].intervals) continue;
    const std::size_t nb = xi + g.x_stride(0);
    for (int j = 0; j + 1 < g.nz(); ++j) {
      if (g.z(j) >= z_cut) break;
      ++nx;
      if (sl.values[g.flat(nb, j)] > sl.values[g.flat(xi, j)]) ++okx;
      ++nzc;
      if (sl.values[g.flat(xi, j + 1)] <= sl.values[g.flat(xi, j)] + 1e-12) ++okz;
    }
  }
  return {nx ? double(okx) / nx : 1.0, nzc ? double(okz) / nzc : 1.0};
}

using Json = nlohmann::ordered_json;

inline Json grid_json(const Grid& g) {
  Json j;
  Json xs = Json::array();
  for (const auto& a : g.x_axes) xs.push_back({{"min", a.lo}, {"max", a.hi}, {"intervals", a.intervals}});
  j["x"] = xs;
  j["z"] = {{"max", g.z_axis.hi}, {"intervals", g.z_axis.intervals}};
  j["time_steps"] = g.time_steps;
  return j;
}

inline void write_summary(const std::string& dir, const ExperimentConfig& c, const std::string& command, Json body,
                          double wall_seconds) {
  Json j;
  j["command"] = command;
  j["solver_version"] = kSolverVersion;
  j["config_hash"] = c.hash_hex();
  j["seed"] = c.seed;
  for (auto it = body.begin(); it != body.end(); ++it) j[it.key()] = it.value();
  j["wall_time_seconds"] = wall_seconds;
  auto os = open_out(dir, "summary.json");
  os << j.dump(2) << '\n';
}

class WallClock {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

inline std::vector<std::pair<std::string, double>> sweep_points(const ExperimentConfig& c) {
  if (c.sweep == "none") return {{"none", 0.0}};
  std::vector<std::pair<std::string, double>> out;
  for (double v : c.sweep_values) out.emplace_back(c.sweep, v);
  return out;
}

inline std::string value_label(const std::string& param, double v) {
  if (param == "none") return "base";
  std::ostringstream os;
  os << param << "_" << v;
  return os.str();
}

// ---------------------------------------------------------------------------
// Commands. Each returns the process exit code; errors propagate as exceptions.

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 1;
inline constexpr int kExitNumerical = 2;
inline constexpr int kExitVerification = 3;

struct ProbeRow {
  std::string param;
  double value = 0.0;
  double uip = 0.0;
  int time_steps = 0;
  double dt_stable = 0.0;
};

/// Solves the UIP equation for every sweep value; writes surfaces, probes and a summary.
inline int cmd_price(const ExperimentConfig& c, const std::string& out_dir, std::vector<ProbeRow>* rows_out = nullptr) {
  WallClock clock;
  ensure_dir(out_dir);
  const Grid g = c.grid();
  const Vec xp = probe_point(c);
  std::vector<ProbeRow> rows;
  Json runs = Json::array();
  for (const auto& [param, value] : sweep_points(c)) {
    const PricingSetup s = make_setup(c, param, value);
    const Surface v = solve_uip_pde(s.model, c.contract, s.q, s.gamma, s.j0, g, base_options(c));
    ProbeRow row{param, value, probe(v, c.probe_t, xp, c.probe_z), v.grid().time_steps, v.meta().dt_stable};
    rows.push_back(row);
    const std::string label = value_label(param, value);
    auto header = provenance_header(c, "price surface " + label);
    write_slices_csv(out_dir, "price_" + label + ".csv", v, c.slice_times, header);
    const ShapeReport shape = shape_report(v, c.probe_t, 0.25);
    Json run{{"label", label},
             {"parameter", param},
             {"value", value},
             {"probe_uip", row.uip},
             {"grid", grid_json(v.grid())},
             {"dt_stable", row.dt_stable},
             {"dt", v.grid().horizon / v.grid().time_steps},
             {"share_increasing_in_x", shape.increasing_in_x},
             {"share_nonincreasing_in_z", shape.nonincreasing_in_z}};
    runs.push_back(run);
  }
  {
    auto os = open_out(out_dir, "probes.csv");
    for (const auto& h : provenance_header(c, "probe values")) os << "# " << h << '\n';
    os << "# probe t=" << format_double(c.probe_t);
    for (int k = 0; k < c.dims(); ++k) os << " x" << k << "=" << format_double(xp(k));
    os << " z=" << format_double(c.probe_z) << '\n';
    os << "parameter,value,uip,reference,relative_error,time_steps,dt_stable\n";
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const auto& r = rows[i];
      os << r.param << ',' << format_double(r.value) << ',' << format_double(r.uip) << ',';
      if (i < c.reference_values.size()) {
        const double ref = c.reference_values[i];
        os << format_double(ref) << ',' << format_double(std::abs(r.uip - ref) / std::abs(ref));
      } else {
        os << ',';
      }
      os << ',' << r.time_steps << ',' << format_double(r.dt_stable) << '\n';
    }
  }
  bool monotone = true;
  if (rows.size() > 1) {
    for (std::size_t i = 1; i < rows.size(); ++i) {
      const double d = rows[i].uip - rows[i - 1].uip;
      if (c.sweep == "gamma" && !(d < 0.0)) monotone = false;
      if (c.sweep == "rho" && !(d > 0.0)) monotone = false;
    }
  }
  Json body{{"runs", runs}};
  if (c.sweep == "gamma" || c.sweep == "rho") body["strictly_monotone"] = monotone;
  write_summary(out_dir, c, "price", body, clock.seconds());
  if (rows_out) *rows_out = rows;
  return kExitOk;
}

/// UIP and risk-neutral surfaces on the same grid, plus their difference.
inline int cmd_compare_classical(const ExperimentConfig& c, const std::string& out_dir) {
  WallClock clock;
  ensure_dir(out_dir);
  const Grid g = c.grid();
  const PricingSetup s = make_setup(c);
  const Surface v = solve_uip_pde(s.model, c.contract, s.q, s.gamma, s.j0, g, base_options(c));
  Grid gr = g;
  gr.time_steps = v.grid().time_steps;
  const Surface rn = solve_risk_neutral_pde(s.model, c.contract, s.q, gr, base_options(c));
  write_slices_csv(out_dir, "uip.csv", v, c.slice_times, provenance_header(c, "utility indifference price"));
  write_slices_csv(out_dir, "classical.csv", rn, c.slice_times, provenance_header(c, "risk-neutral price"));
  Surface diff(v.grid(), v.meta());
  double max_diff = -INFINITY, min_diff = INFINITY;
  for (const auto& sl : v.slices()) {
    const Slice& other = rn.at(sl.t);
    Slice d{sl.time_index, sl.t, std::vector<double>(sl.values.size())};
    for (std::size_t i = 0; i < d.values.size(); ++i) d.values[i] = other.values[i] - sl.values[i];
    diff.add_slice(std::move(d));
  }
  const Slice& probe_slice = diff.at(c.probe_t);
  for (double d : probe_slice.values) {
    max_diff = std::max(max_diff, d);
    min_diff = std::min(min_diff, d);
  }
  write_slices_csv(out_dir, "difference.csv", diff, c.slice_times,
                   provenance_header(c, "classical minus utility indifference price"));
  const Vec xp = probe_point(c);
  Json body{{"grid", grid_json(v.grid())},
            {"probe_uip", probe(v, c.probe_t, xp, c.probe_z)},
            {"probe_classical", probe(rn, c.probe_t, xp, c.probe_z)},
            {"difference_max", max_diff},
            {"difference_min", min_diff}};
  write_summary(out_dir, c, "compare-classical", body, clock.seconds());
  return kExitOk;
}

/// Exercise policy, switching boundary and hedge fields.
inline int cmd_strategy(const ExperimentConfig& c, const std::string& out_dir) {
  WallClock clock;
  ensure_dir(out_dir);
  const Grid g = c.grid();
  const PricingSetup s = make_setup(c);
  const Surface v = solve_uip_pde(s.model, c.contract, s.q, s.gamma, s.j0, g,
                                  base_options(c, {c.policy_time, c.hedge_time}));
  const PolicySlice pol = exercise_policy(v, c.contract, s.model, s.q, c.policy_time);
  const VectorField hedge = hedge_strategy(v, s.model, c.hedge_time);
  const Grid& gg = v.grid();
  {
    auto os = open_out(out_dir, "policy.csv");
    for (const auto& h : provenance_header(c, "exercise policy")) os << "# " << h << '\n';
    os << "t";
    for (int k = 0; k < gg.x_dims(); ++k) os << (k == 0 ? ",x" : ",x2");
    os << ",z,u\n";
    for (std::size_t xi = 0; xi < gg.x_count(); ++xi) {
      const Vec x = gg.x_point(xi);
      for (int j = 0; j < gg.nz(); ++j) {
        os << format_double(pol.t);
        for (int k = 0; k < gg.x_dims(); ++k) os << ',' << format_double(x(k));
        os << ',' << format_double(gg.z(j)) << ',' << format_double(pol.u[gg.flat(xi, j)]) << '\n';
      }
    }
  }
  const SwitchingBoundary sb = switching_boundary(pol);
  {
    auto os = open_out(out_dir, "switching_boundary.csv");
    for (const auto& h : provenance_header(c, "exercise boundary (largest exercised z per x node)")) {
      os << "# " << h << '\n';
    }
    os << "t";
    for (int k = 0; k < gg.x_dims(); ++k) os << (k == 0 ? ",x" : ",x2");
    os << ",z_threshold,switches\n";
    for (std::size_t xi = 0; xi < gg.x_count(); ++xi) {
      const Vec x = gg.x_point(xi);
      os << format_double(pol.t);
      for (int k = 0; k < gg.x_dims(); ++k) os << ',' << format_double(x(k));
      os << ',' << (std::isnan(sb.z_threshold[xi]) ? std::string("") : format_double(sb.z_threshold[xi])) << ','
         << sb.switches[xi] << '\n';
    }
  }
  double h_max = -INFINITY, h_min = INFINITY;
  {
    auto os = open_out(out_dir, "hedge.csv");
    for (const auto& h : provenance_header(c, "hedge in forward contracts")) os << "# " << h << '\n';
    os << "t";
    for (int k = 0; k < gg.x_dims(); ++k) os << (k == 0 ? ",x" : ",x2");
    os << ",z";
    for (int i = 0; i < hedge.components; ++i) os << ",h" << (i + 1);
    os << '\n';
    for (std::size_t xi = 0; xi < gg.x_count(); ++xi) {
      const Vec x = gg.x_point(xi);
      for (int j = 0; j < gg.nz(); ++j) {
        os << format_double(hedge.t);
        for (int k = 0; k < gg.x_dims(); ++k) os << ',' << format_double(x(k));
        os << ',' << format_double(gg.z(j));
        for (int i = 0; i < hedge.components; ++i) {
          const double h = hedge.at(gg.flat(xi, j), i);
          h_max = std::max(h_max, h);
          h_min = std::min(h_min, h);
          os << ',' << format_double(h);
        }
        os << '\n';
      }
    }
  }
  long exercised = 0, multi = 0;
  for (double u : pol.u) exercised += u != 0.0;
  for (int sw : sb.switches) multi += sw > 1;
  Json body{{"grid", grid_json(gg)},
            {"policy_time", pol.t},
            {"hedge_time", hedge.t},
            {"exercised_nodes", exercised},
            {"fibers_with_multiple_switches", multi},
            {"hedge_max", h_max},
            {"hedge_min", h_min}};
  write_summary(out_dir, c, "strategy", body, clock.seconds());
  return kExitOk;
}

struct CheckResult {
  std::string name;
  bool pass = false;
  double observed = 0.0;
  double reference = 0.0;
  double error = 0.0;
  double tolerance = 0.0;
  std::string detail;
};

/// Max over interior nodes and stored slices of |a - b| / max(|b|, 1).
inline double max_relative_gap(const Surface& a, const Surface& b) {
  const Grid& g = b.grid();
  double m = 0.0;
  for (const auto& sb : b.slices()) {
    const Slice& sa = a.at(sb.t);
    for (std::size_t xi = 0; xi < g.x_count(); ++xi) {
      if (!g.x_interior(xi)) continue;
      for (int j = 1; j + 1 < g.nz(); ++j) {
        const std::size_t f = g.flat(xi, j);
        m = std::max(m, std::abs(sa.values[f] - sb.values[f]) / std::max(std::abs(sb.values[f]), 1.0));
      }
    }
  }
  return m;
}

inline CheckResult run_dp_check(const ExperimentConfig& c) {
  if (c.family != "linear") throw ConfigError("DP check needs the linear family");
  if (!c.contract.is_swing()) throw ConfigError("DP check needs a swing contract");
  const auto& vc = c.verify;
  LinearDynamicsParams p = c.linear;
  p.horizon = vc.dp_horizon;
  p.gamma = c.gamma;
  const auto cc = linear_dynamics_model(p);
  SwingSpec sw = c.contract.swing();
  sw.volume_max = vc.dp_volume_max;
  sw.volume_min = std::min(sw.volume_min, 0.5 * vc.dp_volume_max);
  ContractSpec contract = c.contract;
  contract.payoff = sw;
  contract.z_max = sw.u_max * vc.dp_horizon;
  contract.validate();
  DPConfig cfg;
  cfg.horizon = vc.dp_horizon;
  cfg.time_steps = vc.dp_steps;
  cfg.u_choices = vc.dp_u_choices;
  const DPResult dp = dp_value(cc, contract, c.q, c.gamma, cfg, vc.dp_x0);
  const Grid g = make_grid_1d(vc.dp_horizon, vc.dp_x0 - vc.dp_x_half_width, vc.dp_x0 + vc.dp_x_half_width, vc.dp_I,
                              contract.z_max, vc.dp_steps * (vc.dp_u_choices - 1));
  const auto ric = std::make_shared<RiccatiSolution>(solve_riccati(p));
  const Surface v = solve_uip_pde(to_market_model(cc), contract, c.q, c.gamma, J0Gradient::from_riccati(ric), g);
  const double pde = probe(v, 0.0, vc.dp_x0, 0.0);
  CheckResult r;
  r.name = "dp_vs_pde";
  r.observed = dp.uip;
  r.reference = pde;
  r.error = std::abs(dp.uip - pde) / std::max(std::abs(pde), 1e-12);
  if (pde == 0.0 && dp.uip == 0.0) r.error = 0.0;
  r.tolerance = vc.tolerance_dp;
  r.pass = r.error <= r.tolerance;
  std::ostringstream os;
  os << "DP " << vc.dp_steps << " steps, " << cfg.z_levels() << " z levels; PDE grid " << vc.dp_I << "x"
     << g.z_axis.intervals << "x" << v.grid().time_steps;
  r.detail = os.str();
  return r;
}

inline CheckResult run_dual_check(const ExperimentConfig& c) {
  if (c.family != "linear") throw ConfigError("dual check needs the linear family");
  const auto& vc = c.verify;
  LinearDynamicsParams p = c.linear;
  p.gamma = c.gamma;
  p.k = vc.k;
  const auto cc = linear_dynamics_model(p);
  const auto ric = std::make_shared<RiccatiSolution>(solve_riccati(p));
  const J0Gradient j0 = vc.k == 0.0 ? J0Gradient::zero() : J0Gradient::from_riccati(ric);
  Grid g = c.grid();
  g.x_axes[0].intervals = vc.dual_I;
  g.z_axis.intervals = vc.dual_J;
  SolveOptions o;
  o.bc = c.solver.bc;
  o.store_times = {0.25 * g.horizon, 0.5 * g.horizon, 0.75 * g.horizon};
  const Surface v = solve_uip_pde(to_market_model(cc), c.contract, c.q, c.gamma, j0, g, o);
  Grid gd = g;
  gd.time_steps = v.grid().time_steps;
  const Surface d = solve_dual_pde(cc, c.contract, c.q, c.gamma, j0, gd, o);
  CheckResult r;
  r.name = "dual_vs_uip_pde";
  r.error = max_relative_gap(d, v);
  r.tolerance = vc.tolerance_dual;
  r.pass = r.error <= r.tolerance;
  r.observed = probe(d, 0.0, 0.5 * (g.x_axes[0].lo + g.x_axes[0].hi), 0.0);
  r.reference = probe(v, 0.0, 0.5 * (g.x_axes[0].lo + g.x_axes[0].hi), 0.0);
  std::ostringstream os;
  os << "max relative gap over interior nodes, grid " << vc.dual_I << "x" << vc.dual_J << "x" << v.grid().time_steps
     << ", k=" << vc.k;
  r.detail = os.str();
  return r;
}

inline CheckResult run_mc_check(const ExperimentConfig& c) {
  if (c.family != "linear") throw ConfigError("Monte Carlo check needs the linear family");
  const auto& vc = c.verify;
  LinearDynamicsParams p = c.linear;
  p.gamma = c.gamma;
  p.k = vc.k;
  const auto cc = linear_dynamics_model(p);
  const auto ric = std::make_shared<RiccatiSolution>(solve_riccati(p));
  const J0Gradient j0 = vc.k == 0.0 ? J0Gradient::zero() : J0Gradient::from_riccati(ric);
  Grid g = c.grid();
  g.x_axes[0].intervals = vc.mc_I;
  g.z_axis.intervals = vc.mc_J;
  SolveOptions o;
  o.bc = c.solver.bc;
  o.store_every = 1;
  const Surface v = solve_uip_pde(to_market_model(cc), c.contract, c.q, c.gamma, j0, g, o);
  const MarketModel m = to_market_model(cc);
  const PolicyTable table(v, c.contract, m, c.q);
  const PathSet paths = simulate(cc, Measure::Q0, c.gamma, j0, vc.mc_x0, g.horizon, vc.mc_steps, vc.mc_paths, c.seed);
  const ExercisePolicy pol = [&table](double t, double x, double z) { return table(t, x, z); };
  const DualBoundResult b = dual_lower_bound(cc, c.contract, c.q, c.gamma, pol, paths, 0.0, &table);
  const double pde = probe(v, 0.0, vc.mc_x0, 0.0);
  CheckResult r;
  r.name = "dual_mc_bound";
  r.observed = b.value;
  r.reference = pde;
  r.error = std::abs(b.value - pde) / std::max(std::abs(pde), 1e-12);
  if (pde == 0.0 && b.value == 0.0) r.error = 0.0;
  r.tolerance = vc.tolerance_mc;
  const bool below = b.value <= pde + 3.0 * b.std_error;
  r.pass = below && r.error <= r.tolerance;
  std::ostringstream os;
  os << "bound " << b.value << " +- " << b.std_error << " (" << vc.mc_paths << " paths, seed " << c.seed
     << "); bound <= PDE + 3 se: " << (below ? "yes" : "no");
  for (const auto& w : b.warnings) os << "; " << w;
  r.detail = os.str();
  return r;
}

/// Oracle comparisons; exit code 3 when any check misses its tolerance.
inline int cmd_verify(const ExperimentConfig& c, const std::string& out_dir, std::vector<CheckResult>* out = nullptr) {
  WallClock clock;
  ensure_dir(out_dir);
  std::vector<CheckResult> results;
  for (const auto& name : c.verify.checks) {
    if (name == "dp") results.push_back(run_dp_check(c));
    if (name == "dual") results.push_back(run_dual_check(c));
    if (name == "mc") results.push_back(run_mc_check(c));
  }
  bool all = true;
  {
    auto os = open_out(out_dir, "verify.csv");
    for (const auto& h : provenance_header(c, "oracle comparison")) os << "# " << h << '\n';
    os << "check,pass,observed,reference,error,tolerance\n";
    for (const auto& r : results) {
      all = all && r.pass;
      os << r.name << ',' << (r.pass ? "pass" : "fail") << ',' << format_double(r.observed) << ','
         << format_double(r.reference) << ',' << format_double(r.error) << ',' << format_double(r.tolerance) << '\n';
    }
  }
  Json checks = Json::array();
  for (const auto& r : results) {
    checks.push_back({{"check", r.name},
                      {"pass", r.pass},
                      {"observed", r.observed},
                      {"reference", r.reference},
                      {"error", r.error},
                      {"tolerance", r.tolerance},
                      {"detail", r.detail}});
  }
  write_summary(out_dir, c, "verify", Json{{"checks", checks}, {"all_pass", all}}, clock.seconds());
  if (out) *out = results;
  return all ? kExitOk : kExitVerification;
}

/// Sampled check of the standing assumptions over the solver domain.
inline int cmd_audit(const ExperimentConfig& c, const std::string& out_dir, AuditReport* out = nullptr) {
  WallClock clock;
  ensure_dir(out_dir);
  const PricingSetup s = make_setup(c);
  AuditBox box;
  box.t_lo = 0.0;
  box.t_hi = s.model.horizon;
  box.x_lo = Vec(c.dims());
  box.x_hi = Vec(c.dims());
  for (int k = 0; k < c.dims(); ++k) {
    box.x_lo(k) = c.solver.x_axes[k].lo;
    box.x_hi(k) = c.solver.x_axes[k].hi;
  }
  const AuditReport r = audit_assumptions(s.model, box, c.verify.audit_samples, 1e-8, static_cast<unsigned>(c.seed));
  {
    auto os = open_out(out_dir, "audit.csv");
    for (const auto& h : provenance_header(c, "assumption audit")) os << "# " << h << '\n';
    os << "quantity,value\n";
    os << "samples," << r.samples << '\n';
    os << "ellipticity_min," << format_double(r.ellipticity_min) << '\n';
    os << "ellipticity_max," << format_double(r.ellipticity_max) << '\n';
    os << "max_rank_B," << r.max_rank_B << '\n';
    os << "min_eigen_B," << format_double(r.min_eigen_B) << '\n';
    os << "image_lambda_min," << format_double(r.image_lambda_min) << '\n';
    os << "image_lambda_max," << format_double(r.image_lambda_max) << '\n';
    os << "delta," << format_double(r.delta) << '\n';
    os << "max_asymmetry_B," << format_double(r.max_asymmetry_B) << '\n';
    os << "lipschitz_drift," << format_double(r.lipschitz_drift) << '\n';
    os << "lipschitz_vol," << format_double(r.lipschitz_vol) << '\n';
    os << "max_abs_mu_F," << format_double(r.max_abs_mu) << '\n';
  }
  Json body{{"samples", r.samples},      {"max_rank_B", r.max_rank_B}, {"delta", r.delta},
            {"ellipticity_min", r.ellipticity_min}, {"violations", r.violations}, {"ok", r.ok()}};
  write_summary(out_dir, c, "audit", body, clock.seconds());
  if (out) *out = r;
  return r.ok() ? kExitOk : kExitVerification;
}

}  // namespace uipx
