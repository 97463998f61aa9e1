#pragma once

// Independent oracles: a discrete-time dynamic program over a trinomial
// factor lattice, and Monte Carlo under the objective measure or Q0.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iterator>
#include <limits>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "uipx/contracts.hpp"
#include "uipx/errors.hpp"
#include "uipx/grid.hpp"
#include "uipx/hjb_solver.hpp"
#include "uipx/market_models.hpp"
#include "uipx/strategies.hpp"
#include "uipx/surface_io.hpp"

namespace uipx {

// ---------------------------------------------------------------------------
// Dynamic-programming oracle.

struct DPConfig {
  static constexpr int kMaxSteps = 16;
  static constexpr int kMaxZLevels = 32;
  static constexpr int kMaxUChoices = 5;
  static constexpr int kMaxPiPoints = 21;

  double horizon = 0.25;
  int time_steps = 8;
  int u_choices = 2;         // u in {0, ubar/(U-1), ..., ubar}
  int pi_points = 21;        // coarse scan before golden-section refinement
  double pi_bound_multiple = 5.0;

  /// z moves by ubar dt / (U - 1) per level.
  int z_levels() const { return time_steps * (u_choices - 1) + 1; }

  void validate() const {
    if (time_steps < 1 || time_steps > kMaxSteps) throw ConfigError("DP time steps must lie in [1, 16]");
    if (u_choices < 2 || u_choices > kMaxUChoices) throw ConfigError("DP u choices must lie in [2, 5]");
    if (z_levels() > kMaxZLevels) throw ConfigError("DP z levels exceed the cap of 32");
    if (pi_points < 3 || pi_points > kMaxPiPoints) throw ConfigError("DP pi grid must have 3 to 21 points");
    if (!(horizon > 0.0)) throw ConfigError("DP horizon must be positive");
    if (!(pi_bound_multiple > 0.0)) throw ConfigError("DP pi bound multiple must be positive");
  }
};

struct DPResult {
  double value = 0.0;        // V(q) at the initial state and wealth
  double value_no_claim = 0.0;
  double J = 0.0;            // -(1/gamma) log(-V(q)) at zero wealth
  double J0 = 0.0;
  double uip = 0.0;
  int lattice_nodes = 0;
  int pi_widenings = 0;
};

namespace detail {

/// Minimizes f over pi: coarse scan on [-bound, bound], then golden-section
/// search in the bracket around the best point. The bracket is widened while
/// the minimizer sits on its edge.
template <class F>
double minimize_convex(F&& f, double bound, int points, int& widenings) {
  for (int attempt = 0; attempt < 8; ++attempt) {
    double best_x = 0.0, best_f = std::numeric_limits<double>::infinity();
    int best_i = 0;
    const double h = 2.0 * bound / (points - 1);
    for (int i = 0; i < points; ++i) {
      const double x = -bound + i * h;
      const double v = f(x);
      if (v < best_f) {
        best_f = v;
        best_x = x;
        best_i = i;
      }
    }
    if ((best_i == 0 || best_i == points - 1) && attempt < 7) {
      bound *= 4.0;
      ++widenings;
      continue;
    }
    double a = best_x - h, b = best_x + h;
    const double r = 0.5 * (std::sqrt(5.0) - 1.0);
    double c = b - r * (b - a), d = a + r * (b - a);
    double fc = f(c), fd = f(d);
    for (int it = 0; it < 200 && (b - a) > 1e-12 * std::max(1.0, std::abs(best_x)); ++it) {
      if (fc < fd) {
        b = d;
        d = c;
        fd = fc;
        c = b - r * (b - a);
        fc = f(c);
      } else {
        a = c;
        c = d;
        fc = fd;
        d = a + r * (b - a);
        fd = f(d);
      }
    }
    const double x = 0.5 * (a + b);
    return std::min(f(x), best_f);
  }
  throw NumericalError("DP investment search did not bracket a minimizer");
}

struct LatticeBranch {
  double prob;
  int move;        // -1, 0, +1 in lattice units
  double ret;      // forward return over the step
};

}  // namespace detail

/// Backward induction for V(t, x, z, y) = max E[-(1/gamma) exp(-gamma (Y_T + q Phi))]
/// with dY = pi dF/F + q L dt on a recombining trinomial lattice for X. The
/// forward shock is dW1 = rho xi sqrt(dt) + sqrt(1 - rho^2) eta sqrt(dt), with xi
/// the standardized lattice move and eta on the 3-point Gauss-Hermite rule.
/// Wealth factors out as exp(-gamma y).
inline DPResult dp_value(const ConstantCorrelationModel& model, const ContractSpec& contract, double q, double gamma,
                         const DPConfig& cfg, double x0, double z0 = 0.0, double wealth = 0.0) {
  cfg.validate();
  model.validate();
  contract.validate();
  if (!contract.is_swing()) throw ConfigError("DP oracle supports swing contracts");
  if (!(gamma > 0.0)) throw ConfigError("risk aversion gamma must be positive");
  const auto& sw = contract.swing();
  const int N = cfg.time_steps;
  const double dt = cfg.horizon / N;
  const double sq = std::sqrt(dt);
  const double sigma0 = model.factor_vol(0.0, x0);
  if (!(sigma0 > 0.0)) throw ConfigError("DP lattice needs positive factor volatility");
  const double dx = sigma0 * std::sqrt(3.0 * dt);
  const int U = cfg.u_choices;
  const double dz = sw.u_max * dt / (U - 1);
  const int ZL = cfg.z_levels();
  const double rho = model.rho;
  const double rc = std::sqrt(1.0 - rho * rho);
  const std::array<double, 3> gh_node{-std::sqrt(3.0), 0.0, std::sqrt(3.0)};
  const std::array<double, 3> gh_w{1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0};

  // investment bound: Merton magnitude or the claim's hedge scale, whichever is larger
  double merton = 0.0, pmax = 0.0;
  for (int i = -N; i <= N; ++i) {
    const double x = x0 + i * dx;
    for (int n = 0; n <= N; ++n) {
      const double t = n * dt;
      const double sf = model.forward_vol(t, x);
      merton = std::max(merton, std::abs(model.forward_drift(t, x)) / (gamma * sf * sf));
      pmax = std::max(pmax, std::abs(model.spot(t, x)));
    }
  }
  const double hedge_scale = std::abs(q) * (sw.u_max * cfg.horizon * (pmax + std::abs(sw.strike)) +
                                            sw.penalty_scale * sw.volume_max) *
                             std::abs(rho) * sigma0 / model.forward_vol(0.0, x0);
  const double pi_bound = cfg.pi_bound_multiple * std::max({merton, hedge_scale, 1e-8});

  DPResult res;
  auto solve = [&](double qq) {
    // G = -gamma W > 0 on (lattice index, z level); minimizing G maximizes W
    const int width = 2 * N + 1;
    std::vector<double> G(static_cast<std::size_t>(width) * ZL), Gn(G.size());
    auto idx = [&](int i, int l) { return static_cast<std::size_t>(i + N) * ZL + l; };
    for (int i = -N; i <= N; ++i) {
      for (int l = 0; l < ZL; ++l) {
        const double z = z0 + l * dz;
        G[idx(i, l)] = std::exp(-gamma * qq * terminal_penalty(contract, model.spot(cfg.horizon, x0 + i * dx), z));
      }
    }
    for (int n = N - 1; n >= 0; --n) {
      const double t = n * dt;
      for (int i = -n; i <= n; ++i) {
        const double x = x0 + i * dx;
        const double m = model.factor_drift(t, x) * dt;
        const double s = model.factor_vol(t, x) * sq;
        const double second = (s * s + m * m) / (dx * dx);
        const std::array<double, 3> pm{0.5 * second - 0.5 * m / dx, 1.0 - second, 0.5 * second + 0.5 * m / dx};
        for (double pr : pm) {
          if (pr < -1e-14 || pr > 1.0 + 1e-14) {
            std::ostringstream os;
            os << "trinomial probability " << pr << " outside [0,1] at t=" << t << ", x=" << x;
            throw NumericalError(os.str());
          }
        }
        std::array<detail::LatticeBranch, 9> br{};
        const double mu = model.forward_drift(t, x);
        const double sf = model.forward_vol(t, x);
        for (int a = 0; a < 3; ++a) {
          const double xi = ((a - 1) * dx - m) / s;
          for (int b = 0; b < 3; ++b) {
            const double dw1 = sq * (rho * xi + rc * gh_node[b]);
            br[a * 3 + b] = {pm[a] * gh_w[b], a - 1, mu * dt + sf * dw1};
          }
        }
        const double p = model.spot(t, x);
        for (int l = 0; l < ZL; ++l) {
          const double z = z0 + l * dz;
          double best = std::numeric_limits<double>::infinity();
          for (int k = 0; k < U; ++k) {
            const int l2 = l + k;
            const double u = k * sw.u_max / (U - 1);
            if (l2 >= ZL || z0 + l2 * dz > contract.z_max + 1e-12) continue;
            const double run = detail::clamp_abs(detail::raw_running(contract, p, z, u), contract.clamp.kappa);
            auto objective = [&](double pi) {
              double acc = 0.0;
              for (const auto& bb : br) {
                acc += bb.prob * std::exp(-gamma * pi * bb.ret) * G[idx(i + bb.move, l2)];
              }
              return acc;
            };
            const double e = detail::minimize_convex(objective, pi_bound, cfg.pi_points, res.pi_widenings);
            best = std::min(best, std::exp(-gamma * qq * run * dt) * e);
          }
          Gn[idx(i, l)] = best;
        }
      }
      std::swap(G, Gn);
    }
    res.lattice_nodes = (N + 1) * (N + 1) * ZL;
    return G[idx(0, 0)];
  };
  const double g1 = solve(q);
  const double g0 = solve(0.0);
  // V = -(1/gamma) exp(-gamma y) G
  const double wf = std::exp(-gamma * wealth);
  res.value = -wf * g1 / gamma;
  res.value_no_claim = -wf * g0 / gamma;
  res.J = -std::log(g1 / gamma) / gamma;
  res.J0 = -std::log(g0 / gamma) / gamma;
  res.uip = -std::log(res.value / res.value_no_claim) / gamma;
  return res;
}

// ---------------------------------------------------------------------------
// Monte Carlo.

enum class Measure { Objective, Q0 };

inline const char* to_string(Measure m) { return m == Measure::Objective ? "objective" : "Q0"; }

/// b~ = b - rho sigma mu_F / sigmabar_F - gamma (1 - rho^2) sigma^2 J0_x.
inline Scalar1dFn girsanov_drift(const ConstantCorrelationModel& model, double gamma, const J0Gradient& j0) {
  model.validate();
  if (gamma < 0.0) throw ConfigError("risk aversion gamma must be nonnegative");
  const double gt = gamma * (1.0 - model.rho * model.rho);
  return [model, gt, j0](double t, double x) {
    const double s = model.factor_vol(t, x);
    const double jx = j0.is_zero() ? 0.0 : j0.at(t, Vec::Constant(1, x))(0);
    return model.drift_bar(t, x) - gt * s * s * jx;
  };
}

struct PathSet {
  int n_paths = 0;
  int steps = 0;
  double dt = 0.0;
  Measure measure = Measure::Objective;
  std::uint64_t seed = 0;
  std::vector<double> x;  // path-major, (steps + 1) values per path

  double at(int path, int step) const { return x[static_cast<std::size_t>(path) * (steps + 1) + step]; }
};

inline constexpr int kPathBlock = 1024;

/// Euler-Maruyama paths of X. Each block of 1024 paths draws from its own
/// generator seeded by (seed, block), so results do not depend on threading.
inline PathSet simulate(const ConstantCorrelationModel& model, Measure measure, double gamma, const J0Gradient& j0,
                        double x0, double horizon, int steps, int n_paths, std::uint64_t seed) {
  model.validate();
  if (steps < 1 || n_paths < 1) throw ConfigError("simulation needs at least one step and one path");
  if (!(horizon > 0.0)) throw ConfigError("simulation horizon must be positive");
  const Scalar1dFn drift = measure == Measure::Q0 ? girsanov_drift(model, gamma, j0) : model.factor_drift;
  PathSet ps;
  ps.n_paths = n_paths;
  ps.steps = steps;
  ps.dt = horizon / steps;
  ps.measure = measure;
  ps.seed = seed;
  ps.x.resize(static_cast<std::size_t>(n_paths) * (steps + 1));
  const double sq = std::sqrt(ps.dt);
  const int blocks = (n_paths + kPathBlock - 1) / kPathBlock;
#if defined(_OPENMP)
#pragma omp parallel for schedule(static)
#endif
  for (int b = 0; b < blocks; ++b) {
    std::seed_seq ss{static_cast<std::uint32_t>(seed & 0xffffffffu), static_cast<std::uint32_t>(seed >> 32),
                     static_cast<std::uint32_t>(b)};
    std::mt19937_64 gen(ss);
    std::normal_distribution<double> normal(0.0, 1.0);
    const int end = std::min(n_paths, (b + 1) * kPathBlock);
    for (int p = b * kPathBlock; p < end; ++p) {
      double* row = ps.x.data() + static_cast<std::size_t>(p) * (steps + 1);
      row[0] = x0;
      for (int k = 0; k < steps; ++k) {
        const double t = k * ps.dt;
        const double x = row[k];
        row[k + 1] = x + drift(t, x) * ps.dt + model.factor_vol(t, x) * sq * normal(gen);
      }
    }
  }
  return ps;
}

inline void write_pathset_csv(std::ostream& os, const PathSet& ps, const std::vector<std::string>& header = {}) {
  for (const auto& h : header) os << "# " << h << '\n';
  os << "# measure=" << to_string(ps.measure) << " seed=" << ps.seed << " dt=" << format_double(ps.dt) << '\n';
  os << "path,step,t,x\n";
  for (int p = 0; p < ps.n_paths; ++p) {
    for (int k = 0; k <= ps.steps; ++k) {
      os << p << ',' << k << ',' << format_double(k * ps.dt) << ',' << format_double(ps.at(p, k)) << '\n';
    }
  }
}

/// Feedback exercise rate u(t, x, z).
using ExercisePolicy = std::function<double(double t, double x, double z)>;

/// Nearest-slice, nearest-node lookup into exercise fields extracted from a
/// solved surface. Slices are those stored in the surface.
class PolicyTable {
 public:
  PolicyTable(const Surface& v, const ContractSpec& contract, const MarketModel& model, double q) {
    if (v.grid().x_dims() != 1) throw ConfigError("policy table needs a one-factor surface");
    for (const auto& s : v.slices()) slices_.push_back(exercise_policy(v, contract, model, q, s.t));
  }

  double operator()(double t, double x, double z) const {
    // slices are stored in increasing time
    auto it = std::lower_bound(slices_.begin(), slices_.end(), t,
                               [](const PolicySlice& s, double v) { return s.t < v; });
    if (it == slices_.end() || (it != slices_.begin() && t - std::prev(it)->t <= it->t - t)) --it;
    const PolicySlice* best = &*it;
    const Grid& g = best->grid;
    const Axis& a = g.x_axes[0];
    if (x < a.lo || x > a.hi) ++outside_;
    const int i = std::clamp(static_cast<int>(std::lround((x - a.lo) / a.step())), 0, a.intervals);
    const int j = std::clamp(static_cast<int>(std::lround(z / g.z_axis.step())), 0, g.z_axis.intervals);
    return best->u[g.flat(static_cast<std::size_t>(i), j)];
  }

  long outside_lookups() const { return outside_; }
  std::size_t slice_count() const { return slices_.size(); }

 private:
  std::vector<PolicySlice> slices_;
  mutable long outside_ = 0;
};

struct DualBoundResult {
  double value = 0.0;
  double std_error = 0.0;
  int paths = 0;
  long extrapolated = 0;
  std::vector<std::string> warnings;
};

/// -(1/gamma~) log mean exp(-gamma~ q C^u) along Q0 paths, with u read from
/// the policy and Z_{k+1} = Z_k + u dt kept inside [0, z_max].
inline DualBoundResult dual_lower_bound(const ConstantCorrelationModel& model, const ContractSpec& contract, double q,
                                        double gamma, const ExercisePolicy& policy, const PathSet& paths,
                                        double z0 = 0.0, const PolicyTable* table = nullptr) {
  if (paths.measure != Measure::Q0) throw ConfigError("dual lower bound needs paths simulated under Q0");
  if (!(gamma > 0.0)) throw ConfigError("risk aversion gamma must be positive");
  contract.validate();
  const double gt = gamma * (1.0 - model.rho * model.rho);
  const long before = table ? table->outside_lookups() : 0;
  DualBoundResult r;
  r.paths = paths.n_paths;
  if (q == 0.0) return r;
  std::vector<double> ys(paths.n_paths);
  double shift = std::numeric_limits<double>::infinity();
  std::vector<double> payoff(paths.n_paths);
  for (int p = 0; p < paths.n_paths; ++p) {
    double z = z0, c = 0.0;
    for (int k = 0; k < paths.steps; ++k) {
      const double t = k * paths.dt;
      const double x = paths.at(p, k);
      const auto [lo, hi] = control_range(contract, z);
      double u = std::clamp(policy(t, x, z), lo, hi);
      if (z + u * paths.dt > contract.z_max) u = (contract.z_max - z) / paths.dt;
      if (z + u * paths.dt < 0.0) u = -z / paths.dt;
      c += running_payoff(contract, model.spot(t, x), z, u) * paths.dt;
      z += u * paths.dt;
    }
    c += terminal_penalty(contract, model.spot(paths.steps * paths.dt, paths.at(p, paths.steps)), z);
    payoff[p] = q * c;
    shift = std::min(shift, gt * payoff[p]);
  }
  // exp(-gt qC) = exp(-shift) exp(-(gt qC - shift)) keeps the average in range
  double mean = 0.0;
  for (int p = 0; p < paths.n_paths; ++p) {
    ys[p] = std::exp(-(gt * payoff[p] - shift));
    mean += ys[p];
  }
  mean /= paths.n_paths;
  double var = 0.0;
  for (double y : ys) var += (y - mean) * (y - mean);
  var /= std::max(1, paths.n_paths - 1);
  r.value = (shift - std::log(mean)) / gt;
  r.std_error = std::sqrt(var / paths.n_paths) / (mean * gt);
  if (table) {
    r.extrapolated = table->outside_lookups() - before;
    if (r.extrapolated > 0) {
      std::ostringstream os;
      os << r.extrapolated << " policy lookups fell outside the x grid and used the edge node";
      r.warnings.push_back(os.str());
    }
  }
  return r;
}

}  // namespace uipx
