#pragma once

// Explicit backward time stepping for the J-equation, the UIP equation, the
// linear risk-neutral equation and the dual (exponential) Cauchy problem.
//
// All four share one kernel. At each node the right-hand side is
//
//   <drift, D v> + 1/2 tr(A D^2 v) - 1/2 <Q D v, D v> + source + H
//
// with H = sup_u [u v_z + q' L(p, z, u)], and v^n = v^{n+1} + dt * rhs(v^{n+1}).

#include <algorithm>
#include <array>
#include <cmath>
#include <exception>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <boost/math/quadrature/gauss_kronrod.hpp>

#include "uipx/closed_form.hpp"
#include "uipx/contracts.hpp"
#include "uipx/errors.hpp"
#include "uipx/grid.hpp"
#include "uipx/linalg.hpp"
#include "uipx/market_models.hpp"

namespace uipx {

inline constexpr double kCflSafety = 0.9;
inline constexpr const char* kSolverVersion = "uipx-solver 1.0";

// ---------------------------------------------------------------------------
// Gradient of the no-claim log value J0, supplied to the UIP and dual solvers.

using GradientFn = std::function<Vec(double t, const Vec& x)>;

/// J0 tabulated at every time step on the x nodes of a grid.
class J0Field {
 public:
  J0Field(Grid grid, std::vector<std::vector<double>> values)
      : grid_(std::move(grid)), values_(std::move(values)) {}

  const Grid& grid() const { return grid_; }
  int time_steps() const { return static_cast<int>(values_.size()) - 1; }
  double value(int n, std::size_t xi) const { return values_.at(n).at(xi); }

  /// Central-difference gradient at the x node nearest to x, time node nearest to t.
  Vec gradient(double t, const Vec& x) const {
    const int N = time_steps();
    const int n = std::clamp(static_cast<int>(std::lround(t / grid_.horizon * N)), 0, N);
    const auto& row = values_[n];
    std::size_t xi = 0;
    std::array<int, 2> idx{};
    for (int k = 0; k < grid_.x_dims(); ++k) {
      const Axis& a = grid_.x_axes[k];
      idx[k] = std::clamp(static_cast<int>(std::lround((x(k) - a.lo) / a.step())), 0, a.intervals);
      xi += static_cast<std::size_t>(idx[k]) * grid_.x_stride(k);
    }
    Vec g(grid_.x_dims());
    for (int k = 0; k < grid_.x_dims(); ++k) {
      const Axis& a = grid_.x_axes[k];
      const std::size_t s = grid_.x_stride(k);
      const double h = a.step();
      if (idx[k] == 0) {
        g(k) = (-3.0 * row[xi] + 4.0 * row[xi + s] - row[xi + 2 * s]) / (2.0 * h);
      } else if (idx[k] == a.intervals) {
        g(k) = (3.0 * row[xi] - 4.0 * row[xi - s] + row[xi - 2 * s]) / (2.0 * h);
      } else {
        g(k) = (row[xi + s] - row[xi - s]) / (2.0 * h);
      }
    }
    return g;
  }

 private:
  Grid grid_;
  std::vector<std::vector<double>> values_;  // [n][xi]
};

struct J0Gradient {
  GradientFn fn;  // empty means J0_x == 0
  std::string label = "zero";

  static J0Gradient zero() { return {}; }
  static J0Gradient from_riccati(std::shared_ptr<const RiccatiSolution> sol) {
    J0Gradient g;
    g.fn = [sol](double t, const Vec& x) {
      return Vec::Constant(1, J0_gradient_linear(*sol, t, x(0)));
    };
    g.label = "riccati";
    return g;
  }
  static J0Gradient from_field(std::shared_ptr<const J0Field> field) {
    J0Gradient g;
    g.fn = [field](double t, const Vec& x) { return field->gradient(t, x); };
    g.label = "field";
    return g;
  }
  static J0Gradient from_function(GradientFn f, std::string label = "function") {
    return {std::move(f), std::move(label)};
  }

  bool is_zero() const { return !fn; }
  Vec at(double t, const Vec& x) const { return fn ? fn(t, x) : Vec::Zero(x.size()); }
};

// ---------------------------------------------------------------------------

/// PDE coefficients at one x node and one time.
struct NodeCoefficients {
  std::array<double, 2> drift{};
  std::array<std::array<double, 2>, 2> diffusion{};  // A = Sigma^T Sigma
  std::array<std::array<double, 2>, 2> quadratic{};  // Q in -1/2 <Q v_x, v_x>
  double source = 0.0;
  double spot = 0.0;
};

using CoefficientFn = std::function<void(double t, const Vec& x, NodeCoefficients&)>;

enum class EquationForm { Value, Exponential };

/// One backward Cauchy problem handed to the explicit kernel.
struct PdeProblem {
  PdeKind kind = PdeKind::Uip;
  EquationForm form = EquationForm::Value;
  double q = 1.0;
  double gamma = 0.0;
  double exp_scale = 0.0;       // gamma_tilde in w = -exp(-gamma_tilde v)
  double terminal_offset = 0.0; // log(gamma)/gamma for the J-equation
  double gradient_offset = 0.0; // bound on |J0_x| added to the stability estimate
  CoefficientFn coefficients;
  std::optional<OuStructure> pricing_ou;  // for the explicit-expectation boundary
};

struct SolveOptions {
  BoundaryPolicy bc;                 // empty: second-derivative-zero on every face
  std::vector<double> store_times;   // slices to keep besides t = 0 and t = T
  int store_every = 0;               // keep every k-th slice when positive
  std::function<void(int n, double t, const std::vector<double>& values)> on_step;
};

namespace detail {

struct Stencil {
  int n = 0;
  std::array<int, 3> off{};
  std::array<double, 3> w{};
};

inline Stencil first_stencil(int i, int last, double h) {
  if (i == 0) return {3, {0, 1, 2}, {-1.5 / h, 2.0 / h, -0.5 / h}};
  if (i == last) return {3, {-2, -1, 0}, {0.5 / h, -2.0 / h, 1.5 / h}};
  return {2, {-1, 1, 0}, {-0.5 / h, 0.5 / h, 0.0}};
}

inline Stencil second_stencil(int i, int last, double h) {
  const double h2 = h * h;
  if (i == 0) return {3, {0, 1, 2}, {1.0 / h2, -2.0 / h2, 1.0 / h2}};
  if (i == last) return {3, {-2, -1, 0}, {1.0 / h2, -2.0 / h2, 1.0 / h2}};
  return {3, {-1, 0, 1}, {1.0 / h2, -2.0 / h2, 1.0 / h2}};
}

/// Hamiltonian with a closed-form fast path for the unclamped swing contract.
struct HamiltonianEvaluator {
  const ContractSpec* spec;
  bool fast_swing = false;
  double strike = 0.0;
  double u_max = 0.0;

  explicit HamiltonianEvaluator(const ContractSpec& s) : spec(&s) {
    if (s.is_swing() && !s.clamp.kappa) {
      fast_swing = true;
      strike = s.swing().strike;
      u_max = s.swing().u_max;
    }
  }

  double operator()(double vz_up, double vz_down, double p, double z, double q, bool up,
                    bool down) const {
    if (fast_swing) {
      const double slope = vz_up + q * (p - strike);
      return (up && slope > 0.0) ? u_max * slope : 0.0;
    }
    return hamiltonian_sup(*spec, HamiltonianInput{vz_up, vz_down, p, z, q, up, down}).value;
  }
};

inline BoundaryPolicy resolve_policy(const Grid& g, const SolveOptions& opt) {
  BoundaryPolicy p = opt.bc.faces.empty() ? BoundaryPolicy::uniform(g.x_dims()) : opt.bc;
  p.validate(g);
  return p;
}

inline bool face_uses_stencil(FaceRule r) { return r == FaceRule::OneSidedStencil; }

inline double max_control_magnitude(const ContractSpec& c, const Grid& g) {
  double m = 0.0;
  for (int j = 0; j < g.nz(); ++j) {
    const auto [lo, hi] = control_range(c, g.z(j));
    m = std::max({m, std::abs(lo), std::abs(hi)});
  }
  return m;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Deferred-exercise closed form used as a Dirichlet value on the x_min face.

/// q [ubar int_{T-w}^{T} (E[e^{X_s}] - K) ds + Phi(z + ubar w)], w = min((m - z)^+ / ubar, T - t).
inline double deferred_exercise_value(const ContractSpec& spec, const OuStructure& ou, double q,
                                      double t, double x, double z, double horizon) {
  if (!spec.is_swing()) throw ConfigError("explicit-expectation boundary requires a swing contract");
  if (spec.clamp.kappa) throw ConfigError("explicit-expectation boundary requires an unclamped payoff");
  const auto& s = spec.swing();
  const double window = std::min(std::max(s.volume_min - z, 0.0) / s.u_max, horizon - t);
  const double z_end = z + s.u_max * window;
  double running = 0.0;
  if (window > 0.0) {
    auto integrand = [&](double sdate) { return ou.expected_exp(x, sdate - t) - s.strike; };
    running = s.u_max * boost::math::quadrature::gauss_kronrod<double, 31>::integrate(
                            integrand, horizon - window, horizon, 10, 1e-13);
  }
  return q * (running + terminal_penalty(spec, 0.0, z_end));
}

struct BoundaryContext {
  const ContractSpec* contract = nullptr;
  const PdeProblem* problem = nullptr;
  double t = 0.0;
};

/// Fills the x faces of a slice whose non-face nodes were already updated.
inline void apply_boundary(const Grid& g, std::vector<double>& v, const BoundaryPolicy& bc,
                           const BoundaryContext& ctx) {
  const int nz = g.nz();
  for (int k = 0; k < g.x_dims(); ++k) {
    const Axis& a = g.x_axes[k];
    const std::size_t s = g.x_stride(k);
    for (int side = 0; side < 2; ++side) {
      const FaceRule rule = bc.faces[k][side];
      if (rule == FaceRule::OneSidedStencil) continue;
      const int face = side == 0 ? 0 : a.intervals;
      const int dir = side == 0 ? 1 : -1;
      for (std::size_t xi = 0; xi < g.x_count(); ++xi) {
        if (g.x_multi_index(xi)[k] != face) continue;
        const std::size_t x1 = dir > 0 ? xi + s : xi - s;
        const std::size_t x2 = dir > 0 ? xi + 2 * s : xi - 2 * s;
        if (rule == FaceRule::SecondDerivativeZero) {
          // linear extrapolation of the price, also when the solved variable is w = -exp(-g v)
          const bool exp_form = ctx.problem && ctx.problem->form == EquationForm::Exponential;
          const double gs = exp_form ? ctx.problem->exp_scale : 1.0;
          for (int j = 0; j < nz; ++j) {
            if (exp_form) {
              const double p1 = -std::log(-v[g.flat(x1, j)]) / gs;
              const double p2 = -std::log(-v[g.flat(x2, j)]) / gs;
              v[g.flat(xi, j)] = -std::exp(-gs * (2.0 * p1 - p2));
            } else {
              v[g.flat(xi, j)] = 2.0 * v[g.flat(x1, j)] - v[g.flat(x2, j)];
            }
          }
          continue;
        }
        // explicit expectation (validated: x_min face of a one-factor grid)
        if (!ctx.problem || !ctx.contract) throw ConfigError("boundary context missing");
        if (!ctx.problem->pricing_ou) {
          throw ConfigError("explicit-expectation boundary needs a model with closed-form factor moments");
        }
        if (ctx.problem->kind == PdeKind::LogValue) {
          throw ConfigError("explicit-expectation boundary is not available for the J-equation");
        }
        const double x = a.node(face);
        for (int j = 0; j < nz; ++j) {
          const double val = deferred_exercise_value(*ctx.contract, *ctx.problem->pricing_ou,
                                                     ctx.problem->q, ctx.t, x, g.z(j), g.horizon);
          v[g.flat(xi, j)] = ctx.problem->form == EquationForm::Exponential
                                 ? -std::exp(-ctx.problem->exp_scale * val)
                                 : val;
        }
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Stability bound.

struct CflReport {
  double dt_stable = 0.0;
  double dt = 0.0;
  int time_steps = 0;
};

/// Largest stable step of the explicit scheme for a problem on a grid,
/// safety * 1 / max_nodes( sum a_kk/h_k^2 + sum_{k<l} |a_kl|/(h_k h_l)
///                         + sum |drift_k|/h_k + sum |Q G|_k/h_k + ubar/dz + reaction ).
/// G bounds |v_x| by q (ubar T |p_x| + |Phi_x|) plus the J0 gradient offset.
inline double cfl_timestep(const Grid& g, const ContractSpec& contract, const PdeProblem& prob) {
  const int dims = g.x_dims();
  const double umax = detail::max_control_magnitude(contract, g);
  const double dz = g.z_axis.step();
  double grad_p = 0.0;
  double grad_phi = 0.0;
  double max_payoff_rate = 0.0;
  NodeCoefficients c;
  std::vector<NodeCoefficients> tc(g.x_count());
  const std::array<double, 3> times{0.0, 0.5 * g.horizon, g.horizon};
  double rate_max = 0.0;
  bool any_diffusion = false;
  for (double t : times) {
    for (std::size_t xi = 0; xi < g.x_count(); ++xi) prob.coefficients(t, g.x_point(xi), tc[xi]);
    for (std::size_t xi = 0; xi < g.x_count(); ++xi) {
      const auto idx = g.x_multi_index(xi);
      for (int k = 0; k < dims; ++k) {
        const std::size_t s = g.x_stride(k);
        const int last = g.x_axes[k].intervals;
        const std::size_t nb = idx[k] < last ? xi + s : xi - s;
        const double h = g.x_axes[k].step();
        grad_p = std::max(grad_p, std::abs(tc[nb].spot - tc[xi].spot) / h);
        for (int j = 0; j < g.nz(); ++j) {
          grad_phi = std::max(grad_phi, std::abs(terminal_penalty(contract, tc[nb].spot, g.z(j)) -
                                                 terminal_penalty(contract, tc[xi].spot, g.z(j))) / h);
        }
      }
      for (int j = 0; j < g.nz(); ++j) {
        const auto [lo, hi] = control_range(contract, g.z(j));
        for (double u : {lo, hi}) {
          max_payoff_rate = std::max(
              max_payoff_rate, std::abs(detail::raw_running(contract, tc[xi].spot, g.z(j), u)));
        }
      }
    }
  }
  const double G = std::abs(prob.q) * (umax * g.horizon * grad_p + grad_phi) + prob.gradient_offset;
  for (double t : times) {
    for (std::size_t xi = 0; xi < g.x_count(); ++xi) {
      prob.coefficients(t, g.x_point(xi), c);
      double rate = umax / dz;
      for (int k = 0; k < dims; ++k) {
        const double h = g.x_axes[k].step();
        if (c.diffusion[k][k] > 0.0) any_diffusion = true;
        rate += c.diffusion[k][k] / (h * h) + std::abs(c.drift[k]) / h;
        double qg = 0.0;
        for (int l = 0; l < dims; ++l) qg += std::abs(c.quadratic[k][l]) * G;
        rate += qg / h;
        for (int l = k + 1; l < dims; ++l) {
          rate += std::abs(c.diffusion[k][l]) / (h * g.x_axes[l].step());
        }
      }
      if (prob.form == EquationForm::Exponential) {
        rate += prob.exp_scale * std::abs(prob.q) * max_payoff_rate;
      }
      if (!std::isfinite(rate)) throw NumericalError("non-finite coefficient bound in stability estimate");
      rate_max = std::max(rate_max, rate);
    }
  }
  if (!any_diffusion) throw NumericalError("zero diffusion everywhere: explicit scheme has no stability scale");
  double dt = kCflSafety / rate_max;
  if (g.time_steps > 0) dt = std::min(dt, g.horizon / g.time_steps);
  return dt;
}

/// Resolves the number of time steps: the requested N when stable, otherwise
/// an error naming the minimum; when N is 0, the smallest stable multiple of 20.
inline CflReport resolve_time_steps(const Grid& g, const ContractSpec& contract, const PdeProblem& prob) {
  Grid free = g;
  free.time_steps = 0;
  CflReport r;
  r.dt_stable = cfl_timestep(free, contract, prob);
  const int min_steps = static_cast<int>(std::ceil(g.horizon / r.dt_stable - 1e-9));
  if (g.time_steps > 0) {
    if (g.time_steps < min_steps) {
      std::ostringstream os;
      os << "time step violates the stability bound: N=" << g.time_steps << " gives dt="
         << g.horizon / g.time_steps << " > " << r.dt_stable << "; use N >= " << min_steps;
      throw NumericalError(os.str());
    }
    r.time_steps = g.time_steps;
  } else {
    r.time_steps = std::max(20, (min_steps + 19) / 20 * 20);
  }
  r.dt = g.horizon / r.time_steps;
  return r;
}

// ---------------------------------------------------------------------------
// The explicit kernel.

inline Surface solve_explicit(const Grid& grid_in, const ContractSpec& contract, const PdeProblem& prob,
                              const SolveOptions& opt = {}) {
  grid_in.validate();
  contract.validate();
  if (grid_in.z_axis.hi < contract.z_max - 1e-12) {
    throw ConfigError("z grid must cover [0, z_max] of the contract");
  }
  if (contract.is_swing() && grid_in.z_axis.hi < contract.swing().volume_max) {
    throw ConfigError("z grid must extend to the volume bound M");
  }
  if (prob.form == EquationForm::Exponential && !(prob.exp_scale > 0.0)) {
    throw ConfigError("exponential form needs a positive scale");
  }
  const BoundaryPolicy bc = detail::resolve_policy(grid_in, opt);
  const CflReport cfl = resolve_time_steps(grid_in, contract, prob);
  Grid g = grid_in;
  g.time_steps = cfl.time_steps;
  const double dt = cfl.dt;
  const int N = g.time_steps;
  const int dims = g.x_dims();
  const int nz = g.nz();
  const double dz = g.z_axis.step();
  const std::size_t nx = g.x_count();

  SurfaceMeta meta{prob.kind, prob.q, prob.gamma, cfl.dt_stable};
  Surface surf(g, meta);

  std::vector<double> zs(nz);
  for (int j = 0; j < nz; ++j) zs[j] = g.z(j);

  // which nodes the kernel updates, and their stencils
  std::vector<char> updatable(nx, 1);
  std::vector<std::array<detail::Stencil, 2>> d1(nx), d2(nx);
  for (std::size_t xi = 0; xi < nx; ++xi) {
    const auto idx = g.x_multi_index(xi);
    for (int k = 0; k < dims; ++k) {
      const int last = g.x_axes[k].intervals;
      const double h = g.x_axes[k].step();
      d1[xi][k] = detail::first_stencil(idx[k], last, h);
      d2[xi][k] = detail::second_stencil(idx[k], last, h);
      if (idx[k] == 0 && !detail::face_uses_stencil(bc.faces[k][0])) updatable[xi] = 0;
      if (idx[k] == last && !detail::face_uses_stencil(bc.faces[k][1])) updatable[xi] = 0;
    }
  }
  std::array<std::ptrdiff_t, 2> stride{};
  for (int k = 0; k < dims; ++k) stride[k] = static_cast<std::ptrdiff_t>(g.x_stride(k)) * nz;

  // terminal slice
  std::vector<NodeCoefficients> coef(nx);
  for (std::size_t xi = 0; xi < nx; ++xi) prob.coefficients(g.horizon, g.x_point(xi), coef[xi]);
  std::vector<double> cur(g.node_count()), next(g.node_count());
  for (std::size_t xi = 0; xi < nx; ++xi) {
    for (int j = 0; j < nz; ++j) {
      const double phi = prob.q * terminal_penalty(contract, coef[xi].spot, zs[j]);
      double val = prob.terminal_offset + phi;
      if (prob.form == EquationForm::Exponential) val = -std::exp(-prob.exp_scale * phi);
      cur[g.flat(xi, j)] = val;
    }
  }

  std::vector<char> keep(N + 1, 0);
  keep[0] = keep[N] = 1;
  for (double t : opt.store_times) {
    if (t < -1e-12 || t > g.horizon + 1e-12) throw ConfigError("requested slice time outside [0, T]");
    keep[std::clamp(static_cast<int>(std::lround(t / g.horizon * N)), 0, N)] = 1;
  }
  if (opt.store_every > 0) {
    for (int n = 0; n <= N; n += opt.store_every) keep[n] = 1;
  }
  const bool exp_form = prob.form == EquationForm::Exponential;
  auto to_output = [&](const std::vector<double>& w) {
    if (!exp_form) return w;
    std::vector<double> out(w.size());
    for (std::size_t i = 0; i < w.size(); ++i) out[i] = -std::log(-w[i]) / prob.exp_scale;
    return out;
  };
  if (keep[N]) surf.add_slice(Slice{N, g.horizon, to_output(cur)});
  if (opt.on_step) opt.on_step(N, g.horizon, cur);

  const detail::HamiltonianEvaluator ham(contract);
  const double q = prob.q;

  for (int n = N - 1; n >= 0; --n) {
    const double t_coef = g.time(n + 1);
    const double t_new = g.time(n);
#if defined(_OPENMP)
#pragma omp parallel for schedule(static)
#endif
    for (std::ptrdiff_t xi = 0; xi < static_cast<std::ptrdiff_t>(nx); ++xi) {
      prob.coefficients(t_coef, g.x_point(static_cast<std::size_t>(xi)), coef[xi]);
    }

    std::exception_ptr failure;
    bool finite = true;
#if defined(_OPENMP)
#pragma omp parallel for schedule(static) reduction(&& : finite)
#endif
    for (std::ptrdiff_t xs = 0; xs < static_cast<std::ptrdiff_t>(nx); ++xs) {
      const auto xi = static_cast<std::size_t>(xs);
      if (!updatable[xi]) continue;
      const NodeCoefficients& c = coef[xi];
      const auto& s1 = d1[xi];
      const auto& s2 = d2[xi];
      try {
        for (int j = 0; j < nz; ++j) {
          const std::size_t f = g.flat(xi, j);
          const double* base = cur.data() + f;
          std::array<double, 2> vx{};
          double rhs = c.source;
          for (int k = 0; k < dims; ++k) {
            double acc1 = 0.0, acc2 = 0.0;
            for (int a = 0; a < s1[k].n; ++a) acc1 += s1[k].w[a] * base[s1[k].off[a] * stride[k]];
            for (int a = 0; a < s2[k].n; ++a) acc2 += s2[k].w[a] * base[s2[k].off[a] * stride[k]];
            vx[k] = acc1;
            rhs += c.drift[k] * acc1 + 0.5 * c.diffusion[k][k] * acc2;
          }
          if (dims == 2 && c.diffusion[0][1] != 0.0) {
            double mixed = 0.0;
            for (int a = 0; a < s1[0].n; ++a) {
              for (int b = 0; b < s1[1].n; ++b) {
                mixed += s1[0].w[a] * s1[1].w[b] * base[s1[0].off[a] * stride[0] + s1[1].off[b] * stride[1]];
              }
            }
            rhs += c.diffusion[0][1] * mixed;  // 1/2 (a_01 + a_10) v_01
          }
          if (!exp_form) {
            double quad = 0.0;
            for (int k = 0; k < dims; ++k) {
              for (int l = 0; l < dims; ++l) quad += c.quadratic[k][l] * vx[k] * vx[l];
            }
            rhs -= 0.5 * quad;
          }
          const bool up = j + 1 < nz;
          const bool down = j > 0;
          const double vz_up = up ? (base[1] - base[0]) / dz : 0.0;
          const double vz_down = down ? (base[0] - base[-1]) / dz : 0.0;
          const double q_eff = exp_form ? -prob.exp_scale * q * base[0] : q;
          rhs += ham(vz_up, vz_down, c.spot, zs[j], q_eff, up, down);
          const double val = base[0] + dt * rhs;
          finite = finite && std::isfinite(val);
          next[f] = val;
        }
      } catch (...) {
#if defined(_OPENMP)
#pragma omp critical
#endif
        if (!failure) failure = std::current_exception();
      }
    }
    if (failure) std::rethrow_exception(failure);

    BoundaryContext ctx{&contract, &prob, t_new};
    apply_boundary(g, next, bc, ctx);
    if (!finite || !std::all_of(next.begin(), next.end(), [](double v) { return std::isfinite(v); })) {
      std::ostringstream os;
      os << "non-finite value at t=" << t_new << " (" << to_string(prob.kind) << " solve, N=" << N << ")";
      throw NumericalError(os.str());
    }
    if (exp_form && std::any_of(next.begin(), next.end(), [](double v) { return !(v < 0.0); })) {
      std::ostringstream os;
      os << "exponential transform lost its sign at t=" << t_new;
      throw NumericalError(os.str());
    }
    cur.swap(next);
    if (keep[n]) surf.add_slice(Slice{n, t_new, to_output(cur)});
    if (opt.on_step) opt.on_step(n, t_new, cur);
  }
  return surf;
}

// ---------------------------------------------------------------------------
// Coefficient assembly for the four equations.

namespace detail {

inline void fill_common(const LocalCoefficients& lc, int dims, NodeCoefficients& c) {
  for (int k = 0; k < dims; ++k) {
    c.drift[k] = lc.drift_bar(k);
    for (int l = 0; l < dims; ++l) c.diffusion[k][l] = lc.diffusion(k, l);
  }
}

inline void check_dims(const MarketModel& model, const Grid& g) {
  model.validate();
  if (model.m() != g.x_dims()) throw ConfigError("grid dimension does not match the number of factors");
  if (std::abs(model.horizon - g.horizon) > 1e-12) throw ConfigError("grid horizon differs from the model horizon");
}

}  // namespace detail

inline PdeProblem uip_problem(const MarketModel& model, double q, double gamma, const J0Gradient& j0) {
  if (!(gamma > 0.0)) throw ConfigError("risk aversion gamma must be positive");
  PdeProblem p;
  p.kind = PdeKind::Uip;
  p.q = q;
  p.gamma = gamma;
  p.pricing_ou = model.pricing_ou;
  const int dims = model.m();
  p.coefficients = [model, gamma, j0, dims](double t, const Vec& x, NodeCoefficients& c) {
    const LocalCoefficients lc = local_coefficients(model, t, x);
    detail::fill_common(lc, dims, c);
    if (!j0.is_zero()) {
      const Vec cross = gamma * (lc.B * j0.at(t, x));
      for (int k = 0; k < dims; ++k) c.drift[k] -= cross(k);
    }
    for (int k = 0; k < dims; ++k) {
      for (int l = 0; l < dims; ++l) c.quadratic[k][l] = gamma * lc.B(k, l);
    }
    c.source = 0.0;
    c.spot = model.spot(t, x);
  };
  return p;
}

inline PdeProblem log_value_problem(const MarketModel& model, double q, double gamma) {
  if (!(gamma > 0.0)) throw ConfigError("risk aversion gamma must be positive");
  PdeProblem p;
  p.kind = PdeKind::LogValue;
  p.q = q;
  p.gamma = gamma;
  p.terminal_offset = std::log(gamma) / gamma;
  p.pricing_ou = model.pricing_ou;
  const int dims = model.m();
  p.coefficients = [model, gamma, dims](double t, const Vec& x, NodeCoefficients& c) {
    const LocalCoefficients lc = local_coefficients(model, t, x);
    detail::fill_common(lc, dims, c);
    for (int k = 0; k < dims; ++k) {
      for (int l = 0; l < dims; ++l) c.quadratic[k][l] = gamma * lc.B(k, l);
    }
    c.source = lc.mu_quadratic / (2.0 * gamma);
    c.spot = model.spot(t, x);
  };
  return p;
}

inline PdeProblem risk_neutral_problem(const MarketModel& model, double q) {
  PdeProblem p;
  p.kind = PdeKind::RiskNeutral;
  p.q = q;
  p.pricing_ou = model.pricing_ou;
  const int dims = model.m();
  p.coefficients = [model, dims](double t, const Vec& x, NodeCoefficients& c) {
    const LocalCoefficients lc = local_coefficients(model, t, x);
    detail::fill_common(lc, dims, c);
    c.quadratic = {};
    c.source = 0.0;
    c.spot = model.spot(t, x);
  };
  return p;
}

/// Which unknown the dual problem is solved for.
enum class DualForm {
  Exponential,  // w = -exp(-gamma~ v~)
  Value,        // v~ itself, with the -(gamma~/2) sigma^2 v~_x^2 term
};

/// w-form of the dual problem: w_t + sup_u [b~ w_x + u w_z + 1/2 sigma^2 w_xx - gamma~ q L w] = 0,
/// w(T) = -exp(-gamma~ q Phi), reported as v~ = -log(-w) / gamma~.
inline PdeProblem dual_problem(const ConstantCorrelationModel& cc, double q, double gamma, const J0Gradient& j0,
                               DualForm form = DualForm::Exponential) {
  cc.validate();
  if (!(gamma > 0.0)) throw ConfigError("risk aversion gamma must be positive");
  PdeProblem p;
  p.kind = PdeKind::Dual;
  p.form = form == DualForm::Exponential ? EquationForm::Exponential : EquationForm::Value;
  p.q = q;
  p.gamma = gamma;
  p.exp_scale = gamma * (1.0 - cc.rho * cc.rho);
  p.pricing_ou = cc.pricing_ou;
  const double gt = p.exp_scale;
  const bool value_form = form == DualForm::Value;
  if (value_form) p.exp_scale = 0.0;
  p.coefficients = [cc, gt, j0, value_form](double t, const Vec& x, NodeCoefficients& c) {
    const double s = cc.factor_vol(t, x(0));
    const double jx = j0.is_zero() ? 0.0 : j0.at(t, x)(0);
    c.drift[0] = cc.drift_bar(t, x(0)) - gt * s * s * jx;
    c.diffusion[0][0] = s * s;
    c.quadratic = {};
    if (value_form) c.quadratic[0][0] = gt * s * s;
    c.source = 0.0;
    c.spot = cc.spot(t, x(0));
  };
  return p;
}

// ---------------------------------------------------------------------------
// Public solvers.

inline Surface solve_uip_pde(const MarketModel& model, const ContractSpec& contract, double q, double gamma,
                             const J0Gradient& j0, const Grid& g, const SolveOptions& opt = {}) {
  detail::check_dims(model, g);
  PdeProblem p = uip_problem(model, q, gamma, j0);
  return solve_explicit(g, contract, p, opt);
}

inline Surface solve_J_pde(const MarketModel& model, const ContractSpec& contract, double q, double gamma,
                           const Grid& g, const SolveOptions& opt = {}) {
  detail::check_dims(model, g);
  PdeProblem p = log_value_problem(model, q, gamma);
  return solve_explicit(g, contract, p, opt);
}

inline Surface solve_risk_neutral_pde(const MarketModel& model, const ContractSpec& contract, double q,
                                      const Grid& g, const SolveOptions& opt = {}) {
  detail::check_dims(model, g);
  PdeProblem p = risk_neutral_problem(model, q);
  return solve_explicit(g, contract, p, opt);
}

inline Surface solve_dual_pde(const ConstantCorrelationModel& cc, const ContractSpec& contract, double q,
                              double gamma, const J0Gradient& j0, const Grid& g, const SolveOptions& opt = {},
                              DualForm form = DualForm::Exponential) {
  if (g.x_dims() != 1) throw ConfigError("dual solver works on a one-factor grid");
  if (std::abs(cc.horizon - g.horizon) > 1e-12) throw ConfigError("grid horizon differs from the model horizon");
  PdeProblem p = dual_problem(cc, q, gamma, j0, form);
  return solve_explicit(g, contract, p, opt);
}

/// J0 on the grid at every time step, from a q = 0 solve of the J-equation.
inline std::shared_ptr<J0Field> solve_J0_field(const MarketModel& model, const ContractSpec& contract,
                                               double gamma, const Grid& g, const SolveOptions& opt = {}) {
  std::vector<std::vector<double>> rows;
  Grid used = g;
  SolveOptions o = opt;
  o.store_times.clear();
  o.store_every = 0;
  o.on_step = [&](int n, double, const std::vector<double>& v) {
    if (rows.empty()) rows.resize(n + 1);
    std::vector<double> row(g.x_count());
    for (std::size_t xi = 0; xi < g.x_count(); ++xi) row[xi] = v[g.flat(xi, 0)];
    rows[n] = std::move(row);
  };
  const Surface s = solve_J_pde(model, contract, 0.0, gamma, g, o);
  used.time_steps = s.grid().time_steps;
  return std::make_shared<J0Field>(used, std::move(rows));
}

/// Value at the slice nearest t, interpolated in (x, z).
inline double probe(const Surface& s, double t, const Vec& x, double z) { return s.interpolate(t, x, z); }

inline double probe(const Surface& s, double t, double x, double z) {
  return s.interpolate(t, Vec::Constant(1, x), z);
}

}  // namespace uipx
