#pragma once

// Feedback controls read off solved surfaces: exercise rate, hedge and investment.

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <sstream>
#include <vector>

#include "uipx/contracts.hpp"
#include "uipx/errors.hpp"
#include "uipx/grid.hpp"
#include "uipx/linalg.hpp"
#include "uipx/market_models.hpp"

namespace uipx {

struct PolicySlice {
  Grid grid;
  double t = 0.0;
  std::vector<double> u;  // grid.flat layout
};

/// An n-component field on one time slice; component c of node f at values[f * components + c].
struct VectorField {
  Grid grid;
  double t = 0.0;
  int components = 1;
  std::vector<double> values;

  double at(std::size_t flat, int c) const { return values[flat * components + c]; }
};

struct StrategyBundle {
  PolicySlice exercise;
  VectorField hedge;
  std::optional<VectorField> investment;
};

/// x-gradient of a slice at node (xi, j): central inside, second-order one-sided on faces.
inline std::array<double, 2> slice_gradient(const Grid& g, const std::vector<double>& v, std::size_t xi, int j) {
  std::array<double, 2> out{};
  const auto idx = g.x_multi_index(xi);
  for (int k = 0; k < g.x_dims(); ++k) {
    const std::size_t s = g.x_stride(k);
    const double h = g.x_axes[k].step();
    const int last = g.x_axes[k].intervals;
    auto at = [&](std::size_t x) { return v[g.flat(x, j)]; };
    if (idx[k] == 0) {
      out[k] = (-3.0 * at(xi) + 4.0 * at(xi + s) - at(xi + 2 * s)) / (2.0 * h);
    } else if (idx[k] == last) {
      out[k] = (3.0 * at(xi) - 4.0 * at(xi - s) + at(xi - 2 * s)) / (2.0 * h);
    } else {
      out[k] = (at(xi + s) - at(xi - s)) / (2.0 * h);
    }
  }
  return out;
}

/// Maximizer of sup_u [u v_z + q L] at every node of the slice nearest t,
/// with the same one-sided z differences as the solver.
inline PolicySlice exercise_policy(const Surface& v, const ContractSpec& contract, const MarketModel& model,
                                   double q, double t) {
  const Grid& g = v.grid();
  const Slice& s = v.at(t);
  const double dz = g.z_axis.step();
  PolicySlice out{g, s.t, std::vector<double>(g.node_count(), 0.0)};
  for (std::size_t xi = 0; xi < g.x_count(); ++xi) {
    const double p = model.spot(s.t, g.x_point(xi));
    for (int j = 0; j < g.nz(); ++j) {
      const std::size_t f = g.flat(xi, j);
      HamiltonianInput in;
      in.can_increase = j + 1 < g.nz();
      in.can_decrease = j > 0;
      in.vz_up = in.can_increase ? (s.values[f + 1] - s.values[f]) / dz : 0.0;
      in.vz_down = in.can_decrease ? (s.values[f] - s.values[f - 1]) / dz : 0.0;
      in.p = p;
      in.z = g.z(j);
      in.q = q;
      out.u[f] = hamiltonian_sup(contract, in).u_star;
    }
  }
  return out;
}

/// h = -(sigma_F^T sigma_F)^{-1} sigma_F^T Sigma v_x at every node.
inline VectorField hedge_strategy(const Surface& v, const MarketModel& model, double t) {
  const Grid& g = v.grid();
  if (g.x_dims() != model.m()) throw ConfigError("surface dimension does not match the model");
  const Slice& s = v.at(t);
  VectorField out{g, s.t, model.n(), std::vector<double>(g.node_count() * model.n(), 0.0)};
  for (std::size_t xi = 0; xi < g.x_count(); ++xi) {
    const LocalCoefficients lc = local_coefficients(model, s.t, g.x_point(xi));
    for (int j = 0; j < g.nz(); ++j) {
      const auto grad = slice_gradient(g, s.values, xi, j);
      Vec vx(g.x_dims());
      for (int k = 0; k < g.x_dims(); ++k) vx(k) = grad[k];
      const Vec h = -(lc.hedge_map * vx);
      for (int c = 0; c < model.n(); ++c) out.values[g.flat(xi, j) * model.n() + c] = h(c);
    }
  }
  return out;
}

/// pi = (sigma_F^T sigma_F)^{-1} (mu_F / gamma - sigma_F^T Sigma J_x) at every node.
inline VectorField investment_strategy(const Surface& J, const MarketModel& model, double gamma, double t) {
  if (!(gamma > 0.0)) throw DomainError("risk aversion gamma must be positive");
  const Grid& g = J.grid();
  if (g.x_dims() != model.m()) throw ConfigError("surface dimension does not match the model");
  const Slice& s = J.at(t);
  VectorField out{g, s.t, model.n(), std::vector<double>(g.node_count() * model.n(), 0.0)};
  for (std::size_t xi = 0; xi < g.x_count(); ++xi) {
    const LocalCoefficients lc = local_coefficients(model, s.t, g.x_point(xi));
    for (int j = 0; j < g.nz(); ++j) {
      const auto grad = slice_gradient(g, s.values, xi, j);
      Vec jx(g.x_dims());
      for (int k = 0; k < g.x_dims(); ++k) jx(k) = grad[k];
      const Vec pi = lc.market_price / gamma - lc.hedge_map * jx;
      for (int c = 0; c < model.n(); ++c) out.values[g.flat(xi, j) * model.n() + c] = pi(c);
    }
  }
  return out;
}

inline StrategyBundle strategy_bundle(const Surface& v, const ContractSpec& contract, const MarketModel& model,
                                      double q, double t) {
  return {exercise_policy(v, contract, model, q, t), hedge_strategy(v, model, t), std::nullopt};
}

/// Exercise boundary of one slice: for each x node the largest z node with
/// u != 0, and how many times u switches between zero and nonzero along z.
struct SwitchingBoundary {
  std::vector<double> z_threshold;  // NaN when no node exercises
  std::vector<int> switches;
};

inline SwitchingBoundary switching_boundary(const PolicySlice& pol) {
  const Grid& g = pol.grid;
  SwitchingBoundary b;
  b.z_threshold.assign(g.x_count(), std::nan(""));
  b.switches.assign(g.x_count(), 0);
  for (std::size_t xi = 0; xi < g.x_count(); ++xi) {
    bool prev = pol.u[g.flat(xi, 0)] != 0.0;
    if (prev) b.z_threshold[xi] = g.z(0);
    for (int j = 1; j < g.nz(); ++j) {
      const bool on = pol.u[g.flat(xi, j)] != 0.0;
      if (on) b.z_threshold[xi] = g.z(j);
      if (on != prev) ++b.switches[xi];
      prev = on;
    }
  }
  return b;
}

/// Closed form of (sigma_F^T sigma_F)^{-1} sigma_F^T Sigma for the two-forward
/// Cartea-Villaplana model. With E = exp((T1 - T2)(k_C - k_D)) and D = 1 - E:
///
///   (1/D) [[ e^{k_C tau1}/alpha_C,   -E e^{k_D tau1}/alpha_D ],
///          [ -E e^{k_C tau2}/alpha_C,   e^{k_D tau2}/alpha_D ]],   tau_i = T_i - t.
inline Mat cv_hedge_matrix(const CarteaVillaplanaModel& cv, double t) {
  if (cv.n_forwards() != 2) throw ConfigError("closed-form hedge matrix needs two forwards");
  const double T1 = cv.maturities[0];
  const double T2 = cv.maturities[1];
  if (t > T1) throw DomainError("time is beyond the first forward maturity");
  const double E = std::exp((T1 - T2) * (cv.k_c - cv.k_d));
  const double D = 1.0 - E;
  if (std::abs(D) < 1e-14) {
    std::ostringstream os;
    os << "hedge matrix denominator vanishes (T1=" << T1 << ", T2=" << T2 << ", k_C=" << cv.k_c
       << ", k_D=" << cv.k_d << ")";
    throw NumericalError(os.str());
  }
  const double tau1 = T1 - t;
  const double tau2 = T2 - t;
  Mat H(2, 2);
  H << std::exp(cv.k_c * tau1) / cv.alpha_c, -E * std::exp(cv.k_d * tau1) / cv.alpha_d,
      -E * std::exp(cv.k_c * tau2) / cv.alpha_c, std::exp(cv.k_d * tau2) / cv.alpha_d;
  return H / D;
}

}  // namespace uipx
