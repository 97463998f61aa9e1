#pragma once

// Configurations shared by the unit tests and the acceptance runner.

#include <cmath>
#include <memory>

#include "uipx/uipx.hpp"

namespace fx {

using namespace uipx;

/// Swing with K = 0, m = 0, M = 0.5 and the upper-only penalty.
inline ContractSpec upper_swing() {
  SwingSpec s;
  s.strike = 0.0;
  s.volume_min = 0.0;
  s.volume_max = 0.5;
  s.penalty = PenaltyKind::UpperOnly;
  return make_swing(s, 1.0);
}

/// Swing with K = exp(2.5), m = 0.1, M = 0.5 and the two-sided penalty.
inline ContractSpec two_sided_swing() {
  SwingSpec s;
  s.strike = std::exp(2.5);
  s.volume_min = 0.1;
  s.volume_max = 0.5;
  s.penalty = PenaltyKind::TwoSided;
  return make_swing(s, 1.0);
}

inline Grid narrow_grid(int I, int J, int N = 0) {
  return make_grid_1d(1.0, std::log(21.6), std::log(73.9), I, 1.0, J, N);
}

inline Grid wide_grid(int I, int J, int N = 0) {
  return make_grid_1d(1.0, std::log(0.01), std::log(500.0), I, 1.0, J, N);
}

inline LinearDynamicsParams linear_params(double gamma = 0.01, double rho = 0.5, double k = 0.01) {
  LinearDynamicsParams p;
  p.gamma = gamma;
  p.rho = rho;
  p.k = k;
  return p;
}

inline J0Gradient riccati_gradient(const LinearDynamicsParams& p) {
  return J0Gradient::from_riccati(std::make_shared<RiccatiSolution>(solve_riccati(p)));
}

inline CarteaVillaplanaModel cv_model(int forwards, double rho = 0.3) {
  CarteaVillaplanaModel m;
  m.k_c = 1.0;
  m.k_d = 2.0;
  m.alpha_c = -0.5;
  m.alpha_d = 1.0;
  m.sigma_c = [](double t) { return 0.3 + 0.05 * t; };
  m.sigma_d = [](double t) { return 0.4 - 0.1 * t; };
  m.eta = [](double) { return 3.0; };
  m.rho = rho;
  if (forwards == 1) {
    m.forward_drift = [](double t) { return Vec::Constant(1, 0.05 + 0.01 * t); };
    m.maturities = {1.25};
  } else {
    m.forward_drift = [](double t) {
      Vec v(2);
      v << 0.05 + 0.01 * t, 0.02;
      return v;
    };
    m.maturities = {1.0, 1.5};
  }
  m.horizon = 1.0;
  return m;
}

inline Grid cv_grid(int I, int J, int N = 0) {
  Grid g;
  g.horizon = 1.0;
  g.time_steps = N;
  g.x_axes = {Axis{-1.2, 1.2, I}, Axis{-1.0, 1.0, I}};
  g.z_axis = Axis{0.0, 1.0, J};
  return g;
}

/// Swing for the two-factor examples: spot near exp(3), strike 15.
inline ContractSpec cv_swing() {
  SwingSpec s;
  s.strike = 15.0;
  s.volume_min = 0.1;
  s.volume_max = 0.5;
  s.penalty_scale = 100.0;
  s.penalty = PenaltyKind::TwoSided;
  return make_swing(s, 1.0);
}

/// Max over interior nodes of stored slices of |a - b|.
inline double max_abs_interior(const Surface& a, const Surface& b, double offset = 0.0) {
  const Grid& g = b.grid();
  double m = 0.0;
  for (const auto& sb : b.slices()) {
    const Slice& sa = a.at(sb.t);
    for (std::size_t xi = 0; xi < g.x_count(); ++xi) {
      if (!g.x_interior(xi)) continue;
      for (int j = 1; j + 1 < g.nz(); ++j) {
        const std::size_t f = g.flat(xi, j);
        m = std::max(m, std::abs(sa.values[f] - offset - sb.values[f]));
      }
    }
  }
  return m;
}

}  // namespace fx
