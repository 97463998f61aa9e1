#include <gtest/gtest.h>

#include "fixtures.hpp"

using namespace uipx;

namespace {

struct TwoSided {
  LinearDynamicsParams p = fx::linear_params();
  ConstantCorrelationModel cc = linear_dynamics_model(p);
  MarketModel model = to_market_model(cc);
  ContractSpec contract = fx::two_sided_swing();
  Surface v;

  TwoSided() {
    SolveOptions o;
    o.store_times = {0.5, 0.75};
    v = solve_uip_pde(model, contract, 1.0, 0.01, fx::riccati_gradient(p), fx::wide_grid(100, 40), o);
  }
};

const TwoSided& two_sided() {
  static const TwoSided s;
  return s;
}

Surface from_slice(const Grid& g, double t, std::vector<double> values) {
  Grid gg = g;
  Surface s(gg, SurfaceMeta{});
  Slice sl;
  sl.t = t;
  sl.time_index = static_cast<int>(std::lround(t / g.horizon * g.time_steps));
  sl.values = std::move(values);
  s.add_slice(std::move(sl));
  return s;
}

}  // namespace

TEST(ExercisePolicy, BangBangOnEveryNode) {
  const auto& s = two_sided();
  for (double t : {0.0, 0.5, 0.75}) {
    const PolicySlice pol = exercise_policy(s.v, s.contract, s.model, 1.0, t);
    for (double u : pol.u) EXPECT_TRUE(u == 0.0 || u == 1.0);
  }
}

TEST(ExercisePolicy, ExerciseAtHighPriceAndLowVolume) {
  const auto& s = two_sided();
  const PolicySlice pol = exercise_policy(s.v, s.contract, s.model, 1.0, 0.75);
  const Grid& g = pol.grid;
  for (std::size_t xi = 0; xi < g.x_count(); ++xi) {
    if (g.x_point(xi)(0) < 2.6) continue;
    for (int j = 0; j < g.nz() && g.z(j) <= 0.25 + 1e-12; ++j) EXPECT_EQ(pol.u[g.flat(xi, j)], 1.0);
  }
}

TEST(ExercisePolicy, BelowMinimumVolumeExercisesAboveStrike) {
  const auto& s = two_sided();
  const PolicySlice pol = exercise_policy(s.v, s.contract, s.model, 1.0, 0.75);
  const Grid& g = pol.grid;
  for (std::size_t xi = 0; xi < g.x_count(); ++xi) {
    if (g.x_point(xi)(0) < 2.6) continue;
    for (int j = 0; g.z(j) < 0.1 - 1e-12; ++j) EXPECT_EQ(pol.u[g.flat(xi, j)], 1.0) << "x=" << g.x_point(xi)(0);
  }
}

TEST(ExercisePolicy, SingleSwitchAlongEachVolumeFiber) {
  const auto& s = two_sided();
  for (double t : {0.5, 0.75}) {
    const PolicySlice pol = exercise_policy(s.v, s.contract, s.model, 1.0, t);
    const SwitchingBoundary b = switching_boundary(pol);
    for (std::size_t xi = 0; xi < b.switches.size(); ++xi) {
      EXPECT_LE(b.switches[xi], 1);
      if (b.switches[xi] == 1) {
        EXPECT_EQ(pol.u[pol.grid.flat(xi, 0)], 1.0);
      }
    }
  }
}

TEST(ExercisePolicy, FlatInVolumeBelowStrikeDoesNotExercise) {
  const Grid g = fx::wide_grid(20, 10, 100);
  const auto& s = two_sided();
  const Surface flat = from_slice(g, 0.5, std::vector<double>(g.node_count(), 7.0));
  const PolicySlice pol = exercise_policy(flat, s.contract, s.model, 1.0, 0.5);
  for (std::size_t xi = 0; xi < g.x_count(); ++xi) {
    const double p = std::exp(g.x_point(xi)(0));
    // the top z node cannot move up
    for (int j = 0; j < g.nz(); ++j) {
      EXPECT_EQ(pol.u[g.flat(xi, j)], p < s.contract.swing().strike || j + 1 == g.nz() ? 0.0 : 1.0);
    }
  }
}

TEST(HedgeStrategy, NonPositiveAtMidHorizon) {
  const auto& s = two_sided();
  const VectorField h = hedge_strategy(s.v, s.model, 0.5);
  double worst = -INFINITY;
  for (double x : h.values) worst = std::max(worst, x);
  EXPECT_LE(worst, 1e-9);
}

TEST(HedgeStrategy, VanishesAboveMaximumVolume) {
  const auto& s = two_sided();
  const VectorField h = hedge_strategy(s.v, s.model, 0.5);
  const Grid& g = h.grid;
  for (std::size_t xi = 0; xi < g.x_count(); ++xi) {
    for (int j = 0; j < g.nz(); ++j) {
      if (g.z(j) >= 0.5) {
        EXPECT_NEAR(h.at(g.flat(xi, j), 0), 0.0, 1e-9);
      }
    }
  }
}

TEST(HedgeStrategy, ZeroPositionAndFlatSurface) {
  const auto& s = two_sided();
  const Surface zero = solve_uip_pde(s.model, s.contract, 0.0, 0.01, fx::riccati_gradient(s.p), fx::wide_grid(40, 20));
  for (double x : hedge_strategy(zero, s.model, 0.0).values) EXPECT_EQ(x, 0.0);
  const Grid g = fx::wide_grid(20, 10, 100);
  const Surface flat = from_slice(g, 0.5, std::vector<double>(g.node_count(), -3.0));
  for (double x : hedge_strategy(flat, s.model, 0.5).values) EXPECT_EQ(x, 0.0);
}

TEST(HedgeStrategy, DimensionMismatchRejected) {
  const auto& s = two_sided();
  const MarketModel cv = to_market_model(fx::cv_model(2));
  EXPECT_THROW(hedge_strategy(s.v, cv, 0.5), ConfigError);
}

TEST(InvestmentStrategy, DifferenceIdentityWithHedge) {
  const auto& s = two_sided();
  const Grid g0 = fx::narrow_grid(40, 20);
  SolveOptions o;
  o.store_times = {0.5};
  const Surface j1 = solve_J_pde(s.model, s.contract, 1.0, 0.01, g0, o);
  Grid g = g0;
  g.time_steps = j1.grid().time_steps;
  const Surface j0 = solve_J_pde(s.model, s.contract, 0.0, 0.01, g, o);
  std::vector<double> diff(g.node_count());
  for (std::size_t i = 0; i < diff.size(); ++i) diff[i] = j1.at(0.5).values[i] - j0.at(0.5).values[i];
  const Surface v = from_slice(j1.grid(), j1.at(0.5).t, diff);
  const VectorField a = investment_strategy(j1, s.model, 0.01, 0.5);
  const VectorField b = investment_strategy(j0, s.model, 0.01, 0.5);
  const VectorField h = hedge_strategy(v, s.model, 0.5);
  for (std::size_t i = 0; i < h.values.size(); ++i) {
    EXPECT_NEAR(a.values[i] - b.values[i], h.values[i], 1e-10 * std::max(1.0, std::abs(h.values[i])));
  }
}

TEST(InvestmentStrategy, NoEdgeNoClaimGivesZero) {
  auto cc = linear_dynamics_model(fx::linear_params());
  cc.forward_drift = [](double, double) { return 0.0; };
  const MarketModel m = to_market_model(cc);
  const Grid g = fx::narrow_grid(10, 4, 100);
  const Surface J = from_slice(g, 0.5, std::vector<double>(g.node_count(), std::log(0.01) / 0.01));
  for (double x : investment_strategy(J, m, 0.01, 0.5).values) EXPECT_NEAR(x, 0.0, 1e-12);
}

TEST(InvestmentStrategy, MyopicTermFadesWithRiskAversion) {
  const auto cc = linear_dynamics_model(fx::linear_params());
  const MarketModel m = to_market_model(cc);
  const Grid g = fx::narrow_grid(10, 4, 100);
  std::vector<double> vals(g.node_count());
  for (std::size_t xi = 0; xi < g.x_count(); ++xi) {
    for (int j = 0; j < g.nz(); ++j) vals[g.flat(xi, j)] = 2.0 * g.x_point(xi)(0);
  }
  const Surface J = from_slice(g, 0.5, vals);
  const VectorField pi = investment_strategy(J, m, 1e12, 0.5);
  for (std::size_t xi = 0; xi < g.x_count(); ++xi) {
    const double limit = -2.0 * cc.rho * cc.factor_vol(0.5, 0.0) / cc.forward_vol(0.5, 0.0);
    EXPECT_NEAR(pi.at(g.flat(xi, 0), 0), limit, 1e-9);
  }
}

TEST(CvHedgeMatrix, MatchesNumericProduct) {
  const auto cv = fx::cv_model(2);
  const MarketModel m = to_market_model(cv);
  for (double t : {0.0, 0.4, 0.9}) {
    Mat sf(2, 2);
    sf.col(0) = cv_forward_vol(cv, t, 0);
    sf.col(1) = cv_forward_vol(cv, t, 1);
    const Mat sigma = cv.sigma_transpose(t).transpose();
    const Mat numeric = (sf.transpose() * sf).inverse() * sf.transpose() * sigma;
    EXPECT_LT((cv_hedge_matrix(cv, t) - numeric).cwiseAbs().maxCoeff(), 1e-10);
    Vec x(2);
    x << 0.3, -0.2;
    EXPECT_LT((cv_hedge_matrix(cv, t) - local_coefficients(m, t, x).hedge_map).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(CvHedgeMatrix, FirstMaturityEntry) {
  const auto cv = fx::cv_model(2);
  const double E = std::exp((1.0 - 1.5) * (cv.k_c - cv.k_d));
  EXPECT_NEAR(cv_hedge_matrix(cv, 1.0)(0, 0), 1.0 / (cv.alpha_c * (1.0 - E)), 1e-14);
}

TEST(CvHedgeMatrix, IndependentOfCorrelation) {
  for (double t : {0.1, 0.6}) {
    const auto a = fx::cv_model(2, 0.0);
    const auto b = fx::cv_model(2, 0.5);
    auto numeric = [t](const CarteaVillaplanaModel& cv) {
      Mat sf(2, 2);
      sf.col(0) = cv_forward_vol(cv, t, 0);
      sf.col(1) = cv_forward_vol(cv, t, 1);
      return Mat((sf.transpose() * sf).inverse() * sf.transpose() * cv.sigma_transpose(t).transpose());
    };
    EXPECT_LT((numeric(a) - numeric(b)).cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_LT((cv_hedge_matrix(a, t) - cv_hedge_matrix(b, t)).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(CvHedgeMatrix, VanishingDenominatorThrows) {
  auto cv = fx::cv_model(2);
  cv.k_d = cv.k_c;
  EXPECT_THROW(cv_hedge_matrix(cv, 0.2), NumericalError);
  EXPECT_THROW(cv_hedge_matrix(fx::cv_model(1), 0.2), ConfigError);
}

TEST(ExercisePolicy, BelowStrikeDefersMissingVolumeWhenPriceDriftsUp) {
  // the log price reverts towards theta = 3.5, so below the strike the missing
  // volume is cheaper to take at the end of the window
  const auto& s = two_sided();
  const PolicySlice pol = exercise_policy(s.v, s.contract, s.model, 1.0, 0.75);
  const Grid& g = pol.grid;
  for (std::size_t xi = 0; xi < g.x_count(); ++xi) {
    const double x = g.x_point(xi)(0);
    if (x < 1.0 || x > 2.4) continue;
    for (int j = 0; g.z(j) < 0.1 - 1e-12; ++j) {
      if (g.z(j) >= 0.05) {
        EXPECT_EQ(pol.u[g.flat(xi, j)], 0.0) << "x=" << x << " z=" << g.z(j);
      }
    }
  }
}

TEST(ExercisePolicy, ThresholdLowerBelowMinimumVolume) {
  const auto& s = two_sided();
  const PolicySlice pol = exercise_policy(s.v, s.contract, s.model, 1.0, 0.75);
  const Grid& g = pol.grid;
  // smallest x >= 0 from which the row exercises
  auto threshold = [&](int j) {
    double x_star = INFINITY;
    for (std::size_t xi = g.x_count(); xi-- > 0;) {
      const double x = g.x_point(xi)(0);
      if (x < 0.0 || pol.u[g.flat(xi, j)] == 0.0) break;
      x_star = x;
    }
    return x_star;
  };
  double above = 0.0;
  for (int j = 0; g.z(j) <= 0.25 + 1e-12; ++j) {
    if (g.z(j) >= 0.1) above = std::max(above, threshold(j));
  }
  for (int j = 1; g.z(j) < 0.1 - 1e-12; ++j) EXPECT_LE(threshold(j), above) << "z=" << g.z(j);
  EXPECT_LT(above, 2.7);
}
