#include <gtest/gtest.h>

#include <random>

#include "fixtures.hpp"

using namespace uipx;

namespace {

SwingSpec swing(double K, double m, double M, PenaltyKind kind = PenaltyKind::TwoSided) {
  SwingSpec s;
  s.strike = K;
  s.volume_min = m;
  s.volume_max = M;
  s.penalty = kind;
  return s;
}

ContractSpec storage(double bleed = 0.05) {
  StorageSpec s;
  s.k1 = 1.0;
  s.k2 = 0.0;
  s.k3 = 1.0;
  s.z_base = 1.0;
  s.bleed = bleed;
  ContractSpec c;
  c.payoff = s;
  c.z_max = 4.0;
  c.validate();
  return c;
}

}  // namespace

TEST(Spec, InvalidSwingRejected) {
  EXPECT_THROW(make_swing(swing(0, 0.5, 0.5)), ConfigError);
  SwingSpec s = swing(0, 0, 1);
  s.penalty_scale = 0.0;
  EXPECT_THROW(make_swing(s), ConfigError);
  s = swing(0, 0, 1);
  s.u_max = 0.0;
  EXPECT_THROW(make_swing(s), ConfigError);
  ContractSpec c = make_swing(swing(0, 0, 1));
  c.clamp.kappa = -1.0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(RunningPayoff, SwingValue) {
  const auto c = make_swing(swing(20, 0, 1));
  EXPECT_DOUBLE_EQ(running_payoff(c, 30.0, 0.2, 1.0), 10.0);
}

TEST(RunningPayoff, SwingClamped) {
  auto c = make_swing(swing(20, 0, 1));
  c.clamp.kappa = 5.0;
  EXPECT_DOUBLE_EQ(running_payoff(c, 30.0, 0.2, 1.0), 5.0);
}

TEST(RunningPayoff, StorageInjectionPaysBleed) {
  EXPECT_NEAR(running_payoff(storage(0.05), 10.0, 1.0, -0.2), -2.5, 1e-12);
}

TEST(RunningPayoff, OutsideControlRangeThrows) {
  const auto c = make_swing(swing(20, 0, 1));
  EXPECT_THROW(running_payoff(c, 30.0, 0.2, 1.5), DomainError);
  EXPECT_THROW(running_payoff(c, 30.0, 0.2, -0.1), DomainError);
}

TEST(RunningPayoff, ClampBoundHoldsOnRandomInputs) {
  auto c = make_swing(swing(20, 0, 1));
  c.clamp.kappa = 5.0;
  auto st = storage();
  st.clamp.kappa = 3.0;
  std::mt19937_64 gen(3);
  std::uniform_real_distribution<double> p(0.0, 500.0), z(0.0, 4.0), u(0.0, 1.0);
  for (int i = 0; i < 1000000; ++i) {
    const double zi = z(gen);
    ASSERT_LE(std::abs(running_payoff(c, p(gen), zi, u(gen))), 5.0);
    const auto [lo, hi] = control_range(st, zi);
    ASSERT_LE(std::abs(running_payoff(st, p(gen), zi, lo + (hi - lo) * u(gen))), 3.0);
  }
}

TEST(TerminalPenalty, Values) {
  const auto two = make_swing(swing(0, 0.1, 0.5));
  EXPECT_EQ(terminal_penalty(two, 10.0, 0.3), 0.0);
  EXPECT_NEAR(terminal_penalty(two, 10.0, 0.05), -50.0, 1e-9);
  const auto upper = make_swing(swing(0, 0.0, 0.5, PenaltyKind::UpperOnly));
  EXPECT_NEAR(terminal_penalty(upper, 10.0, 0.6), -100.0, 1e-9);
  EXPECT_EQ(terminal_penalty(upper, 10.0, 0.2), 0.0);
}

TEST(TerminalPenalty, NonPositiveAndZeroExactlyInsideBounds) {
  const auto two = make_swing(swing(0, 0.1, 0.5));
  for (int i = 0; i <= 1000; ++i) {
    const double z = i / 1000.0;
    const double phi = terminal_penalty(two, 10.0, z);
    EXPECT_LE(phi, 0.0);
    EXPECT_EQ(phi == 0.0, z >= 0.1 && z <= 0.5) << "z=" << z;
  }
}

TEST(TerminalPenalty, ClampedByKappaPhi) {
  auto two = make_swing(swing(0, 0.1, 0.5));
  two.clamp.kappa_phi = 20.0;
  EXPECT_EQ(terminal_penalty(two, 10.0, 1.0), -20.0);
}

TEST(StorageBounds, Values) {
  StorageSpec s;
  s.k1 = 1.0;
  s.k2 = 0.0;
  s.k3 = 2.0;
  s.z_base = 1.0;
  EXPECT_EQ(storage_rate_bounds(s, 0.0).second, 0.0);
  EXPECT_DOUBLE_EQ(storage_rate_bounds(s, 0.0).first, -1.0);
  double prev = storage_rate_bounds(s, 0.0).first;
  for (int i = 1; i <= 100; ++i) {
    const double u_in = storage_rate_bounds(s, 0.1 * i).first;
    EXPECT_GT(u_in, prev);
    EXPECT_LE(u_in, 0.0);
    EXPECT_GE(storage_rate_bounds(s, 0.1 * i).second, 0.0);
    prev = u_in;
  }
}

TEST(StorageReparam, Branches) {
  StorageSpec s;
  s.k1 = 1.5;
  s.k2 = 0.2;
  s.k3 = 2.0;
  s.z_base = 1.0;
  EXPECT_EQ(storage_reparam(s, 0.0, 4.0), 0.0);
  EXPECT_DOUBLE_EQ(storage_reparam(s, 1.0, 4.0), 1.5 * std::sqrt(1.0 / 5.0 + 0.2));
  EXPECT_DOUBLE_EQ(storage_reparam(s, -1.0, 4.0), -2.0 * 2.0);
  EXPECT_NEAR(storage_reparam(s, 1e-12, 4.0), 0.0, 1e-11);
  EXPECT_NEAR(storage_reparam(s, -1e-12, 4.0), 0.0, 1e-11);
  EXPECT_THROW(storage_reparam(s, 1.5, 4.0), DomainError);
}

TEST(Hamiltonian, IndifferencePointResolvesToNoExercise) {
  const auto c = make_swing(swing(20, 0, 1));
  const auto r = hamiltonian_sup(c, -(30.0 - 20.0), 30.0, 0.2, 1.0);
  EXPECT_EQ(r.value, 0.0);
  EXPECT_EQ(r.u_star, 0.0);
}

TEST(Hamiltonian, SwingValue) {
  const auto c = make_swing(swing(20, 0, 1));
  const auto r = hamiltonian_sup(c, 1.0, 30.0, 0.2, 1.0);
  EXPECT_DOUBLE_EQ(r.value, 11.0);
  EXPECT_EQ(r.u_star, 1.0);
}

TEST(Hamiltonian, BangBangMatchesGridScan) {
  const auto c = make_swing(swing(20, 0, 1));
  // a custom payoff with the same L forces the grid scan
  ContractSpec scan;
  CustomPayoff cp;
  cp.running = [](double p, double, double u) { return u * (p - 20.0); };
  cp.terminal = [](double, double) { return 0.0; };
  cp.u_lo = 0.0;
  cp.u_hi = 1.0;
  scan.payoff = cp;
  scan.u_grid_points = 101;
  std::mt19937_64 gen(9);
  std::uniform_real_distribution<double> vz(-40.0, 40.0), p(0.0, 60.0);
  for (int i = 0; i < 2000; ++i) {
    const double a = vz(gen), b = p(gen);
    const auto x = hamiltonian_sup(c, a, b, 0.3, 1.0);
    const auto y = hamiltonian_sup(scan, a, b, 0.3, 1.0);
    EXPECT_NEAR(x.value, y.value, 1e-9);
    EXPECT_TRUE(x.u_star == 0.0 || x.u_star == 1.0);
    if (std::abs(a + b - 20.0) > 1e-9) {
      EXPECT_EQ(x.u_star, y.u_star);
    }
  }
}

TEST(Hamiltonian, ConvexInVzAndNondecreasingForSwing) {
  for (const ContractSpec& c : {make_swing(swing(20, 0, 1)), storage()}) {
    std::vector<double> vals;
    for (int i = 0; i <= 400; ++i) vals.push_back(hamiltonian_sup(c, -50.0 + 0.25 * i, 25.0, 1.0, 1.0).value);
    if (c.is_swing()) {
      for (std::size_t i = 1; i < vals.size(); ++i) EXPECT_GE(vals[i], vals[i - 1] - 1e-12);
    }
    for (std::size_t i = 1; i + 1 < vals.size(); ++i) EXPECT_GE(vals[i + 1] - 2 * vals[i] + vals[i - 1], -1e-9);
  }
}

TEST(Hamiltonian, ClampedSwingScansGrid) {
  auto c = make_swing(swing(20, 0, 1));
  c.clamp.kappa = 5.0;
  // L = min(u (p - K), 5): with p = 30 and v_z = 0 the sup is 5, reached first at u = 0.5
  const auto r = hamiltonian_sup(c, 0.0, 30.0, 0.2, 1.0);
  EXPECT_NEAR(r.value, 5.0, 1e-12);
  EXPECT_NEAR(r.u_star, 0.5, 1e-12);
}

TEST(Hamiltonian, RestrictedDirections) {
  const auto c = make_swing(swing(20, 0, 1));
  HamiltonianInput in{1.0, 1.0, 30.0, 1.0, 1.0, false, true};
  EXPECT_EQ(hamiltonian_sup(c, in).u_star, 0.0);
  const auto st = storage();
  HamiltonianInput lo{10.0, -10.0, 10.0, 0.0, 1.0, true, false};
  EXPECT_GE(hamiltonian_sup(st, lo).u_star, 0.0);
}
