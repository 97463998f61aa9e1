#pragma once

// Structured-contract payoffs C^u = int L(P, Z, u) ds + Phi(P_T, Z_T) and the
// pointwise maximization over the exercise rate u.

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <type_traits>
#include <utility>
#include <variant>

#include "uipx/errors.hpp"

namespace uipx {

enum class PenaltyKind { TwoSided, UpperOnly };

struct SwingSpec {
  double strike = 0.0;
  double u_max = 1.0;
  double volume_min = 0.0;  // m
  double volume_max = 1.0;  // M
  double penalty_scale = 1000.0;
  PenaltyKind penalty = PenaltyKind::TwoSided;

  void validate() const {
    if (!(u_max > 0.0)) throw ConfigError("swing: u_max must be positive");
    if (!(volume_min >= 0.0 && volume_min < volume_max)) {
      throw ConfigError("swing: volume bounds must satisfy 0 <= m < M");
    }
    if (!(penalty_scale > 0.0)) throw ConfigError("swing: penalty scale C must be positive");
  }
};

struct StorageSpec {
  double k1 = 1.0;
  double k2 = 0.0;
  double k3 = 1.0;
  double z_base = 1.0;  // Z_b
  double bleed = 0.0;   // abar, cost rate charged on injection
  double penalty_scale = 1.0;
  double target = 1.0;  // M in Phi = -C (M - z)

  void validate() const {
    if (!(k1 > 0.0 && k2 >= 0.0 && k3 > 0.0 && z_base > 0.0)) {
      throw ConfigError("storage: K1, K3, Z_b must be positive and K2 nonnegative");
    }
    if (!(bleed >= 0.0)) throw ConfigError("storage: bleed rate must be nonnegative");
    if (!(penalty_scale > 0.0 && target > 0.0)) throw ConfigError("storage: C and M must be positive");
  }
};

/// Arbitrary payoff given as functions, with a fixed control interval.
struct CustomPayoff {
  std::function<double(double p, double z, double u)> running;
  std::function<double(double p, double z)> terminal;
  double u_lo = 0.0;
  double u_hi = 1.0;
};

struct ClampSpec {
  std::optional<double> kappa;      // bound on |L|
  std::optional<double> kappa_phi;  // bound on |Phi|

  void validate() const {
    if (kappa && !(*kappa > 0.0)) throw ConfigError("clamp threshold kappa must be positive");
    if (kappa_phi && !(*kappa_phi > 0.0)) throw ConfigError("clamp threshold for Phi must be positive");
  }
};

struct ContractSpec {
  std::variant<SwingSpec, StorageSpec, CustomPayoff> payoff;
  ClampSpec clamp;
  double z_max = 1.0;
  int u_grid_points = 101;

  bool is_swing() const { return std::holds_alternative<SwingSpec>(payoff); }
  bool is_storage() const { return std::holds_alternative<StorageSpec>(payoff); }
  const SwingSpec& swing() const { return std::get<SwingSpec>(payoff); }
  const StorageSpec& storage() const { return std::get<StorageSpec>(payoff); }

  void validate() const {
    std::visit(
        [](const auto& p) {
          if constexpr (!std::is_same_v<std::decay_t<decltype(p)>, CustomPayoff>) p.validate();
        },
        payoff);
    clamp.validate();
    if (!(z_max > 0.0)) throw ConfigError("z_max must be positive");
    if (u_grid_points < 2) throw ConfigError("u grid needs at least two points");
    if (auto* c = std::get_if<CustomPayoff>(&payoff)) {
      if (!c->running || !c->terminal) throw ConfigError("custom payoff functions are unset");
      if (!(c->u_lo <= c->u_hi)) throw ConfigError("custom control range is empty");
    }
  }
};

inline ContractSpec make_swing(const SwingSpec& s, double z_max = 1.0) {
  ContractSpec c;
  c.payoff = s;
  c.z_max = z_max;
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------

/// u_in(z) = -K1 sqrt(1/(z + Z_b) + K2), u_out(z) = K3 sqrt(z).
inline std::pair<double, double> storage_rate_bounds(const StorageSpec& s, double z) {
  if (z < 0.0) throw DomainError("storage volume must be nonnegative");
  return {-s.k1 * std::sqrt(1.0 / (z + s.z_base) + s.k2), s.k3 * std::sqrt(z)};
}

/// Normalized storage control c in [-1, 1] mapped to a rate. The two branches
/// follow the published reparameterization literally: c >= 0 scales the
/// injection magnitude K1 sqrt(...), c <= 0 scales the withdrawal bound K3 sqrt(z).
inline double storage_reparam(const StorageSpec& s, double c, double z) {
  if (c < -1.0 || c > 1.0) throw DomainError("normalized storage control must lie in [-1, 1]");
  if (z < 0.0) throw DomainError("storage volume must be nonnegative");
  if (c >= 0.0) return c * s.k1 * std::sqrt(1.0 / (z + s.z_base) + s.k2);
  return c * s.k3 * std::sqrt(z);
}

/// Admissible control interval at volume z.
inline std::pair<double, double> control_range(const ContractSpec& spec, double z) {
  return std::visit(
      [z](const auto& p) -> std::pair<double, double> {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, SwingSpec>) {
          return {0.0, p.u_max};
        } else if constexpr (std::is_same_v<T, StorageSpec>) {
          return storage_rate_bounds(p, std::max(z, 0.0));
        } else {
          return {p.u_lo, p.u_hi};
        }
      },
      spec.payoff);
}

namespace detail {

inline double clamp_abs(double v, const std::optional<double>& k) {
  return k ? std::max(-*k, std::min(v, *k)) : v;
}

inline double raw_running(const ContractSpec& spec, double p, double z, double u) {
  return std::visit(
      [&](const auto& c) -> double {
        using T = std::decay_t<decltype(c)>;
        if constexpr (std::is_same_v<T, SwingSpec>) {
          return u * (p - c.strike);
        } else if constexpr (std::is_same_v<T, StorageSpec>) {
          return p * (u - (u < 0.0 ? c.bleed : 0.0));
        } else {
          return c.running(p, z, u);
        }
      },
      spec.payoff);
}

}  // namespace detail

inline double running_payoff(const ContractSpec& spec, double p, double z, double u) {
  const auto [lo, hi] = control_range(spec, z);
  const double tol = 1e-12 * std::max(1.0, std::max(std::abs(lo), std::abs(hi)));
  if (u < lo - tol || u > hi + tol) {
    std::ostringstream os;
    os << "control u=" << u << (u < lo ? " below lower bound " : " above upper bound ")
       << (u < lo ? lo : hi) << " at z=" << z;
    throw DomainError(os.str());
  }
  return detail::clamp_abs(detail::raw_running(spec, p, z, u), spec.clamp.kappa);
}

inline double terminal_penalty(const ContractSpec& spec, double p, double z) {
  const double raw = std::visit(
      [&](const auto& c) -> double {
        using T = std::decay_t<decltype(c)>;
        if constexpr (std::is_same_v<T, SwingSpec>) {
          if (c.penalty == PenaltyKind::UpperOnly) {
            return std::min(0.0, -c.penalty_scale * (z - c.volume_max));
          }
          return -c.penalty_scale *
                 (std::max(c.volume_min - z, 0.0) + std::max(z - c.volume_max, 0.0));
        } else if constexpr (std::is_same_v<T, StorageSpec>) {
          return -c.penalty_scale * (c.target - z);
        } else {
          return c.terminal(p, z);
        }
      },
      spec.payoff);
  return detail::clamp_abs(raw, spec.clamp.kappa_phi);
}

// ---------------------------------------------------------------------------

struct HamiltonianResult {
  double value = 0.0;
  double u_star = 0.0;
};

/// Inputs for sup_u [u v_z + q L(p, z, u)]. Upwinding uses `vz_up` for u > 0
/// and `vz_down` for u < 0; the solver forbids directions that leave [0, z_max].
struct HamiltonianInput {
  double vz_up = 0.0;
  double vz_down = 0.0;
  double p = 0.0;
  double z = 0.0;
  double q = 1.0;
  bool can_increase = true;
  bool can_decrease = true;
};

inline HamiltonianResult hamiltonian_sup(const ContractSpec& spec, const HamiltonianInput& in) {
  auto [lo, hi] = control_range(spec, in.z);
  if (!in.can_increase) hi = std::min(hi, 0.0);
  if (!in.can_decrease) lo = std::max(lo, 0.0);
  if (lo > hi) throw DomainError("empty control range");

  // Unclamped swing: linear in u, bang-bang with ties resolved to u = 0.
  if (spec.is_swing() && !spec.clamp.kappa) {
    const auto& s = spec.swing();
    const double slope = in.vz_up + in.q * (in.p - s.strike);
    if (hi > 0.0 && slope > 0.0) return {hi * slope, hi};
    return {0.0, 0.0};
  }

  auto eval = [&](double u) {
    const double vz = u >= 0.0 ? in.vz_up : in.vz_down;
    return u * vz + in.q * detail::clamp_abs(detail::raw_running(spec, in.p, in.z, u), spec.clamp.kappa);
  };

  HamiltonianResult best;
  bool have = false;
  if (lo <= 0.0 && hi >= 0.0) {
    best = {eval(0.0), 0.0};
    have = true;
  }
  auto consider = [&](double u) {
    const double v = eval(u);
    if (!have || v > best.value) {
      best = {v, u};
      have = true;
    }
  };

  // Unclamped storage is piecewise linear with its kink at u = 0.
  if (spec.is_storage() && !spec.clamp.kappa) {
    consider(lo);
    consider(hi);
    return best;
  }
  const int n = spec.u_grid_points;
  for (int i = 0; i < n; ++i) consider(lo + (hi - lo) * static_cast<double>(i) / (n - 1));
  return best;
}

inline HamiltonianResult hamiltonian_sup(const ContractSpec& spec, double v_z, double p, double z,
                                         double q) {
  return hamiltonian_sup(spec, HamiltonianInput{v_z, v_z, p, z, q, true, true});
}

}  // namespace uipx
