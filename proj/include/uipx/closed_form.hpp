#pragma once

// No-claim log-value function J0 in closed form or via ODEs.
//
// Linear dynamics model:  dF/F = (a - k X) dt + sigmabar_F dW^1,
//                         dX   = delta (theta - X) dt + sigma (rho dW^1 + sqrt(1-rho^2) dW^2),
// with the quadratic ansatz J0(t, x) = alpha(t) + beta(t) x + Gamma(t) x^2.

#include <array>
#include <cmath>
#include <sstream>
#include <vector>

#include <boost/math/quadrature/gauss_kronrod.hpp>

#include "uipx/errors.hpp"
#include "uipx/linalg.hpp"
#include "uipx/market_models.hpp"

namespace uipx {

struct LinearDynamicsParams {
  double a = 0.03;
  double k = 0.01;
  double sigma_f = 0.3;
  double delta = 0.4;
  double theta = 3.5;
  double sigma = 0.55;
  double rho = 0.5;
  double gamma = 0.01;
  double horizon = 1.0;

  void validate() const {
    if (!(sigma_f > 0.0)) throw ConfigError("linear dynamics: sigma_F must be positive");
    if (!(sigma > 0.0)) throw ConfigError("linear dynamics: sigma must be positive");
    if (!(std::abs(rho) < 1.0)) throw ConfigError("linear dynamics: rho must lie in (-1, 1)");
    if (!(gamma > 0.0)) throw ConfigError("linear dynamics: gamma must be positive");
    if (!(horizon > 0.0)) throw ConfigError("linear dynamics: horizon must be positive");
  }

  /// rho sigma / sigmabar_F
  double beta_ratio() const { return rho * sigma / sigma_f; }
  /// gamma sigma^2 (1 - rho^2)
  double unhedgeable() const { return gamma * sigma * sigma * (1.0 - rho * rho); }
};

/// Constant-correlation model with mu_F = a - k x, b = delta (theta - x),
/// p(t, x) = exp(x). The b_bar drift is again of OU type, recorded in
/// `pricing_ou` when its speed is nonzero.
inline ConstantCorrelationModel linear_dynamics_model(const LinearDynamicsParams& p) {
  p.validate();
  ConstantCorrelationModel m;
  m.forward_drift = [a = p.a, k = p.k](double, double x) { return a - k * x; };
  m.forward_vol = [s = p.sigma_f](double, double) { return s; };
  m.factor_drift = [d = p.delta, th = p.theta](double, double x) { return d * (th - x); };
  m.factor_vol = [s = p.sigma](double, double) { return s; };
  m.rho = p.rho;
  m.spot = [](double, double x) { return std::exp(x); };
  m.horizon = p.horizon;
  m.maturity = p.horizon;
  const double speed = p.delta - p.beta_ratio() * p.k;
  if (std::abs(speed) > 1e-12) {
    m.pricing_ou = OuStructure{speed, (p.delta * p.theta - p.beta_ratio() * p.a) / speed, p.sigma};
  }
  return m;
}

/// Coefficients (alpha, beta, Gamma) tabulated on an equispaced time grid,
/// with their time derivatives for cubic Hermite interpolation.
class RiccatiSolution {
 public:
  using State = std::array<double, 3>;  // alpha, beta, Gamma

  RiccatiSolution(LinearDynamicsParams params, std::vector<State> values, std::vector<State> slopes)
      : params_(params), values_(std::move(values)), slopes_(std::move(slopes)) {}

  const LinearDynamicsParams& params() const { return params_; }
  int steps() const { return static_cast<int>(values_.size()) - 1; }
  double node_time(int i) const { return params_.horizon * i / steps(); }
  const State& node(int i) const { return values_.at(i); }

  State at(double t) const {
    const double T = params_.horizon;
    if (t < -1e-12 || t > T + 1e-12) throw DomainError("time outside [0, T]");
    const double h = T / steps();
    int i = static_cast<int>(std::floor(t / h));
    i = std::max(0, std::min(i, steps() - 1));
    const double s = (t - i * h) / h;
    if (std::abs(s) < 1e-12) return values_[i];
    if (std::abs(s - 1.0) < 1e-12) return values_[i + 1];
    const double h00 = (1 + 2 * s) * (1 - s) * (1 - s);
    const double h10 = s * (1 - s) * (1 - s);
    const double h01 = s * s * (3 - 2 * s);
    const double h11 = s * s * (s - 1);
    State out{};
    for (int c = 0; c < 3; ++c) {
      out[c] = h00 * values_[i][c] + h10 * h * slopes_[i][c] + h01 * values_[i + 1][c] +
               h11 * h * slopes_[i + 1][c];
    }
    return out;
  }

  double alpha(double t) const { return at(t)[0]; }
  double beta(double t) const { return at(t)[1]; }
  double gamma_coef(double t) const { return at(t)[2]; }

  /// d/dt of (alpha, beta, Gamma) from the ODE system.
  static State rhs(const LinearDynamicsParams& p, const State& y) {
    const double r = p.beta_ratio();
    const double c = p.unhedgeable();
    const double s2f = p.sigma_f * p.sigma_f;
    const double drift0 = p.delta * p.theta - r * p.a;
    const double be = y[1];
    const double ga = y[2];
    const double dga = -(p.k * p.k / (2.0 * p.gamma * s2f) + 2.0 * (r * p.k - p.delta) * ga -
                         2.0 * c * ga * ga);
    const double dbe =
        -((r * p.k - p.delta - 2.0 * c * ga) * be - p.a * p.k / (p.gamma * s2f) + 2.0 * drift0 * ga);
    const double dal = -(p.a * p.a / (2.0 * p.gamma * s2f) + drift0 * be - 0.5 * c * be * be +
                         p.sigma * p.sigma * ga);
    return {dal, dbe, dga};
  }

 private:
  LinearDynamicsParams params_;
  std::vector<State> values_;
  std::vector<State> slopes_;
};

inline constexpr double kRiccatiBlowUp = 1e12;

/// Backward fourth-order Runge-Kutta from the terminal data
/// alpha(T) = log(gamma)/gamma, beta(T) = Gamma(T) = 0.
inline RiccatiSolution solve_riccati(const LinearDynamicsParams& p, int steps = 10000) {
  p.validate();
  if (steps < 2) throw DomainError("Riccati solve needs at least two steps");
  using State = RiccatiSolution::State;
  const double h = p.horizon / steps;
  std::vector<State> values(steps + 1), slopes(steps + 1);
  State y{std::log(p.gamma) / p.gamma, 0.0, 0.0};
  values[steps] = y;
  slopes[steps] = RiccatiSolution::rhs(p, y);
  auto axpy = [](const State& a, double s, const State& b) {
    return State{a[0] + s * b[0], a[1] + s * b[1], a[2] + s * b[2]};
  };
  for (int i = steps; i > 0; --i) {
    // integrate in reversed time: dy/ds = -rhs with s = T - t
    const State k1 = RiccatiSolution::rhs(p, y);
    const State k2 = RiccatiSolution::rhs(p, axpy(y, -0.5 * h, k1));
    const State k3 = RiccatiSolution::rhs(p, axpy(y, -0.5 * h, k2));
    const State k4 = RiccatiSolution::rhs(p, axpy(y, -h, k3));
    for (int c = 0; c < 3; ++c) y[c] -= h / 6.0 * (k1[c] + 2.0 * k2[c] + 2.0 * k3[c] + k4[c]);
    if (!std::isfinite(y[2]) || std::abs(y[2]) > kRiccatiBlowUp || !std::isfinite(y[1]) ||
        !std::isfinite(y[0])) {
      std::ostringstream os;
      os << "Riccati coefficient Gamma blows up near t=" << p.horizon * (i - 1) / steps;
      throw NumericalError(os.str());
    }
    values[i - 1] = y;
    slopes[i - 1] = RiccatiSolution::rhs(p, y);
  }
  return RiccatiSolution(p, std::move(values), std::move(slopes));
}

inline double J0_linear(const RiccatiSolution& sol, double t, double x) {
  const auto [al, be, ga] = sol.at(t);
  return al + be * x + ga * x * x;
}

inline double J0_gradient_linear(const RiccatiSolution& sol, double t, double x) {
  const auto c = sol.at(t);
  return c[1] + 2.0 * c[2] * x;
}

/// J0(t) = log(gamma)/gamma + int_t^T <mu_F, (sigma_F^T sigma_F)^{-1} mu_F>(s) / (2 gamma) ds
/// for the Cartea-Villaplana model, where coefficients depend on time only.
inline double J0_cv(const CarteaVillaplanaModel& cv, double gamma, double t) {
  if (!(gamma > 0.0)) throw DomainError("risk aversion gamma must be positive");
  if (t < 0.0 || t > cv.horizon) throw DomainError("time outside [0, T]");
  const double base = std::log(gamma) / gamma;
  if (t >= cv.horizon) return base;
  auto integrand = [&cv, gamma](double s) {
    Mat sf(2, cv.n_forwards());
    for (int i = 0; i < cv.n_forwards(); ++i) sf.col(i) = cv_forward_vol(cv, s, i);
    const Mat gram = sf.transpose() * sf;
    if (!(gram.determinant() > 0.0)) {
      std::ostringstream os;
      os << "forward volatility vanishes at s=" << s;
      throw NumericalError(os.str());
    }
    const Vec mu = cv.forward_drift(s);
    const SpdFactor f(gram, "s=" + std::to_string(s));
    return mu.dot(f.solve(mu)) / (2.0 * gamma);
  };
  double err = 0.0;
  const double integral = boost::math::quadrature::gauss_kronrod<double, 31>::integrate(
      integrand, t, cv.horizon, 15, 1e-14, &err);
  return base + integral;
}

}  // namespace uipx
