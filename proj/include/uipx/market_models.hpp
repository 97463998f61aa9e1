#pragma once

// Factor/forward market dynamics and the coefficient algebra derived from them.
//
//   dX_t = b(t,X) dt + Sigma^T(t,X) dW_t              X in R^m, W in R^d
//   dF_t = diag(F_t) (mu_F(t,X) dt + sigma_F^T(t,X) dW_t)   F in R^n
//   P_t  = p(t, X_t)
//
// Sigma is d x m and sigma_F is d x n, so the functions below return
// Sigma^T (m x d) and sigma_F (d x n).

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "uipx/errors.hpp"
#include "uipx/linalg.hpp"

namespace uipx {

using VecFn = std::function<Vec(double, const Vec&)>;
using MatFn = std::function<Mat(double, const Vec&)>;
using ScalarFn = std::function<double(double, const Vec&)>;
using Scalar1dFn = std::function<double(double, double)>;
using TimeFn = std::function<double(double)>;

struct FactorDynamics {
  int dim_factors = 1;
  int dim_noise = 1;
  VecFn drift;           // b(t,x) in R^m
  MatFn vol_transpose;   // Sigma^T(t,x), m x d
};

struct ForwardDynamics {
  int n_forwards = 1;
  std::vector<double> maturities;
  VecFn drift;  // mu_F(t,x) in R^n
  MatFn vol;    // sigma_F(t,x), d x n
};

/// One-dimensional Ornstein-Uhlenbeck description of the factor under the
/// drift b_bar, dX = speed (level - X) dt + vol dW. Present only for models
/// where those moments are available in closed form.
struct OuStructure {
  double speed = 0.0;
  double level = 0.0;
  double vol = 0.0;

  double mean(double x0, double tau) const {
    return level + (x0 - level) * std::exp(-speed * tau);
  }
  double variance(double tau) const {
    if (std::abs(speed) < 1e-12) return vol * vol * tau;
    return vol * vol * (1.0 - std::exp(-2.0 * speed * tau)) / (2.0 * speed);
  }
  /// E[exp(X_{t+tau}) | X_t = x0].
  double expected_exp(double x0, double tau) const {
    return std::exp(mean(x0, tau) + 0.5 * variance(tau));
  }
};

struct MarketModel {
  std::string family = "general";
  FactorDynamics factors;
  ForwardDynamics forwards;
  ScalarFn spot;  // p(t,x)
  double horizon = 1.0;
  std::optional<OuStructure> pricing_ou;

  int m() const { return factors.dim_factors; }
  int d() const { return factors.dim_noise; }
  int n() const { return forwards.n_forwards; }

  void validate() const {
    if (m() < 1 || d() < 1 || n() < 1) throw ConfigError("model dimensions must be positive");
    if (n() > d()) throw ConfigError("number of forwards must not exceed noise dimension");
    if (!(horizon > 0.0)) throw ConfigError("horizon T must be positive");
    if (!factors.drift || !factors.vol_transpose || !forwards.drift || !forwards.vol || !spot) {
      throw ConfigError("market model has unset coefficient functions");
    }
    if (!forwards.maturities.empty()) {
      if (static_cast<int>(forwards.maturities.size()) != n()) {
        throw ConfigError("one maturity per forward contract expected");
      }
      if (!std::is_sorted(forwards.maturities.begin(), forwards.maturities.end())) {
        throw ConfigError("forward maturities must be nondecreasing");
      }
      if (forwards.maturities.front() < horizon) {
        throw ConfigError("first forward maturity must not precede the contract horizon");
      }
    }
  }
};

/// Everything the PDE solvers and strategy extraction need at one (t, x).
struct LocalCoefficients {
  Vec drift_bar;    // b - Sigma^T sigma_F (sigma_F^T sigma_F)^{-1} mu_F
  Mat diffusion;    // Sigma^T Sigma
  Mat B;            // Sigma^T (I - sigma_F (sigma_F^T sigma_F)^{-1} sigma_F^T) Sigma
  Mat hedge_map;    // (sigma_F^T sigma_F)^{-1} sigma_F^T Sigma, n x m
  Vec market_price; // (sigma_F^T sigma_F)^{-1} mu_F
  double mu_quadratic = 0.0;  // <(sigma_F^T sigma_F)^{-1} mu_F, mu_F>
  double condition = 1.0;
};

inline LocalCoefficients local_coefficients(const MarketModel& model, double t, const Vec& x) {
  const Mat sigma_t = model.factors.vol_transpose(t, x);  // m x d
  const Mat sf = model.forwards.vol(t, x);                 // d x n
  const Vec mu = model.forwards.drift(t, x);
  const Vec b = model.factors.drift(t, x);
  if (sigma_t.rows() != model.m() || sigma_t.cols() != model.d() || sf.rows() != model.d() ||
      sf.cols() != model.n() || mu.size() != model.n() || b.size() != model.m()) {
    throw ConfigError("coefficient dimensions do not match the declared model dimensions");
  }
  const SpdFactor gram(sf.transpose() * sf, describe_point(t, x));
  const Mat cross = sf.transpose() * sigma_t.transpose();  // sigma_F^T Sigma, n x m

  LocalCoefficients c;
  c.condition = gram.condition();
  c.market_price = gram.solve(mu);
  c.mu_quadratic = c.market_price.dot(mu);
  c.drift_bar = b - sigma_t * sf * c.market_price;
  c.diffusion = sigma_t * sigma_t.transpose();
  c.hedge_map = gram.solve(cross);
  Mat B = c.diffusion - cross.transpose() * c.hedge_map;
  c.B = 0.5 * (B + B.transpose());
  return c;
}

inline Vec effective_drift(const MarketModel& model, double t, const Vec& x) {
  return local_coefficients(model, t, x).drift_bar;
}

inline Mat basis_matrix_B(const MarketModel& model, double t, const Vec& x) {
  return local_coefficients(model, t, x).B;
}

/// (1/2 gamma) <(sigma_F^T sigma_F)^{-1} mu_F, mu_F>.
inline double sharpe_term(const MarketModel& model, double t, const Vec& x, double gamma) {
  if (!(gamma > 0.0)) throw DomainError("risk aversion gamma must be positive");
  return local_coefficients(model, t, x).mu_quadratic / (2.0 * gamma);
}

// ---------------------------------------------------------------------------
// Constant-correlation family: one traded forward, one non-traded factor.
//
//   dF/F = mu_F(t,X) dt + sigmabar_F(t,X) dW^1
//   dX   = b(t,X) dt + sigma(t,X) (rho dW^1 + sqrt(1-rho^2) dW^2)

struct ConstantCorrelationModel {
  Scalar1dFn forward_drift;  // mu_F
  Scalar1dFn forward_vol;    // sigmabar_F
  Scalar1dFn factor_drift;   // b
  Scalar1dFn factor_vol;     // sigma
  double rho = 0.0;
  Scalar1dFn spot;
  double horizon = 1.0;
  double maturity = 1.0;
  std::optional<OuStructure> pricing_ou;

  void validate() const {
    if (!(std::abs(rho) < 1.0)) throw ConfigError("correlation rho must lie in (-1, 1)");
    if (!forward_drift || !forward_vol || !factor_drift || !factor_vol || !spot) {
      throw ConfigError("constant-correlation model has unset coefficient functions");
    }
    if (!(horizon > 0.0)) throw ConfigError("horizon T must be positive");
  }

  /// b - rho sigma mu_F / sigmabar_F.
  double drift_bar(double t, double x) const {
    return factor_drift(t, x) - rho * factor_vol(t, x) * forward_drift(t, x) / forward_vol(t, x);
  }
  /// (1 - rho^2) sigma^2.
  double b_scalar(double t, double x) const {
    const double s = factor_vol(t, x);
    return (1.0 - rho * rho) * s * s;
  }
};

inline MarketModel to_market_model(const ConstantCorrelationModel& cc) {
  cc.validate();
  MarketModel m;
  m.family = "constant_correlation";
  m.horizon = cc.horizon;
  m.factors.dim_factors = 1;
  m.factors.dim_noise = 2;
  m.factors.drift = [cc](double t, const Vec& x) { return Vec::Constant(1, cc.factor_drift(t, x(0))); };
  m.factors.vol_transpose = [cc](double t, const Vec& x) {
    const double s = cc.factor_vol(t, x(0));
    Mat st(1, 2);
    st << s * cc.rho, s * std::sqrt(1.0 - cc.rho * cc.rho);
    return st;
  };
  m.forwards.n_forwards = 1;
  m.forwards.maturities = {cc.maturity};
  m.forwards.drift = [cc](double t, const Vec& x) { return Vec::Constant(1, cc.forward_drift(t, x(0))); };
  m.forwards.vol = [cc](double t, const Vec& x) {
    Mat sf(2, 1);
    sf << cc.forward_vol(t, x(0)), 0.0;
    return sf;
  };
  m.spot = [cc](double t, const Vec& x) { return cc.spot(t, x(0)); };
  m.pricing_ou = cc.pricing_ou;
  return m;
}

// ---------------------------------------------------------------------------
// Cartea-Villaplana two-factor model with correlated capacity/demand factors.
//
//   P_t = exp(eta(t) + alpha_C X^C + alpha_D X^D),  dX^i = -k_i X^i dt + sigma_i(t) dW^i
//   d<W^C, W^D> = rho dt.

struct CarteaVillaplanaModel {
  double k_c = 1.0;
  double k_d = 1.0;
  double alpha_c = -1.0;
  double alpha_d = 1.0;
  TimeFn sigma_c;
  TimeFn sigma_d;
  TimeFn eta;
  double rho = 0.0;
  std::function<Vec(double)> forward_drift;  // mu_F(t) in R^n
  std::vector<double> maturities;            // one or two forwards
  double horizon = 1.0;

  int n_forwards() const { return static_cast<int>(maturities.size()); }

  void validate() const {
    if (!(alpha_c < 0.0)) throw ConfigError("Cartea-Villaplana requires alpha_C < 0");
    if (!(alpha_d > 0.0)) throw ConfigError("Cartea-Villaplana requires alpha_D > 0");
    if (!(std::abs(rho) < 1.0)) throw ConfigError("correlation rho must lie in (-1, 1)");
    if (maturities.empty() || maturities.size() > 2) {
      throw ConfigError("Cartea-Villaplana supports one or two forward contracts");
    }
    if (!sigma_c || !sigma_d || !eta || !forward_drift) {
      throw ConfigError("Cartea-Villaplana model has unset functions");
    }
    for (double mat : maturities) {
      if (mat < horizon) throw ConfigError("forward maturity must not precede the horizon");
    }
  }

  /// Sigma^T = diag(sigma_C, sigma_D) [[1, 0], [rho, sqrt(1-rho^2)]].
  Mat sigma_transpose(double t) const {
    Mat st(2, 2);
    const double sc = sigma_c(t);
    const double sd = sigma_d(t);
    st << sc, 0.0, rho * sd, std::sqrt(1.0 - rho * rho) * sd;
    return st;
  }
};

/// Column i of sigma_F(t) (volatility of forward i against W = (W^1, W^2)).
inline Vec cv_forward_vol(const CarteaVillaplanaModel& cv, double t, int maturity_index) {
  if (maturity_index < 0 || maturity_index >= cv.n_forwards()) {
    throw DomainError("forward index out of range");
  }
  const double mat = cv.maturities[maturity_index];
  if (t > mat) throw DomainError("time is beyond the forward maturity");
  const double ec = cv.alpha_c * std::exp(-cv.k_c * (mat - t)) * cv.sigma_c(t);
  const double ed = cv.alpha_d * std::exp(-cv.k_d * (mat - t)) * cv.sigma_d(t);
  Vec v(2);
  v << ec + cv.rho * ed, std::sqrt(1.0 - cv.rho * cv.rho) * ed;
  return v;
}

inline MarketModel to_market_model(const CarteaVillaplanaModel& cv) {
  cv.validate();
  MarketModel m;
  m.family = cv.n_forwards() == 1 ? "cartea_villaplana_1f" : "cartea_villaplana_2f";
  m.horizon = cv.horizon;
  m.factors.dim_factors = 2;
  m.factors.dim_noise = 2;
  m.factors.drift = [cv](double, const Vec& x) {
    Vec b(2);
    b << -cv.k_c * x(0), -cv.k_d * x(1);
    return b;
  };
  m.factors.vol_transpose = [cv](double t, const Vec&) { return cv.sigma_transpose(t); };
  m.forwards.n_forwards = cv.n_forwards();
  m.forwards.maturities = cv.maturities;
  m.forwards.drift = [cv](double t, const Vec&) { return cv.forward_drift(t); };
  m.forwards.vol = [cv](double t, const Vec&) {
    Mat sf(2, cv.n_forwards());
    for (int i = 0; i < cv.n_forwards(); ++i) sf.col(i) = cv_forward_vol(cv, t, i);
    return sf;
  };
  m.spot = [cv](double t, const Vec& x) {
    return std::exp(cv.eta(t) + cv.alpha_c * x(0) + cv.alpha_d * x(1));
  };
  return m;
}

/// sigma_F^T sigma_F for the one-forward case written out term by term.
inline double cv_forward_variance(const CarteaVillaplanaModel& cv, double t) {
  const double tau = cv.maturities.at(0) - t;
  const double sc = cv.sigma_c(t);
  const double sd = cv.sigma_d(t);
  return cv.alpha_d * cv.alpha_d * sd * sd * std::exp(-2.0 * cv.k_d * tau) +
         cv.alpha_c * cv.alpha_c * sc * sc * std::exp(-2.0 * cv.k_c * tau) +
         2.0 * cv.rho * cv.alpha_c * cv.alpha_d * sc * sd * std::exp(-(cv.k_c + cv.k_d) * tau);
}

/// Closed-form B(t) for one forward: kappa(t) times the rank-one matrix of
/// damped exposures.
inline Mat cv_basis_matrix_closed_form(const CarteaVillaplanaModel& cv, double t) {
  const double tau = cv.maturities.at(0) - t;
  const double sc = cv.sigma_c(t);
  const double sd = cv.sigma_d(t);
  const double kappa = (1.0 - cv.rho * cv.rho) * sc * sc * sd * sd / cv_forward_variance(cv, t);
  const double dc = std::exp(-cv.k_c * tau);
  const double dd = std::exp(-cv.k_d * tau);
  Mat B(2, 2);
  B << cv.alpha_d * cv.alpha_d * dd * dd, -cv.alpha_c * cv.alpha_d * dc * dd,
      -cv.alpha_c * cv.alpha_d * dc * dd, cv.alpha_c * cv.alpha_c * dc * dc;
  return kappa * B;
}

/// Nonzero eigenvalue of the one-forward B, i.e. the trace of the rank-one
/// closed form.
inline double cv_nonzero_eigenvalue(const CarteaVillaplanaModel& cv, double t) {
  return cv_basis_matrix_closed_form(cv, t).trace();
}

// ---------------------------------------------------------------------------
// Sample-based assumption audit.

struct AuditBox {
  double t_lo = 0.0;
  double t_hi = 1.0;
  Vec x_lo;
  Vec x_hi;
};

struct AuditReport {
  int samples = 0;
  double ellipticity_min = INFINITY;  // smallest eigenvalue of sigma_F^T sigma_F
  double ellipticity_max = 0.0;
  int max_rank_B = 0;
  double min_eigen_B = INFINITY;        // most negative eigenvalue seen (PSD check)
  double image_lambda_min = INFINITY;   // smallest nonzero eigenvalue of B
  double image_lambda_max = 0.0;
  double delta = 0.0;                   // bound with 1/delta <= lambda <= delta on Im(B)
  double max_asymmetry_B = 0.0;
  double lipschitz_drift = 0.0;
  double lipschitz_vol = 0.0;
  double max_abs_mu = 0.0;
  std::vector<std::string> violations;

  bool ok() const { return violations.empty(); }
};

inline AuditReport audit_assumptions(const MarketModel& model, const AuditBox& box, int samples,
                                     double ellipticity_floor = 1e-8, unsigned seed = 7) {
  if (samples < 1) throw DomainError("audit needs at least one sample");
  if (box.x_lo.size() != model.m() || box.x_hi.size() != model.m()) {
    throw DomainError("audit box dimension does not match the model");
  }
  AuditReport r;
  std::mt19937_64 gen(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  auto sample_point = [&](Vec& x) {
    for (int k = 0; k < model.m(); ++k) x(k) = box.x_lo(k) + unif(gen) * (box.x_hi(k) - box.x_lo(k));
  };
  bool singular_seen = false;
  Vec x(model.m()), y(model.m());
  for (int s = 0; s < samples; ++s) {
    const double t = box.t_lo + unif(gen) * (box.t_hi - box.t_lo);
    sample_point(x);
    sample_point(y);
    ++r.samples;

    const Mat sf = model.forwards.vol(t, x);
    const Vec ev = symmetric_spectrum(sf.transpose() * sf).eigenvalues;
    r.ellipticity_min = std::min(r.ellipticity_min, ev.minCoeff());
    r.ellipticity_max = std::max(r.ellipticity_max, ev.maxCoeff());
    r.max_abs_mu = std::max(r.max_abs_mu, model.forwards.drift(t, x).cwiseAbs().maxCoeff());

    const double dxy = (x - y).norm();
    if (dxy > 0.0) {
      r.lipschitz_drift = std::max(
          r.lipschitz_drift, (model.factors.drift(t, x) - model.factors.drift(t, y)).norm() / dxy);
      r.lipschitz_vol = std::max(
          r.lipschitz_vol,
          (model.factors.vol_transpose(t, x) - model.factors.vol_transpose(t, y)).norm() / dxy);
    }

    if (ev.minCoeff() < ellipticity_floor) {
      singular_seen = true;
      continue;
    }
    LocalCoefficients c;
    try {
      c = local_coefficients(model, t, x);
    } catch (const NumericalError&) {
      singular_seen = true;
      continue;
    }
    r.max_asymmetry_B = std::max(r.max_asymmetry_B, (c.B - c.B.transpose()).cwiseAbs().maxCoeff());
    // B at rounding level relative to Sigma^T Sigma counts as zero
    if (c.B.cwiseAbs().maxCoeff() <= 1e-12 * std::max(1.0, c.diffusion.cwiseAbs().maxCoeff())) {
      r.min_eigen_B = std::min(r.min_eigen_B, 0.0);
      continue;
    }
    const auto spec = symmetric_spectrum(c.B);
    r.min_eigen_B = std::min(r.min_eigen_B, spec.eigenvalues.minCoeff());
    r.max_rank_B = std::max(r.max_rank_B, spec.rank);
    const double scale = spec.eigenvalues.cwiseAbs().maxCoeff();
    for (int i = 0; i < spec.eigenvalues.size(); ++i) {
      const double lam = spec.eigenvalues(i);
      if (scale > 0.0 && std::abs(lam) > SymmetricSpectrum::kRankTolerance * scale) {
        r.image_lambda_min = std::min(r.image_lambda_min, lam);
        r.image_lambda_max = std::max(r.image_lambda_max, lam);
      }
    }
  }
  if (r.max_rank_B > 0) {
    r.delta = std::max(r.image_lambda_max, 1.0 / r.image_lambda_min);
  }
  if (singular_seen) {
    r.violations.push_back("ellipticity: sigma_F^T sigma_F smallest eigenvalue below floor");
  }
  if (r.min_eigen_B < -1e-10) r.violations.push_back("B is not positive semidefinite");
  if (r.max_asymmetry_B > 1e-12) r.violations.push_back("B is not symmetric");
  return r;
}

}  // namespace uipx
