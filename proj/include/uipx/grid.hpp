#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <sstream>
#include <string>
#include <vector>

#include "uipx/errors.hpp"
#include "uipx/linalg.hpp"

namespace uipx {

struct Axis {
  double lo = 0.0;
  double hi = 1.0;
  int intervals = 2;

  int size() const { return intervals + 1; }
  double step() const { return (hi - lo) / intervals; }
  double node(int i) const {
    if (i == intervals) return hi;
    return lo + (hi - lo) * static_cast<double>(i) / intervals;
  }
};

/// Rectilinear (t, x[, x2], z) grid. Times are t_n = T n / N.
struct Grid {
  double horizon = 1.0;
  int time_steps = 0;  // 0: chosen from the stability bound
  std::vector<Axis> x_axes;
  Axis z_axis{0.0, 1.0, 100};

  int x_dims() const { return static_cast<int>(x_axes.size()); }
  int nz() const { return z_axis.size(); }
  std::size_t x_count() const {
    std::size_t c = 1;
    for (const auto& a : x_axes) c *= static_cast<std::size_t>(a.size());
    return c;
  }
  std::size_t node_count() const { return x_count() * static_cast<std::size_t>(nz()); }
  double time(int n) const { return n == time_steps ? horizon : horizon * n / time_steps; }
  double z(int j) const { return z_axis.node(j); }

  /// Stride in the flattened x index when moving one node along dimension k.
  std::size_t x_stride(int k) const {
    std::size_t s = 1;
    for (int d = k + 1; d < x_dims(); ++d) s *= static_cast<std::size_t>(x_axes[d].size());
    return s;
  }
  std::array<int, 2> x_multi_index(std::size_t xi) const {
    std::array<int, 2> idx{0, 0};
    for (int k = x_dims() - 1; k >= 0; --k) {
      idx[k] = static_cast<int>(xi % x_axes[k].size());
      xi /= x_axes[k].size();
    }
    return idx;
  }
  Vec x_point(std::size_t xi) const {
    const auto idx = x_multi_index(xi);
    Vec x(x_dims());
    for (int k = 0; k < x_dims(); ++k) x(k) = x_axes[k].node(idx[k]);
    return x;
  }
  bool x_interior(std::size_t xi) const {
    const auto idx = x_multi_index(xi);
    for (int k = 0; k < x_dims(); ++k) {
      if (idx[k] == 0 || idx[k] == x_axes[k].intervals) return false;
    }
    return true;
  }
  std::size_t flat(std::size_t xi, int j) const { return xi * nz() + j; }

  void validate() const {
    if (x_dims() < 1 || x_dims() > 2) throw ConfigError("grid supports one or two factor dimensions");
    for (const auto& a : x_axes) {
      if (a.intervals < 2) throw ConfigError("each x axis needs at least 2 intervals");
      if (!(a.lo < a.hi)) throw ConfigError("x axis requires x_min < x_max");
    }
    if (z_axis.intervals < 2) throw ConfigError("z axis needs at least 2 intervals");
    if (!(z_axis.lo == 0.0 && z_axis.hi > 0.0)) throw ConfigError("z axis must be [0, z_max]");
    if (!(horizon > 0.0)) throw ConfigError("horizon must be positive");
    if (time_steps < 0 || time_steps == 1) throw ConfigError("time steps must be 0 (auto) or >= 2");
  }
};

inline Grid make_grid_1d(double horizon, double x_min, double x_max, int nx, double z_max, int nzi,
                         int time_steps = 0) {
  Grid g;
  g.horizon = horizon;
  g.time_steps = time_steps;
  g.x_axes = {Axis{x_min, x_max, nx}};
  g.z_axis = Axis{0.0, z_max, nzi};
  g.validate();
  return g;
}

enum class PdeKind { Uip, LogValue, RiskNeutral, Dual };

inline const char* to_string(PdeKind k) {
  switch (k) {
    case PdeKind::Uip: return "uip";
    case PdeKind::LogValue: return "log_value";
    case PdeKind::RiskNeutral: return "risk_neutral";
    case PdeKind::Dual: return "dual";
  }
  return "?";
}

struct SurfaceMeta {
  PdeKind pde = PdeKind::Uip;
  double q = 1.0;
  double gamma = 0.0;
  double dt_stable = 0.0;  // stability bound reported by the solver
};

struct Slice {
  int time_index = 0;
  double t = 0.0;
  std::vector<double> values;  // grid.flat(xi, j) layout
};

/// Solution values on selected time slices of a grid.
class Surface {
 public:
  Surface() = default;
  Surface(Grid grid, SurfaceMeta meta) : grid_(std::move(grid)), meta_(meta) {}

  const Grid& grid() const { return grid_; }
  const SurfaceMeta& meta() const { return meta_; }
  const std::vector<Slice>& slices() const { return slices_; }

  void add_slice(Slice s) {
    if (s.values.size() != grid_.node_count()) throw DomainError("slice size does not match grid");
    auto it = std::lower_bound(slices_.begin(), slices_.end(), s.time_index,
                               [](const Slice& a, int n) { return a.time_index < n; });
    if (it != slices_.end() && it->time_index == s.time_index) {
      *it = std::move(s);
    } else {
      slices_.insert(it, std::move(s));
    }
  }

  /// Slice whose time is closest to t.
  const Slice& nearest(double t) const {
    if (slices_.empty()) throw DomainError("surface has no stored slices");
    const Slice* best = &slices_.front();
    for (const auto& s : slices_) {
      if (std::abs(s.t - t) < std::abs(best->t - t)) best = &s;
    }
    return *best;
  }

  /// Exact slice at time t (within half a time step), otherwise throws.
  const Slice& at(double t) const {
    const Slice& s = nearest(t);
    const double half = 0.5 * grid_.horizon / std::max(grid_.time_steps, 1);
    if (std::abs(s.t - t) > half + 1e-12) {
      std::ostringstream os;
      os << "no stored slice at t=" << t << " (nearest " << s.t << ")";
      throw DomainError(os.str());
    }
    return s;
  }

  /// Multilinear interpolation in (x, z) on the slice closest to t.
  double interpolate(double t, const Vec& x, double z) const {
    return interpolate_slice(nearest(t), x, z);
  }

  double interpolate_slice(const Slice& s, const Vec& x, double z) const {
    const int dims = grid_.x_dims();
    std::array<int, 3> base{};
    std::array<double, 3> frac{};
    auto locate = [](const Axis& a, double v, int& i, double& f) {
      const double pos = (std::clamp(v, a.lo, a.hi) - a.lo) / a.step();
      i = std::min(static_cast<int>(std::floor(pos)), a.intervals - 1);
      f = pos - i;
    };
    for (int k = 0; k < dims; ++k) locate(grid_.x_axes[k], x(k), base[k], frac[k]);
    locate(grid_.z_axis, z, base[dims], frac[dims]);
    double acc = 0.0;
    const int corners = 1 << (dims + 1);
    for (int c = 0; c < corners; ++c) {
      double w = 1.0;
      std::size_t xi = 0;
      for (int k = 0; k < dims; ++k) {
        const int bit = (c >> k) & 1;
        w *= bit ? frac[k] : 1.0 - frac[k];
        xi += static_cast<std::size_t>(base[k] + bit) * grid_.x_stride(k);
      }
      const int zb = (c >> dims) & 1;
      w *= zb ? frac[dims] : 1.0 - frac[dims];
      if (w == 0.0) continue;
      acc += w * s.values[grid_.flat(xi, base[dims] + zb)];
    }
    return acc;
  }

 private:
  Grid grid_;
  SurfaceMeta meta_;
  std::vector<Slice> slices_;
};

enum class FaceRule { SecondDerivativeZero, OneSidedStencil, ExplicitExpectation };

inline const char* to_string(FaceRule r) {
  switch (r) {
    case FaceRule::SecondDerivativeZero: return "second_derivative_zero";
    case FaceRule::OneSidedStencil: return "one_sided";
    case FaceRule::ExplicitExpectation: return "explicit_expectation";
  }
  return "?";
}

/// Rule per x face: faces[k][0] is the x_min face of dimension k, faces[k][1] the x_max face.
struct BoundaryPolicy {
  std::vector<std::array<FaceRule, 2>> faces;

  static BoundaryPolicy uniform(int dims, FaceRule r = FaceRule::SecondDerivativeZero) {
    BoundaryPolicy p;
    p.faces.assign(dims, {r, r});
    return p;
  }

  void validate(const Grid& g) const {
    if (static_cast<int>(faces.size()) != g.x_dims()) {
      throw ConfigError("boundary policy must name a rule for every x face");
    }
    for (int k = 0; k < g.x_dims(); ++k) {
      if (faces[k][1] == FaceRule::ExplicitExpectation || (k > 0 && faces[k][0] == FaceRule::ExplicitExpectation)) {
        throw ConfigError("explicit-expectation boundary is only available on the x_min face of a 1-factor grid");
      }
    }
    if (g.x_dims() > 1 && faces[0][0] == FaceRule::ExplicitExpectation) {
      throw ConfigError("explicit-expectation boundary is only available on the x_min face of a 1-factor grid");
    }
  }
};

}  // namespace uipx
