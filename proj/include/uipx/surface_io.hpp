#pragma once

// Surface export: plot-ready CSV and a versioned binary cache that reloads bit-exactly.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "uipx/errors.hpp"
#include "uipx/grid.hpp"

namespace uipx {

/// FNV-1a 64-bit hash, used to tag outputs with the configuration that produced them.
inline std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

/// Shortest decimal text that round-trips the double.
inline std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

/// One row per node: t,x[,x2],z,value. Header lines start with '#'.
inline void write_surface_csv(std::ostream& os, const Surface& s, const std::vector<std::string>& header = {},
                              bool all_slices = true, double only_t = 0.0) {
  const Grid& g = s.grid();
  for (const auto& h : header) os << "# " << h << '\n';
  os << "t";
  for (int k = 0; k < g.x_dims(); ++k) os << (k == 0 ? ",x" : ",x2");
  os << ",z,value\n";
  for (const auto& sl : s.slices()) {
    if (!all_slices && &sl != &s.nearest(only_t)) continue;
    for (std::size_t xi = 0; xi < g.x_count(); ++xi) {
      const Vec x = g.x_point(xi);
      for (int j = 0; j < g.nz(); ++j) {
        os << format_double(sl.t);
        for (int k = 0; k < g.x_dims(); ++k) os << ',' << format_double(x(k));
        os << ',' << format_double(g.z(j)) << ',' << format_double(sl.values[g.flat(xi, j)]) << '\n';
      }
    }
  }
}

inline constexpr char kCacheMagic[8] = {'U', 'I', 'P', 'X', 'S', 'R', 'F', '\0'};
inline constexpr std::uint32_t kCacheVersion = 1;

namespace detail {
template <class T>
void put(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <class T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw ConfigError("truncated surface cache");
  return v;
}
}  // namespace detail

inline void write_surface_cache(std::ostream& os, const Surface& s) {
  const Grid& g = s.grid();
  os.write(kCacheMagic, sizeof(kCacheMagic));
  detail::put(os, kCacheVersion);
  detail::put(os, g.horizon);
  detail::put(os, static_cast<std::int32_t>(g.time_steps));
  detail::put(os, static_cast<std::int32_t>(g.x_dims()));
  for (const auto& a : g.x_axes) {
    detail::put(os, a.lo);
    detail::put(os, a.hi);
    detail::put(os, static_cast<std::int32_t>(a.intervals));
  }
  detail::put(os, g.z_axis.hi);
  detail::put(os, static_cast<std::int32_t>(g.z_axis.intervals));
  detail::put(os, static_cast<std::int32_t>(s.meta().pde));
  detail::put(os, s.meta().q);
  detail::put(os, s.meta().gamma);
  detail::put(os, s.meta().dt_stable);
  detail::put(os, static_cast<std::uint64_t>(s.slices().size()));
  for (const auto& sl : s.slices()) {
    detail::put(os, static_cast<std::int32_t>(sl.time_index));
    detail::put(os, sl.t);
    os.write(reinterpret_cast<const char*>(sl.values.data()),
             static_cast<std::streamsize>(sl.values.size() * sizeof(double)));
  }
}

inline Surface read_surface_cache(std::istream& is) {
  char magic[sizeof(kCacheMagic)];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kCacheMagic, sizeof(magic)) != 0) throw ConfigError("not a surface cache");
  const auto version = detail::get<std::uint32_t>(is);
  if (version != kCacheVersion) throw ConfigError("unsupported surface cache version " + std::to_string(version));
  Grid g;
  g.horizon = detail::get<double>(is);
  g.time_steps = detail::get<std::int32_t>(is);
  const int dims = detail::get<std::int32_t>(is);
  if (dims < 1 || dims > 2) throw ConfigError("corrupt surface cache");
  for (int k = 0; k < dims; ++k) {
    Axis a;
    a.lo = detail::get<double>(is);
    a.hi = detail::get<double>(is);
    a.intervals = detail::get<std::int32_t>(is);
    g.x_axes.push_back(a);
  }
  g.z_axis.lo = 0.0;
  g.z_axis.hi = detail::get<double>(is);
  g.z_axis.intervals = detail::get<std::int32_t>(is);
  g.validate();
  SurfaceMeta meta;
  meta.pde = static_cast<PdeKind>(detail::get<std::int32_t>(is));
  meta.q = detail::get<double>(is);
  meta.gamma = detail::get<double>(is);
  meta.dt_stable = detail::get<double>(is);
  Surface s(g, meta);
  const auto count = detail::get<std::uint64_t>(is);
  for (std::uint64_t i = 0; i < count; ++i) {
    Slice sl;
    sl.time_index = detail::get<std::int32_t>(is);
    sl.t = detail::get<double>(is);
    sl.values.resize(g.node_count());
    is.read(reinterpret_cast<char*>(sl.values.data()),
            static_cast<std::streamsize>(sl.values.size() * sizeof(double)));
    if (!is) throw ConfigError("truncated surface cache");
    s.add_slice(std::move(sl));
  }
  return s;
}

inline void save_surface_cache(const std::string& path, const Surface& s) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("cannot open " + path + " for writing");
  write_surface_cache(os, s);
}

inline Surface load_surface_cache(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open " + path);
  return read_surface_cache(is);
}

}  // namespace uipx
