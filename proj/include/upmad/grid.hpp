#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "upmad/errors.hpp"

namespace upmad {

/// Spatial extents, depth-major (W fastest in memory).
struct Dims {
  std::size_t d = 0, h = 0, w = 0;
  std::size_t count() const { return d * h * w; }
  bool operator==(const Dims&) const = default;
  std::string str() const { return std::to_string(d) + "x" + std::to_string(h) + "x" + std::to_string(w); }
};

struct Voxel {
  std::size_t z = 0, y = 0, x = 0;
  auto operator<=>(const Voxel&) const = default;
};

/// Dense scalar volume.
template <typename T>
struct Grid {
  Dims dims;
  std::vector<T> data;

  Grid() = default;
  explicit Grid(Dims d, T fill = T{}) : dims(d), data(d.count(), fill) {}
  Grid(Dims d, std::vector<T> values) : dims(d), data(std::move(values)) {
    if (data.size() != dims.count()) throw ShapeError("grid data does not match dims " + dims.str());
  }

  std::size_t index(std::size_t z, std::size_t y, std::size_t x) const { return (z * dims.h + y) * dims.w + x; }
  std::size_t index(const Voxel& v) const { return index(v.z, v.y, v.x); }
  Voxel voxel(std::size_t i) const { return {i / (dims.h * dims.w), (i / dims.w) % dims.h, i % dims.w}; }
  bool contains(const Voxel& v) const { return v.z < dims.d && v.y < dims.h && v.x < dims.w; }

  T& at(std::size_t z, std::size_t y, std::size_t x) { return data[index(z, y, x)]; }
  const T& at(std::size_t z, std::size_t y, std::size_t x) const { return data[index(z, y, x)]; }
  T& operator[](const Voxel& v) { return data[index(v)]; }
  const T& operator[](const Voxel& v) const { return data[index(v)]; }
};

/// Binary volume, values in {0,1}.
using Mask = Grid<std::uint8_t>;

inline std::size_t count_nonzero(const Mask& m) {
  std::size_t n = 0;
  for (auto v : m.data) n += v != 0;
  return n;
}

/// Neighbour offsets for 6- or 26-connectivity.
struct Offset {
  int dz, dy, dx;
};
std::vector<Offset> neighbourhood(int connectivity);

/// Visits in-bounds neighbours of v.
template <typename T, typename F>
void for_each_neighbour(const Grid<T>& g, const Voxel& v, const std::vector<Offset>& offs, F&& f) {
  for (const auto& o : offs) {
    const auto z = static_cast<std::ptrdiff_t>(v.z) + o.dz;
    const auto y = static_cast<std::ptrdiff_t>(v.y) + o.dy;
    const auto x = static_cast<std::ptrdiff_t>(v.x) + o.dx;
    if (z < 0 || y < 0 || x < 0) continue;
    const Voxel n{static_cast<std::size_t>(z), static_cast<std::size_t>(y), static_cast<std::size_t>(x)};
    if (!g.contains(n)) continue;
    f(n);
  }
}

}  // namespace upmad
