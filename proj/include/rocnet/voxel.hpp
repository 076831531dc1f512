// Copyright (c) 2026 RocNet authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <istream>
#include <limits>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "rocnet/common.hpp"

namespace rocnet {

// Dense binary occupancy cube, bit packed x-major (x fastest, then y, then z),
// LSB first within each byte.
class VoxelGrid {
 public:
  VoxelGrid() = default;
  explicit VoxelGrid(int side) : side_(side) {
    if (!valid_side(side)) throw DimensionError("grid side must be a power of two in [4,512]");
    bits_.assign(byte_count(side), 0);
  }

  static bool valid_side(int side) {
    return side >= 4 && side <= 512 && is_power_of_two(static_cast<std::uint64_t>(side));
  }
  static std::size_t byte_count(int side) {
    const std::uint64_t n = static_cast<std::uint64_t>(side) * side * side;
    return static_cast<std::size_t>((n + 7) / 8);
  }

  int side() const { return side_; }
  std::int64_t volume() const { return std::int64_t{1} * side_ * side_ * side_; }

  std::int64_t index(int x, int y, int z) const {
    return x + std::int64_t{side_} * (y + std::int64_t{side_} * z);
  }
  bool get(int x, int y, int z) const {
    const std::int64_t i = index(x, y, z);
    return (bits_[static_cast<std::size_t>(i >> 3)] >> (i & 7)) & 1;
  }
  void set(int x, int y, int z, bool v) {
    const std::int64_t i = index(x, y, z);
    const std::uint8_t mask = static_cast<std::uint8_t>(1u << (i & 7));
    if (v)
      bits_[static_cast<std::size_t>(i >> 3)] |= mask;
    else
      bits_[static_cast<std::size_t>(i >> 3)] &= static_cast<std::uint8_t>(~mask);
  }

  std::int64_t count() const {
    std::int64_t c = 0;
    for (std::uint8_t b : bits_) c += std::popcount(b);
    return c;
  }
  bool empty() const { return count() == 0; }
  bool full() const { return count() == volume(); }

  const std::vector<std::uint8_t>& raw() const { return bits_; }
  std::vector<std::uint8_t>& raw() { return bits_; }

  friend bool operator==(const VoxelGrid& a, const VoxelGrid& b) {
    return a.side_ == b.side_ && a.bits_ == b.bits_;
  }

 private:
  int side_ = 0;
  std::vector<std::uint8_t> bits_;
};

using Point3 = std::array<double, 3>;

// Points in normalized grid space [0,1]^3.
struct PointSet {
  std::vector<Point3> points;
};

// ---- RVOX1 file format: "RVOX", version u8=1, side u32 LE, packed bits ----

inline void save_grid(const VoxelGrid& grid, std::ostream& os) {
  os.write("RVOX", 4);
  write_u8(os, 1);
  write_u32(os, static_cast<std::uint32_t>(grid.side()));
  write_bytes(os, grid.raw().data(), grid.raw().size());
  if (!os) throw IoError("failed to write grid");
}

inline void save_grid(const VoxelGrid& grid, const std::string& path) {
  auto os = open_output(path);
  save_grid(grid, os);
}

inline VoxelGrid load_grid(std::istream& is) {
  expect_magic(is, "RVOX");
  const int version = read_u8(is);
  if (version != 1) throw IoError("unsupported RVOX version");
  const std::uint32_t side = read_u32(is);
  if (!VoxelGrid::valid_side(static_cast<int>(side)))
    throw IoError("invalid grid side in file");
  VoxelGrid grid(static_cast<int>(side));
  read_bytes(is, grid.raw().data(), grid.raw().size());
  return grid;
}

inline VoxelGrid load_grid(const std::string& path) {
  auto is = open_input(path);
  return load_grid(is);
}

// ---- synthetic shapes --------------------------------------------------

enum class ShapeKind { Sphere, Box, Blob, Torus };

inline const char* shape_kind_name(ShapeKind k) {
  switch (k) {
    case ShapeKind::Sphere: return "sphere";
    case ShapeKind::Box: return "box";
    case ShapeKind::Blob: return "blob";
    case ShapeKind::Torus: return "torus";
  }
  return "?";
}

inline ShapeKind parse_shape_kind(const std::string& s) {
  if (s == "sphere") return ShapeKind::Sphere;
  if (s == "box") return ShapeKind::Box;
  if (s == "blob") return ShapeKind::Blob;
  if (s == "torus") return ShapeKind::Torus;
  throw UsageError("unknown shape kind: " + s);
}

// All lengths are fractions of the grid side; the grid spans [0,1]^3.
struct ShapeParams {
  Point3 center = {0.5, 0.5, 0.5};
  double radius = 0.4;                         // sphere
  Point3 half_extents = {0.3, 0.3, 0.3};       // box
  double torus_major = 0.3, torus_minor = 0.12;
  int torus_axis = 2;
  int blob_spheres = 5;
  double blob_radius_min = 0.10, blob_radius_max = 0.22;
};

inline VoxelGrid generate_synthetic(ShapeKind kind, const ShapeParams& p, int side,
                                    std::uint64_t seed) {
  VoxelGrid grid(side);
  auto inside01 = [](double v) { return v >= 0.0 && v <= 1.0; };
  switch (kind) {
    case ShapeKind::Sphere:
      if (p.radius <= 0) throw UsageError("sphere radius must be positive");
      for (int a = 0; a < 3; ++a)
        if (!inside01(p.center[a] - p.radius) || !inside01(p.center[a] + p.radius))
          throw UsageError("sphere does not fit inside the grid");
      break;
    case ShapeKind::Box:
      for (int a = 0; a < 3; ++a) {
        if (p.half_extents[a] <= 0) throw UsageError("box extents must be positive");
        if (!inside01(p.center[a] - p.half_extents[a]) ||
            !inside01(p.center[a] + p.half_extents[a]))
          throw UsageError("box does not fit inside the grid");
      }
      break;
    case ShapeKind::Torus:
      if (p.torus_major <= 0 || p.torus_minor <= 0 || p.torus_minor >= p.torus_major)
        throw UsageError("torus radii degenerate");
      if (p.center[0] + p.torus_major + p.torus_minor > 1.0 ||
          p.center[0] - p.torus_major - p.torus_minor < 0.0)
        throw UsageError("torus does not fit inside the grid");
      break;
    case ShapeKind::Blob:
      if (p.blob_spheres < 1 || p.blob_radius_min <= 0 || p.blob_radius_max < p.blob_radius_min)
        throw UsageError("blob parameters degenerate");
      break;
  }

  std::vector<std::array<double, 4>> blobs;  // cx,cy,cz,r
  if (kind == ShapeKind::Blob) {
    std::mt19937 rng(static_cast<std::uint32_t>(seed));
    std::uniform_real_distribution<double> cd(0.30, 0.70);
    std::uniform_real_distribution<double> rd(p.blob_radius_min, p.blob_radius_max);
    for (int i = 0; i < p.blob_spheres; ++i) blobs.push_back({cd(rng), cd(rng), cd(rng), rd(rng)});
  }

  const double inv = 1.0 / side;
  for (int z = 0; z < side; ++z)
    for (int y = 0; y < side; ++y)
      for (int x = 0; x < side; ++x) {
        const double cx = (x + 0.5) * inv, cy = (y + 0.5) * inv, cz = (z + 0.5) * inv;
        bool occ = false;
        switch (kind) {
          case ShapeKind::Sphere: {
            const double dx = cx - p.center[0], dy = cy - p.center[1], dz = cz - p.center[2];
            occ = dx * dx + dy * dy + dz * dz <= p.radius * p.radius;
            break;
          }
          case ShapeKind::Box: {
            occ = std::abs(cx - p.center[0]) <= p.half_extents[0] &&
                  std::abs(cy - p.center[1]) <= p.half_extents[1] &&
                  std::abs(cz - p.center[2]) <= p.half_extents[2];
            break;
          }
          case ShapeKind::Torus: {
            const double d[3] = {cx - p.center[0], cy - p.center[1], cz - p.center[2]};
            const int a = p.torus_axis;
            const int u = (a + 1) % 3, v = (a + 2) % 3;
            const double ring = std::sqrt(d[u] * d[u] + d[v] * d[v]) - p.torus_major;
            occ = ring * ring + d[a] * d[a] <= p.torus_minor * p.torus_minor;
            break;
          }
          case ShapeKind::Blob: {
            for (const auto& b : blobs) {
              const double dx = cx - b[0], dy = cy - b[1], dz = cz - b[2];
              if (dx * dx + dy * dy + dz * dz <= b[3] * b[3]) {
                occ = true;
                break;
              }
            }
            break;
          }
        }
        if (occ) grid.set(x, y, z, true);
      }
  return grid;
}

// Randomized per-sample parameters for dataset generation; deterministic in rng state.
inline VoxelGrid generate_random_shape(ShapeKind kind, int side, std::mt19937& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  ShapeParams p;
  const std::uint64_t blob_seed = rng();
  switch (kind) {
    case ShapeKind::Sphere:
      p.radius = 0.22 + 0.18 * u(rng);
      for (auto& c : p.center) c = 0.5 + (u(rng) - 0.5) * 2.0 * (0.48 - p.radius);
      break;
    case ShapeKind::Box:
      for (auto& e : p.half_extents) e = 0.14 + 0.22 * u(rng);
      for (int a = 0; a < 3; ++a)
        p.center[a] = 0.5 + (u(rng) - 0.5) * 2.0 * (0.48 - p.half_extents[a]);
      break;
    case ShapeKind::Torus:
      p.torus_major = 0.24 + 0.10 * u(rng);
      p.torus_minor = 0.07 + 0.07 * u(rng);
      if (p.torus_minor >= p.torus_major) p.torus_minor = p.torus_major * 0.5;
      p.torus_axis = static_cast<int>(u(rng) * 3.0) % 3;
      break;
    case ShapeKind::Blob:
      p.blob_spheres = 3 + static_cast<int>(u(rng) * 4.0);
      break;
  }
  return generate_synthetic(kind, p, side, blob_seed);
}

// ---- surface sampling ----------------------------------------------------

namespace detail {

struct VoxelFace {
  int x, y, z;
  int dir;  // 0:-x 1:+x 2:-y 3:+y 4:-z 5:+z
};

inline std::vector<VoxelFace> exposed_faces(const VoxelGrid& g) {
  static constexpr int off[6][3] = {{-1, 0, 0}, {1, 0, 0},  {0, -1, 0},
                                    {0, 1, 0},  {0, 0, -1}, {0, 0, 1}};
  std::vector<VoxelFace> faces;
  const int n = g.side();
  for (int z = 0; z < n; ++z)
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        if (!g.get(x, y, z)) continue;
        for (int d = 0; d < 6; ++d) {
          const int nx = x + off[d][0], ny = y + off[d][1], nz = z + off[d][2];
          const bool outside = nx < 0 || ny < 0 || nz < 0 || nx >= n || ny >= n || nz >= n;
          if (outside || !g.get(nx, ny, nz)) faces.push_back({x, y, z, d});
        }
      }
  return faces;
}

inline Point3 sample_on_face(const VoxelFace& f, int side, std::mt19937& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double inv = 1.0 / side;
  double p[3] = {f.x + u(rng), f.y + u(rng), f.z + u(rng)};
  const int axis = f.dir / 2;
  p[axis] = f.dir % 2 ? (axis == 0 ? f.x : axis == 1 ? f.y : f.z) + 1.0
                      : (axis == 0 ? f.x : axis == 1 ? f.y : f.z) + 0.0;
  return {p[0] * inv, p[1] * inv, p[2] * inv};
}

}  // namespace detail

// Uniform samples on every exposed face of occupied voxels (face-to-empty
// 6-neighbor or grid boundary); exactly samples_per_face per face.
inline PointSet surface_points(const VoxelGrid& grid, int samples_per_face, std::uint64_t seed) {
  if (grid.empty()) throw UsageError("surface_points on empty grid");
  if (samples_per_face < 1) throw UsageError("samples_per_face must be >= 1");
  std::mt19937 rng(static_cast<std::uint32_t>(seed));
  PointSet ps;
  const auto faces = detail::exposed_faces(grid);
  ps.points.reserve(faces.size() * static_cast<std::size_t>(samples_per_face));
  for (const auto& f : faces)
    for (int s = 0; s < samples_per_face; ++s)
      ps.points.push_back(detail::sample_on_face(f, grid.side(), rng));
  return ps;
}

// Fixed-size variant used for Chamfer evaluation: picks faces uniformly with
// replacement until total_count points are drawn.
inline PointSet sample_surface_points(const VoxelGrid& grid, int total_count, std::uint64_t seed) {
  if (grid.empty()) throw UsageError("sample_surface_points on empty grid");
  if (total_count < 1) throw UsageError("total_count must be >= 1");
  std::mt19937 rng(static_cast<std::uint32_t>(seed));
  const auto faces = detail::exposed_faces(grid);
  std::uniform_int_distribution<std::size_t> pick(0, faces.size() - 1);
  PointSet ps;
  ps.points.reserve(static_cast<std::size_t>(total_count));
  for (int i = 0; i < total_count; ++i)
    ps.points.push_back(detail::sample_on_face(faces[pick(rng)], grid.side(), rng));
  return ps;
}

// ---- metrics ---------------------------------------------------------------

// |a AND b| / |a OR b|; both-empty grids compare equal (1.0).
inline double iou(const VoxelGrid& a, const VoxelGrid& b) {
  if (a.side() != b.side()) throw DimensionError("iou requires equal grid sides");
  std::int64_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.raw().size(); ++i) {
    inter += std::popcount(static_cast<std::uint8_t>(a.raw()[i] & b.raw()[i]));
    uni += std::popcount(static_cast<std::uint8_t>(a.raw()[i] | b.raw()[i]));
  }
  if (uni == 0) return 1.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

// Symmetric mean squared nearest-neighbor distance, exact (brute force).
inline double chamfer(const PointSet& p, const PointSet& g) {
  if (p.points.empty() || g.points.empty()) throw UsageError("chamfer on empty point set");
  auto directed = [](const PointSet& from, const PointSet& to) {
    double total = 0;
    for (const auto& a : from.points) {
      double best = std::numeric_limits<double>::max();
      for (const auto& b : to.points) {
        const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
        best = std::min(best, dx * dx + dy * dy + dz * dz);
      }
      total += best;
    }
    return total / static_cast<double>(from.points.size());
  };
  return directed(p, g) + directed(g, p);
}

}  // namespace rocnet
