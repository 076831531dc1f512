// Copyright (c) 2026 RocNet authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>
#include <sstream>

#include "rocnet/voxel.hpp"

namespace {

using rocnet::PointSet;
using rocnet::ShapeKind;
using rocnet::ShapeParams;
using rocnet::VoxelGrid;

VoxelGrid random_grid(int side, double density, unsigned seed) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  VoxelGrid g(side);
  for (int z = 0; z < side; ++z)
    for (int y = 0; y < side; ++y)
      for (int x = 0; x < side; ++x)
        if (u(rng) < density) g.set(x, y, z, true);
  return g;
}

TEST(VoxelGrid, SideValidation) {
  EXPECT_THROW(VoxelGrid(6), rocnet::DimensionError);
  EXPECT_THROW(VoxelGrid(2), rocnet::DimensionError);
  EXPECT_THROW(VoxelGrid(1024), rocnet::DimensionError);
  VoxelGrid g(8);
  EXPECT_EQ(g.raw().size(), 64u);
}

TEST(VoxelGrid, BitIndexingIsXMajor) {
  VoxelGrid g(4);
  g.set(1, 0, 0, true);   // linear index 1
  g.set(0, 1, 0, true);   // linear index 4
  g.set(0, 0, 1, true);   // linear index 16
  EXPECT_EQ(g.raw()[0], 0x02 | 0x10);
  EXPECT_EQ(g.raw()[2], 0x01);
  EXPECT_EQ(g.count(), 3);
}

TEST(VoxelIo, EmptyGridFileLayout) {
  VoxelGrid g(16);
  std::ostringstream os;
  rocnet::save_grid(g, os);
  const std::string bytes = os.str();
  ASSERT_EQ(bytes.size(), 4u + 1u + 4u + 512u);
  EXPECT_EQ(bytes.substr(0, 4), "RVOX");
  EXPECT_EQ(bytes[4], 1);
  for (std::size_t i = 9; i < bytes.size(); ++i) EXPECT_EQ(bytes[i], 0);
  std::istringstream is(bytes);
  EXPECT_TRUE(rocnet::load_grid(is).empty());
}

TEST(VoxelIo, FullGridPayloadAllOnes) {
  VoxelGrid g(4);
  for (int z = 0; z < 4; ++z)
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 4; ++x) g.set(x, y, z, true);
  std::ostringstream os;
  rocnet::save_grid(g, os);
  const std::string bytes = os.str();
  ASSERT_EQ(bytes.size(), 9u + 8u);
  for (std::size_t i = 9; i < bytes.size(); ++i)
    EXPECT_EQ(static_cast<unsigned char>(bytes[i]), 0xFFu);
}

TEST(VoxelIo, RandomRoundTrip) {
  for (unsigned seed : {1u, 2u, 3u, 4u, 5u}) {
    VoxelGrid g = random_grid(32, 0.37, seed);
    std::stringstream ss;
    rocnet::save_grid(g, ss);
    EXPECT_EQ(rocnet::load_grid(ss), g);
  }
}

TEST(VoxelIo, Errors) {
  {
    std::istringstream is("JUNK");
    EXPECT_THROW(rocnet::load_grid(is), rocnet::IoError);
  }
  {
    std::ostringstream os;
    os.write("RVOX", 4);
    rocnet::write_u8(os, 1);
    rocnet::write_u32(os, 6);  // not a power of two
    std::istringstream is(os.str());
    EXPECT_THROW(rocnet::load_grid(is), rocnet::IoError);
  }
  {
    std::ostringstream os;
    os.write("RVOX", 4);
    rocnet::write_u8(os, 1);
    rocnet::write_u32(os, 16);
    os.write("\0\0\0", 3);  // truncated payload
    std::istringstream is(os.str());
    EXPECT_THROW(rocnet::load_grid(is), rocnet::IoError);
  }
}

TEST(Synthetic, SphereVolumeMatchesAnalytic) {
  ShapeParams p;
  p.radius = 0.4;
  VoxelGrid g = rocnet::generate_synthetic(ShapeKind::Sphere, p, 32, 0);
  const double frac = double(g.count()) / double(g.volume());
  const double expect = 4.0 / 3.0 * M_PI * 0.4 * 0.4 * 0.4;
  EXPECT_NEAR(frac, expect, 0.1 * expect);
}

TEST(Synthetic, BoxCoveringWholeGridIsFull) {
  ShapeParams p;
  p.half_extents = {0.5, 0.5, 0.5};
  VoxelGrid g = rocnet::generate_synthetic(ShapeKind::Box, p, 16, 0);
  EXPECT_TRUE(g.full());
}

TEST(Synthetic, DeterministicForFixedSeed) {
  ShapeParams p;
  VoxelGrid a = rocnet::generate_synthetic(ShapeKind::Blob, p, 32, 99);
  VoxelGrid b = rocnet::generate_synthetic(ShapeKind::Blob, p, 32, 99);
  EXPECT_EQ(a, b);
  VoxelGrid c = rocnet::generate_synthetic(ShapeKind::Blob, p, 32, 100);
  EXPECT_FALSE(a == c);
}

TEST(Synthetic, DegenerateParamsRejected) {
  ShapeParams p;
  p.radius = 0.0;
  EXPECT_THROW(rocnet::generate_synthetic(ShapeKind::Sphere, p, 16, 0), rocnet::UsageError);
  ShapeParams q;
  q.torus_minor = 0.5;  // >= major
  EXPECT_THROW(rocnet::generate_synthetic(ShapeKind::Torus, q, 16, 0), rocnet::UsageError);
}

TEST(Synthetic, TorusIsNonEmptyAndHasHole) {
  ShapeParams p;
  VoxelGrid g = rocnet::generate_synthetic(ShapeKind::Torus, p, 32, 0);
  EXPECT_GT(g.count(), 0);
  EXPECT_FALSE(g.get(16, 16, 16));  // center stays empty
}

TEST(SurfacePoints, SingleVoxelContainment) {
  VoxelGrid g(16);
  g.set(5, 6, 7, true);
  PointSet ps = rocnet::surface_points(g, 8, 1);
  ASSERT_EQ(ps.points.size(), 6u * 8u);
  for (const auto& pt : ps.points) {
    EXPECT_GE(pt[0], 5.0 / 16);
    EXPECT_LE(pt[0], 6.0 / 16);
    EXPECT_GE(pt[1], 6.0 / 16);
    EXPECT_LE(pt[1], 7.0 / 16);
    EXPECT_GE(pt[2], 7.0 / 16);
    EXPECT_LE(pt[2], 8.0 / 16);
  }
}

TEST(SurfacePoints, FullGridSamplesOuterShellOnly) {
  VoxelGrid g(8);
  for (int z = 0; z < 8; ++z)
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x) g.set(x, y, z, true);
  PointSet ps = rocnet::surface_points(g, 2, 3);
  EXPECT_EQ(ps.points.size(), 6u * 64u * 2u);
  for (const auto& pt : ps.points) {
    const bool on_shell = pt[0] == 0.0 || pt[0] == 1.0 || pt[1] == 0.0 || pt[1] == 1.0 ||
                          pt[2] == 0.0 || pt[2] == 1.0;
    EXPECT_TRUE(on_shell);
  }
}

TEST(SurfacePoints, FaceCountingOracle) {
  // 2x2x2 occupied block: 6 sides x 4 faces = 24 exposed faces
  VoxelGrid g(16);
  for (int z = 4; z < 6; ++z)
    for (int y = 4; y < 6; ++y)
      for (int x = 4; x < 6; ++x) g.set(x, y, z, true);
  const int spf = 5;
  PointSet ps = rocnet::surface_points(g, spf, 0);
  EXPECT_EQ(ps.points.size(), 24u * spf);
}

TEST(SurfacePoints, DeterministicAndOccupancyOnly) {
  VoxelGrid g = random_grid(16, 0.3, 17);
  VoxelGrid copy = g;
  PointSet a = rocnet::surface_points(g, 3, 42);
  PointSet b = rocnet::surface_points(copy, 3, 42);
  ASSERT_EQ(a.points.size(), b.points.size());
  for (std::size_t i = 0; i < a.points.size(); ++i) EXPECT_EQ(a.points[i], b.points[i]);
}

TEST(SurfacePoints, EmptyGridRejected) {
  VoxelGrid g(8);
  EXPECT_THROW(rocnet::surface_points(g, 1, 0), rocnet::UsageError);
  EXPECT_THROW(rocnet::sample_surface_points(g, 10, 0), rocnet::UsageError);
}

TEST(SampleSurfacePoints, ExactCountAndDeterminism) {
  VoxelGrid g = random_grid(16, 0.2, 5);
  PointSet a = rocnet::sample_surface_points(g, 333, 7);
  PointSet b = rocnet::sample_surface_points(g, 333, 7);
  EXPECT_EQ(a.points.size(), 333u);
  for (std::size_t i = 0; i < a.points.size(); ++i) EXPECT_EQ(a.points[i], b.points[i]);
}

TEST(Iou, IdentityAndDisjoint) {
  VoxelGrid g = random_grid(16, 0.4, 9);
  EXPECT_DOUBLE_EQ(rocnet::iou(g, g), 1.0);
  VoxelGrid a(8), b(8);
  a.set(0, 0, 0, true);
  b.set(7, 7, 7, true);
  EXPECT_DOUBLE_EQ(rocnet::iou(a, b), 0.0);
  VoxelGrid e1(8), e2(8);
  EXPECT_DOUBLE_EQ(rocnet::iou(e1, e2), 1.0);  // both empty
}

TEST(Iou, ShiftedBlockCountingOracle) {
  VoxelGrid a(8), b(8);
  for (int z = 0; z < 2; ++z)
    for (int y = 0; y < 2; ++y)
      for (int x = 0; x < 2; ++x) {
        a.set(x, y, z, true);
        b.set(x + 1, y, z, true);
      }
  EXPECT_DOUBLE_EQ(rocnet::iou(a, b), 1.0 / 3.0);
}

TEST(Iou, SymmetricAndMismatchRejected) {
  VoxelGrid a = random_grid(16, 0.3, 1), b = random_grid(16, 0.3, 2);
  EXPECT_DOUBLE_EQ(rocnet::iou(a, b), rocnet::iou(b, a));
  VoxelGrid c(8);
  EXPECT_THROW(rocnet::iou(a, c), rocnet::DimensionError);
}

TEST(Chamfer, ZeroOnIdenticalSets) {
  VoxelGrid g = random_grid(8, 0.3, 3);
  PointSet p = rocnet::sample_surface_points(g, 64, 1);
  EXPECT_DOUBLE_EQ(rocnet::chamfer(p, p), 0.0);
}

TEST(Chamfer, SinglePair) {
  PointSet p, g;
  p.points.push_back({0, 0, 0});
  g.points.push_back({1, 0, 0});
  EXPECT_DOUBLE_EQ(rocnet::chamfer(p, g), 2.0);
}

TEST(Chamfer, MatchesExhaustiveOracle) {
  std::mt19937 rng(31);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  PointSet p, g;
  for (int i = 0; i < 50; ++i) {
    p.points.push_back({u(rng), u(rng), u(rng)});
    g.points.push_back({u(rng), u(rng), u(rng)});
  }
  // independent double-loop evaluation of both directed terms
  auto nearest_sq = [](const rocnet::Point3& a, const PointSet& s) {
    double best = std::numeric_limits<double>::max();
    for (const auto& b : s.points) {
      double d2 = 0;
      for (int i = 0; i < 3; ++i) d2 += (a[i] - b[i]) * (a[i] - b[i]);
      best = std::min(best, d2);
    }
    return best;
  };
  double expect = 0;
  for (const auto& a : p.points) expect += nearest_sq(a, g) / double(p.points.size());
  for (const auto& b : g.points) expect += nearest_sq(b, p) / double(g.points.size());
  EXPECT_DOUBLE_EQ(rocnet::chamfer(p, g), expect);
  EXPECT_DOUBLE_EQ(rocnet::chamfer(p, g), rocnet::chamfer(g, p));
}

TEST(Chamfer, EmptySetRejected) {
  PointSet p, g;
  p.points.push_back({0, 0, 0});
  EXPECT_THROW(rocnet::chamfer(p, g), rocnet::UsageError);
}

}  // namespace
