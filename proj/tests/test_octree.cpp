// Copyright (c) 2026 RocNet authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "rocnet/octree.hpp"
#include "rocnet/voxel.hpp"

namespace {

using rocnet::NodeType;
using rocnet::Octree;
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

TEST(OctreeBuild, EmptyGridIsSingleEmptyLeaf) {
  Octree t = rocnet::build(VoxelGrid(32), 8);
  ASSERT_EQ(t.nodes.size(), 1u);
  EXPECT_EQ(t.nodes[0].type, NodeType::EmptyLeaf);
  EXPECT_EQ(t.nodes[0].depth, 0);
}

TEST(OctreeBuild, FullGridIsSingleFullLeaf) {
  VoxelGrid g(32);
  for (int z = 0; z < 32; ++z)
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x) g.set(x, y, z, true);
  Octree t = rocnet::build(g, 8);
  ASSERT_EQ(t.nodes.size(), 1u);
  EXPECT_EQ(t.nodes[0].type, NodeType::FullLeaf);
}

TEST(OctreeBuild, OneVoxelHandTracedStructure) {
  VoxelGrid g(16);
  g.set(0, 0, 0, true);
  Octree t = rocnet::build(g, 4);
  ASSERT_EQ(t.nodes.size(), 17u);

  const auto& root = t.nodes[static_cast<std::size_t>(t.root())];
  EXPECT_EQ(root.type, NodeType::Interior);
  int interior_children = 0, empty_children = 0;
  for (int c = 0; c < 8; ++c) {
    const auto& ch = t.nodes[static_cast<std::size_t>(root.children[size_t(c)])];
    if (ch.type == NodeType::Interior) {
      ++interior_children;
      int empty_gc = 0, mixed_gc = 0;
      for (int gc = 0; gc < 8; ++gc) {
        const auto& g2 = t.nodes[static_cast<std::size_t>(ch.children[size_t(gc)])];
        if (g2.type == NodeType::EmptyLeaf) ++empty_gc;
        if (g2.type == NodeType::MixedLeaf) ++mixed_gc;
      }
      EXPECT_EQ(empty_gc, 7);
      EXPECT_EQ(mixed_gc, 1);
    } else {
      EXPECT_EQ(ch.type, NodeType::EmptyLeaf);
      ++empty_children;
    }
  }
  EXPECT_EQ(interior_children, 1);
  EXPECT_EQ(empty_children, 7);

  auto st = rocnet::stats(t);
  EXPECT_EQ(st.type_counts[0], 14);  // empty
  EXPECT_EQ(st.type_counts[1], 0);   // full
  EXPECT_EQ(st.type_counts[2], 1);   // mixed
  EXPECT_EQ(st.type_counts[3], 2);   // interior
}

TEST(OctreeBuild, InvalidLeafSideRejected) {
  VoxelGrid g(16);
  EXPECT_THROW(rocnet::build(g, 3), rocnet::DimensionError);
  EXPECT_THROW(rocnet::build(g, 32), rocnet::DimensionError);
  EXPECT_THROW(rocnet::build(g, 2), rocnet::DimensionError);
}

TEST(OctreeRoundTrip, ToVoxelsInvertsBuild) {
  for (unsigned seed = 0; seed < 8; ++seed) {
    const int side = seed % 2 ? 16 : 32;
    const int k = seed % 2 ? 4 : 8;
    VoxelGrid g = random_grid(side, 0.08 + 0.12 * seed, seed);
    Octree t = rocnet::build(g, k);
    EXPECT_EQ(rocnet::to_voxels(t), g) << "seed " << seed;
  }
}

TEST(OctreeRoundTrip, SingleFullLeafExpandsToFullGrid) {
  VoxelGrid g(16);
  for (int z = 0; z < 16; ++z)
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x) g.set(x, y, z, true);
  Octree t = rocnet::build(g, 4);
  ASSERT_EQ(t.nodes.size(), 1u);
  EXPECT_EQ(rocnet::to_voxels(t), g);
}

TEST(OctreeRoundTrip, OneVoxelInverse) {
  VoxelGrid g(16);
  g.set(0, 0, 0, true);
  EXPECT_EQ(rocnet::to_voxels(rocnet::build(g, 4)), g);
}

TEST(OctreeRoundTrip, RootLeafWhenSidesEqual) {
  VoxelGrid g = random_grid(16, 0.5, 77);
  Octree t = rocnet::build(g, 16);
  ASSERT_EQ(t.nodes.size(), 1u);
  EXPECT_EQ(t.nodes[0].type, NodeType::MixedLeaf);
  EXPECT_EQ(t.max_depth(), 0);
  EXPECT_EQ(rocnet::to_voxels(t), g);
}

TEST(OctreeSerialize, SingleLeafStream) {
  Octree t = rocnet::build(VoxelGrid(16), 4);
  std::ostringstream os;
  rocnet::serialize(t, os);
  const std::string bytes = os.str();
  // header: magic(4) version(1) sides(8) counts(8), then one packed code byte
  ASSERT_EQ(bytes.size(), 21u + 1u);
  EXPECT_EQ(bytes.substr(0, 4), "ROCT");
  EXPECT_EQ(static_cast<unsigned char>(bytes[21]), 0x00);  // EmptyLeaf code
}

TEST(OctreeSerialize, PostOrderTraceWithSubdividedFirstChild) {
  // one voxel at the origin: root -> child0 -> grandchild0(mixed)
  VoxelGrid g(16);
  g.set(0, 0, 0, true);
  Octree t = rocnet::build(g, 4);
  std::ostringstream os;
  rocnet::serialize(t, os);
  const std::string bytes = os.str();
  // codes: [2,0,0,0,0,0,0,0, 3, 0,0,0,0,0,0,0, 3] packed 4 per byte LSB-first
  const unsigned char expected[5] = {0x02, 0x00, 0x03, 0x00, 0x03};
  ASSERT_GE(bytes.size(), 21u + 5u);
  for (int i = 0; i < 5; ++i)
    EXPECT_EQ(static_cast<unsigned char>(bytes[21 + size_t(i)]), expected[i]) << "byte " << i;
  // topology section length: one 2-bit code per node
  const std::size_t payload = t.payload_bytes();
  EXPECT_EQ(bytes.size(), 21u + 5u + payload);
}

TEST(OctreeSerialize, RoundTripIsIdentity) {
  std::mt19937 rng(2026);
  std::uniform_real_distribution<double> dens(0.02, 0.6);
  for (int i = 0; i < 100; ++i) {
    const int side = (i % 3 == 0) ? 16 : 32;
    const int k = (i % 2 == 0) ? 4 : 8;
    VoxelGrid g = random_grid(side, dens(rng), 1000 + unsigned(i));
    Octree t = rocnet::build(g, k);
    std::stringstream ss;
    rocnet::serialize(t, ss);
    Octree back = rocnet::deserialize(ss);
    EXPECT_TRUE(back == t) << "case " << i;
  }
}

TEST(OctreeSerialize, InconsistentStreamsRejected) {
  auto header = [](std::uint32_t nodes, std::uint32_t mixed) {
    std::ostringstream os;
    os.write("ROCT", 4);
    rocnet::write_u8(os, 1);
    rocnet::write_u32(os, 16);
    rocnet::write_u32(os, 4);
    rocnet::write_u32(os, nodes);
    rocnet::write_u32(os, mixed);
    return os;
  };
  {
    auto os = header(1, 0);
    rocnet::write_u8(os, 0x03);  // Interior with no children on the stack
    std::istringstream is(os.str());
    EXPECT_THROW(rocnet::deserialize(is), rocnet::IoError);
  }
  {
    auto os = header(2, 0);
    rocnet::write_u8(os, 0x00 | (0x01 << 2));  // two dangling leaves
    std::istringstream is(os.str());
    EXPECT_THROW(rocnet::deserialize(is), rocnet::IoError);
  }
  {
    auto os = header(1, 1);
    rocnet::write_u8(os, 0x02);  // mixed leaf but payload missing
    std::istringstream is(os.str());
    EXPECT_THROW(rocnet::deserialize(is), rocnet::IoError);
  }
}

TEST(OctreeStats, EmptyGridRatio) {
  Octree t = rocnet::build(VoxelGrid(32), 8);
  auto st = rocnet::stats(t);
  EXPECT_EQ(st.node_count, 1);
  EXPECT_EQ(st.type_counts[0], 1);
  EXPECT_DOUBLE_EQ(st.compression_ratio, 32.0 * 32 * 32 / 2.0);
}

TEST(OctreeStats, OneVoxelCompression) {
  VoxelGrid g(16);
  g.set(0, 0, 0, true);
  auto st = rocnet::stats(rocnet::build(g, 4));
  EXPECT_EQ(st.node_count, 17);
  // 16^3 bits dense vs 2*17 + 64 payload bits
  EXPECT_DOUBLE_EQ(st.compression_ratio, 4096.0 / (2.0 * 17 + 64.0));
}

TEST(OctreeStats, SphereMixedLeavesAreMinority) {
  ShapeParams p;
  p.radius = 0.4;
  VoxelGrid g = rocnet::generate_synthetic(ShapeKind::Sphere, p, 64, 0);
  auto st = rocnet::stats(rocnet::build(g, 8));
  EXPECT_GT(st.type_counts[2], 0);
  EXPECT_LT(st.mixed_leaf_fraction, 0.5);
}

TEST(OctreeInvariants, StructuralProperties) {
  std::mt19937 rng(404);
  std::uniform_real_distribution<double> dens(0.01, 0.7);
  for (int i = 0; i < 20; ++i) {
    VoxelGrid g = random_grid(32, dens(rng), 500 + unsigned(i));
    Octree t = rocnet::build(g, 4);
    auto st = rocnet::stats(t);
    // every split replaces a node by itself + 8 children
    EXPECT_EQ(st.node_count % 8, 1) << "node count " << st.node_count;
    const std::int64_t leaves = st.node_count - st.type_counts[3];
    EXPECT_EQ(leaves % 7, 1);
    // worst-case mixed-leaf population
    EXPECT_LE(st.type_counts[2], std::int64_t(8) * 8 * 8);
    // canonical minimality: no interior has homogeneous children of one kind
    for (const auto& n : t.nodes) {
      if (n.type != NodeType::Interior) continue;
      int empties = 0, fulls = 0;
      for (auto c : n.children) {
        const auto ct = t.nodes[static_cast<std::size_t>(c)].type;
        empties += ct == NodeType::EmptyLeaf;
        fulls += ct == NodeType::FullLeaf;
      }
      EXPECT_LT(empties, 8);
      EXPECT_LT(fulls, 8);
    }
    // depth histogram counts every node exactly once
    std::int64_t sum = 0;
    for (auto c : st.depth_histogram) sum += c;
    EXPECT_EQ(sum, st.node_count);
  }
}

TEST(OctreeInvariants, MixedOnlyAtMaxDepthInteriorNever) {
  VoxelGrid g = random_grid(32, 0.4, 8);
  Octree t = rocnet::build(g, 8);
  const int md = t.max_depth();
  for (const auto& n : t.nodes) {
    if (n.type == NodeType::MixedLeaf) EXPECT_EQ(n.depth, md);
    if (n.type == NodeType::Interior) EXPECT_LT(n.depth, md);
  }
}

}  // namespace
