// Copyright (c) 2026 RocNet authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "rocnet/common.hpp"
#include "rocnet/voxel.hpp"

namespace rocnet {

enum class NodeType : std::uint8_t { EmptyLeaf = 0, FullLeaf = 1, MixedLeaf = 2, Interior = 3 };

inline const char* node_type_name(NodeType t) {
  switch (t) {
    case NodeType::EmptyLeaf: return "empty";
    case NodeType::FullLeaf: return "full";
    case NodeType::MixedLeaf: return "mixed";
    case NodeType::Interior: return "interior";
  }
  return "?";
}

struct OctreeNode {
  NodeType type = NodeType::EmptyLeaf;
  int depth = 0;
  std::array<int, 3> origin = {0, 0, 0};
  // child indices in octant order (bit0 = x half, bit1 = y, bit2 = z);
  // -1 everywhere unless Interior
  std::array<std::int32_t, 8> children = {-1, -1, -1, -1, -1, -1, -1, -1};
  std::vector<std::uint8_t> payload;  // packed k^3 bits, MixedLeaf only

  bool is_leaf() const { return type != NodeType::Interior; }
};

// Nodes are stored in post-order (children before parent, octants in index
// order); the root is the last node. This matches the serialized topology
// stream one to one.
struct Octree {
  int grid_side = 0;
  int leaf_side = 0;
  std::vector<OctreeNode> nodes;

  std::int32_t root() const { return static_cast<std::int32_t>(nodes.size()) - 1; }
  int max_depth() const { return log2_exact(static_cast<std::uint64_t>(grid_side / leaf_side)); }
  std::size_t payload_bytes() const {
    const std::uint64_t k3 = std::uint64_t(leaf_side) * leaf_side * leaf_side;
    return static_cast<std::size_t>((k3 + 7) / 8);
  }
};

namespace detail {

inline void check_codec_config(int grid_side, int leaf_side) {
  if (!VoxelGrid::valid_side(grid_side))
    throw DimensionError("grid side must be a power of two in [4,512]");
  if (leaf_side < 4 || !is_power_of_two(static_cast<std::uint64_t>(leaf_side)) ||
      leaf_side > grid_side)
    throw DimensionError("leaf side must be a power of two with 4 <= k <= N");
}

// Scans a cubic region for homogeneity. Regions are power-of-two sized and
// aligned, so rows of size >= 8 are byte aligned.
inline void region_content(const VoxelGrid& g, int ox, int oy, int oz, int size, bool& any0,
                           bool& any1) {
  any0 = any1 = false;
  const auto& raw = g.raw();
  for (int z = oz; z < oz + size; ++z) {
    for (int y = oy; y < oy + size; ++y) {
      const std::int64_t base = g.index(ox, y, z);
      if (size >= 8) {
        const std::size_t b0 = static_cast<std::size_t>(base >> 3);
        for (int b = 0; b < size / 8; ++b) {
          const std::uint8_t v = raw[b0 + static_cast<std::size_t>(b)];
          if (v != 0xFF) any0 = true;
          if (v != 0x00) any1 = true;
        }
      } else {
        for (int x = 0; x < size; ++x) {
          const std::int64_t i = base + x;
          if ((raw[static_cast<std::size_t>(i >> 3)] >> (i & 7)) & 1)
            any1 = true;
          else
            any0 = true;
        }
      }
      if (any0 && any1) return;
    }
  }
}

inline std::int32_t build_region(const VoxelGrid& g, int k, Octree& tree, int ox, int oy, int oz,
                                 int size, int depth) {
  bool any0 = false, any1 = false;
  region_content(g, ox, oy, oz, size, any0, any1);

  OctreeNode node;
  node.depth = depth;
  node.origin = {ox, oy, oz};

  if (!any1) {
    node.type = NodeType::EmptyLeaf;
  } else if (!any0) {
    node.type = NodeType::FullLeaf;
  } else if (size == k) {
    node.type = NodeType::MixedLeaf;
    node.payload.assign(tree.payload_bytes(), 0);
    std::int64_t bit = 0;
    for (int z = 0; z < k; ++z)
      for (int y = 0; y < k; ++y)
        for (int x = 0; x < k; ++x, ++bit)
          if (g.get(ox + x, oy + y, oz + z))
            node.payload[static_cast<std::size_t>(bit >> 3)] |=
                static_cast<std::uint8_t>(1u << (bit & 7));
  } else {
    node.type = NodeType::Interior;
    const int h = size / 2;
    for (int c = 0; c < 8; ++c)
      node.children[static_cast<std::size_t>(c)] =
          build_region(g, k, tree, ox + (c & 1) * h, oy + ((c >> 1) & 1) * h,
                       oz + ((c >> 2) & 1) * h, h, depth + 1);
  }
  tree.nodes.push_back(std::move(node));
  return static_cast<std::int32_t>(tree.nodes.size()) - 1;
}

}  // namespace detail

// Decomposes the grid until regions are homogeneous or leaf-sized.
// Homogeneous regions stop at the shallowest depth, so an interior node never
// has eight all-empty or all-full children.
inline Octree build(const VoxelGrid& grid, int leaf_side) {
  detail::check_codec_config(grid.side(), leaf_side);
  Octree tree;
  tree.grid_side = grid.side();
  tree.leaf_side = leaf_side;
  detail::build_region(grid, leaf_side, tree, 0, 0, 0, grid.side(), 0);
  return tree;
}

inline VoxelGrid to_voxels(const Octree& tree) {
  detail::check_codec_config(tree.grid_side, tree.leaf_side);
  VoxelGrid grid(tree.grid_side);
  const int max_depth = tree.max_depth();
  for (const auto& node : tree.nodes) {
    const int size = tree.grid_side >> node.depth;
    switch (node.type) {
      case NodeType::EmptyLeaf:
        break;
      case NodeType::FullLeaf:
        for (int z = 0; z < size; ++z)
          for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x)
              grid.set(node.origin[0] + x, node.origin[1] + y, node.origin[2] + z, true);
        break;
      case NodeType::MixedLeaf: {
        if (node.depth != max_depth) throw DimensionError("mixed leaf above maximum depth");
        std::int64_t bit = 0;
        const int k = tree.leaf_side;
        for (int z = 0; z < k; ++z)
          for (int y = 0; y < k; ++y)
            for (int x = 0; x < k; ++x, ++bit)
              if ((node.payload[static_cast<std::size_t>(bit >> 3)] >> (bit & 7)) & 1)
                grid.set(node.origin[0] + x, node.origin[1] + y, node.origin[2] + z, true);
        break;
      }
      case NodeType::Interior:
        if (node.depth >= max_depth) throw DimensionError("interior node at maximum depth");
        break;
    }
  }
  return grid;
}

// ---- ROCT1 format ----------------------------------------------------------
// "ROCT", version u8=1, grid_side u32, leaf_side u32, node_count u32,
// mixed_count u32, post-order topology as 2-bit codes packed four per byte
// (LSB first), then one payload block per mixed leaf in the same order.

inline void serialize(const Octree& tree, std::ostream& os) {
  std::uint32_t mixed = 0;
  for (const auto& n : tree.nodes)
    if (n.type == NodeType::MixedLeaf) ++mixed;
  os.write("ROCT", 4);
  write_u8(os, 1);
  write_u32(os, static_cast<std::uint32_t>(tree.grid_side));
  write_u32(os, static_cast<std::uint32_t>(tree.leaf_side));
  write_u32(os, static_cast<std::uint32_t>(tree.nodes.size()));
  write_u32(os, mixed);
  std::vector<std::uint8_t> codes((tree.nodes.size() + 3) / 4, 0);
  for (std::size_t i = 0; i < tree.nodes.size(); ++i)
    codes[i >> 2] |= static_cast<std::uint8_t>(static_cast<std::uint8_t>(tree.nodes[i].type)
                                               << (2 * (i & 3)));
  write_bytes(os, codes.data(), codes.size());
  for (const auto& n : tree.nodes)
    if (n.type == NodeType::MixedLeaf) write_bytes(os, n.payload.data(), n.payload.size());
  if (!os) throw IoError("failed to write octree");
}

inline void serialize(const Octree& tree, const std::string& path) {
  auto os = open_output(path);
  serialize(tree, os);
}

namespace detail {

inline void assign_geometry(Octree& tree) {
  const int max_depth = tree.max_depth();
  // root is last; walk down assigning depth/origin
  std::vector<std::int32_t> stack{tree.root()};
  tree.nodes[static_cast<std::size_t>(tree.root())].depth = 0;
  tree.nodes[static_cast<std::size_t>(tree.root())].origin = {0, 0, 0};
  while (!stack.empty()) {
    const std::int32_t idx = stack.back();
    stack.pop_back();
    auto& node = tree.nodes[static_cast<std::size_t>(idx)];
    if (node.type == NodeType::Interior) {
      if (node.depth >= max_depth)
        throw IoError("topology places an interior node at maximum depth");
      const int h = tree.grid_side >> (node.depth + 1);
      for (int c = 0; c < 8; ++c) {
        auto& child = tree.nodes[static_cast<std::size_t>(node.children[static_cast<std::size_t>(c)])];
        child.depth = node.depth + 1;
        child.origin = {node.origin[0] + (c & 1) * h, node.origin[1] + ((c >> 1) & 1) * h,
                        node.origin[2] + ((c >> 2) & 1) * h};
        stack.push_back(node.children[static_cast<std::size_t>(c)]);
      }
    } else if (node.type == NodeType::MixedLeaf && node.depth != max_depth) {
      throw IoError("topology places a mixed leaf above maximum depth");
    }
  }
}

}  // namespace detail

inline Octree deserialize(std::istream& is) {
  expect_magic(is, "ROCT");
  if (read_u8(is) != 1) throw IoError("unsupported ROCT version");
  Octree tree;
  tree.grid_side = static_cast<int>(read_u32(is));
  tree.leaf_side = static_cast<int>(read_u32(is));
  detail::check_codec_config(tree.grid_side, tree.leaf_side);
  const std::uint32_t node_count = read_u32(is);
  const std::uint32_t mixed_count = read_u32(is);
  if (node_count == 0) throw IoError("octree must contain at least one node");

  std::vector<std::uint8_t> codes((node_count + 3) / 4);
  read_bytes(is, codes.data(), codes.size());

  tree.nodes.reserve(node_count);
  std::vector<std::int32_t> stack;
  std::vector<std::int32_t> mixed_nodes;
  for (std::uint32_t i = 0; i < node_count; ++i) {
    const auto type = static_cast<NodeType>((codes[i >> 2] >> (2 * (i & 3))) & 3);
    OctreeNode node;
    node.type = type;
    if (type == NodeType::Interior) {
      if (stack.size() < 8)
        throw IoError("topology code stream inconsistent with arity (stack underflow)");
      for (int c = 0; c < 8; ++c)
        node.children[static_cast<std::size_t>(c)] = stack[stack.size() - 8 + static_cast<std::size_t>(c)];
      stack.resize(stack.size() - 8);
    } else if (type == NodeType::MixedLeaf) {
      mixed_nodes.push_back(static_cast<std::int32_t>(i));
    }
    tree.nodes.push_back(std::move(node));
    stack.push_back(static_cast<std::int32_t>(i));
  }
  if (stack.size() != 1)
    throw IoError("topology code stream inconsistent with arity (unconnected nodes)");
  if (mixed_nodes.size() != mixed_count) throw IoError("mixed leaf count mismatch");

  for (std::int32_t idx : mixed_nodes) {
    auto& node = tree.nodes[static_cast<std::size_t>(idx)];
    node.payload.assign(tree.payload_bytes(), 0);
    read_bytes(is, node.payload.data(), node.payload.size());
  }
  detail::assign_geometry(tree);
  return tree;
}

inline Octree deserialize(const std::string& path) {
  auto is = open_input(path);
  return deserialize(is);
}

inline bool operator==(const OctreeNode& a, const OctreeNode& b) {
  return a.type == b.type && a.depth == b.depth && a.origin == b.origin &&
         a.children == b.children && a.payload == b.payload;
}

inline bool operator==(const Octree& a, const Octree& b) {
  return a.grid_side == b.grid_side && a.leaf_side == b.leaf_side && a.nodes == b.nodes;
}

// ---- structure statistics ---------------------------------------------------

struct OctreeStats {
  std::array<std::int64_t, 4> type_counts = {0, 0, 0, 0};  // indexed by NodeType
  std::vector<std::int64_t> depth_histogram;
  std::int64_t node_count = 0;
  double mixed_leaf_fraction = 0.0;  // mixed / all leaves
  // dense bits over encoded bits: N^3 / (2*nodes + k^3*mixed)
  double compression_ratio = 0.0;
};

inline OctreeStats stats(const Octree& tree) {
  OctreeStats st;
  st.depth_histogram.assign(static_cast<std::size_t>(tree.max_depth()) + 1, 0);
  for (const auto& n : tree.nodes) {
    st.type_counts[static_cast<std::size_t>(n.type)] += 1;
    st.depth_histogram[static_cast<std::size_t>(n.depth)] += 1;
  }
  st.node_count = static_cast<std::int64_t>(tree.nodes.size());
  const std::int64_t leaves = st.node_count - st.type_counts[3];
  st.mixed_leaf_fraction =
      leaves > 0 ? static_cast<double>(st.type_counts[2]) / static_cast<double>(leaves) : 0.0;
  const double dense_bits = static_cast<double>(std::int64_t{1} * tree.grid_side * tree.grid_side *
                                                tree.grid_side);
  const double k3 = static_cast<double>(std::int64_t{1} * tree.leaf_side * tree.leaf_side *
                                        tree.leaf_side);
  st.compression_ratio = dense_bits / (2.0 * static_cast<double>(st.node_count) +
                                       k3 * static_cast<double>(st.type_counts[2]));
  return st;
}

}  // namespace rocnet
