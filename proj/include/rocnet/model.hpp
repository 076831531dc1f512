// Copyright (c) 2026 RocNet authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <istream>
#include <map>
#include <ostream>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "rocnet/octree.hpp"
#include "rocnet/ops.hpp"
#include "rocnet/tensor.hpp"

namespace rocnet {

enum class RunMode { Train, Eval };
enum class DecodeMode { Predicted, Known };
enum class ParamScope { Encoder, Decoder, Classifier, All };

inline DecodeMode parse_decode_mode(const std::string& s) {
  if (s == "predicted") return DecodeMode::Predicted;
  if (s == "known") return DecodeMode::Known;
  throw UsageError("decode mode must be 'predicted' or 'known'");
}

// RocNet-N-k configuration. Node features are always
// [feature_channels, 4, 4, 4]; the latent code has latent_dim entries.
struct ModelConfig {
  int grid_side = 32;
  int leaf_side = 8;
  int feature_channels = 64;
  int merge_channels = 128;
  int latent_dim = 80;
  int n_classes = 0;  // >0 adds the classification head

  int levels() const {
    return log2_exact(static_cast<std::uint64_t>(grid_side / leaf_side));
  }

  // Grid sides beyond the VoxelGrid cap are allowed here: parameter counting
  // at large N never materializes a grid.
  void validate() const {
    if (grid_side < 4 || !is_power_of_two(std::uint64_t(grid_side)))
      throw DimensionError("grid side must be a power of two >= 4");
    if (leaf_side < 4 || leaf_side > 32 || !is_power_of_two(std::uint64_t(leaf_side)))
      throw DimensionError("leaf side must be one of 4, 8, 16, 32");
    if (leaf_side > grid_side) throw DimensionError("leaf side cannot exceed grid side");
    if (feature_channels < 4 || feature_channels % 4 != 0)
      throw DimensionError("feature channel count must be a positive multiple of 4");
    if (latent_dim < 1) throw DimensionError("latent dimension must be positive");
  }

  struct ConvSpec {
    int in_ch, out_ch, kernel, stride, pad;
  };

  // Conv ladder halving the spatial side down to 4. Channel counts are the
  // tail of the fc/4, fc/2, fc progression; k=4 keeps its side with a single
  // stride-1 kernel-3 stage.
  std::vector<ConvSpec> leaf_encoder_stages() const {
    const int fc = feature_channels;
    switch (leaf_side) {
      case 4: return {{1, fc, 3, 1, 1}};
      case 8: return {{1, fc, 4, 2, 1}};
      case 16: return {{1, fc / 2, 4, 2, 1}, {fc / 2, fc, 4, 2, 1}};
      case 32: return {{1, fc / 4, 4, 2, 1}, {fc / 4, fc / 2, 4, 2, 1}, {fc / 2, fc, 4, 2, 1}};
      default: throw DimensionError("unsupported leaf side");
    }
  }

  // Transposed mirror of the encoder ladder; the final stage feeds a sigmoid
  // and carries no batch norm.
  std::vector<ConvSpec> leaf_decoder_stages() const {
    auto enc = leaf_encoder_stages();
    std::vector<ConvSpec> dec;
    for (auto it = enc.rbegin(); it != enc.rend(); ++it)
      dec.push_back({it->out_ch, it->in_ch, it->kernel, it->stride, it->pad});
    return dec;
  }

  Shape feature_shape() const { return {feature_channels, 4, 4, 4}; }
};

// Named collection of learnable tensors and batch-norm running buffers.
// Node encoder/decoder weights exist separately per level: nothing is shared
// across depths. Scope prefixes: enc.* / dec.* / cls.* + head.*.
template <typename T>
class ParameterStore {
 public:
  ModelConfig config;

  static ParameterStore init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    ParameterStore store;
    store.config = cfg;
    std::mt19937 rng(static_cast<std::uint32_t>(seed));
    const int fc = cfg.feature_channels, mc = cfg.merge_channels, d = cfg.latent_dim;

    // encoder
    auto enc_stages = cfg.leaf_encoder_stages();
    for (std::size_t s = 0; s < enc_stages.size(); ++s) {
      const auto& cs = enc_stages[s];
      store.add_conv("enc.leaf.s" + std::to_string(s) + ".conv", cs.in_ch, cs.out_ch, cs.kernel,
                     rng);
      store.add_bn("enc.leaf.s" + std::to_string(s) + ".bn", cs.out_ch);
    }
    store.add_param("enc.const.empty", Tensor<T>::zeros(cfg.feature_shape()));
    store.add_param("enc.const.full",
                    Tensor<T>::randn(cfg.feature_shape(), rng, std::sqrt(T{2} / T(fc))));
    for (int l = 1; l <= cfg.levels(); ++l) {
      const std::string base = "enc.node.L" + std::to_string(l) + ".";
      for (int c = 0; c < 8; ++c) {
        store.add_conv(base + "phi" + std::to_string(c), fc, mc, 1, rng);
        store.add_bn(base + "phi" + std::to_string(c) + "_bn", mc);
      }
      store.add_conv(base + "psi", mc, fc, 1, rng);
      store.add_bn(base + "psi_bn", fc);
    }
    store.add_conv("enc.tree.conv", fc, d, 4, rng);

    // decoder
    store.add_convt("dec.tree.convt", d, fc, 4, rng);
    for (int l = 1; l <= cfg.levels(); ++l) {
      const std::string base = "dec.node.L" + std::to_string(l) + ".";
      store.add_conv(base + "parent", fc, mc, 1, rng);
      store.add_bn(base + "parent_bn", mc);
      for (int c = 0; c < 8; ++c) {
        store.add_conv(base + "child" + std::to_string(c), mc, fc, 1, rng);
        store.add_bn(base + "child" + std::to_string(c) + "_bn", fc);
      }
    }
    auto dec_stages = cfg.leaf_decoder_stages();
    for (std::size_t s = 0; s < dec_stages.size(); ++s) {
      const auto& cs = dec_stages[s];
      store.add_convt("dec.leaf.s" + std::to_string(s) + ".convt", cs.in_ch, cs.out_ch, cs.kernel,
                      rng);
      if (s + 1 < dec_stages.size())
        store.add_bn("dec.leaf.s" + std::to_string(s) + ".bn", cs.out_ch);
    }

    // node classifier: tree-encoder layers plus a fully-connected head
    store.add_conv("cls.conv", fc, d, 4, rng);
    store.add_linear("cls.fc", d, 4, rng);

    if (cfg.n_classes > 0) store.add_linear("head.fc", d, cfg.n_classes, rng);
    return store;
  }

  Tensor<T>& at(const std::string& name) {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw UsageError("unknown parameter: " + name);
    return it->second;
  }
  const Tensor<T>& at(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw UsageError("unknown parameter: " + name);
    return it->second;
  }
  bool has(const std::string& name) const { return tensors_.count(name) > 0; }
  bool is_trainable(const std::string& name) const { return trainable_.count(name) > 0; }

  const std::map<std::string, Tensor<T>>& tensors() const { return tensors_; }
  std::map<std::string, Tensor<T>>& tensors() { return tensors_; }

  std::vector<std::string> trainable_names() const {
    return {trainable_.begin(), trainable_.end()};
  }

  void set_requires_grad(bool v) {
    for (const auto& name : trainable_) tensors_.at(name).set_requires_grad(v);
  }
  void zero_grad() {
    for (const auto& name : trainable_) tensors_.at(name).zero_grad();
  }

  static bool in_scope(const std::string& name, ParamScope scope) {
    switch (scope) {
      case ParamScope::All: return true;
      case ParamScope::Encoder: return name.rfind("enc.", 0) == 0;
      case ParamScope::Decoder: return name.rfind("dec.", 0) == 0;
      case ParamScope::Classifier:
        return name.rfind("cls.", 0) == 0 || name.rfind("head.", 0) == 0;
    }
    return false;
  }

  std::int64_t count_parameters(ParamScope scope) const {
    std::int64_t total = 0;
    for (const auto& name : trainable_)
      if (in_scope(name, scope)) total += tensors_.at(name).numel();
    return total;
  }

  // registration (used by init and by the checkpoint loader)
  void add_param(const std::string& name, Tensor<T> t) {
    trainable_.insert(name);
    tensors_.emplace(name, std::move(t));
  }
  void add_buffer(const std::string& name, Tensor<T> t) { tensors_.emplace(name, std::move(t)); }
  void add_conv(const std::string& prefix, int in_ch, int out_ch, int k, std::mt19937& rng) {
    const T std = std::sqrt(T{2} / static_cast<T>(in_ch * k * k * k));
    add_param(prefix + ".weight", Tensor<T>::randn({out_ch, in_ch, k, k, k}, rng, std));
    add_param(prefix + ".bias", Tensor<T>::zeros({out_ch}));
  }
  void add_convt(const std::string& prefix, int in_ch, int out_ch, int k, std::mt19937& rng) {
    const T std = std::sqrt(T{2} / static_cast<T>(in_ch * k * k * k));
    add_param(prefix + ".weight", Tensor<T>::randn({in_ch, out_ch, k, k, k}, rng, std));
    add_param(prefix + ".bias", Tensor<T>::zeros({out_ch}));
  }
  void add_bn(const std::string& prefix, int ch) {
    add_param(prefix + ".gamma", Tensor<T>::full({ch}, T{1}));
    add_param(prefix + ".beta", Tensor<T>::zeros({ch}));
    add_buffer(prefix + ".running_mean", Tensor<T>::zeros({ch}));
    add_buffer(prefix + ".running_var", Tensor<T>::full({ch}, T{1}));
  }
  void add_linear(const std::string& prefix, int in, int out, std::mt19937& rng) {
    const T std = std::sqrt(T{2} / static_cast<T>(in));
    add_param(prefix + ".weight", Tensor<T>::randn({out, in}, rng, std));
    add_param(prefix + ".bias", Tensor<T>::zeros({out}));
  }

 private:
  std::map<std::string, Tensor<T>> tensors_;
  std::set<std::string> trainable_;
};

// ---------------------------------------------------------------------------
// Layer forward passes. Batched variants take rank-5 [G, C, D, H, W] inputs;
// the per-node wrappers below keep the [C,4,4,4] node-feature contract.
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
Tensor<T> conv_bn_elu(Tape<T>* tape, ParameterStore<T>& ps, const std::string& conv,
                      const std::string& bn, const Tensor<T>& x, int stride, int pad,
                      RunMode mode) {
  auto h = conv3d<T>(tape, x, ps.at(conv + ".weight"), ps.at(conv + ".bias"), stride, pad);
  Tensor<T> rm = ps.at(bn + ".running_mean"), rv = ps.at(bn + ".running_var");
  h = batch_norm<T>(tape, h, ps.at(bn + ".gamma"), ps.at(bn + ".beta"), rm, rv,
                    mode == RunMode::Train);
  return elu<T>(tape, h);
}

}  // namespace detail

template <typename T>
Tensor<T> payload_to_tensor(const std::vector<std::uint8_t>& bits, int k) {
  Tensor<T> t({1, k, k, k});
  const std::int64_t n = std::int64_t{1} * k * k * k;
  for (std::int64_t i = 0; i < n; ++i)
    t.data()[i] = (bits[static_cast<std::size_t>(i >> 3)] >> (i & 7)) & 1 ? T{1} : T{0};
  return t;
}

// [G,1,k,k,k] occupancy -> [G,fc,4,4,4]
template <typename T>
Tensor<T> leaf_encode_batch(Tape<T>* tape, ParameterStore<T>& ps, const Tensor<T>& payload,
                            RunMode mode) {
  auto stages = ps.config.leaf_encoder_stages();
  Tensor<T> h = payload;
  for (std::size_t s = 0; s < stages.size(); ++s) {
    const std::string base = "enc.leaf.s" + std::to_string(s);
    h = detail::conv_bn_elu<T>(tape, ps, base + ".conv", base + ".bn", h, stages[s].stride,
                               stages[s].pad, mode);
  }
  return h;
}

// k^3 bit block -> [fc,4,4,4]
template <typename T>
Tensor<T> leaf_encode(Tape<T>* tape, ParameterStore<T>& ps, const std::vector<std::uint8_t>& bits,
                      RunMode mode = RunMode::Eval) {
  const int k = ps.config.leaf_side;
  auto single = reshape<T>(tape, payload_to_tensor<T>(bits, k), {1, 1, k, k, k});
  auto feat = leaf_encode_batch<T>(tape, ps, single, mode);
  return reshape<T>(tape, feat, ps.config.feature_shape());
}

// The learnable constants that stand in for homogeneous leaves (leaf skip).
template <typename T>
Tensor<T>& constant_leaf_feature(ParameterStore<T>& ps, NodeType type) {
  if (type == NodeType::EmptyLeaf) return ps.at("enc.const.empty");
  if (type == NodeType::FullLeaf) return ps.at("enc.const.full");
  throw UsageError("constant leaf features exist only for empty/full leaves");
}

// Additive merge of 8 child features: per slot conv->BN->ELU, summed, then
// the inverse conv->BN->ELU back to feature width.
template <typename T>
Tensor<T> node_encode_batch(Tape<T>* tape, ParameterStore<T>& ps,
                            const std::array<Tensor<T>, 8>& children, int level, RunMode mode) {
  if (level < 1 || level > ps.config.levels()) throw UsageError("node encoder level out of range");
  const std::string base = "enc.node.L" + std::to_string(level) + ".";
  std::vector<Tensor<T>> lifted;
  lifted.reserve(8);
  for (int c = 0; c < 8; ++c) {
    const std::string phi = base + "phi" + std::to_string(c);
    lifted.push_back(
        detail::conv_bn_elu<T>(tape, ps, phi, phi + "_bn", children[static_cast<std::size_t>(c)], 1, 0, mode));
  }
  auto merged = add_n<T>(tape, lifted);
  return detail::conv_bn_elu<T>(tape, ps, base + "psi", base + "psi_bn", merged, 1, 0, mode);
}

template <typename T>
Tensor<T> node_encode(Tape<T>* tape, ParameterStore<T>& ps, const std::array<Tensor<T>, 8>& children,
                      int level, RunMode mode = RunMode::Eval) {
  std::array<Tensor<T>, 8> batched;
  Shape s5 = ps.config.feature_shape();
  s5.insert(s5.begin(), 1);
  for (int c = 0; c < 8; ++c)
    batched[static_cast<std::size_t>(c)] = reshape<T>(tape, children[static_cast<std::size_t>(c)], s5);
  auto out = node_encode_batch<T>(tape, ps, batched, level, mode);
  return reshape<T>(tape, out, ps.config.feature_shape());
}

// [G,fc,4,4,4] -> [G,d_out]; a linear bottleneck (no activation).
template <typename T>
Tensor<T> tree_encode_batch(Tape<T>* tape, ParameterStore<T>& ps, const Tensor<T>& root) {
  auto h = conv3d<T>(tape, root, ps.at("enc.tree.conv.weight"), ps.at("enc.tree.conv.bias"), 1, 0);
  return reshape<T>(tape, h, {root.extent(0), ps.config.latent_dim});
}

template <typename T>
Tensor<T> tree_encode(Tape<T>* tape, ParameterStore<T>& ps, const Tensor<T>& root_feature) {
  Shape s5 = ps.config.feature_shape();
  s5.insert(s5.begin(), 1);
  auto out = tree_encode_batch<T>(tape, ps, reshape<T>(tape, root_feature, s5));
  return reshape<T>(tape, out, {ps.config.latent_dim});
}

// [G,d_out] -> [G,fc,4,4,4] via transposed conv + ELU (no batch norm).
template <typename T>
Tensor<T> tree_decode_batch(Tape<T>* tape, ParameterStore<T>& ps, const Tensor<T>& code) {
  const int d = ps.config.latent_dim;
  if (code.rank() != 2 || code.extent(1) != d)
    throw DimensionError("tree_decode expects [G," + std::to_string(d) + "] codes");
  auto h = reshape<T>(tape, code, {code.extent(0), d, 1, 1, 1});
  h = conv_transpose3d<T>(tape, h, ps.at("dec.tree.convt.weight"), ps.at("dec.tree.convt.bias"), 1,
                          0);
  return elu<T>(tape, h);
}

template <typename T>
Tensor<T> tree_decode(Tape<T>* tape, ParameterStore<T>& ps, const Tensor<T>& code) {
  auto out = tree_decode_batch<T>(tape, ps, reshape<T>(tape, code, {1, ps.config.latent_dim}));
  return reshape<T>(tape, out, ps.config.feature_shape());
}

// Mirror of node_encode: one conv for the parent, one conv per child slot.
template <typename T>
std::array<Tensor<T>, 8> node_decode_batch(Tape<T>* tape, ParameterStore<T>& ps,
                                           const Tensor<T>& parent, int level, RunMode mode) {
  if (level < 1 || level > ps.config.levels()) throw UsageError("node decoder level out of range");
  const std::string base = "dec.node.L" + std::to_string(level) + ".";
  auto h = detail::conv_bn_elu<T>(tape, ps, base + "parent", base + "parent_bn", parent, 1, 0, mode);
  std::array<Tensor<T>, 8> children;
  for (int c = 0; c < 8; ++c) {
    const std::string child = base + "child" + std::to_string(c);
    children[static_cast<std::size_t>(c)] =
        detail::conv_bn_elu<T>(tape, ps, child, child + "_bn", h, 1, 0, mode);
  }
  return children;
}

template <typename T>
std::array<Tensor<T>, 8> node_decode(Tape<T>* tape, ParameterStore<T>& ps, const Tensor<T>& parent,
                                     int level, RunMode mode = RunMode::Eval) {
  Shape s5 = ps.config.feature_shape();
  s5.insert(s5.begin(), 1);
  auto outs = node_decode_batch<T>(tape, ps, reshape<T>(tape, parent, s5), level, mode);
  std::array<Tensor<T>, 8> squeezed;
  for (int c = 0; c < 8; ++c)
    squeezed[static_cast<std::size_t>(c)] =
        reshape<T>(tape, outs[static_cast<std::size_t>(c)], ps.config.feature_shape());
  return squeezed;
}

// [G,fc,4,4,4] -> [G,1,k,k,k] occupancy probabilities in (0,1).
template <typename T>
Tensor<T> leaf_decode_batch(Tape<T>* tape, ParameterStore<T>& ps, const Tensor<T>& features,
                            RunMode mode) {
  auto stages = ps.config.leaf_decoder_stages();
  Tensor<T> h = features;
  for (std::size_t s = 0; s < stages.size(); ++s) {
    const std::string base = "dec.leaf.s" + std::to_string(s);
    h = conv_transpose3d<T>(tape, h, ps.at(base + ".convt.weight"), ps.at(base + ".convt.bias"),
                            stages[s].stride, stages[s].pad);
    if (s + 1 < stages.size()) {
      Tensor<T> rm = ps.at(base + ".bn.running_mean"), rv = ps.at(base + ".bn.running_var");
      h = batch_norm<T>(tape, h, ps.at(base + ".bn.gamma"), ps.at(base + ".bn.beta"), rm, rv,
                        mode == RunMode::Train);
      h = elu<T>(tape, h);
    } else {
      h = sigmoid<T>(tape, h);
    }
  }
  return h;
}

template <typename T>
Tensor<T> leaf_decode(Tape<T>* tape, ParameterStore<T>& ps, const Tensor<T>& feature,
                      RunMode mode = RunMode::Eval) {
  Shape s5 = ps.config.feature_shape();
  s5.insert(s5.begin(), 1);
  const int k = ps.config.leaf_side;
  auto out = leaf_decode_batch<T>(tape, ps, reshape<T>(tape, feature, s5), mode);
  return reshape<T>(tape, out, {1, k, k, k});
}

// Node classifier: the tree-encoder layers plus a fully-connected head.
// [G,fc,4,4,4] -> [G,4] logits over node types.
template <typename T>
Tensor<T> classify_batch(Tape<T>* tape, ParameterStore<T>& ps, const Tensor<T>& features) {
  auto h = conv3d<T>(tape, features, ps.at("cls.conv.weight"), ps.at("cls.conv.bias"), 1, 0);
  h = elu<T>(tape, h);
  h = reshape<T>(tape, h, {features.extent(0), ps.config.latent_dim});
  return linear<T>(tape, h, ps.at("cls.fc.weight"), ps.at("cls.fc.bias"));
}

template <typename T>
Tensor<T> classify_node(Tape<T>* tape, ParameterStore<T>& ps, const Tensor<T>& feature) {
  Shape s5 = ps.config.feature_shape();
  s5.insert(s5.begin(), 1);
  auto out = classify_batch<T>(tape, ps, reshape<T>(tape, feature, s5));
  return reshape<T>(tape, out, {4});
}

// Classification head over latent codes: dropout (train only) then linear.
template <typename T>
Tensor<T> classification_head(Tape<T>* tape, ParameterStore<T>& ps, const Tensor<T>& code,
                              RunMode mode, std::mt19937& rng, double dropout_rate = 0.5) {
  if (ps.config.n_classes <= 0) throw UsageError("model has no classification head");
  auto h = dropout<T>(tape, code, dropout_rate, mode == RunMode::Train, rng);
  return linear<T>(tape, h, ps.at("head.fc.weight"), ps.at("head.fc.bias"));
}

// ---------------------------------------------------------------------------
// Whole-tree recursion (evaluation path; training uses the grouped batch plan)
// ---------------------------------------------------------------------------

struct EncodeStats {
  std::int64_t leaf_encodes = 0;
  std::int64_t node_merges = 0;
  std::int64_t constant_leaves = 0;
};

namespace detail {

template <typename T>
Tensor<T> encode_node(Tape<T>* tape, ParameterStore<T>& ps, const Octree& tree, std::int32_t idx,
                      RunMode mode, EncodeStats* st) {
  const auto& node = tree.nodes[static_cast<std::size_t>(idx)];
  Shape s5 = ps.config.feature_shape();
  s5.insert(s5.begin(), 1);
  switch (node.type) {
    case NodeType::EmptyLeaf:
    case NodeType::FullLeaf:
      if (st) st->constant_leaves += 1;
      return reshape<T>(tape, constant_leaf_feature<T>(ps, node.type), s5);
    case NodeType::MixedLeaf: {
      if (st) st->leaf_encodes += 1;
      const int k = ps.config.leaf_side;
      auto payload = reshape<T>(tape, payload_to_tensor<T>(node.payload, k), {1, 1, k, k, k});
      return leaf_encode_batch<T>(tape, ps, payload, mode);
    }
    case NodeType::Interior: {
      std::array<Tensor<T>, 8> children;
      for (int c = 0; c < 8; ++c)
        children[static_cast<std::size_t>(c)] =
            encode_node<T>(tape, ps, tree, node.children[static_cast<std::size_t>(c)], mode, st);
      if (st) st->node_merges += 1;
      return node_encode_batch<T>(tape, ps, children, ps.config.levels() - node.depth, mode);
    }
  }
  throw UsageError("corrupt node type");
}

}  // namespace detail

// Bottom-up post-order encoding of a whole octree into a latent code.
template <typename T>
Tensor<T> encode_tree(Tape<T>* tape, ParameterStore<T>& ps, const Octree& tree,
                      RunMode mode = RunMode::Eval, EncodeStats* st = nullptr) {
  if (tree.grid_side != ps.config.grid_side || tree.leaf_side != ps.config.leaf_side)
    throw UsageError("octree configuration does not match the model");
  auto root_feat = detail::encode_node<T>(tape, ps, tree, tree.root(), mode, st);
  auto code = tree_encode_batch<T>(tape, ps, root_feat);
  return reshape<T>(tape, code, {ps.config.latent_dim});
}

namespace detail {

inline int guarded_type(const float* logits, bool at_max_depth) {
  // invalid classes are clamped to the best valid one
  int best = -1;
  for (int c = 0; c < 4; ++c) {
    if (at_max_depth && c == 3) continue;
    if (!at_max_depth && c == 2) continue;
    if (best < 0 || logits[c] > logits[best]) best = c;
  }
  return best;
}

inline int guarded_type(const double* logits, bool at_max_depth) {
  int best = -1;
  for (int c = 0; c < 4; ++c) {
    if (at_max_depth && c == 3) continue;
    if (!at_max_depth && c == 2) continue;
    if (best < 0 || logits[c] > logits[best]) best = c;
  }
  return best;
}

template <typename T>
std::int32_t decode_node(ParameterStore<T>& ps, const Tensor<T>& feature, int depth,
                         DecodeMode mode, const Octree* ref, std::int32_t ref_idx, Octree& out,
                         std::array<int, 3> origin) {
  const int max_depth = out.max_depth();
  NodeType type;
  if (mode == DecodeMode::Known) {
    type = ref->nodes[static_cast<std::size_t>(ref_idx)].type;
  } else {
    auto logits = classify_batch<T>(nullptr, ps, feature);
    int picked = guarded_type(logits.data(), depth == max_depth);
    // plain argmax when it is already valid
    int arg = 0;
    for (int c = 1; c < 4; ++c)
      if (logits.data()[c] > logits.data()[arg]) arg = c;
    const bool invalid = (depth == max_depth && arg == 3) || (depth < max_depth && arg == 2);
    type = static_cast<NodeType>(invalid ? picked : arg);
  }

  OctreeNode node;
  node.type = type;
  node.depth = depth;
  node.origin = origin;

  if (type == NodeType::Interior) {
    auto children = node_decode_batch<T>(nullptr, ps, feature, ps.config.levels() - depth,
                                         RunMode::Eval);
    const int h = out.grid_side >> (depth + 1);
    for (int c = 0; c < 8; ++c) {
      const std::int32_t child_ref =
          mode == DecodeMode::Known
              ? ref->nodes[static_cast<std::size_t>(ref_idx)].children[static_cast<std::size_t>(c)]
              : -1;
      node.children[static_cast<std::size_t>(c)] = decode_node<T>(
          ps, children[static_cast<std::size_t>(c)], depth + 1, mode, ref, child_ref, out,
          {origin[0] + (c & 1) * h, origin[1] + ((c >> 1) & 1) * h, origin[2] + ((c >> 2) & 1) * h});
    }
  } else if (type == NodeType::MixedLeaf) {
    auto probs = leaf_decode_batch<T>(nullptr, ps, feature, RunMode::Eval);
    const int k = ps.config.leaf_side;
    node.payload.assign(out.payload_bytes(), 0);
    for (std::int64_t i = 0; i < std::int64_t{1} * k * k * k; ++i)
      if (probs.data()[i] >= T(0.5))
        node.payload[static_cast<std::size_t>(i >> 3)] |= static_cast<std::uint8_t>(1u << (i & 7));
  }
  out.nodes.push_back(std::move(node));
  return static_cast<std::int32_t>(out.nodes.size()) - 1;
}

}  // namespace detail

// Top-down decoding. Predicted mode routes by the node classifier (with the
// depth guard); known mode follows the reference topology and never consults
// the classifier.
template <typename T>
Octree decode_tree(ParameterStore<T>& ps, const Tensor<T>& code, DecodeMode mode,
                   const Octree* reference = nullptr) {
  if (mode == DecodeMode::Known) {
    if (reference == nullptr) throw UsageError("known-topology decoding needs a reference octree");
    if (reference->grid_side != ps.config.grid_side ||
        reference->leaf_side != ps.config.leaf_side)
      throw UsageError("reference octree configuration does not match the model");
  }
  Octree out;
  out.grid_side = ps.config.grid_side;
  out.leaf_side = ps.config.leaf_side;
  Shape s5 = ps.config.feature_shape();
  s5.insert(s5.begin(), 1);
  auto root_feat =
      tree_decode_batch<T>(nullptr, ps, reshape<T>(nullptr, code, {1, ps.config.latent_dim}));
  detail::decode_node<T>(ps, root_feat, 0, mode, reference,
                         reference ? reference->root() : -1, out, {0, 0, 0});
  return out;
}

// Classifier accuracy along the ground-truth topology (teacher-forced
// routing): the fraction of nodes whose predicted type matches.
template <typename T>
double topology_accuracy(ParameterStore<T>& ps, const Tensor<T>& code, const Octree& reference) {
  struct Visit {
    std::int32_t idx;
    Tensor<T> feature;
  };
  auto root_feat =
      tree_decode_batch<T>(nullptr, ps, reshape<T>(nullptr, code, {1, ps.config.latent_dim}));
  std::vector<Visit> stack{{reference.root(), root_feat}};
  std::int64_t correct = 0, total = 0;
  while (!stack.empty()) {
    Visit v = std::move(stack.back());
    stack.pop_back();
    const auto& node = reference.nodes[static_cast<std::size_t>(v.idx)];
    auto logits = classify_batch<T>(nullptr, ps, v.feature);
    int arg = 0;
    for (int c = 1; c < 4; ++c)
      if (logits.data()[c] > logits.data()[arg]) arg = c;
    correct += arg == static_cast<int>(node.type);
    total += 1;
    if (node.type == NodeType::Interior) {
      auto children = node_decode_batch<T>(nullptr, ps, v.feature,
                                           ps.config.levels() - node.depth, RunMode::Eval);
      for (int c = 0; c < 8; ++c)
        stack.push_back({node.children[static_cast<std::size_t>(c)], children[static_cast<std::size_t>(c)]});
    }
  }
  return static_cast<double>(correct) / static_cast<double>(total);
}

// ---------------------------------------------------------------------------
// ROCKPT1 checkpoints: "ROCKPT", version u8=1, config u32s, tensor count u32,
// then per tensor: name (u16 length + bytes), rank u32, extents u32 each,
// dtype u8 (0=f32, 1=f64), raw little-endian values.
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
  write_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (auto e : t.shape()) write_u32(os, static_cast<std::uint32_t>(e));
  write_u8(os, std::is_same_v<T, float> ? 0 : 1);
  for (T v : t.values()) {
    if constexpr (std::is_same_v<T, float>)
      write_u32(os, std::bit_cast<std::uint32_t>(v));
    else {
      const auto u = std::bit_cast<std::uint64_t>(v);
      write_u32(os, static_cast<std::uint32_t>(u & 0xffffffffu));
      write_u32(os, static_cast<std::uint32_t>(u >> 32));
    }
  }
}

template <typename T>
void read_tensor_into(std::istream& is, Tensor<T>& t, const std::string& name) {
  const std::uint32_t rank = read_u32(is);
  if (rank != static_cast<std::uint32_t>(t.rank()))
    throw IoError("checkpoint tensor rank mismatch for " + name);
  for (std::int64_t i = 0; i < t.rank(); ++i)
    if (read_u32(is) != static_cast<std::uint32_t>(t.shape()[static_cast<std::size_t>(i)]))
      throw IoError("checkpoint tensor shape mismatch for " + name);
  const int dtype = read_u8(is);
  if (dtype != (std::is_same_v<T, float> ? 0 : 1))
    throw IoError("checkpoint dtype mismatch for " + name);
  for (auto& v : t.values()) {
    if constexpr (std::is_same_v<T, float>) {
      v = std::bit_cast<float>(read_u32(is));
    } else {
      const std::uint64_t lo = read_u32(is);
      const std::uint64_t hi = read_u32(is);
      v = std::bit_cast<double>(lo | (hi << 32));
    }
  }
}

}  // namespace detail

template <typename T>
void save_checkpoint(const ParameterStore<T>& ps, std::ostream& os) {
  os.write("ROCKPT", 6);
  write_u8(os, 1);
  const auto& c = ps.config;
  for (int v : {c.grid_side, c.leaf_side, c.feature_channels, c.merge_channels, c.latent_dim,
                c.n_classes})
    write_u32(os, static_cast<std::uint32_t>(v));
  write_u32(os, static_cast<std::uint32_t>(ps.tensors().size()));
  for (const auto& [name, tensor] : ps.tensors()) {
    write_u16(os, static_cast<std::uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_tensor(os, tensor);
  }
  if (!os) throw IoError("failed to write checkpoint");
}

template <typename T>
void save_checkpoint(const ParameterStore<T>& ps, const std::string& path) {
  auto os = open_output(path);
  save_checkpoint(ps, os);
}

template <typename T>
ParameterStore<T> load_checkpoint(std::istream& is) {
  expect_magic(is, "ROCKPT");
  if (read_u8(is) != 1) throw IoError("unsupported checkpoint version");
  ModelConfig cfg;
  cfg.grid_side = static_cast<int>(read_u32(is));
  cfg.leaf_side = static_cast<int>(read_u32(is));
  cfg.feature_channels = static_cast<int>(read_u32(is));
  cfg.merge_channels = static_cast<int>(read_u32(is));
  cfg.latent_dim = static_cast<int>(read_u32(is));
  cfg.n_classes = static_cast<int>(read_u32(is));
  ParameterStore<T> ps = ParameterStore<T>::init(cfg, 0);
  const std::uint32_t count = read_u32(is);
  if (count != ps.tensors().size())
    throw IoError("checkpoint tensor count does not match the architecture");
  std::set<std::string> seen;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint16_t len = read_u16(is);
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw IoError("truncated checkpoint");
    if (!ps.has(name)) throw IoError("checkpoint contains unknown tensor: " + name);
    detail::read_tensor_into(is, ps.at(name), name);
    seen.insert(name);
  }
  if (seen.size() != ps.tensors().size()) throw IoError("checkpoint is missing tensors");
  return ps;
}

template <typename T>
ParameterStore<T> load_checkpoint(const std::string& path) {
  auto is = open_input(path);
  return load_checkpoint<T>(is);
}

}  // namespace rocnet
