#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "mdl/tensor.hpp"

namespace mdl::ad {

using NodeId = std::size_t;

/// Gradient of a loss with respect to each named parameter leaf.
using GradientMap = std::map<std::string, Tensor>;

enum class Primitive : std::uint8_t {
  Leaf,
  MatMul,        // x[..., k] * w[k, n]
  Affine,        // x[..., k] * w[k, n] + b[n]
  Add,           // same shape
  Mul,           // same shape, elementwise
  BroadcastAdd,  // b broadcast to a (numpy rules, b rank <= a rank)
  Relu,
  Sigmoid,
  Softmax,       // last axis
  LayerNorm,     // last axis, affine gain/bias over trailing axes
  Concat,        // last axis
  SelectMean,    // x[B, S, d] -> [B, d], mean over masked rows
  Gather,        // table[V, d] rows by index
  Sum,           // full reduction to a rank-0 tensor
  Scale,         // multiply by attrs.scalar
  Reshape,
  TokenLinear,   // x[..., N, i] with per-token w[N, i, o], b[N, o]
  TokenMix,      // head shuffle across tokens, x[..., N, d]
  AttnScores,    // q[B, Nq, d], k[B, Nk, d] -> [B, H, Nq, Nk] / sqrt(d / H)
  AttnMix,       // p[B, H, Nq, Nk], v[B, Nk, d] -> [B, Nq, d]
  Bce,           // probs[B, N], labels[B, N] -> weighted mean cross entropy
};

std::string_view primitive_name(Primitive kind);
/// Throws std::invalid_argument for an unknown name.
Primitive primitive_from_name(std::string_view name);

/// Non-tensor arguments of a primitive.
struct Attrs {
  std::vector<std::size_t> index;    // Gather rows
  std::vector<std::uint8_t> mask;    // SelectMean, row-major [B, S]
  Shape shape;                       // Reshape target
  std::size_t heads = 1;             // AttnScores / AttnMix
  double scalar = 1.0;               // Scale
  std::vector<double> weights;       // Bce per-task weights
};

struct Node {
  Primitive op = Primitive::Leaf;
  std::vector<NodeId> inputs;
  Tensor value;
  Tensor grad;
  Attrs attrs;
  std::vector<double> saved;
  std::string name;  // set for parameter leaves only
  bool requires_grad = false;
};

/// Records primitive applications for reverse-mode differentiation.
/// Entries are appended in evaluation order, so inputs always precede
/// the node that consumes them.
class Tape {
 public:
  /// Trainable leaf. Registering the same name twice returns the first node.
  NodeId param(const std::string& name, const Tensor& value);
  NodeId constant(Tensor value);

  NodeId apply(Primitive kind, std::span<const NodeId> inputs, Attrs attrs = {});
  NodeId apply(Primitive kind, std::initializer_list<NodeId> inputs, Attrs attrs = {}) {
    return apply(kind, std::span<const NodeId>(inputs.begin(), inputs.size()), std::move(attrs));
  }

  const Tensor& value(NodeId id) const { return nodes_.at(id).value; }
  const Node& node(NodeId id) const { return nodes_.at(id); }
  std::size_t size() const { return nodes_.size(); }

  /// Reverse sweep from a rank-0 loss. Every tape entry is visited once;
  /// parameters the loss does not reach get exact zero gradients.
  GradientMap backward(NodeId loss);

  /// Per-node visit counts of the last backward sweep.
  const std::vector<std::uint32_t>& visit_counts() const { return visits_; }

  void clear();

 private:
  NodeId push(Node node);
  void propagate(NodeId id);
  Tensor& grad_of(NodeId id);

  std::vector<Node> nodes_;
  std::unordered_map<std::string, NodeId> params_;
  std::vector<std::uint32_t> visits_;
};

// Typed front-ends over Tape::apply.
NodeId matmul(Tape& t, NodeId x, NodeId w);
NodeId affine(Tape& t, NodeId x, NodeId w, NodeId b);
NodeId add(Tape& t, NodeId a, NodeId b);
NodeId mul(Tape& t, NodeId a, NodeId b);
NodeId broadcast_add(Tape& t, NodeId a, NodeId b);
NodeId relu(Tape& t, NodeId x);
NodeId sigmoid(Tape& t, NodeId x);
NodeId softmax(Tape& t, NodeId x);
NodeId layer_norm(Tape& t, NodeId x, NodeId gain, NodeId bias);
NodeId concat(Tape& t, std::span<const NodeId> parts);
NodeId select_mean(Tape& t, NodeId x, std::vector<std::uint8_t> mask);
NodeId gather(Tape& t, NodeId table, std::vector<std::size_t> rows);
NodeId sum(Tape& t, NodeId x);
NodeId scale(Tape& t, NodeId x, double factor);
NodeId reshape(Tape& t, NodeId x, Shape shape);
NodeId token_linear(Tape& t, NodeId x, NodeId w, NodeId b);
NodeId token_mix(Tape& t, NodeId x);
NodeId attn_scores(Tape& t, NodeId q, NodeId k, std::size_t heads);
NodeId attn_mix(Tape& t, NodeId p, NodeId v, std::size_t heads);
NodeId bce(Tape& t, NodeId probs, NodeId labels, std::vector<double> weights);

inline constexpr double kLayerNormEps = 1e-6;
inline constexpr double kProbClamp = 1e-7;

}  // namespace mdl::ad
