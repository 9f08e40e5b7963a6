#pragma once

// Reverse-mode differentiation over a fixed op set. A ComputationRecord is an
// append-only list of nodes; every node's inputs precede it, so the record is
// acyclic by construction and backward() is a single reverse sweep.

#include <compare>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "aalb/tensor.hpp"

namespace aalb {

struct NodeId {
  std::uint32_t index = UINT32_MAX;
  bool valid() const { return index != UINT32_MAX; }
  auto operator<=>(const NodeId&) const = default;
};

enum class OpKind {
  Input,
  MatMul,
  SoftmaxRows,
  L2Normalize,
  LayerNorm,
  Relu,
  Add,
  Scale,
  Hadamard,
  Transpose,
  Slice,
  Concat,
  Mean,
  Sum,
  CosineSimilarity,
  // A value produced outside the engine; it has no derivative rule.
  Opaque,
};

std::string_view op_name(OpKind kind);

struct OpParams {
  double scalar = 0.0;  // Scale factor or LayerNorm epsilon.
  std::size_t row_begin = 0, row_end = 0, col_begin = 0, col_end = 0;
  std::size_t axis = 0;
  std::vector<bool> degenerate;  // L2Normalize rows floored at epsilon.
};

struct Node {
  OpKind kind = OpKind::Input;
  std::vector<NodeId> inputs;
  OpParams params;
  Tensor value;
};

class ComputationRecord {
 public:
  NodeId input(Tensor value);
  NodeId matmul(NodeId a, NodeId b);
  NodeId softmax_rows(NodeId x);
  NodeId l2_normalize(NodeId x);
  NodeId layer_norm(NodeId x, NodeId gamma, NodeId beta);
  NodeId relu(NodeId x);
  NodeId add(NodeId a, NodeId b);
  NodeId scale(NodeId x, double c);
  NodeId hadamard(NodeId a, NodeId b);
  NodeId transpose(NodeId x);
  NodeId slice(NodeId x, std::size_t row_begin, std::size_t row_end, std::size_t col_begin,
               std::size_t col_end);
  NodeId concat(std::span<const NodeId> parts, std::size_t axis);
  NodeId mean(NodeId x);
  NodeId sum(NodeId x);
  NodeId cosine_similarity(NodeId a, NodeId b);
  NodeId opaque(Tensor value, std::vector<NodeId> inputs);

  const Node& node(NodeId id) const;
  const Tensor& value(NodeId id) const { return node(id).value; }
  std::size_t size() const { return nodes_.size(); }

 private:
  NodeId push(OpKind kind, std::vector<NodeId> inputs, OpParams params, Tensor value);

  std::vector<Node> nodes_;
};

/// Gradient of one scalar root with respect to every node that reaches it.
class GradientMap {
 public:
  bool has(NodeId id) const;
  /// Gradient for `id`; throws aalb::RangeError if the node does not reach the root.
  const Tensor& at(NodeId id) const;
  /// Gradient for `id`, or zeros shaped like its value when unreachable.
  Tensor at_or_zero(const ComputationRecord& record, NodeId id) const;

  friend bool operator==(const GradientMap&, const GradientMap&) = default;

 private:
  friend GradientMap backward(const ComputationRecord& record, NodeId root);
  std::vector<std::optional<Tensor>> grads_;
};

class UnsupportedOpError : public Error {
 public:
  using Error::Error;
};

/// Reverse sweep from a single-element root. Throws UnsupportedOpError when a
/// gradient has to pass through a node without a derivative rule.
GradientMap backward(const ComputationRecord& record, NodeId root);

using ScalarFunction = std::function<double(const Tensor&)>;

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every entry of x.
Tensor finite_diff_grad(const ScalarFunction& f, const Tensor& x, double h = 1e-5);

}  // namespace aalb
