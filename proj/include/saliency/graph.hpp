#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <vector>

#include "saliency/ops.hpp"
#include "saliency/tensor.hpp"

namespace saliency {

using NodeId = std::size_t;
using GradientMap = std::map<NodeId, Tensor>;

enum class OpKind { leaf, conv2d, relu, maxpool2d, dense, batchnorm_frozen, add, flatten, scale };

/// Eagerly evaluated computation tape with reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so inputs always precede their
/// consumers. Gradients are only materialised for tracked nodes and for the
/// nodes lying between them and the differentiated output.
class Graph {
 public:
  NodeId leaf(Tensor value);

  NodeId conv2d(NodeId input, NodeId kernel, std::optional<NodeId> bias, ops::Conv2dGeometry geom);
  NodeId relu(NodeId input);
  NodeId maxpool2d(NodeId input, std::size_t window, std::size_t stride);
  NodeId dense(NodeId input, NodeId weights, std::optional<NodeId> bias);
  NodeId batchnorm_frozen(NodeId input, NodeId gamma, NodeId beta, NodeId mean, NodeId var,
                          double epsilon);
  NodeId add(NodeId a, NodeId b);
  /// [N, ...] -> [N, prod(...)]
  NodeId flatten(NodeId input);
  /// Multiplication by a constant.
  NodeId scale(NodeId input, double factor);

  void track(NodeId node);
  bool tracked(NodeId node) const;

  const Tensor& value(NodeId node) const;
  OpKind kind(NodeId node) const;
  const std::vector<NodeId>& inputs(NodeId node) const;
  std::size_t size() const { return nodes_.size(); }

  /// Gradients of the logit column `class_index` of `output` ([N, C]) summed
  /// over the batch, for every tracked node.
  GradientMap backward(NodeId output, std::size_t class_index) const;

  /// Gradients of sum(seed * value(output)) for every tracked node.
  GradientMap backward(NodeId output, const Tensor& seed) const;

 private:
  struct Node {
    OpKind kind = OpKind::leaf;
    std::vector<NodeId> inputs;
    Tensor value;
    ops::Conv2dGeometry geom;
    std::size_t window = 0;
    double scalar = 0.0;
    std::vector<std::size_t> argmax;
  };

  NodeId push(Node node);
  const Node& node(NodeId id) const;

  std::vector<Node> nodes_;
  std::vector<bool> tracked_;
};

}  // namespace saliency
