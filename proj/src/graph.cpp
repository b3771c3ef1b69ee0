#include "saliency/graph.hpp"

#include <stdexcept>
#include <string>

namespace saliency {

NodeId Graph::push(Node n) {
  for (NodeId in : n.inputs) {
    if (in >= nodes_.size()) throw std::out_of_range("graph input node " + std::to_string(in) + " does not exist");
  }
  nodes_.push_back(std::move(n));
  tracked_.push_back(false);
  return nodes_.size() - 1;
}

const Graph::Node& Graph::node(NodeId id) const {
  if (id >= nodes_.size()) throw std::out_of_range("graph node " + std::to_string(id) + " does not exist");
  return nodes_[id];
}

NodeId Graph::leaf(Tensor value) {
  Node n;
  n.value = std::move(value);
  return push(std::move(n));
}

NodeId Graph::conv2d(NodeId input, NodeId kernel, std::optional<NodeId> bias, ops::Conv2dGeometry geom) {
  Node n;
  n.kind = OpKind::conv2d;
  n.inputs = {input, kernel};
  if (bias) n.inputs.push_back(*bias);
  n.geom = geom;
  n.value = ops::conv2d(value(input), value(kernel), bias ? value(*bias) : Tensor(), geom);
  return push(std::move(n));
}

NodeId Graph::relu(NodeId input) {
  Node n;
  n.kind = OpKind::relu;
  n.inputs = {input};
  n.value = ops::relu(value(input));
  return push(std::move(n));
}

NodeId Graph::maxpool2d(NodeId input, std::size_t window, std::size_t stride) {
  Node n;
  n.kind = OpKind::maxpool2d;
  n.inputs = {input};
  n.window = window;
  n.geom.stride = stride;
  n.value = ops::maxpool2d(value(input), window, stride, &n.argmax);
  return push(std::move(n));
}

NodeId Graph::dense(NodeId input, NodeId weights, std::optional<NodeId> bias) {
  Node n;
  n.kind = OpKind::dense;
  n.inputs = {input, weights};
  if (bias) n.inputs.push_back(*bias);
  n.value = ops::dense(value(input), value(weights), bias ? value(*bias) : Tensor());
  return push(std::move(n));
}

NodeId Graph::batchnorm_frozen(NodeId input, NodeId gamma, NodeId beta, NodeId mean, NodeId var,
                               double epsilon) {
  Node n;
  n.kind = OpKind::batchnorm_frozen;
  n.inputs = {input, gamma, beta, mean, var};
  n.scalar = epsilon;
  n.value = ops::batchnorm_frozen(
      value(input), {value(gamma), value(beta), value(mean), value(var), epsilon});
  return push(std::move(n));
}

NodeId Graph::add(NodeId a, NodeId b) {
  if (value(a).shape() != value(b).shape()) {
    throw ShapeError("add operands " + shape_string(value(a).shape()) + " and " +
                     shape_string(value(b).shape()) + " differ");
  }
  Node n;
  n.kind = OpKind::add;
  n.inputs = {a, b};
  n.value = value(a) + value(b);
  return push(std::move(n));
}

NodeId Graph::flatten(NodeId input) {
  const Tensor& v = value(input);
  Node n;
  n.kind = OpKind::flatten;
  n.inputs = {input};
  n.value = v.reshaped({v.dim(0), v.size() / v.dim(0)});
  return push(std::move(n));
}

NodeId Graph::scale(NodeId input, double factor) {
  Node n;
  n.kind = OpKind::scale;
  n.inputs = {input};
  n.scalar = factor;
  n.value = value(input) * factor;
  return push(std::move(n));
}

void Graph::track(NodeId id) {
  node(id);
  tracked_[id] = true;
}

bool Graph::tracked(NodeId id) const {
  node(id);
  return tracked_[id];
}

const Tensor& Graph::value(NodeId id) const { return node(id).value; }
OpKind Graph::kind(NodeId id) const { return node(id).kind; }
const std::vector<NodeId>& Graph::inputs(NodeId id) const { return node(id).inputs; }

GradientMap Graph::backward(NodeId output, std::size_t class_index) const {
  const Tensor& out = value(output);
  if (out.rank() != 2) {
    throw ShapeError("class-seeded backward needs a [N, C] output, got " + shape_string(out.shape()));
  }
  if (class_index >= out.dim(1)) {
    throw std::out_of_range("seed class " + std::to_string(class_index) + " out of range for " +
                            std::to_string(out.dim(1)) + " classes");
  }
  Tensor seed(out.shape());
  for (std::size_t b = 0; b < out.dim(0); ++b) seed.at(b, class_index) = 1.0;
  return backward(output, seed);
}

GradientMap Graph::backward(NodeId output, const Tensor& seed) const {
  const Node& root = node(output);
  if (seed.shape() != root.value.shape()) {
    throw ShapeError("backward seed " + shape_string(seed.shape()) + " != output " +
                     shape_string(root.value.shape()));
  }
  // needed[i]: node i is tracked or feeds (transitively) from a tracked node.
  std::vector<bool> needed(output + 1, false);
  for (NodeId i = 0; i <= output; ++i) {
    needed[i] = tracked_[i];
    for (NodeId in : nodes_[i].inputs) needed[i] = needed[i] || needed[in];
  }

  std::vector<Tensor> grads(output + 1);
  grads[output] = seed;
  auto accumulate = [&](NodeId id, Tensor g) {
    if (!needed[id]) return;
    if (grads[id].empty()) {
      grads[id] = std::move(g);
    } else {
      grads[id] += g;
    }
  };

  for (NodeId i = output + 1; i-- > 0;) {
    if (grads[i].empty() || !needed[i]) continue;
    const Node& n = nodes_[i];
    const Tensor& g = grads[i];
    switch (n.kind) {
      case OpKind::leaf:
        break;
      case OpKind::conv2d: {
        const bool has_bias = n.inputs.size() == 3;
        auto cg = ops::conv2d_backward(value(n.inputs[0]), value(n.inputs[1]), g, n.geom,
                                       needed[n.inputs[0]], needed[n.inputs[1]],
                                       has_bias && needed[n.inputs[2]]);
        accumulate(n.inputs[0], std::move(cg.input));
        accumulate(n.inputs[1], std::move(cg.kernel));
        if (has_bias) accumulate(n.inputs[2], std::move(cg.bias));
        break;
      }
      case OpKind::relu:
        accumulate(n.inputs[0], ops::relu_backward(value(n.inputs[0]), g));
        break;
      case OpKind::maxpool2d:
        accumulate(n.inputs[0], ops::maxpool2d_backward(value(n.inputs[0]).shape(), n.argmax, g));
        break;
      case OpKind::dense: {
        const bool has_bias = n.inputs.size() == 3;
        auto dg = ops::dense_backward(value(n.inputs[0]), value(n.inputs[1]), g,
                                      needed[n.inputs[0]], needed[n.inputs[1]],
                                      has_bias && needed[n.inputs[2]]);
        accumulate(n.inputs[0], std::move(dg.input));
        accumulate(n.inputs[1], std::move(dg.weights));
        if (has_bias) accumulate(n.inputs[2], std::move(dg.bias));
        break;
      }
      case OpKind::batchnorm_frozen: {
        auto bg = ops::batchnorm_frozen_backward(
            value(n.inputs[0]),
            {value(n.inputs[1]), value(n.inputs[2]), value(n.inputs[3]), value(n.inputs[4]), n.scalar},
            g);
        accumulate(n.inputs[0], std::move(bg.input));
        accumulate(n.inputs[1], std::move(bg.gamma));
        accumulate(n.inputs[2], std::move(bg.beta));
        accumulate(n.inputs[3], std::move(bg.mean));
        accumulate(n.inputs[4], std::move(bg.var));
        break;
      }
      case OpKind::add:
        accumulate(n.inputs[0], g);
        accumulate(n.inputs[1], g);
        break;
      case OpKind::flatten:
        accumulate(n.inputs[0], g.reshaped(value(n.inputs[0]).shape()));
        break;
      case OpKind::scale:
        accumulate(n.inputs[0], g * n.scalar);
        break;
    }
  }

  GradientMap result;
  for (NodeId i = 0; i <= output; ++i) {
    if (!tracked_[i]) continue;
    result.emplace(i, grads[i].empty() ? Tensor(nodes_[i].value.shape()) : std::move(grads[i]));
  }
  return result;
}

}  // namespace saliency
