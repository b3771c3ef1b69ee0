#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "saliency/graph.hpp"
#include "saliency/tensor.hpp"

namespace saliency {

enum class LayerKind { conv, dense, relu, maxpool, batchnorm_frozen, skip_add, flatten };

std::string to_string(LayerKind kind);
LayerKind layer_kind_from_string(const std::string& name);

/// One entry of a sequential architecture. Fields irrelevant to `kind` are ignored.
struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  std::size_t features = 0;  // conv output channels / dense units
  std::size_t kernel = 3;
  std::size_t stride = 1;    // conv and maxpool
  std::size_t padding = 0;
  std::size_t window = 2;    // maxpool
  bool bias = true;          // conv and dense
  double epsilon = 1e-5;     // batchnorm
  /// skip_add: index of the layer whose output is added (-1 = network input).
  int skip_from = -1;

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

/// Activation shape of a single sample: channels x height x width.
/// Dense outputs are represented as features x 1 x 1.
struct ActivationShape {
  std::size_t channels = 1;
  std::size_t height = 1;
  std::size_t width = 1;

  std::size_t size() const { return channels * height * width; }
  friend bool operator==(const ActivationShape&, const ActivationShape&) = default;
};

struct NetworkSpec {
  std::string name;
  ActivationShape input;
  std::size_t classes = 0;
  std::vector<LayerSpec> layers;

  friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;
};

/// A contiguous run of layers owning one attribution index.
///
/// Stage l (1-based) starts after the activity of stage l-1 and ends with the
/// layer whose output is the hidden activity h^l. Stages never cut across an
/// open skip connection, so every stage output fully determines the logits.
struct Stage {
  std::size_t first_layer = 0;
  std::size_t activity_layer = 0;
  ActivationShape activity;
};

/// Output shape of every layer. Throws ShapeError naming the first offending layer pair.
std::vector<ActivationShape> infer_shapes(const NetworkSpec& spec);

/// Attribution stages of a well-formed spec. stages.size() is the depth L.
std::vector<Stage> attribution_stages(const NetworkSpec& spec);

/// Validate composition, head shape and skip indices.
void validate(const NetworkSpec& spec);

std::string parameter_name(std::size_t layer, const std::string& role);

/// Spec plus named parameters ("layer<i>.weight", "layer<i>.bias",
/// "layer<i>.gamma", "layer<i>.beta", "layer<i>.mean", "layer<i>.var").
struct Checkpoint {
  NetworkSpec spec;
  std::map<std::string, Tensor> params;

  const Tensor& param(const std::string& name) const;
  Tensor& param(const std::string& name);
  bool has(const std::string& name) const { return params.count(name) != 0; }
  std::size_t parameter_count() const;

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

/// Names of the bias-role parameters: conv/dense biases, batchnorm beta and mean.
std::vector<std::string> bias_parameter_names(const Checkpoint& ckpt);

/// Canonical JSON text of a spec, and its inverse.
std::string spec_to_json(const NetworkSpec& spec);
NetworkSpec spec_from_json(const std::string& text);

/// Stable hex fingerprint of the spec (sha256 of its canonical JSON).
std::string spec_fingerprint(const NetworkSpec& spec);

/// He-initialised weights, zero biases, identity batchnorm. Deterministic in `seed`.
Checkpoint build_network(const NetworkSpec& spec, std::uint64_t seed);

/// Throws if a parameter is missing or has the wrong shape.
void check_parameters(const Checkpoint& ckpt);

/// Single-image input in CHW layout as a [1, C, H, W] tensor, or a batch.
Tensor as_batch(const Tensor& x, const ActivationShape& input);

/// Plain evaluation without a tape. Returns [N, classes].
Tensor forward_logits(const Checkpoint& ckpt, const Tensor& x);

/// Location where a bias-role term enters the computation.
struct BiasSite {
  std::size_t stage = 0;   // 1-based attribution index
  NodeId node = 0;         // node whose value includes the bias term
  Tensor bias;             // per-channel effective bias added at `node`
};

/// Taped forward pass with handles to every quantity attribution needs.
struct TapedForward {
  Graph graph;
  NodeId input = 0;
  NodeId logits = 0;
  std::vector<NodeId> layer_outputs;
  std::vector<NodeId> activities;  // index l-1 holds h^l
  std::vector<BiasSite> bias_sites;
  std::map<std::string, NodeId> param_nodes;
};

/// Builds the tape for `x`; tracks input, activities and bias sites, plus all
/// parameter nodes when `track_params` is set.
TapedForward forward_taped(const Checkpoint& ckpt, const Tensor& x, bool track_params = false);

/// Per-layer activations of a plain forward pass (index i = output of layer i).
std::vector<Tensor> forward_activations(const Checkpoint& ckpt, const Tensor& x);

// Reference architectures.
NetworkSpec linear_classifier_spec(ActivationShape input, std::size_t classes, bool bias);
NetworkSpec mlp_spec(std::size_t inputs, const std::vector<std::size_t>& hidden,
                     std::size_t classes, bool bias);
/// conv-relu-maxpool stages followed by a dense head.
NetworkSpec vgg_mini_spec(ActivationShape input, std::size_t classes,
                          const std::vector<std::size_t>& channels, bool bias,
                          bool batchnorm = false);
/// Stem conv, then residual blocks separated by stride-2 downsampling convs,
/// all with frozen batchnorm, followed by a dense head.
NetworkSpec resnet_mini_spec(ActivationShape input, std::size_t classes,
                             const std::vector<std::size_t>& channels, bool bias);

}  // namespace saliency
