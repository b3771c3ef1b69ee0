#include "saliency/network.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "saliency/hashing.hpp"
#include "saliency/ops.hpp"

namespace saliency {

using json = nlohmann::json;

std::string to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv: return "conv";
    case LayerKind::dense: return "dense";
    case LayerKind::relu: return "relu";
    case LayerKind::maxpool: return "maxpool";
    case LayerKind::batchnorm_frozen: return "batchnorm_frozen";
    case LayerKind::skip_add: return "skip_add";
    case LayerKind::flatten: return "flatten";
  }
  return "unknown";
}

LayerKind layer_kind_from_string(const std::string& name) {
  for (LayerKind k : {LayerKind::conv, LayerKind::dense, LayerKind::relu, LayerKind::maxpool,
                      LayerKind::batchnorm_frozen, LayerKind::skip_add, LayerKind::flatten}) {
    if (to_string(k) == name) return k;
  }
  throw std::invalid_argument("unknown layer kind '" + name + "'");
}

namespace {

std::string describe(const NetworkSpec& spec, std::size_t i) {
  return "layer " + std::to_string(i) + " (" + to_string(spec.layers[i].kind) + ")";
}

std::string describe_prev(const NetworkSpec& spec, std::size_t i) {
  return i == 0 ? std::string("the input") : describe(spec, i - 1);
}

std::string shape_text(const ActivationShape& s) {
  return shape_string({s.channels, s.height, s.width});
}

bool is_param_layer(LayerKind k) { return k == LayerKind::conv || k == LayerKind::dense; }

}  // namespace

std::vector<ActivationShape> infer_shapes(const NetworkSpec& spec) {
  if (spec.input.size() == 0) throw ShapeError("network input shape has a zero extent");
  std::vector<ActivationShape> shapes;
  std::vector<bool> flat_at;
  ActivationShape cur = spec.input;
  bool flat = false;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    auto fail = [&](const std::string& why) {
      throw ShapeError(describe(spec, i) + " cannot follow " + describe_prev(spec, i) + ": " + why);
    };
    switch (l.kind) {
      case LayerKind::conv: {
        if (flat) fail("conv needs a spatial input");
        if (l.features == 0 || l.kernel == 0 || l.stride == 0) fail("conv features/kernel/stride must be positive");
        const std::size_t ph = cur.height + 2 * l.padding, pw = cur.width + 2 * l.padding;
        if (ph < l.kernel || pw < l.kernel) {
          fail("kernel " + std::to_string(l.kernel) + " exceeds padded input " + shape_text(cur));
        }
        cur = {l.features, (ph - l.kernel) / l.stride + 1, (pw - l.kernel) / l.stride + 1};
        break;
      }
      case LayerKind::dense:
        if (!flat) fail("dense needs a flattened input (insert a flatten layer)");
        if (l.features == 0) fail("dense features must be positive");
        cur = {l.features, 1, 1};
        break;
      case LayerKind::relu:
      case LayerKind::batchnorm_frozen:
        break;
      case LayerKind::maxpool:
        if (flat) fail("maxpool needs a spatial input");
        if (l.window == 0 || l.stride == 0) fail("maxpool window/stride must be positive");
        if (l.window > cur.height || l.window > cur.width) {
          fail("window " + std::to_string(l.window) + " larger than input " + shape_text(cur));
        }
        cur = {cur.channels, (cur.height - l.window) / l.stride + 1,
               (cur.width - l.window) / l.stride + 1};
        break;
      case LayerKind::skip_add: {
        if (l.skip_from < -1 || l.skip_from >= static_cast<int>(i)) {
          fail("skip source " + std::to_string(l.skip_from) + " must precede the skip layer");
        }
        const ActivationShape other =
            l.skip_from < 0 ? spec.input : shapes[static_cast<std::size_t>(l.skip_from)];
        const bool other_flat = l.skip_from < 0 ? false : flat_at[static_cast<std::size_t>(l.skip_from)];
        if (!(other == cur) || other_flat != flat) {
          fail("skip arm shape " + shape_text(other) + " != main arm " + shape_text(cur));
        }
        break;
      }
      case LayerKind::flatten:
        if (flat) fail("input is already flat");
        cur = {cur.size(), 1, 1};
        flat = true;
        break;
    }
    shapes.push_back(cur);
    flat_at.push_back(flat);
  }
  return shapes;
}

void validate(const NetworkSpec& spec) {
  if (spec.layers.empty()) throw ShapeError("network has no layers");
  if (spec.classes == 0) throw ShapeError("network needs at least one class");
  const auto shapes = infer_shapes(spec);
  const LayerSpec& last = spec.layers.back();
  if (last.kind != LayerKind::dense || last.features != spec.classes) {
    throw ShapeError(describe(spec, spec.layers.size() - 1) +
                     " must be a dense head with " + std::to_string(spec.classes) + " outputs");
  }
}

std::vector<Stage> attribution_stages(const NetworkSpec& spec) {
  validate(spec);
  const auto shapes = infer_shapes(spec);
  // A cut after layer p is invalid when a skip connection spans it.
  auto crosses = [&](std::size_t p) {
    for (std::size_t a = 0; a < spec.layers.size(); ++a) {
      if (spec.layers[a].kind != LayerKind::skip_add) continue;
      const long s = spec.layers[a].skip_from;
      if (s < static_cast<long>(p) && p < a) return true;
    }
    return false;
  };
  std::vector<Stage> stages;
  std::size_t start = 0;
  std::optional<std::size_t> first_param;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerKind k = spec.layers[i].kind;
    if (is_param_layer(k) && first_param) {
      std::size_t p = i - 1;
      while (p > *first_param && (spec.layers[p].kind == LayerKind::maxpool ||
                                  spec.layers[p].kind == LayerKind::flatten)) {
        --p;
      }
      if (!crosses(p)) {
        stages.push_back({start, p, shapes[p]});
        start = p + 1;
        first_param.reset();
      }
    }
    if (is_param_layer(k) && !first_param) first_param = i;
  }
  const std::size_t last = spec.layers.size() - 1;
  stages.push_back({start, last, shapes[last]});
  return stages;
}

std::string parameter_name(std::size_t layer, const std::string& role) {
  return "layer" + std::to_string(layer) + "." + role;
}

const Tensor& Checkpoint::param(const std::string& name) const {
  auto it = params.find(name);
  if (it == params.end()) throw std::out_of_range("checkpoint has no parameter '" + name + "'");
  return it->second;
}

Tensor& Checkpoint::param(const std::string& name) {
  auto it = params.find(name);
  if (it == params.end()) throw std::out_of_range("checkpoint has no parameter '" + name + "'");
  return it->second;
}

std::size_t Checkpoint::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : params) n += t.size();
  return n;
}

namespace {

// Expected shape of every parameter, in layer order.
std::vector<std::pair<std::string, Shape>> parameter_layout(const NetworkSpec& spec) {
  const auto shapes = infer_shapes(spec);
  std::vector<std::pair<std::string, Shape>> layout;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    const ActivationShape in = i == 0 ? spec.input : shapes[i - 1];
    switch (l.kind) {
      case LayerKind::conv:
        layout.emplace_back(parameter_name(i, "weight"), Shape{l.features, in.channels, l.kernel, l.kernel});
        if (l.bias) layout.emplace_back(parameter_name(i, "bias"), Shape{l.features});
        break;
      case LayerKind::dense:
        layout.emplace_back(parameter_name(i, "weight"), Shape{l.features, in.size()});
        if (l.bias) layout.emplace_back(parameter_name(i, "bias"), Shape{l.features});
        break;
      case LayerKind::batchnorm_frozen:
        for (const char* role : {"gamma", "beta", "mean", "var"}) {
          layout.emplace_back(parameter_name(i, role), Shape{in.channels});
        }
        break;
      default:
        break;
    }
  }
  return layout;
}

}  // namespace

std::vector<std::string> bias_parameter_names(const Checkpoint& ckpt) {
  std::vector<std::string> names;
  for (std::size_t i = 0; i < ckpt.spec.layers.size(); ++i) {
    const LayerSpec& l = ckpt.spec.layers[i];
    if ((l.kind == LayerKind::conv || l.kind == LayerKind::dense) && l.bias) {
      names.push_back(parameter_name(i, "bias"));
    } else if (l.kind == LayerKind::batchnorm_frozen) {
      names.push_back(parameter_name(i, "beta"));
      names.push_back(parameter_name(i, "mean"));
    }
  }
  return names;
}

std::string spec_to_json(const NetworkSpec& spec) {
  json j;
  j["name"] = spec.name;
  j["input"] = {spec.input.channels, spec.input.height, spec.input.width};
  j["classes"] = spec.classes;
  j["layers"] = json::array();
  for (const LayerSpec& l : spec.layers) {
    json lj;
    lj["kind"] = to_string(l.kind);
    switch (l.kind) {
      case LayerKind::conv:
        lj["features"] = l.features;
        lj["kernel"] = l.kernel;
        lj["stride"] = l.stride;
        lj["padding"] = l.padding;
        lj["bias"] = l.bias;
        break;
      case LayerKind::dense:
        lj["features"] = l.features;
        lj["bias"] = l.bias;
        break;
      case LayerKind::maxpool:
        lj["window"] = l.window;
        lj["stride"] = l.stride;
        break;
      case LayerKind::batchnorm_frozen:
        lj["epsilon"] = l.epsilon;
        break;
      case LayerKind::skip_add:
        lj["from"] = l.skip_from;
        break;
      default:
        break;
    }
    j["layers"].push_back(lj);
  }
  return j.dump();
}

NetworkSpec spec_from_json(const std::string& text) {
  const json j = json::parse(text);
  NetworkSpec spec;
  spec.name = j.value("name", "");
  const auto in = j.at("input");
  spec.input = {in.at(0).get<std::size_t>(), in.at(1).get<std::size_t>(), in.at(2).get<std::size_t>()};
  spec.classes = j.at("classes").get<std::size_t>();
  for (const auto& lj : j.at("layers")) {
    LayerSpec l;
    l.kind = layer_kind_from_string(lj.at("kind").get<std::string>());
    l.features = lj.value("features", std::size_t{0});
    l.kernel = lj.value("kernel", std::size_t{3});
    l.stride = lj.value("stride", std::size_t{1});
    l.padding = lj.value("padding", std::size_t{0});
    l.window = lj.value("window", std::size_t{2});
    l.bias = lj.value("bias", true);
    l.epsilon = lj.value("epsilon", 1e-5);
    l.skip_from = lj.value("from", -1);
    spec.layers.push_back(l);
  }
  return spec;
}

std::string spec_fingerprint(const NetworkSpec& spec) { return sha256_hex(spec_to_json(spec)); }

Checkpoint build_network(const NetworkSpec& spec, std::uint64_t seed) {
  validate(spec);
  Checkpoint ckpt{spec, {}};
  std::mt19937_64 rng(seed);
  for (const auto& [name, shape] : parameter_layout(spec)) {
    Tensor t(shape);
    const std::string role = name.substr(name.find('.') + 1);
    if (role == "weight") {
      const std::size_t fan_in = shape_size(shape) / shape[0];
      std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
      for (double& v : t.data()) v = dist(rng);
    } else if (role == "gamma" || role == "var") {
      t = Tensor(shape, 1.0);
    }
    ckpt.params.emplace(name, std::move(t));
  }
  return ckpt;
}

void check_parameters(const Checkpoint& ckpt) {
  validate(ckpt.spec);
  const auto layout = parameter_layout(ckpt.spec);
  for (const auto& [name, shape] : layout) {
    auto it = ckpt.params.find(name);
    if (it == ckpt.params.end()) throw std::invalid_argument("checkpoint is missing parameter '" + name + "'");
    if (it->second.shape() != shape) {
      throw ShapeError("parameter '" + name + "' has shape " + shape_string(it->second.shape()) +
                       ", expected " + shape_string(shape));
    }
  }
  if (layout.size() != ckpt.params.size()) {
    for (const auto& [name, t] : ckpt.params) {
      bool known = false;
      for (const auto& entry : layout) known = known || entry.first == name;
      if (!known) throw std::invalid_argument("checkpoint parameter '" + name + "' has no layer slot");
    }
  }
}

Tensor as_batch(const Tensor& x, const ActivationShape& input) {
  const Shape chw{input.channels, input.height, input.width};
  if (x.rank() == 4 && Shape(x.shape().begin() + 1, x.shape().end()) == chw) return x;
  if (x.rank() == 3 && x.shape() == chw) return x.reshaped({1, input.channels, input.height, input.width});
  if (x.rank() == 1 && x.size() == input.size()) {
    return x.reshaped({1, input.channels, input.height, input.width});
  }
  if (x.rank() == 2 && x.dim(1) == input.size()) {
    return x.reshaped({x.dim(0), input.channels, input.height, input.width});
  }
  throw ShapeError("input " + shape_string(x.shape()) + " does not match network input " +
                   shape_string(chw));
}

namespace {

ops::BatchNormParams bn_params(const Checkpoint& ckpt, std::size_t i) {
  return {ckpt.param(parameter_name(i, "gamma")), ckpt.param(parameter_name(i, "beta")),
          ckpt.param(parameter_name(i, "mean")), ckpt.param(parameter_name(i, "var")),
          ckpt.spec.layers[i].epsilon};
}

Tensor optional_bias(const Checkpoint& ckpt, std::size_t i) {
  return ckpt.spec.layers[i].bias ? ckpt.param(parameter_name(i, "bias")) : Tensor();
}

}  // namespace

std::vector<Tensor> forward_activations(const Checkpoint& ckpt, const Tensor& x) {
  const Tensor input = as_batch(x, ckpt.spec.input);
  std::vector<Tensor> outs;
  outs.reserve(ckpt.spec.layers.size());
  for (std::size_t i = 0; i < ckpt.spec.layers.size(); ++i) {
    const LayerSpec& l = ckpt.spec.layers[i];
    const Tensor& cur = i == 0 ? input : outs.back();
    switch (l.kind) {
      case LayerKind::conv:
        outs.push_back(ops::conv2d(cur, ckpt.param(parameter_name(i, "weight")), optional_bias(ckpt, i),
                                   {l.stride, l.padding}));
        break;
      case LayerKind::dense:
        outs.push_back(ops::dense(cur, ckpt.param(parameter_name(i, "weight")), optional_bias(ckpt, i)));
        break;
      case LayerKind::relu:
        outs.push_back(ops::relu(cur));
        break;
      case LayerKind::maxpool:
        outs.push_back(ops::maxpool2d(cur, l.window, l.stride));
        break;
      case LayerKind::batchnorm_frozen:
        outs.push_back(ops::batchnorm_frozen(cur, bn_params(ckpt, i)));
        break;
      case LayerKind::skip_add: {
        const Tensor& other = l.skip_from < 0 ? input : outs[static_cast<std::size_t>(l.skip_from)];
        outs.push_back(cur + other);
        break;
      }
      case LayerKind::flatten:
        outs.push_back(cur.reshaped({cur.dim(0), cur.size() / cur.dim(0)}));
        break;
    }
  }
  return outs;
}

Tensor forward_logits(const Checkpoint& ckpt, const Tensor& x) {
  return forward_activations(ckpt, x).back();
}

TapedForward forward_taped(const Checkpoint& ckpt, const Tensor& x, bool track_params) {
  const auto stages = attribution_stages(ckpt.spec);
  TapedForward tf;
  Graph& g = tf.graph;
  tf.input = g.leaf(as_batch(x, ckpt.spec.input));
  g.track(tf.input);

  std::vector<std::size_t> stage_of(ckpt.spec.layers.size());
  for (std::size_t s = 0; s < stages.size(); ++s) {
    for (std::size_t i = stages[s].first_layer; i <= stages[s].activity_layer; ++i) stage_of[i] = s + 1;
  }
  auto param = [&](std::size_t i, const char* role) {
    const std::string name = parameter_name(i, role);
    const NodeId id = g.leaf(ckpt.param(name));
    if (track_params) g.track(id);
    tf.param_nodes.emplace(name, id);
    return id;
  };

  NodeId cur = tf.input;
  for (std::size_t i = 0; i < ckpt.spec.layers.size(); ++i) {
    const LayerSpec& l = ckpt.spec.layers[i];
    switch (l.kind) {
      case LayerKind::conv: {
        const NodeId w = param(i, "weight");
        std::optional<NodeId> b;
        if (l.bias) b = param(i, "bias");
        cur = g.conv2d(cur, w, b, {l.stride, l.padding});
        if (l.bias) tf.bias_sites.push_back({stage_of[i], cur, ckpt.param(parameter_name(i, "bias"))});
        break;
      }
      case LayerKind::dense: {
        if (g.value(cur).rank() != 2) cur = g.flatten(cur);
        const NodeId w = param(i, "weight");
        std::optional<NodeId> b;
        if (l.bias) b = param(i, "bias");
        cur = g.dense(cur, w, b);
        if (l.bias) tf.bias_sites.push_back({stage_of[i], cur, ckpt.param(parameter_name(i, "bias"))});
        break;
      }
      case LayerKind::relu:
        cur = g.relu(cur);
        break;
      case LayerKind::maxpool:
        cur = g.maxpool2d(cur, l.window, l.stride);
        break;
      case LayerKind::batchnorm_frozen: {
        const NodeId gamma = param(i, "gamma"), beta = param(i, "beta"), mean = param(i, "mean"),
                     var = param(i, "var");
        cur = g.batchnorm_frozen(cur, gamma, beta, mean, var, l.epsilon);
        tf.bias_sites.push_back({stage_of[i], cur, ops::batchnorm_effective_bias(bn_params(ckpt, i))});
        break;
      }
      case LayerKind::skip_add:
        cur = g.add(cur, l.skip_from < 0 ? tf.input : tf.layer_outputs[static_cast<std::size_t>(l.skip_from)]);
        break;
      case LayerKind::flatten:
        cur = g.flatten(cur);
        break;
    }
    tf.layer_outputs.push_back(cur);
  }
  tf.logits = cur;
  for (const Stage& s : stages) {
    tf.activities.push_back(tf.layer_outputs[s.activity_layer]);
    g.track(tf.activities.back());
  }
  for (const BiasSite& site : tf.bias_sites) g.track(site.node);
  return tf;
}

NetworkSpec linear_classifier_spec(ActivationShape input, std::size_t classes, bool bias) {
  NetworkSpec spec{"linear", input, classes, {}};
  spec.layers.push_back({.kind = LayerKind::flatten});
  spec.layers.push_back({.kind = LayerKind::dense, .features = classes, .bias = bias});
  return spec;
}

NetworkSpec mlp_spec(std::size_t inputs, const std::vector<std::size_t>& hidden, std::size_t classes,
                     bool bias) {
  NetworkSpec spec{"mlp", {inputs, 1, 1}, classes, {}};
  spec.layers.push_back({.kind = LayerKind::flatten});
  for (std::size_t units : hidden) {
    spec.layers.push_back({.kind = LayerKind::dense, .features = units, .bias = bias});
    spec.layers.push_back({.kind = LayerKind::relu});
  }
  spec.layers.push_back({.kind = LayerKind::dense, .features = classes, .bias = bias});
  return spec;
}

NetworkSpec vgg_mini_spec(ActivationShape input, std::size_t classes,
                          const std::vector<std::size_t>& channels, bool bias, bool batchnorm) {
  NetworkSpec spec{"vgg-mini", input, classes, {}};
  for (std::size_t c : channels) {
    spec.layers.push_back({.kind = LayerKind::conv, .features = c, .kernel = 3, .stride = 1,
                           .padding = 1, .bias = bias});
    if (batchnorm) spec.layers.push_back({.kind = LayerKind::batchnorm_frozen});
    spec.layers.push_back({.kind = LayerKind::relu});
    spec.layers.push_back({.kind = LayerKind::maxpool, .stride = 2, .window = 2});
  }
  spec.layers.push_back({.kind = LayerKind::flatten});
  spec.layers.push_back({.kind = LayerKind::dense, .features = classes, .bias = bias});
  return spec;
}

NetworkSpec resnet_mini_spec(ActivationShape input, std::size_t classes,
                             const std::vector<std::size_t>& channels, bool bias) {
  NetworkSpec spec{"resnet-mini", input, classes, {}};
  auto conv_bn = [&](std::size_t c, std::size_t stride, bool relu) {
    spec.layers.push_back({.kind = LayerKind::conv, .features = c, .kernel = 3, .stride = stride,
                           .padding = 1, .bias = bias});
    spec.layers.push_back({.kind = LayerKind::batchnorm_frozen});
    if (relu) spec.layers.push_back({.kind = LayerKind::relu});
  };
  for (std::size_t s = 0; s < channels.size(); ++s) {
    conv_bn(channels[s], s == 0 ? 1 : 2, true);
    const int block_in = static_cast<int>(spec.layers.size()) - 1;
    conv_bn(channels[s], 1, true);
    conv_bn(channels[s], 1, false);
    spec.layers.push_back({.kind = LayerKind::skip_add, .skip_from = block_in});
    spec.layers.push_back({.kind = LayerKind::relu});
  }
  spec.layers.push_back({.kind = LayerKind::flatten});
  spec.layers.push_back({.kind = LayerKind::dense, .features = classes, .bias = bias});
  return spec;
}

}  // namespace saliency
