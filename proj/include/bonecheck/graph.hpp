#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "bonecheck/error.hpp"
#include "bonecheck/tensor.hpp"

namespace bonecheck {

enum class LayerKind {
  input,
  conv,
  depthwise_separable,
  relu,
  concat,
  add,
  avg_pool,
  max_pool,
  global_avg_pool,
  affine,
  sigmoid,
  average,
};

inline std::string_view to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::input: return "input";
    case LayerKind::conv: return "conv";
    case LayerKind::depthwise_separable: return "depthwise_separable";
    case LayerKind::relu: return "relu";
    case LayerKind::concat: return "concat";
    case LayerKind::add: return "add";
    case LayerKind::avg_pool: return "avg_pool";
    case LayerKind::max_pool: return "max_pool";
    case LayerKind::global_avg_pool: return "global_avg_pool";
    case LayerKind::affine: return "affine";
    case LayerKind::sigmoid: return "sigmoid";
    case LayerKind::average: return "average";
  }
  return "?";
}

inline LayerKind layer_kind_from_string(std::string_view s) {
  for (int k = 0; k <= static_cast<int>(LayerKind::average); ++k) {
    if (to_string(static_cast<LayerKind>(k)) == s) return static_cast<LayerKind>(k);
  }
  throw FormatError("unknown layer kind '" + std::string(s) + "'");
}

/// One node of a model graph. `output_shape` is per sample, without the batch axis.
struct LayerSpec {
  LayerKind kind = LayerKind::input;
  std::string name;
  std::vector<std::string> inputs;
  std::size_t width = 0;  // output channels for conv/separable/affine
  std::size_t kernel = 0;
  std::size_t stride = 1;
  std::size_t padding = 0;
  Shape output_shape;

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

struct ParamSpec {
  std::string name;
  Shape shape;
  std::size_t fan_in = 0;  // 0 marks a bias (zero-initialized)
};

enum class ModelKind { single, ensemble };

/// Where one ensemble member lives inside the composite graph.
struct MemberInfo {
  std::string name;
  std::string logit_layer;
  std::string target_layer;
  std::string output_layer;
};

/// Immutable layer DAG with shape-checked wiring.
///
/// Layers are stored in topological order and there is exactly one output.
/// A single model ends in sigmoid(affine(...)); an ensemble ends in an
/// average node over its members' sigmoid outputs.
class ModelGraph {
 public:
  const std::string& name() const { return name_; }
  ModelKind kind() const { return kind_; }
  const Shape& input_shape() const { return input_shape_; }
  const std::vector<LayerSpec>& layers() const { return layers_; }
  const std::vector<ParamSpec>& params() const { return params_; }
  const std::vector<MemberInfo>& members() const { return members_; }
  const std::string& output() const { return output_; }
  /// Architecture identifier of a zoo model ("custom" for hand-built graphs).
  const std::string& arch() const { return arch_; }

  const LayerSpec& layer(std::string_view name) const {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) throw InvalidArgument("unknown layer '" + std::string(name) + "'");
    return layers_[it->second];
  }

  bool has_layer(std::string_view name) const { return index_.count(std::string(name)) > 0; }

  std::size_t param_index(std::string_view name) const {
    for (std::size_t i = 0; i < params_.size(); ++i)
      if (params_[i].name == name) return i;
    throw InvalidArgument("unknown parameter '" + std::string(name) + "'");
  }

  bool has_head() const {
    return std::any_of(layers_.begin(), layers_.end(), [](const LayerSpec& l) {
      return l.kind == LayerKind::affine || l.kind == LayerKind::sigmoid || l.kind == LayerKind::global_avg_pool;
    });
  }

  /// Pre-sigmoid logit layer of a single model.
  const std::string& logit_layer() const {
    if (kind_ != ModelKind::single || members_.empty()) throw InvalidArgument("model '" + name_ + "' has no head");
    return members_.front().logit_layer;
  }

  /// Last 4-D activation feeding the head; the default Grad-CAM layer.
  const std::string& default_target_layer() const {
    if (kind_ != ModelKind::single || members_.empty()) throw InvalidArgument("model '" + name_ + "' has no head");
    return members_.front().target_layer;
  }

 private:
  friend class GraphBuilder;

  std::string name_;
  std::string arch_ = "custom";
  ModelKind kind_ = ModelKind::single;
  Shape input_shape_;
  std::vector<LayerSpec> layers_;
  std::vector<ParamSpec> params_;
  std::vector<MemberInfo> members_;
  std::string output_;
  std::map<std::string, std::size_t> index_;
};

using GraphPtr = std::shared_ptr<const ModelGraph>;

/// Builds a ModelGraph layer by layer, inferring and checking shapes.
class GraphBuilder {
 public:
  GraphBuilder(std::string name, Shape input_shape) {
    graph_.name_ = std::move(name);
    if (input_shape.size() != 3) throw ShapeError("model input shape must be (C,H,W), got " + shape_string(input_shape));
    for (std::size_t d : input_shape)
      if (d == 0) throw ShapeError("model input shape has a zero dimension: " + shape_string(input_shape));
    graph_.input_shape_ = input_shape;
    LayerSpec in;
    in.kind = LayerKind::input;
    in.name = "input";
    in.output_shape = std::move(input_shape);
    push(std::move(in));
  }

  /// Starts from an existing graph (copying its layers and parameters).
  explicit GraphBuilder(const ModelGraph& base) : graph_(base) {}

  const std::string& input() const { return graph_.layers_.front().name; }
  const Shape& shape_of(const std::string& layer) const { return graph_.layer(layer).output_shape; }

  std::string conv(const std::string& name, const std::string& in, std::size_t width, std::size_t kernel,
                   std::size_t stride = 1, std::size_t padding = 0) {
    const Shape& s = spatial(in, "conv");
    LayerSpec l = make(LayerKind::conv, name, {in});
    l.width = width;
    l.kernel = kernel;
    l.stride = stride;
    l.padding = padding;
    l.output_shape = {width, out_dim(name, "height", s[1], kernel, stride, padding),
                      out_dim(name, "width", s[2], kernel, stride, padding)};
    positive_width(name, width);
    add_param(name + "/kernel", {width, s[0], kernel, kernel}, s[0] * kernel * kernel);
    add_param(name + "/bias", {width}, 0);
    return push(std::move(l));
  }

  std::string separable(const std::string& name, const std::string& in, std::size_t width, std::size_t kernel,
                        std::size_t stride = 1, std::size_t padding = 0) {
    const Shape& s = spatial(in, "depthwise_separable");
    LayerSpec l = make(LayerKind::depthwise_separable, name, {in});
    l.width = width;
    l.kernel = kernel;
    l.stride = stride;
    l.padding = padding;
    l.output_shape = {width, out_dim(name, "height", s[1], kernel, stride, padding),
                      out_dim(name, "width", s[2], kernel, stride, padding)};
    positive_width(name, width);
    add_param(name + "/depthwise_kernel", {s[0], 1, kernel, kernel}, kernel * kernel);
    add_param(name + "/depthwise_bias", {s[0]}, 0);
    add_param(name + "/pointwise_kernel", {width, s[0], 1, 1}, s[0]);
    add_param(name + "/pointwise_bias", {width}, 0);
    return push(std::move(l));
  }

  std::string relu(const std::string& name, const std::string& in) {
    LayerSpec l = make(LayerKind::relu, name, {in});
    l.output_shape = shape_of(in);
    return push(std::move(l));
  }

  std::string avg_pool(const std::string& name, const std::string& in, std::size_t kernel, std::size_t stride,
                       std::size_t padding = 0) {
    return pool(LayerKind::avg_pool, name, in, kernel, stride, padding);
  }

  std::string max_pool(const std::string& name, const std::string& in, std::size_t kernel, std::size_t stride,
                       std::size_t padding = 0) {
    if (padding >= kernel) throw ShapeError("layer '" + name + "': max_pool padding must be smaller than the kernel");
    return pool(LayerKind::max_pool, name, in, kernel, stride, padding);
  }

  std::string concat(const std::string& name, const std::vector<std::string>& ins) {
    if (ins.empty()) throw ShapeError("layer '" + name + "': concat needs at least one input");
    LayerSpec l = make(LayerKind::concat, name, ins);
    Shape out = spatial(ins.front(), "concat");
    out[0] = 0;
    for (const auto& in : ins) {
      const Shape& s = spatial(in, "concat");
      if (s[1] != out[1] || s[2] != out[2]) {
        throw ShapeError("layer '" + name + "': concat input '" + in + "' has spatial size " + shape_string(s) +
                         ", expected height " + std::to_string(out[1]) + " and width " + std::to_string(out[2]));
      }
      out[0] += s[0];
    }
    l.output_shape = out;
    return push(std::move(l));
  }

  std::string add(const std::string& name, const std::string& a, const std::string& b) {
    if (shape_of(a) != shape_of(b)) {
      throw ShapeError("layer '" + name + "': branch shapes differ at merge, '" + a + "' " + shape_string(shape_of(a)) +
                       " vs '" + b + "' " + shape_string(shape_of(b)));
    }
    LayerSpec l = make(LayerKind::add, name, {a, b});
    l.output_shape = shape_of(a);
    return push(std::move(l));
  }

  std::string global_avg_pool(const std::string& name, const std::string& in) {
    const Shape& s = spatial(in, "global_avg_pool");
    LayerSpec l = make(LayerKind::global_avg_pool, name, {in});
    l.output_shape = {s[0]};
    return push(std::move(l));
  }

  std::string affine(const std::string& name, const std::string& in, std::size_t width) {
    const Shape& s = shape_of(in);
    if (s.size() != 1) throw ShapeError("layer '" + name + "': affine input must be flat, got " + shape_string(s));
    positive_width(name, width);
    LayerSpec l = make(LayerKind::affine, name, {in});
    l.width = width;
    l.output_shape = {width};
    add_param(name + "/weight", {s[0], width}, s[0]);
    add_param(name + "/bias", {width}, 0);
    return push(std::move(l));
  }

  std::string sigmoid(const std::string& name, const std::string& in) {
    LayerSpec l = make(LayerKind::sigmoid, name, {in});
    l.output_shape = shape_of(in);
    return push(std::move(l));
  }

  std::string average(const std::string& name, const std::vector<std::string>& ins) {
    if (ins.empty()) throw ShapeError("layer '" + name + "': average needs at least one input");
    for (const auto& in : ins) {
      if (shape_of(in) != Shape{1}) {
        throw ShapeError("layer '" + name + "': average input '" + in + "' must have shape (N,1), got " +
                         shape_string(shape_of(in)));
      }
    }
    LayerSpec l = make(LayerKind::average, name, ins);
    l.output_shape = {1};
    return push(std::move(l));
  }

  /// Re-adds a layer described by a spec (used when copying or loading graphs).
  std::string replay(const LayerSpec& spec) {
    switch (spec.kind) {
      case LayerKind::input: throw FormatError("input layer cannot be replayed");
      case LayerKind::conv: return conv(spec.name, one(spec), spec.width, spec.kernel, spec.stride, spec.padding);
      case LayerKind::depthwise_separable:
        return separable(spec.name, one(spec), spec.width, spec.kernel, spec.stride, spec.padding);
      case LayerKind::relu: return relu(spec.name, one(spec));
      case LayerKind::concat: return concat(spec.name, spec.inputs);
      case LayerKind::add:
        if (spec.inputs.size() != 2) throw FormatError("add layer '" + spec.name + "' needs two inputs");
        return add(spec.name, spec.inputs[0], spec.inputs[1]);
      case LayerKind::avg_pool: return avg_pool(spec.name, one(spec), spec.kernel, spec.stride, spec.padding);
      case LayerKind::max_pool: return max_pool(spec.name, one(spec), spec.kernel, spec.stride, spec.padding);
      case LayerKind::global_avg_pool: return global_avg_pool(spec.name, one(spec));
      case LayerKind::affine: return affine(spec.name, one(spec), spec.width);
      case LayerKind::sigmoid: return sigmoid(spec.name, one(spec));
      case LayerKind::average: return average(spec.name, spec.inputs);
    }
    throw FormatError("unhandled layer kind");
  }

  void set_arch(std::string arch) { graph_.arch_ = std::move(arch); }
  void add_member(MemberInfo member) { graph_.members_.push_back(std::move(member)); }
  void set_kind(ModelKind kind) { graph_.kind_ = kind; }

  /// Seals the graph with `output` as its single output node.
  GraphPtr finish(const std::string& output) {
    if (!graph_.has_layer(output)) throw InvalidArgument("unknown output layer '" + output + "'");
    graph_.output_ = output;
    return std::make_shared<const ModelGraph>(graph_);
  }

 private:
  LayerSpec make(LayerKind kind, const std::string& name, std::vector<std::string> ins) const {
    if (name.empty()) throw InvalidArgument("layer name must not be empty");
    if (graph_.has_layer(name)) throw InvalidArgument("duplicate layer name '" + name + "'");
    for (const auto& in : ins)
      if (!graph_.has_layer(in)) throw InvalidArgument("layer '" + name + "' reads unknown layer '" + in + "'");
    LayerSpec l;
    l.kind = kind;
    l.name = name;
    l.inputs = std::move(ins);
    return l;
  }

  static const std::string& one(const LayerSpec& spec) {
    if (spec.inputs.size() != 1) throw FormatError("layer '" + spec.name + "' needs exactly one input");
    return spec.inputs.front();
  }

  const Shape& spatial(const std::string& in, const char* op) const {
    const Shape& s = shape_of(in);
    if (s.size() != 3) {
      throw ShapeError(std::string(op) + " needs a (C,H,W) activation, but '" + in + "' has shape " + shape_string(s));
    }
    return s;
  }

  static std::size_t out_dim(const std::string& name, const char* axis, std::size_t in, std::size_t k,
                             std::size_t stride, std::size_t pad) {
    if (k == 0 || stride == 0) throw ShapeError("layer '" + name + "': kernel and stride must be positive");
    if (k > in + 2 * pad) {
      throw ShapeError("layer '" + name + "': spatial " + axis + " " + std::to_string(in) +
                       " is too small for kernel " + std::to_string(k) + " (padding " + std::to_string(pad) + ")");
    }
    return (in + 2 * pad - k) / stride + 1;
  }

  static void positive_width(const std::string& name, std::size_t width) {
    if (width == 0) throw ShapeError("layer '" + name + "': width must be positive");
  }

  std::string pool(LayerKind kind, const std::string& name, const std::string& in, std::size_t kernel,
                   std::size_t stride, std::size_t padding) {
    const Shape& s = spatial(in, to_string(kind).data());
    LayerSpec l = make(kind, name, {in});
    l.kernel = kernel;
    l.stride = stride;
    l.padding = padding;
    l.output_shape = {s[0], out_dim(name, "height", s[1], kernel, stride, padding),
                      out_dim(name, "width", s[2], kernel, stride, padding)};
    return push(std::move(l));
  }

  void add_param(std::string name, Shape shape, std::size_t fan_in) {
    graph_.params_.push_back(ParamSpec{std::move(name), std::move(shape), fan_in});
  }

  std::string push(LayerSpec l) {
    graph_.index_[l.name] = graph_.layers_.size();
    graph_.layers_.push_back(std::move(l));
    return graph_.layers_.back().name;
  }

  ModelGraph graph_;
};

/// Sum of parameter element counts. Averaging nodes contribute nothing.
inline std::size_t count_parameters(const ModelGraph& graph) {
  std::size_t total = 0;
  for (const auto& p : graph.params()) total += shape_size(p.shape);
  return total;
}

}  // namespace bonecheck
