#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "bonecheck/error.hpp"
#include "bonecheck/graph.hpp"
#include "bonecheck/ops.hpp"
#include "bonecheck/rng.hpp"
#include "bonecheck/tape.hpp"
#include "bonecheck/tensor.hpp"

namespace bonecheck {

/// A graph plus parameter values, stored in graph parameter order.
///
/// The graph is shared and immutable; training mutates parameter values only.
template <typename T = float>
class Model {
 public:
  Model() = default;
  Model(GraphPtr graph, std::vector<Tensor<T>> params) : graph_(std::move(graph)), params_(std::move(params)) {
    if (!graph_) throw InvalidArgument("model needs a graph");
    const auto& specs = graph_->params();
    if (specs.size() != params_.size()) {
      throw ShapeError("model '" + graph_->name() + "' expects " + std::to_string(specs.size()) +
                       " parameter tensors, got " + std::to_string(params_.size()));
    }
    for (std::size_t i = 0; i < specs.size(); ++i) {
      if (specs[i].shape != params_[i].shape()) {
        throw ShapeError("parameter '" + specs[i].name + "' has shape " + shape_string(params_[i].shape()) +
                         ", graph expects " + shape_string(specs[i].shape));
      }
    }
  }

  const ModelGraph& graph() const { return *graph_; }
  const GraphPtr& graph_ptr() const { return graph_; }
  const std::string& name() const { return graph_->name(); }

  std::vector<Tensor<T>>& params() { return params_; }
  const std::vector<Tensor<T>>& params() const { return params_; }

  Tensor<T>& param(std::string_view name) { return params_[graph_->param_index(name)]; }
  const Tensor<T>& param(std::string_view name) const { return params_[graph_->param_index(name)]; }

  template <typename U>
  Model<U> cast() const {
    std::vector<Tensor<U>> out;
    out.reserve(params_.size());
    for (const auto& p : params_) out.push_back(p.template cast<U>());
    return Model<U>(graph_, std::move(out));
  }

 private:
  GraphPtr graph_;
  std::vector<Tensor<T>> params_;
};

/// He-style fan-in uniform initialization U(-sqrt(6/fan_in), +sqrt(6/fan_in))
/// for weights; zero biases. Each tensor draws from its own stream derived
/// from (seed, parameter name).
template <typename T>
Tensor<T> init_parameter(const ParamSpec& spec, std::uint64_t seed) {
  Tensor<T> t(spec.shape);
  if (spec.fan_in == 0) return t;
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : spec.name) h = (h ^ c) * 1099511628211ull;
  Rng rng(derive_seed(seed, h));
  const double bound = std::sqrt(6.0 / static_cast<double>(spec.fan_in));
  for (auto& v : t.values()) v = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

template <typename T = float>
Model<T> initialize(GraphPtr graph, std::uint64_t seed) {
  std::vector<Tensor<T>> params;
  params.reserve(graph->params().size());
  for (const auto& spec : graph->params()) params.push_back(init_parameter<T>(spec, seed));
  return Model<T>(std::move(graph), std::move(params));
}

/// Tape handles produced by one forward pass.
template <typename T>
struct ForwardPass {
  Var<T> output;
  std::vector<Var<T>> params;
  std::map<std::string, Var<T>, std::less<>> activations;

  const Var<T>& at(std::string_view layer) const {
    auto it = activations.find(layer);
    if (it == activations.end()) throw InvalidArgument("unknown layer '" + std::string(layer) + "'");
    return it->second;
  }
};

/// Runs the graph on a batch (N,C,H,W). Parameters become tape leaves that
/// require gradients when `track_params` is set.
template <typename T>
ForwardPass<T> forward(Tape<T>& tape, const Model<T>& model, const Var<T>& input, bool track_params) {
  const ModelGraph& g = model.graph();
  const Shape& xs = input.shape();
  if (xs.size() != 4 || Shape(xs.begin() + 1, xs.end()) != g.input_shape()) {
    throw ShapeError("model '" + g.name() + "' expects input (N," + shape_string(g.input_shape()).substr(1) +
                     ", got " + shape_string(xs));
  }

  ForwardPass<T> pass;
  pass.params.reserve(model.params().size());
  for (const auto& p : model.params()) pass.params.push_back(track_params ? tape.parameter(p) : tape.constant(p));

  std::size_t next_param = 0;
  auto take = [&]() -> const Var<T>& { return pass.params.at(next_param++); };

  for (const LayerSpec& layer : g.layers()) {
    auto in = [&](std::size_t i) -> const Var<T>& { return pass.at(layer.inputs.at(i)); };
    Var<T> out;
    switch (layer.kind) {
      case LayerKind::input: out = input; break;
      case LayerKind::conv: {
        const auto& k = take();
        const auto& b = take();
        out = conv2d(in(0), k, b, layer.stride, layer.padding);
        break;
      }
      case LayerKind::depthwise_separable: {
        const auto& dk = take();
        const auto& db = take();
        const auto& pk = take();
        const auto& pb = take();
        out = depthwise_separable_conv2d(in(0), dk, db, pk, pb, layer.stride, layer.padding);
        break;
      }
      case LayerKind::relu: out = relu(in(0)); break;
      case LayerKind::concat: {
        std::vector<Var<T>> parts;
        for (std::size_t i = 0; i < layer.inputs.size(); ++i) parts.push_back(in(i));
        out = concat_channels(parts);
        break;
      }
      case LayerKind::add: out = add(in(0), in(1)); break;
      case LayerKind::avg_pool: out = avg_pool2d(in(0), layer.kernel, layer.stride, layer.padding); break;
      case LayerKind::max_pool: out = max_pool2d(in(0), layer.kernel, layer.stride, layer.padding); break;
      case LayerKind::global_avg_pool: out = global_average_pool(in(0)); break;
      case LayerKind::affine: {
        const auto& w = take();
        const auto& b = take();
        out = bonecheck::affine(in(0), w, b);
        break;
      }
      case LayerKind::sigmoid: out = sigmoid(in(0)); break;
      case LayerKind::average: {
        std::vector<Var<T>> parts;
        for (std::size_t i = 0; i < layer.inputs.size(); ++i) parts.push_back(in(i));
        out = bonecheck::average(parts);
        break;
      }
    }
    pass.activations.emplace(layer.name, out);
  }
  pass.output = pass.at(g.output());
  return pass;
}

/// Inference without gradient tracking. Returns the (N,1) output probabilities.
template <typename T>
Tensor<T> predict(const Model<T>& model, const Tensor<T>& batch) {
  Tape<T> tape;
  auto pass = forward(tape, model, tape.constant(batch), false);
  return pass.output.value();
}

}  // namespace bonecheck
