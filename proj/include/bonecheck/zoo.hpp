#pragma once

// Micro CNN architectures. Each keeps the defining motif of a larger family
// (dense concatenation, depthwise-separable stacks, two-branch cells,
// separable residual blocks) at a size that trains on one CPU core.

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "bonecheck/error.hpp"
#include "bonecheck/graph.hpp"
#include "bonecheck/model.hpp"

namespace bonecheck {

inline constexpr std::array<std::string_view, 4> kArchitectures = {"micro_dense", "micro_mobile", "micro_cell",
                                                                   "micro_xception"};

struct ArchConfig {
  std::string name;
  std::string arch = "micro_mobile";
  Shape input_size{1, 64, 64};
  double width_multiplier = 1.0;
  std::size_t stem_width = 16;
  // micro_dense
  std::size_t dense_blocks = 2;
  std::size_t dense_layers = 3;
  std::size_t growth_rate = 8;
  // micro_mobile
  std::size_t mobile_stages = 4;
  // micro_cell
  std::size_t cell_count = 3;
  // micro_xception
  std::size_t residual_blocks = 2;
  std::uint64_t seed = 0;

  void validate() const {
    if (input_size.size() != 3 || std::find(input_size.begin(), input_size.end(), 0) != input_size.end()) {
      throw InvalidArgument("input_size must be three positive integers (C,H,W), got " + shape_string(input_size));
    }
    if (!(width_multiplier > 0) || !std::isfinite(width_multiplier)) {
      throw InvalidArgument("width_multiplier must be positive");
    }
    for (auto [key, v] : {std::pair<const char*, std::size_t>{"stem_width", stem_width},
                          {"dense_blocks", dense_blocks},
                          {"dense_layers", dense_layers},
                          {"growth_rate", growth_rate},
                          {"mobile_stages", mobile_stages},
                          {"cell_count", cell_count},
                          {"residual_blocks", residual_blocks}}) {
      if (v == 0) throw InvalidArgument(std::string(key) + " must be positive");
    }
  }

  /// Channel count for a base width after the multiplier.
  std::size_t channels(std::size_t base) const {
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(static_cast<double>(base) * width_multiplier)));
  }

  std::string display_name() const { return name.empty() ? arch : name; }
};

inline bool is_architecture(std::string_view arch) {
  return std::find(kArchitectures.begin(), kArchitectures.end(), arch) != kArchitectures.end();
}

inline std::string architecture_list() {
  std::string out;
  for (auto a : kArchitectures) {
    if (!out.empty()) out += ", ";
    out += a;
  }
  return out;
}

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

template <typename Int>
Int parse_int(std::string_view key, std::string_view text) {
  Int v{};
  auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || p != text.data() + text.size()) {
    throw FormatError("config key '" + std::string(key) + "': '" + std::string(text) + "' is not an integer");
  }
  return v;
}

inline Shape parse_shape(std::string_view key, std::string text) {
  std::replace(text.begin(), text.end(), 'x', ',');
  Shape out;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) out.push_back(parse_int<std::size_t>(key, trim(part)));
  return out;
}

}  // namespace detail

/// Parses a `key = value` architecture config. `#` starts a comment.
///
///   name = mobile_a
///   arch = micro_mobile
///   input_size = 1,64,64
///   width_multiplier = 0.5
///   seed = 7
inline ArchConfig parse_arch_config(std::string_view text) {
  ArchConfig cfg;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    const std::string stripped = detail::trim(line);
    if (stripped.empty()) continue;
    const auto eq = stripped.find('=');
    if (eq == std::string::npos) {
      throw FormatError("config line " + std::to_string(line_no) + ": expected key = value");
    }
    const std::string key = detail::trim(std::string_view(stripped).substr(0, eq));
    const std::string value = detail::trim(std::string_view(stripped).substr(eq + 1));
    if (key == "name") cfg.name = value;
    else if (key == "arch") cfg.arch = value;
    else if (key == "input_size") cfg.input_size = detail::parse_shape(key, value);
    else if (key == "width_multiplier") {
      try {
        std::size_t used = 0;
        cfg.width_multiplier = std::stod(value, &used);
        if (used != value.size()) throw std::invalid_argument(value);
      } catch (const std::exception&) {
        throw FormatError("config key 'width_multiplier': '" + value + "' is not a number");
      }
    }
    else if (key == "stem_width") cfg.stem_width = detail::parse_int<std::size_t>(key, value);
    else if (key == "dense_blocks") cfg.dense_blocks = detail::parse_int<std::size_t>(key, value);
    else if (key == "dense_layers") cfg.dense_layers = detail::parse_int<std::size_t>(key, value);
    else if (key == "growth_rate") cfg.growth_rate = detail::parse_int<std::size_t>(key, value);
    else if (key == "mobile_stages") cfg.mobile_stages = detail::parse_int<std::size_t>(key, value);
    else if (key == "cell_count") cfg.cell_count = detail::parse_int<std::size_t>(key, value);
    else if (key == "residual_blocks") cfg.residual_blocks = detail::parse_int<std::size_t>(key, value);
    else if (key == "seed") cfg.seed = detail::parse_int<std::uint64_t>(key, value);
    else throw FormatError("config line " + std::to_string(line_no) + ": unknown key '" + key + "'");
  }
  if (!is_architecture(cfg.arch)) {
    throw FormatError("unknown architecture '" + cfg.arch + "' (valid: " + architecture_list() + ")");
  }
  cfg.validate();
  return cfg;
}

inline ArchConfig load_arch_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot read architecture config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_arch_config(ss.str());
}

/// Appends global average pooling, a single-unit affine layer and a sigmoid.
/// The output is read as p(normal).
inline GraphPtr attach_head(const ModelGraph& backbone) {
  if (backbone.has_head()) throw InvalidArgument("model '" + backbone.name() + "' already has a classifier head");
  if (backbone.kind() != ModelKind::single) throw InvalidArgument("cannot attach a head to an ensemble");
  const std::string target = backbone.output();
  if (backbone.layer(target).output_shape.size() != 3) {
    throw ShapeError("backbone output '" + target + "' must be 4-D to attach a head");
  }
  GraphBuilder b(backbone);
  const auto gap = b.global_avg_pool("avg_pool", target);
  const auto logit = b.affine("predictions", gap, 1);
  const auto prob = b.sigmoid("probability", logit);
  b.add_member(MemberInfo{backbone.name(), logit, target, prob});
  return b.finish(prob);
}

/// Head attachment for a parameterized backbone; existing parameters are kept
/// and the new head parameters are initialized from `seed`.
template <typename T>
Model<T> attach_head(const Model<T>& backbone, std::uint64_t seed = 0) {
  GraphPtr g = attach_head(backbone.graph());
  std::vector<Tensor<T>> params = backbone.params();
  for (std::size_t i = params.size(); i < g->params().size(); ++i) {
    params.push_back(init_parameter<T>(g->params()[i], seed));
  }
  return Model<T>(std::move(g), std::move(params));
}

/// Backbone graphs (no head). The build_micro_* functions add the head.
inline GraphPtr micro_dense_backbone(const ArchConfig& cfg) {
  cfg.validate();
  GraphBuilder b(cfg.display_name(), cfg.input_size);
  b.set_arch("micro_dense");
  std::string x = b.conv("stem", b.input(), cfg.channels(cfg.stem_width), 3, 2, 1);
  x = b.relu("stem_relu", x);
  for (std::size_t blk = 0; blk < cfg.dense_blocks; ++blk) {
    const std::string prefix = "dense" + std::to_string(blk + 1);
    std::vector<std::string> features{x};
    for (std::size_t i = 0; i < cfg.dense_layers; ++i) {
      const std::string layer = prefix + "_layer" + std::to_string(i + 1);
      const std::string in = features.size() == 1 ? features.front() : b.concat(layer + "/concat", features);
      std::string y = b.conv(layer + "/conv", in, cfg.growth_rate, 3, 1, 1);
      features.push_back(b.relu(layer + "/relu", y));
    }
    x = b.concat(prefix + "/out", features);
    if (blk + 1 < cfg.dense_blocks) {
      const std::string t = "transition" + std::to_string(blk + 1);
      const std::size_t width = (b.shape_of(x)[0] + 1) / 2;
      x = b.relu(t + "/relu", b.conv(t + "/conv", x, width, 1));
      x = b.avg_pool(t + "/pool", x, 2, 2);
    }
  }
  return b.finish(x);
}

inline GraphPtr micro_mobile_backbone(const ArchConfig& cfg) {
  cfg.validate();
  GraphBuilder b(cfg.display_name(), cfg.input_size);
  b.set_arch("micro_mobile");
  const std::size_t c0 = cfg.channels(cfg.stem_width);
  std::string x = b.relu("stem_relu", b.conv("stem", b.input(), c0, 3, 2, 1));
  std::size_t width = 2 * c0;
  for (std::size_t k = 0; k < cfg.mobile_stages; ++k) {
    const bool down = k % 2 == 1;
    if (down) width *= 2;
    const std::string s = "stage" + std::to_string(k + 1);
    x = b.separable(s + "/sepconv", x, width, 3, down ? 2 : 1, 1);
    x = b.relu(s + "/relu", x);
  }
  return b.finish(x);
}

inline GraphPtr micro_cell_backbone(const ArchConfig& cfg) {
  cfg.validate();
  GraphBuilder b(cfg.display_name(), cfg.input_size);
  b.set_arch("micro_cell");
  const std::size_t c0 = cfg.channels(cfg.stem_width);
  std::string x = b.conv("stem", b.input(), c0, 3, 2, 1);
  std::size_t width = c0;
  for (std::size_t i = 0; i < cfg.cell_count; ++i) {
    const bool reduce = i % 2 == 1;
    const std::size_t stride = reduce ? 2 : 1;
    if (reduce) width *= 2;
    const std::string c = "cell" + std::to_string(i + 1);
    const std::string act = b.relu(c + "/relu", x);
    const std::string branch_a = b.separable(c + "/branch_a", act, width, 3, stride, 1);
    const std::string pooled = b.avg_pool(c + "/branch_b_pool", act, 3, stride, 1);
    const std::string branch_b = b.conv(c + "/branch_b_conv", pooled, width, 1);
    x = b.add(c + "/add", branch_a, branch_b);
  }
  return b.finish(b.relu("cell_out_relu", x));
}

inline GraphPtr micro_xception_backbone(const ArchConfig& cfg) {
  cfg.validate();
  GraphBuilder b(cfg.display_name(), cfg.input_size);
  b.set_arch("micro_xception");
  const std::size_t c0 = cfg.channels(cfg.stem_width);
  std::string x = b.relu("stem_relu", b.conv("stem", b.input(), c0, 3, 2, 1));
  std::size_t width = c0;
  for (std::size_t r = 0; r < cfg.residual_blocks; ++r) {
    // The first two blocks downsample with a projected skip; later blocks
    // keep shape and use an identity skip.
    const bool down = r < 2;
    const std::string blk = "block" + std::to_string(r + 1);
    if (down) width *= 2;
    std::string y = b.relu(blk + "/relu1", x);
    y = b.separable(blk + "/sepconv1", y, width, 3, 1, 1);
    y = b.relu(blk + "/relu2", y);
    y = b.separable(blk + "/sepconv2", y, width, 3, 1, 1);
    std::string skip = x;
    if (down) {
      y = b.max_pool(blk + "/pool", y, 3, 2, 1);
      skip = b.conv(blk + "/skip", x, width, 1, 2, 0);
    }
    x = b.add(blk + "/add", y, skip);
  }
  return b.finish(b.relu("exit_relu", x));
}

inline GraphPtr build_graph(const ArchConfig& cfg) {
  GraphPtr backbone;
  if (cfg.arch == "micro_dense") backbone = micro_dense_backbone(cfg);
  else if (cfg.arch == "micro_mobile") backbone = micro_mobile_backbone(cfg);
  else if (cfg.arch == "micro_cell") backbone = micro_cell_backbone(cfg);
  else if (cfg.arch == "micro_xception") backbone = micro_xception_backbone(cfg);
  else throw InvalidArgument("unknown architecture '" + cfg.arch + "' (valid: " + architecture_list() + ")");
  return attach_head(*backbone);
}

/// Builds and initializes a headed model for `cfg.arch`.
template <typename T = float>
Model<T> build_model(const ArchConfig& cfg) {
  return initialize<T>(build_graph(cfg), cfg.seed);
}

template <typename T = float>
Model<T> build_micro_dense(ArchConfig cfg) {
  cfg.arch = "micro_dense";
  return build_model<T>(cfg);
}

template <typename T = float>
Model<T> build_micro_mobile(ArchConfig cfg) {
  cfg.arch = "micro_mobile";
  return build_model<T>(cfg);
}

template <typename T = float>
Model<T> build_micro_cell(ArchConfig cfg) {
  cfg.arch = "micro_cell";
  return build_model<T>(cfg);
}

template <typename T = float>
Model<T> build_micro_xception(ArchConfig cfg) {
  cfg.arch = "micro_xception";
  return build_model<T>(cfg);
}

/// Average-predictions ensemble graph. Every member reads the shared input;
/// member layers and parameters are namespaced as "<member>/<layer>".
inline GraphPtr build_ensemble_graph(const std::vector<const ModelGraph*>& members, const std::string& name) {
  if (members.empty()) throw InvalidArgument("ensemble '" + name + "' needs at least one member");
  const Shape& input = members.front()->input_shape();
  for (const ModelGraph* m : members) {
    if (m->kind() != ModelKind::single || m->members().size() != 1) {
      throw InvalidArgument("ensemble member '" + m->name() + "' must be a single model with a sigmoid head");
    }
    if (m->input_shape() != input) {
      throw ShapeError("ensemble members have different input shapes: '" + members.front()->name() + "' " +
                       shape_string(input) + " vs '" + m->name() + "' " + shape_string(m->input_shape()));
    }
  }

  GraphBuilder b(name, input);
  b.set_arch("ensemble");
  b.set_kind(ModelKind::ensemble);
  std::set<std::string> used;
  std::vector<std::string> outputs;
  for (const ModelGraph* m : members) {
    std::string prefix = m->name();
    for (int k = 2; used.count(prefix); ++k) prefix = m->name() + "_" + std::to_string(k);
    used.insert(prefix);
    auto rename = [&](const std::string& layer) {
      return layer == m->layers().front().name ? b.input() : prefix + "/" + layer;
    };
    for (const LayerSpec& layer : m->layers()) {
      if (layer.kind == LayerKind::input) continue;
      LayerSpec copy = layer;
      copy.name = rename(layer.name);
      for (auto& in : copy.inputs) in = rename(in);
      b.replay(copy);
    }
    const MemberInfo& info = m->members().front();
    b.add_member(MemberInfo{prefix, rename(info.logit_layer), rename(info.target_layer), rename(info.output_layer)});
    outputs.push_back(rename(m->output()));
  }
  return b.finish(b.average("average_predictions", outputs));
}

/// Post-training composition: member parameters are copied, not retrained.
template <typename T>
Model<T> build_ensemble(const std::vector<Model<T>>& members, const std::string& name) {
  std::vector<const ModelGraph*> graphs;
  std::vector<Tensor<T>> params;
  for (const auto& m : members) {
    graphs.push_back(&m.graph());
    params.insert(params.end(), m.params().begin(), m.params().end());
  }
  return Model<T>(build_ensemble_graph(graphs, name), std::move(params));
}

/// Extracts member `index` of an ensemble as a standalone single model.
template <typename T>
Model<T> ensemble_member(const Model<T>& ensemble, std::size_t index) {
  const ModelGraph& g = ensemble.graph();
  if (g.kind() != ModelKind::ensemble) throw InvalidArgument("model '" + g.name() + "' is not an ensemble");
  const MemberInfo& info = g.members().at(index);
  const std::string prefix = info.name + "/";
  GraphBuilder b(info.name, g.input_shape());
  auto strip = [&](const std::string& layer) { return layer == "input" ? layer : layer.substr(prefix.size()); };
  std::vector<Tensor<T>> params;
  for (const LayerSpec& layer : g.layers()) {
    if (layer.name.rfind(prefix, 0) != 0) continue;
    LayerSpec copy = layer;
    copy.name = strip(layer.name);
    for (auto& in : copy.inputs) in = strip(in);
    b.replay(copy);
  }
  for (std::size_t i = 0; i < g.params().size(); ++i)
    if (g.params()[i].name.rfind(prefix, 0) == 0) params.push_back(ensemble.params()[i]);
  b.add_member(MemberInfo{info.name, strip(info.logit_layer), strip(info.target_layer), strip(info.output_layer)});
  return Model<T>(b.finish(strip(info.output_layer)), std::move(params));
}

}  // namespace bonecheck
