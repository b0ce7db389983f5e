#pragma once

// Checkpoint layout:
//   bytes 0..7   magic "BONECKPT"
//   bytes 8..11  format version, uint32 little-endian
//   bytes 12..19 header length H, uint64 little-endian
//   next H bytes JSON header: graph description plus, per parameter,
//                name / shape / byte offset / element count
//   remainder    parameter blob, little-endian IEEE-754 float32

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "bonecheck/error.hpp"
#include "bonecheck/graph.hpp"
#include "bonecheck/image.hpp"
#include "bonecheck/model.hpp"
#include "json.hpp"

namespace bonecheck {

inline constexpr char kCheckpointMagic[8] = {'B', 'O', 'N', 'E', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <typename U>
void put_le(std::vector<std::uint8_t>& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

template <typename U>
U get_le(const std::uint8_t* p) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(p[i]) << (8 * i);
  return v;
}

inline nlohmann::json graph_to_json(const ModelGraph& g) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : g.layers()) {
    layers.push_back({{"kind", std::string(to_string(l.kind))},
                      {"name", l.name},
                      {"inputs", l.inputs},
                      {"width", l.width},
                      {"kernel", l.kernel},
                      {"stride", l.stride},
                      {"padding", l.padding}});
  }
  nlohmann::json members = nlohmann::json::array();
  for (const auto& m : g.members()) {
    members.push_back({{"name", m.name},
                       {"logit_layer", m.logit_layer},
                       {"target_layer", m.target_layer},
                       {"output_layer", m.output_layer}});
  }
  return {{"name", g.name()},
          {"arch", g.arch()},
          {"kind", g.kind() == ModelKind::single ? "single" : "ensemble"},
          {"input_shape", g.input_shape()},
          {"output", g.output()},
          {"layers", layers},
          {"members", members}};
}

inline GraphPtr graph_from_json(const nlohmann::json& j) {
  GraphBuilder b(j.at("name").get<std::string>(), j.at("input_shape").get<Shape>());
  b.set_arch(j.at("arch").get<std::string>());
  const std::string kind = j.at("kind").get<std::string>();
  if (kind != "single" && kind != "ensemble") throw FormatError("checkpoint: unknown model kind '" + kind + "'");
  b.set_kind(kind == "single" ? ModelKind::single : ModelKind::ensemble);
  const auto& layers = j.at("layers");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    LayerSpec spec;
    spec.kind = layer_kind_from_string(l.at("kind").get<std::string>());
    spec.name = l.at("name").get<std::string>();
    if (i == 0) {
      if (spec.kind != LayerKind::input) throw FormatError("checkpoint: first layer must be the input");
      continue;
    }
    spec.inputs = l.at("inputs").get<std::vector<std::string>>();
    spec.width = l.at("width").get<std::size_t>();
    spec.kernel = l.at("kernel").get<std::size_t>();
    spec.stride = l.at("stride").get<std::size_t>();
    spec.padding = l.at("padding").get<std::size_t>();
    b.replay(spec);
  }
  for (const auto& m : j.at("members")) {
    b.add_member(MemberInfo{m.at("name").get<std::string>(), m.at("logit_layer").get<std::string>(),
                            m.at("target_layer").get<std::string>(), m.at("output_layer").get<std::string>()});
  }
  return b.finish(j.at("output").get<std::string>());
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_checkpoint(const Model<float>& model) {
  nlohmann::json params = nlohmann::json::array();
  std::vector<std::uint8_t> blob;
  std::size_t offset = 0;
  const auto& specs = model.graph().params();
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const auto& t = model.params()[i];
    params.push_back({{"name", specs[i].name}, {"shape", t.shape()}, {"offset", offset}, {"count", t.size()}});
    for (float v : t.values()) detail::put_le(blob, std::bit_cast<std::uint32_t>(v));
    offset += 4 * t.size();
  }
  const nlohmann::json header = {{"format", "bonecheck-checkpoint"},
                                 {"version", kCheckpointVersion},
                                 {"dtype", "float32-le"},
                                 {"model", detail::graph_to_json(model.graph())},
                                 {"parameters", params},
                                 {"blob_bytes", blob.size()}};
  const std::string text = header.dump();
  std::vector<std::uint8_t> out(kCheckpointMagic, kCheckpointMagic + 8);
  detail::put_le(out, kCheckpointVersion);
  detail::put_le(out, static_cast<std::uint64_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  out.insert(out.end(), blob.begin(), blob.end());
  return out;
}

/// Parses a checkpoint. Any structural problem raises FormatError before a
/// model is produced; no partially filled model is ever returned.
inline Model<float> decode_checkpoint(std::span<const std::uint8_t> bytes, const std::string& source = "<memory>") {
  auto fail = [&](const std::string& why) { return FormatError("checkpoint " + source + ": " + why); };
  if (bytes.size() < 20 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) throw fail("bad magic or truncated");
  const auto version = detail::get_le<std::uint32_t>(bytes.data() + 8);
  if (version != kCheckpointVersion) {
    throw fail("format version " + std::to_string(version) + " is not supported (expected " +
               std::to_string(kCheckpointVersion) + ")");
  }
  const auto header_len = detail::get_le<std::uint64_t>(bytes.data() + 12);
  if (header_len > bytes.size() - 20) throw fail("truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 20, bytes.begin() + 20 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const nlohmann::json::exception& e) {
    throw fail(std::string("unreadable header: ") + e.what());
  }
  const std::span<const std::uint8_t> blob = bytes.subspan(20 + header_len);
  try {
    if (header.at("format") != "bonecheck-checkpoint" || header.at("dtype") != "float32-le") {
      throw fail("unexpected format or dtype");
    }
    if (header.at("blob_bytes").get<std::size_t>() != blob.size()) {
      throw fail("parameter blob has " + std::to_string(blob.size()) + " bytes, header declares " +
                 std::to_string(header.at("blob_bytes").get<std::size_t>()));
    }
    GraphPtr graph = detail::graph_from_json(header.at("model"));
    const auto& entries = header.at("parameters");
    if (entries.size() != graph->params().size()) throw fail("parameter list does not match the graph");
    std::vector<Tensor<float>> params;
    for (std::size_t i = 0; i < entries.size(); ++i) {
      const auto& e = entries[i];
      const auto& spec = graph->params()[i];
      const Shape shape = e.at("shape").get<Shape>();
      const auto offset = e.at("offset").get<std::size_t>();
      const auto count = e.at("count").get<std::size_t>();
      if (e.at("name").get<std::string>() != spec.name || shape != spec.shape || count != shape_size(shape)) {
        throw fail("parameter entry " + std::to_string(i) + " does not match graph parameter '" + spec.name + "'");
      }
      if (offset > blob.size() || count > (blob.size() - offset) / 4) throw fail("parameter '" + spec.name + "' overruns the blob");
      std::vector<float> values(count);
      for (std::size_t k = 0; k < count; ++k) {
        values[k] = std::bit_cast<float>(detail::get_le<std::uint32_t>(blob.data() + offset + 4 * k));
      }
      params.emplace_back(shape, std::move(values));
    }
    return Model<float>(std::move(graph), std::move(params));
  } catch (const nlohmann::json::exception& e) {
    throw fail(std::string("malformed header: ") + e.what());
  } catch (const ShapeError& e) {
    throw fail(std::string("inconsistent graph: ") + e.what());
  } catch (const InvalidArgument& e) {
    throw fail(std::string("inconsistent graph: ") + e.what());
  }
}

inline void save_checkpoint(const Model<float>& model, const std::filesystem::path& path) {
  write_file_bytes(path, encode_checkpoint(model));
}

inline Model<float> load_checkpoint(const std::filesystem::path& path) {
  std::vector<std::uint8_t> bytes;
  try {
    bytes = read_file_bytes(path);
  } catch (const DataError& e) {
    throw FormatError(e.what());
  }
  return decode_checkpoint(bytes, path.string());
}

/// Loads parameter values from `path` into an existing model of the same
/// architecture. Throws ShapeError when names or shapes differ.
inline void load_parameters_into(Model<float>& target, const std::filesystem::path& path) {
  Model<float> loaded = load_checkpoint(path);
  const auto& want = target.graph().params();
  const auto& have = loaded.graph().params();
  if (want.size() != have.size()) {
    throw ShapeError("checkpoint " + path.string() + " has " + std::to_string(have.size()) +
                     " parameter tensors, model '" + target.name() + "' expects " + std::to_string(want.size()));
  }
  for (std::size_t i = 0; i < want.size(); ++i) {
    if (want[i].name != have[i].name || want[i].shape != have[i].shape) {
      throw ShapeError("checkpoint parameter '" + have[i].name + "' " + shape_string(have[i].shape) +
                       " does not match model parameter '" + want[i].name + "' " + shape_string(want[i].shape));
    }
  }
  target.params() = loaded.params();
}

}  // namespace bonecheck
