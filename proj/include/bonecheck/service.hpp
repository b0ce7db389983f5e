#pragma once

// Prediction service: a registry of loaded models, the shared single-image
// inference path, and the HTTP front end.
//
//   GET  /health   -> {"status":"ok"}
//   GET  /models   -> {"models":[{"name", "kind", "arch", "input_size", "members"}]}
//   POST /predict  multipart fields: image (file), models (comma list,
//                  default all), cam (true/false, default false)
//                  -> [PredictResponse, ...]
// Errors are JSON {"error": message}: 400 bad request or undecodable image,
// 404 unknown model, 413 upload over the size limit.

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "bonecheck/checkpoint.hpp"
#include "bonecheck/evaluate.hpp"
#include "bonecheck/gradcam.hpp"
#include "bonecheck/image.hpp"
#include "bonecheck/zoo.hpp"
#include "httplib.h"
#include "json.hpp"

namespace bonecheck {

namespace fs = std::filesystem;

inline constexpr std::size_t kDefaultUploadLimit = 10u * 1024u * 1024u;
inline constexpr const char* kModelsDirEnv = "BONECHECK_MODELS_DIR";

struct ServiceConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
  /// name -> checkpoint paths; more than one path serves an average ensemble.
  std::map<std::string, std::vector<fs::path>> registry;
  std::size_t max_upload_bytes = kDefaultUploadLimit;
  bool cam_enabled = true;

  void validate() const {
    if (port < 0 || port > 65535) throw InvalidArgument("port " + std::to_string(port) + " is out of range");
    if (registry.empty()) throw InvalidArgument("the service needs at least one registered model");
    if (max_upload_bytes == 0) throw InvalidArgument("upload limit must be positive");
  }
};

namespace detail {
inline std::vector<std::string> split_list(const std::string& text, char sep = ',') {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, sep)) {
    part = trim(part);
    if (!part.empty()) out.push_back(part);
  }
  return out;
}
}  // namespace detail

/// "name=a.ckpt" or "name=a.ckpt,b.ckpt,c.ckpt". A bare path registers the
/// file stem as the name.
inline std::pair<std::string, std::vector<fs::path>> parse_registry_entry(const std::string& entry) {
  const auto eq = entry.find('=');
  std::string name = eq == std::string::npos ? "" : detail::trim(entry.substr(0, eq));
  const auto paths = detail::split_list(eq == std::string::npos ? entry : entry.substr(eq + 1));
  if (paths.empty()) throw InvalidArgument("model entry '" + entry + "' names no checkpoint");
  if (eq == std::string::npos) {
    if (paths.size() != 1) throw InvalidArgument("ensemble entry '" + entry + "' needs a name (name=a,b,c)");
    name = fs::path(paths.front()).stem().string();
  }
  if (name.empty()) throw InvalidArgument("model entry '" + entry + "' has an empty name");
  return {name, std::vector<fs::path>(paths.begin(), paths.end())};
}

/// Relative checkpoint paths that do not exist are looked up under
/// $BONECHECK_MODELS_DIR. With an empty registry every *.ckpt there is
/// registered under its stem.
inline void apply_models_dir(ServiceConfig& config) {
  const char* env = std::getenv(kModelsDirEnv);
  if (!env || !*env) return;
  const fs::path root(env);
  for (auto& [name, paths] : config.registry) {
    for (auto& p : paths) {
      if (p.is_relative() && !fs::exists(p) && fs::exists(root / p)) p = root / p;
    }
  }
  if (config.registry.empty() && fs::is_directory(root)) {
    std::vector<fs::path> found;
    for (const auto& e : fs::directory_iterator(root)) {
      if (e.is_regular_file() && e.path().extension() == ".ckpt") found.push_back(e.path());
    }
    std::sort(found.begin(), found.end());
    for (const auto& p : found) config.registry[p.stem().string()] = {p};
  }
}

/// One checkpoint loads as-is; several are composed into an average ensemble.
inline Model<float> load_model_or_ensemble(const std::vector<fs::path>& paths, const std::string& name) {
  if (paths.empty()) throw InvalidArgument("no checkpoints given for '" + name + "'");
  if (paths.size() == 1) return load_checkpoint(paths.front());
  std::vector<Model<float>> members;
  for (const auto& p : paths) members.push_back(load_checkpoint(p));
  return build_ensemble(members, name);
}

struct LoadedModel {
  std::string name;
  Model<float> model;
};

/// Models are loaded once and then only read.
class ModelRegistry {
 public:
  ModelRegistry() = default;
  explicit ModelRegistry(const std::map<std::string, std::vector<fs::path>>& entries) {
    for (const auto& [name, paths] : entries) {
      try {
        models_.emplace(name, std::make_shared<const LoadedModel>(LoadedModel{name, load_model_or_ensemble(paths, name)}));
      } catch (const Error& e) {
        throw Error("cannot load model '" + name + "': " + e.what());
      }
    }
  }

  void add(std::string name, Model<float> model) {
    models_[name] = std::make_shared<const LoadedModel>(LoadedModel{name, std::move(model)});
  }

  const LoadedModel* find(const std::string& name) const {
    auto it = models_.find(name);
    return it == models_.end() ? nullptr : it->second.get();
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [name, _] : models_) out.push_back(name);
    return out;
  }

  bool empty() const { return models_.empty(); }

 private:
  std::map<std::string, std::shared_ptr<const LoadedModel>> models_;
};

struct PredictResponse {
  std::string model;
  double probability_normal = 0.0;
  double probability_abnormal = 0.0;
  std::string decision;
  std::optional<std::string> cam_png_base64;
  double elapsed_ms = 0.0;

  nlohmann::json to_json() const {
    nlohmann::json j = {{"model", model},
                        {"probability_normal", probability_normal},
                        {"probability_abnormal", probability_abnormal},
                        {"decision", decision},
                        {"elapsed_ms", elapsed_ms}};
    j["cam_png_base64"] = cam_png_base64 ? nlohmann::json(*cam_png_base64) : nlohmann::json(nullptr);
    return j;
  }
};

/// p(normal) for one image through the validation preprocessing. CLI and
/// service both call this.
inline double predict_probability(const Model<float>& model, const GrayImage& image) {
  const Shape& in = model.graph().input_shape();
  Tensor<float> x = to_tensor<float>(image, in[1], in[2]);
  const Tensor<float> p = predict(model, x.reshaped({1, in[0], in[1], in[2]}));
  return static_cast<double>(p[0]);
}

/// Heatmap explaining the decision made, at the image's own resolution. For
/// an ensemble the member maps are averaged.
inline CamHeatmap decision_cam(const Model<float>& model, const GrayImage& image, Label decision) {
  const Shape& in = model.graph().input_shape();
  const Tensor<float> x = to_tensor<float>(image, in[1], in[2]);
  if (model.graph().kind() == ModelKind::single) {
    CamOptions opts;
    opts.explained_class = decision;
    return resize_heatmap(grad_cam(model, x, opts), image.height, image.width);
  }
  auto maps = cam_for_ensemble(model, x, decision);
  CamHeatmap mean = maps.front().second;
  mean.target_layer = "average_predictions";
  std::vector<double> acc(in[1] * in[2], 0.0);
  for (const auto& [_, cam] : maps) {
    const CamHeatmap r = resize_heatmap(cam, in[1], in[2]);
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += r.upsampled[i];
  }
  for (double& v : acc) v /= static_cast<double>(maps.size());
  mean.height = in[1];
  mean.width = in[2];
  mean.raw = acc;
  mean.values = acc;
  return resize_heatmap(mean, image.height, image.width);
}

inline PredictResponse predict_image(const LoadedModel& entry, const GrayImage& image, bool with_cam) {
  const auto t0 = std::chrono::steady_clock::now();
  PredictResponse r;
  r.model = entry.name;
  r.probability_normal = predict_probability(entry.model, image);
  r.probability_abnormal = 1.0 - r.probability_normal;
  const Label decision = decide(r.probability_normal);
  r.decision = std::string(to_string(decision));
  if (with_cam) {
    const RgbImage over = overlay(decision_cam(entry.model, image, decision), image);
    const auto png = encode_png(over);
    r.cam_png_base64 = httplib::detail::base64_encode(std::string(png.begin(), png.end()));
  }
  r.elapsed_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

inline nlohmann::json models_json(const ModelRegistry& registry) {
  nlohmann::json list = nlohmann::json::array();
  for (const auto& name : registry.names()) {
    const ModelGraph& g = registry.find(name)->model.graph();
    nlohmann::json members = nlohmann::json::array();
    for (const auto& m : g.members()) members.push_back(m.name);
    list.push_back({{"name", name},
                    {"kind", g.kind() == ModelKind::single ? "single" : "ensemble"},
                    {"arch", g.arch()},
                    {"input_size", g.input_shape()},
                    {"members", members}});
  }
  return {{"models", list}};
}

/// HTTP front end over a registry. Handlers share the registry read-only.
class PredictionService {
 public:
  PredictionService(ModelRegistry registry, std::size_t max_upload_bytes = kDefaultUploadLimit, bool cam_enabled = true)
      : registry_(std::move(registry)), max_upload_(max_upload_bytes), cam_enabled_(cam_enabled) {
    if (registry_.empty()) throw InvalidArgument("the service needs at least one registered model");
    routes();
  }

  explicit PredictionService(const ServiceConfig& config)
      : PredictionService(load(config), config.max_upload_bytes, config.cam_enabled) {}

  httplib::Server& server() { return server_; }
  const ModelRegistry& registry() const { return registry_; }

  /// Binds to `port` (0 picks a free one) and returns the bound port, or -1.
  int bind(const std::string& host, int port) {
    if (port == 0) return server_.bind_to_any_port(host);
    return server_.bind_to_port(host, port) ? port : -1;
  }
  bool run() { return server_.listen_after_bind(); }
  void stop() { server_.stop(); }

 private:
  static ModelRegistry load(const ServiceConfig& config) {
    config.validate();
    return ModelRegistry(config.registry);
  }

  static void json_reply(httplib::Response& res, int status, const nlohmann::json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }

  static void error_reply(httplib::Response& res, int status, const std::string& message) {
    json_reply(res, status, {{"error", message}});
  }

  void routes() {
    server_.set_payload_max_length(max_upload_);
    server_.set_default_headers({{"Access-Control-Allow-Origin", "*"}});
    server_.set_error_handler([this](const httplib::Request&, httplib::Response& res) {
      if (!res.body.empty()) return;
      if (res.status == 413) error_reply(res, 413, "upload exceeds the limit of " + std::to_string(max_upload_) + " bytes");
      else if (res.status == 404) error_reply(res, 404, "no such endpoint");
      else error_reply(res, res.status, httplib::status_message(res.status));
    });
    server_.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
      try {
        std::rethrow_exception(ep);
      } catch (const std::exception& e) {
        error_reply(res, 500, e.what());
      } catch (...) {
        error_reply(res, 500, "internal error");
      }
    });
    server_.Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) {
      res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
      res.set_header("Access-Control-Allow-Headers", "Content-Type");
      res.status = 204;
    });
    server_.Get("/health", [](const httplib::Request&, httplib::Response& res) {
      json_reply(res, 200, {{"status", "ok"}});
    });
    server_.Get("/models", [this](const httplib::Request&, httplib::Response& res) {
      json_reply(res, 200, models_json(registry_));
    });
    server_.Post("/predict", [this](const httplib::Request& req, httplib::Response& res) { handle_predict(req, res); });
  }

  void handle_predict(const httplib::Request& req, httplib::Response& res) const {
    if (!req.is_multipart_form_data() || !req.has_file("image")) {
      return error_reply(res, 400, "expected multipart/form-data with an 'image' file field");
    }
    const auto image_part = req.get_file_value("image");
    if (image_part.content.size() > max_upload_) {
      return error_reply(res, 413, "upload exceeds the limit of " + std::to_string(max_upload_) + " bytes");
    }

    std::vector<std::string> names = registry_.names();
    if (req.has_file("models")) {
      names = detail::split_list(req.get_file_value("models").content);
      if (names.empty()) return error_reply(res, 400, "'models' lists no model names");
    }
    for (const auto& n : names) {
      if (!registry_.find(n)) {
        return json_reply(res, 404, {{"error", "unknown model '" + n + "'"}, {"model", n}});
      }
    }

    bool cam = false;
    if (req.has_file("cam")) {
      const std::string v = detail::trim(req.get_file_value("cam").content);
      if (v == "true" || v == "1") cam = true;
      else if (v != "false" && v != "0" && !v.empty()) return error_reply(res, 400, "'cam' must be true or false");
    }
    if (cam && !cam_enabled_) return error_reply(res, 400, "Grad-CAM is disabled on this server");

    GrayImage image;
    try {
      const auto& c = image_part.content;
      image = decode_png(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(c.data()), c.size()),
                         image_part.filename.empty() ? "upload" : image_part.filename);
    } catch (const FormatError& e) {
      return error_reply(res, 400, e.what());
    }

    nlohmann::json out = nlohmann::json::array();
    for (const auto& n : names) out.push_back(predict_image(*registry_.find(n), image, cam).to_json());
    json_reply(res, 200, out);
  }

  ModelRegistry registry_;
  std::size_t max_upload_;
  bool cam_enabled_;
  httplib::Server server_;
};

}  // namespace bonecheck
