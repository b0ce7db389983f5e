#pragma once

// Grad-CAM over single models and ensemble members.
//
// Colormap: t in [0,1] maps to RGB (255 t, 0, 255 (1 - t)), i.e. blue for
// cold and red for hot. Overlay pixels are round((1 - alpha) g + alpha c)
// per channel where g is the grayscale radiograph value.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "bonecheck/dataset.hpp"
#include "bonecheck/image.hpp"
#include "bonecheck/model.hpp"
#include "bonecheck/ops.hpp"

namespace bonecheck {

struct CamHeatmap {
  std::string target_layer;
  Label explained_class = Label::abnormal;
  std::size_t height = 0, width = 0;  // target layer resolution
  std::vector<double> raw;            // sum_k alpha_k A^k before ReLU
  std::vector<double> values;         // ReLU, divided by max; in [0,1]
  std::size_t up_height = 0, up_width = 0;
  std::vector<double> upsampled;  // values resized bilinearly, clamped to [0,1]
};

struct CamOptions {
  std::optional<std::string> target_layer;  // default: the member's last 4-D activation
  Label explained_class = Label::abnormal;
  double logit_scale = 1.0;  // positive multiplier applied to the class score
};

namespace detail {

inline std::vector<double> upsample_unit(const std::vector<double>& v, std::size_t h, std::size_t w, std::size_t oh,
                                         std::size_t ow) {
  auto out = resize_bilinear<double>(v, h, w, oh, ow);
  for (double& x : out) x = std::clamp(x, 0.0, 1.0);
  return out;
}

template <typename T>
CamHeatmap grad_cam_at(const Model<T>& model, const Tensor<T>& image, const std::string& target_layer,
                       const std::string& logit_layer, const CamOptions& opts) {
  const ModelGraph& g = model.graph();
  if (!(opts.logit_scale > 0.0) || !std::isfinite(opts.logit_scale)) {
    throw InvalidArgument("logit_scale must be a positive finite number");
  }
  if (!g.has_layer(target_layer)) throw InvalidArgument("unknown layer '" + target_layer + "' in model '" + g.name() + "'");
  if (g.layer(target_layer).output_shape.size() != 3) {
    throw ShapeError("Grad-CAM target layer '" + target_layer + "' is not a spatial (C,H,W) activation");
  }
  Shape batch_shape{1};
  const Shape& in = image.shape();
  if (in.size() == 4 && in[0] == 1) batch_shape.assign(in.begin(), in.end());
  else if (in.size() == 3) batch_shape.insert(batch_shape.end(), in.begin(), in.end());
  else throw ShapeError("Grad-CAM explains a single image (C,H,W) or (1,C,H,W), got " + shape_string(in));

  Tape<T> tape;
  auto x = tape.parameter(image.reshaped(batch_shape));
  auto pass = forward(tape, model, x, false);
  const Var<T>& A = pass.at(target_layer);
  const double sign = opts.explained_class == Label::normal ? 1.0 : -1.0;
  auto score = sum(scale(pass.at(logit_layer), static_cast<T>(sign * opts.logit_scale)));
  const auto grads = tape.backward(score);

  const Shape& as = A.shape();  // (1,C,H,W)
  const std::size_t C = as[1], H = as[2], W = as[3], plane = H * W;
  const Tensor<T>& a = A.value();
  const Tensor<T> zero(as);
  const Tensor<T>& ga = grads.has(A) ? grads[A] : zero;

  CamHeatmap cam;
  cam.target_layer = target_layer;
  cam.explained_class = opts.explained_class;
  cam.height = H;
  cam.width = W;
  cam.raw.assign(plane, 0.0);
  for (std::size_t c = 0; c < C; ++c) {
    double alpha = 0.0;
    for (std::size_t i = 0; i < plane; ++i) alpha += static_cast<double>(ga[c * plane + i]);
    alpha /= static_cast<double>(plane);
    for (std::size_t i = 0; i < plane; ++i) cam.raw[i] += alpha * static_cast<double>(a[c * plane + i]);
  }
  cam.values.resize(plane);
  double peak = 0.0;
  for (std::size_t i = 0; i < plane; ++i) {
    cam.values[i] = std::max(cam.raw[i], 0.0);
    peak = std::max(peak, cam.values[i]);
  }
  if (peak > 0.0) {
    for (double& v : cam.values) v /= peak;
  }
  cam.up_height = batch_shape[2];
  cam.up_width = batch_shape[3];
  cam.upsampled = upsample_unit(cam.values, H, W, cam.up_height, cam.up_width);
  return cam;
}

}  // namespace detail

/// Grad-CAM for a single model. The class score is the pre-sigmoid logit for
/// "normal" and its negation for "abnormal".
template <typename T>
CamHeatmap grad_cam(const Model<T>& model, const Tensor<T>& image, const CamOptions& opts = {}) {
  const ModelGraph& g = model.graph();
  if (g.kind() != ModelKind::single) {
    throw InvalidArgument("model '" + g.name() + "' is an ensemble; use cam_for_ensemble");
  }
  const std::string target = opts.target_layer.value_or(g.default_target_layer());
  return detail::grad_cam_at(model, image, target, g.logit_layer(), opts);
}

/// One heatmap per ensemble member, each at that member's default layer.
template <typename T>
std::vector<std::pair<std::string, CamHeatmap>> cam_for_ensemble(const Model<T>& ensemble, const Tensor<T>& image,
                                                                 Label explained_class = Label::abnormal) {
  const ModelGraph& g = ensemble.graph();
  if (g.kind() != ModelKind::ensemble) throw InvalidArgument("model '" + g.name() + "' is not an ensemble");
  std::vector<std::pair<std::string, CamHeatmap>> out;
  CamOptions opts;
  opts.explained_class = explained_class;
  for (const MemberInfo& m : g.members()) {
    try {
      out.emplace_back(m.name, detail::grad_cam_at(ensemble, image, m.target_layer, m.logit_layer, opts));
    } catch (const Error& e) {
      throw InvalidArgument("ensemble member '" + m.name + "': " + e.what());
    }
  }
  return out;
}

/// Re-samples the heatmap to another display size.
inline CamHeatmap resize_heatmap(CamHeatmap cam, std::size_t h, std::size_t w) {
  cam.up_height = h;
  cam.up_width = w;
  cam.upsampled = detail::upsample_unit(cam.values, cam.height, cam.width, h, w);
  return cam;
}

inline std::uint8_t colormap_channel(double v) { return static_cast<std::uint8_t>(std::lround(255.0 * v)); }

/// Heatmap rendered through the blue-to-red colormap alone.
inline RgbImage colorize(const CamHeatmap& cam) {
  RgbImage out{cam.up_width, cam.up_height, std::vector<std::uint8_t>(3 * cam.upsampled.size())};
  for (std::size_t i = 0; i < cam.upsampled.size(); ++i) {
    const double t = std::clamp(cam.upsampled[i], 0.0, 1.0);
    out.pixels[3 * i] = colormap_channel(t);
    out.pixels[3 * i + 1] = 0;
    out.pixels[3 * i + 2] = colormap_channel(1.0 - t);
  }
  return out;
}

inline RgbImage overlay(const CamHeatmap& cam, const GrayImage& image, double alpha = 0.4) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw InvalidArgument("overlay alpha must lie in [0,1]");
  if (cam.up_height != image.height || cam.up_width != image.width) {
    throw ShapeError("overlay: heatmap is " + std::to_string(cam.up_height) + "x" + std::to_string(cam.up_width) +
                     ", image is " + std::to_string(image.height) + "x" + std::to_string(image.width));
  }
  const RgbImage heat = colorize(cam);
  RgbImage out{image.width, image.height, std::vector<std::uint8_t>(3 * image.pixels.size())};
  for (std::size_t i = 0; i < image.pixels.size(); ++i) {
    const double gray = image.pixels[i];
    for (std::size_t ch = 0; ch < 3; ++ch) {
      const double v = (1.0 - alpha) * gray + alpha * heat.pixels[3 * i + ch];
      out.pixels[3 * i + ch] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
    }
  }
  return out;
}

/// Overlay on a model input tensor (1,H,W) with values in [0,1].
template <typename T>
RgbImage overlay(const CamHeatmap& cam, const Tensor<T>& image, double alpha = 0.4) {
  const Shape& s = image.shape();
  if (s.size() != 3 || s[0] != 1) throw ShapeError("overlay expects a (1,H,W) image, got " + shape_string(s));
  GrayImage g{s[2], s[1], std::vector<std::uint8_t>(image.size())};
  for (std::size_t i = 0; i < image.size(); ++i) {
    g.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(static_cast<double>(image[i]), 0.0, 1.0) * 255.0));
  }
  return overlay(cam, g, alpha);
}

/// Target-layer-resolution grid, one row per line.
inline std::string heatmap_csv(const CamHeatmap& cam) {
  std::ostringstream os;
  os.precision(9);
  for (std::size_t y = 0; y < cam.height; ++y) {
    for (std::size_t x = 0; x < cam.width; ++x) os << (x ? "," : "") << cam.values[y * cam.width + x];
    os << '\n';
  }
  return os.str();
}

}  // namespace bonecheck
