#pragma once

#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "bonecheck/adam.hpp"
#include "bonecheck/checkpoint.hpp"
#include "bonecheck/dataset.hpp"
#include "bonecheck/image.hpp"
#include "bonecheck/model.hpp"
#include "bonecheck/ops.hpp"

namespace bonecheck {

/// Weighted binary cross-entropy over a batch of probabilities (B,1).
template <typename T>
Var<T> bce_loss(const Var<T>& probabilities, std::span<const T> labels, std::span<const T> weights) {
  return weighted_bce(probabilities, labels, weights);
}

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double valid_loss = 0.0;
  double valid_acc = 0.0;
  double seconds = 0.0;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
};

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  bool class_weighting = true;
  bool augment = true;
  AugmentationConfig augmentation;  // target size is taken from the model
  AdamHyper adam;
  std::optional<std::filesystem::path> checkpoint_path;
  std::optional<std::size_t> patience;  // early stop on validation loss; off by default
  bool record_wall_time = true;
  /// Called after each epoch; returning false stops training.
  std::function<bool(const Model<float>&, const EpochRecord&)> on_epoch;
};

struct TrainResult {
  Model<float> model;       // parameters after the last epoch
  Model<float> best_model;  // parameters at the lowest validation loss
  TrainLog log;
};

/// Decoded, resized, rescaled images keyed by path.
class ImageCache {
 public:
  ImageCache(std::size_t h, std::size_t w) : h_(h), w_(w) {}

  const Tensor<float>& get(const std::filesystem::path& path) {
    auto key = path.string();
    auto it = cache_.find(key);
    if (it == cache_.end()) it = cache_.emplace(key, load_image<float>(path, h_, w_)).first;
    return it->second;
  }

 private:
  std::size_t h_, w_;
  std::map<std::string, Tensor<float>> cache_;
};

/// Per-view probabilities p(normal), evaluated in batches without augmentation.
inline std::vector<double> predict_views(const Model<float>& model, const std::vector<ViewSample>& views,
                                         ImageCache& cache, std::size_t batch_size = 32) {
  std::vector<double> out;
  out.reserve(views.size());
  const Shape& in = model.graph().input_shape();
  if (in[0] != 1) throw ShapeError("model '" + model.name() + "' expects " + std::to_string(in[0]) +
                                   " input channels; radiographs are single-channel");
  for (std::size_t start = 0; start < views.size(); start += batch_size) {
    const std::size_t end = std::min(views.size(), start + batch_size);
    std::vector<float> pixels;
    for (std::size_t i = start; i < end; ++i) {
      const auto& img = cache.get(views[i].path);
      pixels.insert(pixels.end(), img.values().begin(), img.values().end());
    }
    Tensor<float> batch({end - start, in[0], in[1], in[2]}, std::move(pixels));
    const Tensor<float> probs = predict(model, batch);
    for (float p : probs.values()) out.push_back(static_cast<double>(p));
  }
  return out;
}

/// Per-view accuracy at the 0.5 threshold (p >= 0.5 reads as normal).
inline double view_accuracy(const Model<float>& model, const std::vector<ViewSample>& views, ImageCache& cache) {
  const auto probs = predict_views(model, views, cache);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < views.size(); ++i) {
    const bool says_normal = probs[i] >= 0.5;
    if (says_normal == (views[i].label == Label::normal)) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(views.size());
}

/// End-to-end training with weighted BCE and Adam. Deterministic for a fixed
/// seed: batch order, augmentation draws and reductions are all fixed.
inline TrainResult train(Model<float> model, const DatasetManifest& train_set, const DatasetManifest& valid_set,
                         const TrainConfig& config) {
  if (config.epochs < 1) throw InvalidArgument("epochs must be at least 1");
  if (config.batch_size < 1) throw InvalidArgument("batch_size must be at least 1");
  if (model.graph().kind() != ModelKind::single || model.graph().members().empty()) {
    throw InvalidArgument("only single models with a sigmoid head can be trained");
  }
  if (train_set.studies.empty() || valid_set.studies.empty()) throw DataError("training needs non-empty train and valid splits");

  const Shape& in = model.graph().input_shape();
  ImageCache cache(in[1], in[2]);
  AugmentationConfig aug = config.augmentation;
  aug.target_h = in[1];
  aug.target_w = in[2];
  aug.validate();

  std::optional<ClassWeights> weights;
  if (config.class_weighting) weights = compute_class_weights(train_set);
  const auto train_views = flatten_views(train_set, weights);
  const auto valid_views = flatten_views(valid_set);

  BatchIterator batches(train_views, config.batch_size, true, config.seed,
                        [&](const ViewSample& v, std::size_t index, std::size_t epoch, std::size_t) {
                          const Tensor<float>& img = cache.get(v.path);
                          if (!config.augment) return img;
                          Rng rng(derive_seed(config.seed ^ aug.seed, epoch + 1, index));
                          return augment(img, aug, rng);
                        });

  AdamState<float> adam(model.params(), config.adam);
  std::vector<std::string> names;
  for (const auto& p : model.graph().params()) names.push_back(p.name);

  TrainResult result{model, model, {}};
  double best_valid = std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    batches.start_epoch(epoch);
    Batch batch;
    double loss_sum = 0.0;
    std::size_t seen = 0, batch_no = 0;
    while (batches.next(batch)) {
      ++batch_no;
      Tape<float> tape;
      auto pass = forward(tape, model, tape.constant(batch.images), true);
      auto loss = bce_loss<float>(pass.output, batch.labels, batch.weights);
      const double value = loss.value()[0];
      if (!std::isfinite(value)) {
        throw NumericError("training diverged: non-finite loss at epoch " + std::to_string(epoch + 1) + ", batch " +
                           std::to_string(batch_no));
      }
      const auto grads = tape.backward(loss);
      std::vector<Tensor<float>> g;
      g.reserve(pass.params.size());
      for (const auto& p : pass.params) g.push_back(grads[p]);
      adam_step(model.params(), g, adam, names);
      loss_sum += value * static_cast<double>(batch.labels.size());
      seen += batch.labels.size();
    }

    // validation: unweighted BCE and per-view accuracy, no augmentation
    const auto probs = predict_views(model, valid_views, cache, config.batch_size);
    double vloss = 0.0;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < valid_views.size(); ++i) {
      const double p = probs[i];
      const bool normal = valid_views[i].label == Label::normal;
      vloss += normal ? -std::log(p) : -std::log(1.0 - p);
      if ((p >= 0.5) == normal) ++correct;
    }
    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.train_loss = loss_sum / static_cast<double>(seen);
    rec.valid_loss = vloss / static_cast<double>(valid_views.size());
    rec.valid_acc = static_cast<double>(correct) / static_cast<double>(valid_views.size());
    if (config.record_wall_time) {
      rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
    result.log.epochs.push_back(rec);

    if (rec.valid_loss < best_valid) {
      best_valid = rec.valid_loss;
      since_best = 0;
      result.best_model = model;
      if (config.checkpoint_path) save_checkpoint(model, *config.checkpoint_path);
    } else {
      ++since_best;
    }
    if (config.on_epoch && !config.on_epoch(model, rec)) break;
    if (config.patience && since_best >= *config.patience) break;
  }
  result.model = std::move(model);
  return result;
}

/// TrainLog as CSV: epoch,train_loss,valid_loss,valid_acc,seconds
inline std::string train_log_csv(const TrainLog& log) {
  std::ostringstream os;
  os << "epoch,train_loss,valid_loss,valid_acc,seconds\n";
  os << std::setprecision(9);
  for (const auto& e : log.epochs) {
    os << e.epoch << ',' << e.train_loss << ',' << e.valid_loss << ',' << e.valid_acc << ',' << std::fixed
       << std::setprecision(3) << e.seconds << std::defaultfloat << std::setprecision(9) << '\n';
  }
  return os.str();
}

inline void write_train_log_csv(const TrainLog& log, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write training log " + path.string());
  out << train_log_csv(log);
}

}  // namespace bonecheck
