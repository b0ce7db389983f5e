#pragma once

// Command-line front end. Exit codes: 0 success, 1 runtime failure,
// 2 bad flags or unknown architecture.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "bonecheck/checkpoint.hpp"
#include "bonecheck/dataset.hpp"
#include "bonecheck/evaluate.hpp"
#include "bonecheck/gradcam.hpp"
#include "bonecheck/service.hpp"
#include "bonecheck/synthetic.hpp"
#include "bonecheck/train.hpp"
#include "bonecheck/zoo.hpp"

namespace bonecheck {

namespace cli {

inline constexpr int kOk = 0;
inline constexpr int kFailure = 1;
inline constexpr int kUsage = 2;

struct GenDataOptions {
  std::string out;
  std::uint64_t seed = 0;
  std::size_t train_studies = 2;
  std::size_t valid_studies = 1;
  std::size_t min_views = 1;
  std::size_t max_views = 3;
  std::size_t image_size = 64;
  std::string types;
  double gap_fraction = 0.12;
  double noise_sd = 8.0;
};

struct TrainOptions {
  std::string arch;
  std::string config;
  std::string name;
  std::string data;
  std::string train_split = "train";
  std::string valid_split = "valid";
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  double lr = 1e-4;
  std::size_t image_size = 64;
  bool no_augment = false;
  bool no_class_weights = false;
  bool record_time = false;
  std::string out;
  std::string log;
};

struct EvalOptions {
  std::string model;
  std::string ensemble;
  std::string name = "ensemble";
  std::string data;
  std::string split = "valid";
  std::string out;
  std::string predictions;
};

struct PredictOptions {
  std::vector<std::string> models;
  std::string image;
  bool cam = false;
  bool json = false;
  std::string out;
};

struct ServeOptions {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::vector<std::string> models;
  std::size_t max_upload_bytes = kDefaultUploadLimit;
  bool no_cam = false;
};

inline std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline int gen_data(const GenDataOptions& o, std::ostream& out) {
  SyntheticSpec spec;
  spec.train_studies = o.train_studies;
  spec.valid_studies = o.valid_studies;
  spec.min_views = o.min_views;
  spec.max_views = o.max_views;
  spec.image_size = o.image_size;
  spec.gap_fraction = o.gap_fraction;
  spec.noise_sd = o.noise_sd;
  if (!o.types.empty()) {
    spec.types.clear();
    for (const auto& t : detail::split_list(o.types)) {
      auto parsed = study_type_from_string(t);
      if (!parsed) throw InvalidArgument("unknown study type '" + t + "'");
      spec.types.push_back(*parsed);
    }
  }
  const auto ledger = generate_synthetic_dataset(spec, o.seed, o.out);
  out << "wrote " << ledger.studies << " studies, " << ledger.images << " images to " << o.out << '\n';
  for (const auto& [split, counts] : ledger.counts) {
    for (const auto& [key, n] : counts) {
      out << "  " << split << ' ' << to_string(key.first) << ' ' << to_string(key.second) << ": " << n << '\n';
    }
  }
  return kOk;
}

inline int train_cmd(const TrainOptions& o, std::ostream& out, std::ostream& err) {
  ArchConfig cfg;
  if (!o.config.empty()) cfg = load_arch_config(o.config);
  else cfg.input_size = {1, o.image_size, o.image_size};
  if (!o.arch.empty()) cfg.arch = o.arch;
  if (!is_architecture(cfg.arch)) {
    err << "unknown architecture '" << cfg.arch << "'; valid: " << architecture_list() << '\n';
    return kUsage;
  }
  if (!o.name.empty()) cfg.name = o.name;
  cfg.seed = o.seed;
  cfg.validate();

  const auto train_set = scan_dataset(o.data, o.train_split);
  const auto valid_set = scan_dataset(o.data, o.valid_split);
  check_disjoint(train_set, valid_set);

  TrainConfig tc;
  tc.epochs = o.epochs;
  tc.batch_size = o.batch_size;
  tc.seed = o.seed;
  tc.adam.lr = o.lr;
  tc.augment = !o.no_augment;
  tc.class_weighting = !o.no_class_weights;
  tc.record_wall_time = o.record_time;
  tc.checkpoint_path = fs::path(o.out);
  tc.on_epoch = [&](const Model<float>&, const EpochRecord& r) {
    out << "epoch " << r.epoch << " train_loss " << r.train_loss << " valid_loss " << r.valid_loss << " valid_acc "
        << r.valid_acc << '\n';
    return true;
  };
  const auto result = train(build_model<float>(cfg), train_set, valid_set, tc);
  const fs::path log = o.log.empty() ? fs::path(o.out).replace_extension(".log.csv") : fs::path(o.log);
  write_train_log_csv(result.log, log);
  out << "checkpoint " << o.out << "\nlog " << log.string() << '\n';
  return kOk;
}

inline int eval_cmd(const EvalOptions& o, std::ostream& out) {
  if (o.model.empty() == o.ensemble.empty()) throw InvalidArgument("give exactly one of --model or --ensemble");
  std::vector<fs::path> paths;
  if (!o.model.empty()) paths.push_back(o.model);
  for (const auto& p : detail::split_list(o.ensemble)) paths.push_back(p);
  const Model<float> model = load_model_or_ensemble(paths, o.name);
  const auto manifest = scan_dataset(o.data, o.split);
  const Evaluation ev = evaluate(model, manifest);
  out << report_table(ev.report);
  if (!o.out.empty()) {
    std::ofstream f(o.out, std::ios::trunc);
    if (!f) throw DataError("cannot write report " + o.out);
    f << report_json(ev.report).dump(2) << '\n';
  }
  if (!o.predictions.empty()) {
    std::ofstream f(o.predictions, std::ios::trunc);
    if (!f) throw DataError("cannot write predictions " + o.predictions);
    f << predictions_csv(ev.predictions);
  }
  return kOk;
}

inline int predict_cmd(const PredictOptions& o, std::ostream& out) {
  if (o.cam && o.out.empty()) throw InvalidArgument("--cam needs --out for the overlay images");
  GrayImage image = read_png(o.image);
  std::vector<LoadedModel> models;
  for (const auto& entry : o.models) {
    auto [name, paths] = parse_registry_entry(entry);
    models.push_back(LoadedModel{name, load_model_or_ensemble(paths, name)});
  }
  if (o.cam) fs::create_directories(o.out);
  nlohmann::json all = nlohmann::json::array();
  for (const auto& m : models) {
    PredictResponse r = predict_image(m, image, false);
    if (o.cam) {
      const Label decision = decide(r.probability_normal);
      const fs::path file = fs::path(o.out) / (m.name + "_cam.png");
      write_file_bytes(file, encode_png(overlay(decision_cam(m.model, image, decision), image)));
    }
    if (o.json) {
      nlohmann::json j = r.to_json();
      j.erase("elapsed_ms");
      all.push_back(j);
    } else {
      out << m.name << " probability_normal=" << fmt17(r.probability_normal)
          << " probability_abnormal=" << fmt17(r.probability_abnormal) << " decision=" << r.decision << '\n';
    }
  }
  if (o.json) out << all.dump() << '\n';
  return kOk;
}

inline int serve_cmd(const ServeOptions& o, std::ostream& out) {
  ServiceConfig config;
  config.host = o.host;
  config.port = o.port;
  config.max_upload_bytes = o.max_upload_bytes;
  config.cam_enabled = !o.no_cam;
  for (const auto& entry : o.models) {
    auto [name, paths] = parse_registry_entry(entry);
    config.registry[name] = paths;
  }
  apply_models_dir(config);
  PredictionService service(config);
  const int port = service.bind(config.host, config.port);
  if (port < 0) throw Error("cannot bind " + config.host + ":" + std::to_string(config.port));
  out << "serving " << service.registry().names().size() << " model(s) on http://" << config.host << ':' << port
      << std::endl;
  return service.run() ? kOk : kFailure;
}

}  // namespace cli

/// Entry point shared by the executable and the tests.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"bonecheck: musculoskeletal radiograph abnormality detection"};
  app.require_subcommand(1);

  cli::GenDataOptions gen;
  auto* g = app.add_subcommand("gen-data", "Generate a seeded synthetic radiograph dataset");
  g->add_option("--out", gen.out, "Output root")->required();
  g->add_option("--seed", gen.seed, "Random seed");
  g->add_option("--train-studies", gen.train_studies, "Train studies per study type per label");
  g->add_option("--valid-studies", gen.valid_studies, "Valid studies per study type per label");
  g->add_option("--min-views", gen.min_views, "Minimum views per study");
  g->add_option("--max-views", gen.max_views, "Maximum views per study");
  g->add_option("--image-size", gen.image_size, "Square image size in pixels");
  g->add_option("--types", gen.types, "Comma-separated study types (default: all seven)");
  g->add_option("--gap-fraction", gen.gap_fraction, "Fracture gap length as a fraction of image size");
  g->add_option("--noise-sd", gen.noise_sd, "Pixel noise standard deviation");

  cli::TrainOptions tr;
  auto* t = app.add_subcommand("train", "Train a micro-architecture");
  t->add_option("--arch", tr.arch, "Architecture: " + architecture_list());
  t->add_option("--config", tr.config, "Architecture config file (key = value)");
  t->add_option("--name", tr.name, "Model name (default: the architecture)");
  t->add_option("--data", tr.data, "Dataset root")->required();
  t->add_option("--train-split", tr.train_split, "Training split directory");
  t->add_option("--valid-split", tr.valid_split, "Validation split directory");
  t->add_option("--epochs", tr.epochs, "Epochs");
  t->add_option("--batch-size", tr.batch_size, "Batch size");
  t->add_option("--seed", tr.seed, "Seed for initialization, shuffling and augmentation");
  t->add_option("--lr", tr.lr, "Adam learning rate");
  t->add_option("--image-size", tr.image_size, "Square input size when no --config is given");
  t->add_flag("--no-augment", tr.no_augment, "Disable flip/rotation augmentation");
  t->add_flag("--no-class-weights", tr.no_class_weights, "Disable class-balanced loss weights");
  t->add_flag("--record-time", tr.record_time, "Record wall time per epoch in the log");
  t->add_option("--out", tr.out, "Checkpoint path (best validation loss)")->required();
  t->add_option("--log", tr.log, "Training log CSV (default: <out>.log.csv)");

  cli::EvalOptions ev;
  auto* e = app.add_subcommand("eval", "Evaluate a model or an average ensemble");
  auto* model_opt = e->add_option("--model", ev.model, "Checkpoint");
  auto* ens_opt = e->add_option("--ensemble", ev.ensemble, "Comma-separated checkpoints");
  model_opt->excludes(ens_opt);
  e->add_option("--name", ev.name, "Ensemble name");
  e->add_option("--data", ev.data, "Dataset root")->required();
  e->add_option("--split", ev.split, "Split to evaluate");
  e->add_option("--out", ev.out, "Report JSON path");
  e->add_option("--predictions", ev.predictions, "Per-study predictions CSV path");

  cli::PredictOptions pr;
  auto* p = app.add_subcommand("predict", "Predict one image with one or more models");
  p->add_option("--model", pr.models, "Checkpoint, or name=a.ckpt[,b.ckpt,...] for an ensemble")->required();
  p->add_option("--image", pr.image, "PNG radiograph")->required();
  p->add_flag("--cam", pr.cam, "Write Grad-CAM overlays");
  p->add_flag("--json", pr.json, "Print results as JSON");
  p->add_option("--out", pr.out, "Directory for overlays");

  cli::ServeOptions sv;
  auto* s = app.add_subcommand("serve", "Run the HTTP prediction service");
  s->add_option("--host", sv.host, "Listen address");
  s->add_option("--port", sv.port, "Listen port (0 picks a free port)");
  s->add_option("--model", sv.models, "Checkpoint, or name=a.ckpt[,b.ckpt,...]");
  s->add_option("--max-upload-bytes", sv.max_upload_bytes, "Upload size limit");
  s->add_flag("--no-cam", sv.no_cam, "Disable Grad-CAM");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& ex) {
    return app.exit(ex, out, err);
  } catch (const CLI::CallForAllHelp& ex) {
    return app.exit(ex, out, err);
  } catch (const CLI::ParseError& ex) {
    app.exit(ex, out, err);
    return cli::kUsage;
  }

  try {
    if (g->parsed()) return cli::gen_data(gen, out);
    if (t->parsed()) return cli::train_cmd(tr, out, err);
    if (e->parsed()) return cli::eval_cmd(ev, out);
    if (p->parsed()) return cli::predict_cmd(pr, out);
    if (s->parsed()) return cli::serve_cmd(sv, out);
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << '\n';
    return cli::kFailure;
  }
  return cli::kUsage;
}

}  // namespace bonecheck
