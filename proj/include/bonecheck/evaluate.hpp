#pragma once

// Per-encounter evaluation: view inference, study aggregation, thresholding
// and per-study-type metric reports.

#include <cstdio>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "bonecheck/dataset.hpp"
#include "bonecheck/metrics.hpp"
#include "bonecheck/model.hpp"
#include "bonecheck/train.hpp"
#include "json.hpp"

namespace bonecheck {

/// Mean of per-view p(normal).
inline double aggregate_study(std::span<const double> view_probs) {
  if (view_probs.empty()) throw InvalidArgument("aggregate_study: a study needs at least one view");
  for (double p : view_probs) {
    if (!(p >= 0.0 && p <= 1.0)) throw InvalidArgument("aggregate_study: probability " + std::to_string(p) + " outside [0,1]");
  }
  return std::accumulate(view_probs.begin(), view_probs.end(), 0.0) / static_cast<double>(view_probs.size());
}

/// p(normal) below 0.5 is abnormal; 0.5 itself is normal.
inline Label decide(double study_prob) { return study_prob < 0.5 ? Label::abnormal : Label::normal; }

struct StudyPrediction {
  std::string study_id;
  StudyType study_type = StudyType::elbow;
  Label truth = Label::normal;
  std::vector<double> view_probs;
  double study_prob = 0.0;
  Label decision = Label::normal;

  double abnormality() const { return 1.0 - study_prob; }
};

inline StudyPrediction make_prediction(const StudyRecord& study, std::vector<double> view_probs) {
  StudyPrediction p;
  p.study_id = study.id();
  p.study_type = study.study_type;
  p.truth = study.label;
  p.study_prob = aggregate_study(view_probs);
  p.view_probs = std::move(view_probs);
  p.decision = decide(p.study_prob);
  return p;
}

inline ConfusionMatrix confusion(std::span<const StudyPrediction> predictions) {
  if (predictions.empty()) throw InvalidArgument("confusion: no predictions");
  ConfusionMatrix cm;
  for (const auto& p : predictions) {
    const bool truly_abnormal = p.truth == Label::abnormal;
    const bool called_abnormal = p.decision == Label::abnormal;
    if (truly_abnormal && called_abnormal) ++cm.tp;
    else if (truly_abnormal) ++cm.fn;
    else if (called_abnormal) ++cm.fp;
    else ++cm.tn;
  }
  return cm;
}

struct MetricsRow {
  std::optional<StudyType> study_type;  // empty for the overall row
  std::size_t n = 0;
  ConfusionMatrix cm;
  BasicMetrics basic;
  double kappa = 0.0;
  std::optional<double> auroc;  // absent when only one class is present

  std::string label() const { return study_type ? std::string(to_string(*study_type)) : "overall"; }
};

struct MetricsReport {
  std::string split;
  std::vector<MetricsRow> rows;  // canonical study-type order, present types only
  MetricsRow overall;
};

inline MetricsRow metrics_row(std::span<const StudyPrediction> predictions, std::optional<StudyType> type) {
  MetricsRow row;
  row.study_type = type;
  row.n = predictions.size();
  row.cm = confusion(predictions);
  row.basic = basic_metrics(row.cm);
  row.kappa = cohen_kappa(row.cm);
  std::vector<double> scores;
  auto truth = std::make_unique<bool[]>(predictions.size());
  std::size_t positives = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    scores.push_back(predictions[i].abnormality());
    truth[i] = predictions[i].truth == Label::abnormal;
    positives += truth[i] ? 1 : 0;
  }
  if (positives > 0 && positives < predictions.size()) {
    row.auroc = auroc(scores, std::span<const bool>(truth.get(), predictions.size()));
  }
  return row;
}

inline MetricsReport build_report(std::span<const StudyPrediction> predictions, const std::string& split) {
  if (predictions.empty()) throw InvalidArgument("cannot report on an empty split");
  MetricsReport report;
  report.split = split;
  for (StudyType t : kStudyTypes) {
    std::vector<StudyPrediction> subset;
    for (const auto& p : predictions) {
      if (p.study_type == t) subset.push_back(p);
    }
    if (!subset.empty()) report.rows.push_back(metrics_row(subset, t));
  }
  report.overall = metrics_row(predictions, std::nullopt);
  return report;
}

struct Evaluation {
  std::vector<StudyPrediction> predictions;  // manifest order
  MetricsReport report;
};

/// Runs the model on every view of every study (rescale and resize only).
inline std::vector<StudyPrediction> predict_studies(const Model<float>& model, const DatasetManifest& manifest,
                                                    std::size_t batch_size = 32) {
  const Shape& in = model.graph().input_shape();
  ImageCache cache(in[1], in[2]);
  std::vector<StudyPrediction> out;
  out.reserve(manifest.studies.size());
  for (const auto& study : manifest.studies) {
    std::vector<ViewSample> views;
    for (const auto& v : study.view_paths) views.push_back(ViewSample{v, study.study_type, study.id(), study.label, 1.0f});
    try {
      out.push_back(make_prediction(study, predict_views(model, views, cache, batch_size)));
    } catch (const Error& e) {
      throw DataError("study " + study.id() + ": " + e.what());
    }
  }
  return out;
}

inline Evaluation evaluate(const Model<float>& model, const DatasetManifest& manifest) {
  if (manifest.studies.empty()) throw DataError("split '" + manifest.split + "' has no studies");
  Evaluation ev;
  ev.predictions = predict_studies(model, manifest);
  ev.report = build_report(ev.predictions, manifest.split);
  return ev;
}

namespace detail {
inline nlohmann::json opt_json(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

inline nlohmann::json row_json(const MetricsRow& r) {
  return {{"study_type", r.label()},
          {"n", r.n},
          {"kappa", r.kappa},
          {"precision", opt_json(r.basic.precision)},
          {"recall", opt_json(r.basic.recall)},
          {"sensitivity", opt_json(r.basic.sensitivity())},
          {"specificity", opt_json(r.basic.specificity)},
          {"f1", opt_json(r.basic.f1)},
          {"auroc", opt_json(r.auroc)},
          {"accuracy", r.basic.accuracy},
          {"confusion", {{"tp", r.cm.tp}, {"fn", r.cm.fn}, {"fp", r.cm.fp}, {"tn", r.cm.tn}}}};
}

inline std::string fmt4(const std::optional<double>& v) {
  if (!v) return "-";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", *v);
  return buf;
}
}  // namespace detail

/// {split, rows:[{study_type, n, kappa, precision, recall, sensitivity,
/// specificity, f1, auroc, accuracy, confusion}], overall:{...}}.
/// Absent metrics are null.
inline nlohmann::json report_json(const MetricsReport& report) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : report.rows) rows.push_back(detail::row_json(r));
  return {{"split", report.split}, {"rows", rows}, {"overall", detail::row_json(report.overall)}};
}

/// Human-readable table: one line per study type plus overall, led by
/// "kappa (precision, recall)".
inline std::string report_table(const MetricsReport& report) {
  std::ostringstream os;
  char line[256];
  std::snprintf(line, sizeof line, "%-10s %5s  %-26s %8s %8s %8s %8s %8s\n", "study", "n", "kappa (precision, recall)",
                "accuracy", "sens", "spec", "f1", "auroc");
  os << "split: " << report.split << '\n' << line;
  auto emit = [&](const MetricsRow& r) {
    const std::string head = detail::fmt4(r.kappa) + " (" + detail::fmt4(r.basic.precision) + ", " +
                             detail::fmt4(r.basic.recall) + ")";
    std::snprintf(line, sizeof line, "%-10s %5zu  %-26s %8s %8s %8s %8s %8s\n", r.label().c_str(), r.n, head.c_str(),
                  detail::fmt4(r.basic.accuracy).c_str(), detail::fmt4(r.basic.sensitivity()).c_str(),
                  detail::fmt4(r.basic.specificity).c_str(), detail::fmt4(r.basic.f1).c_str(),
                  detail::fmt4(r.auroc).c_str());
    os << line;
  };
  for (const auto& r : report.rows) emit(r);
  emit(report.overall);
  return os.str();
}

/// study_id,study_type,truth,study_prob,decision
inline std::string predictions_csv(std::span<const StudyPrediction> predictions) {
  std::ostringstream os;
  os << "study_id,study_type,truth,study_prob,decision\n";
  char prob[40];
  for (const auto& p : predictions) {
    std::snprintf(prob, sizeof prob, "%.9g", p.study_prob);
    os << p.study_id << ',' << to_string(p.study_type) << ',' << to_string(p.truth) << ',' << prob << ','
       << to_string(p.decision) << '\n';
  }
  return os.str();
}

}  // namespace bonecheck
