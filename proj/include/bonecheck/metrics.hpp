#pragma once

// Binary classification metrics. The positive class is "abnormal".

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include "bonecheck/error.hpp"

namespace bonecheck {

struct ConfusionMatrix {
  std::size_t tp = 0;  // abnormal called abnormal
  std::size_t fn = 0;  // abnormal called normal
  std::size_t fp = 0;  // normal called abnormal
  std::size_t tn = 0;  // normal called normal

  std::size_t total() const { return tp + fn + fp + tn; }

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;
};

/// Ratios with a zero denominator are absent rather than 0.
struct BasicMetrics {
  double accuracy = 0.0;
  std::optional<double> precision;
  std::optional<double> recall;  // == sensitivity
  std::optional<double> specificity;
  std::optional<double> f1;

  std::optional<double> sensitivity() const { return recall; }
};

namespace detail {
inline std::optional<double> ratio(std::size_t num, std::size_t den) {
  if (den == 0) return std::nullopt;
  return static_cast<double>(num) / static_cast<double>(den);
}
}  // namespace detail

inline BasicMetrics basic_metrics(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw InvalidArgument("metrics of an empty confusion matrix");
  BasicMetrics m;
  m.accuracy = static_cast<double>(cm.tp + cm.tn) / static_cast<double>(cm.total());
  m.precision = detail::ratio(cm.tp, cm.tp + cm.fp);
  m.recall = detail::ratio(cm.tp, cm.tp + cm.fn);
  m.specificity = detail::ratio(cm.tn, cm.tn + cm.fp);
  m.f1 = detail::ratio(2 * cm.tp, 2 * cm.tp + cm.fp + cm.fn);
  return m;
}

/// Cohen's kappa (p_o - p_e) / (1 - p_e) with chance agreement from the
/// marginals. Degenerate marginals (p_e == 1) give 0.
inline double cohen_kappa(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw InvalidArgument("kappa of an empty confusion matrix");
  const double n = static_cast<double>(cm.total());
  const double tp = static_cast<double>(cm.tp), fn = static_cast<double>(cm.fn);
  const double fp = static_cast<double>(cm.fp), tn = static_cast<double>(cm.tn);
  const double p_o = (tp + tn) / n;
  const double p_e = ((tp + fp) * (tp + fn) + (fn + tn) * (fp + tn)) / (n * n);
  if (p_e >= 1.0) return 0.0;
  return (p_o - p_e) / (1.0 - p_e);
}

/// Area under the ROC curve by the trapezoid rule over distinct score
/// thresholds. `scores` are abnormality scores; `is_abnormal` marks positives.
inline double auroc(std::span<const double> scores, std::span<const bool> is_abnormal) {
  if (scores.size() != is_abnormal.size()) throw InvalidArgument("auroc: scores and truths differ in length");
  const auto pos = static_cast<std::size_t>(std::count(is_abnormal.begin(), is_abnormal.end(), true));
  const std::size_t neg = scores.size() - pos;
  if (pos == 0 || neg == 0) throw InvalidArgument("auroc needs at least one abnormal and one normal case");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  // Walk thresholds from high to low; tied scores move the ROC point diagonally.
  double area = 0.0;
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i, dtp = 0, dfp = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      if (is_abnormal[order[j]]) ++dtp;
      else ++dfp;
      ++j;
    }
    area += static_cast<double>(dfp) * (static_cast<double>(tp) + static_cast<double>(dtp) / 2.0);
    tp += dtp;
    fp += dfp;
    i = j;
  }
  return area / (static_cast<double>(pos) * static_cast<double>(neg));
}

}  // namespace bonecheck
