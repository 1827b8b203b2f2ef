#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <numeric>
#include <vector>

#include "flex/box.hpp"
#include "flex/synthgen.hpp"

namespace flex {

struct Detection {
  std::size_t image = 0;
  int cls = 0;
  double score = 0.0;
  RoI box;
};

inline constexpr std::size_t kIouThresholds = 10;  // 0.50:0.05:0.95

inline double iou_threshold(std::size_t t) { return 0.5 + 0.05 * static_cast<double>(t); }

struct EvalReport {
  double ap50 = 0.0;
  double ap75 = 0.0;
  double map = 0.0;                                  // mean of the 10 threshold APs
  std::array<double, kIouThresholds> ap_at{};        // per threshold, class-averaged
  std::vector<double> per_class;                     // mean over thresholds; -1 when class has no ground truth
  std::size_t fallbacks = 0;
};

/// 101-point interpolated AP from confidence-ordered TP flags.
inline double interpolated_ap(const std::vector<bool>& tp_in_order, std::size_t positives) {
  if (positives == 0) return 0.0;
  const std::size_t n = tp_in_order.size();
  std::vector<double> precision(n), recall(n);
  std::size_t tp = 0;
  for (std::size_t i = 0; i < n; ++i) {
    tp += tp_in_order[i] ? 1 : 0;
    precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
    recall[i] = static_cast<double>(tp) / static_cast<double>(positives);
  }
  for (std::size_t i = n; i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double sum = 0.0;
  for (int r = 0; r <= 100; ++r) {
    const double level = r / 100.0;
    const auto it = std::lower_bound(recall.begin(), recall.end(), level - 1e-12);
    if (it != recall.end()) sum += precision[static_cast<std::size_t>(it - recall.begin())];
  }
  return sum / 101.0;
}

/// Greedy confidence-ordered matching per class and IoU threshold.
inline EvalReport evaluate_detections(const std::vector<Detection>& detections,
                                      const std::vector<std::vector<Annotation>>& ground_truth,
                                      std::size_t num_classes) {
  EvalReport report;
  report.per_class.assign(num_classes, -1.0);
  std::vector<std::size_t> order(detections.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return detections[a].score > detections[b].score; });

  std::array<double, kIouThresholds> sum_ap{};
  std::size_t classes_with_gt = 0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    std::size_t positives = 0;
    for (const auto& img : ground_truth)
      for (const auto& a : img) positives += static_cast<std::size_t>(a.cls) == c ? 1 : 0;
    if (positives == 0) continue;
    ++classes_with_gt;
    double class_sum = 0.0;
    for (std::size_t t = 0; t < kIouThresholds; ++t) {
      const double thr = iou_threshold(t);
      std::vector<std::vector<bool>> matched(ground_truth.size());
      for (std::size_t i = 0; i < ground_truth.size(); ++i) matched[i].assign(ground_truth[i].size(), false);
      std::vector<bool> tp;
      for (std::size_t idx : order) {
        const Detection& d = detections[idx];
        if (static_cast<std::size_t>(d.cls) != c) continue;
        const auto& gts = ground_truth.at(d.image);
        double best = thr;
        std::ptrdiff_t best_j = -1;
        for (std::size_t j = 0; j < gts.size(); ++j) {
          if (static_cast<std::size_t>(gts[j].cls) != c || matched[d.image][j]) continue;
          const double v = iou(d.box, gts[j].box);
          if (v >= best) {
            best = v;
            best_j = static_cast<std::ptrdiff_t>(j);
          }
        }
        if (best_j >= 0) matched[d.image][static_cast<std::size_t>(best_j)] = true;
        tp.push_back(best_j >= 0);
      }
      const double ap = interpolated_ap(tp, positives);
      sum_ap[t] += ap;
      class_sum += ap;
    }
    report.per_class[c] = class_sum / static_cast<double>(kIouThresholds);
  }
  if (classes_with_gt == 0) return report;
  double total = 0.0;
  for (std::size_t t = 0; t < kIouThresholds; ++t) {
    report.ap_at[t] = sum_ap[t] / static_cast<double>(classes_with_gt);
    total += report.ap_at[t];
  }
  report.ap50 = report.ap_at[0];
  report.ap75 = report.ap_at[5];
  report.map = total / static_cast<double>(kIouThresholds);
  return report;
}

}  // namespace flex
