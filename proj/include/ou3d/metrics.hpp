#pragma once

#include "ou3d/common.hpp"

#include <optional>
#include <span>

namespace ou3d {

// Rows are ground truth, columns predictions.
struct ConfusionMatrix {
  std::size_t classes = 0;
  std::vector<std::uint64_t> counts;

  explicit ConfusionMatrix(std::size_t n = 0) : classes(n), counts(n * n, 0) {}

  std::uint64_t at(std::size_t truth, std::size_t pred) const { return counts[truth * classes + pred]; }
  std::uint64_t& at(std::size_t truth, std::size_t pred) { return counts[truth * classes + pred]; }

  std::uint64_t tp(std::size_t i) const { return at(i, i); }
  std::uint64_t fn(std::size_t i) const {
    std::uint64_t s = 0;
    for (std::size_t j = 0; j < classes; ++j) s += j == i ? 0 : at(i, j);
    return s;
  }
  std::uint64_t fp(std::size_t i) const {
    std::uint64_t s = 0;
    for (std::size_t j = 0; j < classes; ++j) s += j == i ? 0 : at(j, i);
    return s;
  }
  std::uint64_t total() const {
    std::uint64_t s = 0;
    for (auto c : counts) s += c;
    return s;
  }
};

struct Evaluation {
  double miou = 0, macc = 0, oa = 0;
  // NaN for classes absent from both truth and prediction.
  std::vector<double> iou;
  std::vector<double> acc;
  ConfusionMatrix confusion;
  std::size_t evaluated = 0;
};

// `filter`, when given, selects the points to score (nonzero = include).
// Classes with TP + FP + FN = 0 are left out of the mIoU / mAcc means;
// classes with no truth points but some predictions count with IoU 0 and
// are left out of mAcc only.
inline Evaluation evaluate(std::span<const std::int32_t> pred, std::span<const std::int32_t> truth,
                           std::size_t class_count, std::span<const std::uint8_t> filter = {}) {
  if (pred.size() != truth.size())
    throw Error("evaluate: prediction/label length mismatch (" + std::to_string(pred.size()) + " vs " +
                std::to_string(truth.size()) + ")");
  if (!filter.empty() && filter.size() != pred.size()) throw Error("evaluate: filter length mismatch");
  if (class_count == 0) throw Error("evaluate: zero classes");
  Evaluation ev;
  ev.confusion = ConfusionMatrix(class_count);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (!filter.empty() && !filter[i]) continue;
    const auto t = truth[i], p = pred[i];
    if (t < 0 || p < 0 || std::size_t(t) >= class_count || std::size_t(p) >= class_count)
      throw Error("evaluate: label out of range at index " + std::to_string(i));
    ++ev.confusion.at(std::size_t(t), std::size_t(p));
    ++ev.evaluated;
  }
  const double nan = std::numeric_limits<double>::quiet_NaN();
  ev.iou.assign(class_count, nan);
  ev.acc.assign(class_count, nan);
  double iou_sum = 0, acc_sum = 0, tp_sum = 0;
  std::size_t iou_n = 0, acc_n = 0;
  for (std::size_t c = 0; c < class_count; ++c) {
    const double tp = double(ev.confusion.tp(c)), fp = double(ev.confusion.fp(c)), fn = double(ev.confusion.fn(c));
    tp_sum += tp;
    if (tp + fp + fn > 0) {
      ev.iou[c] = tp / (tp + fp + fn);
      iou_sum += ev.iou[c];
      ++iou_n;
    }
    if (tp + fn > 0) {
      ev.acc[c] = tp / (tp + fn);
      acc_sum += ev.acc[c];
      ++acc_n;
    }
  }
  ev.miou = iou_n ? iou_sum / double(iou_n) : nan;
  ev.macc = acc_n ? acc_sum / double(acc_n) : nan;
  ev.oa = ev.evaluated ? tp_sum / double(ev.evaluated) : nan;
  return ev;
}

}  // namespace ou3d
