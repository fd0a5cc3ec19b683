#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

#include "pretune/volume.hpp"

namespace pretune {

struct DiceResult {
  std::array<double, 2> per_label{};  // labels 1 and 2
  double average = 0.0;
};

// 2|P∩G| / (|P|+|G|) per foreground label; empty-both convention 1.0.
DiceResult dice_score(const SegmentationMask& pred, const SegmentationMask& target);

struct HausdorffResult {
  // one entry per foreground label; nullopt when either surface is empty
  std::array<std::optional<double>, 2> per_label_mm{};
  std::optional<double> average_mm;
};

// Symmetric Hausdorff between boundary surfaces (6-connectivity), scaled by
// voxel spacing. Empty-surface cases come back as "undefined" rather than
// throwing; a run reports them as n/a.
HausdorffResult hausdorff_distance(const SegmentationMask& pred, const SegmentationMask& target,
                                   const Spacing& spacing);

struct ClassificationMetrics {
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  std::array<std::array<int64_t, 3>, 3> confusion{};  // [truth][prediction]
};

// Argmax decision; macro-F1 over the three classes (per-class F1 is 0 when
// its denominator is empty).
ClassificationMetrics classification_metrics(const std::vector<std::array<double, 3>>& logits,
                                             const std::vector<int64_t>& labels);

// Accuracy/cost row for one trained model. NaN marks "not applicable".
struct MetricReport {
  std::array<double, 2> dice_per_label{std::nan(""), std::nan("")};
  double dice_avg = std::nan("");
  std::array<double, 2> hausdorff_mm{std::nan(""), std::nan("")};
  double hausdorff_avg_mm = std::nan("");
  double ms_ssim = std::nan("");
  double cls_accuracy = std::nan("");
  double cls_macro_f1 = std::nan("");
  std::array<std::array<int64_t, 3>, 3> confusion{};
};

}  // namespace pretune
