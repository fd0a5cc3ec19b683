#include "pretune/metrics.hpp"

#include <cmath>
#include <limits>

namespace pretune {

DiceResult dice_score(const SegmentationMask& pred, const SegmentationMask& target) {
  if (!(pred.dims == target.dims)) throw ShapeError("dice_score: dims mismatch");
  DiceResult r;
  for (int label = 1; label <= 2; ++label) {
    int64_t inter = 0, np = 0, ng = 0;
    for (size_t i = 0; i < pred.labels.size(); ++i) {
      const bool p = pred.labels[i] == label;
      const bool g = target.labels[i] == label;
      inter += p && g;
      np += p;
      ng += g;
    }
    r.per_label[label - 1] =
        (np + ng == 0) ? 1.0 : 2.0 * static_cast<double>(inter) / static_cast<double>(np + ng);
  }
  r.average = 0.5 * (r.per_label[0] + r.per_label[1]);
  return r;
}

namespace {

struct SurfaceVoxel {
  int32_t z, y, x;
};

std::vector<SurfaceVoxel> surface(const SegmentationMask& m, uint8_t label) {
  std::vector<SurfaceVoxel> out;
  const auto d = m.dims.d, h = m.dims.h, w = m.dims.w;
  auto is_label = [&](int64_t z, int64_t y, int64_t x) {
    return z >= 0 && z < d && y >= 0 && y < h && x >= 0 && x < w && m.at(z, y, x) == label;
  };
  for (int64_t z = 0; z < d; ++z) {
    for (int64_t y = 0; y < h; ++y) {
      for (int64_t x = 0; x < w; ++x) {
        if (m.at(z, y, x) != label) continue;
        if (!is_label(z - 1, y, x) || !is_label(z + 1, y, x) || !is_label(z, y - 1, x) ||
            !is_label(z, y + 1, x) || !is_label(z, y, x - 1) || !is_label(z, y, x + 1)) {
          out.push_back({static_cast<int32_t>(z), static_cast<int32_t>(y), static_cast<int32_t>(x)});
        }
      }
    }
  }
  return out;
}

// max over `from` of min squared distance to `to`. A point whose running
// minimum falls below the incumbent maximum cannot raise it, so its scan
// stops early; the result stays exact.
double directed_max_min_sq(const std::vector<SurfaceVoxel>& from,
                           const std::vector<SurfaceVoxel>& to, const Spacing& s) {
  double worst = 0.0;
  for (const auto& p : from) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& q : to) {
      const double dz = (p.z - q.z) * s.d;
      const double dy = (p.y - q.y) * s.h;
      const double dx = (p.x - q.x) * s.w;
      const double d2 = dz * dz + dy * dy + dx * dx;
      if (d2 < best) {
        best = d2;
        if (best <= worst) break;
      }
    }
    if (best > worst) worst = best;
  }
  return worst;
}

}  // namespace

HausdorffResult hausdorff_distance(const SegmentationMask& pred, const SegmentationMask& target,
                                   const Spacing& spacing) {
  if (!(pred.dims == target.dims)) throw ShapeError("hausdorff: dims mismatch");
  if (spacing.d <= 0 || spacing.h <= 0 || spacing.w <= 0) {
    throw ConfigError("hausdorff: spacing must be positive");
  }
  HausdorffResult r;
  double sum = 0;
  int defined = 0;
  for (int label = 1; label <= 2; ++label) {
    const auto a = surface(pred, static_cast<uint8_t>(label));
    const auto b = surface(target, static_cast<uint8_t>(label));
    if (a.empty() || b.empty()) continue;  // undefined, reported as n/a
    const double d2 =
        std::max(directed_max_min_sq(a, b, spacing), directed_max_min_sq(b, a, spacing));
    r.per_label_mm[label - 1] = std::sqrt(d2);
    sum += *r.per_label_mm[label - 1];
    ++defined;
  }
  if (defined > 0) r.average_mm = sum / defined;
  return r;
}

ClassificationMetrics classification_metrics(const std::vector<std::array<double, 3>>& logits,
                                             const std::vector<int64_t>& labels) {
  if (logits.size() != labels.size() || logits.empty()) {
    throw ShapeError("classification_metrics: logits/labels size mismatch");
  }
  ClassificationMetrics m;
  int64_t correct = 0;
  for (size_t i = 0; i < logits.size(); ++i) {
    int64_t pred = 0;
    for (int64_t k = 1; k < 3; ++k) {
      if (logits[i][k] > logits[i][pred]) pred = k;
    }
    if (labels[i] < 0 || labels[i] > 2) throw ShapeError("classification_metrics: label out of range");
    m.confusion[labels[i]][pred] += 1;
    correct += pred == labels[i];
  }
  m.accuracy = static_cast<double>(correct) / static_cast<double>(labels.size());

  double f1_sum = 0;
  for (int64_t k = 0; k < 3; ++k) {
    int64_t tp = m.confusion[k][k], fp = 0, fn = 0;
    for (int64_t j = 0; j < 3; ++j) {
      if (j != k) {
        fp += m.confusion[j][k];
        fn += m.confusion[k][j];
      }
    }
    const int64_t denom = 2 * tp + fp + fn;
    f1_sum += denom == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
  }
  m.macro_f1 = f1_sum / 3.0;
  return m;
}

}  // namespace pretune
