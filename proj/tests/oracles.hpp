#pragma once

// Independent scalar reference implementations used to check the tensor-graph
// losses and metrics. These deliberately share no code with the library path:
// plain loops, no Tensor, no reuse of library helpers.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

namespace oracle {

struct Grid3 {
  int64_t d, h, w;
  std::vector<double> v;  // depth-major

  double at(int64_t z, int64_t y, int64_t x) const { return v[(z * h + y) * w + x]; }
};

// Windowed SSIM, valid positions, biased (1/n) moments.
inline double ssim(const Grid3& x, const Grid3& y, int64_t win, double c1, double c2) {
  const int64_t zd = x.d - win + 1, yd = x.h - win + 1, xd = x.w - win + 1;
  const double n = static_cast<double>(win * win * win);
  double total = 0;
  int64_t count = 0;
  for (int64_t z0 = 0; z0 < zd; ++z0) {
    for (int64_t y0 = 0; y0 < yd; ++y0) {
      for (int64_t x0 = 0; x0 < xd; ++x0) {
        double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
        for (int64_t z = z0; z < z0 + win; ++z) {
          for (int64_t yy = y0; yy < y0 + win; ++yy) {
            for (int64_t xx = x0; xx < x0 + win; ++xx) {
              const double a = x.at(z, yy, xx), b = y.at(z, yy, xx);
              sx += a;
              sy += b;
              sxx += a * a;
              syy += b * b;
              sxy += a * b;
            }
          }
        }
        const double mx = sx / n, my = sy / n;
        const double vx = sxx / n - mx * mx;
        const double vy = syy / n - my * my;
        const double cxy = sxy / n - mx * my;
        const double num = (2 * mx * my + c1) * (2 * cxy + c2);
        const double den = (mx * mx + my * my + c1) * (vx + vy + c2);
        total += num / den;
        ++count;
      }
    }
  }
  return total / static_cast<double>(count);
}

inline double binary_ce(const std::vector<double>& logits, double target) {
  double acc = 0;
  for (double z : logits) {
    const double p = 1.0 / (1.0 + std::exp(-z));
    acc += -(target * std::log(p) + (1.0 - target) * std::log(1.0 - p));
  }
  return acc / static_cast<double>(logits.size());
}

inline double ntxent(const std::vector<std::vector<double>>& emb, const std::vector<int64_t>& partner,
                     double tau) {
  const auto n2 = static_cast<int64_t>(emb.size());
  auto cos_sim = [&](int64_t i, int64_t j) {
    double dot = 0, ni = 0, nj = 0;
    for (size_t k = 0; k < emb[i].size(); ++k) {
      dot += emb[i][k] * emb[j][k];
      ni += emb[i][k] * emb[i][k];
      nj += emb[j][k] * emb[j][k];
    }
    return dot / (std::sqrt(ni) * std::sqrt(nj));
  };
  double total = 0;
  for (int64_t i = 0; i < n2; ++i) {
    double denom = 0;
    for (int64_t k = 0; k < n2; ++k) {
      if (k == i) continue;
      denom += std::exp(cos_sim(i, k) / tau);
    }
    total += -std::log(std::exp(cos_sim(i, partner[i]) / tau) / denom);
  }
  return total / static_cast<double>(n2);
}

// probs/onehot laid out (N,C,D*H*W) flattened; foreground labels 1..2.
inline double dice_loss(const std::vector<double>& probs, const std::vector<double>& onehot,
                        int64_t n, int64_t classes, int64_t vox, double eps = 1e-5) {
  double acc = 0;
  for (int64_t label = 1; label <= 2; ++label) {
    double inter = 0, psum = 0, gsum = 0;
    for (int64_t i = 0; i < n; ++i) {
      for (int64_t v = 0; v < vox; ++v) {
        const double p = probs[(i * classes + label) * vox + v];
        const double g = onehot[(i * classes + label) * vox + v];
        inter += p * g;
        psum += p;
        gsum += g;
      }
    }
    acc += (2 * inter + eps) / (psum + gsum + eps);
  }
  return 1.0 - acc / 2.0;
}

inline double cross_entropy(const std::vector<std::vector<double>>& logits,
                            const std::vector<int64_t>& targets) {
  double total = 0;
  for (size_t i = 0; i < logits.size(); ++i) {
    double m = logits[i][0];
    for (double z : logits[i]) m = std::max(m, z);
    double lse = 0;
    for (double z : logits[i]) lse += std::exp(z - m);
    total += m + std::log(lse) - logits[i][targets[i]];
  }
  return total / static_cast<double>(logits.size());
}

// Per-label dice score by direct set arithmetic; empty-both convention 1.0.
inline double dice_score(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& target,
                         uint8_t label) {
  int64_t inter = 0, np = 0, ng = 0;
  for (size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] == label, g = target[i] == label;
    inter += p && g;
    np += p;
    ng += g;
  }
  if (np + ng == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(np + ng);
}

struct Voxel {
  int64_t z, y, x;
};

// Boundary voxels under 6-connectivity; out-of-bounds counts as background.
inline std::vector<Voxel> surface_voxels(const std::vector<uint8_t>& labels, int64_t d, int64_t h,
                                         int64_t w, uint8_t label) {
  std::vector<Voxel> out;
  auto inside = [&](int64_t z, int64_t y, int64_t x) {
    return z >= 0 && z < d && y >= 0 && y < h && x >= 0 && x < w &&
           labels[(z * h + y) * w + x] == label;
  };
  for (int64_t z = 0; z < d; ++z) {
    for (int64_t y = 0; y < h; ++y) {
      for (int64_t x = 0; x < w; ++x) {
        if (!inside(z, y, x)) continue;
        if (!inside(z - 1, y, x) || !inside(z + 1, y, x) || !inside(z, y - 1, x) ||
            !inside(z, y + 1, x) || !inside(z, y, x - 1) || !inside(z, y, x + 1)) {
          out.push_back({z, y, x});
        }
      }
    }
  }
  return out;
}

// Symmetric Hausdorff by exhaustive all-pairs max-min over surfaces.
inline std::optional<double> hausdorff(const std::vector<uint8_t>& pred,
                                       const std::vector<uint8_t>& target, int64_t d, int64_t h,
                                       int64_t w, uint8_t label, double sz, double sy, double sx) {
  const auto a = surface_voxels(pred, d, h, w, label);
  const auto b = surface_voxels(target, d, h, w, label);
  if (a.empty() || b.empty()) return std::nullopt;
  auto directed = [&](const std::vector<Voxel>& from, const std::vector<Voxel>& to) {
    double worst = 0;
    for (const auto& p : from) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& q : to) {
        const double dz = (p.z - q.z) * sz, dy = (p.y - q.y) * sy, dx = (p.x - q.x) * sx;
        best = std::min(best, dz * dz + dy * dy + dx * dx);
      }
      worst = std::max(worst, best);
    }
    return std::sqrt(worst);
  };
  return std::max(directed(a, b), directed(b, a));
}

}  // namespace oracle
