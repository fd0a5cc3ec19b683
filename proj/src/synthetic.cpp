#include "pretune/synthetic.hpp"

#include <algorithm>
#include <cmath>

#include "pretune/common.hpp"
#include "pretune/rng.hpp"

namespace pretune {

namespace {

struct Point {
  double z, y, x;
};

Point bezier(const Point& p0, const Point& p1, const Point& p2, double t) {
  const double a = (1 - t) * (1 - t), b = 2 * (1 - t) * t, c = t * t;
  return {a * p0.z + b * p1.z + c * p2.z, a * p0.y + b * p1.y + c * p2.y,
          a * p0.x + b * p1.x + c * p2.x};
}

// max-splat a gaussian tube sample into `field`.
void splat(std::vector<float>& field, const Dims& dims, const Point& p, double sigma) {
  const double reach = 3.0 * sigma;
  const int64_t z0 = std::max<int64_t>(0, static_cast<int64_t>(std::ceil(p.z - reach)));
  const int64_t z1 = std::min<int64_t>(dims.d - 1, static_cast<int64_t>(std::floor(p.z + reach)));
  const int64_t y0 = std::max<int64_t>(0, static_cast<int64_t>(std::ceil(p.y - reach)));
  const int64_t y1 = std::min<int64_t>(dims.h - 1, static_cast<int64_t>(std::floor(p.y + reach)));
  const int64_t x0 = std::max<int64_t>(0, static_cast<int64_t>(std::ceil(p.x - reach)));
  const int64_t x1 = std::min<int64_t>(dims.w - 1, static_cast<int64_t>(std::floor(p.x + reach)));
  const double inv = 1.0 / (2.0 * sigma * sigma);
  for (int64_t z = z0; z <= z1; ++z) {
    for (int64_t y = y0; y <= y1; ++y) {
      for (int64_t x = x0; x <= x1; ++x) {
        const double d2 = (z - p.z) * (z - p.z) + (y - p.y) * (y - p.y) + (x - p.x) * (x - p.x);
        const auto v = static_cast<float>(std::exp(-d2 * inv));
        float& f = field[(z * dims.h + y) * dims.w + x];
        f = std::max(f, v);
      }
    }
  }
}

// Field threshold corresponding to one sigma of the tube cross-section.
constexpr float kLabelThreshold = 0.60653066f;  // exp(-1/2)

}  // namespace

void SyntheticSpec::validate() const {
  if (dims.d < 16 || dims.h < 16 || dims.w < 16) {
    throw ConfigError("synthetic dims too small to place both structures (need >= 16 per axis)");
  }
  double sum = 0;
  for (double p : class_mix) {
    if (p < 0) throw ConfigError("class mix probabilities must be non-negative");
    sum += p;
  }
  if (std::fabs(sum - 1.0) > 1e-9) throw ConfigError("class mix probabilities must sum to 1");
}

SubjectRecord generate_synthetic_subject(uint64_t seed, const SyntheticSpec& spec) {
  spec.validate();
  Rng rng(seed);

  // 1) class label
  const double u = rng.uniform();
  ClassLabel label = ClassLabel::small;
  if (u < spec.class_mix[0]) {
    label = ClassLabel::absent;
  } else if (u < spec.class_mix[0] + spec.class_mix[1]) {
    label = ClassLabel::present;
  }

  const Dims dims = spec.dims;
  Volume vol = Volume::create(dims, spec.spacing);
  for (auto& v : vol.data) v = static_cast<float>(rng.uniform(0.0, spec.noise_level));

  // 2) main skeleton ridge: a bezier spanning the y extent with wandering z/x.
  auto margin = [](int64_t dim) { return 0.15 * static_cast<double>(dim); };
  const double mz = margin(dims.d), my = margin(dims.h), mx = margin(dims.w);
  auto inner = [&](double m, int64_t dim) { return rng.uniform(m, static_cast<double>(dim) - 1 - m); };
  const Point p0{inner(mz, dims.d), my, inner(mx, dims.w)};
  const Point p1{inner(mz, dims.d), static_cast<double>(dims.h) / 2, inner(mx, dims.w)};
  const Point p2{inner(mz, dims.d), static_cast<double>(dims.h) - 1 - my, inner(mx, dims.w)};

  std::vector<float> skel_field(vol.data.size(), 0.0f);
  const int64_t steps = 4 * std::max({dims.d, dims.h, dims.w});
  for (int64_t i = 0; i <= steps; ++i) {
    splat(skel_field, dims, bezier(p0, p1, p2, static_cast<double>(i) / steps), spec.skeleton_sigma);
  }

  // 3) optional PCS surrogate: a shorter ridge offset sideways from the
  // skeleton's mid-section; "small" shrinks both its extent and radius.
  std::vector<float> pcs_field(vol.data.size(), 0.0f);
  Point pcs_mid{0, 0, 0};
  if (label != ClassLabel::absent) {
    const double t_lo = label == ClassLabel::present ? 0.30 : 0.44;
    const double t_hi = label == ClassLabel::present ? 0.70 : 0.56;
    const double sigma = label == ClassLabel::present ? spec.pcs_sigma : 0.75 * spec.pcs_sigma;
    const double side = rng.uniform() < 0.5 ? -1.0 : 1.0;
    const double wobble = rng.uniform(-1.0, 1.0);
    const int64_t psteps = std::max<int64_t>(8, steps / 4);
    for (int64_t i = 0; i <= psteps; ++i) {
      const double t = t_lo + (t_hi - t_lo) * static_cast<double>(i) / psteps;
      Point p = bezier(p0, p1, p2, t);
      p.x += side * spec.pcs_gap + wobble * t;
      p.z += wobble * (1.0 - t);
      p.x = std::clamp(p.x, 1.0, static_cast<double>(dims.w) - 2);
      p.z = std::clamp(p.z, 1.0, static_cast<double>(dims.d) - 2);
      if (i == psteps / 2) pcs_mid = p;
      splat(pcs_field, dims, p, sigma);
    }
  }

  // 4) compose intensities and labels; PCS wins where the tubes touch.
  SegmentationMask mask = SegmentationMask::create(dims, spec.spacing);
  for (size_t i = 0; i < vol.data.size(); ++i) {
    const float s = skel_field[i] * static_cast<float>(spec.skeleton_amplitude);
    const float p = pcs_field[i] * static_cast<float>(spec.pcs_amplitude);
    vol.data[i] = std::clamp(std::max({vol.data[i], s, p}), 0.0f, 1.0f);
    if (pcs_field[i] >= kLabelThreshold) {
      mask.labels[i] = 2;
    } else if (skel_field[i] >= kLabelThreshold) {
      mask.labels[i] = 1;
    }
  }

  // A very thin tube can miss every voxel center at the 1-sigma threshold;
  // the class/mask invariant still requires at least one PCS voxel.
  if (label != ClassLabel::absent && mask.count_label(2) == 0) {
    const auto z = static_cast<int64_t>(std::lround(pcs_mid.z));
    const auto y = static_cast<int64_t>(std::lround(pcs_mid.y));
    const auto x = static_cast<int64_t>(std::lround(pcs_mid.x));
    mask.at(std::clamp<int64_t>(z, 0, dims.d - 1), std::clamp<int64_t>(y, 0, dims.h - 1),
            std::clamp<int64_t>(x, 0, dims.w - 1)) = 2;
  }

  SubjectRecord rec;
  rec.id = "s" + std::to_string(seed);
  rec.volume = std::move(vol);
  rec.mask = std::move(mask);
  rec.class_label = label;
  rec.validate();
  return rec;
}

std::vector<SubjectRecord> generate_synthetic_cohort(uint64_t seed, int64_t count,
                                                     const SyntheticSpec& spec) {
  std::vector<SubjectRecord> cohort;
  cohort.reserve(count);
  for (int64_t i = 0; i < count; ++i) {
    auto rec = generate_synthetic_subject(seed_fanout(seed, "subject", i), spec);
    char buf[32];
    std::snprintf(buf, sizeof(buf), "s%04lld", static_cast<long long>(i));
    rec.id = buf;
    cohort.push_back(std::move(rec));
  }
  return cohort;
}

}  // namespace pretune
