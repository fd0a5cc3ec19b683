#include "pretune/augment.hpp"

#include <algorithm>
#include <cmath>

namespace pretune {

Volume resize_trilinear(const Volume& v, Dims out_dims) {
  if (out_dims == v.dims) return v;
  Volume out = Volume::create(out_dims, v.spacing);
  const double sz = static_cast<double>(v.dims.d) / out_dims.d;
  const double sy = static_cast<double>(v.dims.h) / out_dims.h;
  const double sx = static_cast<double>(v.dims.w) / out_dims.w;
  auto sample_axis = [](double coord, int64_t dim, int64_t& i0, int64_t& i1, double& frac) {
    const double c = std::clamp(coord, 0.0, static_cast<double>(dim - 1));
    i0 = static_cast<int64_t>(std::floor(c));
    i1 = std::min(i0 + 1, dim - 1);
    frac = c - static_cast<double>(i0);
  };
  for (int64_t z = 0; z < out_dims.d; ++z) {
    int64_t z0, z1;
    double fz;
    sample_axis((z + 0.5) * sz - 0.5, v.dims.d, z0, z1, fz);
    for (int64_t y = 0; y < out_dims.h; ++y) {
      int64_t y0, y1;
      double fy;
      sample_axis((y + 0.5) * sy - 0.5, v.dims.h, y0, y1, fy);
      for (int64_t x = 0; x < out_dims.w; ++x) {
        int64_t x0, x1;
        double fx;
        sample_axis((x + 0.5) * sx - 0.5, v.dims.w, x0, x1, fx);
        const double c000 = v.at(z0, y0, x0), c001 = v.at(z0, y0, x1);
        const double c010 = v.at(z0, y1, x0), c011 = v.at(z0, y1, x1);
        const double c100 = v.at(z1, y0, x0), c101 = v.at(z1, y0, x1);
        const double c110 = v.at(z1, y1, x0), c111 = v.at(z1, y1, x1);
        const double c00 = c000 + (c001 - c000) * fx;
        const double c01 = c010 + (c011 - c010) * fx;
        const double c10 = c100 + (c101 - c100) * fx;
        const double c11 = c110 + (c111 - c110) * fx;
        const double c0 = c00 + (c01 - c00) * fy;
        const double c1 = c10 + (c11 - c10) * fy;
        out.at(z, y, x) = static_cast<float>(c0 + (c1 - c0) * fz);
      }
    }
  }
  return out;
}

namespace {

void flip_axis(Volume& v, int axis) {
  const Dims d = v.dims;
  Volume out = Volume::create(d, v.spacing);
  for (int64_t z = 0; z < d.d; ++z) {
    for (int64_t y = 0; y < d.h; ++y) {
      for (int64_t x = 0; x < d.w; ++x) {
        const int64_t zz = axis == 0 ? d.d - 1 - z : z;
        const int64_t yy = axis == 1 ? d.h - 1 - y : y;
        const int64_t xx = axis == 2 ? d.w - 1 - x : x;
        out.at(z, y, x) = v.at(zz, yy, xx);
      }
    }
  }
  v = std::move(out);
}

}  // namespace

Volume augment_view(const Volume& patch, const AugmentationConfig& cfg, Rng& rng) {
  Volume v = patch;

  if (cfg.flips) {
    for (int axis = 0; axis < 3; ++axis) {
      if (rng.uniform() < 0.5) flip_axis(v, axis);
    }
  }

  if (cfg.min_crop_scale < 1.0) {
    const double s = rng.uniform(cfg.min_crop_scale, 1.0);
    Dims crop{std::max<int64_t>(2, static_cast<int64_t>(std::lround(v.dims.d * s))),
              std::max<int64_t>(2, static_cast<int64_t>(std::lround(v.dims.h * s))),
              std::max<int64_t>(2, static_cast<int64_t>(std::lround(v.dims.w * s)))};
    const int64_t oz = static_cast<int64_t>(rng.uniform_int(v.dims.d - crop.d + 1));
    const int64_t oy = static_cast<int64_t>(rng.uniform_int(v.dims.h - crop.h + 1));
    const int64_t ox = static_cast<int64_t>(rng.uniform_int(v.dims.w - crop.w + 1));
    Volume cropped = Volume::create(crop, v.spacing);
    for (int64_t z = 0; z < crop.d; ++z)
      for (int64_t y = 0; y < crop.h; ++y)
        for (int64_t x = 0; x < crop.w; ++x) cropped.at(z, y, x) = v.at(oz + z, oy + y, ox + x);
    v = resize_trilinear(cropped, patch.dims);
  }

  if (cfg.intensity_jitter > 0) {
    const auto scale =
        static_cast<float>(rng.uniform(1.0 - cfg.intensity_jitter, 1.0 + cfg.intensity_jitter));
    for (auto& x : v.data) x = std::clamp(x * scale, 0.0f, 1.0f);
  }
  return v;
}

}  // namespace pretune
