#include "pretune/patches.hpp"

#include "pretune/rng.hpp"

namespace pretune {

void PatchSpec::validate(const Dims& volume_dims) const {
  if (size.d < 1 || size.h < 1 || size.w < 1) throw ConfigError("patch size must be >= 1");
  if (size.d > volume_dims.d || size.h > volume_dims.h || size.w > volume_dims.w) {
    throw ConfigError("patch size exceeds volume dims");
  }
  if (sampling == PatchSampling::random_k) {
    if (count < 1) throw ConfigError("random-k sampling requires count >= 1");
  } else {
    const Dims s{stride.d > 0 ? stride.d : size.d, stride.h > 0 ? stride.h : size.h,
                 stride.w > 0 ? stride.w : size.w};
    if (s.d > size.d || s.h > size.h || s.w > size.w) {
      throw ConfigError("grid stride must not exceed patch size (coverage would have gaps)");
    }
  }
}

std::vector<int64_t> grid_axis_origins(int64_t dim, int64_t size, int64_t stride) {
  std::vector<int64_t> origins;
  for (int64_t o = 0;; o += stride) {
    if (o + size >= dim) {
      origins.push_back(dim - size);  // clamp the last origin
      break;
    }
    origins.push_back(o);
  }
  return origins;
}

namespace {

Volume copy_patch(const Volume& volume, const PatchOrigin& o, Dims size) {
  Volume p = Volume::create(size, volume.spacing);
  for (int64_t z = 0; z < size.d; ++z) {
    for (int64_t y = 0; y < size.h; ++y) {
      const float* src = volume.data.data() + ((o.z + z) * volume.dims.h + o.y + y) * volume.dims.w + o.x;
      float* dst = p.data.data() + (z * size.h + y) * size.w;
      std::copy(src, src + size.w, dst);
    }
  }
  return p;
}

}  // namespace

std::vector<ExtractedPatch> extract_patches(const Volume& volume, const PatchSpec& spec) {
  spec.validate(volume.dims);
  std::vector<PatchOrigin> origins;
  if (spec.sampling == PatchSampling::grid) {
    const Dims stride{spec.stride.d > 0 ? spec.stride.d : spec.size.d,
                      spec.stride.h > 0 ? spec.stride.h : spec.size.h,
                      spec.stride.w > 0 ? spec.stride.w : spec.size.w};
    const auto zs = grid_axis_origins(volume.dims.d, spec.size.d, stride.d);
    const auto ys = grid_axis_origins(volume.dims.h, spec.size.h, stride.h);
    const auto xs = grid_axis_origins(volume.dims.w, spec.size.w, stride.w);
    for (int64_t z : zs)
      for (int64_t y : ys)
        for (int64_t x : xs) origins.push_back({z, y, x});
  } else {
    Rng rng(spec.seed);
    for (int64_t i = 0; i < spec.count; ++i) {
      origins.push_back({static_cast<int64_t>(rng.uniform_int(volume.dims.d - spec.size.d + 1)),
                         static_cast<int64_t>(rng.uniform_int(volume.dims.h - spec.size.h + 1)),
                         static_cast<int64_t>(rng.uniform_int(volume.dims.w - spec.size.w + 1))});
    }
  }
  std::vector<ExtractedPatch> out;
  out.reserve(origins.size());
  for (const auto& o : origins) out.push_back({copy_patch(volume, o, spec.size), o});
  return out;
}

std::vector<SegmentationMask> extract_mask_patches(const SegmentationMask& mask, Dims size,
                                                   const std::vector<PatchOrigin>& origins) {
  std::vector<SegmentationMask> out;
  out.reserve(origins.size());
  for (const auto& o : origins) {
    SegmentationMask p = SegmentationMask::create(size, mask.spacing);
    for (int64_t z = 0; z < size.d; ++z) {
      for (int64_t y = 0; y < size.h; ++y) {
        const uint8_t* src =
            mask.labels.data() + ((o.z + z) * mask.dims.h + o.y + y) * mask.dims.w + o.x;
        uint8_t* dst = p.labels.data() + (z * size.h + y) * size.w;
        std::copy(src, src + size.w, dst);
      }
    }
    out.push_back(std::move(p));
  }
  return out;
}

Volume reassemble_patches(const std::vector<ExtractedPatch>& patches, Dims dims, Spacing spacing) {
  if (patches.empty()) throw CoverageError("reassemble: no patches");
  std::vector<std::vector<float>> bufs;
  std::vector<PatchOrigin> origins;
  bufs.reserve(patches.size());
  for (const auto& p : patches) {
    bufs.push_back(p.patch.data);
    origins.push_back(p.origin);
  }
  Volume out = Volume::create(dims, spacing);
  out.data = reassemble_buffers(bufs, origins, patches[0].patch.dims, dims);
  return out;
}

std::vector<float> reassemble_buffers(const std::vector<std::vector<float>>& patch_data,
                                      const std::vector<PatchOrigin>& origins, Dims patch_size,
                                      Dims dims) {
  std::vector<double> acc(static_cast<size_t>(dims.voxels()), 0.0);
  std::vector<int32_t> cover(static_cast<size_t>(dims.voxels()), 0);
  for (size_t pi = 0; pi < patch_data.size(); ++pi) {
    const auto& o = origins[pi];
    if (o.z < 0 || o.y < 0 || o.x < 0 || o.z + patch_size.d > dims.d ||
        o.y + patch_size.h > dims.h || o.x + patch_size.w > dims.w) {
      throw CoverageError("reassemble: patch out of bounds");
    }
    const auto& buf = patch_data[pi];
    for (int64_t z = 0; z < patch_size.d; ++z) {
      for (int64_t y = 0; y < patch_size.h; ++y) {
        const float* src = buf.data() + (z * patch_size.h + y) * patch_size.w;
        const int64_t base = ((o.z + z) * dims.h + o.y + y) * dims.w + o.x;
        for (int64_t x = 0; x < patch_size.w; ++x) {
          acc[base + x] += src[x];
          ++cover[base + x];
        }
      }
    }
  }
  std::vector<float> out(acc.size());
  for (size_t i = 0; i < acc.size(); ++i) {
    if (cover[i] == 0) throw CoverageError("reassemble: uncovered voxel");
    out[i] = static_cast<float>(acc[i] / cover[i]);
  }
  return out;
}

}  // namespace pretune
