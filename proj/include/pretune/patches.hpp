#pragma once

#include <cstdint>
#include <vector>

#include "pretune/volume.hpp"

namespace pretune {

enum class PatchSampling { random_k, grid };

struct PatchSpec {
  Dims size{64, 64, 63};
  PatchSampling sampling = PatchSampling::grid;
  int64_t count = 0;            // random_k: number of patches
  Dims stride{0, 0, 0};         // grid: 0 means stride = size
  uint64_t seed = 0;

  void validate(const Dims& volume_dims) const;
};

struct PatchOrigin {
  int64_t z = 0, y = 0, x = 0;

  bool operator==(const PatchOrigin&) const = default;
};

struct ExtractedPatch {
  Volume patch;
  PatchOrigin origin;
};

// Grid origins for one axis: multiples of stride, with the final origin
// clamped so the patch fits (edge patches overlap their neighbor).
std::vector<int64_t> grid_axis_origins(int64_t dim, int64_t size, int64_t stride);

std::vector<ExtractedPatch> extract_patches(const Volume& volume, const PatchSpec& spec);

// Mask patches at the same origins (used for fine-tuning targets).
std::vector<SegmentationMask> extract_mask_patches(const SegmentationMask& mask, Dims size,
                                                   const std::vector<PatchOrigin>& origins);

// Overlaps are averaged. Throws CoverageError if any target voxel is not
// covered by at least one patch.
Volume reassemble_patches(const std::vector<ExtractedPatch>& patches, Dims dims,
                          Spacing spacing = {});

// Float-buffer variant for probability grids (per-class channels handled by
// the caller, one call per channel).
std::vector<float> reassemble_buffers(const std::vector<std::vector<float>>& patch_data,
                                      const std::vector<PatchOrigin>& origins, Dims patch_size,
                                      Dims dims);

}  // namespace pretune
