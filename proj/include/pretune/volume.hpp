#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pretune/common.hpp"

namespace pretune {

struct Dims {
  int64_t d = 0, h = 0, w = 0;

  int64_t voxels() const { return d * h * w; }
  bool operator==(const Dims&) const = default;
};

struct Spacing {
  double d = 1.0, h = 1.0, w = 1.0;  // mm

  bool operator==(const Spacing&) const = default;
};

// 3D scalar grid, depth-major (z slowest), intensities in [0,1].
struct Volume {
  Dims dims;
  Spacing spacing;
  std::vector<float> data;

  float at(int64_t z, int64_t y, int64_t x) const { return data[(z * dims.h + y) * dims.w + x]; }
  float& at(int64_t z, int64_t y, int64_t x) { return data[(z * dims.h + y) * dims.w + x]; }

  static Volume create(Dims dims, Spacing spacing = {});
  void validate() const;  // dims >= 1, finite values in [0,1]
};

// Per-voxel label map: 0 = background, 1 = skeleton-sulcal, 2 = PCS.
struct SegmentationMask {
  Dims dims;
  Spacing spacing;
  std::vector<uint8_t> labels;

  uint8_t at(int64_t z, int64_t y, int64_t x) const { return labels[(z * dims.h + y) * dims.w + x]; }
  uint8_t& at(int64_t z, int64_t y, int64_t x) { return labels[(z * dims.h + y) * dims.w + x]; }

  static SegmentationMask create(Dims dims, Spacing spacing = {});
  int64_t count_label(uint8_t label) const;
  void validate() const;  // codes in {0,1,2}, PCS count <= skeleton count
};

enum class ClassLabel { absent, present, small };

std::string to_string(ClassLabel c);
ClassLabel class_label_from_string(const std::string& s);

struct SubjectRecord {
  std::string id;
  Volume volume;
  SegmentationMask mask;
  ClassLabel class_label = ClassLabel::absent;

  void validate() const;  // label/mask consistency + member invariants
};

}  // namespace pretune
