#include "pretune/volume.hpp"

#include <cmath>

namespace pretune {

Volume Volume::create(Dims dims, Spacing spacing) {
  if (dims.d < 1 || dims.h < 1 || dims.w < 1) throw ShapeError("volume dims must be >= 1");
  Volume v;
  v.dims = dims;
  v.spacing = spacing;
  v.data.assign(static_cast<size_t>(dims.voxels()), 0.0f);
  return v;
}

void Volume::validate() const {
  if (dims.d < 1 || dims.h < 1 || dims.w < 1) throw ShapeError("volume dims must be >= 1");
  if (static_cast<int64_t>(data.size()) != dims.voxels()) {
    throw ShapeError("volume payload does not match dims");
  }
  for (float v : data) {
    if (!std::isfinite(v) || v < 0.0f || v > 1.0f) {
      throw ShapeError("volume values must be finite and within [0,1]");
    }
  }
}

SegmentationMask SegmentationMask::create(Dims dims, Spacing spacing) {
  if (dims.d < 1 || dims.h < 1 || dims.w < 1) throw ShapeError("mask dims must be >= 1");
  SegmentationMask m;
  m.dims = dims;
  m.spacing = spacing;
  m.labels.assign(static_cast<size_t>(dims.voxels()), 0);
  return m;
}

int64_t SegmentationMask::count_label(uint8_t label) const {
  int64_t n = 0;
  for (uint8_t v : labels) n += (v == label);
  return n;
}

void SegmentationMask::validate() const {
  if (static_cast<int64_t>(labels.size()) != dims.voxels()) {
    throw ShapeError("mask payload does not match dims");
  }
  for (uint8_t v : labels) {
    if (v > 2) throw ShapeError("mask labels must be in {0,1,2}");
  }
  if (count_label(2) > count_label(1)) {
    throw ShapeError("PCS voxel count must not exceed skeleton voxel count");
  }
}

std::string to_string(ClassLabel c) {
  switch (c) {
    case ClassLabel::absent: return "absent";
    case ClassLabel::present: return "present";
    case ClassLabel::small: return "small";
  }
  return "absent";
}

ClassLabel class_label_from_string(const std::string& s) {
  if (s == "absent") return ClassLabel::absent;
  if (s == "present") return ClassLabel::present;
  if (s == "small") return ClassLabel::small;
  throw ConfigError("unknown class label: " + s);
}

void SubjectRecord::validate() const {
  volume.validate();
  mask.validate();
  if (!(volume.dims == mask.dims)) throw ShapeError("subject volume/mask dims differ");
  const int64_t pcs = mask.count_label(2);
  if (class_label == ClassLabel::absent && pcs != 0) {
    throw ShapeError("subject " + id + ": class 'absent' but mask has PCS voxels");
  }
  if (class_label != ClassLabel::absent && pcs == 0) {
    throw ShapeError("subject " + id + ": class '" + to_string(class_label) +
                     "' but mask has no PCS voxels");
  }
}

}  // namespace pretune
