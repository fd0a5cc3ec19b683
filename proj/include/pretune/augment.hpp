#pragma once

#include "pretune/rng.hpp"
#include "pretune/volume.hpp"

namespace pretune {

// Geometry-light view transforms for contrastive pre-training: random axis
// flips, mild intensity scaling, random crop-and-resize. All preserve the
// sulcal ridge topology.
struct AugmentationConfig {
  bool flips = true;
  double intensity_jitter = 0.10;  // scale in [1-j, 1+j]
  double min_crop_scale = 0.80;    // crop side fraction in [min, 1]
};

Volume augment_view(const Volume& patch, const AugmentationConfig& cfg, Rng& rng);

// Trilinear resize to new dims (used by crop-and-resize).
Volume resize_trilinear(const Volume& v, Dims out_dims);

}  // namespace pretune
