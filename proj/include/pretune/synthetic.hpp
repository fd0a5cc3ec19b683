#pragma once

#include <array>
#include <cstdint>

#include "pretune/volume.hpp"

namespace pretune {

// Settings for the parametric sulcal-phantom generator: a curvilinear bright
// skeleton ridge with Gaussian cross-section over background noise, plus an
// optional secondary thin ridge standing in for the PCS. This is the test
// substrate for the whole pipeline, so every knob is explicit.
struct SyntheticSpec {
  Dims dims{32, 32, 32};
  Spacing spacing{1.0, 1.0, 1.0};
  // class mix: probabilities of {absent, present, small}; must sum to 1
  std::array<double, 3> class_mix{1.0 / 3, 1.0 / 3, 1.0 / 3};
  double noise_level = 0.08;        // background uniform noise amplitude
  double skeleton_amplitude = 0.9;  // peak ridge intensity
  double skeleton_sigma = 1.4;      // gaussian cross-section, voxels
  double pcs_amplitude = 0.8;
  double pcs_sigma = 1.0;
  double pcs_gap = 4.0;             // offset of the secondary ridge, voxels

  void validate() const;
};

SubjectRecord generate_synthetic_subject(uint64_t seed, const SyntheticSpec& spec);

// Convenience: n subjects with ids "s0000".."s{n-1}", per-subject seeds
// derived from (seed, index).
std::vector<SubjectRecord> generate_synthetic_cohort(uint64_t seed, int64_t count,
                                                     const SyntheticSpec& spec);

}  // namespace pretune
