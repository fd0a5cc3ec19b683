#pragma once

#include <cmath>
#include <functional>

namespace pretune {

// Fractions are of system totals; NaN marks "unavailable" (this build has no
// accelerator, so memory is process RSS vs MemTotal and power is never
// reported).
struct ResourceProfile {
  double peak_mem_frac = std::nan("");
  double avg_mem_frac = std::nan("");
  double power_frac = std::nan("");
  double seconds = 0.0;
};

// Runs `work` while a sampler thread polls memory at PROFILE_HZ (default 10,
// floor 1). The sampler only reads /proc; it never touches training state.
ResourceProfile profile_epoch(const std::function<void()>& work);

}  // namespace pretune
