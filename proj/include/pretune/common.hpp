#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <string_view>

namespace pretune {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Raised on tensor/volume dimension mismatches.
struct ShapeError : Error {
  using Error::Error;
};

// Invalid user-supplied configuration (specs, fractions, unknown keys, ...).
struct ConfigError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

// Tuning-strategy selection produced an unusable result (empty set, no
// eligible LoRA targets, merge after merge, ...).
struct StrategyError : Error {
  using Error::Error;
};

// A reassembly target voxel was not covered by any patch.
struct CoverageError : Error {
  using Error::Error;
};

// Numerically unusable input (e.g. zero-norm embedding in NT-Xent).
struct DegenerateInputError : Error {
  using Error::Error;
};

// Checkpoint manifest does not match the requested architecture.
struct ManifestError : Error {
  using Error::Error;
};

// Value outside a schedule/table (e.g. diffusion timestep beyond T).
struct RangeError : Error {
  using Error::Error;
};

inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 1469598103934665603ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

inline uint64_t fnv1a64(std::string_view s, uint64_t h = 1469598103934665603ULL) {
  return fnv1a64(s.data(), s.size(), h);
}

inline std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// Every float that lands in a report file goes through this: 6 significant
// digits, "n/a" for NaN.
inline std::string format_g6(double v) {
  if (std::isnan(v)) return "n/a";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

// Derive a per-component seed from a global one; stable across platforms.
inline uint64_t seed_fanout(uint64_t global_seed, std::string_view component) {
  uint64_t h = fnv1a64(&global_seed, sizeof(global_seed));
  h = fnv1a64(component, h);
  return h;
}

inline uint64_t seed_fanout(uint64_t global_seed, std::string_view component, uint64_t index) {
  uint64_t h = seed_fanout(global_seed, component);
  return fnv1a64(&index, sizeof(index), h);
}

}  // namespace pretune
