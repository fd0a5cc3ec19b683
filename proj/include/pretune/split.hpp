#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace pretune {

struct DatasetSplit {
  std::vector<std::string> train_ids;
  std::vector<std::string> val_ids;
  std::vector<std::string> test_ids;
  std::array<double, 3> fractions{0.70, 0.20, 0.10};
  uint64_t seed = 0;
};

// Deterministic shuffle by seed, then contiguous slicing with floor rounding;
// the remainder goes to train. Every slice must end up non-empty.
DatasetSplit split_dataset(const std::vector<std::string>& ids, std::array<double, 3> fractions,
                           uint64_t seed);

}  // namespace pretune
