#include "pretune/split.hpp"

#include <cmath>
#include <set>

#include "pretune/common.hpp"
#include "pretune/rng.hpp"

namespace pretune {

DatasetSplit split_dataset(const std::vector<std::string>& ids, std::array<double, 3> fractions,
                           uint64_t seed) {
  double sum = 0;
  for (double f : fractions) {
    if (f <= 0) throw ConfigError("split fractions must be positive");
    sum += f;
  }
  if (std::fabs(sum - 1.0) > 1e-9) throw ConfigError("split fractions must sum to 1");
  {
    std::set<std::string> unique(ids.begin(), ids.end());
    if (unique.size() != ids.size()) throw ConfigError("split ids must be unique");
  }

  std::vector<std::string> shuffled = ids;
  Rng rng(seed);
  rng.shuffle(shuffled);

  const auto n = static_cast<int64_t>(shuffled.size());
  // floor(n*f) with a small epsilon so that exact products are not lost to
  // floating point (e.g. 30 * 0.1).
  auto slice_count = [n](double f) {
    return static_cast<int64_t>(std::floor(static_cast<double>(n) * f + 1e-9));
  };
  int64_t n_train = slice_count(fractions[0]);
  const int64_t n_val = slice_count(fractions[1]);
  const int64_t n_test = slice_count(fractions[2]);
  n_train += n - (n_train + n_val + n_test);  // remainder to train

  if (n_train <= 0 || n_val <= 0 || n_test <= 0) {
    throw ConfigError("split produced an empty slice (cohort too small for fractions)");
  }

  DatasetSplit split;
  split.fractions = fractions;
  split.seed = seed;
  split.train_ids.assign(shuffled.begin(), shuffled.begin() + n_train);
  split.val_ids.assign(shuffled.begin() + n_train, shuffled.begin() + n_train + n_val);
  split.test_ids.assign(shuffled.begin() + n_train + n_val, shuffled.end());
  return split;
}

}  // namespace pretune
