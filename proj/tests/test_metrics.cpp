#include <doctest.h>

#include <chrono>
#include <cmath>
#include <thread>

#include "oracles.hpp"
#include "pretune/metrics.hpp"
#include "pretune/profiler.hpp"
#include "pretune/rng.hpp"

using namespace pretune;

namespace {

SegmentationMask random_mask(Rng& rng, Dims dims, double fg_prob) {
  SegmentationMask m = SegmentationMask::create(dims);
  for (auto& v : m.labels) {
    const double u = rng.uniform();
    v = u < fg_prob ? 1 : (u < 1.5 * fg_prob ? 2 : 0);
  }
  return m;
}

}  // namespace

TEST_SUITE_BEGIN("metrics");

TEST_CASE("dice: identity, disjoint, empty-both convention") {
  Rng rng(1);
  SegmentationMask a = random_mask(rng, {6, 6, 6}, 0.3);
  auto self = dice_score(a, a);
  CHECK(self.per_label[0] == doctest::Approx(1.0));
  CHECK(self.per_label[1] == doctest::Approx(1.0));
  CHECK(self.average == doctest::Approx(1.0));

  SegmentationMask left = SegmentationMask::create({4, 4, 4});
  SegmentationMask right = SegmentationMask::create({4, 4, 4});
  left.at(0, 0, 0) = 1;
  right.at(3, 3, 3) = 1;
  auto disjoint = dice_score(left, right);
  CHECK(disjoint.per_label[0] == doctest::Approx(0.0));
  CHECK(disjoint.per_label[1] == doctest::Approx(1.0));  // label 2 empty on both sides
}

TEST_CASE("dice matches set-arithmetic oracle on random masks") {
  Rng rng(2);
  for (int rep = 0; rep < 20; ++rep) {
    SegmentationMask p = random_mask(rng, {8, 8, 8}, 0.25);
    SegmentationMask g = random_mask(rng, {8, 8, 8}, 0.25);
    auto d = dice_score(p, g);
    for (int label = 1; label <= 2; ++label) {
      const double ref = oracle::dice_score(p.labels, g.labels, label);
      CHECK(std::fabs(d.per_label[label - 1] - ref) <= 1e-10);
    }
  }
}

TEST_CASE("hausdorff: zero at identity, two-voxel geometry, spacing scaling") {
  SegmentationMask a = SegmentationMask::create({8, 8, 8});
  a.at(2, 2, 2) = 1;
  a.at(2, 2, 3) = 1;
  auto self = hausdorff_distance(a, a, {1, 1, 1});
  CHECK(*self.per_label_mm[0] == doctest::Approx(0.0));
  CHECK_FALSE(self.per_label_mm[1].has_value());  // label 2 empty: undefined, not an exception
  CHECK(*self.average_mm == doctest::Approx(0.0));

  // two single voxels, 3 apart along one axis on a 1mm grid
  SegmentationMask p = SegmentationMask::create({8, 8, 8});
  SegmentationMask g = SegmentationMask::create({8, 8, 8});
  p.at(1, 1, 1) = 1;
  g.at(1, 1, 4) = 1;
  CHECK(*hausdorff_distance(p, g, {1, 1, 1}).per_label_mm[0] == doctest::Approx(3.0));
  // anisotropic spacing scales the same gap
  CHECK(*hausdorff_distance(p, g, {1, 1, 0.5}).per_label_mm[0] == doctest::Approx(1.5));

  CHECK_THROWS_AS(hausdorff_distance(p, g, {0, 1, 1}), ConfigError);
}

TEST_CASE("hausdorff matches brute-force all-pairs oracle exactly") {
  Rng rng(3);
  for (int rep = 0; rep < 10; ++rep) {
    SegmentationMask p = random_mask(rng, {7, 7, 7}, 0.15);
    SegmentationMask g = random_mask(rng, {7, 7, 7}, 0.15);
    const Spacing sp{1.0, 0.8, 1.2};
    auto h = hausdorff_distance(p, g, sp);
    for (int label = 1; label <= 2; ++label) {
      auto ref = oracle::hausdorff(p.labels, g.labels, 7, 7, 7, label, sp.d, sp.h, sp.w);
      REQUIRE(h.per_label_mm[label - 1].has_value() == ref.has_value());
      if (ref) CHECK(*h.per_label_mm[label - 1] == doctest::Approx(*ref).epsilon(1e-12));
    }
    // symmetry
    auto rev = hausdorff_distance(g, p, sp);
    for (int l = 0; l < 2; ++l) {
      if (h.per_label_mm[l]) {
        CHECK(*rev.per_label_mm[l] == doctest::Approx(*h.per_label_mm[l]).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("classification metrics: perfect, collapsed, hand-counted") {
  std::vector<std::array<double, 3>> perfect{{5, 0, 0}, {0, 5, 0}, {0, 0, 5}};
  auto m = classification_metrics(perfect, {0, 1, 2});
  CHECK(m.accuracy == doctest::Approx(1.0));
  CHECK(m.macro_f1 == doctest::Approx(1.0));

  // everything predicted as class 0 on balanced labels
  std::vector<std::array<double, 3>> collapsed(6, {9, 0, 0});
  auto c = classification_metrics(collapsed, {0, 0, 1, 1, 2, 2});
  CHECK(c.accuracy == doctest::Approx(1.0 / 3));

  std::vector<std::array<double, 3>> handmade{{2, 1, 0}, {0, 3, 1}, {1, 0, 2}, {0, 2, 1}};
  auto h = classification_metrics(handmade, {0, 1, 2, 2});
  CHECK(h.confusion[0][0] == 1);
  CHECK(h.confusion[1][1] == 1);
  CHECK(h.confusion[2][2] == 1);
  CHECK(h.confusion[2][1] == 1);
  CHECK(h.accuracy == doctest::Approx(0.75));
}

TEST_CASE("profiler: wall clock bounds and peak>=avg") {
  auto p = profile_epoch([]() { std::this_thread::sleep_for(std::chrono::milliseconds(300)); });
  CHECK(p.seconds >= 0.28);
  CHECK(p.seconds <= 1.0);
  CHECK(std::isnan(p.power_frac));  // no accelerator on this platform
  if (!std::isnan(p.peak_mem_frac)) {
    CHECK(p.peak_mem_frac >= p.avg_mem_frac);
    CHECK(p.peak_mem_frac <= 1.0);
  }

  auto alloc_heavy = profile_epoch([]() {
    std::vector<std::vector<double>> hog;
    for (int i = 0; i < 40; ++i) {
      hog.emplace_back(1 << 20, 1.0);
      std::this_thread::sleep_for(std::chrono::milliseconds(5));
    }
  });
  CHECK(alloc_heavy.seconds > 0);
  if (!std::isnan(alloc_heavy.peak_mem_frac)) {
    CHECK(alloc_heavy.peak_mem_frac >= alloc_heavy.avg_mem_frac);
  }
}

TEST_SUITE_END();
