#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "pretune/patches.hpp"
#include "pretune/rng.hpp"
#include "pretune/split.hpp"
#include "pretune/svol_io.hpp"
#include "pretune/synthetic.hpp"

using namespace pretune;
namespace fs = std::filesystem;

TEST_SUITE_BEGIN("volume");

TEST_CASE("volume and mask invariants") {
  Volume v = Volume::create({4, 4, 4});
  v.validate();
  v.data[0] = 1.5f;
  CHECK_THROWS_AS(v.validate(), ShapeError);

  SegmentationMask m = SegmentationMask::create({4, 4, 4});
  m.labels[0] = 2;
  CHECK_THROWS_AS(m.validate(), ShapeError);  // PCS without skeleton
  m.labels[1] = 1;
  m.validate();
  m.labels[2] = 3;
  CHECK_THROWS_AS(m.validate(), ShapeError);
}

TEST_CASE("subject label consistency enforced") {
  SyntheticSpec spec;
  spec.dims = {16, 16, 16};
  auto rec = generate_synthetic_subject(1, spec);
  rec.validate();
  if (rec.class_label == ClassLabel::absent) {
    CHECK(rec.mask.count_label(2) == 0);
  } else {
    CHECK(rec.mask.count_label(2) >= 1);
  }
}

TEST_CASE("synthetic generator: determinism and class forcing") {
  SyntheticSpec spec;
  spec.dims = {20, 20, 20};
  auto a = generate_synthetic_subject(7, spec);
  auto b = generate_synthetic_subject(7, spec);
  CHECK(a.volume.data == b.volume.data);
  CHECK(a.mask.labels == b.mask.labels);
  CHECK(a.class_label == b.class_label);

  // forcing the class mix forces the label
  SyntheticSpec absent = spec;
  absent.class_mix = {1.0, 0.0, 0.0};
  for (uint64_t s = 0; s < 5; ++s) {
    auto rec = generate_synthetic_subject(s, absent);
    CHECK(rec.class_label == ClassLabel::absent);
    CHECK(rec.mask.count_label(2) == 0);
  }
  SyntheticSpec small = spec;
  small.class_mix = {0.0, 0.0, 1.0};
  for (uint64_t s = 0; s < 5; ++s) {
    auto rec = generate_synthetic_subject(s, small);
    CHECK(rec.class_label == ClassLabel::small);
    CHECK(rec.mask.count_label(2) >= 1);
    CHECK(rec.mask.count_label(2) <= rec.mask.count_label(1));
  }
}

TEST_CASE("synthetic generator: seed sweep class counts near the mix") {
  SyntheticSpec spec;
  spec.dims = {16, 16, 16};
  int counts[3] = {0, 0, 0};
  for (uint64_t seed = 0; seed < 100; ++seed) {
    counts[static_cast<int>(generate_synthetic_subject(seed, spec).class_label)]++;
  }
  CHECK(std::abs(counts[0] - 33) <= 10);
  CHECK(std::abs(counts[1] - 33) <= 10);
  CHECK(std::abs(counts[2] - 34) <= 10);
}

TEST_CASE("synthetic generator rejects tiny volumes") {
  SyntheticSpec spec;
  spec.dims = {8, 16, 16};
  CHECK_THROWS_AS(generate_synthetic_subject(0, spec), ConfigError);
  SyntheticSpec bad_mix;
  bad_mix.class_mix = {0.5, 0.2, 0.2};
  CHECK_THROWS_AS(generate_synthetic_subject(0, bad_mix), ConfigError);
}

TEST_CASE("split: documented sizes and determinism") {
  std::vector<std::string> ids;
  for (int i = 0; i < 596; ++i) ids.push_back("s" + std::to_string(i));
  auto split = split_dataset(ids, {0.70, 0.20, 0.10}, 42);
  CHECK(split.train_ids.size() == 418);
  CHECK(split.val_ids.size() == 119);
  CHECK(split.test_ids.size() == 59);

  auto again = split_dataset(ids, {0.70, 0.20, 0.10}, 42);
  CHECK(split.train_ids == again.train_ids);
  CHECK(split.val_ids == again.val_ids);
  CHECK(split.test_ids == again.test_ids);

  std::vector<std::string> ten;
  for (int i = 0; i < 10; ++i) ten.push_back(std::to_string(i));
  auto small = split_dataset(ten, {0.70, 0.20, 0.10}, 0);
  CHECK(small.train_ids.size() == 7);
  CHECK(small.val_ids.size() == 2);
  CHECK(small.test_ids.size() == 1);
}

TEST_CASE("split: partition property over seeds") {
  std::vector<std::string> ids;
  for (int i = 0; i < 37; ++i) ids.push_back("id" + std::to_string(i));
  for (uint64_t seed = 0; seed < 20; ++seed) {
    auto s = split_dataset(ids, {0.70, 0.20, 0.10}, seed);
    std::set<std::string> all;
    for (const auto& v : {s.train_ids, s.val_ids, s.test_ids}) all.insert(v.begin(), v.end());
    CHECK(all.size() == ids.size());
    CHECK(s.train_ids.size() + s.val_ids.size() + s.test_ids.size() == ids.size());
  }
}

TEST_CASE("split error cases") {
  std::vector<std::string> ids{"a", "b", "c"};
  CHECK_THROWS_AS(split_dataset(ids, {0.5, 0.4, 0.2}, 0), ConfigError);      // sum != 1
  CHECK_THROWS_AS(split_dataset(ids, {0.98, 0.01, 0.01}, 0), ConfigError);  // empty slice
  std::vector<std::string> dup{"a", "a", "b"};
  CHECK_THROWS_AS(split_dataset(dup, {0.70, 0.20, 0.10}, 0), ConfigError);
}

TEST_CASE("grid patching: exact tiling and clamped edges") {
  Volume v = Volume::create({64, 64, 64});
  PatchSpec spec;
  spec.size = {32, 32, 32};
  spec.sampling = PatchSampling::grid;
  auto patches = extract_patches(v, spec);
  CHECK(patches.size() == 8);
  std::set<std::tuple<int64_t, int64_t, int64_t>> origins;
  for (const auto& p : patches) origins.insert({p.origin.z, p.origin.y, p.origin.x});
  for (int64_t z : {0, 32})
    for (int64_t y : {0, 32})
      for (int64_t x : {0, 32}) CHECK(origins.count({z, y, x}) == 1);

  // non-divisible dims: count by axis ceil, last origins clamped
  Volume odd = Volume::create({90, 190, 160});
  auto odd_patches = extract_patches(odd, spec);
  CHECK(odd_patches.size() == 3 * 6 * 5);
  int64_t max_z = 0;
  for (const auto& p : odd_patches) max_z = std::max(max_z, p.origin.z);
  CHECK(max_z == 90 - 32);
}

TEST_CASE("random patching: deterministic under seed, in bounds") {
  Volume v = Volume::create({20, 24, 28});
  Rng fill(3);
  for (auto& x : v.data) x = static_cast<float>(fill.uniform());
  PatchSpec spec;
  spec.size = {8, 8, 8};
  spec.sampling = PatchSampling::random_k;
  spec.count = 4;
  spec.seed = 99;
  auto a = extract_patches(v, spec);
  auto b = extract_patches(v, spec);
  REQUIRE(a.size() == 4);
  for (size_t i = 0; i < 4; ++i) {
    CHECK(a[i].origin == b[i].origin);
    CHECK(a[i].patch.data == b[i].patch.data);
    CHECK(a[i].origin.z + 8 <= 20);
    CHECK(a[i].origin.y + 8 <= 24);
    CHECK(a[i].origin.x + 8 <= 28);
  }
}

TEST_CASE("patch spec validation") {
  Volume v = Volume::create({16, 16, 16});
  PatchSpec too_big;
  too_big.size = {32, 16, 16};
  CHECK_THROWS_AS(extract_patches(v, too_big), ConfigError);
  PatchSpec gap;
  gap.size = {8, 8, 8};
  gap.stride = {9, 8, 8};
  CHECK_THROWS_AS(extract_patches(v, gap), ConfigError);
}

TEST_CASE("reassembly: round trip, averaging, coverage error") {
  Rng rng(5);
  Volume v = Volume::create({48, 48, 48});
  for (auto& x : v.data) x = static_cast<float>(rng.uniform());
  PatchSpec spec;
  spec.size = {16, 16, 16};
  spec.sampling = PatchSampling::grid;
  auto patches = extract_patches(v, spec);
  Volume back = reassemble_patches(patches, v.dims, v.spacing);
  float max_err = 0;
  for (size_t i = 0; i < v.data.size(); ++i) {
    max_err = std::max(max_err, std::fabs(v.data[i] - back.data[i]));
  }
  CHECK(max_err < 1e-6f);

  // two fully overlapping constant patches average
  Volume a = Volume::create({4, 4, 4});
  Volume b = Volume::create({4, 4, 4});
  for (auto& x : a.data) x = 0.2f;
  for (auto& x : b.data) x = 0.6f;
  std::vector<ExtractedPatch> overlap;
  overlap.push_back({a, {0, 0, 0}});
  overlap.push_back({b, {0, 0, 0}});
  Volume avg = reassemble_patches(overlap, {4, 4, 4});
  for (float x : avg.data) CHECK(x == doctest::Approx(0.4f));

  // a hole in coverage throws
  std::vector<ExtractedPatch> partial;
  partial.push_back({a, {0, 0, 0}});
  CHECK_THROWS_AS(reassemble_patches(partial, {8, 4, 4}), CoverageError);
}

TEST_CASE("svol round trip, plain and gzip") {
  SyntheticSpec spec;
  spec.dims = {16, 16, 16};
  auto rec = generate_synthetic_subject(11, spec);
  const auto dir = fs::temp_directory_path() / "pretune_svol_test";
  fs::create_directories(dir);

  for (const std::string name : {"vol.svol", "vol.svol.gz"}) {
    const std::string path = (dir / name).string();
    write_svol(path, rec.volume);
    Volume back = read_svol_volume(path);
    CHECK(back.dims == rec.volume.dims);
    CHECK(back.data == rec.volume.data);
    CHECK(back.spacing.d == doctest::Approx(rec.volume.spacing.d));
  }
  const std::string mpath = (dir / "mask.svol.gz").string();
  write_svol(mpath, rec.mask);
  SegmentationMask mask_back = read_svol_mask(mpath);
  CHECK(mask_back.labels == rec.mask.labels);

  // dtype mismatch is an error
  CHECK_THROWS_AS(read_svol_mask((dir / "vol.svol").string()), IoError);
  fs::remove_all(dir);
}

TEST_CASE("cohort manifest round trip") {
  SyntheticSpec spec;
  spec.dims = {16, 16, 16};
  auto cohort = generate_synthetic_cohort(3, 4, spec);
  const auto dir = fs::temp_directory_path() / "pretune_manifest_test";
  const std::string manifest = save_cohort(dir.string(), cohort, /*gzip=*/true);
  auto loaded = load_cohort(manifest);
  REQUIRE(loaded.size() == cohort.size());
  for (size_t i = 0; i < cohort.size(); ++i) {
    CHECK(loaded[i].id == cohort[i].id);
    CHECK(loaded[i].class_label == cohort[i].class_label);
    CHECK(loaded[i].volume.data == cohort[i].volume.data);
  }
  fs::remove_all(dir);
}

TEST_SUITE_END();
