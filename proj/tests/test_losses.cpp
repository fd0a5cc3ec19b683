#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "pretune/losses.hpp"

using namespace pretune;

namespace {

Tensor random_grid(Shape shape, Rng& rng, double lo = 0.0, double hi = 1.0) {
  return Tensor::rand_uniform(std::move(shape), rng, lo, hi);
}

oracle::Grid3 to_grid(const Tensor& t) {
  const auto& s = t.shape();
  return {s[s.size() - 3], s[s.size() - 2], s[s.size() - 1], t.values()};
}

}  // namespace

TEST_SUITE_BEGIN("losses");

TEST_CASE("ssim of identical inputs is 1") {
  Rng rng(7);
  Tensor x = random_grid({8, 8, 8}, rng);
  SsimParams p;
  p.window = 5;
  CHECK(ssim(x, x, p).item() == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("ssim on constant grids matches the closed form") {
  // zero variances: value = (2*a*b + c1) * c2 / ((a^2 + b^2 + c1) * c2)
  SsimParams p;
  p.window = 5;
  Tensor a = Tensor::full({5, 5, 5}, 0.2);
  Tensor b = Tensor::full({5, 5, 5}, 0.8);
  const double expect = (2 * 0.2 * 0.8 + p.c1) / (0.2 * 0.2 + 0.8 * 0.8 + p.c1);
  CHECK(ssim(a, b, p).item() == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("ssim matches the scalar oracle on random pairs") {
  Rng rng(11);
  SsimParams p;
  p.window = 3;
  for (int rep = 0; rep < 10; ++rep) {
    Tensor x = random_grid({8, 8, 8}, rng);
    Tensor y = random_grid({8, 8, 8}, rng);
    const double lib = ssim(x, y, p).item();
    const double ref = oracle::ssim(to_grid(x), to_grid(y), p.window, p.c1, p.c2);
    CHECK(lib == doctest::Approx(ref).epsilon(1e-8));
    // symmetry
    CHECK(ssim(y, x, p).item() == doctest::Approx(lib).epsilon(1e-12));
  }
}

TEST_CASE("ssim rejects mismatched shapes and oversized windows") {
  SsimParams p;
  CHECK_THROWS_AS(ssim(Tensor::zeros({4, 4, 4}), Tensor::zeros({4, 4, 5}), p), ShapeError);
  CHECK_THROWS_AS(ssim(Tensor::zeros({4, 4, 4}), Tensor::zeros({4, 4, 4}), p), ShapeError);
  SsimParams bad;
  bad.window = 4;
  CHECK_THROWS_AS(ssim(Tensor::zeros({8, 8, 8}), Tensor::zeros({8, 8, 8}), bad), ConfigError);
}

TEST_CASE("loss_rec is zero at identity and positive otherwise") {
  Rng rng(13);
  SsimParams p;
  p.window = 3;
  Tensor x = random_grid({6, 6, 6}, rng);
  CHECK(loss_rec(x, x, p).item() == doctest::Approx(0.0).epsilon(1e-12));

  // anti-correlated structured pair: ssim goes negative, loss lands in (1, 2]
  std::vector<double> av, bv;
  for (int i = 0; i < 216; ++i) {
    const double s = (i % 2 == 0) ? 1.0 : 0.0;
    av.push_back(s);
    bv.push_back(1.0 - s);
  }
  Tensor a = Tensor::from_data({6, 6, 6}, av);
  Tensor b = Tensor::from_data({6, 6, 6}, bv);
  const double l = loss_rec(a, b, p).item();
  CHECK(l > 1.0);
  CHECK(l <= 2.0);
}

TEST_CASE("loss_rec gradient matches finite differences") {
  Rng rng(17);
  SsimParams p;
  p.window = 3;
  std::vector<double> xv(216), yv(216);
  for (auto& v : xv) v = rng.uniform();
  for (auto& v : yv) v = rng.uniform();
  Tensor x = Tensor::from_data({6, 6, 6}, xv, true);
  Tensor y = Tensor::from_data({6, 6, 6}, yv);
  loss_rec(x, y, p).backward();
  const auto& analytic = x.grad();
  auto f = [&](const std::vector<double>& flat) {
    NoGradGuard guard;
    return loss_rec(Tensor::from_data({6, 6, 6}, flat), Tensor::from_data({6, 6, 6}, yv), p).item();
  };
  const auto fd = finite_difference_gradient(f, xv);
  for (size_t i = 0; i < fd.size(); ++i) {
    const double denom = std::max(1e-8, std::fabs(fd[i]));
    CHECK(std::fabs(fd[i] - analytic[i]) / denom < 1e-4);
  }
}

TEST_CASE("disc/gen losses match hand-computed cross entropies") {
  // perfectly confident correct discriminator
  Tensor confident_fake = Tensor::from_data({3}, {-50, -40, -60});
  Tensor confident_real = Tensor::from_data({3}, {55, 45, 60});
  CHECK(disc_loss(confident_fake, confident_real).item() == doctest::Approx(0.0).epsilon(1e-12));

  // maximally uncertain: ln 2
  Tensor zeros3 = Tensor::zeros({3});
  CHECK(disc_loss(zeros3, zeros3).item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(gen_loss(zeros3).item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));

  // fully fooled discriminator
  Tensor fooled = Tensor::from_data({2}, {60, 70});
  CHECK(gen_loss(fooled).item() == doctest::Approx(0.0).epsilon(1e-12));

  Rng rng(23);
  for (int rep = 0; rep < 20; ++rep) {
    std::vector<double> f(5), r(4);
    for (auto& v : f) v = rng.uniform(-3, 3);
    for (auto& v : r) v = rng.uniform(-3, 3);
    const double lib = disc_loss(Tensor::from_data({5}, f), Tensor::from_data({4}, r)).item();
    const double ref = 0.5 * (oracle::binary_ce(f, 0.0) + oracle::binary_ce(r, 1.0));
    CHECK(lib == doctest::Approx(ref).epsilon(1e-8));
    CHECK(gen_loss(Tensor::from_data({5}, f)).item() ==
          doctest::Approx(oracle::binary_ce(f, 1.0)).epsilon(1e-8));
  }
}

TEST_CASE("ntxent: all-identical embeddings give ln 3 for N=2") {
  std::vector<double> data;
  for (int i = 0; i < 4; ++i) {
    data.push_back(0.3);
    data.push_back(0.4);
  }
  ContrastiveBatch b;
  b.embeddings = Tensor::from_data({4, 2}, data);
  b.partner = {2, 3, 0, 1};
  b.temperature = 0.5;
  CHECK(ntxent_loss(b).item() == doctest::Approx(std::log(3.0)).epsilon(1e-9));
}

TEST_CASE("ntxent: separable pairs at small temperature approach zero") {
  // positives perfectly aligned, negatives orthogonal
  ContrastiveBatch b;
  b.embeddings = Tensor::from_data({4, 4}, {1, 0, 0, 0, 0, 1, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0});
  b.partner = {2, 3, 0, 1};
  b.temperature = 0.02;
  CHECK(ntxent_loss(b).item() == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("ntxent matches double-loop oracle and is scale invariant") {
  Rng rng(29);
  for (int rep = 0; rep < 10; ++rep) {
    const int64_t n2 = 6, dim = 5;
    std::vector<std::vector<double>> rows(n2, std::vector<double>(dim));
    std::vector<double> flat;
    for (auto& r : rows) {
      for (auto& v : r) v = rng.uniform(-1, 1);
      flat.insert(flat.end(), r.begin(), r.end());
    }
    ContrastiveBatch b;
    b.embeddings = Tensor::from_data({n2, dim}, flat);
    b.partner = {3, 4, 5, 0, 1, 2};
    b.temperature = 0.5;
    const double lib = ntxent_loss(b).item();
    CHECK(lib == doctest::Approx(oracle::ntxent(rows, b.partner, 0.5)).epsilon(1e-6));

    // common positive rescaling leaves cosine similarities unchanged
    std::vector<double> scaled = flat;
    for (auto& v : scaled) v *= 37.5;
    ContrastiveBatch bs = b;
    bs.embeddings = Tensor::from_data({n2, dim}, scaled);
    CHECK(ntxent_loss(bs).item() == doctest::Approx(lib).epsilon(1e-6));
  }
}

TEST_CASE("ntxent rejects degenerate input and bad pairings") {
  ContrastiveBatch b;
  b.embeddings = Tensor::from_data({4, 2}, {1, 1, 0, 0, 1, 0, 0, 1});
  b.partner = {2, 3, 0, 1};
  CHECK_THROWS_AS(ntxent_loss(b), DegenerateInputError);
  ContrastiveBatch bad;
  bad.embeddings = Tensor::from_data({4, 2}, {1, 1, 1, 0, 1, 0, 0, 1});
  bad.partner = {1, 0, 3, 3};
  CHECK_THROWS_AS(ntxent_loss(bad), ConfigError);
}

TEST_CASE("ntxent gradient matches finite differences") {
  Rng rng(31);
  std::vector<double> flat(6 * 4);
  for (auto& v : flat) v = rng.uniform(-1, 1);
  std::vector<int64_t> partner{3, 4, 5, 0, 1, 2};
  Tensor e = Tensor::from_data({6, 4}, flat, true);
  ContrastiveBatch b;
  b.embeddings = e;
  b.partner = partner;
  b.temperature = 0.5;
  ntxent_loss(b).backward();
  const auto analytic = e.grad();
  auto f = [&](const std::vector<double>& x) {
    NoGradGuard guard;
    ContrastiveBatch bb;
    bb.embeddings = Tensor::from_data({6, 4}, x);
    bb.partner = partner;
    bb.temperature = 0.5;
    return ntxent_loss(bb).item();
  };
  const auto fd = finite_difference_gradient(f, flat);
  for (size_t i = 0; i < fd.size(); ++i) {
    CHECK(std::fabs(fd[i] - analytic[i]) <= 1e-4 * (1.0 + std::fabs(fd[i])));
  }
}

TEST_CASE("contrastive_total adds its parts") {
  Rng rng(37);
  Tensor x = random_grid({1, 1, 6, 6, 6}, rng);
  Tensor y = random_grid({1, 1, 6, 6, 6}, rng);
  SsimParams p;
  p.window = 3;
  ContrastiveBatch b;
  std::vector<double> flat(4 * 3);
  for (auto& v : flat) v = rng.uniform(-1, 1);
  b.embeddings = Tensor::from_data({4, 3}, flat);
  b.partner = {2, 3, 0, 1};
  auto r = contrastive_total(x, y, p, b);
  CHECK(r.total.item() == doctest::Approx(r.rec.item() + r.con.item()).epsilon(1e-12));
  CHECK(r.total.item() ==
        doctest::Approx(loss_rec(x, y, p).item() + ntxent_loss(b).item()).epsilon(1e-8));
}

namespace {

// random probability field (N,3,d,d,d) + random labels
std::pair<Tensor, Tensor> random_dice_case(Rng& rng, int64_t n, int64_t d) {
  const int64_t vox = d * d * d;
  std::vector<double> probs(n * 3 * vox);
  std::vector<double> onehot(n * 3 * vox, 0.0);
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t v = 0; v < vox; ++v) {
      double z[3];
      double s = 0;
      for (auto& x : z) {
        x = rng.uniform(0.05, 1.0);
        s += x;
      }
      for (int64_t c = 0; c < 3; ++c) probs[(i * 3 + c) * vox + v] = z[c] / s;
      onehot[(i * 3 + rng.uniform_int(3)) * vox + v] = 1.0;
    }
  }
  return {Tensor::from_data({n, 3, d, d, d}, probs), Tensor::from_data({n, 3, d, d, d}, onehot)};
}

}  // namespace

TEST_CASE("dice loss basics and oracle agreement") {
  // one-hot prediction equal to target -> ~0 (eps-limited)
  Rng rng(41);
  auto [probs, onehot] = random_dice_case(rng, 2, 4);
  CHECK(dice_loss(onehot, onehot).item() == doctest::Approx(0.0).epsilon(1e-6));

  // all-background prediction vs foreground-bearing target -> ~1
  const int64_t vox = 4 * 4 * 4;
  std::vector<double> bg(2 * 3 * vox, 0.0);
  for (int64_t i = 0; i < 2; ++i)
    for (int64_t v = 0; v < vox; ++v) bg[(i * 3 + 0) * vox + v] = 1.0;
  Tensor bg_probs = Tensor::from_data({2, 3, 4, 4, 4}, bg);
  CHECK(dice_loss(bg_probs, onehot).item() == doctest::Approx(1.0).epsilon(1e-3));

  for (int rep = 0; rep < 10; ++rep) {
    auto [p, g] = random_dice_case(rng, 2, 6);
    const double lib = dice_loss(p, g).item();
    const double ref = oracle::dice_loss(p.values(), g.values(), 2, 3, 6 * 6 * 6);
    CHECK(lib == doctest::Approx(ref).epsilon(1e-8));
  }
}

TEST_CASE("dice loss gradient matches finite differences") {
  Rng rng(43);
  const int64_t d = 4, vox = d * d * d;
  // parameterize via logits so the per-voxel sum-to-1 precondition holds
  std::vector<double> logits(3 * vox);
  for (auto& v : logits) v = rng.uniform(-1, 1);
  std::vector<double> onehot(3 * vox, 0.0);
  for (int64_t v = 0; v < vox; ++v) onehot[rng.uniform_int(3) * vox + v] = 1.0;
  Tensor g = Tensor::from_data({1, 3, vox / (d * d), d, d}, onehot);

  Tensor z = Tensor::from_data({1, 3, d, d, d}, logits, true);
  dice_loss(softmax_axis(z, 1), g).backward();
  const auto analytic = z.grad();
  auto f = [&](const std::vector<double>& x) {
    NoGradGuard guard;
    return dice_loss(softmax_axis(Tensor::from_data({1, 3, d, d, d}, x), 1), g).item();
  };
  const auto fd = finite_difference_gradient(f, logits);
  for (size_t i = 0; i < fd.size(); ++i) {
    CHECK(std::fabs(fd[i] - analytic[i]) <= 1e-4 * (1.0 + std::fabs(fd[i])));
  }
}

TEST_CASE("multitask loss weights and oracle") {
  Rng rng(47);
  auto [probs, onehot] = random_dice_case(rng, 2, 4);
  std::vector<double> logit_data(2 * 3);
  for (auto& v : logit_data) v = rng.uniform(-2, 2);
  Tensor logits = Tensor::from_data({2, 3}, logit_data);
  std::vector<int64_t> targets{2, 0};
  MultiTaskWeights w;
  auto r = multitask_loss(probs, onehot, logits, targets, w);

  const double dice_ref = oracle::dice_loss(probs.values(), onehot.values(), 2, 3, 64);
  const double ce_ref = oracle::cross_entropy(
      {{logit_data[0], logit_data[1], logit_data[2]}, {logit_data[3], logit_data[4], logit_data[5]}},
      targets);
  CHECK(r.seg.item() == doctest::Approx(dice_ref).epsilon(1e-8));
  CHECK(r.cls.item() == doctest::Approx(ce_ref).epsilon(1e-8));
  CHECK(r.total.item() == doctest::Approx(0.85 * dice_ref + 0.15 * ce_ref).epsilon(1e-8));

  // paper-weight arithmetic: dice 0.4, CE 1.0 -> 0.49
  CHECK(0.85 * 0.4 + 0.15 * 1.0 == doctest::Approx(0.49));
}

TEST_CASE("multitask gradient (cls path) matches finite differences") {
  Rng rng(53);
  auto [probs, onehot] = random_dice_case(rng, 1, 4);
  std::vector<double> logit_data(3);
  for (auto& v : logit_data) v = rng.uniform(-1, 1);
  std::vector<int64_t> targets{1};
  Tensor logits = Tensor::from_data({1, 3}, logit_data, true);
  multitask_loss(probs, onehot, logits, targets, MultiTaskWeights{}).total.backward();
  const auto analytic = logits.grad();
  auto f = [&](const std::vector<double>& x) {
    NoGradGuard guard;
    return multitask_loss(probs, onehot, Tensor::from_data({1, 3}, x), targets, MultiTaskWeights{})
        .total.item();
  };
  const auto fd = finite_difference_gradient(f, logit_data);
  for (size_t i = 0; i < fd.size(); ++i) {
    CHECK(std::fabs(fd[i] - analytic[i]) <= 1e-6 * (1.0 + std::fabs(fd[i])));
  }
}

TEST_CASE("ms_ssim identities") {
  Rng rng(59);
  Tensor x = random_grid({16, 16, 16}, rng);
  Tensor y = random_grid({16, 16, 16}, rng);
  SsimParams p;
  p.window = 3;
  CHECK(ms_ssim(x, x, p, 3).item() == doctest::Approx(1.0).epsilon(1e-10));
  CHECK(ms_ssim(x, y, p, 1).item() == doctest::Approx(ssim(x, y, p).item()).epsilon(1e-10));

  // direct per-level recomputation
  NoGradGuard guard;
  Tensor x5 = reshape(x, {1, 1, 16, 16, 16});
  Tensor y5 = reshape(y, {1, 1, 16, 16, 16});
  double expect = 1.0;
  for (int l = 0; l < 3; ++l) {
    expect *= ssim(x5, y5, p).item();
    x5 = avg_pool3d_2x(x5);
    y5 = avg_pool3d_2x(y5);
  }
  CHECK(ms_ssim(x, y, p, 3).item() == doctest::Approx(expect).epsilon(1e-6));
}

TEST_SUITE_END();
