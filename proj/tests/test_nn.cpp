#include <doctest.h>

#include <cmath>

#include "pretune/nn.hpp"

using namespace pretune;
using namespace pretune::nn;

TEST_SUITE_BEGIN("nn");

TEST_CASE("linear forward matches manual matmul and keeps trailing shape") {
  Rng rng(3);
  Linear lin = Linear::create(4, 2, rng);
  Tensor x = Tensor::rand_uniform({3, 5, 4}, rng, -1, 1);
  Tensor y = lin.forward(x);
  CHECK(y.shape() == Shape{3, 5, 2});
  // spot check one element
  double acc = lin.bias.values()[1];
  for (int k = 0; k < 4; ++k) acc += x.values()[k] * lin.weight.values()[1 * 4 + k];
  CHECK(y.values()[1] == doctest::Approx(acc).epsilon(1e-12));
}

TEST_CASE("linear lora path: zero B keeps output identical") {
  Rng rng(5);
  Linear lin = Linear::create(6, 3, rng);
  Tensor x = Tensor::rand_uniform({4, 6}, rng, -1, 1);
  Tensor base = lin.forward(x);

  lin.lora_rank = 2;
  lin.lora_scale = 4.0 / 2.0;
  lin.lora_a = Tensor::randn({2, 6}, rng, 0.02, true);
  lin.lora_b = Tensor::zeros({3, 2}, true);
  Tensor adapted = lin.forward(x);
  for (int64_t i = 0; i < base.numel(); ++i) {
    CHECK(std::fabs(base.values()[i] - adapted.values()[i]) <= 1e-7);
  }

  // non-zero B shifts the output by scale * B A x
  lin.lora_b = Tensor::rand_uniform({3, 2}, rng, -1, 1, true);
  Tensor shifted = lin.forward(x);
  bool any_diff = false;
  for (int64_t i = 0; i < base.numel(); ++i) {
    any_diff |= std::fabs(base.values()[i] - shifted.values()[i]) > 1e-9;
  }
  CHECK(any_diff);
}

TEST_CASE("layer norm normalizes the trailing axis") {
  Rng rng(7);
  LayerNorm ln = LayerNorm::create(8);
  Tensor x = Tensor::rand_uniform({5, 8}, rng, -2, 2);
  Tensor y = ln.forward(x);
  for (int64_t r = 0; r < 5; ++r) {
    double mean = 0, var = 0;
    for (int64_t c = 0; c < 8; ++c) mean += y.values()[r * 8 + c];
    mean /= 8;
    for (int64_t c = 0; c < 8; ++c) {
      const double d = y.values()[r * 8 + c] - mean;
      var += d * d;
    }
    CHECK(mean == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(var / 8 == doctest::Approx(1.0).epsilon(1e-3));
  }
}

TEST_CASE("norm layers gradcheck through composition") {
  Rng rng(9);
  InstanceNorm3d in3 = InstanceNorm3d::create(2);
  GroupNorm3d gn = GroupNorm3d::create(4, 2);
  std::vector<double> base(2 * 2 * 3 * 3 * 3);
  for (auto& v : base) v = rng.uniform(-1, 1);
  Tensor x = Tensor::from_data({2, 2, 3, 3, 3}, base, true);
  sum(square(in3.forward(x))).backward();
  auto analytic = x.grad();
  auto f = [&](const std::vector<double>& flat) {
    NoGradGuard g;
    return sum(square(in3.forward(Tensor::from_data({2, 2, 3, 3, 3}, flat)))).item();
  };
  auto fd = finite_difference_gradient(f, base);
  for (size_t i = 0; i < fd.size(); ++i) {
    CHECK(std::fabs(fd[i] - analytic[i]) <= 1e-5 * (1 + std::fabs(fd[i])));
  }

  std::vector<double> base2(1 * 4 * 2 * 2 * 2);
  for (auto& v : base2) v = rng.uniform(-1, 1);
  Tensor x2 = Tensor::from_data({1, 4, 2, 2, 2}, base2, true);
  sum(square(gn.forward(x2))).backward();
  auto analytic2 = x2.grad();
  auto f2 = [&](const std::vector<double>& flat) {
    NoGradGuard g;
    return sum(square(gn.forward(Tensor::from_data({1, 4, 2, 2, 2}, flat)))).item();
  };
  auto fd2 = finite_difference_gradient(f2, base2);
  for (size_t i = 0; i < fd2.size(); ++i) {
    CHECK(std::fabs(fd2[i] - analytic2[i]) <= 1e-5 * (1 + std::fabs(fd2[i])));
  }
}

TEST_CASE("self attention: shape, mask effect, gradient flow") {
  Rng rng(11);
  auto attn = MultiHeadSelfAttention::create(8, 2, rng);
  Tensor x = Tensor::rand_uniform({4, 6, 8}, rng, -1, 1, true);
  Tensor y = attn.forward(x);
  CHECK(y.shape() == Shape{4, 6, 8});

  // additive -1e9 mask on one token pair changes the output
  std::vector<double> mask_data(2 * 6 * 6, 0.0);
  mask_data[0 * 36 + 0 * 6 + 1] = -1e9;
  Tensor mask = Tensor::from_data({2, 6, 6}, mask_data);
  Tensor ym = attn.forward(x, mask);
  bool differs = false;
  for (int64_t i = 0; i < y.numel(); ++i) {
    differs |= std::fabs(y.values()[i] - ym.values()[i]) > 1e-12;
  }
  CHECK(differs);

  sum(square(y)).backward();
  double gnorm = 0;
  for (double g : x.grad()) gnorm += g * g;
  CHECK(gnorm > 0);
}

TEST_CASE("cross attention consumes its context") {
  Rng rng(13);
  auto ca = CrossAttention::create(6, 4, 2, rng);
  Tensor x = Tensor::rand_uniform({2, 5, 6}, rng, -1, 1);
  Tensor ctx1 = Tensor::rand_uniform({2, 1, 4}, rng, -1, 1);
  Tensor ctx0 = Tensor::zeros({2, 1, 4});
  Tensor y1 = ca.forward(x, ctx1);
  Tensor y0 = ca.forward(x, ctx0);
  CHECK(y1.shape() == Shape{2, 5, 6});
  bool differs = false;
  for (int64_t i = 0; i < y1.numel(); ++i) {
    differs |= std::fabs(y1.values()[i] - y0.values()[i]) > 1e-12;
  }
  CHECK(differs);
}

TEST_CASE("adam: zero lr leaves parameters unchanged, steps reduce quadratic") {
  std::vector<ParamEntry> params;
  Tensor w = Tensor::from_data({3}, {1.0, -2.0, 3.0}, true);
  params.push_back({"w", w, ParamKind::other, Stage::encoder, true});
  Adam opt(&params, AdamConfig{0.9, 0.999, 1e-8, 0.01});

  auto loss_of = [&]() { return sum(square(params[0].tensor)); };
  Tensor l0 = loss_of();
  opt.zero_grad();
  l0.backward();
  opt.step(0.0);  // weight decay is folded into the gradient, so lr=0 freezes everything
  CHECK(params[0].tensor.values() == std::vector<double>{1.0, -2.0, 3.0});

  for (int i = 0; i < 50; ++i) {
    Tensor l = loss_of();
    opt.zero_grad();
    l.backward();
    opt.step(0.1);
  }
  CHECK(loss_of().item() < l0.item() * 0.5);
}

TEST_CASE("adam skips non-trainable entries") {
  std::vector<ParamEntry> params;
  params.push_back(
      {"a", Tensor::from_data({2}, {1.0, 1.0}, true), ParamKind::other, Stage::encoder, true});
  params.push_back(
      {"b", Tensor::from_data({2}, {1.0, 1.0}, true), ParamKind::other, Stage::encoder, false});
  Adam opt(&params, AdamConfig{});
  Tensor loss = sum(square(add(params[0].tensor, params[1].tensor)));
  opt.zero_grad();
  loss.backward();
  opt.step(0.1);
  CHECK(params[0].tensor.values()[0] != 1.0);
  CHECK(params[1].tensor.values()[0] == 1.0);
}

TEST_CASE("param collector builds dotted dataflow names") {
  Rng rng(23);
  ParamCollector c;
  c.set_stage(Stage::decoder);
  Linear lin = Linear::create(3, 2, rng);
  {
    ParamScope scope(c, "block0");
    lin.collect(c, "fc");
  }
  auto entries = c.take();
  REQUIRE(entries.size() == 2);
  CHECK(entries[0].name == "block0.fc.weight");
  CHECK(entries[1].name == "block0.fc.bias");
  CHECK(entries[0].stage == Stage::decoder);
  CHECK(entries[0].kind == ParamKind::linear);
}

TEST_SUITE_END();
