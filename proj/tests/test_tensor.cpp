#include <doctest.h>

#include <cmath>

#include "pretune/tensor.hpp"

using namespace pretune;

namespace {

// Rebuilds the graph from flat leaf values and checks each analytic gradient
// against central finite differences.
void check_gradients(const std::vector<Shape>& shapes,
                     const std::function<Tensor(const std::vector<Tensor>&)>& fn, uint64_t seed,
                     double tol = 1e-6) {
  Rng rng(seed);
  std::vector<std::vector<double>> base;
  for (const auto& s : shapes) {
    std::vector<double> v(static_cast<size_t>(shape_numel(s)));
    for (auto& x : v) x = rng.uniform(-1.0, 1.0) + 0.1;  // keep away from relu kinks
    base.push_back(std::move(v));
  }

  std::vector<Tensor> leaves;
  for (size_t i = 0; i < shapes.size(); ++i) {
    leaves.push_back(Tensor::from_data(shapes[i], base[i], /*leaf_param=*/true));
  }
  Tensor out = fn(leaves);
  REQUIRE(out.numel() == 1);
  out.backward();

  for (size_t li = 0; li < shapes.size(); ++li) {
    auto f = [&](const std::vector<double>& flat) {
      std::vector<Tensor> inputs;
      for (size_t i = 0; i < shapes.size(); ++i) {
        inputs.push_back(Tensor::from_data(shapes[i], i == li ? flat : base[i]));
      }
      NoGradGuard guard;
      return fn(inputs).item();
    };
    const auto fd = finite_difference_gradient(f, base[li]);
    const auto& an = leaves[li].grad();
    for (size_t i = 0; i < fd.size(); ++i) {
      CHECK(std::fabs(fd[i] - an[i]) <= tol * (1.0 + std::fabs(fd[i]) + std::fabs(an[i])));
    }
  }
}

}  // namespace

TEST_SUITE_BEGIN("tensor");

TEST_CASE("shape and scalar basics") {
  Tensor s = Tensor::scalar(2.5);
  CHECK(s.numel() == 1);
  CHECK(s.item() == doctest::Approx(2.5));
  Tensor z = Tensor::zeros({2, 3});
  CHECK(z.numel() == 6);
  CHECK_THROWS_AS(Tensor::from_data({2, 2}, {1.0}), ShapeError);
}

TEST_CASE("broadcast add matches manual result") {
  Tensor a = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor b = Tensor::from_data({3}, {10, 20, 30});
  Tensor c = add(a, b);
  CHECK(c.values() == std::vector<double>{11, 22, 33, 14, 25, 36});
  CHECK_THROWS_AS(add(Tensor::zeros({2, 3}), Tensor::zeros({4})), ShapeError);
}

TEST_CASE("elementwise gradients") {
  check_gradients({{3, 4}, {3, 4}}, [](const std::vector<Tensor>& in) {
    return sum(mul(in[0], in[1]));
  }, 1);
  check_gradients({{2, 3}, {3}}, [](const std::vector<Tensor>& in) {
    return sum(div(in[0], add_scalar(square(in[1]), 1.5)));
  }, 2);
  check_gradients({{4, 1, 3}, {2, 3}}, [](const std::vector<Tensor>& in) {
    return sum(mul(in[0], in[1]));  // broadcast over two middle axes
  }, 3);
}

TEST_CASE("unary gradients") {
  check_gradients({{2, 5}}, [](const std::vector<Tensor>& in) {
    return sum(exp(mul_scalar(in[0], 0.3)));
  }, 4);
  check_gradients({{2, 5}}, [](const std::vector<Tensor>& in) {
    return sum(log(add_scalar(square(in[0]), 1.0)));
  }, 5);
  check_gradients({{7}}, [](const std::vector<Tensor>& in) { return sum(sigmoid(in[0])); }, 6);
  check_gradients({{7}}, [](const std::vector<Tensor>& in) { return sum(gelu(in[0])); }, 7);
  check_gradients({{7}}, [](const std::vector<Tensor>& in) { return sum(silu(in[0])); }, 8);
  check_gradients({{7}}, [](const std::vector<Tensor>& in) { return sum(softplus(in[0])); }, 9);
  check_gradients({{7}}, [](const std::vector<Tensor>& in) {
    return sum(sqrt(add_scalar(square(in[0]), 1.0)));
  }, 10);
  check_gradients({{7}}, [](const std::vector<Tensor>& in) {
    return sum(pow_scalar(add_scalar(square(in[0]), 1.0), -0.5));
  }, 11);
  check_gradients({{7}}, [](const std::vector<Tensor>& in) { return sum(tanh_op(in[0])); }, 12);
}

TEST_CASE("reduction gradients and values") {
  Tensor a = Tensor::from_data({2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
  Tensor s = sum(a, {0, 2}, false);
  CHECK(s.shape() == Shape{2});
  CHECK(s.values() == std::vector<double>{1 + 2 + 5 + 6, 3 + 4 + 7 + 8});
  Tensor m = mean(a, {1}, true);
  CHECK(m.shape() == Shape{2, 1, 2});
  CHECK(m.values()[0] == doctest::Approx(2.0));

  check_gradients({{3, 2, 4}}, [](const std::vector<Tensor>& in) {
    return sum(square(mean(in[0], {0, 2}, false)));
  }, 13);
  check_gradients({{3, 2, 4}}, [](const std::vector<Tensor>& in) {
    return mean(square(sum(in[0], {1}, true)));
  }, 14);
}

TEST_CASE("reshape permute slice concat gradients") {
  check_gradients({{2, 3, 4}}, [](const std::vector<Tensor>& in) {
    return sum(square(reshape(in[0], {4, 6})));
  }, 15);
  check_gradients({{2, 3, 4}}, [](const std::vector<Tensor>& in) {
    return sum(mul(permute(in[0], {2, 0, 1}), permute(in[0], {2, 0, 1})));
  }, 16);
  check_gradients({{2, 6}}, [](const std::vector<Tensor>& in) {
    return sum(square(slice(in[0], 1, 2, 3)));
  }, 17);
  check_gradients({{2, 3}, {2, 2}}, [](const std::vector<Tensor>& in) {
    return sum(square(concat({in[0], in[1]}, 1)));
  }, 18);
}

TEST_CASE("permute round trip") {
  Rng rng(99);
  Tensor a = Tensor::randn({2, 3, 4, 5}, rng);
  Tensor b = permute(permute(a, {3, 1, 0, 2}), {2, 1, 3, 0});
  CHECK(b.shape() == a.shape());
  for (int64_t i = 0; i < a.numel(); ++i) CHECK(a.values()[i] == b.values()[i]);
}

TEST_CASE("softmax and logsumexp") {
  Tensor x = Tensor::from_data({2, 3}, {1, 2, 3, 0, 0, 0});
  Tensor sm = softmax_lastdim(x);
  double row1 = sm.values()[0] + sm.values()[1] + sm.values()[2];
  CHECK(row1 == doctest::Approx(1.0));
  CHECK(sm.values()[3] == doctest::Approx(1.0 / 3));
  Tensor lse = logsumexp_lastdim(x);
  CHECK(lse.shape() == Shape{2});
  CHECK(lse.values()[1] == doctest::Approx(std::log(3.0)));

  check_gradients({{3, 5}}, [](const std::vector<Tensor>& in) {
    return sum(square(softmax_lastdim(in[0])));
  }, 19);
  check_gradients({{3, 5}}, [](const std::vector<Tensor>& in) {
    return sum(square(logsumexp_lastdim(in[0])));
  }, 20);
  check_gradients({{2, 3, 4}}, [](const std::vector<Tensor>& in) {
    return sum(square(softmax_axis(in[0], 1)));
  }, 21);
}

TEST_CASE("matmul values and gradients") {
  Tensor a = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor b = Tensor::from_data({3, 2}, {7, 8, 9, 10, 11, 12});
  Tensor c = matmul(a, b);
  CHECK(c.values() == std::vector<double>{58, 64, 139, 154});

  check_gradients({{3, 4}, {4, 2}}, [](const std::vector<Tensor>& in) {
    return sum(square(matmul(in[0], in[1])));
  }, 22);
  check_gradients({{3, 4}, {2, 4}}, [](const std::vector<Tensor>& in) {
    return sum(square(matmul(in[0], in[1], false, true)));
  }, 23);
  check_gradients({{4, 3}, {4, 2}}, [](const std::vector<Tensor>& in) {
    return sum(square(matmul(in[0], in[1], true, false)));
  }, 24);
}

TEST_CASE("bmm gradients") {
  check_gradients({{2, 3, 4}, {2, 4, 2}}, [](const std::vector<Tensor>& in) {
    return sum(square(bmm(in[0], in[1])));
  }, 25);
  check_gradients({{2, 3, 4}, {2, 5, 4}}, [](const std::vector<Tensor>& in) {
    return sum(square(bmm(in[0], in[1], false, true)));
  }, 26);
  check_gradients({{2, 4, 3}, {2, 4, 5}}, [](const std::vector<Tensor>& in) {
    return sum(square(bmm(in[0], in[1], true, false)));
  }, 27);
}

TEST_CASE("conv3d matches direct computation") {
  // 1x1x2x2x2 input, identity-ish kernel
  Tensor x = Tensor::from_data({1, 1, 2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
  Tensor w = Tensor::full({1, 1, 1, 1, 1}, 2.0);
  Tensor b = Tensor::from_data({1}, {0.5});
  Tensor y = conv3d(x, w, b, 1, 0);
  CHECK(y.shape() == Shape{1, 1, 2, 2, 2});
  CHECK(y.values()[3] == doctest::Approx(8.5));
}

TEST_CASE("conv3d gradients") {
  check_gradients({{2, 2, 3, 3, 3}, {3, 2, 3, 3, 3}, {3}}, [](const std::vector<Tensor>& in) {
    return sum(square(conv3d(in[0], in[1], in[2], 1, 1)));
  }, 28, 1e-5);
  check_gradients({{1, 2, 4, 4, 4}, {2, 2, 2, 2, 2}, {2}}, [](const std::vector<Tensor>& in) {
    return sum(square(conv3d(in[0], in[1], in[2], 2, 0)));
  }, 29, 1e-5);
}

TEST_CASE("spatial ops gradients") {
  check_gradients({{1, 2, 3, 3, 3}}, [](const std::vector<Tensor>& in) {
    return sum(square(pad3d(in[0], {1, 0, 1}, {0, 1, 1})));
  }, 30);
  check_gradients({{1, 2, 4, 4, 4}}, [](const std::vector<Tensor>& in) {
    return sum(square(crop3d(in[0], {1, 0, 2}, {2, 3, 2})));
  }, 31);
  check_gradients({{1, 1, 3, 4, 5}}, [](const std::vector<Tensor>& in) {
    return sum(square(mul(roll3d(in[0], {1, -2, 3}), in[0])));
  }, 32);
  check_gradients({{1, 2, 2, 2, 2}}, [](const std::vector<Tensor>& in) {
    return sum(square(upsample_nearest2x(in[0])));
  }, 33);
  check_gradients({{1, 2, 4, 4, 4}}, [](const std::vector<Tensor>& in) {
    return sum(square(avg_pool3d_2x(in[0])));
  }, 34);
}

TEST_CASE("roll wraps cyclically") {
  Tensor x = Tensor::from_data({1, 1, 1, 1, 4}, {1, 2, 3, 4});
  Tensor y = roll3d(x, {0, 0, 1});
  CHECK(y.values() == std::vector<double>{4, 1, 2, 3});
  Tensor back = roll3d(y, {0, 0, -1});
  CHECK(back.values() == std::vector<double>{1, 2, 3, 4});
}

TEST_CASE("grad accumulates across consumers") {
  Tensor x = Tensor::from_data({2}, {3.0, 4.0}, true);
  Tensor y = add(mul(x, x), mul_scalar(x, 2.0));  // x^2 + 2x -> dy/dx = 2x + 2
  sum(y).backward();
  CHECK(x.grad()[0] == doctest::Approx(8.0));
  CHECK(x.grad()[1] == doctest::Approx(10.0));
}

TEST_CASE("no-grad mode builds no graph") {
  Tensor x = Tensor::from_data({2}, {1.0, 2.0}, true);
  {
    NoGradGuard guard;
    Tensor y = sum(mul(x, x));
    y.backward();  // nothing wired: leaf gradient must stay zero
  }
  CHECK(x.grad()[0] == 0.0);
  CHECK(x.grad()[1] == 0.0);
}

TEST_SUITE_END();
