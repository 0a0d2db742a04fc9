#include <catch2/catch_amalgamated.hpp>

#include "support/gradcheck.hpp"
#include "vitmix/patches.hpp"
#include "vitmix/tensor.hpp"

using namespace vitmix;
using vitmix::testing::finite_diff_check;
using Catch::Approx;

namespace {
Tensor<double> leaf(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  return Tensor<double>::uniform(std::move(shape), rng, lo, hi).set_requires_grad();
}
} // namespace

TEST_CASE("matmul forced values") {
  auto a = Tensor<double>::from({1, 2}, {1, 2});
  auto b = Tensor<double>::from({2, 1}, {3, 4});
  auto c = matmul(a, b);
  REQUIRE(c.shape() == Shape{1, 1});
  REQUIRE(c.data()[0] == 11.0);
}

TEST_CASE("matmul by identity is exact") {
  Rng rng(7);
  auto a = Tensor<double>::uniform({4, 4}, rng, -2, 2);
  auto eye = Tensor<double>::zeros({4, 4});
  for (int i = 0; i < 4; ++i) eye.mutable_data()[i * 4 + i] = 1.0;
  auto c = matmul(a, eye);
  for (std::int64_t i = 0; i < a.numel(); ++i) REQUIRE(c.data()[i] == a.data()[i]);
}

TEST_CASE("matmul shape errors name both operands") {
  auto a = Tensor<double>::zeros({2, 3});
  auto b = Tensor<double>::zeros({4, 2});
  REQUIRE_THROWS_MATCHES(matmul(a, b), ShapeError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("(2,3)") &&
                             Catch::Matchers::ContainsSubstring("(4,2)")));
}

TEST_CASE("matmul gradient vs finite differences") {
  auto a = leaf({3, 4}, 11);
  auto b = leaf({4, 2}, 12);
  auto rep = finite_diff_check([&] { return sum_all(matmul(a, b)); }, {&a, &b});
  REQUIRE(rep.max_rel_err < 1e-4);
}

TEST_CASE("batched matmul gradient vs finite differences") {
  auto a = leaf({2, 3, 4}, 13);
  auto b = leaf({2, 4, 2}, 14);
  auto rep = finite_diff_check([&] { return sum_all(matmul(a, b)); }, {&a, &b});
  REQUIRE(rep.max_rel_err < 1e-4);
}

TEST_CASE("softmax symmetry") {
  auto s = softmax(Tensor<double>::from({2}, {0, 0}), 0);
  REQUIRE(s.data()[0] == Approx(0.5));
  REQUIRE(s.data()[1] == Approx(0.5));
}

TEST_CASE("softmax rows sum to one") {
  Rng rng(3);
  auto x = Tensor<double>::uniform({5, 7}, rng, -4, 4);
  auto s = softmax(x, -1);
  for (int r = 0; r < 5; ++r) {
    double acc = 0;
    for (int c = 0; c < 7; ++c) acc += s.data()[r * 7 + c];
    REQUIRE(acc == Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("mean of squared identical inputs is zero") {
  auto x = Tensor<double>::from({3}, {1, 2, 3});
  auto y = Tensor<double>::from({3}, {1, 2, 3});
  REQUIRE(mse(x, y).item() == 0.0);
}

TEST_CASE("layer_norm output has zero mean and unit variance per slice") {
  Rng rng(5);
  auto x = Tensor<double>::uniform({4, 16}, rng, -3, 3);
  auto y = layer_norm(x, -1);
  for (int r = 0; r < 4; ++r) {
    double m = 0, v = 0;
    for (int c = 0; c < 16; ++c) m += y.data()[r * 16 + c];
    m /= 16;
    for (int c = 0; c < 16; ++c) {
      const double d = y.data()[r * 16 + c] - m;
      v += d * d;
    }
    v /= 16;
    REQUIRE(m == Approx(0.0).margin(1e-12));
    REQUIRE(v == Approx(1.0).epsilon(1e-4)); // epsilon in the root shifts it slightly
  }
}

TEST_CASE("axis out of range raises") {
  auto x = Tensor<double>::zeros({2, 3});
  REQUIRE_THROWS_AS(softmax(x, 2), ShapeError);
  REQUIRE_THROWS_AS(softmax(x, -3), ShapeError);
  REQUIRE_THROWS_AS(layer_norm(x, 5), ShapeError);
}

TEST_CASE("non-broadcastable shapes raise") {
  auto a = Tensor<double>::zeros({2, 3});
  auto b = Tensor<double>::zeros({2, 4});
  REQUIRE_THROWS_AS(add(a, b), ShapeError);
}

TEST_CASE("every elementwise and reduction op matches finite differences") {
  const double tol = 1e-4;
  auto check = [&](const char* name, std::function<Tensor<double>()> f,
                   std::vector<Tensor<double>*> params) {
    INFO(name);
    REQUIRE(finite_diff_check(f, params).max_rel_err < tol);
  };

  auto a = leaf({3, 4}, 21);
  auto b = leaf({3, 4}, 22);
  auto row = leaf({4}, 23);
  auto pos = leaf({3, 4}, 24, 0.3, 2.0); // positive, for sqrt

  check("add", [&] { return sum_all(add(a, b)); }, {&a, &b});
  check("add broadcast", [&] { return sum_all(add(a, row)); }, {&a, &row});
  check("sub", [&] { return sum_all(sub(a, b)); }, {&a, &b});
  check("mul", [&] { return sum_all(mul(a, b)); }, {&a, &b});
  check("mul broadcast", [&] { return sum_all(mul(a, row)); }, {&a, &row});
  check("scale", [&] { return sum_all(scale(a, 1.7)); }, {&a});
  check("square", [&] { return sum_all(square(a)); }, {&a});
  check("sqrt", [&] { return sum_all(sqrt_t(pos)); }, {&pos});
  check("exp", [&] { return sum_all(exp_t(a)); }, {&a});
  check("gelu", [&] { return sum_all(gelu(a)); }, {&a});
  check("mean", [&] { return mean_all(square(a)); }, {&a});
  check("sum", [&] { return sum_all(square(a)); }, {&a});
  check("mean_last", [&] { return sum_all(square(mean_last(a))); }, {&a});
  check("softmax last", [&] { return sum_all(square(softmax(a, -1))); }, {&a});
  check("softmax axis0", [&] { return sum_all(square(softmax(a, 0))); }, {&a});
  check("layer_norm", [&] { return sum_all(square(layer_norm(a, -1))); }, {&a});
  check("layer_norm axis0", [&] { return sum_all(square(layer_norm(a, 0))); }, {&a});
  check("transpose", [&] { return sum_all(square(transpose(a, 0, 1))); }, {&a});
  check("reshape", [&] { return sum_all(square(reshape(a, {4, 3}))); }, {&a});
  check("slice_last", [&] { return sum_all(square(slice_last(a, 1, 3))); }, {&a});
  check("concat_last", [&] { return sum_all(square(concat_last(a, b))); }, {&a, &b});
  check("mse", [&] { return mse(a, b); }, {&a, &b});
}

TEST_CASE("gather, tile and permutation ops match finite differences") {
  const double tol = 1e-4;
  auto t3 = leaf({3, 4, 5}, 31);

  REQUIRE(finite_diff_check(
              [&] { return sum_all(square(gather_axis0(t3, {2, 0, 2}))); }, {&t3})
              .max_rel_err < tol);
  REQUIRE(finite_diff_check(
              [&] {
                return sum_all(square(gather_rows(t3, {{0, 1}, {2, 3}, {0, 1}})));
              },
              {&t3})
              .max_rel_err < tol);

  auto t2 = leaf({3, 5}, 32);
  REQUIRE(finite_diff_check([&] { return sum_all(square(tile_rows(t2, 4))); }, {&t2})
              .max_rel_err < tol);

  auto img = leaf({3, 8, 8}, 33);
  REQUIRE(finite_diff_check([&] { return sum_all(square(patchify(img, 4))); }, {&img})
              .max_rel_err < tol);
}

TEST_CASE("conv building blocks match finite differences") {
  const double tol = 1e-4;
  auto x = leaf({2, 3, 6, 6}, 41);
  REQUIRE(finite_diff_check([&] { return sum_all(square(im2col(x, 3, 1, 1))); }, {&x})
              .max_rel_err < tol);
  REQUIRE(finite_diff_check([&] { return sum_all(square(avg_pool2(x))); }, {&x})
              .max_rel_err < tol);

  auto logits = leaf({4, 3}, 42);
  std::vector<int> labels = {0, 2, 1, 2};
  REQUIRE(finite_diff_check([&] { return softmax_cross_entropy(logits, labels); }, {&logits})
              .max_rel_err < tol);
}

TEST_CASE("backward of sum gives unit gradients") {
  auto w = Tensor<double>::from({3}, {5, -1, 2}).set_requires_grad();
  sum_all(w).backward();
  for (double g : w.grad()) REQUIRE(g == 1.0);
}

TEST_CASE("backward of sum of squares is the analytic derivative") {
  auto w = Tensor<double>::from({2}, {1, 2}).set_requires_grad();
  sum_all(square(w)).backward();
  REQUIRE(w.grad()[0] == Approx(2.0));
  REQUIRE(w.grad()[1] == Approx(4.0));
}

TEST_CASE("backward on a non-scalar is rejected") {
  auto w = Tensor<double>::from({2}, {1, 2}).set_requires_grad();
  REQUIRE_THROWS_AS(square(w).backward(), ShapeError);
}

TEST_CASE("gradients accumulate across backward calls until zeroed") {
  auto w = Tensor<double>::from({2}, {1, 2}).set_requires_grad();
  sum_all(square(w)).backward();
  sum_all(square(w)).backward();
  REQUIRE(w.grad()[0] == Approx(4.0));
  REQUIRE(w.grad()[1] == Approx(8.0));
  w.zero_grad();
  REQUIRE(w.grad()[0] == 0.0);
  sum_all(square(w)).backward();
  REQUIRE(w.grad()[1] == Approx(4.0));
}

TEST_CASE("disconnected parameters keep no gradient") {
  auto w = Tensor<double>::from({2}, {1, 2}).set_requires_grad();
  auto unused = Tensor<double>::from({2}, {3, 4}).set_requires_grad();
  sum_all(square(w)).backward();
  REQUIRE(w.has_grad());
  REQUIRE_FALSE(unused.has_grad());
}

TEST_CASE("no-grad guard suppresses graph recording") {
  auto w = Tensor<double>::from({2}, {1, 2}).set_requires_grad();
  Tensor<double> y;
  {
    NoGradGuard ng;
    y = sum_all(square(w));
  }
  REQUIRE_FALSE(y.requires_grad());
}

TEST_CASE("seeded computations replay bit-identically") {
  auto run = [] {
    Rng rng(99);
    auto a = Tensor<double>::randn({6, 6}, rng);
    auto b = Tensor<double>::uniform({6, 6}, rng, -1, 1);
    auto out = softmax(matmul(gelu(a), layer_norm(b, -1)), -1);
    return std::vector<double>(out.data(), out.data() + out.numel());
  };
  const auto first = run();
  const auto second = run();
  REQUIRE(first.size() == second.size());
  for (std::size_t i = 0; i < first.size(); ++i) REQUIRE(first[i] == second[i]);
}
