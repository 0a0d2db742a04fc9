#include <catch2/catch_amalgamated.hpp>

#include "vitmix/optim.hpp"

using namespace vitmix;
using Catch::Approx;

TEST_CASE("first adamw step moves by roughly the learning rate") {
  auto p = Tensor<float>::from({1}, {1.0f}).set_requires_grad();
  // plant a unit gradient
  sum_all(p).backward();
  AdamW<float> opt({&p}, {0.1, 0.9, 0.999, 1e-8, 0.0});
  opt.step(0.1);
  // bias-corrected first step: m_hat = v_hat = 1, update = lr / (1 + eps)
  REQUIRE(p.data()[0] == Approx(0.9).margin(1e-6));
}

TEST_CASE("zero gradient and zero decay leave parameters untouched") {
  auto p = Tensor<float>::from({3}, {1.0f, -2.0f, 0.5f}).set_requires_grad();
  AdamW<float> opt({&p}, {0.1, 0.9, 0.999, 1e-8, 0.0});
  opt.step(0.1);
  REQUIRE(p.data()[0] == 1.0f);
  REQUIRE(p.data()[1] == -2.0f);
  REQUIRE(p.data()[2] == 0.5f);
}

TEST_CASE("decoupled decay shrinks parameters by exactly lr*wd*p") {
  auto p = Tensor<double>::from({2}, {1.0, -4.0}).set_requires_grad();
  const double lr = 0.05, wd = 0.2;
  AdamW<double> opt({&p}, {lr, 0.9, 0.999, 1e-8, wd});
  opt.step(lr);
  REQUIRE(p.data()[0] == Approx(1.0 * (1.0 - lr * wd)).margin(1e-15));
  REQUIRE(p.data()[1] == Approx(-4.0 * (1.0 - lr * wd)).margin(1e-15));
}

TEST_CASE("cosine schedule endpoints and midpoint") {
  REQUIRE(cosine_lr(0, 100, 1e-3) == Approx(1e-3));
  REQUIRE(cosine_lr(100, 100, 1e-3) == Approx(0.0).margin(1e-18));
  REQUIRE(cosine_lr(50, 100, 1e-3) == Approx(5e-4));
  REQUIRE(cosine_lr(50, 100, 1e-3, 2e-4) == Approx(6e-4));
  REQUIRE(cosine_lr(0, 100, 1e-3, 2e-4) == Approx(1e-3));
  REQUIRE(cosine_lr(100, 100, 1e-3, 2e-4) == Approx(2e-4));
}

TEST_CASE("cosine schedule is monotone non-increasing over one cycle") {
  double prev = cosine_lr(0, 200, 1e-3);
  for (int s = 1; s <= 200; ++s) {
    const double cur = cosine_lr(s, 200, 1e-3);
    REQUIRE(cur <= prev + 1e-18);
    prev = cur;
  }
}

TEST_CASE("steps outside the schedule horizon are rejected") {
  REQUIRE_THROWS_AS(cosine_lr(-1, 100, 1e-3), ConfigError);
  REQUIRE_THROWS_AS(cosine_lr(101, 100, 1e-3), ConfigError);
}
