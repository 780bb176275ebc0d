#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "watervib/autodiff.hpp"
#include "watervib/rng.hpp"

using namespace watervib;
using Catch::Approx;

namespace {

std::vector<double> randn(std::size_t n, Rng& rng, double scale = 1.0, double offset = 0.0) {
  std::vector<double> v(n);
  for (double& x : v) x = offset + scale * rng.normal();
  return v;
}

}  // namespace

TEST_CASE("sigmoid at zero") {
  ad::Tape t;
  ad::Value x = t.leaf({1}, {0.0}, true);
  ad::Value y = ad::sigmoid(t, x);
  CHECK(t.data(y)[0] == Approx(0.5));
  t.backward(y);
  CHECK(t.grad(x)[0] == Approx(0.25));
}

TEST_CASE("matmul with identity and its gradient") {
  ad::Tape t;
  std::vector<double> eye = {1, 0, 0, 0, 1, 0, 0, 0, 1};
  std::vector<double> a = {1, 2, 3, 4, 5, 6, 7, 8, 9};
  ad::Value A = t.leaf({3, 3}, a, true);
  ad::Value I = t.constant({3, 3}, eye);
  ad::Value y = ad::matmul(t, A, I);
  for (int i = 0; i < 9; ++i) CHECK(t.data(y)[i] == a[i]);
  ad::Value s = ad::sum(t, y);
  t.backward(s);
  for (int i = 0; i < 9; ++i) CHECK(t.grad(A)[i] == 1.0);
}

TEST_CASE("grad_check: sum of squares is exact") {
  auto f = [](ad::Tape& t, const std::vector<ad::Value>& in) {
    return ad::sum(t, ad::multiply(t, in[0], in[0]));
  };
  const double err = ad::grad_check(f, {{{3}, {1.0, 2.0, 3.0}}});
  CHECK(err < 1e-8);
  // analytic gradient is [2, 4, 6]
  ad::Tape t;
  ad::Value x = t.leaf({3}, {1.0, 2.0, 3.0}, true);
  t.backward(f(t, {x}));
  CHECK(t.grad(x) == std::vector<double>{2.0, 4.0, 6.0});
}

TEST_CASE("elementwise primitives pass finite-difference checks") {
  Rng rng(51);
  auto inputs2 = [&](double scale, double offset) {
    return std::vector<std::pair<ad::Shape, std::vector<double>>>{
        {{2, 3}, randn(6, rng, scale, offset)}, {{2, 3}, randn(6, rng, scale, offset)}};
  };
  SECTION("add") {
    auto f = [](ad::Tape& t, const std::vector<ad::Value>& in) {
      return ad::mean(t, ad::add(t, in[0], in[1]));
    };
    CHECK(ad::grad_check(f, inputs2(1.0, 0.0)) < 1e-4);
  }
  SECTION("subtract") {
    auto f = [](ad::Tape& t, const std::vector<ad::Value>& in) {
      return ad::mean(t, ad::subtract(t, in[0], in[1]));
    };
    CHECK(ad::grad_check(f, inputs2(1.0, 0.0)) < 1e-4);
  }
  SECTION("multiply") {
    auto f = [](ad::Tape& t, const std::vector<ad::Value>& in) {
      return ad::sum(t, ad::multiply(t, in[0], in[1]));
    };
    CHECK(ad::grad_check(f, inputs2(1.0, 0.0)) < 1e-4);
  }
  SECTION("scale and clip interior") {
    auto f = [](ad::Tape& t, const std::vector<ad::Value>& in) {
      return ad::sum(t, ad::clip(t, ad::scale(t, in[0], 0.37), -10.0, 10.0));
    };
    CHECK(ad::grad_check(f, {{{2, 3}, randn(6, rng)}}) < 1e-4);
  }
  SECTION("relu away from the kink") {
    auto f = [](ad::Tape& t, const std::vector<ad::Value>& in) {
      return ad::sum(t, ad::relu(t, in[0]));
    };
    std::vector<double> x = randn(6, rng);
    for (double& v : x) v = v >= 0 ? v + 0.2 : v - 0.2;  // keep |x| > 0.1
    CHECK(ad::grad_check(f, {{{6}, x}}) < 1e-4);
  }
  SECTION("sigmoid, exp, log") {
    auto f = [](ad::Tape& t, const std::vector<ad::Value>& in) {
      return ad::mean(t, ad::sigmoid(t, ad::exp_(t, in[0])));
    };
    CHECK(ad::grad_check(f, {{{5}, randn(5, rng, 0.5)}}) < 1e-4);
    auto g = [](ad::Tape& t, const std::vector<ad::Value>& in) {
      return ad::mean(t, ad::log_(t, in[0]));
    };
    CHECK(ad::grad_check(g, {{{5}, randn(5, rng, 0.1, 2.0)}}) < 1e-4);
  }
}

TEST_CASE("clip gradient is zero outside the interval") {
  ad::Tape t;
  ad::Value x = t.leaf({3}, {-2.0, 0.5, 2.0}, true);
  ad::Value y = ad::sum(t, ad::clip(t, x, 0.0, 1.0));
  t.backward(y);
  CHECK(t.grad(x) == std::vector<double>{0.0, 1.0, 0.0});
}

TEST_CASE("matmul and bias_add pass finite-difference checks") {
  Rng rng(52);
  auto f = [](ad::Tape& t, const std::vector<ad::Value>& in) {
    return ad::mean(t, ad::bias_add(t, ad::matmul(t, in[0], in[1]), in[2]));
  };
  // wrap in a squared term so gradients are input-dependent
  auto g = [](ad::Tape& t, const std::vector<ad::Value>& in) {
    ad::Value y = ad::bias_add(t, ad::matmul(t, in[0], in[1]), in[2]);
    return ad::mean(t, ad::multiply(t, y, y));
  };
  const std::vector<std::pair<ad::Shape, std::vector<double>>> inputs = {
      {{3, 4}, randn(12, rng)}, {{4, 2}, randn(8, rng)}, {{2}, randn(2, rng)}};
  CHECK(ad::grad_check(f, inputs) < 1e-4);
  CHECK(ad::grad_check(g, inputs) < 1e-4);
}

TEST_CASE("conv2d gradient vs central finite differences on a random 1x8x8 input") {
  Rng rng(53);
  auto f = [](ad::Tape& t, const std::vector<ad::Value>& in) {
    ad::Value y = ad::conv2d(t, in[0], in[1], in[2]);
    return ad::mean(t, ad::multiply(t, y, y));
  };
  const std::vector<std::pair<ad::Shape, std::vector<double>>> inputs = {
      {{1, 1, 8, 8}, randn(64, rng)}, {{2, 1, 3, 3}, randn(18, rng)}, {{2}, randn(2, rng)}};
  CHECK(ad::grad_check(f, inputs) < 1e-4);
}

TEST_CASE("conv2d with multiple channels and batch passes finite differences") {
  Rng rng(54);
  auto f = [](ad::Tape& t, const std::vector<ad::Value>& in) {
    ad::Value y = ad::relu(t, ad::conv2d(t, in[0], in[1], in[2]));
    return ad::mean(t, ad::multiply(t, y, y));
  };
  const std::vector<std::pair<ad::Shape, std::vector<double>>> inputs = {
      {{2, 3, 6, 6}, randn(216, rng)}, {{2, 3, 3, 3}, randn(54, rng)}, {{2}, randn(2, rng)}};
  CHECK(ad::grad_check(f, inputs) < 1e-3);
}

TEST_CASE("bce with logits") {
  SECTION("zero logits give ln 2 per bit") {
    ad::Tape t;
    ad::Value l = t.leaf({4}, {0.0, 0.0, 0.0, 0.0}, true);
    ad::Value loss = ad::bce_with_logits(t, l, {1, 0, 1, 0});
    CHECK(t.data(loss)[0] == Approx(std::log(2.0)).margin(1e-15));
  }
  SECTION("saturated logit on the correct target gives ~0 loss, no NaN") {
    ad::Tape t;
    ad::Value l = t.leaf({1}, {20.0}, true);
    ad::Value loss = ad::bce_with_logits(t, l, {1});
    CHECK(std::isfinite(t.data(loss)[0]));
    CHECK(t.data(loss)[0] == Approx(0.0).margin(1e-8));
    t.backward(loss);
    CHECK(std::isfinite(t.grad(l)[0]));
  }
  SECTION("gradient vs finite differences") {
    Rng rng(55);
    const std::vector<double> targets = {1, 0, 0, 1, 1, 0};
    auto f = [&targets](ad::Tape& t, const std::vector<ad::Value>& in) {
      return ad::bce_with_logits(t, in[0], targets);
    };
    CHECK(ad::grad_check(f, {{{6}, randn(6, rng, 2.0)}}) < 1e-4);
  }
  SECTION("length mismatch throws") {
    ad::Tape t;
    ad::Value l = t.leaf({2}, {0.0, 0.0}, true);
    CHECK_THROWS_AS(ad::bce_with_logits(t, l, {1}), std::invalid_argument);
  }
}

TEST_CASE("gaussian kl") {
  SECTION("posterior equal to prior gives zero") {
    ad::Tape t;
    ad::Value mu = t.leaf({3}, {0, 0, 0}, true);
    ad::Value lv = t.leaf({3}, {0, 0, 0}, true);
    CHECK(t.data(ad::gaussian_kl(t, mu, lv))[0] == 0.0);
  }
  SECTION("unit mean, unit variance gives one half") {
    ad::Tape t;
    ad::Value mu = t.leaf({1}, {1.0}, true);
    ad::Value lv = t.leaf({1}, {0.0}, true);
    CHECK(t.data(ad::gaussian_kl(t, mu, lv))[0] == Approx(0.5));
  }
  SECTION("batch input averages over rows") {
    ad::Tape t;
    ad::Value mu = t.constant({2, 1}, {1.0, 1.0});
    ad::Value lv = t.constant({2, 1}, {0.0, 0.0});
    CHECK(t.data(ad::gaussian_kl(t, mu, lv))[0] == Approx(0.5));
  }
  SECTION("gradient vs finite differences") {
    Rng rng(56);
    auto f = [](ad::Tape& t, const std::vector<ad::Value>& in) {
      return ad::gaussian_kl(t, in[0], in[1]);
    };
    CHECK(ad::grad_check(f, {{{4}, randn(4, rng)}, {{4}, randn(4, rng)}}) < 1e-4);
  }
}

TEST_CASE("spatial ops pass finite-difference checks") {
  Rng rng(57);
  SECTION("quadrant_pool") {
    auto f = [](ad::Tape& t, const std::vector<ad::Value>& in) {
      ad::Value y = ad::quadrant_pool(t, in[0]);
      return ad::mean(t, ad::multiply(t, y, y));
    };
    CHECK(ad::grad_check(f, {{{1, 2, 4, 4}, randn(32, rng)}}) < 1e-4);
  }
  SECTION("resize_bilinear down and up") {
    auto f = [](ad::Tape& t, const std::vector<ad::Value>& in) {
      ad::Value y = ad::resize_bilinear(t, ad::resize_bilinear(t, in[0], 3, 3), 8, 8);
      return ad::mean(t, ad::multiply(t, y, y));
    };
    CHECK(ad::grad_check(f, {{{1, 1, 8, 8}, randn(64, rng)}}) < 1e-4);
  }
  SECTION("gaussian_blur5") {
    auto f = [](ad::Tape& t, const std::vector<ad::Value>& in) {
      ad::Value y = ad::gaussian_blur5(t, in[0]);
      return ad::mean(t, ad::multiply(t, y, y));
    };
    CHECK(ad::grad_check(f, {{{1, 1, 8, 8}, randn(64, rng)}}) < 1e-4);
  }
  SECTION("dct8_mask") {
    auto f = [](ad::Tape& t, const std::vector<ad::Value>& in) {
      ad::Value y = ad::dct8_mask(t, in[0], 25);
      return ad::mean(t, ad::multiply(t, y, y));
    };
    CHECK(ad::grad_check(f, {{{1, 1, 8, 8}, randn(64, rng)}}) < 1e-4);
  }
}

TEST_CASE("gradient accumulation is additive") {
  Rng rng(58);
  const std::vector<double> x0 = randn(6, rng);
  auto run = [&](int mode) {
    ad::Tape t;
    ad::Value x = t.leaf({6}, x0, true);
    ad::Value l1 = ad::sum(t, ad::multiply(t, x, x));
    ad::Value l2 = ad::mean(t, ad::sigmoid(t, x));
    ad::Value target = mode == 0 ? l1 : (mode == 1 ? l2 : ad::add(t, l1, l2));
    t.backward(target);
    return t.grad(x);
  };
  const auto g1 = run(0);
  const auto g2 = run(1);
  const auto gsum = run(2);
  for (int i = 0; i < 6; ++i) CHECK(gsum[i] == Approx(g1[i] + g2[i]).margin(1e-12));
}

TEST_CASE("determinism: identical seeds give bit-identical results") {
  auto run = [] {
    Rng rng(59);
    ad::Tape t;
    ad::Value x = t.leaf({4, 4}, randn(16, rng), true);
    ad::Value w = t.leaf({4, 4}, randn(16, rng), true);
    ad::Value y = ad::mean(t, ad::sigmoid(t, ad::matmul(t, x, w)));
    t.backward(y);
    auto out = t.data(y);
    auto g = t.grad(x);
    out.insert(out.end(), g.begin(), g.end());
    return out;
  };
  CHECK(run() == run());
}

TEST_CASE("backward before forward is rejected") {
  ad::Tape t;
  ad::Value x = t.leaf({2}, {1.0, 2.0}, true);
  CHECK_THROWS_AS(t.grad(x), std::runtime_error);
  CHECK_THROWS_AS(t.backward(x), std::runtime_error);  // non-scalar root
}

TEST_CASE("shape mismatches are rejected") {
  ad::Tape t;
  ad::Value a = t.leaf({2, 3}, std::vector<double>(6, 1.0), false);
  ad::Value b = t.leaf({3, 2}, std::vector<double>(6, 1.0), false);
  CHECK_THROWS_AS(ad::add(t, a, b), std::invalid_argument);
  CHECK_THROWS_AS(ad::matmul(t, a, a), std::invalid_argument);
  CHECK_THROWS_AS(ad::conv2d(t, a, b), std::invalid_argument);
}
