#include <doctest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "hydet/ops.hpp"
#include "hydet/optim.hpp"

using namespace hydet;
using hydet::testing::gradcheck;
using hydet::testing::random_tensor;
using hydet::testing::weighted_sum;

namespace {

Tensor<double> T(Shape s, std::vector<double> v, bool rg = false) {
  return Tensor<double>::from_data(std::move(s), std::move(v), rg);
}

}  // namespace

TEST_CASE("conv2d hand-computed values") {
  auto y = conv2d<double>(T({1, 1, 2, 2}, {1, 1, 1, 1}), T({1, 1, 1, 1}, {2}), T({1}, {0}), 1, 0);
  CHECK(y.shape() == Shape{1, 1, 2, 2});
  for (double v : y.data()) CHECK(v == 2.0);

  auto z = conv2d<double>(T({1, 1, 3, 3}, std::vector<double>(9, 1.0)), T({1, 1, 3, 3}, std::vector<double>(9, 1.0)),
                  std::nullopt, 1, 1);
  const std::vector<double> want{4, 6, 4, 6, 9, 6, 4, 6, 4};
  CHECK(std::vector<double>(z.data().begin(), z.data().end()) == want);

  auto s = conv2d<double>(Tensor<double>::zeros({2, 3, 64, 64}), Tensor<double>::zeros({16, 3, 3, 3}), std::nullopt, 2, 1);
  CHECK(s.shape() == Shape{2, 16, 32, 32});
}

TEST_CASE("conv2d rejects bad shapes") {
  CHECK_THROWS_AS(conv2d<double>(Tensor<double>::zeros({1, 2, 4, 4}), Tensor<double>::zeros({1, 3, 3, 3}), std::nullopt, 1, 1),
                  ShapeError);
  CHECK_THROWS_AS(conv2d<double>(Tensor<double>::zeros({1, 1, 2, 2}), Tensor<double>::zeros({1, 1, 5, 5}), std::nullopt, 1, 0),
                  ShapeError);
}

TEST_CASE("activations") {
  CHECK(silu(T({1}, {0.0})).item() == 0.0);
  CHECK(sigmoid(T({1}, {0.0})).item() == 0.5);
  auto sm = softmax(T({4}, {3, 3, 3, 3}));
  for (double v : sm.data()) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("batchnorm2d statistics") {
  BatchNormState<double> st(2);
  auto gamma = Tensor<double>::full({2}, 1.0), beta = T({2}, {0.3, -0.7});
  auto c = Tensor<double>::full({2, 2, 3, 3}, 5.0);
  auto y = batchnorm2d(c, gamma, beta, st, NormMode::train);
  for (int i = 0; i < 36; ++i) CHECK(y.data()[i] == doctest::Approx((i / 9) % 2 == 0 ? 0.3 : -0.7));

  BatchNormState<double> fresh(2);
  auto x = T({1, 2, 1, 2}, {1.0, -2.0, 0.5, 3.0});
  auto e = batchnorm2d(x, gamma, Tensor<double>::zeros({2}), fresh, NormMode::eval);
  for (int i = 0; i < 4; ++i) CHECK(e.data()[i] == doctest::Approx(x.data()[i] / std::sqrt(1 + 1e-5)).epsilon(1e-12));

  Rng rng(3);
  auto r = random_tensor({4, 2, 5, 5}, rng, -3, 5, false);
  BatchNormState<double> s2(2);
  auto n = batchnorm2d(r, gamma, Tensor<double>::zeros({2}), s2, NormMode::train);
  for (int ch = 0; ch < 2; ++ch) {
    double m = 0, v = 0;
    for (int b = 0; b < 4; ++b)
      for (int i = 0; i < 25; ++i) m += n.data()[(b * 2 + ch) * 25 + i];
    m /= 100;
    for (int b = 0; b < 4; ++b)
      for (int i = 0; i < 25; ++i) v += std::pow(n.data()[(b * 2 + ch) * 25 + i] - m, 2);
    v /= 100;
    CHECK(std::abs(m) < 1e-12);
    CHECK(v == doctest::Approx(1.0).epsilon(1e-4));
  }
  BatchNormState<double> s3(1);
  CHECK_THROWS_AS(batchnorm2d(Tensor<double>::zeros({1, 1, 1, 1}), Tensor<double>::full({1}, 1.0),
                              Tensor<double>::zeros({1}), s3, NormMode::train),
                  ShapeError);
}

TEST_CASE("pooling, upsampling, concat") {
  auto p = maxpool2d(T({1, 1, 2, 2}, {1, 2, 3, 4}), 2, 2, 0);
  CHECK(p.shape() == Shape{1, 1, 1, 1});
  CHECK(p.item() == 4.0);
  auto u = upsample_nearest2x(T({1, 1, 2, 2}, {1, 2, 3, 4}));
  const std::vector<double> want{1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4};
  CHECK(std::vector<double>(u.data().begin(), u.data().end()) == want);
  auto c = concat<double>({Tensor<double>::zeros({1, 3, 8, 8}), Tensor<double>::zeros({1, 5, 8, 8})}, 1);
  CHECK(c.shape() == Shape{1, 8, 8, 8});
  CHECK_THROWS_AS(concat<double>({Tensor<double>::zeros({1, 3, 8, 8}), Tensor<double>::zeros({1, 5, 4, 8})}, 1),
                  ShapeError);
}

TEST_CASE("dense ops") {
  Rng rng(5);
  auto b = random_tensor({2, 3}, rng, -1, 1, false);
  auto y = matmul(T({2, 2}, {1, 0, 0, 1}), b);
  CHECK(std::vector<double>(y.data().begin(), y.data().end()) ==
        std::vector<double>(b.data().begin(), b.data().end()));
  auto ln = layernorm(Tensor<double>::full({2, 5}, 3.0), Tensor<double>::full({5}, 1.0), Tensor<double>::zeros({5}));
  for (double v : ln.data()) CHECK(v == 0.0);
  CHECK(mean(T({4}, {1, 2, 3, 4})).item() == 2.5);
  CHECK_THROWS_AS(matmul(Tensor<double>::zeros({2, 3}), Tensor<double>::zeros({2, 3})), ShapeError);
}

TEST_CASE("backward basics") {
  auto x = T({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  sum(x).backward();
  for (double g : x.grad()) CHECK(g == 1.0);
  auto z = T({2}, {1, 2}, true);
  sum(mul(z, z)).backward();
  CHECK(z.grad()[0] == 2.0);
  CHECK(z.grad()[1] == 4.0);
  auto w = T({2}, {1, 2}, true);
  CHECK_THROWS_AS(mul(w, w).backward(), ShapeError);
}

TEST_CASE("sgd step") {
  SUBCASE("plain") {
    auto p = T({1}, {1.0}, true);
    p.mutable_grad()[0] = 0.5;
    std::vector<Tensor<double>> ps{p};
    std::vector<std::vector<double>> vel;
    sgd_step(ps, vel, {0.1, 0.0, 0.0});
    CHECK(p.item() == doctest::Approx(0.95).epsilon(1e-15));
  }
  SUBCASE("zero gradient") {
    auto p = T({3}, {1.0, -2.0, 3.0}, true);
    p.mutable_grad();
    std::vector<Tensor<double>> ps{p};
    std::vector<std::vector<double>> vel;
    sgd_step(ps, vel, {0.1, 0.9, 0.0});
    CHECK(std::vector<double>(p.data().begin(), p.data().end()) == std::vector<double>{1.0, -2.0, 3.0});
  }
  SUBCASE("momentum") {
    auto p = T({1}, {0.0}, true);
    std::vector<Tensor<double>> ps{p};
    std::vector<std::vector<double>> vel;
    p.mutable_grad()[0] = 1.0;
    sgd_step(ps, vel, {0.1, 0.9, 0.0});
    CHECK(p.item() == doctest::Approx(-0.1).epsilon(1e-15));
    sgd_step(ps, vel, {0.1, 0.9, 0.0});
    CHECK(p.item() == doctest::Approx(-0.29).epsilon(1e-15));
  }
  SUBCASE("missing gradient") {
    auto p = T({1}, {0.0}, true);
    std::vector<Tensor<double>> ps{p};
    std::vector<std::vector<double>> vel;
    CHECK_THROWS(sgd_step(ps, vel, {0.1, 0.9, 0.0}));
  }
}

TEST_CASE("op gradients match finite differences") {
  Rng rng(11);
  for (int rep = 0; rep < 3; ++rep) {
    auto x = random_tensor({2, 3, 5, 5}, rng);
    auto w = random_tensor({4, 3, 3, 3}, rng);
    auto b = random_tensor({4}, rng);
    auto r = random_tensor({2, 4, 3, 3}, rng, -1, 1, false);
    auto res = gradcheck([&] { return weighted_sum(conv2d<double>(x, w, b, 2, 1), r); }, {{"x", x}, {"w", w}, {"b", b}}, rng);
    CHECK_MESSAGE(res.max_error < testing::kGradTol, res.worst);

    auto a = random_tensor({2, 3, 4}, rng), m = random_tensor({4, 5}, rng);
    auto r2 = random_tensor({2, 3, 5}, rng, -1, 1, false);
    res = gradcheck([&] { return weighted_sum(matmul(a, m), r2); }, {{"a", a}, {"m", m}}, rng);
    CHECK_MESSAGE(res.max_error < testing::kGradTol, res.worst);

    auto s = random_tensor({3, 6}, rng, -2, 2), g = random_tensor({6}, rng), be = random_tensor({6}, rng);
    auto r3 = random_tensor({3, 6}, rng, -1, 1, false);
    res = gradcheck([&] { return weighted_sum(layernorm(softmax(s), g, be), r3); }, {{"s", s}, {"g", g}, {"b", be}},
                    rng);
    CHECK_MESSAGE(res.max_error < testing::kGradTol, res.worst);

    auto q = random_tensor({1, 2, 6, 6}, rng);
    auto r4 = random_tensor({1, 8, 3, 3}, rng, -1, 1, false);
    res = gradcheck([&] { return weighted_sum(space_to_depth(silu(q)), r4); }, {{"q", q}}, rng);
    CHECK_MESSAGE(res.max_error < testing::kGradTol, res.worst);
  }
}

TEST_CASE("determinism of repeated evaluation") {
  Rng r1(9), r2(9);
  auto a = random_tensor({2, 3, 8, 8}, r1, -1, 1, false);
  auto b = random_tensor({2, 3, 8, 8}, r2, -1, 1, false);
  auto w = Tensor<double>::full({4, 3, 3, 3}, 0.1);
  auto y1 = conv2d<double>(a, w, std::nullopt, 1, 1), y2 = conv2d<double>(b, w, std::nullopt, 1, 1);
  CHECK(std::equal(y1.data().begin(), y1.data().end(), y2.data().begin()));
}
