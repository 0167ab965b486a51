#include <doctest.h>

#include <cmath>

#include "grad_suites.hpp"
#include "hydet/loss.hpp"
#include "oracles.hpp"

using namespace hydet;

namespace {

Tensor<double> vec(std::vector<double> v, bool rg = false) {
  const auto n = static_cast<std::int64_t>(v.size());
  return Tensor<double>::from_data({n}, std::move(v), rg);
}

}  // namespace

TEST_CASE("loss gradients (reduced instance count)") {
  Rng rng(77);
  for (const auto& suite : testing::loss_suites()) {
    const auto r = suite(3, rng);
    CHECK_MESSAGE(r.max_error < testing::kGradTol, r.name << ": " << r.worst);
  }
}

TEST_CASE("bce values") {
  CHECK(bce(vec({0.5}), vec({1.0})).item() == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(bce(vec({0.9, 0.2}), vec({1.0, 0.0})).item() ==
        doctest::Approx((-std::log(0.9) - std::log(0.8)) / 2).epsilon(1e-15));
  CHECK(bce(vec({1.0, 0.0}), vec({1.0, 0.0})).item() < 1e-6);
  CHECK_THROWS_AS(bce(vec({0.5, 0.5}), vec({1.0})), ShapeError);

  Rng rng(1);
  for (int rep = 0; rep < 20; ++rep) {
    std::vector<double> p(17), y(17);
    double ref = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      p[i] = rng.uniform(0.001, 0.999);
      y[i] = static_cast<double>(rng.below(2));
      ref += y[i] * std::log(p[i]) + (1 - y[i]) * std::log(1 - p[i]);
    }
    CHECK(std::abs(bce(vec(p), vec(y)).item() + ref / 17) < 1e-10);
  }
}

TEST_CASE("dfl values") {
  FocalParams ce;
  Rng rng(2);
  for (int rep = 0; rep < 20; ++rep) {
    std::vector<double> p(9);
    double ref = 0;
    for (auto& v : p) {
      v = rng.uniform(0.01, 1.0);
      ref -= std::log(v);
    }
    CHECK(std::abs(dfl(vec(p), ce).item() - ref / 9) < 1e-12);
  }
  FocalParams f2;
  f2.gamma = 2;
  CHECK(dfl(vec({1.0}), f2).item() == 0.0);
  CHECK(std::abs(dfl(vec({0.9}), f2).item() - (-(1 - 0.81) * std::log(0.9))) < 1e-12);

  FocalParams bad;
  bad.gamma = -1;
  CHECK_THROWS(bad.validate());
  bad.gamma = 0;
  bad.alpha = {1.0, 0.0};
  CHECK_THROWS(bad.validate());

  // Two-bin encoding: t = 2.25 puts 0.75 on bin 2 and 0.25 on bin 3.
  auto probs = Tensor<double>::from_data({1, 5}, {0.1, 0.1, 0.5, 0.2, 0.1});
  CHECK(dfl_two_bin(probs, {2.25}, ce).item() ==
        doctest::Approx(-(0.75 * std::log(0.5) + 0.25 * std::log(0.2))).epsilon(1e-14));
  CHECK(dfl_two_bin(Tensor<double>::from_data({1, 5}, {0, 0, 1, 0, 0}), {2.0}, ce).item() == 0.0);
  CHECK_THROWS(dfl_two_bin(probs, {4.5}, ce));
  CHECK_THROWS(dfl_two_bin(probs, {-0.1}, ce));
}

TEST_CASE("ciou values and invariants") {
  const auto r = ciou_loss(BBox{0, 0, 2, 2}, BBox{1, 1, 2, 2});
  CHECK(std::abs(r.loss - (6.0 / 7 + 1.0 / 9)) < 1e-12);
  CHECK(std::abs(r.terms.iou - 1.0 / 7) < 1e-12);
  CHECK(std::abs(r.terms.rho2 - 2) < 1e-12);
  CHECK(std::abs(r.terms.c2 - 18) < 1e-12);
  CHECK(r.terms.v == 0.0);
  CHECK(ciou_loss(BBox{5, 7, 3, 4}, BBox{5, 7, 3, 4}).loss == doctest::Approx(0.0).epsilon(1e-12).scale(1));
  const auto disjoint = ciou_loss(BBox{0, 0, 2, 1}, BBox{10, 3, 4, 2});
  CHECK(disjoint.loss == doctest::Approx(1 + disjoint.terms.rho2 / disjoint.terms.c2).epsilon(1e-12));
  CHECK(disjoint.loss > 1);
  CHECK_THROWS(ciou_loss(BBox{0, 0, 0, 1}, BBox{0, 0, 1, 1}));

  Rng rng(3);
  for (int rep = 0; rep < 200; ++rep) {
    const Box a = testing::random_box(rng), b = testing::random_box(rng);
    const auto ab = ciou_loss(to_center(a), to_center(b)), ba = ciou_loss(to_center(b), to_center(a));
    CHECK(std::abs(ab.loss - ba.loss) < 1e-12);
    CHECK(std::abs(ab.loss - oracle::ciou(a, b)) < 1e-12);
    CHECK(ab.terms.c2 >= ab.terms.rho2);
    CHECK(ab.terms.v >= 0);
    CHECK(ab.loss >= 0);
    CHECK(ab.loss <= 3);
  }
}

TEST_CASE("assigner rules") {
  const auto anchors = make_anchors(64, 64, {8, 16, 32});
  SUBCASE("large centered box") {
    const auto a = assign(anchors, {BBox{32, 32, 60, 60, 0}}, 16);
    // stride-8 grid point (28,28) is 0.5 stride from the center
    const std::int64_t idx = 3 * 8 + 3;
    CHECK(a.gt_index[idx] == 0);
  }
  SUBCASE("nested boxes go to the inner one") {
    const auto a = assign(anchors, {BBox{32, 32, 60, 60, 0}, BBox{30, 30, 20, 20, 1}}, 16);
    const std::int64_t idx = 3 * 8 + 3;
    CHECK(a.gt_index[idx] == 1);
    const auto tie = assign(anchors, {BBox{30, 30, 20, 20, 0}, BBox{30, 30, 20, 20, 1}}, 16);
    for (auto g : tie.gt_index) CHECK(g != 1);
  }
  SUBCASE("no ground truth") {
    const auto a = assign(anchors, {}, 16);
    CHECK(a.num_positive() == 0);
    CHECK(a.gt_index.size() == anchors.size());
    for (auto g : a.gt_index) CHECK(g == -1);
  }
  SUBCASE("targets are clamped and consistent") {
    Rng rng(4);
    for (int rep = 0; rep < 50; ++rep) {
      std::vector<BBox> gt;
      for (int g = 0; g < 3; ++g) {
        gt.push_back({rng.uniform(0, 64), rng.uniform(0, 64), rng.uniform(2, 64), rng.uniform(2, 64), g});
      }
      const auto a = assign(anchors, gt, 4);
      CHECK(a.gt_index.size() == anchors.size());
      std::size_t pos = 0;
      for (std::size_t i = 0; i < anchors.size(); ++i) {
        if (a.gt_index[i] < 0) continue;
        REQUIRE(pos < a.positives.size());
        CHECK(a.positives[pos] == static_cast<std::int64_t>(i));
        const BBox& g = gt[static_cast<std::size_t>(a.gt_index[i])];
        CHECK(anchors.x[i] > g.cx - g.w / 2);
        CHECK(anchors.x[i] < g.cx + g.w / 2);
        CHECK(std::abs(anchors.x[i] - g.cx) <= 2.5 * anchors.stride[i]);
        CHECK(a.target_class[pos] == g.class_id);
        for (double t : a.target_ltrb[pos]) {
          CHECK(t >= 0);
          CHECK(t <= 4 - 1 - 0.01 + 1e-12);
        }
        ++pos;
      }
      CHECK(pos == a.positives.size());
      CHECK(a.gt_index == assign(anchors, gt, 4).gt_index);
    }
  }
}

TEST_CASE("total loss components") {
  const std::vector<int> strides{8, 16, 32};
  const auto anchors = make_anchors(64, 64, strides);
  Rng rng(5);
  HeadOutputs<double> head;
  head.strides = strides;
  for (int s : strides) {
    head.cls.push_back(testing::random_tensor({1, 2, 64 / s, 64 / s}, rng, -2, 2));
    head.reg.push_back(testing::random_tensor({1, 32, 64 / s, 64 / s}, rng, -2, 2));
  }
  const std::vector<Assignment> none{assign(anchors, {}, 8)};
  const auto empty = total_loss(head, none, anchors);
  CHECK(empty.parts.dfl == 0.0);
  CHECK(empty.parts.ciou == 0.0);
  CHECK(empty.parts.total == empty.parts.cls);

  const std::vector<Assignment> one{assign(anchors, {BBox{30, 34, 28, 20, 1}}, 8)};
  LossWeights w;
  const auto base = total_loss(head, one, anchors, w);
  CHECK(base.parts.num_positive > 0);
  CHECK(std::abs(base.parts.cls + base.parts.dfl + base.parts.ciou - base.parts.total) < 1e-9);
  w.ciou *= 2;
  const auto doubled = total_loss(head, one, anchors, w);
  CHECK(doubled.parts.ciou == doctest::Approx(2 * base.parts.ciou).epsilon(1e-14));
  CHECK(doubled.parts.cls == base.parts.cls);
  CHECK(doubled.parts.dfl == base.parts.dfl);
}

TEST_CASE("perfect predictions drive the loss to zero") {
  // Single stride-8 scale; the box edges sit on half-stride offsets so every
  // positive has integer edge distances that one-hot bins represent exactly.
  const std::vector<int> strides{8};
  const auto anchors = make_anchors(64, 64, strides);
  const int bins = 8;
  const Box box{4, 4, 28, 36};
  const auto as = assign(anchors, {to_center(box, 0)}, bins);
  REQUIRE(as.num_positive() > 0);
  std::vector<double> cls(2 * 64, -40.0), reg(static_cast<std::size_t>(4 * bins * 64), -40.0);
  for (std::size_t i = 0; i < as.positives.size(); ++i) {
    const auto loc = as.positives[i];
    cls[static_cast<std::size_t>(loc)] = 40.0;
    for (int side = 0; side < 4; ++side) {
      const double t = as.target_ltrb[i][side];
      REQUIRE(t == std::round(t));
      reg[static_cast<std::size_t>((side * bins + static_cast<int>(t)) * 64 + loc)] = 40.0;
    }
  }
  HeadOutputs<double> head;
  head.strides = strides;
  head.cls.push_back(Tensor<double>::from_data({1, 2, 8, 8}, cls));
  head.reg.push_back(Tensor<double>::from_data({1, 4 * bins, 8, 8}, reg));
  const auto r = total_loss(head, {as}, anchors);
  CHECK(r.parts.total <= 1e-3);
}
