#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "hydet/loss.hpp"
#include "hydet/postprocess.hpp"
#include "oracles.hpp"

using namespace hydet;

namespace {

// Head whose stride-`s` scale (the only one) is filled from the callbacks.
HeadOutputs<double> single_scale_head(int size, int s, int nc, int bins, double cls_logit) {
  const int g = size / s;
  HeadOutputs<double> h;
  h.strides = {s};
  h.cls.push_back(Tensor<double>::full({1, nc, g, g}, cls_logit));
  h.reg.push_back(Tensor<double>::full({1, 4 * bins, g, g}, -40.0));
  return h;
}

std::vector<Detection> random_dets(Rng& rng, int n, int nc) {
  std::vector<Detection> d;
  for (int i = 0; i < n; ++i) {
    const double x = rng.uniform(0, 80), y = rng.uniform(0, 80);
    // Coarse scores create ties.
    d.push_back({{x, y, x + rng.uniform(4, 40), y + rng.uniform(4, 40)},
                 static_cast<int>(rng.below(static_cast<std::uint64_t>(nc))),
                 std::round(rng.uniform() * 20) / 20, 0});
  }
  return d;
}

bool same(const std::vector<Detection>& a, const std::vector<Detection>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!(a[i].box == b[i].box) || a[i].class_id != b[i].class_id || a[i].score != b[i].score) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("dfl_decode") {
  std::vector<double> one_hot(16, 0.0);
  one_hot[7] = 1.0;
  CHECK(dfl_decode(one_hot) == 7.0);
  CHECK(dfl_decode(std::vector<double>(16, 1.0 / 16)) == doctest::Approx(7.5).epsilon(1e-15));
  std::vector<double> half(16, 0.0);
  half[3] = half[4] = 0.5;
  CHECK(dfl_decode(half) == 3.5);
  CHECK_THROWS(dfl_decode(std::vector<double>(16, 0.1)));
  std::vector<double> neg(16, 0.0);
  neg[0] = -0.5;
  neg[1] = 1.5;
  CHECK_THROWS(dfl_decode(neg));
}

TEST_CASE("decode_boxes arithmetic, thresholds and clipping") {
  auto h = single_scale_head(128, 8, 2, 8, -40.0);
  // Anchor (100,100) is grid cell (12,12); distances (2,2,2,2).
  const int loc = 12 * 16 + 12;
  auto reg = h.reg[0].mutable_data();
  for (int side = 0; side < 4; ++side) reg[(side * 8 + 2) * 256 + loc] = 40.0;
  h.cls[0].mutable_data()[1 * 256 + loc] = 3.0;
  auto d = decode_boxes(h, 0, 128, 128, 0.5);
  REQUIRE(d.size() == 1);
  CHECK(d[0].box.x1 == doctest::Approx(84));
  CHECK(d[0].box.y1 == doctest::Approx(84));
  CHECK(d[0].box.x2 == doctest::Approx(116));
  CHECK(d[0].box.y2 == doctest::Approx(116));
  CHECK(d[0].class_id == 1);
  CHECK(d[0].score == doctest::Approx(1 / (1 + std::exp(-3.0))));

  auto zero = single_scale_head(64, 8, 3, 4, 0.0);
  CHECK(decode_boxes(zero, 0, 64, 64, 0.6).empty());
  auto all = decode_boxes(zero, 0, 64, 64, 0.5);
  CHECK(all.size() == 64);
  for (const auto& det : all) {
    CHECK(det.box.x1 >= 0);
    CHECK(det.box.y1 >= 0);
    CHECK(det.box.x2 <= 64);
    CHECK(det.box.y2 <= 64);
    CHECK(det.box.width() >= 0);
    CHECK(det.box.height() >= 0);
  }
  std::size_t prev = all.size();
  for (double c : {0.1, 0.3, 0.5, 0.7}) {
    auto n = decode_boxes(zero, 0, 64, 64, c).size();
    CHECK(n <= prev);
    prev = n;
  }
}

TEST_CASE("encode-decode round trip stays within half a stride") {
  const std::vector<int> strides{8, 16, 32};
  const int size = 256, bins = 16;
  const auto anchors = make_anchors(size, size, strides);
  Rng rng(3);
  for (int rep = 0; rep < 50; ++rep) {
    const double w = rng.uniform(16, 120), h = rng.uniform(16, 120);
    const BBox gt{rng.uniform(w / 2, size - w / 2), rng.uniform(h / 2, size - h / 2), w, h, 0};
    const auto as = assign(anchors, {gt}, bins);
    HeadOutputs<double> head;
    head.strides = strides;
    for (int s : strides) {
      head.cls.push_back(Tensor<double>::full({1, 1, size / s, size / s}, -40.0));
      head.reg.push_back(Tensor<double>::full({1, 4 * bins, size / s, size / s}, -40.0));
    }
    for (std::size_t i = 0; i < as.positives.size(); ++i) {
      const auto a = as.positives[i];
      const int l = anchors.level[a];
      const auto loc = a - anchors.level_offset[l];
      const auto hw = anchors.level_hw[l][0] * anchors.level_hw[l][1];
      const auto dist = as.target_ltrb[i];
      // Skip clamped sides: the distance exceeds what the bins can express.
      const double raw[4] = {(anchors.x[a] - (gt.cx - w / 2)) / anchors.stride[a],
                             (anchors.y[a] - (gt.cy - h / 2)) / anchors.stride[a],
                             (gt.cx + w / 2 - anchors.x[a]) / anchors.stride[a],
                             (gt.cy + h / 2 - anchors.y[a]) / anchors.stride[a]};
      bool clamped = false;
      for (int k = 0; k < 4; ++k) clamped = clamped || std::abs(raw[k] - dist[k]) > 1e-9;
      if (clamped) continue;
      head.cls[l].mutable_data()[loc] = 40.0;
      auto reg = head.reg[l].mutable_data();
      for (int side = 0; side < 4; ++side) reg[(side * bins + static_cast<int>(std::lround(dist[side]))) * hw + loc] = 40.0;
      const auto dets = decode_boxes(head, 0, size, size, 0.5);
      REQUIRE(dets.size() == 1);
      const Box g = to_corners(gt);
      const double bound = 0.51 * anchors.stride[a];
      CHECK(std::abs(dets[0].box.x1 - g.x1) <= bound);
      CHECK(std::abs(dets[0].box.y1 - g.y1) <= bound);
      CHECK(std::abs(dets[0].box.x2 - g.x2) <= bound);
      CHECK(std::abs(dets[0].box.y2 - g.y2) <= bound);
      head.cls[l].mutable_data()[loc] = -40.0;
      for (int j = 0; j < 4 * bins; ++j) reg[j * hw + loc] = -40.0;
    }
  }
}

TEST_CASE("nms rules") {
  std::vector<Detection> one{{{0, 0, 10, 10}, 0, 0.9, 0}};
  CHECK(nms(one, 0.5).size() == 1);
  std::vector<Detection> dup{{{0, 0, 10, 10}, 0, 0.8, 0}, {{0, 0, 10, 10}, 0, 0.9, 0}};
  auto k = nms(dup, 0.5);
  REQUIRE(k.size() == 1);
  CHECK(k[0].score == 0.9);
  dup[0].class_id = 1;
  CHECK(nms(dup, 0.5, true).size() == 2);
  CHECK(nms(dup, 0.5, false).size() == 1);

  Rng rng(4);
  for (int rep = 0; rep < 200; ++rep) {
    const auto d = random_dets(rng, 1 + static_cast<int>(rng.below(50)), 3);
    const double thr = rng.uniform(0.2, 0.8);
    const bool aware = rng.below(2) == 0;
    const auto kept = nms(d, thr, aware);
    CHECK(same(kept, oracle::nms(d, thr, aware)));
    CHECK(same(nms(kept, thr, aware), kept));
    for (std::size_t i = 0; i < kept.size(); ++i) {
      for (std::size_t j = i + 1; j < kept.size(); ++j) {
        if (!aware || kept[i].class_id == kept[j].class_id) CHECK(iou(kept[i].box, kept[j].box) <= thr);
      }
    }
  }
}

TEST_CASE("postprocess caps detections and tags images") {
  HeadOutputs<double> h;
  h.strides = {8};
  h.cls.push_back(Tensor<double>::full({2, 1, 32, 32}, 2.0));
  h.reg.push_back(Tensor<double>::full({2, 16, 32, 32}, 0.0));
  PostprocessOptions o;
  o.iou_threshold = 0.99;
  o.max_det = 300;
  auto out = postprocess(h, 256, 256, o, 5);
  REQUIRE(out.size() == 2);
  CHECK(out[0].size() == 300);
  for (const auto& d : out[1]) CHECK(d.image_id == 6);
}
