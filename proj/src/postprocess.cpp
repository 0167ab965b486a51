#include "hydet/postprocess.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "hydet/error.hpp"

namespace hydet {

double dfl_decode(std::span<const double> probs) {
  if (probs.empty()) throw Error("dfl_decode: empty distribution");
  double total = 0.0, e = 0.0;
  for (std::size_t j = 0; j < probs.size(); ++j) {
    if (!(probs[j] >= 0.0)) throw Error("dfl_decode: negative probability");
    total += probs[j];
    e += static_cast<double>(j) * probs[j];
  }
  if (std::abs(total - 1.0) > 1e-5) throw Error("dfl_decode: distribution does not sum to one");
  return e;
}

template <typename T>
std::vector<Detection> decode_boxes(const HeadOutputs<T>& head, int image, int width, int height,
                                    double conf_threshold) {
  std::vector<Detection> out;
  if (head.cls.size() != head.reg.size() || head.cls.size() != head.strides.size()) {
    throw ShapeError("decode_boxes: inconsistent head outputs");
  }
  // Logit threshold equivalent to the probability threshold.
  const double logit_cut = conf_threshold <= 0.0   ? -INFINITY
                           : conf_threshold >= 1.0 ? INFINITY
                                                   : std::log(conf_threshold / (1.0 - conf_threshold));
  std::vector<double> probs;
  for (std::size_t l = 0; l < head.cls.size(); ++l) {
    const auto& cls = head.cls[l];
    const auto& reg = head.reg[l];
    const std::int64_t nc = cls.dim(1), H = cls.dim(2), W = cls.dim(3), HW = H * W;
    const int bins = static_cast<int>(reg.dim(1) / 4);
    if (image < 0 || image >= cls.dim(0)) throw ShapeError("decode_boxes: image index out of range");
    const T* cbase = cls.data().data() + image * nc * HW;
    const T* rbase = reg.data().data() + image * 4 * bins * HW;
    const double s = head.strides[l];
    probs.resize(static_cast<std::size_t>(bins));
    for (std::int64_t loc = 0; loc < HW; ++loc) {
      int best = 0;
      double best_logit = cbase[loc];
      for (std::int64_t c = 1; c < nc; ++c) {
        const double z = cbase[c * HW + loc];
        if (z > best_logit) {
          best_logit = z;
          best = static_cast<int>(c);
        }
      }
      if (best_logit < logit_cut) continue;
      const double score = 1.0 / (1.0 + std::exp(-best_logit));
      if (score < conf_threshold) continue;
      double dist[4];
      for (int side = 0; side < 4; ++side) {
        double m = -INFINITY;
        for (int j = 0; j < bins; ++j) m = std::max<double>(m, rbase[(side * bins + j) * HW + loc]);
        double total = 0.0;
        for (int j = 0; j < bins; ++j) {
          probs[j] = std::exp(rbase[(side * bins + j) * HW + loc] - m);
          total += probs[j];
        }
        for (int j = 0; j < bins; ++j) probs[j] /= total;
        dist[side] = dfl_decode(probs);
      }
      const double ax = (static_cast<double>(loc % W) + 0.5) * s;
      const double ay = (static_cast<double>(loc / W) + 0.5) * s;
      Detection d;
      d.box = {std::clamp(ax - dist[0] * s, 0.0, static_cast<double>(width)),
               std::clamp(ay - dist[1] * s, 0.0, static_cast<double>(height)),
               std::clamp(ax + dist[2] * s, 0.0, static_cast<double>(width)),
               std::clamp(ay + dist[3] * s, 0.0, static_cast<double>(height))};
      d.class_id = best;
      d.score = score;
      d.image_id = image;
      out.push_back(d);
    }
  }
  return out;
}

std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_threshold, bool class_aware) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (dets[a].score != dets[b].score) return dets[a].score > dets[b].score;
    return dets[a].class_id < dets[b].class_id;
  });
  std::vector<Detection> kept;
  for (std::size_t i : order) {
    const Detection& d = dets[i];
    bool keep = true;
    for (const Detection& k : kept) {
      if (class_aware && k.class_id != d.class_id) continue;
      if (iou(k.box, d.box) > iou_threshold) {
        keep = false;
        break;
      }
    }
    if (keep) kept.push_back(d);
  }
  return kept;
}

template <typename T>
std::vector<std::vector<Detection>> postprocess(const HeadOutputs<T>& head, int width, int height,
                                                const PostprocessOptions& opts, int first_image_id) {
  if (head.cls.empty()) throw ShapeError("postprocess: empty head outputs");
  const auto B = head.cls[0].dim(0);
  std::vector<std::vector<Detection>> out(static_cast<std::size_t>(B));
  for (std::int64_t b = 0; b < B; ++b) {
    auto kept = nms(decode_boxes(head, static_cast<int>(b), width, height, opts.conf_threshold),
                    opts.iou_threshold, opts.class_aware);
    if (opts.max_det >= 0 && kept.size() > static_cast<std::size_t>(opts.max_det)) kept.resize(opts.max_det);
    for (auto& d : kept) d.image_id = first_image_id + static_cast<int>(b);
    out[b] = std::move(kept);
  }
  return out;
}

template std::vector<Detection> decode_boxes(const HeadOutputs<float>&, int, int, int, double);
template std::vector<Detection> decode_boxes(const HeadOutputs<double>&, int, int, int, double);
template std::vector<std::vector<Detection>> postprocess(const HeadOutputs<float>&, int, int,
                                                         const PostprocessOptions&, int);
template std::vector<std::vector<Detection>> postprocess(const HeadOutputs<double>&, int, int,
                                                         const PostprocessOptions&, int);

}  // namespace hydet
