#include "hydet/metrics.hpp"

#include <algorithm>
#include <map>
#include <numeric>
#include <tuple>

#include "hydet/error.hpp"

namespace hydet {

std::array<double, 10> coco_iou_thresholds() {
  std::array<double, 10> t{};
  for (int i = 0; i < 10; ++i) t[i] = 0.5 + 0.05 * i;
  return t;
}

namespace {

std::vector<std::size_t> rank_by_score(const std::vector<Detection>& dets) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
  return order;
}

}  // namespace

MatchResult match_detections(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts,
                             const std::vector<double>& iou_thresholds) {
  MatchResult r;
  r.order = rank_by_score(dets);
  std::map<std::pair<int, int>, std::vector<std::size_t>> groups;  // (image, class) -> gt ids
  for (std::size_t g = 0; g < gts.size(); ++g) groups[{gts[g].image_id, gts[g].class_id}].push_back(g);
  const std::size_t T = iou_thresholds.size();
  r.tp.assign(T, std::vector<char>(dets.size(), 0));
  r.matched_gt.assign(T, std::vector<int>(dets.size(), -1));
  r.gt_found.assign(T, std::vector<char>(gts.size(), 0));
  for (std::size_t rank = 0; rank < r.order.size(); ++rank) {
    const Detection& d = dets[r.order[rank]];
    auto it = groups.find({d.image_id, d.class_id});
    if (it == groups.end()) continue;
    std::vector<double> ious;
    ious.reserve(it->second.size());
    for (std::size_t g : it->second) ious.push_back(iou(d.box, gts[g].box));
    for (std::size_t t = 0; t < T; ++t) {
      int best = -1;
      double best_iou = -1.0;
      for (std::size_t k = 0; k < it->second.size(); ++k) {
        const std::size_t g = it->second[k];
        if (r.gt_found[t][g]) continue;
        if (ious[k] > best_iou) {
          best_iou = ious[k];
          best = static_cast<int>(g);
        }
      }
      if (best >= 0 && best_iou >= iou_thresholds[t]) {
        r.tp[t][rank] = 1;
        r.matched_gt[t][rank] = best;
        r.gt_found[t][static_cast<std::size_t>(best)] = 1;
      }
    }
  }
  return r;
}

double interpolated_ap(const std::vector<char>& ranked_tp, std::size_t num_gt) {
  if (num_gt == 0) return 0.0;
  const std::size_t n = ranked_tp.size();
  std::vector<double> precision(n), recall(n);
  std::size_t tp = 0;
  for (std::size_t k = 0; k < n; ++k) {
    tp += ranked_tp[k] ? 1 : 0;
    precision[k] = static_cast<double>(tp) / static_cast<double>(k + 1);
    recall[k] = static_cast<double>(tp) / static_cast<double>(num_gt);
  }
  // Envelope: best precision at any rank with recall >= r.
  for (std::size_t k = n; k-- > 1;) precision[k - 1] = std::max(precision[k - 1], precision[k]);
  double acc = 0.0;
  std::size_t k = 0;
  for (int i = 0; i <= 100; ++i) {
    const double r = i / 100.0;
    while (k < n && recall[k] < r) ++k;
    if (k < n) acc += precision[k];
  }
  return acc / 101.0;
}

double average_precision(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts,
                         double iou_threshold) {
  const auto m = match_detections(dets, gts, {iou_threshold});
  return interpolated_ap(m.tp[0], gts.size());
}

double mean_ap(const std::vector<std::optional<double>>& per_class_ap) {
  double acc = 0.0;
  int n = 0;
  for (const auto& ap : per_class_ap) {
    if (!ap) continue;
    acc += *ap;
    ++n;
  }
  if (n == 0) throw Error("mean_ap: no class has ground truth");
  return acc / n;
}

PrecisionRecall precision_recall(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts,
                                 double iou_threshold, std::optional<double> conf_threshold) {
  PrecisionRecall out;
  const double G = static_cast<double>(gts.size());
  const auto m = match_detections(dets, gts, {iou_threshold});
  const auto& tp = m.tp[0];
  auto at_cut = [&](std::size_t count, std::size_t tps, double conf) {
    PrecisionRecall pr;
    pr.conf_threshold = conf;
    pr.no_detections = count == 0;
    pr.precision = count ? static_cast<double>(tps) / static_cast<double>(count) : 0.0;
    pr.recall = G > 0 ? static_cast<double>(tps) / G : 0.0;
    return pr;
  };
  if (conf_threshold) {
    std::size_t count = 0, tps = 0;
    for (std::size_t k = 0; k < m.order.size(); ++k) {
      if (dets[m.order[k]].score < *conf_threshold) break;
      ++count;
      tps += tp[k] ? 1 : 0;
    }
    return at_cut(count, tps, *conf_threshold);
  }
  if (dets.empty()) return at_cut(0, 0, 0.0);
  double best_f1 = -1.0;
  std::size_t tps = 0;
  for (std::size_t k = 0; k < m.order.size(); ++k) {
    tps += tp[k] ? 1 : 0;
    const double s = dets[m.order[k]].score;
    const bool boundary = k + 1 == m.order.size() || dets[m.order[k + 1]].score != s;
    if (!boundary) continue;
    auto pr = at_cut(k + 1, tps, s);
    const double den = pr.precision + pr.recall;
    const double f1 = den > 0 ? 2 * pr.precision * pr.recall / den : 0.0;
    if (f1 > best_f1) {
      best_f1 = f1;
      out = pr;
    }
  }
  return out;
}

std::vector<std::vector<std::int64_t>> confusion_matrix(const std::vector<Detection>& dets,
                                                        const std::vector<GroundTruth>& gts, int num_classes,
                                                        double iou_threshold, double conf_threshold) {
  const int bg = num_classes;
  std::vector<std::vector<std::int64_t>> m(num_classes + 1, std::vector<std::int64_t>(num_classes + 1, 0));
  std::map<int, std::pair<std::vector<std::size_t>, std::vector<std::size_t>>> per_image;
  for (std::size_t i = 0; i < dets.size(); ++i) {
    if (dets[i].score >= conf_threshold) per_image[dets[i].image_id].second.push_back(i);
  }
  for (std::size_t g = 0; g < gts.size(); ++g) per_image[gts[g].image_id].first.push_back(g);
  auto check = [&](int c) {
    if (c < 0 || c >= num_classes) throw Error("confusion_matrix: class id out of range");
    return c;
  };
  for (const auto& [image, lists] : per_image) {
    const auto& [gi, di] = lists;
    std::vector<std::tuple<double, std::size_t, std::size_t>> pairs;  // (iou, gt pos, det pos)
    for (std::size_t a = 0; a < gi.size(); ++a) {
      for (std::size_t b = 0; b < di.size(); ++b) {
        const double v = iou(gts[gi[a]].box, dets[di[b]].box);
        if (v >= iou_threshold && v > 0) pairs.emplace_back(v, a, b);
      }
    }
    std::stable_sort(pairs.begin(), pairs.end(), [&](const auto& x, const auto& y) {
      if (std::get<0>(x) != std::get<0>(y)) return std::get<0>(x) > std::get<0>(y);
      const double sx = dets[di[std::get<2>(x)]].score, sy = dets[di[std::get<2>(y)]].score;
      if (sx != sy) return sx > sy;
      return std::tie(std::get<1>(x), std::get<2>(x)) < std::tie(std::get<1>(y), std::get<2>(y));
    });
    std::vector<char> gt_used(gi.size(), 0), det_used(di.size(), 0);
    for (const auto& [v, a, b] : pairs) {
      if (gt_used[a] || det_used[b]) continue;
      gt_used[a] = det_used[b] = 1;
      ++m[check(gts[gi[a]].class_id)][check(dets[di[b]].class_id)];
    }
    for (std::size_t a = 0; a < gi.size(); ++a) {
      if (!gt_used[a]) ++m[check(gts[gi[a]].class_id)][bg];
    }
    for (std::size_t b = 0; b < di.size(); ++b) {
      if (!det_used[b]) ++m[bg][check(dets[di[b]].class_id)];
    }
  }
  return m;
}

EvalReport evaluate_detections(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts,
                               int num_classes, const EvalOptions& opts) {
  EvalReport rep;
  rep.num_classes = num_classes;
  rep.ap.assign(num_classes, {});
  rep.gt_count.assign(num_classes, 0);
  std::vector<std::vector<Detection>> dets_by_class(num_classes);
  std::vector<std::vector<GroundTruth>> gts_by_class(num_classes);
  for (const auto& d : dets) {
    if (d.class_id < 0 || d.class_id >= num_classes) throw Error("evaluate: detection class out of range");
    dets_by_class[d.class_id].push_back(d);
  }
  for (const auto& g : gts) {
    if (g.class_id < 0 || g.class_id >= num_classes) throw Error("evaluate: ground-truth class out of range");
    gts_by_class[g.class_id].push_back(g);
    ++rep.gt_count[g.class_id];
  }
  const auto th = coco_iou_thresholds();
  const std::vector<double> thresholds(th.begin(), th.end());
  std::vector<std::optional<double>> ap50(num_classes), ap5095(num_classes);
  for (int c = 0; c < num_classes; ++c) {
    if (gts_by_class[c].empty()) continue;
    const auto m = match_detections(dets_by_class[c], gts_by_class[c], thresholds);
    double acc = 0.0;
    for (std::size_t t = 0; t < thresholds.size(); ++t) {
      rep.ap[c][t] = interpolated_ap(m.tp[t], gts_by_class[c].size());
      acc += rep.ap[c][t];
    }
    ap50[c] = rep.ap[c][0];
    ap5095[c] = acc / static_cast<double>(thresholds.size());
  }
  if (!gts.empty()) {
    rep.map50 = mean_ap(ap50);
    rep.map50_95 = mean_ap(ap5095);
  }
  rep.pr = precision_recall(dets, gts, 0.5, opts.pr_conf);
  rep.confusion = confusion_matrix(dets, gts, num_classes, opts.cm_iou, opts.cm_conf);
  return rep;
}

}  // namespace hydet
