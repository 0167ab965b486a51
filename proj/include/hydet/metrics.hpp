#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "hydet/bbox.hpp"

namespace hydet {

/// 0.50, 0.55, ..., 0.95.
std::array<double, 10> coco_iou_thresholds();

/// Greedy matching in descending score order (ties: input order). A
/// detection is a true positive iff the unmatched ground truth of the same
/// image and class with the highest IoU (ties: lowest index) reaches the
/// threshold.
struct MatchResult {
  std::vector<std::size_t> order;           // detection indices, ranked
  std::vector<std::vector<char>> tp;        // [threshold][rank]
  std::vector<std::vector<int>> matched_gt;  // [threshold][rank]; -1 if none
  std::vector<std::vector<char>> gt_found;  // [threshold][gt]
};

MatchResult match_detections(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts,
                             const std::vector<double>& iou_thresholds);

/// 101-point interpolated area under the precision envelope, given ranked
/// true-positive flags and the number of ground truths.
double interpolated_ap(const std::vector<char>& ranked_tp, std::size_t num_gt);

/// AP over the supplied detections and ground truths (matching is still
/// class-aware). Returns 0 when there are no ground truths.
double average_precision(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts,
                         double iou_threshold);

/// Mean over the classes that have a value; throws when none does.
double mean_ap(const std::vector<std::optional<double>>& per_class_ap);

struct PrecisionRecall {
  double precision = 0;
  double recall = 0;
  double conf_threshold = 0;
  bool no_detections = false;  // precision reported as 0 by convention
};

/// Micro-averaged precision and recall of detections scoring >= conf. With
/// no cut, the confidence maximising F1 is chosen (ties: the higher cut).
PrecisionRecall precision_recall(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts,
                                 double iou_threshold, std::optional<double> conf_threshold = std::nullopt);

/// (num_classes+1)^2 counts, rows = ground-truth class, columns = predicted
/// class, index num_classes = background. Matching ignores class and pairs
/// boxes greedily by descending IoU.
std::vector<std::vector<std::int64_t>> confusion_matrix(const std::vector<Detection>& dets,
                                                        const std::vector<GroundTruth>& gts, int num_classes,
                                                        double iou_threshold = 0.45, double conf_threshold = 0.25);

struct LatencyStats {
  double mean_ms = 0, median_ms = 0, p95_ms = 0, min_ms = 0, max_ms = 0;
  int runs = 0;
  std::string hardware;
};

struct EvalReport {
  int num_classes = 0;
  int image_size = 0;
  std::vector<std::array<double, 10>> ap;  // [class][threshold]
  std::vector<std::int64_t> gt_count;      // per class
  double map50 = 0, map50_95 = 0;
  PrecisionRecall pr;
  std::vector<std::vector<std::int64_t>> confusion;
  std::int64_t params = 0, flops = 0;
  LatencyStats latency;

  /// Fixed column order: Model,Size,Param(M),FLOPs(B),Precision,Recall,mAP50,mAP50/95,Inference time(ms).
  static std::string csv_header();
  std::string csv_row(const std::string& model_name = "hydet") const;
  std::string text_table(const std::vector<std::string>& class_names = {}) const;
  std::string confusion_csv(const std::vector<std::string>& class_names = {}) const;
};

struct EvalOptions {
  std::optional<double> pr_conf;  // unset: max-F1 operating point
  double cm_conf = 0.25;
  double cm_iou = 0.45;
};

/// Accuracy fields of the report (everything except params, flops,
/// latency and image size).
EvalReport evaluate_detections(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts,
                               int num_classes, const EvalOptions& opts = {});

}  // namespace hydet
