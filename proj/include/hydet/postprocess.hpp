#pragma once

#include <span>
#include <vector>

#include "hydet/bbox.hpp"
#include "hydet/blocks.hpp"

namespace hydet {

struct PostprocessOptions {
  double conf_threshold = 0.25;
  double iou_threshold = 0.45;
  bool class_aware = true;
  int max_det = 300;
};

/// Expected bin index sum_j j*p_j. Rejects negative entries or a total
/// farther than 1e-5 from one.
double dfl_decode(std::span<const double> probs);

/// Per-anchor boxes in corner form, clipped to [0,width]x[0,height], for one
/// image of the batch. Score is the best class sigmoid; anchors scoring below
/// `conf_threshold` are skipped. Output follows anchor order.
template <typename T>
std::vector<Detection> decode_boxes(const HeadOutputs<T>& head, int image, int width, int height,
                                    double conf_threshold);

/// Greedy suppression: order by score descending (ties: lower class, then
/// input position); a detection survives iff its IoU with every kept
/// detection (same class when class_aware) is <= iou_threshold.
std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_threshold, bool class_aware = true);

/// decode_boxes -> nms -> truncate to max_det, for every image of the batch.
/// Detections carry image_id = first_image_id + batch index.
template <typename T>
std::vector<std::vector<Detection>> postprocess(const HeadOutputs<T>& head, int width, int height,
                                                const PostprocessOptions& opts, int first_image_id = 0);

}  // namespace hydet
