#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "hydet/bbox.hpp"
#include "hydet/blocks.hpp"
#include "hydet/tensor.hpp"

namespace hydet {

inline constexpr double kProbEps = 1e-7;

/// Per-class weights alpha (empty: all ones; one entry: shared) and the
/// focusing exponent gamma. The modulating factor is (1 - p^gamma) for
/// gamma > 0 and 1 at gamma = 0.
struct FocalParams {
  std::vector<double> alpha;
  double gamma = 0.0;

  void validate() const;
  double alpha_for(int class_id) const;
};

struct CIoUTerms {
  double iou = 0, rho2 = 0, c2 = 0, v = 0, alpha_tradeoff = 0;
};

struct CIoUResult {
  double loss = 0;
  CIoUTerms terms;
};

/// 1 - IoU + rho^2/c^2 + alpha*v. Throws on non-positive extents.
CIoUResult ciou_loss(const BBox& pred, const BBox& truth);

/// Mean binary cross-entropy of probabilities against targets of the same
/// shape, with probabilities clamped to [eps, 1-eps].
template <typename T>
Tensor<T> bce(const Tensor<T>& prob, const Tensor<T>& target);

/// Sum of logit-space binary cross-entropy divided by `normalizer`.
/// Numerically stable form; no clamp is needed.
template <typename T>
Tensor<T> bce_with_logits_sum(const Tensor<T>& logits, const std::vector<T>& target, double normalizer);

/// Direct focal form over probabilities p [N] of the observed outcome:
/// -(1/N) sum alpha_{c_i} f(p_i) log p_i. `class_ids` selects alpha entries
/// and may be empty when alpha has at most one entry.
template <typename T>
Tensor<T> dfl(const Tensor<T>& prob, const FocalParams& params, const std::vector<int>& class_ids = {});

/// Box-regression form on probabilities [N,K]: the continuous target t is
/// spread over bins floor(t) and floor(t)+1 with weights folded into alpha.
/// Mean over N.
template <typename T>
Tensor<T> dfl_two_bin(const Tensor<T>& prob, const std::vector<double>& targets, const FocalParams& params);

/// Same loss evaluated from logits [P, 4K] (per-side softmax); `targets`
/// holds 4P distances. Mean over the 4P sides.
template <typename T>
Tensor<T> dfl_box(const Tensor<T>& logits, const std::vector<double>& targets, int bins, double gamma);

/// Softmax expectation per side: logits [P, 4K] -> distances [P, 4].
template <typename T>
Tensor<T> dfl_expectation(const Tensor<T>& logits, int bins);

/// Distances [P,4] (stride units) around anchor points -> corner boxes [P,4].
template <typename T>
Tensor<T> ltrb_to_boxes(const Tensor<T>& ltrb, const std::vector<double>& ax, const std::vector<double>& ay,
                        const std::vector<double>& stride);

/// Per-box CIoU [P] of corner boxes [P,4] against fixed targets. The
/// trade-off alpha is held constant during differentiation unless
/// `alpha_grad` is set.
template <typename T>
Tensor<T> ciou_loss(const Tensor<T>& pred_boxes, const std::vector<Box>& truth, bool alpha_grad = false);

// ---------------------------------------------------------------------------

/// Anchor points of every scale, concatenated scale by scale in row-major
/// order; point i of scale s lies at ((col+0.5)*s, (row+0.5)*s).
struct AnchorSet {
  std::vector<double> x, y, stride;
  std::vector<int> level;
  std::vector<std::int64_t> level_offset;  // first anchor of each scale
  std::vector<std::array<int, 2>> level_hw;

  std::size_t size() const { return x.size(); }
};

AnchorSet make_anchors(int height, int width, const std::vector<int>& strides);

/// Static center-prior assignment for one image.
struct Assignment {
  std::vector<int> gt_index;                       // per anchor; -1 = background
  std::vector<std::int64_t> positives;             // anchor ids, ascending
  std::vector<int> target_class;                   // per positive
  std::vector<std::array<double, 4>> target_ltrb;  // per positive, stride units
  std::vector<Box> target_box;                     // per positive, pixels

  std::size_t num_positive() const { return positives.size(); }
};

/// Ground truths in pixels. An anchor is positive for a box iff it lies
/// strictly inside it and within `radius` strides of its center on both
/// axes; overlapping claims go to the smallest box (ties: lower index).
Assignment assign(const AnchorSet& anchors, const std::vector<BBox>& gt, int reg_bins, double radius = 2.5);

struct LossWeights {
  double cls = 0.5, dfl = 1.5, ciou = 7.5;
  bool ciou_alpha_grad = false;  // differentiate through the CIoU trade-off
};

/// Weighted contributions; total = cls + dfl + ciou.
struct LossComponents {
  double cls = 0, dfl = 0, ciou = 0, total = 0;
  std::int64_t num_positive = 0;
};

template <typename T>
struct LossResult {
  Tensor<T> total;
  LossComponents parts;
};

/// w_cls * BCE(all anchors and classes, summed, / max(positives,1))
///  + w_dfl * DFL(positive sides, mean)
///  + w_ciou * CIoU(positives, weighted by detached target-class score).
template <typename T>
LossResult<T> total_loss(const HeadOutputs<T>& head, const std::vector<Assignment>& assignments,
                         const AnchorSet& anchors, const LossWeights& weights = {},
                         const FocalParams& focal = {});

}  // namespace hydet
