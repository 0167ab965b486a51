#include "hydet/loss.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "hydet/error.hpp"
#include "hydet/ops.hpp"

namespace hydet {

namespace {

using i64 = std::int64_t;

template <typename T>
std::vector<T>* grad_of(const Tensor<T>& t) {
  return t.requires_grad() ? &t.node()->grad_buffer() : nullptr;
}

// Forward-mode dual number carrying d/d(x1,y1,x2,y2) of the predicted box.
struct Dual {
  double v = 0;
  std::array<double, 4> d{};

  Dual() = default;
  Dual(double value) : v(value) {}  // NOLINT(google-explicit-constructor)
};

Dual operator+(const Dual& a, const Dual& b) {
  Dual r(a.v + b.v);
  for (int i = 0; i < 4; ++i) r.d[i] = a.d[i] + b.d[i];
  return r;
}
Dual operator-(const Dual& a, const Dual& b) {
  Dual r(a.v - b.v);
  for (int i = 0; i < 4; ++i) r.d[i] = a.d[i] - b.d[i];
  return r;
}
Dual operator*(const Dual& a, const Dual& b) {
  Dual r(a.v * b.v);
  for (int i = 0; i < 4; ++i) r.d[i] = a.d[i] * b.v + a.v * b.d[i];
  return r;
}
Dual operator/(const Dual& a, const Dual& b) {
  Dual r(a.v / b.v);
  for (int i = 0; i < 4; ++i) r.d[i] = (a.d[i] * b.v - a.v * b.d[i]) / (b.v * b.v);
  return r;
}

double value_of(double x) { return x; }
double value_of(const Dual& x) { return x.v; }

double atan2_(double y, double x) { return std::atan2(y, x); }
Dual atan2_(const Dual& y, const Dual& x) {
  Dual r(std::atan2(y.v, x.v));
  const double den = x.v * x.v + y.v * y.v;
  if (den > 0) {
    for (int i = 0; i < 4; ++i) r.d[i] = (x.v * y.d[i] - y.v * x.d[i]) / den;
  }
  return r;
}

template <typename S>
S smax(const S& a, const S& b) {
  return value_of(a) >= value_of(b) ? a : b;
}
template <typename S>
S smin(const S& a, const S& b) {
  return value_of(a) <= value_of(b) ? a : b;
}

// CIoU of a predicted corner box against a fixed target. The trade-off
// alpha is computed from values only and so carries no derivative.
template <typename S>
S ciou_core(const S& px1, const S& py1, const S& px2, const S& py2, const Box& t, CIoUTerms* terms,
            bool alpha_grad = false) {
  const S pw = px2 - px1, ph = py2 - py1;
  const double tw = t.width(), th = t.height();
  const S iw = smax(S(0.0), smin(px2, S(t.x2)) - smax(px1, S(t.x1)));
  const S ih = smax(S(0.0), smin(py2, S(t.y2)) - smax(py1, S(t.y1)));
  const S inter = iw * ih;
  const S uni = pw * ph + S(tw * th) - inter;
  const S iou = inter / uni;
  const S cw = smax(px2, S(t.x2)) - smin(px1, S(t.x1));
  const S ch = smax(py2, S(t.y2)) - smin(py1, S(t.y1));
  const S c2 = cw * cw + ch * ch;
  const S dx = (px1 + px2 - S(t.x1 + t.x2)) * S(0.5);
  const S dy = (py1 + py2 - S(t.y1 + t.y2)) * S(0.5);
  const S rho2 = dx * dx + dy * dy;
  const S dang = S(std::atan2(tw, th)) - atan2_(pw, ph);
  const S v = S(4.0 / (std::numbers::pi * std::numbers::pi)) * dang * dang;
  const double den = (1.0 - value_of(iou)) + value_of(v);
  const double alpha = den > 0 ? value_of(v) / den : 0.0;
  if (terms) {
    *terms = {value_of(iou), value_of(rho2), value_of(c2), value_of(v), alpha};
  }
  if (alpha_grad && den > 0) return S(1.0) - iou + rho2 / c2 + v / ((S(1.0) - iou) + v) * v;
  return S(1.0) - iou + rho2 / c2 + S(alpha) * v;
}

double focal_factor(double p, double gamma) { return gamma > 0 ? 1.0 - std::pow(p, gamma) : 1.0; }

// w * f(p) * (-ln p) and its derivative with respect to p.
double focal_term(double p, double w, double gamma) { return -w * focal_factor(p, gamma) * std::log(p); }
double focal_term_dp(double p, double w, double gamma) {
  double d = -w * focal_factor(p, gamma) / p;
  if (gamma > 0) d += w * gamma * std::pow(p, gamma - 1.0) * std::log(p);
  return d;
}

// Same derivative taken with respect to L = ln p.
double focal_term_dlogp(double logp, double w, double gamma) {
  if (gamma <= 0) return -w;
  const double pg = std::exp(gamma * logp);
  return -w * (1.0 - pg) + w * gamma * pg * logp;
}

void check_two_bin_target(double t, int bins) {
  if (!(t >= 0.0 && t <= bins - 1)) {
    throw Error("dfl: target distance " + std::to_string(t) + " outside [0, " + std::to_string(bins - 1) + "]");
  }
}

}  // namespace

void FocalParams::validate() const {
  if (!(gamma >= 0.0)) throw ConfigError("focal gamma must be >= 0");
  for (double a : alpha) {
    if (!(a > 0.0)) throw ConfigError("focal alpha entries must be > 0");
  }
}

double FocalParams::alpha_for(int class_id) const {
  if (alpha.empty()) return 1.0;
  if (alpha.size() == 1) return alpha[0];
  if (class_id < 0 || static_cast<std::size_t>(class_id) >= alpha.size()) {
    throw Error("focal alpha: class id " + std::to_string(class_id) + " has no weight");
  }
  return alpha[static_cast<std::size_t>(class_id)];
}

CIoUResult ciou_loss(const BBox& pred, const BBox& truth) {
  if (!(pred.w > 0 && pred.h > 0 && truth.w > 0 && truth.h > 0)) {
    throw Error("ciou_loss: boxes must have positive width and height");
  }
  const Box p = to_corners(pred);
  CIoUResult r;
  r.loss = ciou_core<double>(p.x1, p.y1, p.x2, p.y2, to_corners(truth), &r.terms);
  return r;
}

template <typename T>
Tensor<T> bce(const Tensor<T>& prob, const Tensor<T>& target) {
  if (prob.shape() != target.shape()) {
    throw ShapeError("bce: shape mismatch " + to_string(prob.shape()) + " vs " + to_string(target.shape()));
  }
  const i64 n = prob.numel();
  if (n == 0) throw ShapeError("bce: empty input");
  auto p = prob.data();
  auto y = target.data();
  double acc = 0.0;
  for (i64 i = 0; i < n; ++i) {
    const double pc = std::clamp<double>(p[i], kProbEps, 1.0 - kProbEps);
    acc -= y[i] * std::log(pc) + (1.0 - y[i]) * std::log(1.0 - pc);
  }
  return make_result<T>("bce", {}, {static_cast<T>(acc / n)}, {prob, target},
                        [prob, target, n](const std::vector<T>& gy) {
                          auto* g = grad_of(prob);
                          if (!g) return;
                          auto p = prob.data();
                          auto y = target.data();
                          const double scale = gy[0] / static_cast<double>(n);
                          for (i64 i = 0; i < n; ++i) {
                            const double pi = p[i];
                            if (pi <= kProbEps || pi >= 1.0 - kProbEps) continue;
                            (*g)[i] += static_cast<T>(scale * (-y[i] / pi + (1.0 - y[i]) / (1.0 - pi)));
                          }
                        });
}

template <typename T>
Tensor<T> bce_with_logits_sum(const Tensor<T>& logits, const std::vector<T>& target, double normalizer) {
  const i64 n = logits.numel();
  if (static_cast<i64>(target.size()) != n) throw ShapeError("bce_with_logits_sum: target size mismatch");
  if (!(normalizer > 0)) throw Error("bce_with_logits_sum: normalizer must be positive");
  auto z = logits.data();
  double acc = 0.0;
  for (i64 i = 0; i < n; ++i) {
    const double zi = z[i];
    acc += std::max(zi, 0.0) - zi * target[i] + std::log1p(std::exp(-std::abs(zi)));
  }
  return make_result<T>("bce_with_logits", {}, {static_cast<T>(acc / normalizer)}, {logits},
                        [logits, target, normalizer, n](const std::vector<T>& gy) {
                          auto* g = grad_of(logits);
                          if (!g) return;
                          auto z = logits.data();
                          const double scale = gy[0] / normalizer;
                          for (i64 i = 0; i < n; ++i) {
                            const double s = 1.0 / (1.0 + std::exp(-static_cast<double>(z[i])));
                            (*g)[i] += static_cast<T>(scale * (s - target[i]));
                          }
                        });
}

template <typename T>
Tensor<T> dfl(const Tensor<T>& prob, const FocalParams& params, const std::vector<int>& class_ids) {
  params.validate();
  const i64 n = prob.numel();
  if (n == 0) throw ShapeError("dfl: empty input");
  if (!class_ids.empty() && static_cast<i64>(class_ids.size()) != n) {
    throw ShapeError("dfl: class_ids length differs from the number of probabilities");
  }
  if (class_ids.empty() && params.alpha.size() > 1) throw Error("dfl: per-class alpha needs class ids");
  std::vector<double> w(static_cast<std::size_t>(n));
  for (i64 i = 0; i < n; ++i) w[i] = params.alpha_for(class_ids.empty() ? 0 : class_ids[i]);
  auto p = prob.data();
  double acc = 0.0;
  for (i64 i = 0; i < n; ++i) acc += focal_term(std::clamp<double>(p[i], kProbEps, 1.0), w[i], params.gamma);
  const double gamma = params.gamma;
  return make_result<T>("dfl", {}, {static_cast<T>(acc / n)}, {prob},
                        [prob, w, gamma, n](const std::vector<T>& gy) {
                          auto* g = grad_of(prob);
                          if (!g) return;
                          auto p = prob.data();
                          for (i64 i = 0; i < n; ++i) {
                            if (p[i] <= kProbEps || p[i] > 1.0) continue;
                            (*g)[i] += static_cast<T>(gy[0] / n * focal_term_dp(p[i], w[i], gamma));
                          }
                        });
}

template <typename T>
Tensor<T> dfl_two_bin(const Tensor<T>& prob, const std::vector<double>& targets, const FocalParams& params) {
  params.validate();
  if (prob.ndim() != 2) throw ShapeError("dfl_two_bin: probabilities must be [N,K]");
  const i64 n = prob.dim(0), k = prob.dim(1);
  if (n == 0 || static_cast<i64>(targets.size()) != n) throw ShapeError("dfl_two_bin: need one target per row");
  // Flattened (index, weight) pairs, two per row.
  std::vector<i64> idx(static_cast<std::size_t>(2 * n));
  std::vector<double> w(static_cast<std::size_t>(2 * n));
  for (i64 i = 0; i < n; ++i) {
    check_two_bin_target(targets[i], static_cast<int>(k));
    const i64 lo = std::min<i64>(static_cast<i64>(std::floor(targets[i])), k - 1);
    const i64 hi = std::min<i64>(lo + 1, k - 1);
    const double a = params.alpha_for(0);
    idx[2 * i] = i * k + lo;
    idx[2 * i + 1] = i * k + hi;
    w[2 * i] = a * (static_cast<double>(lo) + 1.0 - targets[i]);
    w[2 * i + 1] = a * (targets[i] - static_cast<double>(lo));
  }
  auto p = prob.data();
  double acc = 0.0;
  for (std::size_t j = 0; j < idx.size(); ++j) {
    if (w[j] != 0.0) acc += focal_term(std::clamp<double>(p[idx[j]], kProbEps, 1.0), w[j], params.gamma);
  }
  const double gamma = params.gamma;
  return make_result<T>("dfl_two_bin", {}, {static_cast<T>(acc / n)}, {prob},
                        [prob, idx, w, gamma, n](const std::vector<T>& gy) {
                          auto* g = grad_of(prob);
                          if (!g) return;
                          auto p = prob.data();
                          for (std::size_t j = 0; j < idx.size(); ++j) {
                            const double pj = p[idx[j]];
                            if (w[j] == 0.0 || pj <= kProbEps || pj > 1.0) continue;
                            (*g)[idx[j]] += static_cast<T>(gy[0] / n * focal_term_dp(pj, w[j], gamma));
                          }
                        });
}

namespace {

// Per-side log-softmax of a [sides, K] logits block, in double.
template <typename T>
std::vector<double> log_softmax_sides(std::span<const T> z, i64 sides, int bins) {
  std::vector<double> out(static_cast<std::size_t>(sides * bins));
  for (i64 s = 0; s < sides; ++s) {
    const T* row = z.data() + s * bins;
    double m = row[0];
    for (int j = 1; j < bins; ++j) m = std::max<double>(m, row[j]);
    double acc = 0.0;
    for (int j = 0; j < bins; ++j) acc += std::exp(row[j] - m);
    const double lse = m + std::log(acc);
    for (int j = 0; j < bins; ++j) out[s * bins + j] = row[j] - lse;
  }
  return out;
}

}  // namespace

template <typename T>
Tensor<T> dfl_box(const Tensor<T>& logits, const std::vector<double>& targets, int bins, double gamma,
                  const std::vector<double>& row_weight) {
  if (logits.ndim() != 2 || logits.dim(1) != 4 * bins) throw ShapeError("dfl_box: logits must be [P, 4*bins]");
  const i64 sides = logits.dim(0) * 4;
  if (sides == 0 || static_cast<i64>(targets.size()) != sides) throw ShapeError("dfl_box: need 4 targets per row");
  if (!row_weight.empty() && static_cast<i64>(row_weight.size()) * 4 != sides) {
    throw ShapeError("dfl_box: row weight count mismatch");
  }
  auto logp = log_softmax_sides(logits.data(), sides, bins);
  std::vector<i64> lo(static_cast<std::size_t>(sides));
  std::vector<double> wl(lo.size()), wh(lo.size());
  double acc = 0.0;
  for (i64 s = 0; s < sides; ++s) {
    check_two_bin_target(targets[s], bins);
    const double a = row_weight.empty() ? 1.0 : row_weight[s / 4];
    lo[s] = std::min<i64>(static_cast<i64>(std::floor(targets[s])), bins - 2);
    wl[s] = a * (static_cast<double>(lo[s]) + 1.0 - targets[s]);
    wh[s] = a * (targets[s] - static_cast<double>(lo[s]));
    const double l0 = logp[s * bins + lo[s]], l1 = logp[s * bins + lo[s] + 1];
    acc += -wl[s] * focal_factor(std::exp(l0), gamma) * l0 - wh[s] * focal_factor(std::exp(l1), gamma) * l1;
  }
  return make_result<T>(
      "dfl_box", {}, {static_cast<T>(acc / sides)}, {logits},
      [logits, logp = std::move(logp), lo, wl, wh, gamma, bins, sides](const std::vector<T>& gy) {
        auto* g = grad_of(logits);
        if (!g) return;
        const double scale = gy[0] / static_cast<double>(sides);
        for (i64 s = 0; s < sides; ++s) {
          const double* lp = logp.data() + s * bins;
          const double d0 = wl[s] != 0.0 ? focal_term_dlogp(lp[lo[s]], wl[s], gamma) : 0.0;
          const double d1 = wh[s] != 0.0 ? focal_term_dlogp(lp[lo[s] + 1], wh[s], gamma) : 0.0;
          const double total = d0 + d1;
          T* gs = g->data() + s * bins;
          for (int j = 0; j < bins; ++j) gs[j] += static_cast<T>(scale * (-std::exp(lp[j]) * total));
          gs[lo[s]] += static_cast<T>(scale * d0);
          gs[lo[s] + 1] += static_cast<T>(scale * d1);
        }
      });
}

template <typename T>
Tensor<T> dfl_box(const Tensor<T>& logits, const std::vector<double>& targets, int bins, double gamma) {
  return dfl_box(logits, targets, bins, gamma, {});
}

template <typename T>
Tensor<T> dfl_expectation(const Tensor<T>& logits, int bins) {
  if (logits.ndim() != 2 || logits.dim(1) != 4 * bins) {
    throw ShapeError("dfl_expectation: logits must be [P, 4*bins]");
  }
  const i64 P = logits.dim(0), sides = P * 4;
  auto logp = log_softmax_sides(logits.data(), sides, bins);
  std::vector<double> prob(logp.size());
  std::vector<T> out(static_cast<std::size_t>(sides));
  std::vector<double> expect(static_cast<std::size_t>(sides));
  for (i64 s = 0; s < sides; ++s) {
    double e = 0.0;
    for (int j = 0; j < bins; ++j) {
      prob[s * bins + j] = std::exp(logp[s * bins + j]);
      e += j * prob[s * bins + j];
    }
    expect[s] = e;
    out[s] = static_cast<T>(e);
  }
  return make_result<T>("dfl_expectation", {P, 4}, std::move(out), {logits},
                        [logits, prob = std::move(prob), expect, bins, sides](const std::vector<T>& gy) {
                          auto* g = grad_of(logits);
                          if (!g) return;
                          for (i64 s = 0; s < sides; ++s) {
                            for (int j = 0; j < bins; ++j) {
                              (*g)[s * bins + j] +=
                                  static_cast<T>(gy[s] * prob[s * bins + j] * (j - expect[s]));
                            }
                          }
                        });
}

template <typename T>
Tensor<T> ltrb_to_boxes(const Tensor<T>& ltrb, const std::vector<double>& ax, const std::vector<double>& ay,
                        const std::vector<double>& stride) {
  if (ltrb.ndim() != 2 || ltrb.dim(1) != 4) throw ShapeError("ltrb_to_boxes: distances must be [P,4]");
  const i64 P = ltrb.dim(0);
  if (static_cast<i64>(ax.size()) != P || static_cast<i64>(ay.size()) != P || static_cast<i64>(stride.size()) != P) {
    throw ShapeError("ltrb_to_boxes: anchor count mismatch");
  }
  auto d = ltrb.data();
  std::vector<T> out(static_cast<std::size_t>(P * 4));
  for (i64 p = 0; p < P; ++p) {
    const double s = stride[p];
    out[p * 4 + 0] = static_cast<T>(ax[p] - d[p * 4 + 0] * s);
    out[p * 4 + 1] = static_cast<T>(ay[p] - d[p * 4 + 1] * s);
    out[p * 4 + 2] = static_cast<T>(ax[p] + d[p * 4 + 2] * s);
    out[p * 4 + 3] = static_cast<T>(ay[p] + d[p * 4 + 3] * s);
  }
  return make_result<T>("ltrb_to_boxes", {P, 4}, std::move(out), {ltrb}, [ltrb, stride, P](const std::vector<T>& gy) {
    auto* g = grad_of(ltrb);
    if (!g) return;
    for (i64 p = 0; p < P; ++p) {
      const double s = stride[p];
      (*g)[p * 4 + 0] -= static_cast<T>(gy[p * 4 + 0] * s);
      (*g)[p * 4 + 1] -= static_cast<T>(gy[p * 4 + 1] * s);
      (*g)[p * 4 + 2] += static_cast<T>(gy[p * 4 + 2] * s);
      (*g)[p * 4 + 3] += static_cast<T>(gy[p * 4 + 3] * s);
    }
  });
}

template <typename T>
Tensor<T> ciou_loss(const Tensor<T>& pred_boxes, const std::vector<Box>& truth, bool alpha_grad) {
  if (pred_boxes.ndim() != 2 || pred_boxes.dim(1) != 4) throw ShapeError("ciou_loss: boxes must be [P,4]");
  const i64 P = pred_boxes.dim(0);
  if (static_cast<i64>(truth.size()) != P) throw ShapeError("ciou_loss: one target box per prediction required");
  auto b = pred_boxes.data();
  std::vector<T> out(static_cast<std::size_t>(P));
  std::vector<double> jac(static_cast<std::size_t>(P * 4));
  for (i64 p = 0; p < P; ++p) {
    if (!(truth[p].width() > 0 && truth[p].height() > 0)) throw Error("ciou_loss: degenerate target box");
    std::array<Dual, 4> c;
    for (int k = 0; k < 4; ++k) {
      c[k] = Dual(b[p * 4 + k]);
      c[k].d[k] = 1.0;
    }
    const Dual r = ciou_core<Dual>(c[0], c[1], c[2], c[3], truth[p], nullptr, alpha_grad);
    out[p] = static_cast<T>(r.v);
    for (int k = 0; k < 4; ++k) jac[p * 4 + k] = r.d[k];
  }
  return make_result<T>("ciou", {P}, std::move(out), {pred_boxes},
                        [pred_boxes, jac = std::move(jac), P](const std::vector<T>& gy) {
                          auto* g = grad_of(pred_boxes);
                          if (!g) return;
                          for (i64 p = 0; p < P; ++p) {
                            for (int k = 0; k < 4; ++k) (*g)[p * 4 + k] += static_cast<T>(gy[p] * jac[p * 4 + k]);
                          }
                        });
}

// ---------------------------------------------------------------------------

AnchorSet make_anchors(int height, int width, const std::vector<int>& strides) {
  AnchorSet a;
  for (std::size_t l = 0; l < strides.size(); ++l) {
    const int s = strides[l];
    if (s <= 0 || height % s != 0 || width % s != 0) {
      throw ShapeError("make_anchors: image extent not divisible by stride " + std::to_string(s));
    }
    const int h = height / s, w = width / s;
    a.level_offset.push_back(static_cast<i64>(a.x.size()));
    a.level_hw.push_back({h, w});
    for (int r = 0; r < h; ++r) {
      for (int c = 0; c < w; ++c) {
        a.x.push_back((c + 0.5) * s);
        a.y.push_back((r + 0.5) * s);
        a.stride.push_back(s);
        a.level.push_back(static_cast<int>(l));
      }
    }
  }
  return a;
}

Assignment assign(const AnchorSet& anchors, const std::vector<BBox>& gt, int reg_bins, double radius) {
  Assignment out;
  const std::size_t n = anchors.size();
  out.gt_index.assign(n, -1);
  std::vector<double> best_area(n, 0.0);
  for (std::size_t g = 0; g < gt.size(); ++g) {
    const BBox& b = gt[g];
    if (!(b.w > 0 && b.h > 0)) throw Error("assign: ground-truth box " + std::to_string(g) + " has no area");
    const Box c = to_corners(b);
    const double area = b.w * b.h;
    for (std::size_t a = 0; a < n; ++a) {
      const double x = anchors.x[a], y = anchors.y[a], r = radius * anchors.stride[a];
      if (!(x > c.x1 && x < c.x2 && y > c.y1 && y < c.y2)) continue;
      if (!(std::abs(x - b.cx) < r && std::abs(y - b.cy) < r)) continue;
      if (out.gt_index[a] < 0 || area < best_area[a]) {
        out.gt_index[a] = static_cast<int>(g);
        best_area[a] = area;
      }
    }
  }
  const double hi = reg_bins - 1 - 0.01;
  for (std::size_t a = 0; a < n; ++a) {
    const int g = out.gt_index[a];
    if (g < 0) continue;
    const Box c = to_corners(gt[static_cast<std::size_t>(g)]);
    const double s = anchors.stride[a];
    out.positives.push_back(static_cast<i64>(a));
    out.target_class.push_back(gt[static_cast<std::size_t>(g)].class_id);
    out.target_ltrb.push_back({std::clamp((anchors.x[a] - c.x1) / s, 0.0, hi),
                               std::clamp((anchors.y[a] - c.y1) / s, 0.0, hi),
                               std::clamp((c.x2 - anchors.x[a]) / s, 0.0, hi),
                               std::clamp((c.y2 - anchors.y[a]) / s, 0.0, hi)});
    out.target_box.push_back(c);
  }
  return out;
}

template <typename T>
LossResult<T> total_loss(const HeadOutputs<T>& head, const std::vector<Assignment>& assignments,
                         const AnchorSet& anchors, const LossWeights& weights, const FocalParams& focal) {
  focal.validate();
  const std::size_t L = head.cls.size();
  if (L == 0 || head.reg.size() != L || anchors.level_hw.size() != L) {
    throw ShapeError("total_loss: head and anchors disagree on the number of scales");
  }
  const i64 B = head.cls[0].dim(0);
  const i64 nc = head.cls[0].dim(1);
  const int bins = static_cast<int>(head.reg[0].dim(1) / 4);
  if (static_cast<i64>(assignments.size()) != B) throw ShapeError("total_loss: one assignment per image required");
  for (std::size_t l = 0; l < L; ++l) {
    if (head.cls[l].dim(2) != anchors.level_hw[l][0] || head.cls[l].dim(3) != anchors.level_hw[l][1]) {
      throw ShapeError("total_loss: anchor grid does not match scale " + std::to_string(l));
    }
  }
  i64 num_pos = 0;
  for (const auto& a : assignments) {
    if (a.gt_index.size() != anchors.size()) throw ShapeError("total_loss: assignment built for other anchors");
    num_pos += static_cast<i64>(a.num_positive());
  }
  const double norm = std::max<double>(1.0, static_cast<double>(num_pos));

  // Per-scale positive data, gathered in (image, anchor) order.
  struct ScalePositives {
    std::vector<i64> locations;
    std::vector<double> targets, ax, ay, stride, alpha, score;
    std::vector<Box> boxes;
  };
  std::vector<ScalePositives> pos(L);
  Tensor<T> cls_loss;
  for (std::size_t l = 0; l < L; ++l) {
    const i64 H = anchors.level_hw[l][0], W = anchors.level_hw[l][1], HW = H * W;
    std::vector<T> target(static_cast<std::size_t>(B * nc * HW), T(0));
    auto logits = head.cls[l].data();
    for (i64 b = 0; b < B; ++b) {
      const auto& as = assignments[b];
      for (std::size_t i = 0; i < as.positives.size(); ++i) {
        const i64 a = as.positives[i];
        if (anchors.level[a] != static_cast<int>(l)) continue;
        const i64 loc = a - anchors.level_offset[l];
        const int c = as.target_class[i];
        if (c < 0 || c >= nc) throw Error("total_loss: target class out of range");
        const i64 ti = (b * nc + c) * HW + loc;
        target[ti] = T(1);
        auto& sp = pos[l];
        sp.locations.push_back(b * HW + loc);
        for (double t : as.target_ltrb[i]) sp.targets.push_back(t);
        sp.ax.push_back(anchors.x[a]);
        sp.ay.push_back(anchors.y[a]);
        sp.stride.push_back(anchors.stride[a]);
        sp.alpha.push_back(focal.alpha_for(c));
        sp.score.push_back(1.0 / (1.0 + std::exp(-static_cast<double>(logits[ti]))));
        sp.boxes.push_back(as.target_box[i]);
      }
    }
    auto term = bce_with_logits_sum(head.cls[l], target, norm);
    cls_loss = cls_loss.defined() ? add(cls_loss, term) : term;
  }

  LossResult<T> result;
  Tensor<T> total = scalar_mul(cls_loss, weights.cls);
  result.parts.cls = static_cast<double>(total.item());
  result.parts.num_positive = num_pos;
  if (num_pos > 0) {
    std::vector<Tensor<T>> rows;
    ScalePositives all;
    for (std::size_t l = 0; l < L; ++l) {
      auto& sp = pos[l];
      if (sp.locations.empty()) continue;
      rows.push_back(gather_locations(head.reg[l], sp.locations));
      auto append = [](auto& dst, const auto& src) { dst.insert(dst.end(), src.begin(), src.end()); };
      append(all.targets, sp.targets);
      append(all.ax, sp.ax);
      append(all.ay, sp.ay);
      append(all.stride, sp.stride);
      append(all.alpha, sp.alpha);
      append(all.score, sp.score);
      append(all.boxes, sp.boxes);
    }
    const Tensor<T> reg = rows.size() == 1 ? rows[0] : concat(rows, 0);
    const bool unit_alpha = focal.alpha.empty();
    auto dfl_term = dfl_box(reg, all.targets, bins, focal.gamma, unit_alpha ? std::vector<double>{} : all.alpha);
    auto boxes = ltrb_to_boxes(dfl_expectation(reg, bins), all.ax, all.ay, all.stride);
    auto per_box = ciou_loss(boxes, all.boxes, weights.ciou_alpha_grad);
    double wsum = 0.0;
    for (double s : all.score) wsum += s;
    std::vector<T> wv(all.score.size());
    for (std::size_t i = 0; i < wv.size(); ++i) wv[i] = static_cast<T>(all.score[i]);
    const auto nw = static_cast<i64>(wv.size());
    auto w = Tensor<T>::from_data({nw}, std::move(wv));
    auto ciou_term = scalar_mul(sum(mul(per_box, w)), 1.0 / std::max(wsum, 1e-12));
    auto dfl_scaled = scalar_mul(dfl_term, weights.dfl);
    auto ciou_scaled = scalar_mul(ciou_term, weights.ciou);
    result.parts.dfl = static_cast<double>(dfl_scaled.item());
    result.parts.ciou = static_cast<double>(ciou_scaled.item());
    total = add(add(total, dfl_scaled), ciou_scaled);
  }
  result.parts.total = static_cast<double>(total.item());
  result.total = total;
  return result;
}

#define HYDET_INSTANTIATE_LOSS(T)                                                                              \
  template Tensor<T> bce(const Tensor<T>&, const Tensor<T>&);                                                  \
  template Tensor<T> bce_with_logits_sum(const Tensor<T>&, const std::vector<T>&, double);                     \
  template Tensor<T> dfl(const Tensor<T>&, const FocalParams&, const std::vector<int>&);                       \
  template Tensor<T> dfl_two_bin(const Tensor<T>&, const std::vector<double>&, const FocalParams&);            \
  template Tensor<T> dfl_box(const Tensor<T>&, const std::vector<double>&, int, double);                       \
  template Tensor<T> dfl_expectation(const Tensor<T>&, int);                                                   \
  template Tensor<T> ltrb_to_boxes(const Tensor<T>&, const std::vector<double>&, const std::vector<double>&,   \
                                   const std::vector<double>&);                                                \
  template Tensor<T> ciou_loss(const Tensor<T>&, const std::vector<Box>&, bool);                                     \
  template LossResult<T> total_loss(const HeadOutputs<T>&, const std::vector<Assignment>&, const AnchorSet&,   \
                                    const LossWeights&, const FocalParams&);

HYDET_INSTANTIATE_LOSS(float)
HYDET_INSTANTIATE_LOSS(double)

}  // namespace hydet
