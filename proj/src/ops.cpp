#include "hydet/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace hydet {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using MapConstMat = Eigen::Map<const RowMat<T>>;

using i64 = std::int64_t;

void require(bool ok, const std::string& message) {
  if (!ok) throw ShapeError(message);
}

template <typename T>
void require_rank(const Tensor<T>& x, int rank, const char* op) {
  require(x.defined(), std::string(op) + ": undefined input");
  require(x.ndim() == rank, std::string(op) + ": expected rank " + std::to_string(rank) +
                                ", got shape " + to_string(x.shape()));
}

int normalize_axis(int axis, int rank, const char* op) {
  if (axis < 0) axis += rank;
  require(axis >= 0 && axis < rank, std::string(op) + ": axis out of range");
  return axis;
}

template <typename T>
std::vector<T>* grad_of(const Tensor<T>& t) {
  return t.requires_grad() ? &t.node()->grad_buffer() : nullptr;
}

// Column buffer of shape [Cin*k*k, Ho*Wo] for one image.
template <typename T>
void im2col(const T* x, i64 cin, i64 h, i64 w, int k, int stride, int pad, i64 ho, i64 wo, T* col) {
  const i64 plane = ho * wo;
  for (i64 c = 0; c < cin; ++c) {
    const T* xc = x + c * h * w;
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        T* row = col + ((c * k + ki) * k + kj) * plane;
        for (i64 oh = 0; oh < ho; ++oh) {
          const i64 ih = oh * stride - pad + ki;
          T* dst = row + oh * wo;
          if (ih < 0 || ih >= h) {
            std::fill(dst, dst + wo, T(0));
            continue;
          }
          const T* src = xc + ih * w;
          if (stride == 1) {
            for (i64 ow = 0; ow < wo; ++ow) {
              const i64 iw = ow - pad + kj;
              dst[ow] = (iw >= 0 && iw < w) ? src[iw] : T(0);
            }
          } else {
            for (i64 ow = 0; ow < wo; ++ow) {
              const i64 iw = ow * stride - pad + kj;
              dst[ow] = (iw >= 0 && iw < w) ? src[iw] : T(0);
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, i64 cin, i64 h, i64 w, int k, int stride, int pad, i64 ho, i64 wo, T* dx) {
  const i64 plane = ho * wo;
  for (i64 c = 0; c < cin; ++c) {
    T* xc = dx + c * h * w;
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        const T* row = col + ((c * k + ki) * k + kj) * plane;
        for (i64 oh = 0; oh < ho; ++oh) {
          const i64 ih = oh * stride - pad + ki;
          if (ih < 0 || ih >= h) continue;
          const T* src = row + oh * wo;
          T* dst = xc + ih * w;
          for (i64 ow = 0; ow < wo; ++ow) {
            const i64 iw = ow * stride - pad + kj;
            if (iw >= 0 && iw < w) dst[iw] += src[ow];
          }
        }
      }
    }
  }
}

template <typename T>
T sigmoid_scalar(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

// Flat input offset for every output element of a permutation.
std::vector<i64> permutation_map(const Shape& in_shape, const std::vector<int>& perm) {
  const int rank = static_cast<int>(in_shape.size());
  std::vector<i64> in_strides(rank, 1);
  for (int i = rank - 2; i >= 0; --i) in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
  Shape out_shape(rank);
  std::vector<i64> step(rank);
  for (int i = 0; i < rank; ++i) {
    out_shape[i] = in_shape[perm[i]];
    step[i] = in_strides[perm[i]];
  }
  const i64 n = numel(in_shape);
  std::vector<i64> map(static_cast<std::size_t>(n));
  std::vector<i64> idx(rank, 0);
  i64 offset = 0;
  for (i64 o = 0; o < n; ++o) {
    map[o] = offset;
    for (int d = rank - 1; d >= 0; --d) {
      if (++idx[d] < out_shape[d]) {
        offset += step[d];
        break;
      }
      offset -= step[d] * (out_shape[d] - 1);
      idx[d] = 0;
    }
  }
  return map;
}

}  // namespace

// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight,
                 const std::optional<Tensor<T>>& bias, int stride, int padding) {
  require_rank(input, 4, "conv2d input");
  require_rank(weight, 4, "conv2d weight");
  const i64 B = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
  const i64 cout = weight.dim(0);
  const int k = static_cast<int>(weight.dim(2));
  require(k >= 1 && weight.dim(3) == k, "conv2d: kernel must be square, got " + to_string(weight.shape()));
  require(stride >= 1, "conv2d: stride must be >= 1");
  require(padding >= 0, "conv2d: padding must be >= 0");
  require(weight.dim(1) == cin, "conv2d: input has " + std::to_string(cin) +
                                    " channels but weight expects " + std::to_string(weight.dim(1)) +
                                    " (input " + to_string(input.shape()) + ", weight " +
                                    to_string(weight.shape()) + ")");
  if (bias) {
    require(bias->ndim() == 1 && bias->dim(0) == cout, "conv2d: bias must have shape (Cout)");
  }
  const i64 hnum = h + 2 * padding - k, wnum = w + 2 * padding - k;
  require(hnum >= 0 && wnum >= 0, "conv2d: zero-sized output for input " + to_string(input.shape()) +
                                      " with kernel " + std::to_string(k));
  const i64 ho = hnum / stride + 1, wo = wnum / stride + 1;
  const i64 K = cin * k * k, P = ho * wo;
  const bool direct = (k == 1 && stride == 1 && padding == 0);

  std::vector<T> out(static_cast<std::size_t>(B * cout * P));
  std::vector<T> col(direct ? 0 : static_cast<std::size_t>(K * P));
  MapConstMat<T> wm(weight.data().data(), cout, K);
  const T* x = input.data().data();
  for (i64 b = 0; b < B; ++b) {
    const T* xb = x + b * cin * h * w;
    if (!direct) im2col(xb, cin, h, w, k, stride, padding, ho, wo, col.data());
    MapConstMat<T> xm(direct ? xb : col.data(), K, P);
    MapMat<T> ym(out.data() + b * cout * P, cout, P);
    ym.noalias() = wm * xm;
    if (bias) {
      const T* bv = bias->data().data();
      for (i64 c = 0; c < cout; ++c) ym.row(c).array() += bv[c];
    }
  }

  std::vector<Tensor<T>> inputs{input, weight};
  if (bias) inputs.push_back(*bias);
  auto bias_t = bias.value_or(Tensor<T>());
  return make_result<T>(
      "conv2d", {B, cout, ho, wo}, std::move(out), inputs,
      [=](const std::vector<T>& gy) {
        auto* gx = grad_of(input);
        auto* gw = grad_of(weight);
        auto* gb = bias_t.defined() ? grad_of(bias_t) : nullptr;
        MapConstMat<T> wmat(weight.data().data(), cout, K);
        std::vector<T> colbuf(direct ? 0 : static_cast<std::size_t>(K * P));
        std::vector<T> dcol(direct ? 0 : static_cast<std::size_t>(K * P));
        const T* xdata = input.data().data();
        for (i64 b = 0; b < B; ++b) {
          MapConstMat<T> gym(gy.data() + b * cout * P, cout, P);
          const T* xb = xdata + b * cin * h * w;
          if (gw) {
            if (!direct) im2col(xb, cin, h, w, k, stride, padding, ho, wo, colbuf.data());
            MapConstMat<T> xm(direct ? xb : colbuf.data(), K, P);
            MapMat<T> gwm(gw->data(), cout, K);
            gwm.noalias() += gym * xm.transpose();
          }
          if (gb) {
            for (i64 c = 0; c < cout; ++c) (*gb)[c] += gym.row(c).sum();
          }
          if (gx) {
            T* gxb = gx->data() + b * cin * h * w;
            if (direct) {
              MapMat<T> gxm(gxb, cin, P);
              gxm.noalias() += wmat.transpose() * gym;
            } else {
              MapMat<T> dcm(dcol.data(), K, P);
              dcm.noalias() = wmat.transpose() * gym;
              col2im(dcol.data(), cin, h, w, k, stride, padding, ho, wo, gxb);
            }
          }
        }
      });
}

template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                      BatchNormState<T>& state, NormMode mode) {
  require_rank(input, 4, "batchnorm2d");
  const i64 B = input.dim(0), C = input.dim(1), HW = input.dim(2) * input.dim(3);
  require(gamma.numel() == C && beta.numel() == C, "batchnorm2d: gamma/beta must have C elements");
  require(static_cast<i64>(state.running_mean.size()) == C &&
              static_cast<i64>(state.running_var.size()) == C,
          "batchnorm2d: running stats size mismatch");
  const i64 M = B * HW;
  const bool train = mode == NormMode::train;
  if (train) require(M >= 2, "batchnorm2d: train mode needs B*H*W >= 2, got " + std::to_string(M));

  const T* x = input.data().data();
  const T* g = gamma.data().data();
  const T* bt = beta.data().data();
  std::vector<T> xhat(static_cast<std::size_t>(B * C * HW));
  std::vector<T> out(xhat.size());
  std::vector<T> invstd(static_cast<std::size_t>(C));
  for (i64 c = 0; c < C; ++c) {
    double mu, var;
    if (train) {
      double s = 0.0;
      for (i64 b = 0; b < B; ++b) {
        const T* p = x + (b * C + c) * HW;
        for (i64 i = 0; i < HW; ++i) s += p[i];
      }
      mu = s / static_cast<double>(M);
      double ss = 0.0;
      for (i64 b = 0; b < B; ++b) {
        const T* p = x + (b * C + c) * HW;
        for (i64 i = 0; i < HW; ++i) {
          const double d = p[i] - mu;
          ss += d * d;
        }
      }
      var = ss / static_cast<double>(M);
      const double unbiased = ss / static_cast<double>(M - 1);
      state.running_mean[c] =
          static_cast<T>((1.0 - state.momentum) * state.running_mean[c] + state.momentum * mu);
      state.running_var[c] =
          static_cast<T>((1.0 - state.momentum) * state.running_var[c] + state.momentum * unbiased);
    } else {
      mu = state.running_mean[c];
      var = state.running_var[c];
    }
    const double is = 1.0 / std::sqrt(var + state.eps);
    invstd[c] = static_cast<T>(is);
    for (i64 b = 0; b < B; ++b) {
      const i64 base = (b * C + c) * HW;
      for (i64 i = 0; i < HW; ++i) {
        const T xh = static_cast<T>((x[base + i] - mu) * is);
        xhat[base + i] = xh;
        out[base + i] = g[c] * xh + bt[c];
      }
    }
  }

  return make_result<T>(
      "batchnorm2d", input.shape(), std::move(out), {input, gamma, beta},
      [=, xhat = std::move(xhat), invstd = std::move(invstd)](const std::vector<T>& gy) {
        auto* gx = grad_of(input);
        auto* gg = grad_of(gamma);
        auto* gbeta = grad_of(beta);
        const T* gm = gamma.data().data();
        for (i64 c = 0; c < C; ++c) {
          double sum_dy = 0.0, sum_dy_xh = 0.0;
          for (i64 b = 0; b < B; ++b) {
            const i64 base = (b * C + c) * HW;
            for (i64 i = 0; i < HW; ++i) {
              sum_dy += gy[base + i];
              sum_dy_xh += static_cast<double>(gy[base + i]) * xhat[base + i];
            }
          }
          if (gg) (*gg)[c] += static_cast<T>(sum_dy_xh);
          if (gbeta) (*gbeta)[c] += static_cast<T>(sum_dy);
          if (!gx) continue;
          const double scale = static_cast<double>(gm[c]) * invstd[c];
          for (i64 b = 0; b < B; ++b) {
            const i64 base = (b * C + c) * HW;
            for (i64 i = 0; i < HW; ++i) {
              double d;
              if (train) {
                d = scale * (gy[base + i] - (sum_dy + xhat[base + i] * sum_dy_xh) / static_cast<double>(M));
              } else {
                d = scale * gy[base + i];
              }
              (*gx)[base + i] += static_cast<T>(d);
            }
          }
        }
      });
}

template <typename T>
Tensor<T> layernorm(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta, double eps) {
  require(input.defined() && input.ndim() >= 1, "layernorm: input must have rank >= 1");
  const i64 D = input.dim(-1);
  require(gamma.numel() == D && beta.numel() == D, "layernorm: gamma/beta must match last axis");
  const i64 rows = input.numel() / D;
  const T* x = input.data().data();
  const T* g = gamma.data().data();
  const T* bt = beta.data().data();
  std::vector<T> xhat(static_cast<std::size_t>(input.numel()));
  std::vector<T> out(xhat.size());
  std::vector<T> invstd(static_cast<std::size_t>(rows));
  for (i64 r = 0; r < rows; ++r) {
    const T* p = x + r * D;
    double s = 0.0;
    for (i64 i = 0; i < D; ++i) s += p[i];
    const double mu = s / static_cast<double>(D);
    double ss = 0.0;
    for (i64 i = 0; i < D; ++i) ss += (p[i] - mu) * (p[i] - mu);
    const double is = 1.0 / std::sqrt(ss / static_cast<double>(D) + eps);
    invstd[r] = static_cast<T>(is);
    for (i64 i = 0; i < D; ++i) {
      const T xh = static_cast<T>((p[i] - mu) * is);
      xhat[r * D + i] = xh;
      out[r * D + i] = g[i] * xh + bt[i];
    }
  }
  return make_result<T>(
      "layernorm", input.shape(), std::move(out), {input, gamma, beta},
      [=, xhat = std::move(xhat), invstd = std::move(invstd)](const std::vector<T>& gy) {
        auto* gx = grad_of(input);
        auto* gg = grad_of(gamma);
        auto* gbeta = grad_of(beta);
        const T* gm = gamma.data().data();
        for (i64 r = 0; r < rows; ++r) {
          const T* dy = gy.data() + r * D;
          const T* xh = xhat.data() + r * D;
          double s1 = 0.0, s2 = 0.0;
          for (i64 i = 0; i < D; ++i) {
            const double dxh = static_cast<double>(dy[i]) * gm[i];
            s1 += dxh;
            s2 += dxh * xh[i];
            if (gg) (*gg)[i] += dy[i] * xh[i];
            if (gbeta) (*gbeta)[i] += dy[i];
          }
          if (!gx) continue;
          for (i64 i = 0; i < D; ++i) {
            const double dxh = static_cast<double>(dy[i]) * gm[i];
            (*gx)[r * D + i] += static_cast<T>(
                invstd[r] * (dxh - s1 / static_cast<double>(D) - xh[i] * s2 / static_cast<double>(D)));
          }
        }
      });
}

// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
  const auto in = x.data();
  std::vector<T> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] * sigmoid_scalar(in[i]);
  return make_result<T>("silu", x.shape(), std::move(out), {x}, [x](const std::vector<T>& gy) {
    auto* gx = grad_of(x);
    if (!gx) return;
    const auto v = x.data();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const T s = sigmoid_scalar(v[i]);
      (*gx)[i] += gy[i] * (s + v[i] * s * (T(1) - s));
    }
  });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  const auto in = x.data();
  std::vector<T> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = sigmoid_scalar(in[i]);
  auto y = out;
  return make_result<T>("sigmoid", x.shape(), std::move(out), {x},
                        [x, y = std::move(y)](const std::vector<T>& gy) {
                          auto* gx = grad_of(x);
                          if (!gx) return;
                          for (std::size_t i = 0; i < y.size(); ++i) (*gx)[i] += gy[i] * y[i] * (T(1) - y[i]);
                        });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
  require(x.defined() && x.ndim() >= 1, "softmax: input must have rank >= 1");
  const i64 D = x.dim(-1);
  const i64 rows = x.numel() / D;
  const auto in = x.data();
  std::vector<T> out(in.size());
  for (i64 r = 0; r < rows; ++r) {
    const T* p = in.data() + r * D;
    T* o = out.data() + r * D;
    const T mx = *std::max_element(p, p + D);
    double s = 0.0;
    for (i64 i = 0; i < D; ++i) {
      o[i] = std::exp(p[i] - mx);
      s += o[i];
    }
    const double inv = 1.0 / s;
    for (i64 i = 0; i < D; ++i) o[i] = static_cast<T>(o[i] * inv);
  }
  auto y = out;
  return make_result<T>("softmax", x.shape(), std::move(out), {x},
                        [x, y = std::move(y), D, rows](const std::vector<T>& gy) {
                          auto* gx = grad_of(x);
                          if (!gx) return;
                          for (i64 r = 0; r < rows; ++r) {
                            const T* yr = y.data() + r * D;
                            const T* g = gy.data() + r * D;
                            double dot = 0.0;
                            for (i64 i = 0; i < D; ++i) dot += static_cast<double>(g[i]) * yr[i];
                            for (i64 i = 0; i < D; ++i) {
                              (*gx)[r * D + i] += static_cast<T>(yr[i] * (g[i] - dot));
                            }
                          }
                        });
}

// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& x, int kernel, int stride, int padding) {
  require_rank(x, 4, "maxpool2d");
  require(kernel >= 1 && stride >= 1 && padding >= 0, "maxpool2d: invalid kernel/stride/padding");
  require(2 * padding <= kernel, "maxpool2d: padding must be at most half the kernel");
  const i64 B = x.dim(0), C = x.dim(1), h = x.dim(2), w = x.dim(3);
  const i64 hnum = h + 2 * padding - kernel, wnum = w + 2 * padding - kernel;
  require(hnum >= 0 && wnum >= 0, "maxpool2d: zero-sized output for " + to_string(x.shape()));
  const i64 ho = hnum / stride + 1, wo = wnum / stride + 1;
  std::vector<T> out(static_cast<std::size_t>(B * C * ho * wo));
  std::vector<std::int32_t> argmax(out.size());
  const T* in = x.data().data();
  for (i64 bc = 0; bc < B * C; ++bc) {
    const T* plane = in + bc * h * w;
    for (i64 oh = 0; oh < ho; ++oh) {
      const i64 h0 = std::max<i64>(oh * stride - padding, 0);
      const i64 h1 = std::min<i64>(oh * stride - padding + kernel, h);
      for (i64 ow = 0; ow < wo; ++ow) {
        const i64 w0 = std::max<i64>(ow * stride - padding, 0);
        const i64 w1 = std::min<i64>(ow * stride - padding + kernel, w);
        T best = -std::numeric_limits<T>::infinity();
        i64 arg = h0 * w + w0;
        for (i64 ih = h0; ih < h1; ++ih) {
          for (i64 iw = w0; iw < w1; ++iw) {
            if (plane[ih * w + iw] > best) {
              best = plane[ih * w + iw];
              arg = ih * w + iw;
            }
          }
        }
        const i64 o = (bc * ho + oh) * wo + ow;
        out[o] = best;
        argmax[o] = static_cast<std::int32_t>(arg);
      }
    }
  }
  const i64 out_plane = ho * wo;
  return make_result<T>("maxpool2d", {B, C, ho, wo}, std::move(out), {x},
                        [x, argmax = std::move(argmax), h, w, out_plane](const std::vector<T>& gy) {
                          auto* gx = grad_of(x);
                          if (!gx) return;
                          for (std::size_t o = 0; o < gy.size(); ++o) {
                            const i64 bc = static_cast<i64>(o) / out_plane;
                            (*gx)[bc * h * w + argmax[o]] += gy[o];
                          }
                        });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  require(!parts.empty(), "concat: no inputs");
  const int rank = parts[0].ndim();
  axis = normalize_axis(axis, rank, "concat");
  Shape shape = parts[0].shape();
  i64 total = 0;
  for (const auto& p : parts) {
    require(p.ndim() == rank, "concat: rank mismatch");
    for (int d = 0; d < rank; ++d) {
      if (d != axis) {
        require(p.shape()[d] == shape[d], "concat: incompatible shapes " + to_string(parts[0].shape()) +
                                              " and " + to_string(p.shape()) + " on axis " +
                                              std::to_string(axis));
      }
    }
    total += p.shape()[axis];
  }
  shape[axis] = total;
  i64 outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= shape[d];
  for (int d = axis + 1; d < rank; ++d) inner *= shape[d];
  std::vector<T> out(static_cast<std::size_t>(numel(shape)));
  std::vector<i64> offsets;
  i64 off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const i64 block = p.shape()[axis] * inner;
    const T* src = p.data().data();
    for (i64 o = 0; o < outer; ++o) {
      std::copy(src + o * block, src + (o + 1) * block, out.data() + o * total * inner + off * inner);
    }
    off += p.shape()[axis];
  }
  return make_result<T>("concat", shape, std::move(out), parts,
                        [parts, offsets, outer, inner, total, axis](const std::vector<T>& gy) {
                          for (std::size_t k = 0; k < parts.size(); ++k) {
                            auto* g = grad_of(parts[k]);
                            if (!g) continue;
                            const i64 block = parts[k].shape()[axis] * inner;
                            for (i64 o = 0; o < outer; ++o) {
                              const T* src = gy.data() + o * total * inner + offsets[k] * inner;
                              T* dst = g->data() + o * block;
                              for (i64 i = 0; i < block; ++i) dst[i] += src[i];
                            }
                          }
                        });
}

template <typename T>
Tensor<T> strided_slice(const Tensor<T>& x, int axis, i64 start, i64 stop, i64 step) {
  const int rank = x.ndim();
  axis = normalize_axis(axis, rank, "strided_slice");
  const i64 extent = x.shape()[axis];
  require(step >= 1, "strided_slice: step must be >= 1");
  stop = std::min(stop, extent);
  require(start >= 0 && start < stop, "strided_slice: empty or out-of-range slice");
  const i64 count = (stop - start + step - 1) / step;
  Shape shape = x.shape();
  shape[axis] = count;
  i64 outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= shape[d];
  for (int d = axis + 1; d < rank; ++d) inner *= shape[d];
  std::vector<T> out(static_cast<std::size_t>(numel(shape)));
  const T* src = x.data().data();
  for (i64 o = 0; o < outer; ++o) {
    for (i64 j = 0; j < count; ++j) {
      const T* s = src + (o * extent + start + j * step) * inner;
      std::copy(s, s + inner, out.data() + (o * count + j) * inner);
    }
  }
  return make_result<T>("strided_slice", shape, std::move(out), {x},
                        [=](const std::vector<T>& gy) {
                          auto* g = grad_of(x);
                          if (!g) return;
                          for (i64 o = 0; o < outer; ++o) {
                            for (i64 j = 0; j < count; ++j) {
                              T* d = g->data() + (o * extent + start + j * step) * inner;
                              const T* s = gy.data() + (o * count + j) * inner;
                              for (i64 i = 0; i < inner; ++i) d[i] += s[i];
                            }
                          }
                        });
}

template <typename T>
Tensor<T> upsample_nearest2x(const Tensor<T>& x) {
  require_rank(x, 4, "upsample_nearest2x");
  const i64 B = x.dim(0), C = x.dim(1), h = x.dim(2), w = x.dim(3);
  std::vector<T> out(static_cast<std::size_t>(B * C * 4 * h * w));
  const T* in = x.data().data();
  for (i64 bc = 0; bc < B * C; ++bc) {
    for (i64 i = 0; i < 2 * h; ++i) {
      const T* src = in + bc * h * w + (i / 2) * w;
      T* dst = out.data() + bc * 4 * h * w + i * 2 * w;
      for (i64 j = 0; j < 2 * w; ++j) dst[j] = src[j / 2];
    }
  }
  return make_result<T>("upsample_nearest2x", {B, C, 2 * h, 2 * w}, std::move(out), {x},
                        [=](const std::vector<T>& gy) {
                          auto* g = grad_of(x);
                          if (!g) return;
                          for (i64 bc = 0; bc < B * C; ++bc) {
                            for (i64 i = 0; i < 2 * h; ++i) {
                              T* dst = g->data() + bc * h * w + (i / 2) * w;
                              const T* src = gy.data() + bc * 4 * h * w + i * 2 * w;
                              for (i64 j = 0; j < 2 * w; ++j) dst[j / 2] += src[j];
                            }
                          }
                        });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  require(numel(shape) == x.numel(), "reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  std::vector<T> out(x.data().begin(), x.data().end());
  return make_result<T>("reshape", std::move(shape), std::move(out), {x}, [x](const std::vector<T>& gy) {
    auto* g = grad_of(x);
    if (!g) return;
    for (std::size_t i = 0; i < gy.size(); ++i) (*g)[i] += gy[i];
  });
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<int>& perm) {
  const int rank = x.ndim();
  require(static_cast<int>(perm.size()) == rank, "permute: permutation rank mismatch");
  std::vector<bool> seen(rank, false);
  for (int p : perm) {
    require(p >= 0 && p < rank && !seen[p], "permute: invalid permutation");
    seen[p] = true;
  }
  Shape shape(rank);
  for (int i = 0; i < rank; ++i) shape[i] = x.shape()[perm[i]];
  auto map = permutation_map(x.shape(), perm);
  std::vector<T> out(map.size());
  const T* in = x.data().data();
  for (std::size_t o = 0; o < map.size(); ++o) out[o] = in[map[o]];
  return make_result<T>("permute", std::move(shape), std::move(out), {x},
                        [x, map = std::move(map)](const std::vector<T>& gy) {
                          auto* g = grad_of(x);
                          if (!g) return;
                          for (std::size_t o = 0; o < map.size(); ++o) (*g)[map[o]] += gy[o];
                        });
}

template <typename T>
Tensor<T> space_to_depth(const Tensor<T>& x, bool pad_odd) {
  require_rank(x, 4, "space_to_depth");
  const i64 B = x.dim(0), C = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (!pad_odd) {
    require(h % 2 == 0 && w % 2 == 0, "space_to_depth: spatial extents must be even, got " + to_string(x.shape()));
  }
  const i64 ho = (h + 1) / 2, wo = (w + 1) / 2;
  std::vector<T> out(static_cast<std::size_t>(B * 4 * C * ho * wo), T(0));
  const T* in = x.data().data();
  // Slot q takes rows of parity q/2 and columns of parity q%2.
  for (i64 b = 0; b < B; ++b) {
    for (int q = 0; q < 4; ++q) {
      const i64 dy = q / 2, dx = q % 2;
      for (i64 c = 0; c < C; ++c) {
        const T* src = in + (b * C + c) * h * w;
        T* dst = out.data() + ((b * 4 + q) * C + c) * ho * wo;
        for (i64 i = 0; i < ho; ++i) {
          const i64 ih = 2 * i + dy;
          if (ih >= h) continue;
          for (i64 j = 0; j < wo; ++j) {
            const i64 iw = 2 * j + dx;
            if (iw < w) dst[i * wo + j] = src[ih * w + iw];
          }
        }
      }
    }
  }
  return make_result<T>("space_to_depth", {B, 4 * C, ho, wo}, std::move(out), {x},
                        [=](const std::vector<T>& gy) {
                          auto* g = grad_of(x);
                          if (!g) return;
                          for (i64 b = 0; b < B; ++b) {
                            for (int q = 0; q < 4; ++q) {
                              const i64 dy = q / 2, dx = q % 2;
                              for (i64 c = 0; c < C; ++c) {
                                T* dst = g->data() + (b * C + c) * h * w;
                                const T* src = gy.data() + ((b * 4 + q) * C + c) * ho * wo;
                                for (i64 i = 0; i < ho; ++i) {
                                  const i64 ih = 2 * i + dy;
                                  if (ih >= h) continue;
                                  for (i64 j = 0; j < wo; ++j) {
                                    const i64 iw = 2 * j + dx;
                                    if (iw < w) dst[ih * w + iw] += src[i * wo + j];
                                  }
                                }
                              }
                            }
                          }
                        });
}

template <typename T>
Tensor<T> depth_to_space(const Tensor<T>& x, i64 out_h, i64 out_w) {
  require_rank(x, 4, "depth_to_space");
  const i64 B = x.dim(0), C4 = x.dim(1), h = x.dim(2), w = x.dim(3);
  require(C4 % 4 == 0, "depth_to_space: channels must be divisible by 4");
  require((out_h + 1) / 2 == h && (out_w + 1) / 2 == w, "depth_to_space: output extent mismatch");
  const i64 C = C4 / 4;
  std::vector<T> out(static_cast<std::size_t>(B * C * out_h * out_w));
  const T* in = x.data().data();
  for (i64 b = 0; b < B; ++b) {
    for (int q = 0; q < 4; ++q) {
      const i64 dy = q / 2, dx = q % 2;
      for (i64 c = 0; c < C; ++c) {
        const T* src = in + ((b * 4 + q) * C + c) * h * w;
        T* dst = out.data() + (b * C + c) * out_h * out_w;
        for (i64 i = 0; i < h; ++i) {
          const i64 oh = 2 * i + dy;
          if (oh >= out_h) continue;
          for (i64 j = 0; j < w; ++j) {
            const i64 ow = 2 * j + dx;
            if (ow < out_w) dst[oh * out_w + ow] = src[i * w + j];
          }
        }
      }
    }
  }
  return make_result<T>("depth_to_space", {B, C, out_h, out_w}, std::move(out), {x},
                        [=](const std::vector<T>& gy) {
                          auto* g = grad_of(x);
                          if (!g) return;
                          for (i64 b = 0; b < B; ++b) {
                            for (int q = 0; q < 4; ++q) {
                              const i64 dy = q / 2, dx = q % 2;
                              for (i64 c = 0; c < C; ++c) {
                                T* dst = g->data() + ((b * 4 + q) * C + c) * h * w;
                                const T* src = gy.data() + (b * C + c) * out_h * out_w;
                                for (i64 i = 0; i < h; ++i) {
                                  const i64 oh = 2 * i + dy;
                                  if (oh >= out_h) continue;
                                  for (i64 j = 0; j < w; ++j) {
                                    const i64 ow = 2 * j + dx;
                                    if (ow < out_w) dst[i * w + j] += src[oh * out_w + ow];
                                  }
                                }
                              }
                            }
                          }
                        });
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, const std::vector<i64>& rows) {
  require(x.defined() && x.ndim() >= 1, "gather_rows: input must have rank >= 1");
  require(!rows.empty(), "gather_rows: empty index list");
  const i64 n = x.dim(0);
  const i64 row = x.numel() / n;
  Shape shape = x.shape();
  shape[0] = static_cast<i64>(rows.size());
  std::vector<T> out(static_cast<std::size_t>(numel(shape)));
  const T* in = x.data().data();
  for (std::size_t r = 0; r < rows.size(); ++r) {
    require(rows[r] >= 0 && rows[r] < n, "gather_rows: index out of range");
    std::copy(in + rows[r] * row, in + (rows[r] + 1) * row, out.data() + static_cast<i64>(r) * row);
  }
  return make_result<T>("gather_rows", std::move(shape), std::move(out), {x},
                        [x, rows, row](const std::vector<T>& gy) {
                          auto* g = grad_of(x);
                          if (!g) return;
                          for (std::size_t r = 0; r < rows.size(); ++r) {
                            T* dst = g->data() + rows[r] * row;
                            const T* src = gy.data() + static_cast<i64>(r) * row;
                            for (i64 i = 0; i < row; ++i) dst[i] += src[i];
                          }
                        });
}

template <typename T>
Tensor<T> gather_locations(const Tensor<T>& x, const std::vector<i64>& locations) {
  require(x.defined() && x.ndim() == 4, "gather_locations: input must be [B,C,H,W]");
  require(!locations.empty(), "gather_locations: empty index list");
  const i64 B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  const i64 P = static_cast<i64>(locations.size());
  std::vector<T> out(static_cast<std::size_t>(P * C));
  const T* in = x.data().data();
  for (i64 p = 0; p < P; ++p) {
    const i64 loc = locations[p];
    require(loc >= 0 && loc < B * HW, "gather_locations: index out of range");
    const T* base = in + (loc / HW) * C * HW + loc % HW;
    for (i64 c = 0; c < C; ++c) out[p * C + c] = base[c * HW];
  }
  return make_result<T>("gather_locations", {P, C}, std::move(out), {x},
                        [x, locations, C, HW](const std::vector<T>& gy) {
                          auto* g = grad_of(x);
                          if (!g) return;
                          for (std::size_t p = 0; p < locations.size(); ++p) {
                            const i64 loc = locations[p];
                            T* base = g->data() + (loc / HW) * C * HW + loc % HW;
                            for (i64 c = 0; c < C; ++c) base[c * HW] += gy[p * C + c];
                          }
                        });
}

// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.defined() && b.defined() && a.ndim() >= 2 && b.ndim() >= 2, "matmul: operands must have rank >= 2");
  const i64 M = a.dim(-2), K = a.dim(-1);
  const i64 Kb = b.dim(-2), N = b.dim(-1);
  require(K == Kb, "matmul: inner extents differ, " + to_string(a.shape()) + " x " + to_string(b.shape()));
  const i64 batch = a.numel() / (M * K);
  const bool broadcast_b = b.ndim() == 2;
  if (!broadcast_b) {
    require(a.ndim() == b.ndim(), "matmul: batch rank mismatch");
    for (int d = 0; d < a.ndim() - 2; ++d) {
      require(a.shape()[d] == b.shape()[d], "matmul: batch extents differ, " + to_string(a.shape()) +
                                                " x " + to_string(b.shape()));
    }
  }
  Shape shape = a.shape();
  shape.back() = N;
  std::vector<T> out(static_cast<std::size_t>(batch * M * N));
  for (i64 s = 0; s < batch; ++s) {
    MapConstMat<T> am(a.data().data() + s * M * K, M, K);
    MapConstMat<T> bm(b.data().data() + (broadcast_b ? 0 : s * K * N), K, N);
    MapMat<T> cm(out.data() + s * M * N, M, N);
    cm.noalias() = am * bm;
  }
  return make_result<T>("matmul", std::move(shape), std::move(out), {a, b},
                        [=](const std::vector<T>& gy) {
                          auto* ga = grad_of(a);
                          auto* gb = grad_of(b);
                          for (i64 s = 0; s < batch; ++s) {
                            MapConstMat<T> gm(gy.data() + s * M * N, M, N);
                            MapConstMat<T> am(a.data().data() + s * M * K, M, K);
                            const i64 boff = broadcast_b ? 0 : s * K * N;
                            MapConstMat<T> bm(b.data().data() + boff, K, N);
                            if (ga) {
                              MapMat<T> gam(ga->data() + s * M * K, M, K);
                              gam.noalias() += gm * bm.transpose();
                            }
                            if (gb) {
                              MapMat<T> gbm(gb->data() + boff, K, N);
                              gbm.noalias() += am.transpose() * gm;
                            }
                          }
                        });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const std::optional<Tensor<T>>& bias) {
  require(x.defined() && x.ndim() >= 1, "linear: input must have rank >= 1");
  require(weight.ndim() == 2, "linear: weight must be [Dout, Din]");
  const i64 din = x.dim(-1), dout = weight.dim(0);
  require(weight.dim(1) == din, "linear: input width " + std::to_string(din) + " does not match weight " +
                                    to_string(weight.shape()));
  if (bias) require(bias->numel() == dout, "linear: bias must have Dout elements");
  const i64 rows = x.numel() / din;
  Shape shape = x.shape();
  shape.back() = dout;
  std::vector<T> out(static_cast<std::size_t>(rows * dout));
  MapConstMat<T> xm(x.data().data(), rows, din);
  MapConstMat<T> wm(weight.data().data(), dout, din);
  MapMat<T> ym(out.data(), rows, dout);
  ym.noalias() = xm * wm.transpose();
  if (bias) {
    Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bv(bias->data().data(), dout);
    ym.rowwise() += bv;
  }
  std::vector<Tensor<T>> inputs{x, weight};
  if (bias) inputs.push_back(*bias);
  auto bias_t = bias.value_or(Tensor<T>());
  return make_result<T>("linear", std::move(shape), std::move(out), inputs,
                        [=](const std::vector<T>& gy) {
                          auto* gx = grad_of(x);
                          auto* gw = grad_of(weight);
                          auto* gb = bias_t.defined() ? grad_of(bias_t) : nullptr;
                          MapConstMat<T> gm(gy.data(), rows, dout);
                          if (gx) {
                            MapMat<T> gxm(gx->data(), rows, din);
                            gxm.noalias() += gm * MapConstMat<T>(weight.data().data(), dout, din);
                          }
                          if (gw) {
                            MapMat<T> gwm(gw->data(), dout, din);
                            gwm.noalias() += gm.transpose() * MapConstMat<T>(x.data().data(), rows, din);
                          }
                          if (gb) {
                            for (i64 o = 0; o < dout; ++o) (*gb)[o] += gm.col(o).sum();
                          }
                        });
}

namespace {

template <typename T>
i64 broadcast_extent(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  require(sb.size() <= sa.size(), std::string(op) + ": cannot broadcast " + to_string(sb) + " onto " + to_string(sa));
  for (std::size_t i = 0; i < sb.size(); ++i) {
    require(sb[sb.size() - 1 - i] == sa[sa.size() - 1 - i],
            std::string(op) + ": cannot broadcast " + to_string(sb) + " onto " + to_string(sa));
  }
  return b.numel();
}

template <typename T>
Tensor<T> add_scaled(const Tensor<T>& a, const Tensor<T>& b, T sign, const char* op) {
  const i64 nb = broadcast_extent(a, b, op);
  const auto av = a.data();
  const auto bv = b.data();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + sign * bv[i % nb];
  return make_result<T>(op, a.shape(), std::move(out), {a, b}, [a, b, nb, sign](const std::vector<T>& gy) {
    if (auto* ga = grad_of(a)) {
      for (std::size_t i = 0; i < gy.size(); ++i) (*ga)[i] += gy[i];
    }
    if (auto* gb = grad_of(b)) {
      for (std::size_t i = 0; i < gy.size(); ++i) (*gb)[i % nb] += sign * gy[i];
    }
  });
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return add_scaled(a, b, T(1), "add");
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return add_scaled(a, b, T(-1), "sub");
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(), "mul: shapes differ, " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  const auto av = a.data();
  const auto bv = b.data();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
  return make_result<T>("mul", a.shape(), std::move(out), {a, b}, [a, b](const std::vector<T>& gy) {
    if (auto* ga = grad_of(a)) {
      const auto bv = b.data();
      for (std::size_t i = 0; i < gy.size(); ++i) (*ga)[i] += gy[i] * bv[i];
    }
    if (auto* gb = grad_of(b)) {
      const auto av = a.data();
      for (std::size_t i = 0; i < gy.size(); ++i) (*gb)[i] += gy[i] * av[i];
    }
  });
}

template <typename T>
Tensor<T> scalar_mul(const Tensor<T>& x, double s) {
  const auto v = x.data();
  std::vector<T> out(v.size());
  const T st = static_cast<T>(s);
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] * st;
  return make_result<T>("scalar_mul", x.shape(), std::move(out), {x}, [x, st](const std::vector<T>& gy) {
    auto* g = grad_of(x);
    if (!g) return;
    for (std::size_t i = 0; i < gy.size(); ++i) (*g)[i] += gy[i] * st;
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  double s = 0.0;
  for (auto v : x.data()) s += v;
  return make_result<T>("sum", {}, {static_cast<T>(s)}, {x}, [x](const std::vector<T>& gy) {
    auto* g = grad_of(x);
    if (!g) return;
    for (auto& v : *g) v += gy[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  double s = 0.0;
  for (auto v : x.data()) s += v;
  const double n = static_cast<double>(x.numel());
  return make_result<T>("mean", {}, {static_cast<T>(s / n)}, {x}, [x, n](const std::vector<T>& gy) {
    auto* g = grad_of(x);
    if (!g) return;
    const T d = static_cast<T>(gy[0] / n);
    for (auto& v : *g) v += d;
  });
}

#define HYDET_INSTANTIATE_OPS(T)                                                                    \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const std::optional<Tensor<T>>&, int, \
                            int);                                                                    \
  template Tensor<T> batchnorm2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,               \
                                 BatchNormState<T>&, NormMode);                                      \
  template Tensor<T> layernorm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, double);        \
  template Tensor<T> silu(const Tensor<T>&);                                                         \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                      \
  template Tensor<T> softmax(const Tensor<T>&);                                                      \
  template Tensor<T> maxpool2d(const Tensor<T>&, int, int, int);                                     \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, int);                                     \
  template Tensor<T> strided_slice(const Tensor<T>&, int, i64, i64, i64);                            \
  template Tensor<T> upsample_nearest2x(const Tensor<T>&);                                           \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                               \
  template Tensor<T> permute(const Tensor<T>&, const std::vector<int>&);                             \
  template Tensor<T> space_to_depth(const Tensor<T>&, bool);                                         \
  template Tensor<T> depth_to_space(const Tensor<T>&, i64, i64);                                     \
  template Tensor<T> gather_rows(const Tensor<T>&, const std::vector<i64>&);                         \
  template Tensor<T> gather_locations(const Tensor<T>&, const std::vector<i64>&);                    \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                     \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const std::optional<Tensor<T>>&);    \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                        \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                        \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                        \
  template Tensor<T> scalar_mul(const Tensor<T>&, double);                                           \
  template Tensor<T> sum(const Tensor<T>&);                                                          \
  template Tensor<T> mean(const Tensor<T>&);

HYDET_INSTANTIATE_OPS(float)
HYDET_INSTANTIATE_OPS(double)

}  // namespace hydet
