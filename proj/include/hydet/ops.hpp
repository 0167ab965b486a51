#pragma once

#include <optional>
#include <vector>

#include "hydet/tensor.hpp"

namespace hydet {

// ---------------------------------------------------------------------------
// Convolution and normalization
// ---------------------------------------------------------------------------

/// 2-D cross-correlation. input [B,Cin,H,W], weight [Cout,Cin,k,k],
/// optional bias [Cout]; output [B,Cout,Hout,Wout] with
/// Hout = (H + 2*padding - k) / stride + 1.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight,
                 const std::optional<Tensor<T>>& bias, int stride, int padding);

/// Running statistics owned by a batch-norm layer. Updated in train mode only.
template <typename T>
struct BatchNormState {
  std::vector<T> running_mean;
  std::vector<T> running_var;
  double momentum = 0.03;
  double eps = 1e-5;

  explicit BatchNormState(std::size_t channels = 0)
      : running_mean(channels, T(0)), running_var(channels, T(1)) {}
};

enum class NormMode { train, eval };

/// Per-channel normalization over (B,H,W). Train mode uses biased batch
/// variance and updates running stats with momentum (running var uses the
/// unbiased estimate); eval mode uses the running stats.
template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                      BatchNormState<T>& state, NormMode mode);

/// Normalization over the last axis with affine gamma/beta of that extent.
template <typename T>
Tensor<T> layernorm(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                    double eps = 1e-5);

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> silu(const Tensor<T>& x);
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);
/// Softmax over the last axis.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x);

// ---------------------------------------------------------------------------
// Shape and rearrangement ops
// ---------------------------------------------------------------------------

/// Max pooling with -inf padding. Backward routes to the first row-major argmax.
template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& x, int kernel, int stride, int padding);

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis);

/// Elements start, start+step, ... < stop along one axis.
template <typename T>
Tensor<T> strided_slice(const Tensor<T>& x, int axis, std::int64_t start, std::int64_t stop,
                        std::int64_t step = 1);

template <typename T>
Tensor<T> upsample_nearest2x(const Tensor<T>& x);

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);

/// General axis permutation: output axis i is input axis perm[i].
template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<int>& perm);

/// Space-to-depth on [B,C,H,W]: the four stride-2 sub-grids in the order
/// (even,even), (even,odd), (odd,even), (odd,odd) stacked on channels,
/// giving [B,4C,H/2,W/2]. With pad_odd, odd extents are zero-padded at the
/// bottom/right; otherwise odd extents are rejected.
template <typename T>
Tensor<T> space_to_depth(const Tensor<T>& x, bool pad_odd = false);

/// Exact inverse of space_to_depth; out_h/out_w crop away any odd padding.
template <typename T>
Tensor<T> depth_to_space(const Tensor<T>& x, std::int64_t out_h, std::int64_t out_w);

/// Rows of x (first axis) selected by index; backward scatter-adds.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, const std::vector<std::int64_t>& rows);

/// Channel vectors of x[B,C,H,W] at flat locations b*H*W + y*W + x,
/// returned as [P,C]; backward scatter-adds.
template <typename T>
Tensor<T> gather_locations(const Tensor<T>& x, const std::vector<std::int64_t>& locations);

// ---------------------------------------------------------------------------
// Dense ops
// ---------------------------------------------------------------------------

/// Batched matrix product a[...,M,K] x b[...,K,N]. A rank-2 b is broadcast
/// across the batch axes of a.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

/// x[...,Din] * weight[Dout,Din]^T + bias[Dout].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const std::optional<Tensor<T>>& bias);

/// Elementwise sum. b must have a's shape or a trailing suffix of it.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
/// Elementwise product of equally shaped tensors.
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scalar_mul(const Tensor<T>& x, double s);
template <typename T>
Tensor<T> sum(const Tensor<T>& x);
template <typename T>
Tensor<T> mean(const Tensor<T>& x);

}  // namespace hydet
