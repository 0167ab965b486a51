#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "hydet/ops.hpp"
#include "hydet/rng.hpp"

namespace hydet {

enum class ParamKind { weight, bias, norm };

template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
  ParamKind kind;
};

/// Non-trainable state (batch-norm running statistics).
template <typename T>
struct NamedBuffer {
  std::string name;
  std::vector<T>* data;
};

template <typename T>
struct ParamSet {
  std::vector<NamedParam<T>> params;
  std::vector<NamedBuffer<T>> buffers;

  std::vector<Tensor<T>> tensors() const;
  std::int64_t count() const;
};

/// One row of the analytic layer profile: shape propagation plus closed-form
/// parameter and FLOP counts (1 multiply-add = 2 FLOPs; bias adds count 1).
struct LayerRow {
  std::string name;
  std::string kind;
  Shape output;
  std::int64_t params = 0;
  std::int64_t flops = 0;
};

class Profiler {
 public:
  void add(LayerRow row) { rows_.push_back(std::move(row)); }
  const std::vector<LayerRow>& rows() const { return rows_; }
  std::int64_t total_params() const;
  std::int64_t total_flops() const;

 private:
  std::vector<LayerRow> rows_;
};

/// Deterministic parameter initialization.
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}
  /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
  template <typename T>
  Tensor<T> fan_in_uniform(Shape shape, std::int64_t fan_in);
  Rng& rng() { return rng_; }

 private:
  Rng rng_;
};

// ---------------------------------------------------------------------------

template <typename T>
class Conv2dLayer {
 public:
  Conv2dLayer() = default;
  Conv2dLayer(int in_channels, int out_channels, int kernel, int stride, bool with_bias, Initializer& init);

  Tensor<T> forward(const Tensor<T>& x) const;
  void collect(const std::string& prefix, ParamSet<T>& out);
  Shape profile(const Shape& in, Profiler& prof, const std::string& name) const;

  Tensor<T> weight;
  std::optional<Tensor<T>> bias;
  int in_channels = 0, out_channels = 0, kernel = 1, stride = 1, padding = 0;
};

/// conv2d (no bias) -> batchnorm2d -> silu.
template <typename T>
class ConvMod {
 public:
  ConvMod() = default;
  ConvMod(int in_channels, int out_channels, int kernel, int stride, Initializer& init);

  Tensor<T> forward(const Tensor<T>& x, NormMode mode);
  void collect(const std::string& prefix, ParamSet<T>& out);
  Shape profile(const Shape& in, Profiler& prof, const std::string& name) const;

  Conv2dLayer<T> conv;
  Tensor<T> gamma, beta;
  BatchNormState<T> stats;
};

/// Space-to-depth (4C channels at half resolution) followed by a 3x3
/// ConvMod; the default projection doubles the input channels.
template <typename T>
class Focus {
 public:
  Focus() = default;
  Focus(int in_channels, int out_channels, Initializer& init);

  Tensor<T> forward(const Tensor<T>& x, NormMode mode);
  void collect(const std::string& prefix, ParamSet<T>& out);
  Shape profile(const Shape& in, Profiler& prof, const std::string& name) const;

  ConvMod<T> conv;
};

/// Channel mixer at the head of each CSP bottleneck. When the expected
/// feature extent is even and larger than 2 it mixes every 2x2 neighbourhood:
/// space_to_depth -> 1x1 ConvMod (4C -> 4E) -> depth_to_space. Otherwise it
/// is a plain 1x1 ConvMod (C -> E). The mode is fixed at construction.
template <typename T>
class FocusMix {
 public:
  FocusMix() = default;
  FocusMix(int in_channels, int out_channels, int expected_extent, Initializer& init);

  Tensor<T> forward(const Tensor<T>& x, NormMode mode);
  void collect(const std::string& prefix, ParamSet<T>& out);
  Shape profile(const Shape& in, Profiler& prof, const std::string& name) const;
  bool uses_space_to_depth() const { return space_to_depth_; }

  ConvMod<T> conv;
  bool space_to_depth_ = false;
};

template <typename T>
class Bottleneck {
 public:
  Bottleneck() = default;
  Bottleneck(int channels, bool shortcut, int expected_extent, Initializer& init);

  Tensor<T> forward(const Tensor<T>& x, NormMode mode);
  void collect(const std::string& prefix, ParamSet<T>& out);
  Shape profile(const Shape& in, Profiler& prof, const std::string& name) const;

  FocusMix<T> mix;
  ConvMod<T> conv;
  bool shortcut = true;
};

/// Cross-stage-partial block: 1x1 projection split into two halves, one half
/// through n bottlenecks, halves concatenated and fused by a 1x1 ConvMod.
template <typename T>
class CSPLayer {
 public:
  CSPLayer() = default;
  CSPLayer(int in_channels, int out_channels, int n_bottlenecks, bool shortcut, int expected_extent,
           Initializer& init);

  Tensor<T> forward(const Tensor<T>& x, NormMode mode);
  void collect(const std::string& prefix, ParamSet<T>& out);
  Shape profile(const Shape& in, Profiler& prof, const std::string& name) const;

  ConvMod<T> project;
  std::vector<Bottleneck<T>> bottlenecks;
  ConvMod<T> fuse;
  int out_channels = 0;
};

/// concat(x, maxpool5, maxpool9, maxpool13) on channels, then a 1x1 ConvMod.
template <typename T>
class SPP {
 public:
  SPP() = default;
  SPP(int channels, std::vector<int> pool_kernels, Initializer& init);

  /// The 4C-channel tensor before the fuse convolution.
  Tensor<T> pooled(const Tensor<T>& x) const;
  Tensor<T> forward(const Tensor<T>& x, NormMode mode);
  void collect(const std::string& prefix, ParamSet<T>& out);
  Shape profile(const Shape& in, Profiler& prof, const std::string& name) const;

  std::vector<int> kernels;
  ConvMod<T> fuse;
};

template <typename T>
struct AttentionParams {
  int embed_dim = 0;
  int num_heads = 1;
  double mlp_ratio = 2.0;
  Tensor<T> norm1_gamma, norm1_beta;
  Tensor<T> qkv_weight, qkv_bias;  // [3D, D], [3D]
  Tensor<T> out_weight, out_bias;  // [D, D], [D]
  Tensor<T> norm2_gamma, norm2_beta;
  Tensor<T> fc1_weight, fc1_bias;  // [hidden, D]
  Tensor<T> fc2_weight, fc2_bias;  // [D, hidden]

  int hidden() const;
  static AttentionParams create(int embed_dim, int num_heads, double mlp_ratio, Initializer& init);
};

/// Pre-norm encoder layer over tokens [B,N,D]:
///   y = x + MHSA(layernorm(x));  out = y + MLP(layernorm(y))
/// with scaled dot-product attention (scale 1/sqrt(D/heads)) and a SiLU MLP.
/// No positional encoding.
template <typename T>
Tensor<T> transformer_encoder(const Tensor<T>& tokens, const AttentionParams<T>& params);

/// Attention probabilities [B, heads, N, N] of the first sub-layer.
template <typename T>
Tensor<T> attention_weights(const Tensor<T>& tokens, const AttentionParams<T>& params);

template <typename T>
void collect_attention(AttentionParams<T>& p, const std::string& prefix, ParamSet<T>& out);

template <typename T>
Shape profile_attention(const AttentionParams<T>& p, const Shape& tokens, Profiler& prof,
                        const std::string& name);

/// SPP followed by one transformer encoder over the H*W spatial tokens.
template <typename T>
class SPPT {
 public:
  SPPT() = default;
  SPPT(int channels, int num_heads, double mlp_ratio, Initializer& init);

  Tensor<T> forward(const Tensor<T>& x, NormMode mode);
  void collect(const std::string& prefix, ParamSet<T>& out);
  Shape profile(const Shape& in, Profiler& prof, const std::string& name) const;

  SPP<T> spp;
  AttentionParams<T> attention;
};

template <typename T>
struct HeadOutputs {
  std::vector<Tensor<T>> cls;  // [B, num_classes, H, W] per scale
  std::vector<Tensor<T>> reg;  // [B, 4*reg_bins, H, W] per scale
  std::vector<int> strides;
};

/// Decoupled anchor-free head: per scale a classification stack and a
/// regression stack (two 3x3 ConvMods and a 1x1 conv each). No objectness.
template <typename T>
class DetectHead {
 public:
  DetectHead() = default;
  DetectHead(std::vector<int> in_channels, std::vector<int> strides, int num_classes, int reg_bins,
             int reg_channels, int cls_channels, int input_size, Initializer& init);

  HeadOutputs<T> forward(const std::vector<Tensor<T>>& features, NormMode mode);
  void collect(const std::string& prefix, ParamSet<T>& out);
  void profile(const std::vector<Shape>& in, Profiler& prof, const std::string& name) const;

  struct Branch {
    ConvMod<T> conv1, conv2;
    Conv2dLayer<T> pred;
  };
  std::vector<Branch> reg_branches, cls_branches;
  std::vector<int> strides;
  int num_classes = 0, reg_bins = 0;
};

}  // namespace hydet
