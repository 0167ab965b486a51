#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hydet/blocks.hpp"
#include "hydet/config.hpp"

namespace hydet {

/// Declarative network description. Channel and depth entries are base
/// values scaled by width_mult / depth_mult at build time.
struct ModelConfig {
  int num_classes = 32;
  int input_size = 640;
  double width_mult = 0.25;
  double depth_mult = 0.33;
  std::vector<int> stage_channels{64, 256, 512, 1024};  // strides 4, 8, 16, 32
  std::vector<int> stage_depths{3, 6, 6, 3};
  int neck_depth = 3;
  int head_reg_channels = 128;
  int head_cls_channels = 128;
  int reg_bins = 16;
  int attn_heads = 4;
  double mlp_ratio = 2.0;
  std::vector<int> strides{8, 16, 32};
  std::uint64_t init_seed = 0;

  /// Throws ConfigError on any violated invariant.
  void validate() const;

  int scaled_channels(int base) const;
  int scaled_depth(int base) const;
  /// Resolved widths of the four backbone stages.
  std::vector<int> channels() const;

  KeyValueConfig to_kv() const;
  /// Reads recognised keys from `kv`, keeping defaults for the rest.
  static ModelConfig from_kv(const KeyValueConfig& kv);

  bool operator==(const ModelConfig&) const = default;
};

/// The full detector: Focus stem, four ConvMod/CSPLayer stages, SPPT,
/// PAN neck and decoupled head emitting strides 8/16/32.
template <typename T>
class Detector {
 public:
  explicit Detector(const ModelConfig& config);

  /// images [B,3,H,W] with H and W divisible by 32.
  HeadOutputs<T> forward(const Tensor<T>& images);

  void set_mode(NormMode mode) { mode_ = mode; }
  NormMode mode() const { return mode_; }

  /// Named trainable tensors and running-stat buffers, in a fixed order.
  ParamSet<T> parameters();

  /// Analytic per-layer profile at a square input of the given size.
  Profiler profile(int input_size, int batch = 1) const;

  const ModelConfig& config() const { return config_; }

  Focus<T> stem;
  std::vector<ConvMod<T>> down;
  std::vector<CSPLayer<T>> stages;
  SPPT<T> sppt;
  CSPLayer<T> td4, td3, bu4, bu5;
  ConvMod<T> down3, down4;
  DetectHead<T> head;

 private:
  ModelConfig config_;
  NormMode mode_ = NormMode::train;
};

/// Exact number of trainable scalars (running statistics excluded).
template <typename T>
std::int64_t count_params(Detector<T>& model);

/// FLOPs of one forward pass of a single image at `input_size`.
template <typename T>
std::int64_t count_flops(const Detector<T>& model, int input_size);

/// Copies every parameter and buffer value from `src` into `dst`
/// (same config); used to move weights between precisions.
template <typename From, typename To>
void copy_weights(Detector<From>& src, Detector<To>& dst);

}  // namespace hydet
