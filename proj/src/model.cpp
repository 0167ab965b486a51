#include "hydet/model.hpp"

#include <cmath>
#include <sstream>

namespace hydet {

namespace {

std::string join_ints(const std::vector<int>& v) {
  std::ostringstream os;
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}

std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("model config: " + m); };
  if (num_classes < 1) fail("num_classes must be >= 1");
  if (input_size <= 0 || input_size % 32 != 0) fail("input_size must be a positive multiple of 32");
  if (!(width_mult > 0.0) || !(depth_mult > 0.0)) fail("width_mult and depth_mult must be positive");
  if (stage_channels.size() != 4 || stage_depths.size() != 4) fail("exactly four backbone stages required");
  for (int c : stage_channels) {
    if (c <= 0) fail("stage channels must be positive");
  }
  for (int d : stage_depths) {
    if (d <= 0) fail("stage depths must be positive");
  }
  if (neck_depth <= 0) fail("neck_depth must be positive");
  if (head_reg_channels <= 0 || head_cls_channels <= 0) fail("head channels must be positive");
  if (reg_bins < 2) fail("reg_bins must be >= 2");
  if (attn_heads < 1) fail("attn_heads must be >= 1");
  if (!(mlp_ratio > 0.0)) fail("mlp_ratio must be positive");
  if (strides != std::vector<int>{8, 16, 32}) fail("strides must be 8,16,32");
  const int top = scaled_channels(stage_channels[3]);
  if (top % attn_heads != 0) {
    fail("attention heads (" + std::to_string(attn_heads) + ") must divide the top stage width (" +
         std::to_string(top) + ")");
  }
}

int ModelConfig::scaled_channels(int base) const {
  const int c = 2 * static_cast<int>(std::lround(base * width_mult / 2.0));
  return std::max(4, c);
}

int ModelConfig::scaled_depth(int base) const {
  return std::max(1, static_cast<int>(std::ceil(base * depth_mult - 1e-9)));
}

std::vector<int> ModelConfig::channels() const {
  std::vector<int> out;
  for (int c : stage_channels) out.push_back(scaled_channels(c));
  return out;
}

KeyValueConfig ModelConfig::to_kv() const {
  KeyValueConfig kv;
  kv.set("num_classes", std::to_string(num_classes));
  kv.set("input_size", std::to_string(input_size));
  kv.set("width_mult", format_double(width_mult));
  kv.set("depth_mult", format_double(depth_mult));
  kv.set("stage_channels", join_ints(stage_channels));
  kv.set("stage_depths", join_ints(stage_depths));
  kv.set("neck_depth", std::to_string(neck_depth));
  kv.set("head_reg_channels", std::to_string(head_reg_channels));
  kv.set("head_cls_channels", std::to_string(head_cls_channels));
  kv.set("reg_bins", std::to_string(reg_bins));
  kv.set("attn_heads", std::to_string(attn_heads));
  kv.set("mlp_ratio", format_double(mlp_ratio));
  kv.set("strides", join_ints(strides));
  kv.set("init_seed", std::to_string(init_seed));
  return kv;
}

ModelConfig ModelConfig::from_kv(const KeyValueConfig& kv) {
  ModelConfig c;
  c.num_classes = kv.get_int("num_classes", c.num_classes);
  c.input_size = kv.get_int("input_size", c.input_size);
  c.width_mult = kv.get_double("width_mult", c.width_mult);
  c.depth_mult = kv.get_double("depth_mult", c.depth_mult);
  c.stage_channels = kv.get_int_list("stage_channels", c.stage_channels);
  c.stage_depths = kv.get_int_list("stage_depths", c.stage_depths);
  c.neck_depth = kv.get_int("neck_depth", c.neck_depth);
  c.head_reg_channels = kv.get_int("head_reg_channels", c.head_reg_channels);
  c.head_cls_channels = kv.get_int("head_cls_channels", c.head_cls_channels);
  c.reg_bins = kv.get_int("reg_bins", c.reg_bins);
  c.attn_heads = kv.get_int("attn_heads", c.attn_heads);
  c.mlp_ratio = kv.get_double("mlp_ratio", c.mlp_ratio);
  c.strides = kv.get_int_list("strides", c.strides);
  c.init_seed = static_cast<std::uint64_t>(kv.get_int64("init_seed", 0));
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------

template <typename T>
Detector<T>::Detector(const ModelConfig& config) : config_(config) {
  config_.validate();
  Initializer init(mix_seed(config_.init_seed, 0x6879646574ULL));
  const auto ch = config_.channels();
  const int S = config_.input_size;
  const int stem_out = 6;  // Focus doubles the three RGB channels
  stem = Focus<T>(3, stem_out, init);
  int prev = stem_out;
  for (int i = 0; i < 4; ++i) {
    const int extent = S / (4 << i);
    down.emplace_back(prev, ch[i], 3, 2, init);
    stages.emplace_back(ch[i], ch[i], config_.scaled_depth(config_.stage_depths[i]), true, extent, init);
    prev = ch[i];
  }
  sppt = SPPT<T>(ch[3], config_.attn_heads, config_.mlp_ratio, init);
  const int n = config_.scaled_depth(config_.neck_depth);
  td4 = CSPLayer<T>(ch[3] + ch[2], ch[2], n, false, S / 16, init);
  td3 = CSPLayer<T>(ch[2] + ch[1], ch[1], n, false, S / 8, init);
  down3 = ConvMod<T>(ch[1], ch[1], 3, 2, init);
  bu4 = CSPLayer<T>(ch[1] + ch[2], ch[2], n, false, S / 16, init);
  down4 = ConvMod<T>(ch[2], ch[2], 3, 2, init);
  bu5 = CSPLayer<T>(ch[2] + ch[3], ch[3], n, false, S / 32, init);
  head = DetectHead<T>({ch[1], ch[2], ch[3]}, config_.strides, config_.num_classes, config_.reg_bins,
                       config_.scaled_channels(config_.head_reg_channels),
                       config_.scaled_channels(config_.head_cls_channels), S, init);
}

template <typename T>
HeadOutputs<T> Detector<T>::forward(const Tensor<T>& images) {
  if (images.ndim() != 4 || images.dim(1) != 3 || images.dim(2) % 32 != 0 || images.dim(3) % 32 != 0) {
    throw ShapeError("detector input must be [B,3,H,W] with H, W divisible by 32, got " +
                     to_string(images.shape()));
  }
  auto x = stem.forward(images, mode_);
  std::vector<Tensor<T>> feats;
  for (std::size_t i = 0; i < stages.size(); ++i) {
    x = stages[i].forward(down[i].forward(x, mode_), mode_);
    feats.push_back(x);
  }
  auto p3 = feats[1];
  auto p4 = feats[2];
  auto p5 = sppt.forward(feats[3], mode_);
  auto n4 = td4.forward(concat<T>({upsample_nearest2x(p5), p4}, 1), mode_);
  auto o3 = td3.forward(concat<T>({upsample_nearest2x(n4), p3}, 1), mode_);
  auto o4 = bu4.forward(concat<T>({down3.forward(o3, mode_), n4}, 1), mode_);
  auto o5 = bu5.forward(concat<T>({down4.forward(o4, mode_), p5}, 1), mode_);
  return head.forward({o3, o4, o5}, mode_);
}

template <typename T>
ParamSet<T> Detector<T>::parameters() {
  ParamSet<T> ps;
  stem.collect("stem", ps);
  for (std::size_t i = 0; i < stages.size(); ++i) {
    down[i].collect("stage" + std::to_string(i) + ".down", ps);
    stages[i].collect("stage" + std::to_string(i) + ".csp", ps);
  }
  sppt.collect("sppt", ps);
  td4.collect("neck.td4", ps);
  td3.collect("neck.td3", ps);
  down3.collect("neck.down3", ps);
  bu4.collect("neck.bu4", ps);
  down4.collect("neck.down4", ps);
  bu5.collect("neck.bu5", ps);
  head.collect("head", ps);
  return ps;
}

template <typename T>
Profiler Detector<T>::profile(int input_size, int batch) const {
  if (input_size <= 0 || input_size % 32 != 0) throw ShapeError("profile: input size must be a multiple of 32");
  Profiler prof;
  Shape x = stem.profile({batch, 3, input_size, input_size}, prof, "stem");
  std::vector<Shape> feats;
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const std::string name = "stage" + std::to_string(i);
    x = stages[i].profile(down[i].profile(x, prof, name + ".down"), prof, name + ".csp");
    feats.push_back(x);
  }
  const Shape p3 = feats[1], p4 = feats[2];
  const Shape p5 = sppt.profile(feats[3], prof, "sppt");
  auto cat = [](const Shape& a, const Shape& b) { return Shape{a[0], a[1] + b[1], b[2], b[3]}; };
  auto up = [](const Shape& a) { return Shape{a[0], a[1], a[2] * 2, a[3] * 2}; };
  const Shape n4 = td4.profile(cat(up(p5), p4), prof, "neck.td4");
  const Shape o3 = td3.profile(cat(up(n4), p3), prof, "neck.td3");
  const Shape o4 = bu4.profile(cat(down3.profile(o3, prof, "neck.down3"), n4), prof, "neck.bu4");
  const Shape o5 = bu5.profile(cat(down4.profile(o4, prof, "neck.down4"), p5), prof, "neck.bu5");
  head.profile({o3, o4, o5}, prof, "head");
  return prof;
}

template <typename T>
std::int64_t count_params(Detector<T>& model) {
  return model.parameters().count();
}

template <typename T>
std::int64_t count_flops(const Detector<T>& model, int input_size) {
  return model.profile(input_size, 1).total_flops();
}

template <typename From, typename To>
void copy_weights(Detector<From>& src, Detector<To>& dst) {
  if (!(src.config() == dst.config())) throw ConfigError("copy_weights: configs differ");
  auto a = src.parameters();
  auto b = dst.parameters();
  for (std::size_t i = 0; i < a.params.size(); ++i) {
    auto from = a.params[i].tensor.data();
    auto to = b.params[i].tensor.mutable_data();
    for (std::size_t j = 0; j < from.size(); ++j) to[j] = static_cast<To>(from[j]);
  }
  for (std::size_t i = 0; i < a.buffers.size(); ++i) {
    const auto& from = *a.buffers[i].data;
    auto& to = *b.buffers[i].data;
    for (std::size_t j = 0; j < from.size(); ++j) to[j] = static_cast<To>(from[j]);
  }
}

template class Detector<float>;
template class Detector<double>;
template std::int64_t count_params(Detector<float>&);
template std::int64_t count_params(Detector<double>&);
template std::int64_t count_flops(const Detector<float>&, int);
template std::int64_t count_flops(const Detector<double>&, int);
template void copy_weights(Detector<float>&, Detector<double>&);
template void copy_weights(Detector<double>&, Detector<float>&);
template void copy_weights(Detector<float>&, Detector<float>&);

}  // namespace hydet
