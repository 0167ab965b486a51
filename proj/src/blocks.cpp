#include "hydet/blocks.hpp"

#include <cmath>

namespace hydet {

using i64 = std::int64_t;

template <typename T>
std::vector<Tensor<T>> ParamSet<T>::tensors() const {
  std::vector<Tensor<T>> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back(p.tensor);
  return out;
}

template <typename T>
i64 ParamSet<T>::count() const {
  i64 n = 0;
  for (const auto& p : params) n += p.tensor.numel();
  return n;
}

i64 Profiler::total_params() const {
  i64 n = 0;
  for (const auto& r : rows_) n += r.params;
  return n;
}

i64 Profiler::total_flops() const {
  i64 n = 0;
  for (const auto& r : rows_) n += r.flops;
  return n;
}

template <typename T>
Tensor<T> Initializer::fan_in_uniform(Shape shape, i64 fan_in) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<T> data(static_cast<std::size_t>(numel(shape)));
  for (auto& v : data) v = static_cast<T>(rng_.uniform(-bound, bound));
  return Tensor<T>::from_data(std::move(shape), std::move(data), true);
}

namespace {

template <typename T>
Tensor<T> ones_param(i64 n) {
  return Tensor<T>::full({n}, T(1), true);
}

template <typename T>
Tensor<T> zeros_param(i64 n) {
  return Tensor<T>::zeros({n}, true);
}

std::string join(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

}  // namespace

// ---------------------------------------------------------------------------

template <typename T>
Conv2dLayer<T>::Conv2dLayer(int cin, int cout, int k, int s, bool with_bias, Initializer& init)
    : in_channels(cin), out_channels(cout), kernel(k), stride(s), padding(k / 2) {
  if (cin <= 0 || cout <= 0 || k <= 0 || s <= 0) throw ConfigError("conv layer: non-positive size");
  const i64 fan_in = static_cast<i64>(cin) * k * k;
  weight = init.fan_in_uniform<T>({cout, cin, k, k}, fan_in);
  if (with_bias) bias = init.fan_in_uniform<T>({cout}, fan_in);
}

template <typename T>
Tensor<T> Conv2dLayer<T>::forward(const Tensor<T>& x) const {
  return conv2d(x, weight, bias, stride, padding);
}

template <typename T>
void Conv2dLayer<T>::collect(const std::string& prefix, ParamSet<T>& out) {
  out.params.push_back({join(prefix, "weight"), weight, ParamKind::weight});
  if (bias) out.params.push_back({join(prefix, "bias"), *bias, ParamKind::bias});
}

template <typename T>
Shape Conv2dLayer<T>::profile(const Shape& in, Profiler& prof, const std::string& name) const {
  if (in.size() != 4 || in[1] != in_channels) {
    throw ShapeError(name + ": expected " + std::to_string(in_channels) + " input channels, got " + to_string(in));
  }
  const i64 ho = (in[2] + 2 * padding - kernel) / stride + 1;
  const i64 wo = (in[3] + 2 * padding - kernel) / stride + 1;
  Shape out{in[0], out_channels, ho, wo};
  const i64 positions = in[0] * ho * wo;
  LayerRow row{name, "conv", out, 0, 0};
  row.params = static_cast<i64>(in_channels) * out_channels * kernel * kernel + (bias ? out_channels : 0);
  row.flops = 2LL * kernel * kernel * in_channels * out_channels * positions + (bias ? out_channels * positions : 0);
  prof.add(std::move(row));
  return out;
}

// ---------------------------------------------------------------------------

template <typename T>
ConvMod<T>::ConvMod(int cin, int cout, int k, int s, Initializer& init)
    : conv(cin, cout, k, s, false, init),
      gamma(ones_param<T>(cout)),
      beta(zeros_param<T>(cout)),
      stats(static_cast<std::size_t>(cout)) {}

template <typename T>
Tensor<T> ConvMod<T>::forward(const Tensor<T>& x, NormMode mode) {
  return silu(batchnorm2d(conv.forward(x), gamma, beta, stats, mode));
}

template <typename T>
void ConvMod<T>::collect(const std::string& prefix, ParamSet<T>& out) {
  conv.collect(join(prefix, "conv"), out);
  out.params.push_back({join(prefix, "bn.weight"), gamma, ParamKind::norm});
  out.params.push_back({join(prefix, "bn.bias"), beta, ParamKind::norm});
  out.buffers.push_back({join(prefix, "bn.running_mean"), &stats.running_mean});
  out.buffers.push_back({join(prefix, "bn.running_var"), &stats.running_var});
}

template <typename T>
Shape ConvMod<T>::profile(const Shape& in, Profiler& prof, const std::string& name) const {
  Shape out = conv.profile(in, prof, join(name, "conv"));
  prof.add({join(name, "bn"), "batchnorm", out, 2LL * conv.out_channels, 0});
  return out;
}

// ---------------------------------------------------------------------------

template <typename T>
Focus<T>::Focus(int cin, int cout, Initializer& init) : conv(4 * cin, cout, 3, 1, init) {}

template <typename T>
Tensor<T> Focus<T>::forward(const Tensor<T>& x, NormMode mode) {
  return conv.forward(space_to_depth(x), mode);
}

template <typename T>
void Focus<T>::collect(const std::string& prefix, ParamSet<T>& out) {
  conv.collect(join(prefix, "conv"), out);
}

template <typename T>
Shape Focus<T>::profile(const Shape& in, Profiler& prof, const std::string& name) const {
  if (in.size() != 4 || in[2] % 2 || in[3] % 2) throw ShapeError(name + ": focus needs even extents");
  return conv.profile({in[0], 4 * in[1], in[2] / 2, in[3] / 2}, prof, join(name, "conv"));
}

// ---------------------------------------------------------------------------

template <typename T>
FocusMix<T>::FocusMix(int cin, int cout, int extent, Initializer& init)
    : space_to_depth_(extent % 2 == 0 && extent > 2) {
  conv = space_to_depth_ ? ConvMod<T>(4 * cin, 4 * cout, 1, 1, init) : ConvMod<T>(cin, cout, 1, 1, init);
}

template <typename T>
Tensor<T> FocusMix<T>::forward(const Tensor<T>& x, NormMode mode) {
  if (!space_to_depth_) return conv.forward(x, mode);
  const i64 h = x.dim(2), w = x.dim(3);
  return depth_to_space(conv.forward(space_to_depth(x, true), mode), h, w);
}

template <typename T>
void FocusMix<T>::collect(const std::string& prefix, ParamSet<T>& out) {
  conv.collect(join(prefix, "conv"), out);
}

template <typename T>
Shape FocusMix<T>::profile(const Shape& in, Profiler& prof, const std::string& name) const {
  if (!space_to_depth_) return conv.profile(in, prof, join(name, "conv"));
  const Shape packed{in[0], 4 * in[1], (in[2] + 1) / 2, (in[3] + 1) / 2};
  const Shape mixed = conv.profile(packed, prof, join(name, "conv"));
  return {in[0], mixed[1] / 4, in[2], in[3]};
}

// ---------------------------------------------------------------------------

template <typename T>
Bottleneck<T>::Bottleneck(int channels, bool sc, int extent, Initializer& init)
    : mix(channels, std::max(1, channels / 2), extent, init),
      conv(std::max(1, channels / 2), channels, 3, 1, init),
      shortcut(sc) {}

template <typename T>
Tensor<T> Bottleneck<T>::forward(const Tensor<T>& x, NormMode mode) {
  auto y = conv.forward(mix.forward(x, mode), mode);
  return shortcut ? add(x, y) : y;
}

template <typename T>
void Bottleneck<T>::collect(const std::string& prefix, ParamSet<T>& out) {
  mix.collect(join(prefix, "mix"), out);
  conv.collect(join(prefix, "cv"), out);
}

template <typename T>
Shape Bottleneck<T>::profile(const Shape& in, Profiler& prof, const std::string& name) const {
  return conv.profile(mix.profile(in, prof, join(name, "mix")), prof, join(name, "cv"));
}

// ---------------------------------------------------------------------------

template <typename T>
CSPLayer<T>::CSPLayer(int cin, int cout, int n, bool shortcut, int extent, Initializer& init)
    : out_channels(cout) {
  if (cout % 2 != 0) throw ConfigError("csplayer: out_channels must be even, got " + std::to_string(cout));
  if (n < 1) throw ConfigError("csplayer: at least one bottleneck required");
  project = ConvMod<T>(cin, cout, 1, 1, init);
  for (int i = 0; i < n; ++i) bottlenecks.emplace_back(cout / 2, shortcut, extent, init);
  fuse = ConvMod<T>(cout, cout, 1, 1, init);
}

template <typename T>
Tensor<T> CSPLayer<T>::forward(const Tensor<T>& x, NormMode mode) {
  auto p = project.forward(x, mode);
  const i64 half = out_channels / 2;
  auto bypass = strided_slice(p, 1, 0, half);
  auto path = strided_slice(p, 1, half, 2 * half);
  for (auto& b : bottlenecks) path = b.forward(path, mode);
  return fuse.forward(concat<T>({bypass, path}, 1), mode);
}

template <typename T>
void CSPLayer<T>::collect(const std::string& prefix, ParamSet<T>& out) {
  project.collect(join(prefix, "cv1"), out);
  for (std::size_t i = 0; i < bottlenecks.size(); ++i) {
    bottlenecks[i].collect(join(prefix, "m" + std::to_string(i)), out);
  }
  fuse.collect(join(prefix, "cv2"), out);
}

template <typename T>
Shape CSPLayer<T>::profile(const Shape& in, Profiler& prof, const std::string& name) const {
  Shape p = project.profile(in, prof, join(name, "cv1"));
  Shape path{p[0], p[1] / 2, p[2], p[3]};
  for (std::size_t i = 0; i < bottlenecks.size(); ++i) {
    path = bottlenecks[i].profile(path, prof, join(name, "m" + std::to_string(i)));
  }
  return fuse.profile({p[0], p[1] / 2 + path[1], p[2], p[3]}, prof, join(name, "cv2"));
}

// ---------------------------------------------------------------------------

template <typename T>
SPP<T>::SPP(int channels, std::vector<int> pool_kernels, Initializer& init)
    : kernels(std::move(pool_kernels)),
      fuse(channels * static_cast<int>(kernels.size() + 1), channels, 1, 1, init) {
  for (int k : kernels) {
    if (k < 1 || k % 2 == 0) throw ConfigError("spp: pool kernels must be odd and positive");
  }
}

template <typename T>
Tensor<T> SPP<T>::pooled(const Tensor<T>& x) const {
  std::vector<Tensor<T>> parts{x};
  for (int k : kernels) parts.push_back(maxpool2d(x, k, 1, k / 2));
  return concat(parts, 1);
}

template <typename T>
Tensor<T> SPP<T>::forward(const Tensor<T>& x, NormMode mode) {
  return fuse.forward(pooled(x), mode);
}

template <typename T>
void SPP<T>::collect(const std::string& prefix, ParamSet<T>& out) {
  fuse.collect(join(prefix, "cv"), out);
}

template <typename T>
Shape SPP<T>::profile(const Shape& in, Profiler& prof, const std::string& name) const {
  const Shape pooled_shape{in[0], in[1] * static_cast<i64>(kernels.size() + 1), in[2], in[3]};
  prof.add({join(name, "pool"), "maxpool", pooled_shape, 0, 0});
  return fuse.profile(pooled_shape, prof, join(name, "cv"));
}

// ---------------------------------------------------------------------------

template <typename T>
int AttentionParams<T>::hidden() const {
  return static_cast<int>(std::lround(embed_dim * mlp_ratio));
}

template <typename T>
AttentionParams<T> AttentionParams<T>::create(int d, int heads, double ratio, Initializer& init) {
  if (d <= 0 || heads <= 0 || d % heads != 0) {
    throw ConfigError("attention: embed_dim " + std::to_string(d) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
  if (!(ratio > 0.0)) throw ConfigError("attention: mlp_ratio must be positive");
  AttentionParams p;
  p.embed_dim = d;
  p.num_heads = heads;
  p.mlp_ratio = ratio;
  const int hid = p.hidden();
  p.norm1_gamma = ones_param<T>(d);
  p.norm1_beta = zeros_param<T>(d);
  p.qkv_weight = init.fan_in_uniform<T>({3 * d, d}, d);
  p.qkv_bias = init.fan_in_uniform<T>({3 * d}, d);
  p.out_weight = init.fan_in_uniform<T>({d, d}, d);
  p.out_bias = init.fan_in_uniform<T>({d}, d);
  p.norm2_gamma = ones_param<T>(d);
  p.norm2_beta = zeros_param<T>(d);
  p.fc1_weight = init.fan_in_uniform<T>({hid, d}, d);
  p.fc1_bias = init.fan_in_uniform<T>({hid}, d);
  p.fc2_weight = init.fan_in_uniform<T>({d, hid}, hid);
  p.fc2_bias = init.fan_in_uniform<T>({d}, hid);
  return p;
}

namespace {

// q, k, v as [B*heads, N, dh].
template <typename T>
std::array<Tensor<T>, 3> split_heads(const Tensor<T>& normed, const AttentionParams<T>& p) {
  const i64 B = normed.dim(0), N = normed.dim(1), D = p.embed_dim, H = p.num_heads, dh = D / H;
  auto qkv = linear(normed, p.qkv_weight, std::optional<Tensor<T>>(p.qkv_bias));
  qkv = permute(reshape(qkv, {B, N, 3, H, dh}), {2, 0, 3, 1, 4});
  std::array<Tensor<T>, 3> out;
  for (int i = 0; i < 3; ++i) out[i] = reshape(strided_slice(qkv, 0, i, i + 1), {B * H, N, dh});
  return out;
}

template <typename T>
void check_tokens(const Tensor<T>& tokens, const AttentionParams<T>& p) {
  if (tokens.ndim() != 3 || tokens.dim(2) != p.embed_dim) {
    throw ShapeError("transformer_encoder: tokens must be [B,N," + std::to_string(p.embed_dim) + "], got " +
                     to_string(tokens.shape()));
  }
}

}  // namespace

template <typename T>
Tensor<T> attention_weights(const Tensor<T>& tokens, const AttentionParams<T>& p) {
  check_tokens(tokens, p);
  const i64 B = tokens.dim(0), N = tokens.dim(1), H = p.num_heads, dh = p.embed_dim / H;
  auto [q, k, v] = split_heads(layernorm(tokens, p.norm1_gamma, p.norm1_beta), p);
  auto scores = scalar_mul(matmul(q, permute(k, {0, 2, 1})), 1.0 / std::sqrt(static_cast<double>(dh)));
  return reshape(softmax(scores), {B, H, N, N});
}

template <typename T>
Tensor<T> transformer_encoder(const Tensor<T>& tokens, const AttentionParams<T>& p) {
  check_tokens(tokens, p);
  const i64 B = tokens.dim(0), N = tokens.dim(1), D = p.embed_dim, H = p.num_heads, dh = D / H;
  auto [q, k, v] = split_heads(layernorm(tokens, p.norm1_gamma, p.norm1_beta), p);
  auto scores = scalar_mul(matmul(q, permute(k, {0, 2, 1})), 1.0 / std::sqrt(static_cast<double>(dh)));
  auto context = matmul(softmax(scores), v);  // [B*H, N, dh]
  context = reshape(permute(reshape(context, {B, H, N, dh}), {0, 2, 1, 3}), {B, N, D});
  auto y = add(tokens, linear(context, p.out_weight, std::optional<Tensor<T>>(p.out_bias)));
  auto hidden = silu(linear(layernorm(y, p.norm2_gamma, p.norm2_beta), p.fc1_weight,
                            std::optional<Tensor<T>>(p.fc1_bias)));
  return add(y, linear(hidden, p.fc2_weight, std::optional<Tensor<T>>(p.fc2_bias)));
}

template <typename T>
void collect_attention(AttentionParams<T>& p, const std::string& prefix, ParamSet<T>& out) {
  out.params.push_back({join(prefix, "norm1.weight"), p.norm1_gamma, ParamKind::norm});
  out.params.push_back({join(prefix, "norm1.bias"), p.norm1_beta, ParamKind::norm});
  out.params.push_back({join(prefix, "qkv.weight"), p.qkv_weight, ParamKind::weight});
  out.params.push_back({join(prefix, "qkv.bias"), p.qkv_bias, ParamKind::bias});
  out.params.push_back({join(prefix, "proj.weight"), p.out_weight, ParamKind::weight});
  out.params.push_back({join(prefix, "proj.bias"), p.out_bias, ParamKind::bias});
  out.params.push_back({join(prefix, "norm2.weight"), p.norm2_gamma, ParamKind::norm});
  out.params.push_back({join(prefix, "norm2.bias"), p.norm2_beta, ParamKind::norm});
  out.params.push_back({join(prefix, "fc1.weight"), p.fc1_weight, ParamKind::weight});
  out.params.push_back({join(prefix, "fc1.bias"), p.fc1_bias, ParamKind::bias});
  out.params.push_back({join(prefix, "fc2.weight"), p.fc2_weight, ParamKind::weight});
  out.params.push_back({join(prefix, "fc2.bias"), p.fc2_bias, ParamKind::bias});
}

template <typename T>
Shape profile_attention(const AttentionParams<T>& p, const Shape& tokens, Profiler& prof, const std::string& name) {
  const i64 B = tokens[0], N = tokens[1], D = p.embed_dim, hid = p.hidden();
  auto linear_row = [&](const std::string& n, i64 din, i64 dout) {
    prof.add({join(name, n), "linear", {B, N, dout}, din * dout + dout, B * (2 * N * din * dout + N * dout)});
  };
  prof.add({join(name, "norm1"), "layernorm", tokens, 2 * D, 0});
  linear_row("qkv", D, 3 * D);
  prof.add({join(name, "attn.qk"), "matmul", {B, p.num_heads, N, N}, 0, B * 2 * N * N * D});
  prof.add({join(name, "attn.av"), "matmul", {B, N, D}, 0, B * 2 * N * N * D});
  linear_row("proj", D, D);
  prof.add({join(name, "norm2"), "layernorm", tokens, 2 * D, 0});
  linear_row("fc1", D, hid);
  linear_row("fc2", hid, D);
  return tokens;
}

// ---------------------------------------------------------------------------

template <typename T>
SPPT<T>::SPPT(int channels, int num_heads, double mlp_ratio, Initializer& init)
    : spp(channels, {5, 9, 13}, init),
      attention(AttentionParams<T>::create(channels, num_heads, mlp_ratio, init)) {}

template <typename T>
Tensor<T> SPPT<T>::forward(const Tensor<T>& x, NormMode mode) {
  auto s = spp.forward(x, mode);
  const i64 B = s.dim(0), C = s.dim(1), H = s.dim(2), W = s.dim(3);
  auto tokens = permute(reshape(s, {B, C, H * W}), {0, 2, 1});
  auto encoded = transformer_encoder(tokens, attention);
  return reshape(permute(encoded, {0, 2, 1}), {B, C, H, W});
}

template <typename T>
void SPPT<T>::collect(const std::string& prefix, ParamSet<T>& out) {
  spp.collect(join(prefix, "spp"), out);
  collect_attention(attention, join(prefix, "encoder"), out);
}

template <typename T>
Shape SPPT<T>::profile(const Shape& in, Profiler& prof, const std::string& name) const {
  const Shape s = spp.profile(in, prof, join(name, "spp"));
  profile_attention(attention, {s[0], s[2] * s[3], s[1]}, prof, join(name, "encoder"));
  return s;
}

// ---------------------------------------------------------------------------

template <typename T>
DetectHead<T>::DetectHead(std::vector<int> in_channels, std::vector<int> strides_, int nc, int bins,
                          int reg_channels, int cls_channels, int input_size, Initializer& init)
    : strides(std::move(strides_)), num_classes(nc), reg_bins(bins) {
  if (in_channels.size() != strides.size()) throw ConfigError("detect_head: channels/strides mismatch");
  for (std::size_t i = 0; i < in_channels.size(); ++i) {
    Branch reg{ConvMod<T>(in_channels[i], reg_channels, 3, 1, init),
               ConvMod<T>(reg_channels, reg_channels, 3, 1, init),
               Conv2dLayer<T>(reg_channels, 4 * bins, 1, 1, true, init)};
    Branch cls{ConvMod<T>(in_channels[i], cls_channels, 3, 1, init),
               ConvMod<T>(cls_channels, cls_channels, 3, 1, init),
               Conv2dLayer<T>(cls_channels, nc, 1, 1, true, init)};
    // Box logits start flat; class logits start at a low prior so the
    // summed background BCE does not swamp early training.
    for (auto& v : reg.pred.bias->mutable_data()) v = T(1);
    const double cells = std::pow(static_cast<double>(input_size) / strides[i], 2.0);
    const double prior = std::log(5.0 / nc / cells);
    for (auto& v : cls.pred.bias->mutable_data()) v = static_cast<T>(prior);
    reg_branches.push_back(std::move(reg));
    cls_branches.push_back(std::move(cls));
  }
}

template <typename T>
HeadOutputs<T> DetectHead<T>::forward(const std::vector<Tensor<T>>& features, NormMode mode) {
  if (features.size() != reg_branches.size()) {
    throw ShapeError("detect_head: expected " + std::to_string(reg_branches.size()) + " scales, got " +
                     std::to_string(features.size()));
  }
  HeadOutputs<T> out;
  out.strides = strides;
  for (std::size_t i = 0; i < features.size(); ++i) {
    auto& r = reg_branches[i];
    auto& c = cls_branches[i];
    out.reg.push_back(r.pred.forward(r.conv2.forward(r.conv1.forward(features[i], mode), mode)));
    out.cls.push_back(c.pred.forward(c.conv2.forward(c.conv1.forward(features[i], mode), mode)));
  }
  return out;
}

template <typename T>
void DetectHead<T>::collect(const std::string& prefix, ParamSet<T>& out) {
  for (std::size_t i = 0; i < reg_branches.size(); ++i) {
    const std::string scale = std::to_string(i);
    reg_branches[i].conv1.collect(join(prefix, "reg" + scale + ".cv1"), out);
    reg_branches[i].conv2.collect(join(prefix, "reg" + scale + ".cv2"), out);
    reg_branches[i].pred.collect(join(prefix, "reg" + scale + ".pred"), out);
    cls_branches[i].conv1.collect(join(prefix, "cls" + scale + ".cv1"), out);
    cls_branches[i].conv2.collect(join(prefix, "cls" + scale + ".cv2"), out);
    cls_branches[i].pred.collect(join(prefix, "cls" + scale + ".pred"), out);
  }
}

template <typename T>
void DetectHead<T>::profile(const std::vector<Shape>& in, Profiler& prof, const std::string& name) const {
  for (std::size_t i = 0; i < in.size(); ++i) {
    const std::string scale = std::to_string(i);
    for (auto* branch : {&reg_branches[i], &cls_branches[i]}) {
      const std::string b = (branch == &reg_branches[i] ? "reg" : "cls") + scale;
      Shape s = branch->conv1.profile(in[i], prof, join(name, b + ".cv1"));
      s = branch->conv2.profile(s, prof, join(name, b + ".cv2"));
      branch->pred.profile(s, prof, join(name, b + ".pred"));
    }
  }
}

#define HYDET_INSTANTIATE_BLOCKS(T)                                                               \
  template struct ParamSet<T>;                                                                    \
  template Tensor<T> Initializer::fan_in_uniform<T>(Shape, i64);                                  \
  template class Conv2dLayer<T>;                                                                  \
  template class ConvMod<T>;                                                                      \
  template class Focus<T>;                                                                        \
  template class FocusMix<T>;                                                                     \
  template class Bottleneck<T>;                                                                   \
  template class CSPLayer<T>;                                                                     \
  template class SPP<T>;                                                                          \
  template struct AttentionParams<T>;                                                             \
  template Tensor<T> transformer_encoder(const Tensor<T>&, const AttentionParams<T>&);            \
  template Tensor<T> attention_weights(const Tensor<T>&, const AttentionParams<T>&);              \
  template void collect_attention(AttentionParams<T>&, const std::string&, ParamSet<T>&);         \
  template Shape profile_attention(const AttentionParams<T>&, const Shape&, Profiler&, const std::string&); \
  template class SPPT<T>;                                                                         \
  template class DetectHead<T>;

HYDET_INSTANTIATE_BLOCKS(float)
HYDET_INSTANTIATE_BLOCKS(double)

}  // namespace hydet
