#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "rmsin/arc.hpp"
#include "rmsin/cim.hpp"
#include "rmsin/iim.hpp"
#include "rmsin/nn/attention.hpp"
#include "rmsin/nn/layers.hpp"
#include "rmsin/tensor/spatial.hpp"

namespace rmsin {

/// Every architectural knob. Stage i has 2^i * stem_channels channels and
/// extent image_size / 2^(i+1).
struct ModelConfig {
  int image_size = 64;
  int stem_channels = 16;
  int vocab_size = 64;
  int text_channels = 32;
  int max_tokens = 12;
  std::vector<int> branch_kernels{1, 3, 5};
  int scales = 3;          // M
  int arc_angles = 4;      // n
  int arc_depth = 3;       // L: decoder levels using ARC, counted from the coarsest
  int decoder_channels = 32;
  int ffn_expansion = 4;
  bool use_iim = true;
  bool use_cim = true;
  bool use_arc = true;
  std::uint64_t seed = 1;

  static constexpr int kStages = 4;

  int stage_channels(int i) const { return stem_channels << i; }  // i = 1..4
  int stage_extent(int i) const { return image_size >> (i + 1); }  // i = 0..4
  /// True when the fusion conv of decoder level (3, 2 or 1) is an ARC.
  bool arc_at(int level) const { return use_arc && level >= kStages - arc_depth; }

  void validate() const {
    auto fail = [](const std::string& m) { throw UsageError("invalid model config: " + m); };
    if (image_size < 32 || image_size % 32) fail("image_size must be a positive multiple of 32");
    if (stem_channels < 1 || text_channels < 1 || decoder_channels < 1) fail("channel counts must be positive");
    if (vocab_size < 2) fail("vocab_size must be at least 2");
    if (max_tokens < 1) fail("max_tokens must be at least 1");
    if (branch_kernels.empty()) fail("branch_kernels must not be empty");
    for (int k : branch_kernels)
      if (k < 1 || k % 2 == 0) fail("branch kernel sizes must be odd");
    if (scales < 1 || scales > 4) fail("scales must be in 1..4");
    if (arc_angles < 1) fail("arc_angles must be at least 1");
    if (arc_depth < 0 || arc_depth > 3) fail("arc_depth must be in 0..3");
    if (ffn_expansion < 1) fail("ffn_expansion must be at least 1");
  }
};

inline std::vector<int> pyramid_channels(const ModelConfig& c) {
  std::vector<int> out;
  for (int i = 1; i <= ModelConfig::kStages; ++i) out.push_back(c.stage_channels(i));
  return out;
}

/// Closed-form per-sample shapes of every traced intermediate.
inline std::map<std::string, Shape> shape_ledger(const ModelConfig& c) {
  std::map<std::string, Shape> s;
  const int h = c.image_size;
  s["text"] = {c.max_tokens, c.text_channels};
  s["fe0"] = {c.stem_channels, c.stage_extent(0), c.stage_extent(0)};
  int sum = 0;
  for (int i = 1; i <= 4; ++i) {
    const std::string k = std::to_string(i);
    s["fe" + k] = {c.stage_channels(i), c.stage_extent(i), c.stage_extent(i)};
    s["fo" + k] = s["fe" + k];
    sum += c.stage_channels(i);
  }
  if (c.use_cim) {
    const int e = c.stage_extent(4);
    s["combined"] = {sum, e, e};
    int len = 0;
    for (int m = 1; m <= c.scales; ++m) len += scale_extent(e, m) * scale_extent(e, m);
    s["scale_sequence"] = {len, sum};
  }
  s["d4"] = s["fo4"];
  for (int i = 3; i >= 1; --i)
    s["d" + std::to_string(i)] = {c.decoder_channels, c.stage_extent(i), c.stage_extent(i)};
  s["d0"] = {2, c.stage_extent(1), c.stage_extent(1)};
  s["logits"] = {2, h, h};
  return s;
}

/// Embedding + learned positions + one pre-norm self-attention block with a
/// channel MLP, followed by a final layer norm. Pad tokens (id 0) are masked
/// out of the keys.
template <typename T>
struct TextEncoder {
  Tensor<T> table, positions;
  LayerNorm<T> norm_attn, norm_ffn, norm_out;
  Linear<T> wq, wk, wv, wo;
  FeedForward<T> ffn;
  int max_tokens = 0;

  TextEncoder() = default;
  TextEncoder(ParamSet<T>& ps, const std::string& name, int vocab, int channels, int max_len, Rng& rng)
      : max_tokens(max_len) {
    table = ps.add(name + ".embedding", uniform_tensor<T>({vocab, channels}, 1.0, rng));
    positions = ps.add(name + ".positions", uniform_tensor<T>({max_len, channels}, 0.1, rng));
    norm_attn = LayerNorm<T>(ps, name + ".norm_attn", channels);
    wq = Linear<T>(ps, name + ".q", channels, channels, rng);
    wk = Linear<T>(ps, name + ".k", channels, channels, rng);
    wv = Linear<T>(ps, name + ".v", channels, channels, rng);
    wo = Linear<T>(ps, name + ".o", channels, channels, rng);
    norm_ffn = LayerNorm<T>(ps, name + ".norm_ffn", channels);
    ffn = FeedForward<T>(ps, name + ".ffn", channels, 2, rng);
    norm_out = LayerNorm<T>(ps, name + ".norm_out", channels);
  }

  /// `ids` holds batch x length ids, row-major; length may be below max_tokens.
  TextFeatures<T> operator()(const std::vector<int>& ids, int batch) const {
    if (batch < 1 || ids.empty() || ids.size() % static_cast<std::size_t>(batch))
      throw UsageError("token ids do not split into " + std::to_string(batch) + " equal rows");
    const int len = static_cast<int>(ids.size()) / batch;
    if (len > max_tokens)
      throw UsageError("expression has " + std::to_string(len) + " tokens, limit is " + std::to_string(max_tokens));
    const Tensor<T> bias = pad_key_bias<T>(ids, batch, len);
    Tensor<T> x = embedding(table, ids, {batch, len});
    x = add(x, slice(positions, 0, 0, len));
    const Tensor<T> n = norm_attn(x);
    x = add(x, wo(scaled_dot_attention(wq(n), wk(n), wv(n), &bias)));
    x = add(x, ffn(norm_ffn(x)));
    return TextFeatures<T>{norm_out(x), ids, bias};
  }
};

/// conv3x3 stride 2 + batch norm + ReLU.
template <typename T>
struct VisionStem {
  Conv2d<T> conv;
  BatchNorm2d<T> bn;

  VisionStem() = default;
  VisionStem(ParamSet<T>& ps, const std::string& name, int channels, Rng& rng)
      : conv(ps, name + ".conv", 3, channels, 3, 2, 1, rng, Init::relu, false), bn(ps, name + ".bn", channels) {}

  Tensor<T> operator()(const Tensor<T>& image, bool training) { return relu(bn(conv(image), training)); }
};

/// conv3x3 + batch norm + ReLU.
template <typename T>
struct SegBlock {
  Conv2d<T> conv;
  BatchNorm2d<T> bn;

  SegBlock() = default;
  SegBlock(ParamSet<T>& ps, const std::string& name, int channels, Rng& rng)
      : conv(ps, name + ".conv", channels, channels, 3, 1, 1, rng, Init::relu, false), bn(ps, name + ".bn", channels) {}

  Tensor<T> operator()(const Tensor<T>& x, bool training) { return relu(bn(conv(x), training)); }
};

/// One top-down level: concat(upsample x2 of the coarser result, stage map)
/// -> ARC or static 3x3 conv -> Seg.
template <typename T>
struct DecoderLevel {
  bool rotated = false;
  AdaptiveRotatedConv<T> arc;
  Conv2d<T> fuse;
  SegBlock<T> seg;

  DecoderLevel() = default;
  DecoderLevel(ParamSet<T>& ps, const std::string& name, int cin, int cout, bool use_arc, int angles, Rng& rng)
      : rotated(use_arc), seg(ps, name + ".seg", cout, rng) {
    if (rotated)
      arc = AdaptiveRotatedConv<T>(ps, name + ".arc", cin, cout, 3, angles, rng);
    else
      fuse = Conv2d<T>(ps, name + ".fuse", cin, cout, 3, 1, 1, rng, Init::relu, false);
  }

  Tensor<T> operator()(const Tensor<T>& coarse, const Tensor<T>& skip, bool training,
                       RoutingOutput<T>* route = nullptr) {
    const Tensor<T> up = upsample_bilinear(coarse, skip.dim(2), skip.dim(3));
    const Tensor<T> x = concat(std::vector<Tensor<T>>{up, skip}, 1);
    return seg(rotated ? arc(x, route) : fuse(x), training);
  }
};

/// Named intermediates of one forward pass (batched tensors).
template <typename T>
struct ForwardTrace {
  std::map<std::string, Tensor<T>> maps;
  std::map<int, RoutingOutput<T>> routes;  // by decoder level
};

template <typename T>
class Rmsin {
 public:
  explicit Rmsin(ModelConfig config) : config_(std::move(config)) {
    config_.validate();
    Rng rng(config_.seed);
    const auto& c = config_;
    text_ = TextEncoder<T>(params_, "text", c.vocab_size, c.text_channels, c.max_tokens, rng);
    stem_ = VisionStem<T>(params_, "stem", c.stem_channels, rng);
    for (int i = 1; i <= ModelConfig::kStages; ++i)
      stages_.emplace_back(params_, "stage" + std::to_string(i), c.stage_channels(i - 1),
                           c.text_channels, c.branch_kernels, c.use_iim, rng);
    if (c.use_cim) cim_ = Cim<T>(params_, "cim", pyramid_channels(c), c.scales, rng, c.ffn_expansion);
    int coarse = c.stage_channels(4);
    for (int level = 3; level >= 1; --level) {
      levels_.emplace_back(params_, "dec" + std::to_string(level), coarse + c.stage_channels(level),
                           c.decoder_channels, c.arc_at(level), c.arc_angles, rng);
      coarse = c.decoder_channels;
    }
    head_ = Conv2d<T>(params_, "head", c.decoder_channels, 2, 1, 1, 0, rng, Init::fan_in);
    check_ledger();
  }

  Rmsin(const Rmsin&) = delete;
  Rmsin& operator=(const Rmsin&) = delete;
  Rmsin(Rmsin&&) = default;
  Rmsin& operator=(Rmsin&&) = default;

  const ModelConfig& config() const { return config_; }
  ParamSet<T>& params() { return params_; }
  const ParamSet<T>& params() const { return params_; }

  TextFeatures<T> encode_text(const std::vector<int>& ids, int batch) const { return text_(ids, batch); }

  Tensor<T> vision_stem(const Tensor<T>& images, bool training) { return stem_(images, training); }

  /// Four IIM stages followed by the CIM; honours the ablation flags.
  std::vector<Tensor<T>> csie_forward(const Tensor<T>& fe0, const TextFeatures<T>& text,
                                      ForwardTrace<T>* trace = nullptr) const {
    std::vector<Tensor<T>> pyramid;
    Tensor<T> x = fe0;
    for (std::size_t i = 0; i < stages_.size(); ++i) {
      x = stages_[i](x, text);
      if (trace) trace->maps["fe" + std::to_string(i + 1)] = x;
      pyramid.push_back(x);
    }
    if (!config_.use_cim) return pyramid;
    CimTrace<T> ct;
    auto out = cim_(pyramid, trace ? &ct : nullptr);
    if (trace) trace->maps["combined"] = ct.combined;
    return out;
  }

  /// Top-down decoder; returns [B,2,H,W] logits.
  Tensor<T> decode(const std::vector<Tensor<T>>& pyramid, bool training, ForwardTrace<T>* trace = nullptr) {
    if (pyramid.size() != static_cast<std::size_t>(ModelConfig::kStages))
      throw DimensionError("decode: pyramid must have four stages");
    for (int i = 1; i <= 4; ++i) {
      const auto& f = pyramid[i - 1];
      if (f.rank() != 4 || f.dim(1) != config_.stage_channels(i) || f.dim(2) != config_.stage_extent(i))
        throw DimensionError("decode: stage " + std::to_string(i) + " has shape " + shape_str(f.shape()));
    }
    Tensor<T> d = pyramid[3];
    if (trace) trace->maps["d4"] = d;
    for (std::size_t j = 0; j < levels_.size(); ++j) {
      const int level = 3 - static_cast<int>(j);
      RoutingOutput<T> route;
      d = levels_[j](d, pyramid[level - 1], training, &route);
      if (trace) {
        trace->maps["d" + std::to_string(level)] = d;
        if (levels_[j].rotated) trace->routes[level] = route;
      }
    }
    const Tensor<T> d0 = head_(d);
    if (trace) trace->maps["d0"] = d0;
    return upsample_bilinear(d0, config_.image_size, config_.image_size);
  }

  /// images [B,3,H,W] in [0,1]; ids holds B rows of token ids.
  Tensor<T> forward(const Tensor<T>& images, const std::vector<int>& ids, bool training,
                    ForwardTrace<T>* trace = nullptr) {
    if (images.rank() != 4 || images.dim(1) != 3 || images.dim(2) != config_.image_size ||
        images.dim(3) != config_.image_size)
      throw DimensionError("forward: expected [B,3," + std::to_string(config_.image_size) + "," +
                           std::to_string(config_.image_size) + "] images, got " + shape_str(images.shape()));
    const TextFeatures<T> text = encode_text(ids, images.dim(0));
    const Tensor<T> fe0 = vision_stem(images, training);
    if (trace) {
      trace->maps["text"] = text.features;
      trace->maps["fe0"] = fe0;
    }
    auto pyramid = csie_forward(fe0, text, trace);
    if (trace)
      for (int i = 1; i <= 4; ++i) trace->maps["fo" + std::to_string(i)] = pyramid[i - 1];
    Tensor<T> logits = decode(pyramid, training, trace);
    if (trace) trace->maps["logits"] = logits;
    return logits;
  }

  /// Mean pixelwise two-class cross-entropy.
  Tensor<T> loss(const Tensor<T>& logits, std::span<const int> labels) const { return cross_entropy(logits, labels, 1); }

  DecoderLevel<T>& decoder_level(int level) { return levels_.at(static_cast<std::size_t>(3 - level)); }
  IimStage<T>& stage(int i) { return stages_.at(static_cast<std::size_t>(i - 1)); }
  Cim<T>& cim() { return cim_; }
  Conv2d<T>& head() { return head_; }

 private:
  void check_ledger() {
    NoGrad<T> off;
    const int h = config_.image_size;
    const Tensor<T> img = Tensor<T>::zeros({1, 3, h, h});
    std::vector<int> ids(static_cast<std::size_t>(config_.max_tokens), 0);
    ids[0] = 1;
    ForwardTrace<T> trace;
    forward(img, ids, false, &trace);
    for (const auto& [name, shape] : shape_ledger(config_)) {
      if (name == "scale_sequence") continue;
      auto it = trace.maps.find(name);
      if (it == trace.maps.end()) throw DimensionError("shape ledger: " + name + " was not produced");
      Shape got(it->second.shape().begin() + 1, it->second.shape().end());
      if (got != shape)
        throw DimensionError("shape ledger: " + name + " is " + shape_str(got) + ", expected " + shape_str(shape));
    }
  }

  ModelConfig config_;
  ParamSet<T> params_;
  TextEncoder<T> text_;
  VisionStem<T> stem_;
  std::vector<IimStage<T>> stages_;
  Cim<T> cim_;
  std::vector<DecoderLevel<T>> levels_;
  Conv2d<T> head_;
};

}  // namespace rmsin
