#pragma once

#include <string>
#include <vector>

#include "rmsin/nn/attention.hpp"
#include "rmsin/nn/layers.hpp"
#include "rmsin/tensor/spatial.hpp"

// Cross-scale interaction: pools every stage to the coarsest extent, runs one
// pre-norm attention block whose keys come from several strided depthwise
// resamplings of the combined map, then hands each stage its channel slice
// back through a sigmoid-gated residual.
namespace rmsin {

/// Extent of a depthwise k=3, pad=1, stride=m resampling of length h.
inline int scale_extent(int h, int m) { return (h - 1) / m + 1; }

/// Average-pools every map to the extent of the last one and concatenates
/// channels in stage order.
template <typename T>
Tensor<T> combine_stages(const std::vector<Tensor<T>>& pyramid) {
  if (pyramid.empty()) throw DimensionError("combine_stages: empty pyramid");
  const Tensor<T>& last = pyramid.back();
  if (last.rank() != 4) throw DimensionError("combine_stages: expected [B,C,H,W] maps");
  const int h = last.dim(2), w = last.dim(3);
  std::vector<Tensor<T>> parts;
  parts.reserve(pyramid.size());
  for (std::size_t i = 0; i < pyramid.size(); ++i) {
    const Tensor<T>& f = pyramid[i];
    if (f.rank() != 4 || f.dim(0) != last.dim(0))
      throw DimensionError("combine_stages: stage " + std::to_string(i + 1) + " is " + shape_str(f.shape()));
    const int factor = f.dim(2) / h;
    if (factor < 1 || f.dim(2) != factor * h || f.dim(3) != factor * w)
      throw DimensionError("combine_stages: stage " + std::to_string(i + 1) + " extent " + shape_str(f.shape()) +
                           " is not a multiple of " + std::to_string(h) + "x" + std::to_string(w));
    parts.push_back(factor == 1 ? f : avg_pool2d(f, factor, factor));
  }
  return concat(parts, 1);
}

/// softmax(F W_q (F^ W_k)^T / sqrt(C)) F^ W_v + DWConv3x3(Hardswish(F)),
/// where F^ concatenates the flattened depthwise resamplings for m = 1..M.
template <typename T>
struct MultiScaleAttention {
  std::vector<DepthwiseConv2d<T>> resample;
  Linear<T> wq, wk, wv;
  DepthwiseConv2d<T> lrc;

  MultiScaleAttention() = default;
  MultiScaleAttention(ParamSet<T>& ps, const std::string& name, int channels, int scales, Rng& rng)
      : wq(ps, name + ".q", channels, channels, rng),
        wk(ps, name + ".k", channels, channels, rng),
        wv(ps, name + ".v", channels, channels, rng),
        lrc(ps, name + ".lrc", channels, 3, 1, 1, rng) {
    if (scales < 1) throw UsageError("multi-scale attention needs at least one scale");
    for (int m = 1; m <= scales; ++m)
      resample.emplace_back(ps, name + ".scale" + std::to_string(m), channels, 3, m, 1, rng, false);
  }

  int scales() const { return static_cast<int>(resample.size()); }

  /// Flattened multi-scale key/value sequence [B, sum_m h^m w^m, C].
  Tensor<T> scale_sequence(const Tensor<T>& f) const {
    std::vector<Tensor<T>> seq;
    seq.reserve(resample.size());
    for (const auto& dw : resample) seq.push_back(to_tokens(dw(f)));
    return seq.size() == 1 ? seq[0] : concat(seq, 1);
  }

  Tensor<T> operator()(const Tensor<T>& f, Tensor<T>* weights = nullptr) const {
    if (f.rank() != 4) throw DimensionError("multi_scale_attention expects [B,C,H,W]");
    const Tensor<T> seq = scale_sequence(f);
    const Tensor<T> a = scaled_dot_attention(wq(to_tokens(f)), wk(seq), wv(seq), static_cast<const Tensor<T>*>(nullptr), weights);
    return add(to_map(a, f.dim(2), f.dim(3)), lrc(hardswish(f)));
  }
};

/// Channel MLP linear(C -> eC) -> ReLU -> linear(eC -> C), without the residual.
template <typename T>
struct FeedForward {
  Linear<T> expand, contract;

  FeedForward() = default;
  FeedForward(ParamSet<T>& ps, const std::string& name, int channels, int expansion, Rng& rng)
      : expand(ps, name + ".expand", channels, expansion * channels, rng, Init::relu),
        contract(ps, name + ".contract", expansion * channels, channels, rng) {}

  Tensor<T> operator()(const Tensor<T>& tokens) const { return contract(relu(expand(tokens))); }
};

/// sigmoid(F_e W_1) (x) F_c W_2 + F_e W_3 with 1x1 convolutions; W_2 starts
/// at zero and W_3 at the identity, so a fresh gate passes F_e through.
template <typename T>
struct ScaleAwareGate {
  Conv2d<T> w1, w2, w3;

  ScaleAwareGate() = default;
  ScaleAwareGate(ParamSet<T>& ps, const std::string& name, int channels, Rng& rng)
      : w1(ps, name + ".w1", channels, channels, 1, 1, 0, rng, Init::fan_in),
        w2(ps, name + ".w2", channels, channels, 1, 1, 0, rng, Init::zero),
        w3(ps, name + ".w3", channels, channels, 1, 1, 0, rng, Init::identity) {}

  Tensor<T> operator()(const Tensor<T>& fe, const Tensor<T>& fc) const {
    if (fe.shape() != fc.shape())
      throw DimensionError("scale_aware_gate: " + shape_str(fe.shape()) + " vs " + shape_str(fc.shape()));
    return add(mul(sigmoid(w1(fe)), w2(fc)), w3(fe));
  }
};

template <typename T>
struct CimTrace {
  Tensor<T> combined, attended, fused, attention;
  std::vector<Tensor<T>> parts;
};

template <typename T>
struct Cim {
  std::vector<int> stage_channels;
  LayerNorm<T> norm_attn, norm_ffn;
  MultiScaleAttention<T> attention;
  FeedForward<T> ffn;
  std::vector<ScaleAwareGate<T>> gates;

  Cim() = default;
  Cim(ParamSet<T>& ps, const std::string& name, std::vector<int> channels, int scales, Rng& rng, int expansion = 4)
      : stage_channels(std::move(channels)) {
    int total = 0;
    for (int c : stage_channels) total += c;
    norm_attn = LayerNorm<T>(ps, name + ".norm_attn", total);
    attention = MultiScaleAttention<T>(ps, name + ".attn", total, scales, rng);
    norm_ffn = LayerNorm<T>(ps, name + ".norm_ffn", total);
    ffn = FeedForward<T>(ps, name + ".ffn", total, expansion, rng);
    for (std::size_t i = 0; i < stage_channels.size(); ++i)
      gates.emplace_back(ps, name + ".gate" + std::to_string(i + 1), stage_channels[i], rng);
  }

  int total_channels() const {
    int total = 0;
    for (int c : stage_channels) total += c;
    return total;
  }

  /// Pre-norm block on the combined map: x + MSA(LN x), then + FFN(LN .).
  Tensor<T> interact(const Tensor<T>& combined, Tensor<T>* attended = nullptr, Tensor<T>* weights = nullptr) const {
    const int h = combined.dim(2), w = combined.dim(3);
    const Tensor<T> normed = to_map(norm_attn(to_tokens(combined)), h, w);
    const Tensor<T> x1 = add(combined, attention(normed, weights));
    if (attended) *attended = x1;
    const Tensor<T> t1 = to_tokens(x1);
    return to_map(add(t1, ffn(norm_ffn(t1))), h, w);
  }

  std::vector<Tensor<T>> operator()(const std::vector<Tensor<T>>& pyramid, CimTrace<T>* trace = nullptr) const {
    if (pyramid.size() != stage_channels.size())
      throw DimensionError("cim: expected " + std::to_string(stage_channels.size()) + " stages, got " +
                           std::to_string(pyramid.size()));
    for (std::size_t i = 0; i < pyramid.size(); ++i)
      if (pyramid[i].rank() != 4 || pyramid[i].dim(1) != stage_channels[i])
        throw DimensionError("cim: stage " + std::to_string(i + 1) + " has shape " + shape_str(pyramid[i].shape()));
    const Tensor<T> combined = combine_stages(pyramid);
    Tensor<T> attended, weights;
    const Tensor<T> fused = interact(combined, &attended, trace ? &weights : nullptr);
    std::vector<Tensor<T>> out;
    out.reserve(pyramid.size());
    int offset = 0;
    for (std::size_t i = 0; i < pyramid.size(); ++i) {
      const Tensor<T>& fe = pyramid[i];
      Tensor<T> part = slice(fused, 1, offset, stage_channels[i]);
      offset += stage_channels[i];
      if (part.dim(2) != fe.dim(2) || part.dim(3) != fe.dim(3)) part = upsample_bilinear(part, fe.dim(2), fe.dim(3));
      if (trace) trace->parts.push_back(part);
      out.push_back(gates[i](fe, part));
    }
    if (trace) {
      trace->combined = combined;
      trace->attended = attended;
      trace->fused = fused;
      trace->attention = weights;
    }
    return out;
  }
};

}  // namespace rmsin
