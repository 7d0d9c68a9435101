#pragma once

#include <string>
#include <vector>

#include "rmsin/nn/attention.hpp"
#include "rmsin/nn/layers.hpp"
#include "rmsin/tensor/spatial.hpp"

// Intra-scale interaction: one hierarchy stage that downsamples, enhances
// visual priors through a multi-receptive branch and fuses the expression
// through cross-modal attention, both added back through learned gates.
namespace rmsin {

/// 2x2 neighbourhood concat -> layer norm -> linear(4C -> 2C).
template <typename T>
struct PatchMerge {
  LayerNorm<T> norm;
  Linear<T> reduce;
  int in_channels = 0;

  PatchMerge() = default;
  PatchMerge(ParamSet<T>& ps, const std::string& name, int channels, Rng& rng)
      : norm(ps, name + ".norm", 4 * channels),
        reduce(ps, name + ".reduce", 4 * channels, 2 * channels, rng, Init::fan_in, false),
        in_channels(channels) {}

  Tensor<T> operator()(const Tensor<T>& x) const {
    if (x.rank() != 4 || x.dim(1) != in_channels)
      throw DimensionError("patch_merge: expected [B," + std::to_string(in_channels) + ",H,W], got " +
                           shape_str(x.shape()));
    const Tensor<T> s = space_to_depth(x);
    return to_map(reduce(norm(to_tokens(s))), s.dim(2), s.dim(3));
  }
};

/// omega = sigmoid(sum_j channel_mean(k_j * F)); returns omega (x) F.
template <typename T>
struct VariousReceptive {
  std::vector<DepthwiseConv2d<T>> branches;

  VariousReceptive() = default;
  VariousReceptive(ParamSet<T>& ps, const std::string& name, int channels, const std::vector<int>& kernels, Rng& rng) {
    if (kernels.empty()) throw UsageError("various receptive branch needs at least one kernel");
    for (std::size_t j = 0; j < kernels.size(); ++j) {
      const int k = kernels[j];
      if (k < 1 || k % 2 == 0) throw UsageError("branch kernel sizes must be odd, got " + std::to_string(k));
      branches.emplace_back(ps, name + ".k" + std::to_string(k) + "_" + std::to_string(j), channels, k, 1,
                            (k - 1) / 2, rng, false);
    }
  }

  /// Spatial weight map [B,1,H,W].
  Tensor<T> weight(const Tensor<T>& f) const {
    Tensor<T> acc;
    for (const auto& br : branches) {
      const Tensor<T> m = mean(br(f), 1);
      acc = acc.defined() ? add(acc, m) : m;
    }
    return sigmoid(acc);
  }

  Tensor<T> operator()(const Tensor<T>& f, Tensor<T>* omega = nullptr) const {
    const Tensor<T> w = weight(f);
    if (omega) *omega = w;
    return mul(w, f);
  }
};

/// Proj(A W_w (x) F W_m) with A = attention(F W_q, L W_k, L W_v), one head of
/// width equal to the visual channels.
template <typename T>
struct CrossModalAlign {
  Linear<T> wq, wk, wv, ww, wm, proj;

  CrossModalAlign() = default;
  CrossModalAlign(ParamSet<T>& ps, const std::string& name, int channels, int text_channels, Rng& rng)
      : wq(ps, name + ".q", channels, channels, rng),
        wk(ps, name + ".k", text_channels, channels, rng),
        wv(ps, name + ".v", text_channels, channels, rng),
        ww(ps, name + ".w", channels, channels, rng, Init::fan_in, false),
        wm(ps, name + ".m", channels, channels, rng, Init::fan_in, false),
        proj(ps, name + ".proj", channels, channels, rng) {}

  Tensor<T> operator()(const Tensor<T>& f, const TextFeatures<T>& text, Tensor<T>* weights = nullptr) const {
    if (text.length() < 1) throw UsageError("cross-modal alignment needs at least one token");
    if (text.batch() != f.dim(0)) throw DimensionError("cross-modal alignment: batch mismatch");
    const Tensor<T> tokens = to_tokens(f);
    const Tensor<T> a = scaled_dot_attention(wq(tokens), wk(text.features), wv(text.features),
                                             text.key_bias.defined() ? &text.key_bias : nullptr, weights);
    return to_map(proj(mul(ww(a), wm(tokens))), f.dim(2), f.dim(3));
  }
};

/// Tanh(Linear(ReLU(Linear(x)))) along channels; the outer linear starts at
/// zero so a fresh gate is closed.
template <typename T>
struct Gate {
  Linear<T> inner, outer;

  Gate() = default;
  Gate(ParamSet<T>& ps, const std::string& name, int channels, Rng& rng)
      : inner(ps, name + ".inner", channels, channels, rng, Init::relu),
        outer(ps, name + ".outer", channels, channels, rng, Init::zero) {}

  Tensor<T> operator()(const Tensor<T>& x) const {
    return to_map(tanh(outer(relu(inner(to_tokens(x))))), x.dim(2), x.dim(3));
  }
};

/// Optional intermediate values of one stage, filled for tests and dumps.
template <typename T>
struct IimTrace {
  Tensor<T> merged, omega, enhanced, aligned, alpha, beta, attention;
};

template <typename T>
struct IimStage {
  PatchMerge<T> merge;
  VariousReceptive<T> receptive;
  CrossModalAlign<T> align;
  Gate<T> visual_gate, linguistic_gate;
  bool interact = true;
  int in_channels = 0;

  IimStage() = default;
  /// With `interact` false the stage is patch merging only and owns no
  /// branch parameters.
  IimStage(ParamSet<T>& ps, const std::string& name, int channels, int text_channels, const std::vector<int>& kernels,
           bool interact_, Rng& rng)
      : merge(ps, name + ".merge", channels, rng), interact(interact_), in_channels(channels) {
    if (!interact) return;
    const int c = 2 * channels;
    receptive = VariousReceptive<T>(ps, name + ".receptive", c, kernels, rng);
    align = CrossModalAlign<T>(ps, name + ".align", c, text_channels, rng);
    visual_gate = Gate<T>(ps, name + ".visual_gate", c, rng);
    linguistic_gate = Gate<T>(ps, name + ".linguistic_gate", c, rng);
  }

  int out_channels() const { return 2 * in_channels; }

  Tensor<T> operator()(const Tensor<T>& x, const TextFeatures<T>& text, IimTrace<T>* trace = nullptr) const {
    const Tensor<T> f = merge(x);
    if (trace) trace->merged = f;
    if (!interact) return f;
    Tensor<T> omega;
    const Tensor<T> e1 = receptive(f, &omega);
    const Tensor<T> e2 = align(f, text, trace ? &trace->attention : nullptr);
    const Tensor<T> alpha = visual_gate(e1);
    const Tensor<T> beta = linguistic_gate(e2);
    if (trace) {
      trace->omega = omega;
      trace->enhanced = e1;
      trace->aligned = e2;
      trace->alpha = alpha;
      trace->beta = beta;
    }
    return add(add(f, mul(alpha, e1)), mul(beta, e2));
  }
};

}  // namespace rmsin
