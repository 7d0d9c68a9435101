#pragma once

#include <cmath>
#include <limits>
#include <vector>

#include "rmsin/tensor/ops.hpp"

namespace rmsin {

/// Encoded expression batch: features [B,N,C_t], the ids they came from and
/// an additive key bias [B,1,N] holding 0 for real tokens and -inf for pads.
template <typename T>
struct TextFeatures {
  Tensor<T> features;
  std::vector<int> ids;
  Tensor<T> key_bias;

  int batch() const { return features.dim(0); }
  int length() const { return features.dim(1); }
  int channels() const { return features.dim(2); }
};

/// [B,1,N] additive mask from padding ids (id 0).
template <typename T>
Tensor<T> pad_key_bias(const std::vector<int>& ids, int batch, int length) {
  if (ids.size() != static_cast<std::size_t>(batch) * length)
    throw DimensionError("pad_key_bias: id count does not match batch x length");
  std::vector<T> bias(ids.size());
  for (int b = 0; b < batch; ++b) {
    bool any = false;
    for (int n = 0; n < length; ++n) {
      const bool pad = ids[static_cast<std::size_t>(b) * length + n] == 0;
      bias[static_cast<std::size_t>(b) * length + n] = pad ? -std::numeric_limits<T>::infinity() : T(0);
      any = any || !pad;
    }
    if (!any) throw UsageError("expression has no tokens");
  }
  return Tensor<T>({batch, 1, length}, std::move(bias));
}

/// softmax(q k^T / sqrt(d) + key_bias) v for q [B,Lq,d], k [B,Lk,d],
/// v [B,Lk,dv]. When `weights` is given it receives the [B,Lq,Lk] attention.
template <typename T>
Tensor<T> scaled_dot_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                               const Tensor<T>* key_bias = nullptr, Tensor<T>* weights = nullptr) {
  if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3) throw DimensionError("attention expects rank-3 inputs");
  if (k.dim(1) < 1) throw UsageError("attention over an empty key sequence");
  if (q.dim(2) != k.dim(2) || k.dim(1) != v.dim(1))
    throw DimensionError("attention: incompatible q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) +
                         ", v " + shape_str(v.shape()));
  Tensor<T> logits = scale(matmul(q, transpose(k)), static_cast<T>(1.0 / std::sqrt(static_cast<double>(q.dim(2)))));
  if (key_bias) logits = add(logits, *key_bias);
  Tensor<T> a = softmax(logits, 2);
  if (weights) *weights = a;
  return matmul(a, v);
}

}  // namespace rmsin
