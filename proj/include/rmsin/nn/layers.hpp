#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "rmsin/tensor/ops.hpp"
#include "rmsin/tensor/spatial.hpp"
#include "rmsin/tensor/tensor.hpp"

namespace rmsin {

/// splitmix64 finalizer; used to derive independent sub-seeds.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(mix_seed(seed)) {}

  double uniform(double lo = 0.0, double hi = 1.0) {
    return lo + (hi - lo) * std::uniform_real_distribution<double>(0.0, 1.0)(engine_);
  }
  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }
  int uniform_int(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(engine_); }
  std::uint64_t next() { return engine_(); }
  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

template <typename T>
Tensor<T> uniform_tensor(Shape shape, double bound, Rng& rng) {
  std::vector<T> data(shape_numel(shape));
  for (auto& v : data) v = static_cast<T>(rng.uniform(-bound, bound));
  return Tensor<T>(std::move(shape), std::move(data));
}

/// Named, ordered collection of parameters and buffers. Order is
/// registration order and is what checkpoints and the optimizer iterate.
template <typename T>
class ParamSet {
 public:
  struct Entry {
    std::string name;
    Tensor<T> tensor;
    bool trainable = true;
  };

  Tensor<T> add(const std::string& name, Tensor<T> tensor, bool trainable = true) {
    for (const auto& e : entries_)
      if (e.name == name) throw UsageError("duplicate parameter name: " + name);
    tensor.set_requires_grad(trainable);
    entries_.push_back(Entry{name, tensor, trainable});
    return tensor;
  }

  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }

  const Entry* find(const std::string& name) const {
    for (const auto& e : entries_)
      if (e.name == name) return &e;
    return nullptr;
  }

  std::size_t trainable_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_)
      if (e.trainable) n += e.tensor.numel();
    return n;
  }

  void zero_grad() {
    for (auto& e : entries_) e.tensor.zero_grad();
  }

 private:
  std::vector<Entry> entries_;
};

enum class Init { fan_in, relu, zero, identity };

template <typename T>
struct Linear {
  Tensor<T> w, b;

  Linear() = default;
  Linear(ParamSet<T>& ps, const std::string& name, int in, int out, Rng& rng, Init init = Init::fan_in,
         bool bias = true) {
    Tensor<T> weight;
    switch (init) {
      case Init::zero:
        weight = Tensor<T>::zeros({in, out});
        break;
      case Init::identity: {
        weight = Tensor<T>::zeros({in, out});
        for (int i = 0; i < std::min(in, out); ++i) weight.mutable_data()[static_cast<std::size_t>(i) * out + i] = T(1);
        break;
      }
      case Init::relu:
        weight = uniform_tensor<T>({in, out}, std::sqrt(6.0 / in), rng);
        break;
      case Init::fan_in:
        weight = uniform_tensor<T>({in, out}, 1.0 / std::sqrt(static_cast<double>(in)), rng);
        break;
    }
    w = ps.add(name + ".w", weight);
    if (bias) b = ps.add(name + ".b", Tensor<T>::zeros({out}));
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, w, b); }
};

template <typename T>
struct Conv2d {
  Tensor<T> w, b;
  int stride = 1, pad = 0;

  Conv2d() = default;
  Conv2d(ParamSet<T>& ps, const std::string& name, int in, int out, int k, int stride_, int pad_, Rng& rng,
         Init init = Init::relu, bool bias = true)
      : stride(stride_), pad(pad_) {
    const int fan_in = in * k * k;
    Tensor<T> weight;
    switch (init) {
      case Init::zero:
        weight = Tensor<T>::zeros({out, in, k, k});
        break;
      case Init::identity: {
        if (k != 1) throw UsageError("identity init requires a 1x1 kernel");
        weight = Tensor<T>::zeros({out, in, 1, 1});
        for (int i = 0; i < std::min(in, out); ++i) weight.mutable_data()[static_cast<std::size_t>(i) * in + i] = T(1);
        break;
      }
      case Init::relu:
        weight = uniform_tensor<T>({out, in, k, k}, std::sqrt(6.0 / fan_in), rng);
        break;
      case Init::fan_in:
        weight = uniform_tensor<T>({out, in, k, k}, 1.0 / std::sqrt(static_cast<double>(fan_in)), rng);
        break;
    }
    w = ps.add(name + ".w", weight);
    if (bias) b = ps.add(name + ".b", Tensor<T>::zeros({out}));
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, w, b, stride, pad); }
};

template <typename T>
struct DepthwiseConv2d {
  Tensor<T> w, b;
  int stride = 1, pad = 0;

  DepthwiseConv2d() = default;
  DepthwiseConv2d(ParamSet<T>& ps, const std::string& name, int channels, int k, int stride_, int pad_, Rng& rng,
                  bool bias = true, Init init = Init::fan_in)
      : stride(stride_), pad(pad_) {
    Tensor<T> weight = init == Init::zero ? Tensor<T>::zeros({channels, k, k})
                                          : uniform_tensor<T>({channels, k, k}, 1.0 / k, rng);
    w = ps.add(name + ".w", weight);
    if (bias) b = ps.add(name + ".b", Tensor<T>::zeros({channels}));
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return depthwise_conv2d(x, w, b, stride, pad); }
};

template <typename T>
struct LayerNorm {
  Tensor<T> gamma, beta;

  LayerNorm() = default;
  LayerNorm(ParamSet<T>& ps, const std::string& name, int channels) {
    gamma = ps.add(name + ".gamma", Tensor<T>::ones({channels}));
    beta = ps.add(name + ".beta", Tensor<T>::zeros({channels}));
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gamma, beta); }
};

template <typename T>
struct BatchNorm2d {
  Tensor<T> gamma, beta, running_mean, running_var;

  BatchNorm2d() = default;
  BatchNorm2d(ParamSet<T>& ps, const std::string& name, int channels) {
    gamma = ps.add(name + ".gamma", Tensor<T>::ones({channels}));
    beta = ps.add(name + ".beta", Tensor<T>::zeros({channels}));
    running_mean = ps.add(name + ".running_mean", Tensor<T>::zeros({channels}), false);
    running_var = ps.add(name + ".running_var", Tensor<T>::ones({channels}), false);
  }

  Tensor<T> operator()(const Tensor<T>& x, bool training) {
    return batch_norm(x, gamma, beta, running_mean, running_var, training);
  }
};

/// [B,C,H,W] -> [B,H*W,C]
template <typename T>
Tensor<T> to_tokens(const Tensor<T>& x) {
  if (x.rank() != 4) throw DimensionError("to_tokens expects [B,C,H,W], got " + shape_str(x.shape()));
  const auto p = permute(x, {0, 2, 3, 1});
  return reshape(p, {x.dim(0), x.dim(2) * x.dim(3), x.dim(1)});
}

/// [B,H*W,C] -> [B,C,H,W]
template <typename T>
Tensor<T> to_map(const Tensor<T>& t, int h, int w) {
  if (t.rank() != 3 || t.dim(1) != h * w)
    throw DimensionError("to_map: " + shape_str(t.shape()) + " is not a " + std::to_string(h) + "x" +
                         std::to_string(w) + " token sequence");
  const auto r = reshape(t, {t.dim(0), h, w, t.dim(2)});
  return permute(r, {0, 3, 1, 2});
}

}  // namespace rmsin
