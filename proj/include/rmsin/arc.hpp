#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "rmsin/nn/layers.hpp"
#include "rmsin/tensor/ops.hpp"
#include "rmsin/tensor/spatial.hpp"

// Adaptive rotated convolution: a routing block predicts n angles and n
// mixing weights per sample; each base kernel is resampled on its rotated
// lattice and the mixed kernel is applied as one convolution.
namespace rmsin {

/// Per-sample routing result; both tensors are [B, n].
template <typename T>
struct RoutingOutput {
  Tensor<T> angles;   // radians, unconstrained
  Tensor<T> weights;  // softmax over n
};

/// Element `index` of `x` as a [1] tensor.
template <typename T>
Tensor<T> element(const Tensor<T>& x, std::size_t index) {
  if (index >= x.numel()) throw DimensionError("element index out of range");
  return detail::gather(x, Shape{1}, std::vector<std::size_t>{index});
}

/// Rotary resampling of a kernel bank slice.
///
/// For every lattice offset p = (dx, dy) around the kernel centre the output
/// reads the input bilinearly at M(theta)^-1 p, where M is the
/// counter-clockwise rotation in (x right, y up) coordinates. In row/column
/// offsets that is col = cos*dx - sin*dy, row = sin*dx + cos*dy (rows grow
/// downwards), so theta = pi/2 equals a 90 degree counter-clockwise turn of the
/// kernel as displayed. Samples outside the k x k support read zero.
/// `theta` must hold exactly one value; gradients flow to both inputs.
template <typename T>
Tensor<T> rotate_kernel(const Tensor<T>& w, const Tensor<T>& theta) {
  if (w.rank() != 4 || w.dim(2) != w.dim(3)) throw DimensionError("rotate_kernel: weight must be [Co,Ci,k,k]");
  const int k = w.dim(2);
  if (k % 2 == 0) throw DimensionError("rotate_kernel: kernel size must be odd");
  if (theta.numel() != 1) throw DimensionError("rotate_kernel: theta must hold one angle");
  const int r = (k - 1) / 2;
  const double angle = static_cast<double>(theta[0]);
  const T c = static_cast<T>(std::cos(angle));
  const T s = static_cast<T>(std::sin(angle));
  const std::size_t taps = static_cast<std::size_t>(k) * k;
  const std::size_t slices = static_cast<std::size_t>(w.dim(0)) * w.dim(1);

  std::vector<detail::BilinearTap<T>> bil;
  std::vector<T> drow_dtheta, dcol_dtheta;
  bil.reserve(taps);
  for (int ky = 0; ky < k; ++ky)
    for (int kx = 0; kx < k; ++kx) {
      const T dx = static_cast<T>(kx - r);
      const T dy = static_cast<T>(ky - r);
      const T col = c * dx - s * dy + static_cast<T>(r);
      const T row = s * dx + c * dy + static_cast<T>(r);
      bil.emplace_back(row, col);
      drow_dtheta.push_back(c * dx - s * dy);
      dcol_dtheta.push_back(-s * dx - c * dy);
    }
  auto inside = [k](int y, int x) { return y >= 0 && y < k && x >= 0 && x < k; };

  std::vector<T> out_data(w.numel());
  const T* wv = w.ptr();
  for (std::size_t sl = 0; sl < slices; ++sl) {
    const T* src = wv + sl * taps;
    T* dst = out_data.data() + sl * taps;
    for (std::size_t t = 0; t < taps; ++t) {
      const auto& b = bil[t];
      T acc = T(0);
      for (int q = 0; q < 4; ++q)
        if (inside(b.row(q), b.col(q))) acc += b.w[q] * src[b.row(q) * k + b.col(q)];
      dst[t] = acc;
    }
  }
  Tensor<T> out(w.shape(), std::move(out_data));
  if (auto* tape = detail::recording_tape<T>({&w, &theta})) {
    auto nw = w.node();
    auto nt = theta.node();
    auto* no = out.node().get();
    tape->record(out, {nw, nt}, [=, bil = std::move(bil), drow_dtheta = std::move(drow_dtheta),
                                 dcol_dtheta = std::move(dcol_dtheta)]() {
      T* gw = detail::grad_sink<T>(nw);
      T* gt = detail::grad_sink<T>(nt);
      T dtheta = T(0);
      for (std::size_t sl = 0; sl < slices; ++sl) {
        const T* src = nw->value.data() + sl * taps;
        const T* g = no->grad.data() + sl * taps;
        for (std::size_t t = 0; t < taps; ++t) {
          const auto& b = bil[t];
          if (g[t] == T(0)) continue;
          for (int q = 0; q < 4; ++q) {
            if (!inside(b.row(q), b.col(q))) continue;
            const int idx = b.row(q) * k + b.col(q);
            if (gw) gw[sl * taps + idx] += g[t] * b.w[q];
            if (gt) dtheta += g[t] * src[idx] * (b.dy[q] * drow_dtheta[t] + b.dx[q] * dcol_dtheta[t]);
          }
        }
      }
      if (gt) gt[0] += dtheta;
    });
  }
  return out;
}

/// sum_i weights[i] * kernels[i]; `weights` holds one value per kernel.
template <typename T>
Tensor<T> combine_kernels(const std::vector<Tensor<T>>& kernels, const Tensor<T>& weights) {
  if (kernels.empty() || weights.numel() != kernels.size())
    throw DimensionError("combine_kernels: need one weight per kernel");
  for (const auto& k : kernels)
    if (k.shape() != kernels[0].shape()) throw DimensionError("combine_kernels: kernel shapes differ");
  const std::size_t n = kernels[0].numel();
  std::vector<T> r(n, T(0));
  for (std::size_t i = 0; i < kernels.size(); ++i) {
    const T lam = weights[i];
    const T* kv = kernels[i].ptr();
    for (std::size_t j = 0; j < n; ++j) r[j] += lam * kv[j];
  }
  Tensor<T> out(kernels[0].shape(), std::move(r));
  std::vector<Tensor<T>> all = kernels;
  all.push_back(weights);
  if (auto* tape = detail::recording_tape<T>(all)) {
    std::vector<typename Tensor<T>::NodePtr> nodes;
    for (const auto& k : kernels) nodes.push_back(k.node());
    auto nl = weights.node();
    auto* no = out.node().get();
    std::vector<typename Tensor<T>::NodePtr> inputs = nodes;
    inputs.push_back(nl);
    tape->record(out, inputs, [nodes, nl, no, n]() {
      const T* g = no->grad.data();
      T* gl = detail::grad_sink<T>(nl);
      for (std::size_t i = 0; i < nodes.size(); ++i) {
        const T lam = nl->value[i];
        if (T* gk = detail::grad_sink<T>(nodes[i]))
          for (std::size_t j = 0; j < n; ++j) gk[j] += lam * g[j];
        if (gl) {
          T acc = T(0);
          const T* kv = nodes[i]->value.data();
          for (std::size_t j = 0; j < n; ++j) acc += g[j] * kv[j];
          gl[i] += acc;
        }
      }
    });
  }
  return out;
}

/// Global pool -> linear(C -> C/4) -> ReLU -> {angle head, weight head}.
/// The angle head starts at zero so a fresh layer behaves as a static
/// convolution with the mean base kernel.
template <typename T>
struct RoutingBlock {
  Linear<T> reduce, angle_head, weight_head;
  int angles = 1;

  RoutingBlock() = default;
  RoutingBlock(ParamSet<T>& ps, const std::string& name, int channels, int n, Rng& rng) : angles(n) {
    if (n < 1) throw UsageError("routing block needs at least one angle");
    const int hidden = std::max(1, channels / 4);
    reduce = Linear<T>(ps, name + ".reduce", channels, hidden, rng, Init::relu);
    angle_head = Linear<T>(ps, name + ".angle", hidden, n, rng, Init::zero);
    weight_head = Linear<T>(ps, name + ".weight", hidden, n, rng, Init::fan_in);
  }

  RoutingOutput<T> operator()(const Tensor<T>& x) const {
    const auto d = detail::map_dims(x.shape(), "routing");
    const Tensor<T> flat = reshape(x, {d.batch, d.channels, d.height * d.width});
    const Tensor<T> pooled = reshape(mean(flat, 2), {d.batch, d.channels});
    const Tensor<T> h = relu(reduce(pooled));
    return RoutingOutput<T>{angle_head(h), softmax(weight_head(h), 1)};
  }
};

/// n base kernels [Co,Ci,k,k] sampled on the integer lattice around the
/// kernel centre.
template <typename T>
struct RotatedKernelBank {
  std::vector<Tensor<T>> kernels;

  RotatedKernelBank() = default;
  RotatedKernelBank(ParamSet<T>& ps, const std::string& name, int n, int cout, int cin, int k, Rng& rng) {
    if (k % 2 == 0) throw UsageError("rotated kernels need an odd size");
    const double bound = std::sqrt(6.0 / (cin * k * k));
    for (int i = 0; i < n; ++i)
      kernels.push_back(ps.add(name + ".kernel" + std::to_string(i), uniform_tensor<T>({cout, cin, k, k}, bound, rng)));
  }

  int size() const { return static_cast<int>(kernels.size()); }
  int kernel_size() const { return kernels.at(0).dim(2); }
};

template <typename T>
struct AdaptiveRotatedConv {
  RoutingBlock<T> routing;
  RotatedKernelBank<T> bank;
  int in_channels = 0, out_channels = 0;

  AdaptiveRotatedConv() = default;
  AdaptiveRotatedConv(ParamSet<T>& ps, const std::string& name, int cin, int cout, int k, int n, Rng& rng)
      : routing(ps, name + ".routing", cin, n, rng), bank(ps, name + ".bank", n, cout, cin, k, rng),
        in_channels(cin), out_channels(cout) {}

  /// Mixed kernel for sample `b` of a routing result.
  Tensor<T> combined_kernel(const RoutingOutput<T>& route, int b) const {
    const int n = bank.size();
    std::vector<Tensor<T>> rotated;
    rotated.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i)
      rotated.push_back(rotate_kernel(bank.kernels[i], element(route.angles, static_cast<std::size_t>(b * n + i))));
    return combine_kernels(rotated, slice(route.weights, 0, b, 1));
  }

  /// Shape-preserving (stride 1, same padding) orientation-aware convolution.
  Tensor<T> operator()(const Tensor<T>& x, RoutingOutput<T>* route_out = nullptr) const {
    const auto d = detail::map_dims(x.shape(), "arc");
    if (d.channels != in_channels)
      throw DimensionError("arc: input has " + std::to_string(d.channels) + " channels, expected " +
                           std::to_string(in_channels));
    const Tensor<T> batched = d.batched ? x : reshape(x, {1, d.channels, d.height, d.width});
    const RoutingOutput<T> route = routing(batched);
    const int pad = (bank.kernel_size() - 1) / 2;
    std::vector<Tensor<T>> outs;
    outs.reserve(static_cast<std::size_t>(d.batch));
    for (int b = 0; b < d.batch; ++b) {
      const Tensor<T> xb = d.batch == 1 ? batched : slice(batched, 0, b, 1);
      outs.push_back(conv2d(xb, combined_kernel(route, b), 1, pad));
    }
    if (route_out) *route_out = route;
    Tensor<T> y = outs.size() == 1 ? outs[0] : concat(outs, 0);
    return d.batched ? y : reshape(y, {out_channels, d.height, d.width});
  }
};

}  // namespace rmsin
