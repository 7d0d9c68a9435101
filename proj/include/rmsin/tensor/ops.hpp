#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "rmsin/tensor/gemm.hpp"
#include "rmsin/tensor/tensor.hpp"

namespace rmsin {

namespace detail {

inline int normalize_axis(int axis, int rank) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank)
    throw DimensionError("axis " + std::to_string(axis) + " out of range for rank " +
                         std::to_string(rank));
  return axis;
}

/// Splits a shape into (outer, extent, inner) around `axis`.
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

inline AxisSplit split_at(const Shape& shape, int axis) {
  AxisSplit s;
  for (int i = 0; i < axis; ++i) s.outer *= static_cast<std::size_t>(shape[i]);
  s.extent = static_cast<std::size_t>(shape[axis]);
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < shape.size(); ++i)
    s.inner *= static_cast<std::size_t>(shape[i]);
  return s;
}

/// Right-aligned broadcast of two shapes, padded to rank 4.
struct Broadcast {
  Shape out;
  std::array<std::size_t, 4> ext{1, 1, 1, 1};
  std::array<std::size_t, 4> sa{0, 0, 0, 0};
  std::array<std::size_t, 4> sb{0, 0, 0, 0};
};

inline std::array<std::size_t, 4> padded4(const Shape& s) {
  std::array<std::size_t, 4> p{1, 1, 1, 1};
  const std::size_t off = 4 - s.size();
  for (std::size_t i = 0; i < s.size(); ++i) p[off + i] = static_cast<std::size_t>(s[i]);
  return p;
}

inline Broadcast broadcast_shapes(const Shape& a, const Shape& b) {
  Broadcast bc;
  const auto pa = padded4(a);
  const auto pb = padded4(b);
  for (int i = 0; i < 4; ++i) {
    if (pa[i] != pb[i] && pa[i] != 1 && pb[i] != 1)
      throw DimensionError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    bc.ext[i] = std::max(pa[i], pb[i]);
  }
  std::size_t stride_a = 1, stride_b = 1;
  for (int i = 3; i >= 0; --i) {
    bc.sa[i] = pa[i] == 1 ? 0 : stride_a;
    bc.sb[i] = pb[i] == 1 ? 0 : stride_b;
    stride_a *= pa[i];
    stride_b *= pb[i];
  }
  const std::size_t rank = std::max(a.size(), b.size());
  for (std::size_t i = 4 - rank; i < 4; ++i) bc.out.push_back(static_cast<int>(bc.ext[i]));
  return bc;
}

template <typename Fn>
void for_each_broadcast(const Broadcast& bc, Fn&& fn) {
  std::size_t o = 0;
  for (std::size_t i0 = 0; i0 < bc.ext[0]; ++i0)
    for (std::size_t i1 = 0; i1 < bc.ext[1]; ++i1)
      for (std::size_t i2 = 0; i2 < bc.ext[2]; ++i2) {
        const std::size_t base_a = i0 * bc.sa[0] + i1 * bc.sa[1] + i2 * bc.sa[2];
        const std::size_t base_b = i0 * bc.sb[0] + i1 * bc.sb[1] + i2 * bc.sb[2];
        for (std::size_t i3 = 0; i3 < bc.ext[3]; ++i3, ++o)
          fn(o, base_a + i3 * bc.sa[3], base_b + i3 * bc.sb[3]);
      }
}

enum class BinaryKind { add, sub, mul };

template <typename T>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, BinaryKind kind) {
  const T* av = a.ptr();
  const T* bv = b.ptr();
  Tensor<T> out;
  const bool same = a.shape() == b.shape();
  Broadcast bc;
  if (same) {
    std::vector<T> r(a.numel());
    const std::size_t n = r.size();
    switch (kind) {
      case BinaryKind::add:
        for (std::size_t i = 0; i < n; ++i) r[i] = av[i] + bv[i];
        break;
      case BinaryKind::sub:
        for (std::size_t i = 0; i < n; ++i) r[i] = av[i] - bv[i];
        break;
      case BinaryKind::mul:
        for (std::size_t i = 0; i < n; ++i) r[i] = av[i] * bv[i];
        break;
    }
    out = Tensor<T>(a.shape(), std::move(r));
  } else {
    bc = broadcast_shapes(a.shape(), b.shape());
    std::vector<T> r(shape_numel(bc.out));
    switch (kind) {
      case BinaryKind::add:
        for_each_broadcast(bc, [&](std::size_t o, std::size_t ia, std::size_t ib) { r[o] = av[ia] + bv[ib]; });
        break;
      case BinaryKind::sub:
        for_each_broadcast(bc, [&](std::size_t o, std::size_t ia, std::size_t ib) { r[o] = av[ia] - bv[ib]; });
        break;
      case BinaryKind::mul:
        for_each_broadcast(bc, [&](std::size_t o, std::size_t ia, std::size_t ib) { r[o] = av[ia] * bv[ib]; });
        break;
    }
    out = Tensor<T>(bc.out, std::move(r));
  }
  if (auto* tape = recording_tape<T>({&a, &b})) {
    auto na = a.node();
    auto nb = b.node();
    auto* no = out.node().get();
    tape->record(out, {na, nb}, [na, nb, no, kind, same, bc]() {
      const T* g = no->grad.data();
      T* ga = grad_sink<T>(na);
      T* gb = grad_sink<T>(nb);
      const T* av = na->value.data();
      const T* bv = nb->value.data();
      if (same) {
        const std::size_t n = no->value.size();
        for (std::size_t i = 0; i < n; ++i) {
          if (ga) ga[i] += kind == BinaryKind::mul ? g[i] * bv[i] : g[i];
          if (gb) gb[i] += kind == BinaryKind::mul ? g[i] * av[i] : (kind == BinaryKind::sub ? -g[i] : g[i]);
        }
        return;
      }
      for_each_broadcast(bc, [&](std::size_t o, std::size_t ia, std::size_t ib) {
        if (ga) ga[ia] += kind == BinaryKind::mul ? g[o] * bv[ib] : g[o];
        if (gb) gb[ib] += kind == BinaryKind::mul ? g[o] * av[ia] : (kind == BinaryKind::sub ? -g[o] : g[o]);
      });
    });
  }
  return out;
}

enum class UnaryKind { relu, tanh, sigmoid, hardswish, neg };

template <typename T>
T unary_forward(UnaryKind kind, T x) {
  switch (kind) {
    case UnaryKind::relu:
      return x > T(0) ? x : T(0);
    case UnaryKind::tanh:
      return std::tanh(x);
    case UnaryKind::sigmoid:
      return x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
    case UnaryKind::hardswish:
      return x * std::clamp(x + T(3), T(0), T(6)) / T(6);
    case UnaryKind::neg:
      return -x;
  }
  return x;
}

/// Derivative given input x and output y.
template <typename T>
T unary_derivative(UnaryKind kind, T x, T y) {
  switch (kind) {
    case UnaryKind::relu:
      return x > T(0) ? T(1) : T(0);
    case UnaryKind::tanh:
      return T(1) - y * y;
    case UnaryKind::sigmoid:
      return y * (T(1) - y);
    case UnaryKind::hardswish:
      if (x <= T(-3)) return T(0);
      if (x >= T(3)) return T(1);
      return (T(2) * x + T(3)) / T(6);
    case UnaryKind::neg:
      return T(-1);
  }
  return T(0);
}

template <typename T>
Tensor<T> unary(const Tensor<T>& x, UnaryKind kind) {
  const T* xv = x.ptr();
  std::vector<T> r(x.numel());
  for (std::size_t i = 0; i < r.size(); ++i) r[i] = unary_forward(kind, xv[i]);
  Tensor<T> out(x.shape(), std::move(r));
  if (auto* tape = recording_tape<T>({&x})) {
    auto nx = x.node();
    auto* no = out.node().get();
    tape->record(out, {nx}, [nx, no, kind]() {
      T* gx = grad_sink<T>(nx);
      if (!gx) return;
      const T* g = no->grad.data();
      const T* xv = nx->value.data();
      const T* yv = no->value.data();
      for (std::size_t i = 0; i < no->value.size(); ++i) gx[i] += g[i] * unary_derivative(kind, xv[i], yv[i]);
    });
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(a, b, detail::BinaryKind::add);
}
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(a, b, detail::BinaryKind::sub);
}
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(a, b, detail::BinaryKind::mul);
}
template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) {
  return add(a, b);
}
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) {
  return sub(a, b);
}
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) {
  return mul(a, b);
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary(x, detail::UnaryKind::relu);
}
template <typename T>
Tensor<T> tanh(const Tensor<T>& x) {
  return detail::unary(x, detail::UnaryKind::tanh);
}
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary(x, detail::UnaryKind::sigmoid);
}
template <typename T>
Tensor<T> hardswish(const Tensor<T>& x) {
  return detail::unary(x, detail::UnaryKind::hardswish);
}
template <typename T>
Tensor<T> neg(const Tensor<T>& x) {
  return detail::unary(x, detail::UnaryKind::neg);
}

enum class Activation { relu, tanh, sigmoid, hardswish };

template <typename T>
Tensor<T> activation(const Tensor<T>& x, Activation kind) {
  switch (kind) {
    case Activation::relu:
      return relu(x);
    case Activation::tanh:
      return tanh(x);
    case Activation::sigmoid:
      return sigmoid(x);
    case Activation::hardswish:
      return hardswish(x);
  }
  return x;
}

/// x * s for a constant s.
template <typename T>
Tensor<T> scale(const Tensor<T>& x, T s) {
  std::vector<T> r(x.numel());
  const T* xv = x.ptr();
  for (std::size_t i = 0; i < r.size(); ++i) r[i] = xv[i] * s;
  Tensor<T> out(x.shape(), std::move(r));
  if (auto* tape = detail::recording_tape<T>({&x})) {
    auto nx = x.node();
    auto* no = out.node().get();
    tape->record(out, {nx}, [nx, no, s]() {
      T* gx = detail::grad_sink<T>(nx);
      if (!gx) return;
      const T* g = no->grad.data();
      for (std::size_t i = 0; i < no->value.size(); ++i) gx[i] += g[i] * s;
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions

/// Sum of all elements, shape [1].
template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = T(0);
  for (T v : x.data()) acc += v;
  Tensor<T> out = Tensor<T>::scalar(acc);
  if (auto* tape = detail::recording_tape<T>({&x})) {
    auto nx = x.node();
    auto* no = out.node().get();
    tape->record(out, {nx}, [nx, no]() {
      T* gx = detail::grad_sink<T>(nx);
      if (!gx) return;
      const T g = no->grad[0];
      for (std::size_t i = 0; i < nx->value.size(); ++i) gx[i] += g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

/// Sum over one axis; the axis is kept with extent 1.
template <typename T>
Tensor<T> sum(const Tensor<T>& x, int axis) {
  axis = detail::normalize_axis(axis, x.rank());
  const auto s = detail::split_at(x.shape(), axis);
  Shape shape = x.shape();
  shape[axis] = 1;
  std::vector<T> r(s.outer * s.inner, T(0));
  const T* xv = x.ptr();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t a = 0; a < s.extent; ++a) {
      const T* src = xv + (o * s.extent + a) * s.inner;
      T* dst = r.data() + o * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) dst[i] += src[i];
    }
  Tensor<T> out(shape, std::move(r));
  if (auto* tape = detail::recording_tape<T>({&x})) {
    auto nx = x.node();
    auto* no = out.node().get();
    tape->record(out, {nx}, [nx, no, s]() {
      T* gx = detail::grad_sink<T>(nx);
      if (!gx) return;
      const T* g = no->grad.data();
      for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t a = 0; a < s.extent; ++a) {
          T* dst = gx + (o * s.extent + a) * s.inner;
          const T* src = g + o * s.inner;
          for (std::size_t i = 0; i < s.inner; ++i) dst[i] += src[i];
        }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x, int axis) {
  axis = detail::normalize_axis(axis, x.rank());
  return scale(sum(x, axis), T(1) / static_cast<T>(x.dim(axis)));
}

// ---------------------------------------------------------------------------
// Layout

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  check_shape(shape);
  if (shape_numel(shape) != x.numel())
    throw DimensionError("cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  Tensor<T> out(std::move(shape), std::vector<T>(x.data().begin(), x.data().end()));
  if (auto* tape = detail::recording_tape<T>({&x})) {
    auto nx = x.node();
    auto* no = out.node().get();
    tape->record(out, {nx}, [nx, no]() {
      T* gx = detail::grad_sink<T>(nx);
      if (!gx) return;
      for (std::size_t i = 0; i < no->value.size(); ++i) gx[i] += no->grad[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> flatten(const Tensor<T>& x) {
  return reshape(x, Shape{static_cast<int>(x.numel())});
}

/// Axis permutation: output axis i is input axis perm[i].
template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<int>& perm) {
  const int r = x.rank();
  if (static_cast<int>(perm.size()) != r) throw DimensionError("permute: wrong number of axes");
  std::vector<bool> seen(static_cast<std::size_t>(r), false);
  for (int p : perm) {
    if (p < 0 || p >= r || seen[static_cast<std::size_t>(p)]) throw DimensionError("permute: invalid permutation");
    seen[static_cast<std::size_t>(p)] = true;
  }
  Shape out_shape(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) out_shape[i] = x.dim(perm[i]);
  // input strides, in output-axis order, padded to 4
  std::array<std::size_t, 4> in_stride{};
  {
    std::vector<std::size_t> st(static_cast<std::size_t>(r));
    std::size_t acc = 1;
    for (int i = r - 1; i >= 0; --i) {
      st[i] = acc;
      acc *= static_cast<std::size_t>(x.dim(i));
    }
    for (int i = 0; i < 4; ++i) in_stride[i] = 0;
    for (int i = 0; i < r; ++i) in_stride[4 - r + i] = st[perm[i]];
  }
  const auto ext = detail::padded4(out_shape);
  std::vector<std::size_t> index(x.numel());
  std::size_t o = 0;
  for (std::size_t a = 0; a < ext[0]; ++a)
    for (std::size_t b = 0; b < ext[1]; ++b)
      for (std::size_t c = 0; c < ext[2]; ++c)
        for (std::size_t d = 0; d < ext[3]; ++d)
          index[o++] = a * in_stride[0] + b * in_stride[1] + c * in_stride[2] + d * in_stride[3];
  std::vector<T> rdata(x.numel());
  const T* xv = x.ptr();
  for (std::size_t i = 0; i < rdata.size(); ++i) rdata[i] = xv[index[i]];
  Tensor<T> out(out_shape, std::move(rdata));
  if (auto* tape = detail::recording_tape<T>({&x})) {
    auto nx = x.node();
    auto* no = out.node().get();
    tape->record(out, {nx}, [nx, no, index = std::move(index)]() {
      T* gx = detail::grad_sink<T>(nx);
      if (!gx) return;
      for (std::size_t i = 0; i < index.size(); ++i) gx[index[i]] += no->grad[i];
    });
  }
  return out;
}

/// Swaps the last two axes.
template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  std::vector<int> perm(static_cast<std::size_t>(x.rank()));
  std::iota(perm.begin(), perm.end(), 0);
  if (x.rank() < 2) throw DimensionError("transpose needs rank >= 2");
  std::swap(perm[perm.size() - 1], perm[perm.size() - 2]);
  return permute(x, perm);
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw UsageError("concat of zero tensors");
  const int r = parts[0].rank();
  axis = detail::normalize_axis(axis, r);
  Shape shape = parts[0].shape();
  int total = 0;
  for (const auto& p : parts) {
    if (p.rank() != r) throw DimensionError("concat: rank mismatch");
    for (int i = 0; i < r; ++i)
      if (i != axis && p.dim(i) != shape[i])
        throw DimensionError("concat: extent mismatch " + shape_str(p.shape()) + " vs " + shape_str(shape));
    total += p.dim(axis);
  }
  shape[axis] = total;
  const auto s = detail::split_at(shape, axis);
  std::vector<T> r_data(shape_numel(shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t chunk = static_cast<std::size_t>(p.dim(axis)) * s.inner;
    const T* src = p.ptr();
    for (std::size_t o = 0; o < s.outer; ++o)
      std::copy(src + o * chunk, src + (o + 1) * chunk, r_data.begin() + static_cast<std::ptrdiff_t>(o * s.extent * s.inner + off));
    off += chunk;
  }
  Tensor<T> out(shape, std::move(r_data));
  if (auto* tape = detail::recording_tape<T>(parts)) {
    std::vector<typename Tensor<T>::NodePtr> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    auto* no = out.node().get();
    tape->record(out, nodes, [nodes, no, offsets, s, axis]() {
      for (std::size_t k = 0; k < nodes.size(); ++k) {
        T* gp = detail::grad_sink<T>(nodes[k]);
        if (!gp) continue;
        const std::size_t chunk = static_cast<std::size_t>(nodes[k]->shape[axis]) * s.inner;
        for (std::size_t o = 0; o < s.outer; ++o) {
          const T* g = no->grad.data() + o * s.extent * s.inner + offsets[k];
          T* dst = gp + o * chunk;
          for (std::size_t i = 0; i < chunk; ++i) dst[i] += g[i];
        }
      }
    });
  }
  return out;
}

/// Elements [start, start+length) along `axis`.
template <typename T>
Tensor<T> slice(const Tensor<T>& x, int axis, int start, int length) {
  axis = detail::normalize_axis(axis, x.rank());
  if (start < 0 || length < 1 || start + length > x.dim(axis))
    throw DimensionError("slice [" + std::to_string(start) + "," + std::to_string(start + length) +
                         ") out of range for extent " + std::to_string(x.dim(axis)));
  const auto s = detail::split_at(x.shape(), axis);
  Shape shape = x.shape();
  shape[axis] = length;
  const std::size_t chunk = static_cast<std::size_t>(length) * s.inner;
  const std::size_t skip = static_cast<std::size_t>(start) * s.inner;
  std::vector<T> r(s.outer * chunk);
  const T* xv = x.ptr();
  for (std::size_t o = 0; o < s.outer; ++o)
    std::copy(xv + o * s.extent * s.inner + skip, xv + o * s.extent * s.inner + skip + chunk,
              r.begin() + static_cast<std::ptrdiff_t>(o * chunk));
  Tensor<T> out(shape, std::move(r));
  if (auto* tape = detail::recording_tape<T>({&x})) {
    auto nx = x.node();
    auto* no = out.node().get();
    tape->record(out, {nx}, [nx, no, s, chunk, skip]() {
      T* gx = detail::grad_sink<T>(nx);
      if (!gx) return;
      for (std::size_t o = 0; o < s.outer; ++o) {
        T* dst = gx + o * s.extent * s.inner + skip;
        const T* g = no->grad.data() + o * chunk;
        for (std::size_t i = 0; i < chunk; ++i) dst[i] += g[i];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Linear algebra

/// [M,K]x[K,N], [B,M,K]x[B,K,N], or [B,M,K]x[K,N] (shared right operand).
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  std::size_t batch = 1;
  bool shared_b = false;
  if (a.rank() == 2 && b.rank() == 2) {
  } else if (a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0)) {
    batch = static_cast<std::size_t>(a.dim(0));
  } else if (a.rank() == 3 && b.rank() == 2) {
    batch = static_cast<std::size_t>(a.dim(0));
    shared_b = true;
  } else {
    throw DimensionError("matmul: unsupported operands " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t m = static_cast<std::size_t>(a.dim(-2));
  const std::size_t k = static_cast<std::size_t>(a.dim(-1));
  const std::size_t n = static_cast<std::size_t>(b.dim(-1));
  if (static_cast<std::size_t>(b.dim(-2)) != k)
    throw DimensionError("matmul: inner extents differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Shape shape = a.rank() == 3 ? Shape{static_cast<int>(batch), static_cast<int>(m), static_cast<int>(n)}
                              : Shape{static_cast<int>(m), static_cast<int>(n)};
  std::vector<T> r(batch * m * n, T(0));
  for (std::size_t bi = 0; bi < batch; ++bi)
    gemm::nn(m, n, k, a.ptr() + bi * m * k, b.ptr() + (shared_b ? 0 : bi * k * n), r.data() + bi * m * n);
  Tensor<T> out(shape, std::move(r));
  if (auto* tape = detail::recording_tape<T>({&a, &b})) {
    auto na = a.node();
    auto nb = b.node();
    auto* no = out.node().get();
    tape->record(out, {na, nb}, [na, nb, no, batch, m, n, k, shared_b]() {
      T* ga = detail::grad_sink<T>(na);
      T* gb = detail::grad_sink<T>(nb);
      const T* g = no->grad.data();
      for (std::size_t bi = 0; bi < batch; ++bi) {
        const T* bb = nb->value.data() + (shared_b ? 0 : bi * k * n);
        if (ga) gemm::nt(m, k, n, g + bi * m * n, bb, ga + bi * m * k);
        if (gb) gemm::tn(k, n, m, na->value.data() + bi * m * k, g + bi * m * n, gb + (shared_b ? 0 : bi * k * n));
      }
    });
  }
  return out;
}

/// Affine map along the last axis: x[..., Cin] * w[Cin, Cout] + b[Cout].
/// `b` may be undefined for a bias-free projection.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b = Tensor<T>()) {
  if (w.rank() != 2) throw DimensionError("linear: weight must be rank 2");
  const std::size_t cin = static_cast<std::size_t>(w.dim(0));
  const std::size_t cout = static_cast<std::size_t>(w.dim(1));
  if (static_cast<std::size_t>(x.dim(-1)) != cin)
    throw DimensionError("linear: input extent " + std::to_string(x.dim(-1)) + " != weight rows " +
                         std::to_string(cin));
  if (b.defined() && (b.numel() != cout)) throw DimensionError("linear: bias extent mismatch");
  const std::size_t rows = x.numel() / cin;
  Shape shape = x.shape();
  shape.back() = static_cast<int>(cout);
  std::vector<T> r(rows * cout);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cout; ++j) r[i * cout + j] = b.defined() ? b[j] : T(0);
  gemm::nn(rows, cout, cin, x.ptr(), w.ptr(), r.data());
  Tensor<T> out(shape, std::move(r));
  if (auto* tape = detail::recording_tape<T>({&x, &w, &b})) {
    auto nx = x.node();
    auto nw = w.node();
    auto nb = b.node();
    auto* no = out.node().get();
    tape->record(out, {nx, nw, nb}, [nx, nw, nb, no, rows, cin, cout]() {
      const T* g = no->grad.data();
      if (T* gx = detail::grad_sink<T>(nx)) gemm::nt(rows, cin, cout, g, nw->value.data(), gx);
      if (T* gw = detail::grad_sink<T>(nw)) gemm::tn(cin, cout, rows, nx->value.data(), g, gw);
      if (T* gb = detail::grad_sink<T>(nb))
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t j = 0; j < cout; ++j) gb[j] += g[i * cout + j];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Normalization

/// Numerically stable softmax along `axis` (max subtracted per slice).
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  axis = detail::normalize_axis(axis, x.rank());
  const auto s = detail::split_at(x.shape(), axis);
  std::vector<T> r(x.numel());
  const T* xv = x.ptr();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.extent * s.inner + i;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t a = 0; a < s.extent; ++a) mx = std::max(mx, xv[base + a * s.inner]);
      if (!std::isfinite(mx)) throw UsageError("softmax: slice has no finite entry");
      T total = T(0);
      for (std::size_t a = 0; a < s.extent; ++a) {
        const T e = std::exp(xv[base + a * s.inner] - mx);
        r[base + a * s.inner] = e;
        total += e;
      }
      for (std::size_t a = 0; a < s.extent; ++a) r[base + a * s.inner] /= total;
    }
  Tensor<T> out(x.shape(), std::move(r));
  if (auto* tape = detail::recording_tape<T>({&x})) {
    auto nx = x.node();
    auto* no = out.node().get();
    tape->record(out, {nx}, [nx, no, s]() {
      T* gx = detail::grad_sink<T>(nx);
      if (!gx) return;
      const T* g = no->grad.data();
      const T* y = no->value.data();
      for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t i = 0; i < s.inner; ++i) {
          const std::size_t base = o * s.extent * s.inner + i;
          T dot = T(0);
          for (std::size_t a = 0; a < s.extent; ++a) dot += g[base + a * s.inner] * y[base + a * s.inner];
          for (std::size_t a = 0; a < s.extent; ++a) {
            const std::size_t idx = base + a * s.inner;
            gx[idx] += y[idx] * (g[idx] - dot);
          }
        }
    });
  }
  return out;
}

/// Layer normalization over the last axis with affine gamma/beta.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5)) {
  const std::size_t c = static_cast<std::size_t>(x.dim(-1));
  if (gamma.numel() != c || beta.numel() != c) throw DimensionError("layer_norm: affine extent mismatch");
  const std::size_t rows = x.numel() / c;
  std::vector<T> r(x.numel());
  std::vector<T> xhat(x.numel());
  std::vector<T> inv_std(rows);
  const T* xv = x.ptr();
  for (std::size_t i = 0; i < rows; ++i) {
    const T* row = xv + i * c;
    T mu = T(0);
    for (std::size_t j = 0; j < c; ++j) mu += row[j];
    mu /= static_cast<T>(c);
    T var = T(0);
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(c);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[i] = is;
    for (std::size_t j = 0; j < c; ++j) {
      const T h = (row[j] - mu) * is;
      xhat[i * c + j] = h;
      r[i * c + j] = h * gamma[j] + beta[j];
    }
  }
  Tensor<T> out(x.shape(), std::move(r));
  if (auto* tape = detail::recording_tape<T>({&x, &gamma, &beta})) {
    auto nx = x.node();
    auto ng = gamma.node();
    auto nb = beta.node();
    auto* no = out.node().get();
    tape->record(out, {nx, ng, nb}, [nx, ng, nb, no, rows, c, xhat = std::move(xhat), inv_std = std::move(inv_std)]() {
      const T* g = no->grad.data();
      T* gx = detail::grad_sink<T>(nx);
      T* gg = detail::grad_sink<T>(ng);
      T* gb = detail::grad_sink<T>(nb);
      const T* gam = ng->value.data();
      for (std::size_t i = 0; i < rows; ++i) {
        const T* gr = g + i * c;
        const T* h = xhat.data() + i * c;
        if (gg)
          for (std::size_t j = 0; j < c; ++j) gg[j] += gr[j] * h[j];
        if (gb)
          for (std::size_t j = 0; j < c; ++j) gb[j] += gr[j];
        if (gx) {
          T mean_gh = T(0), mean_ghh = T(0);
          for (std::size_t j = 0; j < c; ++j) {
            const T gh = gr[j] * gam[j];
            mean_gh += gh;
            mean_ghh += gh * h[j];
          }
          mean_gh /= static_cast<T>(c);
          mean_ghh /= static_cast<T>(c);
          for (std::size_t j = 0; j < c; ++j)
            gx[i * c + j] += inv_std[i] * (gr[j] * gam[j] - mean_gh - h[j] * mean_ghh);
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Lookup and loss

/// Rows of `table` [V, C] selected by `ids`; output shape is `ids_shape` + [C].
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const int> ids, Shape ids_shape) {
  if (table.rank() != 2) throw DimensionError("embedding: table must be rank 2");
  if (shape_numel(ids_shape) != ids.size()) throw DimensionError("embedding: ids shape mismatch");
  const int vocab = table.dim(0);
  const std::size_t c = static_cast<std::size_t>(table.dim(1));
  for (int id : ids)
    if (id < 0 || id >= vocab)
      throw UsageError("token id " + std::to_string(id) + " outside vocabulary of size " + std::to_string(vocab));
  Shape shape = std::move(ids_shape);
  shape.push_back(static_cast<int>(c));
  std::vector<T> r(ids.size() * c);
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy_n(table.ptr() + static_cast<std::size_t>(ids[i]) * c, c, r.begin() + static_cast<std::ptrdiff_t>(i * c));
  Tensor<T> out(shape, std::move(r));
  if (auto* tape = detail::recording_tape<T>({&table})) {
    auto nt = table.node();
    auto* no = out.node().get();
    std::vector<int> saved(ids.begin(), ids.end());
    tape->record(out, {nt}, [nt, no, c, saved = std::move(saved)]() {
      T* gt = detail::grad_sink<T>(nt);
      if (!gt) return;
      for (std::size_t i = 0; i < saved.size(); ++i)
        for (std::size_t j = 0; j < c; ++j) gt[static_cast<std::size_t>(saved[i]) * c + j] += no->grad[i * c + j];
    });
  }
  return out;
}

/// Mean cross-entropy of class scores along `axis` against integer labels.
/// Labels are ordered as the logits with `axis` removed.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels, int axis = 1) {
  axis = detail::normalize_axis(axis, logits.rank());
  const auto s = detail::split_at(logits.shape(), axis);
  if (labels.size() != s.outer * s.inner)
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(s.outer * s.inner) + " positions");
  const std::size_t count = labels.size();
  std::vector<T> prob(logits.numel());
  const T* xv = logits.ptr();
  T loss = T(0);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.extent * s.inner + i;
      const int label = labels[o * s.inner + i];
      if (label < 0 || static_cast<std::size_t>(label) >= s.extent)
        throw UsageError("cross_entropy: label " + std::to_string(label) + " out of range");
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t a = 0; a < s.extent; ++a) mx = std::max(mx, xv[base + a * s.inner]);
      T total = T(0);
      for (std::size_t a = 0; a < s.extent; ++a) {
        const T e = std::exp(xv[base + a * s.inner] - mx);
        prob[base + a * s.inner] = e;
        total += e;
      }
      for (std::size_t a = 0; a < s.extent; ++a) prob[base + a * s.inner] /= total;
      loss += -(xv[base + static_cast<std::size_t>(label) * s.inner] - mx - std::log(total));
    }
  Tensor<T> out = Tensor<T>::scalar(loss / static_cast<T>(count));
  if (auto* tape = detail::recording_tape<T>({&logits})) {
    auto nx = logits.node();
    auto* no = out.node().get();
    std::vector<int> saved(labels.begin(), labels.end());
    tape->record(out, {nx}, [nx, no, s, count, prob = std::move(prob), saved = std::move(saved)]() {
      T* gx = detail::grad_sink<T>(nx);
      if (!gx) return;
      const T g = no->grad[0] / static_cast<T>(count);
      for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t i = 0; i < s.inner; ++i) {
          const std::size_t base = o * s.extent * s.inner + i;
          const std::size_t label = static_cast<std::size_t>(saved[o * s.inner + i]);
          for (std::size_t a = 0; a < s.extent; ++a) {
            const std::size_t idx = base + a * s.inner;
            gx[idx] += g * (prob[idx] - (a == label ? T(1) : T(0)));
          }
        }
    });
  }
  return out;
}

}  // namespace rmsin
