#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "rmsin/tensor/gemm.hpp"
#include "rmsin/tensor/ops.hpp"
#include "rmsin/tensor/tensor.hpp"

// Channels-first spatial operations. Feature maps are [C,H,W] or batched
// [B,C,H,W]; out-of-support reads are zero.
namespace rmsin {

namespace detail {

struct MapDims {
  int batch = 1, channels = 1, height = 1, width = 1;
  bool batched = false;
};

inline MapDims map_dims(const Shape& s, const char* op) {
  if (s.size() == 3) return {1, s[0], s[1], s[2], false};
  if (s.size() == 4) return {s[0], s[1], s[2], s[3], true};
  throw DimensionError(std::string(op) + ": expected [C,H,W] or [B,C,H,W], got " + shape_str(s));
}

inline Shape map_shape(const MapDims& d, int c, int h, int w) {
  if (d.batched) return {d.batch, c, h, w};
  return {c, h, w};
}

inline int conv_extent(int in, int k, int stride, int pad) { return (in + 2 * pad - k) / stride + 1; }

/// Output gathers input at `index`; gradient scatters back.
template <typename T>
Tensor<T> gather(const Tensor<T>& x, Shape shape, std::vector<std::size_t> index) {
  std::vector<T> r(index.size());
  const T* xv = x.ptr();
  for (std::size_t i = 0; i < index.size(); ++i) r[i] = xv[index[i]];
  Tensor<T> out(std::move(shape), std::move(r));
  if (auto* tape = recording_tape<T>({&x})) {
    auto nx = x.node();
    auto* no = out.node().get();
    tape->record(out, {nx}, [nx, no, index = std::move(index)]() {
      T* gx = grad_sink<T>(nx);
      if (!gx) return;
      for (std::size_t i = 0; i < index.size(); ++i) gx[index[i]] += no->grad[i];
    });
  }
  return out;
}

/// Four-neighbour bilinear weights for a real coordinate; `dy*`/`dx*` are the
/// weight derivatives with respect to the coordinate.
template <typename T>
struct BilinearTap {
  int y0 = 0, x0 = 0;
  T w[4]{};   // (y0,x0), (y0,x0+1), (y0+1,x0), (y0+1,x0+1)
  T dy[4]{};
  T dx[4]{};

  BilinearTap(T y, T x) {
    const T fy0 = std::floor(y);
    const T fx0 = std::floor(x);
    y0 = static_cast<int>(fy0);
    x0 = static_cast<int>(fx0);
    const T fy = y - fy0;
    const T fx = x - fx0;
    w[0] = (T(1) - fy) * (T(1) - fx);
    w[1] = (T(1) - fy) * fx;
    w[2] = fy * (T(1) - fx);
    w[3] = fy * fx;
    dy[0] = -(T(1) - fx);
    dy[1] = -fx;
    dy[2] = T(1) - fx;
    dy[3] = fx;
    dx[0] = -(T(1) - fy);
    dx[1] = T(1) - fy;
    dx[2] = -fy;
    dx[3] = fy;
  }

  int row(int q) const { return y0 + (q >> 1); }
  int col(int q) const { return x0 + (q & 1); }
};

template <typename T>
void im2col(const T* x, int c, int h, int w, int k, int stride, int pad, int ho, int wo, T* col) {
  const std::size_t plane = static_cast<std::size_t>(ho) * static_cast<std::size_t>(wo);
  for (int ci = 0; ci < c; ++ci)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        T* dst = col + (static_cast<std::size_t>(ci * k + ky) * k + kx) * plane;
        const T* src = x + static_cast<std::size_t>(ci) * h * w;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride + ky - pad;
          T* drow = dst + static_cast<std::size_t>(oy) * wo;
          if (iy < 0 || iy >= h) {
            std::fill(drow, drow + wo, T(0));
            continue;
          }
          const T* srow = src + static_cast<std::size_t>(iy) * w;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride + kx - pad;
            drow[ox] = (ix >= 0 && ix < w) ? srow[ix] : T(0);
          }
        }
      }
}

template <typename T>
void col2im(const T* col, int c, int h, int w, int k, int stride, int pad, int ho, int wo, T* x) {
  const std::size_t plane = static_cast<std::size_t>(ho) * static_cast<std::size_t>(wo);
  for (int ci = 0; ci < c; ++ci)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const T* src = col + (static_cast<std::size_t>(ci * k + ky) * k + kx) * plane;
        T* dst = x + static_cast<std::size_t>(ci) * h * w;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= h) continue;
          const T* srow = src + static_cast<std::size_t>(oy) * wo;
          T* drow = dst + static_cast<std::size_t>(iy) * w;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride + kx - pad;
            if (ix >= 0 && ix < w) drow[ix] += srow[ox];
          }
        }
      }
}

}  // namespace detail

/// Dense 2-D convolution with zero padding. `b` may be undefined.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride, int pad) {
  const auto d = detail::map_dims(x.shape(), "conv2d");
  if (w.rank() != 4 || w.dim(2) != w.dim(3)) throw DimensionError("conv2d: weight must be [Co,Ci,k,k]");
  const int cout = w.dim(0), cin = w.dim(1), k = w.dim(2);
  if (cin != d.channels)
    throw DimensionError("conv2d: input has " + std::to_string(d.channels) + " channels, weight expects " +
                         std::to_string(cin));
  if (k % 2 == 0) throw DimensionError("conv2d: kernel size must be odd");
  if (stride < 1 || pad < 0) throw UsageError("conv2d: stride must be >= 1 and pad >= 0");
  if (d.height + 2 * pad < k || d.width + 2 * pad < k) throw DimensionError("conv2d: kernel larger than padded input");
  if (b.defined() && b.numel() != static_cast<std::size_t>(cout)) throw DimensionError("conv2d: bias extent mismatch");
  const int ho = detail::conv_extent(d.height, k, stride, pad);
  const int wo = detail::conv_extent(d.width, k, stride, pad);
  const std::size_t plane = static_cast<std::size_t>(ho) * wo;
  const std::size_t kdim = static_cast<std::size_t>(cin) * k * k;
  const std::size_t in_size = static_cast<std::size_t>(cin) * d.height * d.width;
  const std::size_t out_size = static_cast<std::size_t>(cout) * plane;
  const bool pointwise = k == 1 && stride == 1 && pad == 0;
  std::vector<T> r(static_cast<std::size_t>(d.batch) * out_size);
  std::vector<T> col(pointwise ? 0 : kdim * plane);
  for (int bi = 0; bi < d.batch; ++bi) {
    T* o = r.data() + bi * out_size;
    for (int co = 0; co < cout; ++co) std::fill(o + co * plane, o + (co + 1) * plane, b.defined() ? b[co] : T(0));
    const T* src = x.ptr() + bi * in_size;
    if (!pointwise) {
      detail::im2col(src, cin, d.height, d.width, k, stride, pad, ho, wo, col.data());
      src = col.data();
    }
    gemm::nn(static_cast<std::size_t>(cout), plane, kdim, w.ptr(), src, o);
  }
  Tensor<T> out(detail::map_shape(d, cout, ho, wo), std::move(r));
  if (auto* tape = detail::recording_tape<T>({&x, &w, &b})) {
    auto nx = x.node();
    auto nw = w.node();
    auto nb = b.node();
    auto* no = out.node().get();
    tape->record(out, {nx, nw, nb}, [=]() {
      T* gx = detail::grad_sink<T>(nx);
      T* gw = detail::grad_sink<T>(nw);
      T* gb = detail::grad_sink<T>(nb);
      std::vector<T> colbuf(pointwise ? 0 : kdim * plane);
      std::vector<T> dcol(pointwise ? 0 : kdim * plane);
      for (int bi = 0; bi < d.batch; ++bi) {
        const T* g = no->grad.data() + bi * out_size;
        if (gb)
          for (int co = 0; co < cout; ++co) {
            T acc = T(0);
            for (std::size_t p = 0; p < plane; ++p) acc += g[co * plane + p];
            gb[co] += acc;
          }
        const T* src = nx->value.data() + bi * in_size;
        if (gw) {
          if (!pointwise) {
            detail::im2col(src, cin, d.height, d.width, k, stride, pad, ho, wo, colbuf.data());
            src = colbuf.data();
          }
          gemm::nt(static_cast<std::size_t>(cout), kdim, plane, g, src, gw);
        }
        if (gx) {
          if (pointwise) {
            gemm::tn(kdim, plane, static_cast<std::size_t>(cout), nw->value.data(), g, gx + bi * in_size);
          } else {
            std::fill(dcol.begin(), dcol.end(), T(0));
            gemm::tn(kdim, plane, static_cast<std::size_t>(cout), nw->value.data(), g, dcol.data());
            detail::col2im(dcol.data(), cin, d.height, d.width, k, stride, pad, ho, wo, gx + bi * in_size);
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, int stride, int pad) {
  return conv2d(x, w, Tensor<T>(), stride, pad);
}

/// Channel c convolves only with kernel w[c]. `b` may be undefined.
template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride, int pad) {
  const auto d = detail::map_dims(x.shape(), "depthwise_conv2d");
  if (w.rank() != 3 || w.dim(1) != w.dim(2)) throw DimensionError("depthwise_conv2d: weight must be [C,k,k]");
  const int c = w.dim(0), k = w.dim(1);
  if (c != d.channels)
    throw DimensionError("depthwise_conv2d: input has " + std::to_string(d.channels) + " channels, weight has " +
                         std::to_string(c));
  if (k % 2 == 0) throw DimensionError("depthwise_conv2d: kernel size must be odd");
  if (stride < 1 || pad < 0) throw UsageError("depthwise_conv2d: stride must be >= 1 and pad >= 0");
  if (d.height + 2 * pad < k || d.width + 2 * pad < k)
    throw DimensionError("depthwise_conv2d: kernel larger than padded input");
  if (b.defined() && b.numel() != static_cast<std::size_t>(c)) throw DimensionError("depthwise_conv2d: bias mismatch");
  const int h = d.height, wd = d.width;
  const int ho = detail::conv_extent(h, k, stride, pad);
  const int wo = detail::conv_extent(wd, k, stride, pad);
  std::vector<T> r(static_cast<std::size_t>(d.batch) * c * ho * wo);
  const T* xv = x.ptr();
  const T* wv = w.ptr();
  for (int bi = 0; bi < d.batch; ++bi)
    for (int ch = 0; ch < c; ++ch) {
      const T* src = xv + (static_cast<std::size_t>(bi) * c + ch) * h * wd;
      const T* ker = wv + static_cast<std::size_t>(ch) * k * k;
      T* dst = r.data() + (static_cast<std::size_t>(bi) * c + ch) * ho * wo;
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox) {
          T acc = b.defined() ? b[ch] : T(0);
          for (int ky = 0; ky < k; ++ky) {
            const int iy = oy * stride + ky - pad;
            if (iy < 0 || iy >= h) continue;
            for (int kx = 0; kx < k; ++kx) {
              const int ix = ox * stride + kx - pad;
              if (ix < 0 || ix >= wd) continue;
              acc += ker[ky * k + kx] * src[iy * wd + ix];
            }
          }
          dst[oy * wo + ox] = acc;
        }
    }
  Tensor<T> out(detail::map_shape(d, c, ho, wo), std::move(r));
  if (auto* tape = detail::recording_tape<T>({&x, &w, &b})) {
    auto nx = x.node();
    auto nw = w.node();
    auto nb = b.node();
    auto* no = out.node().get();
    tape->record(out, {nx, nw, nb}, [=]() {
      T* gx = detail::grad_sink<T>(nx);
      T* gw = detail::grad_sink<T>(nw);
      T* gb = detail::grad_sink<T>(nb);
      const T* xv = nx->value.data();
      const T* wv = nw->value.data();
      for (int bi = 0; bi < d.batch; ++bi)
        for (int ch = 0; ch < c; ++ch) {
          const std::size_t in_off = (static_cast<std::size_t>(bi) * c + ch) * h * wd;
          const T* g = no->grad.data() + (static_cast<std::size_t>(bi) * c + ch) * ho * wo;
          const T* ker = wv + static_cast<std::size_t>(ch) * k * k;
          for (int oy = 0; oy < ho; ++oy)
            for (int ox = 0; ox < wo; ++ox) {
              const T go = g[oy * wo + ox];
              if (gb) gb[ch] += go;
              for (int ky = 0; ky < k; ++ky) {
                const int iy = oy * stride + ky - pad;
                if (iy < 0 || iy >= h) continue;
                for (int kx = 0; kx < k; ++kx) {
                  const int ix = ox * stride + kx - pad;
                  if (ix < 0 || ix >= wd) continue;
                  if (gx) gx[in_off + iy * wd + ix] += go * ker[ky * k + kx];
                  if (gw) gw[static_cast<std::size_t>(ch) * k * k + ky * k + kx] += go * xv[in_off + iy * wd + ix];
                }
              }
            }
        }
    });
  }
  return out;
}

template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& w, int stride, int pad) {
  return depthwise_conv2d(x, w, Tensor<T>(), stride, pad);
}

/// Window mean without padding.
template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& x, int k, int stride) {
  const auto d = detail::map_dims(x.shape(), "avg_pool2d");
  if (k < 1 || stride < 1) throw UsageError("avg_pool2d: kernel and stride must be >= 1");
  if (k > d.height || k > d.width)
    throw DimensionError("avg_pool2d: kernel " + std::to_string(k) + " exceeds input " + shape_str(x.shape()));
  const int ho = (d.height - k) / stride + 1;
  const int wo = (d.width - k) / stride + 1;
  const std::size_t planes = static_cast<std::size_t>(d.batch) * d.channels;
  const T inv = T(1) / static_cast<T>(k * k);
  std::vector<T> r(planes * ho * wo);
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = x.ptr() + p * d.height * d.width;
    for (int oy = 0; oy < ho; ++oy)
      for (int ox = 0; ox < wo; ++ox) {
        T acc = T(0);
        for (int ky = 0; ky < k; ++ky)
          for (int kx = 0; kx < k; ++kx) acc += src[(oy * stride + ky) * d.width + ox * stride + kx];
        r[p * ho * wo + oy * wo + ox] = acc * inv;
      }
  }
  Tensor<T> out(detail::map_shape(d, d.channels, ho, wo), std::move(r));
  if (auto* tape = detail::recording_tape<T>({&x})) {
    auto nx = x.node();
    auto* no = out.node().get();
    tape->record(out, {nx}, [=]() {
      T* gx = detail::grad_sink<T>(nx);
      if (!gx) return;
      for (std::size_t p = 0; p < planes; ++p)
        for (int oy = 0; oy < ho; ++oy)
          for (int ox = 0; ox < wo; ++ox) {
            const T g = no->grad[p * ho * wo + oy * wo + ox] * inv;
            for (int ky = 0; ky < k; ++ky)
              for (int kx = 0; kx < k; ++kx) gx[p * d.height * d.width + (oy * stride + ky) * d.width + ox * stride + kx] += g;
          }
    });
  }
  return out;
}

namespace detail {

/// Source taps for align-corners-false resizing along one axis.
struct ResizeTaps {
  std::vector<int> lo, hi;
  std::vector<double> frac;
};

inline ResizeTaps resize_taps(int in, int out) {
  ResizeTaps t;
  const double ratio = static_cast<double>(in) / out;
  for (int i = 0; i < out; ++i) {
    double src = (i + 0.5) * ratio - 0.5;
    if (src < 0) src = 0;
    int lo = static_cast<int>(std::floor(src));
    if (lo > in - 1) lo = in - 1;
    const int hi = std::min(lo + 1, in - 1);
    t.lo.push_back(lo);
    t.hi.push_back(hi);
    t.frac.push_back(src - lo);
  }
  return t;
}

}  // namespace detail

/// Bilinear upsampling to (height, width), align-corners-false.
template <typename T>
Tensor<T> upsample_bilinear(const Tensor<T>& x, int height, int width) {
  const auto d = detail::map_dims(x.shape(), "upsample_bilinear");
  if (height < d.height || width < d.width)
    throw DimensionError("upsample_bilinear: target " + std::to_string(height) + "x" + std::to_string(width) +
                         " is smaller than input " + shape_str(x.shape()));
  const auto ty = detail::resize_taps(d.height, height);
  const auto tx = detail::resize_taps(d.width, width);
  const std::size_t planes = static_cast<std::size_t>(d.batch) * d.channels;
  const std::size_t in_plane = static_cast<std::size_t>(d.height) * d.width;
  const std::size_t out_plane = static_cast<std::size_t>(height) * width;
  std::vector<T> r(planes * out_plane);
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = x.ptr() + p * in_plane;
    T* dst = r.data() + p * out_plane;
    for (int oy = 0; oy < height; ++oy) {
      const T fy = static_cast<T>(ty.frac[oy]);
      const T* r0 = src + ty.lo[oy] * d.width;
      const T* r1 = src + ty.hi[oy] * d.width;
      for (int ox = 0; ox < width; ++ox) {
        const T fx = static_cast<T>(tx.frac[ox]);
        const T top = r0[tx.lo[ox]] + (r0[tx.hi[ox]] - r0[tx.lo[ox]]) * fx;
        const T bot = r1[tx.lo[ox]] + (r1[tx.hi[ox]] - r1[tx.lo[ox]]) * fx;
        dst[oy * width + ox] = top + (bot - top) * fy;
      }
    }
  }
  Tensor<T> out(detail::map_shape(d, d.channels, height, width), std::move(r));
  if (auto* tape = detail::recording_tape<T>({&x})) {
    auto nx = x.node();
    auto* no = out.node().get();
    tape->record(out, {nx}, [=]() {
      T* gx = detail::grad_sink<T>(nx);
      if (!gx) return;
      for (std::size_t p = 0; p < planes; ++p) {
        const T* g = no->grad.data() + p * out_plane;
        T* dst = gx + p * in_plane;
        for (int oy = 0; oy < height; ++oy) {
          const T fy = static_cast<T>(ty.frac[oy]);
          for (int ox = 0; ox < width; ++ox) {
            const T fx = static_cast<T>(tx.frac[ox]);
            const T go = g[oy * width + ox];
            dst[ty.lo[oy] * d.width + tx.lo[ox]] += go * (T(1) - fy) * (T(1) - fx);
            dst[ty.lo[oy] * d.width + tx.hi[ox]] += go * (T(1) - fy) * fx;
            dst[ty.hi[oy] * d.width + tx.lo[ox]] += go * fy * (T(1) - fx);
            dst[ty.hi[oy] * d.width + tx.hi[ox]] += go * fy * fx;
          }
        }
      }
    });
  }
  return out;
}

/// Samples grid [C,H,W] at points [P,2] given as (y, x) pixel coordinates.
/// Returns [C,P]; neighbours outside the grid read as zero. Differentiable
/// with respect to both the grid and the point coordinates.
template <typename T>
Tensor<T> bilinear_sample(const Tensor<T>& grid, const Tensor<T>& points) {
  if (grid.rank() != 3) throw DimensionError("bilinear_sample: grid must be [C,H,W]");
  if (points.rank() != 2 || points.dim(1) != 2) throw DimensionError("bilinear_sample: points must be [P,2]");
  const int c = grid.dim(0), h = grid.dim(1), w = grid.dim(2);
  const int np = points.dim(0);
  std::vector<detail::BilinearTap<T>> taps;
  taps.reserve(static_cast<std::size_t>(np));
  for (int p = 0; p < np; ++p) taps.emplace_back(points[2 * p], points[2 * p + 1]);
  auto inside = [h, w](int y, int x) { return y >= 0 && y < h && x >= 0 && x < w; };
  std::vector<T> r(static_cast<std::size_t>(c) * np, T(0));
  for (int ch = 0; ch < c; ++ch) {
    const T* g = grid.ptr() + static_cast<std::size_t>(ch) * h * w;
    for (int p = 0; p < np; ++p) {
      const auto& t = taps[p];
      T acc = T(0);
      for (int q = 0; q < 4; ++q)
        if (inside(t.row(q), t.col(q))) acc += t.w[q] * g[t.row(q) * w + t.col(q)];
      r[static_cast<std::size_t>(ch) * np + p] = acc;
    }
  }
  Tensor<T> out(Shape{c, np}, std::move(r));
  if (auto* tape = detail::recording_tape<T>({&grid, &points})) {
    auto ng = grid.node();
    auto np_node = points.node();
    auto* no = out.node().get();
    tape->record(out, {ng, np_node}, [=, taps = std::move(taps)]() {
      T* gg = detail::grad_sink<T>(ng);
      T* gp = detail::grad_sink<T>(np_node);
      for (int ch = 0; ch < c; ++ch) {
        const T* gv = ng->value.data() + static_cast<std::size_t>(ch) * h * w;
        for (int p = 0; p < np; ++p) {
          const T go = no->grad[static_cast<std::size_t>(ch) * np + p];
          const auto& t = taps[p];
          for (int q = 0; q < 4; ++q) {
            if (!inside(t.row(q), t.col(q))) continue;
            const std::size_t idx = static_cast<std::size_t>(t.row(q)) * w + t.col(q);
            if (gg) gg[static_cast<std::size_t>(ch) * h * w + idx] += go * t.w[q];
            if (gp) {
              gp[2 * p] += go * t.dy[q] * gv[idx];
              gp[2 * p + 1] += go * t.dx[q] * gv[idx];
            }
          }
        }
      }
    });
  }
  return out;
}

/// 2x2 space-to-depth: [C,H,W] -> [4C,H/2,W/2]. Channel block q holds the
/// pixel at (row, col) offset (0,0), (1,0), (0,1), (1,1) for q = 0..3.
template <typename T>
Tensor<T> space_to_depth(const Tensor<T>& x) {
  const auto d = detail::map_dims(x.shape(), "space_to_depth");
  if (d.height % 2 || d.width % 2)
    throw DimensionError("space_to_depth: extents must be even, got " + shape_str(x.shape()));
  const int ho = d.height / 2, wo = d.width / 2;
  static constexpr int kOffY[4] = {0, 1, 0, 1};
  static constexpr int kOffX[4] = {0, 0, 1, 1};
  std::vector<std::size_t> index;
  index.reserve(x.numel());
  for (int bi = 0; bi < d.batch; ++bi)
    for (int q = 0; q < 4; ++q)
      for (int ch = 0; ch < d.channels; ++ch)
        for (int oy = 0; oy < ho; ++oy)
          for (int ox = 0; ox < wo; ++ox)
            index.push_back(((static_cast<std::size_t>(bi) * d.channels + ch) * d.height + 2 * oy + kOffY[q]) *
                                d.width +
                            2 * ox + kOffX[q]);
  return detail::gather(x, detail::map_shape(d, 4 * d.channels, ho, wo), std::move(index));
}

/// Per-channel batch normalization. In training mode statistics come from
/// the batch and the running buffers are updated with `momentum`; in eval
/// mode the running buffers are used.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, Tensor<T>& running_mean,
                     Tensor<T>& running_var, bool training, T momentum = T(0.1), T eps = T(1e-5)) {
  const auto d = detail::map_dims(x.shape(), "batch_norm");
  const int c = d.channels;
  const std::size_t cs = static_cast<std::size_t>(c);
  if (gamma.numel() != cs || beta.numel() != cs || running_mean.numel() != cs || running_var.numel() != cs)
    throw DimensionError("batch_norm: parameter extent mismatch for " + std::to_string(c) + " channels");
  const std::size_t plane = static_cast<std::size_t>(d.height) * d.width;
  const std::size_t count = static_cast<std::size_t>(d.batch) * plane;
  std::vector<T> mu(cs), inv_std(cs);
  const T* xv = x.ptr();
  for (int ch = 0; ch < c; ++ch) {
    if (training) {
      T m = T(0);
      for (int bi = 0; bi < d.batch; ++bi) {
        const T* src = xv + (static_cast<std::size_t>(bi) * c + ch) * plane;
        for (std::size_t i = 0; i < plane; ++i) m += src[i];
      }
      m /= static_cast<T>(count);
      T v = T(0);
      for (int bi = 0; bi < d.batch; ++bi) {
        const T* src = xv + (static_cast<std::size_t>(bi) * c + ch) * plane;
        for (std::size_t i = 0; i < plane; ++i) v += (src[i] - m) * (src[i] - m);
      }
      const T biased = v / static_cast<T>(count);
      const T unbiased = count > 1 ? v / static_cast<T>(count - 1) : biased;
      mu[ch] = m;
      inv_std[ch] = T(1) / std::sqrt(biased + eps);
      auto rm = running_mean.mutable_data();
      auto rv = running_var.mutable_data();
      rm[ch] = (T(1) - momentum) * rm[ch] + momentum * m;
      rv[ch] = (T(1) - momentum) * rv[ch] + momentum * unbiased;
    } else {
      mu[ch] = running_mean[ch];
      inv_std[ch] = T(1) / std::sqrt(running_var[ch] + eps);
    }
  }
  std::vector<T> r(x.numel());
  std::vector<T> xhat(x.numel());
  for (int bi = 0; bi < d.batch; ++bi)
    for (int ch = 0; ch < c; ++ch) {
      const std::size_t off = (static_cast<std::size_t>(bi) * c + ch) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        const T h = (xv[off + i] - mu[ch]) * inv_std[ch];
        xhat[off + i] = h;
        r[off + i] = h * gamma[ch] + beta[ch];
      }
    }
  Tensor<T> out(x.shape(), std::move(r));
  if (auto* tape = detail::recording_tape<T>({&x, &gamma, &beta})) {
    auto nx = x.node();
    auto ng = gamma.node();
    auto nb = beta.node();
    auto* no = out.node().get();
    tape->record(out, {nx, ng, nb}, [=, xhat = std::move(xhat), inv_std = std::move(inv_std)]() {
      T* gx = detail::grad_sink<T>(nx);
      T* gg = detail::grad_sink<T>(ng);
      T* gb = detail::grad_sink<T>(nb);
      const T* g = no->grad.data();
      for (int ch = 0; ch < c; ++ch) {
        T sum_g = T(0), sum_gh = T(0);
        for (int bi = 0; bi < d.batch; ++bi) {
          const std::size_t off = (static_cast<std::size_t>(bi) * c + ch) * plane;
          for (std::size_t i = 0; i < plane; ++i) {
            sum_g += g[off + i];
            sum_gh += g[off + i] * xhat[off + i];
          }
        }
        if (gg) gg[ch] += sum_gh;
        if (gb) gb[ch] += sum_g;
        if (!gx) continue;
        const T gam = ng->value[ch];
        const T n = static_cast<T>(count);
        for (int bi = 0; bi < d.batch; ++bi) {
          const std::size_t off = (static_cast<std::size_t>(bi) * c + ch) * plane;
          for (std::size_t i = 0; i < plane; ++i) {
            if (training)
              gx[off + i] += gam * inv_std[ch] * (g[off + i] - sum_g / n - xhat[off + i] * sum_gh / n);
            else
              gx[off + i] += gam * inv_std[ch] * g[off + i];
          }
        }
      }
    });
  }
  return out;
}

}  // namespace rmsin
