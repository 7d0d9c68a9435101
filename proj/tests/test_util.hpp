#pragma once

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "rmsin/nn/layers.hpp"
#include "rmsin/tensor/tensor.hpp"

namespace testutil {

using rmsin::Rng;
using rmsin::Shape;
using T64 = rmsin::Tensor<double>;
using T32 = rmsin::Tensor<float>;

inline T64 rand64(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(rmsin::shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return T64(std::move(shape), std::move(v));
}

inline T32 rand32(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<float> v(rmsin::shape_numel(shape));
  for (auto& x : v) x = static_cast<float>(rng.uniform(lo, hi));
  return T32(std::move(shape), std::move(v));
}

inline std::vector<double> vec(const T64& t) { return {t.data().begin(), t.data().end()}; }

template <typename T>
double max_abs_diff(std::span<const T> a, std::span<const double> b) {
  EXPECT_EQ(a.size(), b.size());
  double m = 0.0;
  for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i)
    m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
  return m;
}

template <typename T>
bool bitwise_equal(std::span<const T> a, std::span<const T> b) {
  return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin());
}

/// Scalar probe loss sum(y * r) with a fixed random weighting r.
inline T64 probe(const T64& y, const T64& r) { return rmsin::sum(rmsin::mul(y, r)); }

}  // namespace testutil
