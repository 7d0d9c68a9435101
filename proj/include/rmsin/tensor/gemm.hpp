#pragma once

#include <cstddef>
#include <vector>

// Plain row-major GEMM kernels. Every output element accumulates its terms
// in ascending k order, so results do not depend on blocking.
namespace rmsin::gemm {

/// C[m,n] += A[m,k] * B[k,n]
template <typename T>
void nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    T* c0 = c + (i + 0) * n;
    T* c1 = c + (i + 1) * n;
    T* c2 = c + (i + 2) * n;
    T* c3 = c + (i + 3) * n;
    const T* a0 = a + (i + 0) * k;
    const T* a1 = a + (i + 1) * k;
    const T* a2 = a + (i + 2) * k;
    const T* a3 = a + (i + 3) * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T* brow = b + p * n;
      const T w0 = a0[p], w1 = a1[p], w2 = a2[p], w3 = a3[p];
      for (std::size_t j = 0; j < n; ++j) {
        const T bv = brow[j];
        c0[j] += w0 * bv;
        c1[j] += w1 * bv;
        c2[j] += w2 * bv;
        c3[j] += w3 * bv;
      }
    }
  }
  for (; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T* brow = b + p * n;
      const T w = arow[p];
      for (std::size_t j = 0; j < n; ++j) crow[j] += w * brow[j];
    }
  }
}

/// C[m,n] += A[k,m]^T * B[k,n]
template <typename T>
void tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  for (std::size_t p = 0; p < k; ++p) {
    const T* arow = a + p * m;
    const T* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T w = arow[i];
      if (w == T(0)) continue;
      T* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += w * brow[j];
    }
  }
}

/// C[m,n] += A[m,k] * B[n,k]^T
template <typename T>
void nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  std::vector<T> bt(k * n);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
  nn(m, n, k, a, bt.data(), c);
}

}  // namespace rmsin::gemm
