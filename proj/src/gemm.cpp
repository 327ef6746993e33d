#include "gemm.hpp"

#include <algorithm>
#include <vector>

namespace vidistill {

namespace {

template <typename T>
struct Blocking;
// 8 rows × 64 floats (or 32 doubles) keeps the accumulator tile in 32
// vector registers on AVX-512 targets.
template <>
struct Blocking<float> {
  static constexpr std::size_t kRows = 8;
  static constexpr std::size_t kCols = 64;
  static constexpr std::size_t kLanes = 16;
};
template <>
struct Blocking<double> {
  static constexpr std::size_t kRows = 8;
  static constexpr std::size_t kCols = 32;
  static constexpr std::size_t kLanes = 8;
};

// acc[MR][NR] over k, reading B rows at stride ldb.
template <typename T, std::size_t MR, std::size_t NR>
inline void outer_kernel(std::size_t k, const T* a, std::size_t lda, const T* b, std::size_t ldb,
                         T* c, std::size_t ldc, std::size_t cols, bool accumulate) {
  T acc[MR][NR];
  for (std::size_t r = 0; r < MR; ++r)
    for (std::size_t j = 0; j < NR; ++j) acc[r][j] = T(0);
  for (std::size_t p = 0; p < k; ++p) {
    const T* bp = b + p * ldb;
    for (std::size_t r = 0; r < MR; ++r) {
      const T av = a[r * lda + p];
      for (std::size_t j = 0; j < NR; ++j) acc[r][j] += av * bp[j];
    }
  }
  for (std::size_t r = 0; r < MR; ++r) {
    T* cr = c + r * ldc;
    if (accumulate) {
      for (std::size_t j = 0; j < cols; ++j) cr[j] += acc[r][j];
    } else {
      for (std::size_t j = 0; j < cols; ++j) cr[j] = acc[r][j];
    }
  }
}

template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t lda,
             const T* b, std::size_t ldb_in, T* c, std::size_t ldc, bool accumulate) {
  constexpr std::size_t MR = Blocking<T>::kRows;
  constexpr std::size_t NR = Blocking<T>::kCols;
  std::vector<T> panel;
  for (std::size_t j0 = 0; j0 < n; j0 += NR) {
    const std::size_t cols = std::min(NR, n - j0);
    const T* bp = b + j0;
    std::size_t ldb = ldb_in;
    if (cols < NR) {
      // Zero-padded copy of the ragged last panel.
      panel.assign(k * NR, T(0));
      for (std::size_t p = 0; p < k; ++p)
        std::copy(b + p * ldb_in + j0, b + p * ldb_in + j0 + cols, panel.data() + p * NR);
      bp = panel.data();
      ldb = NR;
    }
    std::size_t i = 0;
    for (; i + MR <= m; i += MR)
      outer_kernel<T, MR, NR>(k, a + i * lda, lda, bp, ldb, c + i * ldc + j0, ldc, cols, accumulate);
    for (; i + 4 <= m; i += 4)
      outer_kernel<T, 4, NR>(k, a + i * lda, lda, bp, ldb, c + i * ldc + j0, ldc, cols, accumulate);
    for (; i < m; ++i)
      outer_kernel<T, 1, NR>(k, a + i * lda, lda, bp, ldb, c + i * ldc + j0, ldc, cols, accumulate);
  }
}

// C[M×N] = A[M×K]·B[N×K]ᵀ as blocked dot products along the contiguous K axis.
template <typename T, std::size_t RA, std::size_t RB>
inline void dot_kernel(std::size_t k, const T* a, std::size_t lda, const T* b, std::size_t ldb,
                       T* c, std::size_t ldc, bool accumulate) {
  constexpr std::size_t V = Blocking<T>::kLanes;
  T acc[RA][RB][V];
  for (std::size_t r = 0; r < RA; ++r)
    for (std::size_t s = 0; s < RB; ++s)
      for (std::size_t l = 0; l < V; ++l) acc[r][s][l] = T(0);
  std::size_t p = 0;
  for (; p + V <= k; p += V) {
    for (std::size_t r = 0; r < RA; ++r) {
      const T* ar = a + r * lda + p;
      for (std::size_t s = 0; s < RB; ++s) {
        const T* bs = b + s * ldb + p;
        for (std::size_t l = 0; l < V; ++l) acc[r][s][l] += ar[l] * bs[l];
      }
    }
  }
  for (std::size_t r = 0; r < RA; ++r)
    for (std::size_t s = 0; s < RB; ++s) {
      T total = T(0);
      for (std::size_t l = 0; l < V; ++l) total += acc[r][s][l];
      for (std::size_t q = p; q < k; ++q) total += a[r * lda + q] * b[s * ldb + q];
      if (accumulate) {
        c[r * ldc + s] += total;
      } else {
        c[r * ldc + s] = total;
      }
    }
}

template <typename T, std::size_t RA>
void gemm_nt_rows(std::size_t n, std::size_t k, const T* a, std::size_t lda, const T* b,
                  std::size_t ldb, T* c, std::size_t ldc, bool accumulate) {
  std::size_t j = 0;
  for (; j + 4 <= n; j += 4) dot_kernel<T, RA, 4>(k, a, lda, b + j * ldb, ldb, c + j, ldc, accumulate);
  for (; j < n; ++j) dot_kernel<T, RA, 1>(k, a, lda, b + j * ldb, ldb, c + j, ldc, accumulate);
}

template <typename T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t lda,
             const T* b, std::size_t ldb, T* c, std::size_t ldc, bool accumulate) {
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4)
    gemm_nt_rows<T, 4>(n, k, a + i * lda, lda, b, ldb, c + i * ldc, ldc, accumulate);
  for (; i < m; ++i) gemm_nt_rows<T, 1>(n, k, a + i * lda, lda, b, ldb, c + i * ldc, ldc, accumulate);
}

}  // namespace

template <typename T>
void gemm_strided(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
                  const T* a, std::size_t lda, const T* b, std::size_t ldb, T* c,
                  std::size_t ldc, bool accumulate) {
  if (m == 0 || n == 0) return;
  if (k == 0) {
    if (!accumulate)
      for (std::size_t i = 0; i < m; ++i) std::fill(c + i * ldc, c + i * ldc + n, T(0));
    return;
  }
  std::vector<T> a_copy;
  if (trans_a) {
    a_copy.resize(m * k);
    for (std::size_t p = 0; p < k; ++p)
      for (std::size_t i = 0; i < m; ++i) a_copy[i * k + p] = a[p * lda + i];
    a = a_copy.data();
    lda = k;
  }
  if (trans_b) {
    gemm_nt(m, n, k, a, lda, b, ldb, c, ldc, accumulate);
  } else {
    gemm_nn(m, n, k, a, lda, b, ldb, c, ldc, accumulate);
  }
}

template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a,
          const T* b, T* c, bool accumulate) {
  gemm_strided(trans_a, trans_b, m, n, k, a, trans_a ? m : k, b, trans_b ? k : n, c, n,
               accumulate);
}

template void gemm<float>(bool, bool, std::size_t, std::size_t, std::size_t, const float*,
                          const float*, float*, bool);
template void gemm<double>(bool, bool, std::size_t, std::size_t, std::size_t, const double*,
                           const double*, double*, bool);
template void gemm_strided<float>(bool, bool, std::size_t, std::size_t, std::size_t, const float*,
                                  std::size_t, const float*, std::size_t, float*, std::size_t,
                                  bool);
template void gemm_strided<double>(bool, bool, std::size_t, std::size_t, std::size_t,
                                   const double*, std::size_t, const double*, std::size_t,
                                   double*, std::size_t, bool);

}  // namespace vidistill
