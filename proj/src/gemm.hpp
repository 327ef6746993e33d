#pragma once

#include <cstddef>

namespace vidistill {

// Row-major C[M×N] = op(A)·op(B) (or += when accumulate is set), where op
// transposes when the matching flag is set. A is stored M×K (K×M when
// transposed), B is stored K×N (N×K when transposed).
//
// The summation order is fixed by (M, N, K) alone, so results are bitwise
// reproducible.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          const T* a, const T* b, T* c, bool accumulate);

// Same product over row-strided operands (leading dimensions in elements).
template <typename T>
void gemm_strided(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
                  const T* a, std::size_t lda, const T* b, std::size_t ldb, T* c,
                  std::size_t ldc, bool accumulate);

extern template void gemm<float>(bool, bool, std::size_t, std::size_t, std::size_t,
                                 const float*, const float*, float*, bool);
extern template void gemm<double>(bool, bool, std::size_t, std::size_t, std::size_t,
                                  const double*, const double*, double*, bool);
extern template void gemm_strided<float>(bool, bool, std::size_t, std::size_t, std::size_t,
                                         const float*, std::size_t, const float*, std::size_t,
                                         float*, std::size_t, bool);
extern template void gemm_strided<double>(bool, bool, std::size_t, std::size_t, std::size_t,
                                          const double*, std::size_t, const double*,
                                          std::size_t, double*, std::size_t, bool);

}  // namespace vidistill
