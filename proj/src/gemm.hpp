#pragma once

#include <cstdint>

namespace levit {

// C (m x n) = op(A) * op(B), or C += ... when `accumulate`. op(A) is m x k and
// op(B) is k x n; leading dimensions refer to the stored (untransposed) rows.
// Backed by single-threaded OpenBLAS; defined for float and double.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k, const T* a,
          std::int64_t lda, const T* b, std::int64_t ldb, T* c, std::int64_t ldc, bool accumulate);

}  // namespace levit
