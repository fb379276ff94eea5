#pragma once

#include <cmath>
#include <cstdint>
#include <functional>

namespace lightseg::kern {

// Number of threads the compute kernels may use. Defaults to 1; results are
// bit-identical for any setting because every parallel loop writes disjoint
// output ranges and keeps each element's reduction order fixed.
int num_threads();
void set_num_threads(int n);

namespace detail {
void parallel_run(std::int64_t begin, std::int64_t end,
                  const std::function<void(std::int64_t, std::int64_t)>& body);
}

// Splits [0, n) into contiguous chunks, one per worker.
template <class F>
void parallel_for(std::int64_t n, F&& body) {
  detail::parallel_run(0, n, std::function<void(std::int64_t, std::int64_t)>(
                                 [&](std::int64_t b, std::int64_t e) { body(b, e); }));
}

// Row-major C (MxN) = A (MxK) * B (KxN), or += when accumulate is set.
// The per-element reduction runs over k in ascending order using fused
// multiply-adds, so the result matches an fma-based reference loop exactly.
template <typename T>
void gemm(std::int64_t m, std::int64_t n, std::int64_t k,
          const T* a, const T* b, T* c, bool accumulate);

// Row-major C (MxN) = A (MxKK) * B^T where B is (NxKK), or += when
// accumulate is set. Per-element reduction order over kk is fixed
// (8-lane accumulators combined in a fixed tree), so results are
// thread-count independent.
template <typename T>
void gemm_nt(std::int64_t m, std::int64_t n, std::int64_t kk,
             const T* a, const T* b, T* c, bool accumulate);

// Unfolds an image plane set (C,H,W) into a (C*kh*kw) x (OH*OW) matrix with
// zero fill outside the padded input. Row index is (c*kh + i)*kw + j.
template <typename T>
void im2col(const T* x, std::int64_t c, std::int64_t h, std::int64_t w,
            std::int64_t kh, std::int64_t kw, std::int64_t sh, std::int64_t sw,
            std::int64_t dh, std::int64_t dw, std::int64_t ph, std::int64_t pw,
            std::int64_t oh, std::int64_t ow, T* cols);

// Transpose of im2col: accumulates a column matrix back into image gradients.
template <typename T>
void col2im(const T* cols, std::int64_t c, std::int64_t h, std::int64_t w,
            std::int64_t kh, std::int64_t kw, std::int64_t sh, std::int64_t sw,
            std::int64_t dh, std::int64_t dw, std::int64_t ph, std::int64_t pw,
            std::int64_t oh, std::int64_t ow, T* dx);

}  // namespace lightseg::kern
