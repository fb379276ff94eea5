#include "lightseg/kernels.hpp"

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <cstring>
#include <mutex>
#include <thread>
#include <vector>

namespace lightseg::kern {

namespace {

int g_threads = 1;

// Persistent worker pool. Workers pick up one contiguous slice per dispatch;
// slice boundaries depend only on (n, thread count), never on scheduling.
class Pool {
 public:
  explicit Pool(int workers)
      : slice_begin_(workers + 1), slice_end_(workers + 1) {
    for (int i = 0; i < workers; ++i) {
      threads_.emplace_back([this, i] { worker_loop(i); });
    }
  }

  ~Pool() {
    {
      std::lock_guard<std::mutex> lk(mu_);
      stop_ = true;
      ++generation_;
    }
    cv_.notify_all();
    for (auto& t : threads_) t.join();
  }

  int width() const { return static_cast<int>(threads_.size()) + 1; }

  void run(std::int64_t begin, std::int64_t end,
           const std::function<void(std::int64_t, std::int64_t)>& body) {
    const std::int64_t n = end - begin;
    const int w = width();
    {
      std::lock_guard<std::mutex> lk(mu_);
      body_ = &body;
      for (int i = 0; i < w; ++i) {
        slice_begin_[i] = begin + n * i / w;
        slice_end_[i] = begin + n * (i + 1) / w;
      }
      pending_ = static_cast<int>(threads_.size());
      ++generation_;
    }
    cv_.notify_all();
    // caller runs the last slice
    const int me = w - 1;
    if (slice_begin_[me] < slice_end_[me]) body(slice_begin_[me], slice_end_[me]);
    std::unique_lock<std::mutex> lk(mu_);
    done_cv_.wait(lk, [this] { return pending_ == 0; });
    body_ = nullptr;
  }

 private:
  void worker_loop(int index) {
    std::uint64_t seen = 0;
    for (;;) {
      std::unique_lock<std::mutex> lk(mu_);
      cv_.wait(lk, [&] { return generation_ != seen; });
      seen = generation_;
      if (stop_) return;
      const auto* body = body_;
      const auto b = slice_begin_[index];
      const auto e = slice_end_[index];
      lk.unlock();
      if (b < e) (*body)(b, e);
      lk.lock();
      if (--pending_ == 0) done_cv_.notify_one();
    }
  }

  std::vector<std::thread> threads_;
  std::vector<std::int64_t> slice_begin_;
  std::vector<std::int64_t> slice_end_;
  const std::function<void(std::int64_t, std::int64_t)>* body_ = nullptr;
  std::mutex mu_;
  std::condition_variable cv_;
  std::condition_variable done_cv_;
  std::uint64_t generation_ = 0;
  int pending_ = 0;
  bool stop_ = false;
};

Pool* g_pool = nullptr;

}  // namespace

int num_threads() { return g_threads; }

void set_num_threads(int n) {
  n = std::clamp(n, 1, 63);
  if (n == g_threads) return;
  delete g_pool;
  g_pool = nullptr;
  g_threads = n;
  if (n > 1) g_pool = new Pool(n - 1);
}

namespace detail {

void parallel_run(std::int64_t begin, std::int64_t end,
                  const std::function<void(std::int64_t, std::int64_t)>& body) {
  if (end <= begin) return;
  if (g_threads == 1 || !g_pool || end - begin == 1) {
    body(begin, end);
    return;
  }
  g_pool->run(begin, end, body);
}

}  // namespace detail

namespace {

// __builtin_fma vectorizes under -march=native where std::fma does not;
// semantics are identical (single rounding).
inline float fmadd(float a, float b, float c) { return __builtin_fmaf(a, b, c); }
inline double fmadd(double a, double b, double c) { return __builtin_fma(a, b, c); }

// Cache blocking: B panels of KC x NC stay resident while every row of C is
// updated, keeping traffic on C instead of streaming B per row.
constexpr std::int64_t KC = 240;
constexpr std::int64_t NC = 3072;

template <typename T>
void gemm_impl(std::int64_t m, std::int64_t n, std::int64_t k,
               const T* a, const T* b, T* c, bool accumulate) {
  if (m <= 0 || n <= 0) return;
  if (!accumulate) {
    parallel_for(m, [&](std::int64_t r0, std::int64_t r1) {
      std::memset(c + r0 * n, 0, static_cast<std::size_t>((r1 - r0) * n) * sizeof(T));
    });
  }
  if (k <= 0) return;
  for (std::int64_t n0 = 0; n0 < n; n0 += NC) {
    const std::int64_t n1 = std::min(n, n0 + NC);
    for (std::int64_t k0 = 0; k0 < k; k0 += KC) {
      const std::int64_t k1 = std::min(k, k0 + KC);
      parallel_for(m, [&](std::int64_t r0, std::int64_t r1) {
        const std::int64_t len = n1 - n0;
        for (std::int64_t r = r0; r < r1; ++r) {
          const T* arow = a + r * k;
          T* __restrict cptr = c + r * n + n0;
          std::int64_t kk = k0;
          // Unrolled by 4 over k: still evaluates the fma chain for each
          // element in ascending k order, so results are bit-identical to
          // the plain loop while C stays in registers.
          for (; kk + 4 <= k1; kk += 4) {
            const T a0 = arow[kk], a1 = arow[kk + 1], a2 = arow[kk + 2],
                    a3 = arow[kk + 3];
            const T* __restrict b0 = b + kk * n + n0;
            const T* __restrict b1 = b0 + n;
            const T* __restrict b2 = b1 + n;
            const T* __restrict b3 = b2 + n;
            for (std::int64_t j = 0; j < len; ++j) {
              T acc = cptr[j];
              acc = fmadd(a0, b0[j], acc);
              acc = fmadd(a1, b1[j], acc);
              acc = fmadd(a2, b2[j], acc);
              acc = fmadd(a3, b3[j], acc);
              cptr[j] = acc;
            }
          }
          for (; kk < k1; ++kk) {
            const T av = arow[kk];
            const T* __restrict brow = b + kk * n + n0;
            for (std::int64_t j = 0; j < len; ++j) {
              cptr[j] = fmadd(av, brow[j], cptr[j]);
            }
          }
        }
      });
    }
  }
}

// Blocked out-of-place transpose: out (cols x rows) from in (rows x cols).
template <typename T>
void transpose_impl(std::int64_t rows, std::int64_t cols, const T* in, T* out) {
  constexpr std::int64_t TB = 32;
  parallel_for((rows + TB - 1) / TB, [&](std::int64_t t0, std::int64_t t1) {
    for (std::int64_t t = t0; t < t1; ++t) {
      const std::int64_t r0 = t * TB;
      const std::int64_t r1 = std::min(rows, r0 + TB);
      for (std::int64_t c0 = 0; c0 < cols; c0 += TB) {
        const std::int64_t c1 = std::min(cols, c0 + TB);
        for (std::int64_t r = r0; r < r1; ++r) {
          for (std::int64_t c = c0; c < c1; ++c) {
            out[c * rows + r] = in[r * cols + c];
          }
        }
      }
    }
  });
}

// A * B^T via a transposed copy of B, so the fast axpy gemm does the work.
template <typename T>
void gemm_nt_impl(std::int64_t m, std::int64_t n, std::int64_t kk,
                  const T* a, const T* b, T* c, bool accumulate) {
  if (m <= 0 || n <= 0) return;
  std::vector<T> bt(static_cast<std::size_t>(kk * n));
  transpose_impl(n, kk, b, bt.data());
  gemm_impl(m, n, kk, a, bt.data(), c, accumulate);
}

template <typename T>
void im2col_impl(const T* x, std::int64_t c, std::int64_t h, std::int64_t w,
                 std::int64_t kh, std::int64_t kw, std::int64_t sh, std::int64_t sw,
                 std::int64_t dh, std::int64_t dw, std::int64_t ph, std::int64_t pw,
                 std::int64_t oh, std::int64_t ow, T* cols) {
  const std::int64_t rows = c * kh * kw;
  const std::int64_t cols_n = oh * ow;
  parallel_for(rows, [&](std::int64_t r0, std::int64_t r1) {
    for (std::int64_t r = r0; r < r1; ++r) {
      const std::int64_t ci = r / (kh * kw);
      const std::int64_t ki = (r / kw) % kh;
      const std::int64_t kj = r % kw;
      const T* xplane = x + ci * h * w;
      T* out = cols + r * cols_n;
      for (std::int64_t oi = 0; oi < oh; ++oi) {
        const std::int64_t ii = oi * sh - ph + ki * dh;
        T* orow = out + oi * ow;
        if (ii < 0 || ii >= h) {
          std::fill(orow, orow + ow, T(0));
          continue;
        }
        const T* xrow = xplane + ii * w;
        for (std::int64_t oj = 0; oj < ow; ++oj) {
          const std::int64_t jj = oj * sw - pw + kj * dw;
          orow[oj] = (jj >= 0 && jj < w) ? xrow[jj] : T(0);
        }
      }
    }
  });
}

template <typename T>
void col2im_impl(const T* cols, std::int64_t c, std::int64_t h, std::int64_t w,
                 std::int64_t kh, std::int64_t kw, std::int64_t sh, std::int64_t sw,
                 std::int64_t dh, std::int64_t dw, std::int64_t ph, std::int64_t pw,
                 std::int64_t oh, std::int64_t ow, T* dx) {
  const std::int64_t cols_n = oh * ow;
  // Parallel over input channels: rows of `cols` for channel ci form a
  // contiguous block, so writes to dx stay disjoint per channel.
  parallel_for(c, [&](std::int64_t c0, std::int64_t c1) {
    for (std::int64_t ci = c0; ci < c1; ++ci) {
      T* xplane = dx + ci * h * w;
      for (std::int64_t ki = 0; ki < kh; ++ki) {
        for (std::int64_t kj = 0; kj < kw; ++kj) {
          const std::int64_t r = (ci * kh + ki) * kw + kj;
          const T* in = cols + r * cols_n;
          for (std::int64_t oi = 0; oi < oh; ++oi) {
            const std::int64_t ii = oi * sh - ph + ki * dh;
            if (ii < 0 || ii >= h) continue;
            T* xrow = xplane + ii * w;
            const T* irow = in + oi * ow;
            for (std::int64_t oj = 0; oj < ow; ++oj) {
              const std::int64_t jj = oj * sw - pw + kj * dw;
              if (jj >= 0 && jj < w) xrow[jj] += irow[oj];
            }
          }
        }
      }
    }
  });
}

}  // namespace

template <typename T>
void gemm(std::int64_t m, std::int64_t n, std::int64_t k,
          const T* a, const T* b, T* c, bool accumulate) {
  gemm_impl(m, n, k, a, b, c, accumulate);
}

template <typename T>
void gemm_nt(std::int64_t m, std::int64_t n, std::int64_t kk,
             const T* a, const T* b, T* c, bool accumulate) {
  gemm_nt_impl(m, n, kk, a, b, c, accumulate);
}

template <typename T>
void im2col(const T* x, std::int64_t c, std::int64_t h, std::int64_t w,
            std::int64_t kh, std::int64_t kw, std::int64_t sh, std::int64_t sw,
            std::int64_t dh, std::int64_t dw, std::int64_t ph, std::int64_t pw,
            std::int64_t oh, std::int64_t ow, T* cols) {
  im2col_impl(x, c, h, w, kh, kw, sh, sw, dh, dw, ph, pw, oh, ow, cols);
}

template <typename T>
void col2im(const T* cols, std::int64_t c, std::int64_t h, std::int64_t w,
            std::int64_t kh, std::int64_t kw, std::int64_t sh, std::int64_t sw,
            std::int64_t dh, std::int64_t dw, std::int64_t ph, std::int64_t pw,
            std::int64_t oh, std::int64_t ow, T* dx) {
  col2im_impl(cols, c, h, w, kh, kw, sh, sw, dh, dw, ph, pw, oh, ow, dx);
}

template void gemm<float>(std::int64_t, std::int64_t, std::int64_t, const float*,
                          const float*, float*, bool);
template void gemm<double>(std::int64_t, std::int64_t, std::int64_t, const double*,
                           const double*, double*, bool);
template void gemm_nt<float>(std::int64_t, std::int64_t, std::int64_t, const float*,
                             const float*, float*, bool);
template void gemm_nt<double>(std::int64_t, std::int64_t, std::int64_t, const double*,
                              const double*, double*, bool);
template void im2col<float>(const float*, std::int64_t, std::int64_t, std::int64_t,
                            std::int64_t, std::int64_t, std::int64_t, std::int64_t,
                            std::int64_t, std::int64_t, std::int64_t, std::int64_t,
                            std::int64_t, std::int64_t, float*);
template void im2col<double>(const double*, std::int64_t, std::int64_t, std::int64_t,
                             std::int64_t, std::int64_t, std::int64_t, std::int64_t,
                             std::int64_t, std::int64_t, std::int64_t, std::int64_t,
                             std::int64_t, std::int64_t, double*);
template void col2im<float>(const float*, std::int64_t, std::int64_t, std::int64_t,
                            std::int64_t, std::int64_t, std::int64_t, std::int64_t,
                            std::int64_t, std::int64_t, std::int64_t, std::int64_t,
                            std::int64_t, std::int64_t, float*);
template void col2im<double>(const double*, std::int64_t, std::int64_t, std::int64_t,
                             std::int64_t, std::int64_t, std::int64_t, std::int64_t,
                             std::int64_t, std::int64_t, std::int64_t, std::int64_t,
                             std::int64_t, std::int64_t, double*);

}  // namespace lightseg::kern
