#include "lightseg/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <memory>

#include "lightseg/kernels.hpp"

namespace lightseg {

namespace {

std::int64_t out_extent(std::int64_t in, std::int64_t k, std::int64_t s,
                        std::int64_t d, std::int64_t p, const char* dim) {
  const std::int64_t eff = d * (k - 1) + 1;
  const std::int64_t out = (in + 2 * p - eff) / s + 1;
  if (in + 2 * p < eff || out < 1) {
    throw std::invalid_argument(std::string("conv2d: output ") + dim +
                                " would be < 1 (input " + std::to_string(in) +
                                ", effective kernel " + std::to_string(eff) +
                                ", pad " + std::to_string(p) + ")");
  }
  return out;
}

}  // namespace

template <typename T>
void check_finite(const Tensor<T>& t, const char* what) {
  for (const T v : t.data()) {
    if (!std::isfinite(v)) {
      throw numeric_error(std::string(what) + ": non-finite value encountered");
    }
  }
}

// ---------------------------------------------------------------------------
// conv2d

template <typename T>
Tensor<T> conv2d(Tape<T>& tape, const Tensor<T>& input, const Tensor<T>& weight,
                 const Tensor<T>* bias, const Conv2dOpts& opts) {
  const Shape4 is = input.shape();
  const Shape4 ws = weight.shape();
  if (is.c != ws.c) {
    throw std::invalid_argument("conv2d: input channel dim C=" + std::to_string(is.c) +
                                " does not match weight Cin=" + std::to_string(ws.c));
  }
  if (opts.stride_h < 1 || opts.stride_w < 1 || opts.dilation_h < 1 ||
      opts.dilation_w < 1 || opts.pad_h < 0 || opts.pad_w < 0) {
    throw std::invalid_argument("conv2d: stride/dilation must be >= 1 and padding >= 0");
  }
  if (bias && bias->shape() != Shape4{1, ws.n, 1, 1}) {
    throw std::invalid_argument("conv2d: bias shape " + bias->shape().str() +
                                " does not match Cout=" + std::to_string(ws.n));
  }
  const std::int64_t oh =
      out_extent(is.h, ws.h, opts.stride_h, opts.dilation_h, opts.pad_h, "height");
  const std::int64_t ow =
      out_extent(is.w, ws.w, opts.stride_w, opts.dilation_w, opts.pad_w, "width");

  const std::int64_t cout = ws.n;
  const std::int64_t kdim = ws.c * ws.h * ws.w;
  const std::int64_t pix = oh * ow;
  const std::int64_t in_plane = is.c * is.h * is.w;
  const std::int64_t out_plane = cout * pix;

  Tensor<T> out = Tensor<T>::zeros({is.n, cout, oh, ow});
  std::vector<T> cols(static_cast<std::size_t>(kdim * pix));
  const T* x = input.data().data();
  const T* w = weight.data().data();
  T* y = out.data().data();

  for (std::int64_t ni = 0; ni < is.n; ++ni) {
    kern::im2col(x + ni * in_plane, is.c, is.h, is.w, ws.h, ws.w, opts.stride_h,
                 opts.stride_w, opts.dilation_h, opts.dilation_w, opts.pad_h,
                 opts.pad_w, oh, ow, cols.data());
    T* yn = y + ni * out_plane;
    if (bias) {
      const T* bv = bias->data().data();
      kern::parallel_for(cout, [&](std::int64_t c0, std::int64_t c1) {
        for (std::int64_t c = c0; c < c1; ++c) {
          std::fill(yn + c * pix, yn + (c + 1) * pix, bv[c]);
        }
      });
    }
    kern::gemm(cout, pix, kdim, w, cols.data(), yn, bias != nullptr);
  }

  if (tape.grad_enabled()) {
    const std::int64_t in_node = tape.node_of(input);
    const std::int64_t w_node = tape.node_of(weight);
    const std::int64_t b_node = bias ? tape.node_of(*bias) : -1;
    std::vector<std::int64_t> nodes = {in_node, w_node};
    if (bias) nodes.push_back(b_node);
    auto xi = input.impl();
    auto wi = weight.impl();
    const Conv2dOpts o = opts;
    tape.record(out, nodes, [=](Tape<T>& t, const std::vector<T>& dy) {
      const Shape4 isb = xi->shape;
      const Shape4 wsb = wi->shape;
      const bool need_dx = t.node_needs_grad(in_node);
      const bool need_dw = t.node_needs_grad(w_node);
      const bool need_db = b_node >= 0 && t.node_needs_grad(b_node);

      std::vector<T> cols2(static_cast<std::size_t>(kdim * pix));
      std::vector<T> dcols;
      std::vector<T> wt;
      if (need_dx) {
        dcols.resize(static_cast<std::size_t>(kdim * pix));
        wt.resize(static_cast<std::size_t>(kdim * cout));
        for (std::int64_t c = 0; c < cout; ++c) {
          for (std::int64_t k = 0; k < kdim; ++k) {
            wt[k * cout + c] = wi->data[c * kdim + k];
          }
        }
      }
      T* dxp = need_dx ? t.grad_slot(in_node, isb.numel()).data() : nullptr;
      T* dwp = need_dw ? t.grad_slot(w_node, wsb.numel()).data() : nullptr;
      T* dbp = need_db ? t.grad_slot(b_node, cout).data() : nullptr;

      for (std::int64_t ni = 0; ni < isb.n; ++ni) {
        const T* dyn = dy.data() + ni * out_plane;
        if (need_dw) {
          kern::im2col(xi->data.data() + ni * in_plane, isb.c, isb.h, isb.w, wsb.h,
                       wsb.w, o.stride_h, o.stride_w, o.dilation_h, o.dilation_w,
                       o.pad_h, o.pad_w, oh, ow, cols2.data());
          kern::gemm_nt(cout, kdim, pix, dyn, cols2.data(), dwp, true);
        }
        if (need_db) {
          for (std::int64_t c = 0; c < cout; ++c) {
            T s = T(0);
            const T* row = dyn + c * pix;
            for (std::int64_t p = 0; p < pix; ++p) s += row[p];
            dbp[c] += s;
          }
        }
        if (need_dx) {
          kern::gemm(kdim, pix, cout, wt.data(), dyn, dcols.data(), false);
          kern::col2im(dcols.data(), isb.c, isb.h, isb.w, wsb.h, wsb.w, o.stride_h,
                       o.stride_w, o.dilation_h, o.dilation_w, o.pad_h, o.pad_w, oh,
                       ow, dxp + ni * in_plane);
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// batchnorm2d

template <typename T>
Tensor<T> batchnorm2d(Tape<T>& tape, const Tensor<T>& input, const Tensor<T>& gamma,
                      const Tensor<T>& beta, Tensor<T>& running_mean,
                      Tensor<T>& running_var, BnMode mode, T momentum, T epsilon) {
  const Shape4 is = input.shape();
  const auto check_vec = [&](const Tensor<T>& v, const char* name) {
    if (v.shape() != Shape4{1, is.c, 1, 1}) {
      throw std::invalid_argument(std::string("batchnorm2d: ") + name + " shape " +
                                  v.shape().str() + " does not match C=" +
                                  std::to_string(is.c));
    }
  };
  check_vec(gamma, "gamma");
  check_vec(beta, "beta");
  check_vec(running_mean, "running_mean");
  check_vec(running_var, "running_var");
  if (epsilon < T(0)) throw std::invalid_argument("batchnorm2d: epsilon must be >= 0");
  const std::int64_t plane = is.h * is.w;
  const std::int64_t m = is.n * plane;
  if (m == 0) {
    throw std::invalid_argument("batchnorm2d: zero batch*spatial extent");
  }

  Tensor<T> out = Tensor<T>::zeros(is);
  const T* x = input.data().data();
  T* y = out.data().data();
  const T* g = gamma.data().data();
  const T* b = beta.data().data();

  auto xhat = std::make_shared<std::vector<T>>();
  auto invstd = std::make_shared<std::vector<T>>(static_cast<std::size_t>(is.c));

  if (mode == BnMode::train) {
    xhat->resize(static_cast<std::size_t>(is.numel()));
    std::vector<T> mean(is.c), var(is.c);
    kern::parallel_for(is.c, [&](std::int64_t c0, std::int64_t c1) {
      for (std::int64_t c = c0; c < c1; ++c) {
        T s = T(0);
        for (std::int64_t ni = 0; ni < is.n; ++ni) {
          const T* row = x + (ni * is.c + c) * plane;
          for (std::int64_t p = 0; p < plane; ++p) s += row[p];
        }
        const T mu = s / static_cast<T>(m);
        T v = T(0);
        for (std::int64_t ni = 0; ni < is.n; ++ni) {
          const T* row = x + (ni * is.c + c) * plane;
          for (std::int64_t p = 0; p < plane; ++p) {
            const T d = row[p] - mu;
            v += d * d;
          }
        }
        v /= static_cast<T>(m);
        mean[c] = mu;
        var[c] = v;
        const T istd = T(1) / std::sqrt(v + epsilon);
        (*invstd)[c] = istd;
        for (std::int64_t ni = 0; ni < is.n; ++ni) {
          const T* row = x + (ni * is.c + c) * plane;
          T* xh = xhat->data() + (ni * is.c + c) * plane;
          T* yr = y + (ni * is.c + c) * plane;
          for (std::int64_t p = 0; p < plane; ++p) {
            const T h = (row[p] - mu) * istd;
            xh[p] = h;
            yr[p] = g[c] * h + b[c];
          }
        }
      }
    });
    T* rm = running_mean.data().data();
    T* rv = running_var.data().data();
    for (std::int64_t c = 0; c < is.c; ++c) {
      rm[c] = (T(1) - momentum) * rm[c] + momentum * mean[c];
      rv[c] = (T(1) - momentum) * rv[c] + momentum * var[c];
    }
  } else {
    const T* rm = running_mean.data().data();
    const T* rv = running_var.data().data();
    for (std::int64_t c = 0; c < is.c; ++c) {
      (*invstd)[c] = T(1) / std::sqrt(rv[c] + epsilon);
    }
    kern::parallel_for(is.n * is.c, [&](std::int64_t p0, std::int64_t p1) {
      for (std::int64_t nc = p0; nc < p1; ++nc) {
        const std::int64_t c = nc % is.c;
        const T sc = g[c] * (*invstd)[c];
        const T sh = b[c] - rm[c] * sc;
        const T* row = x + nc * plane;
        T* yr = y + nc * plane;
        for (std::int64_t p = 0; p < plane; ++p) yr[p] = std::fma(sc, row[p], sh);
      }
    });
  }

  if (tape.grad_enabled()) {
    const std::int64_t in_node = tape.node_of(input);
    const std::int64_t g_node = tape.node_of(gamma);
    const std::int64_t b_node = tape.node_of(beta);
    auto xi = input.impl();
    auto gi = gamma.impl();
    auto rmi = running_mean.impl();
    auto rvi = running_var.impl();
    const Shape4 s = is;
    const T eps = epsilon;
    tape.record(out, {in_node, g_node, b_node},
                [=](Tape<T>& t, const std::vector<T>& dy) {
      const bool need_dx = t.node_needs_grad(in_node);
      const bool need_dg = t.node_needs_grad(g_node);
      const bool need_db = t.node_needs_grad(b_node);
      T* dxp = need_dx ? t.grad_slot(in_node, s.numel()).data() : nullptr;
      T* dgp = need_dg ? t.grad_slot(g_node, s.c).data() : nullptr;
      T* dbp = need_db ? t.grad_slot(b_node, s.c).data() : nullptr;
      const std::int64_t pl = s.h * s.w;
      const std::int64_t mm = s.n * pl;

      if (mode == BnMode::train) {
        kern::parallel_for(s.c, [&](std::int64_t c0, std::int64_t c1) {
          for (std::int64_t c = c0; c < c1; ++c) {
            T s1 = T(0), s2 = T(0);
            for (std::int64_t ni = 0; ni < s.n; ++ni) {
              const T* dr = dy.data() + (ni * s.c + c) * pl;
              const T* xh = xhat->data() + (ni * s.c + c) * pl;
              for (std::int64_t p = 0; p < pl; ++p) {
                s1 += dr[p];
                s2 += dr[p] * xh[p];
              }
            }
            if (dgp) dgp[c] += s2;
            if (dbp) dbp[c] += s1;
            if (dxp) {
              const T k = gi->data[c] * (*invstd)[c];
              const T a1 = s1 / static_cast<T>(mm);
              const T a2 = s2 / static_cast<T>(mm);
              for (std::int64_t ni = 0; ni < s.n; ++ni) {
                const T* dr = dy.data() + (ni * s.c + c) * pl;
                const T* xh = xhat->data() + (ni * s.c + c) * pl;
                T* dx = dxp + (ni * s.c + c) * pl;
                for (std::int64_t p = 0; p < pl; ++p) {
                  dx[p] += k * (dr[p] - a1 - xh[p] * a2);
                }
              }
            }
          }
        });
      } else {
        kern::parallel_for(s.c, [&](std::int64_t c0, std::int64_t c1) {
          for (std::int64_t c = c0; c < c1; ++c) {
            const T istd = T(1) / std::sqrt(rvi->data[c] + eps);
            const T mu = rmi->data[c];
            T s1 = T(0), s2 = T(0);
            for (std::int64_t ni = 0; ni < s.n; ++ni) {
              const T* dr = dy.data() + (ni * s.c + c) * pl;
              const T* xr = xi->data.data() + (ni * s.c + c) * pl;
              for (std::int64_t p = 0; p < pl; ++p) {
                s1 += dr[p];
                s2 += dr[p] * (xr[p] - mu) * istd;
              }
            }
            if (dgp) dgp[c] += s2;
            if (dbp) dbp[c] += s1;
            if (dxp) {
              const T k = gi->data[c] * istd;
              for (std::int64_t ni = 0; ni < s.n; ++ni) {
                const T* dr = dy.data() + (ni * s.c + c) * pl;
                T* dx = dxp + (ni * s.c + c) * pl;
                for (std::int64_t p = 0; p < pl; ++p) dx[p] += k * dr[p];
              }
            }
          }
        });
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// elementwise ops

template <typename T>
Tensor<T> relu(Tape<T>& tape, const Tensor<T>& input) {
  Tensor<T> out = Tensor<T>::zeros(input.shape());
  const T* x = input.data().data();
  T* y = out.data().data();
  kern::parallel_for(input.numel(), [&](std::int64_t b, std::int64_t e) {
    for (std::int64_t i = b; i < e; ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
  });
  if (tape.grad_enabled()) {
    const std::int64_t in_node = tape.node_of(input);
    auto yi = out.impl();
    tape.record(out, {in_node}, [=](Tape<T>& t, const std::vector<T>& dy) {
      if (!t.node_needs_grad(in_node)) return;
      auto& dx = t.grad_slot(in_node, static_cast<std::int64_t>(dy.size()));
      kern::parallel_for(static_cast<std::int64_t>(dy.size()),
                         [&](std::int64_t b, std::int64_t e) {
        for (std::int64_t i = b; i < e; ++i) {
          if (yi->data[i] > T(0)) dx[i] += dy[i];
        }
      });
    });
  }
  return out;
}

template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument("add: shape mismatch " + a.shape().str() + " vs " +
                                b.shape().str());
  }
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* y = out.data().data();
  kern::parallel_for(a.numel(), [&](std::int64_t s, std::int64_t e) {
    for (std::int64_t i = s; i < e; ++i) y[i] = pa[i] + pb[i];
  });
  if (tape.grad_enabled()) {
    const std::int64_t na = tape.node_of(a);
    const std::int64_t nb = tape.node_of(b);
    tape.record(out, {na, nb}, [=](Tape<T>& t, const std::vector<T>& dy) {
      const std::int64_t n = static_cast<std::int64_t>(dy.size());
      for (const std::int64_t node : {na, nb}) {
        if (!t.node_needs_grad(node)) continue;
        auto& dst = t.grad_slot(node, n);
        kern::parallel_for(n, [&](std::int64_t s, std::int64_t e) {
          for (std::int64_t i = s; i < e; ++i) dst[i] += dy[i];
        });
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& input, T constant) {
  Tensor<T> out = Tensor<T>::zeros(input.shape());
  const T* x = input.data().data();
  T* y = out.data().data();
  kern::parallel_for(input.numel(), [&](std::int64_t s, std::int64_t e) {
    for (std::int64_t i = s; i < e; ++i) y[i] = constant * x[i];
  });
  if (tape.grad_enabled()) {
    const std::int64_t in_node = tape.node_of(input);
    tape.record(out, {in_node}, [=](Tape<T>& t, const std::vector<T>& dy) {
      if (!t.node_needs_grad(in_node)) return;
      auto& dx = t.grad_slot(in_node, static_cast<std::int64_t>(dy.size()));
      for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += constant * dy[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> shift(Tape<T>& tape, const Tensor<T>& input, std::vector<T> constant) {
  if (static_cast<std::int64_t>(constant.size()) != input.numel()) {
    throw std::invalid_argument("shift: constant length does not match tensor size");
  }
  Tensor<T> out = Tensor<T>::zeros(input.shape());
  const T* x = input.data().data();
  T* y = out.data().data();
  for (std::int64_t i = 0; i < input.numel(); ++i) y[i] = x[i] + constant[i];
  if (tape.grad_enabled()) {
    const std::int64_t in_node = tape.node_of(input);
    tape.record(out, {in_node}, [=](Tape<T>& t, const std::vector<T>& dy) {
      if (!t.node_needs_grad(in_node)) return;
      auto& dx = t.grad_slot(in_node, static_cast<std::int64_t>(dy.size()));
      for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// maxpool2d

template <typename T>
Tensor<T> maxpool2d(Tape<T>& tape, const Tensor<T>& input, int kernel, int stride,
                    int pad) {
  if (kernel < 1 || stride < 1 || pad < 0) {
    throw std::invalid_argument("maxpool2d: kernel/stride must be >= 1, pad >= 0");
  }
  const Shape4 is = input.shape();
  const std::int64_t oh = (is.h + 2 * pad - kernel) / stride + 1;
  const std::int64_t ow = (is.w + 2 * pad - kernel) / stride + 1;
  if (oh < 1 || ow < 1) {
    throw std::invalid_argument("maxpool2d: output extent would be < 1");
  }
  Tensor<T> out = Tensor<T>::zeros({is.n, is.c, oh, ow});
  auto argmax = std::make_shared<std::vector<std::int32_t>>(
      static_cast<std::size_t>(out.numel()));
  const T* x = input.data().data();
  T* y = out.data().data();
  const std::int64_t plane = is.h * is.w;
  const std::int64_t oplane = oh * ow;

  kern::parallel_for(is.n * is.c, [&](std::int64_t p0, std::int64_t p1) {
    for (std::int64_t nc = p0; nc < p1; ++nc) {
      const T* xp = x + nc * plane;
      T* yp = y + nc * oplane;
      std::int32_t* am = argmax->data() + nc * oplane;
      for (std::int64_t oi = 0; oi < oh; ++oi) {
        for (std::int64_t oj = 0; oj < ow; ++oj) {
          T best = -std::numeric_limits<T>::infinity();
          std::int32_t bidx = -1;
          for (int ki = 0; ki < kernel; ++ki) {
            const std::int64_t ii = oi * stride - pad + ki;
            if (ii < 0 || ii >= is.h) continue;
            for (int kj = 0; kj < kernel; ++kj) {
              const std::int64_t jj = oj * stride - pad + kj;
              if (jj < 0 || jj >= is.w) continue;
              const T v = xp[ii * is.w + jj];
              if (v > best) {
                best = v;
                bidx = static_cast<std::int32_t>(ii * is.w + jj);
              }
            }
          }
          yp[oi * ow + oj] = best;
          am[oi * ow + oj] = bidx;
        }
      }
    }
  });

  if (tape.grad_enabled()) {
    const std::int64_t in_node = tape.node_of(input);
    tape.record(out, {in_node}, [=](Tape<T>& t, const std::vector<T>& dy) {
      if (!t.node_needs_grad(in_node)) return;
      auto& dx = t.grad_slot(in_node, is.numel());
      kern::parallel_for(is.n * is.c, [&](std::int64_t p0, std::int64_t p1) {
        for (std::int64_t nc = p0; nc < p1; ++nc) {
          const std::int32_t* am = argmax->data() + nc * oplane;
          const T* dyp = dy.data() + nc * oplane;
          T* dxp = dx.data() + nc * plane;
          for (std::int64_t p = 0; p < oplane; ++p) {
            if (am[p] >= 0) dxp[am[p]] += dyp[p];
          }
        }
      });
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// bilinear_upsample

namespace {
struct LerpAxis {
  std::vector<std::int64_t> lo, hi;
  std::vector<double> w_hi;
};

inline LerpAxis make_axis(std::int64_t in, int factor) {
  LerpAxis ax;
  const std::int64_t out = in * factor;
  ax.lo.resize(out);
  ax.hi.resize(out);
  ax.w_hi.resize(out);
  for (std::int64_t i = 0; i < out; ++i) {
    const double src = (static_cast<double>(i) + 0.5) / factor - 0.5;
    double f = std::floor(src);
    double t = src - f;
    std::int64_t lo = static_cast<std::int64_t>(f);
    std::int64_t hi = lo + 1;
    if (lo < 0) {
      lo = 0;
      hi = 0;
      t = 0.0;
    }
    if (hi > in - 1) {
      hi = in - 1;
      if (lo > in - 1) lo = in - 1;
      if (lo == hi) t = 0.0;
    }
    ax.lo[i] = lo;
    ax.hi[i] = hi;
    ax.w_hi[i] = t;
  }
  return ax;
}
}  // namespace

template <typename T>
Tensor<T> bilinear_upsample(Tape<T>& tape, const Tensor<T>& input, int factor) {
  if (factor < 1) {
    throw std::invalid_argument("bilinear_upsample: factor must be >= 1, got " +
                                std::to_string(factor));
  }
  const Shape4 is = input.shape();
  if (factor == 1) {
    // identity; still recorded so gradients flow through unchanged
    Tensor<T> out(is, std::vector<T>(input.data().begin(), input.data().end()));
    if (tape.grad_enabled()) {
      const std::int64_t in_node = tape.node_of(input);
      tape.record(out, {in_node}, [=](Tape<T>& t, const std::vector<T>& dy) {
        if (!t.node_needs_grad(in_node)) return;
        auto& dx = t.grad_slot(in_node, static_cast<std::int64_t>(dy.size()));
        for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
      });
    }
    return out;
  }

  const std::int64_t oh = is.h * factor, ow = is.w * factor;
  Tensor<T> out = Tensor<T>::zeros({is.n, is.c, oh, ow});
  const auto ay = make_axis(is.h, factor);
  const auto axw = make_axis(is.w, factor);
  const T* x = input.data().data();
  T* y = out.data().data();
  const std::int64_t plane = is.h * is.w, oplane = oh * ow;

  kern::parallel_for(is.n * is.c, [&](std::int64_t p0, std::int64_t p1) {
    for (std::int64_t nc = p0; nc < p1; ++nc) {
      const T* xp = x + nc * plane;
      T* yp = y + nc * oplane;
      for (std::int64_t oi = 0; oi < oh; ++oi) {
        const std::int64_t r0 = ay.lo[oi], r1 = ay.hi[oi];
        const T ty = static_cast<T>(ay.w_hi[oi]);
        for (std::int64_t oj = 0; oj < ow; ++oj) {
          const std::int64_t c0 = axw.lo[oj], c1 = axw.hi[oj];
          const T tx = static_cast<T>(axw.w_hi[oj]);
          const T top = (T(1) - tx) * xp[r0 * is.w + c0] + tx * xp[r0 * is.w + c1];
          const T bot = (T(1) - tx) * xp[r1 * is.w + c0] + tx * xp[r1 * is.w + c1];
          yp[oi * ow + oj] = (T(1) - ty) * top + ty * bot;
        }
      }
    }
  });

  if (tape.grad_enabled()) {
    const std::int64_t in_node = tape.node_of(input);
    tape.record(out, {in_node}, [=](Tape<T>& t, const std::vector<T>& dy) {
      if (!t.node_needs_grad(in_node)) return;
      auto& dx = t.grad_slot(in_node, is.numel());
      kern::parallel_for(is.n * is.c, [&](std::int64_t p0, std::int64_t p1) {
        for (std::int64_t nc = p0; nc < p1; ++nc) {
          const T* dyp = dy.data() + nc * oplane;
          T* dxp = dx.data() + nc * plane;
          for (std::int64_t oi = 0; oi < oh; ++oi) {
            const std::int64_t r0 = ay.lo[oi], r1 = ay.hi[oi];
            const T ty = static_cast<T>(ay.w_hi[oi]);
            for (std::int64_t oj = 0; oj < ow; ++oj) {
              const std::int64_t c0 = axw.lo[oj], c1 = axw.hi[oj];
              const T tx = static_cast<T>(axw.w_hi[oj]);
              const T g = dyp[oi * ow + oj];
              dxp[r0 * is.w + c0] += (T(1) - ty) * (T(1) - tx) * g;
              dxp[r0 * is.w + c1] += (T(1) - ty) * tx * g;
              dxp[r1 * is.w + c0] += ty * (T(1) - tx) * g;
              dxp[r1 * is.w + c1] += ty * tx * g;
            }
          }
        }
      });
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// channel_softmax / gate_combine / reductions

template <typename T>
Tensor<T> channel_softmax(Tape<T>& tape, const Tensor<T>& input) {
  const Shape4 is = input.shape();
  if (is.n != 1 || is.h != 1 || is.w != 1) {
    throw std::invalid_argument("channel_softmax: expected shape (1,C,1,1), got " +
                                is.str());
  }
  const std::int64_t n = is.c;
  std::vector<T> s(static_cast<std::size_t>(n));
  const T* x = input.data().data();
  T mx = x[0];
  for (std::int64_t i = 1; i < n; ++i) mx = std::max(mx, x[i]);
  T z = T(0);
  for (std::int64_t i = 0; i < n; ++i) {
    s[i] = std::exp(x[i] - mx);
    z += s[i];
  }
  for (std::int64_t i = 0; i < n; ++i) s[i] /= z;
  Tensor<T> out(is, std::vector<T>(s));
  if (tape.grad_enabled()) {
    const std::int64_t in_node = tape.node_of(input);
    auto yi = out.impl();
    tape.record(out, {in_node}, [=](Tape<T>& t, const std::vector<T>& dy) {
      if (!t.node_needs_grad(in_node)) return;
      auto& dx = t.grad_slot(in_node, n);
      T dot = T(0);
      for (std::int64_t i = 0; i < n; ++i) dot += dy[i] * yi->data[i];
      for (std::int64_t i = 0; i < n; ++i) dx[i] += yi->data[i] * (dy[i] - dot);
    });
  }
  return out;
}

template <typename T>
Tensor<T> gate_combine(Tape<T>& tape, const Tensor<T>& weights,
                       const std::vector<Tensor<T>>& branches) {
  const Shape4 wsh = weights.shape();
  if (wsh.n != 1 || wsh.h != 1 || wsh.w != 1 ||
      wsh.c != static_cast<std::int64_t>(branches.size()) || branches.empty()) {
    throw std::invalid_argument(
        "gate_combine: weights must be (1,K,1,1) with K == branch count, got " +
        wsh.str() + " for " + std::to_string(branches.size()) + " branches");
  }
  const Shape4 bs = branches[0].shape();
  for (const auto& b : branches) {
    if (b.shape() != bs) {
      throw std::invalid_argument("gate_combine: branch shape mismatch " +
                                  b.shape().str() + " vs " + bs.str());
    }
  }
  const std::int64_t k = wsh.c;
  const std::int64_t numel = bs.numel();
  Tensor<T> out = Tensor<T>::zeros(bs);
  T* y = out.data().data();
  const T* wv = weights.data().data();
  for (std::int64_t i = 0; i < k; ++i) {
    if (wv[i] == T(0)) continue;
    const T wi = wv[i];
    const T* bp = branches[i].data().data();
    kern::parallel_for(numel, [&](std::int64_t s, std::int64_t e) {
      for (std::int64_t j = s; j < e; ++j) y[j] = std::fma(wi, bp[j], y[j]);
    });
  }

  if (tape.grad_enabled()) {
    const std::int64_t w_node = tape.node_of(weights);
    std::vector<std::int64_t> nodes = {w_node};
    std::vector<std::shared_ptr<TensorImpl<T>>> impls;
    for (const auto& b : branches) {
      nodes.push_back(tape.node_of(b));
      impls.push_back(b.impl());
    }
    auto wiimpl = weights.impl();
    tape.record(out, nodes, [=](Tape<T>& t, const std::vector<T>& dy) {
      if (t.node_needs_grad(w_node)) {
        auto& dw = t.grad_slot(w_node, k);
        for (std::int64_t i = 0; i < k; ++i) {
          T s = T(0);
          const T* bp = impls[i]->data.data();
          for (std::int64_t j = 0; j < numel; ++j) s += dy[j] * bp[j];
          dw[i] += s;
        }
      }
      for (std::int64_t i = 0; i < k; ++i) {
        const std::int64_t bn = nodes[i + 1];
        const T wi = wiimpl->data[i];
        if (!t.node_needs_grad(bn) || wi == T(0)) continue;
        auto& db = t.grad_slot(bn, numel);
        kern::parallel_for(numel, [&](std::int64_t s, std::int64_t e) {
          for (std::int64_t j = s; j < e; ++j) db[j] += wi * dy[j];
        });
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> reduce_sum(Tape<T>& tape, const Tensor<T>& input) {
  T s = T(0);
  for (const T v : input.data()) s += v;
  Tensor<T> out({1, 1, 1, 1}, {s});
  if (tape.grad_enabled()) {
    const std::int64_t in_node = tape.node_of(input);
    const std::int64_t n = input.numel();
    tape.record(out, {in_node}, [=](Tape<T>& t, const std::vector<T>& dy) {
      if (!t.node_needs_grad(in_node)) return;
      auto& dx = t.grad_slot(in_node, n);
      for (std::int64_t i = 0; i < n; ++i) dx[i] += dy[0];
    });
  }
  return out;
}

template <typename T>
Tensor<T> dot_const(Tape<T>& tape, const Tensor<T>& input, std::vector<T> weights) {
  if (static_cast<std::int64_t>(weights.size()) != input.numel()) {
    throw std::invalid_argument("dot_const: weight length does not match tensor size");
  }
  T s = T(0);
  const T* x = input.data().data();
  for (std::size_t i = 0; i < weights.size(); ++i) s += x[i] * weights[i];
  Tensor<T> out({1, 1, 1, 1}, {s});
  if (tape.grad_enabled()) {
    const std::int64_t in_node = tape.node_of(input);
    tape.record(out, {in_node}, [=](Tape<T>& t, const std::vector<T>& dy) {
      if (!t.node_needs_grad(in_node)) return;
      auto& dx = t.grad_slot(in_node, static_cast<std::int64_t>(weights.size()));
      for (std::size_t i = 0; i < weights.size(); ++i) dx[i] += weights[i] * dy[0];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// softmax_cross_entropy

template <typename T>
Tensor<T> softmax_cross_entropy(Tape<T>& tape, const Tensor<T>& logits,
                                const IntMask& targets,
                                std::optional<int> ignore_label) {
  const Shape4 ls = logits.shape();
  if (targets.n != ls.n || targets.h != ls.h || targets.w != ls.w) {
    throw std::invalid_argument("softmax_cross_entropy: target dims (" +
                                std::to_string(targets.n) + "," +
                                std::to_string(targets.h) + "," +
                                std::to_string(targets.w) +
                                ") do not match logits " + ls.str());
  }
  const std::int64_t classes = ls.c;
  const std::int64_t plane = ls.h * ls.w;
  const std::int64_t pixels = ls.n * plane;
  const T* lp = logits.data().data();

  std::vector<T> perpix(static_cast<std::size_t>(pixels), T(0));
  std::vector<std::uint8_t> active(static_cast<std::size_t>(pixels), 0);
  for (std::int64_t p = 0; p < pixels; ++p) {
    const std::int32_t tv = targets.values[p];
    if (ignore_label && tv == *ignore_label) continue;
    if (tv < 0 || tv >= classes) {
      throw std::invalid_argument("softmax_cross_entropy: target value " +
                                  std::to_string(tv) + " outside [0," +
                                  std::to_string(classes) + ")");
    }
    active[p] = 1;
  }

  kern::parallel_for(pixels, [&](std::int64_t b, std::int64_t e) {
    for (std::int64_t p = b; p < e; ++p) {
      if (!active[p]) continue;
      const std::int64_t ni = p / plane;
      const std::int64_t pp = p % plane;
      const std::int32_t tv = targets.values[p];
      const T* base = lp + ni * classes * plane + pp;
      T mx = base[0];
      for (std::int64_t c = 1; c < classes; ++c) mx = std::max(mx, base[c * plane]);
      T z = T(0);
      for (std::int64_t c = 0; c < classes; ++c) z += std::exp(base[c * plane] - mx);
      perpix[p] = std::log(z) + mx - base[tv * plane];
    }
  });

  std::int64_t count = 0;
  T total = T(0);
  for (std::int64_t p = 0; p < pixels; ++p) {
    if (active[p]) {
      total += perpix[p];
      ++count;
    }
  }
  if (count == 0) {
    throw std::invalid_argument("softmax_cross_entropy: zero contributing pixels");
  }
  Tensor<T> out({1, 1, 1, 1}, {total / static_cast<T>(count)});

  if (tape.grad_enabled()) {
    const std::int64_t in_node = tape.node_of(logits);
    auto li = logits.impl();
    auto tgt = std::make_shared<IntMask>(targets);
    auto act = std::make_shared<std::vector<std::uint8_t>>(std::move(active));
    const std::int64_t cnt = count;
    tape.record(out, {in_node}, [=](Tape<T>& t, const std::vector<T>& dy) {
      if (!t.node_needs_grad(in_node)) return;
      auto& dx = t.grad_slot(in_node, ls.numel());
      const T g = dy[0] / static_cast<T>(cnt);
      kern::parallel_for(pixels, [&](std::int64_t b, std::int64_t e) {
        for (std::int64_t p = b; p < e; ++p) {
          if (!(*act)[p]) continue;
          const std::int64_t ni = p / plane;
          const std::int64_t pp = p % plane;
          const T* base = li->data.data() + ni * classes * plane + pp;
          T* dbase = dx.data() + ni * classes * plane + pp;
          T mx = base[0];
          for (std::int64_t c = 1; c < classes; ++c) {
            mx = std::max(mx, base[c * plane]);
          }
          T z = T(0);
          for (std::int64_t c = 0; c < classes; ++c) {
            z += std::exp(base[c * plane] - mx);
          }
          const std::int32_t tv = tgt->values[p];
          for (std::int64_t c = 0; c < classes; ++c) {
            const T soft = std::exp(base[c * plane] - mx) / z;
            dbase[c * plane] += g * (soft - (c == tv ? T(1) : T(0)));
          }
        }
      });
    });
  }
  return out;
}

// ---------------------------------------------------------------------------

#define LIGHTSEG_INSTANTIATE_OPS(T)                                                   \
  template void check_finite<T>(const Tensor<T>&, const char*);                       \
  template Tensor<T> conv2d<T>(Tape<T>&, const Tensor<T>&, const Tensor<T>&,          \
                               const Tensor<T>*, const Conv2dOpts&);                  \
  template Tensor<T> batchnorm2d<T>(Tape<T>&, const Tensor<T>&, const Tensor<T>&,    \
                                    const Tensor<T>&, Tensor<T>&, Tensor<T>&, BnMode, \
                                    T, T);                                            \
  template Tensor<T> relu<T>(Tape<T>&, const Tensor<T>&);                             \
  template Tensor<T> add<T>(Tape<T>&, const Tensor<T>&, const Tensor<T>&);            \
  template Tensor<T> maxpool2d<T>(Tape<T>&, const Tensor<T>&, int, int, int);         \
  template Tensor<T> bilinear_upsample<T>(Tape<T>&, const Tensor<T>&, int);           \
  template Tensor<T> scale<T>(Tape<T>&, const Tensor<T>&, T);                         \
  template Tensor<T> shift<T>(Tape<T>&, const Tensor<T>&, std::vector<T>);            \
  template Tensor<T> channel_softmax<T>(Tape<T>&, const Tensor<T>&);                  \
  template Tensor<T> gate_combine<T>(Tape<T>&, const Tensor<T>&,                      \
                                     const std::vector<Tensor<T>>&);                  \
  template Tensor<T> reduce_sum<T>(Tape<T>&, const Tensor<T>&);                       \
  template Tensor<T> dot_const<T>(Tape<T>&, const Tensor<T>&, std::vector<T>);        \
  template Tensor<T> softmax_cross_entropy<T>(Tape<T>&, const Tensor<T>&,             \
                                              const IntMask&, std::optional<int>);

LIGHTSEG_INSTANTIATE_OPS(float)
LIGHTSEG_INSTANTIATE_OPS(double)

#undef LIGHTSEG_INSTANTIATE_OPS

}  // namespace lightseg
