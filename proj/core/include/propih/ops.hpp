#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>
#include <vector>

#include "propih/tensor.hpp"

// Differentiable primitives. Every op computes its output eagerly and, when a
// tape is supplied and an input is tracked, records a closure that adds into
// the inputs' gradient buffers. Closures capture input payloads by
// shared_ptr, so graphs stay valid even if callers drop their handles.
//
// Numeric conventions used throughout:
//   - reductions (sum_all, sum_sq_diff, masked stats, global_avg_pool)
//     accumulate in double regardless of T;
//   - convolution accumulates in T for speed;
//   - masks are validated to contain exactly 0 or 1.

namespace propih {

enum class StatsMode {
  masked_region,  // divisor = number of selected positions
  zero_filled,    // unselected positions contribute value 0, divisor = H*W
};

namespace detail {

template <typename T>
inline void require_defined(const char* op,
                            std::initializer_list<const Tensor<T>*> ts) {
  for (const Tensor<T>* t : ts)
    if (!t->defined()) fail_validation(op, ": undefined tensor argument");
}

template <typename T>
inline void check_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    fail_validation(op, ": shape mismatch ", shape_str(a.shape()), " vs ",
                    shape_str(b.shape()));
}

template <typename T>
inline void check_rank(const char* op, const Tensor<T>& t, std::size_t rank) {
  if (t.shape().size() != rank)
    fail_validation(op, ": expected rank ", rank, ", got shape ",
                    shape_str(t.shape()));
}

template <typename T>
inline void check_binary_mask(const char* op, const Tensor<T>& m) {
  for (T v : m.values())
    if (!(v == T(0) || v == T(1)))
      fail_validation(op, ": mask values must be exactly 0 or 1");
}

template <typename T>
inline void dbg_finite(const std::vector<T>& v, const char* op) {
#ifndef NDEBUG
  for (T x : v)
    if (!std::isfinite(static_cast<double>(x)))
      throw std::runtime_error(std::string("non-finite value produced by ") + op);
#else
  (void)v;
  (void)op;
#endif
}

}  // namespace detail

// ---- elementwise binary ----

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape = nullptr) {
  detail::require_defined<T>("add", {&a, &b});
  detail::check_same_shape("add", a, b);
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
  detail::dbg_finite(out, "add");
  Tensor<T> y(a.shape(), std::move(out));
  if (tape && tape->wants({&a, &b})) {
    tape->record(y, {&a, &b}, [](auto& ctx) {
      const auto& g = ctx.out_grad();
      if (auto* ga = ctx.in_grad(0))
        for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
      if (auto* gb = ctx.in_grad(1))
        for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i];
    });
  }
  return y;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape = nullptr) {
  detail::require_defined<T>("sub", {&a, &b});
  detail::check_same_shape("sub", a, b);
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] - bv[i];
  detail::dbg_finite(out, "sub");
  Tensor<T> y(a.shape(), std::move(out));
  if (tape && tape->wants({&a, &b})) {
    tape->record(y, {&a, &b}, [](auto& ctx) {
      const auto& g = ctx.out_grad();
      if (auto* ga = ctx.in_grad(0))
        for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
      if (auto* gb = ctx.in_grad(1))
        for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
    });
  }
  return y;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape = nullptr) {
  detail::require_defined<T>("mul", {&a, &b});
  detail::check_same_shape("mul", a, b);
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
  detail::dbg_finite(out, "mul");
  Tensor<T> y(a.shape(), std::move(out));
  if (tape && tape->wants({&a, &b})) {
    auto ap = a.shared_values();
    auto bp = b.shared_values();
    tape->record(y, {&a, &b}, [ap, bp](auto& ctx) {
      const auto& g = ctx.out_grad();
      if (auto* ga = ctx.in_grad(0))
        for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * (*bp)[i];
      if (auto* gb = ctx.in_grad(1))
        for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * (*ap)[i];
    });
  }
  return y;
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape = nullptr) {
  detail::require_defined<T>("div", {&a, &b});
  detail::check_same_shape("div", a, b);
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] / bv[i];
  detail::dbg_finite(out, "div");
  Tensor<T> y(a.shape(), std::move(out));
  if (tape && tape->wants({&a, &b})) {
    auto ap = a.shared_values();
    auto bp = b.shared_values();
    tape->record(y, {&a, &b}, [ap, bp](auto& ctx) {
      const auto& g = ctx.out_grad();
      if (auto* ga = ctx.in_grad(0))
        for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] / (*bp)[i];
      if (auto* gb = ctx.in_grad(1))
        for (std::size_t i = 0; i < g.size(); ++i)
          (*gb)[i] -= g[i] * (*ap)[i] / ((*bp)[i] * (*bp)[i]);
    });
  }
  return y;
}

// ---- elementwise with scalar ----

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T c, Tape<T>* tape = nullptr) {
  detail::require_defined<T>("add_scalar", {&a});
  std::vector<T> out(a.values());
  for (T& v : out) v += c;
  Tensor<T> y(a.shape(), std::move(out));
  if (tape && tape->wants({&a})) {
    tape->record(y, {&a}, [](auto& ctx) {
      const auto& g = ctx.out_grad();
      if (auto* ga = ctx.in_grad(0))
        for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
    });
  }
  return y;
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T c, Tape<T>* tape = nullptr) {
  detail::require_defined<T>("mul_scalar", {&a});
  std::vector<T> out(a.values());
  for (T& v : out) v *= c;
  detail::dbg_finite(out, "mul_scalar");
  Tensor<T> y(a.shape(), std::move(out));
  if (tape && tape->wants({&a})) {
    tape->record(y, {&a}, [c](auto& ctx) {
      const auto& g = ctx.out_grad();
      if (auto* ga = ctx.in_grad(0))
        for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * c;
    });
  }
  return y;
}

// ---- activations ----

template <typename T>
Tensor<T> relu(const Tensor<T>& x, Tape<T>* tape = nullptr) {
  detail::require_defined<T>("relu", {&x});
  const auto& xv = x.values();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] > T(0) ? xv[i] : T(0);
  Tensor<T> y(x.shape(), std::move(out));
  if (tape && tape->wants({&x})) {
    auto xp = x.shared_values();
    tape->record(y, {&x}, [xp](auto& ctx) {
      const auto& g = ctx.out_grad();
      if (auto* gx = ctx.in_grad(0))
        for (std::size_t i = 0; i < g.size(); ++i)
          if ((*xp)[i] > T(0)) (*gx)[i] += g[i];
    });
  }
  return y;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x, Tape<T>* tape = nullptr) {
  detail::require_defined<T>("sigmoid", {&x});
  const auto& xv = x.values();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    double v = static_cast<double>(xv[i]);
    double s = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                        : std::exp(v) / (1.0 + std::exp(v));
    out[i] = static_cast<T>(s);
  }
  Tensor<T> y(x.shape(), std::move(out));
  if (tape && tape->wants({&x})) {
    auto yp = y.shared_values();
    tape->record(y, {&x}, [yp](auto& ctx) {
      const auto& g = ctx.out_grad();
      if (auto* gx = ctx.in_grad(0))
        for (std::size_t i = 0; i < g.size(); ++i) {
          T s = (*yp)[i];
          (*gx)[i] += g[i] * s * (T(1) - s);
        }
    });
  }
  return y;
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& x, Tape<T>* tape = nullptr) {
  detail::require_defined<T>("tanh", {&x});
  const auto& xv = x.values();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i)
    out[i] = static_cast<T>(std::tanh(static_cast<double>(xv[i])));
  Tensor<T> y(x.shape(), std::move(out));
  if (tape && tape->wants({&x})) {
    auto yp = y.shared_values();
    tape->record(y, {&x}, [yp](auto& ctx) {
      const auto& g = ctx.out_grad();
      if (auto* gx = ctx.in_grad(0))
        for (std::size_t i = 0; i < g.size(); ++i) {
          T t = (*yp)[i];
          (*gx)[i] += g[i] * (T(1) - t * t);
        }
    });
  }
  return y;
}

// ---- convolution ----

namespace detail {

// Unpacks one sample into a K x P patch matrix, K = Cin*kh*kw, P = Ho*Wo.
// Row k = (ci*kh + ki)*kw + kj holds input value at (ci, oi*s-p+ki, oj*s-p+kj)
// or zero when out of bounds.
template <typename T>
void im2col(const T* x, int cin, int h, int w, int kh, int kw, int stride,
            int pad, int ho, int wo, T* col) {
  const std::int64_t p_total = static_cast<std::int64_t>(ho) * wo;
  for (int ci = 0; ci < cin; ++ci) {
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        T* row = col + (static_cast<std::int64_t>((ci * kh + ki) * kw + kj)) * p_total;
        for (int oi = 0; oi < ho; ++oi) {
          int ii = oi * stride - pad + ki;
          T* dst = row + static_cast<std::int64_t>(oi) * wo;
          if (ii < 0 || ii >= h) {
            std::fill(dst, dst + wo, T(0));
            continue;
          }
          const T* src = x + (static_cast<std::int64_t>(ci) * h + ii) * w;
          if (stride == 1) {
            int j0 = std::max(0, pad - kj);            // first valid oj
            int j1 = std::min(wo, w + pad - kj);       // one past last valid
            if (j0 > 0) std::fill(dst, dst + j0, T(0));
            if (j1 > j0)
              std::memcpy(dst + j0, src + (j0 - pad + kj),
                          static_cast<std::size_t>(j1 - j0) * sizeof(T));
            if (j1 < wo) std::fill(dst + std::max(j1, j0), dst + wo, T(0));
          } else {
            for (int oj = 0; oj < wo; ++oj) {
              int jj = oj * stride - pad + kj;
              dst[oj] = (jj >= 0 && jj < w) ? src[jj] : T(0);
            }
          }
        }
      }
    }
  }
}

// Scatter-add transpose of im2col.
template <typename T>
void col2im_add(const T* col, int cin, int h, int w, int kh, int kw, int stride,
                int pad, int ho, int wo, T* gx) {
  const std::int64_t p_total = static_cast<std::int64_t>(ho) * wo;
  for (int ci = 0; ci < cin; ++ci) {
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        const T* row =
            col + (static_cast<std::int64_t>((ci * kh + ki) * kw + kj)) * p_total;
        for (int oi = 0; oi < ho; ++oi) {
          int ii = oi * stride - pad + ki;
          if (ii < 0 || ii >= h) continue;
          T* dst = gx + (static_cast<std::int64_t>(ci) * h + ii) * w;
          const T* src = row + static_cast<std::int64_t>(oi) * wo;
          for (int oj = 0; oj < wo; ++oj) {
            int jj = oj * stride - pad + kj;
            if (jj >= 0 && jj < w) dst[jj] += src[oj];
          }
        }
      }
    }
  }
}

}  // namespace detail

// x: [N,Cin,H,W], w: [Cout,Cin,kh,kw], b: [Cout].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                 int stride = 1, int padding = 1, Tape<T>* tape = nullptr) {
  detail::require_defined<T>("conv2d", {&x, &w, &b});
  detail::check_rank("conv2d", x, 4);
  detail::check_rank("conv2d", w, 4);
  detail::check_rank("conv2d", b, 1);
  if (stride < 1) fail_validation("conv2d: stride must be >= 1, got ", stride);
  if (padding < 0) fail_validation("conv2d: padding must be >= 0, got ", padding);
  const int n = x.dim(0), cin = x.dim(1), h = x.dim(2), win = x.dim(3);
  const int cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != cin)
    fail_validation("conv2d: weight expects ", w.dim(1), " input channels, got ", cin);
  if (b.dim(0) != cout)
    fail_validation("conv2d: bias size ", b.dim(0), " vs ", cout, " filters");
  if (h + 2 * padding < kh || win + 2 * padding < kw)
    fail_validation("conv2d: kernel ", kh, "x", kw, " larger than padded input");
  const int ho = (h + 2 * padding - kh) / stride + 1;
  const int wo = (win + 2 * padding - kw) / stride + 1;
  const std::int64_t kdim = static_cast<std::int64_t>(cin) * kh * kw;
  const std::int64_t p_total = static_cast<std::int64_t>(ho) * wo;

  std::vector<T> out(static_cast<std::size_t>(n) * cout * p_total);
  std::vector<T> col(static_cast<std::size_t>(kdim * p_total));
  const T* xd = x.values().data();
  const T* wd = w.values().data();
  const T* bd = b.values().data();
  for (int s = 0; s < n; ++s) {
    detail::im2col(xd + static_cast<std::int64_t>(s) * cin * h * win, cin, h, win,
                   kh, kw, stride, padding, ho, wo, col.data());
    for (int co = 0; co < cout; ++co) {
      T* dst = out.data() + (static_cast<std::int64_t>(s) * cout + co) * p_total;
      std::fill(dst, dst + p_total, bd[co]);
      const T* wrow = wd + static_cast<std::int64_t>(co) * kdim;
      for (std::int64_t k = 0; k < kdim; ++k) {
        T wv = wrow[k];
        const T* c = col.data() + k * p_total;
        for (std::int64_t p = 0; p < p_total; ++p) dst[p] += wv * c[p];
      }
    }
  }
  detail::dbg_finite(out, "conv2d");
  Tensor<T> y({n, cout, ho, wo}, std::move(out));

  if (tape && tape->wants({&x, &w, &b})) {
    auto xp = x.shared_values();
    auto wp = w.shared_values();
    tape->record(y, {&x, &w, &b},
                 [xp, wp, n, cin, h, win, cout, kh, kw, stride, padding, ho, wo,
                  kdim, p_total](auto& ctx) {
      const auto& g = ctx.out_grad();
      auto* gx = ctx.in_grad(0);
      auto* gw = ctx.in_grad(1);
      auto* gb = ctx.in_grad(2);
      std::vector<T> col(static_cast<std::size_t>(kdim * p_total));
      std::vector<T> colg;
      if (gx) colg.resize(static_cast<std::size_t>(kdim * p_total));
      for (int s = 0; s < n; ++s) {
        const T* grow = g.data() + static_cast<std::int64_t>(s) * cout * p_total;
        if (gb) {
          for (int co = 0; co < cout; ++co) {
            T acc = T(0);
            const T* gr = grow + static_cast<std::int64_t>(co) * p_total;
            for (std::int64_t p = 0; p < p_total; ++p) acc += gr[p];
            (*gb)[static_cast<std::size_t>(co)] += acc;
          }
        }
        if (gw || gx)
          detail::im2col(xp->data() + static_cast<std::int64_t>(s) * cin * h * win,
                         cin, h, win, kh, kw, stride, padding, ho, wo, col.data());
        if (gw) {
          for (int co = 0; co < cout; ++co) {
            const T* gr = grow + static_cast<std::int64_t>(co) * p_total;
            T* gwrow = gw->data() + static_cast<std::int64_t>(co) * kdim;
            for (std::int64_t k = 0; k < kdim; ++k) {
              const T* c = col.data() + k * p_total;
              T acc = T(0);
              for (std::int64_t p = 0; p < p_total; ++p) acc += gr[p] * c[p];
              gwrow[k] += acc;
            }
          }
        }
        if (gx) {
          std::fill(colg.begin(), colg.end(), T(0));
          const T* wd = wp->data();
          for (int co = 0; co < cout; ++co) {
            const T* gr = grow + static_cast<std::int64_t>(co) * p_total;
            const T* wrow = wd + static_cast<std::int64_t>(co) * kdim;
            for (std::int64_t k = 0; k < kdim; ++k) {
              T wv = wrow[k];
              T* cg = colg.data() + k * p_total;
              for (std::int64_t p = 0; p < p_total; ++p) cg[p] += wv * gr[p];
            }
          }
          detail::col2im_add(colg.data(), cin, h, win, kh, kw, stride, padding,
                             ho, wo,
                             gx->data() + static_cast<std::int64_t>(s) * cin * h * win);
        }
      }
    });
  }
  return y;
}

// ---- pooling ----

template <typename T>
Tensor<T> maxpool2x2(const Tensor<T>& x, Tape<T>* tape = nullptr) {
  detail::require_defined<T>("maxpool2x2", {&x});
  detail::check_rank("maxpool2x2", x, 4);
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % 2 != 0 || w % 2 != 0)
    fail_validation("maxpool2x2: spatial extent must be even, got ", h, "x", w);
  const int ho = h / 2, wo = w / 2;
  const auto& xv = x.values();
  std::vector<T> out(static_cast<std::size_t>(n) * c * ho * wo);
  // argmax by flat input index; ties take the first element in row-major
  // window order, so backward routing is deterministic.
  std::vector<std::int64_t> arg(out.size());
  std::size_t o = 0;
  for (int nc = 0; nc < n * c; ++nc) {
    const std::int64_t base = static_cast<std::int64_t>(nc) * h * w;
    for (int i = 0; i < ho; ++i) {
      for (int j = 0; j < wo; ++j) {
        std::int64_t i00 = base + (2 * i) * static_cast<std::int64_t>(w) + 2 * j;
        std::int64_t best = i00;
        T bv = xv[static_cast<std::size_t>(i00)];
        const std::int64_t cand[3] = {i00 + 1, i00 + w, i00 + w + 1};
        for (std::int64_t idx : cand) {
          T v = xv[static_cast<std::size_t>(idx)];
          if (v > bv) {
            bv = v;
            best = idx;
          }
        }
        out[o] = bv;
        arg[o] = best;
        ++o;
      }
    }
  }
  Tensor<T> y({n, c, ho, wo}, std::move(out));
  if (tape && tape->wants({&x})) {
    tape->record(y, {&x}, [arg = std::move(arg)](auto& ctx) {
      const auto& g = ctx.out_grad();
      if (auto* gx = ctx.in_grad(0))
        for (std::size_t i = 0; i < g.size(); ++i)
          (*gx)[static_cast<std::size_t>(arg[i])] += g[i];
    });
  }
  return y;
}

template <typename T>
Tensor<T> avgpool2x2(const Tensor<T>& x, Tape<T>* tape = nullptr) {
  detail::require_defined<T>("avgpool2x2", {&x});
  detail::check_rank("avgpool2x2", x, 4);
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % 2 != 0 || w % 2 != 0)
    fail_validation("avgpool2x2: spatial extent must be even, got ", h, "x", w);
  const int ho = h / 2, wo = w / 2;
  const auto& xv = x.values();
  std::vector<T> out(static_cast<std::size_t>(n) * c * ho * wo);
  std::size_t o = 0;
  for (int nc = 0; nc < n * c; ++nc) {
    const std::int64_t base = static_cast<std::int64_t>(nc) * h * w;
    for (int i = 0; i < ho; ++i) {
      for (int j = 0; j < wo; ++j) {
        std::int64_t i00 = base + (2 * i) * static_cast<std::int64_t>(w) + 2 * j;
        // pairwise sum keeps avg(upsample_nearest(x,2)) == x exact
        T s = (xv[static_cast<std::size_t>(i00)] + xv[static_cast<std::size_t>(i00 + 1)]) +
              (xv[static_cast<std::size_t>(i00 + w)] + xv[static_cast<std::size_t>(i00 + w + 1)]);
        out[o++] = s * T(0.25);
      }
    }
  }
  Tensor<T> y({n, c, ho, wo}, std::move(out));
  if (tape && tape->wants({&x})) {
    tape->record(y, {&x}, [n, c, ho, wo, w](auto& ctx) {
      const auto& g = ctx.out_grad();
      if (auto* gx = ctx.in_grad(0)) {
        std::size_t o = 0;
        for (int nc = 0; nc < n * c; ++nc) {
          const std::int64_t base = static_cast<std::int64_t>(nc) * (2 * ho) * w;
          for (int i = 0; i < ho; ++i)
            for (int j = 0; j < wo; ++j) {
              T q = g[o++] * T(0.25);
              std::int64_t i00 = base + (2 * i) * static_cast<std::int64_t>(w) + 2 * j;
              (*gx)[static_cast<std::size_t>(i00)] += q;
              (*gx)[static_cast<std::size_t>(i00 + 1)] += q;
              (*gx)[static_cast<std::size_t>(i00 + w)] += q;
              (*gx)[static_cast<std::size_t>(i00 + w + 1)] += q;
            }
        }
      }
    });
  }
  return y;
}

// ---- resampling ----

// out(i,j) = in(i/scale, j/scale); integer replication.
template <typename T>
Tensor<T> upsample_nearest(const Tensor<T>& x, int scale, Tape<T>* tape = nullptr) {
  detail::require_defined<T>("upsample_nearest", {&x});
  detail::check_rank("upsample_nearest", x, 4);
  if (scale < 1) fail_validation("upsample_nearest: scale must be >= 1, got ", scale);
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int ho = h * scale, wo = w * scale;
  const auto& xv = x.values();
  std::vector<T> out(static_cast<std::size_t>(n) * c * ho * wo);
  std::size_t o = 0;
  for (int nc = 0; nc < n * c; ++nc) {
    const T* src = xv.data() + static_cast<std::int64_t>(nc) * h * w;
    for (int i = 0; i < ho; ++i) {
      const T* srow = src + static_cast<std::int64_t>(i / scale) * w;
      for (int j = 0; j < wo; ++j) out[o++] = srow[j / scale];
    }
  }
  Tensor<T> y({n, c, ho, wo}, std::move(out));
  if (tape && tape->wants({&x})) {
    tape->record(y, {&x}, [n, c, h, w, scale](auto& ctx) {
      const auto& g = ctx.out_grad();
      if (auto* gx = ctx.in_grad(0)) {
        const int ho = h * scale, wo = w * scale;
        std::size_t o = 0;
        for (int nc = 0; nc < n * c; ++nc) {
          T* dst = gx->data() + static_cast<std::int64_t>(nc) * h * w;
          for (int i = 0; i < ho; ++i) {
            T* drow = dst + static_cast<std::int64_t>(i / scale) * w;
            for (int j = 0; j < wo; ++j) drow[j / scale] += g[o++];
          }
        }
      }
    });
  }
  return y;
}

namespace detail {

struct LerpIndex {
  int i0, i1;
  double frac;
};

// Half-pixel source mapping: src = (dst + 0.5)/scale - 0.5, clamped to the
// valid range. For in-extent 2, scale 2 this yields fractions {0,1/4,3/4,0}.
inline std::vector<LerpIndex> lerp_table(int in_extent, int scale) {
  std::vector<LerpIndex> t(static_cast<std::size_t>(in_extent) * scale);
  for (int i = 0; i < in_extent * scale; ++i) {
    double src = (i + 0.5) / scale - 0.5;
    src = std::min(std::max(src, 0.0), static_cast<double>(in_extent - 1));
    int i0 = static_cast<int>(src);
    int i1 = std::min(i0 + 1, in_extent - 1);
    t[static_cast<std::size_t>(i)] = {i0, i1, src - i0};
  }
  return t;
}

}  // namespace detail

template <typename T>
Tensor<T> upsample_bilinear(const Tensor<T>& x, int scale, Tape<T>* tape = nullptr) {
  detail::require_defined<T>("upsample_bilinear", {&x});
  detail::check_rank("upsample_bilinear", x, 4);
  if (scale < 1) fail_validation("upsample_bilinear: scale must be >= 1, got ", scale);
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int ho = h * scale, wo = w * scale;
  const auto ty = detail::lerp_table(h, scale);
  const auto tx = detail::lerp_table(w, scale);
  const auto& xv = x.values();
  std::vector<T> out(static_cast<std::size_t>(n) * c * ho * wo);
  std::size_t o = 0;
  for (int nc = 0; nc < n * c; ++nc) {
    const T* src = xv.data() + static_cast<std::int64_t>(nc) * h * w;
    for (int i = 0; i < ho; ++i) {
      const auto& ri = ty[static_cast<std::size_t>(i)];
      const T* r0 = src + static_cast<std::int64_t>(ri.i0) * w;
      const T* r1 = src + static_cast<std::int64_t>(ri.i1) * w;
      for (int j = 0; j < wo; ++j) {
        const auto& rj = tx[static_cast<std::size_t>(j)];
        double top = (1.0 - rj.frac) * r0[rj.i0] + rj.frac * r0[rj.i1];
        double bot = (1.0 - rj.frac) * r1[rj.i0] + rj.frac * r1[rj.i1];
        out[o++] = static_cast<T>((1.0 - ri.frac) * top + ri.frac * bot);
      }
    }
  }
  Tensor<T> y({n, c, ho, wo}, std::move(out));
  if (tape && tape->wants({&x})) {
    tape->record(y, {&x}, [n, c, h, w, ty, tx](auto& ctx) {
      const auto& g = ctx.out_grad();
      if (auto* gx = ctx.in_grad(0)) {
        const int ho = static_cast<int>(ty.size()), wo = static_cast<int>(tx.size());
        std::size_t o = 0;
        for (int nc = 0; nc < n * c; ++nc) {
          T* dst = gx->data() + static_cast<std::int64_t>(nc) * h * w;
          for (int i = 0; i < ho; ++i) {
            const auto& ri = ty[static_cast<std::size_t>(i)];
            for (int j = 0; j < wo; ++j) {
              const auto& rj = tx[static_cast<std::size_t>(j)];
              double gv = static_cast<double>(g[o++]);
              dst[ri.i0 * w + rj.i0] += static_cast<T>((1.0 - ri.frac) * (1.0 - rj.frac) * gv);
              dst[ri.i0 * w + rj.i1] += static_cast<T>((1.0 - ri.frac) * rj.frac * gv);
              dst[ri.i1 * w + rj.i0] += static_cast<T>(ri.frac * (1.0 - rj.frac) * gv);
              dst[ri.i1 * w + rj.i1] += static_cast<T>(ri.frac * rj.frac * gv);
            }
          }
        }
      }
    });
  }
  return y;
}

// ---- channel plumbing ----

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape = nullptr) {
  detail::require_defined<T>("concat_channels", {&a, &b});
  detail::check_rank("concat_channels", a, 4);
  detail::check_rank("concat_channels", b, 4);
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
    fail_validation("concat_channels: incompatible shapes ", shape_str(a.shape()),
                    " vs ", shape_str(b.shape()));
  const int n = a.dim(0), ca = a.dim(1), cb = b.dim(1), h = a.dim(2), w = a.dim(3);
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  std::vector<T> out(static_cast<std::size_t>(n) * (ca + cb) * plane);
  const auto& av = a.values();
  const auto& bv = b.values();
  for (int s = 0; s < n; ++s) {
    std::memcpy(out.data() + static_cast<std::int64_t>(s) * (ca + cb) * plane,
                av.data() + static_cast<std::int64_t>(s) * ca * plane,
                static_cast<std::size_t>(ca * plane) * sizeof(T));
    std::memcpy(out.data() + (static_cast<std::int64_t>(s) * (ca + cb) + ca) * plane,
                bv.data() + static_cast<std::int64_t>(s) * cb * plane,
                static_cast<std::size_t>(cb * plane) * sizeof(T));
  }
  Tensor<T> y({n, ca + cb, h, w}, std::move(out));
  if (tape && tape->wants({&a, &b})) {
    tape->record(y, {&a, &b}, [n, ca, cb, plane](auto& ctx) {
      const auto& g = ctx.out_grad();
      for (int s = 0; s < n; ++s) {
        const T* gs = g.data() + static_cast<std::int64_t>(s) * (ca + cb) * plane;
        if (auto* ga = ctx.in_grad(0)) {
          T* d = ga->data() + static_cast<std::int64_t>(s) * ca * plane;
          for (std::int64_t i = 0; i < ca * plane; ++i) d[i] += gs[i];
        }
        if (auto* gb = ctx.in_grad(1)) {
          T* d = gb->data() + static_cast<std::int64_t>(s) * cb * plane;
          const T* gsb = gs + static_cast<std::int64_t>(ca) * plane;
          for (std::int64_t i = 0; i < cb * plane; ++i) d[i] += gsb[i];
        }
      }
    });
  }
  return y;
}

// Channels [c0, c1) of x.
template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, int c0, int c1, Tape<T>* tape = nullptr) {
  detail::require_defined<T>("slice_channels", {&x});
  detail::check_rank("slice_channels", x, 4);
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (c0 < 0 || c1 > c || c0 >= c1)
    fail_validation("slice_channels: bad range [", c0, ",", c1, ") for ", c, " channels");
  const int cs = c1 - c0;
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  std::vector<T> out(static_cast<std::size_t>(n) * cs * plane);
  const auto& xv = x.values();
  for (int s = 0; s < n; ++s)
    std::memcpy(out.data() + static_cast<std::int64_t>(s) * cs * plane,
                xv.data() + (static_cast<std::int64_t>(s) * c + c0) * plane,
                static_cast<std::size_t>(cs * plane) * sizeof(T));
  Tensor<T> y({n, cs, h, w}, std::move(out));
  if (tape && tape->wants({&x})) {
    tape->record(y, {&x}, [n, c, c0, cs, plane](auto& ctx) {
      const auto& g = ctx.out_grad();
      if (auto* gx = ctx.in_grad(0))
        for (int s = 0; s < n; ++s) {
          T* d = gx->data() + (static_cast<std::int64_t>(s) * c + c0) * plane;
          const T* gs = g.data() + static_cast<std::int64_t>(s) * cs * plane;
          for (std::int64_t i = 0; i < cs * plane; ++i) d[i] += gs[i];
        }
    });
  }
  return y;
}

// [N,C,H,W] -> [N,C] spatial mean.
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x, Tape<T>* tape = nullptr) {
  detail::require_defined<T>("global_avg_pool", {&x});
  detail::check_rank("global_avg_pool", x, 4);
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  std::vector<T> out(static_cast<std::size_t>(n) * c);
  const auto& xv = x.values();
  for (int nc = 0; nc < n * c; ++nc) {
    const T* src = xv.data() + static_cast<std::int64_t>(nc) * plane;
    double acc = 0.0;
    for (std::int64_t i = 0; i < plane; ++i) acc += static_cast<double>(src[i]);
    out[static_cast<std::size_t>(nc)] = static_cast<T>(acc / static_cast<double>(plane));
  }
  Tensor<T> y({n, c}, std::move(out));
  if (tape && tape->wants({&x})) {
    tape->record(y, {&x}, [n, c, plane](auto& ctx) {
      const auto& g = ctx.out_grad();
      if (auto* gx = ctx.in_grad(0)) {
        const T inv = static_cast<T>(1.0 / static_cast<double>(plane));
        for (int nc = 0; nc < n * c; ++nc) {
          T q = g[static_cast<std::size_t>(nc)] * inv;
          T* dst = gx->data() + static_cast<std::int64_t>(nc) * plane;
          for (std::int64_t i = 0; i < plane; ++i) dst[i] += q;
        }
      }
    });
  }
  return y;
}

// x: [N,I], w: [O,I], b: [O] or undefined for no bias. y = x w^T + b.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                 Tape<T>* tape = nullptr) {
  detail::require_defined<T>("linear", {&x, &w});
  detail::check_rank("linear", x, 2);
  detail::check_rank("linear", w, 2);
  const int n = x.dim(0), in = x.dim(1), out_dim = w.dim(0);
  if (w.dim(1) != in)
    fail_validation("linear: weight expects ", w.dim(1), " inputs, got ", in);
  const bool has_b = b.defined();
  if (has_b && (b.shape().size() != 1 || b.dim(0) != out_dim))
    fail_validation("linear: bias shape ", shape_str(b.shape()), " vs ", out_dim, " outputs");
  const auto& xv = x.values();
  const auto& wv = w.values();
  std::vector<T> out(static_cast<std::size_t>(n) * out_dim);
  for (int s = 0; s < n; ++s)
    for (int o = 0; o < out_dim; ++o) {
      double acc = has_b ? static_cast<double>(b.values()[static_cast<std::size_t>(o)]) : 0.0;
      const T* xr = xv.data() + static_cast<std::int64_t>(s) * in;
      const T* wr = wv.data() + static_cast<std::int64_t>(o) * in;
      for (int i = 0; i < in; ++i) acc += static_cast<double>(xr[i]) * wr[i];
      out[static_cast<std::size_t>(s) * out_dim + o] = static_cast<T>(acc);
    }
  detail::dbg_finite(out, "linear");
  Tensor<T> y({n, out_dim}, std::move(out));
  const bool track = has_b ? tape && tape->wants({&x, &w, &b})
                           : tape && tape->wants({&x, &w});
  if (track) {
    auto xp = x.shared_values();
    auto wp = w.shared_values();
    auto fn = [xp, wp, n, in, out_dim, has_b](auto& ctx) {
      const auto& g = ctx.out_grad();
      auto* gx = ctx.in_grad(0);
      auto* gw = ctx.in_grad(1);
      auto* gb = has_b ? ctx.in_grad(2) : nullptr;
      for (int s = 0; s < n; ++s) {
        const T* gr = g.data() + static_cast<std::int64_t>(s) * out_dim;
        for (int o = 0; o < out_dim; ++o) {
          T gv = gr[o];
          const T* wr = wp->data() + static_cast<std::int64_t>(o) * in;
          const T* xr = xp->data() + static_cast<std::int64_t>(s) * in;
          if (gx) {
            T* d = gx->data() + static_cast<std::int64_t>(s) * in;
            for (int i = 0; i < in; ++i) d[i] += gv * wr[i];
          }
          if (gw) {
            T* d = gw->data() + static_cast<std::int64_t>(o) * in;
            for (int i = 0; i < in; ++i) d[i] += gv * xr[i];
          }
          if (gb) (*gb)[static_cast<std::size_t>(o)] += gv;
        }
      }
    };
    if (has_b)
      tape->record(y, {&x, &w, &b}, fn);
    else
      tape->record(y, {&x, &w}, fn);
  }
  return y;
}

// ---- reductions ----

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x, Tape<T>* tape = nullptr) {
  detail::require_defined<T>("sum_all", {&x});
  double acc = 0.0;
  for (T v : x.values()) acc += static_cast<double>(v);
  Tensor<T> y = Tensor<T>::scalar(static_cast<T>(acc));
  if (tape && tape->wants({&x})) {
    tape->record(y, {&x}, [](auto& ctx) {
      T g = ctx.out_grad()[0];
      if (auto* gx = ctx.in_grad(0))
        for (T& v : *gx) v += g;
    });
  }
  return y;
}

template <typename T>
Tensor<T> sum_sq_diff(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape = nullptr) {
  detail::require_defined<T>("sum_sq_diff", {&a, &b});
  detail::check_same_shape("sum_sq_diff", a, b);
  const auto& av = a.values();
  const auto& bv = b.values();
  double acc = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    double d = static_cast<double>(av[i]) - static_cast<double>(bv[i]);
    acc += d * d;
  }
  Tensor<T> y = Tensor<T>::scalar(static_cast<T>(acc));
  if (tape && tape->wants({&a, &b})) {
    auto ap = a.shared_values();
    auto bp = b.shared_values();
    tape->record(y, {&a, &b}, [ap, bp](auto& ctx) {
      T g = ctx.out_grad()[0];
      auto* ga = ctx.in_grad(0);
      auto* gb = ctx.in_grad(1);
      for (std::size_t i = 0; i < ap->size(); ++i) {
        T d = T(2) * ((*ap)[i] - (*bp)[i]) * g;
        if (ga) (*ga)[i] += d;
        if (gb) (*gb)[i] -= d;
      }
    });
  }
  return y;
}

// ---- masked per-channel statistics ----

namespace detail {

template <typename T>
struct MaskedLayout {
  int c, h, w;
  std::int64_t plane;
  std::int64_t count;   // selected positions
  std::int64_t divisor; // count or plane depending on mode
};

template <typename T>
MaskedLayout<T> masked_layout(const char* op, const Tensor<T>& feat,
                              const Tensor<T>& mask, StatsMode mode) {
  require_defined<T>(op, {&feat, &mask});
  check_rank(op, feat, 4);
  check_rank(op, mask, 4);
  if (feat.dim(0) != 1 || mask.dim(0) != 1 || mask.dim(1) != 1)
    fail_validation(op, ": expected feat [1,C,H,W] and mask [1,1,H,W], got ",
                    shape_str(feat.shape()), " and ", shape_str(mask.shape()));
  if (feat.dim(2) != mask.dim(2) || feat.dim(3) != mask.dim(3))
    fail_validation(op, ": spatial mismatch ", shape_str(feat.shape()), " vs ",
                    shape_str(mask.shape()));
  check_binary_mask(op, mask);
  MaskedLayout<T> l;
  l.c = feat.dim(1);
  l.h = feat.dim(2);
  l.w = feat.dim(3);
  l.plane = static_cast<std::int64_t>(l.h) * l.w;
  l.count = 0;
  for (T v : mask.values())
    if (v == T(1)) ++l.count;
  if (mode == StatsMode::masked_region && l.count == 0)
    fail_validation(op, ": mask selects no positions");
  l.divisor = mode == StatsMode::masked_region ? l.count : l.plane;
  return l;
}

// Per-channel mean of the selected (or zero-filled) values.
template <typename T>
std::vector<double> masked_mean_raw(const Tensor<T>& feat, const Tensor<T>& mask,
                                    const MaskedLayout<T>& l) {
  const auto& fv = feat.values();
  const auto& mv = mask.values();
  std::vector<double> mu(static_cast<std::size_t>(l.c), 0.0);
  for (int c = 0; c < l.c; ++c) {
    const T* f = fv.data() + static_cast<std::int64_t>(c) * l.plane;
    double acc = 0.0;
    for (std::int64_t i = 0; i < l.plane; ++i)
      if (mv[static_cast<std::size_t>(i)] == T(1)) acc += static_cast<double>(f[i]);
    mu[static_cast<std::size_t>(c)] = acc / static_cast<double>(l.divisor);
  }
  return mu;
}

// Per-channel population variance. In zero_filled mode the unselected
// positions contribute value 0 to both moments.
template <typename T>
std::vector<double> masked_var_raw(const Tensor<T>& feat, const Tensor<T>& mask,
                                   const MaskedLayout<T>& l,
                                   const std::vector<double>& mu, StatsMode mode) {
  const auto& fv = feat.values();
  const auto& mv = mask.values();
  std::vector<double> var(static_cast<std::size_t>(l.c), 0.0);
  for (int c = 0; c < l.c; ++c) {
    const T* f = fv.data() + static_cast<std::int64_t>(c) * l.plane;
    const double m = mu[static_cast<std::size_t>(c)];
    double acc = 0.0;
    for (std::int64_t i = 0; i < l.plane; ++i) {
      if (mv[static_cast<std::size_t>(i)] == T(1)) {
        double d = static_cast<double>(f[i]) - m;
        acc += d * d;
      } else if (mode == StatsMode::zero_filled) {
        acc += m * m;
      }
    }
    var[static_cast<std::size_t>(c)] = acc / static_cast<double>(l.divisor);
  }
  return var;
}

}  // namespace detail

// feat [1,C,H,W], mask [1,1,H,W] -> [C].
template <typename T>
Tensor<T> masked_mean(const Tensor<T>& feat, const Tensor<T>& mask,
                      StatsMode mode = StatsMode::masked_region,
                      Tape<T>* tape = nullptr) {
  auto l = detail::masked_layout("masked_mean", feat, mask, mode);
  auto mu = detail::masked_mean_raw(feat, mask, l);
  std::vector<T> out(mu.size());
  for (std::size_t i = 0; i < mu.size(); ++i) out[i] = static_cast<T>(mu[i]);
  Tensor<T> y({l.c}, std::move(out));
  if (tape && tape->wants({&feat})) {
    auto mp = mask.shared_values();
    tape->record(y, {&feat}, [mp, l](auto& ctx) {
      const auto& g = ctx.out_grad();
      if (auto* gf = ctx.in_grad(0)) {
        const T inv = static_cast<T>(1.0 / static_cast<double>(l.divisor));
        for (int c = 0; c < l.c; ++c) {
          T q = g[static_cast<std::size_t>(c)] * inv;
          T* dst = gf->data() + static_cast<std::int64_t>(c) * l.plane;
          for (std::int64_t i = 0; i < l.plane; ++i)
            if ((*mp)[static_cast<std::size_t>(i)] == T(1)) dst[i] += q;
        }
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> masked_var(const Tensor<T>& feat, const Tensor<T>& mask,
                     StatsMode mode = StatsMode::masked_region,
                     Tape<T>* tape = nullptr) {
  auto l = detail::masked_layout("masked_var", feat, mask, mode);
  auto mu = detail::masked_mean_raw(feat, mask, l);
  auto var = detail::masked_var_raw(feat, mask, l, mu, mode);
  std::vector<T> out(var.size());
  for (std::size_t i = 0; i < var.size(); ++i) out[i] = static_cast<T>(var[i]);
  Tensor<T> y({l.c}, std::move(out));
  if (tape && tape->wants({&feat})) {
    auto fp = feat.shared_values();
    auto mp = mask.shared_values();
    // d var / d x_j = 2 (x_j - mu) / divisor at selected positions; the mean's
    // own dependence cancels because sum(x - mu) over the region is zero.
    tape->record(y, {&feat}, [fp, mp, mu, l](auto& ctx) {
      const auto& g = ctx.out_grad();
      if (auto* gf = ctx.in_grad(0)) {
        const double inv = 2.0 / static_cast<double>(l.divisor);
        for (int c = 0; c < l.c; ++c) {
          double q = static_cast<double>(g[static_cast<std::size_t>(c)]) * inv;
          const T* f = fp->data() + static_cast<std::int64_t>(c) * l.plane;
          T* dst = gf->data() + static_cast<std::int64_t>(c) * l.plane;
          const double m = mu[static_cast<std::size_t>(c)];
          for (std::int64_t i = 0; i < l.plane; ++i)
            if ((*mp)[static_cast<std::size_t>(i)] == T(1))
              dst[i] += static_cast<T>(q * (static_cast<double>(f[i]) - m));
        }
      }
    });
  }
  return y;
}

// Population standard deviation; subgradient 0 where sigma == 0.
template <typename T>
Tensor<T> masked_std(const Tensor<T>& feat, const Tensor<T>& mask,
                     StatsMode mode = StatsMode::masked_region,
                     Tape<T>* tape = nullptr) {
  auto l = detail::masked_layout("masked_std", feat, mask, mode);
  auto mu = detail::masked_mean_raw(feat, mask, l);
  auto var = detail::masked_var_raw(feat, mask, l, mu, mode);
  std::vector<T> out(var.size());
  std::vector<double> sd(var.size());
  for (std::size_t i = 0; i < var.size(); ++i) {
    sd[i] = std::sqrt(std::max(var[i], 0.0));
    out[i] = static_cast<T>(sd[i]);
  }
  Tensor<T> y({l.c}, std::move(out));
  if (tape && tape->wants({&feat})) {
    auto fp = feat.shared_values();
    auto mp = mask.shared_values();
    tape->record(y, {&feat}, [fp, mp, mu, sd, l](auto& ctx) {
      const auto& g = ctx.out_grad();
      if (auto* gf = ctx.in_grad(0)) {
        for (int c = 0; c < l.c; ++c) {
          const double s = sd[static_cast<std::size_t>(c)];
          if (s <= 0.0) continue;
          const double q = static_cast<double>(g[static_cast<std::size_t>(c)]) /
                           (s * static_cast<double>(l.divisor));
          const T* f = fp->data() + static_cast<std::int64_t>(c) * l.plane;
          T* dst = gf->data() + static_cast<std::int64_t>(c) * l.plane;
          const double m = mu[static_cast<std::size_t>(c)];
          for (std::int64_t i = 0; i < l.plane; ++i)
            if ((*mp)[static_cast<std::size_t>(i)] == T(1))
              dst[i] += static_cast<T>(q * (static_cast<double>(f[i]) - m));
        }
      }
    });
  }
  return y;
}

// ---- per-channel affine and masked select ----

// y[n,c,i,j] = x[n,c,i,j] * v[c]
template <typename T>
Tensor<T> scale_channels(const Tensor<T>& x, const Tensor<T>& v, Tape<T>* tape = nullptr) {
  detail::require_defined<T>("scale_channels", {&x, &v});
  detail::check_rank("scale_channels", x, 4);
  detail::check_rank("scale_channels", v, 1);
  const int n = x.dim(0), c = x.dim(1);
  if (v.dim(0) != c)
    fail_validation("scale_channels: ", v.dim(0), " scales for ", c, " channels");
  const std::int64_t plane = static_cast<std::int64_t>(x.dim(2)) * x.dim(3);
  const auto& xv = x.values();
  const auto& vv = v.values();
  std::vector<T> out(xv.size());
  for (int s = 0; s < n; ++s)
    for (int ch = 0; ch < c; ++ch) {
      const std::int64_t base = (static_cast<std::int64_t>(s) * c + ch) * plane;
      const T f = vv[static_cast<std::size_t>(ch)];
      for (std::int64_t i = 0; i < plane; ++i)
        out[static_cast<std::size_t>(base + i)] = xv[static_cast<std::size_t>(base + i)] * f;
    }
  detail::dbg_finite(out, "scale_channels");
  Tensor<T> y(x.shape(), std::move(out));
  if (tape && tape->wants({&x, &v})) {
    auto xp = x.shared_values();
    auto vp = v.shared_values();
    tape->record(y, {&x, &v}, [xp, vp, n, c, plane](auto& ctx) {
      const auto& g = ctx.out_grad();
      auto* gx = ctx.in_grad(0);
      auto* gv = ctx.in_grad(1);
      for (int s = 0; s < n; ++s)
        for (int ch = 0; ch < c; ++ch) {
          const std::int64_t base = (static_cast<std::int64_t>(s) * c + ch) * plane;
          if (gx) {
            const T f = (*vp)[static_cast<std::size_t>(ch)];
            for (std::int64_t i = 0; i < plane; ++i)
              (*gx)[static_cast<std::size_t>(base + i)] += g[static_cast<std::size_t>(base + i)] * f;
          }
          if (gv) {
            double acc = 0.0;
            for (std::int64_t i = 0; i < plane; ++i)
              acc += static_cast<double>(g[static_cast<std::size_t>(base + i)]) *
                     (*xp)[static_cast<std::size_t>(base + i)];
            (*gv)[static_cast<std::size_t>(ch)] += static_cast<T>(acc);
          }
        }
    });
  }
  return y;
}

// y[n,c,i,j] = x[n,c,i,j] + v[c]
template <typename T>
Tensor<T> shift_channels(const Tensor<T>& x, const Tensor<T>& v, Tape<T>* tape = nullptr) {
  detail::require_defined<T>("shift_channels", {&x, &v});
  detail::check_rank("shift_channels", x, 4);
  detail::check_rank("shift_channels", v, 1);
  const int n = x.dim(0), c = x.dim(1);
  if (v.dim(0) != c)
    fail_validation("shift_channels: ", v.dim(0), " shifts for ", c, " channels");
  const std::int64_t plane = static_cast<std::int64_t>(x.dim(2)) * x.dim(3);
  const auto& xv = x.values();
  const auto& vv = v.values();
  std::vector<T> out(xv.size());
  for (int s = 0; s < n; ++s)
    for (int ch = 0; ch < c; ++ch) {
      const std::int64_t base = (static_cast<std::int64_t>(s) * c + ch) * plane;
      const T f = vv[static_cast<std::size_t>(ch)];
      for (std::int64_t i = 0; i < plane; ++i)
        out[static_cast<std::size_t>(base + i)] = xv[static_cast<std::size_t>(base + i)] + f;
    }
  Tensor<T> y(x.shape(), std::move(out));
  if (tape && tape->wants({&x, &v})) {
    tape->record(y, {&x, &v}, [n, c, plane](auto& ctx) {
      const auto& g = ctx.out_grad();
      auto* gx = ctx.in_grad(0);
      auto* gv = ctx.in_grad(1);
      if (gx)
        for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
      if (gv)
        for (int s = 0; s < n; ++s)
          for (int ch = 0; ch < c; ++ch) {
            const std::int64_t base = (static_cast<std::int64_t>(s) * c + ch) * plane;
            double acc = 0.0;
            for (std::int64_t i = 0; i < plane; ++i)
              acc += static_cast<double>(g[static_cast<std::size_t>(base + i)]);
            (*gv)[static_cast<std::size_t>(ch)] += static_cast<T>(acc);
          }
    });
  }
  return y;
}

// y = mask ? a : b, selecting whole pixels across channels. Positions taken
// from b are bit-identical to b, which is what keeps unedited background
// regions untouched end to end.
template <typename T>
Tensor<T> mask_merge(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& mask,
                     Tape<T>* tape = nullptr) {
  detail::require_defined<T>("mask_merge", {&a, &b, &mask});
  detail::check_same_shape("mask_merge", a, b);
  detail::check_rank("mask_merge", a, 4);
  detail::check_rank("mask_merge", mask, 4);
  if (mask.dim(0) != 1 || mask.dim(1) != 1 || mask.dim(2) != a.dim(2) ||
      mask.dim(3) != a.dim(3))
    fail_validation("mask_merge: mask shape ", shape_str(mask.shape()),
                    " does not cover ", shape_str(a.shape()));
  detail::check_binary_mask("mask_merge", mask);
  const int n = a.dim(0), c = a.dim(1);
  const std::int64_t plane = static_cast<std::int64_t>(a.dim(2)) * a.dim(3);
  const auto& av = a.values();
  const auto& bv = b.values();
  const auto& mv = mask.values();
  std::vector<T> out(av.size());
  for (int nc = 0; nc < n * c; ++nc) {
    const std::int64_t base = static_cast<std::int64_t>(nc) * plane;
    for (std::int64_t i = 0; i < plane; ++i)
      out[static_cast<std::size_t>(base + i)] = mv[static_cast<std::size_t>(i)] == T(1)
                                                    ? av[static_cast<std::size_t>(base + i)]
                                                    : bv[static_cast<std::size_t>(base + i)];
  }
  Tensor<T> y(a.shape(), std::move(out));
  if (tape && tape->wants({&a, &b})) {
    auto mp = mask.shared_values();
    tape->record(y, {&a, &b}, [mp, n, c, plane](auto& ctx) {
      const auto& g = ctx.out_grad();
      auto* ga = ctx.in_grad(0);
      auto* gb = ctx.in_grad(1);
      for (int nc = 0; nc < n * c; ++nc) {
        const std::int64_t base = static_cast<std::int64_t>(nc) * plane;
        for (std::int64_t i = 0; i < plane; ++i) {
          std::size_t k = static_cast<std::size_t>(base + i);
          if ((*mp)[static_cast<std::size_t>(i)] == T(1)) {
            if (ga) (*ga)[k] += g[k];
          } else {
            if (gb) (*gb)[k] += g[k];
          }
        }
      }
    });
  }
  return y;
}

// ---- classification loss ----

inline constexpr double kBceProbFloor = 1e-7;

// score: probability in a [1] tensor; label in {0,1}. The probability is
// clamped to [1e-7, 1-1e-7]; gradient is zero in the clamped regime.
template <typename T>
Tensor<T> binary_cross_entropy(const Tensor<T>& score, int label, Tape<T>* tape = nullptr) {
  detail::require_defined<T>("binary_cross_entropy", {&score});
  if (score.numel() != 1)
    fail_validation("binary_cross_entropy: score must be scalar, got ",
                    shape_str(score.shape()));
  if (label != 0 && label != 1)
    fail_validation("binary_cross_entropy: label must be 0 or 1, got ", label);
  const double lo = kBceProbFloor, hi = 1.0 - kBceProbFloor;
  const double p = static_cast<double>(score.values()[0]);
  const double pc = std::min(std::max(p, lo), hi);
  const double yv = static_cast<double>(label);
  const double val = -(yv * std::log(pc) + (1.0 - yv) * std::log(1.0 - pc));
  Tensor<T> y = Tensor<T>::scalar(static_cast<T>(val));
  if (tape && tape->wants({&score})) {
    tape->record(y, {&score}, [p, pc, yv, lo, hi](auto& ctx) {
      if (auto* gs = ctx.in_grad(0)) {
        if (p > lo && p < hi) {
          double d = (pc - yv) / (pc * (1.0 - pc));
          (*gs)[0] += static_cast<T>(d * static_cast<double>(ctx.out_grad()[0]));
        }
      }
    });
  }
  return y;
}

}  // namespace propih
