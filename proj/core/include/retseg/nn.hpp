#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <type_traits>
#include <vector>

#include "retseg/blas.hpp"
#include "retseg/rng.hpp"
#include "retseg/tensor.hpp"

namespace retseg {

enum class Pad { Same, Valid };
enum class Mode { Train, Eval };

namespace detail {

// Naive row-major GEMM fallback for non-float scalar types (test oracles run
// the forward in double on tiny shapes).
template <class T>
inline void gemm_generic(bool trans_a, bool trans_b, int m, int n, int k, T alpha, const T* a,
                         int lda, const T* b, int ldb, T beta, T* c, int ldc) {
  if constexpr (std::is_same_v<T, float>) {
    sgemm(trans_a, trans_b, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
  } else {
    for (int i = 0; i < m; ++i) {
      for (int j = 0; j < n; ++j) {
        T acc = T(0);
        for (int p = 0; p < k; ++p) {
          const T av = trans_a ? a[p * lda + i] : a[i * lda + p];
          const T bv = trans_b ? b[j * ldb + p] : b[p * ldb + j];
          acc += av * bv;
        }
        c[i * ldc + j] = alpha * acc + beta * c[i * ldc + j];
      }
    }
  }
}

template <class T>
inline void im2col(const T* x, int c, int h, int w, int kh, int kw, int stride, int ph, int pw,
                   int oh, int ow, T* col) {
  // col layout: (c*kh*kw) x (oh*ow)
  for (int ch = 0; ch < c; ++ch) {
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        T* row = col + (static_cast<std::size_t>(ch) * kh * kw + ki * kw + kj) *
                           (static_cast<std::size_t>(oh) * ow);
        for (int oi = 0; oi < oh; ++oi) {
          const int ii = oi * stride + ki - ph;
          if (ii < 0 || ii >= h) {
            std::fill(row + static_cast<std::size_t>(oi) * ow,
                      row + static_cast<std::size_t>(oi + 1) * ow, T(0));
            continue;
          }
          for (int oj = 0; oj < ow; ++oj) {
            const int jj = oj * stride + kj - pw;
            row[static_cast<std::size_t>(oi) * ow + oj] =
                (jj < 0 || jj >= w) ? T(0) : x[(static_cast<std::size_t>(ch) * h + ii) * w + jj];
          }
        }
      }
    }
  }
}

template <class T>
inline void col2im_add(const T* col, int c, int h, int w, int kh, int kw, int stride, int ph,
                       int pw, int oh, int ow, T* x) {
  for (int ch = 0; ch < c; ++ch) {
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        const T* row = col + (static_cast<std::size_t>(ch) * kh * kw + ki * kw + kj) *
                                 (static_cast<std::size_t>(oh) * ow);
        for (int oi = 0; oi < oh; ++oi) {
          const int ii = oi * stride + ki - ph;
          if (ii < 0 || ii >= h) continue;
          for (int oj = 0; oj < ow; ++oj) {
            const int jj = oj * stride + kj - pw;
            if (jj < 0 || jj >= w) continue;
            x[(static_cast<std::size_t>(ch) * h + ii) * w + jj] +=
                row[static_cast<std::size_t>(oi) * ow + oj];
          }
        }
      }
    }
  }
}

}  // namespace detail

// 2D convolution, NCHW input, OIHW weights, zero padding.
template <class T>
inline TensorT<T> conv2d(Tape<T>* tape, const TensorT<T>& x, const TensorT<T>& w,
                         const TensorT<T>& b, int stride = 1, Pad pad = Pad::Same) {
  if (x.rank() != 4) throw ShapeError("conv2d: input must be NCHW, got " + shape_str(x.shape()));
  if (w.rank() != 4) throw ShapeError("conv2d: weight must be OIHW, got " + shape_str(w.shape()));
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int o = w.dim(0), ci = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  if (c != ci)
    throw ShapeError("conv2d: input channel axis (" + std::to_string(c) +
                     ") does not match weight input channels (" + std::to_string(ci) + ")");
  if (b.defined() && (b.rank() != 1 || b.dim(0) != o))
    throw ShapeError("conv2d: bias must have shape [" + std::to_string(o) + "]");
  int ph = 0, pw = 0, oh = 0, ow = 0;
  if (pad == Pad::Same) {
    oh = (h + stride - 1) / stride;
    ow = (wd + stride - 1) / stride;
    ph = std::max((oh - 1) * stride + kh - h, 0) / 2;
    pw = std::max((ow - 1) * stride + kw - wd, 0) / 2;
  } else {
    if (h < kh || wd < kw) throw ShapeError("conv2d: input smaller than kernel (valid padding)");
    oh = (h - kh) / stride + 1;
    ow = (wd - kw) / stride + 1;
  }
  const int kdim = c * kh * kw;
  const std::size_t ospat = static_cast<std::size_t>(oh) * ow;
  TensorT<T> out = TensorT<T>::zeros({n, o, oh, ow});
  std::vector<T> col(static_cast<std::size_t>(kdim) * ospat);
  for (int i = 0; i < n; ++i) {
    detail::im2col(x.ptr() + static_cast<std::size_t>(i) * c * h * wd, c, h, wd, kh, kw, stride,
                   ph, pw, oh, ow, col.data());
    T* y = out.ptr() + static_cast<std::size_t>(i) * o * ospat;
    detail::gemm_generic<T>(false, false, o, static_cast<int>(ospat), kdim, T(1), w.ptr(), kdim,
                            col.data(), static_cast<int>(ospat), T(0), y, static_cast<int>(ospat));
    if (b.defined())
      for (int oc = 0; oc < o; ++oc)
        for (std::size_t s = 0; s < ospat; ++s) y[static_cast<std::size_t>(oc) * ospat + s] += b.data()[oc];
  }
  TensorT<T> xc = x, wc = w, bc = b, outc = out;
  detail::finish_node(tape, out,
                      [xc, wc, bc, outc, n, c, h, wd, o, kh, kw, stride, ph, pw, oh, ow]() mutable {
    if (!outc.has_grad()) return;
    const int kdim = c * kh * kw;
    const std::size_t ospat = static_cast<std::size_t>(oh) * ow;
    std::vector<T> col(static_cast<std::size_t>(kdim) * ospat);
    const bool need_x = xc.wants_grad(), need_w = wc.wants_grad();
    const bool need_b = bc.defined() && bc.wants_grad();
    for (int i = 0; i < n; ++i) {
      const T* dy = outc.grad().data() + static_cast<std::size_t>(i) * o * ospat;
      if (need_w) {
        detail::im2col(xc.ptr() + static_cast<std::size_t>(i) * c * h * wd, c, h, wd, kh, kw,
                       stride, ph, pw, oh, ow, col.data());
        detail::gemm_generic<T>(false, true, o, kdim, static_cast<int>(ospat), T(1), dy,
                                static_cast<int>(ospat), col.data(), static_cast<int>(ospat),
                                T(1), wc.grad().data(), kdim);
      }
      if (need_x) {
        detail::gemm_generic<T>(true, false, kdim, static_cast<int>(ospat), o, T(1), wc.ptr(),
                                kdim, dy, static_cast<int>(ospat), T(0), col.data(),
                                static_cast<int>(ospat));
        detail::col2im_add(col.data(), c, h, wd, kh, kw, stride, ph, pw, oh, ow,
                           xc.grad().data() + static_cast<std::size_t>(i) * c * h * wd);
      }
      if (need_b) {
        for (int oc = 0; oc < o; ++oc) {
          T acc = T(0);
          for (std::size_t s = 0; s < ospat; ++s) acc += dy[static_cast<std::size_t>(oc) * ospat + s];
          bc.grad()[oc] += acc;
        }
      }
    }
  });
  return out;
}

// Transposed convolution with a 2x2 kernel and stride 2: doubles the spatial
// dims, each input pixel expands to one 2x2 output block. Weight layout IOHW.
template <class T>
inline TensorT<T> conv_transpose2d(Tape<T>* tape, const TensorT<T>& x, const TensorT<T>& w,
                                   const TensorT<T>& b) {
  if (x.rank() != 4) throw ShapeError("conv_transpose2d: input must be NCHW");
  if (w.rank() != 4 || w.dim(2) != 2 || w.dim(3) != 2)
    throw ShapeError("conv_transpose2d: weight must be IxOx2x2, got " + shape_str(w.shape()));
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int o = w.dim(1);
  if (w.dim(0) != c)
    throw ShapeError("conv_transpose2d: input channel axis (" + std::to_string(c) +
                     ") does not match weight input channels (" + std::to_string(w.dim(0)) + ")");
  if (b.defined() && (b.rank() != 1 || b.dim(0) != o))
    throw ShapeError("conv_transpose2d: bias must have shape [" + std::to_string(o) + "]");
  TensorT<T> out = TensorT<T>::zeros({n, o, 2 * h, 2 * wd});
  const auto xat = [&](int i, int ch, int r, int cc) {
    return x.ptr()[((static_cast<std::size_t>(i) * c + ch) * h + r) * wd + cc];
  };
  for (int i = 0; i < n; ++i)
    for (int oc = 0; oc < o; ++oc)
      for (int r = 0; r < h; ++r)
        for (int cc = 0; cc < wd; ++cc) {
          T v00 = T(0), v01 = T(0), v10 = T(0), v11 = T(0);
          for (int ch = 0; ch < c; ++ch) {
            const T xv = xat(i, ch, r, cc);
            const T* wp = w.ptr() + (static_cast<std::size_t>(ch) * o + oc) * 4;
            v00 += xv * wp[0];
            v01 += xv * wp[1];
            v10 += xv * wp[2];
            v11 += xv * wp[3];
          }
          const T bias = b.defined() ? b.data()[oc] : T(0);
          T* yp = out.ptr() + ((static_cast<std::size_t>(i) * o + oc) * 2 * h + 2 * r) * 2 * wd + 2 * cc;
          yp[0] = v00 + bias;
          yp[1] = v01 + bias;
          yp[2 * wd] = v10 + bias;
          yp[2 * wd + 1] = v11 + bias;
        }
  TensorT<T> xc = x, wc = w, bc = b, outc = out;
  detail::finish_node(tape, out, [xc, wc, bc, outc, n, c, h, wd, o]() mutable {
    if (!outc.has_grad()) return;
    const auto dyat = [&](int i, int oc, int r, int cc) {
      return outc.grad()[((static_cast<std::size_t>(i) * o + oc) * 2 * h + r) * 2 * wd + cc];
    };
    for (int i = 0; i < n; ++i)
      for (int r = 0; r < h; ++r)
        for (int cc = 0; cc < wd; ++cc)
          for (int oc = 0; oc < o; ++oc) {
            const T g00 = dyat(i, oc, 2 * r, 2 * cc), g01 = dyat(i, oc, 2 * r, 2 * cc + 1);
            const T g10 = dyat(i, oc, 2 * r + 1, 2 * cc), g11 = dyat(i, oc, 2 * r + 1, 2 * cc + 1);
            for (int ch = 0; ch < c; ++ch) {
              const std::size_t widx = (static_cast<std::size_t>(ch) * o + oc) * 4;
              const T xv = xc.ptr()[((static_cast<std::size_t>(i) * c + ch) * h + r) * wd + cc];
              if (xc.wants_grad())
                xc.grad()[((static_cast<std::size_t>(i) * c + ch) * h + r) * wd + cc] +=
                    g00 * wc.ptr()[widx] + g01 * wc.ptr()[widx + 1] + g10 * wc.ptr()[widx + 2] +
                    g11 * wc.ptr()[widx + 3];
              if (wc.wants_grad()) {
                wc.grad()[widx] += g00 * xv;
                wc.grad()[widx + 1] += g01 * xv;
                wc.grad()[widx + 2] += g10 * xv;
                wc.grad()[widx + 3] += g11 * xv;
              }
            }
          }
    if (bc.defined() && bc.wants_grad()) {
      for (int i = 0; i < n; ++i)
        for (int oc = 0; oc < o; ++oc) {
          T acc = T(0);
          const T* dy = outc.grad().data() + (static_cast<std::size_t>(i) * o + oc) * 4 * h * wd;
          for (std::size_t s = 0; s < static_cast<std::size_t>(4) * h * wd; ++s) acc += dy[s];
          bc.grad()[oc] += acc;
        }
    }
  });
  return out;
}

// 2x2 max pooling with stride 2. Requires even spatial dims; gradient is
// routed to the first (row-major) maximal element of each window.
template <class T>
inline TensorT<T> maxpool2(Tape<T>* tape, const TensorT<T>& x) {
  if (x.rank() != 4) throw ShapeError("maxpool2: input must be NCHW");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % 2 != 0 || w % 2 != 0)
    throw ShapeError("maxpool2: spatial dims must be even, got " + shape_str(x.shape()));
  const int oh = h / 2, ow = w / 2;
  TensorT<T> out = TensorT<T>::zeros({n, c, oh, ow});
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch) {
      const T* xp = x.ptr() + (static_cast<std::size_t>(i) * c + ch) * h * w;
      T* yp = out.ptr() + (static_cast<std::size_t>(i) * c + ch) * oh * ow;
      std::size_t* ap = argmax->data() + (static_cast<std::size_t>(i) * c + ch) * oh * ow;
      for (int r = 0; r < oh; ++r)
        for (int cc = 0; cc < ow; ++cc) {
          const std::size_t base = static_cast<std::size_t>(2 * r) * w + 2 * cc;
          const std::size_t cand[4] = {base, base + 1, base + w, base + w + 1};
          std::size_t best = cand[0];
          for (int k = 1; k < 4; ++k)
            if (xp[cand[k]] > xp[best]) best = cand[k];
          yp[static_cast<std::size_t>(r) * ow + cc] = xp[best];
          ap[static_cast<std::size_t>(r) * ow + cc] =
              (static_cast<std::size_t>(i) * c + ch) * h * w + best;
        }
    }
  TensorT<T> xc = x, outc = out;
  detail::finish_node(tape, out, [xc, outc, argmax]() mutable {
    if (!outc.has_grad() || !xc.wants_grad()) return;
    auto& g = xc.grad();
    for (std::size_t s = 0; s < outc.size(); ++s) g[(*argmax)[s]] += outc.grad()[s];
  });
  return out;
}

// Per-channel batch normalization state. gamma/beta are trainable; running
// stats are buffers updated in train mode.
template <class T>
struct BatchNormStateT {
  TensorT<T> gamma, beta, running_mean, running_var;
  T momentum = T(0.9);
  T eps = T(1e-5);

  BatchNormStateT() = default;
  explicit BatchNormStateT(int channels) {
    gamma = TensorT<T>::full({channels}, T(1));
    beta = TensorT<T>::zeros({channels});
    running_mean = TensorT<T>::zeros({channels});
    running_var = TensorT<T>::full({channels}, T(1));
    gamma.set_requires_grad(true);
    beta.set_requires_grad(true);
  }
};

using BatchNormState = BatchNormStateT<float>;

template <class T>
inline TensorT<T> batchnorm(Tape<T>* tape, const TensorT<T>& x, BatchNormStateT<T>& state,
                            Mode mode) {
  if (x.rank() != 4) throw ShapeError("batchnorm: input must be NCHW");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (c != state.gamma.dim(0))
    throw ShapeError("batchnorm: channel axis " + std::to_string(c) + " does not match state (" +
                     std::to_string(state.gamma.dim(0)) + " channels)");
  const std::size_t m = static_cast<std::size_t>(n) * h * w;
  if (mode == Mode::Train && m < 2)
    throw ValueError("batchnorm: train mode needs at least 2 values per channel");
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  auto mean = std::make_shared<std::vector<T>>(c, T(0));
  auto ivstd = std::make_shared<std::vector<T>>(c, T(0));
  if (mode == Mode::Train) {
    std::vector<T> var(c, T(0));
    for (int ch = 0; ch < c; ++ch) {
      double acc = 0.0;
      for (int i = 0; i < n; ++i) {
        const T* xp = x.ptr() + (static_cast<std::size_t>(i) * c + ch) * plane;
        for (std::size_t s = 0; s < plane; ++s) acc += xp[s];
      }
      const T mu = static_cast<T>(acc / static_cast<double>(m));
      double vacc = 0.0;
      for (int i = 0; i < n; ++i) {
        const T* xp = x.ptr() + (static_cast<std::size_t>(i) * c + ch) * plane;
        for (std::size_t s = 0; s < plane; ++s) {
          const double d = static_cast<double>(xp[s]) - mu;
          vacc += d * d;
        }
      }
      (*mean)[ch] = mu;
      var[ch] = static_cast<T>(vacc / static_cast<double>(m));
      (*ivstd)[ch] = T(1) / std::sqrt(var[ch] + state.eps);
      // running stats use the unbiased variance
      const T uvar = static_cast<T>(vacc / static_cast<double>(m - 1));
      state.running_mean.data()[ch] =
          state.momentum * state.running_mean.data()[ch] + (T(1) - state.momentum) * mu;
      state.running_var.data()[ch] =
          state.momentum * state.running_var.data()[ch] + (T(1) - state.momentum) * uvar;
    }
  } else {
    for (int ch = 0; ch < c; ++ch) {
      (*mean)[ch] = state.running_mean.data()[ch];
      (*ivstd)[ch] = T(1) / std::sqrt(state.running_var.data()[ch] + state.eps);
    }
  }
  TensorT<T> out = TensorT<T>::zeros(x.shape());
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch) {
      const T* xp = x.ptr() + (static_cast<std::size_t>(i) * c + ch) * plane;
      T* yp = out.ptr() + (static_cast<std::size_t>(i) * c + ch) * plane;
      const T mu = (*mean)[ch], is = (*ivstd)[ch];
      const T ga = state.gamma.data()[ch], be = state.beta.data()[ch];
      for (std::size_t s = 0; s < plane; ++s) yp[s] = ga * (xp[s] - mu) * is + be;
    }
  TensorT<T> xc = x, gac = state.gamma, bec = state.beta, outc = out;
  detail::finish_node(tape, out, [xc, gac, bec, outc, mean, ivstd, n, c, plane, m, mode]() mutable {
    if (!outc.has_grad()) return;
    for (int ch = 0; ch < c; ++ch) {
      const T mu = (*mean)[ch], is = (*ivstd)[ch], ga = gac.data()[ch];
      double sum_dy = 0.0, sum_dy_xhat = 0.0;
      for (int i = 0; i < n; ++i) {
        const T* xp = xc.ptr() + (static_cast<std::size_t>(i) * c + ch) * plane;
        const T* dyp = outc.grad().data() + (static_cast<std::size_t>(i) * c + ch) * plane;
        for (std::size_t s = 0; s < plane; ++s) {
          sum_dy += dyp[s];
          sum_dy_xhat += static_cast<double>(dyp[s]) * ((xp[s] - mu) * is);
        }
      }
      if (gac.wants_grad()) gac.grad()[ch] += static_cast<T>(sum_dy_xhat);
      if (bec.wants_grad()) bec.grad()[ch] += static_cast<T>(sum_dy);
      if (!xc.wants_grad()) continue;
      const T mdy = static_cast<T>(sum_dy / static_cast<double>(m));
      const T mdyx = static_cast<T>(sum_dy_xhat / static_cast<double>(m));
      for (int i = 0; i < n; ++i) {
        const T* xp = xc.ptr() + (static_cast<std::size_t>(i) * c + ch) * plane;
        const T* dyp = outc.grad().data() + (static_cast<std::size_t>(i) * c + ch) * plane;
        T* gp = xc.grad().data() + (static_cast<std::size_t>(i) * c + ch) * plane;
        for (std::size_t s = 0; s < plane; ++s) {
          const T xhat = (xp[s] - mu) * is;
          if (mode == Mode::Train)
            gp[s] += ga * is * (dyp[s] - mdy - xhat * mdyx);
          else
            gp[s] += ga * is * dyp[s];
        }
      }
    }
  });
  return out;
}

template <class T>
inline TensorT<T> relu(Tape<T>* tape, const TensorT<T>& x) {
  TensorT<T> out = TensorT<T>::zeros(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out.data()[i] = x.data()[i] > T(0) ? x.data()[i] : T(0);
  TensorT<T> xc = x, outc = out;
  detail::finish_node(tape, out, [xc, outc]() mutable {
    if (!outc.has_grad() || !xc.wants_grad()) return;
    auto& g = xc.grad();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xc.data()[i] > T(0)) g[i] += outc.grad()[i];
  });
  return out;
}

template <class T>
inline TensorT<T> sigmoid(Tape<T>* tape, const TensorT<T>& x) {
  TensorT<T> out = TensorT<T>::zeros(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out.data()[i] = T(1) / (T(1) + std::exp(-x.data()[i]));
  TensorT<T> xc = x, outc = out;
  detail::finish_node(tape, out, [xc, outc]() mutable {
    if (!outc.has_grad() || !xc.wants_grad()) return;
    auto& g = xc.grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T y = outc.data()[i];
      g[i] += outc.grad()[i] * y * (T(1) - y);
    }
  });
  return out;
}

// Mean over spatial dims: NCHW -> NxC.
template <class T>
inline TensorT<T> global_avg_pool(Tape<T>* tape, const TensorT<T>& x) {
  if (x.rank() != 4) throw ShapeError("global_avg_pool: input must be NCHW");
  const int n = x.dim(0), c = x.dim(1);
  const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  if (plane < 1) throw ShapeError("global_avg_pool: empty spatial dims");
  TensorT<T> out = TensorT<T>::zeros({n, c});
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch) {
      const T* xp = x.ptr() + (static_cast<std::size_t>(i) * c + ch) * plane;
      double acc = 0.0;
      for (std::size_t s = 0; s < plane; ++s) acc += xp[s];
      out.data()[static_cast<std::size_t>(i) * c + ch] =
          static_cast<T>(acc / static_cast<double>(plane));
    }
  TensorT<T> xc = x, outc = out;
  detail::finish_node(tape, out, [xc, outc, n, c, plane]() mutable {
    if (!outc.has_grad() || !xc.wants_grad()) return;
    const T inv = T(1) / static_cast<T>(plane);
    for (int i = 0; i < n; ++i)
      for (int ch = 0; ch < c; ++ch) {
        const T g0 = outc.grad()[static_cast<std::size_t>(i) * c + ch] * inv;
        T* gp = xc.grad().data() + (static_cast<std::size_t>(i) * c + ch) * plane;
        for (std::size_t s = 0; s < plane; ++s) gp[s] += g0;
      }
  });
  return out;
}

// Affine map: (NxD) x (DxE) + E -> NxE.
template <class T>
inline TensorT<T> linear(Tape<T>* tape, const TensorT<T>& v, const TensorT<T>& w,
                         const TensorT<T>& b) {
  if (v.rank() != 2 || w.rank() != 2)
    throw ShapeError("linear: expected 2-d input and weight");
  const int n = v.dim(0), d = v.dim(1), e = w.dim(1);
  if (w.dim(0) != d)
    throw ShapeError("linear: inner dims disagree, input " + shape_str(v.shape()) + " weight " +
                     shape_str(w.shape()));
  if (b.defined() && (b.rank() != 1 || b.dim(0) != e))
    throw ShapeError("linear: bias must have shape [" + std::to_string(e) + "]");
  TensorT<T> out = TensorT<T>::zeros({n, e});
  detail::gemm_generic<T>(false, false, n, e, d, T(1), v.ptr(), d, w.ptr(), e, T(0), out.ptr(), e);
  if (b.defined())
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < e; ++j) out.data()[static_cast<std::size_t>(i) * e + j] += b.data()[j];
  TensorT<T> vc = v, wc = w, bc = b, outc = out;
  detail::finish_node(tape, out, [vc, wc, bc, outc, n, d, e]() mutable {
    if (!outc.has_grad()) return;
    const T* dy = outc.grad().data();
    if (vc.wants_grad())
      detail::gemm_generic<T>(false, true, n, d, e, T(1), dy, e, wc.ptr(), e, T(1),
                              vc.grad().data(), d);
    if (wc.wants_grad())
      detail::gemm_generic<T>(true, false, d, e, n, T(1), vc.ptr(), d, dy, e, T(1),
                              wc.grad().data(), e);
    if (bc.defined() && bc.wants_grad())
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < e; ++j) bc.grad()[j] += dy[static_cast<std::size_t>(i) * e + j];
  });
  return out;
}

// Row-wise l2 normalization of an NxD matrix. Rows with norm below eps are
// divided by eps instead, so zero rows map to near-zero rows.
template <class T>
inline TensorT<T> l2_normalize(Tape<T>* tape, const TensorT<T>& v, T eps = T(1e-12)) {
  if (v.rank() != 2) throw ShapeError("l2_normalize: expected NxD input");
  const int n = v.dim(0), d = v.dim(1);
  TensorT<T> out = TensorT<T>::zeros(v.shape());
  auto norms = std::make_shared<std::vector<T>>(n, T(0));
  for (int i = 0; i < n; ++i) {
    double acc = 0.0;
    const T* vp = v.ptr() + static_cast<std::size_t>(i) * d;
    for (int j = 0; j < d; ++j) acc += static_cast<double>(vp[j]) * vp[j];
    const T nr = static_cast<T>(std::sqrt(acc));
    (*norms)[i] = nr;
    const T denom = std::max(nr, eps);
    T* op = out.ptr() + static_cast<std::size_t>(i) * d;
    for (int j = 0; j < d; ++j) op[j] = vp[j] / denom;
  }
  TensorT<T> vc = v, outc = out;
  detail::finish_node(tape, out, [vc, outc, norms, n, d, eps]() mutable {
    if (!outc.has_grad() || !vc.wants_grad()) return;
    for (int i = 0; i < n; ++i) {
      const T nr = (*norms)[i];
      const T* gy = outc.grad().data() + static_cast<std::size_t>(i) * d;
      T* gv = vc.grad().data() + static_cast<std::size_t>(i) * d;
      if (nr <= eps) {
        for (int j = 0; j < d; ++j) gv[j] += gy[j] / eps;
        continue;
      }
      const T* y = outc.ptr() + static_cast<std::size_t>(i) * d;
      double dot = 0.0;
      for (int j = 0; j < d; ++j) dot += static_cast<double>(gy[j]) * y[j];
      for (int j = 0; j < d; ++j) gv[j] += (gy[j] - static_cast<T>(dot) * y[j]) / nr;
    }
  });
  return out;
}

// Pixel-wise binary cross-entropy on probabilities, averaged over pixels
// where mask != 0 (or all pixels when mask is undefined).
template <class T>
inline TensorT<T> bce_masked(Tape<T>* tape, const TensorT<T>& pred, const TensorT<T>& target,
                             const TensorT<T>& mask) {
  check_same_shape(pred, target, "bce_masked");
  if (mask.defined()) check_same_shape(pred, mask, "bce_masked (mask)");
  const T eps = T(1e-7);
  std::size_t count = 0;
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (mask.defined() && mask.data()[i] == T(0)) continue;
    ++count;
    const T p = std::clamp(pred.data()[i], eps, T(1) - eps);
    const T t = target.data()[i];
    acc -= static_cast<double>(t) * std::log(static_cast<double>(p)) +
           static_cast<double>(T(1) - t) * std::log(static_cast<double>(T(1) - p));
  }
  if (count == 0) throw ValueError("bce_masked: mask excludes every pixel");
  TensorT<T> out = TensorT<T>::scalar(static_cast<T>(acc / static_cast<double>(count)));
  TensorT<T> pc = pred, tc = target, mc = mask, outc = out;
  detail::finish_node(tape, out, [pc, tc, mc, outc, count, eps]() mutable {
    if (!outc.has_grad() || !pc.wants_grad()) return;
    const T g0 = outc.grad()[0] / static_cast<T>(count);
    auto& g = pc.grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (mc.defined() && mc.data()[i] == T(0)) continue;
      const T raw = pc.data()[i];
      // The forward pass clamps the prediction, so a prediction outside the
      // clamp interval contributes zero gradient.
      if (raw < eps || raw > T(1) - eps) continue;
      const T t = tc.data()[i];
      g[i] += g0 * (raw - t) / (raw * (T(1) - raw));
    }
  });
  return out;
}

// He-normal initialization: i.i.d. N(0, 2/fan_in).
inline Tensor he_init(std::vector<int> shape, int fan_in, RngStream& rng) {
  if (fan_in < 1) throw ValueError("he_init: fan_in must be >= 1");
  Tensor t = Tensor::zeros(std::move(shape));
  const float stddev = std::sqrt(2.0f / static_cast<float>(fan_in));
  for (auto& v : t.data()) v = stddev * rng.normal();
  return t;
}

// Pure spatial flip of an NCHW tensor (no gradient tracking; used by TTA
// and augmentation plumbing).
template <class T>
inline TensorT<T> flip_hw(const TensorT<T>& x, bool flip_h, bool flip_v) {
  if (x.rank() != 4) throw ShapeError("flip_hw: input must be NCHW");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  TensorT<T> out = TensorT<T>::zeros(x.shape());
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch)
      for (int r = 0; r < h; ++r)
        for (int cc = 0; cc < w; ++cc) {
          const int sr = flip_v ? h - 1 - r : r;
          const int sc = flip_h ? w - 1 - cc : cc;
          out.ptr()[((static_cast<std::size_t>(i) * c + ch) * h + r) * w + cc] =
              x.ptr()[((static_cast<std::size_t>(i) * c + ch) * h + sr) * w + sc];
        }
  return out;
}

}  // namespace retseg
