// Copyright (c) 2026 RocNet authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "rocnet/tensor.hpp"

namespace rocnet {

namespace detail {

inline void gemm(CBLAS_TRANSPOSE ta, CBLAS_TRANSPOSE tb, int m, int n, int k, float alpha,
                 const float* a, int lda, const float* b, int ldb, float beta, float* c, int ldc) {
  cblas_sgemm(CblasRowMajor, ta, tb, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

inline void gemm(CBLAS_TRANSPOSE ta, CBLAS_TRANSPOSE tb, int m, int n, int k, double alpha,
                 const double* a, int lda, const double* b, int ldb, double beta, double* c,
                 int ldc) {
  cblas_dgemm(CblasRowMajor, ta, tb, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

struct ConvGeom {
  int ci = 0, d = 0, h = 0, w = 0;  // image side of the map (conv input space)
  int k = 0, stride = 0, pad = 0;
  int od = 0, oh = 0, ow = 0;  // patch-position side (conv output space)

  int rows() const { return ci * k * k * k; }
  int cols() const { return od * oh * ow; }
  std::int64_t image_numel() const { return std::int64_t{1} * ci * d * h * w; }
  bool unit_kernel() const { return k == 1 && stride == 1 && pad == 0; }
};

inline ConvGeom conv_geom(int ci, int d, int h, int w, int k, int stride, int pad) {
  if (stride < 1) throw DimensionError("stride must be >= 1");
  if (pad < 0) throw DimensionError("padding must be >= 0");
  if (d + 2 * pad < k || h + 2 * pad < k || w + 2 * pad < k)
    throw DimensionError("kernel does not fit padded input");
  ConvGeom g;
  g.ci = ci;
  g.d = d;
  g.h = h;
  g.w = w;
  g.k = k;
  g.stride = stride;
  g.pad = pad;
  g.od = (d + 2 * pad - k) / stride + 1;
  g.oh = (h + 2 * pad - k) / stride + 1;
  g.ow = (w + 2 * pad - k) / stride + 1;
  return g;
}

// Unfolds one [ci,d,h,w] image into a [ci*k^3, od*oh*ow] patch matrix.
template <typename T>
void im2col(const ConvGeom& g, const T* x, T* col) {
  const int P = g.cols();
  int row = 0;
  for (int c = 0; c < g.ci; ++c) {
    const T* src = x + static_cast<std::size_t>(c) * g.d * g.h * g.w;
    for (int kz = 0; kz < g.k; ++kz)
      for (int ky = 0; ky < g.k; ++ky)
        for (int kx = 0; kx < g.k; ++kx, ++row) {
          T* dst = col + static_cast<std::size_t>(row) * P;
          int p = 0;
          for (int oz = 0; oz < g.od; ++oz) {
            const int iz = oz * g.stride - g.pad + kz;
            const bool zok = iz >= 0 && iz < g.d;
            for (int oy = 0; oy < g.oh; ++oy) {
              const int iy = oy * g.stride - g.pad + ky;
              const bool yok = zok && iy >= 0 && iy < g.h;
              const T* plane = src + (static_cast<std::size_t>(iz) * g.h + iy) * g.w;
              for (int ox = 0; ox < g.ow; ++ox, ++p) {
                const int ix = ox * g.stride - g.pad + kx;
                dst[p] = (yok && ix >= 0 && ix < g.w) ? plane[ix] : T{0};
              }
            }
          }
        }
  }
}

// Adjoint of im2col: scatter-adds a patch matrix back into image space.
template <typename T>
void col2im_add(const ConvGeom& g, const T* col, T* x) {
  const int P = g.cols();
  int row = 0;
  for (int c = 0; c < g.ci; ++c) {
    T* dst = x + static_cast<std::size_t>(c) * g.d * g.h * g.w;
    for (int kz = 0; kz < g.k; ++kz)
      for (int ky = 0; ky < g.k; ++ky)
        for (int kx = 0; kx < g.k; ++kx, ++row) {
          const T* src = col + static_cast<std::size_t>(row) * P;
          int p = 0;
          for (int oz = 0; oz < g.od; ++oz) {
            const int iz = oz * g.stride - g.pad + kz;
            const bool zok = iz >= 0 && iz < g.d;
            for (int oy = 0; oy < g.oh; ++oy) {
              const int iy = oy * g.stride - g.pad + ky;
              const bool yok = zok && iy >= 0 && iy < g.h;
              T* plane = dst + (static_cast<std::size_t>(iz) * g.h + iy) * g.w;
              for (int ox = 0; ox < g.ow; ++ox, ++p) {
                const int ix = ox * g.stride - g.pad + kx;
                if (yok && ix >= 0 && ix < g.w) plane[ix] += src[p];
              }
            }
          }
        }
  }
}

template <typename T>
constexpr T prob_floor() {
  return std::is_same_v<T, float> ? T(1e-7) : T(1e-15);
}

template <typename T>
constexpr T log_floor() {
  return std::is_same_v<T, float> ? T(1e-8) : T(1e-16);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Convolutions. Weight layout [c0, c1, k, k, k] serves both directions:
// conv3d maps c1 -> c0 channels, conv_transpose3d maps c0 -> c1, so a single
// weight tensor satisfies the adjoint identity <conv(x), y> == <x, convT(y)>.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> conv3d(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                 int stride, int padding) {
  if (w.rank() != 5 || w.extent(2) != w.extent(3) || w.extent(3) != w.extent(4))
    throw DimensionError("conv3d weight must be [c_out,c_in,k,k,k], got " + shape_str(w.shape()));
  if (x.rank() != 4 && x.rank() != 5)
    throw DimensionError("conv3d input must be rank 4 or 5, got " + shape_str(x.shape()));
  const bool batched = x.rank() == 5;
  const int B = batched ? static_cast<int>(x.extent(0)) : 1;
  const int ci = static_cast<int>(x.extent(batched ? 1 : 0));
  const int co = static_cast<int>(w.extent(0));
  const int k = static_cast<int>(w.extent(2));
  if (w.extent(1) != ci)
    throw DimensionError("conv3d channel mismatch: input " + shape_str(x.shape()) + " weight " +
                         shape_str(w.shape()));
  if (b.rank() != 1 || b.extent(0) != co)
    throw DimensionError("conv3d bias must be [c_out]");
  const auto g = detail::conv_geom(ci, static_cast<int>(x.extent(batched ? 2 : 1)),
                                   static_cast<int>(x.extent(batched ? 3 : 2)),
                                   static_cast<int>(x.extent(batched ? 4 : 3)), k, stride, padding);

  const int K = g.rows(), P = g.cols();
  Shape out_shape = batched ? Shape{B, co, g.od, g.oh, g.ow} : Shape{co, g.od, g.oh, g.ow};
  Tensor<T> out(std::move(out_shape));

  std::vector<T> col;
  if (!g.unit_kernel()) col.resize(static_cast<std::size_t>(K) * P);
  for (int i = 0; i < B; ++i) {
    const T* xi = x.data() + static_cast<std::size_t>(i) * g.image_numel();
    const T* colp = xi;
    if (!g.unit_kernel()) {
      detail::im2col(g, xi, col.data());
      colp = col.data();
    }
    T* oi = out.data() + static_cast<std::size_t>(i) * co * P;
    detail::gemm(CblasNoTrans, CblasNoTrans, co, P, K, T{1}, w.data(), K, colp, P, T{0}, oi, P);
    for (int c = 0; c < co; ++c) {
      const T bv = b.data()[c];
      T* row = oi + static_cast<std::size_t>(c) * P;
      for (int p = 0; p < P; ++p) row[p] += bv;
    }
  }
  check_finite(out, "conv3d");

  bool track = x.requires_grad() || w.requires_grad() || b.requires_grad();
  if (detail::attach_output(tape, out, track)) {
    Tensor<T> xc = x, wc = w, bc = b;
    Tensor<T> oc = out;
    tape->record([xc, wc, bc, oc, g, B, co, K, P]() mutable {
      const T* og = oc.grad().data();
      std::vector<T> col, colg;
      if (!g.unit_kernel() && (wc.requires_grad() || xc.requires_grad()))
        col.resize(static_cast<std::size_t>(K) * P);
      if (xc.requires_grad() && !g.unit_kernel()) colg.resize(static_cast<std::size_t>(K) * P);
      for (int i = 0; i < B; ++i) {
        const T* gi = og + static_cast<std::size_t>(i) * co * P;
        const T* xi = xc.data() + static_cast<std::size_t>(i) * g.image_numel();
        if (wc.requires_grad()) {
          const T* colp = xi;
          if (!g.unit_kernel()) {
            detail::im2col(g, xi, col.data());
            colp = col.data();
          }
          detail::gemm(CblasNoTrans, CblasTrans, co, K, P, T{1}, gi, P, colp, P, T{1},
                       wc.grad().data(), K);
        }
        if (xc.requires_grad()) {
          T* xgi = xc.grad().data() + static_cast<std::size_t>(i) * g.image_numel();
          if (g.unit_kernel()) {
            detail::gemm(CblasTrans, CblasNoTrans, K, P, co, T{1}, wc.data(), K, gi, P, T{1}, xgi,
                         P);
          } else {
            detail::gemm(CblasTrans, CblasNoTrans, K, P, co, T{1}, wc.data(), K, gi, P, T{0},
                         colg.data(), P);
            detail::col2im_add(g, colg.data(), xgi);
          }
        }
      }
      if (bc.requires_grad()) {
        T* bg = bc.grad().data();
        for (int i = 0; i < B; ++i)
          for (int c = 0; c < co; ++c) {
            const T* row = og + (static_cast<std::size_t>(i) * co + c) * P;
            T acc{0};
            for (int p = 0; p < P; ++p) acc += row[p];
            bg[c] += acc;
          }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> conv_transpose3d(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& w,
                           const Tensor<T>& b, int stride, int padding) {
  if (w.rank() != 5 || w.extent(2) != w.extent(3) || w.extent(3) != w.extent(4))
    throw DimensionError("conv_transpose3d weight must be [c_in,c_out,k,k,k], got " +
                         shape_str(w.shape()));
  if (x.rank() != 4 && x.rank() != 5)
    throw DimensionError("conv_transpose3d input must be rank 4 or 5");
  const bool batched = x.rank() == 5;
  const int B = batched ? static_cast<int>(x.extent(0)) : 1;
  const int cin = static_cast<int>(x.extent(batched ? 1 : 0));
  const int cout = static_cast<int>(w.extent(1));
  const int k = static_cast<int>(w.extent(2));
  if (w.extent(0) != cin)
    throw DimensionError("conv_transpose3d channel mismatch: input " + shape_str(x.shape()) +
                         " weight " + shape_str(w.shape()));
  if (b.rank() != 1 || b.extent(0) != cout) throw DimensionError("conv_transpose3d bias must be [c_out]");
  const int di = static_cast<int>(x.extent(batched ? 2 : 1));
  const int hi = static_cast<int>(x.extent(batched ? 3 : 2));
  const int wi = static_cast<int>(x.extent(batched ? 4 : 3));
  const int dz = (di - 1) * stride - 2 * padding + k;
  const int dy = (hi - 1) * stride - 2 * padding + k;
  const int dx = (wi - 1) * stride - 2 * padding + k;
  if (dz <= 0 || dy <= 0 || dx <= 0) throw DimensionError("conv_transpose3d output would be empty");
  // geometry of the matching forward conv: out-image (cout,dz..) -> positions (di..)
  const auto g = detail::conv_geom(cout, dz, dy, dx, k, stride, padding);
  if (g.od != di || g.oh != hi || g.ow != wi)
    throw DimensionError("conv_transpose3d geometry mismatch");

  const int K = g.rows(), P = g.cols();
  Shape out_shape = batched ? Shape{B, cout, dz, dy, dx} : Shape{cout, dz, dy, dx};
  Tensor<T> out(std::move(out_shape));

  std::vector<T> colg(static_cast<std::size_t>(K) * P);
  for (int i = 0; i < B; ++i) {
    const T* xi = x.data() + static_cast<std::size_t>(i) * cin * P;
    // col = W^T(viewed [cin,K]) * x_i
    detail::gemm(CblasTrans, CblasNoTrans, K, P, cin, T{1}, w.data(), K, xi, P, T{0}, colg.data(),
                 P);
    T* oi = out.data() + static_cast<std::size_t>(i) * g.image_numel();
    detail::col2im_add(g, colg.data(), oi);
    for (int c = 0; c < cout; ++c) {
      const T bv = b.data()[c];
      T* plane = oi + static_cast<std::size_t>(c) * dz * dy * dx;
      for (int p = 0; p < dz * dy * dx; ++p) plane[p] += bv;
    }
  }
  check_finite(out, "conv_transpose3d");

  bool track = x.requires_grad() || w.requires_grad() || b.requires_grad();
  if (detail::attach_output(tape, out, track)) {
    Tensor<T> xc = x, wc = w, bc = b, oc = out;
    tape->record([xc, wc, bc, oc, g, B, cin, cout, K, P]() mutable {
      std::vector<T> gcol(static_cast<std::size_t>(K) * P);
      for (int i = 0; i < B; ++i) {
        const T* ogi = oc.grad().data() + static_cast<std::size_t>(i) * g.image_numel();
        detail::im2col(g, ogi, gcol.data());
        if (xc.requires_grad()) {
          T* xgi = xc.grad().data() + static_cast<std::size_t>(i) * cin * P;
          detail::gemm(CblasNoTrans, CblasNoTrans, cin, P, K, T{1}, wc.data(), K, gcol.data(), P,
                       T{1}, xgi, P);
        }
        if (wc.requires_grad()) {
          const T* xi = xc.data() + static_cast<std::size_t>(i) * cin * P;
          detail::gemm(CblasNoTrans, CblasTrans, cin, K, P, T{1}, xi, P, gcol.data(), P, T{1},
                       wc.grad().data(), K);
        }
      }
      if (bc.requires_grad()) {
        const int S = g.d * g.h * g.w;
        T* bg = bc.grad().data();
        for (int i = 0; i < B; ++i)
          for (int c = 0; c < cout; ++c) {
            const T* plane =
                oc.grad().data() + (static_cast<std::size_t>(i) * cout + c) * S;
            T acc{0};
            for (int p = 0; p < S; ++p) acc += plane[p];
            bg[c] += acc;
          }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batch normalization over dim 1, statistics taken across every other dim.
// Training mode uses biased variance both for normalization and for the
// momentum-blended running update, so running stats loaded back in eval mode
// reproduce a training-mode normalization exactly when momentum is 1.
// Eval mode normalizes with the running statistics.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> batch_norm(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, Tensor<T>& running_mean, Tensor<T>& running_var,
                     bool training, T eps = T(1e-5), T momentum = T(0.1)) {
  if (x.rank() < 2) throw DimensionError("batch_norm input must have rank >= 2 with channels at dim 1");
  const std::int64_t B = x.extent(0);
  const std::int64_t C = x.extent(1);
  const std::int64_t S = x.numel() / (B * C);  // trailing spatial extent
  if (gamma.numel() != C || beta.numel() != C || running_mean.numel() != C ||
      running_var.numel() != C)
    throw DimensionError("batch_norm parameter length must equal channel count");
  const std::int64_t m = B * S;

  std::vector<T> mean(static_cast<std::size_t>(C)), invstd(static_cast<std::size_t>(C));
  if (training) {
    for (std::int64_t c = 0; c < C; ++c) {
      double acc = 0;
      for (std::int64_t i = 0; i < B; ++i) {
        const T* p = x.data() + (i * C + c) * S;
        for (std::int64_t s = 0; s < S; ++s) acc += p[s];
      }
      const double mu = acc / static_cast<double>(m);
      double v = 0;
      for (std::int64_t i = 0; i < B; ++i) {
        const T* p = x.data() + (i * C + c) * S;
        for (std::int64_t s = 0; s < S; ++s) {
          const double d = p[s] - mu;
          v += d * d;
        }
      }
      const double var = v / static_cast<double>(m);
      mean[c] = static_cast<T>(mu);
      invstd[c] = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
      running_mean.data()[c] =
          static_cast<T>((1 - momentum) * running_mean.data()[c] + momentum * mu);
      running_var.data()[c] =
          static_cast<T>((1 - momentum) * running_var.data()[c] + momentum * var);
    }
  } else {
    for (std::int64_t c = 0; c < C; ++c) {
      mean[c] = running_mean.data()[c];
      invstd[c] = static_cast<T>(
          1.0 / std::sqrt(static_cast<double>(running_var.data()[c]) + static_cast<double>(eps)));
    }
  }

  Tensor<T> out(x.shape());
  for (std::int64_t i = 0; i < B; ++i)
    for (std::int64_t c = 0; c < C; ++c) {
      const T* p = x.data() + (i * C + c) * S;
      T* o = out.data() + (i * C + c) * S;
      const T mu = mean[c], is = invstd[c], ga = gamma.data()[c], be = beta.data()[c];
      for (std::int64_t s = 0; s < S; ++s) o[s] = ga * (p[s] - mu) * is + be;
    }
  check_finite(out, "batch_norm");

  bool track = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
  if (detail::attach_output(tape, out, track)) {
    Tensor<T> xc = x, gc = gamma, bc = beta, oc = out;
    tape->record([xc, gc, bc, oc, mean, invstd, B, C, S, m, training]() mutable {
      const T* og = oc.grad().data();
      for (std::int64_t c = 0; c < C; ++c) {
        const T mu = mean[c], is = invstd[c], ga = gc.data()[c];
        double sum_dy = 0, sum_dy_xhat = 0;
        for (std::int64_t i = 0; i < B; ++i) {
          const T* gp = og + (i * C + c) * S;
          const T* xp = xc.data() + (i * C + c) * S;
          for (std::int64_t s = 0; s < S; ++s) {
            sum_dy += gp[s];
            sum_dy_xhat += gp[s] * static_cast<double>((xp[s] - mu) * is);
          }
        }
        if (gc.requires_grad()) gc.grad()[static_cast<std::size_t>(c)] += static_cast<T>(sum_dy_xhat);
        if (bc.requires_grad()) bc.grad()[static_cast<std::size_t>(c)] += static_cast<T>(sum_dy);
        if (xc.requires_grad()) {
          const double inv_m = 1.0 / static_cast<double>(m);
          for (std::int64_t i = 0; i < B; ++i) {
            const T* gp = og + (i * C + c) * S;
            const T* xp = xc.data() + (i * C + c) * S;
            T* xg = xc.grad().data() + (i * C + c) * S;
            for (std::int64_t s = 0; s < S; ++s) {
              if (training) {
                const double xhat = (xp[s] - mu) * is;
                xg[s] += static_cast<T>(ga * is *
                                        (gp[s] - inv_m * sum_dy - xhat * inv_m * sum_dy_xhat));
              } else {
                xg[s] += ga * is * gp[s];
              }
            }
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise activations
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> elu(Tape<T>* tape, const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  const T* xp = x.data();
  T* op = out.data();
  for (std::int64_t i = 0; i < x.numel(); ++i)
    op[i] = xp[i] > T{0} ? xp[i] : static_cast<T>(std::expm1(static_cast<double>(xp[i])));
  check_finite(out, "elu");
  if (detail::attach_output(tape, out, x.requires_grad())) {
    Tensor<T> xc = x, oc = out;
    tape->record([xc, oc]() mutable {
      const T* g = oc.grad().data();
      const T* xp = xc.data();
      const T* op = oc.data();
      T* xg = xc.grad().data();
      for (std::int64_t i = 0; i < xc.numel(); ++i)
        xg[i] += g[i] * (xp[i] > T{0} ? T{1} : op[i] + T{1});
    });
  }
  return out;
}

template <typename T>
Tensor<T> sigmoid(Tape<T>* tape, const Tensor<T>& x) {
  constexpr T lo = detail::prob_floor<T>();
  Tensor<T> out(x.shape());
  const T* xp = x.data();
  T* op = out.data();
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    T s;
    if (xp[i] >= T{0}) {
      s = T{1} / (T{1} + static_cast<T>(std::exp(-static_cast<double>(xp[i]))));
    } else {
      const T e = static_cast<T>(std::exp(static_cast<double>(xp[i])));
      s = e / (T{1} + e);
    }
    op[i] = std::clamp(s, lo, T{1} - lo);
  }
  check_finite(out, "sigmoid");
  if (detail::attach_output(tape, out, x.requires_grad())) {
    Tensor<T> xc = x, oc = out;
    tape->record([xc, oc]() mutable {
      const T* g = oc.grad().data();
      const T* op = oc.data();
      T* xg = xc.grad().data();
      for (std::int64_t i = 0; i < xc.numel(); ++i) xg[i] += g[i] * op[i] * (T{1} - op[i]);
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Affine map: x [d_in] or [B,d_in], w [d_out,d_in], b [d_out]
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> linear(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (w.rank() != 2) throw DimensionError("linear weight must be [d_out,d_in]");
  const bool batched = x.rank() == 2;
  if (!batched && x.rank() != 1) throw DimensionError("linear input must be rank 1 or 2");
  const std::int64_t B = batched ? x.extent(0) : 1;
  const std::int64_t din = x.extent(batched ? 1 : 0);
  const std::int64_t dout = w.extent(0);
  if (w.extent(1) != din)
    throw DimensionError("linear dimension mismatch: input " + shape_str(x.shape()) + " weight " +
                         shape_str(w.shape()));
  if (b.numel() != dout) throw DimensionError("linear bias must be [d_out]");

  Tensor<T> out(batched ? Shape{B, dout} : Shape{dout});
  for (std::int64_t i = 0; i < B; ++i) {
    const T* xi = x.data() + i * din;
    T* oi = out.data() + i * dout;
    for (std::int64_t o = 0; o < dout; ++o) {
      const T* wr = w.data() + o * din;
      T acc = b.data()[o];
      for (std::int64_t j = 0; j < din; ++j) acc += wr[j] * xi[j];
      oi[o] = acc;
    }
  }
  check_finite(out, "linear");

  bool track = x.requires_grad() || w.requires_grad() || b.requires_grad();
  if (detail::attach_output(tape, out, track)) {
    Tensor<T> xc = x, wc = w, bc = b, oc = out;
    tape->record([xc, wc, bc, oc, B, din, dout]() mutable {
      const T* g = oc.grad().data();
      for (std::int64_t i = 0; i < B; ++i) {
        const T* gi = g + i * dout;
        const T* xi = xc.data() + i * din;
        for (std::int64_t o = 0; o < dout; ++o) {
          if (wc.requires_grad()) {
            T* wg = wc.grad().data() + o * din;
            for (std::int64_t j = 0; j < din; ++j) wg[j] += gi[o] * xi[j];
          }
          if (xc.requires_grad()) {
            const T* wr = wc.data() + o * din;
            T* xg = xc.grad().data() + i * din;
            for (std::int64_t j = 0; j < din; ++j) xg[j] += gi[o] * wr[j];
          }
          if (bc.requires_grad()) bc.grad()[static_cast<std::size_t>(o)] += gi[o];
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Softmax cross-entropy, summed over rows. logits [C] or [B,C].
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax_cross_entropy(Tape<T>* tape, const Tensor<T>& logits,
                                const std::vector<int>& targets) {
  const bool batched = logits.rank() == 2;
  if (!batched && logits.rank() != 1)
    throw DimensionError("softmax_cross_entropy logits must be rank 1 or 2");
  const std::int64_t B = batched ? logits.extent(0) : 1;
  const std::int64_t C = logits.extent(batched ? 1 : 0);
  if (static_cast<std::int64_t>(targets.size()) != B)
    throw DimensionError("softmax_cross_entropy needs one target per row");
  for (int t : targets)
    if (t < 0 || t >= C) throw DimensionError("softmax_cross_entropy target out of range");

  std::vector<T> probs(static_cast<std::size_t>(B * C));
  double total = 0;
  for (std::int64_t i = 0; i < B; ++i) {
    const T* l = logits.data() + i * C;
    T mx = l[0];
    for (std::int64_t c = 1; c < C; ++c) mx = std::max(mx, l[c]);
    double z = 0;
    for (std::int64_t c = 0; c < C; ++c) z += std::exp(static_cast<double>(l[c] - mx));
    const double lse = std::log(z) + static_cast<double>(mx);
    for (std::int64_t c = 0; c < C; ++c)
      probs[static_cast<std::size_t>(i * C + c)] =
          static_cast<T>(std::exp(static_cast<double>(l[c]) - lse));
    total += lse - static_cast<double>(l[targets[static_cast<std::size_t>(i)]]);
  }
  Tensor<T> out = Tensor<T>::from({1}, {static_cast<T>(total)});
  check_finite(out, "softmax_cross_entropy");

  if (detail::attach_output(tape, out, logits.requires_grad())) {
    Tensor<T> lc = logits, oc = out;
    tape->record([lc, oc, probs, targets, B, C]() mutable {
      const T g = oc.grad()[0];
      T* lg = lc.grad().data();
      for (std::int64_t i = 0; i < B; ++i)
        for (std::int64_t c = 0; c < C; ++c) {
          const T delta = c == targets[static_cast<std::size_t>(i)] ? T{1} : T{0};
          lg[i * C + c] += g * (probs[static_cast<std::size_t>(i * C + c)] - delta);
        }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Weighted binary cross-entropy, summed. Occupied voxels weigh alpha.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> weighted_bce_sum(Tape<T>* tape, const Tensor<T>& probs,
                           const std::vector<std::uint8_t>& targets, T alpha) {
  if (static_cast<std::int64_t>(targets.size()) != probs.numel())
    throw DimensionError("weighted_bce_sum target count must match output count");
  constexpr T floor = detail::log_floor<T>();
  double total = 0;
  const T* o = probs.data();
  for (std::int64_t i = 0; i < probs.numel(); ++i) {
    const double oc = targets[static_cast<std::size_t>(i)]
                          ? std::max(static_cast<double>(o[i]), static_cast<double>(floor))
                          : std::max(1.0 - static_cast<double>(o[i]), static_cast<double>(floor));
    total += targets[static_cast<std::size_t>(i)] ? -static_cast<double>(alpha) * std::log(oc)
                                                  : -std::log(oc);
  }
  Tensor<T> out = Tensor<T>::from({1}, {static_cast<T>(total)});
  check_finite(out, "weighted_bce_sum");

  if (detail::attach_output(tape, out, probs.requires_grad())) {
    Tensor<T> pc = probs, lc = out;
    tape->record([pc, lc, targets, alpha]() mutable {
      constexpr T floor = detail::log_floor<T>();
      const T g = lc.grad()[0];
      const T* o = pc.data();
      T* pg = pc.grad().data();
      for (std::int64_t i = 0; i < pc.numel(); ++i) {
        if (targets[static_cast<std::size_t>(i)]) {
          if (o[i] > floor) pg[i] += g * (-alpha / o[i]);
        } else {
          if (T{1} - o[i] > floor) pg[i] += g * (T{1} / (T{1} - o[i]));
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Structural / elementwise helpers
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw DimensionError("add shape mismatch");
  Tensor<T> out(a.shape());
  for (std::int64_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
  check_finite(out, "add");
  if (detail::attach_output(tape, out, a.requires_grad() || b.requires_grad())) {
    Tensor<T> ac = a, bc = b, oc = out;
    tape->record([ac, bc, oc]() mutable {
      const T* g = oc.grad().data();
      if (ac.requires_grad()) {
        T* ga = ac.grad().data();
        for (std::int64_t i = 0; i < ac.numel(); ++i) ga[i] += g[i];
      }
      if (bc.requires_grad()) {
        T* gb = bc.grad().data();
        for (std::int64_t i = 0; i < bc.numel(); ++i) gb[i] += g[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> add_n(Tape<T>* tape, const std::vector<Tensor<T>>& xs) {
  if (xs.empty()) throw DimensionError("add_n needs at least one input");
  Tensor<T> out(xs[0].shape());
  bool track = false;
  for (const auto& x : xs) {
    if (x.shape() != xs[0].shape()) throw DimensionError("add_n shape mismatch");
    track = track || x.requires_grad();
    for (std::int64_t i = 0; i < x.numel(); ++i) out.data()[i] += x.data()[i];
  }
  check_finite(out, "add_n");
  if (detail::attach_output(tape, out, track)) {
    std::vector<Tensor<T>> xc = xs;
    Tensor<T> oc = out;
    tape->record([xc, oc]() mutable {
      const T* g = oc.grad().data();
      for (auto& x : xc) {
        if (!x.requires_grad()) continue;
        T* xg = x.grad().data();
        for (std::int64_t i = 0; i < x.numel(); ++i) xg[i] += g[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw DimensionError("mul shape mismatch");
  Tensor<T> out(a.shape());
  for (std::int64_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
  check_finite(out, "mul");
  if (detail::attach_output(tape, out, a.requires_grad() || b.requires_grad())) {
    Tensor<T> ac = a, bc = b, oc = out;
    tape->record([ac, bc, oc]() mutable {
      const T* g = oc.grad().data();
      if (ac.requires_grad())
        for (std::int64_t i = 0; i < ac.numel(); ++i) ac.grad()[static_cast<std::size_t>(i)] += g[i] * bc.data()[i];
      if (bc.requires_grad())
        for (std::int64_t i = 0; i < bc.numel(); ++i) bc.grad()[static_cast<std::size_t>(i)] += g[i] * ac.data()[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(Tape<T>* tape, const Tensor<T>& x, T c) {
  Tensor<T> out(x.shape());
  for (std::int64_t i = 0; i < x.numel(); ++i) out.data()[i] = x.data()[i] * c;
  check_finite(out, "scale");
  if (detail::attach_output(tape, out, x.requires_grad())) {
    Tensor<T> xc = x, oc = out;
    tape->record([xc, oc, c]() mutable {
      const T* g = oc.grad().data();
      T* xg = xc.grad().data();
      for (std::int64_t i = 0; i < xc.numel(); ++i) xg[i] += g[i] * c;
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum(Tape<T>* tape, const Tensor<T>& x) {
  double acc = 0;
  for (std::int64_t i = 0; i < x.numel(); ++i) acc += x.data()[i];
  Tensor<T> out = Tensor<T>::from({1}, {static_cast<T>(acc)});
  if (detail::attach_output(tape, out, x.requires_grad())) {
    Tensor<T> xc = x, oc = out;
    tape->record([xc, oc]() mutable {
      const T g = oc.grad()[0];
      T* xg = xc.grad().data();
      for (std::int64_t i = 0; i < xc.numel(); ++i) xg[i] += g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> reshape(Tape<T>* tape, const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw DimensionError("reshape element count mismatch: " + shape_str(x.shape()) + " to " +
                         shape_str(shape));
  Tensor<T> out = Tensor<T>::from(std::move(shape),
                                  std::vector<T>(x.values().begin(), x.values().end()));
  if (detail::attach_output(tape, out, x.requires_grad())) {
    Tensor<T> xc = x, oc = out;
    tape->record([xc, oc]() mutable {
      const T* g = oc.grad().data();
      T* xg = xc.grad().data();
      for (std::int64_t i = 0; i < xc.numel(); ++i) xg[i] += g[i];
    });
  }
  return out;
}

// Stacks equal-shaped tensors along a fresh leading dimension. A tensor may
// appear multiple times; its gradient then accumulates once per slot.
template <typename T>
Tensor<T> stack(Tape<T>* tape, const std::vector<Tensor<T>>& xs) {
  if (xs.empty()) throw DimensionError("stack needs at least one input");
  const Shape& inner = xs[0].shape();
  const std::int64_t n = xs[0].numel();
  Shape out_shape{static_cast<std::int64_t>(xs.size())};
  out_shape.insert(out_shape.end(), inner.begin(), inner.end());
  Tensor<T> out(std::move(out_shape));
  bool track = false;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (xs[i].shape() != inner) throw DimensionError("stack shape mismatch");
    track = track || xs[i].requires_grad();
    std::copy_n(xs[i].data(), n, out.data() + static_cast<std::int64_t>(i) * n);
  }
  if (detail::attach_output(tape, out, track)) {
    std::vector<Tensor<T>> xc = xs;
    Tensor<T> oc = out;
    tape->record([xc, oc, n]() mutable {
      const T* g = oc.grad().data();
      for (std::size_t i = 0; i < xc.size(); ++i) {
        if (!xc[i].requires_grad()) continue;
        T* xg = xc[i].grad().data();
        const T* gi = g + static_cast<std::int64_t>(i) * n;
        for (std::int64_t j = 0; j < n; ++j) xg[j] += gi[j];
      }
    });
  }
  return out;
}

// Splits along dim 0 into per-slice tensors (inverse of stack).
template <typename T>
std::vector<Tensor<T>> unstack(Tape<T>* tape, const Tensor<T>& x) {
  if (x.rank() < 1) throw DimensionError("unstack needs rank >= 1");
  const std::int64_t G = x.extent(0);
  Shape inner(x.shape().begin() + 1, x.shape().end());
  const std::int64_t n = x.numel() / G;
  std::vector<Tensor<T>> outs;
  outs.reserve(static_cast<std::size_t>(G));
  for (std::int64_t i = 0; i < G; ++i) {
    Tensor<T> o = Tensor<T>::from(inner, std::vector<T>(x.data() + i * n, x.data() + (i + 1) * n));
    outs.push_back(std::move(o));
  }
  if (tape != nullptr && x.requires_grad()) {
    for (auto& o : outs) {
      o.mark_output();
      tape->register_output(o);
    }
    Tensor<T> xc = x;
    std::vector<Tensor<T>> oc = outs;
    tape->record([xc, oc, n]() mutable {
      T* xg = xc.grad().data();
      for (std::size_t i = 0; i < oc.size(); ++i) {
        const T* g = oc[i].grad().data();
        T* dst = xg + static_cast<std::int64_t>(i) * n;
        for (std::int64_t j = 0; j < n; ++j) dst[j] += g[j];
      }
    });
  }
  return outs;
}

// Inverted dropout; identity in eval mode.
template <typename T>
Tensor<T> dropout(Tape<T>* tape, const Tensor<T>& x, double rate, bool training,
                  std::mt19937& rng) {
  if (rate < 0.0 || rate >= 1.0) throw UsageError("dropout rate must be in [0,1)");
  if (!training || rate == 0.0) return x;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<std::uint8_t> keep(static_cast<std::size_t>(x.numel()));
  const T inv_keep = static_cast<T>(1.0 / (1.0 - rate));
  Tensor<T> out(x.shape());
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    keep[static_cast<std::size_t>(i)] = u(rng) >= rate ? 1 : 0;
    out.data()[i] = keep[static_cast<std::size_t>(i)] ? x.data()[i] * inv_keep : T{0};
  }
  if (detail::attach_output(tape, out, x.requires_grad())) {
    Tensor<T> xc = x, oc = out;
    tape->record([xc, oc, keep, inv_keep]() mutable {
      const T* g = oc.grad().data();
      T* xg = xc.grad().data();
      for (std::int64_t i = 0; i < xc.numel(); ++i)
        if (keep[static_cast<std::size_t>(i)]) xg[i] += g[i] * inv_keep;
    });
  }
  return out;
}

}  // namespace rocnet
