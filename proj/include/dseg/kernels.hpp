#pragma once

// Low-level compute kernels shared by the conv-style ops: a thin Eigen GEMM
// wrapper, im2col/col2im lowering, and the bilinear-sampling family used by
// deformable convolution (value, input-scatter, coordinate gradient).
//
// All kernels work on one batch element; callers loop over the batch.

#include <Eigen/Dense>
#include <cmath>

#include "dseg/errors.hpp"

namespace dseg {

// C[m,n] = alpha * op(A) * op(B) + beta * C, row-major raw pointers.
// op(A) is A[m,k] or, when trans_a, the transpose of A[k,m] (same for B).
template <class T>
void gemm(bool trans_a, bool trans_b, int m, int n, int k, T alpha, const T* a,
          const T* b, T beta, T* c) {
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<const Mat> ma(a, trans_a ? k : m, trans_a ? m : k);
  Eigen::Map<const Mat> mb(b, trans_b ? n : k, trans_b ? k : n);
  Eigen::Map<Mat> mc(c, m, n);
  Mat prod;
  if (!trans_a && !trans_b)
    prod = ma * mb;
  else if (trans_a && !trans_b)
    prod = ma.transpose() * mb;
  else if (!trans_a && trans_b)
    prod = ma * mb.transpose();
  else
    prod = ma.transpose() * mb.transpose();
  if (beta == T(0))
    mc = alpha * prod;
  else
    mc = alpha * prod + beta * mc;
}

inline int conv_out_dim(int in, int kernel, int stride, int pad) {
  check_geom(in > 0 && kernel > 0 && stride > 0 && pad >= 0,
             "conv geometry must have positive extents and stride");
  int out = (in + 2 * pad - kernel) / stride + 1;
  check_geom(out > 0, "conv output dimension would be empty");
  return out;
}

// x[C,H,W] -> cols[C*K*K, OH*OW]; row (c*K+ki)*K+kj, column oy*OW+ox.
template <class T>
void im2col(const T* x, int channels, int h, int w, int kernel, int stride,
            int pad, int oh, int ow, T* cols) {
  for (int c = 0; c < channels; ++c) {
    for (int ki = 0; ki < kernel; ++ki) {
      for (int kj = 0; kj < kernel; ++kj) {
        T* dst = cols + ((size_t(c) * kernel + ki) * kernel + kj) * oh * ow;
        for (int oy = 0; oy < oh; ++oy) {
          int y = oy * stride - pad + ki;
          for (int ox = 0; ox < ow; ++ox) {
            int xx = ox * stride - pad + kj;
            *dst++ = (y >= 0 && y < h && xx >= 0 && xx < w)
                         ? x[(size_t(c) * h + y) * w + xx]
                         : T(0);
          }
        }
      }
    }
  }
}

// Scatter-add transpose of im2col: cols -> gx[C,H,W].
template <class T>
void col2im(const T* cols, int channels, int h, int w, int kernel, int stride,
            int pad, int oh, int ow, T* gx) {
  for (int c = 0; c < channels; ++c) {
    for (int ki = 0; ki < kernel; ++ki) {
      for (int kj = 0; kj < kernel; ++kj) {
        const T* src = cols + ((size_t(c) * kernel + ki) * kernel + kj) * oh * ow;
        for (int oy = 0; oy < oh; ++oy) {
          int y = oy * stride - pad + ki;
          for (int ox = 0; ox < ow; ++ox, ++src) {
            int xx = ox * stride - pad + kj;
            if (y >= 0 && y < h && xx >= 0 && xx < w)
              gx[(size_t(c) * h + y) * w + xx] += *src;
          }
        }
      }
    }
  }
}

// A sample point contributes only while inside the open range (-1, dim);
// beyond that every bilinear corner weight is zero.
template <class T>
bool sample_in_range(T y, T x, int h, int w) {
  return y > T(-1) && y < T(h) && x > T(-1) && x < T(w);
}

// Bilinear read of data[H,W] at fractional (y, x); out-of-bounds corners
// read as zero, fully out-of-range points as zero.
template <class T>
T bilinear_at(const T* data, int h, int w, T y, T x) {
  if (!sample_in_range(y, x, h, w)) return T(0);
  int y0 = int(std::floor(y)), x0 = int(std::floor(x));
  T ly = y - T(y0), lx = x - T(x0);
  T hy = T(1) - ly, hx = T(1) - lx;
  auto at = [&](int yy, int xx) -> T {
    return (yy >= 0 && yy < h && xx >= 0 && xx < w) ? data[size_t(yy) * w + xx]
                                                    : T(0);
  };
  return hy * hx * at(y0, x0) + hy * lx * at(y0, x0 + 1) +
         ly * hx * at(y0 + 1, x0) + ly * lx * at(y0 + 1, x0 + 1);
}

// Scatter-add g through the same four corner weights bilinear_at reads with.
template <class T>
void bilinear_scatter(T* gdata, int h, int w, T y, T x, T g) {
  if (!sample_in_range(y, x, h, w)) return;
  int y0 = int(std::floor(y)), x0 = int(std::floor(x));
  T ly = y - T(y0), lx = x - T(x0);
  T hy = T(1) - ly, hx = T(1) - lx;
  auto add = [&](int yy, int xx, T v) {
    if (yy >= 0 && yy < h && xx >= 0 && xx < w) gdata[size_t(yy) * w + xx] += v;
  };
  add(y0, x0, hy * hx * g);
  add(y0, x0 + 1, hy * lx * g);
  add(y0 + 1, x0, ly * hx * g);
  add(y0 + 1, x0 + 1, ly * lx * g);
}

// d(bilinear_at)/dy and /dx at (y, x). Uses the one-sided derivative from
// the floor cell, so integer coordinates get the right-hand slope rather
// than a symmetric zero; without this, zero-initialized offsets would never
// receive a gradient. Out-of-range points get zero.
template <class T>
void bilinear_coord_grad(const T* data, int h, int w, T y, T x, T* gy, T* gx) {
  *gy = T(0);
  *gx = T(0);
  if (!sample_in_range(y, x, h, w)) return;
  int y0 = int(std::floor(y)), x0 = int(std::floor(x));
  T ly = y - T(y0), lx = x - T(x0);
  auto at = [&](int yy, int xx) -> T {
    return (yy >= 0 && yy < h && xx >= 0 && xx < w) ? data[size_t(yy) * w + xx]
                                                    : T(0);
  };
  T v00 = at(y0, x0), v01 = at(y0, x0 + 1);
  T v10 = at(y0 + 1, x0), v11 = at(y0 + 1, x0 + 1);
  *gy = (T(1) - lx) * (v10 - v00) + lx * (v11 - v01);
  *gx = (T(1) - ly) * (v01 - v00) + ly * (v11 - v10);
}

// Deformable fork of im2col. offsets[2*K*K, OH, OW] holds (dy, dx) pairs per
// kernel tap, interleaved as channels (2n, 2n+1); mask[K*K, OH, OW] is an
// optional per-tap modulation factor (pass nullptr for the unmodulated form).
template <class T>
void deform_im2col(const T* x, const T* offsets, const T* mask, int channels,
                   int h, int w, int kernel, int stride, int pad, int oh,
                   int ow, T* cols) {
  size_t plane = size_t(oh) * ow;
  for (int c = 0; c < channels; ++c) {
    const T* xc = x + size_t(c) * h * w;
    for (int ki = 0; ki < kernel; ++ki) {
      for (int kj = 0; kj < kernel; ++kj) {
        int tap = ki * kernel + kj;
        const T* off_y = offsets + size_t(2 * tap) * plane;
        const T* off_x = offsets + size_t(2 * tap + 1) * plane;
        const T* mk = mask ? mask + size_t(tap) * plane : nullptr;
        T* dst = cols + (size_t(c) * kernel * kernel + tap) * plane;
        for (int oy = 0; oy < oh; ++oy) {
          for (int ox = 0; ox < ow; ++ox) {
            size_t p = size_t(oy) * ow + ox;
            T y = T(oy * stride - pad + ki) + off_y[p];
            T xx = T(ox * stride - pad + kj) + off_x[p];
            T v = bilinear_at(xc, h, w, y, xx);
            dst[p] = mk ? v * mk[p] : v;
          }
        }
      }
    }
  }
}

// Input-gradient half of the deformable backward: route column gradients
// back onto gx[C,H,W] through the bilinear corner weights.
template <class T>
void deform_col2im(const T* gcols, const T* offsets, const T* mask,
                   int channels, int h, int w, int kernel, int stride, int pad,
                   int oh, int ow, T* gx) {
  size_t plane = size_t(oh) * ow;
  for (int c = 0; c < channels; ++c) {
    T* gxc = gx + size_t(c) * h * w;
    for (int ki = 0; ki < kernel; ++ki) {
      for (int kj = 0; kj < kernel; ++kj) {
        int tap = ki * kernel + kj;
        const T* off_y = offsets + size_t(2 * tap) * plane;
        const T* off_x = offsets + size_t(2 * tap + 1) * plane;
        const T* mk = mask ? mask + size_t(tap) * plane : nullptr;
        const T* src = gcols + (size_t(c) * kernel * kernel + tap) * plane;
        for (int oy = 0; oy < oh; ++oy) {
          for (int ox = 0; ox < ow; ++ox) {
            size_t p = size_t(oy) * ow + ox;
            T y = T(oy * stride - pad + ki) + off_y[p];
            T xx = T(ox * stride - pad + kj) + off_x[p];
            T g = mk ? src[p] * mk[p] : src[p];
            bilinear_scatter(gxc, h, w, y, xx, g);
          }
        }
      }
    }
  }
}

// Offset/modulation half of the deformable backward. goffsets must be
// zeroed by the caller; gmask may be null when mask is null.
template <class T>
void deform_col2im_coord(const T* gcols, const T* x, const T* offsets,
                         const T* mask, int channels, int h, int w, int kernel,
                         int stride, int pad, int oh, int ow, T* goffsets,
                         T* gmask) {
  size_t plane = size_t(oh) * ow;
  for (int ki = 0; ki < kernel; ++ki) {
    for (int kj = 0; kj < kernel; ++kj) {
      int tap = ki * kernel + kj;
      const T* off_y = offsets + size_t(2 * tap) * plane;
      const T* off_x = offsets + size_t(2 * tap + 1) * plane;
      const T* mk = mask ? mask + size_t(tap) * plane : nullptr;
      T* goff_y = goffsets + size_t(2 * tap) * plane;
      T* goff_x = goffsets + size_t(2 * tap + 1) * plane;
      T* gmk = gmask ? gmask + size_t(tap) * plane : nullptr;
      for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
          size_t p = size_t(oy) * ow + ox;
          T y = T(oy * stride - pad + ki) + off_y[p];
          T xx = T(ox * stride - pad + kj) + off_x[p];
          T gy_sum = T(0), gx_sum = T(0), gm_sum = T(0);
          for (int c = 0; c < channels; ++c) {
            const T* xc = x + size_t(c) * h * w;
            T g = gcols[(size_t(c) * kernel * kernel + tap) * plane + p];
            T dy, dx;
            bilinear_coord_grad(xc, h, w, y, xx, &dy, &dx);
            gy_sum += g * dy;
            gx_sum += g * dx;
            if (gmk) gm_sum += g * bilinear_at(xc, h, w, y, xx);
          }
          T m = mk ? mk[p] : T(1);
          goff_y[p] += gy_sum * m;
          goff_x[p] += gx_sum * m;
          if (gmk) gmk[p] += gm_sum;
        }
      }
    }
  }
}

}  // namespace dseg
