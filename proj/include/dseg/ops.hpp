#pragma once

// Differentiable ops over GraphT. Each op computes its value eagerly,
// records a node, and attaches a closure that routes the output gradient
// into the inputs' accumulation buffers. Convolution backward recomputes
// its im2col columns instead of saving them; that trades a little compute
// for a large cut in live memory at segmentation resolutions.

#include <algorithm>
#include <cmath>
#include <vector>

#include "dseg/graph.hpp"
#include "dseg/kernels.hpp"
#include "dseg/tensor.hpp"

namespace dseg {

// ---------------------------------------------------------------------------
// elementwise

template <class T>
VarT<T> relu(GraphT<T>& g, VarT<T> x) {
  const TensorT<T>& xv = g.val(x);
  TensorT<T> y(xv.shape);
  for (size_t i = 0; i < y.data.size(); ++i) y.data[i] = std::max(xv.data[i], T(0));
  int xid = x.id;
  return g.make_node(std::move(y), {xid}, [xid](GraphT<T>& g, int self) {
    if (!g.needs_grad(xid)) return;
    const auto& go = g.grad(self);
    const auto& xd = g.val(xid).data;
    auto& gx = g.grad_buf(xid);
    for (size_t i = 0; i < go.size(); ++i)
      if (xd[i] > T(0)) gx[i] += go[i];
  });
}

template <class T>
VarT<T> sigmoid(GraphT<T>& g, VarT<T> x) {
  const TensorT<T>& xv = g.val(x);
  TensorT<T> y(xv.shape);
  for (size_t i = 0; i < y.data.size(); ++i)
    y.data[i] = T(1) / (T(1) + std::exp(-xv.data[i]));
  int xid = x.id;
  return g.make_node(std::move(y), {xid}, [xid](GraphT<T>& g, int self) {
    if (!g.needs_grad(xid)) return;
    const auto& go = g.grad(self);
    const auto& yd = g.val(self).data;
    auto& gx = g.grad_buf(xid);
    for (size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * yd[i] * (T(1) - yd[i]);
  });
}

template <class T>
VarT<T> add(GraphT<T>& g, VarT<T> a, VarT<T> b) {
  const TensorT<T>& av = g.val(a);
  const TensorT<T>& bv = g.val(b);
  check_dim(av.shape == bv.shape, "add requires identical shapes");
  TensorT<T> y(av.shape);
  for (size_t i = 0; i < y.data.size(); ++i) y.data[i] = av.data[i] + bv.data[i];
  int aid = a.id, bid = b.id;
  return g.make_node(std::move(y), {aid, bid}, [aid, bid](GraphT<T>& g, int self) {
    const auto& go = g.grad(self);
    for (int id : {aid, bid}) {
      if (!g.needs_grad(id)) continue;
      auto& gb = g.grad_buf(id);
      for (size_t i = 0; i < go.size(); ++i) gb[i] += go[i];
    }
  });
}

template <class T>
VarT<T> mul(GraphT<T>& g, VarT<T> a, VarT<T> b) {
  const TensorT<T>& av = g.val(a);
  const TensorT<T>& bv = g.val(b);
  check_dim(av.shape == bv.shape, "mul requires identical shapes");
  TensorT<T> y(av.shape);
  for (size_t i = 0; i < y.data.size(); ++i) y.data[i] = av.data[i] * bv.data[i];
  int aid = a.id, bid = b.id;
  return g.make_node(std::move(y), {aid, bid}, [aid, bid](GraphT<T>& g, int self) {
    const auto& go = g.grad(self);
    const auto& ad = g.val(aid).data;
    const auto& bd = g.val(bid).data;
    if (g.needs_grad(aid)) {
      auto& ga = g.grad_buf(aid);
      for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * bd[i];
    }
    if (g.needs_grad(bid)) {
      auto& gb = g.grad_buf(bid);
      for (size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * ad[i];
    }
  });
}

// y = scale * x + shift, elementwise with scalar constants.
template <class T>
VarT<T> affine(GraphT<T>& g, VarT<T> x, T scale, T shift) {
  const TensorT<T>& xv = g.val(x);
  TensorT<T> y(xv.shape);
  for (size_t i = 0; i < y.data.size(); ++i) y.data[i] = scale * xv.data[i] + shift;
  int xid = x.id;
  return g.make_node(std::move(y), {xid}, [xid, scale](GraphT<T>& g, int self) {
    if (!g.needs_grad(xid)) return;
    const auto& go = g.grad(self);
    auto& gx = g.grad_buf(xid);
    for (size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * scale;
  });
}

template <class T>
VarT<T> exp_elem(GraphT<T>& g, VarT<T> x) {
  const TensorT<T>& xv = g.val(x);
  TensorT<T> y(xv.shape);
  for (size_t i = 0; i < y.data.size(); ++i) y.data[i] = std::exp(xv.data[i]);
  int xid = x.id;
  return g.make_node(std::move(y), {xid}, [xid](GraphT<T>& g, int self) {
    if (!g.needs_grad(xid)) return;
    const auto& go = g.grad(self);
    const auto& yd = g.val(self).data;
    auto& gx = g.grad_buf(xid);
    for (size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * yd[i];
  });
}

// y = x^p for x >= 0. The derivative p*x^(p-1) is floored at x=1e-12 when
// p < 1 so a saturated focal factor cannot emit an infinite gradient.
template <class T>
VarT<T> pow_const(GraphT<T>& g, VarT<T> x, T p) {
  const TensorT<T>& xv = g.val(x);
  TensorT<T> y(xv.shape);
  for (size_t i = 0; i < y.data.size(); ++i)
    y.data[i] = std::pow(std::max(xv.data[i], T(0)), p);
  int xid = x.id;
  return g.make_node(std::move(y), {xid}, [xid, p](GraphT<T>& g, int self) {
    if (!g.needs_grad(xid) || p == T(0)) return;
    const auto& go = g.grad(self);
    const auto& xd = g.val(xid).data;
    auto& gx = g.grad_buf(xid);
    for (size_t i = 0; i < go.size(); ++i) {
      T base = std::max(xd[i], p < T(1) ? T(1e-12) : T(0));
      gx[i] += go[i] * p * std::pow(base, p - T(1));
    }
  });
}

// ---------------------------------------------------------------------------
// reductions / indexing

template <class T>
VarT<T> sum_all(GraphT<T>& g, VarT<T> x) {
  const TensorT<T>& xv = g.val(x);
  double acc = 0;
  for (T v : xv.data) acc += double(v);
  int xid = x.id;
  return g.make_node(TensorT<T>::scalar(T(acc)), {xid}, [xid](GraphT<T>& g, int self) {
    if (!g.needs_grad(xid)) return;
    T go = g.grad(self)[0];
    auto& gx = g.grad_buf(xid);
    for (auto& v : gx) v += go;
  });
}

template <class T>
VarT<T> mean_all(GraphT<T>& g, VarT<T> x) {
  T inv = T(1) / T(g.val(x).numel());
  return affine(g, sum_all(g, x), inv, T(0));
}

// Scalar dot product against a constant coefficient vector.
template <class T>
VarT<T> dot_const(GraphT<T>& g, VarT<T> x, std::vector<T> coeff) {
  const TensorT<T>& xv = g.val(x);
  check_dim(xv.data.size() == coeff.size(), "dot_const length mismatch");
  double acc = 0;
  for (size_t i = 0; i < coeff.size(); ++i) acc += double(xv.data[i]) * double(coeff[i]);
  int xid = x.id;
  return g.make_node(TensorT<T>::scalar(T(acc)), {xid},
                     [xid, coeff = std::move(coeff)](GraphT<T>& g, int self) {
                       if (!g.needs_grad(xid)) return;
                       T go = g.grad(self)[0];
                       auto& gx = g.grad_buf(xid);
                       for (size_t i = 0; i < coeff.size(); ++i) gx[i] += go * coeff[i];
                     });
}

// logits[B,C,H,W] + class mask -> per-pixel value of the target class [B,H,W].
template <class T>
VarT<T> gather_classes(GraphT<T>& g, VarT<T> x, const ClassMask& target) {
  const TensorT<T>& xv = g.val(x);
  check_dim(xv.rank() == 4, "gather_classes expects a [B,C,H,W] tensor");
  int b = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  check_dim(target.batch == b && target.h == h && target.w == w,
            "gather_classes mask geometry mismatch");
  size_t plane = size_t(h) * w;
  std::vector<size_t> idx(size_t(b) * plane);
  TensorT<T> y(Shape{b, h, w});
  for (int bi = 0; bi < b; ++bi) {
    for (size_t p = 0; p < plane; ++p) {
      int cls = target.v[size_t(bi) * plane + p];
      if (cls < 0 || cls >= c) throw LabelError("class id out of range in target mask");
      size_t src = (size_t(bi) * c + cls) * plane + p;
      idx[size_t(bi) * plane + p] = src;
      y.data[size_t(bi) * plane + p] = xv.data[src];
    }
  }
  int xid = x.id;
  return g.make_node(std::move(y), {xid},
                     [xid, idx = std::move(idx)](GraphT<T>& g, int self) {
                       if (!g.needs_grad(xid)) return;
                       const auto& go = g.grad(self);
                       auto& gx = g.grad_buf(xid);
                       for (size_t i = 0; i < idx.size(); ++i) gx[idx[i]] += go[i];
                     });
}

// ---------------------------------------------------------------------------
// structural

template <class T>
VarT<T> concat_channels(GraphT<T>& g, VarT<T> a, VarT<T> b) {
  const TensorT<T>& av = g.val(a);
  const TensorT<T>& bv = g.val(b);
  check_dim(av.rank() == 4 && bv.rank() == 4, "concat_channels expects [B,C,H,W]");
  check_dim(av.dim(0) == bv.dim(0) && av.dim(2) == bv.dim(2) && av.dim(3) == bv.dim(3),
            "concat_channels requires matching batch and spatial dims");
  int B = av.dim(0), ca = av.dim(1), cb = bv.dim(1), h = av.dim(2), w = av.dim(3);
  size_t plane = size_t(h) * w;
  TensorT<T> y(Shape{B, ca + cb, h, w});
  for (int bi = 0; bi < B; ++bi) {
    std::copy(av.data.begin() + size_t(bi) * ca * plane,
              av.data.begin() + size_t(bi + 1) * ca * plane,
              y.data.begin() + size_t(bi) * (ca + cb) * plane);
    std::copy(bv.data.begin() + size_t(bi) * cb * plane,
              bv.data.begin() + size_t(bi + 1) * cb * plane,
              y.data.begin() + (size_t(bi) * (ca + cb) + ca) * plane);
  }
  int aid = a.id, bid = b.id;
  return g.make_node(std::move(y), {aid, bid},
                     [aid, bid, B, ca, cb, plane](GraphT<T>& g, int self) {
                       const auto& go = g.grad(self);
                       if (g.needs_grad(aid)) {
                         auto& ga = g.grad_buf(aid);
                         for (int bi = 0; bi < B; ++bi)
                           for (size_t i = 0; i < size_t(ca) * plane; ++i)
                             ga[size_t(bi) * ca * plane + i] +=
                                 go[size_t(bi) * (ca + cb) * plane + i];
                       }
                       if (g.needs_grad(bid)) {
                         auto& gb = g.grad_buf(bid);
                         for (int bi = 0; bi < B; ++bi)
                           for (size_t i = 0; i < size_t(cb) * plane; ++i)
                             gb[size_t(bi) * cb * plane + i] +=
                                 go[(size_t(bi) * (ca + cb) + ca) * plane + i];
                       }
                     });
}

// Channel range [c0, c1) of a [B,C,H,W] tensor.
template <class T>
VarT<T> slice_channels(GraphT<T>& g, VarT<T> x, int c0, int c1) {
  const TensorT<T>& xv = g.val(x);
  check_dim(xv.rank() == 4, "slice_channels expects [B,C,H,W]");
  int B = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  check_dim(0 <= c0 && c0 < c1 && c1 <= c, "slice_channels range out of bounds");
  size_t plane = size_t(h) * w;
  int cs = c1 - c0;
  TensorT<T> y(Shape{B, cs, h, w});
  for (int bi = 0; bi < B; ++bi)
    std::copy(xv.data.begin() + (size_t(bi) * c + c0) * plane,
              xv.data.begin() + (size_t(bi) * c + c1) * plane,
              y.data.begin() + size_t(bi) * cs * plane);
  int xid = x.id;
  return g.make_node(std::move(y), {xid},
                     [xid, B, c, c0, cs, plane](GraphT<T>& g, int self) {
                       if (!g.needs_grad(xid)) return;
                       const auto& go = g.grad(self);
                       auto& gx = g.grad_buf(xid);
                       for (int bi = 0; bi < B; ++bi)
                         for (size_t i = 0; i < size_t(cs) * plane; ++i)
                           gx[(size_t(bi) * c + c0) * plane + i] +=
                               go[size_t(bi) * cs * plane + i];
                     });
}

// 2x2 max pooling, stride 2. Ties route the gradient to the first maximal
// element in row-major order.
template <class T>
VarT<T> max_pool2d(GraphT<T>& g, VarT<T> x) {
  const TensorT<T>& xv = g.val(x);
  check_dim(xv.rank() == 4, "max_pool2d expects [B,C,H,W]");
  int B = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  check_geom(h % 2 == 0 && w % 2 == 0, "max_pool2d requires even spatial extents");
  int oh = h / 2, ow = w / 2;
  TensorT<T> y(Shape{B, c, oh, ow});
  std::vector<size_t> argmax(y.data.size());
  size_t o = 0;
  for (int bc = 0; bc < B * c; ++bc) {
    const T* src = xv.data.data() + size_t(bc) * h * w;
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox, ++o) {
        size_t best = size_t(2 * oy) * w + 2 * ox;
        T bv = src[best];
        for (size_t cand : {size_t(2 * oy) * w + 2 * ox + 1,
                            size_t(2 * oy + 1) * w + 2 * ox,
                            size_t(2 * oy + 1) * w + 2 * ox + 1}) {
          if (src[cand] > bv) {
            bv = src[cand];
            best = cand;
          }
        }
        y.data[o] = bv;
        argmax[o] = size_t(bc) * h * w + best;
      }
    }
  }
  int xid = x.id;
  return g.make_node(std::move(y), {xid},
                     [xid, argmax = std::move(argmax)](GraphT<T>& g, int self) {
                       if (!g.needs_grad(xid)) return;
                       const auto& go = g.grad(self);
                       auto& gx = g.grad_buf(xid);
                       for (size_t i = 0; i < go.size(); ++i) gx[argmax[i]] += go[i];
                     });
}

// ---------------------------------------------------------------------------
// convolutions

namespace detail {

template <class T>
void check_conv_args(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b,
                     int stride, int pad) {
  check_dim(x.rank() == 4, "conv input must be [B,Cin,H,W]");
  check_dim(w.rank() == 4 && w.dim(2) == w.dim(3), "conv weight must be [Cout,Cin,K,K]");
  check_dim(w.dim(2) % 2 == 1, "conv kernel size must be odd");
  check_dim(x.dim(1) == w.dim(1), "conv input/weight channel mismatch");
  check_dim(b.rank() == 1 && b.dim(0) == w.dim(0), "conv bias must be [Cout]");
  check_geom((x.dim(2) + 2 * pad - w.dim(2)) % stride == 0 &&
                 (x.dim(3) + 2 * pad - w.dim(3)) % stride == 0,
             "conv output extent is not integral for this stride/padding");
}

template <class T>
void add_bias_rows(T* out, const T* bias, int cout, size_t plane) {
  for (int co = 0; co < cout; ++co) {
    T bv = bias[co];
    T* row = out + size_t(co) * plane;
    for (size_t i = 0; i < plane; ++i) row[i] += bv;
  }
}

}  // namespace detail

template <class T>
VarT<T> conv2d(GraphT<T>& g, VarT<T> x, VarT<T> w, VarT<T> b, int stride, int pad) {
  const TensorT<T>& xv = g.val(x);
  const TensorT<T>& wv = g.val(w);
  const TensorT<T>& bv = g.val(b);
  detail::check_conv_args(xv, wv, bv, stride, pad);
  int B = xv.dim(0), cin = xv.dim(1), h = xv.dim(2), ww = xv.dim(3);
  int cout = wv.dim(0), k = wv.dim(2);
  int oh = conv_out_dim(h, k, stride, pad), ow = conv_out_dim(ww, k, stride, pad);
  size_t plane = size_t(oh) * ow;
  int ckk = cin * k * k;

  TensorT<T> y(Shape{B, cout, oh, ow});
  std::vector<T> cols(size_t(ckk) * plane);
  for (int bi = 0; bi < B; ++bi) {
    im2col(xv.data.data() + size_t(bi) * cin * h * ww, cin, h, ww, k, stride, pad,
           oh, ow, cols.data());
    T* out = y.data.data() + size_t(bi) * cout * plane;
    gemm(false, false, cout, int(plane), ckk, T(1), wv.data.data(), cols.data(),
         T(0), out);
    detail::add_bias_rows(out, bv.data.data(), cout, plane);
  }

  int xid = x.id, wid = w.id, bid = b.id;
  return g.make_node(
      std::move(y), {xid, wid, bid},
      [xid, wid, bid, stride, pad, B, cin, h, ww, cout, k, oh, ow, plane,
       ckk](GraphT<T>& g, int self) {
        const auto& go = g.grad(self);
        const auto& xd = g.val(xid).data;
        const auto& wd = g.val(wid).data;
        bool need_x = g.needs_grad(xid), need_w = g.needs_grad(wid),
             need_b = g.needs_grad(bid);
        std::vector<T> cols(need_w ? size_t(ckk) * plane : 0);
        std::vector<T> gcols(need_x ? size_t(ckk) * plane : 0);
        for (int bi = 0; bi < B; ++bi) {
          const T* gout = go.data() + size_t(bi) * cout * plane;
          if (need_w) {
            im2col(xd.data() + size_t(bi) * cin * h * ww, cin, h, ww, k, stride,
                   pad, oh, ow, cols.data());
            gemm(false, true, cout, ckk, int(plane), T(1), gout, cols.data(), T(1),
                 g.grad_buf(wid).data());
          }
          if (need_x) {
            gemm(true, false, ckk, int(plane), cout, T(1), wd.data(), gout, T(0),
                 gcols.data());
            col2im(gcols.data(), cin, h, ww, k, stride, pad, oh, ow,
                   g.grad_buf(xid).data() + size_t(bi) * cin * h * ww);
          }
          if (need_b) {
            auto& gb = g.grad_buf(bid);
            for (int co = 0; co < cout; ++co) {
              double s = 0;
              const T* row = gout + size_t(co) * plane;
              for (size_t i = 0; i < plane; ++i) s += double(row[i]);
              gb[co] += T(s);
            }
          }
        }
      });
}

// Deformable convolution: every kernel tap is displaced by a learned
// per-output-pixel offset and read by bilinear interpolation; taps are
// optionally scaled by a modulation field. Pass an invalid Var for
// `modulation` to get the unmodulated form.
template <class T>
VarT<T> deform_conv2d(GraphT<T>& g, VarT<T> x, VarT<T> w, VarT<T> b,
                      VarT<T> offsets, VarT<T> modulation, int stride, int pad) {
  const TensorT<T>& xv = g.val(x);
  const TensorT<T>& wv = g.val(w);
  const TensorT<T>& bv = g.val(b);
  detail::check_conv_args(xv, wv, bv, stride, pad);
  int B = xv.dim(0), cin = xv.dim(1), h = xv.dim(2), ww = xv.dim(3);
  int cout = wv.dim(0), k = wv.dim(2);
  int oh = conv_out_dim(h, k, stride, pad), ow = conv_out_dim(ww, k, stride, pad);
  size_t plane = size_t(oh) * ow;
  int ckk = cin * k * k;
  bool has_mask = modulation.valid();

  const TensorT<T>& ov = g.val(offsets);
  check_dim(ov.shape == Shape({B, 2 * k * k, oh, ow}),
            "offset field does not match conv output geometry");
  if (has_mask)
    check_dim(g.val(modulation).shape == Shape({B, k * k, oh, ow}),
              "modulation field does not match conv output geometry");

  TensorT<T> y(Shape{B, cout, oh, ow});
  std::vector<T> cols(size_t(ckk) * plane);
  size_t off_stride = size_t(2 * k * k) * plane;
  size_t mask_stride = size_t(k * k) * plane;
  for (int bi = 0; bi < B; ++bi) {
    const T* mk = has_mask ? g.val(modulation).data.data() + size_t(bi) * mask_stride
                           : nullptr;
    deform_im2col(xv.data.data() + size_t(bi) * cin * h * ww,
                  ov.data.data() + size_t(bi) * off_stride, mk, cin, h, ww, k,
                  stride, pad, oh, ow, cols.data());
    T* out = y.data.data() + size_t(bi) * cout * plane;
    gemm(false, false, cout, int(plane), ckk, T(1), wv.data.data(), cols.data(),
         T(0), out);
    detail::add_bias_rows(out, bv.data.data(), cout, plane);
  }

  int xid = x.id, wid = w.id, bid = b.id, oid = offsets.id;
  int mid = has_mask ? modulation.id : -1;
  return g.make_node(
      std::move(y), has_mask ? std::vector<int>{xid, wid, bid, oid, mid}
                             : std::vector<int>{xid, wid, bid, oid},
      [xid, wid, bid, oid, mid, stride, pad, B, cin, h, ww, cout, k, oh, ow,
       plane, ckk, off_stride, mask_stride](GraphT<T>& g, int self) {
        const auto& go = g.grad(self);
        const auto& xd = g.val(xid).data;
        const auto& wd = g.val(wid).data;
        const auto& od = g.val(oid).data;
        const T* md = mid >= 0 ? g.val(mid).data.data() : nullptr;
        bool need_x = g.needs_grad(xid), need_w = g.needs_grad(wid),
             need_b = g.needs_grad(bid), need_o = g.needs_grad(oid);
        bool need_m = mid >= 0 && g.needs_grad(mid);
        std::vector<T> cols(need_w ? size_t(ckk) * plane : 0);
        std::vector<T> gcols((need_x || need_o || need_m) ? size_t(ckk) * plane : 0);
        for (int bi = 0; bi < B; ++bi) {
          const T* gout = go.data() + size_t(bi) * cout * plane;
          const T* xb = xd.data() + size_t(bi) * cin * h * ww;
          const T* ob = od.data() + size_t(bi) * off_stride;
          const T* mb = md ? md + size_t(bi) * mask_stride : nullptr;
          if (need_w) {
            deform_im2col(xb, ob, mb, cin, h, ww, k, stride, pad, oh, ow,
                          cols.data());
            gemm(false, true, cout, ckk, int(plane), T(1), gout, cols.data(), T(1),
                 g.grad_buf(wid).data());
          }
          if (need_x || need_o || need_m) {
            gemm(true, false, ckk, int(plane), cout, T(1), wd.data(), gout, T(0),
                 gcols.data());
            if (need_o || need_m)
              deform_col2im_coord(
                  gcols.data(), xb, ob, mb, cin, h, ww, k, stride, pad, oh, ow,
                  g.grad_buf(oid).data() + size_t(bi) * off_stride,
                  need_m ? g.grad_buf(mid).data() + size_t(bi) * mask_stride
                         : nullptr);
            if (need_x)
              deform_col2im(gcols.data(), ob, mb, cin, h, ww, k, stride, pad, oh,
                            ow, g.grad_buf(xid).data() + size_t(bi) * cin * h * ww);
          }
          if (need_b) {
            auto& gb = g.grad_buf(bid);
            for (int co = 0; co < cout; ++co) {
              double s = 0;
              const T* row = gout + size_t(co) * plane;
              for (size_t i = 0; i < plane; ++i) s += double(row[i]);
              gb[co] += T(s);
            }
          }
        }
      });
}

// Transposed convolution, kernel 2 stride 2 (the U-Net upsampling step).
// Weight layout [Cin,Cout,2,2]. With k == s the taps never overlap, so each
// output pixel is produced by exactly one input pixel and tap.
template <class T>
VarT<T> transposed_conv2d_k2s2(GraphT<T>& g, VarT<T> x, VarT<T> w, VarT<T> b) {
  const TensorT<T>& xv = g.val(x);
  const TensorT<T>& wv = g.val(w);
  const TensorT<T>& bv = g.val(b);
  check_dim(xv.rank() == 4, "transposed conv input must be [B,Cin,H,W]");
  check_dim(wv.rank() == 4 && wv.dim(2) == 2 && wv.dim(3) == 2,
            "transposed conv weight must be [Cin,Cout,2,2]");
  check_dim(xv.dim(1) == wv.dim(0), "transposed conv channel mismatch");
  int B = xv.dim(0), cin = xv.dim(1), h = xv.dim(2), ww = xv.dim(3);
  int cout = wv.dim(1);
  check_dim(bv.rank() == 1 && bv.dim(0) == cout, "transposed conv bias must be [Cout]");

  TensorT<T> y(Shape{B, cout, 2 * h, 2 * ww});
  for (int bi = 0; bi < B; ++bi) {
    for (int co = 0; co < cout; ++co) {
      T* out = y.data.data() + (size_t(bi) * cout + co) * 4 * h * ww;
      T bias = bv.data[size_t(co)];
      for (size_t i = 0; i < size_t(4) * h * ww; ++i) out[i] = bias;
      for (int ci = 0; ci < cin; ++ci) {
        const T* src = xv.data.data() + (size_t(bi) * cin + ci) * h * ww;
        const T* wt = wv.data.data() + (size_t(ci) * cout + co) * 4;
        for (int yy = 0; yy < h; ++yy) {
          for (int xx = 0; xx < ww; ++xx) {
            T v = src[size_t(yy) * ww + xx];
            T* o = out + size_t(2 * yy) * 2 * ww + 2 * xx;
            o[0] += v * wt[0];
            o[1] += v * wt[1];
            o[2 * ww] += v * wt[2];
            o[2 * ww + 1] += v * wt[3];
          }
        }
      }
    }
  }

  int xid = x.id, wid = w.id, bid = b.id;
  return g.make_node(
      std::move(y), {xid, wid, bid},
      [xid, wid, bid, B, cin, cout, h, ww](GraphT<T>& g, int self) {
        const auto& go = g.grad(self);
        const auto& xd = g.val(xid).data;
        const auto& wd = g.val(wid).data;
        bool need_x = g.needs_grad(xid), need_w = g.needs_grad(wid),
             need_b = g.needs_grad(bid);
        for (int bi = 0; bi < B; ++bi) {
          for (int co = 0; co < cout; ++co) {
            const T* gout = go.data() + (size_t(bi) * cout + co) * 4 * h * ww;
            if (need_b) {
              double s = 0;
              for (size_t i = 0; i < size_t(4) * h * ww; ++i) s += double(gout[i]);
              g.grad_buf(bid)[size_t(co)] += T(s);
            }
            for (int ci = 0; ci < cin; ++ci) {
              const T* src = xd.data() + (size_t(bi) * cin + ci) * h * ww;
              const T* wt = wd.data() + (size_t(ci) * cout + co) * 4;
              T* gxp = need_x ? g.grad_buf(xid).data() +
                                    (size_t(bi) * cin + ci) * h * ww
                              : nullptr;
              T* gwp = need_w ? g.grad_buf(wid).data() + (size_t(ci) * cout + co) * 4
                              : nullptr;
              for (int yy = 0; yy < h; ++yy) {
                for (int xx = 0; xx < ww; ++xx) {
                  const T* o = gout + size_t(2 * yy) * 2 * ww + 2 * xx;
                  T g0 = o[0], g1 = o[1], g2 = o[2 * ww], g3 = o[2 * ww + 1];
                  if (gxp)
                    gxp[size_t(yy) * ww + xx] +=
                        g0 * wt[0] + g1 * wt[1] + g2 * wt[2] + g3 * wt[3];
                  if (gwp) {
                    T v = src[size_t(yy) * ww + xx];
                    gwp[0] += v * g0;
                    gwp[1] += v * g1;
                    gwp[2] += v * g2;
                    gwp[3] += v * g3;
                  }
                }
              }
            }
          }
        }
      });
}

// Offset (and optional modulation) field for a deformable conv, predicted by
// a standard conv over the same input with the same K/stride/padding. The
// first 2*K*K output channels are offsets as-is; with modulation the next
// K*K channels pass through a sigmoid.
template <class T>
struct DeformFieldT {
  VarT<T> offsets;
  VarT<T> modulation;  // invalid when unmodulated
};

template <class T>
DeformFieldT<T> offset_predictor(GraphT<T>& g, VarT<T> x, VarT<T> pred_w,
                                 VarT<T> pred_b, int kernel, int stride, int pad,
                                 bool modulated) {
  int kk = kernel * kernel;
  int want = modulated ? 3 * kk : 2 * kk;
  check_dim(g.val(pred_w).dim(0) == want,
            "offset predictor output channel count does not match kernel");
  VarT<T> raw = conv2d(g, x, pred_w, pred_b, stride, pad);
  if (!modulated) return {raw, VarT<T>{}};
  VarT<T> off = slice_channels(g, raw, 0, 2 * kk);
  VarT<T> mod = sigmoid(g, slice_channels(g, raw, 2 * kk, 3 * kk));
  return {off, mod};
}

// ---------------------------------------------------------------------------
// batch norm

// Per-channel normalization over (B,H,W) with learnable scale/shift.
// Statistics pool over the spatial plane as well, so batch size 1 is valid.
// Training mode computes batch moments (biased variance) and folds them into
// the running buffers in place; eval mode reads the running buffers.
template <class T>
VarT<T> batch_norm(GraphT<T>& g, VarT<T> x, VarT<T> scale, VarT<T> shift,
                   TensorT<T>& running_mean, TensorT<T>& running_var,
                   bool training, T momentum = T(0.1), T eps = T(1e-5)) {
  const TensorT<T>& xv = g.val(x);
  check_dim(xv.rank() == 4, "batch_norm expects [B,C,H,W]");
  int B = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  const TensorT<T>& sv = g.val(scale);
  const TensorT<T>& bv = g.val(shift);
  check_dim(sv.shape == Shape({c}) && bv.shape == Shape({c}),
            "batch_norm scale/shift must be [C]");
  check_dim(running_mean.shape == Shape({c}) && running_var.shape == Shape({c}),
            "batch_norm running stats must be [C]");
  size_t plane = size_t(h) * w;
  size_t n = size_t(B) * plane;

  std::vector<T> mean(static_cast<size_t>(c));
  std::vector<T> inv_std(static_cast<size_t>(c));
  if (training) {
    for (int ci = 0; ci < c; ++ci) {
      double s = 0, s2 = 0;
      for (int bi = 0; bi < B; ++bi) {
        const T* src = xv.data.data() + (size_t(bi) * c + ci) * plane;
        for (size_t i = 0; i < plane; ++i) {
          s += double(src[i]);
          s2 += double(src[i]) * double(src[i]);
        }
      }
      double mu = s / double(n);
      double var = s2 / double(n) - mu * mu;
      if (var < 0) var = 0;
      mean[size_t(ci)] = T(mu);
      inv_std[size_t(ci)] = T(1.0 / std::sqrt(var + double(eps)));
      running_mean.data[size_t(ci)] =
          (T(1) - momentum) * running_mean.data[size_t(ci)] + momentum * T(mu);
      running_var.data[size_t(ci)] =
          (T(1) - momentum) * running_var.data[size_t(ci)] + momentum * T(var);
    }
  } else {
    for (int ci = 0; ci < c; ++ci) {
      mean[size_t(ci)] = running_mean.data[size_t(ci)];
      inv_std[size_t(ci)] =
          T(1) / std::sqrt(running_var.data[size_t(ci)] + eps);
    }
  }

  TensorT<T> y(xv.shape);
  for (int bi = 0; bi < B; ++bi) {
    for (int ci = 0; ci < c; ++ci) {
      const T* src = xv.data.data() + (size_t(bi) * c + ci) * plane;
      T* dst = y.data.data() + (size_t(bi) * c + ci) * plane;
      T mu = mean[size_t(ci)], is = inv_std[size_t(ci)];
      T ga = sv.data[size_t(ci)], be = bv.data[size_t(ci)];
      for (size_t i = 0; i < plane; ++i) dst[i] = (src[i] - mu) * is * ga + be;
    }
  }

  int xid = x.id, sid = scale.id, bid = shift.id;
  return g.make_node(
      std::move(y), {xid, sid, bid},
      [xid, sid, bid, B, c, plane, n, training, mean = std::move(mean),
       inv_std = std::move(inv_std)](GraphT<T>& g, int self) {
        const auto& go = g.grad(self);
        const auto& xd = g.val(xid).data;
        const auto& sd = g.val(sid).data;
        bool need_x = g.needs_grad(xid);
        for (int ci = 0; ci < c; ++ci) {
          T mu = mean[size_t(ci)], is = inv_std[size_t(ci)];
          double sum_go = 0, sum_go_xhat = 0;
          for (int bi = 0; bi < B; ++bi) {
            const T* gop = go.data() + (size_t(bi) * c + ci) * plane;
            const T* xp = xd.data() + (size_t(bi) * c + ci) * plane;
            for (size_t i = 0; i < plane; ++i) {
              sum_go += double(gop[i]);
              sum_go_xhat += double(gop[i]) * double((xp[i] - mu) * is);
            }
          }
          if (g.needs_grad(bid)) g.grad_buf(bid)[size_t(ci)] += T(sum_go);
          if (g.needs_grad(sid)) g.grad_buf(sid)[size_t(ci)] += T(sum_go_xhat);
          if (!need_x) continue;
          T ga = sd[size_t(ci)];
          auto& gx = g.grad_buf(xid);
          if (training) {
            T mean_go = T(sum_go / double(n));
            T mean_go_xhat = T(sum_go_xhat / double(n));
            for (int bi = 0; bi < B; ++bi) {
              const T* gop = go.data() + (size_t(bi) * c + ci) * plane;
              const T* xp = xd.data() + (size_t(bi) * c + ci) * plane;
              T* gxp = gx.data() + (size_t(bi) * c + ci) * plane;
              for (size_t i = 0; i < plane; ++i) {
                T xhat = (xp[i] - mu) * is;
                gxp[i] += ga * is * (gop[i] - mean_go - xhat * mean_go_xhat);
              }
            }
          } else {
            for (int bi = 0; bi < B; ++bi) {
              const T* gop = go.data() + (size_t(bi) * c + ci) * plane;
              T* gxp = gx.data() + (size_t(bi) * c + ci) * plane;
              for (size_t i = 0; i < plane; ++i) gxp[i] += ga * is * gop[i];
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// softmax

// Per-pixel log-softmax over the channel axis of [B,C,H,W], computed with
// the max-shift trick for stability.
template <class T>
VarT<T> log_softmax_channels(GraphT<T>& g, VarT<T> x) {
  const TensorT<T>& xv = g.val(x);
  check_dim(xv.rank() == 4, "log_softmax_channels expects [B,C,H,W]");
  int B = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  size_t plane = size_t(h) * w;
  TensorT<T> y(xv.shape);
  for (int bi = 0; bi < B; ++bi) {
    const T* src = xv.data.data() + size_t(bi) * c * plane;
    T* dst = y.data.data() + size_t(bi) * c * plane;
    for (size_t p = 0; p < plane; ++p) {
      T mx = src[p];
      for (int ci = 1; ci < c; ++ci) mx = std::max(mx, src[size_t(ci) * plane + p]);
      double lse = 0;
      for (int ci = 0; ci < c; ++ci)
        lse += std::exp(double(src[size_t(ci) * plane + p] - mx));
      T shift = mx + T(std::log(lse));
      for (int ci = 0; ci < c; ++ci)
        dst[size_t(ci) * plane + p] = src[size_t(ci) * plane + p] - shift;
    }
  }
  int xid = x.id;
  return g.make_node(std::move(y), {xid},
                     [xid, B, c, plane](GraphT<T>& g, int self) {
                       if (!g.needs_grad(xid)) return;
                       const auto& go = g.grad(self);
                       const auto& yd = g.val(self).data;
                       auto& gx = g.grad_buf(xid);
                       for (int bi = 0; bi < B; ++bi) {
                         size_t base = size_t(bi) * c * plane;
                         for (size_t p = 0; p < plane; ++p) {
                           double sum_go = 0;
                           for (int ci = 0; ci < c; ++ci)
                             sum_go += double(go[base + size_t(ci) * plane + p]);
                           for (int ci = 0; ci < c; ++ci) {
                             size_t idx = base + size_t(ci) * plane + p;
                             gx[idx] += go[idx] -
                                        T(std::exp(double(yd[idx])) * sum_go);
                           }
                         }
                       }
                     });
}

}  // namespace dseg
