#pragma once

// Building blocks for the segmentation nets: double-conv and residual
// blocks, each with a deformable twin where both 3x3 convs sample through
// learned offset fields. Parameters live in a ParamStoreT under a prefix
// chosen by the owning model ("enc0.", "dec2.", ...).

#include <string>

#include "dseg/ops.hpp"
#include "dseg/params.hpp"
#include "dseg/rng.hpp"

namespace dseg {

enum class BlockKind { plain, residual, deformable_plain, deformable_residual };

inline bool block_is_residual(BlockKind k) {
  return k == BlockKind::residual || k == BlockKind::deformable_residual;
}
inline bool block_is_deformable(BlockKind k) {
  return k == BlockKind::deformable_plain || k == BlockKind::deformable_residual;
}

template <class T>
struct BlockT {
  BlockKind kind = BlockKind::plain;
  int in_ch = 0, out_ch = 0;
  bool modulated = false;
  std::string prefix;

  // Parameter registration draws from the rng only for kaiming-initialized
  // weights. Offset predictors are all-zero and draw nothing, which keeps
  // the rng stream — and therefore every shared weight — identical between
  // a variant and its deformable twin built from the same seed.
  void register_params(ParamStoreT<T>& store, Rng& rng) const {
    check_config(in_ch > 0 && out_ch > 0, "block channels must be positive");
    register_conv(store, rng, 1, in_ch, out_ch);
    register_conv(store, rng, 2, out_ch, out_ch);
    if (block_is_residual(kind) && in_ch != out_ch) {
      store.add(prefix + ".shortcut.weight",
                kaiming_uniform<T>(Shape{out_ch, in_ch, 1, 1}, in_ch, rng));
      store.add(prefix + ".shortcut.bias", TensorT<T>(Shape{out_ch}));
    }
  }

  VarT<T> forward(GraphT<T>& g, ParamStoreT<T>& store, VarT<T> x,
                  bool training) const {
    VarT<T> h = conv_bn(g, store, x, 1, training);
    h = relu(g, h);
    h = conv_bn(g, store, h, 2, training);
    if (block_is_residual(kind)) {
      VarT<T> s = x;
      if (in_ch != out_ch) {
        VarT<T> sw = g.param(&store.at(prefix + ".shortcut.weight"));
        VarT<T> sb = g.param(&store.at(prefix + ".shortcut.bias"));
        s = conv2d(g, x, sw, sb, 1, 0);
      }
      h = add(g, h, s);
    }
    return relu(g, h);
  }

 private:
  void register_conv(ParamStoreT<T>& store, Rng& rng, int n, int cin,
                     int cout) const {
    std::string conv = prefix + ".conv" + std::to_string(n);
    std::string bn = prefix + ".bn" + std::to_string(n);
    store.add(conv + ".weight",
              kaiming_uniform<T>(Shape{cout, cin, 3, 3}, cin * 9, rng));
    store.add(conv + ".bias", TensorT<T>(Shape{cout}));
    if (block_is_deformable(kind)) {
      int pred_out = (modulated ? 3 : 2) * 9;
      store.add(conv + ".offset_pred.weight", TensorT<T>(Shape{pred_out, cin, 3, 3}));
      store.add(conv + ".offset_pred.bias", TensorT<T>(Shape{pred_out}));
    }
    store.add(bn + ".scale", TensorT<T>::full(Shape{cout}, T(1)));
    store.add(bn + ".shift", TensorT<T>(Shape{cout}));
    store.add(bn + ".running_mean", TensorT<T>(Shape{cout}), false);
    store.add(bn + ".running_var", TensorT<T>::full(Shape{cout}, T(1)), false);
  }

  VarT<T> conv_bn(GraphT<T>& g, ParamStoreT<T>& store, VarT<T> x, int n,
                  bool training) const {
    std::string conv = prefix + ".conv" + std::to_string(n);
    std::string bn = prefix + ".bn" + std::to_string(n);
    VarT<T> w = g.param(&store.at(conv + ".weight"));
    VarT<T> b = g.param(&store.at(conv + ".bias"));
    VarT<T> h;
    if (block_is_deformable(kind)) {
      VarT<T> pw = g.param(&store.at(conv + ".offset_pred.weight"));
      VarT<T> pb = g.param(&store.at(conv + ".offset_pred.bias"));
      DeformFieldT<T> field = offset_predictor(g, x, pw, pb, 3, 1, 1, modulated);
      h = deform_conv2d(g, x, w, b, field.offsets, field.modulation, 1, 1);
    } else {
      h = conv2d(g, x, w, b, 1, 1);
    }
    VarT<T> sc = g.param(&store.at(bn + ".scale"));
    VarT<T> sh = g.param(&store.at(bn + ".shift"));
    return batch_norm(g, h, sc, sh, store.at(bn + ".running_mean"),
                      store.at(bn + ".running_var"), training);
  }
};

}  // namespace dseg
