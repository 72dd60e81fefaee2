#pragma once

// The four segmentation nets: a vanilla U-Net, a residual U-Net, and their
// deformable counterparts where the first encoder block and the last
// (full-resolution) decoder block swap standard convs for deformable ones.

#include <cstdint>
#include <string>
#include <vector>

#include "dseg/blocks.hpp"
#include "dseg/ops.hpp"
#include "dseg/params.hpp"
#include "dseg/rng.hpp"

namespace dseg {

enum class Variant { v_unet, v_deunet, r_unet, r_deunet };

inline bool variant_is_deformable(Variant v) {
  return v == Variant::v_deunet || v == Variant::r_deunet;
}
inline bool variant_is_residual(Variant v) {
  return v == Variant::r_unet || v == Variant::r_deunet;
}

inline std::string variant_token(Variant v) {
  switch (v) {
    case Variant::v_unet: return "v_unet";
    case Variant::v_deunet: return "v_deunet";
    case Variant::r_unet: return "r_unet";
    case Variant::r_deunet: return "r_deunet";
  }
  throw ConfigError("unknown variant");
}

// Display label used in report headers.
inline std::string variant_label(Variant v) {
  switch (v) {
    case Variant::v_unet: return "V_U-Net";
    case Variant::v_deunet: return "V_DeU-Net";
    case Variant::r_unet: return "R_U-Net";
    case Variant::r_deunet: return "R_DeU-Net";
  }
  throw ConfigError("unknown variant");
}

inline Variant variant_from_token(const std::string& s) {
  for (Variant v : {Variant::v_unet, Variant::v_deunet, Variant::r_unet,
                    Variant::r_deunet})
    if (s == variant_token(v) || s == variant_label(v)) return v;
  throw ConfigError("unknown model variant: " + s);
}

struct ModelConfig {
  Variant variant = Variant::v_unet;
  int base_channels = 16;
  int depth = 4;
  int num_classes = 10;
  bool modulated = false;
};

template <class T>
class ModelT {
 public:
  static ModelT build(const ModelConfig& cfg, uint64_t seed) {
    check_config(cfg.depth >= 1, "model depth must be >= 1");
    check_config(cfg.base_channels >= 1, "base_channels must be >= 1");
    check_config(cfg.num_classes >= 2, "num_classes must be >= 2");
    ModelT m;
    m.cfg_ = cfg;
    m.seed_ = seed;
    Rng rng(derive_seed(seed, 0x6d6f64656c));  // "model" stream

    m.write_meta();
    auto ch = [&](int level) { return cfg.base_channels << level; };
    BlockKind plain_kind =
        variant_is_residual(cfg.variant) ? BlockKind::residual : BlockKind::plain;
    BlockKind deform_kind = variant_is_residual(cfg.variant)
                                ? BlockKind::deformable_residual
                                : BlockKind::deformable_plain;

    for (int i = 0; i < cfg.depth; ++i) {
      BlockT<T> blk;
      blk.kind = (i == 0 && variant_is_deformable(cfg.variant)) ? deform_kind
                                                                : plain_kind;
      blk.in_ch = i == 0 ? 3 : ch(i - 1);
      blk.out_ch = ch(i);
      blk.modulated = cfg.modulated;
      blk.prefix = "enc" + std::to_string(i);
      blk.register_params(m.store_, rng);
      m.enc_.push_back(blk);
    }
    m.bottleneck_.kind = plain_kind;
    m.bottleneck_.in_ch = ch(cfg.depth - 1);
    m.bottleneck_.out_ch = ch(cfg.depth);
    m.bottleneck_.modulated = cfg.modulated;
    m.bottleneck_.prefix = "bottleneck";
    m.bottleneck_.register_params(m.store_, rng);

    m.dec_.resize(size_t(cfg.depth));
    for (int i = cfg.depth - 1; i >= 0; --i) {
      std::string prefix = "dec" + std::to_string(i);
      // 2x upsampling: transposed conv halving the channel count. Its true
      // fan-in is one tap deep (kernel == stride), i.e. the input channels.
      m.store_.add(prefix + ".up.weight",
                   kaiming_uniform<T>(Shape{ch(i + 1), ch(i), 2, 2}, ch(i + 1), rng));
      m.store_.add(prefix + ".up.bias", TensorT<T>(Shape{ch(i)}));
      BlockT<T>& blk = m.dec_[size_t(i)];
      blk.kind = (i == 0 && variant_is_deformable(cfg.variant)) ? deform_kind
                                                                : plain_kind;
      blk.in_ch = 2 * ch(i);
      blk.out_ch = ch(i);
      blk.modulated = cfg.modulated;
      blk.prefix = prefix;
      blk.register_params(m.store_, rng);
    }
    m.store_.add("head.weight",
                 kaiming_uniform<T>(Shape{cfg.num_classes, ch(0), 1, 1}, ch(0), rng));
    m.store_.add("head.bias", TensorT<T>(Shape{cfg.num_classes}));
    return m;
  }

  VarT<T> forward(GraphT<T>& g, VarT<T> x, bool training) {
    const TensorT<T>& xv = g.val(x);
    check_dim(xv.rank() == 4 && xv.dim(1) == 3, "model input must be [B,3,H,W]");
    int div = 1 << cfg_.depth;
    check_geom(xv.dim(2) % div == 0 && xv.dim(3) % div == 0,
               "input extents must be divisible by 2^depth");

    std::vector<VarT<T>> skips;
    VarT<T> h = x;
    for (const BlockT<T>& blk : enc_) {
      h = blk.forward(g, store_, h, training);
      skips.push_back(h);
      h = max_pool2d(g, h);
    }
    h = bottleneck_.forward(g, store_, h, training);
    for (int i = cfg_.depth - 1; i >= 0; --i) {
      std::string prefix = "dec" + std::to_string(i);
      VarT<T> uw = g.param(&store_.at(prefix + ".up.weight"));
      VarT<T> ub = g.param(&store_.at(prefix + ".up.bias"));
      VarT<T> up = transposed_conv2d_k2s2(g, h, uw, ub);
      h = dec_[size_t(i)].forward(g, store_, concat_channels(g, up, skips[size_t(i)]),
                                  training);
    }
    VarT<T> hw = g.param(&store_.at("head.weight"));
    VarT<T> hb = g.param(&store_.at("head.bias"));
    return conv2d(g, h, hw, hb, 1, 0);
  }

  // Inference convenience: eval-mode logits for a raw image batch.
  TensorT<T> predict(const TensorT<T>& images) {
    GraphT<T> g;
    VarT<T> x = g.leaf(images);
    VarT<T> logits = forward(g, x, false);
    return g.val(logits);
  }

  const ModelConfig& config() const { return cfg_; }
  uint64_t seed() const { return seed_; }
  ParamStoreT<T>& store() { return store_; }
  const ParamStoreT<T>& store() const { return store_; }
  size_t count_parameters() const { return store_.trainable_scalars(); }

  // Rebuild a model whose architecture is described by the meta records of a
  // loaded checkpoint store, then adopt that store's tensors.
  static ModelT from_store(const ParamStoreT<T>& loaded) {
    check_config(loaded.has("meta.variant"), "checkpoint lacks model metadata");
    ModelConfig cfg;
    cfg.variant = Variant(int(loaded.at("meta.variant").data[0]));
    cfg.base_channels = int(loaded.at("meta.base_channels").data[0]);
    cfg.depth = int(loaded.at("meta.depth").data[0]);
    cfg.num_classes = int(loaded.at("meta.num_classes").data[0]);
    cfg.modulated = loaded.at("meta.modulated").data[0] != T(0);
    ModelT m = build(cfg, decode_seed(loaded.at("meta.seed")));
    for (auto& e : m.store_.entries()) {
      check_config(loaded.has(e.name), "checkpoint is missing record: " + e.name);
      const TensorT<T>& src = loaded.at(e.name);
      check_dim(src.shape == e.tensor.shape,
                "checkpoint record shape mismatch: " + e.name);
      e.tensor.data = src.data;
    }
    return m;
  }

  static uint64_t decode_seed(const TensorT<T>& rec) {
    uint64_t s = 0;
    for (int i = 0; i < 4; ++i)
      s |= uint64_t(uint16_t(rec.data[size_t(i)])) << (16 * i);
    return s;
  }

 private:
  void write_meta() {
    store_.add("meta.variant", TensorT<T>::scalar(T(int(cfg_.variant))), false);
    store_.add("meta.base_channels", TensorT<T>::scalar(T(cfg_.base_channels)), false);
    store_.add("meta.depth", TensorT<T>::scalar(T(cfg_.depth)), false);
    store_.add("meta.num_classes", TensorT<T>::scalar(T(cfg_.num_classes)), false);
    store_.add("meta.modulated", TensorT<T>::scalar(T(cfg_.modulated ? 1 : 0)), false);
    // The seed is split into 16-bit chunks so any 64-bit value survives the
    // f32 record format exactly.
    TensorT<T> seed_rec(Shape{4});
    for (int i = 0; i < 4; ++i)
      seed_rec.data[size_t(i)] = T(uint16_t(seed_ >> (16 * i)));
    store_.add("meta.seed", std::move(seed_rec), false);
  }

  ModelConfig cfg_;
  uint64_t seed_ = 0;
  ParamStoreT<T> store_;
  std::vector<BlockT<T>> enc_;
  BlockT<T> bottleneck_;
  std::vector<BlockT<T>> dec_;
};

using Model = ModelT<float>;

}  // namespace dseg
