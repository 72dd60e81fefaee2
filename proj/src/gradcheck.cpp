#include "dseg/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "dseg/blocks.hpp"
#include "dseg/losses.hpp"
#include "dseg/ops.hpp"
#include "dseg/rng.hpp"

namespace dseg {

double gradcheck_max_rel_err(const ParamStore& init, const BuilderF32& f32b,
                             const BuilderF64& f64b, double h) {
  // Analytic pass in f32 on a private copy; param() writes gradients back
  // into the copy's tensors.
  ParamStore s32 = init;
  Graph g;
  g.backward(f32b(g, s32));

  ParamStoreT<double> base = init.cast<double>();
  double worst = 0;
  for (size_t ei = 0; ei < init.entries().size(); ++ei) {
    const auto& e = init.entries()[ei];
    if (!e.trainable) continue;
    const Tensor& gt = s32.entries()[ei].tensor;
    for (size_t i = 0; i < e.tensor.data.size(); ++i) {
      double analytic = gt.grad.empty() ? 0.0 : double(gt.grad[i]);
      auto probe = [&](double delta) {
        ParamStoreT<double> s = base;
        s.entries()[ei].tensor.data[i] += delta;
        GraphT<double> gg;
        VarT<double> l = f64b(gg, s);
        return double(gg.val(l).data[0]);
      };
      double fd = (probe(h) - probe(-h)) / (2.0 * h);
      // Floor the denominator at 1 so near-zero gradients compare absolutely.
      // Some are exactly zero in real arithmetic (batch norm's mean
      // subtraction cancels the preceding conv bias) and the f32 analytic
      // side only reaches them up to its own rounding noise.
      double denom = std::max({std::abs(analytic), std::abs(fd), 1.0});
      worst = std::max(worst, std::abs(analytic - fd) / denom);
    }
  }
  return worst;
}

namespace {

// Random projection so vector-valued ops reduce to a scalar loss with
// nontrivial output gradients everywhere.
std::vector<double> signed_coeff(size_t n, Rng& rng) {
  std::vector<double> c(n);
  for (auto& v : c) v = (rng.bernoulli(0.5) ? 1.0 : -1.0) * rng.uniform(0.5, 1.5);
  return c;
}

template <class T>
VarT<T> project(GraphT<T>& g, VarT<T> out, const std::vector<double>& coeff) {
  std::vector<T> c(coeff.begin(), coeff.end());
  return dot_const(g, out, std::move(c));
}

template <class F>
GradCheckResult run_one(const std::string& name, const ParamStore& init, F f) {
  auto [b32, b64] = both_precisions(f);
  return GradCheckResult{name, gradcheck_max_rel_err(init, b32, b64)};
}

GradCheckResult conv_target(const char* name, uint64_t seed, int stride) {
  Rng rng(seed);
  ParamStore s;
  s.add("x", uniform_tensor<float>(Shape{1, 2, 5, 5}, rng, -1.f, 1.f));
  s.add("w", uniform_tensor<float>(Shape{3, 2, 3, 3}, rng, -0.5f, 0.5f));
  s.add("b", uniform_tensor<float>(Shape{3}, rng, -0.2f, 0.2f));
  int o = conv_out_dim(5, 3, stride, 1);
  auto coeff = signed_coeff(size_t(3) * o * o, rng);
  return run_one(name, s, [stride, coeff](auto& g, auto& s2) {
    auto x = g.param(&s2.at("x"));
    auto w = g.param(&s2.at("w"));
    auto b = g.param(&s2.at("b"));
    return project(g, conv2d(g, x, w, b, stride, 1), coeff);
  });
}

GradCheckResult tconv_target(const char* name, uint64_t seed) {
  Rng rng(seed);
  ParamStore s;
  s.add("x", uniform_tensor<float>(Shape{1, 3, 3, 3}, rng, -1.f, 1.f));
  s.add("w", uniform_tensor<float>(Shape{3, 2, 2, 2}, rng, -0.5f, 0.5f));
  s.add("b", uniform_tensor<float>(Shape{2}, rng, -0.2f, 0.2f));
  auto coeff = signed_coeff(size_t(2) * 6 * 6, rng);
  return run_one(name, s, [coeff](auto& g, auto& s2) {
    auto x = g.param(&s2.at("x"));
    auto w = g.param(&s2.at("w"));
    auto b = g.param(&s2.at("b"));
    return project(g, transposed_conv2d_k2s2(g, x, w, b), coeff);
  });
}

GradCheckResult pool_concat_target(const char* name, uint64_t seed) {
  Rng rng(seed);
  ParamStore s;
  // Stagger pooling candidates so the in-window ranking is separated by at
  // least 0.1 and a finite-difference step can never flip an argmax.
  Tensor x1(Shape{1, 2, 6, 6});
  for (int c = 0; c < 2; ++c)
    for (int y = 0; y < 6; ++y)
      for (int x = 0; x < 6; ++x)
        x1.data[x1.at4(0, c, y, x)] =
            float(((y % 2) * 2 + (x % 2)) * 0.5 - 0.75 + rng.uniform(-0.2, 0.2));
  s.add("x1", std::move(x1));
  s.add("x2", uniform_tensor<float>(Shape{1, 1, 3, 3}, rng, -1.f, 1.f));
  auto coeff = signed_coeff(size_t(3) * 3 * 3, rng);
  return run_one(name, s, [coeff](auto& g, auto& s2) {
    auto a = g.param(&s2.at("x1"));
    auto b = g.param(&s2.at("x2"));
    return project(g, concat_channels(g, max_pool2d(g, a), b), coeff);
  });
}

GradCheckResult deform_target(const char* name, uint64_t seed, bool modulated) {
  Rng rng(seed);
  ParamStore s;
  s.add("x", uniform_tensor<float>(Shape{1, 2, 5, 5}, rng, -1.f, 1.f));
  s.add("w", uniform_tensor<float>(Shape{2, 2, 3, 3}, rng, -0.5f, 0.5f));
  s.add("b", uniform_tensor<float>(Shape{2}, rng, -0.2f, 0.2f));
  // Offsets with fractional part in [0.15, 0.85]: sampling positions stay
  // clear of the lattice, where the bilinear kernel kinks and h = 1e-3
  // differencing would straddle a slope change.
  Tensor off(Shape{1, 18, 5, 5});
  for (auto& v : off.data)
    v = float(rng.uniform(0.15, 0.85) - (rng.bernoulli(0.5) ? 1.0 : 0.0));
  s.add("off", std::move(off));
  if (modulated)
    s.add("mod", uniform_tensor<float>(Shape{1, 9, 5, 5}, rng, 0.2f, 0.8f));
  auto coeff = signed_coeff(size_t(2) * 5 * 5, rng);
  return run_one(name, s, [modulated, coeff](auto& g, auto& s2) {
    using T = typename std::decay_t<decltype(g)>::value_type;
    auto x = g.param(&s2.at("x"));
    auto w = g.param(&s2.at("w"));
    auto b = g.param(&s2.at("b"));
    auto of = g.param(&s2.at("off"));
    VarT<T> mod;
    if (modulated) mod = g.param(&s2.at("mod"));
    return project(g, deform_conv2d(g, x, w, b, of, mod, 1, 1), coeff);
  });
}

GradCheckResult block_target(const char* name, uint64_t seed, BlockKind kind,
                             bool modulated) {
  Rng rng(seed);
  ParamStore s;
  BlockT<float> reg{kind, 2, 3, modulated, "blk"};
  reg.register_params(s, rng);
  s.add("x", uniform_tensor<float>(Shape{1, 2, 5, 5}, rng, -1.f, 1.f));
  // Differencing at h = 1e-3 must never straddle a relu kink. Normalized
  // activations stay within +-sqrt(n-1) of zero, so 0.5 * xhat + 4 keeps
  // every pre-activation above ~1.5 while a single-parameter probe moves it
  // by a few 1e-3 at most.
  for (int n = 1; n <= 2; ++n) {
    std::string bn = "blk.bn" + std::to_string(n) + ".";
    for (auto& v : s.at(bn + "scale").data) v = 0.5f;
    for (auto& v : s.at(bn + "shift").data) v = 4.0f;
  }
  if (block_is_residual(kind))  // keep the shortcut small against that margin
    for (auto& v : s.at("blk.shortcut.weight").data) v *= 0.1f;
  if (block_is_deformable(kind)) {
    // Zero-init predictors put every sample on the lattice, where the
    // bilinear kernel kinks. Per-channel biases with magnitude in
    // [0.25, 0.45] move the taps to fractional positions that stay clear of
    // the lattice under differencing; the zero predictor weights still
    // receive full gradients through the offset field.
    for (int n = 1; n <= 2; ++n) {
      std::string base = "blk.conv" + std::to_string(n) + ".offset_pred.";
      for (auto& v : s.at(base + "bias").data)
        v = float((rng.bernoulli(0.5) ? 1.0 : -1.0) * rng.uniform(0.25, 0.45));
    }
  }
  auto coeff = signed_coeff(size_t(3) * 5 * 5, rng);
  return run_one(name, s, [kind, modulated, coeff](auto& g, auto& s2) {
    using T = typename std::decay_t<decltype(g)>::value_type;
    BlockT<T> blk{kind, 2, 3, modulated, "blk"};
    auto x = g.param(&s2.at("x"));
    return project(g, blk.forward(g, s2, x, true), coeff);
  });
}

GradCheckResult loss_target(const char* name, uint64_t seed, LossKind kind) {
  Rng rng(seed);
  ParamStore s;
  s.add("logits", uniform_tensor<float>(Shape{1, 10, 4, 4}, rng, -1.f, 1.f));
  ClassMask m(1, 4, 4);
  for (auto& t : m.v) t = uint8_t(rng.uniform_int(10));
  std::vector<double> weights;
  if (kind == LossKind::wf) {
    std::vector<double> freq{0.30, 0.20, 0.15, 0.10, 0.08,
                             0.07, 0.04, 0.03, 0.02, 0.01};
    weights = class_weights_enet(freq, 1.02);
  }
  return run_one(name, s, [kind, m, weights](auto& g, auto& s2) {
    using T = typename std::decay_t<decltype(g)>::value_type;
    auto logits = g.param(&s2.at("logits"));
    return segmentation_loss(g, logits, m, kind, T(2), weights);
  });
}

}  // namespace

std::vector<GradCheckResult> run_gradcheck(uint64_t seed) {
  std::vector<GradCheckResult> out;
  int k = 0;
  auto sub = [&] { return derive_seed(seed, 0x6763630ull + uint64_t(k++)); };
  out.push_back(conv_target("conv2d", sub(), 1));
  out.push_back(conv_target("conv2d_stride2", sub(), 2));
  out.push_back(tconv_target("transposed_conv2d", sub()));
  out.push_back(pool_concat_target("max_pool_concat", sub()));
  out.push_back(deform_target("deform_conv2d", sub(), false));
  out.push_back(deform_target("deform_conv2d_modulated", sub(), true));
  out.push_back(block_target("block_plain", sub(), BlockKind::plain, false));
  out.push_back(block_target("block_residual", sub(), BlockKind::residual, false));
  out.push_back(
      block_target("block_deformable", sub(), BlockKind::deformable_plain, false));
  out.push_back(block_target("block_deformable_residual_mod", sub(),
                             BlockKind::deformable_residual, true));
  out.push_back(loss_target("loss_ce", sub(), LossKind::ce));
  out.push_back(loss_target("loss_focal", sub(), LossKind::nwf));
  out.push_back(loss_target("loss_weighted_focal", sub(), LossKind::wf));
  return out;
}

}  // namespace dseg
