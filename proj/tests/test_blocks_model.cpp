#include <doctest.h>

#include <cmath>
#include <string>
#include <vector>

#include "dseg/blocks.hpp"
#include "dseg/metrics.hpp"
#include "dseg/model.hpp"
#include "dseg/train.hpp"

using namespace dseg;

namespace {

double max_rel(const std::vector<float>& a, const std::vector<float>& b) {
  REQUIRE(a.size() == b.size());
  double worst = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    double den = std::max({std::abs(double(a[i])), std::abs(double(b[i])), 1e-12});
    worst = std::max(worst, std::abs(double(a[i]) - double(b[i])) / den);
  }
  return worst;
}

// Independent closed-form parameter counts, kept separate from the registry
// so the two can audit each other.
size_t count_block(BlockKind kind, int cin, int cout, bool modulated) {
  size_t n = size_t(cout) * cin * 9 + cout    // conv1
             + size_t(cout) * cout * 9 + cout  // conv2
             + 4 * size_t(cout);               // two BN scale/shift pairs
  if (block_is_residual(kind) && cin != cout) n += size_t(cout) * cin + cout;
  if (block_is_deformable(kind)) {
    int pc = (modulated ? 3 : 2) * 9;
    n += size_t(pc) * cin * 9 + pc;    // predictor for conv1
    n += size_t(pc) * cout * 9 + pc;   // predictor for conv2
  }
  return n;
}

size_t count_model(const ModelConfig& cfg) {
  auto ch = [&](int i) { return cfg.base_channels << i; };
  bool de = cfg.variant == Variant::v_deunet || cfg.variant == Variant::r_deunet;
  bool res = cfg.variant == Variant::r_unet || cfg.variant == Variant::r_deunet;
  BlockKind plain = res ? BlockKind::residual : BlockKind::plain;
  BlockKind deform = res ? BlockKind::deformable_residual : BlockKind::deformable_plain;

  size_t n = 0;
  for (int i = 0; i < cfg.depth; ++i) {
    BlockKind k = (de && i == 0) ? deform : plain;
    n += count_block(k, i == 0 ? 3 : ch(i - 1), ch(i), cfg.modulated);
  }
  n += count_block(plain, ch(cfg.depth - 1), ch(cfg.depth), cfg.modulated);
  for (int i = 0; i < cfg.depth; ++i) {
    n += size_t(ch(i + 1)) * ch(i) * 4 + ch(i);  // transposed up-conv
    BlockKind k = (de && i == 0) ? deform : plain;
    n += count_block(k, 2 * ch(i), ch(i), cfg.modulated);
  }
  n += size_t(cfg.num_classes) * ch(0) + cfg.num_classes;  // 1x1 head
  return n;
}

}  // namespace

TEST_CASE("double-conv block parameter count matches the closed form") {
  Rng rng(1);
  ParamStore s;
  BlockT<float> blk{BlockKind::plain, 3, 16, false, "b"};
  blk.register_params(s, rng);
  CHECK(s.trainable_scalars() == 2832);
  CHECK(s.trainable_scalars() == count_block(BlockKind::plain, 3, 16, false));

  ParamStore sd;
  BlockT<float> dblk{BlockKind::deformable_plain, 3, 16, false, "b"};
  dblk.register_params(sd, rng);
  // the deformable twin adds exactly the two predictors
  size_t pred = (size_t(18) * 3 * 9 + 18) + (size_t(18) * 16 * 9 + 18);
  CHECK(sd.trainable_scalars() == 2832 + pred);
}

TEST_CASE("blocks map zero input to zero output under default init") {
  for (BlockKind kind : {BlockKind::plain, BlockKind::residual,
                         BlockKind::deformable_plain, BlockKind::deformable_residual}) {
    Rng rng(5);
    ParamStore s;
    BlockT<float> blk{kind, 3, 8, false, "b"};
    blk.register_params(s, rng);
    Graph g;
    Var x = g.leaf(Tensor(Shape{1, 3, 6, 6}));
    const Tensor& y = g.val(blk.forward(g, s, x, true));
    CHECK(y.shape == Shape{1, 8, 6, 6});
    for (float v : y.data) CHECK(v == 0.f);
  }
}

TEST_CASE("residual block with a dead main path reduces to relu(x)") {
  Rng rng(6);
  ParamStore s;
  BlockT<float> blk{BlockKind::residual, 4, 4, false, "b"};
  blk.register_params(s, rng);
  s.at("b.conv1.weight").fill(0.f);
  s.at("b.conv2.weight").fill(0.f);

  Tensor xt = uniform_tensor<float>(Shape{1, 4, 5, 5}, rng, -1.f, 1.f);
  Graph g;
  Var x = g.param(&xt);
  Var y = blk.forward(g, s, x, true);
  for (size_t i = 0; i < xt.data.size(); ++i)
    CHECK(g.val(y).data[i] == std::max(0.f, xt.data[i]));

  // gradient still reaches the input through the shortcut
  g.backward(mean_all(g, y));
  double gsum = 0;
  for (float v : xt.grad) gsum += std::abs(v);
  CHECK(gsum > 0);
}

TEST_CASE("deformable blocks at zero-init equal their plain twins") {
  struct Pair { BlockKind plain, deform; };
  for (auto [plain, deform] : {Pair{BlockKind::plain, BlockKind::deformable_plain},
                               Pair{BlockKind::residual, BlockKind::deformable_residual}}) {
    Rng ra(9), rb(9), rx(10);
    ParamStore sa, sb;
    BlockT<float> a{plain, 3, 8, false, "b"};
    BlockT<float> b{deform, 3, 8, false, "b"};
    a.register_params(sa, ra);
    b.register_params(sb, rb);

    Tensor xt = uniform_tensor<float>(Shape{2, 3, 6, 6}, rx, -1.f, 1.f);
    Graph g;
    Var x = g.leaf(xt);
    // copy: the second forward grows the graph under the first reference
    Tensor ya = g.val(a.forward(g, sa, x, true));
    Tensor yb = g.val(b.forward(g, sb, x, true));
    CHECK(max_rel(ya.data, yb.data) < 1e-6);
  }
}

TEST_CASE("offset predictors pick up gradient from zero init and move under Adam") {
  Rng rng(12);
  ParamStore s;
  BlockT<float> blk{BlockKind::deformable_plain, 3, 8, true, "b"};
  blk.register_params(s, rng);
  Tensor xt = uniform_tensor<float>(Shape{1, 3, 6, 6}, rng, -1.f, 1.f);

  std::vector<float> coeff(size_t(8) * 6 * 6);
  for (auto& c : coeff) c = rng.uniformf(-1.f, 1.f);

  s.zero_grads();
  Graph g;
  Var y = blk.forward(g, s, g.leaf(xt), true);
  g.backward(dot_const(g, y, std::move(coeff)));

  double pg = 0;
  for (float v : s.at("b.conv1.offset_pred.weight").grad) pg += std::abs(v);
  for (float v : s.at("b.conv2.offset_pred.weight").grad) pg += std::abs(v);
  CHECK(pg > 0);

  Adam opt(s);
  opt.step(1e-3);
  double moved = 0;
  for (float v : s.at("b.conv1.offset_pred.weight").data) moved += std::abs(v);
  CHECK(moved > 0);
}

TEST_CASE("model variants build, run, and count parameters correctly") {
  for (Variant v : {Variant::v_unet, Variant::v_deunet, Variant::r_unet, Variant::r_deunet}) {
    ModelConfig cfg;
    cfg.variant = v;
    cfg.base_channels = 16;
    cfg.depth = 4;
    Model m = Model::build(cfg, 77);
    CHECK(m.count_parameters() == count_model(cfg));

    ModelConfig small = cfg;
    small.base_channels = 4;
    small.depth = 2;
    Model ms = Model::build(small, 78);
    Tensor logits = ms.predict(Tensor(Shape{1, 3, 64, 64}));
    CHECK(logits.shape == Shape{1, 10, 64, 64});
    CHECK(logits.all_finite());
  }
}

TEST_CASE("deformable variant parameter surplus is exactly the predictors") {
  ModelConfig cfg;
  cfg.base_channels = 16;
  cfg.depth = 4;
  cfg.variant = Variant::v_unet;
  size_t plain = Model::build(cfg, 1).count_parameters();
  cfg.variant = Variant::v_deunet;
  size_t deform = Model::build(cfg, 1).count_parameters();
  // predictors on enc0 (3->16) and dec0 (32->16), two convs each
  size_t pred_enc = (size_t(18) * 3 * 9 + 18) + (size_t(18) * 16 * 9 + 18);
  size_t pred_dec = (size_t(18) * 32 * 9 + 18) + (size_t(18) * 16 * 9 + 18);
  CHECK(deform - plain == pred_enc + pred_dec);
}

TEST_CASE("forward validates spatial divisibility") {
  ModelConfig cfg;
  cfg.base_channels = 4;
  cfg.depth = 4;
  Model m = Model::build(cfg, 3);
  CHECK_THROWS_AS(m.predict(Tensor(Shape{1, 3, 60, 64})), GeometryError);
  CHECK_THROWS_AS(m.predict(Tensor(Shape{1, 4, 64, 64})), DimensionError);
}

TEST_CASE("zero-init deformable networks match their baselines exactly") {
  struct Pair { Variant plain, deform; };
  for (auto [pv, dv] : {Pair{Variant::v_unet, Variant::v_deunet},
                        Pair{Variant::r_unet, Variant::r_deunet}}) {
    ModelConfig pc, dc;
    pc.variant = pv;
    dc.variant = dv;
    pc.base_channels = dc.base_channels = 8;
    pc.depth = dc.depth = 3;
    Model a = Model::build(pc, 123);
    Model b = Model::build(dc, 123);

    Rng rng(200);
    Tensor x = uniform_tensor<float>(Shape{1, 3, 32, 32}, rng, 0.f, 1.f);
    Tensor la = a.predict(x);
    Tensor lb = b.predict(x);
    CHECK(max_rel(la.data, lb.data) < 1e-6);
  }
}

TEST_CASE("predicted masks stay inside the label range") {
  ModelConfig cfg;
  cfg.base_channels = 4;
  cfg.depth = 2;
  cfg.variant = Variant::v_deunet;
  Model m = Model::build(cfg, 55);
  Rng rng(56);
  Tensor x = uniform_tensor<float>(Shape{2, 3, 32, 32}, rng, 0.f, 1.f);
  ClassMask pred = argmax_channels(m.predict(x));
  CHECK(pred.batch == 2);
  CHECK(pred.h == 32);
  CHECK(pred.w == 32);
  for (uint8_t v : pred.v) CHECK(v <= 9);
}

TEST_CASE("flipped input keeps shape and finiteness (equivariance not claimed)") {
  ModelConfig cfg;
  cfg.base_channels = 4;
  cfg.depth = 2;
  Model m = Model::build(cfg, 90);
  Rng rng(91);
  Tensor x = uniform_tensor<float>(Shape{1, 3, 32, 32}, rng, 0.f, 1.f);
  Tensor xf = x;
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 32; ++y)
      for (int i = 0; i < 32; ++i)
        xf.data[xf.at4(0, c, y, i)] = x.data[x.at4(0, c, y, 31 - i)];
  Tensor lf = m.predict(xf);
  CHECK(lf.shape == Shape{1, 10, 32, 32});
  CHECK(lf.all_finite());
}

TEST_CASE("config validation rejects degenerate architectures") {
  ModelConfig cfg;
  cfg.depth = 0;
  CHECK_THROWS_AS(Model::build(cfg, 1), ConfigError);
  cfg.depth = 2;
  cfg.base_channels = 0;
  CHECK_THROWS_AS(Model::build(cfg, 1), ConfigError);
  cfg.base_channels = 4;
  cfg.num_classes = 1;
  CHECK_THROWS_AS(Model::build(cfg, 1), ConfigError);
}
