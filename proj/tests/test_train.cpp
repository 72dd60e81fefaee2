// Optimizer, LR schedule, config parsing, and the training loop end to end.

#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>

#include "dseg/errors.hpp"
#include "dseg/train.hpp"

using namespace dseg;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const char* name) {
  fs::path p = fs::temp_directory_path() / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

ParamStore single_param(float value, float grad) {
  ParamStore s;
  Tensor t = Tensor::scalar(value);
  t.ensure_grad();
  t.grad[0] = grad;
  s.add("theta", std::move(t));
  return s;
}

}  // namespace

TEST_CASE("adam first step: the update magnitude is the learning rate") {
  // With one gradient seen, bias correction makes m-hat = g and
  // v-hat = g^2, so the step is -lr * g/(|g|+eps) = -lr (for g > 0).
  ParamStore s = single_param(1.0f, 0.5f);
  Adam adam(s);
  adam.step(1e-4);
  CHECK(adam.t() == 1);
  double delta = double(s.at("theta").data[0]) - 1.0;
  CHECK(std::abs(delta - (-1e-4)) < 1e-6);
}

TEST_CASE("adam: zero gradient leaves a fresh parameter untouched") {
  ParamStore s = single_param(0.75f, 0.0f);
  Adam adam(s);
  adam.step(1e-2);
  CHECK(s.at("theta").data[0] == 0.75f);
}

TEST_CASE("adam is deterministic over identical gradient sequences") {
  auto run = [] {
    ParamStore s = single_param(0.3f, 0.0f);
    Adam adam(s);
    Rng rng(12);
    for (int i = 0; i < 25; ++i) {
      s.at("theta").grad[0] = rng.uniformf(-1.0f, 1.0f);
      adam.step(3e-3);
    }
    return s.at("theta").data[0];
  };
  CHECK(run() == run());
}

TEST_CASE("adam rejects non-finite gradients") {
  ParamStore s = single_param(0.0f, std::numeric_limits<float>::infinity());
  Adam adam(s);
  CHECK_THROWS_AS(adam.step(1e-3), StateError);
  ParamStore s2 = single_param(0.0f, std::numeric_limits<float>::quiet_NaN());
  Adam adam2(s2);
  CHECK_THROWS_AS(adam2.step(1e-3), StateError);
}

TEST_CASE("adam skips non-trainable entries") {
  ParamStore s;
  Tensor t = Tensor::scalar(2.0f);
  t.ensure_grad();
  t.grad[0] = 1.0f;
  s.add("frozen", std::move(t), false);
  Adam adam(s);
  adam.step(0.1);
  CHECK(s.at("frozen").data[0] == 2.0f);
}

TEST_CASE("adam state round-trips through records") {
  ParamStore s = single_param(0.5f, 0.0f);
  Adam a(s);
  Rng rng(5);
  for (int i = 0; i < 7; ++i) {
    s.at("theta").grad[0] = rng.uniformf(-1.0f, 1.0f);
    a.step(1e-2);
  }
  float theta_mid = s.at("theta").data[0];

  ParamStore snapshot;
  for (const TensorRecord& r : a.state_records()) snapshot.add(r.name, r.tensor);
  CHECK(snapshot.has("adam.m.theta"));
  CHECK(snapshot.has("adam.v.theta"));
  CHECK(int(snapshot.at("adam.t").data[0]) == 7);

  // A fresh optimizer on a copy of the parameter continues identically.
  ParamStore s2 = single_param(theta_mid, 0.0f);
  Adam b(s2);
  b.load_state(snapshot);
  CHECK(b.t() == 7);
  for (int i = 0; i < 5; ++i) {
    float g = Rng(100 + uint64_t(i)).uniformf(-1.0f, 1.0f);
    s.at("theta").grad[0] = g;
    s2.at("theta").grad[0] = g;
    a.step(1e-2);
    b.step(1e-2);
    CHECK(s.at("theta").data[0] == s2.at("theta").data[0]);
  }
}

TEST_CASE("plateau schedule halves after patience stale epochs") {
  PlateauSchedule sched(5);
  double lr = 1e-4;
  // Improvements keep the rate.
  lr = sched.update(0.10, lr);
  lr = sched.update(0.20, lr);
  CHECK(lr == 1e-4);
  // Four stale epochs: still holding.
  for (int i = 0; i < 4; ++i) lr = sched.update(0.20, lr);
  CHECK(lr == 1e-4);
  // Fifth consecutive stale epoch halves.
  lr = sched.update(0.20, lr);
  CHECK(lr == 5e-5);
  // Counter reset: the next stale epoch does not halve again.
  lr = sched.update(0.20, lr);
  CHECK(lr == 5e-5);
}

TEST_CASE("plateau schedule: improvements below min_delta count as stale") {
  PlateauSchedule sched(2, 1e-4);
  double lr = 1.0;
  lr = sched.update(0.5, lr);
  lr = sched.update(0.5 + 5e-5, lr);  // within min_delta: stale
  CHECK(lr == 1.0);
  lr = sched.update(0.5 + 9e-5, lr);  // still within: second stale, halve
  CHECK(lr == 0.5);
}

TEST_CASE("plateau schedule floors at 1e-6") {
  PlateauSchedule sched(1);
  double lr = 3e-6;
  lr = sched.update(0.0, lr);  // first call sets best? no: -inf + delta < 0.0
  CHECK(lr == 3e-6);           // improvement over -inf keeps the rate
  for (int i = 0; i < 10; ++i) lr = sched.update(0.0, lr);
  CHECK(lr == 1e-6);
  CHECK_THROWS_AS(PlateauSchedule(0), ConfigError);
}

TEST_CASE("config pairs: every key lands in its field") {
  TrainConfig cfg = parse_train_pairs({{"variant", "r_deunet"},
                                       {"loss", "wf"},
                                       {"gamma", "1.5"},
                                       {"lr_init", "0.001"},
                                       {"epochs", "3"},
                                       {"batch_size", "2"},
                                       {"split", "0.6,0.2,0.2"},
                                       {"seed", "42"},
                                       {"data", "synthetic:12:64"},
                                       {"img_size", "96"},
                                       {"base_channels", "8"},
                                       {"depth", "2"},
                                       {"modulated", "true"},
                                       {"patience", "3"},
                                       {"augment", "false"},
                                       {"out_dir", "/tmp/run_x"},
                                       {"resume", "prev.ckpt"}});
  CHECK(cfg.variant == Variant::r_deunet);
  CHECK(cfg.loss == LossKind::wf);
  CHECK(cfg.gamma == 1.5);
  CHECK(cfg.lr_init == 0.001);
  CHECK(cfg.epochs == 3);
  CHECK(cfg.batch_size == 2);
  CHECK(cfg.split.train == 0.6);
  CHECK(cfg.split.val == 0.2);
  CHECK(cfg.seed == 42);
  CHECK(cfg.synthetic);
  CHECK(cfg.synth_n == 12);
  CHECK(cfg.img_size == 96);  // later key overrides the data shorthand
  CHECK(cfg.base_channels == 8);
  CHECK(cfg.depth == 2);
  CHECK(cfg.modulated);
  CHECK(cfg.patience == 3);
  CHECK(!cfg.augment);
  CHECK(cfg.out_dir == "/tmp/run_x");
  CHECK(cfg.resume == "prev.ckpt");

  TrainConfig dir_cfg = parse_train_pairs({{"data", "dir:/data/fisheye"}});
  CHECK(!dir_cfg.synthetic);
  CHECK(dir_cfg.data_dir == "/data/fisheye");
}

TEST_CASE("config pairs: malformed input throws") {
  CHECK_THROWS_AS((void)parse_train_pairs({{"colour", "blue"}}), ConfigError);
  CHECK_THROWS_AS((void)parse_train_pairs({{"variant", "w_unet"}}), ConfigError);
  CHECK_THROWS_AS((void)parse_train_pairs({{"loss", "mse"}}), ConfigError);
  CHECK_THROWS_AS((void)parse_train_pairs({{"epochs", "three"}}), ConfigError);
  CHECK_THROWS_AS((void)parse_train_pairs({{"epochs", "0"}}), ConfigError);
  CHECK_THROWS_AS((void)parse_train_pairs({{"lr_init", "-0.1"}}), ConfigError);
  CHECK_THROWS_AS((void)parse_train_pairs({{"gamma", "-2"}}), ConfigError);
  CHECK_THROWS_AS((void)parse_train_pairs({{"modulated", "maybe"}}), ConfigError);
  CHECK_THROWS_AS((void)parse_train_pairs({{"split", "0.8,0.2"}}), ConfigError);
  CHECK_THROWS_AS((void)parse_train_pairs({{"data", "ftp:server"}}), ConfigError);
  CHECK_THROWS_AS((void)parse_train_pairs({{"data", "synthetic:1:2:3"}}), ConfigError);
}

TEST_CASE("config file: comments, blanks, and spacing are tolerated") {
  fs::path p = fs::temp_directory_path() / "dseg_cfg_test.cfg";
  {
    std::ofstream os(p, std::ios::trunc);
    os << "# training setup\n"
       << "\n"
       << "variant = v_deunet\n"
       << "  epochs=2  \n"
       << "data = synthetic:4:16\n"
       << "out_dir = run_here\n";
  }
  TrainConfig cfg = parse_train_config(p.string());
  CHECK(cfg.variant == Variant::v_deunet);
  CHECK(cfg.epochs == 2);
  CHECK(cfg.synth_n == 4);
  CHECK(cfg.out_dir == "run_here");

  CHECK_THROWS_AS((void)parse_train_config("/nonexistent/cfg"), IoError);
  {
    std::ofstream os(p, std::ios::trunc);
    os << "this line has no equals sign\n";
  }
  CHECK_THROWS_AS((void)parse_train_config(p.string()), ConfigError);
}

TEST_CASE("class weights: uniform unless the weighted loss asks for balance") {
  TrainConfig cfg;
  cfg.loss = LossKind::ce;
  auto set = make_synthetic_set(2, 16, 4);
  auto w = train_class_weights(cfg, set);
  for (double v : w) CHECK(v == 1.0);
  cfg.loss = LossKind::nwf;
  w = train_class_weights(cfg, set);
  for (double v : w) CHECK(v == 1.0);
  cfg.loss = LossKind::wf;
  w = train_class_weights(cfg, set);
  CHECK(w == class_weights_enet(class_frequencies(set), 1.02));
  // Rare classes weigh more than common ones.
  auto f = class_frequencies(set);
  CHECK(f[1] > f[9]);
  CHECK(w[9] > w[1]);
}

TEST_CASE("synthetic split plumbing honors configured sizes") {
  TrainConfig cfg;
  cfg.synthetic = true;
  cfg.synth_n = 10;
  cfg.img_size = 16;
  cfg.seed = 3;
  cfg.split = SplitRatios{0.8, 0.1, 0.1};
  DatasetSplits sp = load_splits(cfg);
  CHECK(sp.train.size() == 8);
  CHECK(sp.train.size() + sp.val.size() + sp.test.size() == 10);
  CHECK(sp.train[0].image.dim(1) == 16);
}

TEST_CASE("evaluation is repeatable and leaves the model untouched") {
  ModelConfig mc{Variant::v_unet, 2, 1, 10, false};
  Model model = Model::build(mc, 17);
  auto set = make_synthetic_set(3, 16, 6);
  std::vector<double> uniform(ClassMap::kNumClasses, 1.0);

  EvalResult a = evaluate_model(model, set, LossKind::ce, 2.0, uniform);
  EvalResult b = evaluate_model(model, set, LossKind::ce, 2.0, uniform);
  CHECK(a.mean_loss == b.mean_loss);
  CHECK(a.cm == b.cm);
  CHECK(a.summary.macro_miou == doctest::Approx(b.summary.macro_miou));
  CHECK_THROWS_AS((void)evaluate_model(model, {}, LossKind::ce, 2.0, uniform),
                  ConfigError);
}

TEST_CASE("training loop writes its artifacts and learns on a toy run") {
  fs::path out = fresh_dir("dseg_train_smoke");
  TrainConfig cfg;
  cfg.variant = Variant::v_unet;
  cfg.loss = LossKind::ce;
  cfg.epochs = 2;
  cfg.batch_size = 2;
  cfg.lr_init = 1e-3;
  cfg.seed = 5;
  cfg.synthetic = true;
  cfg.synth_n = 6;
  cfg.img_size = 16;
  cfg.base_channels = 2;
  cfg.depth = 1;
  cfg.augment = true;
  cfg.out_dir = out.string();

  TrainResult res = train(cfg);
  REQUIRE(res.rows.size() == 2);
  CHECK(res.rows[0].epoch == 0);
  CHECK(res.rows[1].epoch == 1);
  CHECK(std::isfinite(res.rows[0].train_loss));
  CHECK(res.best_val_miou >= 0.0);
  CHECK(res.best_val_miou <= 1.0);
  CHECK(fs::exists(out / "last.ckpt"));
  CHECK(fs::exists(out / "best.ckpt"));
  CHECK(fs::exists(out / "curves.csv"));
  CHECK(fs::exists(out / "summary.csv"));
  CHECK(fs::exists(out / "report.md"));
  CHECK(fs::exists(out / "report.csv"));
  CHECK(fs::exists(out / "curves.svg"));

  // The per-epoch CSV has a header plus exactly one row per epoch.
  std::ifstream is(out / "curves.csv");
  std::string line;
  std::getline(is, line);
  CHECK(line == "epoch,train_loss,val_loss,val_miou");
  int rows = 0;
  while (std::getline(is, line))
    if (!line.empty()) ++rows;
  CHECK(rows == cfg.epochs);

  // The checkpoint reloads into a working model of the right arch.
  Model m = Model::from_store(records_to_store(read_checkpoint(res.best_checkpoint)));
  CHECK(m.config().variant == Variant::v_unet);
  CHECK(m.config().base_channels == 2);
}

TEST_CASE("resuming from a checkpoint reproduces the uninterrupted run") {
  auto base_cfg = [](const std::string& out) {
    TrainConfig cfg;
    cfg.variant = Variant::v_unet;
    cfg.loss = LossKind::ce;
    cfg.epochs = 4;
    cfg.batch_size = 1;
    cfg.lr_init = 1e-3;
    cfg.seed = 11;
    cfg.synthetic = true;
    cfg.synth_n = 5;
    cfg.img_size = 16;
    cfg.base_channels = 2;
    cfg.depth = 1;
    cfg.augment = true;
    cfg.out_dir = out;
    return cfg;
  };

  fs::path full_dir = fresh_dir("dseg_resume_full");
  TrainResult full = train(base_cfg(full_dir.string()));
  REQUIRE(full.rows.size() == 4);

  fs::path part_dir = fresh_dir("dseg_resume_part");
  TrainConfig first = base_cfg(part_dir.string());
  first.epochs = 2;
  train(first);

  TrainConfig second = base_cfg(part_dir.string());
  second.resume = (part_dir / "last.ckpt").string();
  TrainResult rest = train(second);
  REQUIRE(rest.rows.size() == 4);

  for (size_t i = 0; i < 4; ++i) {
    CHECK(rest.rows[i].epoch == full.rows[i].epoch);
    CHECK(std::abs(rest.rows[i].train_loss - full.rows[i].train_loss) <= 1e-5);
    CHECK(std::abs(rest.rows[i].val_loss - full.rows[i].val_loss) <= 1e-5);
  }
}
