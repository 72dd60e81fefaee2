#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dseg/data.hpp"
#include "dseg/gradcheck.hpp"
#include "dseg/model.hpp"
#include "dseg/report.hpp"
#include "dseg/serialize.hpp"
#include "dseg/train.hpp"

namespace {

dseg::SplitRatios parse_ratios(const std::string& s) {
  dseg::SplitRatios r;
  if (std::sscanf(s.c_str(), "%lf,%lf,%lf", &r.train, &r.val, &r.test) != 3)
    throw dseg::ConfigError("split ratios must look like 0.8,0.1,0.1");
  return r;
}

int cmd_eval(const std::string& ckpt, const std::string& data,
             const std::string& split, const std::string& ratios,
             uint64_t seed, bool seed_given, int img_size,
             const std::string& loss_tok, double gamma,
             const std::string& out_dir) {
  dseg::Model model =
      dseg::Model::from_store(dseg::records_to_store(dseg::read_checkpoint(ckpt)));
  if (!seed_given) seed = model.seed();
  dseg::DatasetSplits splits =
      dseg::load_dataset(data, parse_ratios(ratios), seed, img_size);

  std::vector<dseg::SegmentationSample> set;
  if (split == "train") set = std::move(splits.train);
  else if (split == "val") set = std::move(splits.val);
  else if (split == "test") set = std::move(splits.test);
  else if (split == "all") {
    set = std::move(splits.train);
    set.insert(set.end(), splits.val.begin(), splits.val.end());
    set.insert(set.end(), splits.test.begin(), splits.test.end());
  } else {
    throw dseg::ConfigError("split must be train, val, test, or all");
  }
  if (set.empty()) throw dseg::DatasetError("selected split is empty");

  dseg::LossKind loss = dseg::loss_from_token(loss_tok);
  std::vector<double> weights(dseg::ClassMap::kNumClasses, 1.0);
  if (loss == dseg::LossKind::wf)
    weights = dseg::class_weights_enet(dseg::class_frequencies(set), 1.02);

  dseg::EvalResult r = dseg::evaluate_model(model, set, loss, gamma, weights);
  dseg::RunMetrics run{
      dseg::variant_label(model.config().variant) + "_" + dseg::loss_token(loss),
      r.summary};
  std::printf("%s", dseg::table_markdown({run}).c_str());
  std::printf("\nimages: %zu  mean %s loss: %.6f  overall acc: %.4f\n",
              set.size(), loss_tok.c_str(), r.mean_loss, r.summary.overall_acc);
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    dseg::write_summary_csv(out_dir + "/summary.csv", run);
    std::ofstream(out_dir + "/report.md") << dseg::table_markdown({run});
  }
  return 0;
}

int cmd_report(const std::vector<std::string>& runs, const std::string& out_dir) {
  std::vector<dseg::RunMetrics> rows;
  for (const std::string& dir : runs) {
    std::string path = dir;
    if (std::filesystem::is_directory(path)) path += "/summary.csv";
    rows.push_back(dseg::read_summary_csv(path));
  }
  std::string md = dseg::table_markdown(rows);
  std::printf("%s", md.c_str());
  std::filesystem::create_directories(out_dir);
  std::ofstream(out_dir + "/report.md") << md;
  std::ofstream(out_dir + "/report.csv") << dseg::table_csv(rows);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"U-Net semantic segmentation with deformable convolutions"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-data", "Render a synthetic fisheye dataset");
  int gen_n = 100, gen_size = 256;
  uint64_t gen_seed = 1;
  std::string gen_out;
  gen->add_option("--n", gen_n, "number of samples");
  gen->add_option("--size", gen_size, "square image size in pixels");
  gen->add_option("--seed", gen_seed, "generator seed");
  gen->add_option("--out", gen_out, "output directory")->required();

  auto* tr = app.add_subcommand("train", "Train a model from a config file");
  std::string cfg_path;
  tr->add_option("--config", cfg_path, "flat key=value config file")->required();

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset split");
  std::string ev_ckpt, ev_data, ev_split = "test", ev_loss = "ce", ev_out;
  std::string ev_ratios = "0.8,0.1,0.1";
  double ev_gamma = 2.0;
  int ev_size = 256;
  uint64_t ev_seed = 0;
  ev->add_option("--checkpoint", ev_ckpt, "model checkpoint")->required();
  ev->add_option("--data", ev_data, "dataset root (rgb/ + mask/)")->required();
  ev->add_option("--split", ev_split, "train|val|test|all");
  ev->add_option("--ratios", ev_ratios, "train,val,test split ratios");
  ev->add_option("--seed", ev_seed,
                 "split seed (default: the seed stored in the checkpoint)");
  ev->add_option("--img-size", ev_size, "resize images to this square size");
  ev->add_option("--loss", ev_loss, "loss to report: ce|nwf|wf");
  ev->add_option("--gamma", ev_gamma, "focal exponent");
  ev->add_option("--out", ev_out, "also write summary.csv/report.md here");

  auto* gc = app.add_subcommand("gradcheck",
                                "Finite-difference audit of every backward pass");
  uint64_t gc_seed = 7;
  gc->add_option("--seed", gc_seed, "seed for the random test instances");

  auto* rp = app.add_subcommand("report", "Merge run summaries into one table");
  std::vector<std::string> rp_runs;
  std::string rp_out = ".";
  rp->add_option("--runs", rp_runs, "run directories (or summary.csv files)")
      ->required()
      ->expected(-1);
  rp->add_option("--out", rp_out, "directory for report.md/report.csv");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      dseg::write_synthetic_dataset(gen_out, gen_n, gen_size, gen_seed);
      std::printf("wrote %d samples (%dx%d) to %s\n", gen_n, gen_size, gen_size,
                  gen_out.c_str());
      return 0;
    }
    if (*tr) {
      dseg::TrainConfig cfg = dseg::parse_train_config(cfg_path);
      dseg::TrainResult r = dseg::train(cfg);
      std::printf("done: best val mIoU %.4f\nbest: %s\nlast: %s\ncurves: %s\n",
                  r.best_val_miou, r.best_checkpoint.c_str(),
                  r.last_checkpoint.c_str(), r.curves_csv.c_str());
      return 0;
    }
    if (*ev)
      return cmd_eval(ev_ckpt, ev_data, ev_split, ev_ratios, ev_seed,
                      ev->count("--seed") > 0, ev_size, ev_loss, ev_gamma, ev_out);
    if (*gc) {
      bool ok = true;
      std::printf("%-32s %14s\n", "target", "max rel err");
      for (const auto& r : dseg::run_gradcheck(gc_seed)) {
        std::printf("%-32s %14.3e  %s\n", r.name.c_str(), r.max_rel_err,
                    r.passed() ? "ok" : "FAIL");
        ok = ok && r.passed();
      }
      return ok ? 0 : 1;
    }
    if (*rp) return cmd_report(rp_runs, rp_out);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
