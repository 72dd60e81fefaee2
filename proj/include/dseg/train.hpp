#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dseg/data.hpp"
#include "dseg/losses.hpp"
#include "dseg/metrics.hpp"
#include "dseg/model.hpp"
#include "dseg/serialize.hpp"

namespace dseg {

struct TrainConfig {
  Variant variant = Variant::v_unet;
  LossKind loss = LossKind::ce;
  double gamma = 2.0;
  double lr_init = 1e-4;
  int epochs = 50;
  int batch_size = 1;
  SplitRatios split;
  uint64_t seed = 1;
  bool synthetic = true;  // data = synthetic(n, size) or directory(path)
  int synth_n = 100;
  std::string data_dir;
  int img_size = 256;
  int base_channels = 16;
  int depth = 4;
  bool modulated = false;
  int patience = 5;
  bool augment = true;
  std::string out_dir = "run";
  std::string resume;  // checkpoint to continue from
};

// Flat key=value config file; '#' starts a comment. Keys mirror the struct
// fields; `data` takes "synthetic:<n>:<size>" or "dir:<path>", `split` takes
// "0.8,0.1,0.1".
TrainConfig parse_train_config(const std::string& path);
TrainConfig parse_train_pairs(
    const std::vector<std::pair<std::string, std::string>>& pairs);

// Adam with bias correction over the trainable entries of a store.
class Adam {
 public:
  static constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;

  explicit Adam(ParamStore& store);

  // Applies one update from the gradients currently held by the parameters.
  // Throws StateError on a non-finite gradient.
  void step(double lr);

  int64_t t() const { return t_; }

  std::vector<TensorRecord> state_records() const;
  void load_state(const ParamStore& records);

 private:
  ParamStore* store_;
  std::vector<Tensor> m_, v_;  // aligned with trainable entries
  std::vector<size_t> entry_idx_;
  int64_t t_ = 0;
};

// Reduce-on-plateau: halve the rate after `patience` consecutive epochs
// without an improvement > min_delta, floored at 1e-6.
class PlateauSchedule {
 public:
  explicit PlateauSchedule(int patience, double min_delta = 1e-4,
                           double floor = 1e-6);
  double update(double metric, double lr);

  double best() const { return best_; }
  int stale() const { return stale_; }
  void restore(double best, int stale) {
    best_ = best;
    stale_ = stale;
  }

 private:
  int patience_;
  double min_delta_, floor_;
  double best_;
  int stale_ = 0;
};

struct EpochRow {
  int epoch;
  double train_loss, val_loss, val_miou;
};

struct TrainResult {
  std::vector<EpochRow> rows;
  std::string best_checkpoint, last_checkpoint, curves_csv;
  double best_val_miou = 0;
};

// Full training loop: loads/generates data, builds or resumes the model,
// runs epochs with augmentation and the LR schedule, writes per-epoch CSV
// plus best/last checkpoints under cfg.out_dir, and finally evaluates the
// best checkpoint on the test split into summary.csv/report.md.
TrainResult train(const TrainConfig& cfg);

struct EvalResult {
  ConfusionMatrix cm{ClassMap::kNumClasses};
  MetricsSummary summary;
  double mean_loss = 0;
};

// Eval-mode pass over a sample set: per-pixel argmax into a confusion
// matrix plus the mean loss under the given criterion.
EvalResult evaluate_model(Model& model, const std::vector<SegmentationSample>& set,
                          LossKind loss, double gamma,
                          const std::vector<double>& class_weights);

// Splits per cfg's data source (synthetic generation or directory load).
DatasetSplits load_splits(const TrainConfig& cfg);

// ENet weights from the train split (uniform fallback when loss != wf).
std::vector<double> train_class_weights(const TrainConfig& cfg,
                                        const std::vector<SegmentationSample>& train_set);

}  // namespace dseg
