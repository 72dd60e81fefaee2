#pragma once

#include <cstdint>
#include <vector>

#include "dseg/tensor.hpp"

namespace dseg {

// Pixel confusion matrix: counts[t][p] = pixels with true class t predicted
// as p. Accumulation is order-independent and matrices merge by summation.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int num_classes = 10);

  void accumulate(const ClassMask& pred, const ClassMask& truth);
  void add_pixel(int true_class, int pred_class);
  void merge(const ConfusionMatrix& other);

  int num_classes() const { return num_classes_; }
  uint64_t at(int true_class, int pred_class) const;
  uint64_t total() const;

  bool operator==(const ConfusionMatrix& other) const = default;

 private:
  int num_classes_;
  std::vector<uint64_t> counts_;
};

// Per-class and aggregate scores. Classes that never occur (zero IoU union,
// or zero truth pixels for accuracy) are reported as NaN and excluded from
// the macro mean.
struct MetricsSummary {
  std::vector<double> iou;   // TP / (TP + FP + FN)
  std::vector<double> acc;   // recall, TP / (TP + FN)
  double macro_miou;         // mean of defined per-class IoUs
  double freq_weighted_iou;  // IoUs weighted by true-pixel share
  double overall_acc;        // trace / total
};

MetricsSummary summarize(const ConfusionMatrix& cm);

// Per-pixel argmax over the channel axis; ties go to the lowest class id.
ClassMask argmax_channels(const Tensor& logits);

}  // namespace dseg
