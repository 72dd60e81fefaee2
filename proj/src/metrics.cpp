#include "dseg/metrics.hpp"

#include <cmath>
#include <limits>

#include "dseg/errors.hpp"

namespace dseg {

ConfusionMatrix::ConfusionMatrix(int num_classes)
    : num_classes_(num_classes),
      counts_(size_t(num_classes) * size_t(num_classes), 0) {
  check_config(num_classes > 0, "confusion matrix needs at least one class");
}

void ConfusionMatrix::add_pixel(int true_class, int pred_class) {
  if (true_class < 0 || true_class >= num_classes_ || pred_class < 0 ||
      pred_class >= num_classes_)
    throw LabelError("class id out of range for confusion matrix");
  ++counts_[size_t(true_class) * num_classes_ + pred_class];
}

void ConfusionMatrix::accumulate(const ClassMask& pred, const ClassMask& truth) {
  check_dim(pred.batch == truth.batch && pred.h == truth.h && pred.w == truth.w,
            "prediction/truth mask shapes differ");
  for (size_t i = 0; i < truth.v.size(); ++i) add_pixel(truth.v[i], pred.v[i]);
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  check_dim(other.num_classes_ == num_classes_,
            "cannot merge confusion matrices of different sizes");
  for (size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

uint64_t ConfusionMatrix::at(int true_class, int pred_class) const {
  return counts_[size_t(true_class) * num_classes_ + pred_class];
}

uint64_t ConfusionMatrix::total() const {
  uint64_t t = 0;
  for (uint64_t c : counts_) t += c;
  return t;
}

MetricsSummary summarize(const ConfusionMatrix& cm) {
  int n = cm.num_classes();
  uint64_t total = cm.total();
  if (total == 0) throw StateError("metrics are undefined on an empty confusion matrix");

  const double nan = std::numeric_limits<double>::quiet_NaN();
  MetricsSummary s;
  s.iou.assign(size_t(n), nan);
  s.acc.assign(size_t(n), nan);

  uint64_t trace = 0;
  double iou_sum = 0, fw_sum = 0;
  int iou_defined = 0;
  for (int c = 0; c < n; ++c) {
    uint64_t tp = cm.at(c, c);
    uint64_t row = 0, col = 0;
    for (int o = 0; o < n; ++o) {
      row += cm.at(c, o);
      col += cm.at(o, c);
    }
    trace += tp;
    uint64_t uni = row + col - tp;
    if (uni > 0) {
      double iou = double(tp) / double(uni);
      s.iou[size_t(c)] = iou;
      iou_sum += iou;
      ++iou_defined;
      fw_sum += (double(row) / double(total)) * iou;
    }
    if (row > 0) s.acc[size_t(c)] = double(tp) / double(row);
  }
  s.macro_miou = iou_defined > 0 ? iou_sum / iou_defined : nan;
  s.freq_weighted_iou = fw_sum;
  s.overall_acc = double(trace) / double(total);
  return s;
}

ClassMask argmax_channels(const Tensor& logits) {
  check_dim(logits.rank() == 4, "argmax expects [B,C,H,W] logits");
  int b = logits.dim(0), c = logits.dim(1), h = logits.dim(2), w = logits.dim(3);
  size_t plane = size_t(h) * w;
  ClassMask m(b, h, w);
  for (int bi = 0; bi < b; ++bi) {
    const float* base = logits.data.data() + size_t(bi) * c * plane;
    for (size_t p = 0; p < plane; ++p) {
      int best = 0;
      float bv = base[p];
      for (int ci = 1; ci < c; ++ci) {
        float v = base[size_t(ci) * plane + p];
        if (v > bv) {
          bv = v;
          best = ci;
        }
      }
      m.v[size_t(bi) * plane + p] = uint8_t(best);
    }
  }
  return m;
}

}  // namespace dseg
