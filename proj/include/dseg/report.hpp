#pragma once

#include <string>
#include <vector>

#include "dseg/metrics.hpp"

namespace dseg {

struct RunMetrics {
  std::string label;  // e.g. "V_DeU-Net_ce"
  MetricsSummary summary;
};

// Scoreboard table: one row per category in the fixed class order, an
// (Acc, IoU) column pair per run, and average rows (macro and
// frequency-weighted mIoU, overall accuracy) at the bottom. Undefined
// per-class values render as "-".
std::string table_markdown(const std::vector<RunMetrics>& runs);
std::string table_csv(const std::vector<RunMetrics>& runs);

// One run's metrics in a machine-readable form `report` can merge later.
void write_summary_csv(const std::string& path, const RunMetrics& run);
RunMetrics read_summary_csv(const std::string& path);

// Line plot of the per-epoch series (losses on the left axis, mIoU in [0,1]
// on the right).
std::string curves_svg(const std::vector<double>& train_loss,
                       const std::vector<double>& val_loss,
                       const std::vector<double>& val_miou);

}  // namespace dseg
