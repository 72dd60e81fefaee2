#include "dseg/report.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

#include "dseg/data.hpp"
#include "dseg/errors.hpp"

namespace dseg {

namespace {

std::string fmt(double v, int prec = 2) {
  if (std::isnan(v)) return "-";
  std::ostringstream os;
  os << std::fixed << std::setprecision(prec) << v;
  return os.str();
}

}  // namespace

std::string table_markdown(const std::vector<RunMetrics>& runs) {
  check_config(!runs.empty(), "report needs at least one run");
  std::ostringstream os;
  os << "| Category |";
  for (const RunMetrics& r : runs) os << ' ' << r.label << " Acc | " << r.label << " IoU |";
  os << "\n|---|";
  for (size_t i = 0; i < runs.size(); ++i) os << "---|---|";
  os << '\n';
  const auto& names = ClassMap::display_names();
  for (int c = 0; c < ClassMap::kNumClasses; ++c) {
    os << "| " << names[size_t(c)] << " |";
    for (const RunMetrics& r : runs)
      os << ' ' << fmt(r.summary.acc[size_t(c)]) << " | "
         << fmt(r.summary.iou[size_t(c)]) << " |";
    os << '\n';
  }
  os << "| Average mIoU (macro) |";
  for (const RunMetrics& r : runs) os << "  | " << fmt(r.summary.macro_miou) << " |";
  os << '\n';
  os << "| Average mIoU (freq-weighted) |";
  for (const RunMetrics& r : runs)
    os << "  | " << fmt(r.summary.freq_weighted_iou) << " |";
  os << '\n';
  os << "| Average Accuracy |";
  for (const RunMetrics& r : runs) os << ' ' << fmt(r.summary.overall_acc) << " |  |";
  os << '\n';
  return os.str();
}

std::string table_csv(const std::vector<RunMetrics>& runs) {
  check_config(!runs.empty(), "report needs at least one run");
  std::ostringstream os;
  os << "category";
  for (const RunMetrics& r : runs) os << ',' << r.label << "_acc," << r.label << "_iou";
  os << '\n';
  const auto& names = ClassMap::display_names();
  for (int c = 0; c < ClassMap::kNumClasses; ++c) {
    os << names[size_t(c)];
    for (const RunMetrics& r : runs)
      os << ',' << fmt(r.summary.acc[size_t(c)], 6) << ','
         << fmt(r.summary.iou[size_t(c)], 6);
    os << '\n';
  }
  os << "Average mIoU (macro)";
  for (const RunMetrics& r : runs) os << ",," << fmt(r.summary.macro_miou, 6);
  os << '\n';
  os << "Average mIoU (freq-weighted)";
  for (const RunMetrics& r : runs) os << ",," << fmt(r.summary.freq_weighted_iou, 6);
  os << '\n';
  os << "Average Accuracy";
  for (const RunMetrics& r : runs) os << ',' << fmt(r.summary.overall_acc, 6) << ',';
  os << '\n';
  return os.str();
}

void write_summary_csv(const std::string& path, const RunMetrics& run) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path);
  os << "label," << run.label << '\n';
  os << "class,acc,iou\n";
  const auto& names = ClassMap::display_names();
  for (int c = 0; c < ClassMap::kNumClasses; ++c)
    os << names[size_t(c)] << ',' << fmt(run.summary.acc[size_t(c)], 6) << ','
       << fmt(run.summary.iou[size_t(c)], 6) << '\n';
  os << "macro_miou," << fmt(run.summary.macro_miou, 6) << '\n';
  os << "freq_weighted_iou," << fmt(run.summary.freq_weighted_iou, 6) << '\n';
  os << "overall_acc," << fmt(run.summary.overall_acc, 6) << '\n';
}

RunMetrics read_summary_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path);
  auto next_line = [&] {
    std::string line;
    if (!std::getline(is, line)) throw IoError("truncated summary: " + path);
    return line;
  };
  auto cell = [](const std::string& line, size_t idx) {
    std::stringstream ss(line);
    std::string part;
    for (size_t i = 0; i <= idx; ++i)
      if (!std::getline(ss, part, ',')) throw IoError("malformed summary row: " + line);
    return part;
  };
  auto value = [](const std::string& s) {
    return s == "-" ? std::numeric_limits<double>::quiet_NaN() : std::stod(s);
  };

  RunMetrics run;
  std::string header = next_line();
  check_config(header.rfind("label,", 0) == 0, "summary must start with a label row");
  run.label = header.substr(6);
  next_line();  // column header
  run.summary.acc.resize(ClassMap::kNumClasses);
  run.summary.iou.resize(ClassMap::kNumClasses);
  for (int c = 0; c < ClassMap::kNumClasses; ++c) {
    std::string line = next_line();
    run.summary.acc[size_t(c)] = value(cell(line, 1));
    run.summary.iou[size_t(c)] = value(cell(line, 2));
  }
  run.summary.macro_miou = value(cell(next_line(), 1));
  run.summary.freq_weighted_iou = value(cell(next_line(), 1));
  run.summary.overall_acc = value(cell(next_line(), 1));
  return run;
}

std::string curves_svg(const std::vector<double>& train_loss,
                       const std::vector<double>& val_loss,
                       const std::vector<double>& val_miou) {
  const int W = 720, H = 360, ml = 50, mr = 50, mt = 20, mb = 35;
  const int pw = W - ml - mr, ph = H - mt - mb;
  size_t n = train_loss.size();
  double loss_max = 1e-9;
  for (double v : train_loss) loss_max = std::max(loss_max, v);
  for (double v : val_loss) loss_max = std::max(loss_max, v);

  auto polyline = [&](const std::vector<double>& ys, double ymax,
                      const char* color) {
    std::ostringstream os;
    os << "<polyline fill=\"none\" stroke=\"" << color
       << "\" stroke-width=\"1.5\" points=\"";
    for (size_t i = 0; i < ys.size(); ++i) {
      double x = ml + (n > 1 ? double(i) / double(n - 1) : 0.5) * pw;
      double y = mt + ph - std::clamp(ys[i] / ymax, 0.0, 1.0) * ph;
      os << x << ',' << y << ' ';
    }
    os << "\"/>";
    return os.str();
  };

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W
     << "\" height=\"" << H << "\" viewBox=\"0 0 " << W << ' ' << H << "\">\n";
  os << "<rect width=\"" << W << "\" height=\"" << H << "\" fill=\"white\"/>\n";
  os << "<rect x=\"" << ml << "\" y=\"" << mt << "\" width=\"" << pw
     << "\" height=\"" << ph << "\" fill=\"none\" stroke=\"#ccc\"/>\n";
  if (n > 0) {
    os << polyline(train_loss, loss_max, "#d33") << '\n';
    os << polyline(val_loss, loss_max, "#36c") << '\n';
    os << polyline(val_miou, 1.0, "#291") << '\n';
  }
  os << "<text x=\"" << ml << "\" y=\"" << H - 10
     << "\" font-size=\"12\" fill=\"#d33\">train loss</text>\n";
  os << "<text x=\"" << ml + 90 << "\" y=\"" << H - 10
     << "\" font-size=\"12\" fill=\"#36c\">val loss (left: 0.." << fmt(loss_max)
     << ")</text>\n";
  os << "<text x=\"" << ml + 260 << "\" y=\"" << H - 10
     << "\" font-size=\"12\" fill=\"#291\">val mIoU (right: 0..1)</text>\n";
  os << "<text x=\"" << W / 2 << "\" y=\"" << H - 10
     << "\" font-size=\"12\" fill=\"#444\" text-anchor=\"start\">epoch 0.."
     << (n > 0 ? n - 1 : 0) << "</text>\n";
  os << "</svg>\n";
  return os.str();
}

}  // namespace dseg
