#include <cstdio>
#include <sstream>

#include "hydet/metrics.hpp"

namespace hydet {

namespace {

std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

std::string class_name(const std::vector<std::string>& names, int c) {
  if (c >= 0 && static_cast<std::size_t>(c) < names.size() && !names[c].empty()) return names[c];
  return "class_" + std::to_string(c);
}

}  // namespace

std::string EvalReport::csv_header() {
  return "Model,Size,Param(M),FLOPs(B),Precision,Recall,mAP50,mAP50/95,Inference time(ms)";
}

std::string EvalReport::csv_row(const std::string& model_name) const {
  std::ostringstream os;
  os << model_name << ',' << image_size << ',' << fmt("%.3f", params / 1e6) << ',' << fmt("%.2f", flops / 1e9)
     << ',' << fmt("%.4f", pr.precision) << ',' << fmt("%.4f", pr.recall) << ',' << fmt("%.4f", map50) << ','
     << fmt("%.4f", map50_95) << ',' << fmt("%.2f", latency.mean_ms);
  return os.str();
}

std::string EvalReport::text_table(const std::vector<std::string>& class_names) const {
  std::ostringstream os;
  char line[256];
  std::snprintf(line, sizeof line, "%6s %9s %9s %10s %8s %8s %9s %14s\n", "Size", "Param(M)", "FLOPs(B)",
                "Precision", "Recall", "mAP50", "mAP50/95", "Inference(ms)");
  os << line;
  std::snprintf(line, sizeof line, "%6d %9.3f %9.2f %10.3f %8.3f %8.3f %9.3f %14.2f\n", image_size, params / 1e6,
                flops / 1e9, pr.precision, pr.recall, map50, map50_95, latency.mean_ms);
  os << line;
  if (!latency.hardware.empty()) os << "hardware: " << latency.hardware << '\n';
  os << "operating point: conf " << fmt("%.4f", pr.conf_threshold) << (pr.no_detections ? " (no detections)" : "")
     << '\n';
  os << "\nper-class AP (classes with ground truth):\n";
  for (int c = 0; c < num_classes; ++c) {
    if (gt_count[c] == 0) continue;
    double acc = 0.0;
    for (double v : ap[c]) acc += v;
    std::snprintf(line, sizeof line, "  %-24s gt %6lld  AP50 %.3f  AP50-95 %.3f\n",
                  class_name(class_names, c).c_str(), static_cast<long long>(gt_count[c]), ap[c][0],
                  acc / static_cast<double>(ap[c].size()));
    os << line;
  }
  return os.str();
}

std::string EvalReport::confusion_csv(const std::vector<std::string>& class_names) const {
  std::ostringstream os;
  os << "gt\\pred";
  for (int c = 0; c <= num_classes; ++c) os << ',' << (c == num_classes ? "background" : class_name(class_names, c));
  os << '\n';
  for (int r = 0; r <= num_classes; ++r) {
    os << (r == num_classes ? "background" : class_name(class_names, r));
    for (int c = 0; c <= num_classes; ++c) os << ',' << confusion[r][c];
    os << '\n';
  }
  return os.str();
}

}  // namespace hydet
