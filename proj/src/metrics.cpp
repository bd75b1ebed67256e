#include "transfed/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

namespace transfed::metrics {

ConfusionMatrix confusion(std::span<const int> preds, std::span<const int> labels, int n_classes) {
  if (preds.size() != labels.size())
    throw DimensionError("confusion: " + std::to_string(preds.size()) + " predictions for " +
                         std::to_string(labels.size()) + " labels");
  if (n_classes < 1) throw ConfigError("confusion: n_classes must be positive");
  ConfusionMatrix cm;
  cm.n_classes = n_classes;
  cm.counts.setZero(n_classes, n_classes);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= n_classes || preds[i] < 0 || preds[i] >= n_classes)
      throw DimensionError("confusion: pair " + std::to_string(i) + " (pred " + std::to_string(preds[i]) +
                           ", label " + std::to_string(labels[i]) + ") outside [0, " + std::to_string(n_classes) + ")");
    ++cm.counts(labels[i], preds[i]);
  }
  return cm;
}

OneVsRest one_vs_rest(const ConfusionMatrix& cm, int cls) {
  OneVsRest r;
  r.tp = cm.counts(cls, cls);
  r.fp = cm.counts.col(cls).sum() - r.tp;
  r.fn = cm.counts.row(cls).sum() - r.tp;
  r.tn = cm.total() - r.tp - r.fp - r.fn;
  return r;
}

ClassMetrics per_class(const ConfusionMatrix& cm) {
  ClassMetrics m;
  const auto total = cm.total();
  m.accuracy = total > 0 ? static_cast<double>(cm.trace()) / static_cast<double>(total) : 0.0;
  for (int c = 0; c < cm.n_classes; ++c) {
    ClassScore s;
    s.counts = one_vs_rest(cm, c);
    const auto& k = s.counts;
    s.precision_undefined = (k.tp + k.fp) == 0;
    s.recall_undefined = (k.tp + k.fn) == 0;
    s.precision = s.precision_undefined ? 0.0 : static_cast<double>(k.tp) / static_cast<double>(k.tp + k.fp);
    s.recall = s.recall_undefined ? 0.0 : static_cast<double>(k.tp) / static_cast<double>(k.tp + k.fn);
    s.f1 = (s.precision + s.recall) == 0.0 ? 0.0 : 2.0 * s.precision * s.recall / (s.precision + s.recall);
    s.accuracy = total > 0 ? static_cast<double>(k.tp + k.tn) / static_cast<double>(total) : 0.0;
    m.macro_precision += s.precision;
    m.macro_recall += s.recall;
    m.macro_f1 += s.f1;
    m.mean_one_vs_rest_accuracy += s.accuracy;
    m.classes.push_back(s);
  }
  if (cm.n_classes > 0) {
    const double n = static_cast<double>(cm.n_classes);
    m.macro_precision /= n;
    m.macro_recall /= n;
    m.macro_f1 /= n;
    m.mean_one_vs_rest_accuracy /= n;
  }
  return m;
}

namespace {

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string percent(double v) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%.2f%%", 100.0 * v);
  return buf;
}

}  // namespace

std::string render_report(const ConfusionMatrix& cm, const ClassMetrics& metrics, ReportFormat format,
                          const std::vector<std::string>& class_names) {
  auto name_of = [&](std::size_t c) {
    return c < class_names.size() ? class_names[c] : std::to_string(c);
  };
  std::ostringstream out;
  if (format == ReportFormat::csv) {
    out << "class,precision,recall,f1\n";
    for (std::size_t c = 0; c < metrics.classes.size(); ++c) {
      const auto& s = metrics.classes[c];
      out << c << ',' << format_double(s.precision) << ',' << format_double(s.recall) << ','
          << format_double(s.f1) << '\n';
    }
    out << "macro," << format_double(metrics.macro_precision) << ',' << format_double(metrics.macro_recall) << ','
        << format_double(metrics.macro_f1) << '\n';
    return out.str();
  }

  std::size_t width = std::string("Activity").size();
  for (std::size_t c = 0; c < metrics.classes.size(); ++c) width = std::max(width, name_of(c).size());
  width = std::max(width, std::string("Macro average").size());
  auto row = [&](const std::string& a, const std::string& p, const std::string& r, const std::string& f) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%-*s  %10s  %10s  %10s\n", static_cast<int>(width), a.c_str(), p.c_str(),
                  r.c_str(), f.c_str());
    out << buf;
  };
  row("Activity", "Precision", "Recall", "F1-score");
  bool flagged = false;
  for (std::size_t c = 0; c < metrics.classes.size(); ++c) {
    const auto& s = metrics.classes[c];
    std::string p = percent(s.precision), r = percent(s.recall);
    if (s.precision_undefined) p += "*";
    if (s.recall_undefined) r += "*";
    flagged = flagged || s.precision_undefined || s.recall_undefined;
    row(name_of(c), p, r, percent(s.f1));
  }
  row("Macro average", percent(metrics.macro_precision), percent(metrics.macro_recall), percent(metrics.macro_f1));
  out << "\nAccuracy: " << percent(metrics.accuracy) << " (" << cm.trace() << "/" << cm.total() << ")\n";
  if (flagged) out << "* undefined ratio (0/0) reported as 0\n";
  return out.str();
}

std::string confusion_csv(const ConfusionMatrix& cm) {
  std::ostringstream out;
  out << "true\\pred";
  for (int c = 0; c < cm.n_classes; ++c) out << ',' << c;
  out << '\n';
  for (int r = 0; r < cm.n_classes; ++r) {
    out << r;
    for (int c = 0; c < cm.n_classes; ++c) out << ',' << cm.counts(r, c);
    out << '\n';
  }
  return out.str();
}

}  // namespace transfed::metrics
