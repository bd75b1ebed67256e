#pragma once

#include "transfed/tensor.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace transfed::metrics {

/// Rows are true classes, columns predicted classes.
struct ConfusionMatrix {
  int n_classes = 0;
  Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> counts;

  std::int64_t total() const { return counts.sum(); }
  std::int64_t trace() const { return counts.trace(); }
};

ConfusionMatrix confusion(std::span<const int> preds, std::span<const int> labels, int n_classes);

/// One-vs-rest outcome counts for a single class.
struct OneVsRest {
  std::int64_t tp = 0, fp = 0, fn = 0, tn = 0;
};

OneVsRest one_vs_rest(const ConfusionMatrix& cm, int cls);

struct ClassScore {
  OneVsRest counts;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  double accuracy = 0.0;  // (TP + TN) / total
  bool precision_undefined = false;  // no predicted positives
  bool recall_undefined = false;     // no actual positives
};

struct ClassMetrics {
  std::vector<ClassScore> classes;
  double accuracy = 0.0;  // trace / total
  double macro_precision = 0.0;
  double macro_recall = 0.0;
  double macro_f1 = 0.0;
  double mean_one_vs_rest_accuracy = 0.0;
};

/// Undefined ratios (0/0) are reported as 0 and flagged.
ClassMetrics per_class(const ConfusionMatrix& cm);

enum class ReportFormat { text, csv };

/// Text: aligned Activity / Precision / Recall / F1-score table with a macro
/// row and overall accuracy. CSV: `class,precision,recall,f1` rows.
std::string render_report(const ConfusionMatrix& cm, const ClassMetrics& metrics, ReportFormat format,
                          const std::vector<std::string>& class_names = {});

/// Header `true\pred,0,...,n-1`, then one row per true class.
std::string confusion_csv(const ConfusionMatrix& cm);

}  // namespace transfed::metrics
