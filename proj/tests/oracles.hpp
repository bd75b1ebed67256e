#pragma once

// Reference computations written directly from the definitions, shared by the
// unit tests and the acceptance runner.

#include "transfed/fedcore.hpp"
#include "transfed/metrics.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace testing {

struct OracleClass {
  std::int64_t tp = 0, fp = 0, fn = 0, tn = 0;
  double precision = 0, recall = 0, f1 = 0, accuracy = 0;
};

struct OracleMetrics {
  std::vector<OracleClass> classes;
  double accuracy = 0, macro_precision = 0, macro_recall = 0, macro_f1 = 0, mean_ovr_accuracy = 0;
};

/// One pass over (pred, label) pairs per class; no confusion matrix involved.
inline OracleMetrics brute_force_metrics(std::span<const int> preds, std::span<const int> labels, int n_classes) {
  OracleMetrics m;
  const auto n = static_cast<std::int64_t>(preds.size());
  std::int64_t correct = 0;
  for (std::size_t i = 0; i < preds.size(); ++i)
    if (preds[i] == labels[i]) ++correct;
  m.accuracy = n > 0 ? static_cast<double>(correct) / static_cast<double>(n) : 0.0;
  for (int c = 0; c < n_classes; ++c) {
    OracleClass o;
    for (std::size_t i = 0; i < preds.size(); ++i) {
      const bool p = preds[i] == c, t = labels[i] == c;
      if (p && t) ++o.tp;
      else if (p) ++o.fp;
      else if (t) ++o.fn;
      else ++o.tn;
    }
    o.precision = o.tp + o.fp > 0 ? static_cast<double>(o.tp) / static_cast<double>(o.tp + o.fp) : 0.0;
    o.recall = o.tp + o.fn > 0 ? static_cast<double>(o.tp) / static_cast<double>(o.tp + o.fn) : 0.0;
    o.f1 = o.precision + o.recall > 0 ? 2.0 * o.precision * o.recall / (o.precision + o.recall) : 0.0;
    o.accuracy = n > 0 ? static_cast<double>(o.tp + o.tn) / static_cast<double>(n) : 0.0;
    m.macro_precision += o.precision;
    m.macro_recall += o.recall;
    m.macro_f1 += o.f1;
    m.mean_ovr_accuracy += o.accuracy;
    m.classes.push_back(o);
  }
  if (n_classes > 0) {
    m.macro_precision /= n_classes;
    m.macro_recall /= n_classes;
    m.macro_f1 /= n_classes;
    m.mean_ovr_accuracy /= n_classes;
  }
  return m;
}

inline bool same_metrics(const transfed::metrics::ClassMetrics& a, const OracleMetrics& b) {
  if (a.classes.size() != b.classes.size()) return false;
  for (std::size_t c = 0; c < b.classes.size(); ++c) {
    const auto& x = a.classes[c];
    const auto& y = b.classes[c];
    if (x.counts.tp != y.tp || x.counts.fp != y.fp || x.counts.fn != y.fn || x.counts.tn != y.tn) return false;
    if (x.precision != y.precision || x.recall != y.recall || x.f1 != y.f1 || x.accuracy != y.accuracy) return false;
  }
  return a.accuracy == b.accuracy && a.macro_precision == b.macro_precision && a.macro_recall == b.macro_recall &&
         a.macro_f1 == b.macro_f1 && a.mean_one_vs_rest_accuracy == b.mean_ovr_accuracy;
}

/// sum_k (n_k / n) * p_k, accumulated scalar by scalar in client order.
inline transfed::ParameterSet weighted_mean_oracle(const std::vector<transfed::fedcore::ClientUpdate>& updates) {
  double n = 0;
  for (const auto& u : updates) n += static_cast<double>(u.n_k);
  transfed::ParameterSet out = updates.front().params;
  for (std::size_t t = 0; t < out.size(); ++t) {
    auto& v = out[t].value;
    for (Eigen::Index i = 0; i < v.size(); ++i) {
      double s = 0;
      for (const auto& u : updates) s += static_cast<double>(u.n_k) / n * u.params[t].value.data()[i];
      v.data()[i] = s;
    }
  }
  return out;
}

}  // namespace testing
