#pragma once

// Binary classification metrics. The positive class is "depressed". Any
// metric whose denominator is zero is reported as 0 and listed in the
// degenerate set rather than poisoning downstream aggregates.

#include <cstddef>
#include <string>
#include <vector>

#include "stnet/datapipe.hpp"

namespace stnet {

struct ConfusionCounts {
  std::size_t tp = 0, tn = 0, fp = 0, fn = 0;
  std::size_t total() const { return tp + tn + fp + fn; }
};

struct MetricBlock {
  double acc = 0, pre = 0, rec = 0, f1 = 0, sp = 0, ji = 0, auc = 0, pam = 0;
  std::vector<std::string> degenerate;
};

ConfusionCounts confusion_from(const std::vector<Label>& truth, const std::vector<Label>& pred);

// acc/pre/rec/f1/sp/ji from counts; auc and pam are left at zero.
MetricBlock basic_metrics(const ConfusionCounts& c);

struct AucResult {
  double value = 0.0;
  bool degenerate = false;  // single-class truth
};

// Trapezoidal area under the ROC curve swept over all score thresholds;
// equal to the Mann-Whitney statistic, ties counted as half.
AucResult roc_auc(const std::vector<double>& scores, const std::vector<Label>& truth);

// Polygon area metric: hexagon with axes (acc, rec, sp, ji, f1, auc) spaced
// 60 degrees apart, normalized by the unit hexagon area taken as 2.59807.
double pam(double acc, double rec, double sp, double ji, double f1, double auc);

// Full block: confusion metrics plus AUC from scores plus PAM.
MetricBlock compute_metrics(const std::vector<Label>& truth, const std::vector<Label>& pred,
                            const std::vector<double>& scores);

}  // namespace stnet
