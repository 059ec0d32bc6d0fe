#include "stnet/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "stnet/errors.hpp"

namespace stnet {

ConfusionCounts confusion_from(const std::vector<Label>& truth, const std::vector<Label>& pred) {
  if (truth.size() != pred.size())
    throw std::invalid_argument("confusion_from: truth/prediction size mismatch");
  ConfusionCounts c;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const bool t = truth[i] == Label::depressed;
    const bool p = pred[i] == Label::depressed;
    if (t && p)
      ++c.tp;
    else if (!t && !p)
      ++c.tn;
    else if (!t && p)
      ++c.fp;
    else
      ++c.fn;
  }
  return c;
}

namespace {

double ratio_or_zero(std::size_t num, std::size_t den, const char* name, MetricBlock& block) {
  if (den == 0) {
    block.degenerate.push_back(name);
    return 0.0;
  }
  return static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

MetricBlock basic_metrics(const ConfusionCounts& c) {
  MetricBlock m;
  m.acc = ratio_or_zero(c.tp + c.tn, c.total(), "acc", m);
  m.pre = ratio_or_zero(c.tp, c.tp + c.fp, "pre", m);
  m.rec = ratio_or_zero(c.tp, c.tp + c.fn, "rec", m);
  if (m.pre + m.rec == 0.0) {
    m.degenerate.push_back("f1");
    m.f1 = 0.0;
  } else {
    m.f1 = 2.0 * m.pre * m.rec / (m.pre + m.rec);
  }
  m.sp = ratio_or_zero(c.tn, c.tn + c.fp, "sp", m);
  m.ji = ratio_or_zero(c.tp, c.tp + c.fp + c.fn, "ji", m);
  return m;
}

AucResult roc_auc(const std::vector<double>& scores, const std::vector<Label>& truth) {
  if (scores.size() != truth.size())
    throw std::invalid_argument("roc_auc: score/truth size mismatch");
  std::size_t pos = 0, neg = 0;
  for (Label l : truth) (l == Label::depressed ? pos : neg)++;
  if (pos == 0 || neg == 0) return {0.0, true};

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  // Sweep score groups from the highest threshold down; each group of tied
  // scores contributes one trapezoid in (FP, TP) count units.
  double area2 = 0.0;  // twice the area, in count units
  std::size_t tp = 0, fp = 0, i = 0;
  while (i < order.size()) {
    std::size_t j = i, tp_inc = 0, fp_inc = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      (truth[order[j]] == Label::depressed ? tp_inc : fp_inc)++;
      ++j;
    }
    area2 += static_cast<double>(fp_inc) * static_cast<double>(tp + tp + tp_inc);
    tp += tp_inc;
    fp += fp_inc;
    i = j;
  }
  return {area2 / (2.0 * static_cast<double>(pos) * static_cast<double>(neg)), false};
}

double pam(double acc, double rec, double sp, double ji, double f1, double auc) {
  for (double v : {acc, rec, sp, ji, f1, auc})
    if (v < 0.0 || v > 1.0) throw std::invalid_argument("pam: inputs must lie in [0, 1]");
  constexpr double kUnitHexagonArea = 2.59807;
  const double cross = acc * rec + rec * sp + sp * ji + ji * f1 + f1 * auc + auc * acc;
  return std::sqrt(3.0) / 4.0 * cross / kUnitHexagonArea;
}

MetricBlock compute_metrics(const std::vector<Label>& truth, const std::vector<Label>& pred,
                            const std::vector<double>& scores) {
  MetricBlock m = basic_metrics(confusion_from(truth, pred));
  const AucResult auc = roc_auc(scores, truth);
  m.auc = auc.value;
  if (auc.degenerate) m.degenerate.push_back("auc");
  m.pam = pam(m.acc, m.rec, m.sp, m.ji, m.f1, m.auc);
  return m;
}

}  // namespace stnet
