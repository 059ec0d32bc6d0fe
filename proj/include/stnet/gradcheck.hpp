#pragma once

// Central-difference gradient checking. The analytic side comes from one
// backward pass; the numeric side re-evaluates the loss at p +/- epsilon for
// every parameter element, so the two paths share no derivative code.

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "stnet/autodiff.hpp"

namespace stnet {

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_err = 0.0;
  std::string worst_name;

  bool ok(double tol = 1e-4) const { return max_rel_err <= tol; }
};

// |analytic - numeric| relative to max(|analytic|, |numeric|), floored at
// 1e-4 so negligible gradients are compared absolutely instead of amplifying
// finite-difference noise.
inline double gradcheck_rel_err(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-4});
  return std::abs(analytic - numeric) / denom;
}

// build_loss must rebuild the graph from the current parameter values and
// return a scalar; it must be deterministic (no dropout, no running-stat
// updates) so repeated evaluations see identical losses.
template <typename T>
GradCheckReport check_gradients(const std::function<Var<T>()>& build_loss, ParamSet<T>& params,
                                T epsilon = T(1e-5)) {
  params.zero_grads();
  {
    auto loss = build_loss();
    backward(loss);
  }
  std::vector<Tensor<T>> analytic;
  analytic.reserve(params.items().size());
  for (const auto& p : params.items()) {
    if (p->grad.data.size() == p->value.data.size())
      analytic.push_back(p->grad);
    else
      analytic.push_back(Tensor<T>(p->value.shape));
  }

  GradCheckReport report;
  for (std::size_t pi = 0; pi < params.items().size(); ++pi) {
    auto& p = params.items()[pi];
    GradCheckEntry entry;
    entry.name = p->name;
    for (std::size_t e = 0; e < p->value.numel(); ++e) {
      const T orig = p->value.data[e];
      p->value.data[e] = orig + epsilon;
      const double fp = static_cast<double>(value_of(build_loss()));
      p->value.data[e] = orig - epsilon;
      const double fm = static_cast<double>(value_of(build_loss()));
      p->value.data[e] = orig;
      const double numeric = (fp - fm) / (2.0 * static_cast<double>(epsilon));
      const double ana = static_cast<double>(analytic[pi].data[e]);
      const double err = gradcheck_rel_err(ana, numeric);
      if (err > entry.max_rel_err) {
        entry.max_rel_err = err;
        entry.worst_index = e;
        entry.analytic = ana;
        entry.numeric = numeric;
      }
    }
    if (entry.max_rel_err > report.max_rel_err) {
      report.max_rel_err = entry.max_rel_err;
      report.worst_name = entry.name;
    }
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace stnet
