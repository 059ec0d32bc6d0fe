#pragma once

// Decision heads and losses: a subject-level classifier over the fused
// temporal features, and a per-window domain discriminator fed through a
// gradient-reversal layer so the shared feature extractor learns
// domain-invariant representations while the discriminator itself still
// learns to tell domains apart.

#include <cstddef>
#include <string>
#include <vector>

#include "stnet/autodiff.hpp"
#include "stnet/errors.hpp"
#include "stnet/init.hpp"
#include "stnet/modes.hpp"
#include "stnet/rng.hpp"

namespace stnet {

// ---------------------------------------------------------------------------
// subject classifier
// ---------------------------------------------------------------------------

template <typename T>
struct ClassifierParams {
  Var<T> w1, b1;  // flattened features -> hidden
  Var<T> w2, b2;  // hidden -> 2 classes
};

template <typename T>
ClassifierParams<T> make_classifier_params(std::size_t in_features, std::size_t hidden,
                                           ParamSet<T>& ps, Rng& rng,
                                           const std::string& prefix = "cls") {
  if (in_features == 0 || hidden == 0) throw ConfigError("classifier widths must be positive");
  ClassifierParams<T> p;
  p.w1 = ps.create(prefix + ".w1", uniform_fan_init<T>({in_features, hidden}, in_features, hidden, rng));
  p.b1 = ps.create(prefix + ".b1", Tensor<T>({hidden}));
  p.w2 = ps.create(prefix + ".w2", uniform_fan_init<T>({hidden, 2}, hidden, 2, rng));
  p.b2 = ps.create(prefix + ".b2", Tensor<T>({2}));
  return p;
}

// f_t: [B, V, FT] -> class probabilities [B, 2]. Dropout is active in
// training mode only and draws its mask from `rng`.
template <typename T>
Var<T> classify(const Var<T>& f_t, const ClassifierParams<T>& p, RunMode mode, Rng& rng,
                double dropout_p = 0.5) {
  if (f_t->value.ndim() != 3)
    throw std::invalid_argument("classify: input must be [B, V, FT]");
  const std::size_t B = f_t->value.shape[0];
  const std::size_t flat = f_t->value.shape[1] * f_t->value.shape[2];
  if (flat != p.w1->value.shape[0])
    throw std::invalid_argument("classify: feature width disagrees with the parameters");
  Var<T> h = relu(dense(reshape(f_t, {B, flat}), p.w1, p.b1));
  h = dropout(h, static_cast<T>(dropout_p), rng, mode == RunMode::train);
  return softmax_lastdim(dense(h, p.w2, p.b2));
}

// ---------------------------------------------------------------------------
// per-window domain discriminator
// ---------------------------------------------------------------------------

template <typename T>
struct DomainHeadParams {
  Var<T> w1, b1;             // flattened window features -> hidden
  Var<T> bn_gamma, bn_beta;  // batch normalization over all windows
  std::shared_ptr<BatchNormState<T>> bn;
  Var<T> w2, b2;             // hidden -> 2 domains
};

template <typename T>
DomainHeadParams<T> make_domain_params(std::size_t in_features, std::size_t hidden,
                                       ParamSet<T>& ps, Rng& rng,
                                       const std::string& prefix = "dom") {
  if (in_features == 0 || hidden == 0) throw ConfigError("domain head widths must be positive");
  DomainHeadParams<T> p;
  p.w1 = ps.create(prefix + ".w1", uniform_fan_init<T>({in_features, hidden}, in_features, hidden, rng));
  p.b1 = ps.create(prefix + ".b1", Tensor<T>({hidden}));
  p.bn_gamma = ps.create(prefix + ".bn.g", Tensor<T>::ones({hidden}));
  p.bn_beta = ps.create(prefix + ".bn.b", Tensor<T>({hidden}));
  p.bn = std::make_shared<BatchNormState<T>>(hidden);
  p.w2 = ps.create(prefix + ".w2", uniform_fan_init<T>({hidden, 2}, hidden, 2, rng));
  p.b2 = ps.create(prefix + ".b2", Tensor<T>({2}));
  return p;
}

// feature: [B, T, V, F] -> domain probabilities [B*T, 2], one row per
// window. Callers wanting adversarial training pass the feature through
// grl() first; the head itself is an ordinary classifier.
template <typename T>
Var<T> domain_classify(const Var<T>& feature, const DomainHeadParams<T>& p, RunMode mode) {
  if (feature->value.ndim() != 4)
    throw std::invalid_argument("domain_classify: input must be [B, T, V, F]");
  const std::size_t rows = feature->value.shape[0] * feature->value.shape[1];
  const std::size_t flat = feature->value.shape[2] * feature->value.shape[3];
  if (flat != p.w1->value.shape[0])
    throw std::invalid_argument("domain_classify: feature width disagrees with the parameters");
  Var<T> h = relu(dense(reshape(feature, {rows, flat}), p.w1, p.b1));
  h = batchnorm(h, 1, p.bn_gamma, p.bn_beta, *p.bn, use_batch_stats(mode),
                update_running_stats(mode));
  return softmax_lastdim(dense(h, p.w2, p.b2));
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

// Mean negative log-likelihood of the labeled rows. `probs` must already be
// normalized (rows from a softmax).
template <typename T>
Var<T> class_loss(const Var<T>& probs, const std::vector<std::size_t>& labels) {
  return nll_mean(probs, labels);
}

// Domain labels repeat per window: subject i contributes T consecutive rows.
inline std::vector<std::size_t> repeat_per_window(const std::vector<std::size_t>& per_subject,
                                                  std::size_t T_) {
  std::vector<std::size_t> out;
  out.reserve(per_subject.size() * T_);
  for (std::size_t d : per_subject)
    for (std::size_t t = 0; t < T_; ++t) out.push_back(d);
  return out;
}

template <typename T>
Var<T> domain_loss(const Var<T>& probs, const std::vector<std::size_t>& per_subject,
                   std::size_t T_) {
  return nll_mean(probs, repeat_per_window(per_subject, T_));
}

}  // namespace stnet
