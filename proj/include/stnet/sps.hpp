#pragma once

// Spatial feature extraction: a learned functional-connectivity graph from
// multi-head attention over per-channel features, an optional multiplicative
// prior mask built from electrode adjacency, and a Chebyshev-polynomial
// graph convolution over the fused graph.

#include <cstddef>
#include <string>
#include <vector>

#include "stnet/autodiff.hpp"
#include "stnet/errors.hpp"
#include "stnet/init.hpp"
#include "stnet/rng.hpp"

namespace stnet {

// ---------------------------------------------------------------------------
// attention-derived connectivity
// ---------------------------------------------------------------------------

template <typename T>
struct AttentionParams {
  std::vector<Var<T>> phi;  // per head: [FE, FE], no bias (it cancels in differences)
  std::vector<Var<T>> a;    // per head: [FE, 1]
};

template <typename T>
AttentionParams<T> make_attention_params(std::size_t heads, std::size_t fe, ParamSet<T>& ps,
                                         Rng& rng, const std::string& prefix = "att") {
  if (heads == 0) throw ConfigError("attention needs at least one head");
  if (fe == 0) throw ConfigError("attention feature width must be positive");
  AttentionParams<T> p;
  for (std::size_t h = 0; h < heads; ++h) {
    const std::string base = prefix + ".h" + std::to_string(h);
    p.phi.push_back(ps.create(base + ".phi", uniform_fan_init<T>({fe, fe}, fe, fe, rng)));
    p.a.push_back(ps.create(base + ".a", uniform_fan_init<T>({fe, 1}, fe, 1, rng)));
  }
  return p;
}

// f: [B, T, V, FE] -> attention adjacency [B, T, V, V], the mean over heads
// of row-softmaxed scores LeakyReLU(|phi f_i - phi f_j| . a).
template <typename T>
Var<T> attention_connectivity(const Var<T>& f, const AttentionParams<T>& p) {
  if (f->value.ndim() != 4)
    throw std::invalid_argument("attention_connectivity: input must be [B, T, V, FE]");
  const std::size_t B = f->value.shape[0];
  const std::size_t T_ = f->value.shape[1];
  const std::size_t V = f->value.shape[2];
  Var<T> acc;
  for (std::size_t h = 0; h < p.phi.size(); ++h) {
    Var<T> proj = dense(f, p.phi[h]);                       // [B, T, V, FE]
    Var<T> diff = pairwise_abs_diff(proj);                  // [B, T, V, V, FE]
    Var<T> score = leakyrelu(dense(diff, p.a[h]), T(0.2));  // [B, T, V, V, 1]
    Var<T> attn = softmax_lastdim(reshape(score, {B, T_, V, V}));
    acc = h == 0 ? attn : add(acc, attn);
  }
  return p.phi.size() == 1 ? acc : scale(acc, T(1) / static_cast<T>(p.phi.size()));
}

// ---------------------------------------------------------------------------
// prior mask from electrode adjacency
// ---------------------------------------------------------------------------

// Binary adjacency [V, V] -> multiplicative mask: connected pairs are
// amplified to 1 + lambda, unconnected pairs damped to 1 - lambda.
// lambda = 0 leaves the attention graph untouched.
template <typename T>
Tensor<T> lambda_mask(const Tensor<T>& binary_adjacency, double lambda) {
  if (lambda < 0.0 || lambda > 1.0) throw ConfigError("mask strength lambda must lie in [0, 1]");
  if (binary_adjacency.ndim() != 2 ||
      binary_adjacency.shape[0] != binary_adjacency.shape[1])
    throw std::invalid_argument("lambda_mask: adjacency must be square");
  Tensor<T> mask(binary_adjacency.shape);
  for (std::size_t i = 0; i < mask.numel(); ++i) {
    const T v = binary_adjacency.data[i];
    if (v != T(0) && v != T(1))
      throw DataError("lambda_mask: adjacency entries must be 0 or 1");
    mask.data[i] = v == T(1) ? T(1.0 + lambda) : T(1.0 - lambda);
  }
  return mask;
}

// Element-wise fusion of attention connectivity [B, T, V, V] with the mask
// [V, V], broadcast over batch and window.
template <typename T>
Var<T> fuse_adjacency(const Var<T>& attention, const Tensor<T>& mask) {
  return mul(attention, constant(mask));
}

// ---------------------------------------------------------------------------
// Chebyshev graph convolution
// ---------------------------------------------------------------------------

template <typename T>
struct ChebParams {
  std::vector<Var<T>> theta;  // K weight matrices [FE, FS]
  Var<T> bias;                // [FS]
};

template <typename T>
ChebParams<T> make_cheb_params(std::size_t K, std::size_t fe, std::size_t fs, ParamSet<T>& ps,
                               Rng& rng, const std::string& prefix = "cheb") {
  if (K == 0) throw ConfigError("polynomial order K must be positive");
  if (fe == 0 || fs == 0) throw ConfigError("graph convolution widths must be positive");
  ChebParams<T> p;
  for (std::size_t k = 0; k < K; ++k)
    p.theta.push_back(
        ps.create(prefix + ".t" + std::to_string(k), uniform_fan_init<T>({fe, fs}, fe, fs, rng)));
  p.bias = ps.create(prefix + ".b", Tensor<T>({fs}));
  return p;
}

// f: [B, T, V, FE], adjacency: [B, T, V, V] ->  [B, T, V, FS].
// Uses the scaled graph Laplacian L - I (largest eigenvalue taken as 2) and
// the polynomial recurrence S_0 = f, S_1 = (L - I) f,
// S_k = 2 (L - I) S_{k-1} - S_{k-2}; the output is sum_k S_k theta_k + bias.
template <typename T>
Var<T> cheb_gcn(const Var<T>& f, const Var<T>& adjacency, const ChebParams<T>& p) {
  if (f->value.ndim() != 4 || adjacency->value.ndim() != 4)
    throw std::invalid_argument("cheb_gcn: expected [B, T, V, FE] and [B, T, V, V]");
  const std::size_t V = f->value.shape[2];
  if (adjacency->value.shape[2] != V || adjacency->value.shape[3] != V)
    throw std::invalid_argument("cheb_gcn: adjacency does not match channel count");

  // L = D - A with D the diagonal of row sums; scaled form subtracts I.
  Var<T> degree = diag_embed(reduce_sum_lastdim(adjacency));  // [B, T, V, V]
  Var<T> lap = sub(degree, adjacency);
  Var<T> scaled = sub(lap, constant(Tensor<T>::eye(V)));

  Var<T> prev2 = f;                                  // S_0
  Var<T> out = dense(prev2, p.theta[0], p.bias);
  if (p.theta.size() > 1) {
    Var<T> prev1 = matmul(scaled, f);                // S_1
    out = add(out, dense(prev1, p.theta[1]));
    for (std::size_t k = 2; k < p.theta.size(); ++k) {
      Var<T> next = sub(scale(matmul(scaled, prev1), T(2)), prev2);
      out = add(out, dense(next, p.theta[k]));
      prev2 = prev1;
      prev1 = next;
    }
  }
  return out;
}

}  // namespace stnet
