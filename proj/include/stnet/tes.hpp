#pragma once

// Temporal feature extraction over the per-window spatial features:
//   * a two-layer LSTM, the first layer's hidden state layer-normalized
//     before it feeds the second, run independently per electrode channel;
//   * a graph-transform branch that learns soft mixtures over the window
//     axis, composes the mixed adjacencies into a metapath operator, and
//     applies one symmetric-normalized graph convolution with it.
// Their outputs are concatenated per channel.

#include <cstddef>
#include <string>
#include <vector>

#include "stnet/autodiff.hpp"
#include "stnet/errors.hpp"
#include "stnet/init.hpp"
#include "stnet/rng.hpp"

namespace stnet {

// ---------------------------------------------------------------------------
// layer-normalized LSTM branch
// ---------------------------------------------------------------------------

template <typename T>
struct LnLstmParams {
  LstmParams<T> l1;       // FS -> FL
  Var<T> ln_gamma, ln_beta;  // layernorm over the first layer's hidden state
  LstmParams<T> l2;       // FL -> FL
};

template <typename T>
LnLstmParams<T> make_ln_lstm_params(std::size_t fs, std::size_t fl, ParamSet<T>& ps, Rng& rng,
                                    const std::string& prefix = "lstm") {
  if (fs == 0 || fl == 0) throw ConfigError("lstm feature widths must be positive");
  LnLstmParams<T> p;
  p.l1.wx = ps.create(prefix + ".1.wx", uniform_fan_init<T>({fs, 4 * fl}, fs, fl, rng));
  p.l1.wh = ps.create(prefix + ".1.wh", uniform_fan_init<T>({fl, 4 * fl}, fl, fl, rng));
  p.l1.b = ps.create(prefix + ".1.b", lstm_bias_init<T>(fl));
  p.ln_gamma = ps.create(prefix + ".ln.g", Tensor<T>::ones({fl}));
  p.ln_beta = ps.create(prefix + ".ln.b", Tensor<T>({fl}));
  p.l2.wx = ps.create(prefix + ".2.wx", uniform_fan_init<T>({fl, 4 * fl}, fl, fl, rng));
  p.l2.wh = ps.create(prefix + ".2.wh", uniform_fan_init<T>({fl, 4 * fl}, fl, fl, rng));
  p.l2.b = ps.create(prefix + ".2.b", lstm_bias_init<T>(fl));
  return p;
}

// f: [B, T, V, FS] -> [B, V, FL]. Each channel's window sequence is run
// through the stack separately; the final hidden state of the second layer
// is rectified.
template <typename T>
Var<T> layernorm_lstm(const Var<T>& f, const LnLstmParams<T>& p) {
  if (f->value.ndim() != 4)
    throw std::invalid_argument("layernorm_lstm: input must be [B, T, V, FS]");
  const std::size_t B = f->value.shape[0];
  const std::size_t T_ = f->value.shape[1];
  const std::size_t V = f->value.shape[2];
  const std::size_t FS = f->value.shape[3];
  const std::size_t FL = p.l1.wh->value.shape[0];

  // fold channels into the batch: [B, T, V, FS] -> [B*V, T, FS]
  Var<T> seq = reshape(transpose(f, {0, 2, 1, 3}), {B * V, T_, FS});
  Var<T> h1 = constant(Tensor<T>({B * V, FL}));
  Var<T> c1 = constant(Tensor<T>({B * V, FL}));
  Var<T> h2 = constant(Tensor<T>({B * V, FL}));
  Var<T> c2 = constant(Tensor<T>({B * V, FL}));
  for (std::size_t t = 0; t < T_; ++t) {
    Var<T> xt = reshape(narrow(seq, 1, t, 1), {B * V, FS});
    LstmState<T> s1 = lstm_cell(xt, h1, c1, p.l1);
    h1 = s1.h;
    c1 = s1.c;
    Var<T> normed = layernorm(h1, p.ln_gamma, p.ln_beta);
    LstmState<T> s2 = lstm_cell(normed, h2, c2, p.l2);
    h2 = s2.h;
    c2 = s2.c;
  }
  return reshape(relu(h2), {B, V, FL});
}

// ---------------------------------------------------------------------------
// graph-transform branch
// ---------------------------------------------------------------------------

template <typename T>
struct GtnParams {
  std::size_t layers = 0;     // GL; there are GL + 1 kernel banks
  std::vector<Var<T>> kern;   // each [C, T]: per-channel soft window mixtures
  Var<T> alpha;               // [GL + 1]: feature mixture weights
  Var<T> w;                   // [FS, FG], no bias
};

template <typename T>
GtnParams<T> make_gtn_params(std::size_t layers, std::size_t channels, std::size_t T_,
                             std::size_t fs, std::size_t fg, ParamSet<T>& ps, Rng& rng,
                             const std::string& prefix = "gtn") {
  if (layers == 0) throw ConfigError("graph-transform depth GL must be positive");
  if (channels == 0 || T_ == 0 || fs == 0 || fg == 0)
    throw ConfigError("graph-transform dimensions must be positive");
  GtnParams<T> p;
  p.layers = layers;
  for (std::size_t i = 0; i <= layers; ++i)
    p.kern.push_back(ps.create(prefix + ".k" + std::to_string(i),
                               uniform_fan_init<T>({channels, T_}, T_, channels, rng)));
  p.alpha = ps.create(prefix + ".alpha",
                      Tensor<T>::full({layers + 1}, T(1) / static_cast<T>(layers + 1)));
  p.w = ps.create(prefix + ".w", uniform_fan_init<T>({fs, fg}, fs, fg, rng));
  return p;
}

// Soft selection over the window axis: x [B, T, ...] with a kernel bank
// [C, T] (rows softmaxed) -> [B, C, ...]. Every output channel is a convex
// combination of the T windows.
template <typename T>
Var<T> mix_windows(const Var<T>& x, const Var<T>& kernel_bank) {
  if (x->value.ndim() < 3) throw std::invalid_argument("mix_windows: input must be [B, T, ...]");
  if (kernel_bank->value.ndim() != 2 || kernel_bank->value.shape[1] != x->value.shape[1])
    throw std::invalid_argument("mix_windows: kernel bank must be [C, T]");
  const std::size_t B = x->value.shape[0];
  const std::size_t T_ = x->value.shape[1];
  const std::size_t C = kernel_bank->value.shape[0];
  const std::size_t M = x->value.numel() / (B * T_);
  Var<T> weights = transpose(softmax_lastdim(kernel_bank), {1, 0});    // [T, C]
  Var<T> mixed = transpose(dense(transpose(reshape(x, {B, T_, M}), {0, 2, 1}), weights),
                           {0, 2, 1});                                 // [B, C, M]
  Shape os{B, C};
  for (std::size_t d = 2; d < x->value.ndim(); ++d) os.push_back(x->value.shape[d]);
  return reshape(mixed, os);
}

namespace detail {

// Rescale every row of the trailing [V, V] matrices to sum to one.
template <typename T>
Var<T> row_normalize(const Var<T>& m) {
  return matmul(diag_embed(recip_eps(reduce_sum_lastdim(m), T(1e-8))), m);
}

}  // namespace detail

// Composes the per-bank mixed adjacencies into the metapath operator:
// Mp = rownorm(Q_0 Q_1), then Mp <- rownorm(Q_l Mp) for l = 2..GL.
// adjacency: [B, T, V, V] -> [B, C, V, V].
template <typename T>
Var<T> gt_metapaths(const Var<T>& adjacency, const GtnParams<T>& p) {
  if (adjacency->value.ndim() != 4)
    throw std::invalid_argument("gt_metapaths: adjacency must be [B, T, V, V]");
  std::vector<Var<T>> q;
  for (const auto& bank : p.kern) q.push_back(mix_windows(adjacency, bank));
  Var<T> mp = detail::row_normalize(matmul(q[0], q[1]));
  for (std::size_t l = 2; l <= p.layers; ++l)
    mp = detail::row_normalize(matmul(q[l], mp));
  return mp;
}

// adjacency: [B, T, V, V], f_sps: [B, T, V, FS] -> [B, V, FG].
template <typename T>
Var<T> gtn_forward(const Var<T>& adjacency, const Var<T>& f_sps, const GtnParams<T>& p) {
  if (f_sps->value.ndim() != 4)
    throw std::invalid_argument("gtn_forward: features must be [B, T, V, FS]");
  const std::size_t B = f_sps->value.shape[0];
  const std::size_t V = f_sps->value.shape[2];
  const std::size_t FS = f_sps->value.shape[3];
  const std::size_t C = p.kern[0]->value.shape[0];

  Var<T> mp = gt_metapaths(adjacency, p);  // [B, C, V, V]

  // the same soft window mixtures, applied to the feature series, blended
  // across banks with the learned alpha weights
  Var<T> f_gt;
  for (std::size_t i = 0; i < p.kern.size(); ++i) {
    Var<T> term = mul(mix_windows(f_sps, p.kern[i]), narrow(p.alpha, 0, i, 1));
    f_gt = i == 0 ? term : add(f_gt, term);  // [B, C, V, FS]
  }

  // one graph convolution per metapath channel with the symmetric
  // normalization of Mp + I, summed over channels
  Var<T> eye = constant(Tensor<T>::eye(V));
  Var<T> acc;
  for (std::size_t c = 0; c < C; ++c) {
    Var<T> a_tilde = add(reshape(narrow(mp, 1, c, 1), {B, V, V}), eye);
    Var<T> d_inv_sqrt = diag_embed(rsqrt_eps(reduce_sum_lastdim(a_tilde), T(1e-8)));
    Var<T> norm = matmul(matmul(d_inv_sqrt, a_tilde), d_inv_sqrt);
    Var<T> fc = reshape(narrow(f_gt, 1, c, 1), {B, V, FS});
    Var<T> h = leakyrelu(dense(matmul(norm, fc), p.w), T(0.01));
    acc = c == 0 ? h : add(acc, h);
  }
  return relu(acc);
}

// ---------------------------------------------------------------------------
// branch fusion
// ---------------------------------------------------------------------------

// Concatenates the LSTM and graph-transform features per channel. Either
// branch may be absent (ablations); at least one must be present.
template <typename T>
Var<T> fuse_temporal(const Var<T>* f_lstm, const Var<T>* f_gtn) {
  if (f_lstm && f_gtn) return concat<T>({*f_lstm, *f_gtn}, 2);
  if (f_lstm) return *f_lstm;
  if (f_gtn) return *f_gtn;
  throw ConfigError("temporal stage needs at least one active branch");
}

}  // namespace stnet
