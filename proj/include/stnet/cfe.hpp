#pragma once

// Common feature extraction: a bank of depthwise convolution pipelines at
// several temporal scales, plus small dense encoders for the stitching
// segments between consecutive windows. Every electrode channel is filtered
// independently; nothing here mixes information across channels.

#include <algorithm>
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
// configuration
// ---------------------------------------------------------------------------

struct ConvStageSpec {
  std::size_t ks = 1;      // kernel size
  std::size_t stride = 1;
  Padding pad = Padding::valid;
  bool bn_relu = false;    // batchnorm + relu after the convolution
  std::size_t pool = 0;    // max-pool window, 0 = no pooling
};

struct DwcsConfig {
  std::size_t kd = 3;  // per-channel filter multiplier of the first stage
  std::vector<std::vector<ConvStageSpec>> pipelines;

  // The reference filter bank: three pipelines of four stages whose first
  // kernels span coarse (64), medium (32) and fine (16) temporal extents.
  static DwcsConfig table_default() {
    DwcsConfig cfg;
    cfg.kd = 3;
    cfg.pipelines = {
        {{64, 8, Padding::valid, true, 2},
         {16, 2, Padding::valid, true, 4},
         {4, 1, Padding::same, false, 0},
         {8, 1, Padding::same, true, 4}},
        {{32, 4, Padding::valid, true, 2},
         {8, 2, Padding::valid, true, 4},
         {4, 1, Padding::same, false, 0},
         {8, 1, Padding::same, true, 4}},
        {{16, 2, Padding::valid, true, 2},
         {4, 2, Padding::valid, true, 4},
         {4, 1, Padding::same, false, 0},
         {8, 1, Padding::same, true, 4}},
    };
    return cfg;
  }
};

struct FeatureDims {
  std::vector<std::size_t> pipeline_len;  // output length of each pipeline
  std::size_t depth_len = 0;              // kd * sum(pipeline_len)
};

// Walks the length arithmetic of every pipeline without building a graph.
// Throws ConfigError with the offending pipeline/stage when the signal
// becomes too short for a kernel or pooling window.
inline FeatureDims feature_dims(const DwcsConfig& cfg, std::size_t len) {
  if (cfg.kd == 0) throw ConfigError("depthwise multiplier kd must be positive");
  if (cfg.pipelines.empty()) throw ConfigError("filter bank needs at least one pipeline");
  if (len == 0) throw ConfigError("window length must be positive");
  FeatureDims dims;
  for (std::size_t p = 0; p < cfg.pipelines.size(); ++p) {
    if (cfg.pipelines[p].empty())
      throw ConfigError("pipeline " + std::to_string(p + 1) + " has no stages");
    std::size_t L = len;
    for (std::size_t s = 0; s < cfg.pipelines[p].size(); ++s) {
      const ConvStageSpec& st = cfg.pipelines[p][s];
      const std::string where =
          "pipeline " + std::to_string(p + 1) + " stage " + std::to_string(s + 1);
      if (st.ks == 0 || st.stride == 0)
        throw ConfigError(where + ": kernel size and stride must be positive");
      if (st.pad == Padding::valid) {
        if (st.ks > L)
          throw ConfigError(where + ": kernel " + std::to_string(st.ks) +
                            " exceeds signal length " + std::to_string(L));
        L = (L - st.ks) / st.stride + 1;
      } else {
        L = (L + st.stride - 1) / st.stride;
      }
      if (st.pool) {
        if (st.pool > L)
          throw ConfigError(where + ": pooling window " + std::to_string(st.pool) +
                            " exceeds signal length " + std::to_string(L));
        L = L / st.pool;
      }
      if (L == 0) throw ConfigError(where + ": signal length collapsed to zero");
    }
    dims.pipeline_len.push_back(L);
    dims.depth_len += cfg.kd * L;
  }
  return dims;
}

// ---------------------------------------------------------------------------
// depthwise pipeline parameters
// ---------------------------------------------------------------------------

template <typename T>
struct DwcsStageParams {
  Var<T> w;  // depthwise kernels [C_in, mult, ks]
  Var<T> b;  // [C_in * mult]
  Var<T> bn_gamma, bn_beta;  // only when the stage normalizes
  std::shared_ptr<BatchNormState<T>> bn;
};

template <typename T>
struct DwcsParams {
  std::vector<std::vector<DwcsStageParams<T>>> pipelines;
};

template <typename T>
DwcsParams<T> make_dwcs_params(const DwcsConfig& cfg, std::size_t n_channels, ParamSet<T>& ps,
                               Rng& rng, const std::string& prefix = "dwcs") {
  if (n_channels == 0) throw ConfigError("filter bank needs at least one channel");
  DwcsParams<T> params;
  for (std::size_t p = 0; p < cfg.pipelines.size(); ++p) {
    std::vector<DwcsStageParams<T>> stages;
    std::size_t c_in = n_channels;
    for (std::size_t s = 0; s < cfg.pipelines[p].size(); ++s) {
      const ConvStageSpec& st = cfg.pipelines[p][s];
      const std::size_t mult = s == 0 ? cfg.kd : 1;
      const std::size_t c_out = c_in * mult;
      const std::string base =
          prefix + ".p" + std::to_string(p) + ".s" + std::to_string(s);
      DwcsStageParams<T> sp;
      sp.w = ps.create(base + ".w",
                       uniform_fan_init<T>({c_in, mult, st.ks}, st.ks, mult * st.ks, rng));
      sp.b = ps.create(base + ".b", Tensor<T>({c_out}));
      if (st.bn_relu) {
        sp.bn_gamma = ps.create(base + ".bn_g", Tensor<T>::ones({c_out}));
        sp.bn_beta = ps.create(base + ".bn_b", Tensor<T>({c_out}));
        sp.bn = std::make_shared<BatchNormState<T>>(c_out);
      }
      stages.push_back(std::move(sp));
      c_in = c_out;
    }
    params.pipelines.push_back(std::move(stages));
  }
  return params;
}

// x: [N, V, len] (any leading batch folded into N). Returns [N, V, depth_len]
// with each channel's multi-scale features laid out contiguously:
// all kd * pipeline_len[0] values of the first scale, then the second, ...
template <typename T>
Var<T> dwcs_forward(const Var<T>& x, const DwcsConfig& cfg, const DwcsParams<T>& params,
                    RunMode mode) {
  if (x->value.ndim() != 3) throw std::invalid_argument("dwcs_forward: input must be [N, V, len]");
  const std::size_t N = x->value.shape[0];
  const std::size_t V = x->value.shape[1];
  (void)feature_dims(cfg, x->value.shape[2]);  // validate lengths up front

  std::vector<Var<T>> scales;
  for (std::size_t p = 0; p < cfg.pipelines.size(); ++p) {
    Var<T> h = x;
    for (std::size_t s = 0; s < cfg.pipelines[p].size(); ++s) {
      const ConvStageSpec& st = cfg.pipelines[p][s];
      const DwcsStageParams<T>& sp = params.pipelines[p][s];
      h = conv1d(h, sp.w, sp.b, st.stride, st.pad, /*depthwise=*/true);
      if (st.bn_relu)
        h = relu(batchnorm(h, 1, sp.bn_gamma, sp.bn_beta, *sp.bn, use_batch_stats(mode),
                           update_running_stats(mode)));
      if (st.pool) h = maxpool1d(h, st.pool);
    }
    // [N, V*kd, fl] -> [N, V, kd*fl]: the kd filters of channel v are
    // adjacent in the channel dimension, so this is a pure reshape.
    const std::size_t fl = h->value.shape.back();
    scales.push_back(reshape(h, {N, V, cfg.kd * fl}));
  }
  return scales.size() == 1 ? scales[0] : concat(scales, 2);
}

// ---------------------------------------------------------------------------
// boundary-segment encoders
// ---------------------------------------------------------------------------

// A pair of single-hidden-layer autoencoder-style maps over a boundary
// segment: one widens the segment before reconstructing, one narrows it.
// Their outputs are concatenated, doubling the segment width.
template <typename T>
struct TwaeParams {
  Var<T> w1, b1;  // ts -> hidden
  Var<T> w2, b2;  // hidden -> ts
};

template <typename T>
struct TisParams {
  std::size_t ts = 0;
  Var<T> w_start, b_start;  // first segment, ts -> 2ts
  Var<T> w_end, b_end;      // last segment, ts -> 2ts
  Var<T> w_int, b_int;      // stitched boundary, 2ts -> ts
  TwaeParams<T> wide;       // hidden 2ts
  TwaeParams<T> narrow_;    // hidden floor(ts/2), at least 1
};

template <typename T>
TwaeParams<T> make_twae_params(std::size_t ts, std::size_t hidden, ParamSet<T>& ps, Rng& rng,
                               const std::string& base) {
  TwaeParams<T> p;
  p.w1 = ps.create(base + ".w1", uniform_fan_init<T>({ts, hidden}, ts, hidden, rng));
  p.b1 = ps.create(base + ".b1", Tensor<T>({hidden}));
  p.w2 = ps.create(base + ".w2", uniform_fan_init<T>({hidden, ts}, hidden, ts, rng));
  p.b2 = ps.create(base + ".b2", Tensor<T>({ts}));
  return p;
}

template <typename T>
TisParams<T> make_tis_params(std::size_t ts, ParamSet<T>& ps, Rng& rng,
                             const std::string& prefix = "tis") {
  if (ts == 0) throw ConfigError("boundary segment width ts must be positive");
  TisParams<T> p;
  p.ts = ts;
  p.w_start = ps.create(prefix + ".start.w", uniform_fan_init<T>({ts, 2 * ts}, ts, 2 * ts, rng));
  p.b_start = ps.create(prefix + ".start.b", Tensor<T>({2 * ts}));
  p.w_end = ps.create(prefix + ".end.w", uniform_fan_init<T>({ts, 2 * ts}, ts, 2 * ts, rng));
  p.b_end = ps.create(prefix + ".end.b", Tensor<T>({2 * ts}));
  p.w_int = ps.create(prefix + ".int.w", uniform_fan_init<T>({2 * ts, ts}, 2 * ts, ts, rng));
  p.b_int = ps.create(prefix + ".int.b", Tensor<T>({ts}));
  p.wide = make_twae_params(ts, 2 * ts, ps, rng, prefix + ".wide");
  p.narrow_ = make_twae_params(ts, std::max<std::size_t>(1, ts / 2), ps, rng, prefix + ".narrow");
  return p;
}

template <typename T>
Var<T> twae_forward(const Var<T>& x, const TwaeParams<T>& p) {
  return dense(relu(dense(x, p.w1, p.b1)), p.w2, p.b2);
}

template <typename T>
struct TisFeatures {
  Var<T> f_start;  // [B, V, 2ts]
  Var<T> f_end;    // [B, V, 2ts]
  Var<T> f_int;    // [B, T-1, V, 2ts]
};

// intervals: [B, T-1, V, 2ts]; first_start / last_end: [B, V, ts].
template <typename T>
TisFeatures<T> tis_forward(const Var<T>& intervals, const Var<T>& first_start,
                           const Var<T>& last_end, const TisParams<T>& p) {
  if (intervals->value.ndim() != 4)
    throw std::invalid_argument("tis_forward: intervals must be [B, T-1, V, 2ts]");
  if (intervals->value.shape.back() != 2 * p.ts || first_start->value.shape.back() != p.ts)
    throw std::invalid_argument("tis_forward: segment widths disagree with the parameters");
  TisFeatures<T> out;
  out.f_start = dense(first_start, p.w_start, p.b_start);
  out.f_end = dense(last_end, p.w_end, p.b_end);
  Var<T> mid = dense(intervals, p.w_int, p.b_int);  // [B, T-1, V, ts]
  out.f_int = concat<T>({twae_forward(mid, p.wide), twae_forward(mid, p.narrow_)}, 3);
  return out;
}

// ---------------------------------------------------------------------------
// per-window assembly
// ---------------------------------------------------------------------------

// f_depth: [B*T, V, depth_len]. With boundary features, every window is
// extended by the encoded segment on its left (the first window uses the
// opening segment) and on its right (the last window uses the closing
// segment), giving [B, T, V, depth_len + 4ts]. Without them the result is
// just f_depth reshaped to [B, T, V, depth_len].
template <typename T>
Var<T> assemble_common(const Var<T>& f_depth, std::size_t B, std::size_t T_,
                       const TisFeatures<T>* tis = nullptr) {
  if (T_ < 2) throw ConfigError("need at least 2 windows per recording");
  if (f_depth->value.ndim() != 3 || f_depth->value.shape[0] != B * T_)
    throw std::invalid_argument("assemble_common: f_depth must be [B*T, V, depth_len]");
  const std::size_t V = f_depth->value.shape[1];
  const std::size_t FD = f_depth->value.shape[2];
  Var<T> depth = reshape(f_depth, {B, T_, V, FD});
  if (!tis) return depth;

  const std::size_t FS = tis->f_start->value.shape.back();  // 2ts
  auto segment = [&](const Var<T>& edge) {  // [B, V, FS] -> [B, 1, V, FS]
    return reshape(edge, {B, 1, V, FS});
  };
  std::vector<Var<T>> windows;
  for (std::size_t t = 0; t < T_; ++t) {
    Var<T> left = t == 0 ? segment(tis->f_start) : narrow(tis->f_int, 1, t - 1, 1);
    Var<T> right = t + 1 == T_ ? segment(tis->f_end) : narrow(tis->f_int, 1, t, 1);
    windows.push_back(concat<T>({narrow(depth, 1, t, 1), left, right}, 3));
  }
  return concat(windows, 1);  // [B, T, V, FD + 2*FS]
}

}  // namespace stnet
