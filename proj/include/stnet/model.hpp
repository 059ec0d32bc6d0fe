#pragma once

// The full network: multi-scale depthwise filtering and boundary encoding
// per channel, attention-derived connectivity fused with an electrode-prior
// mask, Chebyshev graph convolution, LSTM and graph-transform temporal
// branches, a subject classifier, and an adversarial per-window domain head.

#include <cstddef>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "stnet/cfe.hpp"
#include "stnet/dal.hpp"
#include "stnet/datapipe.hpp"
#include "stnet/errors.hpp"
#include "stnet/sps.hpp"
#include "stnet/tes.hpp"

namespace stnet {

enum class DomainFeature { spatial, common };

struct ModelConfig {
  // data geometry
  std::size_t n_windows = 20;   // T
  std::size_t ts = 125;         // boundary segment width
  DwcsConfig dwcs = DwcsConfig::table_default();

  // spatial stage
  std::size_t heads = 4;        // attention heads
  std::size_t cheb_k = 3;       // polynomial order
  std::size_t fs = 128;         // spatial feature width
  double lambda = 0.5;          // prior mask strength

  // temporal stage
  std::size_t fl = 64;          // lstm feature width
  std::size_t gt_channels = 5;  // C
  std::size_t gt_layers = 2;    // GL
  std::size_t fg = 64;          // graph-transform feature width

  // heads
  std::size_t cls_hidden = 64;
  std::size_t dom_hidden = 128;
  double dropout = 0.5;
  double grl_coeff = 1.0;
  DomainFeature domain_feature = DomainFeature::spatial;

  // ablation switches
  bool use_tis = true;          // boundary segment encoders
  bool use_mask = true;         // multiplicative prior mask
  bool use_tes = true;          // temporal stage (off: mean over windows)
  bool use_lstm = true;         // lstm branch of the temporal stage
  bool use_gtn = true;          // graph-transform branch

  void validate() const {
    if (n_windows < 2) throw ConfigError("need at least 2 windows per recording");
    if (use_tis && ts == 0) throw ConfigError("boundary segment width ts must be positive");
    if (fs == 0 || cls_hidden == 0 || dom_hidden == 0)
      throw ConfigError("feature widths must be positive");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must lie in [0, 1)");
    if (lambda < 0.0 || lambda > 1.0) throw ConfigError("mask strength lambda must lie in [0, 1]");
    if (grl_coeff < 0.0) throw ConfigError("gradient reversal coefficient must be >= 0");
    if (use_tes && !use_lstm && !use_gtn)
      throw ConfigError("temporal stage needs at least one active branch");
  }

  // width of the per-window, per-channel common feature
  std::size_t common_width(std::size_t window_len) const {
    return feature_dims(dwcs, window_len).depth_len + (use_tis ? 4 * ts : 0);
  }

  // width of the per-channel feature the classifier sees
  std::size_t temporal_width() const {
    if (!use_tes) return fs;
    return (use_lstm ? fl : 0) + (use_gtn ? fg : 0);
  }
};

// One forward batch: a stack of subjects' windowed recordings plus the
// boundary segments between consecutive windows.
template <typename T>
struct WindowBatch {
  Tensor<T> windows;      // [B, T, V, len]
  Tensor<T> intervals;    // [B, T-1, V, 2ts]
  Tensor<T> first_start;  // [B, V, ts]
  Tensor<T> last_end;     // [B, V, ts]
};

template <typename T>
WindowBatch<T> make_window_batch(const std::vector<const Recording*>& subjects, std::size_t T_,
                                 std::size_t ts) {
  if (subjects.empty()) throw std::invalid_argument("make_window_batch: empty batch");
  const std::size_t B = subjects.size();
  WindowBatch<T> batch;
  for (std::size_t b = 0; b < B; ++b) {
    Tensor<float> w = window_subject(*subjects[b], T_);
    IntervalParts parts = extract_intervals(w, ts);
    if (b == 0) {
      const std::size_t V = w.shape[1], len = w.shape[2];
      batch.windows = Tensor<T>({B, T_, V, len});
      batch.intervals = Tensor<T>({B, T_ - 1, V, 2 * ts});
      batch.first_start = Tensor<T>({B, V, ts});
      batch.last_end = Tensor<T>({B, V, ts});
    }
    if (w.shape[1] != batch.windows.shape[2] || w.shape[2] != batch.windows.shape[3])
      throw DataError("subject " + subjects[b]->subject_id +
                      " has a different channel count or length than the rest of the batch");
    auto copy_into = [](const Tensor<float>& src, Tensor<T>& dst, std::size_t at) {
      for (std::size_t i = 0; i < src.numel(); ++i)
        dst.data[at * src.numel() + i] = static_cast<T>(src.data[i]);
    };
    copy_into(w, batch.windows, b);
    copy_into(parts.intervals, batch.intervals, b);
    copy_into(parts.first_start, batch.first_start, b);
    copy_into(parts.last_end, batch.last_end, b);
  }
  return batch;
}

template <typename T>
struct ModelOutput {
  Var<T> class_probs;   // [B, 2]
  Var<T> domain_probs;  // [B*T, 2]
  Var<T> f_common;      // [B, T, V, FE]
  Var<T> adjacency;     // [B, T, V, V]
  Var<T> f_spatial;     // [B, T, V, FS]
  Var<T> f_temporal;    // [B, V, FT]
};

template <typename T>
class Model {
 public:
  Model(ModelConfig cfg, std::size_t n_channels, std::size_t window_len,
        const Tensor<T>& electrode_adjacency, std::uint64_t seed)
      : cfg_(std::move(cfg)), n_channels_(n_channels), window_len_(window_len) {
    cfg_.validate();
    if (n_channels == 0) throw ConfigError("model needs at least one channel");
    const FeatureDims dims = feature_dims(cfg_.dwcs, window_len);  // validates the bank
    if (cfg_.use_tis && 2 * cfg_.ts > window_len)
      throw ConfigError("boundary segment width 2*ts = " + std::to_string(2 * cfg_.ts) +
                        " exceeds window length " + std::to_string(window_len));
    const std::size_t fe = dims.depth_len + (cfg_.use_tis ? 4 * cfg_.ts : 0);

    Rng rng(splitmix64(seed));
    dwcs_ = make_dwcs_params(cfg_.dwcs, n_channels, params_, rng);
    if (cfg_.use_tis) tis_ = make_tis_params<T>(cfg_.ts, params_, rng);
    att_ = make_attention_params<T>(cfg_.heads, fe, params_, rng);
    cheb_ = make_cheb_params<T>(cfg_.cheb_k, fe, cfg_.fs, params_, rng);
    if (cfg_.use_tes && cfg_.use_lstm)
      lstm_ = make_ln_lstm_params<T>(cfg_.fs, cfg_.fl, params_, rng);
    if (cfg_.use_tes && cfg_.use_gtn)
      gtn_ = make_gtn_params<T>(cfg_.gt_layers, cfg_.gt_channels, cfg_.n_windows, cfg_.fs,
                                cfg_.fg, params_, rng);
    cls_ = make_classifier_params<T>(n_channels * cfg_.temporal_width(), cfg_.cls_hidden,
                                     params_, rng);
    const std::size_t dom_width =
        cfg_.domain_feature == DomainFeature::spatial ? cfg_.fs : fe;
    dom_ = make_domain_params<T>(n_channels * dom_width, cfg_.dom_hidden, params_, rng);

    if (cfg_.use_mask) {
      if (electrode_adjacency.ndim() != 2 || electrode_adjacency.shape[0] != n_channels ||
          electrode_adjacency.shape[1] != n_channels)
        throw ConfigError("electrode adjacency must be [V, V] with the data's channel count");
      mask_ = lambda_mask(electrode_adjacency, cfg_.lambda);
    }
  }

  ModelOutput<T> forward(const WindowBatch<T>& batch, RunMode mode, Rng& rng) {
    const std::size_t B = batch.windows.shape[0];
    const std::size_t T_ = batch.windows.shape[1];
    const std::size_t V = batch.windows.shape[2];
    const std::size_t len = batch.windows.shape[3];
    if (T_ != cfg_.n_windows)
      throw std::invalid_argument("forward: batch window count disagrees with the model");
    if (V != n_channels_ || len != window_len_)
      throw std::invalid_argument("forward: batch geometry disagrees with the model");

    ModelOutput<T> out;

    // common features per window and channel
    Var<T> x = reshape(constant(batch.windows), {B * T_, V, len});
    Var<T> f_depth = dwcs_forward(x, cfg_.dwcs, dwcs_, mode);
    if (cfg_.use_tis) {
      TisFeatures<T> tf = tis_forward(constant(batch.intervals), constant(batch.first_start),
                                      constant(batch.last_end), *tis_);
      out.f_common = assemble_common(f_depth, B, T_, &tf);
    } else {
      out.f_common = assemble_common(f_depth, B, T_, static_cast<const TisFeatures<T>*>(nullptr));
    }

    // spatial stage
    Var<T> attn = attention_connectivity(out.f_common, att_);
    out.adjacency = cfg_.use_mask ? fuse_adjacency(attn, mask_) : attn;
    out.f_spatial = cheb_gcn(out.f_common, out.adjacency, cheb_);

    // temporal stage
    if (cfg_.use_tes) {
      std::optional<Var<T>> f_lstm, f_gtn;
      if (lstm_) f_lstm = layernorm_lstm(out.f_spatial, *lstm_);
      if (gtn_) f_gtn = gtn_forward(out.adjacency, out.f_spatial, *gtn_);
      out.f_temporal = fuse_temporal<T>(f_lstm ? &*f_lstm : nullptr, f_gtn ? &*f_gtn : nullptr);
    } else {
      // mean over the window axis: [B, T, V, FS] -> [B, V, FS]
      out.f_temporal =
          reduce_mean_lastdim(transpose(out.f_spatial, {0, 2, 3, 1}));
    }

    out.class_probs = classify(out.f_temporal, cls_, mode, rng, cfg_.dropout);

    Var<T> dom_in = cfg_.domain_feature == DomainFeature::spatial ? out.f_spatial : out.f_common;
    out.domain_probs = domain_classify(grl(dom_in, static_cast<T>(cfg_.grl_coeff)), dom_, mode);
    return out;
  }

  const ModelConfig& config() const { return cfg_; }
  std::size_t n_channels() const { return n_channels_; }
  std::size_t window_len() const { return window_len_; }
  ParamSet<T>& params() { return params_; }
  const ParamSet<T>& params() const { return params_; }

  // Every batch-normalization state in the model, with stable names, for
  // checkpointing.
  std::vector<std::pair<std::string, BatchNormState<T>*>> bn_states() {
    std::vector<std::pair<std::string, BatchNormState<T>*>> out;
    for (std::size_t p = 0; p < dwcs_.pipelines.size(); ++p)
      for (std::size_t s = 0; s < dwcs_.pipelines[p].size(); ++s)
        if (dwcs_.pipelines[p][s].bn)
          out.emplace_back("dwcs.p" + std::to_string(p) + ".s" + std::to_string(s) + ".bn",
                           dwcs_.pipelines[p][s].bn.get());
    out.emplace_back("dom.bn", dom_.bn.get());
    return out;
  }

 private:
  ModelConfig cfg_;
  std::size_t n_channels_ = 0;
  std::size_t window_len_ = 0;
  ParamSet<T> params_;
  DwcsParams<T> dwcs_;
  std::optional<TisParams<T>> tis_;
  AttentionParams<T> att_;
  ChebParams<T> cheb_;
  std::optional<LnLstmParams<T>> lstm_;
  std::optional<GtnParams<T>> gtn_;
  ClassifierParams<T> cls_;
  DomainHeadParams<T> dom_;
  Tensor<T> mask_;
};

}  // namespace stnet
