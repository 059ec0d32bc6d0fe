#pragma once

// Training loop: per-fold adversarial SGD with one labeled and one unlabeled
// subject per step, trial-wise prediction, tenfold cross-validation, and
// bit-reproducible checkpoints.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "stnet/datapipe.hpp"
#include "stnet/errors.hpp"
#include "stnet/metrics.hpp"
#include "stnet/model.hpp"

namespace stnet {

// Target-domain subjects enter the loop through this label-free type, so the
// loop cannot read their class labels even by accident.
struct UnlabeledRecording {
  std::string subject_id;
  double sample_rate_hz = 0.0;
  std::size_t n_channels = 0;
  Tensor<float> samples;  // [V, N]
};

inline UnlabeledRecording strip_label(const Recording& r) {
  return UnlabeledRecording{r.subject_id, r.sample_rate_hz, r.n_channels, r.samples};
}

struct TrainConfig {
  ModelConfig model;
  std::size_t epochs = 50;
  double lr = 1e-4;  // plain SGD, no momentum, no schedule
  std::uint64_t seed = 0;
};

struct EpochStats {
  std::size_t epoch = 0;      // 1-based
  double loss_class = 0.0;    // mean over the epoch's steps
  double loss_domain = 0.0;
  double train_acc = 0.0;     // labeled-row argmax vs label, training-mode forward
};

// In-place update v <- v - lr * g for every parameter that received a
// gradient this step.
template <typename T>
void sgd_step(ParamSet<T>& params, T lr) {
  for (const auto& p : params.items()) {
    if (p->grad.data.size() != p->value.data.size()) continue;
    for (std::size_t i = 0; i < p->value.data.size(); ++i)
      p->value.data[i] -= lr * p->grad.data[i];
  }
}

namespace detail {

// One subject's windowed form, cached once per fold so the step loop only
// stacks ready tensors.
template <typename T>
struct SubjectWindows {
  Tensor<T> windows;      // [T, V, len]
  Tensor<T> intervals;    // [T-1, V, 2*ts]
  Tensor<T> first_start;  // [V, ts]
  Tensor<T> last_end;     // [V, ts]
};

template <typename T>
Tensor<T> widen(const Tensor<float>& x) {
  Tensor<T> out(x.shape);
  for (std::size_t i = 0; i < x.data.size(); ++i) out.data[i] = static_cast<T>(x.data[i]);
  return out;
}

// The interval extractor needs a positive width even when the model ignores
// the boundary features, so clamp to the window length in that case.
inline std::size_t windowing_ts(const ModelConfig& mc, std::size_t window_len) {
  if (mc.use_tis) return mc.ts;
  return std::max<std::size_t>(1, std::min(mc.ts, window_len / 2));
}

template <typename T>
SubjectWindows<T> cache_subject(const Recording& rec, const ModelConfig& mc) {
  Tensor<float> w = window_subject(rec, mc.n_windows);
  IntervalParts parts = extract_intervals(w, windowing_ts(mc, w.shape[2]));
  SubjectWindows<T> out;
  out.windows = widen<T>(w);
  out.intervals = widen<T>(parts.intervals);
  out.first_start = widen<T>(parts.first_start);
  out.last_end = widen<T>(parts.last_end);
  return out;
}

template <typename T>
Tensor<T> stack_front(const std::vector<const Tensor<T>*>& parts) {
  Shape s = parts[0]->shape;
  s.insert(s.begin(), parts.size());
  Tensor<T> out(s);
  const std::size_t stride = parts[0]->numel();
  for (std::size_t b = 0; b < parts.size(); ++b)
    std::copy(parts[b]->data.begin(), parts[b]->data.end(), out.data.begin() + b * stride);
  return out;
}

template <typename T>
WindowBatch<T> stack_batch(const std::vector<const SubjectWindows<T>*>& subjects) {
  std::vector<const Tensor<T>*> w, iv, fs, le;
  for (const auto* s : subjects) {
    w.push_back(&s->windows);
    iv.push_back(&s->intervals);
    fs.push_back(&s->first_start);
    le.push_back(&s->last_end);
  }
  WindowBatch<T> batch;
  batch.windows = stack_front(w);
  batch.intervals = stack_front(iv);
  batch.first_start = stack_front(fs);
  batch.last_end = stack_front(le);
  return batch;
}

// --- binary checkpoint plumbing ---

inline void put_u64(std::string& b, std::uint64_t v) {
  char c[8];
  std::memcpy(c, &v, 8);
  b.append(c, 8);
}

inline void put_f64(std::string& b, double v) {
  char c[8];
  std::memcpy(c, &v, 8);
  b.append(c, 8);
}

inline void put_str(std::string& b, const std::string& s) {
  put_u64(b, s.size());
  b.append(s);
}

template <typename T>
void put_data(std::string& b, const std::vector<T>& v) {
  b.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(T));
}

struct ByteReader {
  const std::string& buf;
  std::size_t pos = 0;

  void need(std::size_t n) const {
    if (pos + n > buf.size()) throw DataError("checkpoint truncated");
  }
  std::uint64_t get_u64() {
    need(8);
    std::uint64_t v;
    std::memcpy(&v, buf.data() + pos, 8);
    pos += 8;
    return v;
  }
  double get_f64() {
    need(8);
    double v;
    std::memcpy(&v, buf.data() + pos, 8);
    pos += 8;
    return v;
  }
  std::string get_str() {
    const std::uint64_t n = get_u64();
    need(n);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
  template <typename T>
  void get_data(std::vector<T>& v) {
    need(v.size() * sizeof(T));
    std::memcpy(v.data(), buf.data() + pos, v.size() * sizeof(T));
    pos += v.size() * sizeof(T);
  }
};

inline constexpr char kCheckpointMagic[9] = "STNTCKPT";
inline constexpr std::uint64_t kCheckpointVersion = 1;

}  // namespace detail

// ---------------------------------------------------------------------------
// checkpoints: versioned binary snapshots of parameters, normalization
// statistics, the loop RNG, and training history
// ---------------------------------------------------------------------------

template <typename T>
void write_checkpoint(const std::filesystem::path& path, Model<T>& model, const Rng& loop_rng,
                      const std::vector<EpochStats>& history) {
  std::string b;
  b.append(detail::kCheckpointMagic, 8);
  detail::put_u64(b, detail::kCheckpointVersion);
  detail::put_u64(b, sizeof(T));
  detail::put_str(b, loop_rng.save_state());
  const auto& items = model.params().items();
  detail::put_u64(b, items.size());
  for (const auto& p : items) {
    detail::put_str(b, p->name);
    detail::put_u64(b, p->value.ndim());
    for (std::size_t d : p->value.shape) detail::put_u64(b, d);
    detail::put_data(b, p->value.data);
  }
  auto bn = model.bn_states();
  detail::put_u64(b, bn.size());
  for (auto& [name, st] : bn) {
    detail::put_str(b, name);
    detail::put_u64(b, st->running_mean.data.size());
    detail::put_data(b, st->running_mean.data);
    detail::put_data(b, st->running_var.data);
  }
  detail::put_u64(b, history.size());
  for (const auto& e : history) {
    detail::put_u64(b, e.epoch);
    detail::put_f64(b, e.loss_class);
    detail::put_f64(b, e.loss_domain);
    detail::put_f64(b, e.train_acc);
  }
  atomic_write_bytes(path, b.data(), b.size());
}

// Restores a snapshot into an already-constructed model of the same topology.
// Pass null for the RNG or history when only the weights matter (inference).
template <typename T>
void read_checkpoint(const std::filesystem::path& path, Model<T>& model, Rng* loop_rng,
                     std::vector<EpochStats>* history) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  const std::string buf = ss.str();
  detail::ByteReader r{buf};
  r.need(8);
  if (std::memcmp(buf.data(), detail::kCheckpointMagic, 8) != 0)
    throw DataError("not a checkpoint file: " + path.string());
  r.pos = 8;
  if (r.get_u64() != detail::kCheckpointVersion) throw DataError("unsupported checkpoint version");
  if (r.get_u64() != sizeof(T)) throw DataError("checkpoint scalar width disagrees with build");
  const std::string rng_state = r.get_str();
  if (loop_rng) loop_rng->load_state(rng_state);
  const std::uint64_t n_params = r.get_u64();
  if (n_params != model.params().items().size())
    throw DataError("checkpoint parameter count disagrees with the model");
  for (std::uint64_t i = 0; i < n_params; ++i) {
    const std::string name = r.get_str();
    Var<T> p;
    try {
      p = model.params().find(name);
    } catch (const std::invalid_argument&) {
      throw DataError("checkpoint names unknown parameter " + name);
    }
    const std::uint64_t nd = r.get_u64();
    Shape s(nd);
    for (auto& d : s) d = r.get_u64();
    if (s != p->value.shape) throw DataError("checkpoint shape mismatch for " + name);
    r.get_data(p->value.data);
  }
  auto bn = model.bn_states();
  const std::uint64_t n_bn = r.get_u64();
  if (n_bn != bn.size()) throw DataError("checkpoint normalization count disagrees");
  for (std::uint64_t i = 0; i < n_bn; ++i) {
    const std::string name = r.get_str();
    auto it = std::find_if(bn.begin(), bn.end(), [&](const auto& kv) { return kv.first == name; });
    if (it == bn.end()) throw DataError("checkpoint names unknown normalization " + name);
    const std::uint64_t len = r.get_u64();
    if (len != it->second->running_mean.data.size())
      throw DataError("checkpoint normalization size mismatch for " + name);
    r.get_data(it->second->running_mean.data);
    r.get_data(it->second->running_var.data);
  }
  if (history) {
    history->clear();
    const std::uint64_t n_hist = r.get_u64();
    for (std::uint64_t i = 0; i < n_hist; ++i) {
      EpochStats e;
      e.epoch = r.get_u64();
      e.loss_class = r.get_f64();
      e.loss_domain = r.get_f64();
      e.train_acc = r.get_f64();
      history->push_back(e);
    }
  }
}

// Trains one cross-validation fold: labeled source subjects drive the class
// loss, unlabeled target subjects join each step's batch for the domain loss.
// Every epoch visits each source subject exactly once, paired with targets in
// shuffled cycling order.
template <typename T>
class FoldTrainer {
 public:
  FoldTrainer(TrainConfig cfg, const std::vector<const Recording*>& source,
              const std::vector<UnlabeledRecording> target, const Tensor<T>& electrode_adjacency)
      : cfg_(std::move(cfg)) {
    if (source.empty()) throw DataError("training fold has no labeled subjects");
    if (target.empty()) throw DataError("training fold has no target-domain subjects");
    const std::size_t V = source[0]->n_channels;
    for (const auto* r : source) {
      if (r->n_channels != V)
        throw DataError("subject " + r->subject_id + " has a different channel count");
      src_.push_back(detail::cache_subject<T>(*r, cfg_.model));
      src_labels_.push_back(static_cast<std::size_t>(r->label));
      src_ids_.push_back(r->subject_id);
    }
    for (const auto& u : target) {
      if (u.n_channels != V)
        throw DataError("subject " + u.subject_id + " has a different channel count");
      Recording shim;  // carries samples only; no label exists to copy
      shim.subject_id = u.subject_id;
      shim.sample_rate_hz = u.sample_rate_hz;
      shim.n_channels = u.n_channels;
      shim.samples = u.samples;
      tgt_.push_back(detail::cache_subject<T>(shim, cfg_.model));
    }
    const std::size_t len = src_[0].windows.shape[2];
    for (const auto& s : src_)
      if (s.windows.shape[2] != len) throw DataError("subjects disagree on window length");
    for (const auto& t : tgt_)
      if (t.windows.shape[2] != len) throw DataError("subjects disagree on window length");
    model_.emplace(cfg_.model, V, len, electrode_adjacency,
                   splitmix64(cfg_.seed ^ 0x6d6f64656cULL));
    loop_rng_ = Rng(splitmix64(cfg_.seed ^ 0x6c6f6f70ULL));
  }

  // Runs epochs until the given count is reached (no-op if already past it).
  void train_to(std::size_t epoch_count) {
    while (history_.size() < epoch_count) run_epoch();
  }
  void train() { train_to(cfg_.epochs); }

  Model<T>& model() { return *model_; }
  const std::vector<EpochStats>& history() const { return history_; }
  const TrainConfig& config() const { return cfg_; }

  // Snapshot / restore. Saving at epoch k and resuming reproduces
  // uninterrupted training bit for bit.
  void save_checkpoint(const std::filesystem::path& path) {
    write_checkpoint(path, *model_, loop_rng_, history_);
  }

  void load_checkpoint(const std::filesystem::path& path) {
    read_checkpoint(path, *model_, &loop_rng_, &history_);
  }

 private:
  void run_epoch() {
    const std::size_t epoch = history_.size() + 1;
    std::vector<std::size_t> src_order(src_.size()), tgt_order(tgt_.size());
    std::iota(src_order.begin(), src_order.end(), 0);
    std::iota(tgt_order.begin(), tgt_order.end(), 0);
    loop_rng_.shuffle(src_order);
    loop_rng_.shuffle(tgt_order);

    double sum_lc = 0.0, sum_ld = 0.0;
    std::size_t correct = 0;
    for (std::size_t k = 0; k < src_order.size(); ++k) {
      const std::size_t si = src_order[k];
      const std::size_t ti = tgt_order[k % tgt_order.size()];
      WindowBatch<T> batch = detail::stack_batch<T>({&src_[si], &tgt_[ti]});
      auto out = model_->forward(batch, RunMode::train, loop_rng_);
      auto lc = class_loss(narrow(out.class_probs, 0, 0, 1), {src_labels_[si]});
      auto ld = domain_loss(out.domain_probs, {0, 1}, cfg_.model.n_windows);
      const double lcv = static_cast<double>(value_of(lc));
      const double ldv = static_cast<double>(value_of(ld));
      if (!std::isfinite(lcv) || !std::isfinite(ldv))
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", subject " +
                           src_ids_[si]);
      model_->params().zero_grads();
      backward(add(lc, ld));
      sgd_step(model_->params(), static_cast<T>(cfg_.lr));
      sum_lc += lcv;
      sum_ld += ldv;
      const T p0 = out.class_probs->value.at({0, 0});
      const T p1 = out.class_probs->value.at({0, 1});
      if ((p1 > p0 ? 1u : 0u) == src_labels_[si]) ++correct;
    }
    const double n = static_cast<double>(src_order.size());
    history_.push_back({epoch, sum_lc / n, sum_ld / n, static_cast<double>(correct) / n});
  }

  TrainConfig cfg_;
  std::vector<detail::SubjectWindows<T>> src_, tgt_;
  std::vector<std::size_t> src_labels_;
  std::vector<std::string> src_ids_;
  std::optional<Model<T>> model_;
  Rng loop_rng_;
  std::vector<EpochStats> history_;
};

struct Prediction {
  Label label = Label::control;
  double p_depressed = 0.0;
};

// One trial-wise prediction from the subject's full windowed recording,
// inference mode. Equal probabilities resolve to control (index 0).
template <typename T>
Prediction predict_subject(Model<T>& model, const Recording& rec) {
  auto sw = detail::cache_subject<T>(rec, model.config());
  WindowBatch<T> batch = detail::stack_batch<T>({&sw});
  Rng unused(0);  // inference draws nothing
  auto out = model.forward(batch, RunMode::eval, unused);
  Prediction p;
  p.p_depressed = static_cast<double>(out.class_probs->value.at({0, 1}));
  p.label = p.p_depressed > static_cast<double>(out.class_probs->value.at({0, 0}))
                ? Label::depressed
                : Label::control;
  return p;
}

struct SubjectOutcome {
  std::string subject_id;
  std::size_t fold = 0;
  Label truth = Label::control;
  Label predicted = Label::control;
  double p_depressed = 0.0;
};

struct FoldOutput {
  std::vector<SubjectOutcome> outcomes;  // one per held-out subject
  std::vector<EpochStats> history;
};

struct CvReport {
  std::vector<SubjectOutcome> outcomes;               // one per subject, grouped by fold
  std::vector<std::vector<EpochStats>> fold_history;  // one entry per non-empty fold
  MetricBlock metrics;                                // pooled over all outcomes
};

// Trains fold f of the plan: its group becomes the held-out target domain,
// everything else trains with labels. The fold seed derives from the run
// seed, so folds are independent and may run in any order or in parallel.
// Failures keep their category (and thus the exit code) but gain the fold
// index. An optional path receives the trained weights.
template <typename T>
FoldOutput run_fold(const TrainConfig& cfg, const Dataset& data,
                    const Tensor<T>& electrode_adjacency, const FoldPlan& plan, std::size_t f,
                    const std::filesystem::path& checkpoint_path = {}) {
  if (f >= plan.groups.size()) throw ConfigError("fold index " + std::to_string(f) + " out of range");
  const auto& held_out = plan.groups[f];
  if (held_out.empty()) throw DataError("fold " + std::to_string(f) + " holds out no subjects");
  auto is_held_out = [&](const std::string& id) {
    return std::find(held_out.begin(), held_out.end(), id) != held_out.end();
  };
  std::vector<const Recording*> source;
  std::vector<UnlabeledRecording> target;
  std::vector<const Recording*> test_recs;
  for (const auto& r : data.recordings) {
    if (is_held_out(r.subject_id)) {
      target.push_back(strip_label(r));
      test_recs.push_back(&r);
    } else {
      source.push_back(&r);
    }
  }
  TrainConfig fold_cfg = cfg;
  fold_cfg.seed = splitmix64(cfg.seed ^ (f + 1));
  const std::string where = "fold " + std::to_string(f) + ": ";
  try {
    FoldTrainer<T> trainer(fold_cfg, source, std::move(target), electrode_adjacency);
    trainer.train();
    FoldOutput out;
    for (const auto* rec : test_recs) {
      Prediction p = predict_subject(trainer.model(), *rec);
      out.outcomes.push_back({rec->subject_id, f, rec->label, p.label, p.p_depressed});
    }
    out.history = trainer.history();
    if (!checkpoint_path.empty()) trainer.save_checkpoint(checkpoint_path);
    return out;
  } catch (const ConfigError& e) {
    throw ConfigError(where + e.what());
  } catch (const DataError& e) {
    throw DataError(where + e.what());
  } catch (const NumericError& e) {
    throw NumericError(where + e.what());
  } catch (const InvariantError& e) {
    throw InvariantError(where + e.what());
  }
}

// Pools predictions from every outcome list into one metric block.
inline MetricBlock pool_metrics(const std::vector<SubjectOutcome>& outcomes) {
  std::vector<Label> truth, pred;
  std::vector<double> scores;
  for (const auto& o : outcomes) {
    truth.push_back(o.truth);
    pred.push_back(o.predicted);
    scores.push_back(o.p_depressed);
  }
  return compute_metrics(truth, pred, scores);
}

// Tenfold cross-subject evaluation: each group serves once as the held-out
// target domain while the rest train with labels.
template <typename T>
CvReport run_cv(const TrainConfig& cfg, const Dataset& data, const Tensor<T>& electrode_adjacency) {
  std::vector<std::string> ids;
  for (const auto& r : data.recordings) ids.push_back(r.subject_id);
  FoldPlan plan = tenfold_split(ids, cfg.seed);

  CvReport report;
  for (std::size_t f = 0; f < plan.groups.size(); ++f) {
    if (plan.groups[f].empty()) continue;
    FoldOutput out = run_fold(cfg, data, electrode_adjacency, plan, f);
    report.outcomes.insert(report.outcomes.end(), out.outcomes.begin(), out.outcomes.end());
    report.fold_history.push_back(std::move(out.history));
  }
  report.metrics = pool_metrics(report.outcomes);
  return report;
}

inline std::string history_csv(const std::vector<EpochStats>& history) {
  std::ostringstream os;
  os << "epoch,loss_c,loss_d,train_acc\n";
  os << std::setprecision(10);
  for (const auto& e : history)
    os << e.epoch << ',' << e.loss_class << ',' << e.loss_domain << ',' << e.train_acc << '\n';
  return os.str();
}

}  // namespace stnet
