#include "stnet/runner.hpp"

#include <algorithm>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "json.hpp"

#include "stnet/trainer.hpp"
#include "stnet/version.hpp"

namespace stnet {
namespace {

using nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// run configuration
// ---------------------------------------------------------------------------

struct RunSettings {
  std::string dataset;               // manifest path
  std::string layout;                // electrode coordinate CSV
  std::string adjacency_mode = "knn";  // knn | threshold | file
  std::size_t adjacency_k = 2;
  double adjacency_tau = 0.35;
  std::string adjacency_file;
  std::string out;
  std::size_t window_len = 0;  // lets `dims` run without a dataset
  std::string bank = "table";  // table | short
  std::size_t kd = 3;
  std::vector<std::string> ablate;
  TrainConfig train;
};

// Two-stage filter bank for short windows (the reference bank needs roughly
// eight hundred samples per window).
DwcsConfig short_bank(std::size_t kd) {
  DwcsConfig cfg;
  cfg.kd = kd;
  cfg.pipelines = {
      {{8, 2, Padding::valid, true, 2}, {3, 1, Padding::same, true, 2}},
      {{4, 2, Padding::valid, true, 2}, {3, 1, Padding::same, true, 2}},
  };
  return cfg;
}

[[noreturn]] void bad_key(const std::string& key, const std::string& why) {
  throw ConfigError("key '" + key + "': " + why);
}

std::size_t as_count(const json& v, const std::string& key, std::size_t lo = 0) {
  if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0))
    bad_key(key, "expected a nonnegative integer");
  const auto n = v.get<std::uint64_t>();
  if (n < lo) bad_key(key, "must be at least " + std::to_string(lo));
  return static_cast<std::size_t>(n);
}

double as_real(const json& v, const std::string& key) {
  if (!v.is_number()) bad_key(key, "expected a number");
  return v.get<double>();
}

std::string as_text(const json& v, const std::string& key) {
  if (!v.is_string()) bad_key(key, "expected a string");
  return v.get<std::string>();
}

void apply_ablations(ModelConfig& mc, const std::vector<std::string>& names) {
  bool drop_tes = false, drop_branch = false;
  for (const auto& name : names) {
    if (name == "tis") {
      mc.use_tis = false;
    } else if (name == "lambda_mask") {
      mc.use_mask = false;
    } else if (name == "tes") {
      mc.use_tes = false;
      drop_tes = true;
    } else if (name == "lstm") {
      mc.use_lstm = false;
      drop_branch = true;
    } else if (name == "gtn") {
      mc.use_gtn = false;
      drop_branch = true;
    } else {
      throw ConfigError("unknown ablation '" + name +
                        "' (expected tis, lambda_mask, tes, lstm, gtn)");
    }
  }
  if (drop_tes && drop_branch)
    throw ConfigError("ablation 'tes' already removes 'lstm' and 'gtn'; drop one or the other");
}

RunSettings parse_settings(const json& j) {
  if (!j.is_object()) throw ConfigError("the run configuration must be a JSON object");
  RunSettings s;
  ModelConfig& mc = s.train.model;
  for (const auto& [key, v] : j.items()) {
    if (key == "dataset")
      s.dataset = as_text(v, key);
    else if (key == "layout")
      s.layout = as_text(v, key);
    else if (key == "adjacency_mode") {
      s.adjacency_mode = as_text(v, key);
      if (s.adjacency_mode != "knn" && s.adjacency_mode != "threshold" &&
          s.adjacency_mode != "file")
        bad_key(key, "expected knn, threshold, or file");
    } else if (key == "adjacency_k")
      s.adjacency_k = as_count(v, key, 1);
    else if (key == "adjacency_tau")
      s.adjacency_tau = as_real(v, key);
    else if (key == "adjacency_file")
      s.adjacency_file = as_text(v, key);
    else if (key == "out")
      s.out = as_text(v, key);
    else if (key == "window_len")
      s.window_len = as_count(v, key);
    else if (key == "bank") {
      s.bank = as_text(v, key);
      if (s.bank != "table" && s.bank != "short") bad_key(key, "expected table or short");
    } else if (key == "kd")
      s.kd = as_count(v, key, 1);
    else if (key == "seed")
      s.train.seed = as_count(v, key);
    else if (key == "epochs")
      s.train.epochs = as_count(v, key);
    else if (key == "lr") {
      s.train.lr = as_real(v, key);
      if (s.train.lr < 0) bad_key(key, "must be nonnegative");
    } else if (key == "batch") {
      if (as_count(v, key) != 2)
        bad_key(key, "the step batch is fixed at 2 (one labeled, one unlabeled subject)");
    } else if (key == "windows")
      mc.n_windows = as_count(v, key, 2);
    else if (key == "ts")
      mc.ts = as_count(v, key, 1);
    else if (key == "heads")
      mc.heads = as_count(v, key, 1);
    else if (key == "cheb_k")
      mc.cheb_k = as_count(v, key, 1);
    else if (key == "fs")
      mc.fs = as_count(v, key, 1);
    else if (key == "lambda")
      mc.lambda = as_real(v, key);
    else if (key == "fl")
      mc.fl = as_count(v, key, 1);
    else if (key == "gt_channels")
      mc.gt_channels = as_count(v, key, 1);
    else if (key == "gt_layers")
      mc.gt_layers = as_count(v, key, 1);
    else if (key == "fg")
      mc.fg = as_count(v, key, 1);
    else if (key == "cls_hidden")
      mc.cls_hidden = as_count(v, key, 1);
    else if (key == "dom_hidden")
      mc.dom_hidden = as_count(v, key, 1);
    else if (key == "dropout")
      mc.dropout = as_real(v, key);
    else if (key == "grl_coeff")
      mc.grl_coeff = as_real(v, key);
    else if (key == "domain_feature") {
      const std::string d = as_text(v, key);
      if (d == "spatial")
        mc.domain_feature = DomainFeature::spatial;
      else if (d == "common")
        mc.domain_feature = DomainFeature::common;
      else
        bad_key(key, "expected spatial or common");
    } else if (key == "ablate") {
      if (!v.is_array()) bad_key(key, "expected an array of ablation names");
      for (const auto& e : v) s.ablate.push_back(as_text(e, key));
    } else
      throw ConfigError("unknown key '" + key + "' in the run configuration");
  }
  return s;
}

// Applies flag overrides, resolves the filter bank, and validates.
void finalize_settings(RunSettings& s) {
  s.train.model.dwcs = s.bank == "short" ? short_bank(s.kd) : DwcsConfig::table_default();
  s.train.model.dwcs.kd = s.kd;
  apply_ablations(s.train.model, s.ablate);
  s.train.model.validate();
}

RunSettings load_settings(const std::string& config_path) {
  json j = json::object();
  if (!config_path.empty()) {
    std::ifstream in(config_path);
    if (!in) throw ConfigError("cannot open config file " + config_path);
    try {
      in >> j;
    } catch (const json::parse_error& e) {
      throw ConfigError("config file is not valid JSON: " + std::string(e.what()));
    }
  }
  return parse_settings(j);
}

json resolved_json(const RunSettings& s) {
  json j;
  j["version"] = kVersion;
  j["dataset"] = s.dataset;
  j["layout"] = s.layout;
  j["adjacency_mode"] = s.adjacency_mode;
  j["adjacency_k"] = s.adjacency_k;
  j["adjacency_tau"] = s.adjacency_tau;
  j["adjacency_file"] = s.adjacency_file;
  j["out"] = s.out;
  j["window_len"] = s.window_len;
  j["bank"] = s.bank;
  j["kd"] = s.kd;
  j["ablate"] = s.ablate;
  j["seed"] = s.train.seed;
  j["epochs"] = s.train.epochs;
  j["lr"] = s.train.lr;
  j["batch"] = 2;
  const ModelConfig& mc = s.train.model;
  j["windows"] = mc.n_windows;
  j["ts"] = mc.ts;
  j["heads"] = mc.heads;
  j["cheb_k"] = mc.cheb_k;
  j["fs"] = mc.fs;
  j["lambda"] = mc.lambda;
  j["fl"] = mc.fl;
  j["gt_channels"] = mc.gt_channels;
  j["gt_layers"] = mc.gt_layers;
  j["fg"] = mc.fg;
  j["cls_hidden"] = mc.cls_hidden;
  j["dom_hidden"] = mc.dom_hidden;
  j["dropout"] = mc.dropout;
  j["grl_coeff"] = mc.grl_coeff;
  j["domain_feature"] = mc.domain_feature == DomainFeature::spatial ? "spatial" : "common";
  return j;
}

// ---------------------------------------------------------------------------
// shared helpers for the data-driven commands
// ---------------------------------------------------------------------------

Dataset load_data(const RunSettings& s) {
  if (s.dataset.empty()) throw ConfigError("this command needs a 'dataset' manifest path");
  return load_dataset(s.dataset);
}

std::size_t derive_window_len(const Dataset& d, std::size_t T) {
  if (d.recordings.empty()) throw DataError("dataset has no recordings");
  const std::size_t n = d.recordings[0].samples.shape[1];
  if (n / T == 0)
    throw DataError("recordings are shorter than one sample per window (need " +
                    std::to_string(T) + " windows)");
  return n / T;
}

Tensor<float> build_adjacency(const RunSettings& s, std::size_t n_channels) {
  if (!s.train.model.use_mask) return Tensor<float>();
  Tensor<float> adj;
  if (s.adjacency_mode == "file") {
    if (s.adjacency_file.empty())
      throw ConfigError("adjacency_mode 'file' needs an 'adjacency_file' path");
    adj = adjacency_from_file(s.adjacency_file);
  } else {
    if (s.layout.empty())
      throw ConfigError("adjacency_mode '" + s.adjacency_mode +
                        "' needs a 'layout' coordinate CSV (or ablate lambda_mask)");
    ElectrodeLayout layout = load_layout_csv(s.layout);
    adj = s.adjacency_mode == "knn" ? adjacency_k_nearest(layout, s.adjacency_k)
                                    : adjacency_threshold(layout, s.adjacency_tau);
  }
  if (adj.shape != Shape{n_channels, n_channels})
    throw DataError("adjacency is for " + std::to_string(adj.shape[0]) +
                    " electrodes but the dataset has " + std::to_string(n_channels));
  return adj;
}

fs::path require_out(const RunSettings& s) {
  if (s.out.empty()) throw ConfigError("this command needs an 'out' directory");
  fs::create_directories(s.out);
  return s.out;
}

void write_resolved(const fs::path& dir, const RunSettings& s) {
  atomic_write_text(dir / "resolved_config.json", resolved_json(s).dump(2) + "\n");
}

json metrics_json(const RunSettings& s, const std::vector<SubjectOutcome>& outcomes,
                  const MetricBlock& m) {
  json j;
  j["version"] = kVersion;
  j["seed"] = s.train.seed;
  j["n_subjects"] = outcomes.size();
  j["metrics"] = {{"acc", m.acc}, {"pre", m.pre}, {"rec", m.rec}, {"f1", m.f1},
                  {"sp", m.sp},   {"ji", m.ji},   {"auc", m.auc}, {"pam", m.pam},
                  {"degenerate", m.degenerate}};
  json rows = json::array();
  for (const auto& o : outcomes)
    rows.push_back({{"subject", o.subject_id},
                    {"fold", o.fold},
                    {"truth", label_name(o.truth)},
                    {"predicted", label_name(o.predicted)},
                    {"p_depressed", o.p_depressed}});
  j["outcomes"] = rows;
  return j;
}

void log_fold(std::ostream& err, std::size_t f, const FoldOutput& out) {
  std::size_t hit = 0;
  for (const auto& o : out.outcomes)
    if (o.predicted == o.truth) ++hit;
  err << "fold " << f << ": " << out.outcomes.size() << " held-out subjects, " << hit
      << " correct";
  if (!out.history.empty())
    err << "; final loss_c=" << out.history.back().loss_class
        << " loss_d=" << out.history.back().loss_domain
        << " train_acc=" << out.history.back().train_acc;
  err << "\n";
}

// ---------------------------------------------------------------------------
// commands
// ---------------------------------------------------------------------------

int cmd_dims(const RunSettings& s, std::size_t len_flag, std::ostream& out) {
  std::size_t len = len_flag ? len_flag : s.window_len;
  if (len == 0 && !s.dataset.empty())
    len = derive_window_len(load_data(s), s.train.model.n_windows);
  if (len == 0)
    throw ConfigError("dims needs a window length: set 'window_len', pass --len, or point "
                      "'dataset' at a manifest");
  const ModelConfig& mc = s.train.model;
  const FeatureDims dims = feature_dims(mc.dwcs, len);
  out << "window length: " << len << "\n";
  out << "pipeline lengths:";
  for (std::size_t L : dims.pipeline_len) out << ' ' << L;
  out << "\n";
  out << "depth width: " << dims.depth_len << "\n";
  out << "common width (FE): " << mc.common_width(len) << "\n";
  out << "spatial width (FS): " << mc.fs << "\n";
  out << "temporal width: " << mc.temporal_width() << "\n";
  return 0;
}

int cmd_synth(const SynthSpec& spec, const std::string& out_dir, std::ostream& out) {
  if (out_dir.empty()) throw ConfigError("synth needs --out");
  synth_dataset(spec, out_dir);
  out << "wrote " << spec.n_subjects << "-subject dataset to " << out_dir << "\n";
  return 0;
}

int cmd_train(const RunSettings& s, std::size_t fold, std::ostream& out, std::ostream& err) {
  const fs::path dir = require_out(s);
  Dataset data = load_data(s);
  const Tensor<float> adj = build_adjacency(s, data.n_channels);
  std::vector<std::string> ids;
  for (const auto& r : data.recordings) ids.push_back(r.subject_id);
  const FoldPlan plan = tenfold_split(ids, s.train.seed);

  write_resolved(dir, s);
  FoldOutput res = run_fold(s.train, data, adj, plan, fold, dir / "model.ckpt");
  log_fold(err, fold, res);
  atomic_write_text(dir / "history.csv", history_csv(res.history));
  atomic_write_text(dir / "metrics.json",
                    metrics_json(s, res.outcomes, pool_metrics(res.outcomes)).dump(2) + "\n");
  out << "fold " << fold << " done: metrics.json, history.csv, model.ckpt in " << dir.string()
      << "\n";
  return 0;
}

int run_cv_command(const RunSettings& s, std::size_t parallel, std::ostream& out,
                   std::ostream& err) {
  const fs::path dir = require_out(s);
  Dataset data = load_data(s);
  const Tensor<float> adj = build_adjacency(s, data.n_channels);
  std::vector<std::string> ids;
  for (const auto& r : data.recordings) ids.push_back(r.subject_id);
  const FoldPlan plan = tenfold_split(ids, s.train.seed);

  write_resolved(dir, s);
  std::vector<std::size_t> live;
  for (std::size_t f = 0; f < plan.groups.size(); ++f)
    if (!plan.groups[f].empty()) live.push_back(f);

  std::vector<std::optional<FoldOutput>> results(plan.groups.size());
  std::vector<std::exception_ptr> failures(plan.groups.size());
  if (parallel <= 1) {
    for (std::size_t f : live) {
      results[f] = run_fold(s.train, data, adj, plan, f);
      log_fold(err, f, *results[f]);
    }
  } else {
    // Fixed round-robin assignment keeps the run deterministic regardless of
    // scheduling; results are pooled in fold order afterwards.
    std::vector<std::thread> workers;
    for (std::size_t w = 0; w < std::min(parallel, live.size()); ++w)
      workers.emplace_back([&, w] {
        for (std::size_t i = w; i < live.size(); i += parallel) {
          const std::size_t f = live[i];
          try {
            results[f] = run_fold(s.train, data, adj, plan, f);
          } catch (...) {
            failures[f] = std::current_exception();
          }
        }
      });
    for (auto& t : workers) t.join();
    for (std::size_t f : live) {
      if (failures[f]) std::rethrow_exception(failures[f]);
      log_fold(err, f, *results[f]);
    }
  }

  CvReport report;
  for (std::size_t f : live) {
    report.outcomes.insert(report.outcomes.end(), results[f]->outcomes.begin(),
                           results[f]->outcomes.end());
    report.fold_history.push_back(results[f]->history);
    const fs::path fold_dir = dir / ("fold-" + std::to_string(f));
    fs::create_directories(fold_dir);
    atomic_write_text(fold_dir / "history.csv", history_csv(results[f]->history));
  }
  report.metrics = pool_metrics(report.outcomes);
  atomic_write_text(dir / "metrics.json",
                    metrics_json(s, report.outcomes, report.metrics).dump(2) + "\n");

  std::size_t hit = 0;
  for (const auto& o : report.outcomes)
    if (o.predicted == o.truth) ++hit;
  out << report.outcomes.size() << " subjects evaluated, " << hit
      << " correct (acc=" << report.metrics.acc << ", pam=" << report.metrics.pam
      << "); metrics.json in " << dir.string() << "\n";
  return 0;
}

int cmd_eval(const RunSettings& s, const std::string& ckpt, std::ostream& out) {
  if (ckpt.empty()) throw ConfigError("eval needs --checkpoint");
  const fs::path dir = require_out(s);
  Dataset data = load_data(s);
  const Tensor<float> adj = build_adjacency(s, data.n_channels);
  const std::size_t len = derive_window_len(data, s.train.model.n_windows);
  Model<float> model(s.train.model, data.n_channels, len, adj,
                     splitmix64(s.train.seed ^ 0x6d6f64656cULL));
  read_checkpoint<float>(ckpt, model, nullptr, nullptr);

  std::vector<SubjectOutcome> outcomes;
  for (const auto& rec : data.recordings) {
    Prediction p = predict_subject(model, rec);
    outcomes.push_back({rec.subject_id, 0, rec.label, p.label, p.p_depressed});
  }
  write_resolved(dir, s);
  const MetricBlock m = pool_metrics(outcomes);
  atomic_write_text(dir / "metrics.json", metrics_json(s, outcomes, m).dump(2) + "\n");
  out << outcomes.size() << " subjects evaluated (acc=" << m.acc << "); metrics.json in "
      << dir.string() << "\n";
  return 0;
}

int cmd_export(const RunSettings& s, const std::string& ckpt, std::ostream& out) {
  const fs::path dir = require_out(s);
  Dataset data = load_data(s);
  const Tensor<float> adj = build_adjacency(s, data.n_channels);
  const std::size_t len = derive_window_len(data, s.train.model.n_windows);
  Model<float> model(s.train.model, data.n_channels, len, adj,
                     splitmix64(s.train.seed ^ 0x6d6f64656cULL));
  if (!ckpt.empty()) read_checkpoint<float>(ckpt, model, nullptr, nullptr);

  std::ostringstream sp, tp, ad;
  sp << "subject,window,channel,feature,value\n";
  tp << "subject,channel,feature,value\n";
  ad << "subject,window,row,col,value\n";
  sp << std::setprecision(8);
  tp << std::setprecision(8);
  ad << std::setprecision(8);
  Shape spatial_shape, temporal_shape, adj_shape;
  for (const auto& rec : data.recordings) {
    auto sw = detail::cache_subject<float>(rec, s.train.model);
    WindowBatch<float> batch = detail::stack_batch<float>({&sw});
    Rng unused(0);
    auto fwd = model.forward(batch, RunMode::eval, unused);
    spatial_shape = fwd.f_spatial->value.shape;
    temporal_shape = fwd.f_temporal->value.shape;
    adj_shape = fwd.adjacency->value.shape;
    const auto& fsv = fwd.f_spatial->value;    // [1, T, V, FS]
    const auto& ftv = fwd.f_temporal->value;   // [1, V, FT]
    const auto& adv = fwd.adjacency->value;    // [1, T, V, V]
    for (std::size_t t = 0; t < fsv.shape[1]; ++t)
      for (std::size_t v = 0; v < fsv.shape[2]; ++v)
        for (std::size_t k = 0; k < fsv.shape[3]; ++k)
          sp << rec.subject_id << ',' << t << ',' << v << ',' << k << ','
             << fsv.at({0, t, v, k}) << "\n";
    for (std::size_t v = 0; v < ftv.shape[1]; ++v)
      for (std::size_t k = 0; k < ftv.shape[2]; ++k)
        tp << rec.subject_id << ',' << v << ',' << k << ',' << ftv.at({0, v, k}) << "\n";
    for (std::size_t t = 0; t < adv.shape[1]; ++t)
      for (std::size_t i = 0; i < adv.shape[2]; ++i)
        for (std::size_t j = 0; j < adv.shape[3]; ++j)
          ad << rec.subject_id << ',' << t << ',' << i << ',' << j << ','
             << adv.at({0, t, i, j}) << "\n";
  }
  write_resolved(dir, s);
  atomic_write_text(dir / "features_spatial.csv", sp.str());
  atomic_write_text(dir / "features_temporal.csv", tp.str());
  atomic_write_text(dir / "adjacency.csv", ad.str());
  out << "spatial [T=" << spatial_shape[1] << ", V=" << spatial_shape[2]
      << ", F=" << spatial_shape[3] << "], temporal [V=" << temporal_shape[1]
      << ", F=" << temporal_shape[2] << "], adjacency [T=" << adj_shape[1]
      << ", V=" << adj_shape[2] << "] for " << data.recordings.size() << " subjects in "
      << dir.string() << "\n";
  return 0;
}

}  // namespace

// ---------------------------------------------------------------------------
// dispatch
// ---------------------------------------------------------------------------

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"EEG depression-detection pipeline"};
  app.require_subcommand(1);

  // shared options, bound per subcommand
  std::string config_path, out_dir, checkpoint, domain_feature, ablate_csv;
  std::optional<std::uint64_t> seed_override;
  std::size_t fold = 0, parallel = 1, len_flag = 0;

  auto add_common = [&](CLI::App* cmd, bool with_out = true) {
    cmd->add_option("--config", config_path, "run configuration JSON");
    cmd->add_option("--seed", seed_override, "override the config seed");
    if (with_out) cmd->add_option("--out", out_dir, "override the output directory");
    cmd->add_option("--ablate", ablate_csv,
                    "comma-separated ablations: tis,lambda_mask,tes,lstm,gtn");
    cmd->add_option("--domain-feature", domain_feature,
                    "discriminator input: spatial or common");
  };

  SynthSpec synth_spec;
  std::string synth_out;
  auto* synth = app.add_subcommand("synth", "write a synthetic dataset");
  synth->add_option("--out", synth_out, "output directory")->required();
  synth->add_option("--subjects", synth_spec.n_subjects, "number of subjects");
  synth->add_option("--channels", synth_spec.n_channels, "electrode count");
  synth->add_option("--rate", synth_spec.sample_rate_hz, "sample rate in Hz");
  synth->add_option("--duration", synth_spec.duration_s, "recording length in seconds");
  synth->add_option("--separation", synth_spec.class_separation,
                    "class amplitude gap in noise units");
  synth->add_option("--seed", synth_spec.seed, "generator seed");

  auto* dims = app.add_subcommand("dims", "print feature widths for a configuration");
  add_common(dims, false);
  dims->add_option("--len", len_flag, "window length in samples");

  auto* train = app.add_subcommand("train", "train a single cross-validation fold");
  add_common(train);
  train->add_option("--fold", fold, "fold index to train");

  auto* cv = app.add_subcommand("cv", "run tenfold cross-validation");
  add_common(cv);
  cv->add_option("--parallel", parallel, "worker threads for folds");

  auto* ablate = app.add_subcommand("ablate", "run cross-validation with ablations");
  add_common(ablate);
  ablate->add_option("--parallel", parallel, "worker threads for folds");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  add_common(eval);
  eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();

  auto* exp = app.add_subcommand("export-features", "dump learned features as CSV");
  add_common(exp);
  exp->add_option("--checkpoint", checkpoint, "optional trained checkpoint");

  std::vector<const char*> argv;
  argv.push_back("stnet");
  for (const auto& a : args) argv.push_back(a.c_str());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    if (app.got_subcommand(synth)) return cmd_synth(synth_spec, synth_out, out);

    RunSettings s = load_settings(config_path);
    if (seed_override) s.train.seed = *seed_override;
    if (!out_dir.empty()) s.out = out_dir;
    if (!domain_feature.empty()) {
      if (domain_feature == "spatial")
        s.train.model.domain_feature = DomainFeature::spatial;
      else if (domain_feature == "common")
        s.train.model.domain_feature = DomainFeature::common;
      else
        throw ConfigError("--domain-feature expects spatial or common");
    }
    if (!ablate_csv.empty()) {
      std::stringstream ss(ablate_csv);
      std::string name;
      while (std::getline(ss, name, ','))
        if (!name.empty() &&
            std::find(s.ablate.begin(), s.ablate.end(), name) == s.ablate.end())
          s.ablate.push_back(name);
    }
    if (app.got_subcommand(ablate) && s.ablate.empty())
      throw ConfigError("ablate needs at least one ablation name (--ablate or config)");
    finalize_settings(s);

    if (app.got_subcommand(dims)) return cmd_dims(s, len_flag, out);
    if (app.got_subcommand(train)) return cmd_train(s, fold, out, err);
    if (app.got_subcommand(cv) || app.got_subcommand(ablate))
      return run_cv_command(s, parallel, out, err);
    if (app.got_subcommand(eval)) return cmd_eval(s, checkpoint, out);
    if (app.got_subcommand(exp)) return cmd_export(s, checkpoint, out);
    throw InvariantError("no subcommand dispatched");
  } catch (const ConfigError& e) {
    err << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    err << e.what() << "\n";
    return 3;
  } catch (const NumericError& e) {
    err << e.what() << "\n";
    return 4;
  } catch (const InvariantError& e) {
    err << e.what() << "\n";
    return 5;
  } catch (const std::exception& e) {
    err << "internal: " << e.what() << "\n";
    return 5;
  }
}

}  // namespace stnet
