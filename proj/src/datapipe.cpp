#include "stnet/datapipe.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <numbers>
#include <set>
#include <sstream>

#include "json.hpp"

#include "stnet/errors.hpp"
#include "stnet/rng.hpp"

namespace stnet {
namespace {

using nlohmann::ordered_json;

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      fields.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  fields.push_back(cur);
  return fields;
}

double parse_number(const std::string& s, const std::string& context) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw DataError("malformed number '" + s + "' in " + context);
  }
}

}  // namespace

Dataset load_dataset(const std::filesystem::path& manifest_path) {
  ordered_json doc;
  try {
    doc = ordered_json::parse(read_file(manifest_path));
  } catch (const ordered_json::parse_error& e) {
    throw DataError("manifest parse failure: " + std::string(e.what()));
  }
  for (const char* key : {"dataset_name", "sample_rate_hz", "n_channels", "subjects"})
    if (!doc.contains(key)) throw DataError(std::string("manifest missing key '") + key + "'");

  Dataset ds;
  ds.name = doc["dataset_name"].get<std::string>();
  ds.sample_rate_hz = doc["sample_rate_hz"].get<double>();
  ds.n_channels = doc["n_channels"].get<std::size_t>();
  if (ds.sample_rate_hz <= 0) throw DataError("manifest sample_rate_hz must be positive");
  if (ds.n_channels == 0) throw DataError("manifest n_channels must be positive");

  const auto base = manifest_path.parent_path();
  std::set<std::string> seen_ids;
  for (const auto& subj : doc["subjects"]) {
    for (const char* key : {"id", "label", "file", "n_samples"})
      if (!subj.contains(key)) throw DataError(std::string("subject entry missing key '") + key + "'");
    Recording rec;
    rec.subject_id = subj["id"].get<std::string>();
    if (!seen_ids.insert(rec.subject_id).second)
      throw DataError("duplicate subject id '" + rec.subject_id + "'");
    const std::string label = subj["label"].get<std::string>();
    if (label == "control")
      rec.label = Label::control;
    else if (label == "depressed")
      rec.label = Label::depressed;
    else
      throw DataError("unknown label '" + label + "' for subject " + rec.subject_id);
    rec.sample_rate_hz = ds.sample_rate_hz;
    rec.n_channels = ds.n_channels;
    const std::size_t n_samples = subj["n_samples"].get<std::size_t>();
    if (n_samples == 0) throw DataError("subject " + rec.subject_id + " has zero samples");

    const auto file = base / subj["file"].get<std::string>();
    const std::string bytes = read_file(file);
    const std::size_t expected = ds.n_channels * n_samples * sizeof(float);
    if (bytes.size() != expected)
      throw DataError("subject " + rec.subject_id + ": file " + file.string() + " holds " +
                      std::to_string(bytes.size()) + " bytes, expected " + std::to_string(expected));
    rec.samples = Tensor<float>({ds.n_channels, n_samples});
    std::memcpy(rec.samples.data.data(), bytes.data(), expected);
    if (!rec.samples.all_finite())
      throw DataError("subject " + rec.subject_id + ": non-finite samples");
    ds.recordings.push_back(std::move(rec));
  }
  if (ds.recordings.empty()) throw DataError("manifest lists no subjects");
  return ds;
}

Tensor<float> window_subject(const Recording& rec, std::size_t T) {
  if (T < 2) throw std::invalid_argument("window_subject: need at least 2 windows");
  const std::size_t V = rec.samples.shape[0];
  const std::size_t N = rec.samples.shape[1];
  if (T > N)
    throw DataError("subject " + rec.subject_id + ": cannot cut " + std::to_string(N) +
                    " samples into " + std::to_string(T) + " windows");
  const std::size_t len = N / T;
  Tensor<float> out({T, V, len});
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t v = 0; v < V; ++v) {
      const float* src = rec.samples.data.data() + v * N + t * len;
      float* dst = out.data.data() + (t * V + v) * len;
      std::copy(src, src + len, dst);
    }
  return out;
}

IntervalParts extract_intervals(const Tensor<float>& windows, std::size_t ts) {
  if (windows.ndim() != 3) throw std::invalid_argument("extract_intervals: windows must be [T, V, len]");
  const std::size_t T = windows.shape[0];
  const std::size_t V = windows.shape[1];
  const std::size_t len = windows.shape[2];
  if (ts == 0) throw ConfigError("interval width ts must be positive");
  if (2 * ts > len)
    throw ConfigError("interval width 2*ts = " + std::to_string(2 * ts) +
                      " exceeds window length " + std::to_string(len));

  IntervalParts parts;
  parts.intervals = Tensor<float>({T - 1, V, 2 * ts});
  parts.first_start = Tensor<float>({V, ts});
  parts.last_end = Tensor<float>({V, ts});
  auto win = [&](std::size_t t, std::size_t v) {
    return windows.data.data() + (t * V + v) * len;
  };
  for (std::size_t t = 0; t + 1 < T; ++t)
    for (std::size_t v = 0; v < V; ++v) {
      float* dst = parts.intervals.data.data() + (t * V + v) * 2 * ts;
      std::copy(win(t, v) + len - ts, win(t, v) + len, dst);
      std::copy(win(t + 1, v), win(t + 1, v) + ts, dst + ts);
    }
  for (std::size_t v = 0; v < V; ++v) {
    std::copy(win(0, v), win(0, v) + ts, parts.first_start.data.data() + v * ts);
    std::copy(win(T - 1, v) + len - ts, win(T - 1, v) + len, parts.last_end.data.data() + v * ts);
  }
  return parts;
}

ElectrodeLayout load_layout_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open layout " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw DataError("layout " + path.string() + " is empty");
  {
    auto head = split_csv_line(line);
    if (head.size() != 4 || head[0] != "name" || head[1] != "x" || head[2] != "y" || head[3] != "z")
      throw DataError("layout " + path.string() + " must start with header 'name,x,y,z'");
  }
  ElectrodeLayout layout;
  std::size_t ln = 1;
  while (std::getline(in, line)) {
    ++ln;
    if (line.empty()) continue;
    auto fields = split_csv_line(line);
    if (fields.size() != 4)
      throw DataError("layout " + path.string() + " line " + std::to_string(ln) +
                      ": expected 4 fields");
    layout.names.push_back(fields[0]);
    layout.positions.push_back({parse_number(fields[1], "layout x"),
                                parse_number(fields[2], "layout y"),
                                parse_number(fields[3], "layout z")});
  }
  if (layout.names.empty()) throw DataError("layout " + path.string() + " lists no electrodes");
  return layout;
}

namespace {

double electrode_distance(const ElectrodeLayout& l, std::size_t i, std::size_t j) {
  const double dx = l.positions[i][0] - l.positions[j][0];
  const double dy = l.positions[i][1] - l.positions[j][1];
  const double dz = l.positions[i][2] - l.positions[j][2];
  return std::sqrt(dx * dx + dy * dy + dz * dz);
}

}  // namespace

Tensor<float> adjacency_threshold(const ElectrodeLayout& layout, double tau) {
  if (tau <= 0) throw ConfigError("adjacency threshold must be positive");
  const std::size_t V = layout.names.size();
  Tensor<float> adj({V, V});
  for (std::size_t i = 0; i < V; ++i)
    for (std::size_t j = i + 1; j < V; ++j)
      if (electrode_distance(layout, i, j) <= tau) {
        adj.data[i * V + j] = 1.0f;
        adj.data[j * V + i] = 1.0f;
      }
  return adj;
}

Tensor<float> adjacency_k_nearest(const ElectrodeLayout& layout, std::size_t k) {
  const std::size_t V = layout.names.size();
  if (k == 0 || k >= V) throw ConfigError("adjacency k must satisfy 1 <= k < V");
  Tensor<float> adj({V, V});
  for (std::size_t i = 0; i < V; ++i) {
    std::vector<std::pair<double, std::size_t>> others;
    for (std::size_t j = 0; j < V; ++j)
      if (j != i) others.emplace_back(electrode_distance(layout, i, j), j);
    // Ties break toward the lower electrode index, keeping the rule
    // deterministic for symmetric layouts.
    std::stable_sort(others.begin(), others.end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });
    for (std::size_t n = 0; n < k; ++n) {
      const std::size_t j = others[n].second;
      adj.data[i * V + j] = 1.0f;
      adj.data[j * V + i] = 1.0f;  // symmetrize by union
    }
  }
  return adj;
}

Tensor<float> adjacency_from_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open adjacency " + path.string());
  std::vector<std::vector<float>> rows;
  std::string line;
  std::size_t ln = 0;
  while (std::getline(in, line)) {
    ++ln;
    if (line.empty()) continue;
    auto fields = split_csv_line(line);
    std::vector<float> row;
    for (const auto& f : fields) {
      const double v = parse_number(f, "adjacency row " + std::to_string(ln));
      if (v != 0.0 && v != 1.0)
        throw DataError("adjacency " + path.string() + " has non-binary entry " + f);
      row.push_back(static_cast<float>(v));
    }
    rows.push_back(std::move(row));
  }
  const std::size_t V = rows.size();
  if (V == 0) throw DataError("adjacency " + path.string() + " is empty");
  Tensor<float> adj({V, V});
  for (std::size_t i = 0; i < V; ++i) {
    if (rows[i].size() != V)
      throw DataError("adjacency " + path.string() + " is not square: row " + std::to_string(i + 1) +
                      " has " + std::to_string(rows[i].size()) + " of " + std::to_string(V) +
                      " columns");
    for (std::size_t j = 0; j < V; ++j) adj.data[i * V + j] = rows[i][j];
  }
  for (std::size_t i = 0; i < V; ++i) {
    if (adj.data[i * V + i] != 0.0f)
      throw DataError("adjacency " + path.string() + " has a nonzero diagonal entry");
    for (std::size_t j = 0; j < V; ++j)
      if (adj.data[i * V + j] != adj.data[j * V + i])
        throw DataError("adjacency " + path.string() + " is not symmetric");
  }
  return adj;
}

void write_adjacency_csv(const std::filesystem::path& path, const Tensor<float>& adj) {
  const std::size_t V = adj.shape[0];
  std::ostringstream os;
  for (std::size_t i = 0; i < V; ++i) {
    for (std::size_t j = 0; j < V; ++j) {
      if (j) os << ',';
      os << static_cast<int>(adj.data[i * V + j]);
    }
    os << '\n';
  }
  atomic_write_text(path, os.str());
}

FoldPlan tenfold_split(std::vector<std::string> subject_ids, std::uint64_t seed) {
  constexpr std::size_t kFolds = 10;
  const std::size_t n = subject_ids.size();
  if (n < kFolds) throw DataError("tenfold split needs at least 10 subjects, got " + std::to_string(n));
  {
    std::set<std::string> uniq(subject_ids.begin(), subject_ids.end());
    if (uniq.size() != n) throw DataError("tenfold split: duplicate subject ids");
  }
  // Sort first so the plan depends only on the id set and the seed, not on
  // manifest order.
  std::sort(subject_ids.begin(), subject_ids.end());
  Rng rng(splitmix64(seed));
  rng.shuffle(subject_ids);
  std::vector<std::size_t> sizes(kFolds, n / kFolds);
  for (std::size_t i = 0; i < n % kFolds; ++i) ++sizes[i];
  rng.shuffle(sizes);  // which groups carry the extra subject is random too
  FoldPlan plan;
  std::size_t at = 0;
  for (std::size_t g = 0; g < kFolds; ++g) {
    plan.groups.emplace_back(subject_ids.begin() + at, subject_ids.begin() + at + sizes[g]);
    at += sizes[g];
  }
  return plan;
}

void synth_dataset(const SynthSpec& spec, const std::filesystem::path& out_dir) {
  if (spec.n_subjects < 2) throw ConfigError("synthetic dataset needs at least 2 subjects");
  if (spec.n_channels == 0) throw ConfigError("synthetic dataset needs at least 1 channel");
  if (spec.sample_rate_hz <= 0 || spec.duration_s <= 0)
    throw ConfigError("synthetic sample rate and duration must be positive");
  if (spec.class_separation < 0) throw ConfigError("class_separation must be >= 0");
  std::filesystem::create_directories(out_dir);

  const std::size_t N = static_cast<std::size_t>(spec.sample_rate_hz * spec.duration_s);
  const std::size_t V = spec.n_channels;
  constexpr double kTwoPi = 2.0 * std::numbers::pi;
  // Fixed spectral recipe: theta 6 Hz, alpha 10 Hz (class-dependent), beta
  // 21 Hz, unit-variance white noise.
  constexpr double kThetaHz = 6.0, kAlphaHz = 10.0, kBetaHz = 21.0;
  constexpr double kThetaAmp = 1.0, kAlphaAmp = 1.0, kBetaAmp = 0.5, kNoiseSigma = 1.0;

  ordered_json manifest;
  manifest["dataset_name"] = "synthetic";
  manifest["sample_rate_hz"] = spec.sample_rate_hz;
  manifest["n_channels"] = V;
  manifest["subjects"] = ordered_json::array();

  for (std::size_t s = 0; s < spec.n_subjects; ++s) {
    const bool depressed = (s % 2) == 1;
    Rng rng(splitmix64(splitmix64(spec.seed) ^ (s + 1)));
    std::vector<float> samples(V * N);
    const double alpha_amp =
        (kAlphaAmp + (depressed ? spec.class_separation * kNoiseSigma : 0.0)) *
        (1.0 + 0.05 * rng.normal());
    const double theta_amp = kThetaAmp * (1.0 + 0.05 * rng.normal());
    const double beta_amp = kBetaAmp * (1.0 + 0.05 * rng.normal());
    for (std::size_t v = 0; v < V; ++v) {
      const double p_theta = rng.uniform(0.0, kTwoPi);
      const double p_alpha = rng.uniform(0.0, kTwoPi);
      const double p_beta = rng.uniform(0.0, kTwoPi);
      for (std::size_t n = 0; n < N; ++n) {
        const double t = static_cast<double>(n) / spec.sample_rate_hz;
        const double x = theta_amp * std::sin(kTwoPi * kThetaHz * t + p_theta) +
                         alpha_amp * std::sin(kTwoPi * kAlphaHz * t + p_alpha) +
                         beta_amp * std::sin(kTwoPi * kBetaHz * t + p_beta) +
                         kNoiseSigma * rng.normal();
        samples[v * N + n] = static_cast<float>(x);
      }
    }
    char id[16];
    std::snprintf(id, sizeof(id), "s%03zu", s + 1);
    const std::string file = std::string(id) + ".f32";
    atomic_write_bytes(out_dir / file, samples.data(), samples.size() * sizeof(float));
    ordered_json entry;
    entry["id"] = id;
    entry["label"] = depressed ? "depressed" : "control";
    entry["file"] = file;
    entry["n_samples"] = N;
    manifest["subjects"].push_back(entry);
  }
  atomic_write_text(out_dir / "manifest.json", manifest.dump(2) + "\n");

  // Electrodes on a unit sphere (Fibonacci spiral) so distance-based
  // adjacency rules have something to work with.
  std::ostringstream layout;
  layout << "name,x,y,z\n";
  const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
  for (std::size_t v = 0; v < V; ++v) {
    const double y = V == 1 ? 0.0 : 1.0 - 2.0 * (static_cast<double>(v) + 0.5) / V;
    const double r = std::sqrt(std::max(0.0, 1.0 - y * y));
    const double phi = golden * static_cast<double>(v);
    char row[128];
    std::snprintf(row, sizeof(row), "ch%02zu,%.6f,%.6f,%.6f\n", v + 1, r * std::cos(phi), y,
                  r * std::sin(phi));
    layout << row;
  }
  atomic_write_text(out_dir / "layout.csv", layout.str());
}

double alpha_band_power(const Recording& rec) {
  const std::size_t V = rec.samples.shape[0];
  const std::size_t N = rec.samples.shape[1];
  constexpr double kTwoPi = 2.0 * std::numbers::pi;
  double total = 0.0;
  for (std::size_t v = 0; v < V; ++v) {
    double cs = 0.0, sn = 0.0;
    for (std::size_t n = 0; n < N; ++n) {
      const double t = static_cast<double>(n) / rec.sample_rate_hz;
      const double x = rec.samples.data[v * N + n];
      cs += x * std::cos(kTwoPi * 10.0 * t);
      sn += x * std::sin(kTwoPi * 10.0 * t);
    }
    total += (cs * cs + sn * sn) / (static_cast<double>(N) * static_cast<double>(N));
  }
  return total / static_cast<double>(V);
}

void atomic_write_text(const std::filesystem::path& path, const std::string& contents) {
  atomic_write_bytes(path, contents.data(), contents.size());
}

void atomic_write_bytes(const std::filesystem::path& path, const void* bytes, std::size_t count) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + tmp);
    out.write(static_cast<const char*>(bytes), static_cast<std::streamsize>(count));
    if (!out) throw DataError("short write to " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace stnet
