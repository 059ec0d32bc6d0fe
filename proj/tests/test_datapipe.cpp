#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "stnet/datapipe.hpp"
#include "stnet/errors.hpp"

using namespace stnet;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
  auto dir = fs::temp_directory_path() / ("stnet_test_" + tag);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

Recording ramp_recording(std::size_t V, std::size_t N) {
  Recording rec;
  rec.subject_id = "ramp";
  rec.label = Label::control;
  rec.sample_rate_hz = 100.0;
  rec.n_channels = V;
  rec.samples = Tensor<float>({V, N});
  for (std::size_t v = 0; v < V; ++v)
    for (std::size_t n = 0; n < N; ++n)
      rec.samples.data[v * N + n] = static_cast<float>(v) * 1000.0f + static_cast<float>(n);
  return rec;
}

ElectrodeLayout collinear3() {
  ElectrodeLayout l;
  l.names = {"a", "b", "c"};
  l.positions = {{{0, 0, 0}}, {{1, 0, 0}}, {{2, 0, 0}}};
  return l;
}

}  // namespace

// ---------------------------------------------------------------------------
// windowing
// ---------------------------------------------------------------------------

TEST_CASE("window lengths for the reference sampling setups") {
  // 500 samples over 25 windows per second-style budgets used elsewhere; the
  // anchors here are the division itself.
  auto rec = ramp_recording(1, 250000);
  auto w = window_subject(rec, 20);
  CHECK(w.shape == Shape{20, 1, 12500});

  auto rec2 = ramp_recording(1, 75000);
  CHECK(window_subject(rec2, 20).shape == Shape{20, 1, 3750});
}

TEST_CASE("windows are consecutive equal slices per channel") {
  auto rec = ramp_recording(2, 100);
  auto w = window_subject(rec, 4);
  REQUIRE(w.shape == Shape{4, 2, 25});
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t v = 0; v < 2; ++v)
      for (std::size_t n = 0; n < 25; ++n)
        CHECK(w.at({t, v, n}) == static_cast<float>(v) * 1000.0f +
                                     static_cast<float>(t * 25 + n));
}

TEST_CASE("windowing drops the remainder and validates T") {
  auto rec = ramp_recording(1, 103);
  auto w = window_subject(rec, 4);
  CHECK(w.shape == Shape{4, 1, 25});  // 3 trailing samples unused
  CHECK(w.at({3, 0, 24}) == 99.0f);

  CHECK_THROWS_AS(window_subject(rec, 1), std::invalid_argument);
  CHECK_THROWS_AS(window_subject(ramp_recording(1, 5), 6), DataError);
}

TEST_CASE("interval extraction stitches window boundaries") {
  auto rec = ramp_recording(2, 120);
  auto w = window_subject(rec, 4);  // len 30
  const std::size_t ts = 5;
  auto parts = extract_intervals(w, ts);
  REQUIRE(parts.intervals.shape == Shape{3, 2, 10});
  REQUIRE(parts.first_start.shape == Shape{2, 5});
  REQUIRE(parts.last_end.shape == Shape{2, 5});

  for (std::size_t t = 0; t + 1 < 4; ++t)
    for (std::size_t v = 0; v < 2; ++v)
      for (std::size_t i = 0; i < 2 * ts; ++i) {
        const float expect = i < ts ? w.at({t, v, 30 - ts + i}) : w.at({t + 1, v, i - ts});
        CHECK(parts.intervals.at({t, v, i}) == expect);
      }
  for (std::size_t v = 0; v < 2; ++v)
    for (std::size_t i = 0; i < ts; ++i) {
      CHECK(parts.first_start.at({v, i}) == w.at({0, v, i}));
      CHECK(parts.last_end.at({v, i}) == w.at({3, v, 30 - ts + i}));
    }
}

TEST_CASE("interval extraction rejects impossible widths") {
  auto w = window_subject(ramp_recording(1, 40), 4);  // len 10
  CHECK_THROWS_AS(extract_intervals(w, 0), ConfigError);
  CHECK_THROWS_AS(extract_intervals(w, 6), ConfigError);  // 2*6 > 10
  CHECK_NOTHROW(extract_intervals(w, 5));                 // 2*5 == 10 is allowed
}

// ---------------------------------------------------------------------------
// tenfold split
// ---------------------------------------------------------------------------

TEST_CASE("tenfold split partitions 52 and 53 subjects with balanced sizes") {
  for (std::size_t n : {std::size_t(52), std::size_t(53), std::size_t(10), std::size_t(24)}) {
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < n; ++i) ids.push_back("sub" + std::to_string(i));
    auto plan = tenfold_split(ids, 7);
    REQUIRE(plan.groups.size() == 10);

    std::multiset<std::size_t> sizes;
    std::set<std::string> seen;
    for (const auto& g : plan.groups) {
      sizes.insert(g.size());
      for (const auto& id : g) CHECK(seen.insert(id).second);  // disjoint
    }
    CHECK(seen.size() == n);  // exhaustive
    const std::size_t lo = n / 10, extra = n % 10;
    CHECK(sizes.count(lo) == 10 - extra);
    if (extra) CHECK(sizes.count(lo + 1) == extra);
  }
}

TEST_CASE("tenfold split is seed-deterministic and order-independent") {
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < 23; ++i) ids.push_back("p" + std::to_string(i));
  auto a = tenfold_split(ids, 42);
  auto b = tenfold_split(ids, 42);
  CHECK(a.groups == b.groups);

  std::vector<std::string> shuffled = ids;
  std::reverse(shuffled.begin(), shuffled.end());
  auto c = tenfold_split(shuffled, 42);
  CHECK(a.groups == c.groups);

  auto d = tenfold_split(ids, 43);
  CHECK(a.groups != d.groups);
}

TEST_CASE("tenfold split rejects small or duplicated id sets") {
  std::vector<std::string> nine(9, "");
  for (std::size_t i = 0; i < 9; ++i) nine[i] = "x" + std::to_string(i);
  CHECK_THROWS_AS(tenfold_split(nine, 1), DataError);

  std::vector<std::string> dup;
  for (std::size_t i = 0; i < 10; ++i) dup.push_back("x" + std::to_string(i % 9));
  CHECK_THROWS_AS(tenfold_split(dup, 1), DataError);
}

// ---------------------------------------------------------------------------
// electrode adjacency
// ---------------------------------------------------------------------------

TEST_CASE("k-nearest adjacency on three collinear electrodes, ties to lower index") {
  auto adj = adjacency_k_nearest(collinear3(), 1);
  // b is equidistant from a and c; the tie goes to a. Union-symmetrized
  // edges: {a,b} and {b,c}.
  const std::vector<float> expect = {0, 1, 0, 1, 0, 1, 0, 1, 0};
  CHECK(adj.data == expect);
}

TEST_CASE("threshold adjacency keeps pairs within tau") {
  auto near = adjacency_threshold(collinear3(), 1.5);
  CHECK(near.data == std::vector<float>{0, 1, 0, 1, 0, 1, 0, 1, 0});
  auto all = adjacency_threshold(collinear3(), 2.5);
  CHECK(all.data == std::vector<float>{0, 1, 1, 1, 0, 1, 1, 1, 0});
  CHECK_THROWS_AS(adjacency_threshold(collinear3(), 0.0), ConfigError);
}

TEST_CASE("adjacency matrices are always binary, symmetric, zero-diagonal") {
  ElectrodeLayout l;
  for (int i = 0; i < 6; ++i) {
    l.names.push_back("e" + std::to_string(i));
    l.positions.push_back({{std::cos(i * 1.1), std::sin(i * 0.7), 0.3 * i}});
  }
  for (std::size_t k = 1; k < 6; ++k) {
    auto adj = adjacency_k_nearest(l, k);
    for (std::size_t i = 0; i < 6; ++i) {
      CHECK(adj.data[i * 6 + i] == 0.0f);
      for (std::size_t j = 0; j < 6; ++j) {
        CHECK((adj.data[i * 6 + j] == 0.0f || adj.data[i * 6 + j] == 1.0f));
        CHECK(adj.data[i * 6 + j] == adj.data[j * 6 + i]);
      }
    }
  }
  CHECK_THROWS_AS(adjacency_k_nearest(l, 0), ConfigError);
  CHECK_THROWS_AS(adjacency_k_nearest(l, 6), ConfigError);
}

TEST_CASE("adjacency round-trips through CSV and bad files are rejected") {
  auto dir = temp_dir("adj");
  auto adj = adjacency_k_nearest(collinear3(), 1);
  write_adjacency_csv(dir / "adj.csv", adj);
  auto back = adjacency_from_file(dir / "adj.csv");
  CHECK(back.data == adj.data);

  atomic_write_text(dir / "nonsym.csv", "0,1,0\n0,0,1\n0,1,0\n");
  CHECK_THROWS_AS(adjacency_from_file(dir / "nonsym.csv"), DataError);
  atomic_write_text(dir / "diag.csv", "1,1,0\n1,0,1\n0,1,0\n");
  CHECK_THROWS_AS(adjacency_from_file(dir / "diag.csv"), DataError);
  atomic_write_text(dir / "nonbin.csv", "0,2,0\n2,0,1\n0,1,0\n");
  CHECK_THROWS_AS(adjacency_from_file(dir / "nonbin.csv"), DataError);
  atomic_write_text(dir / "ragged.csv", "0,1\n1,0,1\n");
  CHECK_THROWS_AS(adjacency_from_file(dir / "ragged.csv"), DataError);
}

// ---------------------------------------------------------------------------
// synthetic dataset
// ---------------------------------------------------------------------------

TEST_CASE("synthetic generation is byte-identical across runs") {
  SynthSpec spec;
  spec.n_subjects = 4;
  spec.n_channels = 3;
  spec.sample_rate_hz = 128.0;
  spec.duration_s = 2.0;
  spec.seed = 9;
  auto d1 = temp_dir("synth1");
  auto d2 = temp_dir("synth2");
  synth_dataset(spec, d1);
  synth_dataset(spec, d2);
  for (const char* name : {"manifest.json", "layout.csv", "s001.f32", "s004.f32"})
    CHECK(slurp(d1 / name) == slurp(d2 / name));

  SynthSpec other = spec;
  other.seed = 10;
  auto d3 = temp_dir("synth3");
  synth_dataset(other, d3);
  CHECK(slurp(d1 / "s001.f32") != slurp(d3 / "s001.f32"));
}

TEST_CASE("synthetic dataset loads back with alternating labels") {
  SynthSpec spec;
  spec.n_subjects = 6;
  spec.n_channels = 2;
  spec.sample_rate_hz = 64.0;
  spec.duration_s = 1.0;
  auto dir = temp_dir("synth_load");
  synth_dataset(spec, dir);
  auto ds = load_dataset(dir / "manifest.json");
  REQUIRE(ds.recordings.size() == 6);
  CHECK(ds.n_channels == 2);
  CHECK(ds.sample_rate_hz == 64.0);
  for (std::size_t i = 0; i < 6; ++i) {
    CHECK(ds.recordings[i].label == (i % 2 ? Label::depressed : Label::control));
    CHECK(ds.recordings[i].samples.shape == Shape{2, 64});
  }
  auto layout = load_layout_csv(dir / "layout.csv");
  CHECK(layout.names.size() == 2);

  std::set<std::string> ids;
  for (const auto& r : ds.recordings) ids.insert(r.subject_id);
  CHECK(ids.size() == 6);
}

TEST_CASE("oscillatory band power separates the synthetic classes") {
  SynthSpec spec;  // defaults: 12 subjects, 8 channels, 256 Hz, 16 s, gap 5
  auto dir = temp_dir("synth_power");
  synth_dataset(spec, dir);
  auto ds = load_dataset(dir / "manifest.json");

  std::vector<double> control, depressed;
  for (const auto& r : ds.recordings)
    (r.label == Label::control ? control : depressed).push_back(alpha_band_power(r));
  REQUIRE(control.size() == 6);
  REQUIRE(depressed.size() == 6);

  // thresholding at the midpoint between class means must recover >= 95 %
  double mc = 0, md = 0;
  for (double v : control) mc += v;
  for (double v : depressed) md += v;
  mc /= control.size();
  md /= depressed.size();
  CHECK(md > mc);
  const double thr = 0.5 * (mc + md);
  std::size_t correct = 0;
  for (double v : control) correct += (v < thr);
  for (double v : depressed) correct += (v > thr);
  CHECK(static_cast<double>(correct) / 12.0 >= 0.95);
}

TEST_CASE("synthetic spec validation") {
  auto dir = temp_dir("synth_bad");
  SynthSpec bad;
  bad.n_subjects = 1;
  CHECK_THROWS_AS(synth_dataset(bad, dir), ConfigError);
  bad = SynthSpec{};
  bad.class_separation = -1;
  CHECK_THROWS_AS(synth_dataset(bad, dir), ConfigError);
}

// ---------------------------------------------------------------------------
// manifest validation
// ---------------------------------------------------------------------------

namespace {

// A minimal valid manifest with one 2-channel, 4-sample subject.
void write_tiny_dataset(const fs::path& dir, const std::string& label = "control",
                        std::size_t n_samples = 4, std::size_t payload_floats = 8,
                        float fill = 0.25f) {
  fs::create_directories(dir);
  std::vector<float> payload(payload_floats, fill);
  atomic_write_bytes(dir / "x.f32", payload.data(), payload.size() * sizeof(float));
  std::string manifest = R"({
  "dataset_name": "tiny",
  "sample_rate_hz": 10.0,
  "n_channels": 2,
  "subjects": [
    {"id": "s1", "label": ")" + label + R"(", "file": "x.f32", "n_samples": )" +
                         std::to_string(n_samples) + R"(}
  ]
})";
  atomic_write_text(dir / "manifest.json", manifest);
}

}  // namespace

TEST_CASE("manifest loader accepts a tiny valid dataset") {
  auto dir = temp_dir("man_ok");
  write_tiny_dataset(dir);
  auto ds = load_dataset(dir / "manifest.json");
  REQUIRE(ds.recordings.size() == 1);
  CHECK(ds.recordings[0].subject_id == "s1");
  CHECK(ds.recordings[0].samples.shape == Shape{2, 4});
  CHECK(ds.recordings[0].samples.data[0] == 0.25f);
}

TEST_CASE("manifest loader rejects malformed inputs") {
  auto dir = temp_dir("man_bad");

  write_tiny_dataset(dir, "melancholic");
  CHECK_THROWS_AS(load_dataset(dir / "manifest.json"), DataError);

  // payload byte count disagrees with n_channels * n_samples
  write_tiny_dataset(dir, "control", 4, 6);
  CHECK_THROWS_AS(load_dataset(dir / "manifest.json"), DataError);

  // non-finite samples
  write_tiny_dataset(dir, "control", 4, 8,
                     std::numeric_limits<float>::quiet_NaN());
  CHECK_THROWS_AS(load_dataset(dir / "manifest.json"), DataError);

  // missing required key
  atomic_write_text(dir / "manifest.json",
                    R"({"dataset_name": "x", "sample_rate_hz": 10.0, "n_channels": 2})");
  CHECK_THROWS_AS(load_dataset(dir / "manifest.json"), DataError);

  // not JSON at all
  atomic_write_text(dir / "manifest.json", "not json");
  CHECK_THROWS_AS(load_dataset(dir / "manifest.json"), DataError);

  CHECK_THROWS_AS(load_dataset(dir / "missing.json"), DataError);
}

TEST_CASE("duplicate subject ids are rejected") {
  auto dir = temp_dir("man_dup");
  fs::create_directories(dir);
  std::vector<float> payload(8, 0.1f);
  atomic_write_bytes(dir / "x.f32", payload.data(), payload.size() * sizeof(float));
  atomic_write_text(dir / "manifest.json", R"({
  "dataset_name": "dup",
  "sample_rate_hz": 10.0,
  "n_channels": 2,
  "subjects": [
    {"id": "s1", "label": "control", "file": "x.f32", "n_samples": 4},
    {"id": "s1", "label": "depressed", "file": "x.f32", "n_samples": 4}
  ]
})");
  CHECK_THROWS_AS(load_dataset(dir / "manifest.json"), DataError);
}

TEST_CASE("layout loader enforces the header and field count") {
  auto dir = temp_dir("layout");
  atomic_write_text(dir / "ok.csv", "name,x,y,z\nc1,0,0,0\nc2,1,0,0\n");
  auto l = load_layout_csv(dir / "ok.csv");
  CHECK(l.names == std::vector<std::string>{"c1", "c2"});

  atomic_write_text(dir / "bad_head.csv", "electrode,x,y,z\nc1,0,0,0\n");
  CHECK_THROWS_AS(load_layout_csv(dir / "bad_head.csv"), DataError);
  atomic_write_text(dir / "short_row.csv", "name,x,y,z\nc1,0,0\n");
  CHECK_THROWS_AS(load_layout_csv(dir / "short_row.csv"), DataError);
  atomic_write_text(dir / "bad_num.csv", "name,x,y,z\nc1,zero,0,0\n");
  CHECK_THROWS_AS(load_layout_csv(dir / "bad_num.csv"), DataError);
}

TEST_CASE("atomic writes leave no temp files behind") {
  auto dir = temp_dir("atomic");
  atomic_write_text(dir / "a.txt", "hello");
  CHECK(slurp(dir / "a.txt") == "hello");
  std::size_t entries = 0;
  for (auto& e : fs::directory_iterator(dir)) {
    ++entries;
    CHECK(e.path().extension() != ".tmp");
  }
  CHECK(entries == 1);
}
