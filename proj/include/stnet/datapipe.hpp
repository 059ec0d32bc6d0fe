#pragma once

// Data ingestion and slicing: recording manifests, per-window slicing with
// boundary intervals, electrode layouts and baseline adjacency, cross-subject
// fold assignment, and a synthetic EEG generator for tests and demos.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "stnet/tensor.hpp"

namespace stnet {

enum class Label { control = 0, depressed = 1 };

inline const char* label_name(Label l) { return l == Label::control ? "control" : "depressed"; }

struct Recording {
  std::string subject_id;
  Label label = Label::control;
  double sample_rate_hz = 0.0;
  std::size_t n_channels = 0;
  Tensor<float> samples;  // [V, N], channel-major
};

struct Dataset {
  std::string name;
  double sample_rate_hz = 0.0;
  std::size_t n_channels = 0;
  std::vector<Recording> recordings;
};

// Reads manifest.json plus the per-subject raw little-endian float32 files it
// references (paths are relative to the manifest). Rejects missing files,
// size mismatches, unknown labels, duplicate ids, and non-finite samples.
Dataset load_dataset(const std::filesystem::path& manifest_path);

// Splits [V, N] into T equal windows of len = floor(N / T); the tail is
// truncated. Result is [T, V, len].
Tensor<float> window_subject(const Recording& rec, std::size_t T);

struct IntervalParts {
  Tensor<float> intervals;    // [T-1, V, 2*ts]
  Tensor<float> first_start;  // [V, ts]
  Tensor<float> last_end;     // [V, ts]
};

// Interval t spans the boundary between windows t and t+1: the last ts
// samples of window t followed by the first ts samples of window t+1.
// first_start / last_end are the opening and closing ts samples of the
// recording's windowed portion.
IntervalParts extract_intervals(const Tensor<float>& windows, std::size_t ts);

struct ElectrodeLayout {
  std::vector<std::string> names;
  std::vector<std::array<double, 3>> positions;
};

// CSV with a "name,x,y,z" header row.
ElectrodeLayout load_layout_csv(const std::filesystem::path& path);

// All adjacency builders return a binary symmetric [V, V] matrix with a zero
// diagonal.
Tensor<float> adjacency_threshold(const ElectrodeLayout& layout, double tau);
Tensor<float> adjacency_k_nearest(const ElectrodeLayout& layout, std::size_t k);
Tensor<float> adjacency_from_file(const std::filesystem::path& path);
void write_adjacency_csv(const std::filesystem::path& path, const Tensor<float>& adj);

struct FoldPlan {
  std::vector<std::vector<std::string>> groups;  // exactly 10, a partition of the ids
};

// Deterministic tenfold cross-subject split: group sizes differ by at most
// one and exactly (n mod 10) randomly chosen groups carry the extra subject.
FoldPlan tenfold_split(std::vector<std::string> subject_ids, std::uint64_t seed);

struct SynthSpec {
  std::size_t n_subjects = 12;
  std::size_t n_channels = 8;
  double sample_rate_hz = 256.0;
  double duration_s = 16.0;
  double class_separation = 5.0;  // alpha-band amplitude gap in noise-sigma units
  std::uint64_t seed = 1;
};

// Writes manifest.json, one .f32 file per subject, and layout.csv into
// out_dir. Subjects alternate control/depressed; the depressed class gets an
// extra class_separation units of 10 Hz amplitude. Identical spec -> byte
// identical output.
void synth_dataset(const SynthSpec& spec, const std::filesystem::path& out_dir);

// Mean 10 Hz band power per subject (Goertzel-style projection averaged over
// channels); the linear-probe oracle for the generator.
double alpha_band_power(const Recording& rec);

// Write-then-rename helpers so output files are never observed half-written.
void atomic_write_text(const std::filesystem::path& path, const std::string& contents);
void atomic_write_bytes(const std::filesystem::path& path, const void* bytes, std::size_t count);

}  // namespace stnet
