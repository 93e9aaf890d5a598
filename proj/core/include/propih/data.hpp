#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "propih/rng.hpp"
#include "propih/tensor.hpp"

namespace propih {

// Composition keeps the pasted region between these fractions of the frame.
inline constexpr double kMinForegroundRatio = 0.05;
inline constexpr double kMaxForegroundRatio = 0.3;

struct CompositeSample {
  std::string id;
  Tensor<float> composite;   // [1,3,S,S], values in [0,1]
  Tensor<float> fg_mask;     // [1,1,S,S], binary
  Tensor<float> background;  // optional [1,3,S,S]

  double foreground_ratio() const;
  Tensor<float> bg_mask() const;  // complement of fg_mask
  // Structural checks; ratio bounds are enforced only when check_ratio.
  void validate(bool check_ratio = true) const;
};

// ---- image files ----
// Images are binary PPM (P6, maxval 255) scaled to [0,1]; masks are binary
// PGM (P5, maxval 255) thresholded at 128. Saving clamps to [0,1] and rounds
// half-up, so save(load(f)) reproduces f byte for byte.

Tensor<float> load_image(const std::string& path);
void save_image(const Tensor<float>& image, const std::string& path);
Tensor<float> load_mask(const std::string& path);
void save_mask(const Tensor<float>& mask, const std::string& path);

// ---- composition ----

struct Placement {
  int row = 0;
  int col = 0;
};

// Pastes fg (with its mask) onto the background at the placement. The pasted
// area fraction must respect the ratio bounds.
CompositeSample compose(const Tensor<float>& fg_image, const Tensor<float>& fg_mask,
                        const Tensor<float>& background, Placement at,
                        const std::string& id);

// Uniformly random placement that keeps the foreground in frame.
CompositeSample compose_random(const Tensor<float>& fg_image,
                               const Tensor<float>& fg_mask,
                               const Tensor<float>& background, Rng& rng,
                               const std::string& id);

// Procedural corpus: value-noise backgrounds with random palettes, elliptical
// or rectangular foregrounds with a deliberate appearance gap. Deterministic
// in (count, size, seed).
std::vector<CompositeSample> synth_dataset(int count, int size, std::uint64_t seed);

// ---- manifests ----

struct ManifestEntry {
  std::string id;
  std::string composite;   // paths relative to the manifest file
  std::string mask;
  std::string background;  // optional, empty when absent
};

void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries);
std::vector<ManifestEntry> read_manifest(const std::string& path);

// Loads every sample listed by a manifest, validating each.
std::vector<CompositeSample> load_dataset(const std::string& manifest_path);

// Writes images plus a manifest ("manifest.json") into dir; returns the
// manifest path.
std::string save_dataset(const std::string& dir, const std::vector<CompositeSample>& samples);

// ---- exit annotations ----

// Stage annotation k' in 1..4 maps to per-stage exit labels
// y_k = 1 iff k >= k' for k = 1..3: "good enough from stage k' onward".
std::array<int, 3> derive_labels(int exit_stage);

struct AnnotationRecord {
  std::string sample_id;
  int exit_stage = 4;
  std::array<int, 3> labels{};
};

// JSONL, one {"id": ..., "exit_stage": ...} per line, unique ids.
std::vector<AnnotationRecord> load_annotations(const std::string& path);
void write_annotations(const std::string& path, const std::vector<AnnotationRecord>& recs);

// Raw (possibly repeated) per-voter stage picks for one or more samples.
std::vector<std::pair<std::string, int>> load_votes(const std::string& path);

// Plurality vote per sample id; ties resolve to the earliest stage. Record
// order follows first appearance of each id.
std::vector<AnnotationRecord> aggregate_votes(
    const std::vector<std::pair<std::string, int>>& votes);

}  // namespace propih
