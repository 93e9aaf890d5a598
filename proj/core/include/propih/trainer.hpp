#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "propih/adam.hpp"
#include "propih/data.hpp"
#include "propih/harmonet.hpp"
#include "propih/losses.hpp"

namespace propih {

struct TrainConfig {
  HarmonizerConfig model;
  double lr = 1e-4;
  int batch_size = 4;
  int steps = 0;
  std::uint64_t seed = 0;
  int checkpoint_every = 0;        // 0: only on demand
  std::string checkpoint_dir;     // required when checkpoint_every > 0
  std::string log_path;           // optional JSONL sink
  int threads = 1;                // per-sample forward/backward workers

  void validate() const;
};

TrainConfig train_config_from_json(const std::string& text);
std::string train_config_to_json(const TrainConfig& cfg);

struct TrainState {
  ModelWeights<float> model;
  AdamState<float> opt;
  // names of the parameters opt tracks, in slot order
  std::vector<std::string> opt_param_names;
  std::int64_t step = 0;
};

struct TrainOutcome {
  TrainState state;
  std::vector<LossReport> log;  // one report per executed step
};

// Loss graph for one sample: every stage's style + content terms plus, when
// labels are given, the exit-head BCE terms. Returns the scalar to
// differentiate and the double-precision report.
struct SampleLoss {
  Tensor<float> all;
  LossReport report;
  std::vector<std::string> warnings;
};
SampleLoss compute_sample_loss(const ModelWeights<float>& model,
                               const CompositeSample& sample,
                               const std::array<int, 3>* labels, Tape<float>& tape);

// Joint training of decoders, fusion, output convs, and exit head (the
// encoder stays frozen). Batches average per-sample gradients in a fixed
// order, so results are bit-identical for any thread count. Resumes from
// `resume` when given, cloning its parameters so the caller's state stays
// untouched; a non-finite loss term aborts with a diagnostic naming the
// term and step.
TrainOutcome train(const std::vector<CompositeSample>& data,
                   const std::vector<AnnotationRecord>& annotations,
                   const TrainConfig& cfg, const TrainState* resume = nullptr);

// Phase-two training: only GRU + head parameters update. The harmonization
// trunk is fixed, so pooled features are computed once per sample and reused
// every step.
TrainOutcome train_exit_head_only(const std::vector<CompositeSample>& data,
                                  const std::vector<AnnotationRecord>& annotations,
                                  const TrainConfig& cfg, const TrainState* resume = nullptr);

// Fraction of (sample, stage) exit labels the current head reproduces at the
// configured threshold.
double exit_label_accuracy(const ModelWeights<float>& model,
                           const std::vector<CompositeSample>& data,
                           const std::vector<AnnotationRecord>& annotations);

// Checkpoints carry the model (with config sidecar), optimizer moments, and
// the step counter; load + continue reproduces an uninterrupted run bit for
// bit in single-threaded mode.
void save_checkpoint(const std::string& path, const TrainState& state);
TrainState load_checkpoint(const std::string& path);

// Batch schedule: sample indices for one step, drawn from a per-epoch
// permutation seeded by (seed, epoch) alone. Exposed for tests.
std::vector<int> batch_indices(std::uint64_t seed, std::int64_t step, int n,
                               int batch_size);

}  // namespace propih
