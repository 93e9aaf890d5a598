#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "propih/data.hpp"
#include "propih/harmonet.hpp"

namespace propih {

// ---- exit-stage distribution ----

struct ExitHistogram {
  std::array<std::int64_t, 4> counts{};
  std::int64_t total = 0;

  std::array<double, 4> fractions() const;
  std::string to_json() const;
  std::string to_table() const;
};

ExitHistogram exit_histogram(const std::vector<int>& exit_stages);

// ---- pairwise preference ranking ----

// Aggregated pairwise outcomes; wins[i][j] = times method i beat method j.
struct PairwiseCounts {
  std::vector<std::string> methods;
  std::vector<std::vector<std::int64_t>> wins;

  int add_method(const std::string& name);
  int index_of(const std::string& name) const;  // -1 when absent
  void add_result(const std::string& a, const std::string& b, std::int64_t wins_a,
                  std::int64_t wins_b);
};

// CSV with header method_a,method_b,wins_a,wins_b; repeated pairs accumulate.
PairwiseCounts pairwise_counts_from_csv(const std::string& path);

struct BtScores {
  std::vector<std::string> methods;
  std::vector<double> scores;  // centered log-strengths
  int iterations = 0;
  bool converged = false;
  std::vector<double> log_likelihood;  // after each sweep; non-decreasing

  std::string to_json() const;
  std::string to_table() const;
};

// Bradley-Terry maximum likelihood via minorization-maximization sweeps:
//   s_i <- W_i / sum_{j != i} n_ij / (s_i + s_j)
// with a geometric-mean renormalization per sweep. Requires every method to
// appear in at least one comparison and the comparison graph to be connected;
// converges when max |delta log s| < tol.
BtScores bt_fit(const PairwiseCounts& counts, double tol = 1e-8, int max_iters = 10000);

// ---- deterministic cost model ----

// Conventions: one fused multiply-add counts as 2 FLOPs; conv cost is
// 2*kh*kw*Cin*Cout*H'*W' plus Cout*H'*W' for the bias; pooling, upsampling,
// and activations cost 1 per output element; a GRU step costs
// 2*3*(I*H + H*H) + 14*H plus 2*H + 2 for the scoring head; global average
// pooling costs its channel count.
struct FlopsReport {
  std::array<std::int64_t, 4> stage_flops{};  // incremental cost of stage k
  std::array<std::int64_t, 4> cumulative{};   // cost when exiting at stage k
  std::optional<std::array<double, 4>> exit_fractions;
  std::optional<double> expected_flops;  // under exit_fractions

  std::string to_json() const;
  std::string to_table() const;
};

// cumulative[k] covers encoder stages 1..k, decoder stacks 1..k, fusion
// stages 2..k, exit-head steps 1..min(k,3), and the stage-k output conv only.
FlopsReport count_flops(const HarmonizerConfig& cfg);
FlopsReport count_flops(const HarmonizerConfig& cfg,
                        const std::array<double, 4>& exit_fractions);

// ---- wall-clock timing ----

struct StageTimings {
  std::array<double, 4> mean_ms{};
  std::array<double, 4> median_ms{};
  std::array<double, 4> min_ms{};
  std::array<double, 4> max_ms{};
  int repetitions = 0;

  std::string to_json() const;
  std::string to_table() const;
};

// Times inference truncated at each exit stage (exit-head included, one
// rendered image), cycling through the provided samples.
StageTimings time_stages(const ModelWeights<float>& model,
                         const std::vector<CompositeSample>& samples,
                         int repetitions);

}  // namespace propih
