#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "propih/harmonet.hpp"

namespace propih {

// Per-step scalar loss bookkeeping, kept in double. The invariants
// total[k] = style[k] + content[k] and all = sum(total) + sum(present bce)
// hold exactly in double arithmetic.
struct LossReport {
  std::array<double, 4> style{};
  std::array<double, 4> content{};
  std::array<double, 4> total{};
  std::array<double, 3> bce{};
  std::array<bool, 3> bce_present{};
  double all = 0.0;

  // One JSONL record: step, sty1..4, con1..4, tot1..4, bce1..3, all.
  std::string to_json_line(std::int64_t step) const;
};

// Foreground style targets: masked mean/std of the adain-harmonized top
// branch, captured as plain values. The top branch is frozen and fed constant
// inputs, so these are constants of the optimization either way.
template <typename T>
struct StyleTargets {
  std::array<std::vector<T>, 4> mean;
  std::array<std::vector<T>, 4> stddev;
  std::array<bool, 4> empty{};  // stage had no foreground positions
  int stages = 0;
};

template <typename T>
StyleTargets<T> style_targets(const HarmonizedFeatures<T>& harmonized,
                              const StageFeatures<T>& top,
                              StatsMode mode = StatsMode::masked_region) {
  StyleTargets<T> t;
  t.stages = harmonized.stages;
  for (int k = 0; k < harmonized.stages; ++k) {
    if (harmonized.empty_foreground[static_cast<std::size_t>(k)]) {
      t.empty[static_cast<std::size_t>(k)] = true;
      continue;
    }
    MaskedStats<T> s = masked_stats(harmonized.features[static_cast<std::size_t>(k)],
                                    top.masks[static_cast<std::size_t>(k)], mode);
    t.mean[static_cast<std::size_t>(k)] = std::move(s.mean);
    t.stddev[static_cast<std::size_t>(k)] = std::move(s.stddev);
  }
  return t;
}

// Squared-gap contributions per stage term, for reporting and tests.
struct StyleBreakdown {
  std::array<double, 4> mean_sq{};
  std::array<double, 4> std_sq{};
  int terms = 0;  // number of (mean, std) term pairs that contributed
};

// Style loss of stage k from the re-encoded stage image: sum over k' of the
// squared gaps between the re-encoded foreground statistics and the targets.
// Progressive supervision sums k' = 1..k; the full-style ablation always sums
// k' = 1..4. Sum reduction over channels; the optional normalization divides
// each term pair by its channel count. Stages with an empty foreground are
// skipped (and reported through `warnings`).
template <typename T>
Tensor<T> style_loss_from_features(const StageFeatures<T>& reencoded,
                                   const StyleTargets<T>& targets, int k,
                                   bool full_all_stages, bool normalize,
                                   StatsMode mode, Tape<T>* tape,
                                   std::vector<std::string>* warnings = nullptr,
                                   StyleBreakdown* breakdown = nullptr) {
  if (k < 1 || k > 4) fail_validation("style_loss: stage must be 1..4, got ", k);
  const int upper = full_all_stages ? 4 : k;
  if (reencoded.stages < upper)
    fail_validation("style_loss: need ", upper, " re-encoded stages, got ",
                    reencoded.stages);
  Tensor<T> acc;
  for (int s = 1; s <= upper; ++s) {
    if (targets.empty[static_cast<std::size_t>(s - 1)]) {
      if (warnings)
        warnings->push_back("style stage " + std::to_string(s) +
                            ": empty foreground, term skipped");
      continue;
    }
    const auto& feat = reencoded.features[static_cast<std::size_t>(s - 1)];
    const auto& mask = reencoded.masks[static_cast<std::size_t>(s - 1)];
    const auto& tgt_mean = targets.mean[static_cast<std::size_t>(s - 1)];
    const auto& tgt_std = targets.stddev[static_cast<std::size_t>(s - 1)];
    const int c = feat.dim(1);
    if (static_cast<int>(tgt_mean.size()) != c)
      fail_validation("style_loss: target for stage ", s, " has ", tgt_mean.size(),
                      " channels, features have ", c);
    Tensor<T> mean_term = sum_sq_diff(masked_mean(feat, mask, mode, tape),
                                      Tensor<T>({c}, tgt_mean), tape);
    Tensor<T> std_term = sum_sq_diff(masked_std(feat, mask, mode, tape),
                                     Tensor<T>({c}, tgt_std), tape);
    if (normalize) {
      const T inv = static_cast<T>(1.0 / static_cast<double>(c));
      mean_term = mul_scalar(mean_term, inv, tape);
      std_term = mul_scalar(std_term, inv, tape);
    }
    if (breakdown) {
      breakdown->mean_sq[static_cast<std::size_t>(s - 1)] =
          static_cast<double>(mean_term.item());
      breakdown->std_sq[static_cast<std::size_t>(s - 1)] =
          static_cast<double>(std_term.item());
      breakdown->terms += 1;
    }
    Tensor<T> pair = add(mean_term, std_term, tape);
    acc = acc.defined() ? add(acc, pair, tape) : pair;
  }
  return acc.defined() ? acc : Tensor<T>::scalar(T(0));
}

// Convenience form that re-encodes the stage image itself.
template <typename T>
Tensor<T> style_loss(const Tensor<T>& stage_image, const Tensor<T>& fg_mask, int k,
                     const StyleTargets<T>& targets, const EncoderWeights<T>& enc,
                     bool full_all_stages, bool normalize, StatsMode mode,
                     Tape<T>* tape, std::vector<std::string>* warnings = nullptr) {
  StageFeatures<T> re =
      encode(stage_image, fg_mask, enc, tape, full_all_stages ? 4 : k);
  return style_loss_from_features(re, targets, k, full_all_stages, normalize, mode,
                                  tape, warnings);
}

// Content preservation: squared gap between deepest-stage feature maps of the
// stage image and of the original composite, over the full map.
template <typename T>
Tensor<T> content_loss(const Tensor<T>& phi4_image, const Tensor<T>& phi4_composite,
                       bool normalize, Tape<T>* tape) {
  detail::check_same_shape("content_loss", phi4_image, phi4_composite);
  Tensor<T> l = sum_sq_diff(phi4_image, phi4_composite, tape);
  if (normalize) {
    detail::check_rank("content_loss", phi4_image, 4);
    l = mul_scalar(l, static_cast<T>(1.0 / static_cast<double>(phi4_image.dim(1))), tape);
  }
  return l;
}

// Exit supervision for one stage; score is the [1,1] head output.
template <typename T>
Tensor<T> exit_bce(const Tensor<T>& score, int label, Tape<T>* tape) {
  return binary_cross_entropy(score, label, tape);
}

// Assembles the report from already-evaluated scalars. Under
// last_stage_loss_only the early-stage totals are zero by construction and
// `all` reduces to total[4] plus the exit terms.
LossReport total_loss(const std::array<double, 4>& style,
                      const std::array<double, 4>& content,
                      const std::array<double, 3>& bce,
                      const std::array<bool, 3>& bce_present,
                      bool last_stage_loss_only);

}  // namespace propih
