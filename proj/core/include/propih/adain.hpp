#pragma once

#include <array>
#include <string>
#include <vector>

#include "propih/encoder.hpp"
#include "propih/ops.hpp"

namespace propih {

// Plain-value per-channel statistics of the selected region (no tape).
template <typename T>
struct MaskedStats {
  std::vector<T> mean;
  std::vector<T> stddev;  // population
  std::int64_t count = 0;
};

template <typename T>
MaskedStats<T> masked_stats(const Tensor<T>& feat, const Tensor<T>& mask,
                            StatsMode mode = StatsMode::masked_region) {
  auto l = detail::masked_layout("masked_stats", feat, mask, mode);
  auto mu = detail::masked_mean_raw(feat, mask, l);
  auto var = detail::masked_var_raw(feat, mask, l, mu, mode);
  MaskedStats<T> s;
  s.count = l.count;
  s.mean.resize(mu.size());
  s.stddev.resize(var.size());
  for (std::size_t i = 0; i < mu.size(); ++i) {
    s.mean[i] = static_cast<T>(mu[i]);
    s.stddev[i] = static_cast<T>(std::sqrt(std::max(var[i], 0.0)));
  }
  return s;
}

template <typename T>
struct AdainResult {
  Tensor<T> features;
  bool empty_foreground = false;
};

// Re-normalizes the foreground region of each channel to the background's
// statistics:
//   out = sigma_bg * (x - mu_fg) / (sigma_fg + eps) + mu_bg   inside fg,
//   out = x                                                   elsewhere.
// Background positions are copied bit-identically. The transform is
// differentiable through the statistics. An empty foreground yields the input
// unchanged; an empty background is an error since there is no style source.
template <typename T>
AdainResult<T> adain(const Tensor<T>& feat, const Tensor<T>& fg_mask,
                     const Tensor<T>& bg_mask, T eps, Tape<T>* tape = nullptr,
                     StatsMode mode = StatsMode::masked_region) {
  detail::require_defined<T>("adain", {&feat, &fg_mask, &bg_mask});
  detail::check_rank("adain", feat, 4);
  detail::check_same_shape("adain", fg_mask, bg_mask);
  detail::check_binary_mask("adain", fg_mask);
  detail::check_binary_mask("adain", bg_mask);
  if (eps <= T(0)) fail_validation("adain: eps must be positive");
  const auto& fv = fg_mask.values();
  const auto& bv = bg_mask.values();
  std::int64_t fg_count = 0, bg_count = 0;
  for (std::size_t i = 0; i < fv.size(); ++i) {
    if (fv[i] + bv[i] != T(1))
      fail_validation("adain: fg and bg masks must partition every position");
    if (fv[i] == T(1))
      ++fg_count;
    else
      ++bg_count;
  }
  if (fg_count == 0) return {feat, true};
  if (bg_count == 0)
    fail_validation("adain: background mask is empty, no style statistics available");

  Tensor<T> mu_f = masked_mean(feat, fg_mask, mode, tape);
  Tensor<T> sigma_f = masked_std(feat, fg_mask, mode, tape);
  Tensor<T> mu_b = masked_mean(feat, bg_mask, mode, tape);
  Tensor<T> sigma_b = masked_std(feat, bg_mask, mode, tape);

  Tensor<T> centered = shift_channels(feat, mul_scalar(mu_f, T(-1), tape), tape);
  Tensor<T> gain = div(sigma_b, add_scalar(sigma_f, eps, tape), tape);
  Tensor<T> transformed =
      shift_channels(scale_channels(centered, gain, tape), mu_b, tape);
  return {mask_merge(transformed, feat, fg_mask, tape), false};
}

template <typename T>
struct HarmonizedFeatures {
  std::array<Tensor<T>, 4> features;
  std::array<bool, 4> empty_foreground{};
  int stages = 0;
};

// Applies adain at every encoded stage, using each stage's downsampled
// foreground mask; the background mask is its complement. Per-stage empty
// foregrounds are recorded and reported through `warnings` when given.
template <typename T>
HarmonizedFeatures<T> harmonize_features(const StageFeatures<T>& top, T eps,
                                         Tape<T>* tape = nullptr,
                                         StatsMode mode = StatsMode::masked_region,
                                         std::vector<std::string>* warnings = nullptr) {
  HarmonizedFeatures<T> out;
  for (int k = 0; k < top.stages; ++k) {
    const Tensor<T>& fg = top.masks[static_cast<std::size_t>(k)];
    std::vector<T> inv(fg.values().size());
    for (std::size_t i = 0; i < inv.size(); ++i)
      inv[i] = fg.values()[i] == T(1) ? T(0) : T(1);
    Tensor<T> bg(fg.shape(), std::move(inv));
    auto r = adain(top.features[static_cast<std::size_t>(k)], fg, bg, eps, tape, mode);
    out.features[static_cast<std::size_t>(k)] = r.features;
    out.empty_foreground[static_cast<std::size_t>(k)] = r.empty_foreground;
    if (r.empty_foreground && warnings)
      warnings->push_back("stage " + std::to_string(k + 1) +
                          ": empty foreground after downsampling, features passed through");
    out.stages = k + 1;
  }
  return out;
}

}  // namespace propih
