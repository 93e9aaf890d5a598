#pragma once

#include <array>
#include <string>
#include <vector>

#include "propih/ops.hpp"
#include "propih/rng.hpp"

namespace propih {

template <typename T>
struct ConvParam {
  Tensor<T> w;  // [cout, cin, 3, 3]
  Tensor<T> b;  // [cout]
};

// One conv of the feature extractor: 3x3 pad 1 + ReLU, optionally preceded by
// a 2x2 max pool.
struct EncoderConvSpec {
  int cin;
  int cout;
  bool pool_before;
};

// Four feature stages cut after successively deeper 3x3+ReLU layers. Channel
// widths double after each pool: 3 -> w -> w -> 2w -> 2w -> 4w -> 4w -> 4w ->
// 4w -> 8w, with pools placed so stage k lives at resolution /2^(k-1).
inline std::array<std::vector<EncoderConvSpec>, 4> encoder_stage_specs(int base_width) {
  if (base_width < 4 || base_width % 4 != 0)
    fail_validation("encoder: base_width must be a positive multiple of 4, got ",
                    base_width);
  const int w = base_width;
  return {{
      {{3, w, false}},
      {{w, w, false}, {w, 2 * w, true}},
      {{2 * w, 2 * w, false}, {2 * w, 4 * w, true}},
      {{4 * w, 4 * w, false}, {4 * w, 4 * w, false}, {4 * w, 4 * w, false}, {4 * w, 8 * w, true}},
  }};
}

inline int encoder_stage_channels(int base_width, int stage) {
  static constexpr int mult[4] = {1, 2, 4, 8};
  if (stage < 1 || stage > 4) fail_validation("encoder: stage must be 1..4, got ", stage);
  return base_width * mult[stage - 1];
}

// Frozen extractor: weights never require grad. The optional per-channel
// input normalization (x - mean) / std defaults to identity.
template <typename T>
struct EncoderWeights {
  int base_width = 0;
  std::array<std::vector<ConvParam<T>>, 4> stages;
  std::vector<T> norm_mean;  // size 3 when set
  std::vector<T> norm_std;   // size 3 when set
};

template <typename T>
EncoderWeights<T> init_encoder(int base_width, std::uint64_t seed) {
  auto specs = encoder_stage_specs(base_width);
  EncoderWeights<T> enc;
  enc.base_width = base_width;
  Rng rng(Rng::mix(seed, 0x656e63));
  for (int k = 0; k < 4; ++k) {
    for (const EncoderConvSpec& s : specs[static_cast<std::size_t>(k)]) {
      ConvParam<T> p;
      const int fan_in = s.cin * 9;
      const double scale = std::sqrt(2.0 / static_cast<double>(fan_in));
      std::vector<T> w(static_cast<std::size_t>(s.cout) * s.cin * 9);
      for (T& v : w) v = static_cast<T>(rng.normal() * scale);
      p.w = Tensor<T>({s.cout, s.cin, 3, 3}, std::move(w), false);
      p.b = Tensor<T>::zeros({s.cout}, false);
      enc.stages[static_cast<std::size_t>(k)].push_back(std::move(p));
    }
  }
  return enc;
}

// Nearest-neighbour mask downsample with top-left convention:
// out(i,j) = in(i*factor, j*factor). Keeps values strictly binary.
template <typename T>
Tensor<T> downsample_mask(const Tensor<T>& mask, int factor) {
  detail::check_rank("downsample_mask", mask, 4);
  if (factor < 1) fail_validation("downsample_mask: factor must be >= 1, got ", factor);
  const int n = mask.dim(0), c = mask.dim(1), h = mask.dim(2), w = mask.dim(3);
  if (h % factor != 0 || w % factor != 0)
    fail_validation("downsample_mask: extent ", h, "x", w, " not divisible by ", factor);
  if (factor == 1) return mask;
  const int ho = h / factor, wo = w / factor;
  const auto& mv = mask.values();
  std::vector<T> out(static_cast<std::size_t>(n) * c * ho * wo);
  std::size_t o = 0;
  for (int nc = 0; nc < n * c; ++nc) {
    const T* src = mv.data() + static_cast<std::int64_t>(nc) * h * w;
    for (int i = 0; i < ho; ++i)
      for (int j = 0; j < wo; ++j)
        out[o++] = src[static_cast<std::int64_t>(i) * factor * w + static_cast<std::int64_t>(j) * factor];
  }
  return Tensor<T>({n, c, ho, wo}, std::move(out));
}

template <typename T>
struct StageFeatures {
  std::array<Tensor<T>, 4> features;  // stage k at index k-1
  std::array<Tensor<T>, 4> masks;     // mask downsampled to each stage's grid
  int stages = 0;                     // number of filled stages
};

// Runs the extractor up to max_stage. image: [1,3,H,W] with H, W divisible
// by 8; mask: [1,1,H,W] binary. Gradients flow into the image (when tracked)
// but never into the frozen weights.
template <typename T>
StageFeatures<T> encode(const Tensor<T>& image, const Tensor<T>& mask,
                        const EncoderWeights<T>& enc, Tape<T>* tape = nullptr,
                        int max_stage = 4) {
  detail::require_defined<T>("encode", {&image, &mask});
  detail::check_rank("encode", image, 4);
  detail::check_rank("encode", mask, 4);
  if (max_stage < 1 || max_stage > 4)
    fail_validation("encode: max_stage must be 1..4, got ", max_stage);
  if (image.dim(0) != 1 || image.dim(1) != 3)
    fail_validation("encode: expected image [1,3,H,W], got ", shape_str(image.shape()));
  const int h = image.dim(2), w = image.dim(3);
  if (h % 8 != 0 || w % 8 != 0)
    fail_validation("encode: extent ", h, "x", w, " must be divisible by 8");
  if (mask.dim(0) != 1 || mask.dim(1) != 1 || mask.dim(2) != h || mask.dim(3) != w)
    fail_validation("encode: mask ", shape_str(mask.shape()), " does not match image ",
                    shape_str(image.shape()));
  detail::check_binary_mask("encode", mask);
  auto specs = encoder_stage_specs(enc.base_width);

  Tensor<T> x = image;
  if (!enc.norm_mean.empty() || !enc.norm_std.empty()) {
    if (enc.norm_mean.size() != 3 || enc.norm_std.size() != 3)
      fail_validation("encode: normalization vectors must have size 3");
    std::vector<T> neg_mean(3), inv_std(3);
    for (int i = 0; i < 3; ++i) {
      if (enc.norm_std[static_cast<std::size_t>(i)] <= T(0))
        fail_validation("encode: normalization std must be positive");
      neg_mean[static_cast<std::size_t>(i)] = -enc.norm_mean[static_cast<std::size_t>(i)];
      inv_std[static_cast<std::size_t>(i)] = T(1) / enc.norm_std[static_cast<std::size_t>(i)];
    }
    x = shift_channels(x, Tensor<T>({3}, std::move(neg_mean)), tape);
    x = scale_channels(x, Tensor<T>({3}, std::move(inv_std)), tape);
  }

  StageFeatures<T> out;
  for (int k = 0; k < max_stage; ++k) {
    const auto& stage = enc.stages[static_cast<std::size_t>(k)];
    const auto& spec = specs[static_cast<std::size_t>(k)];
    if (stage.size() != spec.size())
      fail_validation("encode: stage ", k + 1, " has ", stage.size(), " convs, expected ",
                      spec.size());
    for (std::size_t i = 0; i < stage.size(); ++i) {
      if (spec[i].pool_before) x = maxpool2x2(x, tape);
      x = relu(conv2d(x, stage[i].w, stage[i].b, 1, 1, tape), tape);
    }
    out.features[static_cast<std::size_t>(k)] = x;
    out.masks[static_cast<std::size_t>(k)] = downsample_mask(mask, 1 << k);
    out.stages = k + 1;
  }
  return out;
}

// PTW persistence (float weights).
void save_encoder(const EncoderWeights<float>& enc, const std::string& path);
EncoderWeights<float> load_encoder(const std::string& path);

}  // namespace propih
