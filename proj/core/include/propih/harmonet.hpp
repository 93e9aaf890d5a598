#pragma once

#include <array>
#include <string>
#include <utility>
#include <vector>

#include "propih/adain.hpp"
#include "propih/encoder.hpp"

namespace propih {

struct HarmonizerConfig {
  int base_width = 64;
  int image_size = 256;

  // ablation switches
  bool full_style_loss_all_stages = false;  // stage k uses only the k-th style term
  bool last_stage_loss_only = false;        // train on stage 4 losses alone
  bool bilinear_decoder = false;            // nearest upsampling otherwise
  bool single_fusion_block = false;         // two blocks otherwise

  double exit_threshold = 0.5;
  double adain_eps = 1e-5;
  int gru_hidden = 32;

  // statistics over masked regions by default; zero_filled treats unselected
  // positions as zeros with a full-plane divisor
  bool zero_filled_stats = false;
  // detach the pooled exit-head input from the harmonization trunk
  bool stop_exit_pool_gradient = false;
  // divide style/content terms by their channel count
  bool normalize_loss_by_channels = false;

  StatsMode stats_mode() const {
    return zero_filled_stats ? StatsMode::zero_filled : StatsMode::masked_region;
  }

  void validate() const {
    if (base_width < 4 || base_width % 4 != 0)
      fail_validation("config: base_width must be a positive multiple of 4, got ",
                      base_width);
    if (image_size <= 0 || image_size % 8 != 0)
      fail_validation("config: image_size must be a positive multiple of 8, got ",
                      image_size);
    if (!(exit_threshold >= 0.0 && exit_threshold <= 1.0))
      fail_validation("config: exit_threshold must lie in [0,1], got ", exit_threshold);
    if (!(adain_eps > 0.0))
      fail_validation("config: adain_eps must be positive, got ", adain_eps);
    if (gru_hidden < 1)
      fail_validation("config: gru_hidden must be >= 1, got ", gru_hidden);
    if (full_style_loss_all_stages && last_stage_loss_only)
      fail_validation(
          "config: full_style_loss_all_stages and last_stage_loss_only conflict");
  }
};

HarmonizerConfig config_from_json(const std::string& text);
std::string config_to_json(const HarmonizerConfig& cfg);

// Decoder stack for stage k: one conv block then k upsample blocks. Every
// block is 3x3 conv pad 1 + ReLU and halves the channel count; the first
// upsample block uses spatial scale 1, the rest scale 2, so stage k's
// 1/2^(k-1)-resolution features always land at full resolution with
// base_width/4 channels.
template <typename T>
struct DecoderWeights {
  ConvParam<T> conv;
  std::vector<ConvParam<T>> ups;  // k entries for stage k
};

template <typename T>
struct FusionBlock {
  ConvParam<T> c1, c2;  // conv + ReLU, conv + ReLU
};

// Gated recurrent unit over pooled per-stage features plus a scoring head:
//   z = sigmoid(Wz x + Uz h + bz)
//   r = sigmoid(Wr x + Ur h + br)
//   hc = tanh(Wh x + Uh (r*h) + bh)
//   h' = (1 - z)*h + z*hc
//   score = sigmoid(w . h' + b)
template <typename T>
struct GruParams {
  Tensor<T> wz, uz, bz;
  Tensor<T> wr, ur, br;
  Tensor<T> wh, uh, bh;
  Tensor<T> head_w, head_b;
};

template <typename T>
struct ModelWeights {
  HarmonizerConfig config;
  EncoderWeights<T> encoder;
  std::array<DecoderWeights<T>, 4> decoders;
  // fusion[k-2] for stage k = 2..4; one block under single_fusion_block
  std::array<std::vector<FusionBlock<T>>, 3> fusion;
  std::array<ConvParam<T>, 4> out_convs;
  GruParams<T> gru;

  std::vector<std::pair<std::string, Tensor<T>*>> named_parameters();
  std::vector<Tensor<T>*> trainable_parameters();  // everything but the encoder
  std::vector<Tensor<T>*> exit_head_parameters();  // GRU + head only
};

namespace detail {

template <typename T>
void collect_named(ModelWeights<T>& m,
                   std::vector<std::pair<std::string, Tensor<T>*>>& out) {
  for (int k = 0; k < 4; ++k) {
    auto& stage = m.encoder.stages[static_cast<std::size_t>(k)];
    for (std::size_t i = 0; i < stage.size(); ++i) {
      std::string base = "enc.s" + std::to_string(k + 1) + ".conv" + std::to_string(i + 1);
      out.emplace_back(base + ".w", &stage[i].w);
      out.emplace_back(base + ".b", &stage[i].b);
    }
  }
  for (int k = 0; k < 4; ++k) {
    auto& dec = m.decoders[static_cast<std::size_t>(k)];
    std::string base = "dec.s" + std::to_string(k + 1);
    out.emplace_back(base + ".conv.w", &dec.conv.w);
    out.emplace_back(base + ".conv.b", &dec.conv.b);
    for (std::size_t j = 0; j < dec.ups.size(); ++j) {
      out.emplace_back(base + ".up" + std::to_string(j + 1) + ".w", &dec.ups[j].w);
      out.emplace_back(base + ".up" + std::to_string(j + 1) + ".b", &dec.ups[j].b);
    }
  }
  for (int k = 2; k <= 4; ++k) {
    auto& blocks = m.fusion[static_cast<std::size_t>(k - 2)];
    for (std::size_t bi = 0; bi < blocks.size(); ++bi) {
      std::string base = "fus.s" + std::to_string(k) + ".b" + std::to_string(bi + 1);
      out.emplace_back(base + ".c1.w", &blocks[bi].c1.w);
      out.emplace_back(base + ".c1.b", &blocks[bi].c1.b);
      out.emplace_back(base + ".c2.w", &blocks[bi].c2.w);
      out.emplace_back(base + ".c2.b", &blocks[bi].c2.b);
    }
  }
  for (int k = 0; k < 4; ++k) {
    std::string base = "out.s" + std::to_string(k + 1);
    out.emplace_back(base + ".w", &m.out_convs[static_cast<std::size_t>(k)].w);
    out.emplace_back(base + ".b", &m.out_convs[static_cast<std::size_t>(k)].b);
  }
  out.emplace_back("gru.wz", &m.gru.wz);
  out.emplace_back("gru.uz", &m.gru.uz);
  out.emplace_back("gru.bz", &m.gru.bz);
  out.emplace_back("gru.wr", &m.gru.wr);
  out.emplace_back("gru.ur", &m.gru.ur);
  out.emplace_back("gru.br", &m.gru.br);
  out.emplace_back("gru.wh", &m.gru.wh);
  out.emplace_back("gru.uh", &m.gru.uh);
  out.emplace_back("gru.bh", &m.gru.bh);
  out.emplace_back("gru.head.w", &m.gru.head_w);
  out.emplace_back("gru.head.b", &m.gru.head_b);
}

}  // namespace detail

template <typename T>
std::vector<std::pair<std::string, Tensor<T>*>> ModelWeights<T>::named_parameters() {
  std::vector<std::pair<std::string, Tensor<T>*>> out;
  detail::collect_named(*this, out);
  return out;
}

template <typename T>
std::vector<Tensor<T>*> ModelWeights<T>::trainable_parameters() {
  std::vector<Tensor<T>*> out;
  for (auto& [name, t] : named_parameters())
    if (name.rfind("enc.", 0) != 0) out.push_back(t);
  return out;
}

template <typename T>
std::vector<Tensor<T>*> ModelWeights<T>::exit_head_parameters() {
  std::vector<Tensor<T>*> out;
  for (auto& [name, t] : named_parameters())
    if (name.rfind("gru.", 0) == 0) out.push_back(t);
  return out;
}

namespace detail {

template <typename T>
ConvParam<T> init_conv(int cout, int cin, Rng& rng, bool trainable) {
  const double scale = std::sqrt(2.0 / static_cast<double>(cin * 9));
  std::vector<T> w(static_cast<std::size_t>(cout) * cin * 9);
  for (T& v : w) v = static_cast<T>(rng.normal() * scale);
  ConvParam<T> p;
  p.w = Tensor<T>({cout, cin, 3, 3}, std::move(w), trainable);
  p.b = Tensor<T>::zeros({cout}, trainable);
  return p;
}

template <typename T>
Tensor<T> init_dense(int rows, int cols, Rng& rng, bool trainable) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(cols));
  std::vector<T> w(static_cast<std::size_t>(rows) * cols);
  for (T& v : w) v = static_cast<T>(rng.normal() * scale);
  return Tensor<T>({rows, cols}, std::move(w), trainable);
}

}  // namespace detail

template <typename T>
ModelWeights<T> init_model(const HarmonizerConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ModelWeights<T> m;
  m.config = cfg;
  m.encoder = init_encoder<T>(cfg.base_width, seed);
  const int w4 = cfg.base_width / 4;

  Rng rng(Rng::mix(seed, 0x686172));
  for (int k = 1; k <= 4; ++k) {
    auto& dec = m.decoders[static_cast<std::size_t>(k - 1)];
    int c = encoder_stage_channels(cfg.base_width, k);
    dec.conv = detail::init_conv<T>(c / 2, c, rng, true);
    c /= 2;
    for (int j = 0; j < k; ++j) {
      dec.ups.push_back(detail::init_conv<T>(c / 2, c, rng, true));
      c /= 2;
    }
  }
  for (int k = 2; k <= 4; ++k) {
    auto& blocks = m.fusion[static_cast<std::size_t>(k - 2)];
    FusionBlock<T> b1;
    b1.c1 = detail::init_conv<T>(w4, 2 * w4, rng, true);
    b1.c2 = detail::init_conv<T>(w4, w4, rng, true);
    blocks.push_back(std::move(b1));
    if (!cfg.single_fusion_block) {
      FusionBlock<T> b2;
      b2.c1 = detail::init_conv<T>(w4, w4, rng, true);
      b2.c2 = detail::init_conv<T>(w4, w4, rng, true);
      blocks.push_back(std::move(b2));
    }
  }
  for (int k = 0; k < 4; ++k)
    m.out_convs[static_cast<std::size_t>(k)] = detail::init_conv<T>(3, w4, rng, true);

  const int hid = cfg.gru_hidden;
  m.gru.wz = detail::init_dense<T>(hid, w4, rng, true);
  m.gru.uz = detail::init_dense<T>(hid, hid, rng, true);
  m.gru.bz = Tensor<T>::zeros({hid}, true);
  m.gru.wr = detail::init_dense<T>(hid, w4, rng, true);
  m.gru.ur = detail::init_dense<T>(hid, hid, rng, true);
  m.gru.br = Tensor<T>::zeros({hid}, true);
  m.gru.wh = detail::init_dense<T>(hid, w4, rng, true);
  m.gru.uh = detail::init_dense<T>(hid, hid, rng, true);
  m.gru.bh = Tensor<T>::zeros({hid}, true);
  m.gru.head_w = detail::init_dense<T>(1, hid, rng, true);
  m.gru.head_b = Tensor<T>::zeros({1}, true);
  return m;
}

// One recurrent update plus the exit score for that stage.
template <typename T>
struct GruStepOut {
  Tensor<T> h;
  Tensor<T> score;  // [1,1]
};

template <typename T>
GruStepOut<T> gru_step(const Tensor<T>& h_prev, const Tensor<T>& x,
                       const GruParams<T>& g, Tape<T>* tape = nullptr) {
  detail::check_rank("gru_step", x, 2);
  detail::check_rank("gru_step", h_prev, 2);
  Tensor<T> none;
  Tensor<T> z = sigmoid(add(linear(x, g.wz, g.bz, tape), linear(h_prev, g.uz, none, tape), tape), tape);
  Tensor<T> r = sigmoid(add(linear(x, g.wr, g.br, tape), linear(h_prev, g.ur, none, tape), tape), tape);
  Tensor<T> hc = tanh(add(linear(x, g.wh, g.bh, tape),
                          linear(mul(r, h_prev, tape), g.uh, none, tape), tape), tape);
  Tensor<T> ones = Tensor<T>::full(z.shape(), T(1));
  Tensor<T> h = add(mul(sub(ones, z, tape), h_prev, tape), mul(z, hc, tape), tape);
  Tensor<T> score = sigmoid(linear(h, g.head_w, g.head_b, tape), tape);
  return {h, score};
}

// Earliest stage whose score strictly exceeds the threshold; stage 4 when
// none does. Scores are ordered by stage, at most one per early stage.
inline int decide_exit(const std::vector<double>& scores, double threshold) {
  if (scores.size() > 3)
    fail_validation("decide_exit: at most 3 early-exit scores, got ", scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i)
    if (scores[i] > threshold) return static_cast<int>(i) + 1;
  return 4;
}

template <typename T>
Tensor<T> decoder_forward(const Tensor<T>& harmonized, int stage,
                          const DecoderWeights<T>& dec, const HarmonizerConfig& cfg,
                          Tape<T>* tape = nullptr) {
  if (stage < 1 || stage > 4) fail_validation("decoder_forward: stage must be 1..4");
  if (static_cast<int>(dec.ups.size()) != stage)
    fail_validation("decoder_forward: stage ", stage, " wants ", stage,
                    " upsample blocks, weights have ", dec.ups.size());
  Tensor<T> x = relu(conv2d(harmonized, dec.conv.w, dec.conv.b, 1, 1, tape), tape);
  for (int j = 0; j < stage; ++j) {
    const int scale = j == 0 ? 1 : 2;
    x = cfg.bilinear_decoder ? upsample_bilinear(x, scale, tape)
                             : upsample_nearest(x, scale, tape);
    x = relu(conv2d(x, dec.ups[static_cast<std::size_t>(j)].w,
                    dec.ups[static_cast<std::size_t>(j)].b, 1, 1, tape), tape);
  }
  return x;
}

// Input: previous bottom features concatenated with the stage's decoded
// features (2 * base_width/4 channels); output: base_width/4 channels.
template <typename T>
Tensor<T> fusion_forward(const Tensor<T>& x, const std::vector<FusionBlock<T>>& blocks,
                         Tape<T>* tape = nullptr) {
  if (blocks.empty()) fail_validation("fusion_forward: no fusion blocks");
  Tensor<T> y = x;
  for (const FusionBlock<T>& b : blocks) {
    y = relu(conv2d(y, b.c1.w, b.c1.b, 1, 1, tape), tape);
    y = relu(conv2d(y, b.c2.w, b.c2.b, 1, 1, tape), tape);
  }
  return y;
}

template <typename T>
struct ForwardOptions {
  int max_stage = 4;
  bool exit_head = true;
  // render an image at every computed stage; otherwise only at max_stage
  bool images_all_stages = true;
  // break the stage loop at the first score above the threshold, rendering
  // the image of the stage actually reached
  bool stop_at_exit = false;
  double threshold = -1.0;  // negative: use config.exit_threshold
  Tape<T>* tape = nullptr;
};

template <typename T>
struct HarmonizeResult {
  std::array<Tensor<T>, 4> stage_images;
  std::array<Tensor<T>, 4> bottom_features;  // F^b_k, base_width/4 channels
  std::array<Tensor<T>, 3> exit_scores;      // [1,1] each, stages 1..3
  std::array<Tensor<T>, 3> pooled;           // exit-head inputs
  StageFeatures<T> top;                      // encoder features of the composite
  HarmonizedFeatures<T> harmonized;          // AdaIN outputs per stage
  int predicted_exit = 4;
  int stages = 0;
  std::vector<std::string> warnings;
};

// Full progressive pass: harmonize encoded features per stage, decode each
// stage back to full resolution, fuse with the running bottom-branch state,
// and score early exits on globally pooled bottom features.
template <typename T>
HarmonizeResult<T> forward(const ModelWeights<T>& model, const Tensor<T>& composite,
                           const Tensor<T>& fg_mask, ForwardOptions<T> opts = {}) {
  const HarmonizerConfig& cfg = model.config;
  cfg.validate();
  if (opts.max_stage < 1 || opts.max_stage > 4)
    fail_validation("forward: max_stage must be 1..4, got ", opts.max_stage);
  detail::require_defined<T>("forward", {&composite, &fg_mask});
  detail::check_rank("forward", composite, 4);
  if (composite.dim(2) != cfg.image_size || composite.dim(3) != cfg.image_size)
    fail_validation("forward: composite ", shape_str(composite.shape()),
                    " does not match configured image_size ", cfg.image_size);
  Tape<T>* tape = opts.tape;
  const double threshold = opts.threshold < 0.0 ? cfg.exit_threshold : opts.threshold;
  if (!(threshold >= 0.0 && threshold <= 1.0))
    fail_validation("forward: threshold must lie in [0,1], got ", threshold);

  HarmonizeResult<T> result;
  StageFeatures<T> top = encode(composite, fg_mask, model.encoder, tape, opts.max_stage);
  HarmonizedFeatures<T> harmonized =
      harmonize_features(top, static_cast<T>(cfg.adain_eps), tape, cfg.stats_mode(),
                         &result.warnings);

  result.top = top;
  result.harmonized = harmonized;

  Tensor<T> bottom;
  Tensor<T> h = Tensor<T>::zeros({1, cfg.gru_hidden});
  std::vector<double> scores;
  for (int k = 1; k <= opts.max_stage; ++k) {
    Tensor<T> decoded = decoder_forward(harmonized.features[static_cast<std::size_t>(k - 1)],
                                        k, model.decoders[static_cast<std::size_t>(k - 1)],
                                        cfg, tape);
    if (k == 1)
      bottom = decoded;
    else
      bottom = fusion_forward(concat_channels(bottom, decoded, tape),
                              model.fusion[static_cast<std::size_t>(k - 2)], tape);
    result.bottom_features[static_cast<std::size_t>(k - 1)] = bottom;
    if (opts.images_all_stages || k == opts.max_stage) {
      const ConvParam<T>& oc = model.out_convs[static_cast<std::size_t>(k - 1)];
      result.stage_images[static_cast<std::size_t>(k - 1)] =
          conv2d(bottom, oc.w, oc.b, 1, 1, tape);
    }
    if (opts.exit_head && k <= 3) {
      Tensor<T> pooled = global_avg_pool(bottom, tape);
      if (cfg.stop_exit_pool_gradient) pooled = pooled.detach();
      GruStepOut<T> step = gru_step(h, pooled, model.gru, tape);
      h = step.h;
      result.pooled[static_cast<std::size_t>(k - 1)] = pooled;
      result.exit_scores[static_cast<std::size_t>(k - 1)] = step.score;
      scores.push_back(static_cast<double>(step.score.item()));
      if (opts.stop_at_exit && k < opts.max_stage && scores.back() > threshold) {
        if (!opts.images_all_stages) {
          const ConvParam<T>& oc = model.out_convs[static_cast<std::size_t>(k - 1)];
          result.stage_images[static_cast<std::size_t>(k - 1)] =
              conv2d(bottom, oc.w, oc.b, 1, 1, tape);
        }
        result.stages = k;
        break;
      }
    }
    result.stages = k;
  }
  result.predicted_exit = decide_exit(scores, threshold);
  return result;
}

// PTW + JSON-sidecar persistence (float weights). The sidecar carries the
// config; the PTW file carries every named parameter.
void save_model(const ModelWeights<float>& model, const std::string& path);
ModelWeights<float> load_model(const std::string& path);

// Zeroed weights with the right shapes for a config; used by loaders.
ModelWeights<float> allocate_model(const HarmonizerConfig& cfg);

}  // namespace propih
