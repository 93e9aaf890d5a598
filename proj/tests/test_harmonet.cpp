#include "propih/ptw.hpp"
#include "test_support.hpp"

using namespace propih;
using testsup::rand_mask;
using testsup::rand_tensor;
using testsup::rel_err;

namespace {

HarmonizerConfig small_config() {
  HarmonizerConfig cfg;
  cfg.base_width = 8;
  cfg.image_size = 32;
  cfg.gru_hidden = 8;
  return cfg;
}

GruParams<float> zero_gru(int hid, int in) {
  GruParams<float> g;
  g.wz = Tensor<float>::zeros({hid, in});
  g.uz = Tensor<float>::zeros({hid, hid});
  g.bz = Tensor<float>::zeros({hid});
  g.wr = Tensor<float>::zeros({hid, in});
  g.ur = Tensor<float>::zeros({hid, hid});
  g.br = Tensor<float>::zeros({hid});
  g.wh = Tensor<float>::zeros({hid, in});
  g.uh = Tensor<float>::zeros({hid, hid});
  g.bh = Tensor<float>::zeros({hid});
  g.head_w = Tensor<float>::zeros({1, hid});
  g.head_b = Tensor<float>::zeros({1});
  return g;
}

}  // namespace

TEST_SUITE_BEGIN("harmonet");

TEST_CASE("config JSON round trip and rejection of unknown keys") {
  HarmonizerConfig cfg = small_config();
  cfg.bilinear_decoder = true;
  cfg.exit_threshold = 0.25;
  cfg.normalize_loss_by_channels = true;
  HarmonizerConfig back = config_from_json(config_to_json(cfg));
  CHECK(back.base_width == cfg.base_width);
  CHECK(back.image_size == cfg.image_size);
  CHECK(back.bilinear_decoder == cfg.bilinear_decoder);
  CHECK(back.exit_threshold == cfg.exit_threshold);
  CHECK(back.gru_hidden == cfg.gru_hidden);
  CHECK(back.normalize_loss_by_channels == cfg.normalize_loss_by_channels);
  CHECK(config_to_json(back) == config_to_json(cfg));

  CHECK_THROWS_AS(config_from_json("{\"base_widt\": 8}"), ValidationError);
  CHECK_THROWS_AS(config_from_json("{\"base_width\": \"eight\"}"), ValidationError);
  CHECK_THROWS_AS(config_from_json("not json"), ValidationError);
  CHECK(config_from_json("{}").base_width == 64);  // defaults apply
}

TEST_CASE("config validation") {
  HarmonizerConfig cfg = small_config();
  cfg.base_width = 6;
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
  cfg = small_config();
  cfg.exit_threshold = 1.5;
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
  cfg = small_config();
  cfg.image_size = 20;
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
  cfg = small_config();
  cfg.full_style_loss_all_stages = true;
  cfg.last_stage_loss_only = true;
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
}

TEST_CASE("initialized weights have the documented shapes") {
  HarmonizerConfig cfg = small_config();
  ModelWeights<float> m = init_model<float>(cfg, 3);
  const int w4 = cfg.base_width / 4;  // 2
  for (int k = 1; k <= 4; ++k) {
    const auto& dec = m.decoders[static_cast<std::size_t>(k - 1)];
    int c = encoder_stage_channels(cfg.base_width, k);
    CHECK(dec.conv.w.shape() == Shape{c / 2, c, 3, 3});
    c /= 2;
    REQUIRE(static_cast<int>(dec.ups.size()) == k);
    for (int j = 0; j < k; ++j) {
      CHECK(dec.ups[static_cast<std::size_t>(j)].w.shape() == Shape{c / 2, c, 3, 3});
      c /= 2;
    }
    CHECK(c == w4);  // every stage lands on the shared bottom width
    CHECK(m.out_convs[static_cast<std::size_t>(k - 1)].w.shape() == Shape{3, w4, 3, 3});
  }
  for (int k = 2; k <= 4; ++k) {
    const auto& blocks = m.fusion[static_cast<std::size_t>(k - 2)];
    REQUIRE(blocks.size() == 2);
    CHECK(blocks[0].c1.w.shape() == Shape{w4, 2 * w4, 3, 3});
    CHECK(blocks[0].c2.w.shape() == Shape{w4, w4, 3, 3});
    CHECK(blocks[1].c1.w.shape() == Shape{w4, w4, 3, 3});
  }
  CHECK(m.gru.wz.shape() == Shape{cfg.gru_hidden, w4});
  CHECK(m.gru.uz.shape() == Shape{cfg.gru_hidden, cfg.gru_hidden});
  CHECK(m.gru.head_w.shape() == Shape{1, cfg.gru_hidden});

  HarmonizerConfig single = cfg;
  single.single_fusion_block = true;
  ModelWeights<float> ms = init_model<float>(single, 3);
  for (int k = 2; k <= 4; ++k)
    CHECK(ms.fusion[static_cast<std::size_t>(k - 2)].size() == 1);
}

TEST_CASE("parameter partitions: encoder frozen, exit head separate") {
  ModelWeights<float> m = init_model<float>(small_config(), 4);
  auto named = m.named_parameters();
  auto trainable = m.trainable_parameters();
  auto head = m.exit_head_parameters();
  std::size_t enc_count = 0;
  for (auto& [name, t] : named) {
    const bool is_enc = name.rfind("enc.", 0) == 0;
    enc_count += is_enc;
    CHECK(t->requires_grad() == !is_enc);
  }
  CHECK(named.size() == enc_count + trainable.size());
  CHECK(head.size() == 11);
  for (Tensor<float>* t : head)
    CHECK(std::find(trainable.begin(), trainable.end(), t) != trainable.end());
}

TEST_CASE("recurrent update with zero weights halves nothing and scores 0.5") {
  GruParams<float> g = zero_gru(4, 2);
  Tensor<float> h0({1, 4}, {0.2f, -0.4f, 1.0f, 0.f});
  Tensor<float> x = Tensor<float>::zeros({1, 2});
  GruStepOut<float> out = gru_step(h0, x, g);
  // z == 0.5, candidate == 0 -> h' = h/2
  for (int i = 0; i < 4; ++i)
    CHECK(out.h.values()[static_cast<std::size_t>(i)] ==
          doctest::Approx(0.5f * h0.values()[static_cast<std::size_t>(i)]));
  CHECK(out.score.item() == 0.5f);
}

TEST_CASE("recurrent chain matches the double-precision transcription") {
  HarmonizerConfig cfg = small_config();
  ModelWeights<float> m = init_model<float>(cfg, 5);
  Rng rng(6);
  std::vector<float> h(static_cast<std::size_t>(cfg.gru_hidden), 0.f);
  Tensor<float> ht = Tensor<float>::zeros({1, cfg.gru_hidden});
  for (int step = 0; step < 3; ++step) {
    Tensor<float> x = rand_tensor<float>(rng, {1, 2}, -1, 1);
    testsup::GruOracle want = testsup::gru_oracle(h, x.values(), m.gru);
    GruStepOut<float> got = gru_step(ht, x, m.gru);
    for (int i = 0; i < cfg.gru_hidden; ++i) {
      const std::size_t u = static_cast<std::size_t>(i);
      // state and score live in (-1,1), so absolute error is the right gauge
      CHECK(std::abs(static_cast<double>(got.h.values()[u]) - want.h[u]) < 1e-6);
      h[u] = got.h.values()[u];  // feed the float state forward
    }
    CHECK(std::abs(static_cast<double>(got.score.item()) - want.score) < 1e-6);
    ht = got.h;
  }
}

TEST_CASE("exit decision takes the earliest strict crossing") {
  CHECK(decide_exit({}, 0.5) == 4);
  CHECK(decide_exit({0.6}, 0.5) == 1);
  CHECK(decide_exit({0.5}, 0.5) == 4);  // strict
  CHECK(decide_exit({0.2, 0.9}, 0.5) == 2);
  CHECK(decide_exit({0.2, 0.3, 0.31}, 0.3) == 3);
  CHECK(decide_exit({0.9, 0.9, 0.9}, 0.5) == 1);
  CHECK_THROWS_AS(decide_exit({0.1, 0.1, 0.1, 0.9}, 0.5), ValidationError);
}

TEST_CASE("forward pass produces full-resolution images at every stage") {
  HarmonizerConfig cfg = small_config();
  ModelWeights<float> m = init_model<float>(cfg, 7);
  Rng rng(8);
  Tensor<float> img = rand_tensor<float>(rng, {1, 3, 32, 32}, 0, 1);
  Tensor<float> mask = rand_mask<float>(rng, {1, 1, 32, 32}, 0.3, 16, 16);
  HarmonizeResult<float> r = forward(m, img, mask);
  CHECK(r.stages == 4);
  for (int k = 0; k < 4; ++k) {
    CHECK(r.stage_images[static_cast<std::size_t>(k)].shape() == Shape{1, 3, 32, 32});
    CHECK(r.bottom_features[static_cast<std::size_t>(k)].shape() == Shape{1, 2, 32, 32});
  }
  for (int k = 0; k < 3; ++k) {
    CHECK(r.exit_scores[static_cast<std::size_t>(k)].shape() == Shape{1, 1});
    CHECK(r.pooled[static_cast<std::size_t>(k)].shape() == Shape{1, 2});
  }
  CHECK(r.predicted_exit >= 1);
  CHECK(r.predicted_exit <= 4);
  CHECK(r.top.stages == 4);
  CHECK(r.harmonized.stages == 4);
  // decision is consistent with the reported scores
  std::vector<double> s;
  for (int k = 0; k < 3; ++k)
    s.push_back(r.exit_scores[static_cast<std::size_t>(k)].item());
  CHECK(decide_exit(s, cfg.exit_threshold) == r.predicted_exit);

  ForwardOptions<float> only_last;
  only_last.images_all_stages = false;
  HarmonizeResult<float> r2 = forward(m, img, mask, only_last);
  CHECK_FALSE(r2.stage_images[0].defined());
  CHECK_FALSE(r2.stage_images[2].defined());
  CHECK(r2.stage_images[3].defined());
  CHECK(r2.stage_images[3].values() == r.stage_images[3].values());

  ForwardOptions<float> two;
  two.max_stage = 2;
  HarmonizeResult<float> r3 = forward(m, img, mask, two);
  CHECK(r3.stages == 2);
  CHECK_FALSE(r3.bottom_features[2].defined());
  CHECK(r3.bottom_features[1].values() == r.bottom_features[1].values());
}

TEST_CASE("stopping at the exit renders the reached stage and halts") {
  HarmonizerConfig cfg = small_config();
  ModelWeights<float> m = init_model<float>(cfg, 9);
  m.gru.head_b.mutable_values()[0] = 10.f;  // every exit score ~0.99995
  Rng rng(10);
  Tensor<float> img = rand_tensor<float>(rng, {1, 3, 32, 32}, 0, 1);
  Tensor<float> mask = rand_mask<float>(rng, {1, 1, 32, 32}, 0.3, 16, 16);

  ForwardOptions<float> opts;
  opts.stop_at_exit = true;
  opts.images_all_stages = false;
  HarmonizeResult<float> r = forward(m, img, mask, opts);
  CHECK(r.stages == 1);
  CHECK(r.predicted_exit == 1);
  CHECK(r.stage_images[0].defined());
  CHECK_FALSE(r.bottom_features[1].defined());

  opts.threshold = 0.99999;  // above any reachable score: run to the end
  HarmonizeResult<float> full = forward(m, img, mask, opts);
  CHECK(full.stages == 4);
  CHECK(full.predicted_exit == 4);

  // no exit head: scores absent, decision falls through to the last stage
  ForwardOptions<float> no_head;
  no_head.exit_head = false;
  HarmonizeResult<float> r4 = forward(m, img, mask, no_head);
  CHECK_FALSE(r4.exit_scores[0].defined());
  CHECK(r4.predicted_exit == 4);
}

TEST_CASE("pool-gradient stop confines the exit loss to the scoring head") {
  HarmonizerConfig cfg = small_config();
  cfg.stop_exit_pool_gradient = true;
  ModelWeights<float> m = init_model<float>(cfg, 11);
  Rng rng(12);
  Tensor<float> img = rand_tensor<float>(rng, {1, 3, 32, 32}, 0, 1);
  Tensor<float> mask = rand_mask<float>(rng, {1, 1, 32, 32}, 0.3, 16, 16);

  Tape<float> tape;
  ForwardOptions<float> opts;
  opts.tape = &tape;
  HarmonizeResult<float> r = forward(m, img, mask, opts);
  tape.backward(r.exit_scores[2]);
  CHECK_FALSE(m.gru.wz.grad().empty());
  CHECK(m.decoders[0].conv.w.grad().empty());
  CHECK(m.fusion[0][0].c1.w.grad().empty());

  // without the stop, the same loss reaches the trunk
  HarmonizerConfig open_cfg = small_config();
  ModelWeights<float> m2 = init_model<float>(open_cfg, 11);
  Tape<float> t2;
  ForwardOptions<float> o2;
  o2.tape = &t2;
  HarmonizeResult<float> r2 = forward(m2, img, mask, o2);
  t2.backward(r2.exit_scores[2]);
  CHECK_FALSE(m2.decoders[0].conv.w.grad().empty());
  CHECK(m2.out_convs[3].w.grad().empty());  // images are off the exit path
}

TEST_CASE("model save and load reproduce weights, config and outputs bitwise") {
  testsup::TempDir dir("model");
  HarmonizerConfig cfg = small_config();
  cfg.exit_threshold = 0.37;
  cfg.single_fusion_block = true;
  ModelWeights<float> m = init_model<float>(cfg, 13);
  const std::string path = dir.str("model.ptw");
  save_model(m, path);
  ModelWeights<float> back = load_model(path);
  CHECK(config_to_json(back.config) == config_to_json(cfg));
  auto a = m.named_parameters();
  auto b = back.named_parameters();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].first == b[i].first);
    CHECK(a[i].second->values() == b[i].second->values());
    CHECK(a[i].second->requires_grad() == b[i].second->requires_grad());
  }

  Rng rng(14);
  Tensor<float> img = rand_tensor<float>(rng, {1, 3, 32, 32}, 0, 1);
  Tensor<float> mask = rand_mask<float>(rng, {1, 1, 32, 32}, 0.3, 16, 16);
  HarmonizeResult<float> r1 = forward(m, img, mask);
  HarmonizeResult<float> r2 = forward(back, img, mask);
  for (int k = 0; k < 4; ++k)
    CHECK(r1.stage_images[static_cast<std::size_t>(k)].values() ==
          r2.stage_images[static_cast<std::size_t>(k)].values());
  for (int k = 0; k < 3; ++k)
    CHECK(r1.exit_scores[static_cast<std::size_t>(k)].values() ==
          r2.exit_scores[static_cast<std::size_t>(k)].values());

  // mutilated weight files are rejected
  std::vector<PtwEntry> entries = read_ptw(path);
  entries.pop_back();
  write_ptw(path, entries);
  CHECK_THROWS_AS(load_model(path), ValidationError);
}

TEST_CASE("forward rejects mismatched input extents") {
  ModelWeights<float> m = init_model<float>(small_config(), 15);
  Rng rng(16);
  Tensor<float> img = rand_tensor<float>(rng, {1, 3, 16, 16}, 0, 1);
  Tensor<float> mask = rand_mask<float>(rng, {1, 1, 16, 16}, 0.3, 4, 4);
  CHECK_THROWS_AS(forward(m, img, mask), ValidationError);  // config wants 32
  ForwardOptions<float> opts;
  opts.threshold = 1.5;
  Tensor<float> img32 = rand_tensor<float>(rng, {1, 3, 32, 32}, 0, 1);
  Tensor<float> mask32 = rand_mask<float>(rng, {1, 1, 32, 32}, 0.3, 4, 4);
  CHECK_THROWS_AS(forward(m, img32, mask32, opts), ValidationError);
}

TEST_SUITE_END();
