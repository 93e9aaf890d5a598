#include "json.hpp"
#include "propih/losses.hpp"
#include "test_support.hpp"

using namespace propih;
using testsup::masked_stats_oracle;
using testsup::rand_mask;
using testsup::rand_tensor;
using testsup::rel_err;

static Tape<float>* const no_tape = nullptr;

namespace {

struct Fixture {
  EncoderWeights<float> enc = init_encoder<float>(4, 61);
  Tensor<float> composite, other, mask;
  StageFeatures<float> top;
  HarmonizedFeatures<float> harmonized;
  StyleTargets<float> targets;

  Fixture() {
    Rng rng(62);
    composite = rand_tensor<float>(rng, {1, 3, 16, 16}, 0, 1);
    other = rand_tensor<float>(rng, {1, 3, 16, 16}, 0, 1);
    mask = rand_mask<float>(rng, {1, 1, 16, 16}, 0.4, 32, 32);
    top = encode(composite, mask, enc);
    harmonized = harmonize_features(top, 1e-5f);
    targets = style_targets(harmonized, top);
  }
};

}  // namespace

TEST_SUITE_BEGIN("losses");

TEST_CASE("style targets are the harmonized foreground statistics") {
  Fixture f;
  for (int k = 0; k < 4; ++k) {
    const std::size_t u = static_cast<std::size_t>(k);
    CHECK_FALSE(f.targets.empty[u]);
    testsup::MaskedStatsOracle want = masked_stats_oracle(
        f.harmonized.features[u], f.top.masks[u], StatsMode::masked_region);
    REQUIRE(f.targets.mean[u].size() == want.mean.size());
    for (std::size_t c = 0; c < want.mean.size(); ++c) {
      CHECK(rel_err(f.targets.mean[u][c], want.mean[c]) < 1e-6);
      CHECK(rel_err(f.targets.stddev[u][c], want.stddev[c]) < 1e-6);
    }
  }
}

TEST_CASE("progressive style loss matches the per-term double oracle") {
  Fixture f;
  StageFeatures<float> re = encode(f.other, f.mask, f.enc);
  for (int k = 1; k <= 4; ++k) {
    StyleBreakdown br;
    Tensor<float> loss = style_loss_from_features(
        re, f.targets, k, false, false, StatsMode::masked_region, no_tape, nullptr, &br);
    CHECK(br.terms == k);  // exactly the first k stages contribute

    double want = 0.0;
    for (int s = 1; s <= k; ++s) {
      const std::size_t u = static_cast<std::size_t>(s - 1);
      testsup::MaskedStatsOracle stats = masked_stats_oracle(
          re.features[u], re.masks[u], StatsMode::masked_region);
      double mean_sq = 0.0, std_sq = 0.0;
      for (std::size_t c = 0; c < stats.mean.size(); ++c) {
        const double dm = stats.mean[c] - static_cast<double>(f.targets.mean[u][c]);
        const double ds = stats.stddev[c] - static_cast<double>(f.targets.stddev[u][c]);
        mean_sq += dm * dm;
        std_sq += ds * ds;
      }
      CHECK(rel_err(br.mean_sq[u], mean_sq, 1e-5) < 1e-4);
      CHECK(rel_err(br.std_sq[u], std_sq, 1e-5) < 1e-4);
      want += mean_sq + std_sq;
    }
    CHECK(rel_err(loss.item(), want, 1e-5) < 1e-4);
  }
}

TEST_CASE("full-style ablation sums all four terms regardless of stage") {
  Fixture f;
  StageFeatures<float> re = encode(f.other, f.mask, f.enc);
  StyleBreakdown br;
  Tensor<float> full = style_loss_from_features(
      re, f.targets, 1, true, false, StatsMode::masked_region, no_tape, nullptr, &br);
  CHECK(br.terms == 4);
  Tensor<float> prog4 = style_loss_from_features(re, f.targets, 4, false, false,
                                                 StatsMode::masked_region, no_tape);
  CHECK(full.item() == prog4.item());  // same terms, same order

  StageFeatures<float> shallow = encode(f.other, f.mask, f.enc, no_tape, 2);
  CHECK_THROWS_AS(style_loss_from_features(shallow, f.targets, 1, true, false,
                                           StatsMode::masked_region, no_tape),
                  ValidationError);
  CHECK_THROWS_AS(style_loss_from_features(shallow, f.targets, 3, false, false,
                                           StatsMode::masked_region, no_tape),
                  ValidationError);
}

TEST_CASE("channel normalization rescales each term by its width") {
  Fixture f;
  StageFeatures<float> re = encode(f.other, f.mask, f.enc);
  StyleBreakdown raw, norm;
  style_loss_from_features(re, f.targets, 4, false, false, StatsMode::masked_region,
                           no_tape, nullptr, &raw);
  style_loss_from_features(re, f.targets, 4, false, true, StatsMode::masked_region,
                           no_tape, nullptr, &norm);
  for (int k = 1; k <= 4; ++k) {
    const std::size_t u = static_cast<std::size_t>(k - 1);
    const double c = encoder_stage_channels(4, k);
    CHECK(rel_err(norm.mean_sq[u], raw.mean_sq[u] / c, 1e-8) < 1e-5);
    CHECK(rel_err(norm.std_sq[u], raw.std_sq[u] / c, 1e-8) < 1e-5);
  }
}

TEST_CASE("empty-foreground stages are skipped with a warning") {
  Fixture f;
  StyleTargets<float> gappy = f.targets;
  gappy.empty[1] = true;
  StageFeatures<float> re = encode(f.other, f.mask, f.enc);
  std::vector<std::string> warnings;
  StyleBreakdown br;
  Tensor<float> loss = style_loss_from_features(
      re, gappy, 3, false, false, StatsMode::masked_region, no_tape, &warnings, &br);
  CHECK(br.terms == 2);
  CHECK(warnings.size() == 1);
  const double want = br.mean_sq[0] + br.std_sq[0] + br.mean_sq[2] + br.std_sq[2];
  CHECK(rel_err(loss.item(), want, 1e-6) < 1e-5);

  StyleTargets<float> all_empty = f.targets;
  for (int k = 0; k < 4; ++k) all_empty.empty[static_cast<std::size_t>(k)] = true;
  Tensor<float> zero = style_loss_from_features(re, all_empty, 4, false, false,
                                                StatsMode::masked_region, no_tape);
  CHECK(zero.item() == 0.f);
}

TEST_CASE("style loss is differentiable back to the stage image") {
  Fixture f;
  Tensor<float> image = f.other;
  image.set_requires_grad(true);
  Tape<float> tape;
  Tensor<float> loss = style_loss(image, f.mask, 2, f.targets, f.enc, false, false,
                                  StatsMode::masked_region, &tape);
  tape.backward(loss);
  REQUIRE(image.grad().size() == image.values().size());
  double norm = 0.0;
  for (float g : image.grad()) {
    REQUIRE(std::isfinite(g));
    norm += std::abs(g);
  }
  CHECK(norm > 0.0);
}

TEST_CASE("content loss is the squared feature gap, optionally per channel") {
  Rng rng(63);
  Tensor<float> a = rand_tensor<float>(rng, {1, 8, 4, 4}, -1, 1);
  std::vector<float> bv = a.values();
  for (std::size_t i = 0; i < bv.size(); ++i)
    bv[i] += static_cast<float>(rng.uniform(-0.1, 0.1));
  Tensor<float> b(a.shape(), std::move(bv));

  double want = 0.0;
  for (std::size_t i = 0; i < a.values().size(); ++i) {
    const double d = static_cast<double>(a.values()[i]) - b.values()[i];
    want += d * d;
  }
  CHECK(rel_err(content_loss(a, b, false, no_tape).item(), want) < 1e-5);
  CHECK(rel_err(content_loss(a, b, true, no_tape).item(), want / 8.0) < 1e-5);
  CHECK(content_loss(a, a, false, no_tape).item() == 0.f);
  CHECK_THROWS_AS(content_loss(a, Tensor<float>::zeros({1, 4, 4, 4}), false, no_tape),
                  ValidationError);
}

TEST_CASE("exit supervision is the binary cross entropy of the head score") {
  Tensor<float> s = Tensor<float>::scalar(0.73f);
  CHECK(exit_bce(s, 1, no_tape).item() == binary_cross_entropy(s, 1).item());
  CHECK(exit_bce(s, 0, no_tape).item() == binary_cross_entropy(s, 0).item());
}

TEST_CASE("report assembly keeps the additivity invariants exactly") {
  const std::array<double, 4> style{0.5, 0.25, 0.125, 2.0};
  const std::array<double, 4> content{1.0, 0.75, 0.5, 0.25};
  const std::array<double, 3> bce{0.1, 0.2, 0.4};

  LossReport r = total_loss(style, content, bce, {true, true, true}, false);
  for (int k = 0; k < 4; ++k) {
    const std::size_t u = static_cast<std::size_t>(k);
    CHECK(r.total[u] == style[u] + content[u]);
  }
  CHECK(r.all == r.total[0] + r.total[1] + r.total[2] + r.total[3] + 0.1 + 0.2 + 0.4);

  LossReport gated = total_loss(style, content, bce, {true, false, true}, false);
  CHECK(gated.all == r.all - 0.2);

  LossReport last = total_loss(style, content, bce, {false, false, false}, true);
  for (int k = 0; k < 3; ++k) {
    const std::size_t u = static_cast<std::size_t>(k);
    CHECK(last.style[u] == 0.0);
    CHECK(last.content[u] == 0.0);
    CHECK(last.total[u] == 0.0);
  }
  CHECK(last.total[3] == 2.25);
  CHECK(last.all == 2.25);
}

TEST_CASE("log line carries every term in a fixed key order") {
  LossReport r = total_loss({0.5, 0.25, 0.125, 2.0}, {1.0, 0.75, 0.5, 0.25},
                            {0.1, 0.2, 0.4}, {true, true, true}, false);
  const std::string line = r.to_json_line(17);
  nlohmann::ordered_json j = nlohmann::ordered_json::parse(line);
  const std::vector<std::string> want_keys{
      "step", "sty1", "sty2", "sty3", "sty4", "con1", "con2", "con3", "con4",
      "tot1", "tot2", "tot3", "tot4", "bce1", "bce2", "bce3", "all"};
  std::vector<std::string> keys;
  for (const auto& [key, value] : j.items()) keys.push_back(key);
  CHECK(keys == want_keys);
  CHECK(j["step"].get<std::int64_t>() == 17);
  CHECK(j["sty4"].get<double>() == 2.0);
  CHECK(j["con1"].get<double>() == 1.0);
  CHECK(j["tot4"].get<double>() == 2.25);
  CHECK(j["bce3"].get<double>() == 0.4);
  CHECK(j["all"].get<double>() == r.all);
  CHECK(line.find('\n') == std::string::npos);  // a single JSONL record
}

TEST_SUITE_END();
