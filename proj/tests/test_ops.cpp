#include "test_support.hpp"

using namespace propih;
using testsup::masked_stats_oracle;
using testsup::rand_mask;
using testsup::rand_tensor;
using testsup::rel_err;

namespace {

// Fixed random linear functional turning any output into a scalar loss, so
// finite differences of the loss validate the op's backward rule.
Tensor<float> dot(const Tensor<float>& y, const Tensor<float>& c, Tape<float>* t) {
  return sum_all(mul(y, c, t), t);
}

Tensor<float> away_from_zero(Rng& rng, Shape shape, bool grad) {
  Tensor<float> t = rand_tensor<float>(rng, std::move(shape), -1.0, 1.0, grad);
  for (float& v : t.mutable_values()) v += v >= 0.f ? 0.2f : -0.2f;
  return t;
}

}  // namespace

TEST_SUITE_BEGIN("ops");

TEST_CASE("elementwise arithmetic values and gradients") {
  Rng rng(11);
  Shape s{2, 3, 4, 4};
  Tensor<float> a = rand_tensor<float>(rng, s, -1, 1, true);
  Tensor<float> b = rand_tensor<float>(rng, s, 0.5, 1.5, true);
  Tensor<float> c = rand_tensor<float>(rng, s, -1, 1);

  CHECK(add(a, b).values()[3] == a.values()[3] + b.values()[3]);
  CHECK(sub(a, b).values()[5] == a.values()[5] - b.values()[5]);
  CHECK(mul(a, b).values()[7] == a.values()[7] * b.values()[7]);
  CHECK(div(a, b).values()[9] == a.values()[9] / b.values()[9]);
  CHECK_THROWS_AS(add(a, Tensor<float>::zeros({2})), ValidationError);

  testsup::check_grads<float>({&a, &b}, [&](Tape<float>* t) {
    return dot(add(a, b, t), c, t);
  });
  testsup::check_grads<float>({&a, &b}, [&](Tape<float>* t) {
    return dot(sub(a, b, t), c, t);
  });
  testsup::check_grads<float>({&a, &b}, [&](Tape<float>* t) {
    return dot(mul(a, b, t), c, t);
  });
  testsup::check_grads<float>({&a, &b}, [&](Tape<float>* t) {
    return dot(div(a, b, t), c, t);
  });
  testsup::check_grads<float>({&a}, [&](Tape<float>* t) {
    return dot(add_scalar(mul_scalar(a, 3.f, t), -1.f, t), c, t);
  });
}

TEST_CASE("activation values") {
  Tensor<float> x({5}, {-100.f, -1.f, 0.f, 1.f, 100.f});
  Tensor<float> s = sigmoid(x);
  CHECK(s.values()[0] == doctest::Approx(0.0));
  CHECK(s.values()[2] == 0.5f);
  CHECK(s.values()[4] == doctest::Approx(1.0));
  for (float v : s.values()) CHECK(std::isfinite(v));
  CHECK(relu(x).values()[1] == 0.f);
  CHECK(relu(x).values()[3] == 1.f);
  CHECK(tanh(x).values()[2] == 0.f);
  CHECK(tanh(x).values()[4] == doctest::Approx(1.0));
}

TEST_CASE("activation gradients") {
  Rng rng(12);
  Shape s{1, 2, 4, 4};
  Tensor<float> x = away_from_zero(rng, s, true);
  Tensor<float> c = rand_tensor<float>(rng, s, -1, 1);
  testsup::check_grads<float>({&x}, [&](Tape<float>* t) {
    return dot(relu(x, t), c, t);
  });
  testsup::check_grads<float>({&x}, [&](Tape<float>* t) {
    return dot(sigmoid(x, t), c, t);
  });
  testsup::check_grads<float>({&x}, [&](Tape<float>* t) {
    return dot(tanh(x, t), c, t);
  });
}

TEST_CASE("conv2d matches the seven-loop oracle") {
  Rng rng(13);
  Tensor<float> x = rand_tensor<float>(rng, {2, 3, 5, 5}, -1, 1);
  Tensor<float> w = rand_tensor<float>(rng, {4, 3, 3, 3}, -0.5, 0.5);
  Tensor<float> b = rand_tensor<float>(rng, {4}, -0.5, 0.5);
  Tensor<float> y = conv2d(x, w, b, 1, 1);
  CHECK(y.shape() == Shape{2, 4, 5, 5});
  std::vector<float> ref = testsup::conv2d_oracle(x, w, b, 1, 1);
  for (std::size_t i = 0; i < ref.size(); ++i)
    CHECK(rel_err(y.values()[i], ref[i]) < 1e-5);

  Tensor<float> y2 = conv2d(x, w, b, 2, 0);
  CHECK(y2.shape() == Shape{2, 4, 2, 2});
  std::vector<float> ref2 = testsup::conv2d_oracle(x, w, b, 2, 0);
  for (std::size_t i = 0; i < ref2.size(); ++i)
    CHECK(rel_err(y2.values()[i], ref2[i]) < 1e-5);
}

TEST_CASE("conv2d gradients") {
  Rng rng(14);
  Tensor<float> x = rand_tensor<float>(rng, {1, 2, 5, 5}, -1, 1, true);
  Tensor<float> w = rand_tensor<float>(rng, {3, 2, 3, 3}, -0.5, 0.5, true);
  Tensor<float> b = rand_tensor<float>(rng, {3}, -0.5, 0.5, true);
  Tensor<float> c = rand_tensor<float>(rng, {1, 3, 5, 5}, -1, 1);
  testsup::check_grads<float>({&x, &w, &b}, [&](Tape<float>* t) {
    return dot(conv2d(x, w, b, 1, 1, t), c, t);
  });
  Tensor<float> c2 = rand_tensor<float>(rng, {1, 3, 2, 2}, -1, 1);
  testsup::check_grads<float>({&x, &w, &b}, [&](Tape<float>* t) {
    return dot(conv2d(x, w, b, 2, 0, t), c2, t);
  });
}

TEST_CASE("maxpool matches the windowed-max oracle") {
  Rng rng(15);
  Tensor<float> x = rand_tensor<float>(rng, {1, 2, 4, 4}, -1, 1);
  CHECK(maxpool2x2(x).values() == testsup::maxpool_oracle(x));
}

TEST_CASE("maxpool ties route the gradient to the first window element") {
  Tensor<float> x({1, 1, 2, 2}, {3.f, 3.f, 3.f, 3.f}, true);
  Tape<float> tape;
  tape.backward(sum_all(maxpool2x2(x, &tape), &tape));
  CHECK(x.grad() == std::vector<float>{1.f, 0.f, 0.f, 0.f});
}

TEST_CASE("pool and upsample gradients") {
  Rng rng(16);
  Tensor<float> x = rand_tensor<float>(rng, {1, 2, 4, 4}, -1, 1, true);
  Tensor<float> c1 = rand_tensor<float>(rng, {1, 2, 2, 2}, -1, 1);
  Tensor<float> c2 = rand_tensor<float>(rng, {1, 2, 8, 8}, -1, 1);
  testsup::check_grads<float>({&x}, [&](Tape<float>* t) {
    return dot(maxpool2x2(x, t), c1, t);
  });
  testsup::check_grads<float>({&x}, [&](Tape<float>* t) {
    return dot(avgpool2x2(x, t), c1, t);
  });
  testsup::check_grads<float>({&x}, [&](Tape<float>* t) {
    return dot(upsample_nearest(x, 2, t), c2, t);
  });
  testsup::check_grads<float>({&x}, [&](Tape<float>* t) {
    return dot(upsample_bilinear(x, 2, t), c2, t);
  });
}

TEST_CASE("averaging undoes nearest upsampling exactly") {
  Rng rng(17);
  Tensor<float> x = rand_tensor<float>(rng, {2, 3, 4, 4}, -1, 1);
  CHECK(avgpool2x2(upsample_nearest(x, 2)).values() == x.values());
}

TEST_CASE("upsample_nearest repeats blocks") {
  Tensor<float> x({1, 1, 2, 2}, {1.f, 2.f, 3.f, 4.f});
  Tensor<float> y = upsample_nearest(x, 2);
  CHECK(y.values() == std::vector<float>{1, 1, 2, 2, 1, 1, 2, 2,
                                         3, 3, 4, 4, 3, 3, 4, 4});
  CHECK(upsample_nearest(x, 1).values() == x.values());
}

TEST_CASE("bilinear doubling of [0,1] gives the half-pixel stencil") {
  Tensor<float> x({1, 1, 1, 2}, {0.f, 1.f});
  Tensor<float> y = upsample_bilinear(x, 2);
  CHECK(y.shape() == Shape{1, 1, 2, 4});
  for (int row = 0; row < 2; ++row) {
    CHECK(y.at({0, 0, row, 0}) == 0.f);
    CHECK(y.at({0, 0, row, 1}) == 0.25f);
    CHECK(y.at({0, 0, row, 2}) == 0.75f);
    CHECK(y.at({0, 0, row, 3}) == 1.f);
  }
}

TEST_CASE("concat and slice are inverse and differentiable") {
  Rng rng(18);
  Tensor<float> a = rand_tensor<float>(rng, {1, 2, 3, 3}, -1, 1, true);
  Tensor<float> b = rand_tensor<float>(rng, {1, 3, 3, 3}, -1, 1, true);
  Tensor<float> y = concat_channels(a, b);
  CHECK(y.shape() == Shape{1, 5, 3, 3});
  CHECK(slice_channels(y, 0, 2).values() == a.values());
  CHECK(slice_channels(y, 2, 5).values() == b.values());

  Tensor<float> c = rand_tensor<float>(rng, {1, 5, 3, 3}, -1, 1);
  testsup::check_grads<float>({&a, &b}, [&](Tape<float>* t) {
    return dot(concat_channels(a, b, t), c, t);
  });
  Tensor<float> c2 = rand_tensor<float>(rng, {1, 2, 3, 3}, -1, 1);
  testsup::check_grads<float>({&b}, [&](Tape<float>* t) {
    return dot(slice_channels(concat_channels(a, b, t), 3, 5, t), c2, t);
  });
}

TEST_CASE("global average pooling values and gradient") {
  Tensor<float> k = Tensor<float>::full({1, 3, 4, 4}, 2.5f);
  CHECK(global_avg_pool(k).values() == std::vector<float>(3, 2.5f));
  Tensor<float> two({1, 1, 1, 2}, {1.f, 3.f});
  CHECK(global_avg_pool(two).values() == std::vector<float>{2.f});

  Rng rng(19);
  Tensor<float> x = rand_tensor<float>(rng, {1, 3, 4, 4}, -1, 1, true);
  double acc = 0.0;
  for (int i = 0; i < 16; ++i) acc += x.values()[static_cast<std::size_t>(16 + i)];
  CHECK(rel_err(global_avg_pool(x).values()[1], acc / 16.0) < 1e-6);

  Tensor<float> c = rand_tensor<float>(rng, {1, 3}, -1, 1);
  testsup::check_grads<float>({&x}, [&](Tape<float>* t) {
    return dot(global_avg_pool(x, t), c, t);
  });
}

TEST_CASE("linear matches a double loop and differentiates") {
  Rng rng(20);
  Tensor<float> x = rand_tensor<float>(rng, {2, 3}, -1, 1, true);
  Tensor<float> w = rand_tensor<float>(rng, {4, 3}, -1, 1, true);
  Tensor<float> b = rand_tensor<float>(rng, {4}, -1, 1, true);
  Tensor<float> y = linear(x, w, b);
  CHECK(y.shape() == Shape{2, 4});
  for (int n = 0; n < 2; ++n)
    for (int o = 0; o < 4; ++o) {
      double acc = b.values()[static_cast<std::size_t>(o)];
      for (int i = 0; i < 3; ++i)
        acc += static_cast<double>(x.at({n, i})) * static_cast<double>(w.at({o, i}));
      CHECK(rel_err(y.at({n, o}), acc) < 1e-6);
    }
  // bias is optional: an undefined tensor means none
  Tensor<float> none;
  CHECK(linear(x, w, none).at({0, 0}) ==
        doctest::Approx(y.at({0, 0}) - b.values()[0]));

  Tensor<float> c = rand_tensor<float>(rng, {2, 4}, -1, 1);
  testsup::check_grads<float>({&x, &w, &b}, [&](Tape<float>* t) {
    return dot(linear(x, w, b, t), c, t);
  });
}

TEST_CASE("reductions and their gradients") {
  Rng rng(21);
  Tensor<float> a = rand_tensor<float>(rng, {2, 3, 3}, -1, 1, true);
  Tensor<float> b = rand_tensor<float>(rng, {2, 3, 3}, -1, 1, true);
  double ref = 0.0;
  for (std::size_t i = 0; i < a.values().size(); ++i) {
    const double d = static_cast<double>(a.values()[i]) - b.values()[i];
    ref += d * d;
  }
  CHECK(rel_err(sum_sq_diff(a, b).item(), ref) < 1e-6);
  testsup::check_grads<float>({&a, &b}, [&](Tape<float>* t) {
    return sum_sq_diff(a, b, t);
  });
  testsup::check_grads<float>({&a}, [&](Tape<float>* t) { return sum_all(a, t); });
}

TEST_CASE("masked statistics match the position-list oracle in both modes") {
  Rng rng(22);
  for (StatsMode mode : {StatsMode::masked_region, StatsMode::zero_filled}) {
    Tensor<float> feat = rand_tensor<float>(rng, {1, 3, 6, 6}, -2, 2);
    Tensor<float> mask = rand_mask<float>(rng, {1, 1, 6, 6}, 0.4, 2, 1);
    testsup::MaskedStatsOracle ref = masked_stats_oracle(feat, mask, mode);
    Tensor<float> mu = masked_mean(feat, mask, mode);
    Tensor<float> sd = masked_std(feat, mask, mode);
    Tensor<float> var = masked_var(feat, mask, mode);
    for (int ch = 0; ch < 3; ++ch) {
      const std::size_t i = static_cast<std::size_t>(ch);
      CHECK(rel_err(mu.values()[i], ref.mean[i]) < 1e-6);
      CHECK(rel_err(sd.values()[i], ref.stddev[i]) < 1e-6);
      CHECK(rel_err(var.values()[i], ref.stddev[i] * ref.stddev[i]) < 1e-6);
    }
  }
}

TEST_CASE("masked statistics gradients") {
  Rng rng(23);
  for (StatsMode mode : {StatsMode::masked_region, StatsMode::zero_filled}) {
    // small mask count and an amplified readout keep the per-element
    // gradients (~c/count) above the finite-difference noise floor
    Tensor<float> feat = rand_tensor<float>(rng, {1, 2, 4, 4}, -2, 2, true);
    Tensor<float> mask = rand_mask<float>(rng, {1, 1, 4, 4}, 0.3, 3, 3);
    Tensor<float> c = rand_tensor<float>(rng, {2}, -4, 4);
    testsup::check_grads<float>({&feat}, [&](Tape<float>* t) {
      return dot(masked_mean(feat, mask, mode, t), c, t);
    });
    testsup::check_grads<float>({&feat}, [&](Tape<float>* t) {
      return dot(masked_std(feat, mask, mode, t), c, t);
    });
    testsup::check_grads<float>({&feat}, [&](Tape<float>* t) {
      return dot(masked_var(feat, mask, mode, t), c, t);
    });
  }
}

TEST_CASE("masked statistics validate the mask") {
  Tensor<float> feat = Tensor<float>::zeros({1, 2, 4, 4});
  Tensor<float> half = Tensor<float>::full({1, 1, 4, 4}, 0.5f);
  CHECK_THROWS_AS(masked_mean(feat, half), ValidationError);
  Tensor<float> empty = Tensor<float>::zeros({1, 1, 4, 4});
  CHECK_THROWS_AS(masked_mean(feat, empty), ValidationError);
}

TEST_CASE("channel scale and shift") {
  Rng rng(24);
  Tensor<float> x = rand_tensor<float>(rng, {1, 2, 3, 3}, -1, 1, true);
  Tensor<float> s({2}, {2.f, -1.f}, true);
  Tensor<float> y = scale_channels(x, s);
  CHECK(y.at({0, 1, 2, 2}) == -1.f * x.at({0, 1, 2, 2}));
  Tensor<float> sh = shift_channels(x, s);
  CHECK(sh.at({0, 0, 1, 1}) == x.at({0, 0, 1, 1}) + 2.f);

  Tensor<float> c = rand_tensor<float>(rng, {1, 2, 3, 3}, -1, 1);
  testsup::check_grads<float>({&x, &s}, [&](Tape<float>* t) {
    return dot(scale_channels(x, s, t), c, t);
  });
  testsup::check_grads<float>({&x, &s}, [&](Tape<float>* t) {
    return dot(shift_channels(x, s, t), c, t);
  });
}

TEST_CASE("mask_merge selects exactly, keeping the off side bit-identical") {
  Rng rng(25);
  Tensor<float> a = rand_tensor<float>(rng, {1, 2, 4, 4}, -10, 10, true);
  Tensor<float> b = rand_tensor<float>(rng, {1, 2, 4, 4}, -10, 10, true);
  Tensor<float> m = rand_mask<float>(rng, {1, 1, 4, 4}, 0.5, 2, 2);
  Tensor<float> y = mask_merge(a, b, m);
  for (int ch = 0; ch < 2; ++ch)
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j) {
        const bool on = m.at({0, 0, i, j}) == 1.f;
        const float expect = on ? a.at({0, ch, i, j}) : b.at({0, ch, i, j});
        CHECK(y.at({0, ch, i, j}) == expect);  // bitwise
      }
  Tensor<float> c = rand_tensor<float>(rng, {1, 2, 4, 4}, -1, 1);
  testsup::check_grads<float>({&a, &b}, [&](Tape<float>* t) {
    return dot(mask_merge(a, b, m, t), c, t);
  });
}

TEST_CASE("binary cross entropy values") {
  CHECK(binary_cross_entropy(Tensor<float>::scalar(0.5f), 1).item() ==
        doctest::Approx(std::log(2.0)));
  // against the formula on a probability/label grid
  for (int label : {0, 1})
    for (double p : {0.05, 0.3, 0.5, 0.77, 0.99}) {
      const double want = label == 1 ? -std::log(p) : -std::log(1.0 - p);
      CHECK(rel_err(binary_cross_entropy(
                        Tensor<float>::scalar(static_cast<float>(p)), label)
                        .item(),
                    want) < 1e-5);
    }
  // monotonically decreasing toward the true label
  double prev = 1e9;
  for (double p : {0.5, 0.7, 0.9, 0.99, 0.999}) {
    const double l =
        binary_cross_entropy(Tensor<float>::scalar(static_cast<float>(p)), 1).item();
    CHECK(l < prev);
    prev = l;
  }
  CHECK_THROWS_AS(binary_cross_entropy(Tensor<float>::scalar(0.5f), 2),
                  ValidationError);
}

TEST_CASE("binary cross entropy clamps and mutes the clamped gradient") {
  const double floor = kBceProbFloor;
  Tensor<float> s0 = Tensor<float>::scalar(0.f);
  CHECK(binary_cross_entropy(s0, 1).item() ==
        doctest::Approx(-std::log(floor)));
  Tensor<float> hot({1}, {1.f}, true);
  Tape<float> tape;
  tape.backward(binary_cross_entropy(hot, 0, &tape));
  CHECK(hot.grad() == std::vector<float>{0.f});

  Tensor<float> mid({1}, {0.3f}, true);
  testsup::check_grads<float>({&mid}, [&](Tape<float>* t) {
    return binary_cross_entropy(mid, 1, t);
  }, 5);
}

TEST_SUITE_END();
