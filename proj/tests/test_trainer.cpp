#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "propih/trainer.hpp"
#include "test_support.hpp"

using namespace propih;

namespace {

TrainConfig micro_config() {
  TrainConfig cfg;
  cfg.model.base_width = 4;
  cfg.model.image_size = 16;
  cfg.model.gru_hidden = 4;
  cfg.lr = 1e-3;
  cfg.batch_size = 2;
  cfg.seed = 11;
  return cfg;
}

std::vector<AnnotationRecord> round_robin_annotations(
    const std::vector<CompositeSample>& data) {
  std::vector<AnnotationRecord> out;
  for (std::size_t i = 0; i < data.size(); ++i) {
    AnnotationRecord r;
    r.sample_id = data[i].id;
    r.exit_stage = static_cast<int>(i % 4) + 1;
    r.labels = derive_labels(r.exit_stage);
    out.push_back(std::move(r));
  }
  return out;
}

bool same_weights(ModelWeights<float>& a, ModelWeights<float>& b) {
  auto na = a.named_parameters();
  auto nb = b.named_parameters();
  REQUIRE(na.size() == nb.size());
  for (std::size_t i = 0; i < na.size(); ++i) {
    if (na[i].first != nb[i].first) return false;
    if (na[i].second->values() != nb[i].second->values()) return false;
  }
  return true;
}

}  // namespace

TEST_SUITE_BEGIN("trainer");

TEST_CASE("batch schedule is a per-epoch permutation with wrap-around") {
  const int n = 10, batch = 3;
  std::vector<int> seen(static_cast<std::size_t>(n), 0);
  for (std::int64_t step = 0; step < 4; ++step) {  // one epoch: ceil(10/3) steps
    std::vector<int> idx = batch_indices(77, step, n, batch);
    CHECK(idx == batch_indices(77, step, n, batch));  // pure function of inputs
    REQUIRE(static_cast<int>(idx.size()) == batch);
    for (int i : idx) {
      REQUIRE(i >= 0);
      REQUIRE(i < n);
      ++seen[static_cast<std::size_t>(i)];
    }
  }
  for (int count : seen) CHECK(count >= 1);  // every sample visited per epoch

  // the wrapped tail of the last step repeats the permutation's head
  std::vector<int> last = batch_indices(77, 3, n, batch);
  std::vector<int> first = batch_indices(77, 0, n, batch);
  CHECK(last[1] == first[0]);
  CHECK(last[2] == first[1]);

  CHECK(batch_indices(77, 40, n, batch) != batch_indices(77, 0, n, batch));
  CHECK_THROWS_AS(batch_indices(1, 0, 0, 2), ValidationError);
  CHECK_THROWS_AS(batch_indices(1, 0, 4, 0), ValidationError);
}

TEST_CASE("train config JSON round trip") {
  TrainConfig cfg = micro_config();
  cfg.log_path = "x.jsonl";
  cfg.threads = 2;
  TrainConfig back = train_config_from_json(train_config_to_json(cfg));
  CHECK(back.lr == cfg.lr);
  CHECK(back.batch_size == cfg.batch_size);
  CHECK(back.seed == cfg.seed);
  CHECK(back.log_path == cfg.log_path);
  CHECK(back.threads == cfg.threads);
  CHECK(config_to_json(back.model) == config_to_json(cfg.model));
  CHECK_THROWS_AS(train_config_from_json("{\"lr\": -1}"), ValidationError);
  CHECK_THROWS_AS(train_config_from_json("{\"lrr\": 1}"), ValidationError);
  CHECK_THROWS_AS(train_config_from_json("{\"checkpoint_every\": 5}"), ValidationError);
}

TEST_CASE("zero steps returns the freshly initialized weights untouched") {
  TrainConfig cfg = micro_config();
  cfg.steps = 0;
  std::vector<CompositeSample> data = synth_dataset(4, 16, 21);
  TrainOutcome out = train(data, {}, cfg);
  CHECK(out.log.empty());
  CHECK(out.state.step == 0);
  ModelWeights<float> fresh = init_model<float>(cfg.model, cfg.seed);
  CHECK(same_weights(out.state.model, fresh));
  CHECK(out.state.opt_param_names.size() == out.state.opt.slots.size());
}

TEST_CASE("training is deterministic and leaves the encoder frozen") {
  TrainConfig cfg = micro_config();
  cfg.steps = 3;
  std::vector<CompositeSample> data = synth_dataset(4, 16, 22);
  std::vector<AnnotationRecord> ann = round_robin_annotations(data);

  TrainOutcome a = train(data, ann, cfg);
  TrainOutcome b = train(data, ann, cfg);
  CHECK(same_weights(a.state.model, b.state.model));
  REQUIRE(a.log.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(a.log[i].all == b.log[i].all);  // bitwise equal reports
    CHECK(std::isfinite(a.log[i].all));
    CHECK(a.log[i].all > 0.0);
  }

  // weights actually moved, but never the encoder's
  ModelWeights<float> fresh = init_model<float>(cfg.model, cfg.seed);
  CHECK_FALSE(same_weights(a.state.model, fresh));
  for (int k = 0; k < 4; ++k) {
    auto& trained = a.state.model.encoder.stages[static_cast<std::size_t>(k)];
    auto& init = fresh.encoder.stages[static_cast<std::size_t>(k)];
    for (std::size_t i = 0; i < trained.size(); ++i)
      CHECK(trained[i].w.values() == init[i].w.values());
  }
}

TEST_CASE("two worker threads reproduce the single-thread run bitwise") {
  std::vector<CompositeSample> data = synth_dataset(4, 16, 23);
  std::vector<AnnotationRecord> ann = round_robin_annotations(data);
  TrainConfig cfg = micro_config();
  cfg.batch_size = 4;
  cfg.steps = 2;
  cfg.threads = 1;
  TrainOutcome solo = train(data, ann, cfg);
  cfg.threads = 2;
  TrainOutcome duo = train(data, ann, cfg);
  CHECK(same_weights(solo.state.model, duo.state.model));
  for (std::size_t i = 0; i < solo.log.size(); ++i)
    CHECK(solo.log[i].all == duo.log[i].all);
}

TEST_CASE("checkpoint, resume, and the uninterrupted run agree bitwise") {
  testsup::TempDir dir("ckpt");
  std::vector<CompositeSample> data = synth_dataset(4, 16, 24);
  std::vector<AnnotationRecord> ann = round_robin_annotations(data);

  TrainConfig cfg = micro_config();
  cfg.steps = 4;
  TrainOutcome full = train(data, ann, cfg);

  cfg.steps = 2;
  TrainOutcome half = train(data, ann, cfg);
  const std::string path = dir.str("mid.ptw");
  save_checkpoint(path, half.state);
  TrainState mid = load_checkpoint(path);
  CHECK(mid.step == 2);
  CHECK(mid.opt.step == half.state.opt.step);
  CHECK(mid.opt_param_names == half.state.opt_param_names);

  TrainOutcome rest = train(data, ann, cfg, &mid);
  CHECK(rest.state.step == 4);
  CHECK(same_weights(rest.state.model, full.state.model));
  for (std::size_t i = 0; i < rest.state.opt.slots.size(); ++i) {
    CHECK(rest.state.opt.slots[i].m == full.state.opt.slots[i].m);
    CHECK(rest.state.opt.slots[i].v == full.state.opt.slots[i].v);
  }
  CHECK(rest.log[0].all == full.log[2].all);
  CHECK(rest.log[1].all == full.log[3].all);
}

TEST_CASE("periodic checkpoints appear at the configured cadence") {
  testsup::TempDir dir("cadence");
  std::vector<CompositeSample> data = synth_dataset(2, 16, 25);
  TrainConfig cfg = micro_config();
  cfg.steps = 4;
  cfg.checkpoint_every = 2;
  cfg.checkpoint_dir = dir.str("ckpts");
  TrainOutcome out = train(data, {}, cfg);
  CHECK(std::filesystem::exists(dir.str("ckpts") + "/step_2.ptw"));
  CHECK(std::filesystem::exists(dir.str("ckpts") + "/step_4.ptw"));
  CHECK_FALSE(std::filesystem::exists(dir.str("ckpts") + "/step_3.ptw"));
  TrainState last = load_checkpoint(dir.str("ckpts") + "/step_4.ptw");
  CHECK(same_weights(last.model, out.state.model));
}

TEST_CASE("the JSONL log mirrors the per-step reports") {
  testsup::TempDir dir("log");
  std::vector<CompositeSample> data = synth_dataset(2, 16, 26);
  TrainConfig cfg = micro_config();
  cfg.steps = 2;
  cfg.log_path = dir.str("train.jsonl");
  TrainOutcome out = train(data, {}, cfg);

  std::ifstream f(cfg.log_path);
  REQUIRE(bool(f));
  std::string line;
  int lines = 0;
  while (std::getline(f, line)) {
    nlohmann::ordered_json j = nlohmann::ordered_json::parse(line);
    ++lines;
    CHECK(j["step"].get<int>() == lines);
    CHECK(j["all"].get<double>() ==
          out.log[static_cast<std::size_t>(lines - 1)].all);
  }
  CHECK(lines == 2);
}

TEST_CASE("a non-finite loss term aborts with the term's name") {
  std::vector<CompositeSample> data = synth_dataset(2, 16, 27);
  TrainConfig cfg = micro_config();
  cfg.steps = 0;
  TrainOutcome seeded = train(data, {}, cfg);
  // an exploded output conv drives the first style term past float range
  for (float& v : seeded.state.model.out_convs[0].w.mutable_values()) v = 1e30f;
  cfg.steps = 1;
  try {
    train(data, {}, cfg, &seeded.state);
    FAIL("expected the non-finite abort");
  } catch (const std::runtime_error& e) {
    const std::string what = e.what();
    CHECK(what.find("non-finite loss term sty1") != std::string::npos);
    CHECK(what.find("step 1") != std::string::npos);
  }
}

TEST_CASE("training validates inputs") {
  TrainConfig cfg = micro_config();
  cfg.steps = 1;
  CHECK_THROWS_AS(train({}, {}, cfg), ValidationError);

  std::vector<CompositeSample> wrong = synth_dataset(2, 32, 28);
  CHECK_THROWS_AS(train(wrong, {}, cfg), ValidationError);  // extent mismatch

  std::vector<CompositeSample> data = synth_dataset(2, 16, 29);
  std::vector<CompositeSample> dup = data;
  dup.push_back(data[0]);
  CHECK_THROWS_AS(train(dup, {}, cfg), ValidationError);

  AnnotationRecord ghost;
  ghost.sample_id = "nope";
  ghost.exit_stage = 1;
  ghost.labels = derive_labels(1);
  CHECK_THROWS_AS(train(data, {ghost}, cfg), ValidationError);
}

TEST_CASE("resume rejects a different architecture or parameter set") {
  std::vector<CompositeSample> data = synth_dataset(2, 16, 30);
  TrainConfig cfg = micro_config();
  cfg.steps = 0;
  TrainOutcome base = train(data, {}, cfg);

  TrainConfig other = cfg;
  other.model.gru_hidden = 8;
  other.steps = 1;
  CHECK_THROWS_AS(train(data, {}, other, &base.state), ValidationError);

  // a head-only checkpoint tracks a different parameter list
  std::vector<AnnotationRecord> ann = round_robin_annotations(data);
  TrainOutcome head = train_exit_head_only(data, ann, cfg);
  cfg.steps = 1;
  CHECK_THROWS_AS(train(data, ann, cfg, &head.state), ValidationError);
}

TEST_CASE("head-only training never touches the trunk and resets phase step") {
  std::vector<CompositeSample> data = synth_dataset(4, 16, 31);
  std::vector<AnnotationRecord> ann = round_robin_annotations(data);
  TrainConfig cfg = micro_config();
  cfg.steps = 3;
  TrainOutcome joint = train(data, ann, cfg);

  cfg.steps = 2;
  cfg.lr = 1e-2;
  TrainOutcome head = train_exit_head_only(data, ann, cfg, &joint.state);
  CHECK(head.state.step == 2);  // fresh phase-two counter, not 3 + 2
  CHECK(head.state.opt_param_names.size() == 11);

  auto before = joint.state.model.named_parameters();
  auto after = head.state.model.named_parameters();
  bool gru_moved = false;
  for (std::size_t i = 0; i < before.size(); ++i) {
    const bool is_head = before[i].first.rfind("gru.", 0) == 0;
    if (is_head)
      gru_moved = gru_moved ||
                  before[i].second->values() != after[i].second->values();
    else
      CHECK(before[i].second->values() == after[i].second->values());
  }
  CHECK(gru_moved);
  for (const LossReport& r : head.log) {
    CHECK(r.total[0] == 0.0);
    CHECK(r.total[3] == 0.0);
    CHECK(r.all == r.bce[0] + r.bce[1] + r.bce[2]);
  }
}

TEST_CASE("head-only training fits constant exit labels") {
  std::vector<CompositeSample> data = synth_dataset(8, 16, 32);
  std::vector<AnnotationRecord> ann;
  for (const CompositeSample& s : data) {
    AnnotationRecord r;
    r.sample_id = s.id;
    r.exit_stage = 1;  // every stage is good enough: labels {1,1,1}
    r.labels = derive_labels(1);
    ann.push_back(std::move(r));
  }
  TrainConfig cfg = micro_config();
  cfg.batch_size = 4;
  cfg.lr = 5e-2;
  cfg.steps = 150;
  TrainOutcome out = train_exit_head_only(data, ann, cfg);
  CHECK(out.log.back().all < 0.2);
  CHECK(out.log.back().all < out.log.front().all);
  CHECK(exit_label_accuracy(out.state.model, data, ann) >= 0.95);

  CHECK_THROWS_AS(train_exit_head_only(data, {}, cfg), ValidationError);
  CHECK_THROWS_AS(exit_label_accuracy(out.state.model, data, {}), ValidationError);
}

TEST_SUITE_END();
