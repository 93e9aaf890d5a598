#include "propih/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <thread>

#include "json.hpp"

namespace propih {

using ordered_json = nlohmann::ordered_json;

void TrainConfig::validate() const {
  model.validate();
  if (!(lr > 0.0)) fail_validation("train config: lr must be positive, got ", lr);
  if (batch_size < 1) fail_validation("train config: batch_size must be >= 1, got ", batch_size);
  if (steps < 0) fail_validation("train config: steps must be >= 0, got ", steps);
  if (checkpoint_every < 0)
    fail_validation("train config: checkpoint_every must be >= 0, got ", checkpoint_every);
  if (checkpoint_every > 0 && checkpoint_dir.empty())
    fail_validation("train config: checkpoint_every needs checkpoint_dir");
  if (threads < 0) fail_validation("train config: threads must be >= 0, got ", threads);
}

TrainConfig train_config_from_json(const std::string& text) {
  ordered_json j;
  try {
    j = ordered_json::parse(text);
  } catch (const std::exception& e) {
    fail_validation("train config: ", e.what());
  }
  if (!j.is_object()) fail_validation("train config: expected a JSON object");
  static const std::set<std::string> known = {"model",           "lr",
                                              "batch_size",      "steps",
                                              "seed",            "checkpoint_every",
                                              "checkpoint_dir",  "log_path",
                                              "threads"};
  for (const auto& [key, value] : j.items())
    if (!known.count(key)) fail_validation("train config: unknown key \"", key, "\"");
  TrainConfig cfg;
  try {
    if (j.contains("model")) cfg.model = config_from_json(j["model"].dump());
    if (j.contains("lr")) cfg.lr = j["lr"].get<double>();
    if (j.contains("batch_size")) cfg.batch_size = j["batch_size"].get<int>();
    if (j.contains("steps")) cfg.steps = j["steps"].get<int>();
    if (j.contains("seed")) cfg.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("checkpoint_every")) cfg.checkpoint_every = j["checkpoint_every"].get<int>();
    if (j.contains("checkpoint_dir")) cfg.checkpoint_dir = j["checkpoint_dir"].get<std::string>();
    if (j.contains("log_path")) cfg.log_path = j["log_path"].get<std::string>();
    if (j.contains("threads")) cfg.threads = j["threads"].get<int>();
  } catch (const nlohmann::json::exception& e) {
    fail_validation("train config: ", e.what());
  }
  cfg.validate();
  return cfg;
}

std::string train_config_to_json(const TrainConfig& cfg) {
  ordered_json j;
  j["model"] = ordered_json::parse(config_to_json(cfg.model));
  j["lr"] = cfg.lr;
  j["batch_size"] = cfg.batch_size;
  j["steps"] = cfg.steps;
  j["seed"] = cfg.seed;
  j["checkpoint_every"] = cfg.checkpoint_every;
  j["checkpoint_dir"] = cfg.checkpoint_dir;
  j["log_path"] = cfg.log_path;
  j["threads"] = cfg.threads;
  return j.dump(2);
}

std::vector<int> batch_indices(std::uint64_t seed, std::int64_t step, int n,
                               int batch_size) {
  if (n < 1) fail_validation("batch_indices: empty dataset");
  if (batch_size < 1) fail_validation("batch_indices: batch_size must be >= 1");
  const std::int64_t steps_per_epoch = (n + batch_size - 1) / batch_size;
  const std::int64_t epoch = step / steps_per_epoch;
  const std::int64_t offset = (step % steps_per_epoch) * batch_size;
  Rng rng(Rng::mix(seed ^ 0x7065726dULL, static_cast<std::uint64_t>(epoch)));
  std::vector<int> perm = rng.permutation(n);
  std::vector<int> out(static_cast<std::size_t>(batch_size));
  for (int t = 0; t < batch_size; ++t)
    out[static_cast<std::size_t>(t)] =
        perm[static_cast<std::size_t>((offset + t) % n)];
  return out;
}

SampleLoss compute_sample_loss(const ModelWeights<float>& model,
                               const CompositeSample& sample,
                               const std::array<int, 3>* labels, Tape<float>& tape) {
  const HarmonizerConfig& cfg = model.config;
  const bool v1 = cfg.last_stage_loss_only;
  ForwardOptions<float> opts;
  opts.tape = &tape;
  opts.exit_head = labels != nullptr;
  opts.images_all_stages = !v1;

  SampleLoss out;
  HarmonizeResult<float> fwd = forward(model, sample.composite, sample.fg_mask, opts);
  out.warnings = fwd.warnings;
  StyleTargets<float> targets = style_targets(fwd.harmonized, fwd.top, cfg.stats_mode());
  const Tensor<float>& phi4_composite = fwd.top.features[3];

  std::array<double, 4> style{}, content{};
  std::array<double, 3> bce{};
  std::array<bool, 3> present{};
  Tensor<float> all;
  auto accumulate = [&](const Tensor<float>& term) {
    all = all.defined() ? add(all, term, &tape) : term;
  };
  for (int k = 1; k <= 4; ++k) {
    if (v1 && k < 4) continue;
    const Tensor<float>& image = fwd.stage_images[static_cast<std::size_t>(k - 1)];
    StageFeatures<float> re = encode(image, sample.fg_mask, model.encoder, &tape, 4);
    Tensor<float> sty = style_loss_from_features(
        re, targets, k, cfg.full_style_loss_all_stages, cfg.normalize_loss_by_channels,
        cfg.stats_mode(), &tape, &out.warnings);
    Tensor<float> con = content_loss(re.features[3], phi4_composite,
                                     cfg.normalize_loss_by_channels, &tape);
    style[static_cast<std::size_t>(k - 1)] = static_cast<double>(sty.item());
    content[static_cast<std::size_t>(k - 1)] = static_cast<double>(con.item());
    accumulate(sty);
    accumulate(con);
  }
  if (labels) {
    for (int k = 1; k <= 3; ++k) {
      Tensor<float> term = exit_bce(fwd.exit_scores[static_cast<std::size_t>(k - 1)],
                                    (*labels)[static_cast<std::size_t>(k - 1)], &tape);
      bce[static_cast<std::size_t>(k - 1)] = static_cast<double>(term.item());
      present[static_cast<std::size_t>(k - 1)] = true;
      accumulate(term);
    }
  }
  out.report = total_loss(style, content, bce, present, v1);
  out.all = all.defined() ? all : Tensor<float>::scalar(0.f);
  return out;
}

namespace {

// First non-finite term in reporting order, or empty when all are finite.
std::string first_non_finite(const LossReport& r) {
  for (int k = 0; k < 4; ++k)
    if (!std::isfinite(r.style[static_cast<std::size_t>(k)])) return "sty" + std::to_string(k + 1);
  for (int k = 0; k < 4; ++k)
    if (!std::isfinite(r.content[static_cast<std::size_t>(k)])) return "con" + std::to_string(k + 1);
  for (int k = 0; k < 3; ++k)
    if (r.bce_present[static_cast<std::size_t>(k)] &&
        !std::isfinite(r.bce[static_cast<std::size_t>(k)]))
      return "bce" + std::to_string(k + 1);
  return {};
}

LossReport average_reports(const std::vector<LossReport>& reports, bool v1) {
  std::array<double, 4> style{}, content{};
  std::array<double, 3> bce{};
  std::array<bool, 3> present{};
  const double inv = 1.0 / static_cast<double>(reports.size());
  for (const LossReport& r : reports) {
    for (int k = 0; k < 4; ++k) {
      style[static_cast<std::size_t>(k)] += r.style[static_cast<std::size_t>(k)] * inv;
      content[static_cast<std::size_t>(k)] += r.content[static_cast<std::size_t>(k)] * inv;
    }
    for (int k = 0; k < 3; ++k) {
      bce[static_cast<std::size_t>(k)] += r.bce[static_cast<std::size_t>(k)] * inv;
      present[static_cast<std::size_t>(k)] =
          present[static_cast<std::size_t>(k)] || r.bce_present[static_cast<std::size_t>(k)];
    }
  }
  return total_loss(style, content, bce, present, v1);
}

struct AnnotationIndex {
  std::map<std::string, std::array<int, 3>> labels;

  AnnotationIndex(const std::vector<CompositeSample>& data,
                  const std::vector<AnnotationRecord>& annotations) {
    std::set<std::string> ids;
    for (const CompositeSample& s : data) {
      if (!ids.insert(s.id).second) fail_validation("train: duplicate sample id ", s.id);
    }
    for (const AnnotationRecord& a : annotations) {
      if (!ids.count(a.sample_id))
        fail_validation("train: annotation for unknown sample ", a.sample_id);
      if (labels.count(a.sample_id))
        fail_validation("train: duplicate annotation for sample ", a.sample_id);
      labels[a.sample_id] = a.labels;
    }
  }

  const std::array<int, 3>* find(const std::string& id) const {
    auto it = labels.find(id);
    return it == labels.end() ? nullptr : &it->second;
  }
};

int resolve_threads(int requested, int batch) {
  int t = requested;
  if (t == 0) {
    unsigned hw = std::thread::hardware_concurrency();
    t = hw == 0 ? 1 : static_cast<int>(hw);
  }
  return std::max(1, std::min(t, batch));
}

// Runs fn(sample_slot) for every slot, either inline or on a small pool.
// Exceptions from workers are rethrown on the caller thread.
void for_each_slot(int slots, int threads, const std::function<void(int)>& fn) {
  if (threads <= 1 || slots <= 1) {
    for (int i = 0; i < slots; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(threads));
  std::atomic<int> next{0};
  for (int w = 0; w < threads; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (;;) {
          int i = next.fetch_add(1);
          if (i >= slots) break;
          fn(i);
        }
      } catch (...) {
        errors[static_cast<std::size_t>(w)] = std::current_exception();
      }
    });
  }
  for (std::thread& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

void append_log_line(const std::string& path, const std::string& line) {
  if (path.empty()) return;
  std::ofstream f(path, std::ios::app);
  if (!f) fail_validation("train: cannot open log ", path);
  f << line << '\n';
}

std::string checkpoint_name(const std::string& dir, std::int64_t step) {
  std::ostringstream os;
  os << dir << "/step_" << step << ".ptw";
  return os.str();
}

std::vector<std::string> names_of(ModelWeights<float>& model,
                                  const std::vector<Tensor<float>*>& params) {
  std::map<const Tensor<float>*, std::string> by_ptr;
  for (auto& [name, t] : model.named_parameters()) by_ptr[t] = name;
  std::vector<std::string> out;
  for (Tensor<float>* p : params) out.push_back(by_ptr.at(p));
  return out;
}

// Shared per-step machinery for both training modes. build(i, slot_tape)
// constructs the loss graph for batch slot i and returns its report.
// `params` points into state.model, so state is threaded by reference.
TrainOutcome run_steps(TrainState& state, const TrainConfig& cfg,
                       const std::vector<Tensor<float>*>& params,
                       const std::function<LossReport(int, Tape<float>&)>& build) {
  const int threads = resolve_threads(cfg.threads, cfg.batch_size);
  TrainOutcome outcome;
  for (int s = 0; s < cfg.steps; ++s) {
    std::vector<Tape<float>> tapes(static_cast<std::size_t>(cfg.batch_size));
    std::vector<LossReport> reports(static_cast<std::size_t>(cfg.batch_size));
    for_each_slot(cfg.batch_size, threads, [&](int i) {
      reports[static_cast<std::size_t>(i)] = build(i, tapes[static_cast<std::size_t>(i)]);
    });
    // fixed flush order makes the batch reduction bit-exact for any thread count
    const float scale = 1.f / static_cast<float>(cfg.batch_size);
    for (Tape<float>& tape : tapes) tape.apply_leaf_grads(scale);
    adam_step(params, state.opt);
    for (Tensor<float>* p : params) p->zero_grad();
    state.step += 1;
    LossReport batch = average_reports(reports, cfg.model.last_stage_loss_only);
    append_log_line(cfg.log_path, batch.to_json_line(state.step));
    outcome.log.push_back(batch);
    if (cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0) {
      std::filesystem::create_directories(cfg.checkpoint_dir);
      save_checkpoint(checkpoint_name(cfg.checkpoint_dir, state.step), state);
    }
  }
  outcome.state = state;
  return outcome;
}

[[noreturn]] void abort_non_finite(const std::string& term, std::int64_t step,
                                   const std::string& sample_id) {
  std::ostringstream os;
  os << "training aborted: non-finite loss term " << term << " at step " << step + 1
     << " on sample " << sample_id;
  throw std::runtime_error(os.str());
}

// Tensors are handles; updating a plain copy would write through to the
// caller's checkpoint. Resume therefore starts from cloned parameters.
TrainState clone_state(const TrainState& s) {
  TrainState out = s;
  for (auto& [name, p] : out.model.named_parameters()) *p = p->clone();
  return out;
}

}  // namespace

TrainOutcome train(const std::vector<CompositeSample>& data,
                   const std::vector<AnnotationRecord>& annotations,
                   const TrainConfig& cfg, const TrainState* resume) {
  cfg.validate();
  if (data.empty()) fail_validation("train: empty dataset");
  for (const CompositeSample& s : data) {
    s.validate(true);
    if (s.composite.dim(2) != cfg.model.image_size)
      fail_validation("train: sample ", s.id, " extent ", s.composite.dim(2),
                      " does not match configured image_size ", cfg.model.image_size);
  }
  AnnotationIndex ann(data, annotations);

  TrainState state;
  if (resume) {
    if (config_to_json(resume->model.config) != config_to_json(cfg.model))
      fail_validation("train: resume checkpoint config differs from requested config");
    state = clone_state(*resume);
  } else {
    state.model = init_model<float>(cfg.model, cfg.seed);
    state.step = 0;
  }
  std::vector<Tensor<float>*> params = state.model.trainable_parameters();
  std::vector<std::string> names = names_of(state.model, params);
  if (resume) {
    if (state.opt_param_names != names)
      fail_validation("train: resume checkpoint optimizer tracks different parameters");
    state.opt.lr = cfg.lr;
  } else {
    state.opt = adam_init(params, cfg.lr);
    state.opt_param_names = names;
  }

  const int n = static_cast<int>(data.size());
  auto build = [&](int slot, Tape<float>& tape) {
    std::vector<int> batch = batch_indices(cfg.seed, state.step, n, cfg.batch_size);
    const CompositeSample& sample = data[static_cast<std::size_t>(batch[static_cast<std::size_t>(slot)])];
    SampleLoss loss = compute_sample_loss(state.model, sample, ann.find(sample.id), tape);
    std::string bad = first_non_finite(loss.report);
    if (!bad.empty()) abort_non_finite(bad, state.step, sample.id);
    tape.backward_no_flush(loss.all);
    return loss.report;
  };
  return run_steps(state, cfg, params, build);
}

TrainOutcome train_exit_head_only(const std::vector<CompositeSample>& data,
                                  const std::vector<AnnotationRecord>& annotations,
                                  const TrainConfig& cfg, const TrainState* resume) {
  cfg.validate();
  if (data.empty()) fail_validation("train: empty dataset");
  AnnotationIndex ann(data, annotations);
  if (ann.labels.empty())
    fail_validation("train_exit_head_only: no annotated samples");

  TrainState state;
  if (resume) {
    if (config_to_json(resume->model.config) != config_to_json(cfg.model))
      fail_validation("train: resume checkpoint config differs from requested config");
    state = clone_state(*resume);
  } else {
    state.model = init_model<float>(cfg.model, cfg.seed);
    state.step = 0;
  }
  std::vector<Tensor<float>*> params = state.model.exit_head_parameters();
  std::vector<std::string> names = names_of(state.model, params);
  if (!resume || state.opt_param_names != names) {
    // fresh phase-two optimizer over the head alone (e.g. when resuming from
    // a jointly trained model)
    state.opt = adam_init(params, cfg.lr);
    state.opt_param_names = names;
    state.step = 0;
  } else {
    state.opt.lr = cfg.lr;
  }

  // The trunk is fixed in this phase, so pooled exit-head inputs are
  // precomputed once per annotated sample.
  struct Cached {
    std::array<Tensor<float>, 3> pooled;
    std::array<int, 3> labels;
    std::string id;
  };
  std::vector<Cached> cache;
  for (const CompositeSample& s : data) {
    const std::array<int, 3>* labels = ann.find(s.id);
    if (!labels) continue;
    s.validate(true);
    if (s.composite.dim(2) != cfg.model.image_size)
      fail_validation("train: sample ", s.id, " extent ", s.composite.dim(2),
                      " does not match configured image_size ", cfg.model.image_size);
    ForwardOptions<float> opts;
    opts.max_stage = 3;
    opts.images_all_stages = false;
    HarmonizeResult<float> fwd = forward(state.model, s.composite, s.fg_mask, opts);
    Cached c;
    c.pooled = fwd.pooled;
    c.labels = *labels;
    c.id = s.id;
    cache.push_back(std::move(c));
  }
  const int n = static_cast<int>(cache.size());

  auto build = [&](int slot, Tape<float>& tape) {
    std::vector<int> batch = batch_indices(cfg.seed, state.step, n, cfg.batch_size);
    const Cached& c = cache[static_cast<std::size_t>(batch[static_cast<std::size_t>(slot)])];
    Tensor<float> h = Tensor<float>::zeros({1, cfg.model.gru_hidden});
    std::array<double, 4> style{}, content{};
    std::array<double, 3> bce{};
    std::array<bool, 3> present{};
    Tensor<float> all;
    for (int k = 1; k <= 3; ++k) {
      GruStepOut<float> step =
          gru_step(h, c.pooled[static_cast<std::size_t>(k - 1)], state.model.gru, &tape);
      h = step.h;
      Tensor<float> term =
          exit_bce(step.score, c.labels[static_cast<std::size_t>(k - 1)], &tape);
      bce[static_cast<std::size_t>(k - 1)] = static_cast<double>(term.item());
      present[static_cast<std::size_t>(k - 1)] = true;
      all = all.defined() ? add(all, term, &tape) : term;
    }
    LossReport report = total_loss(style, content, bce, present, false);
    std::string bad = first_non_finite(report);
    if (!bad.empty()) abort_non_finite(bad, state.step, c.id);
    tape.backward_no_flush(all);
    return report;
  };
  return run_steps(state, cfg, params, build);
}

double exit_label_accuracy(const ModelWeights<float>& model,
                           const std::vector<CompositeSample>& data,
                           const std::vector<AnnotationRecord>& annotations) {
  AnnotationIndex ann(data, annotations);
  if (ann.labels.empty()) fail_validation("exit_label_accuracy: no annotated samples");
  std::int64_t correct = 0, total = 0;
  for (const CompositeSample& s : data) {
    const std::array<int, 3>* labels = ann.find(s.id);
    if (!labels) continue;
    ForwardOptions<float> opts;
    opts.max_stage = 3;
    opts.images_all_stages = false;
    HarmonizeResult<float> fwd = forward(model, s.composite, s.fg_mask, opts);
    for (int k = 0; k < 3; ++k) {
      double score = static_cast<double>(fwd.exit_scores[static_cast<std::size_t>(k)].item());
      int predicted = score > model.config.exit_threshold ? 1 : 0;
      if (predicted == (*labels)[static_cast<std::size_t>(k)]) ++correct;
      ++total;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(total);
}

}  // namespace propih
