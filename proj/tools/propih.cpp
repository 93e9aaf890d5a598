// Command-line front end: dataset synthesis, harmonization, training, and
// evaluation reports. Exit codes: 0 success, 1 invalid input or usage,
// 2 internal failure. PROPIH_THREADS caps internal parallelism.
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "propih/data.hpp"
#include "propih/eval.hpp"
#include "propih/harmonet.hpp"
#include "propih/trainer.hpp"

namespace {

using propih::AnnotationRecord;
using propih::CompositeSample;
using propih::fail_validation;
using ordered_json = nlohmann::ordered_json;

std::string read_text_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail_validation("cannot open ", path);
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

// Exit-stage frequencies used when synthesizing annotations; matches the
// observed preference for mid-pipeline exits.
constexpr std::array<double, 4> kSynthExitWeights = {0.021, 0.223, 0.474, 0.282};

int draw_exit_stage(propih::Rng& rng) {
  const double u = rng.uniform();
  double acc = 0.0;
  for (int k = 0; k < 4; ++k) {
    acc += kSynthExitWeights[static_cast<std::size_t>(k)];
    if (u < acc) return k + 1;
  }
  return 4;
}

int thread_cap_from_env() {
  const char* env = std::getenv("PROPIH_THREADS");
  if (!env || !*env) return 0;
  try {
    std::size_t pos = 0;
    int v = std::stoi(env, &pos);
    if (pos != std::string(env).size() || v < 1)
      fail_validation("PROPIH_THREADS must be a positive integer, got \"", env, "\"");
    return v;
  } catch (const propih::ValidationError&) {
    throw;
  } catch (const std::exception&) {
    fail_validation("PROPIH_THREADS must be a positive integer, got \"", env, "\"");
  }
}

struct SynthArgs {
  std::string out_dir;
  int n = 16;
  int size = 64;
  std::uint64_t seed = 0;
  std::string annotations;
};

int run_synth(const SynthArgs& a) {
  std::vector<CompositeSample> samples = propih::synth_dataset(a.n, a.size, a.seed);
  std::string manifest = propih::save_dataset(a.out_dir, samples);
  if (!a.annotations.empty()) {
    propih::Rng rng(propih::Rng::mix(a.seed, 0x616e6e));
    std::vector<AnnotationRecord> recs;
    for (const CompositeSample& s : samples) {
      AnnotationRecord r;
      r.sample_id = s.id;
      r.exit_stage = draw_exit_stage(rng);
      r.labels = propih::derive_labels(r.exit_stage);
      recs.push_back(std::move(r));
    }
    propih::write_annotations(a.annotations, recs);
  }
  std::cout << "wrote " << samples.size() << " samples, manifest " << manifest << '\n';
  return 0;
}

struct HarmonizeArgs {
  std::string model, composite, mask, out_dir;
  bool all_stages = false;
  int force_stage = 0;  // 0: learned policy
  double threshold = -1.0;
};

int run_harmonize(const HarmonizeArgs& a) {
  propih::ModelWeights<float> model = propih::load_model(a.model);
  propih::Tensor<float> image = propih::load_image(a.composite);
  propih::Tensor<float> mask = propih::load_mask(a.mask);

  propih::ForwardOptions<float> opts;
  opts.threshold = a.threshold;
  opts.images_all_stages = a.all_stages;
  if (a.force_stage > 0)
    opts.max_stage = a.all_stages ? 4 : a.force_stage;
  else
    // stop computing once a score clears the threshold, unless every
    // stage's image was asked for anyway
    opts.stop_at_exit = !a.all_stages;
  propih::HarmonizeResult<float> res = propih::forward(model, image, mask, opts);
  const int exit_stage = a.force_stage > 0 ? a.force_stage : res.predicted_exit;

  std::filesystem::create_directories(a.out_dir);
  const auto stage_path = [&](int k) {
    return (std::filesystem::path(a.out_dir) / ("stage_" + std::to_string(k) + ".ppm"))
        .string();
  };
  if (a.all_stages) {
    for (int k = 1; k <= 4; ++k)
      propih::save_image(res.stage_images[static_cast<std::size_t>(k - 1)],
                         stage_path(k));
  } else {
    propih::save_image(res.stage_images[static_cast<std::size_t>(exit_stage - 1)],
                       stage_path(exit_stage));
  }
  for (const std::string& w : res.warnings) std::cerr << "warning: " << w << '\n';

  ordered_json j;
  j["predicted_exit"] = exit_stage;
  j["forced"] = a.force_stage > 0;
  std::vector<double> scores;
  for (const auto& s : res.exit_scores)
    if (s.defined()) scores.push_back(static_cast<double>(s.item()));
  j["exit_scores"] = scores;
  j["threshold"] = a.threshold >= 0.0 ? a.threshold : model.config.exit_threshold;
  j["warnings"] = res.warnings;
  const std::string report = (std::filesystem::path(a.out_dir) / "result.json").string();
  std::ofstream f(report);
  if (!f) fail_validation("cannot open ", report);
  f << j.dump(2) << '\n';
  std::cout << "stage " << exit_stage << " -> " << stage_path(exit_stage) << '\n';
  return 0;
}

struct TrainArgs {
  std::string data, config, annotations, resume, out, log, checkpoint;
  int steps = -1;  // <0: value from the config file
  bool exit_head_only = false;
};

int run_train(const TrainArgs& a) {
  propih::TrainConfig cfg = propih::train_config_from_json(read_text_file(a.config));
  if (a.steps >= 0) cfg.steps = a.steps;
  if (!a.log.empty()) cfg.log_path = a.log;
  const int cap = thread_cap_from_env();
  if (cap > 0) cfg.threads = cfg.threads == 0 ? cap : std::min(cfg.threads, cap);
  std::vector<CompositeSample> data = propih::load_dataset(a.data);
  std::vector<AnnotationRecord> annotations;
  if (!a.annotations.empty()) annotations = propih::load_annotations(a.annotations);

  propih::TrainState resumed;
  const propih::TrainState* resume = nullptr;
  if (!a.resume.empty()) {
    resumed = propih::load_checkpoint(a.resume);
    resume = &resumed;
  }
  propih::TrainOutcome outcome =
      a.exit_head_only ? propih::train_exit_head_only(data, annotations, cfg, resume)
                       : propih::train(data, annotations, cfg, resume);
  propih::save_model(outcome.state.model, a.out);
  if (!a.checkpoint.empty()) propih::save_checkpoint(a.checkpoint, outcome.state);
  std::cout << "trained " << outcome.log.size() << " steps to step "
            << outcome.state.step << ", model -> " << a.out;
  if (!outcome.log.empty()) std::cout << ", final loss " << outcome.log.back().all;
  std::cout << '\n';
  return 0;
}

void print_report(bool pretty, const std::string& json, const std::string& table) {
  if (pretty)
    std::cout << table;
  else
    std::cout << json << '\n';
}

struct ExitDistArgs {
  std::string model, data;
  double threshold = -1.0;
  bool pretty = false;
};

int run_exit_dist(const ExitDistArgs& a) {
  propih::ModelWeights<float> model = propih::load_model(a.model);
  std::vector<CompositeSample> data = propih::load_dataset(a.data);
  std::vector<int> exits;
  for (const CompositeSample& s : data) {
    propih::ForwardOptions<float> opts;
    opts.images_all_stages = false;
    opts.stop_at_exit = true;
    opts.threshold = a.threshold;
    exits.push_back(propih::forward(model, s.composite, s.fg_mask, opts).predicted_exit);
  }
  propih::ExitHistogram h = propih::exit_histogram(exits);
  print_report(a.pretty, h.to_json(), h.to_table());
  return 0;
}

struct BtArgs {
  std::string pairs;
  double tol = 1e-8;
  int max_iters = 10000;
  bool pretty = false;
};

int run_bt_rank(const BtArgs& a) {
  propih::PairwiseCounts counts = propih::pairwise_counts_from_csv(a.pairs);
  propih::BtScores scores = propih::bt_fit(counts, a.tol, a.max_iters);
  print_report(a.pretty, scores.to_json(), scores.to_table());
  return 0;
}

struct FlopsArgs {
  std::string config, model;
  std::vector<double> exit_fractions;
  bool pretty = false;
};

int run_flops(const FlopsArgs& a) {
  if (a.config.empty() == a.model.empty())
    fail_validation("flops: give exactly one of --config or --model");
  propih::HarmonizerConfig cfg =
      a.config.empty() ? propih::load_model(a.model).config
                       : propih::config_from_json(read_text_file(a.config));
  propih::FlopsReport r;
  if (a.exit_fractions.empty()) {
    r = propih::count_flops(cfg);
  } else {
    if (a.exit_fractions.size() != 4)
      fail_validation("flops: --exit-fractions needs 4 values, got ",
                      a.exit_fractions.size());
    std::array<double, 4> f{};
    std::copy(a.exit_fractions.begin(), a.exit_fractions.end(), f.begin());
    r = propih::count_flops(cfg, f);
  }
  print_report(a.pretty, r.to_json(), r.to_table());
  return 0;
}

struct TimingArgs {
  std::string model, data;
  int reps = 5;
  bool pretty = false;
};

int run_timing(const TimingArgs& a) {
  propih::ModelWeights<float> model = propih::load_model(a.model);
  std::vector<CompositeSample> data = propih::load_dataset(a.data);
  propih::StageTimings t = propih::time_stages(model, data, a.reps);
  print_report(a.pretty, t.to_json(), t.to_table());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"progressive painterly image harmonization"};
  app.require_subcommand(1);

  SynthArgs synth_args;
  CLI::App* synth = app.add_subcommand("synth", "generate a synthetic composite dataset");
  synth->add_option("--n", synth_args.n, "number of samples");
  synth->add_option("--size", synth_args.size, "square image extent (multiple of 8)");
  synth->add_option("--seed", synth_args.seed, "generator seed");
  synth->add_option("--out-dir", synth_args.out_dir, "output directory")->required();
  synth->add_option("--annotations", synth_args.annotations,
                    "also write synthetic exit annotations (JSONL)");

  HarmonizeArgs harm_args;
  CLI::App* harm = app.add_subcommand("harmonize", "harmonize a composite image");
  harm->add_option("--model", harm_args.model, "model weights (.ptw)")->required();
  harm->add_option("--composite", harm_args.composite, "composite image (PPM)")->required();
  harm->add_option("--mask", harm_args.mask, "foreground mask (PGM)")->required();
  harm->add_option("--out-dir", harm_args.out_dir,
                   "receives stage_{k}.ppm and result.json")->required();
  harm->add_flag("--all-stages", harm_args.all_stages, "write every stage's image");
  harm->add_option("--force-stage", harm_args.force_stage,
                   "use this exit stage instead of the learned policy")
      ->check(CLI::Range(1, 4));
  harm->add_option("--threshold", harm_args.threshold, "exit threshold override in [0,1]");

  TrainArgs train_args;
  CLI::App* train = app.add_subcommand("train", "train a model");
  train->add_option("--config", train_args.config, "training config (JSON)")->required();
  train->add_option("--data", train_args.data, "dataset manifest")->required();
  train->add_option("--annotations", train_args.annotations, "exit annotations (JSONL)");
  train->add_option("--out", train_args.out, "output model path (.ptw)")->required();
  train->add_option("--resume", train_args.resume, "checkpoint to resume from");
  train->add_option("--log", train_args.log, "JSONL loss log (overrides config)");
  train->add_option("--steps", train_args.steps, "step count (overrides config)");
  train->add_flag("--exit-head-only", train_args.exit_head_only,
                  "train only the exit policy on a fixed trunk");
  train->add_option("--save-checkpoint", train_args.checkpoint,
                    "also write a resumable checkpoint");

  CLI::App* eval = app.add_subcommand("eval", "evaluation reports (JSON to stdout)");
  eval->require_subcommand(1);

  ExitDistArgs dist_args;
  CLI::App* dist = eval->add_subcommand("exit-dist", "exit-stage distribution over a dataset");
  dist->add_option("--model", dist_args.model)->required();
  dist->add_option("--data", dist_args.data)->required();
  dist->add_option("--threshold", dist_args.threshold, "exit threshold override");
  dist->add_flag("--pretty", dist_args.pretty, "aligned text table instead of JSON");

  BtArgs bt_args;
  CLI::App* bt = eval->add_subcommand("bt-rank", "Bradley-Terry ranking from pairwise CSV");
  bt->add_option("--pairs", bt_args.pairs, "CSV: method_a,method_b,wins_a,wins_b")->required();
  bt->add_option("--tol", bt_args.tol, "convergence tolerance on log-strengths");
  bt->add_option("--max-iters", bt_args.max_iters, "sweep limit");
  bt->add_flag("--pretty", bt_args.pretty, "aligned text table instead of JSON");

  FlopsArgs flops_args;
  CLI::App* flops = eval->add_subcommand("flops", "deterministic per-stage cost model");
  flops->add_option("--config", flops_args.config, "model config (JSON)");
  flops->add_option("--model", flops_args.model, "model weights (.ptw)");
  flops->add_option("--exit-fractions", flops_args.exit_fractions,
                    "4 comma-separated fractions for the expected cost")
      ->delimiter(',');
  flops->add_flag("--pretty", flops_args.pretty, "aligned text table instead of JSON");

  TimingArgs timing_args;
  CLI::App* timing = eval->add_subcommand("timing", "wall-clock per-stage latency");
  timing->add_option("--model", timing_args.model)->required();
  timing->add_option("--data", timing_args.data)->required();
  timing->add_option("--reps", timing_args.reps, "repetitions per stage")
      ->check(CLI::PositiveNumber);
  timing->add_flag("--pretty", timing_args.pretty, "aligned text table instead of JSON");

  try {
    app.parse(argc, argv);
    if (*synth) return run_synth(synth_args);
    if (*harm) return run_harmonize(harm_args);
    if (*train) return run_train(train_args);
    if (*dist) return run_exit_dist(dist_args);
    if (*bt) return run_bt_rank(bt_args);
    if (*flops) return run_flops(flops_args);
    if (*timing) return run_timing(timing_args);
    return 1;
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  } catch (const propih::ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
}
