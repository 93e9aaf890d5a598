#include "propih/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <deque>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "json.hpp"

#include "propih/encoder.hpp"

namespace propih {

using ordered_json = nlohmann::ordered_json;

// ---- exit-stage distribution ----

std::array<double, 4> ExitHistogram::fractions() const {
  std::array<double, 4> f{};
  if (total == 0) return f;
  for (int k = 0; k < 4; ++k)
    f[static_cast<std::size_t>(k)] =
        static_cast<double>(counts[static_cast<std::size_t>(k)]) /
        static_cast<double>(total);
  return f;
}

std::string ExitHistogram::to_json() const {
  ordered_json j;
  j["counts"] = counts;
  j["total"] = total;
  if (total == 0)
    j["fractions"] = nullptr;  // undefined on empty input
  else
    j["fractions"] = fractions();
  return j.dump();
}

std::string ExitHistogram::to_table() const {
  std::ostringstream os;
  os << "stage  count  fraction\n";
  const auto f = fractions();
  for (int k = 0; k < 4; ++k) {
    os << std::left << std::setw(7) << k + 1 << std::setw(7)
       << counts[static_cast<std::size_t>(k)];
    if (total == 0)
      os << "n/a";
    else
      os << std::fixed << std::setprecision(4) << f[static_cast<std::size_t>(k)];
    os << '\n';
  }
  os << "total  " << total << '\n';
  return os.str();
}

ExitHistogram exit_histogram(const std::vector<int>& exit_stages) {
  ExitHistogram h;
  for (int s : exit_stages) {
    if (s < 1 || s > 4) fail_validation("exit_histogram: stage must be 1..4, got ", s);
    h.counts[static_cast<std::size_t>(s - 1)] += 1;
    h.total += 1;
  }
  return h;
}

// ---- pairwise preference ranking ----

int PairwiseCounts::add_method(const std::string& name) {
  int i = index_of(name);
  if (i >= 0) return i;
  methods.push_back(name);
  for (auto& row : wins) row.push_back(0);
  wins.emplace_back(methods.size(), 0);
  return static_cast<int>(methods.size()) - 1;
}

int PairwiseCounts::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < methods.size(); ++i)
    if (methods[i] == name) return static_cast<int>(i);
  return -1;
}

void PairwiseCounts::add_result(const std::string& a, const std::string& b,
                                std::int64_t wins_a, std::int64_t wins_b) {
  if (a == b) fail_validation("pairwise: method compared against itself: ", a);
  if (wins_a < 0 || wins_b < 0)
    fail_validation("pairwise: win counts must be >= 0 for ", a, " vs ", b);
  const int i = add_method(a);
  const int j = add_method(b);
  wins[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] += wins_a;
  wins[static_cast<std::size_t>(j)][static_cast<std::size_t>(i)] += wins_b;
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  std::istringstream is(line);
  while (std::getline(is, field, ',')) {
    // trim surrounding spaces; values never contain commas or quotes here
    std::size_t b = field.find_first_not_of(" \t\r");
    std::size_t e = field.find_last_not_of(" \t\r");
    fields.push_back(b == std::string::npos ? "" : field.substr(b, e - b + 1));
  }
  if (!line.empty() && line.back() == ',') fields.push_back("");
  return fields;
}

std::int64_t parse_count(const std::string& s, int line_no, const std::string& path) {
  try {
    std::size_t pos = 0;
    long long v = std::stoll(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    fail_validation("pairwise csv ", path, ":", line_no, ": bad count \"", s, "\"");
  }
}

}  // namespace

PairwiseCounts pairwise_counts_from_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) fail_validation("pairwise csv: cannot open ", path);
  std::string line;
  int line_no = 0;
  PairwiseCounts counts;
  bool saw_header = false;
  while (std::getline(f, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> fields = split_csv_line(line);
    if (!saw_header) {
      if (fields != std::vector<std::string>{"method_a", "method_b", "wins_a", "wins_b"})
        fail_validation("pairwise csv ", path,
                        ": header must be method_a,method_b,wins_a,wins_b");
      saw_header = true;
      continue;
    }
    if (fields.size() != 4)
      fail_validation("pairwise csv ", path, ":", line_no, ": expected 4 fields, got ",
                      fields.size());
    if (fields[0].empty() || fields[1].empty())
      fail_validation("pairwise csv ", path, ":", line_no, ": empty method name");
    counts.add_result(fields[0], fields[1], parse_count(fields[2], line_no, path),
                      parse_count(fields[3], line_no, path));
  }
  if (!saw_header) fail_validation("pairwise csv ", path, ": empty file");
  return counts;
}

std::string BtScores::to_json() const {
  ordered_json j;
  j["methods"] = methods;
  j["scores"] = scores;
  j["iterations"] = iterations;
  j["converged"] = converged;
  j["log_likelihood"] = log_likelihood;
  return j.dump();
}

std::string BtScores::to_table() const {
  std::vector<std::size_t> order(methods.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::size_t width = 6;
  for (const std::string& m : methods) width = std::max(width, m.size());
  std::ostringstream os;
  os << std::left << std::setw(static_cast<int>(width) + 2) << "method"
     << "log_strength\n";
  for (std::size_t i : order)
    os << std::left << std::setw(static_cast<int>(width) + 2) << methods[i]
       << std::showpos << std::fixed << std::setprecision(4) << scores[i]
       << std::noshowpos << '\n';
  os << (converged ? "converged" : "not converged") << " after " << iterations
     << " sweeps\n";
  return os.str();
}

BtScores bt_fit(const PairwiseCounts& counts, double tol, int max_iters) {
  const std::size_t n = counts.methods.size();
  if (n < 2) fail_validation("bt_fit: need at least 2 methods, got ", n);
  if (counts.wins.size() != n)
    fail_validation("bt_fit: wins matrix has ", counts.wins.size(), " rows for ", n,
                    " methods");
  for (std::size_t i = 0; i < n; ++i)
    if (counts.wins[i].size() != n)
      fail_validation("bt_fit: wins row ", i, " has ", counts.wins[i].size(),
                      " entries for ", n, " methods");
  if (!(tol > 0.0)) fail_validation("bt_fit: tol must be positive");
  if (max_iters < 1) fail_validation("bt_fit: max_iters must be >= 1");

  // Finite maximum-likelihood strengths need every method to win and lose at
  // least once, and the comparison graph to be connected.
  std::vector<std::int64_t> win_total(n, 0), loss_total(n, 0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j && counts.wins[i][j] != 0)
        fail_validation("bt_fit: nonzero self-comparison for ", counts.methods[i]);
      win_total[i] += counts.wins[i][j];
      loss_total[j] += counts.wins[i][j];
    }
  for (std::size_t i = 0; i < n; ++i) {
    if (win_total[i] == 0)
      fail_validation("bt_fit: method ", counts.methods[i],
                      " never wins; its strength is unbounded below");
    if (loss_total[i] == 0)
      fail_validation("bt_fit: method ", counts.methods[i],
                      " never loses; its strength is unbounded above");
  }
  std::vector<char> seen(n, 0);
  std::deque<std::size_t> queue{0};
  seen[0] = 1;
  std::size_t reached = 1;
  while (!queue.empty()) {
    std::size_t i = queue.front();
    queue.pop_front();
    for (std::size_t j = 0; j < n; ++j)
      if (!seen[j] && counts.wins[i][j] + counts.wins[j][i] > 0) {
        seen[j] = 1;
        ++reached;
        queue.push_back(j);
      }
  }
  if (reached != n)
    for (std::size_t j = 0; j < n; ++j)
      if (!seen[j])
        fail_validation("bt_fit: comparison graph is disconnected; ",
                        counts.methods[j], " shares no comparisons with ",
                        counts.methods[0]);

  auto log_likelihood = [&](const std::vector<double>& s) {
    double ll = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (i != j && counts.wins[i][j] > 0)
          ll += static_cast<double>(counts.wins[i][j]) *
                (std::log(s[i]) - std::log(s[i] + s[j]));
    return ll;
  };

  std::vector<double> s(n, 1.0), next(n);
  BtScores out;
  out.methods = counts.methods;
  for (int iter = 1; iter <= max_iters; ++iter) {
    // simultaneous minorization-maximization update from the previous sweep
    for (std::size_t i = 0; i < n; ++i) {
      double denom = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        if (i == j) continue;
        const std::int64_t games = counts.wins[i][j] + counts.wins[j][i];
        if (games > 0) denom += static_cast<double>(games) / (s[i] + s[j]);
      }
      next[i] = static_cast<double>(win_total[i]) / denom;
    }
    double mean_log = 0.0;
    for (double v : next) mean_log += std::log(v);
    mean_log /= static_cast<double>(n);
    const double norm = std::exp(mean_log);
    double delta = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      next[i] /= norm;
      delta = std::max(delta, std::abs(std::log(next[i]) - std::log(s[i])));
    }
    s = next;
    out.log_likelihood.push_back(log_likelihood(s));
    out.iterations = iter;
    if (delta < tol) {
      out.converged = true;
      break;
    }
  }
  out.scores.resize(n);
  for (std::size_t i = 0; i < n; ++i) out.scores[i] = std::log(s[i]);
  return out;
}

// ---- deterministic cost model ----

namespace {

// 3x3 convolution, stride 1, padding 1: output resolution equals input.
std::int64_t conv_cost(std::int64_t cin, std::int64_t cout, std::int64_t res) {
  return 2 * 9 * cin * cout * res * res + cout * res * res;
}

std::int64_t elems(std::int64_t c, std::int64_t res) { return c * res * res; }

std::int64_t encoder_stage_cost(const HarmonizerConfig& cfg, int stage, int* res_io) {
  auto specs = encoder_stage_specs(cfg.base_width);
  std::int64_t cost = 0;
  int res = *res_io;
  for (const EncoderConvSpec& s : specs[static_cast<std::size_t>(stage - 1)]) {
    if (s.pool_before) {
      res /= 2;
      cost += elems(s.cin, res);  // max pooling, 1 per output element
    }
    cost += conv_cost(s.cin, s.cout, res);
    cost += elems(s.cout, res);  // relu
  }
  *res_io = res;
  return cost;
}

std::int64_t decoder_stage_cost(const HarmonizerConfig& cfg, int stage) {
  std::int64_t c = encoder_stage_channels(cfg.base_width, stage);
  std::int64_t res = cfg.image_size >> (stage - 1);
  std::int64_t cost = conv_cost(c, c / 2, res) + elems(c / 2, res);
  c /= 2;
  for (int j = 0; j < stage; ++j) {
    const int scale = j == 0 ? 1 : 2;
    res *= scale;
    cost += elems(c, res);  // upsample, 1 per output element (scale 1 included)
    cost += conv_cost(c, c / 2, res) + elems(c / 2, res);
    c /= 2;
  }
  return cost;
}

std::int64_t fusion_stage_cost(const HarmonizerConfig& cfg) {
  const std::int64_t w4 = cfg.base_width / 4;
  const std::int64_t res = cfg.image_size;
  std::int64_t cost = conv_cost(2 * w4, w4, res) + elems(w4, res) +
                      conv_cost(w4, w4, res) + elems(w4, res);
  if (!cfg.single_fusion_block)
    cost += 2 * (conv_cost(w4, w4, res) + elems(w4, res));
  return cost;
}

std::int64_t exit_step_cost(const HarmonizerConfig& cfg) {
  const std::int64_t in = cfg.base_width / 4;
  const std::int64_t h = cfg.gru_hidden;
  return in                                 // global average pooling
         + 2 * 3 * (in * h + h * h) + 14 * h  // gated recurrent update
         + 2 * h + 2;                       // scoring head
}

std::int64_t out_conv_cost(const HarmonizerConfig& cfg) {
  return conv_cost(cfg.base_width / 4, 3, cfg.image_size);
}

}  // namespace

std::string FlopsReport::to_json() const {
  ordered_json j;
  j["stage_flops"] = stage_flops;
  j["cumulative"] = cumulative;
  if (exit_fractions) j["exit_fractions"] = *exit_fractions;
  if (expected_flops) j["expected_flops"] = *expected_flops;
  return j.dump();
}

std::string FlopsReport::to_table() const {
  std::ostringstream os;
  os << "stage  stage_flops      cumulative\n";
  for (int k = 0; k < 4; ++k)
    os << std::left << std::setw(7) << k + 1 << std::setw(17)
       << stage_flops[static_cast<std::size_t>(k)]
       << cumulative[static_cast<std::size_t>(k)] << '\n';
  if (expected_flops) {
    os << "expected under exit fractions (";
    for (int k = 0; k < 4; ++k)
      os << (k ? ", " : "") << std::fixed << std::setprecision(4)
         << (*exit_fractions)[static_cast<std::size_t>(k)];
    os << "): " << std::setprecision(0) << *expected_flops << '\n';
  }
  return os.str();
}

FlopsReport count_flops(const HarmonizerConfig& cfg) {
  cfg.validate();
  FlopsReport r;
  int res = cfg.image_size;
  std::int64_t running = 0;  // everything shared by later stages
  for (int k = 1; k <= 4; ++k) {
    running += encoder_stage_cost(cfg, k, &res);
    running += decoder_stage_cost(cfg, k);
    if (k >= 2) running += fusion_stage_cost(cfg);
    if (k <= 3) running += exit_step_cost(cfg);
    r.cumulative[static_cast<std::size_t>(k - 1)] = running + out_conv_cost(cfg);
  }
  r.stage_flops[0] = r.cumulative[0];
  for (int k = 1; k < 4; ++k)
    r.stage_flops[static_cast<std::size_t>(k)] =
        r.cumulative[static_cast<std::size_t>(k)] -
        r.cumulative[static_cast<std::size_t>(k - 1)];
  return r;
}

FlopsReport count_flops(const HarmonizerConfig& cfg,
                        const std::array<double, 4>& exit_fractions) {
  double sum = 0.0;
  for (double f : exit_fractions) {
    if (!(f >= 0.0 && f <= 1.0))
      fail_validation("count_flops: exit fractions must lie in [0,1]");
    sum += f;
  }
  if (std::abs(sum - 1.0) > 1e-9)
    fail_validation("count_flops: exit fractions sum to ", sum, ", expected 1");
  FlopsReport r = count_flops(cfg);
  double expected = 0.0;
  for (int k = 0; k < 4; ++k)
    expected += exit_fractions[static_cast<std::size_t>(k)] *
                static_cast<double>(r.cumulative[static_cast<std::size_t>(k)]);
  r.exit_fractions = exit_fractions;
  r.expected_flops = expected;
  return r;
}

// ---- wall-clock timing ----

std::string StageTimings::to_json() const {
  ordered_json j;
  j["repetitions"] = repetitions;
  j["mean_ms"] = mean_ms;
  j["median_ms"] = median_ms;
  j["min_ms"] = min_ms;
  j["max_ms"] = max_ms;
  return j.dump();
}

std::string StageTimings::to_table() const {
  std::ostringstream os;
  os << "stage  mean_ms   median_ms  min_ms    max_ms\n" << std::fixed
     << std::setprecision(2);
  for (int k = 0; k < 4; ++k)
    os << std::left << std::setw(7) << k + 1 << std::setw(10)
       << mean_ms[static_cast<std::size_t>(k)] << std::setw(11)
       << median_ms[static_cast<std::size_t>(k)] << std::setw(10)
       << min_ms[static_cast<std::size_t>(k)] << max_ms[static_cast<std::size_t>(k)]
       << '\n';
  os << "repetitions per stage: " << repetitions << '\n';
  return os.str();
}

StageTimings time_stages(const ModelWeights<float>& model,
                         const std::vector<CompositeSample>& samples,
                         int repetitions) {
  if (samples.empty()) fail_validation("time_stages: no samples");
  if (repetitions < 1) fail_validation("time_stages: repetitions must be >= 1");
  std::array<std::vector<double>, 4> runs;
  for (auto& v : runs) v.reserve(static_cast<std::size_t>(repetitions));
  for (int rep = 0; rep < repetitions; ++rep) {
    const CompositeSample& s = samples[static_cast<std::size_t>(rep) % samples.size()];
    for (int k = 1; k <= 4; ++k) {
      ForwardOptions<float> opts;
      opts.max_stage = k;
      opts.images_all_stages = false;
      const auto t0 = std::chrono::steady_clock::now();
      forward(model, s.composite, s.fg_mask, opts);
      const auto t1 = std::chrono::steady_clock::now();
      runs[static_cast<std::size_t>(k - 1)].push_back(
          std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
  }
  StageTimings t;
  t.repetitions = repetitions;
  for (int k = 0; k < 4; ++k) {
    std::vector<double>& v = runs[static_cast<std::size_t>(k)];
    std::sort(v.begin(), v.end());
    double sum = 0.0;
    for (double x : v) sum += x;
    t.mean_ms[static_cast<std::size_t>(k)] = sum / static_cast<double>(v.size());
    const std::size_t m = v.size() / 2;
    t.median_ms[static_cast<std::size_t>(k)] =
        v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
    t.min_ms[static_cast<std::size_t>(k)] = v.front();
    t.max_ms[static_cast<std::size_t>(k)] = v.back();
  }
  return t;
}

}  // namespace propih
