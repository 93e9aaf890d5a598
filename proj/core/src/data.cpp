#include "propih/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include "json.hpp"

namespace propih {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

double CompositeSample::foreground_ratio() const {
  const auto& v = fg_mask.values();
  std::int64_t count = 0;
  for (float m : v)
    if (m == 1.f) ++count;
  return static_cast<double>(count) / static_cast<double>(v.size());
}

Tensor<float> CompositeSample::bg_mask() const {
  std::vector<float> inv(fg_mask.values().size());
  for (std::size_t i = 0; i < inv.size(); ++i)
    inv[i] = fg_mask.values()[i] == 1.f ? 0.f : 1.f;
  return Tensor<float>(fg_mask.shape(), std::move(inv));
}

void CompositeSample::validate(bool check_ratio) const {
  if (id.empty()) fail_validation("sample: empty id");
  if (!composite.defined() || composite.shape().size() != 4 || composite.dim(0) != 1 ||
      composite.dim(1) != 3)
    fail_validation("sample ", id, ": composite must be [1,3,S,S]");
  const int h = composite.dim(2), w = composite.dim(3);
  if (!fg_mask.defined() || fg_mask.shape() != Shape{1, 1, h, w})
    fail_validation("sample ", id, ": mask must be [1,1,", h, ",", w, "]");
  for (float m : fg_mask.values())
    if (!(m == 0.f || m == 1.f))
      fail_validation("sample ", id, ": mask values must be exactly 0 or 1");
  for (float v : composite.values())
    if (!(v >= 0.f && v <= 1.f))
      fail_validation("sample ", id, ": composite values must lie in [0,1]");
  if (background.defined() && background.shape() != composite.shape())
    fail_validation("sample ", id, ": background shape ", shape_str(background.shape()),
                    " differs from composite ", shape_str(composite.shape()));
  if (check_ratio) {
    double r = foreground_ratio();
    if (r < kMinForegroundRatio || r > kMaxForegroundRatio)
      fail_validation("sample ", id, ": foreground ratio ", r, " outside [",
                      kMinForegroundRatio, ",", kMaxForegroundRatio, "]");
  }
}

CompositeSample compose(const Tensor<float>& fg_image, const Tensor<float>& fg_mask,
                        const Tensor<float>& background, Placement at,
                        const std::string& id) {
  if (!fg_image.defined() || !fg_mask.defined() || !background.defined())
    fail_validation("compose: undefined input tensor");
  if (fg_image.shape().size() != 4 || fg_image.dim(0) != 1 || fg_image.dim(1) != 3)
    fail_validation("compose: fg image must be [1,3,h,w]");
  if (background.shape().size() != 4 || background.dim(0) != 1 || background.dim(1) != 3)
    fail_validation("compose: background must be [1,3,H,W]");
  const int fh = fg_image.dim(2), fw = fg_image.dim(3);
  if (fg_mask.shape() != Shape{1, 1, fh, fw})
    fail_validation("compose: fg mask ", shape_str(fg_mask.shape()),
                    " does not match fg image ", shape_str(fg_image.shape()));
  const int bh = background.dim(2), bw = background.dim(3);
  if (at.row < 0 || at.col < 0 || at.row + fh > bh || at.col + fw > bw)
    fail_validation("compose: placement (", at.row, ",", at.col, ") puts ", fh, "x", fw,
                    " foreground outside ", bh, "x", bw, " background");
  for (float m : fg_mask.values())
    if (!(m == 0.f || m == 1.f))
      fail_validation("compose: fg mask values must be exactly 0 or 1");

  CompositeSample s;
  s.id = id;
  s.background = background;
  std::vector<float> mask(static_cast<std::size_t>(bh) * bw, 0.f);
  std::vector<float> comp(background.values());
  const std::size_t bplane = static_cast<std::size_t>(bh) * bw;
  const std::size_t fplane = static_cast<std::size_t>(fh) * fw;
  for (int i = 0; i < fh; ++i)
    for (int j = 0; j < fw; ++j) {
      if (fg_mask.values()[static_cast<std::size_t>(i) * fw + j] != 1.f) continue;
      const std::size_t dst = static_cast<std::size_t>(at.row + i) * bw + (at.col + j);
      mask[dst] = 1.f;
      for (int c = 0; c < 3; ++c)
        comp[static_cast<std::size_t>(c) * bplane + dst] =
            fg_image.values()[static_cast<std::size_t>(c) * fplane +
                              static_cast<std::size_t>(i) * fw + j];
    }
  s.fg_mask = Tensor<float>({1, 1, bh, bw}, std::move(mask));
  s.composite = Tensor<float>({1, 3, bh, bw}, std::move(comp));
  s.validate(true);
  return s;
}

CompositeSample compose_random(const Tensor<float>& fg_image,
                               const Tensor<float>& fg_mask,
                               const Tensor<float>& background, Rng& rng,
                               const std::string& id) {
  const int fh = fg_image.dim(2), fw = fg_image.dim(3);
  const int bh = background.dim(2), bw = background.dim(3);
  if (fh > bh || fw > bw)
    fail_validation("compose_random: foreground ", fh, "x", fw,
                    " larger than background ", bh, "x", bw);
  Placement at;
  at.row = rng.uniform_int(0, bh - fh);
  at.col = rng.uniform_int(0, bw - fw);
  return compose(fg_image, fg_mask, background, at, id);
}

namespace {

// Value noise: bilinear interpolation of a random lattice, one octave per
// cell size.
std::vector<float> value_noise(int size, const std::vector<int>& cells, Rng& rng) {
  std::vector<float> out(static_cast<std::size_t>(size) * size, 0.f);
  float weight = 0.6f;
  float total = 0.f;
  for (int cell : cells) {
    const int g = size / cell + 1;
    std::vector<float> lattice(static_cast<std::size_t>(g + 1) * (g + 1));
    for (float& v : lattice) v = static_cast<float>(rng.uniform());
    for (int i = 0; i < size; ++i) {
      const float fy = static_cast<float>(i) / cell;
      const int y0 = static_cast<int>(fy);
      const float wy = fy - y0;
      for (int j = 0; j < size; ++j) {
        const float fx = static_cast<float>(j) / cell;
        const int x0 = static_cast<int>(fx);
        const float wx = fx - x0;
        const float* row0 = lattice.data() + static_cast<std::size_t>(y0) * (g + 1);
        const float* row1 = row0 + (g + 1);
        float top = row0[x0] * (1.f - wx) + row0[x0 + 1] * wx;
        float bot = row1[x0] * (1.f - wx) + row1[x0 + 1] * wx;
        out[static_cast<std::size_t>(i) * size + j] += weight * (top * (1.f - wy) + bot * wy);
      }
    }
    total += weight;
    weight *= 0.5f;
  }
  for (float& v : out) v /= total;
  return out;
}

float clamp01(float v) { return v < 0.f ? 0.f : (v > 1.f ? 1.f : v); }

}  // namespace

std::vector<CompositeSample> synth_dataset(int count, int size, std::uint64_t seed) {
  if (count < 0) fail_validation("synth_dataset: count must be >= 0, got ", count);
  if (size < 16 || size % 8 != 0)
    fail_validation("synth_dataset: size must be a multiple of 8 and >= 16, got ", size);
  std::vector<CompositeSample> out;
  out.reserve(static_cast<std::size_t>(count));
  Rng rng(Rng::mix(seed, 0x73796e74));
  for (int n = 0; n < count; ++n) {
    // background: noise through a 3-color palette
    auto noise = value_noise(size, {size / 4, size / 8}, rng);
    float palette[3][3];
    for (auto& color : palette)
      for (float& ch : color) ch = static_cast<float>(rng.uniform(0.08, 0.92));
    std::vector<float> bg(static_cast<std::size_t>(3) * size * size);
    const std::size_t plane = static_cast<std::size_t>(size) * size;
    for (std::size_t i = 0; i < plane; ++i) {
      float t = clamp01(noise[i]);
      const float* a = t < 0.5f ? palette[0] : palette[1];
      const float* b = t < 0.5f ? palette[1] : palette[2];
      float u = t < 0.5f ? t * 2.f : (t - 0.5f) * 2.f;
      for (int c = 0; c < 3; ++c) bg[static_cast<std::size_t>(c) * plane + i] = a[c] * (1.f - u) + b[c] * u;
    }
    Tensor<float> background({1, 3, size, size}, std::move(bg));

    // foreground shape sized for a ratio comfortably inside the bounds
    std::vector<float> mask;
    int fh = 0, fw = 0;
    const bool ellipse = rng.uniform() < 0.5;
    for (int attempt = 0;; ++attempt) {
      if (attempt >= 16)
        fail_validation("synth_dataset: could not place foreground for sample ", n);
      double ratio = rng.uniform(0.08, 0.26);
      double area = ratio * size * size;
      if (ellipse) area *= 4.0 / 3.141592653589793;
      double aspect = rng.uniform(0.6, 1.6);
      fh = std::max(4, std::min(size - 2, static_cast<int>(std::sqrt(area * aspect))));
      fw = std::max(4, std::min(size - 2, static_cast<int>(area / fh)));
      mask.assign(static_cast<std::size_t>(fh) * fw, 0.f);
      std::int64_t on = 0;
      if (ellipse) {
        const double cy = (fh - 1) / 2.0, cx = (fw - 1) / 2.0;
        for (int i = 0; i < fh; ++i)
          for (int j = 0; j < fw; ++j) {
            double dy = (i - cy) / (fh / 2.0), dx = (j - cx) / (fw / 2.0);
            if (dy * dy + dx * dx <= 1.0) {
              mask[static_cast<std::size_t>(i) * fw + j] = 1.f;
              ++on;
            }
          }
      } else {
        std::fill(mask.begin(), mask.end(), 1.f);
        on = static_cast<std::int64_t>(mask.size());
      }
      double got = static_cast<double>(on) / (static_cast<double>(size) * size);
      if (got > kMinForegroundRatio + 0.005 && got < kMaxForegroundRatio - 0.005) break;
    }

    // foreground appearance: flat color, vertical shading, mild noise;
    // offset from the background palette so there is something to harmonize
    std::vector<float> fg(static_cast<std::size_t>(3) * fh * fw);
    float base[3], shade;
    for (float& ch : base) ch = static_cast<float>(rng.uniform(0.0, 1.0));
    shade = static_cast<float>(rng.uniform(-0.25, 0.25));
    const std::size_t fplane = static_cast<std::size_t>(fh) * fw;
    for (int i = 0; i < fh; ++i) {
      float grad = shade * (static_cast<float>(i) / std::max(1, fh - 1) - 0.5f);
      for (int j = 0; j < fw; ++j) {
        float jitter = static_cast<float>(rng.uniform(-0.04, 0.04));
        for (int c = 0; c < 3; ++c)
          fg[static_cast<std::size_t>(c) * fplane + static_cast<std::size_t>(i) * fw + j] =
              clamp01(base[c] + grad + jitter);
      }
    }

    std::ostringstream id;
    id << "synth-" << std::setw(4) << std::setfill('0') << n;
    out.push_back(compose_random(Tensor<float>({1, 3, fh, fw}, std::move(fg)),
                                 Tensor<float>({1, 1, fh, fw}, std::move(mask)),
                                 background, rng, id.str()));
  }
  return out;
}

void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries) {
  ordered_json doc;
  doc["samples"] = ordered_json::array();
  for (const ManifestEntry& e : entries) {
    ordered_json j;
    j["id"] = e.id;
    j["composite"] = e.composite;
    j["mask"] = e.mask;
    if (!e.background.empty()) j["background"] = e.background;
    doc["samples"].push_back(std::move(j));
  }
  std::ofstream f(path, std::ios::trunc);
  if (!f) fail_validation("write_manifest: cannot open ", path);
  f << doc.dump(2) << '\n';
}

std::vector<ManifestEntry> read_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) fail_validation("read_manifest: cannot open ", path);
  ordered_json doc;
  try {
    doc = ordered_json::parse(f);
  } catch (const std::exception& e) {
    fail_validation("read_manifest: ", path, ": ", e.what());
  }
  if (!doc.is_object() || !doc.contains("samples") || !doc["samples"].is_array())
    fail_validation("read_manifest: ", path, ": expected {\"samples\": [...]}");
  std::vector<ManifestEntry> out;
  for (const auto& j : doc["samples"]) {
    ManifestEntry e;
    if (!j.contains("id") || !j.contains("composite") || !j.contains("mask"))
      fail_validation("read_manifest: ", path, ": sample entries need id, composite, mask");
    e.id = j["id"].get<std::string>();
    e.composite = j["composite"].get<std::string>();
    e.mask = j["mask"].get<std::string>();
    if (j.contains("background")) e.background = j["background"].get<std::string>();
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<CompositeSample> load_dataset(const std::string& manifest_path) {
  auto entries = read_manifest(manifest_path);
  if (entries.empty()) fail_validation("load_dataset: ", manifest_path, " lists no samples");
  const fs::path base = fs::path(manifest_path).parent_path();
  std::vector<CompositeSample> out;
  out.reserve(entries.size());
  for (const ManifestEntry& e : entries) {
    CompositeSample s;
    s.id = e.id;
    s.composite = load_image((base / e.composite).string());
    s.fg_mask = load_mask((base / e.mask).string());
    if (!e.background.empty()) s.background = load_image((base / e.background).string());
    s.validate(true);
    out.push_back(std::move(s));
  }
  return out;
}

std::string save_dataset(const std::string& dir, const std::vector<CompositeSample>& samples) {
  fs::create_directories(dir);
  std::vector<ManifestEntry> entries;
  for (const CompositeSample& s : samples) {
    ManifestEntry e;
    e.id = s.id;
    e.composite = s.id + ".ppm";
    e.mask = s.id + "_mask.pgm";
    save_image(s.composite, (fs::path(dir) / e.composite).string());
    save_mask(s.fg_mask, (fs::path(dir) / e.mask).string());
    if (s.background.defined()) {
      e.background = s.id + "_bg.ppm";
      save_image(s.background, (fs::path(dir) / e.background).string());
    }
    entries.push_back(std::move(e));
  }
  std::string manifest = (fs::path(dir) / "manifest.json").string();
  write_manifest(manifest, entries);
  return manifest;
}

std::array<int, 3> derive_labels(int exit_stage) {
  if (exit_stage < 1 || exit_stage > 4)
    fail_validation("derive_labels: exit stage must be 1..4, got ", exit_stage);
  std::array<int, 3> labels{};
  for (int k = 1; k <= 3; ++k) labels[static_cast<std::size_t>(k - 1)] = k >= exit_stage ? 1 : 0;
  return labels;
}

namespace {

std::vector<std::pair<std::string, int>> parse_vote_lines(const std::string& path) {
  std::ifstream f(path);
  if (!f) fail_validation("annotations: cannot open ", path);
  std::vector<std::pair<std::string, int>> out;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    ordered_json j;
    try {
      j = ordered_json::parse(line);
    } catch (const std::exception& e) {
      fail_validation("annotations: ", path, ":", lineno, ": ", e.what());
    }
    if (!j.is_object() || !j.contains("id") || !j.contains("exit_stage"))
      fail_validation("annotations: ", path, ":", lineno,
                      ": expected {\"id\": ..., \"exit_stage\": ...}");
    if (!j["exit_stage"].is_number_integer())
      fail_validation("annotations: ", path, ":", lineno, ": exit_stage must be an integer");
    int stage = j["exit_stage"].get<int>();
    if (stage < 1 || stage > 4)
      fail_validation("annotations: ", path, ":", lineno, ": exit_stage must be 1..4, got ",
                      stage);
    out.emplace_back(j["id"].get<std::string>(), stage);
  }
  return out;
}

}  // namespace

std::vector<AnnotationRecord> load_annotations(const std::string& path) {
  auto votes = parse_vote_lines(path);
  std::vector<AnnotationRecord> out;
  std::map<std::string, std::size_t> seen;
  for (const auto& [id, stage] : votes) {
    if (seen.count(id))
      fail_validation("annotations: ", path, ": duplicate id ", id,
                      " (use vote aggregation for repeated entries)");
    seen[id] = out.size();
    AnnotationRecord r;
    r.sample_id = id;
    r.exit_stage = stage;
    r.labels = derive_labels(stage);
    out.push_back(std::move(r));
  }
  return out;
}

void write_annotations(const std::string& path, const std::vector<AnnotationRecord>& recs) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) fail_validation("write_annotations: cannot open ", path);
  for (const AnnotationRecord& r : recs) {
    ordered_json j;
    j["id"] = r.sample_id;
    j["exit_stage"] = r.exit_stage;
    f << j.dump() << '\n';
  }
}

std::vector<std::pair<std::string, int>> load_votes(const std::string& path) {
  return parse_vote_lines(path);
}

std::vector<AnnotationRecord> aggregate_votes(
    const std::vector<std::pair<std::string, int>>& votes) {
  std::vector<std::string> order;
  std::map<std::string, std::array<std::int64_t, 4>> tally;
  for (const auto& [id, stage] : votes) {
    if (stage < 1 || stage > 4)
      fail_validation("aggregate_votes: exit_stage must be 1..4, got ", stage);
    if (!tally.count(id)) order.push_back(id);
    tally[id][static_cast<std::size_t>(stage - 1)] += 1;
  }
  std::vector<AnnotationRecord> out;
  for (const std::string& id : order) {
    const auto& counts = tally[id];
    // plurality; ties go to the earliest stage
    int best = 1;
    for (int s = 2; s <= 4; ++s)
      if (counts[static_cast<std::size_t>(s - 1)] > counts[static_cast<std::size_t>(best - 1)])
        best = s;
    AnnotationRecord r;
    r.sample_id = id;
    r.exit_stage = best;
    r.labels = derive_labels(best);
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace propih
