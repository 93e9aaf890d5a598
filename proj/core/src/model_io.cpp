#include <fstream>
#include <map>
#include <set>

#include "json.hpp"
#include "propih/ptw.hpp"
#include "propih/trainer.hpp"

namespace propih {

using ordered_json = nlohmann::ordered_json;

namespace {

ordered_json config_json(const HarmonizerConfig& cfg) {
  ordered_json j;
  j["base_width"] = cfg.base_width;
  j["image_size"] = cfg.image_size;
  j["full_style_loss_all_stages"] = cfg.full_style_loss_all_stages;
  j["last_stage_loss_only"] = cfg.last_stage_loss_only;
  j["bilinear_decoder"] = cfg.bilinear_decoder;
  j["single_fusion_block"] = cfg.single_fusion_block;
  j["exit_threshold"] = cfg.exit_threshold;
  j["adain_eps"] = cfg.adain_eps;
  j["gru_hidden"] = cfg.gru_hidden;
  j["zero_filled_stats"] = cfg.zero_filled_stats;
  j["stop_exit_pool_gradient"] = cfg.stop_exit_pool_gradient;
  j["normalize_loss_by_channels"] = cfg.normalize_loss_by_channels;
  return j;
}

HarmonizerConfig config_from(const ordered_json& j, const std::string& where) {
  if (!j.is_object()) fail_validation(where, ": config must be a JSON object");
  static const std::set<std::string> known = {
      "base_width",       "image_size",
      "full_style_loss_all_stages", "last_stage_loss_only",
      "bilinear_decoder", "single_fusion_block",
      "exit_threshold",   "adain_eps",
      "gru_hidden",       "zero_filled_stats",
      "stop_exit_pool_gradient",    "normalize_loss_by_channels"};
  for (const auto& [key, value] : j.items())
    if (!known.count(key)) fail_validation(where, ": unknown config key \"", key, "\"");
  HarmonizerConfig cfg;
  try {
    if (j.contains("base_width")) cfg.base_width = j["base_width"].get<int>();
    if (j.contains("image_size")) cfg.image_size = j["image_size"].get<int>();
    if (j.contains("full_style_loss_all_stages"))
      cfg.full_style_loss_all_stages = j["full_style_loss_all_stages"].get<bool>();
    if (j.contains("last_stage_loss_only"))
      cfg.last_stage_loss_only = j["last_stage_loss_only"].get<bool>();
    if (j.contains("bilinear_decoder")) cfg.bilinear_decoder = j["bilinear_decoder"].get<bool>();
    if (j.contains("single_fusion_block"))
      cfg.single_fusion_block = j["single_fusion_block"].get<bool>();
    if (j.contains("exit_threshold")) cfg.exit_threshold = j["exit_threshold"].get<double>();
    if (j.contains("adain_eps")) cfg.adain_eps = j["adain_eps"].get<double>();
    if (j.contains("gru_hidden")) cfg.gru_hidden = j["gru_hidden"].get<int>();
    if (j.contains("zero_filled_stats"))
      cfg.zero_filled_stats = j["zero_filled_stats"].get<bool>();
    if (j.contains("stop_exit_pool_gradient"))
      cfg.stop_exit_pool_gradient = j["stop_exit_pool_gradient"].get<bool>();
    if (j.contains("normalize_loss_by_channels"))
      cfg.normalize_loss_by_channels = j["normalize_loss_by_channels"].get<bool>();
  } catch (const nlohmann::json::exception& e) {
    fail_validation(where, ": ", e.what());
  }
  cfg.validate();
  return cfg;
}

std::string sidecar_path(const std::string& path) { return path + ".json"; }

}  // namespace

HarmonizerConfig config_from_json(const std::string& text) {
  ordered_json j;
  try {
    j = ordered_json::parse(text);
  } catch (const std::exception& e) {
    fail_validation("config: ", e.what());
  }
  return config_from(j, "config");
}

std::string config_to_json(const HarmonizerConfig& cfg) {
  return config_json(cfg).dump(2);
}

void save_encoder(const EncoderWeights<float>& enc, const std::string& path) {
  std::vector<PtwEntry> entries;
  entries.push_back({"enc.meta", {1}, {static_cast<float>(enc.base_width)}});
  for (int k = 0; k < 4; ++k) {
    const auto& stage = enc.stages[static_cast<std::size_t>(k)];
    for (std::size_t i = 0; i < stage.size(); ++i) {
      std::string base = "enc.s" + std::to_string(k + 1) + ".conv" + std::to_string(i + 1);
      entries.push_back({base + ".w", stage[i].w.shape(), stage[i].w.values()});
      entries.push_back({base + ".b", stage[i].b.shape(), stage[i].b.values()});
    }
  }
  if (!enc.norm_mean.empty()) {
    entries.push_back({"enc.norm.mean", {3}, enc.norm_mean});
    entries.push_back({"enc.norm.std", {3}, enc.norm_std});
  }
  write_ptw(path, entries);
}

namespace {

// Indexes PTW entries by name and tracks which were consumed.
class EntryMap {
 public:
  EntryMap(std::vector<PtwEntry> entries, std::string path)
      : entries_(std::move(entries)), path_(std::move(path)) {
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      if (!index_.emplace(entries_[i].name, i).second)
        fail_validation(path_, ": duplicate entry ", entries_[i].name);
    }
  }

  const PtwEntry* find(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) return nullptr;
    used_.insert(name);
    return &entries_[it->second];
  }

  const PtwEntry& need(const std::string& name) {
    const PtwEntry* e = find(name);
    if (!e) fail_validation(path_, ": missing entry ", name);
    return *e;
  }

  void fill(const std::string& name, Tensor<float>& dst) {
    const PtwEntry& e = need(name);
    if (e.shape != dst.shape())
      fail_validation(path_, ": entry ", name, " has shape ", shape_str(e.shape),
                      ", expected ", shape_str(dst.shape()));
    dst.mutable_values() = e.data;
  }

  // Every entry must be consumed except those with an allowed prefix.
  void check_consumed(const std::vector<std::string>& allowed_prefixes) {
    for (const PtwEntry& e : entries_) {
      if (used_.count(e.name)) continue;
      bool ok = false;
      for (const std::string& p : allowed_prefixes)
        if (e.name.rfind(p, 0) == 0) ok = true;
      if (!ok) fail_validation(path_, ": unknown entry ", e.name);
    }
  }

 private:
  std::vector<PtwEntry> entries_;
  std::string path_;
  std::map<std::string, std::size_t> index_;
  std::set<std::string> used_;
};

}  // namespace

EncoderWeights<float> load_encoder(const std::string& path) {
  EntryMap map(read_ptw(path), path);
  const PtwEntry& meta = map.need("enc.meta");
  if (meta.data.size() != 1) fail_validation(path, ": malformed enc.meta");
  EncoderWeights<float> enc = init_encoder<float>(static_cast<int>(meta.data[0]), 0);
  for (int k = 0; k < 4; ++k) {
    auto& stage = enc.stages[static_cast<std::size_t>(k)];
    for (std::size_t i = 0; i < stage.size(); ++i) {
      std::string base = "enc.s" + std::to_string(k + 1) + ".conv" + std::to_string(i + 1);
      map.fill(base + ".w", stage[i].w);
      map.fill(base + ".b", stage[i].b);
    }
  }
  if (const PtwEntry* m = map.find("enc.norm.mean")) {
    const PtwEntry& s = map.need("enc.norm.std");
    if (m->data.size() != 3 || s.data.size() != 3)
      fail_validation(path, ": normalization entries must have size 3");
    enc.norm_mean = m->data;
    enc.norm_std = s.data;
  }
  map.check_consumed({});
  return enc;
}

ModelWeights<float> allocate_model(const HarmonizerConfig& cfg) {
  ModelWeights<float> m = init_model<float>(cfg, 0);
  for (auto& [name, t] : m.named_parameters())
    std::fill(t->mutable_values().begin(), t->mutable_values().end(), 0.f);
  return m;
}

void save_model(const ModelWeights<float>& model, const std::string& path) {
  std::vector<PtwEntry> entries;
  auto& mut = const_cast<ModelWeights<float>&>(model);
  for (auto& [name, t] : mut.named_parameters())
    entries.push_back({name, t->shape(), t->values()});
  write_ptw(path, entries);
  std::ofstream f(sidecar_path(path), std::ios::trunc);
  if (!f) fail_validation("save_model: cannot open ", sidecar_path(path));
  f << config_to_json(model.config) << '\n';
}

namespace {

ordered_json read_sidecar(const std::string& path) {
  std::ifstream f(sidecar_path(path));
  if (!f)
    fail_validation("load: missing config sidecar ", sidecar_path(path));
  try {
    return ordered_json::parse(f);
  } catch (const std::exception& e) {
    fail_validation("load: ", sidecar_path(path), ": ", e.what());
  }
}

ModelWeights<float> load_model_from(EntryMap& map, const ordered_json& cfg_json,
                                    const std::string& where) {
  HarmonizerConfig cfg = config_from(cfg_json, where);
  ModelWeights<float> m = allocate_model(cfg);
  for (auto& [name, t] : m.named_parameters()) map.fill(name, *t);
  return m;
}

}  // namespace

ModelWeights<float> load_model(const std::string& path) {
  ordered_json side = read_sidecar(path);
  const ordered_json& cfg_json = side.contains("config") ? side["config"] : side;
  EntryMap map(read_ptw(path), path);
  ModelWeights<float> m = load_model_from(map, cfg_json, path);
  map.check_consumed({"adam.", "train."});
  return m;
}

// Checkpoints: model parameters plus adam.m.<name> / adam.v.<name> for every
// optimizer-tracked parameter; the sidecar records the config, global step,
// and optimizer hyperparameters with the tracked-parameter order.
void save_checkpoint(const std::string& path, const TrainState& state) {
  std::vector<PtwEntry> entries;
  auto& mut = const_cast<ModelWeights<float>&>(state.model);
  std::map<std::string, Tensor<float>*> by_name;
  for (auto& [name, t] : mut.named_parameters()) {
    entries.push_back({name, t->shape(), t->values()});
    by_name[name] = t;
  }
  if (state.opt_param_names.size() != state.opt.slots.size())
    fail_validation("save_checkpoint: optimizer tracks ", state.opt.slots.size(),
                    " slots but ", state.opt_param_names.size(), " names recorded");
  for (std::size_t i = 0; i < state.opt_param_names.size(); ++i) {
    const std::string& name = state.opt_param_names[i];
    auto it = by_name.find(name);
    if (it == by_name.end())
      fail_validation("save_checkpoint: optimizer name ", name, " is not a parameter");
    entries.push_back({"adam.m." + name, it->second->shape(), state.opt.slots[i].m});
    entries.push_back({"adam.v." + name, it->second->shape(), state.opt.slots[i].v});
  }
  write_ptw(path, entries);

  ordered_json side;
  side["config"] = config_json(state.model.config);
  side["step"] = state.step;
  ordered_json opt;
  opt["lr"] = state.opt.lr;
  opt["beta1"] = state.opt.beta1;
  opt["beta2"] = state.opt.beta2;
  opt["eps"] = state.opt.eps;
  opt["step"] = state.opt.step;
  opt["params"] = state.opt_param_names;
  side["opt"] = opt;
  std::ofstream f(sidecar_path(path), std::ios::trunc);
  if (!f) fail_validation("save_checkpoint: cannot open ", sidecar_path(path));
  f << side.dump(2) << '\n';
}

TrainState load_checkpoint(const std::string& path) {
  ordered_json side = read_sidecar(path);
  if (!side.contains("config") || !side.contains("opt") || !side.contains("step"))
    fail_validation("load_checkpoint: ", sidecar_path(path),
                    " must carry config, step, and opt sections");
  EntryMap map(read_ptw(path), path);
  TrainState state;
  state.model = load_model_from(map, side["config"], path);
  try {
    state.step = side["step"].get<std::int64_t>();
    const ordered_json& opt = side["opt"];
    state.opt.lr = opt["lr"].get<double>();
    state.opt.beta1 = opt["beta1"].get<double>();
    state.opt.beta2 = opt["beta2"].get<double>();
    state.opt.eps = opt["eps"].get<double>();
    state.opt.step = opt["step"].get<std::int64_t>();
    state.opt_param_names = opt["params"].get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    fail_validation("load_checkpoint: ", sidecar_path(path), ": ", e.what());
  }
  std::map<std::string, Tensor<float>*> by_name;
  for (auto& [name, t] : state.model.named_parameters()) by_name[name] = t;
  for (const std::string& name : state.opt_param_names) {
    auto it = by_name.find(name);
    if (it == by_name.end())
      fail_validation("load_checkpoint: optimizer name ", name, " is not a parameter");
    const PtwEntry& m = map.need("adam.m." + name);
    const PtwEntry& v = map.need("adam.v." + name);
    if (m.shape != it->second->shape() || v.shape != it->second->shape())
      fail_validation("load_checkpoint: moment shape mismatch for ", name);
    typename AdamState<float>::Slot slot;
    slot.m = m.data;
    slot.v = v.data;
    state.opt.slots.push_back(std::move(slot));
  }
  map.check_consumed({"train."});
  return state;
}

}  // namespace propih
