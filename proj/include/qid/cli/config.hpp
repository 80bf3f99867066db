#pragma once

// Flat "key = value" run configuration shared by every subcommand.

#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "qid/objective/objective.hpp"
#include "qid/synthdoc/synthdoc.hpp"

namespace qid {

inline const std::vector<std::pair<std::string, std::string>>& config_defaults() {
  static const std::vector<std::pair<std::string, std::string>> d = {
      // paths
      {"data", "data.qidd"},
      {"checkpoint", "model.qidw"},
      {"checkpoint_out", "model.qidw"},
      {"frozen_out", "model.frozen.qidw"},
      {"metrics_out", "metrics.jsonl"},
      {"eval_out", "eval.json"},
      {"attn_out", "attn.jsonl"},
      {"resume", ""},
      // data
      {"seed", "0"},
      {"n", "10000"},
      {"offset", "0"},
      {"grid", "4"},
      {"classes", "8"},
      {"noise", "0.1"},
      {"fill", "balanced"},
      {"val_fraction", "0.2"},
      // encoder
      {"patch_side", "8"},
      {"d_v", "32"},
      {"layers", "2"},
      {"heads", "2"},
      {"d_t", "32"},
      {"vocab", "8"},
      {"ffn_mult", "4"},
      {"positional_embedding", "false"},
      {"init_scale", "1.0"},
      {"qk_scale", "1.0"},
      {"tied_qk", "false"},
      // query modules
      {"layers_q", "2"},
      {"d_p", "64"},
      {"renormalize_cross", "false"},
      {"alpha", "0.01"},
      {"sigma", "0.16"},
      // optimisation
      {"base_lr", "2e-5"},
      {"warmup_steps", "100"},
      {"beta1", "0.9"},
      {"beta2", "0.999"},
      {"adam_eps", "1e-8"},
      {"weight_decay", "0"},
      {"batch_size", "8"},
      {"max_epochs", "5"},
      {"early_stop_patience", "1"},
      // ablations
      {"no_fuse", "false"},
      {"no_defuse", "false"},
      {"no_query_agnostic", "false"},
      {"zero_sinusoid", "false"},
      {"full_token_q", "false"},
      {"no_injection", "false"},
  };
  return d;
}

inline const std::vector<std::string>& ablation_names() {
  static const std::vector<std::string> n = {"no_fuse",       "no_defuse",    "no_query_agnostic",
                                             "zero_sinusoid", "full_token_q", "no_injection"};
  return n;
}

class RunConfig {
 public:
  RunConfig() {
    for (const auto& [k, v] : config_defaults()) values_[k] = v;
  }

  void set(const std::string& key, const std::string& value) {
    if (!values_.count(key)) throw ConfigError("unknown config key '" + key + "'");
    values_[key] = value;
  }

  /// "key=value"
  void set_assignment(const std::string& text) {
    const auto eq = text.find('=');
    if (eq == std::string::npos) throw ConfigError("expected key=value, got '" + text + "'");
    set(trim(text.substr(0, eq)), trim(text.substr(eq + 1)));
  }

  void load_text(const std::string& text, const std::string& origin = "config") {
    std::istringstream in(text);
    std::string line;
    for (std::size_t no = 1; std::getline(in, line); ++no) {
      if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
      line = trim(line);
      if (line.empty()) continue;
      if (line.find('=') == std::string::npos) {
        throw ConfigError(origin + ":" + std::to_string(no) + ": expected key = value");
      }
      set_assignment(line);
    }
  }

  void load_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    load_text(ss.str(), path.string());
  }

  void enable_ablation(const std::string& name) {
    bool known = false;
    for (const auto& a : ablation_names()) known = known || a == name;
    if (!known) throw ConfigError("unknown ablation '" + name + "'");
    values_[name] = "true";
  }

  const std::string& str(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    return it->second;
  }

  std::uint64_t u64(const std::string& key) const {
    const auto& s = str(key);
    std::uint64_t v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) throw ConfigError(key + ": not a non-negative integer: '" + s + "'");
    return v;
  }
  std::size_t size(const std::string& key) const { return static_cast<std::size_t>(u64(key)); }

  double num(const std::string& key) const {
    const auto& s = str(key);
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (s.empty() || end != s.c_str() + s.size()) throw ConfigError(key + ": not a number: '" + s + "'");
    return v;
  }

  bool flag(const std::string& key) const {
    const auto& s = str(key);
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    throw ConfigError(key + ": expected true/false, got '" + s + "'");
  }

  std::set<std::size_t> index_set(const std::string& key) const {
    std::set<std::size_t> out;
    std::stringstream ss(str(key));
    std::string item;
    while (std::getline(ss, item, ',')) {
      item = trim(item);
      std::size_t v = 0;
      auto [p, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
      if (item.empty() || ec != std::errc() || p != item.data() + item.size()) {
        throw ConfigError(key + ": expected comma-separated integers, got '" + str(key) + "'");
      }
      out.insert(v);
    }
    return out;
  }

  Ablations ablations() const {
    Ablations a;
    a.no_fuse = flag("no_fuse");
    a.no_defuse = flag("no_defuse");
    a.no_query_agnostic = flag("no_query_agnostic");
    a.zero_sinusoid = flag("zero_sinusoid");
    a.full_token_q = flag("full_token_q");
    a.no_injection = flag("no_injection");
    return a;
  }

  SynthConfig synth() const {
    SynthConfig s;
    s.grid = size("grid");
    s.classes = size("classes");
    s.noise = num("noise");
    const auto& f = str("fill");
    if (f == "balanced") s.fill = CellFill::balanced;
    else if (f == "iid") s.fill = CellFill::iid;
    else throw ConfigError("fill: expected balanced or iid, got '" + f + "'");
    return s;
  }

  ModelConfig model() const {
    ModelConfig m;
    auto& e = m.encoder;
    e.image_side = kImageSide;
    e.patch_side = size("patch_side");
    e.d_v = size("d_v");
    e.layers = size("layers");
    e.heads = size("heads");
    e.d_t = size("d_t");
    e.vocab = size("vocab");
    e.ffn_mult = size("ffn_mult");
    e.positional_embedding = flag("positional_embedding");
    e.init_scale = num("init_scale");
    e.qk_scale = num("qk_scale");
    e.tied_qk = flag("tied_qk");
    m.layers_q = index_set("layers_q");
    m.d_p = size("d_p");
    m.classes = size("classes");
    m.renormalize_cross = flag("renormalize_cross");
    m.ablations = ablations();
    if (e.vocab < 2 * size("grid")) {
      throw ConfigError("vocab " + str("vocab") + " cannot encode the query ids of a " + str("grid") + "-grid");
    }
    m.validate();
    return m;
  }

  TrainConfig train() const {
    TrainConfig t;
    t.alpha = num("alpha");
    t.sigma = num("sigma");
    t.adam.base_lr = num("base_lr");
    t.adam.warmup_steps = u64("warmup_steps");
    t.adam.beta1 = num("beta1");
    t.adam.beta2 = num("beta2");
    t.adam.eps = num("adam_eps");
    t.adam.weight_decay = num("weight_decay");
    t.batch_size = size("batch_size");
    t.max_epochs = size("max_epochs");
    t.early_stop_patience = size("early_stop_patience");
    t.seed = u64("seed");
    t.validate(ablations());
    return t;
  }

  /// Every key in a fixed order, one per line.
  std::string resolved() const {
    std::string out;
    for (const auto& [k, v] : config_defaults()) out += k + " = " + values_.at(k) + "\n";
    return out;
  }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }

  std::map<std::string, std::string> values_;
};

}  // namespace qid
