#pragma once

// Subcommands behind the `qid` binary. Exit codes: 0 ok, 2 config/contract,
// 3 I/O or malformed file, 4 numerical abort.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "qid/cli/config.hpp"

namespace qid {

enum ExitCode : int { kExitOk = 0, kExitConfig = 2, kExitIo = 3, kExitNumerical = 4 };

namespace cli_detail {

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

inline void write_resolved(const RunConfig& cfg, const std::filesystem::path& output) {
  write_text(output.string() + ".cfg", cfg.resolved());
}

inline std::vector<SynthSample> load_data(const RunConfig& cfg) {
  auto data = read_dataset(cfg.str("data"));
  const std::size_t g = cfg.size("grid");
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data[i].answer >= cfg.size("classes")) {
      throw ConfigError("sample " + std::to_string(i) + " has answer " + std::to_string(data[i].answer) +
                        " but classes = " + cfg.str("classes"));
    }
    query_patch_index(data[i].query_ids, g);  // ids must describe a cell of this grid
  }
  return data;
}

inline QidModel<float> load_model(const RunConfig& cfg) {
  auto m = QidModel<float>::init(cfg.model(), cfg.u64("seed"));
  load_checkpoint(m, Checkpoint::load(cfg.str("checkpoint")));
  return m;
}

}  // namespace cli_detail

inline int cmd_gen_data(const RunConfig& cfg, std::ostream& out) {
  const auto data = generate_dataset(cfg.size("n"), cfg.synth(), cfg.u64("seed"), cfg.u64("offset"));
  write_dataset(data, cfg.str("data"));
  cli_detail::write_resolved(cfg, cfg.str("data"));
  out << nlohmann::json{{"path", cfg.str("data")}, {"n", data.size()}}.dump() << "\n";
  return kExitOk;
}

inline int cmd_train(const RunConfig& cfg, std::ostream& out) {
  const auto mcfg = cfg.model();
  const auto tcfg = cfg.train();
  auto [train_raw, val_raw] = split_train_val(cli_detail::load_data(cfg), cfg.num("val_fraction"));
  if (train_raw.empty()) throw ConfigError("no training samples in " + cfg.str("data"));
  const auto train_set = prepare<float>(train_raw, mcfg.encoder);
  const auto val_set = prepare<float>(val_raw, mcfg.encoder);

  auto model = QidModel<float>::init(mcfg, tcfg.seed);
  TrainState<float> state(tcfg.adam);
  const bool resuming = !cfg.str("resume").empty();
  if (resuming) state = state_from_checkpoint(model, Checkpoint::load(cfg.str("resume")), tcfg.adam);

  const std::string ckpt = cfg.str("checkpoint_out");
  cli_detail::write_resolved(cfg, ckpt);
  std::ofstream metrics(cfg.str("metrics_out"), resuming ? std::ios::app : std::ios::trunc);
  if (!metrics) throw IoError("cannot write " + cfg.str("metrics_out"));
  MetricsSink sink = [&](const MetricsRecord& r) { metrics << r.to_json().dump() << "\n" << std::flush; };
  std::function<void(TrainState<float>&)> on_epoch = [&](TrainState<float>& st) { state_to_checkpoint(model, st).save(ckpt + ".state"); };
  const auto res = train(model, train_set, val_set, tcfg, sink, &state, on_epoch);
  to_checkpoint(model).save(ckpt);
  out << nlohmann::json{{"checkpoint", ckpt},
                        {"epochs_run", res.epochs_run},
                        {"steps", state.optimizer.step},
                        {"best_val_loss", res.best_val_loss},
                        {"early_stopped", res.early_stopped}}
             .dump()
      << "\n";
  return kExitOk;
}

inline int cmd_eval(const RunConfig& cfg, std::ostream& out) {
  const auto model = cli_detail::load_model(cfg);
  const auto data = prepare<float>(cli_detail::load_data(cfg), model.config.encoder);
  const auto r = evaluate(model, data);
  const auto text = nlohmann::json{{"accuracy", r.accuracy}, {"mean_entropy", r.mean_entropy}, {"n", r.n}}.dump();
  cli_detail::write_text(cfg.str("eval_out"), text + "\n");
  cli_detail::write_resolved(cfg, cfg.str("eval_out"));
  out << text << "\n";
  return kExitOk;
}

inline int cmd_precompute_bias(const RunConfig& cfg, std::ostream& out) {
  const std::filesystem::path in = cfg.str("checkpoint"), dst = cfg.str("frozen_out");
  if (std::filesystem::weakly_canonical(in) == std::filesystem::weakly_canonical(dst)) {
    throw ConfigError("frozen_out must differ from checkpoint (inputs are never modified)");
  }
  auto model = cli_detail::load_model(cfg);
  if (model.qagn.empty()) throw ConfigError("model has no query-agnostic module (no_query_agnostic is set)");
  if (model.bias_frozen()) throw ContractError(in.string() + " already holds a precomputed bias");
  for (auto& [l, cache] : model.qagn) precompute_bias(cache);
  to_checkpoint(model).save(dst);
  cli_detail::write_resolved(cfg, dst);
  nlohmann::json names = nlohmann::json::array();
  for (const auto& [l, cache] : model.qagn) names.push_back(bias_entry_name(l));
  out << nlohmann::json{{"checkpoint", dst.string()}, {"added", names}}.dump() << "\n";
  return kExitOk;
}

/// index < 0 reports the hit rate over the whole dataset.
inline int cmd_dump_attn(const RunConfig& cfg, long long index, std::ostream& out) {
  const auto model = cli_detail::load_model(cfg);
  if (model.config.ablations.no_injection) throw ConfigError("no_injection model has no cross-attention to dump");
  const auto raw = cli_detail::load_data(cfg);
  const auto g = cfg.size("grid");
  std::ofstream lines(cfg.str("attn_out"), std::ios::trunc);
  if (!lines) throw IoError("cannot write " + cfg.str("attn_out"));
  cli_detail::write_resolved(cfg, cfg.str("attn_out"));

  auto one = [&](std::size_t i, bool verbose) {
    const auto prepared = prepare<float>({raw[i]}, model.config.encoder);
    const auto reports = inspect_attention(model, prepared[0]);
    const auto target = query_patch_index(raw[i].query_ids, g);
    if (verbose) {
      for (const auto& r : reports) {
        lines << nlohmann::json{{"sample", i},          {"layer", r.layer},   {"head", r.head},
                                {"entropy", r.entropy}, {"a_cross", r.a_cross}, {"argmax", r.argmax},
                                {"target", target},     {"hit", r.argmax == target}}
                     .dump()
              << "\n";
      }
    }
    const auto attended = *attended_patch(reports);
    const nlohmann::json summary{{"sample", i}, {"target", target}, {"attended", attended}, {"hit", attended == target}};
    lines << summary.dump() << "\n";
    return summary;
  };

  if (index >= 0) {
    if (static_cast<std::size_t>(index) >= raw.size()) {
      throw ContractError("sample index " + std::to_string(index) + " outside [0, " + std::to_string(raw.size()) + ")");
    }
    out << one(static_cast<std::size_t>(index), true).dump() << "\n";
    return kExitOk;
  }
  std::size_t hits = 0;
  for (std::size_t i = 0; i < raw.size(); ++i) hits += one(i, false)["hit"].get<bool>();
  const double rate = raw.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(raw.size());
  out << nlohmann::json{{"hits", hits}, {"n", raw.size()}, {"hit_rate", rate}}.dump() << "\n";
  return kExitOk;
}

/// args excludes the program name.
inline int run_cli(std::vector<std::string> args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"query-injection toolkit", "qid"};
  app.require_subcommand(1);
  std::string config_path;
  std::vector<std::string> sets, ablations;
  long long index = 0;
  bool all = false;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "flat key = value file");
    sub->add_option("--set", sets, "key=value override (repeatable)");
    sub->add_option("--ablation", ablations, "enable an ablation flag (repeatable)");
  };
  auto* gen = app.add_subcommand("gen-data", "write a synthetic dataset");
  auto* tr = app.add_subcommand("train", "train psi, phi and the head");
  auto* ev = app.add_subcommand("eval", "accuracy and mean cross-attention entropy");
  auto* pre = app.add_subcommand("precompute-bias", "materialise phi(P) into a new checkpoint");
  auto* dump = app.add_subcommand("dump-attn", "cross-attention records for one sample");
  for (auto* s : {gen, tr, ev, pre, dump}) common(s);
  dump->add_option("--index", index, "sample index");
  dump->add_flag("--all", all, "hit rate over every sample instead");

  std::reverse(args.begin(), args.end());
  try {
    app.parse(args);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "qid: " << e.what() << "\n";
    return kExitConfig;
  }

  try {
    RunConfig cfg;
    if (!config_path.empty()) cfg.load_file(config_path);
    for (const auto& s : sets) cfg.set_assignment(s);
    for (const auto& a : ablations) cfg.enable_ablation(a);
    if (const char* env = std::getenv("QID_SEED"); env && *env) cfg.set("seed", env);
    if (*gen) return cmd_gen_data(cfg, out);
    if (*tr) return cmd_train(cfg, out);
    if (*ev) return cmd_eval(cfg, out);
    if (*pre) return cmd_precompute_bias(cfg, out);
    if (all) index = -1;
    else if (index < 0) throw ContractError("sample index must be >= 0");
    return cmd_dump_attn(cfg, index, out);
  } catch (const NumericalError& e) {
    err << "qid: numerical abort: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const IoError& e) {
    err << "qid: " << e.what() << "\n";
    return kExitIo;
  } catch (const FormatError& e) {
    err << "qid: malformed file: " << e.what() << "\n";
    return kExitIo;
  } catch (const Error& e) {
    err << "qid: " << e.what() << "\n";
    return kExitConfig;
  }
}

}  // namespace qid
