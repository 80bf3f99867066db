// Runs the seven acceptance checks and prints one PASS/FAIL line per check.
//   qid_acceptance [--config FILE] [--workdir DIR] [--only N]...

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "qid/cli/commands.hpp"
#include "qid/numerics/digest.hpp"
#include "qid/numerics/grad_check.hpp"

#ifndef QID_SOURCE_DIR
#define QID_SOURCE_DIR "."
#endif

using namespace qid;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Env {
  fs::path work;
  std::string config;
  std::ostringstream log;  // stdout of in-process commands
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v, int prec = 4) {
  std::ostringstream s;
  s << std::setprecision(prec) << v;
  return s.str();
}

// runs a CLI command in-process with the acceptance config; throws on non-zero exit
nlohmann::json qid(Env& env, const std::string& cmd, std::vector<std::string> sets, std::vector<std::string> extra = {}) {
  std::vector<std::string> args = {cmd, "--config", env.config};
  for (auto& s : sets) {
    args.push_back("--set");
    args.push_back(s);
  }
  args.insert(args.end(), extra.begin(), extra.end());
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  env.log << "$ qid";
  for (const auto& a : args) env.log << " " << a;
  env.log << "\n" << out.str() << err.str();
  if (code != 0) throw std::runtime_error("qid " + cmd + " exited " + std::to_string(code) + ": " + err.str());
  std::string last, line;
  std::istringstream in(out.str());
  while (std::getline(in, line))
    if (!line.empty()) last = line;
  return last.empty() ? nlohmann::json{} : nlohmann::json::parse(last);
}

std::string p(const Env& env, const std::string& name) { return (env.work / name).string(); }

// ---- 1 ----
Outcome gradient_oracle(Env&) {
  const auto t0 = std::chrono::steady_clock::now();
  ModelConfig cfg;  // T_v 16, d_v 32, L 2, H 2, d_p 64, K 8
  auto m = QidModel<double>::init(cfg, 7);
  auto sample = prepare<double>(generate_dataset(1, SynthConfig{}, 8), cfg.encoder)[0];
  auto loss_fn = [&] {
    auto rng = Rng::derive(7, "acceptance.fuse");
    auto f = forward(m, sample.patches, sample.query_ids, FuseConfig{}, rng);
    return total_loss(cross_entropy(f.logits, sample.answer), *f.enp, 1e-2);
  };
  const auto r = grad_check_report(loss_fn, partition_params(m).trainable_tensors(), 1e-5);
  const double secs = seconds_since(t0);
  return {r.max_relative_error < 1e-4 && secs < 120,
          "max_rel_err=" + fmt(r.max_relative_error, 3) + " over " + std::to_string(r.checked) + " entries (worst analytic " +
              fmt(r.worst_analytic, 6) + " numeric " + fmt(r.worst_numeric, 6) + "), " + fmt(secs, 3) + "s"};
}

// ---- 2, 3, 5 share the main runs ----
struct MainRuns {
  bool done = false;
  double qid_acc = 0, qid_entropy = 0, base_acc = 0, secs = 0;
  std::string qid_eval_text;
};

MainRuns main_runs;

void ensure_data(Env& env) {
  if (fs::exists(p(env, "train2000.qidd"))) return;
  qid(env, "gen-data", {"n=2000", "offset=0", "data=" + p(env, "train2000.qidd")});
  qid(env, "gen-data", {"n=500", "offset=2000", "data=" + p(env, "eval500.qidd")});
}

std::vector<std::string> run_paths(const Env& env, const std::string& tag) {
  return {"checkpoint_out=" + p(env, tag + ".qidw"), "checkpoint=" + p(env, tag + ".qidw"),
          "metrics_out=" + p(env, tag + ".metrics.jsonl"), "eval_out=" + p(env, tag + ".eval.json"),
          "attn_out=" + p(env, tag + ".attn.jsonl"), "frozen_out=" + p(env, tag + ".frozen.qidw")};
}

std::vector<std::string> plus(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

void ensure_main(Env& env) {
  if (main_runs.done) return;
  const auto t0 = std::chrono::steady_clock::now();
  ensure_data(env);
  const auto train_data = "data=" + p(env, "train2000.qidd"), eval_data = "data=" + p(env, "eval500.qidd");
  qid(env, "train", plus(run_paths(env, "qid"), {train_data}));
  auto e = qid(env, "eval", plus(run_paths(env, "qid"), {eval_data}));
  main_runs.qid_acc = e["accuracy"];
  main_runs.qid_entropy = e["mean_entropy"];
  main_runs.qid_eval_text = e.dump();
  qid(env, "train", plus(run_paths(env, "noinj"), {train_data}), {"--ablation", "no_injection"});
  auto b = qid(env, "eval", plus(run_paths(env, "noinj"), {eval_data}), {"--ablation", "no_injection"});
  main_runs.base_acc = b["accuracy"];
  main_runs.secs = seconds_since(t0);
  main_runs.done = true;
}

Outcome query_dependence(Env& env) {
  ensure_main(env);
  const auto& r = main_runs;
  const double gap = r.qid_acc - r.base_acc;
  return {r.qid_acc >= 0.85 && r.base_acc <= 0.20 && gap >= 0.40 && r.secs < 900,
          "qid=" + fmt(r.qid_acc) + " no_injection=" + fmt(r.base_acc) + " gap=" + fmt(gap) + ", " + fmt(r.secs, 4) +
              "s for both runs"};
}

Outcome defuse_effect(Env& env) {
  ensure_main(env);
  const auto train_data = "data=" + p(env, "train2000.qidd"), eval_data = "data=" + p(env, "eval500.qidd");
  qid(env, "train", plus(run_paths(env, "alpha0"), {train_data, "alpha=0"}));
  auto e0 = qid(env, "eval", plus(run_paths(env, "alpha0"), {eval_data, "alpha=0"}));
  auto hits = qid(env, "dump-attn", plus(run_paths(env, "qid"), {eval_data}), {"--all"});
  const double h1 = main_runs.qid_entropy, h0 = e0["mean_entropy"], rate = hits["hit_rate"];
  return {h1 < h0 && rate >= 0.70, "entropy alpha=1e-2: " + fmt(h1) + " vs alpha=0: " + fmt(h0) +
                                       "; argmax hit rate " + fmt(rate) + " (" + hits["hits"].dump() + "/" +
                                       hits["n"].dump() + ")"};
}

// ---- 4 ----
Outcome fuse_robustness(Env& env) {
  if (!fs::exists(p(env, "train500.qidd"))) {
    qid(env, "gen-data", {"n=500", "offset=0", "data=" + p(env, "train500.qidd")});
    qid(env, "gen-data", {"n=500", "offset=2000", "data=" + p(env, "eval500.qidd")});
  }
  RunConfig base;
  base.load_file(env.config);
  const std::uint64_t s0 = base.u64("seed");
  std::ostringstream per_seed;
  double with = 0, without = 0;
  for (std::uint64_t s = s0; s < s0 + 3; ++s) {
    double acc[2];
    for (int nf = 0; nf < 2; ++nf) {
      const std::string tag = "fuse" + std::to_string(nf) + "_s" + std::to_string(s);
      std::vector<std::string> sets = plus(run_paths(env, tag), {"data=" + p(env, "train500.qidd"), "seed=" + std::to_string(s)});
      std::vector<std::string> extra;
      if (nf) extra = {"--ablation", "no_fuse"};
      qid(env, "train", sets, extra);
      sets.push_back("data=" + p(env, "eval500.qidd"));
      acc[nf] = qid(env, "eval", sets, extra)["accuracy"];
    }
    with += acc[0] / 3;
    without += acc[1] / 3;
    per_seed << " seed" << s << "=" << fmt(acc[0], 3) << "/" << fmt(acc[1], 3);
  }
  // the ordering is only the expected direction; completing and reporting is the check
  return {true, "fuse/no_fuse" + per_seed.str() + "; mean " + fmt(with) + " vs " + fmt(without) +
                    (with >= without ? " (expected direction held)" : " (expected direction NOT held)")};
}

// ---- 5 ----
Outcome precompute_equivalence(Env& env) {
  ensure_main(env);
  const auto eval_data = "data=" + p(env, "eval500.qidd");
  auto before = qid(env, "eval", plus(run_paths(env, "qid"), {eval_data}));
  qid(env, "precompute-bias", run_paths(env, "qid"));
  auto after = qid(env, "eval", plus(run_paths(env, "qid"), {eval_data, "checkpoint=" + p(env, "qid.frozen.qidw")}));
  const bool same = before.dump() == after.dump() && before.dump() == main_runs.qid_eval_text;

  // op count of the query-agnostic module for one forward pass
  RunConfig rc;
  rc.load_file(env.config);
  auto model = QidModel<float>::init(rc.model(), 1);
  rc.set("checkpoint", p(env, "qid.frozen.qidw"));
  load_checkpoint(model, Checkpoint::load(rc.str("checkpoint")));
  const auto& enc = model.config.encoder;
  TokenGrid<float> grid{Tensor<float>({enc.tokens(), enc.d_v}), enc.tokens(), 0};
  std::uint64_t frozen_flops = 0, live_flops = 0;
  for (const auto& [l, cache] : model.qagn) {
    frozen_flops += FlopCounter::measure([&] { apply_bias(grid, cache); });
    auto live = cache;
    live.cached_bias.reset();
    live_flops += FlopCounter::measure([&] { apply_bias(grid, live); });
  }
  const std::uint64_t add_only = model.qagn.size() * enc.tokens() * enc.d_v;
  return {same && frozen_flops == add_only,
          std::string(same ? "eval identical" : "eval DIFFERS") + " before/after precompute; frozen-path flops " +
              std::to_string(frozen_flops) + " (addition alone " + std::to_string(add_only) + "), live path " +
              std::to_string(live_flops)};
}

// ---- 6 ----
Outcome invariants(Env& env) {
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<std::string> failed;
  auto check = [&](bool ok, const std::string& what) {
    if (!ok) failed.push_back(what);
  };
  Rng rng(2024);

  {  // softmax rows
    bool ok = true;
    for (int t = 0; t < 200; ++t) {
      const double scale = (t % 4 == 0) ? 1e3 : 10.0;
      Tensor<double> x({5, 17});
      for (auto& v : x.mutable_data()) v = rng.uniform(-scale, scale);
      auto y = softmax_rows(x);
      for (std::size_t i = 0; i < 5; ++i) {
        double s = 0;
        for (std::size_t j = 0; j < 17; ++j) {
          ok = ok && y(i, j) >= 0;
          s += y(i, j);
        }
        ok = ok && std::abs(s - 1) <= 1e-6;
      }
    }
    check(ok, "softmax rows");
  }
  {  // entropy range on random cross-attention rows
    bool ok = true;
    for (int t = 0; t < 500; ++t) {
      Tensor<double> x({17, 17});
      for (auto& v : x.mutable_data()) v = rng.normal(0.0, t % 2 ? 5.0 : 0.5);
      auto rec = extract_cross_attention(softmax_rows(x), 1, 0, 16);
      ok = ok && rec.entropy_value() >= 0 && rec.entropy_value() <= std::log(16.0);
    }
    check(ok, "entropy range");
  }
  {  // fuse
    Tensor<double> q({32});
    for (auto& v : q.mutable_data()) v = rng.normal();
    double qn = 0;
    for (double v : q.data()) qn += v * v;
    qn = std::sqrt(qn);
    double worst_norm = 0, min_cos = 1;
    for (int t = 0; t < 100000; ++t) {
      auto f = fuse_augment(q, FuseConfig{0.16, true}, rng);
      double n = 0, d = 0;
      for (std::size_t i = 0; i < 32; ++i) {
        n += f[i] * f[i];
        d += f[i] * q[i];
      }
      worst_norm = std::max(worst_norm, std::abs(std::sqrt(n) - 1));
      min_cos = std::min(min_cos, d / qn);
    }
    check(worst_norm <= 1e-6, "fuse unit norm");
    check(min_cos >= 0.9823 && fuse_cosine_floor(0.16) >= 0.9823, "fuse cosine floor (min " + fmt(min_cos, 6) + ")");
  }
  {  // sinusoid
    auto P = sinusoidal_table<double>(16, 64);
    bool ok = true;
    for (std::size_t i = 0; i < 16; ++i)
      for (std::size_t k = 0; k < 32; ++k) ok = ok && std::abs(P(i, 2 * k) * P(i, 2 * k) + P(i, 2 * k + 1) * P(i, 2 * k + 1) - 1) < 1e-12;
    check(ok, "sinusoid pythagorean identity");
  }
  {  // inject / strip
    Tensor<double> z({16, 32}), pq({1, 32});
    for (auto& v : z.mutable_data()) v = rng.normal();
    for (auto& v : pq.mutable_data()) v = rng.normal();
    TokenGrid<double> g{z, 16, 0};
    auto back = strip_query(inject(g, pq));
    check(std::equal(z.data().begin(), z.data().end(), back.tokens.data().begin()) && back.query_rows() == 0,
          "inject/strip round trip");
  }
  {  // frozen digests, loss identity, bit-exact rerun
    if (!fs::exists(p(env, "inv.qidd"))) qid(env, "gen-data", {"n=120", "offset=0", "data=" + p(env, "inv.qidd")});
    auto cfg_for = [&](const std::string& tag) {
      return plus(run_paths(env, tag), {"data=" + p(env, "inv.qidd"), "max_epochs=2"});
    };
    qid(env, "train", cfg_for("inv_a"));
    qid(env, "train", cfg_for("inv_b"));
    RunConfig rc;
    rc.load_file(env.config);
    auto init = QidModel<float>::init(rc.model(), rc.u64("seed"));
    auto trained = QidModel<float>::init(rc.model(), 999);
    load_checkpoint(trained, Checkpoint::load(p(env, "inv_a.qidw")));
    auto a = partition_params(init).frozen, b = partition_params(trained).frozen;
    check(digest(a) == digest(b), "frozen-weight digests");

    auto read = [&](const std::string& name) {
      std::ifstream in(p(env, name));
      std::stringstream ss;
      ss << in.rdbuf();
      return ss.str();
    };
    check(read("inv_a.metrics.jsonl") == read("inv_b.metrics.jsonl") && read("inv_a.qidw") == read("inv_b.qidw"),
          "bit-exact rerun");
    std::istringstream in(read("inv_a.metrics.jsonl"));
    bool ident = true;
    const double alpha = rc.num("alpha");
    for (std::string line; std::getline(in, line);) {
      auto j = nlohmann::json::parse(line);
      if (j["kind"] != "step") continue;
      ident = ident && std::abs(j["loss_total"].get<double>() - j["loss_ce"].get<double>() -
                                alpha * j["loss_enp"].get<double>()) <= 1e-6;
    }
    check(ident, "loss decomposition identity");
  }
  const double secs = seconds_since(t0);
  check(secs < 300, "runtime");
  std::string detail = failed.empty() ? "all 10 invariants hold" : "failed:";
  for (const auto& f : failed) detail += " [" + f + "]";
  return {failed.empty(), detail + ", " + fmt(secs, 3) + "s"};
}

// ---- 7 ----
Outcome ablation_matrix(Env& env) {
  if (!fs::exists(p(env, "train500.qidd"))) qid(env, "gen-data", {"n=500", "offset=0", "data=" + p(env, "train500.qidd")});
  std::set<std::string> configs;
  std::vector<std::string> ok;
  for (const auto& a : ablation_names()) {
    const std::string tag = "abl_" + a;
    qid(env, "train", plus(run_paths(env, tag), {"data=" + p(env, "train500.qidd"), "max_epochs=3"}), {"--ablation", a});
    std::ifstream in(p(env, tag + ".qidw.cfg"));
    std::stringstream ss;
    ss << in.rdbuf();
    configs.insert(ss.str());
    ok.push_back(a);
  }
  return {configs.size() == ablation_names().size(),
          std::to_string(ok.size()) + "/6 ablations trained, " + std::to_string(configs.size()) +
              " distinct resolved configs"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance checks"};
  Env env;
  std::string work = "acceptance_run";
  env.config = std::string(QID_SOURCE_DIR) + "/configs/acceptance.cfg";
  std::vector<int> only;
  app.add_option("--config", env.config, "run config for the training checks");
  app.add_option("--workdir", work, "scratch directory for data, checkpoints and logs");
  app.add_option("--only", only, "run only these criteria");
  CLI11_PARSE(app, argc, argv);
  env.work = work;
  fs::create_directories(env.work);

  const std::vector<std::pair<std::string, std::function<Outcome(Env&)>>> checks = {
      {"gradient oracle", gradient_oracle},         {"query dependence", query_dependence},
      {"defuse effect", defuse_effect},             {"fuse robustness", fuse_robustness},
      {"precompute equivalence", precompute_equivalence}, {"invariant suite", invariants},
      {"ablation matrix", ablation_matrix},
  };
  int failures = 0;
  for (std::size_t i = 0; i < checks.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    Outcome o;
    try {
      o = checks[i].second(env);
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failures += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " [" << id << "] " << checks[i].first << ": " << o.detail << std::endl;
  }
  std::ofstream(env.work / "commands.log") << env.log.str();
  return failures == 0 ? 0 : 1;
}
