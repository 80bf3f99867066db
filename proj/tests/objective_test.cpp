#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "qid/numerics/grad_check.hpp"
#include "qid/objective/objective.hpp"

using namespace qid;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.encoder.layers = 2;
  c.encoder.heads = 2;
  c.encoder.d_v = 32;
  c.layers_q = {2};
  return c;
}

// push every zero-initialised weight off zero so no gradient path is trivially dead
template <std::floating_point S>
void perturb_trainable(QidModel<S>& m, std::uint64_t seed, double sd = 0.1) {
  auto rng = Rng::derive(seed, "test.perturb");
  auto part = partition_params(m);
  for (auto& [name, t] : part.trainable) {
    auto v = t.mutable_data();
    for (auto& x : v) x += static_cast<S>(rng.normal(0.0, sd));
  }
}

std::vector<PreparedSample<double>> tiny_data(std::size_t n, std::uint64_t seed) {
  return prepare<double>(generate_dataset(n, SynthConfig{}, seed), EncoderConfig{});
}

std::vector<PreparedSample<float>> tiny_data_f(std::size_t n, std::uint64_t seed, std::uint64_t offset = 0) {
  return prepare<float>(generate_dataset(n, SynthConfig{}, seed, offset), EncoderConfig{});
}

}  // namespace

TEST(Model, TrainableParameterCountByHand) {
  auto m = QidModel<float>::init(small_config(), 1);
  auto part = partition_params(m);
  // psi: 32*32+32 + 32*32+32; phi: 64*32+32 + 32*32+32; head: 32*8+8
  EXPECT_EQ(part.trainable_count(), 2112u + 3136u + 264u);
  for (const auto& [name, t] : part.frozen) EXPECT_FALSE(t.requires_grad()) << name;

  auto cfg = small_config();
  cfg.layers_q = {1, 2};
  auto m2 = QidModel<float>::init(cfg, 1);
  EXPECT_EQ(partition_params(m2).trainable_count(), 2 * (2112u + 3136u) + 264u);
  cfg.ablations.no_query_agnostic = true;
  auto m3 = QidModel<float>::init(cfg, 1);
  EXPECT_EQ(partition_params(m3).trainable_count(), 2 * 2112u + 264u);
}

TEST(Model, InitIsSeededAndPhiStartsAtZero) {
  auto a = QidModel<float>::init(small_config(), 3);
  auto b = QidModel<float>::init(small_config(), 3);
  auto c = QidModel<float>::init(small_config(), 4);
  EXPECT_EQ(to_checkpoint(a).encode(), to_checkpoint(b).encode());
  EXPECT_NE(to_checkpoint(a).encode(), to_checkpoint(c).encode());
  for (float v : a.qagn.at(2).bias().data()) EXPECT_EQ(v, 0.0f);
}

TEST(Model, BadLayerSetIsConfigError) {
  auto cfg = small_config();
  cfg.layers_q = {3};
  EXPECT_THROW(QidModel<float>::init(cfg, 1), ConfigError);
  cfg.layers_q = {};
  EXPECT_THROW(QidModel<float>::init(cfg, 1), ConfigError);
}

TEST(Model, CheckpointRoundTripAndMismatch) {
  auto m = QidModel<float>::init(small_config(), 5);
  perturb_trainable(m, 5);
  auto c = Checkpoint::decode(to_checkpoint(m).encode());
  auto fresh = QidModel<float>::init(small_config(), 99);
  load_checkpoint(fresh, c);
  EXPECT_EQ(to_checkpoint(fresh).encode(), to_checkpoint(m).encode());

  auto bigger = small_config();
  bigger.encoder.d_v = 64;
  auto wrong = QidModel<float>::init(bigger, 5);
  EXPECT_THROW(load_checkpoint(wrong, c), ConfigError);
  auto more_layers = small_config();
  more_layers.layers_q = {1, 2};
  auto wrong2 = QidModel<float>::init(more_layers, 5);
  EXPECT_THROW(load_checkpoint(wrong2, c), ConfigError);
}

TEST(Forward, ShapesRecordsAndLossIdentity) {
  auto cfg = small_config();
  cfg.layers_q = {1, 2};
  auto m = QidModel<double>::init(cfg, 2);
  auto data = tiny_data(1, 2);
  Rng rng(1);
  auto f = forward(m, data[0].patches, data[0].query_ids, FuseConfig{}, rng);
  EXPECT_EQ(f.logits.shape(), (Shape{1, 8}));
  ASSERT_EQ(f.records.size(), 4u);  // 2 layers x 2 heads
  double sum = 0;
  for (const auto& r : f.records) {
    EXPECT_EQ(r.a_cross.numel(), 16u);
    EXPECT_GE(r.entropy_value(), 0.0);
    EXPECT_LE(r.entropy_value(), std::log(16.0) + 1e-9);
    sum += r.entropy_value();
  }
  ASSERT_TRUE(f.enp);
  EXPECT_NEAR(f.enp->item(), sum / 2.0, 1e-12);  // mean over layers of the sum over heads

  auto ce = cross_entropy(f.logits, data[0].answer);
  for (double alpha : {0.0, 1e-2, 1.0}) {
    EXPECT_NEAR(total_loss(ce, *f.enp, alpha).item(), ce.item() + alpha * f.enp->item(), 1e-12);
  }
  EXPECT_THROW(total_loss(ce, Tensor<double>::scalar(-0.1), 1e-2), ContractError);
}

TEST(Forward, InferenceIsDeterministicAndFuseIsNot) {
  auto m = QidModel<double>::init(small_config(), 2);
  perturb_trainable(m, 2);
  auto s = tiny_data(1, 3)[0];
  Rng r1(1), r2(2);
  const FuseConfig off{0.16, false};
  auto a = forward(m, s.patches, s.query_ids, off, r1).logits;
  auto b = forward(m, s.patches, s.query_ids, off, r2).logits;
  for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(a[i], b[i]);
  Rng r3(1), r4(2);
  auto c = forward(m, s.patches, s.query_ids, FuseConfig{}, r3).logits;
  auto d = forward(m, s.patches, s.query_ids, FuseConfig{}, r4).logits;
  double diff = 0;
  for (std::size_t i = 0; i < 8; ++i) diff += std::abs(c[i] - d[i]);
  EXPECT_GT(diff, 0.0);
}

TEST(Forward, NoInjectionHasNoRecordsAndIgnoresQuery) {
  auto cfg = small_config();
  cfg.ablations.no_injection = true;
  auto m = QidModel<double>::init(cfg, 2);
  perturb_trainable(m, 2);
  auto s = tiny_data(1, 3)[0];
  Rng rng(0);
  auto a = forward(m, s.patches, s.query_ids, FuseConfig{}, rng);
  EXPECT_TRUE(a.records.empty());
  EXPECT_FALSE(a.enp);
  auto other = encode_query_cell(3, 3, 4);
  auto b = forward(m, s.patches, other, FuseConfig{}, rng);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(a.logits[i], b.logits[i]);
}

TEST(Forward, FullTokenModeInjectsEveryTokenRow) {
  auto cfg = small_config();
  cfg.ablations.full_token_q = true;
  auto m = QidModel<double>::init(cfg, 2);
  auto s = tiny_data(1, 3)[0];
  Rng rng(0);
  auto q = query_rows(m, s.query_ids, FuseConfig{}, rng);
  EXPECT_EQ(q.shape(), (Shape{3, 32}));  // two ids plus EoS
  auto f = forward(m, s.patches, s.query_ids, FuseConfig{}, rng);
  EXPECT_EQ(f.logits.numel(), 8u);
}

TEST(Forward, FullModelGradientOracle) {
  // toy config at initialisation, every trainable tensor, fuse on
  auto m = QidModel<double>::init(small_config(), 7);
  auto s = tiny_data(1, 8)[0];
  auto loss_fn = [&] {
    auto rng = Rng::derive(7, "test.fuse");
    auto f = forward(m, s.patches, s.query_ids, FuseConfig{}, rng);
    return total_loss(cross_entropy(f.logits, s.answer), *f.enp, 1e-2);
  };
  auto report = grad_check_report(loss_fn, partition_params(m).trainable_tensors());
  EXPECT_LT(report.max_relative_error, 1e-4) << report.worst_analytic << " vs " << report.worst_numeric;
  EXPECT_EQ(report.checked, 5512u);
}

TEST(Forward, GradientsAwayFromInitIncludingEncoder) {
  // Perturbed weights wake up the zero-initialised phi path. Some entries then
  // carry gradients near 1e-8, where central differences at h = 1e-5 only
  // resolve ~ulp(loss)/2h, so those are held to an absolute bound instead.
  auto cfg = small_config();
  cfg.layers_q = {1, 2};
  auto m = QidModel<double>::init(cfg, 7);
  perturb_trainable(m, 7);
  std::vector<Tensor<double>> params;
  m.visit([&](const std::string& name, Tensor<double>& t) {
    if (name.ends_with(".P") || name == "query.table") return;  // constant table, frozen lookup
    t.set_requires_grad(true);
    params.push_back(t);
  });
  auto s = tiny_data(1, 8)[0];
  auto loss_fn = [&] {
    auto rng = Rng::derive(7, "test.fuse");
    auto f = forward(m, s.patches, s.query_ids, FuseConfig{}, rng);
    return total_loss(cross_entropy(f.logits, s.answer), *f.enp, 1e-2);
  };
  Tape<double> tape;
  {
    auto scope = tape.record();
    backward(loss_fn(), tape);
  }
  const double h = 1e-5;
  double worst_rel = 0, worst_abs_small = 0;
  std::size_t resolved = 0;
  for (auto& p : params) {
    std::vector<double> analytic(p.numel(), 0.0);
    if (p.has_grad()) std::copy(p.grad().begin(), p.grad().end(), analytic.begin());
    auto v = p.mutable_data();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double saved = v[i];
      v[i] = saved + h;
      const double up = loss_fn().item();
      v[i] = saved - h;
      const double down = loss_fn().item();
      v[i] = saved;
      const double numeric = (up - down) / (2 * h);
      const double err = std::abs(numeric - analytic[i]);
      if (std::max(std::abs(numeric), std::abs(analytic[i])) > 1e-6) {
        worst_rel = std::max(worst_rel, err / std::max(std::abs(numeric), std::abs(analytic[i])));
        ++resolved;
      } else {
        worst_abs_small = std::max(worst_abs_small, err);
      }
    }
  }
  EXPECT_LT(worst_rel, 1e-4);
  EXPECT_LT(worst_abs_small, 1e-9);
  EXPECT_GT(resolved, 10000u);
}

TEST(Forward, PrecomputedBiasGivesIdenticalEvaluation) {
  auto m = QidModel<float>::init(small_config(), 4);
  perturb_trainable(m, 4);
  auto data = tiny_data_f(40, 6);
  auto before = evaluate(m, data);
  for (auto& [l, c] : m.qagn) precompute_bias(c);
  EXPECT_TRUE(m.bias_frozen());
  auto after = evaluate(m, data);
  EXPECT_EQ(before.accuracy, after.accuracy);
  EXPECT_EQ(before.loss, after.loss);
  EXPECT_EQ(before.mean_entropy, after.mean_entropy);
  EXPECT_THROW(precompute_bias(m.qagn.at(2)), ContractError);

  // the cached bias survives a checkpoint round trip
  auto c = Checkpoint::decode(to_checkpoint(m).encode());
  EXPECT_TRUE(c.contains(bias_entry_name(2)));
  auto fresh = QidModel<float>::init(small_config(), 4);
  load_checkpoint(fresh, c);
  EXPECT_TRUE(fresh.bias_frozen());
  EXPECT_EQ(evaluate(fresh, data).loss, before.loss);
}

TEST(Evaluate, HitReportUsesDeepestInjectedLayer) {
  std::vector<AttentionReport> r(3);
  r[0] = {1, 0, 0, {0.9, 0.1}, 0};
  r[1] = {2, 0, 0, {0.2, 0.8}, 1};
  r[2] = {2, 1, 0, {0.4, 0.6}, 1};
  EXPECT_EQ(attended_patch(r), 1u);
  EXPECT_FALSE(attended_patch({}));
}

TEST(Split, LastFifthValidates) {
  auto all = generate_dataset(10, SynthConfig{}, 1);
  auto [tr, va] = split_train_val(all);
  ASSERT_EQ(tr.size(), 8u);
  ASSERT_EQ(va.size(), 2u);
  EXPECT_EQ(va[0].image, all[8].image);
  EXPECT_EQ(va[1].image, all[9].image);
}

TEST(Metrics, JsonFields) {
  MetricsRecord r;
  r.kind = "epoch";
  r.step = 5;
  r.val_accuracy = 0.5;
  auto j = r.to_json();
  for (const char* k : {"step", "epoch", "loss_total", "loss_ce", "loss_enp", "mean_entropy", "val_loss", "val_accuracy"})
    EXPECT_TRUE(j.contains(k)) << k;
  r.kind = "step";
  EXPECT_FALSE(r.to_json().contains("val_loss"));
}

namespace {

TrainConfig quick_train() {
  TrainConfig t;
  t.adam.base_lr = 3e-3;
  t.adam.warmup_steps = 5;
  t.max_epochs = 3;
  t.early_stop_patience = 5;
  t.seed = 11;
  return t;
}

std::vector<MetricsRecord> run(QidModel<float>& m, const std::vector<PreparedSample<float>>& tr,
                               const std::vector<PreparedSample<float>>& va, const TrainConfig& t) {
  std::vector<MetricsRecord> out;
  train(m, tr, va, t, [&](const MetricsRecord& r) { out.push_back(r); });
  return out;
}

}  // namespace

TEST(Train, DeterministicUnderSeedAndOnlyTrainableMove) {
  auto tr = tiny_data_f(32, 1), va = tiny_data_f(8, 1, 32);
  auto a = QidModel<float>::init(small_config(), 1);
  auto b = QidModel<float>::init(small_config(), 1);
  auto frozen_before = partition_params(a).frozen;
  std::vector<std::vector<float>> snap;
  for (const auto& [n, t] : frozen_before) snap.emplace_back(t.data().begin(), t.data().end());
  auto ra = run(a, tr, va, quick_train());
  auto rb = run(b, tr, va, quick_train());
  ASSERT_EQ(ra.size(), rb.size());
  ASSERT_EQ(ra.size(), 3u * 4u + 3u);
  for (std::size_t i = 0; i < ra.size(); ++i) EXPECT_EQ(ra[i].to_json().dump(), rb[i].to_json().dump());
  auto frozen_after = partition_params(a).frozen;
  for (std::size_t k = 0; k < snap.size(); ++k)
    EXPECT_TRUE(std::equal(snap[k].begin(), snap[k].end(), frozen_after[k].second.data().begin())) << frozen_after[k].first;
  EXPECT_EQ(ra.back().step, 12u);
  for (const auto& r : ra) {
    EXPECT_NEAR(r.loss_total, r.loss_ce + 1e-2 * r.loss_enp, 1e-5);
  }
}

TEST(Train, NoDefuseStillLogsEntropy) {
  auto tr = tiny_data_f(16, 1), va = tiny_data_f(8, 1, 16);
  auto cfg = small_config();
  cfg.ablations.no_defuse = true;
  auto m = QidModel<float>::init(cfg, 1);
  auto t = quick_train();
  t.max_epochs = 1;
  auto rs = run(m, tr, va, t);
  EXPECT_GT(rs.front().loss_enp, 0.0);
  EXPECT_EQ(rs.front().loss_total, rs.front().loss_ce);
}

TEST(Train, LossFallsOnSmallSet) {
  auto tr = tiny_data_f(16, 2);
  auto m = QidModel<float>::init(small_config(), 2);
  auto t = quick_train();
  t.max_epochs = 15;
  t.early_stop_patience = 100;
  auto rs = run(m, tr, tr, t);
  double first = 1e9, last = 1e9;
  for (const auto& r : rs)
    if (r.kind == "epoch") {
      if (first == 1e9) first = r.val_loss;
      last = r.val_loss;
    }
  EXPECT_LT(last, first);
}

TEST(Train, ResumeReproducesNextStep) {
  auto tr = tiny_data_f(24, 3), va = tiny_data_f(8, 3, 24);
  auto t = quick_train();
  auto full = QidModel<float>::init(small_config(), 3);
  auto all = run(full, tr, va, t);

  auto part = QidModel<float>::init(small_config(), 3);
  auto one = t;
  one.max_epochs = 1;
  TrainState<float> st(t.adam);
  train(part, tr, va, one, {}, &st);
  auto path = std::filesystem::temp_directory_path() / "qid_resume_test.qidw";
  state_to_checkpoint(part, st).save(path);

  auto resumed = QidModel<float>::init(small_config(), 77);
  auto st2 = state_from_checkpoint(resumed, Checkpoint::load(path), t.adam);
  std::vector<MetricsRecord> rest;
  train(resumed, tr, va, t, [&](const MetricsRecord& r) { rest.push_back(r); }, &st2);
  std::filesystem::remove(path);
  ASSERT_EQ(rest.size() + 4u, all.size());  // first epoch: 3 steps + 1 epoch record
  for (std::size_t i = 0; i < rest.size(); ++i) EXPECT_EQ(rest[i].to_json().dump(), all[i + 4].to_json().dump());
  EXPECT_EQ(to_checkpoint(resumed).encode(), to_checkpoint(full).encode());
}

TEST(Train, EarlyStoppingRestoresBestWeights) {
  auto tr = tiny_data_f(16, 4), va = tiny_data_f(8, 4, 16);
  auto m = QidModel<float>::init(small_config(), 4);
  auto t = quick_train();
  t.adam.base_lr = 0.5;  // overshoots, so validation gets worse
  t.max_epochs = 8;
  t.early_stop_patience = 1;
  std::vector<MetricsRecord> rs;
  auto res = train(m, tr, va, t, [&](const MetricsRecord& r) { rs.push_back(r); });
  double best = 1e30;
  for (const auto& r : rs)
    if (r.kind == "epoch") best = std::min(best, r.val_loss);
  EXPECT_EQ(static_cast<float>(best), res.best_val_loss);
  EXPECT_EQ(static_cast<float>(evaluate(m, va).loss), res.best_val_loss);
}

TEST(Train, NonFiniteWeightsNameTheStep) {
  auto tr = tiny_data_f(8, 5);
  auto m = QidModel<float>::init(small_config(), 5);
  m.head.b.mutable_data()[0] = std::numeric_limits<float>::quiet_NaN();
  try {
    run(m, tr, tr, quick_train());
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("step 1"), std::string::npos) << e.what();
  }
}
