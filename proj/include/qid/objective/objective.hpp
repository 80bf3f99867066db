#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "qid/numerics/adamw.hpp"
#include "qid/objective/model.hpp"
#include "qid/synthdoc/synthdoc.hpp"

namespace qid {

template <std::floating_point S>
struct ForwardResult {
  Tensor<S> logits;  // [1 x K]
  std::vector<CrossAttentionRecord<S>> records;
  std::optional<Tensor<S>> enp;  // absent when nothing was injected
};

/// Query rows fed to psi: the fused [EoS] vector, or every token column
/// (each fused independently) in full-token mode.
template <std::floating_point S>
Tensor<S> query_rows(const QidModel<S>& m, const std::vector<std::uint16_t>& ids, const FuseConfig& fuse, Rng& rng) {
  auto q = encode_query(ids, m.query_table);
  if (!m.config.ablations.full_token_q) return reshape(fuse_augment(q.eos, fuse, rng), {1, q.eos.numel()});
  const auto& full = *q.full_tokens;
  const std::size_t dt = full.rows(), tt = full.cols();
  std::vector<S> rows(tt * dt);
  for (std::size_t t = 0; t < tt; ++t) {
    std::vector<S> col(dt);
    for (std::size_t j = 0; j < dt; ++j) col[j] = full(j, t);
    auto f = fuse_augment(Tensor<S>({dt}, std::move(col)), fuse, rng);
    std::copy(f.data().begin(), f.data().end(), rows.begin() + t * dt);
  }
  return Tensor<S>::matrix(tt, dt, std::move(rows));
}

/// patches: [T_v x patch_pixels]. fuse.enabled = false is the inference path.
template <std::floating_point S>
ForwardResult<S> forward(const QidModel<S>& m, const Tensor<S>& patches, const std::vector<std::uint16_t>& ids,
                         const FuseConfig& fuse, Rng& rng) {
  const auto& cfg = m.config;
  const auto& ab = cfg.ablations;
  ForwardResult<S> out;
  auto grid = embed_image(patches, m.encoder);
  std::optional<Tensor<S>> q;
  if (!ab.no_injection) q = query_rows(m, ids, fuse, rng);
  for (std::size_t l = 1; l <= m.encoder.blocks.size(); ++l) {
    const bool in_q = cfg.layers_q.count(l) > 0;
    const bool inj = in_q && q.has_value();
    if (inj) grid = inject(grid, project_query(*q, m.psi.at(l)));
    auto res = vit_block(grid.tokens, m.encoder.blocks[l - 1]);
    grid.tokens = res.z;
    grid.layer_index = l;
    if (inj) {
      for (std::size_t h = 0; h < res.attention.size(); ++h) {
        out.records.push_back(extract_cross_attention(res.attention[h], l, h, grid.vision_tokens, cfg.renormalize_cross));
      }
      grid = strip_query(grid);
    }
    if (in_q && !ab.no_query_agnostic) grid = apply_bias(grid, m.qagn.at(l));
  }
  out.logits = add_rowwise(matmul(mean_rows(grid.tokens), m.head.w), m.head.b);
  if (!out.records.empty()) out.enp = entropy_loss(out.records, cfg.layers_q, cfg.encoder.heads);
  return out;
}

/// ce + alpha * enp
template <std::floating_point S>
Tensor<S> total_loss(const Tensor<S>& ce, const Tensor<S>& enp, double alpha) {
  if (ce.numel() != 1 || enp.numel() != 1) throw ContractError("total_loss: both terms must be scalars");
  if (enp.item() < S{0}) throw ContractError("total_loss: negative entropy term");
  if (alpha < 0) throw ContractError("total_loss: alpha must be >= 0");
  return add(ce, scale(enp, static_cast<S>(alpha)));
}

template <std::floating_point S>
struct PreparedSample {
  Tensor<S> patches;
  std::vector<std::uint16_t> query_ids;
  std::size_t answer = 0;
};

template <std::floating_point S>
std::vector<PreparedSample<S>> prepare(const std::vector<SynthSample>& samples, const EncoderConfig& enc) {
  std::vector<PreparedSample<S>> out;
  out.reserve(samples.size());
  for (const auto& s : samples) {
    out.push_back({extract_patches<S>(s.image, enc.image_side, enc.patch_side), s.query_ids, s.answer});
  }
  return out;
}

template <std::floating_point S>
struct BatchLoss {
  Tensor<S> total, ce, enp;
  double entropy_sum = 0;  // over all records, for the mean-entropy metric
  std::size_t entropy_count = 0;
};

/// Batch means of both terms. Fuse noise for the batch comes from rng.
template <std::floating_point S>
BatchLoss<S> batch_loss(const QidModel<S>& m, const std::vector<const PreparedSample<S>*>& batch, double alpha,
                        const FuseConfig& fuse, Rng& rng) {
  if (batch.empty()) throw ContractError("batch_loss: empty batch");
  BatchLoss<S> out;
  Tensor<S> ce_sum, enp_sum;
  for (const auto* s : batch) {
    auto f = forward(m, s->patches, s->query_ids, fuse, rng);
    auto ce = cross_entropy(reshape(f.logits, {f.logits.numel()}), s->answer);
    ce_sum = ce_sum.defined() ? add(ce_sum, ce) : ce;
    if (f.enp) enp_sum = enp_sum.defined() ? add(enp_sum, *f.enp) : *f.enp;
    for (const auto& r : f.records) out.entropy_sum += r.entropy_value();
    out.entropy_count += f.records.size();
  }
  const S inv = static_cast<S>(1.0 / static_cast<double>(batch.size()));
  out.ce = scale(ce_sum, inv);
  out.enp = enp_sum.defined() ? scale(enp_sum, inv) : Tensor<S>::scalar(S{0});
  out.total = total_loss(out.ce, out.enp, alpha);
  return out;
}

struct EvalResult {
  double accuracy = 0;
  double mean_entropy = 0;  // mean over samples and (layer, head) records
  double loss = 0;          // mean cross-entropy
  std::size_t n = 0;
};

/// Inference path: no fuse, no tape, deterministic.
template <std::floating_point S>
EvalResult evaluate(const QidModel<S>& m, const std::vector<PreparedSample<S>>& data) {
  auto off = Tape<S>::suspend();
  EvalResult r;
  Rng unused(0);
  const FuseConfig inference{0.0, false};
  std::size_t correct = 0, records = 0;
  double ent = 0, loss = 0;
  for (const auto& s : data) {
    auto f = forward(m, s.patches, s.query_ids, inference, unused);
    const auto logits = f.logits.data();
    const auto pred = static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    correct += pred == s.answer;
    loss += cross_entropy(reshape(f.logits, {f.logits.numel()}), s.answer).item();
    for (const auto& rec : f.records) ent += rec.entropy_value();
    records += f.records.size();
  }
  r.n = data.size();
  if (r.n) {
    r.accuracy = static_cast<double>(correct) / static_cast<double>(r.n);
    r.loss = loss / static_cast<double>(r.n);
  }
  if (records) r.mean_entropy = ent / static_cast<double>(records);
  return r;
}

struct AttentionReport {
  std::size_t layer = 0, head = 0;
  double entropy = 0;
  std::vector<double> a_cross;
  std::size_t argmax = 0;
};

/// Inference-path cross-attention records for one sample.
template <std::floating_point S>
std::vector<AttentionReport> inspect_attention(const QidModel<S>& m, const PreparedSample<S>& s) {
  auto off = Tape<S>::suspend();
  Rng unused(0);
  auto f = forward(m, s.patches, s.query_ids, FuseConfig{0.0, false}, unused);
  std::vector<AttentionReport> out;
  for (const auto& r : f.records) {
    AttentionReport a;
    a.layer = r.layer;
    a.head = r.head;
    a.entropy = r.entropy_value();
    a.a_cross.assign(r.a_cross.data().begin(), r.a_cross.data().end());
    a.argmax = static_cast<std::size_t>(std::max_element(a.a_cross.begin(), a.a_cross.end()) - a.a_cross.begin());
    out.push_back(std::move(a));
  }
  return out;
}

/// Argmax of the head-averaged cross-attention in the deepest injected block.
inline std::optional<std::size_t> attended_patch(const std::vector<AttentionReport>& reports) {
  if (reports.empty()) return std::nullopt;
  std::size_t last = 0;
  for (const auto& r : reports) last = std::max(last, r.layer);
  std::vector<double> acc;
  for (const auto& r : reports) {
    if (r.layer != last) continue;
    if (acc.empty()) acc.assign(r.a_cross.size(), 0.0);
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += r.a_cross[i];
  }
  return static_cast<std::size_t>(std::max_element(acc.begin(), acc.end()) - acc.begin());
}

// ---- training ----

struct TrainConfig {
  double alpha = 1e-2;
  double sigma = 0.16;
  AdamWConfig adam;
  std::size_t batch_size = 8;
  std::size_t max_epochs = 5;
  std::size_t early_stop_patience = 1;
  std::uint64_t seed = 0;

  double effective_alpha(const Ablations& ab) const { return ab.no_defuse ? 0.0 : alpha; }
  FuseConfig fuse(const Ablations& ab) const { return {sigma, !ab.no_fuse}; }

  void validate(const Ablations& ab) const {
    if (alpha < 0) throw ConfigError("alpha must be >= 0");
    if (!ab.no_fuse && !(sigma > 0)) throw ConfigError("sigma must be > 0 when fuse is enabled");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (adam.warmup_steps == 0) throw ConfigError("warmup_steps must be positive");
    if (early_stop_patience == 0) throw ConfigError("early_stop_patience must be positive");
  }
};

struct MetricsRecord {
  std::string kind;  // "step" or "epoch"
  std::uint64_t step = 0;
  std::size_t epoch = 0;
  double loss_total = 0, loss_ce = 0, loss_enp = 0, mean_entropy = 0;
  double lr = 0;
  double val_loss = std::numeric_limits<double>::quiet_NaN();
  double val_accuracy = std::numeric_limits<double>::quiet_NaN();

  nlohmann::json to_json() const {
    nlohmann::json j{{"kind", kind},         {"step", step},         {"epoch", epoch},
                     {"loss_total", loss_total}, {"loss_ce", loss_ce}, {"loss_enp", loss_enp},
                     {"mean_entropy", mean_entropy}, {"lr", lr}};
    if (kind == "epoch") {
      j["val_loss"] = val_loss;
      j["val_accuracy"] = val_accuracy;
    }
    return j;
  }
};

/// Deterministic split: the last round(fraction * n) samples validate.
inline std::pair<std::vector<SynthSample>, std::vector<SynthSample>> split_train_val(std::vector<SynthSample> all,
                                                                                   double val_fraction = 0.2) {
  const auto n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(all.size())));
  std::vector<SynthSample> val(all.end() - static_cast<std::ptrdiff_t>(n_val), all.end());
  all.resize(all.size() - n_val);
  return {std::move(all), std::move(val)};
}

/// Everything needed to continue a run at an epoch boundary.
template <std::floating_point S>
struct TrainState {
  explicit TrainState(const AdamWConfig& adam = {}) : optimizer(adam) {}

  OptimizerState<S> optimizer;
  std::size_t next_epoch = 0;
  float best_val_loss = std::numeric_limits<float>::infinity();
  std::size_t bad_epochs = 0;
  bool stopped = false;
  std::vector<std::vector<S>> best;  // trainable values at the best epoch
};

template <std::floating_point S>
Checkpoint state_to_checkpoint(QidModel<S>& m, const TrainState<S>& st) {
  auto c = to_checkpoint(m);
  auto part = partition_params(m);
  c.put_scalar("train.step", static_cast<double>(st.optimizer.step));
  c.put_scalar("train.next_epoch", static_cast<double>(st.next_epoch));
  c.put_scalar("train.best_val_loss", st.best_val_loss);
  c.put_scalar("train.bad_epochs", static_cast<double>(st.bad_epochs));
  c.put_scalar("train.stopped", st.stopped ? 1.0 : 0.0);
  for (std::size_t k = 0; k < part.trainable.size(); ++k) {
    const auto& [name, t] = part.trainable[k];
    const std::vector<std::uint32_t> dims(t.shape().begin(), t.shape().end());
    auto as_entry = [&](const std::string& n, const std::vector<S>& v) {
      c.put(CheckpointEntry{n, dims, std::vector<float>(v.begin(), v.end())});
    };
    if (!st.optimizer.first_moment.empty()) {
      as_entry("adam.m." + name, st.optimizer.first_moment[k]);
      as_entry("adam.v." + name, st.optimizer.second_moment[k]);
    }
    if (!st.best.empty()) as_entry("best." + name, st.best[k]);
  }
  return c;
}

template <std::floating_point S>
TrainState<S> state_from_checkpoint(QidModel<S>& m, const Checkpoint& c, const AdamWConfig& adam) {
  load_checkpoint(m, c);
  auto part = partition_params(m);
  TrainState<S> st(adam);
  auto scalar = [&](const char* n) { return static_cast<double>(c.at(n).values.at(0)); };
  st.optimizer.step = static_cast<std::uint64_t>(scalar("train.step"));
  st.next_epoch = static_cast<std::size_t>(scalar("train.next_epoch"));
  st.best_val_loss = c.at("train.best_val_loss").values.at(0);
  st.bad_epochs = static_cast<std::size_t>(scalar("train.bad_epochs"));
  st.stopped = scalar("train.stopped") != 0.0;
  for (const auto& [name, t] : part.trainable) {
    auto load = [&](const std::string& n) {
      const auto& v = c.at(n).values;
      if (v.size() != t.numel()) throw FormatError("resume entry '" + n + "' has the wrong size");
      return std::vector<S>(v.begin(), v.end());
    };
    if (c.contains("adam.m." + name)) {
      st.optimizer.first_moment.push_back(load("adam.m." + name));
      st.optimizer.second_moment.push_back(load("adam.v." + name));
    }
    if (c.contains("best." + name)) st.best.push_back(load("best." + name));
  }
  return st;
}

struct TrainResult {
  std::size_t epochs_run = 0;
  float best_val_loss = 0;
  bool early_stopped = false;
};

using MetricsSink = std::function<void(const MetricsRecord&)>;

/// fuse -> forward -> defuse loss -> backward -> AdamW per batch, validation
/// per epoch, early stopping on validation loss. On return the model holds the
/// best-validation trainable weights. If `state` is given, training continues
/// from it and it is updated after every epoch (for resume files).
template <std::floating_point S>
TrainResult train(QidModel<S>& m, const std::vector<PreparedSample<S>>& train_set,
                  const std::vector<PreparedSample<S>>& val_set, const TrainConfig& cfg, const MetricsSink& sink,
                  TrainState<S>* state = nullptr, const std::function<void(TrainState<S>&)>& on_epoch = {}) {
  const auto& ab = m.config.ablations;
  cfg.validate(ab);
  if (train_set.empty()) throw ConfigError("training set is empty");
  auto part = partition_params(m);
  auto params = part.trainable_tensors();
  TrainState<S> local(cfg.adam);
  TrainState<S>& st = state ? *state : local;
  st.optimizer.config = cfg.adam;
  const double alpha = cfg.effective_alpha(ab);
  const FuseConfig fuse = cfg.fuse(ab);

  auto snapshot = [&] {
    st.best.clear();
    for (const auto& p : params) st.best.emplace_back(p.data().begin(), p.data().end());
  };
  TrainResult result;
  for (std::size_t epoch = st.next_epoch; epoch < cfg.max_epochs && !st.stopped; ++epoch) {
    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), 0);
    auto shuffle_rng = Rng::derive(cfg.seed, "train.shuffle", epoch);
    shuffle_rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      std::vector<const PreparedSample<S>*> batch;
      for (std::size_t i = start; i < std::min(order.size(), start + cfg.batch_size); ++i) batch.push_back(&train_set[order[i]]);
      const std::uint64_t step = st.optimizer.step + 1;
      auto fuse_rng = Rng::derive(cfg.seed, "train.fuse", step);
      MetricsRecord rec;
      try {
        Tape<S> tape;
        BatchLoss<S> loss;
        {
          auto scope = tape.record();
          loss = batch_loss(m, batch, alpha, fuse, fuse_rng);
          backward(loss.total, tape);
        }
        adamw_step(st.optimizer, params);
        for (auto& p : params) p.zero_grad();
        rec.loss_total = loss.total.item();
        rec.loss_ce = loss.ce.item();
        rec.loss_enp = loss.enp.item();
        rec.mean_entropy = loss.entropy_count ? loss.entropy_sum / static_cast<double>(loss.entropy_count) : 0.0;
      } catch (const NumericalError& e) {
        throw NumericalError("training step " + std::to_string(step) + " (epoch " + std::to_string(epoch) +
                             "): " + e.what());
      }
      for (const auto& p : params) {
        for (S v : p.data()) {
          if (!std::isfinite(v)) throw NumericalError("training step " + std::to_string(step) + ": parameter became non-finite");
        }
      }
      rec.kind = "step";
      rec.step = st.optimizer.step;
      rec.epoch = epoch;
      rec.lr = st.optimizer.current_lr();
      if (sink) sink(rec);
    }
    const auto val = evaluate(m, val_set.empty() ? train_set : val_set);
    const float val_loss = static_cast<float>(val.loss);
    MetricsRecord rec;
    rec.kind = "epoch";
    rec.step = st.optimizer.step;
    rec.epoch = epoch;
    rec.lr = st.optimizer.current_lr();
    rec.mean_entropy = val.mean_entropy;
    rec.val_loss = val_loss;
    rec.val_accuracy = val.accuracy;
    if (sink) sink(rec);
    if (val_loss < st.best_val_loss) {
      st.best_val_loss = val_loss;
      st.bad_epochs = 0;
      snapshot();
    } else if (++st.bad_epochs >= cfg.early_stop_patience) {
      st.stopped = true;
      result.early_stopped = true;
    }
    st.next_epoch = epoch + 1;
    ++result.epochs_run;
    if (on_epoch) on_epoch(st);
  }
  if (!st.best.empty()) {
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto dst = params[k].mutable_data();
      std::copy(st.best[k].begin(), st.best[k].end(), dst.begin());
    }
  }
  result.best_val_loss = st.best_val_loss;
  result.early_stopped = result.early_stopped || st.stopped;
  return result;
}

}  // namespace qid
