#pragma once

#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "qid/encoder/encoder.hpp"
#include "qid/numerics/checkpoint.hpp"
#include "qid/query_agnostic/query_agnostic.hpp"
#include "qid/query_aware/query_aware.hpp"

namespace qid {

struct Ablations {
  bool no_fuse = false;
  bool no_defuse = false;
  bool no_query_agnostic = false;
  bool zero_sinusoid = false;
  bool full_token_q = false;
  bool no_injection = false;
};

struct ModelConfig {
  EncoderConfig encoder;
  std::set<std::size_t> layers_q{2};  // 1-based block indices
  std::size_t d_p = 64;
  std::size_t classes = 8;
  bool renormalize_cross = false;
  Ablations ablations;

  void validate() const {
    encoder.validate();
    if (layers_q.empty()) throw ConfigError("layers_q must name at least one block");
    for (auto l : layers_q) {
      if (l < 1 || l > encoder.layers) {
        throw ConfigError("layers_q entry " + std::to_string(l) + " outside 1.." + std::to_string(encoder.layers));
      }
    }
    if (classes < 2) throw ConfigError("classes must be >= 2");
    if (d_p == 0 || d_p % 2) throw ConfigError("d_p must be even");
  }
};

template <std::floating_point S>
struct HeadWeights {
  Tensor<S> w;  // d_v x K over the mean-pooled grid
  Tensor<S> b;

  template <class F>
  void visit(F&& f) {
    f(std::string("head.w"), w);
    f(std::string("head.b"), b);
  }
};

template <std::floating_point S>
struct QidModel {
  ModelConfig config;
  EncoderWeights<S> encoder;
  Tensor<S> query_table;
  std::map<std::size_t, PsiProjector<S>> psi;
  std::map<std::size_t, SinusoidalBiasCache<S>> qagn;
  HeadWeights<S> head;

  /// Every tensor, frozen or not, in a fixed order. P tables are included
  /// under "qagn.layer{l}.P" but are rebuilt from the config, never loaded.
  template <class F>
  void visit(F&& f) {
    encoder.visit(f);
    f(std::string("query.table"), query_table);
    for (auto& [l, p] : psi) p.visit("psi.layer" + std::to_string(l), f);
    for (auto& [l, c] : qagn) {
      f("qagn.layer" + std::to_string(l) + ".P", c.P);
      c.phi.visit("phi.layer" + std::to_string(l), f);
    }
    head.visit(f);
  }

  static QidModel init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    QidModel m;
    m.config = cfg;
    auto rng_enc = Rng::derive(seed, "init.encoder");
    m.encoder = init_encoder<S>(cfg.encoder, rng_enc);
    auto rng_table = Rng::derive(seed, "init.query_table");
    m.query_table = init_query_table<S>(cfg.encoder, rng_table);
    for (auto l : cfg.layers_q) {
      auto rng_psi = Rng::derive(seed, "init.psi", l);
      m.psi.emplace(l, init_psi<S>(cfg.encoder.d_t, cfg.encoder.d_v, rng_psi));
      if (!cfg.ablations.no_query_agnostic) {
        auto rng_phi = Rng::derive(seed, "init.phi", l);
        m.qagn.emplace(l, SinusoidalBiasCache<S>::init(cfg.encoder.tokens(), cfg.d_p, cfg.encoder.d_v, rng_phi,
                                                       cfg.ablations.zero_sinusoid));
      }
    }
    auto rng_head = Rng::derive(seed, "init.head");
    m.head.w = Tensor<S>({cfg.encoder.d_v, cfg.classes});
    fill_normal(m.head.w, rng_head, 0.02);
    m.head.b = Tensor<S>({cfg.classes});
    return m;
  }

  bool bias_frozen() const {
    for (const auto& [l, c] : qagn)
      if (c.frozen()) return true;
    return false;
  }

  template <std::floating_point T>
  QidModel<T> cast() const {
    auto out = QidModel<T>::init(config, 0);
    std::vector<Tensor<S>> src;
    const_cast<QidModel*>(this)->visit([&](const std::string&, Tensor<S>& t) { src.push_back(t); });
    std::size_t i = 0;
    out.visit([&](const std::string&, Tensor<T>& t) { t = src[i++].template cast<T>(); });
    // tied projections stay tied
    for (std::size_t l = 0; l < encoder.blocks.size(); ++l)
      if (encoder.blocks[l].wk.same_node(encoder.blocks[l].wq)) out.encoder.blocks[l].wk = out.encoder.blocks[l].wq;
    for (const auto& [l, c] : qagn)
      if (c.cached_bias) out.qagn.at(l).cached_bias = c.cached_bias->template cast<T>();
    return out;
  }
};

template <std::floating_point S>
struct ParamPartition {
  std::vector<std::pair<std::string, Tensor<S>>> trainable;
  std::vector<std::pair<std::string, Tensor<S>>> frozen;

  std::vector<Tensor<S>> trainable_tensors() const {
    std::vector<Tensor<S>> out;
    for (const auto& [n, t] : trainable) out.push_back(t);
    return out;
  }
  std::size_t trainable_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : trainable) n += t.numel();
    return n;
  }
};

/// psi, phi and the head train; the encoder, the query table and P stay
/// frozen. Sets requires_grad to match.
template <std::floating_point S>
ParamPartition<S> partition_params(QidModel<S>& m) {
  ParamPartition<S> p;
  m.visit([&](const std::string& name, Tensor<S>& t) {
    const bool train = name.starts_with("psi.") || name.starts_with("phi.") || name.starts_with("head.");
    t.set_requires_grad(train);
    (train ? p.trainable : p.frozen).emplace_back(name, t);
  });
  return p;
}

inline std::string bias_entry_name(std::size_t layer) { return "qagn_bias.layer" + std::to_string(layer); }

template <std::floating_point S>
Checkpoint to_checkpoint(QidModel<S>& m) {
  Checkpoint c;
  m.visit([&](const std::string& name, Tensor<S>& t) {
    if (!name.ends_with(".P")) c.put(name, t);
  });
  for (auto& [l, cache] : m.qagn)
    if (cache.cached_bias) c.put(bias_entry_name(l), *cache.cached_bias);
  return c;
}

/// Copies checkpoint values into a model built from the same config. Missing
/// entries or shape disagreements mean the config does not describe this
/// checkpoint.
template <std::floating_point S>
void load_checkpoint(QidModel<S>& m, const Checkpoint& c) {
  m.visit([&](const std::string& name, Tensor<S>& t) {
    if (name.ends_with(".P")) return;
    const auto* e = c.find(name);
    if (!e) throw ConfigError("checkpoint lacks '" + name + "' required by the config");
    Shape shape(e->dims.begin(), e->dims.end());
    if (shape != t.shape()) {
      throw ConfigError("checkpoint '" + name + "' is " + shape_string(shape) + ", config expects " +
                        shape_string(t.shape()));
    }
    auto dst = t.mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<S>(e->values[i]);
  });
  for (auto& [l, cache] : m.qagn) {
    if (const auto* e = c.find(bias_entry_name(l))) cache.cached_bias = e->template to_tensor<S>();
  }
}

}  // namespace qid
