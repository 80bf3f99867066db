#pragma once

#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "qid/encoder/encoder.hpp"
#include "qid/numerics/ops.hpp"
#include "qid/numerics/rng.hpp"

namespace qid {

inline constexpr double kEntropyLogEps = 1e-12;

struct FuseConfig {
  double sigma = 0.16;
  bool enabled = true;
};

/// q + sigma * |q| * eps / |eps|, eps ~ N(0, I), then projected to the unit
/// sphere. Disabled: plain q / |q|. Computed in double.
template <std::floating_point S>
Tensor<S> fuse_augment(const Tensor<S>& q_eos, const FuseConfig& cfg, Rng& rng) {
  const std::size_t n = q_eos.numel();
  double qn = 0;
  for (S v : q_eos.data()) qn += static_cast<double>(v) * v;
  qn = std::sqrt(qn);
  if (!(qn > 0)) throw DegenerateInputError("fuse_augment: q_eos has zero norm");
  std::vector<double> out(q_eos.data().begin(), q_eos.data().end());
  if (cfg.enabled) {
    if (!(cfg.sigma > 0)) throw ConfigError("fuse_augment: sigma must be positive when fuse is enabled");
    std::vector<double> eps(n);
    double en = 0;
    for (auto& e : eps) {
      e = rng.normal();
      en += e * e;
    }
    en = std::sqrt(en);
    for (std::size_t i = 0; i < n; ++i) out[i] += cfg.sigma * qn * eps[i] / en;
  }
  double on = 0;
  for (double v : out) on += v * v;
  on = std::sqrt(on);
  std::vector<S> res(n);
  for (std::size_t i = 0; i < n; ++i) res[i] = static_cast<S>(out[i] / on);
  return Tensor<S>(q_eos.shape(), std::move(res));
}

/// Lower bound on cos(fuse_augment(q), q). The exact minimum over noise
/// directions is sqrt(1 - sigma^2), which sits above this.
inline double fuse_cosine_floor(double sigma) { return (1 - sigma) / std::sqrt((1 - sigma) * (1 - sigma) + sigma * sigma); }

/// Two affine layers with GELU between. Used for both psi and phi.
template <std::floating_point S>
struct Mlp2 {
  Tensor<S> w1, b1, w2, b2;

  std::size_t in_dim() const { return w1.rows(); }
  std::size_t out_dim() const { return w2.cols(); }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".w1", w1);
    f(prefix + ".b1", b1);
    f(prefix + ".w2", w2);
    f(prefix + ".b2", b2);
  }

  /// hidden = out; first layer Glorot-normal, last layer N(0, final_sd)
  /// (final_sd = 0 gives an exact zero map).
  static Mlp2 init(std::size_t in, std::size_t hidden, std::size_t out, double final_sd, Rng& rng) {
    Mlp2 m;
    m.w1 = Tensor<S>({in, hidden});
    fill_normal(m.w1, rng, std::sqrt(2.0 / static_cast<double>(in + hidden)));
    m.b1 = Tensor<S>({hidden});
    m.w2 = Tensor<S>({hidden, out});
    if (final_sd > 0) fill_normal(m.w2, rng, final_sd);
    m.b2 = Tensor<S>({out});
    return m;
  }
};

template <std::floating_point S>
Tensor<S> mlp_forward(const Tensor<S>& x, const Mlp2<S>& m) {
  return add_rowwise(matmul(gelu(add_rowwise(matmul(x, m.w1), m.b1)), m.w2), m.b2);
}

template <std::floating_point S>
using PsiProjector = Mlp2<S>;

template <std::floating_point S>
PsiProjector<S> init_psi(std::size_t d_t, std::size_t d_v, Rng& rng) {
  return Mlp2<S>::init(d_t, d_v, d_v, 0.02, rng);
}

/// psi(q'), rank-1 [d_t] in -> [1 x d_v]; an [n x d_t] matrix maps row-wise.
template <std::floating_point S>
Tensor<S> project_query(const Tensor<S>& q_prime, const PsiProjector<S>& psi) {
  const auto x = q_prime.rank() == 1 ? reshape(q_prime, {1, q_prime.numel()}) : q_prime;
  if (x.cols() != psi.in_dim()) {
    throw DimensionError("project_query: query dim " + std::to_string(x.cols()) + " but psi expects " +
                         std::to_string(psi.in_dim()));
  }
  return mlp_forward(x, psi);
}

/// Appends the projected query row(s) after the vision rows.
template <std::floating_point S>
TokenGrid<S> inject(const TokenGrid<S>& z, const Tensor<S>& pq) {
  if (z.query_rows() != 0) throw ContractError("inject: grid already carries a query row");
  const auto rows = pq.rank() == 1 ? reshape(pq, {1, pq.numel()}) : pq;
  if (rows.cols() != z.tokens.cols()) {
    throw DimensionError("inject: query " + shape_string(pq.shape()) + " vs grid " + shape_string(z.tokens.shape()));
  }
  return {concat_rows(z.tokens, rows), z.vision_tokens, z.layer_index};
}

template <std::floating_point S>
TokenGrid<S> strip_query(const TokenGrid<S>& z) {
  if (z.query_rows() == 0) {
    throw ContractError("strip_query: expected " + std::to_string(z.vision_tokens) + "+query rows, got " +
                        std::to_string(z.tokens.rows()));
  }
  return {slice_rows(z.tokens, 0, z.vision_tokens), z.vision_tokens, z.layer_index};
}

template <std::floating_point S>
struct CrossAttentionRecord {
  std::size_t layer = 0;
  std::size_t head = 0;
  Tensor<S> a_cross;  // [1 x T_v]
  Tensor<S> entropy;  // scalar, on the tape when training

  double entropy_value() const { return static_cast<double>(entropy.item()); }
};

/// Last attention row restricted to the vision columns, and its entropy
/// -sum p log(p + 1e-12). The sub-row is not renormalized unless asked.
template <std::floating_point S>
CrossAttentionRecord<S> extract_cross_attention(const Tensor<S>& a, std::size_t layer, std::size_t head,
                                                std::size_t vision_tokens, bool renormalize = false) {
  const std::size_t n = a.rows();
  if (a.rank() != 2 || a.cols() != n || vision_tokens >= n) {
    throw DimensionError("extract_cross_attention: attention " + shape_string(a.shape()) + " with T_v=" +
                         std::to_string(vision_tokens));
  }
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < n; ++j) s += a(i, j);
    if (std::abs(s - 1.0) > 1e-4) {
      throw ContractError("extract_cross_attention: row " + std::to_string(i) + " sums to " + std::to_string(s));
    }
  }
  CrossAttentionRecord<S> rec;
  rec.layer = layer;
  rec.head = head;
  rec.a_cross = slice_cols(slice_rows(a, n - 1, 1), 0, vision_tokens);
  auto p = renormalize ? normalize_sum(rec.a_cross) : rec.a_cross;
  rec.entropy = scale(sum(mul(p, log_eps(p, static_cast<S>(kEntropyLogEps)))), S{-1});
  return rec;
}

/// (1/|L_q|) sum_{l in L_q} sum_h H_h^l
template <std::floating_point S>
Tensor<S> entropy_loss(const std::vector<CrossAttentionRecord<S>>& records, const std::set<std::size_t>& layers_q,
                       std::size_t head_count) {
  if (layers_q.empty()) throw ContractError("entropy_loss: empty layer set");
  std::vector<const CrossAttentionRecord<S>*> found;
  for (std::size_t l : layers_q) {
    for (std::size_t h = 0; h < head_count; ++h) {
      const CrossAttentionRecord<S>* hit = nullptr;
      for (const auto& r : records)
        if (r.layer == l && r.head == h) hit = &r;
      if (!hit) {
        throw ContractError("entropy_loss: no record for layer " + std::to_string(l) + " head " + std::to_string(h));
      }
      found.push_back(hit);
    }
  }
  Tensor<S> total = found[0]->entropy;
  for (std::size_t i = 1; i < found.size(); ++i) total = add(total, found[i]->entropy);
  return scale(total, static_cast<S>(1.0 / static_cast<double>(layers_q.size())));
}

}  // namespace qid
