#pragma once

#include <cmath>
#include <optional>
#include <string>

#include "qid/encoder/encoder.hpp"
#include "qid/query_aware/query_aware.hpp"

namespace qid {

/// P[i,2k] = sin(i / 10000^(2k/d_p)), P[i,2k+1] = cos(same).
template <std::floating_point S>
Tensor<S> sinusoidal_table(std::size_t t_v, std::size_t d_p) {
  if (d_p == 0 || d_p % 2 != 0) throw ConfigError("sinusoidal_table: d_p must be even, got " + std::to_string(d_p));
  if (t_v == 0) throw ConfigError("sinusoidal_table: T_v must be positive");
  std::vector<S> p(t_v * d_p);
  for (std::size_t i = 0; i < t_v; ++i) {
    for (std::size_t k = 0; k < d_p / 2; ++k) {
      const double angle = static_cast<double>(i) / std::pow(10000.0, 2.0 * k / static_cast<double>(d_p));
      p[i * d_p + 2 * k] = static_cast<S>(std::sin(angle));
      p[i * d_p + 2 * k + 1] = static_cast<S>(std::cos(angle));
    }
  }
  return Tensor<S>::matrix(t_v, d_p, std::move(p));
}

template <std::floating_point S>
struct SinusoidalBiasCache {
  Tensor<S> P;    // fixed
  Mlp2<S> phi;    // trainable
  std::optional<Tensor<S>> cached_bias;

  bool frozen() const { return cached_bias.has_value(); }

  /// zero_table replaces P by zeros, leaving phi a learnable constant.
  static SinusoidalBiasCache init(std::size_t t_v, std::size_t d_p, std::size_t d_v, Rng& rng, bool zero_table = false) {
    SinusoidalBiasCache c;
    c.P = zero_table ? Tensor<S>({t_v, d_p}) : sinusoidal_table<S>(t_v, d_p);
    c.phi = Mlp2<S>::init(d_p, d_v, d_v, 0.0, rng);
    return c;
  }

  Tensor<S> bias() const { return cached_bias ? *cached_bias : mlp_forward(P, phi); }
};

/// z + phi(P); the query row must already be gone.
template <std::floating_point S>
TokenGrid<S> apply_bias(const TokenGrid<S>& z, const SinusoidalBiasCache<S>& cache) {
  if (z.query_rows() != 0) throw ContractError("apply_bias: query row still present");
  auto b = cache.bias();
  if (b.shape() != z.tokens.shape()) {
    throw DimensionError("apply_bias: bias " + shape_string(b.shape()) + " vs grid " + shape_string(z.tokens.shape()));
  }
  return {add(z.tokens, b), z.vision_tokens, z.layer_index};
}

template <std::floating_point S>
void precompute_bias(SinusoidalBiasCache<S>& cache) {
  if (cache.frozen()) throw ContractError("precompute_bias: bias already frozen");
  Tensor<S> live;
  {
    // evaluated off-tape: the cache is a constant from here on
    auto off = Tape<S>::suspend();
    live = mlp_forward(cache.P, cache.phi);
  }
  cache.cached_bias = Tensor<S>(live.shape(), std::vector<S>(live.data().begin(), live.data().end()));
}

}  // namespace qid
