#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "qid/numerics/checkpoint.hpp"
#include "qid/numerics/ops.hpp"
#include "qid/numerics/rng.hpp"
#include "qid/numerics/tensor.hpp"

namespace qid {

struct EncoderConfig {
  std::size_t image_side = 32;
  std::size_t patch_side = 8;
  std::size_t d_v = 32;
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t d_t = 32;
  std::size_t vocab = 8;
  std::size_t ffn_mult = 4;
  // off by default: position must come from the query-agnostic bias
  bool positional_embedding = false;
  double init_scale = 1.0;
  double qk_scale = 1.0;
  bool tied_qk = false;

  std::size_t tokens() const { return (image_side / patch_side) * (image_side / patch_side); }
  std::size_t patch_pixels() const { return patch_side * patch_side; }
  std::size_t head_dim() const { return d_v / heads; }

  void validate() const {
    if (patch_side == 0 || image_side % patch_side != 0) {
      throw DimensionError("image side " + std::to_string(image_side) + " not divisible by patch side " +
                           std::to_string(patch_side));
    }
    if (heads == 0 || d_v % heads != 0) {
      throw ConfigError("d_v=" + std::to_string(d_v) + " not divisible by heads=" + std::to_string(heads));
    }
    if (layers == 0 || d_t == 0 || vocab == 0 || ffn_mult == 0) throw ConfigError("encoder sizes must be positive");
  }
};

/// Token activations plus bookkeeping for injected query rows, which always
/// sit after the vision rows.
template <std::floating_point S>
struct TokenGrid {
  Tensor<S> tokens;
  std::size_t vision_tokens = 0;
  std::size_t layer_index = 0;

  std::size_t query_rows() const { return tokens.rows() - vision_tokens; }
};

template <std::floating_point S>
struct VitBlockWeights {
  Tensor<S> wq, wk, wv, wo;  // d_v x d_v, heads are contiguous column groups
  Tensor<S> w1, b1, w2, b2;  // FFN
  Tensor<S> ln1_gain, ln1_shift, ln2_gain, ln2_shift;
  std::size_t heads = 1;

  std::size_t d_v() const { return wq.rows(); }
  std::size_t head_dim() const { return d_v() / heads; }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".wq", wq);
    f(prefix + ".wk", wk);
    f(prefix + ".wv", wv);
    f(prefix + ".wo", wo);
    f(prefix + ".w1", w1);
    f(prefix + ".b1", b1);
    f(prefix + ".w2", w2);
    f(prefix + ".b2", b2);
    f(prefix + ".ln1_gain", ln1_gain);
    f(prefix + ".ln1_shift", ln1_shift);
    f(prefix + ".ln2_gain", ln2_gain);
    f(prefix + ".ln2_shift", ln2_shift);
  }

  static VitBlockWeights zeros(std::size_t d_v, std::size_t heads, std::size_t ffn_mult) {
    if (heads == 0 || d_v % heads != 0) throw ConfigError("d_v not divisible by heads");
    VitBlockWeights w;
    w.heads = heads;
    const std::size_t f = d_v * ffn_mult;
    w.wq = Tensor<S>({d_v, d_v});
    w.wk = Tensor<S>({d_v, d_v});
    w.wv = Tensor<S>({d_v, d_v});
    w.wo = Tensor<S>({d_v, d_v});
    w.w1 = Tensor<S>({d_v, f});
    w.b1 = Tensor<S>({f});
    w.w2 = Tensor<S>({f, d_v});
    w.b2 = Tensor<S>({d_v});
    w.ln1_gain = Tensor<S>({d_v}, S{1});
    w.ln1_shift = Tensor<S>({d_v});
    w.ln2_gain = Tensor<S>({d_v}, S{1});
    w.ln2_shift = Tensor<S>({d_v});
    return w;
  }
};

template <std::floating_point S>
void fill_normal(Tensor<S>& t, Rng& rng, double sd) {
  for (auto& v : t.mutable_data()) v = static_cast<S>(rng.normal(0.0, sd));
}

template <std::floating_point S>
struct BlockResult {
  Tensor<S> z;
  std::vector<Tensor<S>> attention;  // one (rows x rows) matrix per head
};

/// Pre-norm block:
///   zbar = z + Proj(MSA(LN1(z)))
///   out  = zbar + FFN(LN2(zbar))
template <std::floating_point S>
BlockResult<S> vit_block(const Tensor<S>& z, const VitBlockWeights<S>& w) {
  if (z.rank() != 2 || z.cols() != w.d_v()) {
    throw DimensionError("vit_block: input " + shape_string(z.shape()) + " but block expects d_v=" +
                         std::to_string(w.d_v()));
  }
  const std::size_t hd = w.head_dim();
  const S inv_sqrt = static_cast<S>(1.0 / std::sqrt(static_cast<double>(hd)));
  BlockResult<S> out;
  auto h = layernorm(z, w.ln1_gain, w.ln1_shift);
  auto q = matmul(h, w.wq);
  auto k = w.wk.same_node(w.wq) ? q : matmul(h, w.wk);
  auto v = matmul(h, w.wv);
  std::vector<Tensor<S>> heads;
  for (std::size_t hh = 0; hh < w.heads; ++hh) {
    auto qh = slice_cols(q, hh * hd, hd);
    auto kh = slice_cols(k, hh * hd, hd);
    auto vh = slice_cols(v, hh * hd, hd);
    auto a = softmax_rows(scale(matmul_nt(qh, kh), inv_sqrt));
    out.attention.push_back(a);
    heads.push_back(matmul(a, vh));
  }
  auto zbar = add(z, matmul(w.heads == 1 ? heads[0] : concat_cols(heads), w.wo));
  auto f = gelu(add_rowwise(matmul(layernorm(zbar, w.ln2_gain, w.ln2_shift), w.w1), w.b1));
  out.z = add(zbar, add_rowwise(matmul(f, w.w2), w.b2));
  return out;
}

/// Flattened 8x8 (patch_side^2) patches in row-major patch order.
template <std::floating_point S>
Tensor<S> extract_patches(const std::vector<float>& image, std::size_t side, std::size_t patch_side) {
  if (patch_side == 0 || side % patch_side != 0) {
    throw DimensionError("patchify: side " + std::to_string(side) + " not divisible by patch " +
                         std::to_string(patch_side));
  }
  if (image.size() != side * side) {
    throw DimensionError("patchify: expected " + std::to_string(side * side) + " pixels, got " +
                         std::to_string(image.size()));
  }
  const std::size_t g = side / patch_side, pp = patch_side * patch_side;
  std::vector<S> out(g * g * pp);
  for (std::size_t pr = 0; pr < g; ++pr)
    for (std::size_t pc = 0; pc < g; ++pc)
      for (std::size_t y = 0; y < patch_side; ++y)
        for (std::size_t x = 0; x < patch_side; ++x)
          out[(pr * g + pc) * pp + y * patch_side + x] =
              static_cast<S>(image[(pr * patch_side + y) * side + pc * patch_side + x]);
  return Tensor<S>::matrix(g * g, pp, std::move(out));
}

template <std::floating_point S>
TokenGrid<S> patchify(const std::vector<float>& image, std::size_t side, std::size_t patch_side,
                      const Tensor<S>& embed) {
  auto patches = extract_patches<S>(image, side, patch_side);
  if (embed.rank() != 2 || embed.rows() != patches.cols()) {
    throw DimensionError("patchify: embed " + shape_string(embed.shape()) + " needs " +
                         std::to_string(patches.cols()) + " rows");
  }
  return {matmul(patches, embed), patches.rows(), 0};
}

template <std::floating_point S>
struct EncoderWeights {
  Tensor<S> patch_embed;                 // patch_pixels x d_v
  std::optional<Tensor<S>> pos_embed;    // T_v x d_v
  std::vector<VitBlockWeights<S>> blocks;

  template <class F>
  void visit(F&& f) {
    f(std::string("encoder.patch_embed"), patch_embed);
    if (pos_embed) f(std::string("encoder.pos_embed"), *pos_embed);
    for (std::size_t l = 0; l < blocks.size(); ++l) blocks[l].visit("encoder.block" + std::to_string(l + 1), f);
  }
};

/// Random frozen toy encoder. Not pretrained; weights are N(0, init/fan_in).
template <std::floating_point S>
EncoderWeights<S> init_encoder(const EncoderConfig& cfg, Rng& rng) {
  cfg.validate();
  const double a = cfg.init_scale;
  const std::size_t dv = cfg.d_v;
  EncoderWeights<S> e;
  e.patch_embed = Tensor<S>({cfg.patch_pixels(), dv});
  fill_normal(e.patch_embed, rng, a / std::sqrt(static_cast<double>(cfg.patch_pixels())));
  if (cfg.positional_embedding) {
    e.pos_embed = Tensor<S>({cfg.tokens(), dv});
    fill_normal(*e.pos_embed, rng, 1.0);
  }
  const double sd = a / std::sqrt(static_cast<double>(dv));
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    auto b = VitBlockWeights<S>::zeros(dv, cfg.heads, cfg.ffn_mult);
    fill_normal(b.wq, rng, sd * cfg.qk_scale);
    if (cfg.tied_qk) {
      b.wk = b.wq;
    } else {
      fill_normal(b.wk, rng, sd * cfg.qk_scale);
    }
    fill_normal(b.wv, rng, sd);
    fill_normal(b.wo, rng, sd);
    fill_normal(b.w1, rng, sd);
    fill_normal(b.w2, rng, a / std::sqrt(static_cast<double>(dv * cfg.ffn_mult)));
    e.blocks.push_back(std::move(b));
  }
  return e;
}

template <std::floating_point S>
TokenGrid<S> embed_image(const Tensor<S>& patches, const EncoderWeights<S>& e) {
  auto tokens = matmul(patches, e.patch_embed);
  if (e.pos_embed) tokens = add(tokens, *e.pos_embed);
  return {tokens, patches.rows(), 0};
}

// ---- query encoder surrogate ----

template <std::floating_point S>
struct QueryEmbedding {
  std::optional<Tensor<S>> full_tokens;  // d_t x T_t, last column is the [EoS] summary
  Tensor<S> eos;                         // d_t
  std::size_t eos_index = 0;
};

/// Mean of the looked-up rows. full_tokens carries the per-id columns followed
/// by the [EoS] column (= eos), so eos_index = ids.size().
template <std::floating_point S>
QueryEmbedding<S> encode_query(const std::vector<std::uint16_t>& ids, const Tensor<S>& table) {
  if (ids.empty()) throw VocabularyError("encode_query: empty id list");
  const std::size_t vocab = table.rows(), dt = table.cols();
  std::vector<double> acc(dt, 0.0);
  for (auto id : ids) {
    if (id >= vocab) {
      throw VocabularyError("encode_query: id " + std::to_string(id) + " outside vocabulary of " +
                            std::to_string(vocab));
    }
    for (std::size_t j = 0; j < dt; ++j) acc[j] += table(id, j);
  }
  std::vector<S> eos(dt);
  for (std::size_t j = 0; j < dt; ++j) eos[j] = static_cast<S>(acc[j] / static_cast<double>(ids.size()));
  const std::size_t tt = ids.size() + 1;
  std::vector<S> full(dt * tt);
  for (std::size_t t = 0; t < ids.size(); ++t)
    for (std::size_t j = 0; j < dt; ++j) full[j * tt + t] = table(ids[t], j);
  for (std::size_t j = 0; j < dt; ++j) full[j * tt + ids.size()] = eos[j];
  QueryEmbedding<S> q;
  q.eos = Tensor<S>({dt}, std::move(eos));
  q.full_tokens = Tensor<S>({dt, tt}, std::move(full));
  q.eos_index = ids.size();
  return q;
}

template <std::floating_point S>
Tensor<S> init_query_table(const EncoderConfig& cfg, Rng& rng) {
  Tensor<S> t({cfg.vocab, cfg.d_t});
  fill_normal(t, rng, 1.0);
  return t;
}

/// Reads a QIDW file holding a single rank-1 entry "q_eos".
template <std::floating_point S>
QueryEmbedding<S> load_external_query_embedding(const std::filesystem::path& path,
                                                std::optional<std::size_t> expected_d_t = std::nullopt) {
  auto ckpt = Checkpoint::load(path);
  if (ckpt.entries().size() != 1 || ckpt.entries()[0].name != "q_eos") {
    throw FormatError(path.string() + ": expected exactly one entry named q_eos");
  }
  const auto& e = ckpt.entries()[0];
  if (e.dims.size() != 1) throw FormatError(path.string() + ": q_eos must be rank 1, got rank " + std::to_string(e.dims.size()));
  if (expected_d_t && e.dims[0] != *expected_d_t) {
    throw ConfigError("q_eos has d_t=" + std::to_string(e.dims[0]) + ", model expects " + std::to_string(*expected_d_t));
  }
  QueryEmbedding<S> q;
  q.eos = e.to_tensor<S>();
  return q;
}

}  // namespace qid
