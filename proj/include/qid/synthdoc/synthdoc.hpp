#pragma once

// Synthetic "documents": a G x G grid of 8x8 glyph cells; the query names one
// cell and the answer is the glyph class drawn there.

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "qid/numerics/checkpoint.hpp"
#include "qid/numerics/errors.hpp"
#include "qid/numerics/rng.hpp"

namespace qid {

inline constexpr std::size_t kImageSide = 32;
inline constexpr std::size_t kCellSide = 8;
inline constexpr std::size_t kGlyphPixels = kCellSide * kCellSide;
inline constexpr std::size_t kMinGlyphDistance = 16;
inline constexpr char kDatasetMagic[4] = {'Q', 'I', 'D', 'D'};
inline constexpr std::uint32_t kDatasetVersion = 1;

struct SynthSample {
  std::vector<float> image;               // kImageSide^2, row-major, in [0, 1]
  std::vector<std::uint16_t> query_ids;
  std::uint16_t answer = 0;
  std::vector<std::uint8_t> cell_contents;  // G*G, empty after read_dataset
};

using Glyph = std::array<std::uint8_t, kGlyphPixels>;

inline std::size_t hamming(const Glyph& a, const Glyph& b) {
  std::size_t d = 0;
  for (std::size_t i = 0; i < kGlyphPixels; ++i) d += a[i] != b[i];
  return d;
}

/// K random binary 8x8 bitmaps, pairwise Hamming distance >= 16.
inline constexpr std::size_t kMaxClasses = 256;  // cell_contents is u8

inline std::vector<Glyph> make_glyphs(std::size_t k, std::uint64_t seed) {
  if (k > kMaxClasses) throw ConfigError("at most 256 glyph classes, asked for " + std::to_string(k));
  auto rng = Rng::derive(seed, "synthdoc.glyphs");
  std::vector<Glyph> out;
  for (std::size_t attempts = 0; out.size() < k; ++attempts) {
    if (attempts > 200000) throw ConfigError("cannot place " + std::to_string(k) + " glyphs at distance 16");
    Glyph g;
    for (auto& b : g) b = static_cast<std::uint8_t>(rng.below(2));
    bool ok = true;
    for (const auto& o : out) ok = ok && hamming(g, o) >= kMinGlyphDistance;
    if (ok) out.push_back(g);
  }
  return out;
}

inline std::vector<std::uint16_t> encode_query_cell(std::size_t r, std::size_t c, std::size_t g) {
  if (r >= g || c >= g) {
    throw ContractError("encode_query_cell: (" + std::to_string(r) + "," + std::to_string(c) + ") outside " +
                        std::to_string(g) + "x" + std::to_string(g));
  }
  return {static_cast<std::uint16_t>(r), static_cast<std::uint16_t>(g + c)};
}

/// Inverse of encode_query_cell: the patch index r*G + c.
inline std::size_t query_patch_index(const std::vector<std::uint16_t>& ids, std::size_t g) {
  if (ids.size() != 2 || ids[0] >= g || ids[1] < g || ids[1] >= 2 * g) {
    throw ContractError("query ids do not encode a cell of a " + std::to_string(g) + "-grid");
  }
  return ids[0] * g + (ids[1] - g);
}

enum class CellFill { balanced, iid };

struct SynthConfig {
  std::size_t grid = 4;
  std::size_t classes = 8;
  double noise = 0.1;
  CellFill fill = CellFill::balanced;
};

/// Sample i draws from its own stream (seed, index_offset + i), so any slice
/// of a dataset can be regenerated alone.
inline std::vector<SynthSample> generate_dataset(std::size_t n, const SynthConfig& cfg, std::uint64_t seed,
                                                 std::uint64_t index_offset = 0) {
  const std::size_t g = cfg.grid, k = cfg.classes;
  if (g * kCellSide != kImageSide) {
    throw ConfigError("grid " + std::to_string(g) + " of 8x8 cells does not tile a 32x32 image");
  }
  if (k < 2) throw ConfigError("need at least 2 answer classes");
  if (cfg.noise < 0 || cfg.noise > 1) throw ConfigError("noise amplitude must be in [0, 1]");
  const auto glyphs = make_glyphs(k, seed);
  std::vector<SynthSample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto rng = Rng::derive(seed, "synthdoc.sample", index_offset + i);
    SynthSample s;
    s.cell_contents.resize(g * g);
    if (cfg.fill == CellFill::balanced) {
      for (std::size_t c = 0; c < g * g; ++c) s.cell_contents[c] = static_cast<std::uint8_t>(c % k);
      rng.shuffle(s.cell_contents);
    } else {
      for (auto& c : s.cell_contents) c = static_cast<std::uint8_t>(rng.below(k));
    }
    const std::size_t cell = rng.below(g * g);
    s.query_ids = encode_query_cell(cell / g, cell % g, g);
    s.answer = s.cell_contents[cell];
    // ink at 1 - noise so ink + noise stays inside [0, 1]
    s.image.resize(kImageSide * kImageSide);
    for (std::size_t y = 0; y < kImageSide; ++y) {
      for (std::size_t x = 0; x < kImageSide; ++x) {
        const auto& glyph = glyphs[s.cell_contents[(y / kCellSide) * g + x / kCellSide]];
        const double ink = glyph[(y % kCellSide) * kCellSide + x % kCellSide] * (1.0 - cfg.noise);
        s.image[y * kImageSide + x] = static_cast<float>(ink + cfg.noise * rng.uniform());
      }
    }
    out.push_back(std::move(s));
  }
  return out;
}

inline std::vector<std::uint8_t> encode_dataset(const std::vector<SynthSample>& samples) {
  detail::ByteWriter w;
  w.raw(kDatasetMagic, 4);
  w.u32(kDatasetVersion);
  w.u32(static_cast<std::uint32_t>(samples.size()));
  for (const auto& s : samples) {
    if (s.image.size() != kImageSide * kImageSide) throw FormatError("QIDD: sample image is not 32x32");
    for (float v : s.image) w.f32(v);
    w.u16(static_cast<std::uint16_t>(s.query_ids.size()));
    for (auto id : s.query_ids) w.u16(id);
    w.u16(s.answer);
  }
  return w.take();
}

inline std::vector<SynthSample> decode_dataset(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes, "QIDD");
  if (std::memcmp(r.take(4).data(), kDatasetMagic, 4) != 0) throw FormatError("QIDD: bad magic");
  const auto version = r.u32();
  if (version != kDatasetVersion) throw FormatError("QIDD: unsupported version " + std::to_string(version));
  const auto count = r.u32();
  std::vector<SynthSample> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    SynthSample s;
    s.image.resize(kImageSide * kImageSide);
    for (auto& v : s.image) v = r.f32();
    s.query_ids.resize(r.u16());
    for (auto& id : s.query_ids) id = r.u16();
    s.answer = r.u16();
    out.push_back(std::move(s));
  }
  if (!r.done()) throw FormatError("QIDD: trailing bytes after last sample");
  return out;
}

inline void write_dataset(const std::vector<SynthSample>& samples, const std::filesystem::path& path) {
  detail::write_file(path, encode_dataset(samples));
}

inline std::vector<SynthSample> read_dataset(const std::filesystem::path& path) {
  return decode_dataset(detail::read_file(path));
}

}  // namespace qid
