#pragma once

// QIDW weight container, little-endian:
//   "QIDW" | version u32 | entry count u32
//   per entry: name length u16 | UTF-8 name | rank u8 | dims u32 x rank | float32 payload

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <fstream>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "qid/numerics/tensor.hpp"

namespace qid {

inline constexpr char kCheckpointMagic[4] = {'Q', 'I', 'D', 'W'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointEntry {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<float> values;

  template <std::floating_point S>
  static CheckpointEntry from_tensor(std::string name, const Tensor<S>& t) {
    CheckpointEntry e;
    e.name = std::move(name);
    for (std::size_t d : t.shape()) e.dims.push_back(static_cast<std::uint32_t>(d));
    e.values.assign(t.data().begin(), t.data().end());
    return e;
  }

  template <std::floating_point S>
  Tensor<S> to_tensor() const {
    Shape shape(dims.begin(), dims.end());
    return Tensor<S>(std::move(shape), std::vector<S>(values.begin(), values.end()));
  }

  /// Bytes this entry occupies in the container, header included.
  std::size_t encoded_size() const { return 2 + name.size() + 1 + 4 * dims.size() + 4 * values.size(); }
};

class Checkpoint {
 public:
  std::vector<CheckpointEntry>& entries() { return entries_; }
  const std::vector<CheckpointEntry>& entries() const { return entries_; }

  const CheckpointEntry* find(std::string_view name) const {
    auto it = std::find_if(entries_.begin(), entries_.end(), [&](const auto& e) { return e.name == name; });
    return it == entries_.end() ? nullptr : &*it;
  }

  const CheckpointEntry& at(std::string_view name) const {
    const auto* e = find(name);
    if (!e) throw FormatError("checkpoint has no entry named '" + std::string(name) + "'");
    return *e;
  }

  bool contains(std::string_view name) const { return find(name) != nullptr; }

  void put(CheckpointEntry entry) {
    auto it = std::find_if(entries_.begin(), entries_.end(), [&](const auto& e) { return e.name == entry.name; });
    if (it != entries_.end()) {
      *it = std::move(entry);
    } else {
      entries_.push_back(std::move(entry));
    }
  }

  template <std::floating_point S>
  void put(std::string name, const Tensor<S>& t) {
    put(CheckpointEntry::from_tensor(std::move(name), t));
  }

  void put_scalar(std::string name, double value) {
    put(CheckpointEntry{std::move(name), {1}, {static_cast<float>(value)}});
  }

  std::vector<std::uint8_t> encode() const;
  static Checkpoint decode(std::span<const std::uint8_t> bytes);

  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);

 private:
  std::vector<CheckpointEntry> entries_;
};

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u16(std::uint16_t v) {
    for (int i = 0; i < 2; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void raw(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    bytes_.insert(bytes_.end(), p, p + n);
  }
  std::vector<std::uint8_t> take() { return std::move(bytes_); }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  ByteReader(std::span<const std::uint8_t> bytes, const char* what) : bytes_(bytes), what_(what) {}

  std::uint8_t u8() { return take(1)[0]; }
  std::uint16_t u16() {
    auto b = take(2);
    return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
  }
  std::uint32_t u32() {
    auto b = take(4);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::span<const std::uint8_t> take(std::size_t n) {
    if (pos_ + n > bytes_.size()) {
      throw FormatError(std::string(what_) + ": truncated at byte " + std::to_string(pos_));
    }
    auto out = bytes_.subspan(pos_, n);
    pos_ += n;
    return out;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::span<const std::uint8_t> bytes_;
  const char* what_;
  std::size_t pos_ = 0;
};

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return bytes;
}

inline void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace detail

inline std::vector<std::uint8_t> Checkpoint::encode() const {
  detail::ByteWriter w;
  w.raw(kCheckpointMagic, 4);
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(entries_.size()));
  for (const auto& e : entries_) {
    if (e.name.size() > 0xFFFF) throw FormatError("entry name too long: " + e.name.substr(0, 32) + "...");
    if (e.dims.size() > 0xFF) throw FormatError("entry rank too large: " + e.name);
    std::size_t count = 1;
    for (auto d : e.dims) count *= d;
    if (count != e.values.size()) throw FormatError("entry '" + e.name + "' dims do not match payload");
    w.u16(static_cast<std::uint16_t>(e.name.size()));
    w.raw(e.name.data(), e.name.size());
    w.u8(static_cast<std::uint8_t>(e.dims.size()));
    for (auto d : e.dims) w.u32(d);
    for (float v : e.values) w.f32(v);
  }
  return w.take();
}

inline Checkpoint Checkpoint::decode(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes, "QIDW");
  auto magic = r.take(4);
  if (std::memcmp(magic.data(), kCheckpointMagic, 4) != 0) throw FormatError("QIDW: bad magic");
  const auto version = r.u32();
  if (version != kCheckpointVersion) throw FormatError("QIDW: unsupported version " + std::to_string(version));
  const auto count = r.u32();
  Checkpoint ckpt;
  for (std::uint32_t k = 0; k < count; ++k) {
    CheckpointEntry e;
    const auto name_len = r.u16();
    auto name = r.take(name_len);
    e.name.assign(name.begin(), name.end());
    const auto rank = r.u8();
    std::size_t numel = 1;
    for (std::uint8_t d = 0; d < rank; ++d) {
      e.dims.push_back(r.u32());
      numel *= e.dims.back();
    }
    if (numel * 4 > bytes.size()) throw FormatError("QIDW: entry '" + e.name + "' larger than file");
    e.values.resize(numel);
    for (auto& v : e.values) v = r.f32();
    ckpt.entries_.push_back(std::move(e));
  }
  if (!r.done()) throw FormatError("QIDW: trailing bytes after last entry");
  return ckpt;
}

inline void Checkpoint::save(const std::filesystem::path& path) const { detail::write_file(path, encode()); }

inline Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  const auto bytes = detail::read_file(path);
  return decode(bytes);
}

}  // namespace qid
