#pragma once

// Bag files: fixed little-endian header followed by N*d float32 values.
//
//   0  magic "MILB"        4  version u32 (1)     8  d u32
//   12 N u32               16 K u32               20 label u32
//   24 core_id length u32  28 core_id bytes (UTF-8), then the payload.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "bagforge/bag.hpp"
#include "bagforge/error.hpp"

namespace bagforge {

class ByteWriter {
 public:
  void put_u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void put_u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void put_f32(float v) { put_u32(std::bit_cast<std::uint32_t>(v)); }
  void put_bytes(std::string_view s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }
  void put_string(std::string_view s) {
    put_u32(static_cast<std::uint32_t>(s.size()));
    put_bytes(s);
  }

  const std::vector<std::uint8_t>& bytes() const { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

/// Sequential decoder; every failure reports the offset it happened at.
class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

  void need(std::size_t n, std::string_view what) const {
    if (remaining() < n) {
      throw FormatError(pos_, "truncated " + std::string(what) + ": expected " +
                                  std::to_string(n) + " bytes, found " +
                                  std::to_string(remaining()));
    }
  }

  std::uint32_t get_u32(std::string_view what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t get_u64(std::string_view what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }
  float get_f32(std::string_view what) { return std::bit_cast<float>(get_u32(what)); }
  std::string get_bytes(std::size_t n, std::string_view what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::string get_string(std::string_view what) {
    const auto n = get_u32(what);
    return get_bytes(n, what);
  }

  void expect_magic(std::string_view magic) {
    const auto at = pos_;
    const auto found = get_bytes(magic.size(), "magic");
    if (found != magic) {
      throw FormatError(at, "bad magic '" + found + "', expected '" + std::string(magic) + "'");
    }
  }

  void expect_end() const {
    if (remaining() != 0) {
      throw FormatError(pos_, std::to_string(remaining()) + " trailing bytes");
    }
  }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Writes via a sibling temp file and rename, so readers never see a
/// partially written file.
inline void write_file_atomic(const std::filesystem::path& path,
                              std::span<const std::uint8_t> bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + tmp.string() + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write to '" + tmp.string() + "' failed");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move '" + tmp.string() + "' to '" + path.string() + "': " + ec.message());
}

inline void write_file_atomic(const std::filesystem::path& path, std::string_view text) {
  write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()),
                                    text.size()));
}

inline constexpr std::string_view kBagMagic = "MILB";
inline constexpr std::uint32_t kBagVersion = 1;

struct BagHeader {
  std::uint32_t version = kBagVersion;
  std::uint32_t dim = 0;
  std::uint32_t count = 0;
  std::uint32_t num_classes = 0;
  std::uint32_t label = 0;
  std::string core_id;
  std::size_t payload_offset = 0;
};

inline std::vector<std::uint8_t> encode_bag(const Bag& bag, std::uint32_t num_classes) {
  validate_bag(bag, num_classes);
  ByteWriter w;
  w.put_bytes(kBagMagic);
  w.put_u32(kBagVersion);
  w.put_u32(static_cast<std::uint32_t>(bag.dim()));
  w.put_u32(static_cast<std::uint32_t>(bag.size()));
  w.put_u32(num_classes);
  w.put_u32(bag.label);
  w.put_string(bag.core_id);
  for (const float v : bag.instances.data()) w.put_f32(v);
  return w.bytes();
}

inline BagHeader decode_bag_header(ByteReader& r) {
  BagHeader h;
  r.expect_magic(kBagMagic);
  const auto version_at = r.offset();
  h.version = r.get_u32("version");
  if (h.version != kBagVersion) {
    throw FormatError(version_at, "unsupported bag version " + std::to_string(h.version));
  }
  h.dim = r.get_u32("d");
  h.count = r.get_u32("N");
  h.num_classes = r.get_u32("K");
  const auto label_at = r.offset();
  h.label = r.get_u32("label");
  if (h.label >= h.num_classes) {
    throw FormatError(label_at, "label " + std::to_string(h.label) + " not below K=" +
                                    std::to_string(h.num_classes));
  }
  h.core_id = r.get_string("core_id");
  h.payload_offset = r.offset();
  return h;
}

struct BagFile {
  BagHeader header;
  Bag bag;
};

inline BagFile decode_bag(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  BagFile out;
  out.header = decode_bag_header(r);
  const std::size_t values = static_cast<std::size_t>(out.header.count) * out.header.dim;
  if (values == 0) throw FormatError(r.offset(), "bag has no instances");
  const std::size_t expected = 4 * values;
  if (r.remaining() != expected) {
    throw FormatError(r.offset(), "payload length mismatch: expected " +
                                      std::to_string(expected) + " bytes (4*N*d), found " +
                                      std::to_string(r.remaining()));
  }
  std::vector<float> data(values);
  for (auto& v : data) v = r.get_f32("payload");
  out.bag.core_id = out.header.core_id;
  out.bag.label = out.header.label;
  out.bag.instances = Tensor::from(out.header.count, out.header.dim, std::move(data));
  return out;
}

inline void write_bag(const std::filesystem::path& path, const Bag& bag,
                      std::uint32_t num_classes) {
  write_file_atomic(path, encode_bag(bag, num_classes));
}

inline BagFile read_bag_file(const std::filesystem::path& path) {
  return decode_bag(read_file(path));
}

inline Bag read_bag(const std::filesystem::path& path) { return read_bag_file(path).bag; }

/// Header only; still checks that the payload length matches.
inline BagHeader read_bag_header(const std::filesystem::path& path) {
  return read_bag_file(path).header;
}

}  // namespace bagforge
