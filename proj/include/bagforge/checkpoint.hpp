#pragma once

// Checkpoint files share the bag-file conventions (little-endian, u32
// length prefixes):
//
//   "MILC" | version u32 | epoch u32 | config hash u64 |
//   model config JSON (u32 length + bytes) | tensor count u32 |
//   per tensor: name (u32 length + bytes), rows u32, cols u32, float32 data

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "bagforge/aggregators.hpp"
#include "bagforge/bag_io.hpp"
#include "bagforge/error.hpp"
#include "bagforge/model.hpp"

namespace bagforge {

inline nlohmann::ordered_json to_json(const ModelConfig& c) {
  nlohmann::ordered_json j;
  j["aggregator"] = std::string(to_string(c.aggregator));
  j["d"] = c.input_dim;
  j["K"] = c.num_classes;
  j["attention_hidden"] = c.attention_hidden;
  j["d_model"] = c.d_model;
  j["layers"] = c.layers;
  j["heads"] = c.heads;
  return j;
}

inline ModelConfig model_config_from_json(const nlohmann::ordered_json& j) {
  ModelConfig c;
  c.aggregator = parse_aggregator(j.at("aggregator").get<std::string>());
  c.input_dim = j.at("d").get<std::size_t>();
  c.num_classes = j.at("K").get<std::size_t>();
  c.attention_hidden = j.at("attention_hidden").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.layers = j.at("layers").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  return c;
}

inline constexpr std::string_view kCheckpointMagic = "MILC";
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelParams params;
  std::uint32_t epoch = 0;
  std::uint64_t config_hash = 0;
};

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  ByteWriter w;
  w.put_bytes(kCheckpointMagic);
  w.put_u32(kCheckpointVersion);
  w.put_u32(ckpt.epoch);
  w.put_u64(ckpt.config_hash);
  w.put_string(to_json(ckpt.params.config).dump());
  const auto named = ckpt.params.named();
  w.put_u32(static_cast<std::uint32_t>(named.size()));
  for (const auto& [name, t] : named) {
    w.put_string(name);
    w.put_u32(static_cast<std::uint32_t>(t.rows()));
    w.put_u32(static_cast<std::uint32_t>(t.cols()));
    for (const float v : t.data()) w.put_f32(v);
  }
  return w.bytes();
}

/// Rebuilds the architecture from the embedded config, then fills every
/// tensor; names, order and shapes must match exactly.
inline Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  r.expect_magic(kCheckpointMagic);
  const auto version_at = r.offset();
  if (const auto v = r.get_u32("version"); v != kCheckpointVersion) {
    throw FormatError(version_at, "unsupported checkpoint version " + std::to_string(v));
  }
  Checkpoint ckpt;
  ckpt.epoch = r.get_u32("epoch");
  ckpt.config_hash = r.get_u64("config hash");
  const auto config_at = r.offset();
  const auto config_text = r.get_string("model config");
  ModelConfig config;
  try {
    config = model_config_from_json(nlohmann::ordered_json::parse(config_text));
    config.validate();
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError(config_at, std::string("model config: ") + ex.what());
  } catch (const ConfigError& ex) {
    throw FormatError(config_at, std::string("model config: ") + ex.what());
  }
  ckpt.params = init_model<float>(config, 0);
  const auto named = ckpt.params.named();
  const auto count_at = r.offset();
  const auto count = r.get_u32("tensor count");
  if (count != named.size()) {
    throw FormatError(count_at, "checkpoint holds " + std::to_string(count) +
                                    " tensors, architecture needs " +
                                    std::to_string(named.size()));
  }
  for (const auto& [name, t] : named) {
    const auto name_at = r.offset();
    const auto stored = r.get_string("tensor name");
    if (stored != name) {
      throw FormatError(name_at, "expected tensor '" + name + "', found '" + stored + "'");
    }
    const auto shape_at = r.offset();
    const auto rows = r.get_u32("rows");
    const auto cols = r.get_u32("cols");
    if (rows != t.rows() || cols != t.cols()) {
      throw FormatError(shape_at, "tensor '" + name + "' has shape " +
                                      Shape{rows, cols}.str() + ", expected " + t.shape().str());
    }
    r.need(4 * t.size(), "tensor '" + name + "' payload");
    for (auto& v : t.mutable_data()) v = r.get_f32("payload");
  }
  r.expect_end();
  return ckpt;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  write_file_atomic(path, encode_checkpoint(ckpt));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file(path));
}

}  // namespace bagforge
