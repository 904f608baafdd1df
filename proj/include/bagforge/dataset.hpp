#pragma once

// Dataset manifest, stratified splitting and synthetic data generation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "bagforge/bag.hpp"
#include "bagforge/bag_io.hpp"
#include "bagforge/error.hpp"
#include "bagforge/random.hpp"

namespace bagforge {

enum class Split { train, val, test, unassigned };

inline std::string_view to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
    case Split::unassigned: return "unassigned";
  }
  return "?";
}

inline Split parse_split(std::string_view name) {
  for (auto s : {Split::train, Split::val, Split::test, Split::unassigned}) {
    if (name == to_string(s)) return s;
  }
  throw ConfigError("unknown split '" + std::string(name) + "'");
}

struct ManifestEntry {
  std::string core_id;
  std::string path;  // relative to the manifest's directory
  std::uint32_t label = 0;
  Split split = Split::unassigned;
  std::string tma_id;

  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

struct Manifest {
  std::string dataset_id;
  std::uint32_t dim = 0;
  std::uint32_t num_classes = 0;
  std::vector<std::string> class_names;
  std::vector<ManifestEntry> entries;

  /// Directory the entry paths are relative to; not serialised.
  std::filesystem::path root;

  friend bool operator==(const Manifest& a, const Manifest& b) {
    return a.dataset_id == b.dataset_id && a.dim == b.dim &&
           a.num_classes == b.num_classes && a.class_names == b.class_names &&
           a.entries == b.entries;
  }

  std::filesystem::path resolve(const ManifestEntry& e) const { return root / e.path; }

  /// Per-class counts, optionally restricted to one split.
  std::vector<std::size_t> class_counts(std::optional<Split> split = std::nullopt) const {
    std::vector<std::size_t> counts(num_classes, 0);
    for (const auto& e : entries) {
      if (!split || e.split == *split) ++counts.at(e.label);
    }
    return counts;
  }

  std::vector<const ManifestEntry*> select(Split split) const {
    std::vector<const ManifestEntry*> out;
    for (const auto& e : entries)
      if (e.split == split) out.push_back(&e);
    return out;
  }
};

inline void validate_manifest(const Manifest& m, bool check_paths) {
  if (m.num_classes < 2) throw DomainError("manifest: K must be at least 2");
  if (m.class_names.size() != m.num_classes) {
    throw DomainError("manifest: " + std::to_string(m.class_names.size()) +
                      " class names for K=" + std::to_string(m.num_classes));
  }
  std::set<std::string> seen;
  for (const auto& e : m.entries) {
    if (!seen.insert(e.core_id).second) {
      throw DomainError("manifest: duplicate core id '" + e.core_id + "'");
    }
    if (e.label >= m.num_classes) {
      throw DomainError("manifest: core '" + e.core_id + "' label " +
                        std::to_string(e.label) + " not below K");
    }
    if (check_paths && !std::filesystem::exists(m.resolve(e))) {
      throw IoError("manifest: bag file for '" + e.core_id + "' not found at " +
                    m.resolve(e).string());
    }
  }
}

inline nlohmann::ordered_json to_json(const Manifest& m) {
  nlohmann::ordered_json j;
  j["dataset_id"] = m.dataset_id;
  j["d"] = m.dim;
  j["K"] = m.num_classes;
  j["class_names"] = m.class_names;
  auto entries = nlohmann::ordered_json::array();
  for (const auto& e : m.entries) {
    nlohmann::ordered_json row;
    row["core_id"] = e.core_id;
    row["path"] = e.path;
    row["label"] = e.label;
    row["split"] = std::string(to_string(e.split));
    row["tma_id"] = e.tma_id;
    entries.push_back(std::move(row));
  }
  j["entries"] = std::move(entries);
  return j;
}

inline Manifest manifest_from_json(const nlohmann::ordered_json& j) {
  try {
    Manifest m;
    m.dataset_id = j.at("dataset_id").get<std::string>();
    m.dim = j.at("d").get<std::uint32_t>();
    m.num_classes = j.at("K").get<std::uint32_t>();
    m.class_names = j.at("class_names").get<std::vector<std::string>>();
    for (const auto& row : j.at("entries")) {
      ManifestEntry e;
      e.core_id = row.at("core_id").get<std::string>();
      e.path = row.at("path").get<std::string>();
      e.label = row.at("label").get<std::uint32_t>();
      e.split = parse_split(row.at("split").get<std::string>());
      e.tma_id = row.at("tma_id").get<std::string>();
      m.entries.push_back(std::move(e));
    }
    return m;
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError(0, std::string("manifest schema: ") + ex.what());
  }
}

inline Manifest load_manifest(const std::filesystem::path& path, bool check_paths = true) {
  const auto bytes = read_file(path);
  nlohmann::ordered_json j;
  try {
    j = nlohmann::ordered_json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::parse_error& ex) {
    throw FormatError(ex.byte, std::string("manifest JSON: ") + ex.what());
  }
  auto m = manifest_from_json(j);
  m.root = path.parent_path();
  validate_manifest(m, check_paths);
  return m;
}

inline void save_manifest(const std::filesystem::path& path, const Manifest& m) {
  validate_manifest(m, false);
  write_file_atomic(path, to_json(m).dump(2) + "\n");
}

/// Loads every bag of one split in manifest order, checking the headers
/// against the manifest.
inline std::vector<Bag> load_bags(const Manifest& m, std::optional<Split> split) {
  std::vector<Bag> bags;
  for (const auto& e : m.entries) {
    if (split && e.split != *split) continue;
    auto file = read_bag_file(m.resolve(e));
    if (file.header.dim != m.dim || file.header.num_classes != m.num_classes ||
        file.header.label != e.label || file.header.core_id != e.core_id) {
      throw FormatError(0, "bag file " + m.resolve(e).string() +
                               " disagrees with its manifest entry '" + e.core_id + "'");
    }
    bags.push_back(std::move(file.bag));
  }
  return bags;
}

// ---------------------------------------------------------------------------
// Splitting

enum class Grouping { core, tma };

struct SplitSpec {
  double train = 0.60;
  double val = 0.15;
  double test = 0.25;
  std::uint64_t seed = 0;
  Grouping grouping = Grouping::core;
  /// Allows zero fractions and classes with fewer than three units.
  bool force = false;

  void validate() const {
    for (double f : {train, val, test}) {
      if (f < 0.0 || (!force && f <= 0.0)) {
        throw ConfigError("split fractions must be positive (use force for degenerate splits)");
      }
    }
    if (std::abs(train + val + test - 1.0) > 1e-9) {
      throw ConfigError("split fractions must sum to 1");
    }
  }
};

struct SplitSizes {
  std::size_t train = 0, val = 0, test = 0;
};

/// Floor for train and val, remainder to test.
inline SplitSizes split_sizes(std::size_t n, const SplitSpec& spec) {
  const auto floor_of = [n](double f) {
    return static_cast<std::size_t>(std::floor(f * static_cast<double>(n) + 1e-9));
  };
  SplitSizes s;
  s.train = std::min(n, floor_of(spec.train));
  s.val = std::min(n - s.train, floor_of(spec.val));
  s.test = n - s.train - s.val;
  return s;
}

/// Per class, shuffles the units (cores, or TMA groups) with a seeded
/// stream and assigns the first floor(f_train*n) to train, the next
/// floor(f_val*n) to val and the rest to test.
inline Manifest stratified_split(Manifest m, const SplitSpec& spec) {
  spec.validate();
  for (std::uint32_t c = 0; c < m.num_classes; ++c) {
    // Units of this class in manifest order; each unit lists entry indices.
    std::vector<std::vector<std::size_t>> units;
    std::map<std::string, std::size_t> unit_of_tma;
    for (std::size_t i = 0; i < m.entries.size(); ++i) {
      const auto& e = m.entries[i];
      if (e.label != c) continue;
      if (spec.grouping == Grouping::core) {
        units.push_back({i});
      } else {
        auto [it, fresh] = unit_of_tma.emplace(e.tma_id, units.size());
        if (fresh) units.emplace_back();
        units[it->second].push_back(i);
      }
    }
    if (units.size() < 3 && !spec.force) {
      throw DomainError("class '" + m.class_names[c] + "' has " +
                        std::to_string(units.size()) +
                        (spec.grouping == Grouping::core ? " cores" : " TMAs") +
                        "; at least 3 are needed for a three-way split");
    }
    auto rng = SplitMix64::derive(spec.seed, "split/" + std::to_string(c));
    rng.shuffle(std::span(units));
    const auto sizes = split_sizes(units.size(), spec);
    for (std::size_t u = 0; u < units.size(); ++u) {
      const Split s = u < sizes.train              ? Split::train
                      : u < sizes.train + sizes.val ? Split::val
                                                    : Split::test;
      for (const auto i : units[u]) m.entries[i].split = s;
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Synthetic data

struct SynthConfig {
  std::uint32_t num_classes = 4;
  std::size_t total_bags = 200;
  std::size_t min_instances = 8;
  std::size_t max_instances = 24;
  std::size_t dim = 512;
  double separation = 6.0;
  std::uint64_t seed = 7;

  void validate() const {
    if (num_classes < 2) throw ConfigError("synth: need at least 2 classes");
    if (dim < 2) throw ConfigError("synth: d must be at least 2");
    if (dim < num_classes) throw ConfigError("synth: d must be at least K");
    if (separation < 0.0) throw ConfigError("synth: separation must be non-negative");
    if (min_instances < 1 || min_instances > max_instances) {
      throw ConfigError("synth: invalid instance range");
    }
    if (total_bags < num_classes) throw ConfigError("synth: fewer bags than classes");
  }
};

struct SynthDataset {
  Manifest manifest;
  std::vector<Bag> bags;  // parallel to manifest.entries
  double self_check_accuracy = 0.0;
};

/// Nearest-centroid accuracy of bag means, centroids fitted on the same bags.
inline double nearest_centroid_accuracy(const std::vector<Bag>& bags,
                                        std::uint32_t num_classes) {
  if (bags.empty()) return 0.0;
  const std::size_t d = bags.front().dim();
  std::vector<std::vector<double>> means;
  for (const auto& b : bags) {
    std::vector<double> mean(d, 0.0);
    for (std::size_t i = 0; i < b.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) mean[j] += b.instances.at(i, j);
    for (auto& v : mean) v /= static_cast<double>(b.size());
    means.push_back(std::move(mean));
  }
  std::vector<std::vector<double>> centroids(num_classes, std::vector<double>(d, 0.0));
  std::vector<std::size_t> counts(num_classes, 0);
  for (std::size_t i = 0; i < bags.size(); ++i) {
    ++counts[bags[i].label];
    for (std::size_t j = 0; j < d; ++j) centroids[bags[i].label][j] += means[i][j];
  }
  for (std::uint32_t c = 0; c < num_classes; ++c)
    for (auto& v : centroids[c]) v /= static_cast<double>(std::max<std::size_t>(counts[c], 1));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < bags.size(); ++i) {
    std::uint32_t best = 0;
    double best_dist = std::numeric_limits<double>::infinity();
    for (std::uint32_t c = 0; c < num_classes; ++c) {
      if (counts[c] == 0) continue;
      double dist = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double diff = means[i][j] - centroids[c][j];
        dist += diff * diff;
      }
      if (dist < best_dist) {
        best = c;
        best_dist = dist;
      }
    }
    if (best == bags[i].label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(bags.size());
}

/// Class k instances ~ N(separation * e_k, I). Bags are interleaved by class
/// (bag i has class i mod K). With separation >= 4 the nearest-centroid
/// self-check must reach 0.95 or generation fails.
inline SynthDataset synthesize_dataset(const SynthConfig& cfg) {
  cfg.validate();
  SynthDataset out;
  auto& m = out.manifest;
  m.dataset_id = "synthetic-k" + std::to_string(cfg.num_classes) + "-d" +
                 std::to_string(cfg.dim) + "-seed" + std::to_string(cfg.seed);
  m.dim = static_cast<std::uint32_t>(cfg.dim);
  m.num_classes = cfg.num_classes;
  for (std::uint32_t c = 0; c < cfg.num_classes; ++c) m.class_names.push_back("class" + std::to_string(c));

  auto rng = SplitMix64::derive(cfg.seed, "synth");
  std::vector<std::size_t> per_class(cfg.num_classes, 0);
  for (std::size_t i = 0; i < cfg.total_bags; ++i) {
    const auto label = static_cast<std::uint32_t>(i % cfg.num_classes);
    const std::size_t ordinal = per_class[label]++;
    const std::size_t n =
        cfg.min_instances + rng.below(cfg.max_instances - cfg.min_instances + 1);
    std::vector<float> values(n * cfg.dim);
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t j = 0; j < cfg.dim; ++j) {
        const double centre = j == label ? cfg.separation : 0.0;
        values[r * cfg.dim + j] = static_cast<float>(centre + rng.gaussian());
      }
    }
    char id[32];
    std::snprintf(id, sizeof id, "core_%04zu", i);
    ManifestEntry e;
    e.core_id = id;
    e.path = "bags/" + e.core_id + ".bag";
    e.label = label;
    e.tma_id = "tma" + std::to_string(label) + "_" + std::to_string(ordinal / 10);
    m.entries.push_back(e);
    out.bags.push_back({e.core_id, label, Tensor::from(n, cfg.dim, std::move(values))});
  }
  out.self_check_accuracy = nearest_centroid_accuracy(out.bags, cfg.num_classes);
  if (cfg.separation >= 4.0 && out.self_check_accuracy < 0.95) {
    throw DomainError("synth self-check failed: nearest-centroid accuracy " +
                      std::to_string(out.self_check_accuracy) + " < 0.95");
  }
  return out;
}

/// Writes bags under `dir/bags/` and the manifest as `dir/manifest.json`.
inline void write_dataset(const std::filesystem::path& dir, SynthDataset& data) {
  std::error_code ec;
  std::filesystem::create_directories(dir / "bags", ec);
  if (ec) throw IoError("cannot create '" + (dir / "bags").string() + "': " + ec.message());
  data.manifest.root = dir;
  for (std::size_t i = 0; i < data.bags.size(); ++i) {
    write_bag(dir / data.manifest.entries[i].path, data.bags[i], data.manifest.num_classes);
  }
  save_manifest(dir / "manifest.json", data.manifest);
}

}  // namespace bagforge
