#include <gtest/gtest.h>

#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "bagforge/bag_io.hpp"
#include "bagforge/checkpoint.hpp"
#include "bagforge/dataset.hpp"
#include "test_support.hpp"

using namespace bagforge;
using bagforge::testing::random_bag;
using bagforge::testing::scratch_dir;

namespace {

Manifest counted_manifest(const std::vector<std::size_t>& per_class) {
  Manifest m;
  m.dataset_id = "counted";
  m.dim = 4;
  m.num_classes = static_cast<std::uint32_t>(per_class.size());
  for (std::size_t c = 0; c < per_class.size(); ++c) {
    m.class_names.push_back("class" + std::to_string(c));
    for (std::size_t i = 0; i < per_class[c]; ++i) {
      const auto id = "c" + std::to_string(c) + "_" + std::to_string(i);
      m.entries.push_back({id, "bags/" + id + ".bag", static_cast<std::uint32_t>(c),
                           Split::unassigned, "tma" + std::to_string(c) + "_" + std::to_string(i / 7)});
    }
  }
  return m;
}

std::uint32_t read_u32_le(const std::vector<std::uint8_t>& b, std::size_t at) {
  return static_cast<std::uint32_t>(b[at]) | static_cast<std::uint32_t>(b[at + 1]) << 8 |
         static_cast<std::uint32_t>(b[at + 2]) << 16 | static_cast<std::uint32_t>(b[at + 3]) << 24;
}

template <class Fn>
std::string format_error_of(Fn&& fn, std::size_t* offset = nullptr) {
  try {
    fn();
  } catch (const FormatError& e) {
    if (offset) *offset = e.offset();
    return e.what();
  }
  ADD_FAILURE() << "expected FormatError";
  return {};
}

}  // namespace

TEST(BagFile, RoundTripIsBitwise) {
  SplitMix64 rng(1);
  const auto bag = random_bag<float>(rng, 5, 512, 3, "core_0042");
  const auto bytes = encode_bag(bag, 4);
  const auto back = decode_bag(bytes);
  EXPECT_EQ(back.bag.core_id, "core_0042");
  EXPECT_EQ(back.bag.label, 3u);
  EXPECT_EQ(back.header.num_classes, 4u);
  ASSERT_EQ(back.bag.instances.shape(), bag.instances.shape());
  EXPECT_EQ(std::memcmp(back.bag.instances.data().data(), bag.instances.data().data(),
                        4 * bag.instances.size()),
            0);
  EXPECT_EQ(encode_bag(back.bag, 4), bytes);
}

TEST(BagFile, HeaderLayoutIsLittleEndianAtFixedOffsets) {
  SplitMix64 rng(2);
  const auto bag = random_bag<float>(rng, 3, 7, 1, "abc");
  const auto b = encode_bag(bag, 4);
  EXPECT_EQ(std::string(b.begin(), b.begin() + 4), "MILB");
  EXPECT_EQ(read_u32_le(b, 4), 1u);
  EXPECT_EQ(read_u32_le(b, 8), 7u);
  EXPECT_EQ(read_u32_le(b, 12), 3u);
  EXPECT_EQ(read_u32_le(b, 16), 4u);
  EXPECT_EQ(read_u32_le(b, 20), 1u);
  EXPECT_EQ(read_u32_le(b, 24), 3u);
  EXPECT_EQ(std::string(b.begin() + 28, b.begin() + 31), "abc");
  EXPECT_EQ(b.size(), 31u + 4 * 3 * 7);
  float first = 0;
  std::memcpy(&first, b.data() + 31, 4);
  EXPECT_EQ(first, bag.instances.data()[0]);
}

TEST(BagFile, BadMagicFailsAtOffsetZero) {
  SplitMix64 rng(3);
  auto bytes = encode_bag(random_bag<float>(rng, 2, 3, 0), 2);
  std::memcpy(bytes.data(), "XXXX", 4);
  std::size_t offset = 99;
  const auto what = format_error_of([&] { decode_bag(bytes); }, &offset);
  EXPECT_EQ(offset, 0u);
  EXPECT_NE(what.find("offset 0"), std::string::npos) << what;
}

TEST(BagFile, TruncatedPayloadReportsExpectedAndActualLength) {
  SplitMix64 rng(4);
  auto bytes = encode_bag(random_bag<float>(rng, 5, 6, 0, "t"), 2);
  bytes.resize(bytes.size() - 4);
  const std::size_t expected = 4 * 5 * 6;
  const auto what = format_error_of([&] { decode_bag(bytes); });
  EXPECT_NE(what.find(std::to_string(expected)), std::string::npos) << what;
  EXPECT_NE(what.find(std::to_string(expected - 4)), std::string::npos) << what;
}

TEST(BagFile, UnsupportedVersionAndTruncatedHeader) {
  SplitMix64 rng(5);
  auto bytes = encode_bag(random_bag<float>(rng, 2, 2, 0), 2);
  auto versioned = bytes;
  versioned[4] = 2;
  std::size_t offset = 0;
  format_error_of([&] { decode_bag(versioned); }, &offset);
  EXPECT_EQ(offset, 4u);
  const std::vector<std::uint8_t> header_only(bytes.begin(), bytes.begin() + 10);
  format_error_of([&] { decode_bag(header_only); }, &offset);
  EXPECT_EQ(offset, 8u);
}

TEST(BagFile, LabelOutsideKIsRejected) {
  SplitMix64 rng(6);
  auto bytes = encode_bag(random_bag<float>(rng, 2, 2, 1), 2);
  bytes[20] = 5;
  std::size_t offset = 0;
  format_error_of([&] { decode_bag(bytes); }, &offset);
  EXPECT_EQ(offset, 20u);
}

TEST(BagFile, FileRoundTripAndMissingFile) {
  const auto dir = scratch_dir("bagfile");
  SplitMix64 rng(7);
  const auto bag = random_bag<float>(rng, 4, 9, 2, "disk");
  write_bag(dir / "disk.bag", bag, 3);
  const auto back = read_bag(dir / "disk.bag");
  EXPECT_TRUE(std::equal(bag.instances.data().begin(), bag.instances.data().end(),
                         back.instances.data().begin()));
  EXPECT_THROW(read_bag(dir / "absent.bag"), IoError);
}

TEST(Checkpoint, RoundTripIsBitwise) {
  for (const auto kind : {AggregatorKind::bgap, AggregatorKind::milatt, AggregatorKind::transmil}) {
    ModelConfig cfg;
    cfg.aggregator = kind;
    cfg.input_dim = 12;
    cfg.num_classes = 3;
    cfg.attention_hidden = 5;
    cfg.d_model = 8;
    cfg.heads = 2;
    const auto params = init_model<float>(cfg, 17);
    const Checkpoint ckpt{params, 7, 0xfeedbeefcafe1234ULL};
    const auto bytes = encode_checkpoint(ckpt);
    const auto back = decode_checkpoint(bytes);
    EXPECT_EQ(back.epoch, 7u);
    EXPECT_EQ(back.config_hash, 0xfeedbeefcafe1234ULL);
    EXPECT_EQ(back.params.config.aggregator, kind);
    const auto a = params.named(), b = back.params.named();
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      EXPECT_EQ(a[i].first, b[i].first);
      EXPECT_EQ(std::memcmp(a[i].second.data().data(), b[i].second.data().data(),
                            4 * a[i].second.size()),
                0);
    }
    EXPECT_EQ(encode_checkpoint(back), bytes);
  }
}

TEST(Checkpoint, CorruptionIsPositioned) {
  ModelConfig cfg;
  cfg.aggregator = AggregatorKind::milatt;
  cfg.input_dim = 6;
  cfg.attention_hidden = 3;
  const auto bytes = encode_checkpoint({init_model<float>(cfg, 1), 1, 2});
  auto magic = bytes;
  magic[0] = 'Z';
  std::size_t offset = 99;
  format_error_of([&] { decode_checkpoint(magic); }, &offset);
  EXPECT_EQ(offset, 0u);
  const std::vector<std::uint8_t> cut(bytes.begin(), bytes.end() - 3);
  const auto what = format_error_of([&] { decode_checkpoint(cut); }, &offset);
  EXPECT_GT(offset, 20u);
  EXPECT_NE(what.find("offset"), std::string::npos);
  auto extra = bytes;
  extra.push_back(0);
  format_error_of([&] { decode_checkpoint(extra); }, &offset);
  EXPECT_EQ(offset, bytes.size());
}

TEST(Manifest, JsonRoundTripIsLossless) {
  auto m = counted_manifest({5, 4, 3});
  m = stratified_split(m, SplitSpec{});
  const auto back = manifest_from_json(to_json(m));
  EXPECT_TRUE(back == m);
  EXPECT_EQ(to_json(back).dump(), to_json(m).dump());
}

TEST(Manifest, ValidationRejectsDuplicatesAndBadLabels) {
  auto m = counted_manifest({3, 3});
  m.entries[1].core_id = m.entries[0].core_id;
  EXPECT_THROW(validate_manifest(m, false), DomainError);
  m = counted_manifest({3, 3});
  m.entries[0].label = 2;
  EXPECT_THROW(validate_manifest(m, false), DomainError);
  m = counted_manifest({3, 3});
  EXPECT_THROW(validate_manifest(m, true), IoError);
}

TEST(Manifest, MalformedJsonIsFormatError) {
  const auto dir = scratch_dir("manifest");
  write_file_atomic(dir / "manifest.json", std::string("{\"dataset_id\": 3,"));
  EXPECT_THROW(load_manifest(dir / "manifest.json"), FormatError);
}

TEST(Split, ThousandCoreArithmetic) {
  const auto s = split_sizes(1198, SplitSpec{});
  EXPECT_EQ(s.train, 718u);
  EXPECT_EQ(s.val, 179u);
  EXPECT_EQ(s.test, 301u);
}

TEST(Split, PartitionsEveryClassExactly) {
  const std::vector<std::size_t> counts{1198, 208, 159, 382};
  const auto m = stratified_split(counted_manifest(counts), SplitSpec{0.6, 0.15, 0.25, 3});
  const auto tr = m.class_counts(Split::train), va = m.class_counts(Split::val),
             te = m.class_counts(Split::test), un = m.class_counts(Split::unassigned);
  for (std::size_t c = 0; c < counts.size(); ++c) {
    const double n = static_cast<double>(counts[c]);
    EXPECT_EQ(tr[c] + va[c] + te[c], counts[c]);
    EXPECT_EQ(un[c], 0u);
    EXPECT_LT(std::abs(static_cast<double>(tr[c]) - 0.6 * n), 1.0);
    EXPECT_LT(std::abs(static_cast<double>(va[c]) - 0.15 * n), 1.0);
  }
  EXPECT_EQ(tr[0], 718u);
  EXPECT_EQ(va[0], 179u);
  EXPECT_EQ(te[0], 301u);
}

TEST(Split, RandomSizesPartitionExactly) {
  SplitMix64 rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 3 + rng.below(500);
    const double a = rng.uniform(0.05, 0.8);
    const double b = rng.uniform(0.05, 0.95 - a);
    const SplitSpec spec{a, b, 1.0 - a - b};
    const auto s = split_sizes(n, spec);
    EXPECT_EQ(s.train + s.val + s.test, n);
    EXPECT_LT(std::abs(static_cast<double>(s.train) - a * static_cast<double>(n)), 1.0);
    EXPECT_LT(std::abs(static_cast<double>(s.val) - b * static_cast<double>(n)), 1.0);
  }
}

TEST(Split, DeterministicGivenSeed) {
  const auto m = counted_manifest({40, 30});
  const auto a = stratified_split(m, SplitSpec{0.6, 0.15, 0.25, 11});
  const auto b = stratified_split(m, SplitSpec{0.6, 0.15, 0.25, 11});
  const auto c = stratified_split(m, SplitSpec{0.6, 0.15, 0.25, 12});
  EXPECT_TRUE(a == b);
  EXPECT_FALSE(a == c);
}

TEST(Split, DegenerateFractionsNeedForce) {
  const auto m = counted_manifest({2, 5});
  EXPECT_THROW(stratified_split(m, SplitSpec{1, 0, 0}), ConfigError);
  EXPECT_THROW(stratified_split(m, SplitSpec{}), DomainError);
  SplitSpec spec{1, 0, 0};
  spec.force = true;
  const auto all = stratified_split(m, spec);
  for (const auto& e : all.entries) EXPECT_EQ(e.split, Split::train);
}

TEST(Split, FractionsMustSumToOne) {
  EXPECT_THROW(stratified_split(counted_manifest({5, 5}), SplitSpec{0.5, 0.2, 0.2}), ConfigError);
}

TEST(Split, TmaGroupingKeepsGroupsTogether) {
  SplitSpec spec;
  spec.grouping = Grouping::tma;
  const auto m = stratified_split(counted_manifest({70, 35}), spec);
  std::map<std::string, std::set<Split>> seen;
  for (const auto& e : m.entries) seen[e.tma_id].insert(e.split);
  for (const auto& [tma, splits] : seen) EXPECT_EQ(splits.size(), 1u) << tma;
  // 10 groups in class 0: 6 / 1 / 3 groups of 7 cores each.
  EXPECT_EQ(m.class_counts(Split::train)[0], 42u);
  EXPECT_EQ(m.class_counts(Split::val)[0], 7u);
}

TEST(Synth, SpecifiedDatasetPassesSelfCheck) {
  SynthConfig cfg;
  cfg.num_classes = 4;
  cfg.total_bags = 200;
  cfg.dim = 512;
  cfg.separation = 6;
  cfg.seed = 7;
  const auto data = synthesize_dataset(cfg);
  EXPECT_EQ(data.bags.size(), 200u);
  EXPECT_EQ(data.manifest.class_counts(), (std::vector<std::size_t>{50, 50, 50, 50}));
  EXPECT_GE(data.self_check_accuracy, 0.95);
  // Independent oracle: nearest centroid on bag means, recomputed here.
  std::vector<std::vector<double>> means, centroids(4, std::vector<double>(512, 0.0));
  for (const auto& b : data.bags) {
    std::vector<double> mu(512, 0.0);
    for (std::size_t i = 0; i < b.size(); ++i)
      for (std::size_t j = 0; j < 512; ++j) mu[j] += b.instances.at(i, j) / static_cast<double>(b.size());
    for (std::size_t j = 0; j < 512; ++j) centroids[b.label][j] += mu[j] / 50.0;
    means.push_back(std::move(mu));
  }
  std::size_t correct = 0;
  for (std::size_t i = 0; i < means.size(); ++i) {
    std::size_t best = 0;
    double best_d = 1e300;
    for (std::size_t c = 0; c < 4; ++c) {
      double dist = 0.0;
      for (std::size_t j = 0; j < 512; ++j) dist += std::pow(means[i][j] - centroids[c][j], 2);
      if (dist < best_d) best_d = dist, best = c;
    }
    correct += best == data.bags[i].label;
  }
  EXPECT_DOUBLE_EQ(data.self_check_accuracy, static_cast<double>(correct) / 200.0);
}

TEST(Synth, BagSizesAndClassMeans) {
  SynthConfig cfg;
  cfg.num_classes = 3;
  cfg.total_bags = 300;
  cfg.dim = 6;
  cfg.min_instances = 2;
  cfg.max_instances = 5;
  cfg.separation = 3;
  const auto data = synthesize_dataset(cfg);
  std::vector<std::vector<double>> sum(3, std::vector<double>(6, 0.0));
  std::vector<double> count(3, 0.0);
  for (const auto& b : data.bags) {
    EXPECT_GE(b.size(), 2u);
    EXPECT_LE(b.size(), 5u);
    for (std::size_t i = 0; i < b.size(); ++i)
      for (std::size_t j = 0; j < 6; ++j) sum[b.label][j] += b.instances.at(i, j);
    count[b.label] += static_cast<double>(b.size());
  }
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t j = 0; j < 6; ++j)
      EXPECT_NEAR(sum[c][j] / count[c], j == c ? 3.0 : 0.0, 0.15) << c << "," << j;
}

TEST(Synth, ZeroSeparationIsClassBlind) {
  SynthConfig cfg;
  cfg.num_classes = 4;
  cfg.total_bags = 400;
  cfg.dim = 8;
  cfg.separation = 0;
  EXPECT_LT(synthesize_dataset(cfg).self_check_accuracy, 0.4);
}

TEST(Synth, SameSeedGivesIdenticalFiles) {
  SynthConfig cfg;
  cfg.total_bags = 12;
  cfg.dim = 16;
  auto a = synthesize_dataset(cfg);
  auto b = synthesize_dataset(cfg);
  const auto da = scratch_dir("synth_a"), db = scratch_dir("synth_b");
  write_dataset(da, a);
  write_dataset(db, b);
  for (const auto& e : a.manifest.entries) {
    EXPECT_EQ(read_file(da / e.path), read_file(db / e.path)) << e.core_id;
  }
  const auto loaded = load_manifest(da / "manifest.json");
  EXPECT_EQ(loaded.entries.size(), 12u);
  const auto bags = load_bags(loaded, std::nullopt);
  EXPECT_EQ(bags.size(), 12u);
}

TEST(Synth, InvalidConfigsAreRejected) {
  SynthConfig cfg;
  cfg.dim = 1;
  EXPECT_THROW(synthesize_dataset(cfg), ConfigError);
  cfg = SynthConfig{};
  cfg.separation = -1;
  EXPECT_THROW(synthesize_dataset(cfg), ConfigError);
}
