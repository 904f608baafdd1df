// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any failure.
// Usage: acceptance [work_dir]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "bagforge/bagforge.hpp"
#include "bagforge/gradcheck.hpp"
#include "cli.hpp"

using namespace bagforge;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string num(double v, int precision = 4) {
  std::ostringstream s;
  s << std::setprecision(precision) << v;
  return s.str();
}

struct CliRun {
  int code;
  std::string out, err;
};

CliRun cli_run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli::dispatch(args, out, err);
  return {code, out.str(), err.str()};
}

void require_cli(const std::vector<std::string>& args) {
  const auto r = cli_run(args);
  if (r.code != 0) throw std::runtime_error("`" + args.front() + "` exited " + std::to_string(r.code) + ": " + r.err);
}

std::string slurp(const fs::path& p) {
  const auto b = read_file(p);
  return {b.begin(), b.end()};
}

fs::path fresh_dir(const fs::path& root, const std::string& name) {
  const auto dir = root / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

template <class T>
BasicBag<T> gaussian_bag(SplitMix64& rng, std::size_t n, std::size_t d, std::uint32_t label) {
  std::vector<T> v(n * d);
  for (auto& x : v) x = static_cast<T>(rng.gaussian());
  return {"core", label, BasicTensor<T>::from(n, d, std::move(v))};
}

// ---------------------------------------------------------------------------

Outcome parameter_budget() {
  const auto r = cli_run({"count-params", "--aggregator", "transmil"});
  if (r.code != 0) return {false, "count-params exited " + std::to_string(r.code)};
  const auto pos = r.out.rfind("total");
  const auto total = std::stoull(r.out.substr(r.out.find_first_of("0123456789", pos)));
  // Architecture tally: input projection, class token, 2 layers, 3 positional
  // convolutions, final norm, head.
  const std::size_t d = 512, D = 512, K = 4;
  const std::size_t layer = 2 * D + 3 * D * D + D * D + D;
  const std::size_t expected = d * D + D + D + 2 * layer + (49 + 25 + 9) * D + 3 * D + 2 * D + D * K + K;
  return {total >= 2'300'000 && total <= 2'900'000 && total == expected,
          "total " + std::to_string(total) + " (tally " + std::to_string(expected) + ")"};
}

Outcome gradient_correctness() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  std::size_t checks = 0;
  std::string worst_at;
  for (const auto kind : {AggregatorKind::bgap, AggregatorKind::bgmp, AggregatorKind::milatt,
                          AggregatorKind::transmil}) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      auto rng = SplitMix64::derive(seed, "acceptance/grad");
      ModelConfig cfg;
      cfg.aggregator = kind;
      cfg.input_dim = 2 + rng.below(15);
      cfg.num_classes = static_cast<std::uint32_t>(2 + rng.below(3));
      cfg.attention_hidden = 4;
      cfg.d_model = 8;
      cfg.layers = 2;
      cfg.heads = 2;
      const auto params = init_model<double>(cfg, seed);
      const auto n = 1 + rng.below(6);
      const auto bag = gaussian_bag<double>(rng, n, cfg.input_dim,
                                            static_cast<std::uint32_t>(rng.below(cfg.num_classes)));
      ClassWeights w;
      for (std::size_t c = 0; c < cfg.num_classes; ++c) w.w.push_back(rng.uniform(0.5, 2.0));
      const auto r = finite_diff_check<double>(
          [&](Tape& t) { return weighted_ce(t, forward_classify(t, bag, params), bag.label, w); },
          params.tensors());
      ++checks;
      if (r.max_relative_error > worst) {
        worst = r.max_relative_error;
        worst_at = std::string(to_string(kind)) + " seed " + std::to_string(seed);
      }
    }
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-2 && secs < 60.0,
          std::to_string(checks) + " composites, max rel err " + num(worst, 3) + " (" + worst_at +
              "), " + num(secs, 3) + " s"};
}

Outcome permutation_invariance() {
  SplitMix64 rng(11);
  ModelConfig cfg;
  cfg.aggregator = AggregatorKind::milatt;
  cfg.input_dim = 16;
  cfg.attention_hidden = 8;
  const auto att = init_aggregator<float>(cfg, rng);
  double worst = 0.0, worst_sum = 0.0;
  bool nonneg = true;
  for (int trial = 0; trial < 100; ++trial) {
    const auto n = 1 + rng.below(16);
    const auto bag = gaussian_bag<float>(rng, n, 16, 0);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(std::span(order));
    std::vector<float> v;
    for (const auto i : order)
      for (std::size_t j = 0; j < 16; ++j) v.push_back(bag.instances.at(i, j));
    const Bag shuffled{"core", 0, Tensor::from(n, 16, std::move(v))};

    Tape tape = Tape::inference();
    const std::vector<std::pair<Tensor, Tensor>> pairs{
        {bgap(tape, bag).vector, bgap(tape, shuffled).vector},
        {bgmp(tape, bag).vector, bgmp(tape, shuffled).vector},
        {attention_pool(tape, bag, att).vector, attention_pool(tape, shuffled, att).vector}};
    for (const auto& [a, b] : pairs)
      for (std::size_t i = 0; i < a.size(); ++i)
        worst = std::max(worst, static_cast<double>(std::abs(a.data()[i] - b.data()[i])));
    for (const auto* b : {&bag, &shuffled}) {
      const auto a = *attention_pool(tape, *b, att).attention;
      double sum = 0.0;
      for (const float x : a.data()) {
        nonneg = nonneg && x >= 0.0f;
        sum += x;
      }
      worst_sum = std::max(worst_sum, std::abs(sum - 1.0));
    }
  }
  return {worst <= 1e-5 && nonneg && worst_sum <= 1e-5,
          "max output diff " + num(worst, 3) + ", max |sum(a)-1| " + num(worst_sum, 3) +
              (nonneg ? ", weights non-negative" : ", NEGATIVE weight seen")};
}

Outcome loss_oracle() {
  SplitMix64 rng(12);
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t k = 2 + rng.below(7);
    // Double instantiation: float32 cannot hold losses near 60 to 1e-6.
    std::vector<double> s(k);
    double z = 0.0;
    for (auto& r : s) z += (r = std::exp(3.0 * rng.gaussian()));
    for (auto& r : s) r /= z;
    ClassWeights w;
    for (std::size_t i = 0; i < k; ++i) w.w.push_back(rng.uniform(0.1, 5.0));
    const auto y = static_cast<std::uint32_t>(rng.below(k));
    Tape tape;
    const double got = weighted_ce(tape, BasicTensor<double>::from(1, k, s), y, w).item();
    const double expect = -(1.0 / static_cast<double>(k)) * w.w[y] * std::log(std::max(s[y], 1e-12));
    worst = std::max(worst, std::abs(got - expect));
  }
  Tape tape;
  const double uniform =
      weighted_ce(tape, Tensor::from(1, 4, {0.25f, 0.25f, 0.25f, 0.25f}), 2u, ClassWeights::uniform(4))
          .item();
  const double uniform_err = std::abs(uniform - std::log(4.0) / 4.0);
  return {worst <= 1e-6 && uniform_err <= 1e-6,
          "1000 cases, max abs err " + num(worst, 3) + "; uniform K=4 gives " + num(uniform, 6)};
}

Outcome end_to_end(const fs::path& root) {
  const auto dir = fresh_dir(root, "convergence");
  const auto d = dir.string();
  require_cli({"synth", "--k", "4", "--bags", "200", "--d", "512", "--sep", "6", "--seed", "7", "--out", d});
  require_cli({"split", "--train", "0.6", "--val", "0.15", "--test", "0.25", "--seed", "7", "--out", d});
  const auto m = load_manifest(dir / "manifest.json");
  for (const auto split : {Split::train, Split::val, Split::test}) {
    const auto counts = m.class_counts(split);
    const std::size_t want = split == Split::train ? 30 : split == Split::val ? 7 : 13;
    if (counts != std::vector<std::size_t>(4, want)) return {false, "unexpected split sizes"};
  }

  // AdamW step sizes chosen per aggregator (see README).
  const std::map<std::string, std::string> lr{
      {"bgap", "5e-3"}, {"bgmp", "5e-3"}, {"milatt", "5e-3"}, {"transmil", "5e-4"}};
  bool pass = true;
  std::string detail;
  for (const std::string agg : {"bgap", "bgmp", "milatt", "transmil"}) {
    const auto t0 = Clock::now();
    require_cli({"train", "--data", d, "--out", d, "--aggregator", agg, "--epochs", "20", "--lr",
                 lr.at(agg), "--seed", "7", "--run-id", agg});
    const double secs = seconds_since(t0);
    const auto metrics = nlohmann::json::parse(slurp(dir / (agg + ".metrics.json")));
    const double acc = metrics.at("acc").get<double>();
    require_cli({"train", "--config", (dir / (agg + ".config.toml")).string(), "--run-id", agg + "_rerun"});
    const bool same = slurp(dir / (agg + ".log.jsonl")) == slurp(dir / (agg + "_rerun.log.jsonl"));
    const auto log = slurp(dir / (agg + ".log.jsonl"));
    const auto epochs = static_cast<std::size_t>(std::count(log.begin(), log.end(), '\n'));
    const bool ok = acc >= 0.95 && secs < 300.0 && same && epochs <= 20;
    pass = pass && ok;
    std::cerr << "  " << agg << ": test acc " << num(acc) << ", " << epochs << " epochs, "
              << num(secs, 3) << " s, rerun " << (same ? "identical" : "DIFFERS") << "\n";
    detail += (detail.empty() ? "" : "; ") + agg + " acc " + num(acc, 3) + " in " + num(secs, 3) +
              " s" + (same ? "" : " (rerun differs)");
  }
  return {pass, detail};
}

Outcome overfit() {
  SynthConfig sc;
  sc.seed = 7;
  const auto data = synthesize_dataset(sc);
  bool pass = true;
  std::string detail;
  for (const auto kind : {AggregatorKind::milatt, AggregatorKind::transmil}) {
    ModelConfig mc;
    mc.aggregator = kind;
    mc.input_dim = sc.dim;
    mc.num_classes = sc.num_classes;
    const auto params = init_model<float>(mc, 1);
    AdamWConfig ac;
    ac.lr = 1e-4;
    OptState<float> opt(ac, params.named());
    const auto& bag = data.bags.front();
    int reached = -1;
    float loss = 0.0f;
    for (int step = 1; step <= 200; ++step) {
      loss = train_step(params, opt, bag, ClassWeights::uniform(sc.num_classes));
      if (loss < 1e-2f) {
        reached = step;
        break;
      }
    }
    pass = pass && reached > 0;
    detail += (detail.empty() ? "" : "; ") + std::string(to_string(kind)) +
              (reached > 0 ? " loss < 1e-2 at step " + std::to_string(reached)
                           : " loss " + num(loss) + " after 200 steps");
  }
  return {pass, detail};
}

Outcome split_arithmetic() {
  const auto s = split_sizes(1198, SplitSpec{});
  bool pass = s.train == 718 && s.val == 179 && s.test == 301;
  // One class of 1198 cores, then an uneven multi-class manifest.
  for (const auto& per_class : std::vector<std::vector<std::size_t>>{{1198}, {500, 331, 250, 117}}) {
    Manifest m;
    m.dataset_id = "split";
    m.dim = 4;
    m.num_classes = static_cast<std::uint32_t>(per_class.size());
    for (std::size_t c = 0; c < per_class.size(); ++c) {
      m.class_names.push_back("c" + std::to_string(c));
      for (std::size_t i = 0; i < per_class[c]; ++i)
        m.entries.push_back({std::to_string(c) + "_" + std::to_string(i), "x.bag",
                             static_cast<std::uint32_t>(c), Split::unassigned, ""});
    }
    SplitSpec spec;
    spec.seed = 3;
    const auto out = stratified_split(m, spec);
    const auto tr = out.class_counts(Split::train), va = out.class_counts(Split::val),
               te = out.class_counts(Split::test), un = out.class_counts(Split::unassigned);
    for (std::size_t c = 0; c < per_class.size(); ++c) {
      const auto want = split_sizes(per_class[c], spec);
      pass = pass && tr[c] == want.train && va[c] == want.val && te[c] == want.test && un[c] == 0 &&
             tr[c] + va[c] + te[c] == per_class[c];
    }
  }
  return {pass, "1198 -> " + std::to_string(s.train) + "/" + std::to_string(s.val) + "/" +
                    std::to_string(s.test) + ", per-class partitions exact"};
}

Outcome metrics_oracle() {
  SplitMix64 rng(13);
  std::size_t mismatches = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t k = 2 + rng.below(6);
    ConfusionMatrix cm(k);
    std::vector<std::vector<std::uint64_t>> rows(k, std::vector<std::uint64_t>(k));
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < k; ++j)
        cm(i, j) = rows[i][j] = rng.below(4) == 0 ? 0 : rng.below(i == j ? 50 : 10);
    if (cm.total() == 0) cm(0, 0) = rows[0][0] = 1;

    std::uint64_t total = 0, diag = 0;
    for (std::size_t i = 0; i < k; ++i) {
      diag += rows[i][i];
      for (std::size_t j = 0; j < k; ++j) total += rows[i][j];
    }
    for (const bool weighted : {false, true}) {
      double sen = 0, prec = 0, f1 = 0;
      for (std::size_t c = 0; c < k; ++c) {
        std::uint64_t tp = rows[c][c], fn = 0, fp = 0;
        for (std::size_t j = 0; j < k; ++j)
          if (j != c) fn += rows[c][j], fp += rows[j][c];
        const double r = tp + fn ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
        const double p = tp + fp ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
        const double f = r + p > 0 ? 2 * r * p / (r + p) : 0.0;
        const double w = weighted ? static_cast<double>(tp + fn) / static_cast<double>(total)
                                  : 1.0 / static_cast<double>(k);
        sen += w * r;
        prec += w * p;
        f1 += w * f;
      }
      const auto got = macro_metrics(cm, weighted ? Averaging::weighted : Averaging::macro);
      const double acc = static_cast<double>(diag) / static_cast<double>(total);
      if (got.sen != sen || got.prec != prec || got.f1 != f1 || got.acc != acc) ++mismatches;
    }
  }
  ConfusionMatrix ex(2);
  ex(0, 0) = 1;
  ex(0, 1) = 1;
  ex(1, 1) = 2;
  const auto r = macro_metrics(ex);
  const bool worked = std::abs(r.sen - 0.75) <= 1e-4 && std::abs(r.prec - 0.8333) <= 1e-4 &&
                      std::abs(r.acc - 0.75) <= 1e-4 && std::abs(r.f1 - 0.7333) <= 1e-4;
  return {mismatches == 0 && worked,
          std::to_string(mismatches) + " mismatches over 2000 averaged reports; [[1,1],[0,2]] -> (" +
              num(r.sen) + ", " + num(r.prec) + ", " + num(r.acc) + ", " + num(r.f1) + ")"};
}

Outcome tsne_criterion() {
  SynthConfig sc;
  sc.total_bags = 400;
  sc.seed = 21;
  const auto set = core_embeddings(synthesize_dataset(sc).bags);
  const auto t0 = Clock::now();
  const auto run = run_tsne(set, TsneConfig{});
  const double secs = seconds_since(t0);

  double worst_perp = 0.0;
  for (const double p : run.affinities.row_perplexity)
    worst_perp = std::max(worst_perp, std::abs(p / run.perplexity - 1.0));

  const auto& y = run.result.coords;
  const auto& labels = run.points.labels;
  std::vector<double> cx(4, 0), cy(4, 0), n(4, 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    cx[labels[i]] += y[2 * i];
    cy[labels[i]] += y[2 * i + 1];
    n[labels[i]] += 1;
  }
  for (std::size_t c = 0; c < 4; ++c) cx[c] /= n[c], cy[c] /= n[c];
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < 4; ++c)
      if (std::hypot(y[2 * i] - cx[c], y[2 * i + 1] - cy[c]) <
          std::hypot(y[2 * i] - cx[best], y[2 * i + 1] - cy[best]))
        best = c;
    correct += best == labels[i];
  }
  const double acc = static_cast<double>(correct) / static_cast<double>(labels.size());
  const bool pass = worst_perp <= 1e-4 && acc >= 0.9 &&
                    run.result.final_kl < run.result.initial_kl && secs < 120.0;
  return {pass, "M=" + std::to_string(labels.size()) + ", max perplexity rel err " + num(worst_perp, 3) +
                    ", centroid acc " + num(acc, 3) + ", KL " + num(run.result.initial_kl) + " -> " +
                    num(run.result.final_kl) + ", " + num(secs, 3) + " s"};
}

template <class Fn>
std::optional<std::uint64_t> format_offset(Fn&& fn) {
  try {
    fn();
  } catch (const FormatError& e) {
    return e.offset();
  }
  return std::nullopt;
}

Outcome persistence(const fs::path& root) {
  const auto dir = fresh_dir(root, "persistence");
  SplitMix64 rng(14);
  bool pass = true;
  std::vector<std::string> notes;

  // Bags: file round trip, float bits preserved, re-encoding identical.
  for (int trial = 0; trial < 20; ++trial) {
    auto bag = gaussian_bag<float>(rng, 1 + rng.below(30), 1 + rng.below(64),
                                   static_cast<std::uint32_t>(rng.below(4)));
    bag.core_id = "core_" + std::to_string(trial);
    const auto path = dir / (bag.core_id + ".bag");
    write_bag(path, bag, 4);
    const auto back = read_bag_file(path);
    pass = pass && back.bag.core_id == bag.core_id && back.bag.label == bag.label &&
           back.bag.instances.shape() == bag.instances.shape() &&
           std::memcmp(back.bag.instances.data().data(), bag.instances.data().data(),
                       sizeof(float) * bag.instances.size()) == 0 &&
           encode_bag(back.bag, 4) == read_file(path);
  }
  notes.push_back("20 bag round trips");

  // Checkpoints for every aggregator.
  for (const auto kind : {AggregatorKind::bgap, AggregatorKind::bgmp, AggregatorKind::milatt,
                          AggregatorKind::transmil}) {
    ModelConfig cfg;
    cfg.aggregator = kind;
    const auto params = init_model<float>(cfg, 5);
    const auto path = dir / (std::string(to_string(kind)) + ".ckpt");
    save_checkpoint(path, {params, 3, 0x1234});
    const auto back = load_checkpoint(path);
    const auto a = params.named(), b = back.params.named();
    pass = pass && a.size() == b.size() && back.epoch == 3 && back.config_hash == 0x1234;
    for (std::size_t i = 0; pass && i < a.size(); ++i)
      pass = a[i].first == b[i].first &&
             std::memcmp(a[i].second.data().data(), b[i].second.data().data(),
                         sizeof(float) * a[i].second.size()) == 0;
    pass = pass && encode_checkpoint(back) == read_file(path);
  }
  notes.push_back("4 checkpoint round trips");

  // Corruption diagnostics carry the byte offset of the fault.
  auto bag_bytes = encode_bag(gaussian_bag<float>(rng, 4, 8, 1), 4);
  auto bad_magic = bag_bytes;
  bad_magic[1] = 'X';
  auto bad_version = bag_bytes;
  bad_version[4] = 9;
  auto bad_label = bag_bytes;
  bad_label[20] = 7;
  const std::vector<std::uint8_t> truncated(bag_bytes.begin(), bag_bytes.end() - 5);
  const auto header_end = decode_bag(bag_bytes).header.payload_offset;
  const std::vector<std::pair<std::vector<std::uint8_t>, std::uint64_t>> bag_cases{
      {bad_magic, 0}, {bad_version, 4}, {bad_label, 20}, {truncated, header_end}};
  for (const auto& [bytes, at] : bag_cases) {
    const auto off = format_offset([&] { decode_bag(bytes); });
    pass = pass && off && *off == at;
  }
  ModelConfig cfg;
  cfg.aggregator = AggregatorKind::milatt;
  auto ckpt_bytes = encode_checkpoint({init_model<float>(cfg, 1), 1, 2});
  auto ckpt_magic = ckpt_bytes;
  ckpt_magic[0] = 'Q';
  const auto magic_off = format_offset([&] { decode_checkpoint(ckpt_magic); });
  const std::vector<std::uint8_t> ckpt_cut(ckpt_bytes.begin(), ckpt_bytes.end() - 7);
  const auto cut_off = format_offset([&] { decode_checkpoint(ckpt_cut); });
  pass = pass && magic_off && *magic_off == 0 && cut_off && *cut_off > 0 && *cut_off < ckpt_bytes.size();
  notes.push_back("bag faults at offsets 0/4/20/" + std::to_string(header_end));

  // The CLI surfaces the same diagnostic with exit code 2.
  write_file_atomic(dir / "corrupt.bag", bad_magic);
  const auto r = cli_run({"inspect", (dir / "corrupt.bag").string()});
  pass = pass && r.code == 2 && r.err.find("offset 0") != std::string::npos;
  notes.push_back("inspect exit " + std::to_string(r.code));

  std::string detail;
  for (const auto& n : notes) detail += (detail.empty() ? "" : ", ") + n;
  return {pass, detail};
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path root = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "bagforge_acceptance";
  fs::create_directories(root);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"parameter-budget", parameter_budget},
      {"gradient-correctness", gradient_correctness},
      {"permutation-invariance", permutation_invariance},
      {"loss-oracle", loss_oracle},
      {"end-to-end-convergence", [&] { return end_to_end(root); }},
      {"overfit-single-bag", overfit},
      {"split-arithmetic", split_arithmetic},
      {"metrics-oracle", metrics_oracle},
      {"tsne", tsne_criterion},
      {"persistence", [&] { return persistence(root); }},
  };

  std::size_t failed = 0;
  for (const auto& [name, check] : criteria) {
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail << std::endl;
  }
  std::cout << (failed == 0 ? "all criteria passed" : std::to_string(failed) + " criteria failed")
            << std::endl;
  return failed == 0 ? 0 : 1;
}
