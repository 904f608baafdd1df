#include "cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "bagforge/bagforge.hpp"

namespace bagforge::cli {
namespace {

namespace fs = std::filesystem;

std::uint64_t default_seed() {
  if (const char* env = std::getenv("BAGFORGE_SEED")) {
    try {
      return std::stoull(env);
    } catch (const std::exception&) {
      throw ConfigError(std::string("BAGFORGE_SEED is not an unsigned integer: ") + env);
    }
  }
  return 0;
}

struct Common {
  std::uint64_t seed = 0;
  std::string config;
  std::string out = ".";
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--seed", c.seed, "Random seed (falls back to $BAGFORGE_SEED, then 0)");
  sub->add_option("--config", c.config, "key = value file; flags override its values");
  sub->add_option("--out", c.out, "Output directory");
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string option_key(const CLI::Option* opt) {
  const auto& names = opt->get_lnames();
  return names.empty() ? std::string{} : names.front();
}

/// Snapshot of every option of `sub` after parsing, in declaration order.
/// `overrides` replaces values that were derived after parsing.
std::string resolved_config(const CLI::App* sub,
                            const std::map<std::string, std::string>& overrides = {}) {
  std::ostringstream out;
  out << "# resolved configuration for `" << sub->get_name() << "`\n";
  for (const auto* opt : sub->get_options()) {
    const auto key = option_key(opt);
    if (key.empty() || key == "help" || key == "config") continue;
    std::string value;
    if (const auto it = overrides.find(key); it != overrides.end()) {
      value = it->second;
    } else if (opt->get_expected_min() == 0) {
      value = opt->count() > 0 && opt->as<bool>() ? "true" : "false";
    } else {
      value = opt->count() > 0 ? opt->results().back() : opt->get_default_str();
    }
    out << key << " = \"" << value << "\"\n";
  }
  return out.str();
}

void write_text(const fs::path& path, const std::string& text) {
  write_file_atomic(path, text);
}

fs::path ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir + "': " + ec.message());
  return fs::path(dir);
}

std::string fmt(double v, int digits = 4) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

void print_metrics(std::ostream& out, const MetricsReport& r) {
  out << "SEN " << fmt(r.sen) << "  PREC " << fmt(r.prec) << "  ACC " << fmt(r.acc)
      << "  F1 " << fmt(r.f1) << "  (" << to_string(r.averaging) << ", n=" << r.total << ")\n";
}

ModelConfig model_from_flags(const std::string& aggregator, std::size_t d, std::size_t k,
                             std::size_t hidden, std::size_t d_model, std::size_t layers,
                             std::size_t heads) {
  ModelConfig cfg;
  cfg.aggregator = parse_aggregator(aggregator);
  cfg.input_dim = d;
  cfg.num_classes = k;
  cfg.attention_hidden = hidden;
  cfg.d_model = d_model;
  cfg.layers = layers;
  cfg.heads = heads;
  cfg.validate();
  return cfg;
}

struct ModelFlags {
  std::string aggregator = "bgap";
  std::size_t hidden = 128;
  std::size_t d_model = 512;
  std::size_t layers = 2;
  std::size_t heads = 8;

  void add(CLI::App* sub) {
    sub->add_option("--aggregator", aggregator, "bgap | bgmp | milatt | transmil")
        ->check(CLI::IsMember({"bgap", "bgmp", "milatt", "transmil"}));
    sub->add_option("--hidden", hidden, "Attention-pooling hidden size");
    sub->add_option("--d-model", d_model, "Transformer width");
    sub->add_option("--layers", layers, "Transformer layers");
    sub->add_option("--heads", heads, "Attention heads");
  }
};

/// Prepends `--key=value` for every config-file entry, so flags given on
/// the command line (which come later) take precedence.
std::vector<std::string> merge_config(CLI::App& app, const std::vector<std::string>& args) {
  std::optional<std::string> sub_name;
  std::optional<std::string> config_path;
  for (std::size_t i = 0; i < args.size(); ++i) {
    const auto& a = args[i];
    if (!sub_name && !a.empty() && a[0] != '-') sub_name = a;
    if (a == "--config" && i + 1 < args.size()) config_path = args[i + 1];
    if (a.rfind("--config=", 0) == 0) config_path = a.substr(9);
  }
  if (!config_path || !sub_name) return args;
  CLI::App* sub = nullptr;
  try {
    sub = app.get_subcommand(*sub_name);
  } catch (const CLI::OptionNotFound&) {
    return args;
  }
  const auto bytes = read_file(*config_path);
  const auto entries = parse_config_text(std::string(bytes.begin(), bytes.end()));
  std::vector<std::string> merged;
  bool inserted = false;
  for (const auto& a : args) {
    merged.push_back(a);
    if (!inserted && a == *sub_name) {
      inserted = true;
      for (const auto& [key, value] : entries) {
        const auto* opt = sub->get_option_no_throw("--" + key);
        if (opt == nullptr || key == "config" || key == "help") {
          throw ConfigError("unknown key '" + key + "' in " + *config_path + " for `" +
                            *sub_name + "`");
        }
        merged.push_back("--" + key + "=" + value);
      }
    }
  }
  return merged;
}

int run_synth(CLI::App* sub, const Common& common, SynthConfig cfg, std::ostream& out) {
  cfg.seed = common.seed;
  auto data = synthesize_dataset(cfg);
  const auto dir = ensure_dir(common.out);
  write_dataset(dir, data);
  write_text(dir / "synth.config.toml", resolved_config(sub));
  out << "wrote " << data.bags.size() << " bags (K=" << cfg.num_classes << ", d=" << cfg.dim
      << ") to " << (dir / "manifest.json").string() << "\n";
  out << "self-check nearest-centroid accuracy " << fmt(data.self_check_accuracy) << "\n";
  return 0;
}

}  // namespace

std::map<std::string, std::string> parse_config_text(const std::string& text) {
  std::map<std::string, std::string> entries;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string body = line;
    bool quoted = false;
    for (std::size_t i = 0; i < body.size(); ++i) {
      if (body[i] == '"') quoted = !quoted;
      if (body[i] == '#' && !quoted) {
        body.resize(i);
        break;
      }
    }
    body = trim(body);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    }
    auto key = trim(body.substr(0, eq));
    auto value = trim(body.substr(eq + 1));
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"') {
      value = value.substr(1, value.size() - 2);
    }
    if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    entries[key] = value;
  }
  return entries;
}

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"bagforge: multiple instance learning over bags of patch embeddings",
               "bagforge"};
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);

  // synth
  Common synth_common;
  SynthConfig synth_cfg;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic Gaussian-cluster dataset");
  add_common(synth, synth_common);
  synth->add_option("--k", synth_cfg.num_classes, "Number of classes");
  synth->add_option("--bags", synth_cfg.total_bags, "Total bags, spread evenly over classes");
  synth->add_option("--d", synth_cfg.dim, "Embedding dimension");
  synth->add_option("--sep", synth_cfg.separation, "Distance of class means from the origin");
  synth->add_option("--nmin", synth_cfg.min_instances, "Minimum instances per bag");
  synth->add_option("--nmax", synth_cfg.max_instances, "Maximum instances per bag");

  // split
  Common split_common;
  std::string split_data;
  SplitSpec split_spec;
  std::string split_grouping = "core";
  auto* split = app.add_subcommand("split", "Assign train/val/test splits, stratified by class");
  add_common(split, split_common);
  split->add_option("--data", split_data, "Dataset directory (default: --out)");
  split->add_option("--train", split_spec.train);
  split->add_option("--val", split_spec.val);
  split->add_option("--test", split_spec.test);
  split->add_option("--grouping", split_grouping, "core | tma")
      ->check(CLI::IsMember({"core", "tma"}));
  split->add_flag("--force", split_spec.force,
                  "Allow zero fractions and classes with fewer than 3 units");

  // train
  Common train_common;
  std::string train_data, train_run, train_average = "macro", weights_from = "train";
  ModelFlags train_model;
  TrainConfig train_cfg;
  bool class_weighting = true;
  auto* train_cmd = app.add_subcommand("train", "Train an aggregator + classifier");
  add_common(train_cmd, train_common);
  train_cmd->add_option("--data", train_data, "Dataset directory (default: --out)");
  train_cmd->add_option("--run-id", train_run, "Output file prefix (default: aggregator)");
  train_model.add(train_cmd);
  train_cmd->add_option("--lr", train_cfg.optimizer.lr, "AdamW learning rate");
  train_cmd->add_option("--weight-decay", train_cfg.optimizer.weight_decay);
  train_cmd->add_option("--epochs", train_cfg.epochs);
  train_cmd->add_option("--patience", train_cfg.patience, "0 disables early stopping");
  train_cmd->add_option("--class-weights", class_weighting, "Inverse-frequency loss weights");
  train_cmd->add_option("--weights-from", weights_from, "train | all")
      ->check(CLI::IsMember({"train", "all"}));
  train_cmd->add_option("--average", train_average, "macro | weighted")
      ->check(CLI::IsMember({"macro", "weighted"}));

  // eval
  Common eval_common;
  std::string eval_data, eval_ckpt, eval_split = "test", eval_average = "macro",
                                     eval_run = "eval";
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on one split");
  add_common(eval, eval_common);
  eval->add_option("--data", eval_data, "Dataset directory (default: --out)");
  eval->add_option("--checkpoint", eval_ckpt, "Checkpoint file")->required();
  eval->add_option("--split", eval_split, "train | val | test")
      ->check(CLI::IsMember({"train", "val", "test"}));
  eval->add_option("--average", eval_average, "macro | weighted")
      ->check(CLI::IsMember({"macro", "weighted"}));
  eval->add_option("--run-id", eval_run);

  // tsne
  Common tsne_common;
  std::string tsne_data, tsne_split = "all", tsne_run = "tsne";
  TsneConfig tsne_cfg;
  auto* tsne = app.add_subcommand("tsne", "t-SNE of core embeddings (mean patch embedding)");
  add_common(tsne, tsne_common);
  tsne->add_option("--data", tsne_data, "Dataset directory (default: --out)");
  tsne->add_option("--split", tsne_split, "all | train | val | test")
      ->check(CLI::IsMember({"all", "train", "val", "test"}));
  tsne->add_option("--perplexity", tsne_cfg.perplexity);
  tsne->add_option("--iterations", tsne_cfg.iterations);
  tsne->add_option("--lr", tsne_cfg.learning_rate);
  tsne->add_option("--run-id", tsne_run);

  // count-params
  Common count_common;
  ModelFlags count_model;
  std::size_t count_d = 512, count_k = 4;
  auto* count = app.add_subcommand("count-params", "Trainable parameter breakdown");
  add_common(count, count_common);
  count_model.add(count);
  count->add_option("--d", count_d, "Input embedding dimension");
  count->add_option("--k", count_k, "Number of classes");

  // inspect
  Common inspect_common;
  std::string inspect_path;
  auto* inspect = app.add_subcommand("inspect", "Describe a bag, checkpoint or manifest file");
  add_common(inspect, inspect_common);
  inspect->add_option("path", inspect_path, "File to inspect")->required();

  try {
    const auto seed = default_seed();
    for (auto* c : {&synth_common, &split_common, &train_common, &eval_common, &tsne_common,
                    &count_common, &inspect_common}) {
      c->seed = seed;
    }
    // Defaults are captured when options are declared; refresh the seed ones.
    for (auto* sub : app.get_subcommands({})) {
      if (auto* opt = sub->get_option_no_throw("--seed")) opt->default_str(std::to_string(seed));
    }

    const auto merged = merge_config(app, args);
    std::vector<const char*> argv{"bagforge"};
    for (const auto& a : merged) argv.push_back(a.c_str());
    try {
      app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp&) {
      out << app.help();
      return 0;
    } catch (const CLI::CallForAllHelp&) {
      out << app.help("", CLI::AppFormatMode::All);
      return 0;
    } catch (const CLI::ParseError& e) {
      err << "error: " << e.what() << "\n\n" << app.help();
      return 1;
    }

    if (synth->parsed()) return run_synth(synth, synth_common, synth_cfg, out);

    if (split->parsed()) {
      const fs::path data = split_data.empty() ? split_common.out : split_data;
      split_spec.seed = split_common.seed;
      split_spec.grouping = split_grouping == "tma" ? Grouping::tma : Grouping::core;
      auto m = load_manifest(data / "manifest.json");
      m = stratified_split(std::move(m), split_spec);
      save_manifest(data / "manifest.json", m);
      const auto dir = ensure_dir(split_common.out);
      write_text(dir / "split.config.toml", resolved_config(split, {{"data", data.string()}}));
      out << "class\ttrain\tval\ttest\n";
      const auto tr = m.class_counts(Split::train), va = m.class_counts(Split::val),
                 te = m.class_counts(Split::test);
      for (std::size_t c = 0; c < m.num_classes; ++c) {
        out << m.class_names[c] << '\t' << tr[c] << '\t' << va[c] << '\t' << te[c] << '\n';
      }
      return 0;
    }

    if (train_cmd->parsed()) {
      const fs::path data = train_data.empty() ? train_common.out : train_data;
      const auto m = load_manifest(data / "manifest.json");
      train_cfg.model = model_from_flags(train_model.aggregator, m.dim, m.num_classes,
                                         train_model.hidden, train_model.d_model,
                                         train_model.layers, train_model.heads);
      train_cfg.seed = train_common.seed;
      train_cfg.class_weighting = class_weighting;
      train_cfg.weight_source = weights_from == "all" ? WeightSource::all : WeightSource::train;
      const auto run = train_run.empty() ? train_model.aggregator : train_run;
      const auto dir = ensure_dir(train_common.out);
      write_text(dir / (run + ".config.toml"), resolved_config(train_cmd, {{"data", data.string()}, {"run-id", run}}));

      const auto log_path = dir / (run + ".log.jsonl");
      std::ofstream log(log_path, std::ios::trunc);
      if (!log) throw IoError("cannot open '" + log_path.string() + "' for writing");
      const auto result = train(m, train_cfg, &log);
      log.close();

      const auto ckpt_path = dir / (run + ".ckpt");
      save_checkpoint(ckpt_path, {result.best, static_cast<std::uint32_t>(result.best_epoch),
                                  config_hash(train_cfg)});
      out << "trained " << to_string(train_cfg.model.aggregator) << " for "
          << result.log.size() << " epochs; best epoch " << result.best_epoch
          << " (val macro-F1 " << fmt(result.best_val_f1) << ")\n";
      out << "checkpoint " << ckpt_path.string() << "\n";

      const auto test_bags = load_bags(m, Split::test);
      if (!test_bags.empty()) {
        const auto ev = evaluate(result.best, test_bags);
        const auto report = macro_metrics(ev.cm, parse_averaging(train_average));
        emit_report(ev.cm, report, m.class_names, dir, run);
        out << "test: ";
        print_metrics(out, report);
      }
      return 0;
    }

    if (eval->parsed()) {
      const fs::path data = eval_data.empty() ? eval_common.out : eval_data;
      const auto m = load_manifest(data / "manifest.json");
      const auto ckpt = load_checkpoint(eval_ckpt);
      if (ckpt.params.config.input_dim != m.dim || ckpt.params.config.num_classes != m.num_classes) {
        throw ConfigError("checkpoint (d=" + std::to_string(ckpt.params.config.input_dim) +
                          ", K=" + std::to_string(ckpt.params.config.num_classes) +
                          ") does not match dataset");
      }
      const auto bags = load_bags(m, parse_split(eval_split));
      if (bags.empty()) throw DomainError("split '" + eval_split + "' is empty");
      const auto ev = evaluate(ckpt.params, bags);
      const auto report = macro_metrics(ev.cm, parse_averaging(eval_average));
      const auto dir = ensure_dir(eval_common.out);
      write_text(dir / (eval_run + ".config.toml"), resolved_config(eval, {{"data", data.string()}}));
      emit_report(ev.cm, report, m.class_names, dir, eval_run);
      out << eval_split << ": ";
      print_metrics(out, report);
      return 0;
    }

    if (tsne->parsed()) {
      const fs::path data = tsne_data.empty() ? tsne_common.out : tsne_data;
      const auto m = load_manifest(data / "manifest.json");
      const auto bags = load_bags(m, tsne_split == "all" ? std::nullopt
                                                         : std::optional(parse_split(tsne_split)));
      tsne_cfg.seed = tsne_common.seed;
      const auto run = run_tsne(core_embeddings(bags), tsne_cfg);
      const auto dir = ensure_dir(tsne_common.out);
      write_text(dir / (tsne_run + ".config.toml"), resolved_config(tsne, {{"data", data.string()}}));
      write_text(dir / (tsne_run + ".tsne.csv"), tsne_csv(run.points, run.result.coords));
      emit_scatter(run.result.coords, run.points.labels, m.class_names,
                   dir / (tsne_run + ".tsne.svg"));
      out << "t-SNE of " << run.points.size() << " cores, perplexity " << fmt(run.perplexity, 2)
          << ": KL " << fmt(run.result.initial_kl) << " -> " << fmt(run.result.final_kl) << "\n";
      return 0;
    }

    if (count->parsed()) {
      const auto cfg = model_from_flags(count_model.aggregator, count_d, count_k,
                                        count_model.hidden, count_model.d_model,
                                        count_model.layers, count_model.heads);
      const auto counts = count_params(init_model<float>(cfg, count_common.seed));
      std::size_t width = 5;
      for (const auto& [name, n] : counts.breakdown) width = std::max(width, name.size());
      for (const auto& [name, n] : counts.breakdown) {
        out << std::left << std::setw(static_cast<int>(width) + 2) << name << n << '\n';
      }
      out << std::left << std::setw(static_cast<int>(width) + 2) << "total" << counts.total
          << '\n';
      return 0;
    }

    if (inspect->parsed()) {
      const fs::path path = inspect_path;
      if (path.extension() == ".json") {
        const auto m = load_manifest(path, false);
        out << "dataset " << m.dataset_id << "  d=" << m.dim << "  K=" << m.num_classes
            << "  cores=" << m.entries.size() << "\n";
        out << "class\ttotal\ttrain\tval\ttest\tunassigned\n";
        const auto all = m.class_counts();
        const auto tr = m.class_counts(Split::train), va = m.class_counts(Split::val),
                   te = m.class_counts(Split::test), un = m.class_counts(Split::unassigned);
        for (std::size_t c = 0; c < m.num_classes; ++c) {
          out << m.class_names[c] << '\t' << all[c] << '\t' << tr[c] << '\t' << va[c] << '\t'
              << te[c] << '\t' << un[c] << '\n';
        }
      } else if (path.extension() == ".ckpt") {
        const auto ckpt = load_checkpoint(path);
        out << "checkpoint  aggregator=" << to_string(ckpt.params.config.aggregator)
            << "  epoch=" << ckpt.epoch << "  config_hash=" << std::hex << ckpt.config_hash
            << std::dec << "  params=" << count_params(ckpt.params).total << "\n";
      } else {
        const auto h = read_bag_header(path);
        out << "bag  core_id=" << h.core_id << "  label=" << h.label << "  K=" << h.num_classes
            << "  N=" << h.count << "  d=" << h.dim << "  version=" << h.version << "\n";
      }
      return 0;
    }
    return 1;
  } catch (const FormatError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const IoError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace bagforge::cli
