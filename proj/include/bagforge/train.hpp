#pragma once

// Batch-size-one training loop with validation-based model selection.

#include <cmath>
#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"

#include "bagforge/bag.hpp"
#include "bagforge/checkpoint.hpp"
#include "bagforge/dataset.hpp"
#include "bagforge/error.hpp"
#include "bagforge/metrics.hpp"
#include "bagforge/model.hpp"
#include "bagforge/optim.hpp"
#include "bagforge/random.hpp"
#include "bagforge/tensor.hpp"

namespace bagforge {

enum class WeightSource { train, all };

struct TrainConfig {
  ModelConfig model;
  AdamWConfig optimizer;
  std::size_t epochs = 50;
  std::size_t patience = 10;
  std::uint64_t seed = 0;
  bool class_weighting = true;
  WeightSource weight_source = WeightSource::train;

  void validate() const {
    model.validate();
    if (epochs < 1) throw ConfigError("epochs must be at least 1");
    if (!(optimizer.lr > 0.0)) throw ConfigError("learning rate must be positive");
  }
};

inline nlohmann::ordered_json to_json(const TrainConfig& c) {
  nlohmann::ordered_json j;
  j["model"] = to_json(c.model);
  j["lr"] = c.optimizer.lr;
  j["beta1"] = c.optimizer.beta1;
  j["beta2"] = c.optimizer.beta2;
  j["eps"] = c.optimizer.eps;
  j["weight_decay"] = c.optimizer.weight_decay;
  j["epochs"] = c.epochs;
  j["patience"] = c.patience;
  j["seed"] = c.seed;
  j["class_weighting"] = c.class_weighting;
  j["weight_source"] = c.weight_source == WeightSource::train ? "train" : "all";
  return j;
}

inline std::uint64_t config_hash(const TrainConfig& c) { return fnv1a(to_json(c).dump()); }

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_acc = 0.0;
  double val_f1 = 0.0;
  bool best = false;
};

inline nlohmann::ordered_json to_json(const EpochLog& e) {
  nlohmann::ordered_json j;
  j["epoch"] = e.epoch;
  j["train_loss"] = e.train_loss;
  j["val_acc"] = e.val_acc;
  j["val_macro_f1"] = e.val_f1;
  j["best"] = e.best;
  return j;
}

/// One optimiser step on a single bag; returns the loss before the update.
inline float train_step(const ModelParams& params, OptState<float>& opt, const Bag& bag,
                        const ClassWeights& weights) {
  const auto named = params.named();
  for (const auto& [name, t] : named) t.zero_grad();
  Tape tape;
  auto scores = forward_classify(tape, bag, params);
  auto loss = weighted_ce(tape, scores, bag.label, weights);
  const float value = loss.item();
  if (!std::isfinite(value)) throw NumericError("non-finite loss");
  tape.backward(loss);
  adamw_step(named, opt);
  return value;
}

struct Evaluation {
  ConfusionMatrix cm;
  std::vector<std::uint32_t> predictions;
  double mean_loss = 0.0;
};

inline Evaluation evaluate(const ModelParams& params, const std::vector<Bag>& bags,
                           const ClassWeights& weights) {
  Evaluation out{ConfusionMatrix(params.config.num_classes), {}, 0.0};
  for (const auto& bag : bags) {
    Tape tape = Tape::inference();
    auto scores = forward_classify(tape, bag, params);
    out.mean_loss += weighted_ce(tape, scores, bag.label, weights).item();
    const auto pred = predict_label(scores);
    out.predictions.push_back(pred);
    out.cm.add(bag.label, pred);
  }
  if (!bags.empty()) out.mean_loss /= static_cast<double>(bags.size());
  return out;
}

inline Evaluation evaluate(const ModelParams& params, const std::vector<Bag>& bags) {
  return evaluate(params, bags, ClassWeights::uniform(params.config.num_classes));
}

struct TrainResult {
  ModelParams best;
  std::size_t best_epoch = 0;
  double best_val_f1 = -1.0;
  std::vector<EpochLog> log;
};

/// Per epoch: seeded shuffle of the training bags, one AdamW step per bag,
/// then validation macro-F1. The best epoch (ties to the earlier one) is
/// kept; training stops after `patience` epochs without improvement.
/// Each epoch's log line is written to `log_sink` as NDJSON when given.
inline TrainResult train(const std::vector<Bag>& train_bags, const std::vector<Bag>& val_bags,
                         const TrainConfig& cfg, const ClassWeights& weights,
                         std::ostream* log_sink = nullptr) {
  cfg.validate();
  if (train_bags.empty()) throw ConfigError("training split is empty");
  if (val_bags.empty()) throw ConfigError("validation split is empty");
  if (weights.size() != cfg.model.num_classes) {
    throw ConfigError("class weights do not match K");
  }
  auto params = init_model<float>(cfg.model, cfg.seed);
  OptState<float> opt(cfg.optimizer, params.named());
  TrainResult result;
  std::vector<std::size_t> order(train_bags.size());

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    auto rng = SplitMix64::derive(cfg.seed, "shuffle/" + std::to_string(epoch));
    rng.shuffle(std::span(order));

    double loss_sum = 0.0;
    for (const auto idx : order) {
      const auto& bag = train_bags[idx];
      try {
        loss_sum += train_step(params, opt, bag, weights);
      } catch (const NumericError& ex) {
        throw NumericError("epoch " + std::to_string(epoch) + ", bag '" + bag.core_id +
                           "': " + ex.what());
      }
    }
    const auto val = evaluate(params, val_bags);
    const auto report = macro_metrics(val.cm);

    EpochLog entry;
    entry.epoch = epoch;
    entry.train_loss = loss_sum / static_cast<double>(train_bags.size());
    entry.val_acc = report.acc;
    entry.val_f1 = report.f1;
    entry.best = report.f1 > result.best_val_f1;
    if (entry.best) {
      result.best = clone(params);
      result.best_epoch = epoch;
      result.best_val_f1 = report.f1;
    }
    result.log.push_back(entry);
    if (log_sink != nullptr) *log_sink << to_json(entry).dump() << '\n' << std::flush;
    if (cfg.patience > 0 && epoch - result.best_epoch >= cfg.patience) break;
  }
  return result;
}

/// Class weights for a manifest per the config's weighting options.
inline ClassWeights weights_for(const Manifest& m, const TrainConfig& cfg) {
  if (!cfg.class_weighting) return ClassWeights::uniform(m.num_classes);
  const auto counts = cfg.weight_source == WeightSource::train
                          ? m.class_counts(Split::train)
                          : m.class_counts();
  return class_weights(counts);
}

inline TrainResult train(const Manifest& m, const TrainConfig& cfg,
                         std::ostream* log_sink = nullptr) {
  if (cfg.model.input_dim != m.dim || cfg.model.num_classes != m.num_classes) {
    throw ConfigError("model config (d=" + std::to_string(cfg.model.input_dim) +
                      ", K=" + std::to_string(cfg.model.num_classes) +
                      ") does not match the dataset");
  }
  const auto train_bags = load_bags(m, Split::train);
  const auto val_bags = load_bags(m, Split::val);
  if (train_bags.empty()) throw ConfigError("training split is empty");
  if (val_bags.empty()) throw ConfigError("validation split is empty");
  return train(train_bags, val_bags, cfg, weights_for(m, cfg), log_sink);
}

}  // namespace bagforge
