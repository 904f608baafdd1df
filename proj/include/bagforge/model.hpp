#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "bagforge/aggregators.hpp"
#include "bagforge/bag.hpp"
#include "bagforge/error.hpp"
#include "bagforge/random.hpp"
#include "bagforge/tensor.hpp"

namespace bagforge {

template <class T>
struct LinearHead {
  BasicTensor<T> weight;  // embedding_dim x K
  BasicTensor<T> bias;    // 1 x K
};

/// Trainable state of one aggregator + classifier. TransMIL carries its own
/// head inside the aggregator, so `classifier` is empty for it.
template <class T>
struct BasicModelParams {
  ModelConfig config;
  AggregatorParams<T> aggregator;
  std::optional<LinearHead<T>> classifier;

  NamedTensors<T> named() const {
    auto out = aggregator.named();
    if (classifier) {
      out.emplace_back("classifier.weight", classifier->weight);
      out.emplace_back("classifier.bias", classifier->bias);
    }
    return out;
  }

  std::vector<BasicTensor<T>> tensors() const {
    std::vector<BasicTensor<T>> out;
    for (auto& [name, t] : named()) out.push_back(t);
    return out;
  }

  void zero_grad() const {
    for (auto& [name, t] : named()) t.zero_grad();
  }
};

using ModelParams = BasicModelParams<float>;

template <class To, class From, class Fn>
BasicModelParams<To> map_tensors(const BasicModelParams<From>& src, Fn&& fn) {
  BasicModelParams<To> dst;
  dst.config = src.config;
  dst.aggregator = map_tensors<To>(src.aggregator, fn);
  if (src.classifier) {
    dst.classifier = LinearHead<To>{fn(src.classifier->weight), fn(src.classifier->bias)};
  }
  return dst;
}

/// Deep copy; the copy shares no storage with `params`.
template <class T>
BasicModelParams<T> clone(const BasicModelParams<T>& params) {
  return map_tensors<T>(params, [](const BasicTensor<T>& t) { return t.clone(); });
}

template <class To, class From>
BasicModelParams<To> model_cast(const BasicModelParams<From>& params) {
  return map_tensors<To>(params,
                         [](const BasicTensor<From>& t) { return tensor_cast<To>(t); });
}

/// Seeded initialisation; the aggregator draws first, then the classifier.
template <class T = float>
BasicModelParams<T> init_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  auto rng = SplitMix64::derive(seed, "init");
  BasicModelParams<T> params;
  params.config = cfg;
  params.aggregator = init_aggregator<T>(cfg, rng);
  if (cfg.aggregator != AggregatorKind::transmil) {
    auto [w, b] = detail::linear_params<T>(rng, cfg.embedding_dim(), cfg.num_classes);
    params.classifier = LinearHead<T>{std::move(w), std::move(b)};
  }
  return params;
}

/// Bag embedding for the pooling aggregators.
template <class T>
BasicBagEmbedding<T> aggregate(Tape& tape, const BasicBag<T>& bag,
                               const AggregatorParams<T>& params) {
  switch (params.kind) {
    case AggregatorKind::bgap: return bgap(tape, bag);
    case AggregatorKind::bgmp: return bgmp(tape, bag);
    case AggregatorKind::milatt: return attention_pool(tape, bag, params);
    case AggregatorKind::transmil: break;
  }
  throw ConfigError("aggregate: TransMIL produces logits, use forward_logits");
}

template <class T>
BasicTensor<T> forward_logits(Tape& tape, const BasicBag<T>& bag,
                              const BasicModelParams<T>& params) {
  if (bag.dim() != params.config.input_dim) {
    throw ShapeError("bag '" + bag.core_id + "' has dimension " +
                     std::to_string(bag.dim()) + ", model expects " +
                     std::to_string(params.config.input_dim));
  }
  if (params.aggregator.kind == AggregatorKind::transmil) {
    return transmil_forward(tape, bag, params.aggregator);
  }
  const auto embedding = aggregate(tape, bag, params.aggregator);
  return add_row(tape, matmul(tape, embedding.vector, params.classifier->weight),
                 params.classifier->bias);
}

/// Softmax class scores S, 1 x K.
template <class T>
BasicTensor<T> forward_classify(Tape& tape, const BasicBag<T>& bag,
                                const BasicModelParams<T>& params) {
  return softmax(tape, forward_logits(tape, bag, params));
}

/// Index of the largest score; ties go to the lowest index.
template <class T>
std::uint32_t predict_label(const BasicTensor<T>& scores) {
  std::uint32_t best = 0;
  for (std::size_t k = 1; k < scores.size(); ++k) {
    if (scores.data()[k] > scores.data()[best]) best = static_cast<std::uint32_t>(k);
  }
  return best;
}

/// Per-class loss weights.
struct ClassWeights {
  std::vector<double> w;

  static ClassWeights uniform(std::size_t k) { return {std::vector<double>(k, 1.0)}; }
  std::size_t size() const { return w.size(); }
};

/// w_k = T / (K * n_k) with T the total count: inversely proportional to
/// class frequency, with count-weighted mean 1.
inline ClassWeights class_weights(std::span<const std::size_t> counts) {
  if (counts.empty()) throw DomainError("class_weights: no classes");
  const double total = std::accumulate(counts.begin(), counts.end(), 0.0);
  const double k = static_cast<double>(counts.size());
  ClassWeights out;
  for (std::size_t c = 0; c < counts.size(); ++c) {
    if (counts[c] == 0) {
      throw DomainError("class_weights: class " + std::to_string(c) + " has no samples");
    }
    out.w.push_back(total / (k * static_cast<double>(counts[c])));
  }
  return out;
}

inline constexpr double kProbabilityFloor = 1e-12;

/// L = -(1/K) * sum_k w_k Y_k log(S_k), with S clamped below at 1e-12.
template <class T>
BasicTensor<T> weighted_ce(Tape& tape, const BasicTensor<T>& scores,
                           std::span<const T> one_hot, const ClassWeights& weights) {
  const std::size_t k = scores.cols();
  if (scores.rows() != 1) throw ShapeError("weighted_ce: scores must be 1 x K");
  if (one_hot.size() != k || weights.size() != k) {
    throw ShapeError("weighted_ce: scores " + scores.shape().str() + ", target of " +
                     std::to_string(one_hot.size()) + " and " +
                     std::to_string(weights.size()) + " weights disagree");
  }
  std::optional<std::size_t> label;
  for (std::size_t c = 0; c < k; ++c) {
    if (one_hot[c] == T(1) && !label) {
      label = c;
    } else if (one_hot[c] != T(0)) {
      throw DomainError("weighted_ce: target is not one-hot");
    }
  }
  if (!label) throw DomainError("weighted_ce: target is not one-hot");
  auto log_s = log_clamped(tape, scores, static_cast<T>(kProbabilityFloor));
  const T factor = static_cast<T>(-weights.w[*label] / static_cast<double>(k));
  return scale(tape, select(tape, log_s, 0, *label), factor);
}

template <class T>
BasicTensor<T> weighted_ce(Tape& tape, const BasicTensor<T>& scores, std::uint32_t label,
                           const ClassWeights& weights) {
  if (label >= scores.cols()) {
    throw DomainError("weighted_ce: label " + std::to_string(label) + " outside K=" +
                      std::to_string(scores.cols()));
  }
  std::vector<T> one_hot(scores.cols(), T(0));
  one_hot[label] = T(1);
  return weighted_ce(tape, scores, std::span<const T>(one_hot), weights);
}

struct ParamCount {
  std::size_t total = 0;
  std::vector<std::pair<std::string, std::size_t>> breakdown;
};

template <class T>
ParamCount count_params(const NamedTensors<T>& tensors) {
  ParamCount out;
  for (const auto& [name, t] : tensors) {
    if (!t.requires_grad()) continue;
    out.breakdown.emplace_back(name, t.size());
    out.total += t.size();
  }
  return out;
}

template <class T>
ParamCount count_params(const AggregatorParams<T>& params) {
  return count_params<T>(params.named());
}

template <class T>
ParamCount count_params(const BasicModelParams<T>& params) {
  return count_params<T>(params.named());
}

}  // namespace bagforge
