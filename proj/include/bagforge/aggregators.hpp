#pragma once

// Instance-embedding aggregators: average pooling (BGAP), max pooling
// (BGMP), attention pooling (MILAtt) and a transformer aggregator with class
// token and convolutional positional encoding (TransMIL).

#include <array>
#include <cmath>
#include <cstddef>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include "bagforge/bag.hpp"
#include "bagforge/error.hpp"
#include "bagforge/random.hpp"
#include "bagforge/tensor.hpp"

namespace bagforge {

enum class AggregatorKind { bgap, bgmp, milatt, transmil };

inline std::string_view to_string(AggregatorKind kind) {
  switch (kind) {
    case AggregatorKind::bgap: return "bgap";
    case AggregatorKind::bgmp: return "bgmp";
    case AggregatorKind::milatt: return "milatt";
    case AggregatorKind::transmil: return "transmil";
  }
  return "?";
}

inline AggregatorKind parse_aggregator(std::string_view name) {
  for (auto kind : {AggregatorKind::bgap, AggregatorKind::bgmp,
                    AggregatorKind::milatt, AggregatorKind::transmil}) {
    if (name == to_string(kind)) return kind;
  }
  throw ConfigError("unknown aggregator '" + std::string(name) +
                    "' (expected bgap, bgmp, milatt or transmil)");
}

/// Architecture of one aggregator + classifier configuration.
struct ModelConfig {
  AggregatorKind aggregator = AggregatorKind::bgap;
  std::size_t input_dim = 512;   // d
  std::size_t num_classes = 4;   // K
  std::size_t attention_hidden = 128;
  std::size_t d_model = 512;
  std::size_t layers = 2;
  std::size_t heads = 8;

  /// Width of the bag embedding fed to the linear classifier.
  std::size_t embedding_dim() const {
    return aggregator == AggregatorKind::transmil ? d_model : input_dim;
  }

  void validate() const {
    if (input_dim == 0) throw ConfigError("input dimension must be positive");
    if (num_classes < 2) throw ConfigError("need at least 2 classes");
    if (aggregator == AggregatorKind::milatt && attention_hidden < 1) {
      throw ConfigError("attention hidden size must be at least 1");
    }
    if (aggregator == AggregatorKind::transmil) {
      if (layers < 1) throw ConfigError("transformer needs at least one layer");
      if (heads < 1 || d_model == 0 || d_model % heads != 0) {
        throw ConfigError("d_model " + std::to_string(d_model) +
                          " is not divisible by " + std::to_string(heads) + " heads");
      }
    }
  }
};

template <class T>
using NamedTensors = std::vector<std::pair<std::string, BasicTensor<T>>>;

template <class T>
struct AttentionPoolParams {
  BasicTensor<T> projection;  // V, d x h
  BasicTensor<T> score;       // w, h x 1
};

template <class T>
struct TransformerLayerParams {
  BasicTensor<T> norm_gamma, norm_beta;  // 1 x D
  BasicTensor<T> qkv;                    // D x 3D, no bias
  BasicTensor<T> out_weight, out_bias;   // D x D, 1 x D
};

inline constexpr std::array<std::size_t, 3> kPositionalKernels{7, 5, 3};

template <class T>
struct TransMilParams {
  std::size_t heads = 8;
  BasicTensor<T> in_weight, in_bias;  // d x D, 1 x D
  BasicTensor<T> class_token;         // 1 x D
  std::vector<TransformerLayerParams<T>> layers;
  std::array<BasicTensor<T>, 3> pos_kernel;  // D x k^2 per kernel size
  std::array<BasicTensor<T>, 3> pos_bias;    // 1 x D
  BasicTensor<T> norm_gamma, norm_beta;
  BasicTensor<T> head_weight, head_bias;  // D x K, 1 x K
};

template <class T>
struct AggregatorParams {
  AggregatorKind kind = AggregatorKind::bgap;
  std::variant<std::monostate, AttentionPoolParams<T>, TransMilParams<T>> weights;

  NamedTensors<T> named() const {
    NamedTensors<T> out;
    if (const auto* att = std::get_if<AttentionPoolParams<T>>(&weights)) {
      out.emplace_back("agg.attention.V", att->projection);
      out.emplace_back("agg.attention.w", att->score);
    } else if (const auto* tm = std::get_if<TransMilParams<T>>(&weights)) {
      out.emplace_back("agg.proj.weight", tm->in_weight);
      out.emplace_back("agg.proj.bias", tm->in_bias);
      out.emplace_back("agg.cls_token", tm->class_token);
      for (std::size_t l = 0; l < tm->layers.size(); ++l) {
        const auto p = "agg.layers." + std::to_string(l) + ".";
        const auto& layer = tm->layers[l];
        out.emplace_back(p + "norm.gamma", layer.norm_gamma);
        out.emplace_back(p + "norm.beta", layer.norm_beta);
        out.emplace_back(p + "attn.qkv", layer.qkv);
        out.emplace_back(p + "attn.out.weight", layer.out_weight);
        out.emplace_back(p + "attn.out.bias", layer.out_bias);
      }
      for (std::size_t c = 0; c < kPositionalKernels.size(); ++c) {
        const auto p = "agg.pos.conv" + std::to_string(kPositionalKernels[c]) + ".";
        out.emplace_back(p + "kernel", tm->pos_kernel[c]);
        out.emplace_back(p + "bias", tm->pos_bias[c]);
      }
      out.emplace_back("agg.norm.gamma", tm->norm_gamma);
      out.emplace_back("agg.norm.beta", tm->norm_beta);
      out.emplace_back("agg.head.weight", tm->head_weight);
      out.emplace_back("agg.head.bias", tm->head_bias);
    }
    return out;
  }
};

/// Applies `fn` to every tensor, preserving structure. Used for cloning and
/// precision casts.
template <class To, class From, class Fn>
AggregatorParams<To> map_tensors(const AggregatorParams<From>& src, Fn&& fn) {
  AggregatorParams<To> dst;
  dst.kind = src.kind;
  if (const auto* att = std::get_if<AttentionPoolParams<From>>(&src.weights)) {
    dst.weights = AttentionPoolParams<To>{fn(att->projection), fn(att->score)};
  } else if (const auto* tm = std::get_if<TransMilParams<From>>(&src.weights)) {
    TransMilParams<To> out;
    out.heads = tm->heads;
    out.in_weight = fn(tm->in_weight);
    out.in_bias = fn(tm->in_bias);
    out.class_token = fn(tm->class_token);
    for (const auto& layer : tm->layers) {
      out.layers.push_back({fn(layer.norm_gamma), fn(layer.norm_beta), fn(layer.qkv),
                            fn(layer.out_weight), fn(layer.out_bias)});
    }
    for (std::size_t c = 0; c < 3; ++c) {
      out.pos_kernel[c] = fn(tm->pos_kernel[c]);
      out.pos_bias[c] = fn(tm->pos_bias[c]);
    }
    out.norm_gamma = fn(tm->norm_gamma);
    out.norm_beta = fn(tm->norm_beta);
    out.head_weight = fn(tm->head_weight);
    out.head_bias = fn(tm->head_bias);
    dst.weights = std::move(out);
  }
  return dst;
}

namespace detail {

template <class T>
BasicTensor<T> uniform_param(SplitMix64& rng, std::size_t rows, std::size_t cols,
                             double bound) {
  std::vector<T> v(rows * cols);
  for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
  return BasicTensor<T>::parameter(rows, cols, std::move(v));
}

template <class T>
BasicTensor<T> constant_param(std::size_t rows, std::size_t cols, T value) {
  return BasicTensor<T>::parameter(rows, cols, std::vector<T>(rows * cols, value));
}

/// Linear-layer weight and bias, both U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
template <class T>
std::pair<BasicTensor<T>, BasicTensor<T>> linear_params(SplitMix64& rng,
                                                        std::size_t in,
                                                        std::size_t out) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  auto w = uniform_param<T>(rng, in, out, bound);
  auto b = uniform_param<T>(rng, 1, out, bound);
  return {std::move(w), std::move(b)};
}

}  // namespace detail

template <class T>
AggregatorParams<T> init_aggregator(const ModelConfig& cfg, SplitMix64& rng) {
  cfg.validate();
  AggregatorParams<T> params;
  params.kind = cfg.aggregator;
  if (cfg.aggregator == AggregatorKind::milatt) {
    const double b_in = 1.0 / std::sqrt(static_cast<double>(cfg.input_dim));
    const double b_hidden = 1.0 / std::sqrt(static_cast<double>(cfg.attention_hidden));
    params.weights = AttentionPoolParams<T>{
        detail::uniform_param<T>(rng, cfg.input_dim, cfg.attention_hidden, b_in),
        detail::uniform_param<T>(rng, cfg.attention_hidden, 1, b_hidden)};
  } else if (cfg.aggregator == AggregatorKind::transmil) {
    const std::size_t dm = cfg.d_model;
    TransMilParams<T> tm;
    tm.heads = cfg.heads;
    std::tie(tm.in_weight, tm.in_bias) = detail::linear_params<T>(rng, cfg.input_dim, dm);
    {
      std::vector<T> token(dm);
      for (auto& x : token) x = static_cast<T>(rng.gaussian());
      tm.class_token = BasicTensor<T>::parameter(1, dm, std::move(token));
    }
    const double b_model = 1.0 / std::sqrt(static_cast<double>(dm));
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      TransformerLayerParams<T> layer;
      layer.norm_gamma = detail::constant_param<T>(1, dm, T(1));
      layer.norm_beta = detail::constant_param<T>(1, dm, T(0));
      layer.qkv = detail::uniform_param<T>(rng, dm, 3 * dm, b_model);
      std::tie(layer.out_weight, layer.out_bias) = detail::linear_params<T>(rng, dm, dm);
      tm.layers.push_back(std::move(layer));
    }
    for (std::size_t c = 0; c < 3; ++c) {
      const std::size_t k = kPositionalKernels[c];
      const double bound = 1.0 / static_cast<double>(k);  // fan_in = k*k
      tm.pos_kernel[c] = detail::uniform_param<T>(rng, dm, k * k, bound);
      tm.pos_bias[c] = detail::uniform_param<T>(rng, 1, dm, bound);
    }
    tm.norm_gamma = detail::constant_param<T>(1, dm, T(1));
    tm.norm_beta = detail::constant_param<T>(1, dm, T(0));
    std::tie(tm.head_weight, tm.head_bias) =
        detail::linear_params<T>(rng, dm, cfg.num_classes);
    params.weights = std::move(tm);
  }
  return params;
}

// ---------------------------------------------------------------------------

template <class T>
BasicBagEmbedding<T> bgap(Tape& tape, const BasicBag<T>& bag) {
  if (!bag.instances.defined() || bag.size() == 0) {
    throw DomainError("bgap: empty bag '" + bag.core_id + "'");
  }
  return {mean_rows(tape, bag.instances), std::nullopt};
}

/// Max pooling; on ties the lowest instance index takes the gradient.
template <class T>
BasicBagEmbedding<T> bgmp(Tape& tape, const BasicBag<T>& bag) {
  if (!bag.instances.defined() || bag.size() == 0) {
    throw DomainError("bgmp: empty bag '" + bag.core_id + "'");
  }
  return {max_rows(tape, bag.instances), std::nullopt};
}

/// a = softmax_n(w^T tanh(V^T x_n)), output = sum_n a_n x_n.
template <class T>
BasicBagEmbedding<T> attention_pool(Tape& tape, const BasicBag<T>& bag,
                                    const AggregatorParams<T>& params) {
  const auto* att = std::get_if<AttentionPoolParams<T>>(&params.weights);
  if (params.kind != AggregatorKind::milatt || att == nullptr) {
    throw ConfigError("attention_pool: parameters are not MILAtt");
  }
  if (att->projection.cols() < 1) {
    throw ConfigError("attention_pool: hidden size must be at least 1");
  }
  if (bag.size() == 0) throw DomainError("attention_pool: empty bag '" + bag.core_id + "'");
  if (bag.dim() != att->projection.rows()) {
    throw ShapeError("attention_pool: bag dimension " + std::to_string(bag.dim()) +
                     " does not match parameters " + att->projection.shape().str());
  }
  auto hidden = tanh(tape, matmul(tape, bag.instances, att->projection));  // N x h
  auto scores = transpose(tape, matmul(tape, hidden, att->score));         // 1 x N
  auto weights = softmax(tape, scores);
  auto pooled = matmul(tape, weights, bag.instances);  // 1 x d
  return {pooled, weights};
}

/// Instance order after squaring a sequence of n tokens to the next perfect
/// square: the originals, then indices 0, 1, ... repeated cyclically.
inline std::vector<std::size_t> squared_sequence_indices(std::size_t n) {
  if (n == 0) throw DomainError("squared_sequence_indices: empty sequence");
  std::size_t side = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(n))));
  while (side * side < n) ++side;
  while (side > 1 && (side - 1) * (side - 1) >= n) --side;
  std::vector<std::size_t> idx(side * side);
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i < n ? i : (i - n) % n;
  return idx;
}

namespace detail {

template <class T>
BasicTensor<T> transformer_layer(Tape& tape, const BasicTensor<T>& x,
                                 const TransformerLayerParams<T>& p,
                                 std::size_t heads) {
  const std::size_t dm = x.cols();
  const std::size_t dh = dm / heads;
  const T inv_scale = T(1) / std::sqrt(static_cast<T>(dh));
  auto normed = layer_norm(tape, x, p.norm_gamma, p.norm_beta);
  auto qkv = matmul(tape, normed, p.qkv);
  std::vector<BasicTensor<T>> outputs;
  outputs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    auto q = slice_cols(tape, qkv, h * dh, (h + 1) * dh);
    auto k = slice_cols(tape, qkv, dm + h * dh, dm + (h + 1) * dh);
    auto v = slice_cols(tape, qkv, 2 * dm + h * dh, 2 * dm + (h + 1) * dh);
    auto scores = scale(tape, matmul(tape, q, transpose(tape, k)), inv_scale);
    outputs.push_back(matmul(tape, softmax(tape, scores), v));
  }
  auto mixed = add_row(tape, matmul(tape, concat_cols(tape, outputs), p.out_weight),
                       p.out_bias);
  return add(tape, x, mixed);
}

// Class token passes through; the remaining side*side tokens get the three
// per-channel convolutions added to themselves.
template <class T>
BasicTensor<T> positional_encoding(Tape& tape, const BasicTensor<T>& x,
                                   const TransMilParams<T>& p, std::size_t side) {
  auto cls = slice_rows(tape, x, 0, 1);
  auto grid = slice_rows(tape, x, 1, x.rows());
  auto acc = grid;
  for (std::size_t c = 0; c < 3; ++c) {
    acc = add(tape, acc,
              depthwise_conv2d(tape, grid, side, p.pos_kernel[c], p.pos_bias[c],
                               kPositionalKernels[c]));
  }
  return concat_rows(tape, cls, acc);
}

}  // namespace detail

/// Full transformer aggregator including its classification head; returns
/// 1 x K logits.
template <class T>
BasicTensor<T> transmil_forward(Tape& tape, const BasicBag<T>& bag,
                                const AggregatorParams<T>& params) {
  const auto* tm = std::get_if<TransMilParams<T>>(&params.weights);
  if (params.kind != AggregatorKind::transmil || tm == nullptr) {
    throw ConfigError("transmil_forward: parameters are not TransMIL");
  }
  if (!bag.instances.defined() || bag.size() == 0) {
    throw DomainError("transmil_forward: empty bag '" + bag.core_id + "'");
  }
  if (bag.dim() != tm->in_weight.rows()) {
    throw ShapeError("transmil_forward: bag dimension " + std::to_string(bag.dim()) +
                     " does not match projection " + tm->in_weight.shape().str());
  }
  const std::size_t heads = tm->heads;
  if (heads == 0 || tm->class_token.cols() % heads != 0) {
    throw ConfigError("transmil_forward: d_model not divisible by head count");
  }
  auto h = add_row(tape, matmul(tape, bag.instances, tm->in_weight), tm->in_bias);
  auto order = squared_sequence_indices(bag.size());
  const auto side = static_cast<std::size_t>(std::lround(std::sqrt(order.size())));
  h = gather_rows(tape, h, std::move(order));
  h = concat_rows(tape, tm->class_token, h);
  h = detail::transformer_layer(tape, h, tm->layers.front(), heads);
  h = detail::positional_encoding(tape, h, *tm, side);
  for (std::size_t l = 1; l < tm->layers.size(); ++l) {
    h = detail::transformer_layer(tape, h, tm->layers[l], heads);
  }
  auto cls = layer_norm(tape, slice_rows(tape, h, 0, 1), tm->norm_gamma, tm->norm_beta);
  return add_row(tape, matmul(tape, cls, tm->head_weight), tm->head_bias);
}

}  // namespace bagforge
