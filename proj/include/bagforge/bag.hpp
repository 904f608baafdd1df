#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>

#include "bagforge/error.hpp"
#include "bagforge/tensor.hpp"

namespace bagforge {

/// One tissue core: N patch embeddings (rows) of dimension d and a single
/// bag-level label.
template <class T>
struct BasicBag {
  std::string core_id;
  std::uint32_t label = 0;
  BasicTensor<T> instances;

  std::size_t size() const { return instances.rows(); }
  std::size_t dim() const { return instances.cols(); }
};

using Bag = BasicBag<float>;

template <class T>
struct BasicBagEmbedding {
  BasicTensor<T> vector;                    // 1 x d_model
  std::optional<BasicTensor<T>> attention;  // 1 x N, attention pooling only
};

using BagEmbedding = BasicBagEmbedding<float>;

template <class T>
void validate_bag(const BasicBag<T>& bag, std::uint32_t num_classes) {
  if (!bag.instances.defined() || bag.size() == 0) {
    throw DomainError("bag '" + bag.core_id + "' has no instances");
  }
  if (bag.label >= num_classes) {
    throw DomainError("bag '" + bag.core_id + "' label " +
                      std::to_string(bag.label) + " is not below K=" +
                      std::to_string(num_classes));
  }
  for (const T v : bag.instances.data()) {
    if (std::isnan(v)) throw DomainError("bag '" + bag.core_id + "' contains NaN");
  }
}

template <class To, class From>
BasicBag<To> bag_cast(const BasicBag<From>& bag) {
  return {bag.core_id, bag.label, tensor_cast<To>(bag.instances)};
}

}  // namespace bagforge
