#pragma once

#include <string>
#include <vector>

#include "ham/autodiff.hpp"
#include "ham/tensor.hpp"

namespace ham {

// Named trainable tensors. Optimizers and checkpoints work on this shape.
struct ParamSet {
  std::vector<std::string> names;
  std::vector<Tensor> values;

  std::size_t size() const noexcept { return values.size(); }

  std::size_t add(std::string name, Tensor value) {
    names.push_back(std::move(name));
    values.push_back(std::move(value));
    return values.size() - 1;
  }

  std::size_t index(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return i;
    throw ConfigError("no parameter named '" + name + "'");
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& t : values) n += t.size();
    return n;
  }

  // Registers every tensor as a graph parameter leaf, in order.
  std::vector<ad::NodeId> bind(ad::Graph& g) const {
    std::vector<ad::NodeId> ids;
    ids.reserve(values.size());
    for (const auto& t : values) ids.push_back(g.param(t));
    return ids;
  }

  friend bool operator==(const ParamSet&, const ParamSet&) = default;
};

}  // namespace ham
