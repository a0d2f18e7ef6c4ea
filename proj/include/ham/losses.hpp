#pragma once

#include <cmath>
#include <vector>

#include "ham/autodiff.hpp"
#include "ham/error.hpp"

namespace ham {

// N / n_c per class (inverse class frequency relative to the total).
inline std::vector<double> raw_class_weights(const std::vector<std::size_t>& labels, std::size_t classes) {
  std::vector<double> counts(classes, 0.0);
  for (std::size_t y : labels) {
    if (y >= classes) throw ConfigError("label " + std::to_string(y) + " out of range");
    counts[y] += 1.0;
  }
  std::vector<double> w(classes);
  for (std::size_t c = 0; c < classes; ++c) {
    if (counts[c] == 0.0) throw ProtocolError("class " + std::to_string(c) + " has no training samples");
    w[c] = static_cast<double>(labels.size()) / counts[c];
  }
  return w;
}

// Inverse-frequency weights rescaled to mean 1.
inline std::vector<double> class_weights(const std::vector<std::size_t>& labels, std::size_t classes) {
  auto w = raw_class_weights(labels, classes);
  double mean = 0.0;
  for (double v : w) mean += v / static_cast<double>(classes);
  for (double& v : w) v /= mean;
  return w;
}

// -w_y * (1 - p_y)^gamma * log(p_y) with p = softmax(logits). Shape [1].
inline ad::NodeId focal_loss(ad::Graph& g, ad::NodeId logits, std::size_t label, double weight, double gamma) {
  if (gamma < 0.0) throw ConfigError("focal loss: gamma must be non-negative");
  const std::size_t C = g.value(logits).size();
  if (label >= C) throw ConfigError("focal loss: label out of range");
  const ad::NodeId p = g.softmax(logits);
  const ad::NodeId py = g.gather(p, {label}, {1});
  ad::NodeId term = g.log(py);
  if (gamma != 0.0) {
    const ad::NodeId one_minus = g.sub(g.constant(Tensor::scalar(1.0)), py);
    term = g.mul(g.pow(one_minus, gamma), term);
  }
  return g.scale(term, -weight);
}

inline ad::NodeId cross_entropy(ad::Graph& g, ad::NodeId logits, std::size_t label) {
  return focal_loss(g, logits, label, 1.0, 0.0);
}

// Mean of scalar nodes.
inline ad::NodeId mean_of(ad::Graph& g, const std::vector<ad::NodeId>& scalars) {
  if (scalars.empty()) throw ConfigError("mean of an empty loss list");
  return g.mean(g.concat(std::span<const ad::NodeId>(scalars), 0));
}

// Value-level focal loss for a single logit vector.
inline double focal_loss_value(const Tensor& logits, std::size_t label, double weight, double gamma) {
  ad::Graph g;
  return g.value(focal_loss(g, g.constant(logits), label, weight, gamma)).item();
}

}  // namespace ham
