#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ham/autodiff.hpp"

namespace ham::ad {

// Builds a scalar loss from the given parameter leaves. Must be deterministic.
using GraphBuilder = std::function<NodeId(Graph&, std::span<const NodeId>)>;

inline double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

inline double evaluate_loss(const GraphBuilder& builder, const std::vector<Tensor>& inputs) {
  Graph g;
  std::vector<NodeId> ids;
  ids.reserve(inputs.size());
  for (const Tensor& t : inputs) ids.push_back(g.param(t));
  return g.value(builder(g, ids)).item();
}

// Max over every input coordinate of |analytic - central difference| /
// max(|analytic|, |central difference|, 1e-8).
inline double gradcheck(const GraphBuilder& builder, const std::vector<Tensor>& inputs, double eps) {
  if (!(eps > 0.0)) throw ConfigError("gradcheck: eps must be positive");
  Graph g;
  std::vector<NodeId> ids;
  for (const Tensor& t : inputs) ids.push_back(g.param(t));
  const NodeId loss = builder(g, ids);
  const GradMap grads = g.backward(loss);

  double worst = 0.0;
  std::vector<Tensor> work = inputs;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    const Tensor& analytic = grads[ids[t]];
    for (std::size_t i = 0; i < inputs[t].size(); ++i) {
      const double orig = inputs[t][i];
      work[t][i] = orig + eps;
      const double up = evaluate_loss(builder, work);
      work[t][i] = orig - eps;
      const double down = evaluate_loss(builder, work);
      work[t][i] = orig;
      const double numeric = (up - down) / (2.0 * eps);
      if (!std::isfinite(numeric) || !std::isfinite(analytic[i]))
        throw NumericError("gradcheck: non-finite gradient at input " + std::to_string(t) + ", coordinate " +
                           std::to_string(i));
      worst = std::max(worst, relative_error(analytic[i], numeric));
    }
  }
  return worst;
}

struct OpCheckReport {
  OpKind kind;
  std::size_t instances = 0;
  double worst_relative_error = 0.0;
};

namespace detail {

inline Tensor random_tensor(std::mt19937_64& rng, Shape shape, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = u(rng);
  return t;
}

// Uniform magnitude in [lo,hi] with a random sign: keeps entries away from 0.
inline Tensor signed_tensor(std::mt19937_64& rng, Shape shape, double lo, double hi) {
  Tensor t = random_tensor(rng, std::move(shape), lo, hi);
  std::bernoulli_distribution coin(0.5);
  for (double& v : t.data())
    if (coin(rng)) v = -v;
  return t;
}

// Random projection to a scalar: sum(out * r). Projection weights are
// constants drawn from rng at build time, so the builder captures them.
inline NodeId project(Graph& g, NodeId out, const Tensor& weights) {
  const NodeId r = g.constant(weights);
  const NodeId prod = g.mul(out, r);
  return g.scale(g.mean(prod), static_cast<double>(weights.size()));
}

inline bool pool_windows_separated(const Tensor& x, double gap) {
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t oy = 0; oy < h / 2; ++oy)
      for (std::size_t ox = 0; ox < w / 2; ++ox) {
        std::vector<double> v;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) v.push_back(x.at(ch, 2 * oy + dy, 2 * ox + dx));
        std::sort(v.begin(), v.end());
        if (v[3] - v[2] < gap) return false;
      }
  return true;
}

// One randomized instance per op kind: inputs plus a builder producing a
// scalar from the op output.
inline std::pair<GraphBuilder, std::vector<Tensor>> make_instance(OpKind kind, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> small(2, 4);
  switch (kind) {
    case OpKind::Conv2d: {
      const std::size_t cin = small(rng), cout = small(rng), hw = 5;
      const std::size_t stride = std::uniform_int_distribution<std::size_t>(1, 2)(rng);
      const std::size_t pad = std::uniform_int_distribution<std::size_t>(0, 1)(rng);
      std::vector<Tensor> in{random_tensor(rng, {cin, hw, hw}, -1, 1), random_tensor(rng, {cout, cin, 3, 3}, -1, 1),
                             random_tensor(rng, {cout}, -1, 1)};
      const std::size_t o = (hw + 2 * pad - 3) / stride + 1;
      Tensor r = signed_tensor(rng, {cout, o, o}, 0.5, 1.5);
      return {[r, stride, pad](Graph& g, std::span<const NodeId> x) {
                return project(g, g.conv2d(x[0], x[1], x[2], stride, pad), r);
              },
              in};
    }
    case OpKind::Linear: {
      const std::size_t in_dim = small(rng) + 2, out_dim = small(rng);
      const bool batched = std::bernoulli_distribution(0.5)(rng);
      Shape xs = batched ? Shape{3, in_dim} : Shape{in_dim};
      std::vector<Tensor> in{random_tensor(rng, xs, -1, 1), random_tensor(rng, {out_dim, in_dim}, -1, 1),
                             random_tensor(rng, {out_dim}, -1, 1)};
      Tensor r = signed_tensor(rng, batched ? Shape{3, out_dim} : Shape{out_dim}, 0.5, 1.5);
      return {[r](Graph& g, std::span<const NodeId> x) { return project(g, g.linear(x[0], x[1], x[2]), r); }, in};
    }
    case OpKind::Relu: {
      Tensor x = signed_tensor(rng, {small(rng), 3, 3}, 1e-2, 1.0);
      Tensor r = signed_tensor(rng, x.shape(), 0.5, 1.5);
      return {[r](Graph& g, std::span<const NodeId> x) { return project(g, g.relu(x[0]), r); }, {x}};
    }
    case OpKind::MaxPool2d: {
      Tensor x;
      do {
        x = random_tensor(rng, {small(rng), 4, 4}, -1, 1);
      } while (!pool_windows_separated(x, 1e-3));
      Tensor r = signed_tensor(rng, {x.dim(0), 2, 2}, 0.5, 1.5);
      return {[r](Graph& g, std::span<const NodeId> x) { return project(g, g.maxpool2d(x[0]), r); }, {x}};
    }
    case OpKind::GlobalAvgPool: {
      Tensor x = random_tensor(rng, {small(rng), 3, 4}, -1, 1);
      Tensor r = signed_tensor(rng, {x.dim(0)}, 0.5, 1.5);
      return {[r](Graph& g, std::span<const NodeId> x) { return project(g, g.global_avg_pool(x[0]), r); }, {x}};
    }
    case OpKind::ChannelAffine: {
      const std::size_t c = small(rng);
      std::vector<Tensor> in{random_tensor(rng, {c, 3, 3}, -1, 1), random_tensor(rng, {c}, -1, 1),
                             random_tensor(rng, {c}, -1, 1)};
      Tensor r = signed_tensor(rng, {c, 3, 3}, 0.5, 1.5);
      return {[r](Graph& g, std::span<const NodeId> x) { return project(g, g.channel_affine(x[0], x[1], x[2]), r); },
              in};
    }
    case OpKind::Softmax: {
      const bool batched = std::bernoulli_distribution(0.5)(rng);
      Shape s = batched ? Shape{2, small(rng) + 1} : Shape{small(rng) + 1};
      Tensor x = random_tensor(rng, s, -2, 2);
      Tensor r = signed_tensor(rng, s, 0.5, 1.5);
      return {[r](Graph& g, std::span<const NodeId> x) { return project(g, g.softmax(x[0]), r); }, {x}};
    }
    case OpKind::Log: {
      Tensor x = random_tensor(rng, {small(rng) + 2}, 0.2, 2.0);
      Tensor r = signed_tensor(rng, x.shape(), 0.5, 1.5);
      return {[r](Graph& g, std::span<const NodeId> x) { return project(g, g.log(x[0]), r); }, {x}};
    }
    case OpKind::Add:
    case OpKind::Sub:
    case OpKind::Mul: {
      const std::size_t n = small(rng) + 2;
      const bool scalar_rhs = std::bernoulli_distribution(0.3)(rng);
      std::vector<Tensor> in{random_tensor(rng, {n}, -1, 1), random_tensor(rng, scalar_rhs ? Shape{1} : Shape{n}, -1, 1)};
      Tensor r = signed_tensor(rng, {n}, 0.5, 1.5);
      return {[r, kind](Graph& g, std::span<const NodeId> x) {
                const NodeId y = kind == OpKind::Add ? g.add(x[0], x[1])
                                 : kind == OpKind::Sub ? g.sub(x[0], x[1])
                                                       : g.mul(x[0], x[1]);
                return project(g, y, r);
              },
              in};
    }
    case OpKind::Scale: {
      Tensor x = random_tensor(rng, {small(rng) + 1}, -1, 1);
      const double f = std::uniform_real_distribution<double>(-3, 3)(rng);
      Tensor r = signed_tensor(rng, x.shape(), 0.5, 1.5);
      return {[r, f](Graph& g, std::span<const NodeId> x) { return project(g, g.scale(x[0], f), r); }, {x}};
    }
    case OpKind::Concat: {
      const std::size_t axis = std::uniform_int_distribution<std::size_t>(0, 1)(rng);
      Shape a{2, 3}, b{2, 3};
      a[axis] = small(rng);
      b[axis] = small(rng);
      std::vector<Tensor> in{random_tensor(rng, a, -1, 1), random_tensor(rng, b, -1, 1)};
      Shape o = a;
      o[axis] += b[axis];
      Tensor r = signed_tensor(rng, o, 0.5, 1.5);
      return {[r, axis](Graph& g, std::span<const NodeId> x) { return project(g, g.concat({x[0], x[1]}, axis), r); },
              in};
    }
    case OpKind::Gather: {
      Tensor x = random_tensor(rng, {small(rng), 3}, -1, 1);
      std::uniform_int_distribution<std::size_t> pick(0, x.size() - 1);
      std::vector<std::size_t> idx(7);
      for (auto& i : idx) i = pick(rng);
      Tensor r = signed_tensor(rng, {7}, 0.5, 1.5);
      return {[r, idx](Graph& g, std::span<const NodeId> x) { return project(g, g.gather(x[0], idx, {7}), r); }, {x}};
    }
    case OpKind::Mean: {
      Tensor x = random_tensor(rng, {small(rng), 2}, -1, 1);
      return {[](Graph& g, std::span<const NodeId> x) {
                const NodeId m = g.mean(x[0]);
                return g.mul(m, m);
              },
              {x}};
    }
    case OpKind::Abs: {
      Tensor x = signed_tensor(rng, {small(rng) + 2}, 1e-2, 1.0);
      Tensor r = signed_tensor(rng, x.shape(), 0.5, 1.5);
      return {[r](Graph& g, std::span<const NodeId> x) { return project(g, g.abs(x[0]), r); }, {x}};
    }
    case OpKind::Pow: {
      Tensor x = random_tensor(rng, {small(rng) + 2}, 0.2, 1.5);
      const double p = std::uniform_real_distribution<double>(0.5, 3.0)(rng);
      Tensor r = signed_tensor(rng, x.shape(), 0.5, 1.5);
      return {[r, p](Graph& g, std::span<const NodeId> x) { return project(g, g.pow(x[0], p), r); }, {x}};
    }
    case OpKind::Leaf: break;
  }
  throw ConfigError("gradcheck: no instance generator for op " + std::string(op_name(kind)));
}

}  // namespace detail

// Runs `instances` seeded gradchecks for every differentiable op kind.
inline std::vector<OpCheckReport> run_op_suite(std::size_t instances, double eps, std::uint64_t seed) {
  std::vector<OpCheckReport> out;
  for (OpKind kind : kDifferentiableOps) {
    std::mt19937_64 rng(seed ^ (0x9E3779B97F4A7C15ULL * (static_cast<std::uint64_t>(kind) + 1)));
    OpCheckReport rep{kind, instances, 0.0};
    for (std::size_t i = 0; i < instances; ++i) {
      auto [builder, inputs] = detail::make_instance(kind, rng);
      rep.worst_relative_error = std::max(rep.worst_relative_error, gradcheck(builder, inputs, eps));
    }
    out.push_back(rep);
  }
  return out;
}

}  // namespace ham::ad
