#pragma once

// Gradient verification gateway: the per-op suite plus an end-to-end check of
// loss -> generated weights -> hypernetwork parameters on a tiny network.

#include <optional>
#include <string>
#include <vector>

#include "ham/gradcheck.hpp"
#include "ham/models.hpp"

namespace ham {

inline ad::OpKind parse_op_kind(const std::string& name) {
  for (ad::OpKind k : ad::kDifferentiableOps)
    if (ad::op_name(k) == name) return k;
  throw ConfigError("unknown op kind '" + name + "'");
}

struct EndToEndCheck {
  std::size_t task_params = 0;
  std::size_t hyper_params = 0;
  double worst_relative_error = 0.0;
};

// 4 modalities, widths {2,2,2} on 8x8 inputs, mu = 1011, -log p(label).
inline EndToEndCheck hypernet_end_to_end_check(std::uint64_t seed, double eps = 1e-6) {
  TaskNetConfig cfg;
  cfg.widths = {2, 2, 2};
  cfg.height = 8;
  cfg.width = 8;
  const auto layout = WeightLayout::build(cfg);
  Rng rng(seed);
  const auto h = init_hypernet(layout, rng, HyperInit{0.5, true});
  const auto mu = ModalityMask::parse("1011");
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Tensor x({mu.popcount(), cfg.height, cfg.width});
  for (double& v : x.data()) v = u(rng);
  const std::size_t label = 1;
  const ad::GraphBuilder builder = [&](ad::Graph& g, std::span<const ad::NodeId> phi) {
    const std::vector<ad::NodeId> p(phi.begin(), phi.end());
    const ad::NodeId theta = hyper_task_weights(g, p, mu, layout);
    const auto tp = bind_task_params(g, theta, layout.restricted(mu));
    const ad::NodeId prob = g.softmax(task_logits(g, tp, g.constant(x)));
    return g.scale(g.log(g.gather(prob, {label}, {1})), -1.0);
  };
  EndToEndCheck r;
  r.task_params = layout.total_size();
  r.hyper_params = h.params.scalar_count();
  r.worst_relative_error = ad::gradcheck(builder, h.params.values, eps);
  return r;
}

inline constexpr double kOpTolerance = 1e-5;
inline constexpr double kEndToEndTolerance = 1e-4;

struct GradcheckSuite {
  std::vector<ad::OpCheckReport> ops;
  EndToEndCheck end_to_end;

  std::vector<std::string> failures() const {
    std::vector<std::string> out;
    for (const auto& r : ops)
      if (!(r.worst_relative_error < kOpTolerance)) out.emplace_back(ad::op_name(r.kind));
    if (!(end_to_end.worst_relative_error < kEndToEndTolerance)) out.emplace_back("hypernet_end_to_end");
    return out;
  }
};

// `corrupt` injects a backward fault into one op kind for the duration of the run.
inline GradcheckSuite run_gradcheck_suite(std::size_t instances, std::uint64_t seed,
                                          std::optional<ad::OpKind> corrupt = std::nullopt) {
  struct Guard {
    std::optional<ad::OpKind> saved = ad::testing::corrupt_backward;
    ~Guard() { ad::testing::corrupt_backward = saved; }
  } guard;
  ad::testing::corrupt_backward = corrupt;
  GradcheckSuite s;
  s.ops = ad::run_op_suite(instances, 1e-6, seed);
  s.end_to_end = hypernet_end_to_end_check(seed);
  return s;
}

}  // namespace ham
