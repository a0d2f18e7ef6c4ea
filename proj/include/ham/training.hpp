#pragma once

// The four training procedures, the mu-resampling schedule, prediction and
// the cross-validated choice of the iteration budget.

#include <algorithm>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include "ham/data.hpp"
#include "ham/losses.hpp"
#include "ham/metrics.hpp"
#include "ham/models.hpp"
#include "ham/optim.hpp"
#include "ham/rng.hpp"

namespace ham {

enum class Method { Ham, Standard, Dropout, FeatImpute };

inline constexpr Method kAllMethods[] = {Method::Ham, Method::Standard, Method::Dropout, Method::FeatImpute};

inline const char* method_name(Method m) {
  switch (m) {
    case Method::Ham: return "ham";
    case Method::Standard: return "standard";
    case Method::Dropout: return "dropout";
    case Method::FeatImpute: return "featimpute";
  }
  return "?";
}

inline Method parse_method(const std::string& s) {
  for (Method m : kAllMethods)
    if (s == method_name(m)) return m;
  throw ConfigError("unknown method '" + s + "' (expected ham, standard, dropout or featimpute)");
}

inline OptimizerKind default_optimizer(Method m) { return m == Method::Ham ? OptimizerKind::RmsProp : OptimizerKind::Adam; }

struct TrainConfig {
  std::size_t batch_size = 16;
  double lr = 1e-4;
  std::size_t n_it = 10;  // iterations between mu re-selections (HAM)
  double gamma = 2.0;
  std::size_t max_iterations = 1000;
  std::size_t eval_every = 250;  // cross-validation grid step
  std::size_t cv_folds = 5;
  AugmentationConfig augmentation;
  std::uint64_t seed = 0;
  std::vector<std::size_t> widths{8, 16, 32};
  std::size_t kernel = 3;
  double lambda_shared = 0.1;
  double lambda_spec = 0.02;
  HyperInit hyper_init;
  std::optional<OptimizerKind> optimizer;  // unset: per-method default

  void validate() const {
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (n_it < 1) throw ConfigError("n_it must be >= 1");
    if (!(lr > 0.0)) throw ConfigError("lr must be > 0");
    if (gamma < 0.0) throw ConfigError("gamma must be >= 0");
    if (eval_every < 1) throw ConfigError("eval_every must be >= 1");
    if (lambda_shared < 0.0 || lambda_spec < 0.0) throw ConfigError("loss weights must be >= 0");
    augmentation.validate();
  }

  OptimizerKind optimizer_for(Method m) const { return optimizer.value_or(default_optimizer(m)); }
};

inline TaskNetConfig net_config(const Dataset& ds, const TrainConfig& cfg) {
  TaskNetConfig n;
  n.m = ds.m;
  n.classes = ds.classes;
  n.widths = cfg.widths;
  n.kernel = cfg.kernel;
  n.height = ds.height;
  n.width = ds.width;
  n.validate();
  return n;
}

// Free task network (Standard, Dropout): a single flat "theta" parameter.
struct TaskModel {
  ParamSet params;
  WeightLayout layout;
};

using ModelParams = std::variant<HyperNetParams, TaskModel, FeatImputeModel>;

struct TrainedModel {
  Method method = Method::Ham;
  ModelParams params;

  const ParamSet& param_set() const {
    return std::visit([](const auto& p) -> const ParamSet& { return p.params; }, params);
  }
  ParamSet& param_set() {
    return std::visit([](auto& p) -> ParamSet& { return p.params; }, params);
  }
};

struct RunRecord {
  std::string method;
  std::uint64_t seed = 0;
  std::vector<double> loss_history;
  std::size_t chosen_iterations = 0;
  std::vector<std::size_t> reselections;          // iterations at which a new mu was drawn
  std::vector<ModalityMask> mu_log;               // mu per iteration (empty mask: none drawn)
  std::vector<std::vector<std::size_t>> batches;  // dataset indices per iteration
  std::vector<std::pair<std::size_t, ConfusionMatrix>> evaluations;
  std::size_t optimizer_param_count = 0;          // scalars tracked by the optimizer
};

struct TrainResult {
  TrainedModel model;
  RunRecord record;
};

// Called after every `eval_every` iterations with the iteration count;
// returning false ends training early.
using CheckpointHook = std::function<bool(std::size_t, const TrainedModel&)>;

// ---------------------------------------------------------------------------
// mu selection

inline ModalityMask sample_mu(Rng& rng, const std::vector<ModalityMask>& pool) {
  if (pool.empty()) throw ConfigError("sample_mu: empty pattern pool");
  for (const auto& mu : pool)
    if (mu.empty()) throw ConfigError("sample_mu: pool contains an empty mask");
  std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
  return pool[pick(rng)];
}

inline constexpr std::size_t kMaxMuRedraws = 100;

// Draws mu until `accept` holds, at most kMaxMuRedraws times.
template <class Accept>
ModalityMask draw_supported_mu(Rng& rng, const std::vector<ModalityMask>& pool, Accept accept) {
  for (std::size_t attempt = 0; attempt < kMaxMuRedraws; ++attempt) {
    ModalityMask mu = sample_mu(rng, pool);
    if (accept(mu)) return mu;
  }
  throw ProtocolError("no training sample supports any drawn modality mask after " + std::to_string(kMaxMuRedraws) +
                      " attempts");
}

// ---------------------------------------------------------------------------
// Losses on graphs

inline NodeId batch_focal(Graph& g, const std::vector<NodeId>& logits, const std::vector<std::size_t>& labels,
                          const std::vector<double>& weights, double gamma) {
  std::vector<NodeId> terms;
  for (std::size_t i = 0; i < logits.size(); ++i)
    terms.push_back(focal_loss(g, logits[i], labels[i], weights.at(labels[i]), gamma));
  return mean_of(g, terms);
}

// Mean over unordered pairs of the mean absolute difference. Zero for < 2 features.
inline NodeId shared_consistency(Graph& g, const std::vector<NodeId>& shared) {
  std::vector<NodeId> pairs;
  for (std::size_t a = 0; a < shared.size(); ++a)
    for (std::size_t b = a + 1; b < shared.size(); ++b) pairs.push_back(g.mean(g.abs(g.sub(shared[a], shared[b]))));
  if (pairs.empty()) return g.constant(Tensor::scalar(0.0));
  return mean_of(g, pairs);
}

// Mean cross-entropy of each present modality's domain logits against its index.
inline NodeId specific_domain_loss(Graph& g, const std::vector<NodeId>& domain_logits,
                                   const std::vector<std::size_t>& present) {
  std::vector<NodeId> terms;
  for (std::size_t i = 0; i < domain_logits.size(); ++i) terms.push_back(cross_entropy(g, domain_logits[i], present[i]));
  return mean_of(g, terms);
}

inline NodeId featimpute_loss(Graph& g, const FeatImputeNodes& n, std::size_t label, double weight, double gamma,
                              double lambda_shared, double lambda_spec) {
  if (n.present.empty()) throw ProtocolError("featimpute_loss: no present modality");
  const NodeId task = focal_loss(g, n.logits, label, weight, gamma);
  const NodeId shared = g.scale(shared_consistency(g, n.shared), lambda_shared);
  const NodeId spec = g.scale(specific_domain_loss(g, n.domain_logits, n.present), lambda_spec);
  return g.add(g.add(task, shared), spec);
}

// ---------------------------------------------------------------------------
// Model construction

inline TrainedModel init_model(Method method, const TaskNetConfig& net, const TrainConfig& cfg, Rng& rng) {
  TrainedModel m;
  m.method = method;
  switch (method) {
    case Method::Ham:
      m.params = init_hypernet(WeightLayout::build(net), rng, cfg.hyper_init);
      break;
    case Method::Standard:
    case Method::Dropout: {
      TaskModel t{{}, WeightLayout::build(net)};
      t.params.add("theta", init_task_weights(t.layout, rng));
      m.params = std::move(t);
      break;
    }
    case Method::FeatImpute:
      m.params = init_featimpute(net, rng);
      break;
  }
  return m;
}

// ---------------------------------------------------------------------------
// Training loop

namespace detail {

enum Stream : std::uint64_t { kInitStream = 1, kBatchStream = 2, kMuStream = 3, kAugStream = 4 };

inline std::vector<std::size_t> draw_batch(Rng& rng, const std::vector<std::size_t>& eligible, std::size_t size) {
  std::uniform_int_distribution<std::size_t> pick(0, eligible.size() - 1);
  std::vector<std::size_t> out(size);
  for (auto& i : out) i = eligible[pick(rng)];
  return out;
}

inline std::vector<std::size_t> all_indices(const Dataset& ds) {
  std::vector<std::size_t> idx(ds.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return idx;
}

inline std::vector<std::size_t> labels_of(const Dataset& ds, const std::vector<std::size_t>& idx) {
  std::vector<std::size_t> out;
  for (std::size_t i : idx) out.push_back(ds.samples[i].label);
  return out;
}

}  // namespace detail

inline TrainResult train(Method method, const Dataset& ds, const TrainConfig& cfg, const CheckpointHook& hook = {}) {
  cfg.validate();
  if (ds.size() == 0) throw ProtocolError("training set is empty");
  if (ds.split != Split::Train) throw ProtocolError("refusing to train on a test split");
  const TaskNetConfig net = net_config(ds, cfg);

  Rng init_rng(derive_seed(cfg.seed, {detail::kInitStream}));
  Rng batch_rng(derive_seed(cfg.seed, {detail::kBatchStream}));
  Rng mu_rng(derive_seed(cfg.seed, {detail::kMuStream}));
  Rng aug_rng(derive_seed(cfg.seed, {detail::kAugStream}));

  TrainResult res{init_model(method, net, cfg, init_rng), {}};
  RunRecord& rec = res.record;
  rec.method = method_name(method);
  rec.seed = cfg.seed;
  rec.chosen_iterations = cfg.max_iterations;
  rec.optimizer_param_count = res.model.param_set().scalar_count();

  std::vector<std::size_t> eligible;
  if (method == Method::Standard) {
    for (std::size_t i = 0; i < ds.size(); ++i)
      if (ds.samples[i].mask.complete()) eligible.push_back(i);
    if (eligible.empty()) throw ProtocolError("standard training needs at least one complete sample");
  } else {
    eligible = detail::all_indices(ds);
  }
  const auto weights = class_weights(detail::labels_of(ds, eligible), ds.classes);
  const auto pool = ds.patterns();
  for (const auto& p : pool)
    if (p.empty()) throw ProtocolError("training set contains a sample with no modality");

  OptimizerState opt = make_optimizer(cfg.optimizer_for(method), res.model.param_set());

  ModalityMask mu;
  std::vector<std::size_t> support;
  std::map<ModalityMask, WeightLayout> restricted;
  const auto& full = ModalityMask::all(ds.m);

  for (std::size_t it = 0; it < cfg.max_iterations; ++it) {
    std::vector<std::size_t> batch;
    if (method == Method::Ham) {
      if (it % cfg.n_it == 0) {
        mu = draw_supported_mu(mu_rng, pool, [&](const ModalityMask& cand) {
          return std::any_of(ds.samples.begin(), ds.samples.end(),
                             [&](const Sample& s) { return cand.implies(s.mask); });
        });
        support.clear();
        for (std::size_t i = 0; i < ds.size(); ++i)
          if (mu.implies(ds.samples[i].mask)) support.push_back(i);
        rec.reselections.push_back(it);
      }
      batch = detail::draw_batch(batch_rng, support, cfg.batch_size);
    } else {
      batch = detail::draw_batch(batch_rng, eligible, cfg.batch_size);
      if (method == Method::Standard) {
        mu = full;
      } else {
        // guard: a drawn mu that leaves every batch sample empty is redrawn
        mu = draw_supported_mu(mu_rng, pool, [&](const ModalityMask& cand) {
          return std::any_of(batch.begin(), batch.end(), [&](std::size_t i) { return !(ds.samples[i].mask & cand).empty(); });
        });
      }
    }

    Graph g;
    const ParamSet& ps = res.model.param_set();
    const std::vector<NodeId> phi = ps.bind(g);
    std::vector<NodeId> terms;
    std::vector<std::size_t> used;

    if (method == Method::Ham) {
      const auto& h = std::get<HyperNetParams>(res.model.params);
      auto [pos, fresh] = restricted.try_emplace(mu);
      if (fresh) pos->second = h.layout.restricted(mu);
      const NodeId theta = hyper_task_weights(g, phi, mu, h.layout);
      const auto tp = bind_task_params(g, theta, pos->second);
      for (std::size_t i : batch) {
        const Sample s = augment(ds.samples[i], cfg.augmentation, aug_rng);
        const NodeId logits = task_logits(g, tp, g.constant(restrict(s, mu)));
        terms.push_back(focal_loss(g, logits, s.label, weights[s.label], cfg.gamma));
        used.push_back(i);
      }
    } else if (method == Method::Standard || method == Method::Dropout) {
      const auto& t = std::get<TaskModel>(res.model.params);
      const auto tp = bind_task_params(g, phi[0], t.layout);
      for (std::size_t i : batch) {
        const Sample masked = zero_mask(ds.samples[i], mu);
        if (masked.mask.empty()) continue;
        const Sample s = augment(masked, cfg.augmentation, aug_rng);
        const NodeId logits = task_logits(g, tp, g.constant(s.image));
        terms.push_back(focal_loss(g, logits, s.label, weights[s.label], cfg.gamma));
        used.push_back(i);
      }
    } else {
      const auto& f = std::get<FeatImputeModel>(res.model.params);
      for (std::size_t i : batch) {
        const Sample masked = zero_mask(ds.samples[i], mu);
        if (masked.mask.empty()) continue;
        const Sample s = augment(masked, cfg.augmentation, aug_rng);
        const auto nodes = featimpute_graph(g, f, phi, s.image, s.mask);
        terms.push_back(featimpute_loss(g, nodes, s.label, weights[s.label], cfg.gamma, cfg.lambda_shared,
                                        cfg.lambda_spec));
        used.push_back(i);
      }
    }

    const NodeId loss = mean_of(g, terms);
    const double lv = g.value(loss).item();
    if (!std::isfinite(lv))
      throw NumericError(std::string(method_name(method)) + ": non-finite loss at iteration " + std::to_string(it));
    const auto grads = g.backward(loss);
    std::vector<Tensor> gp;
    gp.reserve(phi.size());
    for (NodeId id : phi) gp.push_back(grads[id]);
    optimizer_step(res.model.param_set(), gp, opt, cfg.lr);

    rec.loss_history.push_back(lv);
    rec.mu_log.push_back(mu);
    rec.batches.push_back(std::move(used));
    if (hook && (it + 1) % cfg.eval_every == 0 && !hook(it + 1, res.model)) break;
  }
  return res;
}

inline TrainResult train_ham(const Dataset& ds, const TrainConfig& cfg, const CheckpointHook& hook = {}) {
  return train(Method::Ham, ds, cfg, hook);
}
inline TrainResult train_standard(const Dataset& ds, const TrainConfig& cfg, const CheckpointHook& hook = {}) {
  return train(Method::Standard, ds, cfg, hook);
}
inline TrainResult train_dropout(const Dataset& ds, const TrainConfig& cfg, const CheckpointHook& hook = {}) {
  return train(Method::Dropout, ds, cfg, hook);
}
inline TrainResult train_featimpute(const Dataset& ds, const TrainConfig& cfg, const CheckpointHook& hook = {}) {
  return train(Method::FeatImpute, ds, cfg, hook);
}

// ---------------------------------------------------------------------------
// Prediction

inline std::size_t argmax(const Tensor& t) {
  return static_cast<std::size_t>(std::max_element(t.data().begin(), t.data().end()) - t.data().begin());
}

// Evaluates a trained model. Each sample is seen through `subset & sample.mask`
// (its own mask when no subset is given): HAM generates weights for exactly
// that mask and consumes the restricted channels; the other methods receive
// the zero-padded m-channel input.
class Predictor {
 public:
  explicit Predictor(const TrainedModel& model) : model_(model) {}

  Tensor logits(const Sample& sample, const std::optional<ModalityMask>& subset = std::nullopt) {
    const ModalityMask eff = subset ? (sample.mask & *subset) : sample.mask;
    if (eff.empty()) throw ProtocolError("sample '" + sample.id + "' has no modality under the evaluation mask");
    switch (model_.method) {
      case Method::Ham: {
        const auto& h = std::get<HyperNetParams>(model_.params);
        auto it = cache_.find(eff);
        if (it == cache_.end()) it = cache_.emplace(eff, hyper_forward(h, eff)).first;
        return task_forward(it->second, restrict(sample, eff));
      }
      case Method::Standard:
      case Method::Dropout: {
        const auto& t = std::get<TaskModel>(model_.params);
        const TaskWeights w{t.params.values[0], t.layout, ModalityMask::all(t.layout.config().m)};
        return task_forward(w, zero_mask(sample, eff).image);
      }
      case Method::FeatImpute:
        return featimpute_forward(std::get<FeatImputeModel>(model_.params), zero_mask(sample, eff)).logits;
    }
    throw ConfigError("unknown method");
  }

  std::size_t predict(const Sample& sample, const std::optional<ModalityMask>& subset = std::nullopt) {
    return argmax(logits(sample, subset));
  }

 private:
  const TrainedModel& model_;
  std::map<ModalityMask, TaskWeights> cache_;
};

inline ConfusionMatrix evaluate(const TrainedModel& model, const Dataset& ds,
                                const std::optional<ModalityMask>& subset = std::nullopt) {
  Predictor p(model);
  ConfusionMatrix cm(ds.classes);
  for (const auto& s : ds.samples) cm.add(s.label, p.predict(s, subset));
  return cm;
}

// ---------------------------------------------------------------------------
// Cross-validated iteration budget

inline std::vector<std::size_t> iteration_grid(const TrainConfig& cfg) {
  std::vector<std::size_t> grid;
  for (std::size_t n = cfg.eval_every; n <= cfg.max_iterations; n += cfg.eval_every) grid.push_back(n);
  if (grid.empty()) throw ConfigError("iteration grid is empty: max_iterations < eval_every");
  return grid;
}

// curves[fold][g] = validation BA at grid[g]. Maximizes the fold mean; ties
// resolve to the smallest iteration count.
inline std::size_t select_grid_point(const std::vector<std::size_t>& grid, const std::vector<std::vector<double>>& curves) {
  if (grid.empty()) throw ConfigError("select_grid_point: empty grid");
  if (curves.empty()) throw ConfigError("select_grid_point: no folds");
  std::size_t best = 0;
  double best_mean = -1.0;
  for (std::size_t gi = 0; gi < grid.size(); ++gi) {
    double mean = 0.0;
    for (const auto& c : curves) {
      if (c.size() != grid.size()) throw ShapeError("select_grid_point: curve length != grid length");
      mean += c[gi];
    }
    mean /= static_cast<double>(curves.size());
    if (mean > best_mean) {
      best_mean = mean;
      best = gi;
    }
  }
  return grid[best];
}

struct CvResult {
  std::vector<std::size_t> grid;
  std::vector<std::vector<double>> curves;  // per fold
  std::size_t chosen = 0;
};

inline CvResult cv_select_iterations(Method method, const Dataset& ds, const TrainConfig& cfg) {
  CvResult r;
  r.grid = iteration_grid(cfg);
  const auto folds = stratified_kfold(ds, cfg.cv_folds, derive_seed(cfg.seed, {0xCF}));
  for (std::size_t f = 0; f < folds.size(); ++f) {
    const Dataset train_part = ds.subset(folds[f].train);
    const Dataset val_part = ds.subset(folds[f].val);
    TrainConfig fc = cfg;
    fc.max_iterations = r.grid.back();
    fc.seed = derive_seed(cfg.seed, {0xCF, f + 1});
    std::vector<double> curve;
    train(method, train_part, fc, [&](std::size_t, const TrainedModel& m) {
      curve.push_back(balanced_accuracy(evaluate(m, val_part)));
      return true;
    });
    r.curves.push_back(std::move(curve));
  }
  r.chosen = select_grid_point(r.grid, r.curves);
  return r;
}

// Cross-validates the budget, then trains on the whole set for that many iterations.
inline TrainResult train_with_cv(Method method, const Dataset& ds, const TrainConfig& cfg) {
  const auto cv = cv_select_iterations(method, ds, cfg);
  TrainConfig fc = cfg;
  fc.max_iterations = cv.chosen;
  auto res = train(method, ds, fc);
  res.record.chosen_iterations = cv.chosen;
  return res;
}

// ---------------------------------------------------------------------------
// Loss behaviour around mu re-selection

// loss[t] - loss[t-1] at every re-selection boundary t > 0.
inline std::vector<std::pair<std::size_t, double>> reselection_jumps(const RunRecord& rec) {
  std::vector<std::pair<std::size_t, double>> out;
  for (std::size_t t : rec.reselections)
    if (t > 0 && t < rec.loss_history.size()) out.emplace_back(t, rec.loss_history[t] - rec.loss_history[t - 1]);
  return out;
}

struct QuartileJumps {
  double first = 0.0;
  double last = 0.0;
  std::size_t first_count = 0;
  std::size_t last_count = 0;
};

// Mean boundary jump over the first and last quarter of the iterations.
inline QuartileJumps quartile_jumps(const RunRecord& rec) {
  const std::size_t n = rec.loss_history.size();
  QuartileJumps q;
  for (const auto& [t, d] : reselection_jumps(rec)) {
    if (t < n / 4) {
      q.first += d;
      ++q.first_count;
    } else if (t >= n - n / 4) {
      q.last += d;
      ++q.last_count;
    }
  }
  if (q.first_count) q.first /= static_cast<double>(q.first_count);
  if (q.last_count) q.last /= static_cast<double>(q.last_count);
  return q;
}

}  // namespace ham
