#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "ham/gradcheck.hpp"
#include "ham/training.hpp"

using namespace ham;

namespace {

// Small, nearly noiseless 16x16 set.
Dataset tiny_set(std::size_t n = 60, std::uint64_t seed = 3) {
  SyntheticSpec s;
  s.n_samples = n;
  s.height = 16;
  s.width = 16;
  s.noise_std = 0.01;
  s.seed = seed;
  return generate_synthetic(s);
}

TrainConfig tiny_train(std::size_t iters) {
  TrainConfig c;
  c.max_iterations = iters;
  c.eval_every = iters == 0 ? 1 : iters;
  c.seed = 42;
  c.augmentation = AugmentationConfig::disabled();
  return c;
}

double softmax_ce(const std::vector<double>& z, std::size_t y) {
  double mx = z[0];
  for (double v : z) mx = std::max(mx, v);
  double s = 0.0;
  for (double v : z) s += std::exp(v - mx);
  return -(z[y] - mx - std::log(s));
}

std::vector<std::size_t> labels_from_counts(const std::vector<std::size_t>& counts) {
  std::vector<std::size_t> out;
  for (std::size_t c = 0; c < counts.size(); ++c) out.insert(out.end(), counts[c], c);
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// class weights

TEST(ClassWeights, ImbalancedCounts) {
  const auto labels = labels_from_counts({64, 45, 68});
  const auto raw = raw_class_weights(labels, 3);
  EXPECT_NEAR(raw[0], 177.0 / 64, 1e-12);
  EXPECT_NEAR(raw[0], 2.766, 1e-3);
  EXPECT_NEAR(raw[1], 3.933, 1e-3);
  EXPECT_NEAR(raw[2], 2.603, 1e-3);
  const auto w = class_weights(labels, 3);
  EXPECT_NEAR(w[0], 0.8920, 1e-4);
  EXPECT_NEAR(w[1], 1.269, 1e-3);
  EXPECT_NEAR(w[2], 0.840, 1e-3);
  EXPECT_NEAR((w[0] + w[1] + w[2]) / 3, 1.0, 1e-12);
}

TEST(ClassWeights, BalancedAndExtreme) {
  for (double v : class_weights(labels_from_counts({5, 5, 5}), 3)) EXPECT_DOUBLE_EQ(v, 1.0);
  const auto raw = raw_class_weights(labels_from_counts({1, 99}), 2);
  EXPECT_DOUBLE_EQ(raw[0], 100.0);
  EXPECT_NEAR(raw[1], 1.0101, 1e-4);
  EXPECT_NEAR(raw[0] / raw[1], 99.0, 1e-9);
}

TEST(ClassWeights, EmptyClassRejected) {
  EXPECT_THROW(class_weights(labels_from_counts({3, 0, 2}), 3), ProtocolError);
}

// ---------------------------------------------------------------------------
// focal loss

TEST(FocalLoss, WorkedExample) {
  EXPECT_NEAR(focal_loss_value(Tensor::vector({2, 0, 0}), 0, 1.0, 2.0), 0.010874, 1e-5);
}

TEST(FocalLoss, GammaZeroIsWeightedCrossEntropy) {
  Rng rng(1);
  std::normal_distribution<double> g(0.0, 2.0);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> z(4);
    for (double& v : z) v = g(rng);
    const std::size_t y = static_cast<std::size_t>(t % 4);
    const double w = 0.5 + 0.1 * t;
    EXPECT_NEAR(focal_loss_value(Tensor::vector(z), y, w, 0.0), w * softmax_ce(z, y), 1e-12);
  }
}

TEST(FocalLoss, ConfidentCorrectPredictionVanishes) {
  for (double gamma : {0.0, 1.0, 2.0, 5.0}) EXPECT_LT(focal_loss_value(Tensor::vector({40, 0, 0}), 0, 1.0, gamma), 1e-15);
}

TEST(FocalLoss, FocusingDownweightsEasyExamples) {
  const Tensor z = Tensor::vector({1.0, 0.0, -1.0});
  EXPECT_LT(focal_loss_value(z, 0, 1.0, 2.0), focal_loss_value(z, 0, 1.0, 0.0));
}

TEST(FocalLoss, Rejections) {
  EXPECT_THROW(focal_loss_value(Tensor::vector({1, 2}), 0, 1.0, -1.0), ConfigError);
  EXPECT_THROW(focal_loss_value(Tensor::vector({1, 2}), 2, 1.0, 2.0), ConfigError);
}

TEST(FocalLoss, GradientMatchesFiniteDifferences) {
  const ad::GraphBuilder b = [](Graph& g, std::span<const NodeId> in) { return focal_loss(g, in[0], 1, 1.3, 2.0); };
  EXPECT_LT(ad::gradcheck(b, {Tensor::vector({0.3, -0.2, 0.9})}, 1e-6), 1e-6);
}

// ---------------------------------------------------------------------------
// optimizers

namespace {
ParamSet scalar_param(double v) {
  ParamSet p;
  p.add("x", Tensor::vector({v}));
  return p;
}
}  // namespace

TEST(Optimizers, ZeroGradientLeavesParametersUnchanged) {
  for (auto kind : {OptimizerKind::RmsProp, OptimizerKind::Adam}) {
    auto p = scalar_param(0.7);
    auto s = make_optimizer(kind, p);
    for (int i = 0; i < 5; ++i) optimizer_step(p, {Tensor::vector({0.0})}, s, 1e-2);
    EXPECT_EQ(p.values[0][0], 0.7) << optimizer_name(kind);
  }
}

TEST(Optimizers, RmsPropStepApproachesLearningRate) {
  auto p = scalar_param(0.0);
  auto s = make_optimizer(OptimizerKind::RmsProp, p);
  double prev = 0.0, step = 0.0;
  for (int i = 0; i < 2000; ++i) {
    rmsprop_step(p, {Tensor::vector({0.5})}, s, 1e-3);
    step = prev - p.values[0][0];
    prev = p.values[0][0];
  }
  // v -> g^2, so |step| -> lr * g / |g|
  EXPECT_NEAR(step, 1e-3, 1e-6);
  EXPECT_GE(s.second[0][0], 0.0);
}

TEST(Optimizers, AdamFirstStepIsLearningRate) {
  auto p = scalar_param(1.0);
  auto s = make_optimizer(OptimizerKind::Adam, p);
  adam_step(p, {Tensor::vector({1.0})}, s, 1e-4);
  EXPECT_NEAR(1.0 - p.values[0][0], 1e-4, 1e-12);
  EXPECT_EQ(s.steps, 1u);
}

TEST(Optimizers, RejectNonFiniteAndMismatchedGradients) {
  auto p = scalar_param(1.0);
  auto s = make_optimizer(OptimizerKind::Adam, p);
  EXPECT_THROW(adam_step(p, {Tensor::vector({std::nan("")})}, s, 1e-4), NumericError);
  EXPECT_THROW(adam_step(p, {Tensor::vector({1.0, 2.0})}, s, 1e-4), ShapeError);
  EXPECT_THROW(adam_step(p, {}, s, 1e-4), ShapeError);
  EXPECT_EQ(p.values[0][0], 1.0);
}

// ---------------------------------------------------------------------------
// mu sampling

TEST(SampleMu, SingletonPoolAlwaysReturnsIt) {
  Rng rng(1);
  const std::vector<ModalityMask> pool{ModalityMask::all(4)};
  for (int i = 0; i < 100; ++i) EXPECT_EQ(sample_mu(rng, pool), ModalityMask::all(4));
}

TEST(SampleMu, UniformOverPool) {
  Rng rng(2);
  const std::vector<ModalityMask> pool{ModalityMask::parse("1111"), ModalityMask::parse("0111"),
                                       ModalityMask::parse("1011"), ModalityMask::parse("1101"),
                                       ModalityMask::parse("1110")};
  std::map<ModalityMask, int> freq;
  const int n = 10000;
  for (int i = 0; i < n; ++i) ++freq[sample_mu(rng, pool)];
  const double sigma = std::sqrt(n * 0.2 * 0.8);
  for (const auto& mu : pool) EXPECT_NEAR(freq[mu], n * 0.2, 3 * sigma) << mu.str();
}

TEST(SampleMu, Rejections) {
  Rng rng(3);
  EXPECT_THROW(sample_mu(rng, {}), ConfigError);
  EXPECT_THROW(sample_mu(rng, {ModalityMask::none(4)}), ConfigError);
}

TEST(SampleMu, SingleDropPoolHasFivePatterns) {
  const auto ds = inject_incompleteness(tiny_set(60), 75, DropMode::SingleDrop, 5);
  const auto pool = ds.patterns();
  EXPECT_EQ(pool.size(), 5u);
  EXPECT_TRUE(std::find(pool.begin(), pool.end(), ModalityMask::all(4)) != pool.end());
}

TEST(SampleMu, BoundedRedraw) {
  Rng rng(4);
  EXPECT_THROW(draw_supported_mu(rng, {ModalityMask::all(4)}, [](const ModalityMask&) { return false; }),
               ProtocolError);
}

// ---------------------------------------------------------------------------
// featimpute loss

namespace {
FeatImputeNodes handmade_nodes(Graph& g, const std::vector<Tensor>& shared, std::vector<std::size_t> present) {
  FeatImputeNodes n;
  n.present = std::move(present);
  n.logits = g.constant(Tensor::vector({0.5, -0.5, 0.1}));
  for (const auto& s : shared) n.shared.push_back(g.constant(s));
  for (std::size_t i = 0; i < n.present.size(); ++i) n.domain_logits.push_back(g.constant(Tensor::vector({0.2, 0.1, -0.3, 0.0})));
  return n;
}
}  // namespace

TEST(FeatImputeLoss, OnePresentModalityHasNoSharedTerm) {
  Graph g;
  const auto n = handmade_nodes(g, {Tensor({32}, 0.3)}, {2});
  const double total = g.value(featimpute_loss(g, n, 1, 1.0, 2.0, 0.1, 0.02)).item();
  const double task = focal_loss_value(Tensor::vector({0.5, -0.5, 0.1}), 1, 1.0, 2.0);
  const double spec = softmax_ce({0.2, 0.1, -0.3, 0.0}, 2);
  EXPECT_NEAR(total, task + 0.02 * spec, 1e-12);
}

TEST(FeatImputeLoss, SharedConsistencyValues) {
  Graph g;
  EXPECT_EQ(g.value(shared_consistency(g, {g.constant(Tensor({32}, 0.4)), g.constant(Tensor({32}, 0.4)),
                                           g.constant(Tensor({32}, 0.4))}))
                .item(),
            0.0);
  EXPECT_EQ(g.value(shared_consistency(g, {g.constant(Tensor({32}, 1.0)), g.constant(Tensor({32}, 0.0))})).item(), 1.0);
  // three pairs: |1-0|, |1-3|, |0-3| -> mean 2
  EXPECT_DOUBLE_EQ(g.value(shared_consistency(g, {g.constant(Tensor({4}, 1.0)), g.constant(Tensor({4}, 0.0)),
                                                  g.constant(Tensor({4}, 3.0))}))
                       .item(),
                   2.0);
}

TEST(FeatImputeLoss, FullCompositionOnRealForward) {
  TaskNetConfig cfg;
  cfg.widths = {2, 2, 2};
  cfg.height = cfg.width = 8;
  Rng rng(9);
  const auto model = init_featimpute(cfg, rng);
  Tensor img({4, 8, 8});
  std::uniform_real_distribution<double> u(0, 1);
  for (double& v : img.data()) v = u(rng);
  const Sample s = zero_mask(Sample{"s", img, ModalityMask::all(4), 2}, ModalityMask::parse("1011"));
  Graph g;
  std::vector<NodeId> p;
  for (const auto& t : model.params.values) p.push_back(g.param(t));
  const auto n = featimpute_graph(g, model, p, s.image, s.mask);
  const double total = g.value(featimpute_loss(g, n, 2, 0.8, 2.0, 0.1, 0.02)).item();
  const double task = g.value(focal_loss(g, n.logits, 2, 0.8, 2.0)).item();
  const double shared = g.value(shared_consistency(g, n.shared)).item();
  const double spec = g.value(specific_domain_loss(g, n.domain_logits, n.present)).item();
  EXPECT_NEAR(total, task + 0.1 * shared + 0.02 * spec, 1e-12);
  EXPECT_GT(shared, 0.0);
}

// ---------------------------------------------------------------------------
// training procedures

TEST(TrainConfigTest, Validation) {
  TrainConfig c;
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.n_it = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.lr = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(TrainHam, ZeroIterationsKeepsInitialization) {
  const auto ds = tiny_set();
  const auto cfg = tiny_train(0);
  const auto r = train_ham(ds, cfg);
  Rng init(derive_seed(cfg.seed, {1}));
  const auto fresh = init_model(Method::Ham, net_config(ds, cfg), cfg, init);
  EXPECT_EQ(r.model.param_set(), fresh.param_set());
  EXPECT_TRUE(r.record.loss_history.empty());
}

TEST(TrainHam, OnlyHypernetworkParametersAreOptimized) {
  const auto ds = tiny_set();
  const auto r = train_ham(ds, tiny_train(5));
  const auto& h = std::get<HyperNetParams>(r.model.params);
  EXPECT_EQ(r.record.optimizer_param_count, h.params.scalar_count());
  EXPECT_EQ(h.params.size(), 8u);
  for (const auto& name : h.params.names) EXPECT_EQ(name[0], 'l');
}

TEST(TrainHam, ReselectsEveryNItAndBatchesSupportMu) {
  const auto ds = inject_incompleteness(tiny_set(90), 25, DropMode::SingleDrop, 8);
  auto cfg = tiny_train(57);
  cfg.n_it = 10;
  const auto r = train_ham(ds, cfg);
  EXPECT_EQ(r.record.reselections, (std::vector<std::size_t>{0, 10, 20, 30, 40, 50}));
  for (std::size_t it = 0; it < r.record.batches.size(); ++it) {
    EXPECT_EQ(r.record.mu_log[it], r.record.mu_log[it - it % 10]);
    for (std::size_t i : r.record.batches[it]) ASSERT_TRUE(r.record.mu_log[it].implies(ds.samples[i].mask));
  }
  std::set<ModalityMask> drawn(r.record.mu_log.begin(), r.record.mu_log.end());
  EXPECT_GT(drawn.size(), 1u);
  for (double l : r.record.loss_history) EXPECT_TRUE(std::isfinite(l));
}

TEST(TrainHam, RefusesTestSplitAndEmptySet) {
  auto ds = tiny_set();
  Dataset empty = ds.empty_like();
  EXPECT_THROW(train_ham(empty, tiny_train(1)), ProtocolError);
  ds.split = Split::Test;
  EXPECT_THROW(train_ham(ds, tiny_train(1)), ProtocolError);
}

TEST(Training, AllMethodsBitwiseDeterministic) {
  const auto ds = inject_incompleteness(tiny_set(45), 50, DropMode::SingleDrop, 2);
  auto cfg = tiny_train(6);
  cfg.augmentation = AugmentationConfig{};
  for (Method m : kAllMethods) {
    const auto a = train(m, ds, cfg);
    const auto b = train(m, ds, cfg);
    EXPECT_EQ(a.model.param_set(), b.model.param_set()) << method_name(m);
    EXPECT_EQ(a.record.loss_history, b.record.loss_history) << method_name(m);
    cfg.seed += 1;
    const auto c = train(m, ds, cfg);
    EXPECT_NE(a.model.param_set(), c.model.param_set()) << method_name(m);
    cfg.seed -= 1;
  }
}

TEST(TrainStandard, UsesOnlyCompleteSamples) {
  const auto ds = inject_incompleteness(tiny_set(177), 25, DropMode::SingleDrop, 4);
  EXPECT_EQ(ds.complete_count(), 44u);
  const auto r = train_standard(ds, tiny_train(40));
  std::set<std::size_t> seen;
  for (const auto& b : r.record.batches)
    for (std::size_t i : b) {
      ASSERT_TRUE(ds.samples[i].mask.complete());
      seen.insert(i);
    }
  EXPECT_LE(seen.size(), 44u);
  EXPECT_GT(seen.size(), 30u);
}

TEST(TrainStandard, IncompleteSamplesHaveNoInfluence) {
  const auto ds = inject_incompleteness(tiny_set(60), 50, DropMode::SingleDrop, 4);
  auto changed = ds;
  for (auto& s : changed.samples)
    if (!s.mask.complete()) {
      for (double& v : s.image.data()) v = 1.0 - v;
      s.label = (s.label + 1) % 3;
    }
  // class weights are computed on the complete subset only
  EXPECT_EQ(train_standard(ds, tiny_train(8)).model.param_set(), train_standard(changed, tiny_train(8)).model.param_set());
}

TEST(TrainStandard, NoCompleteSampleIsAProtocolError) {
  const auto ds = inject_incompleteness(tiny_set(30), 0, DropMode::SingleDrop, 4);
  EXPECT_THROW(train_standard(ds, tiny_train(1)), ProtocolError);
}

TEST(TrainDropout, AllOnesPoolMatchesStandardBatches) {
  const auto ds = tiny_set(30);
  auto cfg = tiny_train(12);
  cfg.augmentation = AugmentationConfig{};
  const auto s = train_standard(ds, cfg);
  const auto d = train_dropout(ds, cfg);
  EXPECT_EQ(s.record.batches, d.record.batches);
  EXPECT_EQ(s.record.loss_history, d.record.loss_history);
  EXPECT_EQ(s.model.param_set(), d.model.param_set());
}

TEST(TrainDropout, MaskCompositionIsIdempotent) {
  const auto ds = tiny_set(3);
  Sample s = zero_mask(ds.samples[0], ModalityMask::parse("1011"));
  const auto mu = ModalityMask::parse("1010");
  EXPECT_EQ(zero_mask(s, mu), zero_mask(zero_mask(s, mu), mu));
  EXPECT_EQ(zero_mask(s, ModalityMask::parse("1110")), zero_mask(s, ModalityMask::parse("1010")));
}

TEST(TrainFeatImpute, CompletePoolNeverImputes) {
  const auto ds = tiny_set(30);
  const auto r = train_featimpute(ds, tiny_train(4));
  for (const auto& mu : r.record.mu_log) EXPECT_TRUE(mu.complete());
}

TEST(TrainFeatImpute, DrawnMuComposesWithSampleMask) {
  const auto ds = inject_incompleteness(tiny_set(45), 25, DropMode::MultiDrop, 6);
  const auto r = train_featimpute(ds, tiny_train(5));
  const auto pool = ds.patterns();
  for (const auto& mu : r.record.mu_log) EXPECT_TRUE(std::find(pool.begin(), pool.end(), mu) != pool.end());
}

// ---------------------------------------------------------------------------
// prediction

TEST(Predictor, HamUsesEachSampleMask) {
  const auto ds = tiny_set(6);
  const auto r = train_ham(ds, tiny_train(2));
  const auto& h = std::get<HyperNetParams>(r.model.params);
  Predictor p(r.model);
  const Sample s = zero_mask(ds.samples[0], ModalityMask::parse("0110"));
  const Tensor expect = task_forward(hyper_forward(h, s.mask), restrict(s, s.mask));
  EXPECT_EQ(p.logits(s), expect);
  EXPECT_EQ(p.logits(ds.samples[0], ModalityMask::parse("0110")), expect);
  EXPECT_THROW(p.logits(s, ModalityMask::parse("1001")), ProtocolError);
}

TEST(Predictor, EvaluateCountsEverySample) {
  const auto ds = tiny_set(12);
  for (Method m : kAllMethods) {
    const auto r = train(m, ds, tiny_train(1));
    EXPECT_EQ(evaluate(r.model, ds).total(), 12u);
    EXPECT_EQ(evaluate(r.model, ds, ModalityMask::parse("0011")).total(), 12u);
  }
}

// ---------------------------------------------------------------------------
// iteration budget selection

TEST(CvSelection, TieRuleAndSingletonGrid) {
  EXPECT_EQ(select_grid_point({250, 500, 750}, {{0.8, 0.8, 0.8}, {0.6, 0.6, 0.6}}), 250u);
  EXPECT_EQ(select_grid_point({100}, {{0.3}, {0.9}}), 100u);
  EXPECT_THROW(select_grid_point({100, 200}, {{0.3}}), ShapeError);
}

TEST(CvSelection, UnimodalCurvesPeakAtIndexThree) {
  const std::vector<std::size_t> grid{250, 500, 750, 1000, 1250, 1500};
  std::vector<std::vector<double>> curves;
  for (int f = 0; f < 5; ++f) {
    std::vector<double> c;
    for (int i = 0; i < 6; ++i) c.push_back(0.9 - 0.05 * std::abs(i - 3) + 0.01 * f);
    curves.push_back(c);
  }
  EXPECT_EQ(select_grid_point(grid, curves), 1000u);
}

TEST(CvSelection, GridFromConfig) {
  TrainConfig c;
  c.max_iterations = 1000;
  c.eval_every = 250;
  EXPECT_EQ(iteration_grid(c), (std::vector<std::size_t>{250, 500, 750, 1000}));
  c.max_iterations = 100;
  EXPECT_THROW(iteration_grid(c), ConfigError);
}

TEST(CvSelection, RunsEveryFoldOnTheGrid) {
  const auto ds = tiny_set(30);
  auto cfg = tiny_train(4);
  cfg.eval_every = 2;
  const auto cv = cv_select_iterations(Method::Standard, ds, cfg);
  EXPECT_EQ(cv.grid, (std::vector<std::size_t>{2, 4}));
  ASSERT_EQ(cv.curves.size(), 5u);
  for (const auto& c : cv.curves) EXPECT_EQ(c.size(), 2u);
  EXPECT_TRUE(cv.chosen == 2 || cv.chosen == 4);
}

// ---------------------------------------------------------------------------
// loss spikes at re-selection

TEST(ReselectionJumps, QuartileMeans) {
  RunRecord r;
  r.loss_history = {1, 1, 3, 3, 3, 3, 3, 3, 3.5, 3.5, 3.5, 3.5};
  r.reselections = {0, 2, 4, 6, 8, 10};
  const auto j = reselection_jumps(r);
  ASSERT_EQ(j.size(), 5u);
  EXPECT_EQ(j[0], (std::pair<std::size_t, double>{2, 2.0}));
  const auto q = quartile_jumps(r);
  EXPECT_EQ(q.first_count, 1u);  // boundary 2 in [0, 3)
  EXPECT_EQ(q.first, 2.0);
  EXPECT_EQ(q.last_count, 1u);  // boundary 10 in [9, 12)
  EXPECT_EQ(q.last, 0.0);
}

// ---------------------------------------------------------------------------
// end-to-end learning on a tiny separable set

namespace {
// Training BA checked every 100 iterations; stops once 0.95 is reached.
double best_training_ba(Method m, std::size_t budget) {
  const auto ds = tiny_set(60);
  auto cfg = tiny_train(budget);
  cfg.eval_every = 100;
  double best = 0.0;
  train(m, ds, cfg, [&](std::size_t, const TrainedModel& model) {
    best = std::max(best, balanced_accuracy(evaluate(model, ds)));
    return best < 0.95;
  });
  return best;
}
}  // namespace

TEST(EndToEnd, HamLearnsTinySeparableSet) { EXPECT_GE(best_training_ba(Method::Ham, 2000), 0.95); }

TEST(EndToEnd, FeatImputeLearnsTinySeparableSet) { EXPECT_GE(best_training_ba(Method::FeatImpute, 3000), 0.95); }
