#pragma once

// Functional task classifier, its flat weight layout, the modality-conditioned
// hypernetwork, and the shared/specific feature-imputation baseline.
//
// Every model here consumes weights from outside: the task network reads a
// flat vector through a WeightLayout, so the same forward code runs with free
// weights (Standard, Dropout) or weights emitted by the hypernetwork (HAM).

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "ham/autodiff.hpp"
#include "ham/data.hpp"
#include "ham/params.hpp"
#include "ham/rng.hpp"

namespace ham {

using ad::Graph;
using ad::NodeId;

struct TaskNetConfig {
  std::size_t m = 4;
  std::size_t classes = 3;
  std::vector<std::size_t> widths{8, 16, 32};
  std::size_t kernel = 3;
  std::size_t height = 32;
  std::size_t width = 32;

  std::size_t feature_dim() const { return widths.back(); }

  void validate() const {
    if (m == 0 || classes == 0) throw ConfigError("task net: m and classes must be positive");
    if (widths.empty()) throw ConfigError("task net: needs at least one block");
    if (kernel % 2 == 0) throw ConfigError("task net: kernel size must be odd");
    const std::size_t div = std::size_t{1} << widths.size();
    if (height % div != 0 || width % div != 0)
      throw ConfigError("task net: image extent " + std::to_string(height) + "x" + std::to_string(width) +
                        " not divisible by 2^" + std::to_string(widths.size()));
  }

  friend bool operator==(const TaskNetConfig&, const TaskNetConfig&) = default;
};

struct LayoutEntry {
  std::string name;
  std::size_t offset = 0;
  Shape shape;
  std::size_t size() const { return numel(shape); }
  friend bool operator==(const LayoutEntry&, const LayoutEntry&) = default;
};

// Named (offset, shape) entries tiling a flat weight vector. Entry 0 is always
// the first convolution kernel [w0, in_channels, k, k]; its input-channel axis
// is divided into one slice per modality.
class WeightLayout {
 public:
  static constexpr int kVersion = 1;

  static WeightLayout build(const TaskNetConfig& cfg, bool with_head = true) {
    cfg.validate();
    WeightLayout l;
    l.cfg_ = cfg;
    l.with_head_ = with_head;
    l.mask_ = ModalityMask::all(cfg.m);
    l.populate(cfg.m);
    return l;
  }

  const TaskNetConfig& config() const noexcept { return cfg_; }
  const std::vector<LayoutEntry>& entries() const noexcept { return entries_; }
  std::size_t total_size() const noexcept { return total_; }
  bool has_head() const noexcept { return with_head_; }
  // Modalities whose first-layer slices this layout holds.
  const ModalityMask& mask() const noexcept { return mask_; }

  const LayoutEntry& entry(const std::string& name) const {
    for (const auto& e : entries_)
      if (e.name == name) return e;
    throw ConfigError("layout has no entry '" + name + "'");
  }

  const LayoutEntry& first_conv() const { return entries_.front(); }
  std::size_t input_channels() const { return first_conv().shape[1]; }
  std::size_t modality_slice_size() const {
    const Shape& s = first_conv().shape;
    return s[0] * s[2] * s[3];
  }

  // Modality j -> range [begin, end) on the first kernel's input-channel axis.
  std::pair<std::size_t, std::size_t> modality_slice(std::size_t j) const {
    const auto present = mask_.present();
    for (std::size_t k = 0; k < present.size(); ++k)
      if (present[k] == j) return {k, k + 1};
    throw ProtocolError("layout holds no slice for modality " + std::to_string(j));
  }

  // Layout of the network restricted to mu (first conv keeps popcount(mu) inputs).
  WeightLayout restricted(const ModalityMask& mu) const {
    check_mask(mu);
    WeightLayout l = *this;
    l.mask_ = mu;
    l.populate(mu.popcount());
    return l;
  }

  // Flat indices into this (full) layout's vector that realize restricted(mu),
  // in the restricted vector's order.
  std::vector<std::size_t> restriction_indices(const ModalityMask& mu) const {
    check_mask(mu);
    const LayoutEntry& conv = first_conv();
    const std::size_t out = conv.shape[0], in = conv.shape[1], kk = conv.shape[2] * conv.shape[3];
    const auto keep = mu.present();
    std::vector<std::size_t> idx;
    idx.reserve(total_ - (in - keep.size()) * out * kk);
    for (std::size_t o = 0; o < out; ++o)
      for (std::size_t j : keep)
        for (std::size_t q = 0; q < kk; ++q) idx.push_back(conv.offset + (o * in + j) * kk + q);
    for (std::size_t e = 1; e < entries_.size(); ++e)
      for (std::size_t q = 0; q < entries_[e].size(); ++q) idx.push_back(entries_[e].offset + q);
    return idx;
  }

  friend bool operator==(const WeightLayout&, const WeightLayout&) = default;

 private:
  void check_mask(const ModalityMask& mu) const {
    if (mu.size() != cfg_.m) throw ShapeError("mask length " + std::to_string(mu.size()) + " != m " + std::to_string(cfg_.m));
    if (mu.empty()) throw ProtocolError("empty modality mask");
    if (!mask_.complete()) throw ProtocolError("restriction must start from the full layout");
  }

  void populate(std::size_t in_channels) {
    entries_.clear();
    std::size_t offset = 0;
    auto add = [&](std::string name, Shape shape) {
      entries_.push_back({std::move(name), offset, shape});
      offset += numel(shape);
    };
    std::size_t cin = in_channels;
    const std::size_t k = cfg_.kernel;
    for (std::size_t b = 0; b < cfg_.widths.size(); ++b) {
      const std::size_t w = cfg_.widths[b];
      const std::string p = "block" + std::to_string(b) + ".";
      add(p + "conv.weight", {w, cin, k, k});
      add(p + "conv.bias", {w});
      add(p + "affine.scale", {w});
      add(p + "affine.shift", {w});
      cin = w;
    }
    if (with_head_) {
      add("head.weight", {cfg_.classes, cfg_.feature_dim()});
      add("head.bias", {cfg_.classes});
    }
    total_ = offset;
  }

  TaskNetConfig cfg_;
  bool with_head_ = true;
  ModalityMask mask_;
  std::vector<LayoutEntry> entries_;
  std::size_t total_ = 0;
};

// Flat task weights plus the layout they follow.
struct TaskWeights {
  Tensor flat;
  WeightLayout layout;
  ModalityMask effective_mask;
};

// Structured truncation: keeps the first-conv slices of present modalities in
// ascending order and every other entry unchanged.
inline TaskWeights restrict_weights(const Tensor& theta_full, const ModalityMask& mu, const WeightLayout& layout) {
  if (theta_full.size() != layout.total_size())
    throw ShapeError("restrict_weights: vector length " + std::to_string(theta_full.size()) + " != layout size " +
                     std::to_string(layout.total_size()));
  const auto idx = layout.restriction_indices(mu);
  Tensor flat({idx.size()});
  for (std::size_t i = 0; i < idx.size(); ++i) flat[i] = theta_full[idx[i]];
  return TaskWeights{std::move(flat), layout.restricted(mu), mu};
}

// Draws standard initial task weights: fan-in scaled normal conv kernels, zero
// conv bias, identity affine, uniform head.
inline Tensor init_task_weights(const WeightLayout& layout, Rng& rng) {
  Tensor flat({layout.total_size()});
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (const auto& e : layout.entries()) {
    double* p = flat.data().data() + e.offset;
    if (e.name.ends_with("conv.weight")) {
      const double sd = std::sqrt(2.0 / static_cast<double>(e.shape[1] * e.shape[2] * e.shape[3]));
      for (std::size_t i = 0; i < e.size(); ++i) p[i] = sd * gauss(rng);
    } else if (e.name.ends_with("affine.scale")) {
      std::fill_n(p, e.size(), 1.0);
    } else if (e.name == "head.weight") {
      const double bound = 1.0 / std::sqrt(static_cast<double>(e.shape[1]));
      std::uniform_real_distribution<double> u(-bound, bound);
      for (std::size_t i = 0; i < e.size(); ++i) p[i] = u(rng);
    }
  }
  return flat;
}

// ---------------------------------------------------------------------------
// Task network on a graph

struct BlockNodes {
  NodeId conv_w, conv_b, scale, shift;
};

struct TaskParamNodes {
  std::vector<BlockNodes> blocks;
  NodeId head_w = 0, head_b = 0;
  bool has_head = false;
};

// Slices every layout entry out of a flat weight node.
inline TaskParamNodes bind_task_params(Graph& g, NodeId flat, const WeightLayout& layout) {
  if (g.value(flat).size() != layout.total_size())
    throw ShapeError("task weights hold " + std::to_string(g.value(flat).size()) + " values, layout needs " +
                     std::to_string(layout.total_size()));
  TaskParamNodes p;
  const auto& es = layout.entries();
  const std::size_t nblocks = layout.config().widths.size();
  for (std::size_t b = 0; b < nblocks; ++b) {
    BlockNodes bn{};
    bn.conv_w = g.slice_flat(flat, es[4 * b].offset, es[4 * b].shape);
    bn.conv_b = g.slice_flat(flat, es[4 * b + 1].offset, es[4 * b + 1].shape);
    bn.scale = g.slice_flat(flat, es[4 * b + 2].offset, es[4 * b + 2].shape);
    bn.shift = g.slice_flat(flat, es[4 * b + 3].offset, es[4 * b + 3].shape);
    p.blocks.push_back(bn);
  }
  if (layout.has_head()) {
    const auto& hw = es[4 * nblocks];
    const auto& hb = es[4 * nblocks + 1];
    p.head_w = g.slice_flat(flat, hw.offset, hw.shape);
    p.head_b = g.slice_flat(flat, hb.offset, hb.shape);
    p.has_head = true;
  }
  return p;
}

// conv -> channel affine -> ReLU -> 2x2 maxpool per block, then global average pool.
inline NodeId task_features(Graph& g, const TaskParamNodes& p, NodeId x) {
  NodeId h = x;
  for (const auto& b : p.blocks) {
    const std::size_t k = g.value(b.conv_w).dim(2);
    h = g.conv2d(h, b.conv_w, b.conv_b, 1, k / 2);
    h = g.channel_affine(h, b.scale, b.shift);
    h = g.relu(h);
    h = g.maxpool2d(h);
  }
  return g.global_avg_pool(h);
}

inline NodeId task_logits(Graph& g, const TaskParamNodes& p, NodeId x) {
  if (!p.has_head) throw ConfigError("task network has no classification head");
  return g.linear(task_features(g, p, x), p.head_w, p.head_b);
}

inline void check_input_channels(const Tensor& x, const WeightLayout& layout) {
  if (x.rank() != 3 || x.dim(0) != layout.input_channels())
    throw ShapeError("task input " + shape_str(x.shape()) + " does not match " +
                     std::to_string(layout.input_channels()) + " weight input channels");
}

inline Tensor task_forward(const TaskWeights& w, const Tensor& x) {
  check_input_channels(x, w.layout);
  if (x.dim(0) != w.effective_mask.popcount()) throw ShapeError("task input channels != popcount(effective mask)");
  Graph g;
  const NodeId flat = g.constant(w.flat);
  const auto params = bind_task_params(g, flat, w.layout);
  return g.value(task_logits(g, params, g.constant(x)));
}

// ---------------------------------------------------------------------------
// Hypernetwork: mu (m reals) -> 4 -> 4 -> 4 -> total_size, ReLU between layers.

inline constexpr std::size_t kHyperHidden = 4;
inline constexpr std::size_t kHyperLayers = 4;

struct HyperNetParams {
  ParamSet params;  // l{i}.weight, l{i}.bias for i = 0..3
  WeightLayout layout;
};

struct HyperInit {
  double final_weight_scale = 1e-2;
  // When true the output bias starts at a standard task-network draw, so the
  // initial generated network is a well-scaled classifier for every mu. When
  // false it starts at zero.
  bool task_init_bias = true;
};

inline HyperNetParams init_hypernet(const WeightLayout& layout, Rng& rng, HyperInit init = {}) {
  const std::size_t m = layout.config().m;
  const std::size_t dims[kHyperLayers + 1] = {m, kHyperHidden, kHyperHidden, kHyperHidden, layout.total_size()};
  HyperNetParams h{{}, layout};
  for (std::size_t l = 0; l < kHyperLayers; ++l) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(dims[l]));
    std::uniform_real_distribution<double> u(-bound, bound);
    Tensor w({dims[l + 1], dims[l]});
    Tensor b({dims[l + 1]});
    for (double& v : w.data()) v = u(rng);
    if (l + 1 < kHyperLayers) {
      for (double& v : b.data()) v = u(rng);
    } else {
      for (double& v : w.data()) v *= init.final_weight_scale;
      if (init.task_init_bias) b = init_task_weights(layout, rng);
    }
    h.params.add("l" + std::to_string(l) + ".weight", std::move(w));
    h.params.add("l" + std::to_string(l) + ".bias", std::move(b));
  }
  return h;
}

inline Tensor mask_tensor(const ModalityMask& mu) {
  Tensor t({mu.size()});
  for (std::size_t j = 0; j < mu.size(); ++j) t[j] = mu[j] ? 1.0 : 0.0;
  return t;
}

// Full generated vector theta (before restriction) on a graph.
inline NodeId hyper_theta_full(Graph& g, const std::vector<NodeId>& phi, const ModalityMask& mu) {
  if (phi.size() != 2 * kHyperLayers) throw ConfigError("hypernetwork expects 8 parameter tensors");
  if (mu.empty()) throw ProtocolError("hypernetwork: empty modality mask");
  NodeId h = g.constant(mask_tensor(mu));
  for (std::size_t l = 0; l < kHyperLayers; ++l) {
    h = g.linear(h, phi[2 * l], phi[2 * l + 1]);
    if (l + 1 < kHyperLayers) h = g.relu(h);
  }
  return h;
}

// Generated task weights restricted to mu, on a graph.
inline NodeId hyper_task_weights(Graph& g, const std::vector<NodeId>& phi, const ModalityMask& mu,
                                 const WeightLayout& layout) {
  const NodeId full = hyper_theta_full(g, phi, mu);
  auto idx = layout.restriction_indices(mu);
  const std::size_t n = idx.size();
  return g.gather(full, std::move(idx), {n});
}

inline Tensor hyper_output(const HyperNetParams& h, const ModalityMask& mu) {
  Graph g;
  std::vector<NodeId> phi;
  for (const auto& t : h.params.values) phi.push_back(g.constant(t));
  return g.value(hyper_theta_full(g, phi, mu));
}

inline TaskWeights hyper_forward(const HyperNetParams& h, const ModalityMask& mu) {
  return restrict_weights(hyper_output(h, mu), mu, h.layout);
}

// ---------------------------------------------------------------------------
// Feature imputation baseline: per-modality specific encoders, one shared
// encoder whose output is split into per-modality chunks, residual fusion and
// imputation of absent modalities from the first present one.

struct FeatImputeModel {
  ParamSet params;
  TaskNetConfig cfg;
  WeightLayout specific_layout;  // 1-channel trunk, no head
  WeightLayout shared_layout;    // m-channel trunk, no head

  std::size_t specific(std::size_t j) const { return j; }
  std::size_t shared() const { return cfg.m; }
  std::size_t shared_proj_w() const { return cfg.m + 1; }
  std::size_t shared_proj_b() const { return cfg.m + 2; }
  std::size_t fuse_w(std::size_t j) const { return cfg.m + 3 + 2 * j; }
  std::size_t fuse_b(std::size_t j) const { return cfg.m + 4 + 2 * j; }
  std::size_t cls_w() const { return 3 * cfg.m + 3; }
  std::size_t cls_b() const { return 3 * cfg.m + 4; }
  std::size_t dom_w() const { return 3 * cfg.m + 5; }
  std::size_t dom_b() const { return 3 * cfg.m + 6; }
};

inline void uniform_linear(Rng& rng, Tensor& w, Tensor& b) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(w.dim(1)));
  std::uniform_real_distribution<double> u(-bound, bound);
  for (double& v : w.data()) v = u(rng);
  for (double& v : b.data()) v = u(rng);
}

inline FeatImputeModel init_featimpute(const TaskNetConfig& cfg, Rng& rng) {
  TaskNetConfig one = cfg;
  one.m = 1;
  FeatImputeModel f{{}, cfg, WeightLayout::build(one, false), WeightLayout::build(cfg, false)};
  const std::size_t m = cfg.m, d = cfg.feature_dim(), C = cfg.classes;
  for (std::size_t j = 0; j < m; ++j) f.params.add("specific" + std::to_string(j), init_task_weights(f.specific_layout, rng));
  f.params.add("shared", init_task_weights(f.shared_layout, rng));
  auto add_linear = [&](const std::string& name, std::size_t out, std::size_t in) {
    Tensor w({out, in}), b({out});
    uniform_linear(rng, w, b);
    f.params.add(name + ".weight", std::move(w));
    f.params.add(name + ".bias", std::move(b));
  };
  add_linear("shared_proj", m * d, d);
  for (std::size_t j = 0; j < m; ++j) add_linear("fuse" + std::to_string(j), d, 2 * d);
  add_linear("classifier", C, d);
  add_linear("domain", m, d);
  return f;
}

struct FeatImputeNodes {
  NodeId logits = 0;
  std::vector<std::size_t> present;  // modality indices with mu_j = 1
  std::vector<NodeId> shared;        // per present modality, [d]
  std::vector<NodeId> specific;      // per present modality, [d]
  std::vector<NodeId> domain_logits; // per present modality, [m]
  std::vector<NodeId> fused;         // per modality (all m), [d]
  std::vector<bool> imputed;         // per modality
};

// `image` is the zero-padded m-channel stack; `mask` says which channels are real.
inline FeatImputeNodes featimpute_graph(Graph& g, const FeatImputeModel& model, const std::vector<NodeId>& p,
                                        const Tensor& image, const ModalityMask& mask) {
  if (mask.empty()) throw ProtocolError("featimpute: empty modality mask");
  const std::size_t m = model.cfg.m, d = model.cfg.feature_dim();
  if (image.rank() != 3 || image.dim(0) != m) throw ShapeError("featimpute: image must have m channels");
  FeatImputeNodes out;
  out.present = mask.present();

  const auto shared_trunk = bind_task_params(g, p[model.shared()], model.shared_layout);
  const NodeId x = g.constant(image);
  const NodeId shared_all = g.linear(task_features(g, shared_trunk, x), p[model.shared_proj_w()], p[model.shared_proj_b()]);
  std::vector<NodeId> shared_chunk(m);
  for (std::size_t j = 0; j < m; ++j) shared_chunk[j] = g.slice(shared_all, 0, j * d, (j + 1) * d);

  const std::size_t hw = image.dim(1) * image.dim(2);
  std::vector<NodeId> fused(m);
  for (std::size_t j : out.present) {
    Tensor ch({1, image.dim(1), image.dim(2)});
    std::copy_n(image.data().begin() + static_cast<long>(j * hw), hw, ch.data().begin());
    const auto trunk = bind_task_params(g, p[model.specific(j)], model.specific_layout);
    const NodeId spec = task_features(g, trunk, g.constant(ch));
    const NodeId cat = g.concat({spec, shared_chunk[j]}, 0);
    fused[j] = g.add(g.linear(cat, p[model.fuse_w(j)], p[model.fuse_b(j)]), shared_chunk[j]);
    out.specific.push_back(spec);
    out.shared.push_back(shared_chunk[j]);
    out.domain_logits.push_back(g.linear(spec, p[model.dom_w()], p[model.dom_b()]));
  }
  const std::size_t first = out.present.front();
  out.imputed.assign(m, false);
  for (std::size_t j = 0; j < m; ++j) {
    if (mask[j]) continue;
    fused[j] = shared_chunk[first];
    out.imputed[j] = true;
  }
  NodeId sum = fused[0];
  for (std::size_t j = 1; j < m; ++j) sum = g.add(sum, fused[j]);
  const NodeId mean = g.scale(sum, 1.0 / static_cast<double>(m));
  out.logits = g.linear(mean, p[model.cls_w()], p[model.cls_b()]);
  out.fused = std::move(fused);
  return out;
}

struct FeatImputeOutputs {
  Tensor logits;
  std::vector<Tensor> shared;
  std::vector<Tensor> specific;
  std::vector<Tensor> domain_logits;
  std::vector<Tensor> fused;
  std::vector<bool> imputed;
};

inline FeatImputeOutputs featimpute_forward(const FeatImputeModel& model, const Sample& sample) {
  Graph g;
  std::vector<NodeId> p;
  for (const auto& t : model.params.values) p.push_back(g.constant(t));
  const auto n = featimpute_graph(g, model, p, sample.image, sample.mask);
  FeatImputeOutputs o;
  o.logits = g.value(n.logits);
  for (NodeId id : n.shared) o.shared.push_back(g.value(id));
  for (NodeId id : n.specific) o.specific.push_back(g.value(id));
  for (NodeId id : n.domain_logits) o.domain_logits.push_back(g.value(id));
  for (NodeId id : n.fused) o.fused.push_back(g.value(id));
  o.imputed = n.imputed;
  return o;
}

}  // namespace ham
