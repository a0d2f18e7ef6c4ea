#pragma once

// Multi-modal samples, modality masks, the synthetic blob benchmark,
// incompleteness injection, masking, augmentation and stratified splitting.

#include <algorithm>
#include <cmath>
#include <compare>
#include <cstdint>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "ham/error.hpp"
#include "ham/rng.hpp"
#include "ham/tensor.hpp"

namespace ham {

// Presence vector over m modalities; bit j set iff modality j is present.
class ModalityMask {
 public:
  ModalityMask() = default;
  explicit ModalityMask(std::vector<std::uint8_t> bits) : bits_(std::move(bits)) {
    for (auto& b : bits_) b = b ? 1 : 0;
  }

  static ModalityMask all(std::size_t m) { return ModalityMask(std::vector<std::uint8_t>(m, 1)); }
  static ModalityMask none(std::size_t m) { return ModalityMask(std::vector<std::uint8_t>(m, 0)); }

  // "1011" -> bits {1,0,1,1}
  static ModalityMask parse(const std::string& s) {
    std::vector<std::uint8_t> bits;
    for (char c : s) {
      if (c != '0' && c != '1') throw ConfigError("modality mask '" + s + "' must contain only 0/1");
      bits.push_back(c == '1');
    }
    return ModalityMask(std::move(bits));
  }

  std::size_t size() const noexcept { return bits_.size(); }
  bool operator[](std::size_t j) const { return bits_.at(j) != 0; }
  void set(std::size_t j, bool on) { bits_.at(j) = on ? 1 : 0; }

  std::size_t popcount() const { return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), 1)); }
  bool empty() const { return popcount() == 0; }
  bool complete() const { return popcount() == bits_.size(); }

  // Every modality set here is also set in `other`.
  bool implies(const ModalityMask& other) const {
    check_same_size(other);
    for (std::size_t j = 0; j < bits_.size(); ++j)
      if (bits_[j] && !other.bits_[j]) return false;
    return true;
  }

  ModalityMask operator&(const ModalityMask& other) const {
    check_same_size(other);
    ModalityMask r = *this;
    for (std::size_t j = 0; j < bits_.size(); ++j) r.bits_[j] = bits_[j] & other.bits_[j];
    return r;
  }

  std::vector<std::size_t> present() const {
    std::vector<std::size_t> out;
    for (std::size_t j = 0; j < bits_.size(); ++j)
      if (bits_[j]) out.push_back(j);
    return out;
  }

  std::string str() const {
    std::string s;
    for (auto b : bits_) s.push_back(b ? '1' : '0');
    return s;
  }

  const std::vector<std::uint8_t>& bits() const noexcept { return bits_; }

  friend auto operator<=>(const ModalityMask&, const ModalityMask&) = default;

 private:
  void check_same_size(const ModalityMask& other) const {
    if (other.size() != size())
      throw ShapeError("modality mask length mismatch: " + std::to_string(size()) + " vs " +
                       std::to_string(other.size()));
  }

  std::vector<std::uint8_t> bits_;
};

struct Sample {
  std::string id;
  Tensor image;  // [m, a, b]
  ModalityMask mask;
  std::size_t label = 0;

  friend bool operator==(const Sample&, const Sample&) = default;
};

enum class Split { Train, Test };

struct Dataset {
  std::vector<Sample> samples;
  std::size_t m = 0;
  std::size_t classes = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::string> modality_names;
  Split split = Split::Train;

  std::size_t size() const noexcept { return samples.size(); }

  std::vector<std::size_t> labels() const {
    std::vector<std::size_t> out;
    out.reserve(samples.size());
    for (const auto& s : samples) out.push_back(s.label);
    return out;
  }

  std::vector<std::size_t> class_counts() const {
    std::vector<std::size_t> counts(classes, 0);
    for (const auto& s : samples) ++counts.at(s.label);
    return counts;
  }

  std::size_t complete_count() const {
    return static_cast<std::size_t>(
        std::count_if(samples.begin(), samples.end(), [](const Sample& s) { return s.mask.complete(); }));
  }

  // Distinct availability patterns, in mask order.
  std::vector<ModalityMask> patterns() const {
    std::set<ModalityMask> seen;
    for (const auto& s : samples) seen.insert(s.mask);
    return {seen.begin(), seen.end()};
  }

  Dataset subset(const std::vector<std::size_t>& indices) const {
    Dataset d = empty_like();
    d.samples.reserve(indices.size());
    for (std::size_t i : indices) d.samples.push_back(samples.at(i));
    return d;
  }

  Dataset empty_like() const {
    Dataset d;
    d.m = m;
    d.classes = classes;
    d.height = height;
    d.width = width;
    d.modality_names = modality_names;
    d.split = split;
    return d;
  }

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

inline std::vector<std::string> default_modality_names(std::size_t m) {
  if (m == 4) return {"T1", "T1ce", "T2", "FLAIR"};
  std::vector<std::string> names;
  for (std::size_t j = 0; j < m; ++j) names.push_back("mod" + std::to_string(j));
  return names;
}

inline bool channel_is_zero(const Tensor& image, std::size_t j) {
  const std::size_t hw = image.dim(1) * image.dim(2);
  for (std::size_t i = 0; i < hw; ++i)
    if (image[j * hw + i] != 0.0) return false;
  return true;
}

// Zero-padding convention: mask bit 0 <=> channel exactly all-zero.
inline bool zero_padding_consistent(const Sample& s) {
  for (std::size_t j = 0; j < s.mask.size(); ++j)
    if (s.mask[j] == channel_is_zero(s.image, j)) return false;
  return true;
}

// ---------------------------------------------------------------------------
// Synthetic benchmark

// Each modality channel holds one Gaussian blob on a dim background. The class
// is encoded jointly by the per-modality blob intensity and radius tables, so
// no single modality separates all classes.
struct SyntheticSpec {
  std::size_t n_samples = 600;
  std::size_t m = 4;
  std::size_t classes = 3;
  std::size_t height = 32;
  std::size_t width = 32;
  double background = 0.1;
  double center_spread = 0.15;  // fraction of the image extent
  // [class][modality]
  std::vector<std::vector<double>> radius_mean;
  std::vector<std::vector<double>> intensity_mean;
  double noise_std = 0.05;
  // Per-sample relative jitter of radius and intensity, in units of noise_std.
  double jitter_gain = 2.0;
  std::uint64_t seed = 7;

  // Fills empty tables: modality j singles out class (j mod C), by a brighter
  // blob for the first C modalities and by a wider blob for the rest. Each
  // modality alone therefore only separates one class from the others.
  void fill_default_tables() {
    if (intensity_mean.empty()) {
      intensity_mean.assign(classes, std::vector<double>(m, 0.45));
      for (std::size_t j = 0; j < m; ++j) intensity_mean[j % classes][j] = 0.8;
    }
    if (radius_mean.empty()) {
      radius_mean.assign(classes, std::vector<double>(m, 0.18));
      for (std::size_t j = classes; j < m; ++j) radius_mean[j % classes][j] = 0.28;
    }
  }
};

inline void validate(const SyntheticSpec& spec) {
  if (spec.height < 8 || spec.width < 8) throw ConfigError("synthetic spec: image extent must be at least 8x8");
  if (spec.m == 0 || spec.classes == 0) throw ConfigError("synthetic spec: m and classes must be positive");
  if (spec.n_samples < spec.classes) throw ConfigError("synthetic spec: n_samples must be at least the class count");
  if (spec.noise_std < 0.0) throw ConfigError("synthetic spec: noise_std must be non-negative");
  auto check_table = [&](const std::vector<std::vector<double>>& t, const char* name) {
    if (t.size() != spec.classes) throw ConfigError(std::string("synthetic spec: ") + name + " needs one row per class");
    for (const auto& row : t)
      if (row.size() != spec.m)
        throw ConfigError(std::string("synthetic spec: ") + name + " needs one column per modality");
  };
  check_table(spec.radius_mean, "radius_mean");
  check_table(spec.intensity_mean, "intensity_mean");
}

inline Dataset generate_synthetic(SyntheticSpec spec) {
  spec.fill_default_tables();
  validate(spec);
  Rng rng(spec.seed);
  Dataset ds;
  ds.m = spec.m;
  ds.classes = spec.classes;
  ds.height = spec.height;
  ds.width = spec.width;
  ds.modality_names = default_modality_names(spec.m);

  // Balanced labels in a seeded order.
  std::vector<std::size_t> labels(spec.n_samples);
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = i % spec.classes;
  std::shuffle(labels.begin(), labels.end(), rng);

  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  const double h = static_cast<double>(spec.height), w = static_cast<double>(spec.width);
  const double extent = std::min(h, w);
  const double jitter = spec.noise_std * spec.jitter_gain;

  for (std::size_t i = 0; i < spec.n_samples; ++i) {
    const std::size_t c = labels[i];
    Tensor img({spec.m, spec.height, spec.width});
    const double cy = (h - 1) / 2 + unit(rng) * spec.center_spread * h;
    const double cx = (w - 1) / 2 + unit(rng) * spec.center_spread * w;
    for (std::size_t j = 0; j < spec.m; ++j) {
      const double radius = std::max(0.02, spec.radius_mean[c][j] * (1.0 + jitter * gauss(rng))) * extent;
      const double amp = spec.intensity_mean[c][j] * (1.0 + jitter * gauss(rng));
      for (std::size_t y = 0; y < spec.height; ++y) {
        for (std::size_t x = 0; x < spec.width; ++x) {
          const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
          double v = spec.background + amp * std::exp(-(dy * dy + dx * dx) / (2.0 * radius * radius));
          if (spec.noise_std > 0.0) v += spec.noise_std * gauss(rng);
          // Stored at float precision so manifests round-trip exactly.
          img.at(j, y, x) = static_cast<double>(static_cast<float>(std::clamp(v, 0.0, 1.0)));
        }
      }
    }
    ds.samples.push_back(Sample{"s" + std::to_string(i), std::move(img), ModalityMask::all(spec.m), c});
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Masking

inline Sample zero_mask(const Sample& sample, const ModalityMask& mu) {
  Sample out = sample;
  out.mask = sample.mask & mu;
  const std::size_t hw = sample.image.dim(1) * sample.image.dim(2);
  for (std::size_t j = 0; j < mu.size(); ++j)
    if (!mu[j]) std::fill_n(out.image.data().begin() + static_cast<long>(j * hw), hw, 0.0);
  return out;
}

// Channels with mu_j = 1 in ascending modality order.
inline Tensor restrict(const Sample& sample, const ModalityMask& mu) {
  if (mu.size() != sample.mask.size()) throw ShapeError("restrict: mask length does not match sample modalities");
  if (!mu.implies(sample.mask))
    throw ProtocolError("restrict: mask " + mu.str() + " requests a modality absent from sample '" + sample.id +
                        "' (mask " + sample.mask.str() + ")");
  const std::size_t hw = sample.image.dim(1) * sample.image.dim(2);
  const auto idx = mu.present();
  Tensor out({idx.size(), sample.image.dim(1), sample.image.dim(2)});
  for (std::size_t k = 0; k < idx.size(); ++k)
    std::copy_n(sample.image.data().begin() + static_cast<long>(idx[k] * hw), hw,
                out.data().begin() + static_cast<long>(k * hw));
  return out;
}

// Inverse of restrict: places channels back at their modality indices, zero elsewhere.
inline Tensor embed(const Tensor& restricted, const ModalityMask& mu) {
  const auto idx = mu.present();
  if (restricted.dim(0) != idx.size()) throw ShapeError("embed: channel count does not match mask popcount");
  const std::size_t hw = restricted.dim(1) * restricted.dim(2);
  Tensor out({mu.size(), restricted.dim(1), restricted.dim(2)});
  for (std::size_t k = 0; k < idx.size(); ++k)
    std::copy_n(restricted.data().begin() + static_cast<long>(k * hw), hw,
                out.data().begin() + static_cast<long>(idx[k] * hw));
  return out;
}

// Per-channel min-max to [0,1] over present channels; constant channels map to 0.
inline void normalize_minmax(Sample& s) {
  const std::size_t hw = s.image.dim(1) * s.image.dim(2);
  for (std::size_t j = 0; j < s.mask.size(); ++j) {
    if (!s.mask[j]) continue;
    auto first = s.image.data().begin() + static_cast<long>(j * hw);
    const auto [lo, hi] = std::minmax_element(first, first + static_cast<long>(hw));
    const double mn = *lo, range = *hi - *lo;
    for (auto it = first; it != first + static_cast<long>(hw); ++it) *it = range > 0 ? (*it - mn) / range : 0.0;
  }
}

// ---------------------------------------------------------------------------
// Incompleteness injection

enum class DropMode { SingleDrop, MultiDrop };

// Keeps exactly round(n * completeness / 100) samples untouched (a uniform
// random subset) and removes modalities from the rest: one under SingleDrop,
// k ~ Uniform{1..m-1} under MultiDrop.
inline Dataset inject_incompleteness(const Dataset& ds, double completeness, DropMode mode, std::uint64_t seed) {
  if (!(completeness >= 0.0 && completeness <= 100.0))
    throw ConfigError("completeness must lie in [0,100], got " + std::to_string(completeness));
  const std::size_t n = ds.size();
  const auto keep = static_cast<std::size_t>(std::llround(static_cast<double>(n) * completeness / 100.0));
  if (keep == n) return ds;
  if (ds.m < 2) throw ProtocolError("cannot drop modalities from a single-modality dataset");

  Rng rng(seed);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);

  Dataset out = ds;
  for (std::size_t r = keep; r < n; ++r) {
    Sample& s = out.samples[order[r]];
    std::vector<std::size_t> present = s.mask.present();
    if (present.size() < 2)
      throw ProtocolError("sample '" + s.id + "' has fewer than two modalities; nothing can be dropped");
    std::size_t k = 1;
    if (mode == DropMode::MultiDrop)
      k = std::uniform_int_distribution<std::size_t>(1, present.size() - 1)(rng);
    std::shuffle(present.begin(), present.end(), rng);
    ModalityMask mu = ModalityMask::all(ds.m);
    for (std::size_t d = 0; d < k; ++d) mu.set(present[d], false);
    s = zero_mask(s, mu);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentationConfig {
  double flip_prob = 0.5;
  double noise_prob = 0.25;
  double noise_std = 0.05;
  double smooth_prob = 0.25;
  std::pair<double, double> smooth_sigma_range{0.5, 1.5};
  double contrast_prob = 0.25;
  std::pair<double, double> contrast_gamma_range{0.7, 1.5};
  double hist_prob = 0.25;
  std::size_t hist_shift_points = 3;

  static AugmentationConfig disabled() {
    AugmentationConfig c;
    c.flip_prob = c.noise_prob = c.smooth_prob = c.contrast_prob = c.hist_prob = 0.0;
    return c;
  }

  void validate() const {
    for (double p : {flip_prob, noise_prob, smooth_prob, contrast_prob, hist_prob})
      if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("augmentation probabilities must lie in [0,1]");
    if (smooth_sigma_range.first > smooth_sigma_range.second || contrast_gamma_range.first > contrast_gamma_range.second)
      throw ConfigError("augmentation ranges must be ordered lo <= hi");
    if (noise_std < 0.0) throw ConfigError("augmentation noise_std must be non-negative");
    if (hist_shift_points < 2) throw ConfigError("histogram shift needs at least 2 control points");
  }
};

namespace detail {

inline void gaussian_smooth(double* ch, std::size_t h, std::size_t w, double sigma) {
  const auto radius = static_cast<long>(std::ceil(3.0 * sigma));
  std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
  double z = 0.0;
  for (long i = -radius; i <= radius; ++i)
    z += kernel[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
  for (double& k : kernel) k /= z;
  auto clampi = [](long v, long n) { return std::clamp(v, 0L, n - 1); };
  std::vector<double> tmp(h * w);
  const long H = static_cast<long>(h), W = static_cast<long>(w);
  for (long y = 0; y < H; ++y)
    for (long x = 0; x < W; ++x) {
      double acc = 0.0;
      for (long i = -radius; i <= radius; ++i)
        acc += kernel[static_cast<std::size_t>(i + radius)] * ch[y * W + clampi(x + i, W)];
      tmp[static_cast<std::size_t>(y * W + x)] = acc;
    }
  for (long y = 0; y < H; ++y)
    for (long x = 0; x < W; ++x) {
      double acc = 0.0;
      for (long i = -radius; i <= radius; ++i)
        acc += kernel[static_cast<std::size_t>(i + radius)] * tmp[static_cast<std::size_t>(clampi(y + i, H) * W + x)];
      ch[y * W + x] = acc;
    }
}

}  // namespace detail

// Random flip plus intensity transforms. Flip mirrors every channel; intensity
// transforms touch present channels only, so absent channels stay exactly zero.
inline Sample augment(const Sample& sample, const AugmentationConfig& cfg, Rng& rng) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  Sample out = sample;
  const std::size_t m = out.image.dim(0), h = out.image.dim(1), w = out.image.dim(2);
  const bool flip = u01(rng) < cfg.flip_prob;
  const bool noise = u01(rng) < cfg.noise_prob;
  const bool smooth = u01(rng) < cfg.smooth_prob;
  const bool contrast = u01(rng) < cfg.contrast_prob;
  const bool hist = u01(rng) < cfg.hist_prob;
  if (!(flip || noise || smooth || contrast || hist)) return out;

  if (flip)
    for (std::size_t j = 0; j < m; ++j)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w / 2; ++x) std::swap(out.image.at(j, y, x), out.image.at(j, y, w - 1 - x));

  std::normal_distribution<double> gauss(0.0, 1.0);
  const double sigma = std::uniform_real_distribution<double>(cfg.smooth_sigma_range.first,
                                                              cfg.smooth_sigma_range.second)(rng);
  const double gamma = std::uniform_real_distribution<double>(cfg.contrast_gamma_range.first,
                                                              cfg.contrast_gamma_range.second)(rng);
  for (std::size_t j = 0; j < m; ++j) {
    if (!out.mask[j]) continue;
    double* ch = out.image.data().data() + j * h * w;
    if (noise)
      for (std::size_t i = 0; i < h * w; ++i) ch[i] += cfg.noise_std * gauss(rng);
    if (smooth) detail::gaussian_smooth(ch, h, w, sigma);
    if (contrast || hist) {
      const auto [lo_it, hi_it] = std::minmax_element(ch, ch + h * w);
      const double lo = *lo_it, range = *hi_it - *lo_it;
      if (range > 0.0) {
        if (contrast)
          for (std::size_t i = 0; i < h * w; ++i) ch[i] = std::pow((ch[i] - lo) / range, gamma) * range + lo;
        if (hist) {
          // Piecewise-linear remap through jittered control points.
          const std::size_t k = cfg.hist_shift_points;
          std::vector<double> ref(k), moved(k);
          for (std::size_t p = 0; p < k; ++p) ref[p] = static_cast<double>(p) / static_cast<double>(k - 1);
          moved = ref;
          for (std::size_t p = 1; p + 1 < k; ++p)
            moved[p] = std::clamp(ref[p] + (u01(rng) - 0.5) / static_cast<double>(k - 1), 0.0, 1.0);
          std::sort(moved.begin(), moved.end());
          for (std::size_t i = 0; i < h * w; ++i) {
            const double t = std::clamp((ch[i] - lo) / range, 0.0, 1.0);
            std::size_t seg = std::min<std::size_t>(static_cast<std::size_t>(t * static_cast<double>(k - 1)), k - 2);
            const double f = (t - ref[seg]) / (ref[seg + 1] - ref[seg]);
            ch[i] = (moved[seg] + f * (moved[seg + 1] - moved[seg])) * range + lo;
          }
        }
      }
    }
    for (std::size_t i = 0; i < h * w; ++i) ch[i] = std::clamp(ch[i], 0.0, 1.0);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Splitting

struct Fold {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
};

inline std::vector<std::vector<std::size_t>> indices_by_class(const std::vector<std::size_t>& labels,
                                                              std::size_t classes) {
  std::vector<std::vector<std::size_t>> by_class(classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= classes) throw ConfigError("label " + std::to_string(labels[i]) + " out of range");
    by_class[labels[i]].push_back(i);
  }
  return by_class;
}

// Per-class shuffled indices dealt round-robin with one counter running across
// classes, so per-class fold counts and fold totals both differ by at most one.
inline std::vector<Fold> stratified_kfold(const std::vector<std::size_t>& labels, std::size_t classes, std::size_t k,
                                          std::uint64_t seed) {
  if (k < 2) throw ConfigError("stratified_kfold: k must be at least 2");
  auto by_class = indices_by_class(labels, classes);
  Rng rng(seed);
  std::vector<Fold> folds(k);
  std::size_t slot = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    if (by_class[c].size() < k)
      throw ProtocolError("stratified_kfold: class " + std::to_string(c) + " has " +
                          std::to_string(by_class[c].size()) + " members, fewer than k=" + std::to_string(k));
    std::shuffle(by_class[c].begin(), by_class[c].end(), rng);
    for (std::size_t i : by_class[c]) folds[slot++ % k].val.push_back(i);
  }
  for (std::size_t f = 0; f < k; ++f) {
    std::sort(folds[f].val.begin(), folds[f].val.end());
    for (std::size_t g = 0; g < k; ++g)
      if (g != f) folds[f].train.insert(folds[f].train.end(), folds[g].val.begin(), folds[g].val.end());
  }
  for (auto& f : folds) std::sort(f.train.begin(), f.train.end());
  return folds;
}

inline std::vector<Fold> stratified_kfold(const Dataset& ds, std::size_t k, std::uint64_t seed) {
  return stratified_kfold(ds.labels(), ds.classes, k, seed);
}

// Per-class holdout of round(n_c * test_fraction) samples.
inline std::pair<Dataset, Dataset> stratified_holdout(const Dataset& ds, double test_fraction, std::uint64_t seed) {
  auto by_class = indices_by_class(ds.labels(), ds.classes);
  Rng rng(seed);
  std::vector<std::size_t> train, test;
  for (auto& idx : by_class) {
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto n_test = static_cast<std::size_t>(std::llround(static_cast<double>(idx.size()) * test_fraction));
    test.insert(test.end(), idx.begin(), idx.begin() + static_cast<long>(n_test));
    train.insert(train.end(), idx.begin() + static_cast<long>(n_test), idx.end());
  }
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());
  Dataset tr = ds.subset(train), te = ds.subset(test);
  tr.split = Split::Train;
  te.split = Split::Test;
  return {std::move(tr), std::move(te)};
}

}  // namespace ham
