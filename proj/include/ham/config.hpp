#pragma once

// JSON run configuration: dataset source, training hyperparameters and
// experiment parameters. Parsing is strict (unknown keys are errors) so a
// config file fully determines a run; the canonical dump feeds the config hash.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "ham/data.hpp"
#include "ham/training.hpp"

namespace ham {

using json = nlohmann::json;

namespace detail {

inline void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || it.key() == a;
    if (!ok) throw ConfigError(where + ": unknown key '" + it.key() + "'");
  }
}

template <class T>
void read_opt(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// SyntheticSpec

inline json to_json(const SyntheticSpec& s) {
  SyntheticSpec f = s;
  f.fill_default_tables();
  return json{{"n_samples", f.n_samples},     {"m", f.m},
              {"classes", f.classes},         {"height", f.height},
              {"width", f.width},             {"background", f.background},
              {"center_spread", f.center_spread}, {"noise_std", f.noise_std},
              {"jitter_gain", f.jitter_gain}, {"seed", f.seed},
              {"radius_mean", f.radius_mean}, {"intensity_mean", f.intensity_mean}};
}

inline SyntheticSpec synthetic_from_json(const json& j) {
  const std::string w = "synthetic";
  detail::check_keys(j, {"n_samples", "m", "classes", "height", "width", "background", "center_spread", "noise_std",
                         "jitter_gain", "seed", "radius_mean", "intensity_mean"},
                     w);
  SyntheticSpec s;
  detail::read_opt(j, "n_samples", s.n_samples, w);
  detail::read_opt(j, "m", s.m, w);
  detail::read_opt(j, "classes", s.classes, w);
  detail::read_opt(j, "height", s.height, w);
  detail::read_opt(j, "width", s.width, w);
  detail::read_opt(j, "background", s.background, w);
  detail::read_opt(j, "center_spread", s.center_spread, w);
  detail::read_opt(j, "noise_std", s.noise_std, w);
  detail::read_opt(j, "jitter_gain", s.jitter_gain, w);
  detail::read_opt(j, "seed", s.seed, w);
  detail::read_opt(j, "radius_mean", s.radius_mean, w);
  detail::read_opt(j, "intensity_mean", s.intensity_mean, w);
  s.fill_default_tables();
  validate(s);
  return s;
}

// ---------------------------------------------------------------------------
// AugmentationConfig / TrainConfig

inline json to_json(const AugmentationConfig& a) {
  return json{{"flip_prob", a.flip_prob},
              {"noise_prob", a.noise_prob},
              {"noise_std", a.noise_std},
              {"smooth_prob", a.smooth_prob},
              {"smooth_sigma_range", {a.smooth_sigma_range.first, a.smooth_sigma_range.second}},
              {"contrast_prob", a.contrast_prob},
              {"contrast_gamma_range", {a.contrast_gamma_range.first, a.contrast_gamma_range.second}},
              {"hist_prob", a.hist_prob},
              {"hist_shift_points", a.hist_shift_points}};
}

inline AugmentationConfig augmentation_from_json(const json& j) {
  if (j.is_boolean()) return j.get<bool>() ? AugmentationConfig{} : AugmentationConfig::disabled();
  const std::string w = "train.augmentation";
  detail::check_keys(j, {"flip_prob", "noise_prob", "noise_std", "smooth_prob", "smooth_sigma_range", "contrast_prob",
                         "contrast_gamma_range", "hist_prob", "hist_shift_points"},
                     w);
  AugmentationConfig a;
  detail::read_opt(j, "flip_prob", a.flip_prob, w);
  detail::read_opt(j, "noise_prob", a.noise_prob, w);
  detail::read_opt(j, "noise_std", a.noise_std, w);
  detail::read_opt(j, "smooth_prob", a.smooth_prob, w);
  detail::read_opt(j, "smooth_sigma_range", a.smooth_sigma_range, w);
  detail::read_opt(j, "contrast_prob", a.contrast_prob, w);
  detail::read_opt(j, "contrast_gamma_range", a.contrast_gamma_range, w);
  detail::read_opt(j, "hist_prob", a.hist_prob, w);
  detail::read_opt(j, "hist_shift_points", a.hist_shift_points, w);
  a.validate();
  return a;
}

inline json to_json(const TrainConfig& c) {
  json j{{"batch_size", c.batch_size},
         {"lr", c.lr},
         {"n_it", c.n_it},
         {"gamma", c.gamma},
         {"max_iterations", c.max_iterations},
         {"eval_every", c.eval_every},
         {"cv_folds", c.cv_folds},
         {"augmentation", to_json(c.augmentation)},
         {"widths", c.widths},
         {"kernel", c.kernel},
         {"lambda_shared", c.lambda_shared},
         {"lambda_spec", c.lambda_spec},
         {"hyper_final_weight_scale", c.hyper_init.final_weight_scale},
         {"hyper_task_init_bias", c.hyper_init.task_init_bias}};
  j["optimizer"] = c.optimizer ? json(optimizer_name(*c.optimizer)) : json(nullptr);
  return j;
}

inline TrainConfig train_from_json(const json& j) {
  const std::string w = "train";
  detail::check_keys(j, {"batch_size", "lr", "n_it", "gamma", "max_iterations", "eval_every", "cv_folds",
                         "augmentation", "widths", "kernel", "lambda_shared", "lambda_spec",
                         "hyper_final_weight_scale", "hyper_task_init_bias", "optimizer"},
                     w);
  TrainConfig c;
  detail::read_opt(j, "batch_size", c.batch_size, w);
  detail::read_opt(j, "lr", c.lr, w);
  detail::read_opt(j, "n_it", c.n_it, w);
  detail::read_opt(j, "gamma", c.gamma, w);
  detail::read_opt(j, "max_iterations", c.max_iterations, w);
  detail::read_opt(j, "eval_every", c.eval_every, w);
  detail::read_opt(j, "cv_folds", c.cv_folds, w);
  if (j.contains("augmentation")) c.augmentation = augmentation_from_json(j.at("augmentation"));
  detail::read_opt(j, "widths", c.widths, w);
  detail::read_opt(j, "kernel", c.kernel, w);
  detail::read_opt(j, "lambda_shared", c.lambda_shared, w);
  detail::read_opt(j, "lambda_spec", c.lambda_spec, w);
  detail::read_opt(j, "hyper_final_weight_scale", c.hyper_init.final_weight_scale, w);
  detail::read_opt(j, "hyper_task_init_bias", c.hyper_init.task_init_bias, w);
  if (j.contains("optimizer") && !j.at("optimizer").is_null()) {
    const auto s = j.at("optimizer").get<std::string>();
    if (s == "rmsprop")
      c.optimizer = OptimizerKind::RmsProp;
    else if (s == "adam")
      c.optimizer = OptimizerKind::Adam;
    else
      throw ConfigError("train.optimizer: expected 'rmsprop' or 'adam', got '" + s + "'");
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Modality subsets: "1010" or "T1+T2"

inline ModalityMask parse_subset(const std::string& s, const std::vector<std::string>& names) {
  if (!s.empty() && s.find_first_not_of("01") == std::string::npos) {
    auto mu = ModalityMask::parse(s);
    if (mu.size() != names.size())
      throw ConfigError("subset '" + s + "' has " + std::to_string(mu.size()) + " entries, expected " +
                        std::to_string(names.size()));
    if (mu.empty()) throw ConfigError("subset '" + s + "' selects no modality");
    return mu;
  }
  ModalityMask mu = ModalityMask::none(names.size());
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, '+')) {
    std::size_t j = 0;
    while (j < names.size() && names[j] != part) ++j;
    if (j == names.size()) throw ConfigError("subset '" + s + "': unknown modality '" + part + "'");
    mu.set(j, true);
  }
  if (mu.empty()) throw ConfigError("subset '" + s + "' selects no modality");
  return mu;
}

inline std::string subset_label(const ModalityMask& mu, const std::vector<std::string>& names) {
  std::string out;
  for (std::size_t j : mu.present()) out += (out.empty() ? "" : "+") + names.at(j);
  return out;
}

// Rows of the test-time subset table: three pairs with T1, T2+FLAIR, two triples, all four.
inline std::vector<std::string> default_subsets() {
  return {"T1+T2", "T1+T1ce", "T1+FLAIR", "T2+FLAIR", "T1+T1ce+T2", "T1+T2+FLAIR", "T1+T1ce+T2+FLAIR"};
}

// ---------------------------------------------------------------------------
// RunConfig

inline DropMode parse_drop_mode(const std::string& s) {
  if (s == "single_drop") return DropMode::SingleDrop;
  if (s == "multi_drop") return DropMode::MultiDrop;
  throw ConfigError("drop mode must be 'single_drop' or 'multi_drop', got '" + s + "'");
}
inline const char* drop_mode_name(DropMode d) { return d == DropMode::SingleDrop ? "single_drop" : "multi_drop"; }

struct RunConfig {
  std::optional<SyntheticSpec> synthetic;  // exactly one of synthetic / manifest
  std::string manifest;
  double test_fraction = 0.2;
  std::vector<Method> methods{Method::Ham, Method::Standard, Method::Dropout, Method::FeatImpute};
  TrainConfig train;
  bool cv = true;
  std::uint64_t master_seed = 1;
  std::string output_dir = "out";
  // single training run (train subcommand)
  double train_completeness = 100.0;
  DropMode train_drop_mode = DropMode::SingleDrop;
  // completeness sweep
  std::vector<double> levels{100, 75, 50, 25};
  std::size_t n_runs = 10;
  // test-time subsets
  double b_completeness = 25.0;
  std::size_t b_n_runs = 10;
  std::vector<std::string> subsets = default_subsets();
  std::optional<std::vector<Method>> b_methods;  // default: methods without standard

  std::vector<Method> methods_b() const {
    if (b_methods) return *b_methods;
    std::vector<Method> out;
    for (Method m : methods)
      if (m != Method::Standard) out.push_back(m);
    return out;
  }

  void validate() const {
    if (synthetic.has_value() == !manifest.empty())
      throw ConfigError("dataset: give exactly one of 'synthetic' or 'manifest'");
    if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw ConfigError("test_fraction must lie in (0,1)");
    if (methods.empty()) throw ConfigError("methods must not be empty");
    if (n_runs < 1 || b_n_runs < 1) throw ConfigError("n_runs must be >= 1");
    if (levels.empty()) throw ConfigError("levels must not be empty");
    for (double l : levels)
      if (!(l >= 0.0 && l <= 100.0)) throw ConfigError("completeness levels must lie in [0,100]");
    if (subsets.empty()) throw ConfigError("subsets must not be empty");
    train.validate();
  }
};

inline json methods_json(const std::vector<Method>& ms) {
  json a = json::array();
  for (Method m : ms) a.push_back(method_name(m));
  return a;
}

inline std::vector<Method> methods_from_json(const json& j, const std::string& where) {
  if (!j.is_array()) throw ConfigError(where + ": expected an array of method names");
  std::vector<Method> out;
  for (const auto& v : j) {
    if (!v.is_string()) throw ConfigError(where + ": method names must be strings");
    out.push_back(parse_method(v.get<std::string>()));
  }
  return out;
}

// Every field spelled out, output_dir excluded: two configs describing the
// same computation dump identically.
inline json canonical_json(const RunConfig& c) {
  json ds;
  if (c.synthetic)
    ds["synthetic"] = to_json(*c.synthetic);
  else
    ds["manifest"] = c.manifest;
  return json{{"dataset", ds},
              {"test_fraction", c.test_fraction},
              {"methods", methods_json(c.methods)},
              {"train", to_json(c.train)},
              {"cv", c.cv},
              {"master_seed", c.master_seed},
              {"train_completeness", c.train_completeness},
              {"train_drop_mode", drop_mode_name(c.train_drop_mode)},
              {"experiment_a", {{"levels", c.levels}, {"n_runs", c.n_runs}}},
              {"experiment_b",
               {{"completeness", c.b_completeness},
                {"n_runs", c.b_n_runs},
                {"subsets", c.subsets},
                {"methods", methods_json(c.methods_b())}}}};
}

inline RunConfig run_config_from_json(const json& j) {
  const std::string w = "config";
  detail::check_keys(j, {"dataset", "test_fraction", "methods", "train", "cv", "master_seed", "output_dir",
                         "train_completeness", "train_drop_mode", "experiment_a", "experiment_b"},
                     w);
  RunConfig c;
  if (!j.contains("dataset")) throw ConfigError("config: missing 'dataset'");
  const json& d = j.at("dataset");
  detail::check_keys(d, {"synthetic", "manifest"}, "dataset");
  if (d.contains("synthetic")) c.synthetic = synthetic_from_json(d.at("synthetic"));
  detail::read_opt(d, "manifest", c.manifest, "dataset");
  detail::read_opt(j, "test_fraction", c.test_fraction, w);
  if (j.contains("methods")) c.methods = methods_from_json(j.at("methods"), "methods");
  if (j.contains("train")) c.train = train_from_json(j.at("train"));
  detail::read_opt(j, "cv", c.cv, w);
  detail::read_opt(j, "master_seed", c.master_seed, w);
  detail::read_opt(j, "output_dir", c.output_dir, w);
  detail::read_opt(j, "train_completeness", c.train_completeness, w);
  if (j.contains("train_drop_mode")) {
    std::string s;
    detail::read_opt(j, "train_drop_mode", s, w);
    c.train_drop_mode = parse_drop_mode(s);
  }
  if (j.contains("experiment_a")) {
    const json& a = j.at("experiment_a");
    detail::check_keys(a, {"levels", "n_runs"}, "experiment_a");
    detail::read_opt(a, "levels", c.levels, "experiment_a");
    detail::read_opt(a, "n_runs", c.n_runs, "experiment_a");
  }
  if (j.contains("experiment_b")) {
    const json& b = j.at("experiment_b");
    detail::check_keys(b, {"completeness", "n_runs", "subsets", "methods"}, "experiment_b");
    detail::read_opt(b, "completeness", c.b_completeness, "experiment_b");
    detail::read_opt(b, "n_runs", c.b_n_runs, "experiment_b");
    detail::read_opt(b, "subsets", c.subsets, "experiment_b");
    if (b.contains("methods")) c.b_methods = methods_from_json(b.at("methods"), "experiment_b.methods");
  }
  c.validate();
  return c;
}

inline json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path.string() + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("invalid JSON in '" + path.string() + "': " + e.what());
  }
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  RunConfig c = run_config_from_json(read_json_file(path));
  // relative manifest paths resolve against the config file
  if (!c.manifest.empty() && std::filesystem::path(c.manifest).is_relative())
    c.manifest = (path.parent_path() / c.manifest).lexically_normal().string();
  return c;
}

// 64-bit FNV-1a.
inline std::uint64_t fnv1a64(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xF];
  return s;
}

inline std::string config_hash(const RunConfig& c) { return hex64(fnv1a64(canonical_json(c).dump())); }

}  // namespace ham
