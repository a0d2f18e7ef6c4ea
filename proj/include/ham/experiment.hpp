#pragma once

// Completeness sweep (A) and test-time modality subsets (B): job fan-out,
// aggregation, Wilcoxon marks and CSV / JSON / SVG emitters.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <functional>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "ham/config.hpp"
#include "ham/manifest.hpp"
#include "ham/metrics.hpp"
#include "ham/stats.hpp"
#include "ham/training.hpp"

namespace ham {

// ---------------------------------------------------------------------------
// Worker pool

// Runs job(i) for i in [0, n) on up to `workers` threads. Results land by
// index, so the outcome never depends on scheduling; the lowest-index
// exception is rethrown after all threads join.
template <class T>
std::vector<T> parallel_map(std::size_t n, std::size_t workers, const std::function<T(std::size_t)>& job) {
  std::vector<std::optional<T>> out(n);
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        out[i] = job(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  std::vector<T> res;
  res.reserve(n);
  for (auto& o : out) res.push_back(std::move(*o));
  return res;
}

inline std::size_t default_jobs() { return std::max(1u, std::thread::hardware_concurrency()); }

// ---------------------------------------------------------------------------
// Results

enum class Experiment { A, B };
inline const char* experiment_name(Experiment e) { return e == Experiment::A ? "a" : "b"; }

struct CellResult {
  std::string axis;
  Method method = Method::Ham;
  std::size_t run = 0;
  std::uint64_t seed = 0;  // training seed, shared by all methods of a run
  MetricsReport metrics;
  std::size_t iterations = 0;
};

struct MethodSummary {
  std::string axis;
  Method method = Method::Ham;
  std::size_t n = 0;
  double mean_ba = 0.0;
  double median_ba = 0.0;
  std::optional<ConfidenceInterval> ci;  // needs >= 2 runs
  double mean_sens = 0.0, mean_spec = 0.0, mean_prec = 0.0;
};

struct PairTest {
  std::string axis;
  Method a = Method::Ham;
  Method b = Method::Standard;
  WilcoxonResult two_sided;
  WilcoxonResult greater;
  double mean_a = 0.0, mean_b = 0.0;
  // p < alpha (two-sided) and the higher mean
  bool a_better = false;
};

struct ExperimentResult {
  Experiment which = Experiment::A;
  std::string config_hash;
  std::uint64_t master_seed = 0;
  std::vector<std::string> axes;
  std::vector<Method> methods;
  std::vector<CellResult> cells;  // ordered by (axis, run, method)
  std::vector<MethodSummary> summaries;
  std::vector<PairTest> pairs;
  std::map<std::string, std::string> marks;  // axis -> HAM significance marks

  std::vector<double> ba(const std::string& axis, Method m) const {
    std::vector<double> v;
    for (const auto& c : cells)
      if (c.axis == axis && c.method == m) v.push_back(c.metrics.balanced_accuracy);
    return v;
  }
};

inline constexpr double kSignificance = 0.05;
inline const std::string kMarkStar = "∗";
inline const std::string kMarkCircle = "⊛";

inline std::string level_label(double level) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", level);
  return buf;
}

// Means, CIs, HAM-vs-other Wilcoxon tests and marks from the cells.
inline void aggregate(ExperimentResult& r) {
  r.summaries.clear();
  r.pairs.clear();
  r.marks.clear();
  for (const auto& axis : r.axes) {
    for (Method m : r.methods) {
      MethodSummary s;
      s.axis = axis;
      s.method = m;
      std::vector<double> ba;
      for (const auto& c : r.cells) {
        if (c.axis != axis || c.method != m) continue;
        ba.push_back(c.metrics.balanced_accuracy);
        s.mean_sens += c.metrics.sensitivity;
        s.mean_spec += c.metrics.specificity;
        s.mean_prec += c.metrics.precision;
      }
      s.n = ba.size();
      if (s.n == 0) continue;
      const double n = static_cast<double>(s.n);
      s.mean_ba = std::accumulate(ba.begin(), ba.end(), 0.0) / n;
      s.median_ba = median(ba);
      s.mean_sens /= n;
      s.mean_spec /= n;
      s.mean_prec /= n;
      if (s.n >= 2) s.ci = confidence_interval(ba);
      r.summaries.push_back(s);
    }
    const bool has_ham = std::find(r.methods.begin(), r.methods.end(), Method::Ham) != r.methods.end();
    if (!has_ham) continue;
    std::map<Method, bool> better;
    for (Method m : r.methods) {
      if (m == Method::Ham) continue;
      PairTest p;
      p.axis = axis;
      p.a = Method::Ham;
      p.b = m;
      const auto a = r.ba(axis, Method::Ham), b = r.ba(axis, m);
      p.two_sided = wilcoxon_signed_rank(a, b, Alternative::TwoSided);
      p.greater = wilcoxon_signed_rank(a, b, Alternative::Greater);
      p.mean_a = std::accumulate(a.begin(), a.end(), 0.0) / static_cast<double>(a.size());
      p.mean_b = std::accumulate(b.begin(), b.end(), 0.0) / static_cast<double>(b.size());
      p.a_better = p.two_sided.p && *p.two_sided.p < kSignificance && p.mean_a > p.mean_b;
      better[m] = p.a_better;
      r.pairs.push_back(p);
    }
    auto beats = [&](Method m) { return better.count(m) && better[m]; };
    std::string mark;
    if (r.which == Experiment::A) {
      if (beats(Method::Standard)) mark += kMarkStar;
      const bool any = better.count(Method::Dropout) || better.count(Method::FeatImpute);
      if (any && (!better.count(Method::Dropout) || beats(Method::Dropout)) &&
          (!better.count(Method::FeatImpute) || beats(Method::FeatImpute)))
        mark += kMarkCircle;
    } else {
      if (beats(Method::Dropout)) mark += kMarkStar;
      if (beats(Method::FeatImpute)) mark += kMarkCircle;
    }
    r.marks[axis] = mark;
  }
}

// ---------------------------------------------------------------------------
// Runners

using ProgressFn = std::function<void(const std::string&)>;

inline Dataset load_base_dataset(const RunConfig& cfg) {
  Dataset ds = cfg.synthetic ? generate_synthetic(*cfg.synthetic) : load_manifest(cfg.manifest);
  if (ds.complete_count() != ds.size())
    throw ProtocolError("experiments need a complete base dataset; " + std::to_string(ds.size() - ds.complete_count()) +
                        " samples already miss modalities");
  return ds;
}

namespace detail {

inline TrainResult run_training(Method m, const Dataset& train_set, const RunConfig& cfg, std::uint64_t seed) {
  TrainConfig tc = cfg.train;
  tc.seed = seed;
  if (!cfg.cv) {
    auto res = train(m, train_set, tc);
    res.record.chosen_iterations = tc.max_iterations;
    return res;
  }
  return train_with_cv(m, train_set, tc);
}

enum ExpStream : std::uint64_t { kHoldout = 1, kDegrade = 2, kTrain = 3 };

}  // namespace detail

inline ExperimentResult run_experiment_a(const Dataset& base, const RunConfig& cfg, std::size_t jobs = 1,
                                         const ProgressFn& progress = {}) {
  ExperimentResult r;
  r.which = Experiment::A;
  r.config_hash = config_hash(cfg);
  r.master_seed = cfg.master_seed;
  r.methods = cfg.methods;
  for (double l : cfg.levels) r.axes.push_back(level_label(l));

  const std::size_t nm = cfg.methods.size(), nr = cfg.n_runs;
  std::mutex log_mu;
  auto cells = parallel_map<CellResult>(cfg.levels.size() * nr * nm, jobs, [&](std::size_t i) {
    const std::size_t li = i / (nr * nm), run = (i / nm) % nr, mi = i % nm;
    const double level = cfg.levels[li];
    const Method m = cfg.methods[mi];
    const std::uint64_t s = cfg.master_seed;
    auto [train_split, test_split] = stratified_holdout(base, cfg.test_fraction, derive_seed(s, {run, detail::kHoldout}));
    const Dataset degraded = inject_incompleteness(train_split, level, DropMode::SingleDrop,
                                                   derive_seed(s, {run, detail::kDegrade, li}));
    const std::uint64_t seed = derive_seed(s, {run, detail::kTrain});
    const auto res = detail::run_training(m, degraded, cfg, seed);
    CellResult c{r.axes[li], m, run, seed, macro_metrics(evaluate(res.model, test_split)),
                 res.record.chosen_iterations};
    if (progress) {
      std::lock_guard lock(log_mu);
      progress("level " + r.axes[li] + " run " + std::to_string(run) + " " + method_name(m) +
               ": BA=" + std::to_string(c.metrics.balanced_accuracy));
    }
    return c;
  });
  r.cells = std::move(cells);
  aggregate(r);
  return r;
}

inline ExperimentResult run_experiment_b(const Dataset& base, const RunConfig& cfg, std::size_t jobs = 1,
                                         const ProgressFn& progress = {}) {
  ExperimentResult r;
  r.which = Experiment::B;
  r.config_hash = config_hash(cfg);
  r.master_seed = cfg.master_seed;
  r.methods = cfg.methods_b();
  if (r.methods.empty()) throw ConfigError("experiment b: no methods to run");
  std::vector<ModalityMask> subsets;
  for (const auto& s : cfg.subsets) {
    subsets.push_back(parse_subset(s, base.modality_names));
    r.axes.push_back(subset_label(subsets.back(), base.modality_names));
  }

  const std::size_t nm = r.methods.size();
  std::mutex log_mu;
  auto per_job = parallel_map<std::vector<CellResult>>(cfg.b_n_runs * nm, jobs, [&](std::size_t i) {
    const std::size_t run = i / nm, mi = i % nm;
    const Method m = r.methods[mi];
    const std::uint64_t s = cfg.master_seed;
    auto [train_split, test_split] = stratified_holdout(base, cfg.test_fraction, derive_seed(s, {run, detail::kHoldout}));
    const Dataset degraded = inject_incompleteness(train_split, cfg.b_completeness, DropMode::MultiDrop,
                                                   derive_seed(s, {run, detail::kDegrade}));
    const std::uint64_t seed = derive_seed(s, {run, detail::kTrain});
    const auto res = detail::run_training(m, degraded, cfg, seed);
    std::vector<CellResult> out;
    for (std::size_t k = 0; k < subsets.size(); ++k)
      out.push_back(CellResult{r.axes[k], m, run, seed, macro_metrics(evaluate(res.model, test_split, subsets[k])),
                               res.record.chosen_iterations});
    if (progress) {
      std::lock_guard lock(log_mu);
      progress("run " + std::to_string(run) + " " + method_name(m) + " done");
    }
    return out;
  });
  // reorder to (axis, run, method)
  for (std::size_t k = 0; k < subsets.size(); ++k)
    for (std::size_t run = 0; run < cfg.b_n_runs; ++run)
      for (std::size_t mi = 0; mi < nm; ++mi) r.cells.push_back(per_job[run * nm + mi][k]);
  aggregate(r);
  return r;
}

// ---------------------------------------------------------------------------
// Emitters

inline std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string csv_header_line(const std::string& hash, std::uint64_t seed, Experiment e) {
  return "# config_hash=" + hash + " master_seed=" + std::to_string(seed) + " experiment=" + experiment_name(e);
}

inline std::string to_csv(const ExperimentResult& r) {
  std::string out = csv_header_line(r.config_hash, r.master_seed, r.which) + "\n";
  out += "axis,method,seed,BA,sens,spec,prec\n";
  for (const auto& c : r.cells) {
    out += c.axis + "," + method_name(c.method) + "," + std::to_string(c.seed) + "," +
           fmt17(c.metrics.balanced_accuracy) + "," + fmt17(c.metrics.sensitivity) + "," +
           fmt17(c.metrics.specificity) + "," + fmt17(c.metrics.precision) + "\n";
  }
  return out;
}

struct CsvStamp {
  std::string config_hash;
  std::uint64_t master_seed = 0;
  Experiment which = Experiment::A;
};

inline CsvStamp parse_csv_stamp(const std::string& first_line) {
  std::istringstream in(first_line);
  std::string hash_tok, seed_tok, exp_tok, pound;
  in >> pound >> hash_tok >> seed_tok >> exp_tok;
  auto value = [&](const std::string& tok, const std::string& key) {
    if (tok.rfind(key + "=", 0) != 0) throw VerificationError("CSV stamp: expected '" + key + "=' in '" + first_line + "'");
    return tok.substr(key.size() + 1);
  };
  if (pound != "#") throw VerificationError("CSV stamp: first line is not a '#' comment");
  CsvStamp s;
  s.config_hash = value(hash_tok, "config_hash");
  try {
    s.master_seed = std::stoull(value(seed_tok, "master_seed"));
  } catch (const std::logic_error&) {
    throw VerificationError("CSV stamp: bad master_seed");
  }
  const std::string e = value(exp_tok, "experiment");
  if (e == "a")
    s.which = Experiment::A;
  else if (e == "b")
    s.which = Experiment::B;
  else
    throw VerificationError("CSV stamp: unknown experiment '" + e + "'");
  return s;
}

inline json wilcoxon_json(const WilcoxonResult& w) {
  return json{{"n", w.n},
              {"w", w.w},
              {"w_plus", w.w_plus},
              {"w_minus", w.w_minus},
              {"p", w.p ? json(*w.p) : json(nullptr)},
              {"exact", w.exact}};
}

inline json summary_json(const ExperimentResult& r) {
  json cells = json::array();
  for (const auto& s : r.summaries) {
    cells.push_back({{"axis", s.axis},
                     {"method", method_name(s.method)},
                     {"n", s.n},
                     {"mean_ba", s.mean_ba},
                     {"median_ba", s.median_ba},
                     {"ci95", s.ci ? json::array({s.ci->lo, s.ci->hi}) : json(nullptr)},
                     {"mean_sens", s.mean_sens},
                     {"mean_spec", s.mean_spec},
                     {"mean_prec", s.mean_prec}});
  }
  json pairs = json::array();
  for (const auto& p : r.pairs) {
    pairs.push_back({{"axis", p.axis},
                     {"a", method_name(p.a)},
                     {"b", method_name(p.b)},
                     {"mean_a", p.mean_a},
                     {"mean_b", p.mean_b},
                     {"two_sided", wilcoxon_json(p.two_sided)},
                     {"greater", wilcoxon_json(p.greater)},
                     {"a_better", p.a_better}});
  }
  json axes = json::array();
  for (const auto& a : r.axes) axes.push_back(a);
  return json{{"experiment", experiment_name(r.which)},
              {"config_hash", r.config_hash},
              {"master_seed", r.master_seed},
              {"alpha", kSignificance},
              {"axes", axes},
              {"methods", methods_json(r.methods)},
              {"summaries", cells},
              {"wilcoxon", pairs},
              {"marks", r.marks}};
}

namespace detail {

inline const char* method_color(Method m) {
  switch (m) {
    case Method::Ham: return "#d62728";
    case Method::Standard: return "#1f77b4";
    case Method::Dropout: return "#2ca02c";
    case Method::FeatImpute: return "#9467bd";
  }
  return "#000000";
}

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline std::string xml_escape(const std::string& s) {
  std::string o;
  for (char c : s) {
    switch (c) {
      case '&': o += "&amp;"; break;
      case '<': o += "&lt;"; break;
      case '>': o += "&gt;"; break;
      case '"': o += "&quot;"; break;
      default: o += c;
    }
  }
  return o;
}

}  // namespace detail

// A: mean BA vs completeness with a CI band per method. B: grouped bars per subset.
inline std::string to_svg(const ExperimentResult& r) {
  constexpr double W = 640, H = 400, L = 60, R = 150, T = 30, B = 60;
  const double pw = W - L - R, ph = H - T - B;
  auto ymap = [&](double ba) { return T + ph * (1.0 - std::clamp(ba, 0.0, 1.0)); };
  auto find = [&](const std::string& axis, Method m) -> const MethodSummary* {
    for (const auto& s : r.summaries)
      if (s.axis == axis && s.method == m) return &s;
    return nullptr;
  };
  using detail::num;
  std::string o = "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  o += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(W) + "\" height=\"" + num(H) + "\" viewBox=\"0 0 " +
       num(W) + " " + num(H) + "\">\n";
  o += "<!-- config_hash=" + r.config_hash + " master_seed=" + std::to_string(r.master_seed) + " -->\n";
  o += "<rect x=\"0\" y=\"0\" width=\"" + num(W) + "\" height=\"" + num(H) + "\" fill=\"white\"/>\n";
  // y axis with ticks
  o += "<line x1=\"" + num(L) + "\" y1=\"" + num(T) + "\" x2=\"" + num(L) + "\" y2=\"" + num(T + ph) +
       "\" stroke=\"black\"/>\n";
  o += "<line x1=\"" + num(L) + "\" y1=\"" + num(T + ph) + "\" x2=\"" + num(L + pw) + "\" y2=\"" + num(T + ph) +
       "\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 5; ++k) {
    const double v = k / 5.0, y = ymap(v);
    o += "<line x1=\"" + num(L - 4) + "\" y1=\"" + num(y) + "\" x2=\"" + num(L) + "\" y2=\"" + num(y) +
         "\" stroke=\"black\"/>\n";
    o += "<text x=\"" + num(L - 8) + "\" y=\"" + num(y + 4) + "\" font-size=\"11\" text-anchor=\"end\">" + num(v) +
         "</text>\n";
  }
  o += "<text x=\"15\" y=\"" + num(T + ph / 2) + "\" font-size=\"12\" transform=\"rotate(-90 15 " + num(T + ph / 2) +
       ")\" text-anchor=\"middle\">balanced accuracy</text>\n";

  const std::size_t na = r.axes.size();
  if (r.which == Experiment::A) {
    // x = completeness in percent
    std::vector<double> xs;
    for (const auto& a : r.axes) xs.push_back(std::stod(a));
    const double lo = *std::min_element(xs.begin(), xs.end()), hi = *std::max_element(xs.begin(), xs.end());
    auto xmap = [&](double x) { return hi > lo ? L + pw * (x - lo) / (hi - lo) : L + pw / 2; };
    std::vector<std::size_t> order(na);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return xs[a] < xs[b]; });
    for (std::size_t k : order) {
      const double x = xmap(xs[k]);
      o += "<text x=\"" + num(x) + "\" y=\"" + num(T + ph + 18) + "\" font-size=\"11\" text-anchor=\"middle\">" +
           r.axes[k] + "%</text>\n";
    }
    o += "<text x=\"" + num(L + pw / 2) + "\" y=\"" + num(H - 15) +
         "\" font-size=\"12\" text-anchor=\"middle\">dataset completeness</text>\n";
    for (Method m : r.methods) {
      std::string band_top, band_bot, line;
      bool has_band = true;
      for (std::size_t k : order) {
        const auto* s = find(r.axes[k], m);
        if (!s) continue;
        const double x = xmap(xs[k]);
        line += num(x) + "," + num(ymap(s->mean_ba)) + " ";
        if (s->ci) {
          band_top += num(x) + "," + num(ymap(s->ci->hi)) + " ";
          band_bot = num(x) + "," + num(ymap(s->ci->lo)) + " " + band_bot;
        } else {
          has_band = false;
        }
      }
      if (has_band && !band_top.empty())
        o += "<polygon points=\"" + band_top + band_bot + "\" fill=\"" + detail::method_color(m) +
             "\" fill-opacity=\"0.15\" stroke=\"none\"/>\n";
      o += "<polyline points=\"" + line + "\" fill=\"none\" stroke=\"" + detail::method_color(m) +
           "\" stroke-width=\"2\"/>\n";
    }
  } else {
    const double group = pw / static_cast<double>(std::max<std::size_t>(na, 1));
    const double bar = group * 0.8 / static_cast<double>(r.methods.size());
    for (std::size_t k = 0; k < na; ++k) {
      const double gx = L + group * static_cast<double>(k) + group * 0.1;
      for (std::size_t mi = 0; mi < r.methods.size(); ++mi) {
        const auto* s = find(r.axes[k], r.methods[mi]);
        if (!s) continue;
        const double x = gx + bar * static_cast<double>(mi), y = ymap(s->mean_ba);
        o += "<rect x=\"" + num(x) + "\" y=\"" + num(y) + "\" width=\"" + num(bar) + "\" height=\"" +
             num(T + ph - y) + "\" fill=\"" + detail::method_color(r.methods[mi]) + "\"/>\n";
        if (s->ci) {
          const double cx = x + bar / 2;
          o += "<line x1=\"" + num(cx) + "\" y1=\"" + num(ymap(s->ci->lo)) + "\" x2=\"" + num(cx) + "\" y2=\"" +
               num(ymap(s->ci->hi)) + "\" stroke=\"black\"/>\n";
        }
      }
      o += "<text x=\"" + num(gx + group * 0.4) + "\" y=\"" + num(T + ph + 18) +
           "\" font-size=\"9\" text-anchor=\"middle\">" + detail::xml_escape(r.axes[k]) + "</text>\n";
    }
    o += "<text x=\"" + num(L + pw / 2) + "\" y=\"" + num(H - 15) +
         "\" font-size=\"12\" text-anchor=\"middle\">test-time modality subset</text>\n";
  }
  // legend
  for (std::size_t mi = 0; mi < r.methods.size(); ++mi) {
    const double y = T + 10 + 20.0 * static_cast<double>(mi);
    o += "<rect x=\"" + num(L + pw + 15) + "\" y=\"" + num(y - 9) + "\" width=\"12\" height=\"12\" fill=\"" +
         detail::method_color(r.methods[mi]) + "\"/>\n";
    o += "<text x=\"" + num(L + pw + 32) + "\" y=\"" + num(y + 1) + "\" font-size=\"12\">" +
         method_name(r.methods[mi]) + "</text>\n";
  }
  o += "</svg>\n";
  return o;
}

}  // namespace ham
