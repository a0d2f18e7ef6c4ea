// ham_cli: data generation, training, experiments, gradient checks and
// reproducibility verification.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "ham/checkpoint.hpp"
#include "ham/config.hpp"
#include "ham/experiment.hpp"
#include "ham/selfcheck.hpp"

namespace fs = std::filesystem;
using namespace ham;

namespace {

enum Exit : int { kOk = 0, kConfig = 1, kProtocol = 2, kVerify = 3 };

struct Common {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::size_t jobs = default_jobs();
};

void add_common(CLI::App* sub, Common& c, bool with_jobs) {
  sub->add_option("--config", c.config, "run configuration (JSON)")->required()->check(CLI::ExistingFile);
  sub->add_option("--out", c.out, "output directory (overrides output_dir)");
  sub->add_option("--seed", c.seed, "master seed override");
  if (with_jobs) sub->add_option("--jobs", c.jobs, "worker threads")->check(CLI::PositiveNumber);
}

RunConfig load_with_overrides(const Common& c) {
  RunConfig cfg = load_run_config(c.config);
  if (c.seed) cfg.master_seed = *c.seed;
  if (!c.out.empty()) cfg.output_dir = c.out;
  return cfg;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw ConfigError("failed writing '" + path.string() + "'");
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

fs::path prepare_out(const RunConfig& cfg) {
  fs::path dir(cfg.output_dir);
  fs::create_directories(dir);
  write_text(dir / "config.json", canonical_json(cfg).dump(2) + "\n");
  return dir;
}

void log(const std::string& msg) { std::cerr << msg << std::endl; }

// ---------------------------------------------------------------------------

int cmd_gen_data(const std::string& spec_path, const std::string& out) {
  const json j = read_json_file(spec_path);
  // either a bare synthetic spec or a run config carrying one
  SyntheticSpec spec;
  if (j.is_object() && j.contains("dataset")) {
    const RunConfig cfg = run_config_from_json(j);
    if (!cfg.synthetic) throw ConfigError("gen-data: the config names a manifest, not a synthetic spec");
    spec = *cfg.synthetic;
  } else {
    spec = synthetic_from_json(j);
  }
  const Dataset ds = generate_synthetic(spec);
  const fs::path path = save_manifest(ds, out);
  std::cout << "wrote " << path.string() << "\n";
  std::cout << "n=" << ds.size() << " m=" << ds.m << " C=" << ds.classes << " class_counts=";
  const auto counts = ds.class_counts();
  for (std::size_t c = 0; c < counts.size(); ++c) std::cout << (c ? "/" : "") << counts[c];
  std::cout << "\n";
  return kOk;
}

int cmd_train(const Common& c) {
  const RunConfig cfg = load_with_overrides(c);
  const Dataset base = cfg.synthetic ? generate_synthetic(*cfg.synthetic) : load_manifest(cfg.manifest);
  auto [train_split, test_split] = stratified_holdout(base, cfg.test_fraction, derive_seed(cfg.master_seed, {0, 1}));
  const Dataset train_set = cfg.train_completeness < 100.0
                                ? inject_incompleteness(train_split, cfg.train_completeness, cfg.train_drop_mode,
                                                        derive_seed(cfg.master_seed, {0, 2}))
                                : train_split;
  const fs::path dir = prepare_out(cfg);
  const std::string hash = config_hash(cfg);
  TrainConfig tc = cfg.train;
  tc.seed = derive_seed(cfg.master_seed, {0, 3});
  const TaskNetConfig net = net_config(train_set, tc);
  log("train: " + std::to_string(train_set.size()) + " samples (" + std::to_string(train_set.complete_count()) +
      " complete), test: " + std::to_string(test_split.size()));

  for (Method m : cfg.methods) {
    const auto t0 = std::chrono::steady_clock::now();
    std::optional<CvResult> cv;
    TrainConfig run = tc;
    if (cfg.cv) {
      cv = cv_select_iterations(m, train_set, tc);
      run.max_iterations = cv->chosen;
    }
    TrainResult res = train(m, train_set, run);
    res.record.chosen_iterations = run.max_iterations;
    const auto report = macro_metrics(evaluate(res.model, test_split));
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    const std::string name = method_name(m);
    save_checkpoint(dir / ("checkpoint_" + name + ".bin"), res.model, tc.seed, run, net);
    json rec = run_record_json(res.record);
    rec["config_hash"] = hash;
    rec["master_seed"] = cfg.master_seed;
    rec["test"] = metrics_json(report);
    if (cv) rec["cv"] = {{"grid", cv->grid}, {"curves", cv->curves}, {"chosen", cv->chosen}};
    write_text(dir / ("run_record_" + name + ".json"), rec.dump(1) + "\n");
    char line[160];
    std::snprintf(line, sizeof line, "%-11s iterations=%zu test BA=%.4f (%.1f s)", name.c_str(),
                  res.record.chosen_iterations, report.balanced_accuracy, secs);
    std::cout << line << "\n";
  }
  return kOk;
}

std::string experiment_csv(Experiment which, const RunConfig& cfg, std::size_t jobs, ExperimentResult* keep = nullptr) {
  const Dataset base = load_base_dataset(cfg);
  ExperimentResult r = which == Experiment::A ? run_experiment_a(base, cfg, jobs, log) : run_experiment_b(base, cfg, jobs, log);
  std::string csv = to_csv(r);
  if (keep) *keep = std::move(r);
  return csv;
}

int cmd_experiment(Experiment which, const Common& c) {
  const RunConfig cfg = load_with_overrides(c);
  const fs::path dir = prepare_out(cfg);
  ExperimentResult r;
  const std::string csv = experiment_csv(which, cfg, c.jobs, &r);
  const std::string stem = std::string("experiment_") + experiment_name(which);
  write_text(dir / (stem + ".csv"), csv);
  write_text(dir / (stem + "_summary.json"), summary_json(r).dump(2) + "\n");
  write_text(dir / (stem + ".svg"), to_svg(r));
  for (const auto& s : r.summaries) {
    char line[200];
    std::snprintf(line, sizeof line, "%-18s %-11s BA mean=%.4f median=%.4f", s.axis.c_str(), method_name(s.method),
                  s.mean_ba, s.median_ba);
    std::cout << line;
    if (s.ci) std::printf(" ci95=[%.4f, %.4f]", s.ci->lo, s.ci->hi);
    std::cout << "\n";
  }
  for (const auto& [axis, mark] : r.marks)
    if (!mark.empty()) std::cout << axis << ": ham " << mark << "\n";
  std::cout << "wrote " << (dir / (stem + ".csv")).string() << "\n";
  return kOk;
}

int cmd_gradcheck(std::size_t instances, std::uint64_t seed, const std::string& corrupt) {
  std::optional<ad::OpKind> fault;
  if (!corrupt.empty()) fault = parse_op_kind(corrupt);
  const auto suite = run_gradcheck_suite(instances, seed, fault);
  for (const auto& r : suite.ops)
    std::printf("%-16s instances=%zu worst_rel_err=%.3e %s\n", std::string(ad::op_name(r.kind)).c_str(), r.instances,
                r.worst_relative_error, r.worst_relative_error < kOpTolerance ? "ok" : "FAIL");
  std::printf("%-16s task_params=%zu hyper_params=%zu worst_rel_err=%.3e %s\n", "hypernet_e2e",
              suite.end_to_end.task_params, suite.end_to_end.hyper_params, suite.end_to_end.worst_relative_error,
              suite.end_to_end.worst_relative_error < kEndToEndTolerance ? "ok" : "FAIL");
  const auto failed = suite.failures();
  if (failed.empty()) return kOk;
  std::string names;
  for (const auto& f : failed) names += (names.empty() ? "" : ", ") + f;
  throw VerificationError("gradient check failed for: " + names);
}

int cmd_verify(const std::string& csv_path, const std::string& config_path, std::size_t jobs) {
  const std::string original = read_text(csv_path);
  const auto nl = original.find('\n');
  const CsvStamp stamp = parse_csv_stamp(original.substr(0, nl));
  const fs::path cfg_path = config_path.empty() ? fs::path(csv_path).parent_path() / "config.json" : fs::path(config_path);
  RunConfig cfg = load_run_config(cfg_path);
  cfg.master_seed = stamp.master_seed;
  const std::string hash = config_hash(cfg);
  if (hash != stamp.config_hash)
    throw VerificationError("config hash mismatch: CSV says " + stamp.config_hash + ", " + cfg_path.string() +
                            " hashes to " + hash);
  const std::string regenerated = experiment_csv(stamp.which, cfg, jobs);
  if (regenerated != original) {
    std::size_t line = 1, i = 0;
    while (i < original.size() && i < regenerated.size() && original[i] == regenerated[i]) line += original[i++] == '\n';
    throw VerificationError("regenerated CSV differs from " + csv_path + " (first difference on line " +
                            std::to_string(line) + ")");
  }
  std::cout << "verified " << csv_path << ": config_hash=" << hash << " master_seed=" << stamp.master_seed
            << ", bitwise identical\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"HAM: hypernetwork classifiers for incomplete multi-modal data"};
  app.require_subcommand(1);

  std::string spec_path, gen_out;
  auto* gen = app.add_subcommand("gen-data", "write a synthetic dataset as a manifest + payloads");
  gen->add_option("--config", spec_path, "synthetic spec or run config (JSON)")->required()->check(CLI::ExistingFile);
  gen->add_option("--out", gen_out, "output directory")->required();

  Common train_c, a_c, b_c;
  auto* tr = app.add_subcommand("train", "train the configured methods once; writes checkpoints and run records");
  add_common(tr, train_c, false);
  auto* ea = app.add_subcommand("experiment-a", "completeness sweep");
  add_common(ea, a_c, true);
  auto* eb = app.add_subcommand("experiment-b", "test-time modality subsets");
  add_common(eb, b_c, true);

  std::size_t gc_instances = 20;
  std::uint64_t gc_seed = 2024;
  std::string gc_corrupt;
  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every op and of the hypernetwork");
  gc->add_option("--instances", gc_instances, "seeded instances per op")->check(CLI::PositiveNumber);
  gc->add_option("--seed", gc_seed, "seed");
  gc->add_option("--corrupt", gc_corrupt, "inject a backward fault into this op")->group("");

  std::string v_csv, v_config;
  std::size_t v_jobs = default_jobs();
  auto* ver = app.add_subcommand("verify", "regenerate an experiment CSV and compare bytes");
  ver->add_option("csv", v_csv, "experiment CSV")->required()->check(CLI::ExistingFile);
  ver->add_option("--config", v_config, "config (default: config.json next to the CSV)");
  ver->add_option("--jobs", v_jobs, "worker threads")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }

  try {
    if (*gen) return cmd_gen_data(spec_path, gen_out);
    if (*tr) return cmd_train(train_c);
    if (*ea) return cmd_experiment(Experiment::A, a_c);
    if (*eb) return cmd_experiment(Experiment::B, b_c);
    if (*gc) return cmd_gradcheck(gc_instances, gc_seed, gc_corrupt);
    if (*ver) return cmd_verify(v_csv, v_config, v_jobs);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const VerificationError& e) {
    std::cerr << "verification failed: " << e.what() << "\n";
    return kVerify;
  } catch (const ham::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kProtocol;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "filesystem error: " << e.what() << "\n";
    return kConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kProtocol;
  }
  return kOk;
}
