// Command-line entry point: data generation, training, evaluation, ablations,
// sweeps, clustering inspection, gradient checks and routing dumps.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "come/clustering.hpp"
#include "come/config.hpp"
#include "come/gradsuite.hpp"
#include "come/harness.hpp"
#include "come/io.hpp"
#include "come/reports.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace come;
using nlohmann::json;

namespace {

void report(const char* what) {
  std::string line = what;
  for (char& ch : line)
    if (ch == '\n' || ch == '\r') ch = ' ';
  std::fprintf(stderr, "ERROR: %s\n", line.c_str());
}

// Errors caused by bad input: reported with exit status 1.
struct UsageError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string data;
};

std::size_t worker_threads() {
  const char* env = std::getenv("COME_THREADS");
  if (env == nullptr || *env == '\0') return 1;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (*end != '\0' || v < 1) throw UsageError("COME_THREADS must be a positive integer");
  return static_cast<std::size_t>(v);
}

// Reads --config (a configuration or a run manifest) and applies --set.
RunConfig resolve_config(const Common& c) {
  std::string text;
  if (!c.config.empty()) {
    text = read_text(c.config);
    json j;
    try {
      j = json::parse(text);
    } catch (const json::parse_error& e) {
      throw UsageError(c.config + " is not valid JSON: " + e.what());
    }
    if (j.is_object() && j.contains("manifest_version") && j.contains("config")) text = j["config"].dump();
  }
  return load_run_config(text, c.overrides);
}

fs::path out_dir(const Common& c) {
  if (c.out.empty()) throw UsageError("--out is required");
  fs::create_directories(c.out);
  return c.out;
}

// Loads train.bin/test.bin and the generator sidecar from --data, or
// generates the dataset described by the configuration.
Dataset obtain_dataset(const Common& c, RunConfig& config, json& digests) {
  if (c.data.empty()) return gen_dataset(config.data);
  const fs::path dir = c.data;
  const fs::path sidecar = dir / "generator.json";
  if (fs::exists(sidecar)) config.data = parse_data_config(read_text(sidecar));
  Dataset d{read_dataset(dir / "train.bin"), read_dataset(dir / "test.bin")};
  digests["train_data"] = sha256_file(dir / "train.bin");
  digests["test_data"] = sha256_file(dir / "test.bin");
  config.validate();
  return d;
}

json manifest(const std::string& command, const RunConfig& config) {
  json m;
  m["manifest_version"] = 1;
  m["command"] = command;
  m["config"] = json::parse(dump_run_config(config));
  m["seed"] = config.train.seed;
  m["data_seed"] = config.data.seed;
  return m;
}

void write_manifest(const fs::path& dir, const json& m) { write_text(dir / "manifest.json", m.dump(2) + "\n"); }

std::string checkpoint_metadata(const RunConfig& config) { return dump_run_config(config); }

// Model and run configuration stored in a checkpoint.
std::pair<ComeModel, RunConfig> load_model(const std::string& path) {
  if (path.empty()) throw UsageError("--checkpoint is required");
  const Checkpoint ck = read_checkpoint(path);
  const RunConfig config = parse_run_config(ck.metadata);
  const ModelConfig mc = effective_model(config);
  if (ck.frozen_seeds.size() != 2 || ck.frozen_seeds[0] != mc.ste_seed || ck.frozen_seeds[1] != mc.see_seed) {
    throw std::runtime_error("checkpoint frozen-expert seeds do not match its configuration");
  }
  return {ComeModel(mc, params_from_checkpoint(ck, mc)), config};
}

const std::vector<Sample>& pick_split(const Dataset& d, const std::string& split) {
  if (split == "test") return d.test;
  if (split == "train") return d.train;
  throw UsageError("--split must be train or test");
}

// ---------------------------------------------------------------------------

int cmd_gen_data(const Common& c) {
  RunConfig config = resolve_config(c);
  if (c.seed) config.data.seed = *c.seed;
  config.validate();
  const fs::path dir = out_dir(c);
  const Dataset d = gen_dataset(config.data);
  write_dataset(dir / "train.bin", d.train);
  write_dataset(dir / "test.bin", d.test);
  write_text(dir / "generator.json", dump_data_config(config.data) + "\n");
  json m = manifest("gen-data", config);
  m["digests"] = {{"train_data", sha256_file(dir / "train.bin")}, {"test_data", sha256_file(dir / "test.bin")}};
  m["counts"] = {{"train", count_by_source(d.train, config.data.sources)},
                 {"test", count_by_source(d.test, config.data.sources)}};
  write_manifest(dir, m);
  std::printf("wrote %zu train and %zu test samples to %s\n", d.train.size(), d.test.size(), dir.c_str());
  return 0;
}

int cmd_train(const Common& c) {
  RunConfig config = resolve_config(c);
  if (c.seed) config.train.seed = *c.seed;
  config.validate();
  const fs::path dir = out_dir(c);
  json digests = json::object();
  const Dataset data = obtain_dataset(c, config, digests);

  TrainResult r = train(config, data, [](const MetricsRecord& m) {
    std::fprintf(stderr, "step %zu total %.6f ce %.6f tb %.6f purity %.4f\n", m.step, m.total, m.task_ce,
                 m.l_tb, m.purity);
  });
  write_metrics_csv(dir / "metrics.csv", r.history);
  write_expert_csv(dir / "experts.csv", r.history, effective_model(config).experts);
  write_checkpoint(dir / "checkpoint.bin", make_checkpoint(r.model, checkpoint_metadata(config)));

  digests["structure_expert"] = r.ste_digest_after;
  digests["semantic_expert"] = r.see_digest_after;
  digests["metrics"] = sha256_file(dir / "metrics.csv");
  digests["checkpoint"] = sha256_file(dir / "checkpoint.bin");
  json m = manifest("train", config);
  m["digests"] = digests;
  m["steps_completed"] = r.steps_completed;
  m["frozen_unchanged"] = r.ste_digest_before == r.ste_digest_after && r.see_digest_before == r.see_digest_after;
  if (!data.test.empty()) m["test"] = json::parse(eval_json(r.test));
  if (r.diverged) m["diverged"] = r.diagnostic;
  write_manifest(dir, m);
  if (r.diverged) {
    std::fprintf(stderr, "ERROR: training diverged (%s); last good checkpoint written\n", r.diagnostic.c_str());
    return 2;
  }
  std::printf("test accuracy %.4f purity %.4f\n", r.test.accuracy, r.test.purity);
  return 0;
}

int cmd_eval(const Common& c, const std::string& checkpoint, const std::string& split) {
  auto [model, config] = load_model(checkpoint);
  json digests = json::object();
  const Dataset data = obtain_dataset(c, config, digests);
  const EvalRecord r = evaluate(model, pick_split(data, split), config.train.batch_size, config.train.seed);
  const std::string text = eval_json(r);
  if (!c.out.empty()) write_text(out_dir(c) / "eval.json", text + "\n");
  std::printf("%s\n", text.c_str());
  return 0;
}

int cmd_ablate(const Common& c) {
  RunConfig config = resolve_config(c);
  if (c.seed) config.train.seed = *c.seed;
  const fs::path dir = out_dir(c);
  json digests = json::object();
  const Dataset data = obtain_dataset(c, config, digests);
  const auto rows = run_ablations(config, data, worker_threads());
  write_ablation_csv(dir / "ablation.csv", rows);
  json m = manifest("ablate", config);
  digests["ablation"] = sha256_file(dir / "ablation.csv");
  m["digests"] = digests;
  write_manifest(dir, m);
  for (const VariantResult& r : rows)
    std::printf("%-14s accuracy %.4f purity %.4f util_cv %.4f\n", r.variant.c_str(), r.test.accuracy,
                r.test.purity, r.test.util_cv);
  return 0;
}

int cmd_sweep(const Common& c, const std::string& axis_name) {
  SweepAxis axis;
  try {
    axis = parse_sweep_axis(axis_name);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  RunConfig config = resolve_config(c);
  if (c.seed) config.train.seed = *c.seed;
  const fs::path dir = out_dir(c);
  json digests = json::object();
  const Dataset data = obtain_dataset(c, config, digests);
  const auto rows = sweep(config, axis, data, worker_threads());
  write_sweep_csv(dir / "sweep.csv", axis, rows);
  json m = manifest("sweep", config);
  m["axis"] = std::string(to_string(axis));
  digests["sweep"] = sha256_file(dir / "sweep.csv");
  m["digests"] = digests;
  write_manifest(dir, m);
  for (const SweepRow& r : rows)
    std::printf("%s=%zu accuracy %.4f purity %.4f\n", axis_name.c_str(), r.value, r.test.accuracy, r.test.purity);
  return 0;
}

int cmd_cluster(const Common& c, const std::string& input, std::size_t samples) {
  RunConfig config = resolve_config(c);
  if (c.seed) config.train.seed = *c.seed;
  if (input.empty()) throw UsageError("--input is required");
  const fs::path dir = out_dir(c);
  const std::vector<Sample> all = read_dataset(input);
  if (all.empty()) throw UsageError(input + " holds no samples");
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < std::min(samples, all.size()); ++i) idx.push_back(i);
  const TokenBatch batch = make_batch(all, idx, nullptr);
  const ModelConfig& mc = config.model;
  Rng rng = batch_routing_rng(config.train.seed, 0);

  CsvWriter csv(dir / "clusters.csv");
  CsvWriter inertia(dir / "inertia.csv");
  inertia.header({"phase", "iteration", "inertia"});
  json summary;
  if (mc.clustering == ClusterStrategy::multistep) {
    const MultiStepResult r = multistep(batch.tokens, mc.multistep_k, mc.multistep_steps, mc.suppress_fraction,
                                        rng, mc.multistep_iters);
    std::vector<std::string> cols{"token_index", "source"};
    for (std::size_t s = 1; s <= r.trace.steps.size(); ++s) cols.push_back("step" + std::to_string(s));
    csv.header(cols);
    for (std::size_t t = 0; t < batch.token_count(); ++t) {
      csv.cell(t).cell(std::to_string(batch.sources[t]));
      for (const MultiStepStep& s : r.trace.steps) csv.cell(s.assignment[t]);
      csv.end_row();
    }
    for (std::size_t s = 0; s < r.trace.steps.size(); ++s)
      for (std::size_t i = 0; i < r.trace.steps[s].lloyd_inertia.size(); ++i)
        inertia.cell("step" + std::to_string(s + 1)).cell(i).cell(r.trace.steps[s].lloyd_inertia[i]).end_row();
    summary["suppressed"] = json::array();
    for (const Suppression& s : r.trace.suppressed)
      summary["suppressed"].push_back({{"step", s.step}, {"cluster", s.cluster}, {"size", s.size}});
    summary["final_clusters"] = r.model.coarse.rows();
  } else {
    const ClusterModel m = fine2coarse(batch.tokens, mc.fine_centers, mc.coarse_centers, rng, mc.lloyd_iters);
    csv.header({"token_index", "source", "fine_id", "coarse_id"});
    for (std::size_t t = 0; t < batch.token_count(); ++t)
      csv.cell(t).cell(std::to_string(batch.sources[t])).cell(m.fine_of[t]).cell(m.coarse_of[t]).end_row();
    for (std::size_t i = 0; i < m.fine_inertia.size(); ++i) inertia.cell("fine").cell(i).cell(m.fine_inertia[i]).end_row();
    for (std::size_t i = 0; i < m.coarse_inertia.size(); ++i)
      inertia.cell("coarse").cell(i).cell(m.coarse_inertia[i]).end_row();
    summary["fine_clusters"] = m.fine.rows();
    summary["coarse_clusters"] = m.coarse.rows();
    summary["warnings"] = m.warnings;
  }
  summary["tokens"] = batch.token_count();
  summary["strategy"] = std::string(to_string(mc.clustering));
  std::printf("%s\n", summary.dump(2).c_str());
  return 0;
}

int cmd_gradcheck(bool all, std::size_t seeds, const std::string& component) {
  if (!all && component.empty()) throw UsageError("gradcheck needs --all or --component");
  GradSuiteOptions o;
  o.seeds = seeds;
  const auto rows = run_gradient_suite(o);
  bool ok = true;
  bool matched = false;
  std::printf("%-36s %9s %12s %14s  %s\n", "component", "instances", "coordinates", "max_rel_error", "status");
  for (const ComponentCheck& r : rows) {
    if (!all && r.component.find(component) == std::string::npos) continue;
    matched = true;
    ok = ok && r.passed;
    std::printf("%-36s %9zu %12zu %14.3e  %s\n", r.component.c_str(), r.instances, r.coordinates, r.max_rel_error,
                r.passed ? "ok" : "FAIL");
  }
  if (!matched) throw UsageError("no gradient check matches '" + component + "'");
  return ok ? 0 : 2;
}

int cmd_route_dump(const Common& c, const std::string& checkpoint, const std::string& split) {
  auto [model, config] = load_model(checkpoint);
  json digests = json::object();
  const Dataset data = obtain_dataset(c, config, digests);
  const fs::path dir = out_dir(c);
  const RouteDumpSummary s = route_dump(model, pick_split(data, split), config.train.batch_size,
                                        config.train.seed, dir / "routes.csv", dir / "projections.csv");
  json j{{"tokens", s.tokens},       {"rows", s.rows},
         {"overflow_rows", s.overflow_rows}, {"purity", s.purity},
         {"explained_variance_ratio", s.explained_ratio}};
  write_text(dir / "route_summary.json", j.dump(2) + "\n");
  std::printf("%s\n", j.dump(2).c_str());
  return 0;
}

void add_common(CLI::App* app, Common& c, bool with_data) {
  app->add_option("--config", c.config, "JSON configuration or run manifest")->check(CLI::ExistingFile);
  app->add_option("--set", c.overrides, "Override a configuration key, e.g. --set model.top_k=3 (repeatable)");
  app->add_option("--seed", c.seed, "Seed for this command (training seed; data seed for gen-data)");
  app->add_option("--out", c.out, "Output directory");
  if (with_data)
    app->add_option("--data", c.data, "Directory written by gen-data (default: generate from the configuration)")
        ->check(CLI::ExistingDirectory);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"COME layer: routed source-specific experts with frozen shared experts"};
  app.require_subcommand(1);
  app.footer("Environment: COME_THREADS caps worker threads for ablate and sweep (default 1).\n"
             "Exit status: 0 success, 1 invalid input, 2 runtime failure.");

  Common common;
  std::string checkpoint, split = "test", axis, input, component;
  std::size_t cluster_samples = 8, seeds = 10;
  bool all = false;

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic multi-source dataset");
  add_common(gen, common, false);
  auto* tr = app.add_subcommand("train", "Train a model and write metrics, checkpoint and manifest");
  add_common(tr, common, true);
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset split");
  add_common(ev, common, true);
  ev->add_option("--checkpoint", checkpoint, "Checkpoint file")->check(CLI::ExistingFile);
  ev->add_option("--split", split, "train or test");
  auto* ab = app.add_subcommand("ablate", "Train every ablation variant and write ablation.csv");
  add_common(ab, common, true);
  auto* sw = app.add_subcommand("sweep", "Sweep the expert count or K and write sweep.csv");
  add_common(sw, common, true);
  sw->add_option("--axis", axis, "experts or topk")->required();
  auto* cl = app.add_subcommand("cluster", "Cluster the tokens of a feature file and write assignments");
  add_common(cl, common, false);
  cl->add_option("--input", input, "Feature file (train.bin or test.bin)")->check(CLI::ExistingFile);
  cl->add_option("--samples", cluster_samples, "Number of leading samples to cluster");
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  gc->add_flag("--all", all, "Check every component");
  gc->add_option("--component", component, "Check components whose name contains this text");
  gc->add_option("--seeds", seeds, "Random instances per component");
  auto* rd = app.add_subcommand("route-dump", "Write per-token routing decisions and a 2-D projection");
  add_common(rd, common, true);
  rd->add_option("--checkpoint", checkpoint, "Checkpoint file")->check(CLI::ExistingFile);
  rd->add_option("--split", split, "train or test");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    report(e.what());
    return 1;
  }

  try {
    if (*gen) return cmd_gen_data(common);
    if (*tr) return cmd_train(common);
    if (*ev) return cmd_eval(common, checkpoint, split);
    if (*ab) return cmd_ablate(common);
    if (*sw) return cmd_sweep(common, axis);
    if (*cl) return cmd_cluster(common, input, cluster_samples);
    if (*gc) return cmd_gradcheck(all, seeds, component);
    if (*rd) return cmd_route_dump(common, checkpoint, split);
  } catch (const std::invalid_argument& e) {
    report(e.what());
    return 1;
  } catch (const std::exception& e) {
    report(e.what());
    return 2;
  }
  return 2;
}
