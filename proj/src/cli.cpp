#include "mdl/cli.hpp"

#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iostream>
#include <optional>
#include <stdexcept>

#include <CLI11.hpp>
#include <json.hpp>

#include "mdl/data.hpp"
#include "mdl/model.hpp"
#include "mdl/schema.hpp"
#include "mdl/training.hpp"

#ifndef MDL_VERSION
#define MDL_VERSION "0.0.0"
#endif

namespace mdl {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct Common {
  std::string config, schema, data, eval_data, out, model;
  std::optional<std::uint64_t> seed;
  bool force = false;
};

struct TrainFlags {
  std::optional<std::string> arch;
  std::vector<std::string> ablate;
  std::optional<std::size_t> d, layers, target_params;
  std::optional<double> eval_fraction;
};

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

json read_json(const fs::path& path, const char* what) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(std::string(what) + " file not found: " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

void write_json(const json& j, const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

void require(const std::string& value, const char* flag) {
  if (value.empty()) throw std::runtime_error(std::string("missing required flag ") + flag);
}

// Creates `dir` and refuses to clobber any of `files` unless forced.
void prepare_out(const fs::path& dir, const std::vector<std::string>& files, bool force) {
  for (const std::string& f : files) {
    if (fs::exists(dir / f) && !force) {
      throw std::runtime_error("refusing to overwrite " + (dir / f).string() + " (pass --force)");
    }
  }
  fs::create_directories(dir);
}

void check_written(const fs::path& path) {
  if (!fs::exists(path) || fs::file_size(path) == 0) throw std::runtime_error("output missing or empty: " + path.string());
}

class Manifest {
 public:
  Manifest(std::string command, const std::vector<std::string>& argv) : started_(utc_now()), t0_(clock::now()) {
    j_["command"] = std::move(command);
    j_["argv"] = argv;
    j_["version"] = version_tag();
    j_["outputs"] = json::array();
  }
  json& operator[](const char* key) { return j_[key]; }
  void output(const fs::path& p) { j_["outputs"].push_back(p.string()); }
  void write(const fs::path& dir) {
    j_["started_at"] = started_;
    j_["finished_at"] = utc_now();
    j_["wall_clock_seconds"] = std::chrono::duration<double>(clock::now() - t0_).count();
    write_json(j_, dir / "manifest.json");
  }

 private:
  using clock = std::chrono::steady_clock;
  json j_;
  std::string started_;
  clock::time_point t0_;
};

Dataset load_checked(const std::string& path, const FeatureSchema& schema) {
  Dataset data = read_dataset(path);
  for (std::size_t i = 0; i < data.size(); ++i) {
    try {
      check_instance(schema, data[i]);
    } catch (const std::invalid_argument& e) {
      throw std::runtime_error(path + ": instance " + std::to_string(i + 1) + " does not match the schema: " + e.what());
    }
  }
  return data;
}

// Run config: {"model": {...}, "train": {...}}, both optional.
std::pair<ModelConfig, TrainConfig> load_run_config(const std::string& path) {
  if (path.empty()) return {};
  const json j = read_json(path, "config");
  for (const auto& [key, _] : j.items()) {
    if (key != "model" && key != "train" && key != "grid" && key != "seeds") {
      throw std::runtime_error(path + ": unknown key '" + key + "'");
    }
  }
  ModelConfig m = j.contains("model") ? ModelConfig::from_json(j.at("model")) : ModelConfig{};
  TrainConfig t = j.contains("train") ? TrainConfig::from_json(j.at("train")) : TrainConfig{};
  return {m, t};
}

void apply_model_flags(ModelConfig& m, const TrainFlags& f) {
  if (f.arch) m.arch = architecture_from(*f.arch);
  if (!f.ablate.empty() && m.arch != Architecture::Mdl) {
    throw std::runtime_error("--ablate is only valid with --arch mdl");
  }
  for (const std::string& a : f.ablate) m.ablation.set(a);
  if (f.d) m.d = *f.d;
  if (f.layers) m.layers = *f.layers;
}

int cmd_gen_data(const Common& c, const std::optional<double>& eval_fraction, const std::vector<std::string>& argv) {
  require(c.config, "--config");
  require(c.out, "--out");
  GenConfig g = GenConfig::load(c.config);
  if (c.seed) g.seed = *c.seed;
  g.validate();
  const fs::path dir = c.out;
  std::vector<std::string> files = {"data.jsonl", "manifest.json"};
  if (eval_fraction) files.insert(files.end(), {"train.jsonl", "eval.jsonl"});
  prepare_out(dir, files, c.force);

  Manifest man("gen-data", argv);
  const GeneratedData gen = generate(g);
  write_dataset(gen.instances, dir / "data.jsonl");
  if (read_dataset(dir / "data.jsonl") != gen.instances) throw std::runtime_error("dataset verification failed");
  man.output(dir / "data.jsonl");
  std::size_t groups = group_indices(gen.instances).size();
  std::printf("instances %zu  groups %zu\n", gen.instances.size(), groups);
  const auto rates = positive_rates(gen.instances);
  for (std::size_t n = 0; n < rates.size(); ++n) {
    std::printf("task %zu positive rate %.4f (bias %.6f)\n", n, rates[n], gen.task_bias[n]);
  }
  json split = nullptr;
  if (eval_fraction) {
    auto [train_set, eval_set] = split_dataset(gen.instances, *eval_fraction, g.seed);
    write_dataset(train_set, dir / "train.jsonl");
    write_dataset(eval_set, dir / "eval.jsonl");
    check_written(dir / "train.jsonl");
    check_written(dir / "eval.jsonl");
    man.output(dir / "train.jsonl");
    man.output(dir / "eval.jsonl");
    std::printf("split: train %zu  eval %zu\n", train_set.size(), eval_set.size());
    split = {{"eval_fraction", *eval_fraction}, {"train", train_set.size()}, {"eval", eval_set.size()}};
  }
  man["config"] = g.to_json();
  man["resolved_task_bias"] = gen.task_bias;
  man["seeds"] = {{"generator", g.seed}};
  man["inputs"] = {{"config", c.config}};
  man["split"] = split;
  man.write(dir);
  return 0;
}

int cmd_train(const Common& c, const TrainFlags& f, const std::vector<std::string>& argv) {
  require(c.schema, "--schema");
  require(c.data, "--data");
  require(c.out, "--out");
  auto [mc, tc] = load_run_config(c.config);
  apply_model_flags(mc, f);
  if (c.seed) tc.seed = *c.seed;
  tc.validate();
  const FeatureSchema schema = FeatureSchema::load(c.schema);
  mc = mc.resolved(schema);
  if (f.target_params) {
    if (mc.arch == Architecture::Mdl) throw std::runtime_error("--target-params applies to baseline architectures");
    mc = match_parameter_count(mc, schema, *f.target_params);
  }
  const fs::path dir = c.out;
  prepare_out(dir, {"model.mdl", "model.json", "history.csv", "metrics.json", "manifest.json"}, c.force);

  Manifest man("train", argv);
  Dataset train_set = load_checked(c.data, schema);
  Dataset eval_set;
  if (!c.eval_data.empty()) {
    eval_set = load_checked(c.eval_data, schema);
  } else if (f.eval_fraction) {
    std::tie(train_set, eval_set) = split_dataset(train_set, *f.eval_fraction, tc.seed);
  }
  Model model = build_model(mc, schema, tc.seed);
  const TrainResult result = train(model, train_set, eval_set, tc);
  save_model(model, dir);
  write_history_csv(result.history, schema, dir / "history.csv");
  write_json(metrics_report(model, result), dir / "metrics.json");
  (void)ad::read_archive(dir / "model.mdl");
  for (const char* name : {"model.mdl", "model.json", "history.csv", "metrics.json"}) {
    check_written(dir / name);
    man.output(dir / name);
  }
  std::printf("params %zu  steps %zu  final loss %.6f", model.parameter_count(), result.history.back().step,
              result.history.back().loss);
  if (!eval_set.empty()) std::printf("  mean qauc %.6f", result.final_eval.mean_qauc);
  std::printf("\n");

  man["config"] = {{"model", model.config.to_json()}, {"train", tc.to_json()}};
  man["seeds"] = {{"init", tc.seed}, {"shuffle", tc.seed}};
  man["inputs"] = {{"config", c.config}, {"schema", c.schema}, {"data", c.data}, {"eval_data", c.eval_data}};
  man["schema_hash"] = schema.hash();
  man.write(dir);
  return 0;
}

int cmd_eval(const Common& c, const std::vector<std::string>& argv) {
  require(c.model, "--model");
  require(c.schema, "--schema");
  require(c.data, "--data");
  require(c.out, "--out");
  const FeatureSchema schema = FeatureSchema::load(c.schema);
  const Model model = load_model(c.model, schema);
  const fs::path dir = c.out;
  prepare_out(dir, {"metrics.json", "manifest.json"}, c.force);
  Manifest man("eval", argv);
  const Dataset data = load_checked(c.data, schema);
  const EvalResult r = evaluate(model, data);
  write_json({{"model", model.config.to_json()},
              {"parameter_count", model.parameter_count()},
              {"eval", r.to_json(schema)}},
             dir / "metrics.json");
  check_written(dir / "metrics.json");
  man.output(dir / "metrics.json");
  std::printf("mean qauc %.6f over %zu instances\n", r.mean_qauc, data.size());
  man["config"] = {{"model", model.config.to_json()}};
  man["inputs"] = {{"model", c.model}, {"schema", c.schema}, {"data", c.data}};
  man["schema_hash"] = schema.hash();
  man.write(dir);
  return 0;
}

int cmd_dump_attention(const Common& c, std::size_t limit, const std::vector<std::string>& argv) {
  require(c.model, "--model");
  require(c.schema, "--schema");
  require(c.data, "--data");
  require(c.out, "--out");
  const FeatureSchema schema = FeatureSchema::load(c.schema);
  const Model model = load_model(c.model, schema);
  if (model.config.arch != Architecture::Mdl) {
    throw std::runtime_error("dump-attention needs an mdl model; " + c.model + " holds a " +
                             to_string(model.config.arch) + " model, which has no task or scenario tokens");
  }
  const fs::path dir = c.out;
  prepare_out(dir, {"attention.csv", "manifest.json"}, c.force);
  Manifest man("dump-attention", argv);
  Dataset data = load_checked(c.data, schema);
  if (limit != 0 && data.size() > limit) data.resize(limit);
  write_attention_csv(dump_attention(model, data), dir / "attention.csv");
  check_written(dir / "attention.csv");
  man.output(dir / "attention.csv");
  man["config"] = {{"model", model.config.to_json()}, {"instances", data.size()}};
  man["inputs"] = {{"model", c.model}, {"schema", c.schema}, {"data", c.data}};
  man["schema_hash"] = schema.hash();
  man.write(dir);
  return 0;
}

// Grid file: {"grid": [{"d": 16, "layers": 1}, ...], "seeds": [...], "model": {...}, "train": {...}}.
int cmd_sweep(const Common& c, const std::vector<std::string>& argv) {
  require(c.config, "--config");
  require(c.schema, "--schema");
  require(c.data, "--data");
  require(c.eval_data, "--eval-data");
  require(c.out, "--out");
  const json j = read_json(c.config, "grid");
  auto [base, tc] = load_run_config(c.config);
  if (!j.contains("grid") || !j.at("grid").is_array() || j.at("grid").empty()) {
    throw std::runtime_error(c.config + ": needs a nonempty \"grid\" array");
  }
  std::vector<std::uint64_t> seeds = j.value("seeds", std::vector<std::uint64_t>{tc.seed});
  if (c.seed) seeds = {*c.seed};
  const FeatureSchema schema = FeatureSchema::load(c.schema);
  std::vector<ModelConfig> grid;
  for (const json& point : j.at("grid")) {
    json merged = base.to_json();
    for (const auto& [key, value] : point.items()) merged[key] = value;
    grid.push_back(ModelConfig::from_json(merged).resolved(schema));
  }
  const fs::path dir = c.out;
  prepare_out(dir, {"sweep.csv", "manifest.json"}, c.force);
  Manifest man("sweep", argv);
  const Dataset train_set = load_checked(c.data, schema);
  const Dataset eval_set = load_checked(c.eval_data, schema);
  const auto rows = scaling_sweep(grid, schema, train_set, eval_set, tc, seeds);
  write_sweep_csv(rows, schema, dir / "sweep.csv");
  check_written(dir / "sweep.csv");
  man.output(dir / "sweep.csv");
  for (const SweepRow& r : rows) {
    std::printf("d %zu  L %zu  seed %llu  params %zu  flops %zu  mean qauc %.6f\n", r.d, r.layers,
                static_cast<unsigned long long>(r.seed), r.params, r.flops, r.mean_qauc);
  }
  json grid_json = json::array();
  for (const ModelConfig& g : grid) grid_json.push_back(g.to_json());
  man["config"] = {{"grid", grid_json}, {"train", tc.to_json()}};
  man["seeds"] = seeds;
  man["inputs"] = {{"config", c.config}, {"schema", c.schema}, {"data", c.data}, {"eval_data", c.eval_data}};
  man["schema_hash"] = schema.hash();
  man.write(dir);
  return 0;
}

void add_common(CLI::App* sub, Common& c, bool config = true) {
  if (config) sub->add_option("--config", c.config, "JSON config file");
  sub->add_option("--out", c.out, "output directory");
  sub->add_option("--seed", c.seed, "seed override");
  sub->add_flag("--force", c.force, "overwrite existing outputs");
}

}  // namespace

std::string version_tag() { return MDL_VERSION; }

int run_cli(const std::vector<std::string>& args) {
  std::vector<const char*> argv;
  for (const std::string& a : args) argv.push_back(a.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"Multi-distribution learning: synthetic data, training, evaluation"};
  app.require_subcommand(1);
  app.set_version_flag("--version", version_tag());
  Common c;
  TrainFlags tf;
  std::optional<double> gen_fraction;
  std::size_t limit = 0;

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  add_common(gen, c);
  gen->add_option("--eval-fraction", gen_fraction, "also write a group-level train/eval split");

  auto* tr = app.add_subcommand("train", "train a model");
  add_common(tr, c);
  tr->add_option("--schema", c.schema, "feature schema JSON");
  tr->add_option("--data", c.data, "training data (JSONL)");
  tr->add_option("--eval-data", c.eval_data, "evaluation data (JSONL)");
  tr->add_option("--arch", tf.arch, "mdl, shared_bottom or mmoe");
  tr->add_option("--ablate", tf.ablate, "ablation flag (repeatable)");
  tr->add_option("--d", tf.d, "token dimension");
  tr->add_option("--layers", tf.layers, "number of blocks");
  tr->add_option("--target-params", tf.target_params, "widen a baseline to this parameter count");
  tr->add_option("--eval-fraction", tf.eval_fraction, "split --data when --eval-data is absent");

  auto* ev = app.add_subcommand("eval", "evaluate a trained model");
  add_common(ev, c, false);
  ev->add_option("--model", c.model, "directory holding model.mdl and model.json");
  ev->add_option("--schema", c.schema, "feature schema JSON");
  ev->add_option("--data", c.data, "data to score (JSONL)");

  auto* da = app.add_subcommand("dump-attention", "export attention distributions of an mdl model");
  add_common(da, c, false);
  da->add_option("--model", c.model, "directory holding model.mdl and model.json");
  da->add_option("--schema", c.schema, "feature schema JSON");
  da->add_option("--data", c.data, "instances to average over (JSONL)");
  da->add_option("--limit", limit, "use at most this many instances (0 = all)");

  auto* sw = app.add_subcommand("sweep", "train a grid of model sizes");
  add_common(sw, c);
  sw->add_option("--schema", c.schema, "feature schema JSON");
  sw->add_option("--data", c.data, "training data (JSONL)");
  sw->add_option("--eval-data", c.eval_data, "evaluation data (JSONL)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  const std::vector<std::string> args(argv, argv + argc);
  try {
    if (gen->parsed()) return cmd_gen_data(c, gen_fraction, args);
    if (tr->parsed()) return cmd_train(c, tf, args);
    if (ev->parsed()) return cmd_eval(c, args);
    if (da->parsed()) return cmd_dump_attention(c, limit, args);
    if (sw->parsed()) return cmd_sweep(c, args);
  } catch (const std::exception& e) {
    std::cerr << "mdl: " << e.what() << '\n';
    return 1;
  }
  return 2;
}

}  // namespace mdl
