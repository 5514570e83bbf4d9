#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <utility>
#include <vector>

#include <json.hpp>

namespace mdl {

using GroupKey = std::pair<std::uint64_t, std::uint64_t>;  // (uid, qid)

struct Instance {
  std::uint64_t uid = 0;
  std::uint64_t qid = 0;
  std::uint64_t iid = 0;
  std::vector<double> ctx;
  std::vector<std::vector<double>> seq;  // one summary per scenario
  std::vector<std::uint8_t> member;      // multi-hot over scenarios
  std::vector<std::uint8_t> labels;      // one per task

  GroupKey group_key() const { return {uid, qid}; }
  friend bool operator==(const Instance&, const Instance&) = default;
};

using Dataset = std::vector<Instance>;

struct MixEntry {
  std::vector<std::size_t> members;
  double p = 0.0;
};

/// Knobs of the synthetic multi-scenario, multi-task generator.
///
/// Each entity gets a latent vector; an instance's per-task score is
///   s_n = <R_k u + q, v (.) w_n> / sqrt(2 D) + task_bias_n + noise
/// where R_k rotates the user latent by scenario_shift_k * 90 degrees in
/// every plane of a random basis and k is one member scenario drawn
/// uniformly. Label y_n = [s_n > 0].
struct GenConfig {
  std::size_t scenarios = 3;
  std::size_t tasks = 3;
  std::size_t users = 1000;
  std::size_t queries = 200;
  std::size_t items = 500;
  std::size_t instances = 10000;
  std::vector<MixEntry> scenario_mix;
  std::size_t latent_dim = 8;
  std::size_t context_dim = 4;
  // Explicit offsets; when empty they are calibrated so each task hits
  // target_positive_rate on the generated data.
  std::vector<double> task_bias;
  std::vector<double> target_positive_rate{0.30, 0.08, 0.02};
  double task_spread = 0.5;
  std::vector<double> scenario_shift;
  double noise_std = 0.3;
  double seq_noise = 0.3;
  double content_noise = 0.5;
  std::size_t group_min = 8;
  std::size_t group_max = 16;
  std::uint64_t seed = 1;

  void validate() const;
  nlohmann::json to_json() const;
  static GenConfig from_json(const nlohmann::json& j);
  static GenConfig load(const std::filesystem::path& path);
};

struct GeneratedData {
  Dataset instances;
  std::vector<double> task_bias;  // the offsets actually used
};

GeneratedData generate(const GenConfig& config);
inline Dataset generate_dataset(const GenConfig& config) { return generate(config).instances; }

/// JSONL, one instance per line with fields uid, qid, iid, ctx, seq, member,
/// labels. Reals use 17 significant digits, so reading reproduces them exactly.
void write_dataset(const Dataset& data, const std::filesystem::path& path);
Dataset read_dataset(const std::filesystem::path& path);
std::string instance_to_jsonl(const Instance& x);
Instance instance_from_json(const nlohmann::json& j);

/// Whole (uid, qid) groups go to one side. The eval side gets
/// round(eval_fraction * groups) groups chosen by a seeded shuffle.
std::pair<Dataset, Dataset> split_dataset(const Dataset& data, double eval_fraction, std::uint64_t seed);

/// Groups in first-appearance order; values index into `data`.
std::vector<std::vector<std::size_t>> group_indices(const Dataset& data);

std::vector<double> positive_rates(const Dataset& data);

}  // namespace mdl
