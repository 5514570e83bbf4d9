#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mdl/layers.hpp"
#include "mdl/params.hpp"
#include "mdl/schema.hpp"
#include "mdl/tokenization.hpp"

namespace mdl {

enum class Architecture { Mdl, SharedBottom, Mmoe };

std::string to_string(Architecture arch);
Architecture architecture_from(const std::string& name);

/// Component removals studied in the ablation table. All default to off.
struct Ablation {
  bool no_task_token = false;
  bool no_task_feature_attn = false;
  bool no_scenario_token = false;
  bool no_global_scenario_token = false;
  bool no_scenario_feature_attn = false;

  bool any() const;
  std::vector<std::string> names() const;
  /// Throws std::invalid_argument on an unknown flag name.
  void set(const std::string& flag);

  friend bool operator==(const Ablation&, const Ablation&) = default;
};

struct ModelConfig {
  Architecture arch = Architecture::Mdl;
  // Token counts; zero means "take from the schema" at build time.
  std::size_t n_features = 0;
  std::size_t n_scenarios = 0;
  std::size_t n_tasks = 0;
  std::size_t d = 32;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t ffn_ratio = 2;
  Ablation ablation;
  // Baselines and the task-tower ablation.
  std::size_t tower_hidden = 64;
  std::size_t experts = 4;
  std::size_t expert_hidden = 64;

  std::size_t ffn_hidden() const { return ffn_ratio * d; }
  bool scenario_tokens() const { return arch == Architecture::Mdl && !ablation.no_scenario_token; }
  bool global_token() const { return scenario_tokens() && !ablation.no_global_scenario_token; }
  bool task_tokens() const { return arch == Architecture::Mdl && !ablation.no_task_token; }
  /// Rows of the scenario token matrix (members plus the optional global row).
  std::size_t scenario_rows() const { return n_scenarios + (global_token() ? 1 : 0); }

  /// Fills zero token counts from the schema and checks consistency.
  ModelConfig resolved(const FeatureSchema& schema) const;
  void validate() const;

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct Model {
  ModelConfig config;
  FeatureSchema schema;
  ad::ParamStore params;

  std::size_t parameter_count() const { return params.parameter_count(); }
};

ParamSpecs model_param_specs(const ModelConfig& config, const FeatureSchema& schema);
std::size_t parameter_count(const ModelConfig& config, const FeatureSchema& schema);

/// Multiply-adds per instance of one forward pass, counting the affine maps,
/// per-token maps and the two attention contractions.
std::size_t flops_estimate(const ModelConfig& config, const FeatureSchema& schema);

Model build_model(const ModelConfig& config, const FeatureSchema& schema, std::uint64_t seed);

/// Widens the baseline's tower (shared_bottom) or experts (mmoe) so its
/// parameter count is as close as possible to `target`.
ModelConfig match_parameter_count(ModelConfig config, const FeatureSchema& schema, std::size_t target);

struct LayerAttention {
  std::size_t layer = 0;  // 1-based block index
  std::optional<NodeId> scenario;
  std::optional<NodeId> task;
};

struct ForwardResult {
  NodeId probs = 0;  // [batch, n_tasks]
  std::vector<LayerAttention> attention;
  std::optional<NodeId> gates;  // mmoe: [batch, n_tasks, experts]
};

ForwardResult model_forward(ad::Tape& tape, const Model& model, BatchView batch);
ForwardResult model_forward(ad::Tape& tape, const Model& model, BatchView batch, const Membership& membership);

/// <dir>/model.mdl holds parameters; <dir>/model.json restates the config and
/// the schema hash.
void save_model(const Model& model, const std::filesystem::path& dir);
/// Throws if `schema` does not hash to the value recorded at save time.
Model load_model(const std::filesystem::path& dir, const FeatureSchema& schema);

}  // namespace mdl
