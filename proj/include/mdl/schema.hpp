#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

namespace mdl {

enum class FeatureKind { Categorical, Dense, SequenceSummary };

/// Which instance field a feature reads.
enum class FeatureSource { Uid, Qid, Iid, Ctx, Seq, Member };

struct FeatureDef {
  std::string name;
  FeatureKind kind = FeatureKind::Dense;
  FeatureSource source = FeatureSource::Ctx;
  std::size_t cardinality = 0;  // categorical only
  std::size_t dim = 0;          // embedding dim, or vector length for dense inputs
  std::size_t offset = 0;       // start of the ctx slice (source ctx)
  std::size_t scenario = 0;     // which seq summary (source seq)
  bool important = false;       // feeds the extra "important" embeddings
};

struct GroupDef {
  std::string name;
  std::vector<std::string> features;
};

/// A scenario or task and the prior features its token is built from.
struct PriorDef {
  std::string name;
  std::vector<std::string> prior;
};

/// Feature declarations plus the semantic grouping that defines feature
/// tokens. Loaded from JSON with keys features[], groups[], scenarios[],
/// tasks[]; see docs in README.md.
class FeatureSchema {
 public:
  std::vector<FeatureDef> features;
  std::vector<GroupDef> groups;
  std::vector<PriorDef> scenarios;
  std::vector<PriorDef> tasks;

  /// Throws std::invalid_argument describing the first violated rule.
  void validate() const;

  const FeatureDef& feature(const std::string& name) const;
  std::size_t feature_index(const std::string& name) const;

  std::size_t num_groups() const { return groups.size(); }
  std::size_t num_scenarios() const { return scenarios.size(); }
  std::size_t num_tasks() const { return tasks.size(); }

  /// Concatenated embedding width of a group.
  std::size_t group_dim(std::size_t group) const;
  std::size_t features_dim(const std::vector<std::string>& names) const;
  std::vector<std::string> important_features() const;
  std::size_t important_dim() const;

  /// Hex FNV-1a 64 of the canonical JSON form.
  std::string hash() const;

  nlohmann::json to_json() const;
  static FeatureSchema from_json(const nlohmann::json& j);
  static FeatureSchema load(const std::filesystem::path& path);
};

std::string to_string(FeatureKind kind);
std::string to_string(FeatureSource source);

/// FNV-1a 64 rendered as 16 hex digits.
std::string fnv1a_hex(const std::string& bytes);

}  // namespace mdl
