#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "mdl/data.hpp"
#include "mdl/params.hpp"
#include "mdl/schema.hpp"
#include "mdl/tensor.hpp"
#include "mdl/tokenization.hpp"

namespace mdl::testing {

inline ad::Tensor random_tensor(std::mt19937_64& rng, ad::Shape shape, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  std::vector<double> v(ad::numel(shape));
  for (double& x : v) x = n(rng);
  return ad::Tensor(std::move(shape), std::move(v));
}

// Two scenarios, two tasks, four feature groups; matches small_gen().
inline FeatureSchema small_schema(bool with_scene = false) {
  FeatureSchema s;
  s.features = {
      {"uid", FeatureKind::Categorical, FeatureSource::Uid, 20, 3, 0, 0, true},
      {"qid", FeatureKind::Categorical, FeatureSource::Qid, 10, 2, 0, 0, true},
      {"iid", FeatureKind::Categorical, FeatureSource::Iid, 15, 3, 0, 0, false},
      {"content", FeatureKind::Dense, FeatureSource::Ctx, 0, 2, 0, 0, false},
      {"context", FeatureKind::Dense, FeatureSource::Ctx, 0, 2, 2, 0, false},
      {"seq_s0", FeatureKind::SequenceSummary, FeatureSource::Seq, 0, 2, 0, 0, false},
      {"seq_s1", FeatureKind::SequenceSummary, FeatureSource::Seq, 0, 2, 0, 1, false},
  };
  s.groups = {{"user", {"uid", "qid"}}, {"item", {"iid", "content"}}, {"context", {"context"}},
              {"seq", {"seq_s0", "seq_s1"}}};
  if (with_scene) {
    s.features.push_back({"scene", FeatureKind::Dense, FeatureSource::Member, 0, 2, 0, 0, false});
    s.groups[2].features.push_back("scene");
  }
  s.scenarios = {{"s0", {"seq_s0", "context"}}, {"s1", {"seq_s1", "context"}}};
  s.tasks = {{"click", {"iid"}}, {"like", {"content"}}};
  s.validate();
  return s;
}

inline GenConfig small_gen(std::size_t instances = 200, std::uint64_t seed = 3) {
  GenConfig g;
  g.scenarios = 2;
  g.tasks = 2;
  g.users = 20;
  g.queries = 10;
  g.items = 15;
  g.instances = instances;
  g.latent_dim = 2;
  g.context_dim = 2;
  g.target_positive_rate = {0.4, 0.25};
  g.scenario_shift = {0.0, 1.0};
  g.scenario_mix = {{{0}, 0.45}, {{1}, 0.45}, {{0, 1}, 0.10}};
  g.seed = seed;
  g.validate();
  return g;
}

inline std::vector<const Instance*> view(const Dataset& data, std::size_t first = 0, std::size_t count = 0) {
  if (count == 0) count = data.size() - first;
  std::vector<const Instance*> out;
  for (std::size_t i = first; i < first + count; ++i) out.push_back(&data[i]);
  return out;
}

// Scratch directory removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("mdl_" + tag + "_" + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace mdl::testing
