#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "mdl/tape.hpp"
#include "mdl/tensor.hpp"

namespace mdl::ad {

/// Embedding tables use Adagrad; every dense parameter uses RMSProp.
enum class OptimizerRule { Adagrad, RmsProp };

enum class InitKind { Zeros, Ones, UniformScaled };

struct ParamEntry {
  Tensor value;
  Tensor accumulator;
  OptimizerRule rule = OptimizerRule::RmsProp;
};

class ParamStore {
 public:
  /// Throws on a duplicate name.
  void add(const std::string& name, Tensor value, OptimizerRule rule);

  bool contains(const std::string& name) const { return entries_.count(name) != 0; }
  const Tensor& value(const std::string& name) const { return entry(name).value; }
  Tensor& mutable_value(const std::string& name);
  const ParamEntry& entry(const std::string& name) const;
  ParamEntry& mutable_entry(const std::string& name);

  /// Registers the named parameter on a tape.
  NodeId on(Tape& tape, const std::string& name) const { return tape.param(name, value(name)); }

  const std::map<std::string, ParamEntry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  /// Total number of trainable scalars (optimizer state excluded).
  std::size_t parameter_count() const;

  friend bool operator==(const ParamStore& a, const ParamStore& b);

 private:
  std::map<std::string, ParamEntry> entries_;
};

bool operator==(const ParamStore& a, const ParamStore& b);

struct InitSpec {
  Shape shape;
  InitKind kind = InitKind::UniformScaled;
  OptimizerRule rule = OptimizerRule::RmsProp;
};

/// Deterministic in `seed`. Each tensor draws from its own stream keyed by
/// name, so adding or removing a parameter leaves the others unchanged.
/// UniformScaled draws from U(-a, a), a = sqrt(6 / (fan_in + fan_out)), with
/// fan_in/fan_out the last two axes (a rank-1 shape uses its length for both).
ParamStore init_params(const std::vector<std::pair<std::string, InitSpec>>& spec, std::uint64_t seed);

struct LearningRates {
  double adagrad = 0.0;
  double rmsprop = 0.0;
};

inline constexpr double kOptimizerEps = 1e-8;
inline constexpr double kRmsPropDecay = 0.9;

/// Adagrad: acc += g^2;              p -= lr * g / (sqrt(acc) + eps)
/// RMSProp: acc = 0.9 acc + 0.1 g^2; p -= lr * g / (sqrt(acc) + eps)
/// Parameters absent from `grads` are untouched.
void optimizer_step(ParamStore& store, const GradientMap& grads, LearningRates lr);
inline void optimizer_step(ParamStore& store, const GradientMap& grads, double lr) {
  optimizer_step(store, grads, LearningRates{lr, lr});
}

/// "MDL1" archive: u64 count, then per tensor a u32 name length + name,
/// u32 rank, u64 dims, f64 values; all little-endian. Each parameter is
/// followed by its optimizer accumulator under "<name>.acc".
void write_archive(const ParamStore& store, const std::filesystem::path& path);
std::vector<std::pair<std::string, Tensor>> read_archive(const std::filesystem::path& path);

/// Overwrites values and accumulators of an existing store from an archive.
/// Every stored parameter must be present with a matching shape.
void load_archive(ParamStore& store, const std::filesystem::path& path);

}  // namespace mdl::ad
