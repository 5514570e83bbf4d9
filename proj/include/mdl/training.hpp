#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mdl/data.hpp"
#include "mdl/metrics.hpp"
#include "mdl/model.hpp"

namespace mdl {

struct TrainConfig {
  std::size_t epochs = 5;
  std::size_t batch_size = 256;
  double lr_dense = 1e-3;
  double lr_sparse = 0.05;
  std::size_t eval_every = 0;  // steps between evaluations; 0 = once per epoch
  std::uint64_t seed = 1;
  std::vector<double> task_weights;  // empty = uniform
  std::size_t eval_batch_size = 1024;

  void validate() const;
  std::vector<double> weights(std::size_t n_tasks) const;

  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

/// Mean over instances of sum_n w_n BCE(y_n, p_n), probabilities clamped.
NodeId multi_task_loss(ad::Tape& tape, NodeId probs, BatchView batch, std::vector<double> weights);

/// Row-major [instances, tasks] predictions in `eval_batch` chunks.
std::vector<double> predict(const Model& model, const Dataset& data, std::size_t eval_batch = 1024);

struct PairMetric {
  std::size_t scenario = 0;
  std::size_t task = 0;
  std::optional<QaucResult> qauc;  // empty when the slice has no valid group
};

struct EvalResult {
  std::vector<PairMetric> pairs;          // scenario-major
  std::vector<std::optional<double>> auc;  // per task, all instances
  double mean_qauc = 0.0;                  // over pairs with a value

  nlohmann::json to_json(const FeatureSchema& schema) const;
};

/// QAUC per (scenario, task) over the instances belonging to that scenario.
EvalResult evaluate_predictions(const Dataset& data, const std::vector<double>& probs, std::size_t n_scenarios,
                                std::size_t n_tasks);
EvalResult evaluate(const Model& model, const Dataset& data, std::size_t eval_batch = 1024);

struct HistoryRow {
  std::size_t step = 0;
  double loss = 0.0;  // mean training loss since the previous row
  EvalResult eval;
};

struct TrainResult {
  std::vector<HistoryRow> history;
  EvalResult final_eval;
};

/// Trains `model` in place. Throws std::runtime_error on a non-finite loss,
/// naming the batch index and the value.
TrainResult train(Model& model, const Dataset& train_data, const Dataset& eval_data, const TrainConfig& config);

void write_history_csv(const std::vector<HistoryRow>& history, const FeatureSchema& schema,
                       const std::filesystem::path& path);

/// Full metrics report: per-pair QAUC, per-task AUC, loss curve, parameter
/// count. Contains no timing so identical runs give identical files.
nlohmann::json metrics_report(const Model& model, const TrainResult& result);

struct AttentionRow {
  std::size_t layer = 0;  // 1-based
  std::string token_role;  // "task" or "scenario"
  std::size_t token_index = 0;
  std::size_t feature_index = 0;
  double weight = 0.0;
};

/// Batch- and head-averaged attention of every task and scenario token over
/// the feature tokens. Throws for non-mdl models.
std::vector<AttentionRow> dump_attention(const Model& model, const Dataset& batch);
void write_attention_csv(const std::vector<AttentionRow>& rows, const std::filesystem::path& path);

struct SweepRow {
  std::size_t d = 0;
  std::size_t layers = 0;
  std::uint64_t seed = 0;
  std::size_t params = 0;
  std::size_t flops = 0;
  std::vector<std::optional<double>> task_qauc;  // per task, mean over scenarios
  double mean_qauc = 0.0;
};

/// Trains every grid point once per seed on the same data; rows are
/// grid-major, seed-minor. The seed drives both initialization and shuffling.
std::vector<SweepRow> scaling_sweep(const std::vector<ModelConfig>& grid, const FeatureSchema& schema,
                                    const Dataset& train_data, const Dataset& eval_data, const TrainConfig& config,
                                    const std::vector<std::uint64_t>& seeds);
void write_sweep_csv(const std::vector<SweepRow>& rows, const FeatureSchema& schema,
                     const std::filesystem::path& path);

/// "%.17g"-style shortest exact decimal for CSV cells.
std::string format_real(double v);

}  // namespace mdl
