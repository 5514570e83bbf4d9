#include "mdl/training.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <stdexcept>
#include <thread>

namespace mdl {
namespace {

std::vector<const Instance*> pointers(const Dataset& data, std::size_t first, std::size_t last) {
  std::vector<const Instance*> out;
  out.reserve(last - first);
  for (std::size_t i = first; i < last; ++i) out.push_back(&data[i]);
  return out;
}

std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

std::string opt_cell(const std::optional<double>& v) { return v ? format_real(*v) : std::string(); }

}  // namespace

std::string format_real(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

void TrainConfig::validate() const {
  if (epochs == 0) throw std::invalid_argument("train config: epochs must be positive");
  if (batch_size == 0) throw std::invalid_argument("train config: batch_size must be positive");
  if (eval_batch_size == 0) throw std::invalid_argument("train config: eval_batch_size must be positive");
  if (!(lr_dense >= 0.0) || !(lr_sparse >= 0.0)) {
    throw std::invalid_argument("train config: learning rates must be non-negative");
  }
  for (double w : task_weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw std::invalid_argument("train config: task weights must be >= 0");
  }
}

std::vector<double> TrainConfig::weights(std::size_t n_tasks) const {
  if (task_weights.empty()) return std::vector<double>(n_tasks, 1.0);
  if (task_weights.size() != n_tasks) {
    throw std::invalid_argument("train config: " + std::to_string(task_weights.size()) + " task weights for " +
                                std::to_string(n_tasks) + " tasks");
  }
  return task_weights;
}

nlohmann::json TrainConfig::to_json() const {
  return {{"epochs", epochs},     {"batch_size", batch_size}, {"lr_dense", lr_dense},
          {"lr_sparse", lr_sparse}, {"eval_every", eval_every}, {"seed", seed},
          {"task_weights", task_weights}, {"eval_batch_size", eval_batch_size}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  static const std::vector<std::string> known = {"epochs", "batch_size", "lr_dense",     "lr_sparse",
                                                 "eval_every", "seed",   "task_weights", "eval_batch_size"};
  if (!j.is_object()) throw std::invalid_argument("train config must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw std::invalid_argument("unknown train config key '" + key + "'");
    }
  }
  TrainConfig c;
  if (j.contains("epochs")) c.epochs = j.at("epochs").get<std::size_t>();
  if (j.contains("batch_size")) c.batch_size = j.at("batch_size").get<std::size_t>();
  if (j.contains("lr_dense")) c.lr_dense = j.at("lr_dense").get<double>();
  if (j.contains("lr_sparse")) c.lr_sparse = j.at("lr_sparse").get<double>();
  if (j.contains("eval_every")) c.eval_every = j.at("eval_every").get<std::size_t>();
  if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("task_weights")) c.task_weights = j.at("task_weights").get<std::vector<double>>();
  if (j.contains("eval_batch_size")) c.eval_batch_size = j.at("eval_batch_size").get<std::size_t>();
  c.validate();
  return c;
}

NodeId multi_task_loss(ad::Tape& tape, NodeId probs, BatchView batch, std::vector<double> weights) {
  const ad::Tensor& p = tape.value(probs);
  if (p.rank() != 2 || p.dim(0) != batch.size()) {
    throw std::invalid_argument("multi_task_loss: probabilities " + ad::shape_str(p.shape()) + " for batch of " +
                                std::to_string(batch.size()));
  }
  std::vector<double> labels;
  labels.reserve(p.size());
  for (const Instance* x : batch) {
    if (x->labels.size() != p.dim(1)) {
      throw std::invalid_argument("multi_task_loss: instance has " + std::to_string(x->labels.size()) +
                                  " labels, model predicts " + std::to_string(p.dim(1)) + " tasks");
    }
    labels.insert(labels.end(), x->labels.begin(), x->labels.end());
  }
  NodeId y = tape.constant(ad::Tensor(p.shape(), std::move(labels)));
  return ad::bce(tape, probs, y, std::move(weights));
}

std::vector<double> predict(const Model& model, const Dataset& data, std::size_t eval_batch) {
  const std::size_t nt = model.config.n_tasks;
  std::vector<double> out(data.size() * nt);
  const std::size_t chunks = (data.size() + eval_batch - 1) / eval_batch;
  auto work = [&](std::size_t first, std::size_t stride) {
    ad::Tape tape;
    for (std::size_t c = first; c < chunks; c += stride) {
      tape.clear();
      const std::size_t lo = c * eval_batch, hi = std::min(data.size(), lo + eval_batch);
      const auto batch = pointers(data, lo, hi);
      const ForwardResult r = model_forward(tape, model, batch);
      const ad::Tensor& p = tape.value(r.probs);
      std::copy(p.data(), p.data() + p.size(), out.begin() + static_cast<std::ptrdiff_t>(lo * nt));
    }
  };
  const std::size_t threads = std::max<std::size_t>(1, std::min(eval_threads(), chunks));
  if (threads == 1) {
    work(0, 1);
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(work, t, threads);
  }
  return out;
}

EvalResult evaluate_predictions(const Dataset& data, const std::vector<double>& probs, std::size_t n_scenarios,
                                std::size_t n_tasks) {
  if (probs.size() != data.size() * n_tasks) throw std::invalid_argument("evaluate: prediction count mismatch");
  EvalResult r;
  const std::size_t threads = eval_threads();
  std::vector<double> scores;
  std::vector<std::uint8_t> labels;
  std::vector<GroupKey> keys;
  auto collect = [&](std::size_t n, auto&& keep) {
    scores.clear();
    labels.clear();
    keys.clear();
    for (std::size_t i = 0; i < data.size(); ++i) {
      if (!keep(data[i])) continue;
      scores.push_back(probs[i * n_tasks + n]);
      labels.push_back(data[i].labels[n]);
      keys.push_back(data[i].group_key());
    }
  };
  double total = 0.0;
  std::size_t counted = 0;
  for (std::size_t k = 0; k < n_scenarios; ++k) {
    for (std::size_t n = 0; n < n_tasks; ++n) {
      collect(n, [k](const Instance& x) { return x.member[k] != 0; });
      PairMetric m{k, n, std::nullopt};
      if (!scores.empty()) {
        try {
          m.qauc = qauc(scores, labels, keys, threads);
          total += m.qauc->value;
          ++counted;
        } catch (const std::domain_error&) {
        }
      }
      r.pairs.push_back(m);
    }
  }
  for (std::size_t n = 0; n < n_tasks; ++n) {
    collect(n, [](const Instance&) { return true; });
    r.auc.push_back(auc(scores, labels));
  }
  r.mean_qauc = counted ? total / static_cast<double>(counted) : 0.0;
  return r;
}

EvalResult evaluate(const Model& model, const Dataset& data, std::size_t eval_batch) {
  return evaluate_predictions(data, predict(model, data, eval_batch), model.config.n_scenarios,
                              model.config.n_tasks);
}

nlohmann::json EvalResult::to_json(const FeatureSchema& schema) const {
  nlohmann::json q = nlohmann::json::object();
  for (const PairMetric& m : pairs) {
    nlohmann::json cell = nullptr;
    if (m.qauc) {
      cell = {{"value", m.qauc->value}, {"valid_groups", m.qauc->valid_groups},
              {"skipped_groups", m.qauc->skipped_groups}};
    }
    q[schema.scenarios.at(m.scenario).name][schema.tasks.at(m.task).name] = cell;
  }
  nlohmann::json a = nlohmann::json::object();
  for (std::size_t n = 0; n < auc.size(); ++n) {
    a[schema.tasks.at(n).name] = auc[n] ? nlohmann::json(*auc[n]) : nlohmann::json(nullptr);
  }
  return {{"qauc", q}, {"auc", a}, {"mean_qauc", mean_qauc}};
}

TrainResult train(Model& model, const Dataset& train_data, const Dataset& eval_data, const TrainConfig& config) {
  config.validate();
  if (train_data.empty()) throw std::invalid_argument("train: empty training set");
  const std::vector<double> weights = config.weights(model.config.n_tasks);
  const ad::LearningRates lr{config.lr_sparse, config.lr_dense};
  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order(train_data.size());
  std::iota(order.begin(), order.end(), 0);

  TrainResult result;
  ad::Tape tape;
  std::vector<const Instance*> batch;
  std::size_t step = 0, batch_index = 0, since = 0;
  double loss_sum = 0.0;
  auto record = [&] {
    HistoryRow row;
    row.step = step;
    row.loss = since ? loss_sum / static_cast<double>(since) : 0.0;
    if (!eval_data.empty()) row.eval = evaluate(model, eval_data, config.eval_batch_size);
    result.history.push_back(std::move(row));
    loss_sum = 0.0;
    since = 0;
  };

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t lo = 0; lo < order.size(); lo += config.batch_size) {
      const std::size_t hi = std::min(order.size(), lo + config.batch_size);
      batch.clear();
      for (std::size_t i = lo; i < hi; ++i) batch.push_back(&train_data[order[i]]);
      tape.clear();
      const ForwardResult f = model_forward(tape, model, batch);
      const NodeId loss = multi_task_loss(tape, f.probs, batch, weights);
      const double value = tape.value(loss).item();
      if (!std::isfinite(value)) {
        throw std::runtime_error("non-finite training loss " + format_real(value) + " at batch " +
                                 std::to_string(batch_index) + " (epoch " + std::to_string(epoch) + ")");
      }
      ad::optimizer_step(model.params, tape.backward(loss), lr);
      ++step;
      ++batch_index;
      ++since;
      loss_sum += value;
      if (config.eval_every != 0 && step % config.eval_every == 0) record();
    }
    if (config.eval_every == 0) record();
  }
  if (result.history.empty() || result.history.back().step != step) record();
  result.final_eval = result.history.back().eval;
  return result;
}

void write_history_csv(const std::vector<HistoryRow>& history, const FeatureSchema& schema,
                       const std::filesystem::path& path) {
  std::ofstream out = open_out(path);
  out << "step,loss";
  for (const PriorDef& s : schema.scenarios) {
    for (const PriorDef& t : schema.tasks) out << ",qauc_" << s.name << '_' << t.name;
  }
  out << '\n';
  for (const HistoryRow& row : history) {
    out << row.step << ',' << format_real(row.loss);
    if (row.eval.pairs.empty()) {
      for (std::size_t i = 0; i < schema.num_scenarios() * schema.num_tasks(); ++i) out << ',';
    }
    for (const PairMetric& m : row.eval.pairs) {
      out << ',' << (m.qauc ? format_real(m.qauc->value) : std::string());
    }
    out << '\n';
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

nlohmann::json metrics_report(const Model& model, const TrainResult& result) {
  nlohmann::json curve = nlohmann::json::array();
  for (const HistoryRow& row : result.history) curve.push_back({{"step", row.step}, {"loss", row.loss}});
  return {{"model", model.config.to_json()},
          {"parameter_count", model.parameter_count()},
          {"flops_per_instance", flops_estimate(model.config, model.schema)},
          {"eval", result.final_eval.to_json(model.schema)},
          {"loss_curve", curve}};
}

std::vector<AttentionRow> dump_attention(const Model& model, const Dataset& data) {
  if (model.config.arch != Architecture::Mdl) {
    throw std::invalid_argument("dump-attention needs an mdl model; this archive holds " +
                                to_string(model.config.arch) + ", which has no task or scenario tokens");
  }
  if (data.empty()) throw std::invalid_argument("dump-attention: empty dataset");
  const std::size_t layers = model.config.layers;
  // sums[layer][role] is [n_queries * n_features], summed over batch and heads
  std::vector<std::vector<double>> task_sum(layers), scen_sum(layers);
  std::size_t nf = model.config.n_features, nt = 0, ns = 0, heads = model.config.heads;
  ad::Tape tape;
  constexpr std::size_t kChunk = 512;
  auto accumulate = [&](std::vector<double>& sum, const ad::Tensor& w, std::size_t& nq) {
    const std::size_t b = w.dim(0), h = w.dim(1);
    nq = w.dim(2);
    const std::size_t block = nq * w.dim(3);
    if (sum.empty()) sum.assign(block, 0.0);
    for (std::size_t i = 0; i < b * h; ++i) {
      for (std::size_t j = 0; j < block; ++j) sum[j] += w.data()[i * block + j];
    }
  };
  for (std::size_t lo = 0; lo < data.size(); lo += kChunk) {
    const auto batch = pointers(data, lo, std::min(data.size(), lo + kChunk));
    tape.clear();
    const ForwardResult r = model_forward(tape, model, batch);
    for (const LayerAttention& la : r.attention) {
      if (la.task) accumulate(task_sum[la.layer - 1], tape.value(*la.task), nt);
      if (la.scenario) accumulate(scen_sum[la.layer - 1], tape.value(*la.scenario), ns);
    }
  }
  const double denom = static_cast<double>(data.size() * heads);
  std::vector<AttentionRow> rows;
  for (std::size_t l = 0; l < layers; ++l) {
    auto emit = [&](const std::vector<double>& sum, const char* role, std::size_t nq) {
      for (std::size_t q = 0; q < nq && !sum.empty(); ++q) {
        for (std::size_t f = 0; f < nf; ++f) rows.push_back({l + 1, role, q, f, sum[q * nf + f] / denom});
      }
    };
    emit(task_sum[l], "task", nt);
    emit(scen_sum[l], "scenario", ns);
  }
  return rows;
}

void write_attention_csv(const std::vector<AttentionRow>& rows, const std::filesystem::path& path) {
  std::ofstream out = open_out(path);
  out << "layer,token_role,token_index,feature_index,weight\n";
  for (const AttentionRow& r : rows) {
    out << r.layer << ',' << r.token_role << ',' << r.token_index << ',' << r.feature_index << ','
        << format_real(r.weight) << '\n';
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

std::vector<SweepRow> scaling_sweep(const std::vector<ModelConfig>& grid, const FeatureSchema& schema,
                                    const Dataset& train_data, const Dataset& eval_data, const TrainConfig& config,
                                    const std::vector<std::uint64_t>& seeds) {
  if (grid.empty()) throw std::invalid_argument("sweep: empty grid");
  if (seeds.empty()) throw std::invalid_argument("sweep: no seeds");
  if (eval_data.empty()) throw std::invalid_argument("sweep: empty evaluation set");
  std::vector<SweepRow> rows;
  for (const ModelConfig& point : grid) {
    for (std::uint64_t seed : seeds) {
      Model model = build_model(point, schema, seed);
      TrainConfig tc = config;
      tc.seed = seed;
      const TrainResult r = train(model, train_data, eval_data, tc);
      SweepRow row;
      row.d = model.config.d;
      row.layers = model.config.layers;
      row.seed = seed;
      row.params = model.parameter_count();
      row.flops = flops_estimate(model.config, schema);
      for (std::size_t n = 0; n < model.config.n_tasks; ++n) {
        double total = 0.0;
        std::size_t count = 0;
        for (const PairMetric& m : r.final_eval.pairs) {
          if (m.task == n && m.qauc) {
            total += m.qauc->value;
            ++count;
          }
        }
        row.task_qauc.push_back(count ? std::optional<double>(total / static_cast<double>(count)) : std::nullopt);
      }
      row.mean_qauc = r.final_eval.mean_qauc;
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

void write_sweep_csv(const std::vector<SweepRow>& rows, const FeatureSchema& schema,
                     const std::filesystem::path& path) {
  std::ofstream out = open_out(path);
  out << "d,layers,seed,params,flops";
  for (const PriorDef& t : schema.tasks) out << ",qauc_" << t.name;
  out << ",mean_qauc\n";
  for (const SweepRow& r : rows) {
    out << r.d << ',' << r.layers << ',' << r.seed << ',' << r.params << ',' << r.flops;
    for (const auto& q : r.task_qauc) out << ',' << opt_cell(q);
    out << ',' << format_real(r.mean_qauc) << '\n';
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

}  // namespace mdl
