#include "mdl/data.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>

namespace mdl {
namespace {

using nlohmann::json;

std::vector<double> gaussian_vec(std::mt19937_64& rng, std::size_t n, double stddev) {
  std::normal_distribution<double> nd(0.0, stddev);
  std::vector<double> v(n);
  for (double& x : v) x = nd(rng);
  return v;
}

// Rotation by `angle` in each coordinate plane of a random orthonormal basis.
Eigen::MatrixXd plane_rotation(std::mt19937_64& rng, std::size_t dim, double angle) {
  std::normal_distribution<double> nd;
  Eigen::MatrixXd g(dim, dim);
  for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = nd(rng);
  const Eigen::MatrixXd basis = Eigen::HouseholderQR<Eigen::MatrixXd>(g).householderQ();
  Eigen::MatrixXd block = Eigen::MatrixXd::Identity(dim, dim);
  const double c = std::cos(angle), s = std::sin(angle);
  for (std::size_t p = 0; p + 1 < dim; p += 2) {
    block(p, p) = c;
    block(p, p + 1) = -s;
    block(p + 1, p) = s;
    block(p + 1, p + 1) = c;
  }
  return basis * block * basis.transpose();
}

void append_real(std::string& out, double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  out += buf;
}

void append_reals(std::string& out, const std::vector<double>& v) {
  out += '[';
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    append_real(out, v[i]);
  }
  out += ']';
}

void append_bits(std::string& out, const std::vector<std::uint8_t>& v) {
  out += '[';
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    out += v[i] ? '1' : '0';
  }
  out += ']';
}

const json& field(const json& j, const char* key) {
  if (!j.is_object() || !j.contains(key)) throw std::invalid_argument(std::string("missing field '") + key + "'");
  return j.at(key);
}

std::vector<std::uint8_t> bits_from(const json& j, const char* key) {
  std::vector<std::uint8_t> out;
  for (const json& b : field(j, key)) {
    const int v = b.get<int>();
    if (v != 0 && v != 1) throw std::invalid_argument(std::string("field '") + key + "' must hold 0/1 values");
    out.push_back(static_cast<std::uint8_t>(v));
  }
  return out;
}

}  // namespace

void GenConfig::validate() const {
  if (scenarios < 1 || tasks < 1) throw std::invalid_argument("gen config: scenarios and tasks must be >= 1");
  if (users < 1 || queries < 1 || items < 1 || instances < 1 || latent_dim < 1) {
    throw std::invalid_argument("gen config: counts must be positive");
  }
  if (group_min < 1 || group_max < group_min) throw std::invalid_argument("gen config: bad group size range");
  if (instances < group_min) {
    throw std::invalid_argument("gen config: " + std::to_string(instances) +
                                " instances cannot fill one group of size >= " + std::to_string(group_min));
  }
  if (scenario_mix.empty()) throw std::invalid_argument("gen config: scenario_mix is empty");
  double total = 0.0;
  for (const MixEntry& e : scenario_mix) {
    if (e.members.empty()) throw std::invalid_argument("gen config: scenario_mix entry without members");
    for (std::size_t m : e.members) {
      if (m >= scenarios) throw std::invalid_argument("gen config: scenario_mix member out of range");
    }
    if (e.p < 0.0) throw std::invalid_argument("gen config: negative scenario_mix probability");
    total += e.p;
  }
  if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("gen config: scenario_mix must sum to 1");
  if (scenario_shift.size() != scenarios) {
    throw std::invalid_argument("gen config: scenario_shift needs one value per scenario");
  }
  if (!task_bias.empty() && task_bias.size() != tasks) {
    throw std::invalid_argument("gen config: task_bias needs one value per task");
  }
  if (task_bias.empty()) {
    if (target_positive_rate.size() != tasks) {
      throw std::invalid_argument("gen config: target_positive_rate needs one value per task");
    }
    for (double r : target_positive_rate) {
      if (!(r > 0.0 && r < 1.0)) throw std::invalid_argument("gen config: positive rates must be in (0, 1)");
    }
  }
  if (noise_std < 0.0 || seq_noise < 0.0 || content_noise < 0.0 || task_spread < 0.0) {
    throw std::invalid_argument("gen config: noise levels must be >= 0");
  }
}

nlohmann::json GenConfig::to_json() const {
  json mix = json::array();
  for (const MixEntry& e : scenario_mix) mix.push_back({{"members", e.members}, {"p", e.p}});
  json j{{"scenarios", scenarios},       {"tasks", tasks},
         {"users", users},               {"queries", queries},
         {"items", items},               {"instances", instances},
         {"scenario_mix", mix},          {"latent_dim", latent_dim},
         {"context_dim", context_dim},   {"target_positive_rate", target_positive_rate},
         {"task_spread", task_spread},   {"scenario_shift", scenario_shift},
         {"noise_std", noise_std},       {"seq_noise", seq_noise},
         {"content_noise", content_noise}, {"group_min", group_min},
         {"group_max", group_max},       {"seed", seed}};
  if (!task_bias.empty()) j["task_bias"] = task_bias;
  return j;
}

GenConfig GenConfig::from_json(const nlohmann::json& j) {
  static const std::set<std::string> known = {
      "scenarios", "tasks", "users", "queries", "items", "instances", "scenario_mix", "latent_dim",
      "context_dim", "task_bias", "target_positive_rate", "task_spread", "scenario_shift", "noise_std",
      "seq_noise", "content_noise", "group_min", "group_max", "seed"};
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw std::invalid_argument("gen config: unknown key '" + key + "'");
  }
  GenConfig c;
  c.scenarios = j.value("scenarios", c.scenarios);
  c.tasks = j.value("tasks", c.tasks);
  c.users = j.value("users", c.users);
  c.queries = j.value("queries", c.queries);
  c.items = j.value("items", c.items);
  c.instances = j.value("instances", c.instances);
  c.latent_dim = j.value("latent_dim", c.latent_dim);
  c.context_dim = j.value("context_dim", c.context_dim);
  c.task_bias = j.value("task_bias", c.task_bias);
  c.target_positive_rate = j.value("target_positive_rate", c.target_positive_rate);
  c.task_spread = j.value("task_spread", c.task_spread);
  c.noise_std = j.value("noise_std", c.noise_std);
  c.seq_noise = j.value("seq_noise", c.seq_noise);
  c.content_noise = j.value("content_noise", c.content_noise);
  c.group_min = j.value("group_min", c.group_min);
  c.group_max = j.value("group_max", c.group_max);
  c.seed = j.value("seed", c.seed);
  c.scenario_shift = j.value("scenario_shift", std::vector<double>(c.scenarios, 0.0));
  if (j.contains("scenario_mix")) {
    for (const json& e : j.at("scenario_mix")) {
      c.scenario_mix.push_back({e.at("members").get<std::vector<std::size_t>>(), e.at("p").get<double>()});
    }
  } else {
    for (std::size_t k = 0; k < c.scenarios; ++k) {
      c.scenario_mix.push_back({{k}, 1.0 / static_cast<double>(c.scenarios)});
    }
  }
  c.validate();
  return c;
}

GenConfig GenConfig::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("gen config file not found: " + path.string());
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw std::runtime_error("gen config " + path.string() + ": " + e.what());
  }
  return from_json(j);
}

GeneratedData generate(const GenConfig& config) {
  config.validate();
  const std::size_t dim = config.latent_dim, k_count = config.scenarios, n_tasks = config.tasks;
  std::mt19937_64 rng(config.seed);

  auto draw_table = [&](std::size_t rows) {
    std::vector<std::vector<double>> t(rows);
    for (auto& r : t) r = gaussian_vec(rng, dim, 1.0);
    return t;
  };
  const auto user_lat = draw_table(config.users);
  const auto query_lat = draw_table(config.queries);
  const auto item_lat = draw_table(config.items);

  std::vector<Eigen::MatrixXd> rotation;
  std::vector<std::vector<double>> context_mean;
  for (std::size_t k = 0; k < k_count; ++k) {
    rotation.push_back(plane_rotation(rng, dim, config.scenario_shift[k] * std::numbers::pi / 2.0));
    context_mean.push_back(gaussian_vec(rng, config.context_dim, 1.0));
  }
  std::vector<std::vector<double>> task_w(n_tasks);
  for (auto& w : task_w) {
    w = gaussian_vec(rng, dim, config.task_spread);
    for (double& x : w) x += 1.0;
  }

  // Per-user, per-scenario behaviour summaries and per-item content vectors.
  std::vector<std::vector<std::vector<double>>> seq_summary(config.users);
  std::vector<std::vector<Eigen::VectorXd>> rotated(config.users);
  for (std::size_t u = 0; u < config.users; ++u) {
    const Eigen::Map<const Eigen::VectorXd> lat(user_lat[u].data(), static_cast<Eigen::Index>(dim));
    for (std::size_t k = 0; k < k_count; ++k) {
      Eigen::VectorXd r = rotation[k] * lat;
      std::vector<double> s = gaussian_vec(rng, dim, config.seq_noise);
      for (std::size_t j = 0; j < dim; ++j) s[j] += r(static_cast<Eigen::Index>(j));
      seq_summary[u].push_back(std::move(s));
      rotated[u].push_back(std::move(r));
    }
  }
  std::vector<std::vector<double>> content(config.items);
  for (std::size_t i = 0; i < config.items; ++i) {
    content[i] = gaussian_vec(rng, dim, config.content_noise);
    for (std::size_t j = 0; j < dim; ++j) content[i][j] += item_lat[i][j];
  }

  std::vector<double> mix_p;
  for (const MixEntry& e : config.scenario_mix) mix_p.push_back(e.p);
  std::discrete_distribution<std::size_t> mix_dist(mix_p.begin(), mix_p.end());
  std::uniform_int_distribution<std::size_t> pick_user(0, config.users - 1);
  std::uniform_int_distribution<std::size_t> pick_query(0, config.queries - 1);
  std::uniform_int_distribution<std::size_t> pick_item(0, config.items - 1);
  std::normal_distribution<double> unit;
  const double norm = 1.0 / std::sqrt(2.0 * static_cast<double>(dim));

  GeneratedData out;
  Dataset& data = out.instances;
  data.reserve(config.instances);
  std::vector<double> raw;  // [instance][task]
  raw.reserve(config.instances * n_tasks);
  std::set<GroupKey> used_keys;
  std::size_t remaining = config.instances;
  while (remaining > 0) {
    std::size_t size;
    if (remaining <= config.group_max) {
      size = remaining;
    } else {
      const std::size_t hi = std::min(config.group_max, remaining - config.group_min);
      size = std::uniform_int_distribution<std::size_t>(config.group_min, hi)(rng);
    }
    if (size < config.group_min) {
      throw std::invalid_argument("gen config: cannot split instances into groups of size [" +
                                  std::to_string(config.group_min) + ", " + std::to_string(config.group_max) + "]");
    }
    GroupKey key;
    std::size_t tries = 0;
    do {
      if (++tries > 1000) throw std::invalid_argument("gen config: too few users x queries for distinct groups");
      key = {pick_user(rng), pick_query(rng)};
    } while (!used_keys.insert(key).second);
    const std::size_t u = key.first, q = key.second;

    for (std::size_t s = 0; s < size; ++s) {
      Instance x;
      x.uid = u;
      x.qid = q;
      x.iid = pick_item(rng);
      const MixEntry& mix = config.scenario_mix[mix_dist(rng)];
      x.member.assign(k_count, 0);
      for (std::size_t m : mix.members) x.member[m] = 1;
      const std::size_t k =
          mix.members[std::uniform_int_distribution<std::size_t>(0, mix.members.size() - 1)(rng)];

      x.ctx = content[x.iid];
      for (std::size_t c = 0; c < config.context_dim; ++c) {
        x.ctx.push_back(config.scenario_shift[k] * context_mean[k][c] + unit(rng));
      }
      x.seq = seq_summary[u];

      for (std::size_t n = 0; n < n_tasks; ++n) {
        double score = 0.0;
        for (std::size_t j = 0; j < dim; ++j) {
          const double pref = rotated[u][k](static_cast<Eigen::Index>(j)) + query_lat[q][j];
          score += pref * item_lat[x.iid][j] * task_w[n][j];
        }
        raw.push_back(score * norm + config.noise_std * unit(rng));
      }
      data.push_back(std::move(x));
    }
    remaining -= size;
  }

  out.task_bias = config.task_bias;
  if (out.task_bias.empty()) {
    // Threshold at the (1 - rate) quantile so each task hits its target rate.
    for (std::size_t n = 0; n < n_tasks; ++n) {
      std::vector<double> col;
      col.reserve(data.size());
      for (std::size_t i = 0; i < data.size(); ++i) col.push_back(raw[i * n_tasks + n]);
      std::sort(col.begin(), col.end());
      const double rate = config.target_positive_rate[n];
      const auto idx = static_cast<std::size_t>(std::floor((1.0 - rate) * static_cast<double>(col.size())));
      const std::size_t hi = std::min(idx, col.size() - 1);
      const std::size_t lo = hi == 0 ? 0 : hi - 1;
      out.task_bias.push_back(-0.5 * (col[lo] + col[hi]));
    }
  }
  for (std::size_t i = 0; i < data.size(); ++i) {
    data[i].labels.resize(n_tasks);
    for (std::size_t n = 0; n < n_tasks; ++n) {
      data[i].labels[n] = raw[i * n_tasks + n] + out.task_bias[n] > 0.0 ? 1 : 0;
    }
  }
  return out;
}

std::string instance_to_jsonl(const Instance& x) {
  std::string line = "{\"uid\":" + std::to_string(x.uid) + ",\"qid\":" + std::to_string(x.qid) +
                     ",\"iid\":" + std::to_string(x.iid) + ",\"ctx\":";
  append_reals(line, x.ctx);
  line += ",\"seq\":[";
  for (std::size_t k = 0; k < x.seq.size(); ++k) {
    if (k) line += ',';
    append_reals(line, x.seq[k]);
  }
  line += "],\"member\":";
  append_bits(line, x.member);
  line += ",\"labels\":";
  append_bits(line, x.labels);
  line += '}';
  return line;
}

Instance instance_from_json(const nlohmann::json& j) {
  Instance x;
  x.uid = field(j, "uid").get<std::uint64_t>();
  x.qid = field(j, "qid").get<std::uint64_t>();
  x.iid = field(j, "iid").get<std::uint64_t>();
  x.ctx = field(j, "ctx").get<std::vector<double>>();
  x.seq = field(j, "seq").get<std::vector<std::vector<double>>>();
  x.member = bits_from(j, "member");
  x.labels = bits_from(j, "labels");
  if (std::none_of(x.member.begin(), x.member.end(), [](std::uint8_t b) { return b != 0; })) {
    throw std::invalid_argument("field 'member' has no scenario bit set");
  }
  return x;
}

void write_dataset(const Dataset& data, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  for (const Instance& x : data) os << instance_to_jsonl(x) << '\n';
  if (!os) throw std::runtime_error("failed writing " + path.string());
}

Dataset read_dataset(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open dataset " + path.string());
  Dataset out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    try {
      out.push_back(instance_from_json(json::parse(line)));
    } catch (const std::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

std::vector<std::vector<std::size_t>> group_indices(const Dataset& data) {
  std::map<GroupKey, std::size_t> slot;
  std::vector<std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < data.size(); ++i) {
    auto [it, fresh] = slot.emplace(data[i].group_key(), groups.size());
    if (fresh) groups.emplace_back();
    groups[it->second].push_back(i);
  }
  return groups;
}

std::pair<Dataset, Dataset> split_dataset(const Dataset& data, double eval_fraction, std::uint64_t seed) {
  if (!(eval_fraction > 0.0 && eval_fraction < 1.0)) {
    throw std::invalid_argument("split: eval_fraction must be in (0, 1)");
  }
  const auto groups = group_indices(data);
  const auto n_eval = static_cast<std::size_t>(std::llround(eval_fraction * static_cast<double>(groups.size())));
  if (n_eval == 0 || n_eval >= groups.size()) {
    throw std::invalid_argument("split: fraction " + std::to_string(eval_fraction) + " of " +
                                std::to_string(groups.size()) + " groups leaves one side empty");
  }
  std::vector<std::size_t> order(groups.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::uint8_t> to_eval(groups.size(), 0);
  for (std::size_t i = 0; i < n_eval; ++i) to_eval[order[i]] = 1;

  Dataset train, eval;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    Dataset& side = to_eval[g] ? eval : train;
    for (std::size_t i : groups[g]) side.push_back(data[i]);
  }
  return {std::move(train), std::move(eval)};
}

std::vector<double> positive_rates(const Dataset& data) {
  if (data.empty()) return {};
  std::vector<double> rates(data.front().labels.size(), 0.0);
  for (const Instance& x : data) {
    for (std::size_t n = 0; n < rates.size(); ++n) rates[n] += x.labels[n];
  }
  for (double& r : rates) r /= static_cast<double>(data.size());
  return rates;
}

}  // namespace mdl
