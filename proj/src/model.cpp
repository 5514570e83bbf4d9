#include "mdl/model.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <stdexcept>

namespace mdl {
namespace {

using ad::InitKind;
using ad::InitSpec;
using ad::OptimizerRule;

constexpr const char* kAblationNames[] = {"no_task_token", "no_task_feature_attn", "no_scenario_token",
                                          "no_global_scenario_token", "no_scenario_feature_attn"};

bool* ablation_flag(Ablation& a, const std::string& name) {
  if (name == "no_task_token") return &a.no_task_token;
  if (name == "no_task_feature_attn") return &a.no_task_feature_attn;
  if (name == "no_scenario_token") return &a.no_scenario_token;
  if (name == "no_global_scenario_token") return &a.no_global_scenario_token;
  if (name == "no_scenario_feature_attn") return &a.no_scenario_feature_attn;
  return nullptr;
}

void dense(ParamSpecs& s, const std::string& name, ad::Shape shape, InitKind kind = InitKind::UniformScaled) {
  s.emplace_back(name, InitSpec{std::move(shape), kind, OptimizerRule::RmsProp});
}

void add_token_ffn(ParamSpecs& s, const std::string& prefix, std::size_t n, std::size_t d, std::size_t h) {
  dense(s, prefix + ".w1", {n, d, h});
  dense(s, prefix + ".b1", {n, h}, InitKind::Zeros);
  dense(s, prefix + ".w2", {n, h, d});
  dense(s, prefix + ".b2", {n, d}, InitKind::Zeros);
}

void add_attention(ParamSpecs& s, const std::string& prefix, std::size_t nq, std::size_t nf, std::size_t d) {
  dense(s, prefix + ".q.w", {nq, d, d});
  dense(s, prefix + ".q.b", {nq, d}, InitKind::Zeros);
  dense(s, prefix + ".k.w", {nf, d, d});
  dense(s, prefix + ".k.b", {nf, d}, InitKind::Zeros);
  dense(s, prefix + ".v.w", {nf, d, d});
  dense(s, prefix + ".v.b", {nf, d}, InitKind::Zeros);
  dense(s, prefix + ".o.w", {d, d});
  dense(s, prefix + ".o.b", {d}, InitKind::Zeros);
}

void add_fsi(ParamSpecs& s, const std::string& prefix, std::size_t nf, std::size_t d, std::size_t h) {
  dense(s, prefix + ".ln.g", {nf, d}, InitKind::Ones);
  dense(s, prefix + ".ln.b", {nf, d}, InitKind::Zeros);
  add_token_ffn(s, prefix + ".ffn", nf, d, h);
}

// Shared input (d wide) -> per-task hidden (t) -> per-task logit.
void add_towers(ParamSpecs& s, std::size_t d, std::size_t nt, std::size_t t) {
  dense(s, "tower.w1", {d, nt * t});
  dense(s, "tower.b1", {nt * t}, InitKind::Zeros);
  dense(s, "tower.w2", {nt, t, 1});
  dense(s, "tower.b2", {nt, 1}, InitKind::Zeros);
}

void add_mmoe(ParamSpecs& s, const ModelConfig& c) {
  const std::size_t d = c.d, e = c.experts, h = c.expert_hidden, nt = c.n_tasks, t = c.tower_hidden;
  dense(s, "expert.w1", {d, e * h});
  dense(s, "expert.b1", {e * h}, InitKind::Zeros);
  dense(s, "expert.w2", {e, h, h});
  dense(s, "expert.b2", {e, h}, InitKind::Zeros);
  dense(s, "gate.w", {d, nt * e});
  dense(s, "gate.b", {nt * e}, InitKind::Zeros);
  dense(s, "tower.w1", {nt, h, t});
  dense(s, "tower.b1", {nt, t}, InitKind::Zeros);
  dense(s, "tower.w2", {nt, t, 1});
  dense(s, "tower.b2", {nt, 1}, InitKind::Zeros);
}

NodeId logits_to_probs(ad::Tape& tape, NodeId logits, std::size_t batch, std::size_t nt) {
  return ad::sigmoid(tape, ad::reshape(tape, logits, {batch, nt}));
}

NodeId shared_towers(ad::Tape& tape, NodeId pooled, const ad::ParamStore& p, const ModelConfig& c, std::size_t batch) {
  NodeId h = ad::relu(tape, ad::affine(tape, pooled, p.on(tape, "tower.w1"), p.on(tape, "tower.b1")));
  h = ad::reshape(tape, h, {batch, c.n_tasks, c.tower_hidden});
  NodeId logits = ad::token_linear(tape, h, p.on(tape, "tower.w2"), p.on(tape, "tower.b2"));
  return logits_to_probs(tape, logits, batch, c.n_tasks);
}

NodeId mean_tokens(ad::Tape& tape, NodeId tokens) {
  const ad::Tensor& v = tape.value(tokens);
  return ad::select_mean(tape, tokens, std::vector<std::uint8_t>(v.dim(0) * v.dim(1), 1));
}

}  // namespace

std::string to_string(Architecture arch) {
  switch (arch) {
    case Architecture::Mdl: return "mdl";
    case Architecture::SharedBottom: return "shared_bottom";
    case Architecture::Mmoe: return "mmoe";
  }
  return "?";
}

Architecture architecture_from(const std::string& name) {
  if (name == "mdl") return Architecture::Mdl;
  if (name == "shared_bottom") return Architecture::SharedBottom;
  if (name == "mmoe") return Architecture::Mmoe;
  throw std::invalid_argument("unknown architecture '" + name + "' (expected mdl, shared_bottom or mmoe)");
}

bool Ablation::any() const { return !names().empty(); }

std::vector<std::string> Ablation::names() const {
  std::vector<std::string> out;
  Ablation copy = *this;
  for (const char* n : kAblationNames) {
    if (*ablation_flag(copy, n)) out.emplace_back(n);
  }
  return out;
}

void Ablation::set(const std::string& flag) {
  bool* f = ablation_flag(*this, flag);
  if (!f) {
    std::string known;
    for (const char* n : kAblationNames) known += std::string(known.empty() ? "" : ", ") + n;
    throw std::invalid_argument("unknown ablation '" + flag + "' (known: " + known + ")");
  }
  *f = true;
}

ModelConfig ModelConfig::resolved(const FeatureSchema& schema) const {
  ModelConfig c = *this;
  auto fill = [](std::size_t& field, std::size_t value, const char* what) {
    if (field == 0) {
      field = value;
    } else if (field != value) {
      throw std::invalid_argument(std::string("config sets ") + what + " = " + std::to_string(field) +
                                  " but the schema declares " + std::to_string(value));
    }
  };
  fill(c.n_features, schema.num_groups(), "n_features");
  fill(c.n_scenarios, schema.num_scenarios(), "n_scenarios");
  fill(c.n_tasks, schema.num_tasks(), "n_tasks");
  c.validate();
  return c;
}

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* what) {
    if (v == 0) throw std::invalid_argument(std::string(what) + " must be positive");
  };
  positive(d, "d");
  positive(layers, "layers");
  positive(heads, "heads");
  positive(ffn_ratio, "ffn_ratio");
  positive(tower_hidden, "tower_hidden");
  positive(experts, "experts");
  positive(expert_hidden, "expert_hidden");
  if (d % heads != 0) {
    throw std::invalid_argument("d = " + std::to_string(d) + " is not divisible by heads = " + std::to_string(heads));
  }
  if (arch != Architecture::Mdl && ablation.any()) {
    throw std::invalid_argument("ablations apply to the mdl architecture only, not " + to_string(arch));
  }
  if (n_features != 0 && d % n_features != 0) {
    throw std::invalid_argument("token mixing needs d (" + std::to_string(d) + ") divisible by the number of feature tokens (" +
                                std::to_string(n_features) + ")");
  }
}

nlohmann::json ModelConfig::to_json() const {
  return {{"arch", to_string(arch)},
          {"n_features", n_features},
          {"n_scenarios", n_scenarios},
          {"n_tasks", n_tasks},
          {"d", d},
          {"layers", layers},
          {"heads", heads},
          {"ffn_ratio", ffn_ratio},
          {"ablate", ablation.names()},
          {"tower_hidden", tower_hidden},
          {"experts", experts},
          {"expert_hidden", expert_hidden}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  static const std::vector<std::string> known = {"arch",   "n_features", "n_scenarios", "n_tasks",
                                                 "d",      "layers",     "heads",       "ffn_ratio",
                                                 "ablate", "tower_hidden", "experts",   "expert_hidden"};
  if (!j.is_object()) throw std::invalid_argument("model config must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw std::invalid_argument("unknown model config key '" + key + "'");
    }
  }
  ModelConfig c;
  if (j.contains("arch")) c.arch = architecture_from(j.at("arch").get<std::string>());
  auto get = [&](const char* key, std::size_t& field) {
    if (j.contains(key)) field = j.at(key).get<std::size_t>();
  };
  get("n_features", c.n_features);
  get("n_scenarios", c.n_scenarios);
  get("n_tasks", c.n_tasks);
  get("d", c.d);
  get("layers", c.layers);
  get("heads", c.heads);
  get("ffn_ratio", c.ffn_ratio);
  get("tower_hidden", c.tower_hidden);
  get("experts", c.experts);
  get("expert_hidden", c.expert_hidden);
  if (j.contains("ablate")) {
    for (const auto& flag : j.at("ablate")) c.ablation.set(flag.get<std::string>());
  }
  c.validate();
  return c;
}

ParamSpecs model_param_specs(const ModelConfig& config, const FeatureSchema& schema) {
  const ModelConfig c = config.resolved(schema);
  const std::size_t d = c.d, h = c.ffn_hidden(), nf = c.n_features, nt = c.n_tasks;
  ParamSpecs s;
  const bool any_prior_tokens = c.scenario_tokens() || c.task_tokens();
  append_embedding_params(s, schema, any_prior_tokens);
  append_tokenizer_params(s, schema, {d, h, c.scenario_tokens(), c.global_token(), c.task_tokens()});
  for (std::size_t l = 0; l < c.layers; ++l) {
    const std::string blk = "blk" + std::to_string(l);
    add_fsi(s, blk + ".fsi", nf, d, h);
    if (c.scenario_tokens()) {
      if (!c.ablation.no_scenario_feature_attn) add_attention(s, blk + ".sattn", c.scenario_rows(), nf, d);
      add_token_ffn(s, blk + ".sffn", c.scenario_rows(), d, h);
    }
    if (c.task_tokens()) {
      if (!c.ablation.no_task_feature_attn) add_attention(s, blk + ".tattn", nt, nf, d);
      add_token_ffn(s, blk + ".tffn", nt, d, h);
    }
  }
  switch (c.arch) {
    case Architecture::Mdl:
      if (c.task_tokens()) {
        dense(s, "head.w", {nt, d, 1});
        dense(s, "head.b", {nt, 1}, InitKind::Zeros);
      } else {
        add_towers(s, d, nt, c.tower_hidden);
      }
      break;
    case Architecture::SharedBottom:
      add_towers(s, d, nt, c.tower_hidden);
      break;
    case Architecture::Mmoe:
      add_mmoe(s, c);
      break;
  }
  return s;
}

std::size_t parameter_count(const ModelConfig& config, const FeatureSchema& schema) {
  std::size_t n = 0;
  for (const auto& [_, spec] : model_param_specs(config, schema)) n += ad::numel(spec.shape);
  return n;
}

std::size_t flops_estimate(const ModelConfig& config, const FeatureSchema& schema) {
  const ModelConfig c = config.resolved(schema);
  const std::size_t d = c.d, h = c.ffn_hidden(), nf = c.n_features, nt = c.n_tasks;
  std::size_t f = 0;
  for (std::size_t j = 0; j < schema.num_groups(); ++j) f += schema.group_dim(j) * d;
  const std::size_t imp = schema.important_dim();
  if (c.scenario_tokens()) {
    for (const PriorDef& s : schema.scenarios) f += (imp + schema.features_dim(s.prior)) * h + h * d;
    if (c.global_token()) f += imp * h + h * d;
  }
  if (c.task_tokens()) {
    for (const PriorDef& t : schema.tasks) f += (imp + schema.features_dim(t.prior)) * h + h * d;
  }
  const std::size_t ffn = 2 * d * h;
  auto attention = [&](std::size_t nq) { return nq * d * d + 2 * nf * d * d + 2 * nq * nf * d + nq * d * d; };
  for (std::size_t l = 0; l < c.layers; ++l) {
    f += nf * ffn;
    if (c.scenario_tokens()) {
      if (!c.ablation.no_scenario_feature_attn) f += attention(c.scenario_rows());
      f += c.scenario_rows() * ffn;
    }
    if (c.task_tokens()) {
      if (!c.ablation.no_task_feature_attn) f += attention(nt);
      f += nt * ffn;
    }
  }
  const std::size_t towers = d * nt * c.tower_hidden + nt * c.tower_hidden;
  switch (c.arch) {
    case Architecture::Mdl:
      f += c.task_tokens() ? nt * d : towers;
      break;
    case Architecture::SharedBottom:
      f += towers;
      break;
    case Architecture::Mmoe: {
      const std::size_t e = c.experts, eh = c.expert_hidden, t = c.tower_hidden;
      f += d * e * eh + e * eh * eh + d * nt * e + nt * e * eh + nt * eh * t + nt * t;
      break;
    }
  }
  return f;
}

Model build_model(const ModelConfig& config, const FeatureSchema& schema, std::uint64_t seed) {
  schema.validate();
  Model m{config.resolved(schema), schema, {}};
  m.params = ad::init_params(model_param_specs(m.config, schema), seed);
  return m;
}

ModelConfig match_parameter_count(ModelConfig config, const FeatureSchema& schema, std::size_t target) {
  if (config.arch == Architecture::Mdl) throw std::invalid_argument("match_parameter_count applies to baselines");
  std::size_t& knob = config.arch == Architecture::SharedBottom ? config.tower_hidden : config.expert_hidden;
  std::size_t best = knob;
  std::size_t best_gap = std::numeric_limits<std::size_t>::max();
  for (std::size_t v = 1; v <= 8192; ++v) {
    knob = v;
    const std::size_t n = parameter_count(config, schema);
    const std::size_t gap = n > target ? n - target : target - n;
    if (gap < best_gap) {
      best_gap = gap;
      best = v;
    }
    if (n > target) break;
  }
  knob = best;
  return config;
}

ForwardResult model_forward(ad::Tape& tape, const Model& model, BatchView batch) {
  return model_forward(tape, model, batch, Membership::of(batch));
}

ForwardResult model_forward(ad::Tape& tape, const Model& model, BatchView batch, const Membership& membership) {
  const ModelConfig& c = model.config;
  const ad::ParamStore& p = model.params;
  const std::size_t b = batch.size();
  ForwardResult r;
  const std::vector<NodeId> groups = embed_batch(tape, batch, model.schema, p);
  TokenState state;
  state.features = tokenize_features(tape, groups, p);

  if (c.arch != Architecture::Mdl) {
    NodeId feats = state.features.node;
    for (std::size_t l = 0; l < c.layers; ++l) {
      feats = feature_self_interaction(tape, feats, p, "blk" + std::to_string(l) + ".fsi");
    }
    NodeId pooled = mean_tokens(tape, feats);
    if (c.arch == Architecture::SharedBottom) {
      r.probs = shared_towers(tape, pooled, p, c, b);
      return r;
    }
    NodeId e = ad::relu(tape, ad::affine(tape, pooled, p.on(tape, "expert.w1"), p.on(tape, "expert.b1")));
    e = ad::reshape(tape, e, {b, c.experts, c.expert_hidden});
    e = ad::relu(tape, ad::token_linear(tape, e, p.on(tape, "expert.w2"), p.on(tape, "expert.b2")));
    NodeId g = ad::affine(tape, pooled, p.on(tape, "gate.w"), p.on(tape, "gate.b"));
    g = ad::softmax(tape, ad::reshape(tape, g, {b, c.n_tasks, c.experts}));
    r.gates = g;
    NodeId mixed = ad::attn_mix(tape, ad::reshape(tape, g, {b, 1, c.n_tasks, c.experts}), e, 1);
    NodeId t = ad::relu(tape, ad::token_linear(tape, mixed, p.on(tape, "tower.w1"), p.on(tape, "tower.b1")));
    NodeId logits = ad::token_linear(tape, t, p.on(tape, "tower.w2"), p.on(tape, "tower.b2"));
    r.probs = logits_to_probs(tape, logits, b, c.n_tasks);
    return r;
  }

  if (c.scenario_tokens()) {
    state.scenarios = tokenize_scenarios(tape, batch, model.schema, p, c.n_scenarios, c.global_token());
  }
  if (c.task_tokens()) state.tasks = tokenize_tasks(tape, batch, model.schema, p, c.n_tasks);

  std::optional<NodeId> last_s_hat;
  for (std::size_t l = 0; l < c.layers; ++l) {
    BlockOutput out = mdl_block_forward(tape, state, p, c, membership);
    r.attention.push_back({l + 1, out.scenario_attention, out.task_attention});
    last_s_hat = out.scenario_hat;
    state = std::move(out.state);
  }

  if (c.task_tokens()) {
    NodeId logits = ad::token_linear(tape, state.tasks->node, p.on(tape, "head.w"), p.on(tape, "head.b"));
    r.probs = logits_to_probs(tape, logits, b, c.n_tasks);
    return r;
  }
  NodeId pooled = mean_tokens(tape, state.features.node);
  if (last_s_hat) pooled = ad::add(tape, pooled, pooled_scenario(tape, *last_s_hat, membership, c.global_token()));
  r.probs = shared_towers(tape, pooled, p, c, b);
  return r;
}

void save_model(const Model& model, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  ad::write_archive(model.params, dir / "model.mdl");
  const nlohmann::json meta = {{"config", model.config.to_json()}, {"schema_hash", model.schema.hash()}};
  std::ofstream out(dir / "model.json");
  if (!out) throw std::runtime_error("cannot write " + (dir / "model.json").string());
  out << meta.dump(2) << '\n';
}

Model load_model(const std::filesystem::path& dir, const FeatureSchema& schema) {
  std::ifstream in(dir / "model.json");
  if (!in) throw std::runtime_error("cannot read " + (dir / "model.json").string());
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error((dir / "model.json").string() + ": " + e.what());
  }
  const std::string recorded = meta.at("schema_hash").get<std::string>();
  if (recorded != schema.hash()) {
    throw std::runtime_error("schema hash mismatch: model was trained with " + recorded + ", schema hashes to " +
                             schema.hash());
  }
  Model m = build_model(ModelConfig::from_json(meta.at("config")), schema, 0);
  ad::load_archive(m.params, dir / "model.mdl");
  return m;
}

}  // namespace mdl
