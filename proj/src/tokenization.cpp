#include "mdl/tokenization.hpp"

#include <stdexcept>

namespace mdl {
namespace {

using ad::InitKind;
using ad::InitSpec;
using ad::OptimizerRule;
using ad::Tensor;

std::span<const double> dense_values(const FeatureDef& f, const Instance& x) {
  switch (f.source) {
    case FeatureSource::Ctx:
      if (f.offset + f.dim > x.ctx.size()) {
        throw std::invalid_argument("feature '" + f.name + "': ctx has " + std::to_string(x.ctx.size()) +
                                    " values, need " + std::to_string(f.offset + f.dim));
      }
      return std::span<const double>(x.ctx).subspan(f.offset, f.dim);
    case FeatureSource::Seq:
      if (f.scenario >= x.seq.size() || x.seq[f.scenario].size() != f.dim) {
        throw std::invalid_argument("feature '" + f.name + "': seq summary " + std::to_string(f.scenario) +
                                    " missing or not of length " + std::to_string(f.dim));
      }
      return x.seq[f.scenario];
    default:
      break;
  }
  throw std::logic_error("dense_values on feature '" + f.name + "'");
}

std::uint64_t categorical_value(const FeatureDef& f, const Instance& x) {
  switch (f.source) {
    case FeatureSource::Uid: return x.uid;
    case FeatureSource::Qid: return x.qid;
    case FeatureSource::Iid: return x.iid;
    default: break;
  }
  throw std::logic_error("categorical_value on feature '" + f.name + "'");
}

// [batch, dim] input for one feature; categorical ids gather from `table_prefix + name`.
NodeId feature_input(ad::Tape& tape, BatchView batch, const FeatureDef& f, const std::string& table_prefix,
                     const ad::ParamStore& params) {
  if (f.kind == FeatureKind::Categorical) {
    std::vector<std::size_t> rows;
    rows.reserve(batch.size());
    for (const Instance* x : batch) rows.push_back(categorical_value(f, *x));
    return ad::gather(tape, params.on(tape, table_prefix + f.name), std::move(rows));
  }
  std::vector<double> values;
  values.reserve(batch.size() * f.dim);
  for (const Instance* x : batch) {
    if (f.source == FeatureSource::Member) {
      if (x->member.size() != f.dim) {
        throw std::invalid_argument("feature '" + f.name + "': membership length " +
                                    std::to_string(x->member.size()) + " != " + std::to_string(f.dim));
      }
      for (std::uint8_t b : x->member) values.push_back(b);
    } else {
      const auto v = dense_values(f, *x);
      values.insert(values.end(), v.begin(), v.end());
    }
  }
  return tape.constant(Tensor({batch.size(), f.dim}, std::move(values)));
}

NodeId concat_inputs(ad::Tape& tape, BatchView batch, const FeatureSchema& schema,
                     const std::vector<std::string>& names, const std::string& table_prefix,
                     const ad::ParamStore& params) {
  std::vector<NodeId> parts;
  for (const std::string& n : names) parts.push_back(feature_input(tape, batch, schema.feature(n), table_prefix, params));
  return parts.size() == 1 ? parts.front() : ad::concat(tape, parts);
}

// Two affine layers with ReLU between and a ReLU on the output.
NodeId token_ffn(ad::Tape& tape, NodeId input, const ad::ParamStore& params, const std::string& prefix) {
  NodeId h = ad::relu(tape, ad::affine(tape, input, params.on(tape, prefix + ".w1"), params.on(tape, prefix + ".b1")));
  return ad::relu(tape, ad::affine(tape, h, params.on(tape, prefix + ".w2"), params.on(tape, prefix + ".b2")));
}

NodeId stack_tokens(ad::Tape& tape, const std::vector<NodeId>& tokens, std::size_t batch, std::size_t d) {
  NodeId flat = tokens.size() == 1 ? tokens.front() : ad::concat(tape, tokens);
  return ad::reshape(tape, flat, {batch, tokens.size(), d});
}

NodeId prior_token(ad::Tape& tape, BatchView batch, const FeatureSchema& schema, const ad::ParamStore& params,
                   NodeId imp, bool has_imp, const std::vector<std::string>& prior, const std::string& prefix) {
  std::vector<NodeId> parts;
  if (has_imp) parts.push_back(imp);
  if (!prior.empty()) parts.push_back(concat_inputs(tape, batch, schema, prior, "emb.", params));
  if (parts.empty()) throw std::invalid_argument(prefix + ": token has no input features");
  NodeId input = parts.size() == 1 ? parts.front() : ad::concat(tape, parts);
  return token_ffn(tape, input, params, prefix);
}

void add_ffn(ParamSpecs& specs, const std::string& prefix, std::size_t in, std::size_t hidden, std::size_t out) {
  specs.emplace_back(prefix + ".w1", InitSpec{{in, hidden}, InitKind::UniformScaled, OptimizerRule::RmsProp});
  specs.emplace_back(prefix + ".b1", InitSpec{{hidden}, InitKind::Zeros, OptimizerRule::RmsProp});
  specs.emplace_back(prefix + ".w2", InitSpec{{hidden, out}, InitKind::UniformScaled, OptimizerRule::RmsProp});
  specs.emplace_back(prefix + ".b2", InitSpec{{out}, InitKind::Zeros, OptimizerRule::RmsProp});
}

}  // namespace

std::string global_token_name() { return "global"; }

void check_instance(const FeatureSchema& schema, const Instance& x) {
  for (const FeatureDef& f : schema.features) {
    if (f.kind == FeatureKind::Categorical) {
      const std::uint64_t v = categorical_value(f, x);
      if (v >= f.cardinality) {
        throw std::invalid_argument("feature '" + f.name + "': id " + std::to_string(v) +
                                    " out of range for cardinality " + std::to_string(f.cardinality));
      }
    } else if (f.source == FeatureSource::Member) {
      if (x.member.size() != f.dim) {
        throw std::invalid_argument("feature '" + f.name + "': membership length " +
                                    std::to_string(x.member.size()) + " != " + std::to_string(f.dim));
      }
    } else {
      (void)dense_values(f, x);
    }
  }
  if (x.member.size() != schema.num_scenarios()) {
    throw std::invalid_argument("instance membership covers " + std::to_string(x.member.size()) +
                                " scenarios, schema declares " + std::to_string(schema.num_scenarios()));
  }
  if (x.labels.size() != schema.num_tasks()) {
    throw std::invalid_argument("instance has " + std::to_string(x.labels.size()) + " labels, schema declares " +
                                std::to_string(schema.num_tasks()) + " tasks");
  }
}

std::vector<NodeId> embed_batch(ad::Tape& tape, BatchView batch, const FeatureSchema& schema,
                                const ad::ParamStore& params) {
  if (batch.empty()) throw std::invalid_argument("embed_batch: empty batch");
  for (const Instance* x : batch) check_instance(schema, *x);
  std::vector<NodeId> out;
  for (const GroupDef& g : schema.groups) out.push_back(concat_inputs(tape, batch, schema, g.features, "emb.", params));
  return out;
}

TokenSet tokenize_features(ad::Tape& tape, std::span<const NodeId> group_embeddings, const ad::ParamStore& params) {
  if (group_embeddings.empty()) throw std::invalid_argument("tokenize_features: no groups");
  const std::size_t batch = tape.value(group_embeddings.front()).dim(0);
  std::vector<NodeId> tokens;
  std::size_t d = 0;
  for (std::size_t j = 0; j < group_embeddings.size(); ++j) {
    const std::string prefix = "tok.feat." + std::to_string(j);
    const ad::Tensor& w = params.value(prefix + ".w");
    const ad::Tensor& e = tape.value(group_embeddings[j]);
    if (w.dim(0) != e.cols()) {
      throw std::invalid_argument(prefix + ": projection expects width " + std::to_string(w.dim(0)) +
                                  ", group embedding has " + std::to_string(e.cols()));
    }
    d = w.dim(1);
    tokens.push_back(ad::affine(tape, group_embeddings[j], params.on(tape, prefix + ".w"), params.on(tape, prefix + ".b")));
  }
  return {stack_tokens(tape, tokens, batch, d), TokenRole::Feature, tokens.size()};
}

NodeId important_embeddings(ad::Tape& tape, BatchView batch, const FeatureSchema& schema, const ad::ParamStore& params) {
  const auto names = schema.important_features();
  if (names.empty()) throw std::invalid_argument("schema declares no important features");
  return concat_inputs(tape, batch, schema, names, "imp.", params);
}

TokenSet tokenize_scenarios(ad::Tape& tape, BatchView batch, const FeatureSchema& schema,
                            const ad::ParamStore& params, std::size_t n_scenarios, bool with_global) {
  if (schema.num_scenarios() < n_scenarios) {
    throw std::invalid_argument("scenario " + std::to_string(schema.num_scenarios()) +
                                " has no prior feature declaration in the schema");
  }
  const bool has_imp = !schema.important_features().empty();
  const NodeId imp = has_imp ? important_embeddings(tape, batch, schema, params) : 0;
  std::vector<NodeId> tokens;
  for (std::size_t k = 0; k < n_scenarios; ++k) {
    tokens.push_back(prior_token(tape, batch, schema, params, imp, has_imp, schema.scenarios[k].prior,
                                 "tok.scn." + std::to_string(k)));
  }
  if (with_global) {
    tokens.push_back(prior_token(tape, batch, schema, params, imp, has_imp, {}, "tok.scn." + global_token_name()));
  }
  const std::size_t d = tape.value(tokens.front()).cols();
  return {stack_tokens(tape, tokens, batch.size(), d), TokenRole::Scenario, tokens.size()};
}

TokenSet tokenize_tasks(ad::Tape& tape, BatchView batch, const FeatureSchema& schema, const ad::ParamStore& params,
                        std::size_t n_tasks) {
  if (schema.num_tasks() < n_tasks) {
    throw std::invalid_argument("task " + std::to_string(schema.num_tasks()) +
                                " has no prior feature declaration in the schema");
  }
  const bool has_imp = !schema.important_features().empty();
  const NodeId imp = has_imp ? important_embeddings(tape, batch, schema, params) : 0;
  std::vector<NodeId> tokens;
  for (std::size_t n = 0; n < n_tasks; ++n) {
    tokens.push_back(prior_token(tape, batch, schema, params, imp, has_imp, schema.tasks[n].prior,
                                 "tok.task." + std::to_string(n)));
  }
  const std::size_t d = tape.value(tokens.front()).cols();
  return {stack_tokens(tape, tokens, batch.size(), d), TokenRole::Task, tokens.size()};
}

void append_embedding_params(ParamSpecs& specs, const FeatureSchema& schema, bool important_tables) {
  for (const FeatureDef& f : schema.features) {
    if (f.kind != FeatureKind::Categorical) continue;
    specs.emplace_back("emb." + f.name, InitSpec{{f.cardinality, f.dim}, InitKind::UniformScaled, OptimizerRule::Adagrad});
    if (important_tables && f.important) {
      specs.emplace_back("imp." + f.name, InitSpec{{f.cardinality, f.dim}, InitKind::UniformScaled, OptimizerRule::Adagrad});
    }
  }
}

void append_tokenizer_params(ParamSpecs& specs, const FeatureSchema& schema, const TokenizerLayout& layout) {
  const std::size_t d = layout.d, h = layout.ffn_hidden;
  for (std::size_t j = 0; j < schema.num_groups(); ++j) {
    const std::string prefix = "tok.feat." + std::to_string(j);
    specs.emplace_back(prefix + ".w", InitSpec{{schema.group_dim(j), d}, InitKind::UniformScaled, OptimizerRule::RmsProp});
    specs.emplace_back(prefix + ".b", InitSpec{{d}, InitKind::Zeros, OptimizerRule::RmsProp});
  }
  const std::size_t imp = schema.important_dim();
  if (layout.scenario_tokens) {
    for (std::size_t k = 0; k < schema.num_scenarios(); ++k) {
      add_ffn(specs, "tok.scn." + std::to_string(k), imp + schema.features_dim(schema.scenarios[k].prior), h, d);
    }
    if (layout.global_token) {
      if (imp == 0) throw std::invalid_argument("the global scenario token needs important features");
      add_ffn(specs, "tok.scn." + global_token_name(), imp, h, d);
    }
  }
  if (layout.task_tokens) {
    for (std::size_t n = 0; n < schema.num_tasks(); ++n) {
      add_ffn(specs, "tok.task." + std::to_string(n), imp + schema.features_dim(schema.tasks[n].prior), h, d);
    }
  }
}

}  // namespace mdl
