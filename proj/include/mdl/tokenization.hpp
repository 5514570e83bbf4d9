#pragma once

#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mdl/data.hpp"
#include "mdl/params.hpp"
#include "mdl/schema.hpp"
#include "mdl/tape.hpp"

namespace mdl {

using ad::NodeId;
using BatchView = std::span<const Instance* const>;
using ParamSpecs = std::vector<std::pair<std::string, ad::InitSpec>>;

enum class TokenRole { Feature, Scenario, Task };

/// A [batch, count, d] token matrix on the tape.
struct TokenSet {
  NodeId node = 0;
  TokenRole role = TokenRole::Feature;
  std::size_t count = 0;
};

/// Throws std::invalid_argument naming the first schema feature the
/// instance violates (missing field, wrong length, id out of range).
void check_instance(const FeatureSchema& schema, const Instance& x);

/// Per group, the [batch, group_dim] concatenation of that group's feature
/// embeddings in declaration order. Categorical features gather rows of
/// "emb.<name>"; dense and sequence features pass through.
std::vector<NodeId> embed_batch(ad::Tape& tape, BatchView batch, const FeatureSchema& schema,
                                const ad::ParamStore& params);

/// t_j = W_j e_j + b_j per group, stacked to [batch, N_f, d].
TokenSet tokenize_features(ad::Tape& tape, std::span<const NodeId> group_embeddings,
                           const ad::ParamStore& params);

/// Scenario k: ReLU(FFN_k(e_imp ++ e_prior_k)); the optional trailing global
/// token sees e_imp only. Output [batch, n_scenarios (+1), d].
TokenSet tokenize_scenarios(ad::Tape& tape, BatchView batch, const FeatureSchema& schema,
                            const ad::ParamStore& params, std::size_t n_scenarios, bool with_global);

/// Task n: ReLU(FFN_n(e_imp ++ e_prior_n)). Output [batch, n_tasks, d].
TokenSet tokenize_tasks(ad::Tape& tape, BatchView batch, const FeatureSchema& schema,
                        const ad::ParamStore& params, std::size_t n_tasks);

/// The "important" extra embeddings, [batch, important_dim]. Categorical
/// features read their own "imp.<name>" tables.
NodeId important_embeddings(ad::Tape& tape, BatchView batch, const FeatureSchema& schema,
                            const ad::ParamStore& params);

std::string global_token_name();

struct TokenizerLayout {
  std::size_t d = 0;
  std::size_t ffn_hidden = 0;
  bool scenario_tokens = true;
  bool global_token = true;
  bool task_tokens = true;
};

/// Parameter declarations for embedding tables and tokenizers.
void append_embedding_params(ParamSpecs& specs, const FeatureSchema& schema, bool important_tables);
void append_tokenizer_params(ParamSpecs& specs, const FeatureSchema& schema, const TokenizerLayout& layout);

}  // namespace mdl
