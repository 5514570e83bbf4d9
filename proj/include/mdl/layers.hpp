#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mdl/params.hpp"
#include "mdl/tape.hpp"
#include "mdl/tokenization.hpp"

namespace mdl {

/// Per-instance multi-hot scenario membership, row-major [batch, scenarios].
struct Membership {
  std::size_t scenarios = 0;
  std::vector<std::uint8_t> bits;

  std::size_t batch() const { return scenarios == 0 ? 0 : bits.size() / scenarios; }
  static Membership of(BatchView batch);
};

/// Parameter-free head shuffle. Each of the N tokens is cut into N segments;
/// output token h is the concatenation of segment h of every input token.
/// Applying it twice restores the input.
NodeId token_mixing(ad::Tape& tape, NodeId tokens);

/// Per-token two-layer FFN with ReLU between: "<prefix>.w1/.b1/.w2/.b2".
NodeId per_token_ffn(ad::Tape& tape, NodeId tokens, const ad::ParamStore& params, const std::string& prefix);

/// u = LN(mix(T) + T); returns FFN(u) + u.
NodeId feature_self_interaction(ad::Tape& tape, NodeId features, const ad::ParamStore& params,
                                const std::string& prefix);

struct AttentionOutput {
  NodeId output = 0;   // [batch, n_queries, d]
  NodeId weights = 0;  // [batch, heads, n_queries, n_features]
};

/// Cross attention: queries attend over feature tokens. Q is projected per
/// query token, K and V per feature token; heads are merged by a shared
/// output projection.
AttentionOutput domain_aware_attention(ad::Tape& tape, NodeId queries, NodeId features,
                                       const ad::ParamStore& params, const std::string& prefix,
                                       std::size_t heads);

/// Mean of each instance's member scenario tokens (plus the trailing global
/// token when `has_global_row`), added to every task token.
NodeId domain_fused(ad::Tape& tape, NodeId task_tokens, NodeId scenario_tokens, const Membership& membership,
                    bool has_global_row);

/// Mean of the selected scenario tokens only, [batch, d].
NodeId pooled_scenario(ad::Tape& tape, NodeId scenario_tokens, const Membership& membership, bool has_global_row);

struct TokenState {
  TokenSet features;
  std::optional<TokenSet> scenarios;
  std::optional<TokenSet> tasks;
  std::size_t layer = 0;
};

struct BlockOutput {
  TokenState state;
  std::optional<NodeId> scenario_attention;
  std::optional<NodeId> task_attention;
  std::optional<NodeId> scenario_hat;  // post-attention, pre-FFN scenario tokens
};

struct ModelConfig;

BlockOutput mdl_block_forward(ad::Tape& tape, const TokenState& state, const ad::ParamStore& params,
                              const ModelConfig& config, const Membership& membership);

}  // namespace mdl
