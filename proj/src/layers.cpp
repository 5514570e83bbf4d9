#include "mdl/layers.hpp"

#include <algorithm>
#include <stdexcept>

#include "mdl/model.hpp"

namespace mdl {
namespace {

std::vector<std::uint8_t> fused_mask(const Membership& m, std::size_t rows, bool has_global_row) {
  if (rows != m.scenarios + (has_global_row ? 1 : 0)) {
    throw std::invalid_argument("domain_fused: " + std::to_string(rows) + " scenario tokens for " +
                                std::to_string(m.scenarios) + " scenarios" + (has_global_row ? " + global" : ""));
  }
  std::vector<std::uint8_t> mask;
  mask.reserve(m.batch() * rows);
  for (std::size_t b = 0; b < m.batch(); ++b) {
    bool any = has_global_row;
    for (std::size_t k = 0; k < m.scenarios; ++k) {
      const std::uint8_t bit = m.bits[b * m.scenarios + k] ? 1 : 0;
      any = any || bit;
      mask.push_back(bit);
    }
    if (has_global_row) mask.push_back(1);
    if (!any) {
      throw std::invalid_argument("domain_fused: instance " + std::to_string(b) +
                                  " selects no scenario token (empty membership, no global token)");
    }
  }
  return mask;
}

}  // namespace

Membership Membership::of(BatchView batch) {
  Membership m;
  if (batch.empty()) return m;
  m.scenarios = batch.front()->member.size();
  for (const Instance* x : batch) {
    if (x->member.size() != m.scenarios) throw std::invalid_argument("membership vectors differ in length");
    m.bits.insert(m.bits.end(), x->member.begin(), x->member.end());
  }
  return m;
}

NodeId token_mixing(ad::Tape& tape, NodeId tokens) { return ad::token_mix(tape, tokens); }

NodeId per_token_ffn(ad::Tape& tape, NodeId tokens, const ad::ParamStore& params, const std::string& prefix) {
  NodeId h = ad::relu(tape, ad::token_linear(tape, tokens, params.on(tape, prefix + ".w1"), params.on(tape, prefix + ".b1")));
  return ad::token_linear(tape, h, params.on(tape, prefix + ".w2"), params.on(tape, prefix + ".b2"));
}

NodeId feature_self_interaction(ad::Tape& tape, NodeId features, const ad::ParamStore& params,
                                const std::string& prefix) {
  NodeId mixed = ad::add(tape, token_mixing(tape, features), features);
  NodeId u = ad::layer_norm(tape, mixed, params.on(tape, prefix + ".ln.g"), params.on(tape, prefix + ".ln.b"));
  return ad::add(tape, per_token_ffn(tape, u, params, prefix + ".ffn"), u);
}

AttentionOutput domain_aware_attention(ad::Tape& tape, NodeId queries, NodeId features,
                                       const ad::ParamStore& params, const std::string& prefix,
                                       std::size_t heads) {
  auto proj = [&](NodeId x, const char* which) {
    return ad::token_linear(tape, x, params.on(tape, prefix + "." + which + ".w"),
                            params.on(tape, prefix + "." + which + ".b"));
  };
  NodeId q = proj(queries, "q");
  NodeId k = proj(features, "k");
  NodeId v = proj(features, "v");
  NodeId weights = ad::softmax(tape, ad::attn_scores(tape, q, k, heads));
  NodeId mixed = ad::attn_mix(tape, weights, v, heads);
  NodeId out = ad::affine(tape, mixed, params.on(tape, prefix + ".o.w"), params.on(tape, prefix + ".o.b"));
  return {out, weights};
}

NodeId pooled_scenario(ad::Tape& tape, NodeId scenario_tokens, const Membership& membership, bool has_global_row) {
  const ad::Tensor& s = tape.value(scenario_tokens);
  if (s.rank() != 3 || s.dim(0) != membership.batch()) {
    throw std::invalid_argument("domain_fused: scenario tokens " + ad::shape_str(s.shape()) + " for batch of " +
                                std::to_string(membership.batch()));
  }
  return ad::select_mean(tape, scenario_tokens, fused_mask(membership, s.dim(1), has_global_row));
}

NodeId domain_fused(ad::Tape& tape, NodeId task_tokens, NodeId scenario_tokens, const Membership& membership,
                    bool has_global_row) {
  const ad::Shape t = tape.value(task_tokens).shape();
  const ad::Shape s = tape.value(scenario_tokens).shape();
  if (t.size() != 3 || s.size() != 3 || t[0] != s[0] || t[2] != s[2]) {
    throw std::invalid_argument("domain_fused: task tokens " + ad::shape_str(t) + " vs scenario tokens " +
                                ad::shape_str(s));
  }
  NodeId avg = pooled_scenario(tape, scenario_tokens, membership, has_global_row);
  NodeId avg3 = ad::reshape(tape, avg, {t[0], 1, t[2]});
  return ad::broadcast_add(tape, task_tokens, avg3);
}

BlockOutput mdl_block_forward(ad::Tape& tape, const TokenState& state, const ad::ParamStore& params,
                              const ModelConfig& config, const Membership& membership) {
  if (state.layer >= config.layers) {
    throw std::invalid_argument("mdl_block_forward: layer " + std::to_string(state.layer) + " >= L");
  }
  const std::string blk = "blk" + std::to_string(state.layer);
  const Ablation& ab = config.ablation;
  BlockOutput out;
  out.state.layer = state.layer + 1;
  out.state.features = {feature_self_interaction(tape, state.features.node, params, blk + ".fsi"),
                        TokenRole::Feature, state.features.count};
  const NodeId feats = out.state.features.node;

  std::optional<NodeId> s_hat;
  if (config.scenario_tokens()) {
    if (!state.scenarios) throw std::invalid_argument("mdl_block_forward: scenario tokens missing");
    const NodeId ts = state.scenarios->node;
    if (ab.no_scenario_feature_attn) {
      s_hat = ts;
    } else {
      AttentionOutput a = domain_aware_attention(tape, ts, feats, params, blk + ".sattn", config.heads);
      out.scenario_attention = a.weights;
      s_hat = ad::add(tape, a.output, ts);
    }
    NodeId next = ad::add(tape, per_token_ffn(tape, *s_hat, params, blk + ".sffn"), *s_hat);
    out.state.scenarios = TokenSet{next, TokenRole::Scenario, state.scenarios->count};
    out.scenario_hat = s_hat;
  }

  if (config.task_tokens()) {
    if (!state.tasks) throw std::invalid_argument("mdl_block_forward: task tokens missing");
    const NodeId tt = state.tasks->node;
    NodeId t_hat = tt;
    if (!ab.no_task_feature_attn) {
      AttentionOutput a = domain_aware_attention(tape, tt, feats, params, blk + ".tattn", config.heads);
      out.task_attention = a.weights;
      t_hat = ad::add(tape, a.output, tt);
    }
    NodeId t_tilde = s_hat ? domain_fused(tape, t_hat, *s_hat, membership, config.global_token()) : t_hat;
    NodeId next = ad::add(tape, per_token_ffn(tape, t_tilde, params, blk + ".tffn"), t_tilde);
    out.state.tasks = TokenSet{next, TokenRole::Task, state.tasks->count};
  }
  return out;
}

}  // namespace mdl
