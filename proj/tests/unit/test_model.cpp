#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "fixtures.hpp"
#include "mdl/gradcheck.hpp"
#include "mdl/model.hpp"
#include "mdl/training.hpp"

using namespace mdl;
using namespace mdl::ad;
using mdl::testing::small_gen;
using mdl::testing::small_schema;
using mdl::testing::TempDir;
using mdl::testing::view;

namespace {

ModelConfig small_config(Architecture arch = Architecture::Mdl) {
  ModelConfig c;
  c.arch = arch;
  c.d = 4;
  c.layers = 1;
  c.heads = 2;
  c.ffn_ratio = 2;
  c.tower_hidden = 3;
  c.experts = 2;
  c.expert_hidden = 3;
  return c;
}

const Dataset& small_data() {
  static const Dataset data = generate_dataset(small_gen(200));
  return data;
}

Tensor forward_probs(const Model& m, BatchView batch) {
  Tape t;
  return t.value(model_forward(t, m, batch).probs);
}

void zero_all(Model& m) {
  for (const auto& [name, e] : m.params.entries()) m.params.mutable_value(name).fill(0.0);
}

}  // namespace

TEST(Config, JsonRoundTripAndValidation) {
  ModelConfig c = small_config();
  c.ablation.set("no_global_scenario_token");
  EXPECT_EQ(ModelConfig::from_json(c.to_json()), c);

  nlohmann::json j = c.to_json();
  j["depth"] = 3;
  EXPECT_THROW(ModelConfig::from_json(j), std::invalid_argument);
  EXPECT_THROW(c.ablation.set("no_everything"), std::invalid_argument);

  ModelConfig sb = small_config(Architecture::SharedBottom);
  sb.ablation.no_task_token = true;
  EXPECT_THROW(sb.validate(), std::invalid_argument);

  ModelConfig odd = small_config();
  odd.d = 6;
  EXPECT_THROW(odd.resolved(small_schema()), std::invalid_argument);
  ModelConfig heads = small_config();
  heads.heads = 3;
  EXPECT_THROW(heads.validate(), std::invalid_argument);
  ModelConfig tasks = small_config();
  tasks.n_tasks = 3;
  EXPECT_THROW(tasks.resolved(small_schema()), std::invalid_argument);
}

TEST(Counting, HandDerivedParameterCount) {
  const FeatureSchema s = small_schema();
  const std::size_t d = 4, h = 8;
  const std::size_t emb = 20 * 3 + 10 * 2 + 15 * 3;
  const std::size_t imp = 20 * 3 + 10 * 2;
  const std::size_t feat = (5 + 5 + 2 + 4) * d + 4 * d;
  auto ffn2 = [&](std::size_t in) { return in * h + h + h * d + d; };
  // important width 5; scenario prior seq(2) + context(2); click prior iid(3); like prior content(2)
  const std::size_t tok = 2 * ffn2(5 + 4) + ffn2(5) + ffn2(5 + 3) + ffn2(5 + 2);
  const std::size_t tffn1 = d * h + h + h * d + d;
  auto attn = [&](std::size_t nq) { return nq * (d * d + d) + 2 * 4 * (d * d + d) + d * d + d; };
  const std::size_t layer = (2 * 4 * d + 4 * tffn1) + attn(3) + 3 * tffn1 + attn(2) + 2 * tffn1;
  const std::size_t head = 2 * d + 2;
  EXPECT_EQ(parameter_count(small_config(), s), emb + imp + feat + tok + layer + head);
  EXPECT_EQ(build_model(small_config(), s, 1).parameter_count(), emb + imp + feat + tok + layer + head);

  // shared bottom: no important tables, no prior tokens, towers d -> 2*3 -> 2
  const std::size_t sb = emb + feat + (2 * 4 * d + 4 * tffn1) + (d * 6 + 6) + 2 * (3 + 1);
  EXPECT_EQ(parameter_count(small_config(Architecture::SharedBottom), s), sb);
}

TEST(Counting, HandDerivedFlops) {
  const FeatureSchema s = small_schema();
  const std::size_t d = 4, h = 8;
  const std::size_t feat = 16 * d;
  auto tok = [&](std::size_t in) { return in * h + h * d; };
  const std::size_t tokens = 2 * tok(9) + tok(5) + tok(8) + tok(7);
  const std::size_t ffn = 2 * d * h;
  auto attn = [&](std::size_t nq) { return nq * d * d + 2 * 4 * d * d + 2 * nq * 4 * d + nq * d * d; };
  const std::size_t layer = 4 * ffn + attn(3) + 3 * ffn + attn(2) + 2 * ffn;
  EXPECT_EQ(flops_estimate(small_config(), s), feat + tokens + layer + 2 * d);

  ModelConfig big = small_config();
  big.layers = 2;
  EXPECT_EQ(flops_estimate(big, s), feat + tokens + 2 * layer + 2 * d);
}

TEST(Counting, ParameterMatchingLandsWithinOneStep) {
  const FeatureSchema s = small_schema(true);
  const std::size_t target = parameter_count(small_config(), small_schema());
  for (Architecture a : {Architecture::SharedBottom, Architecture::Mmoe}) {
    ModelConfig m = match_parameter_count(small_config(a), s, target);
    const std::size_t n = parameter_count(m, s);
    ModelConfig next = m;
    (a == Architecture::SharedBottom ? next.tower_hidden : next.expert_hidden) += 1;
    const std::size_t step = parameter_count(next, s) - n;
    EXPECT_LE(n > target ? n - target : target - n, step) << to_string(a);
  }
  EXPECT_THROW(match_parameter_count(small_config(), s, target), std::invalid_argument);
}

TEST(Forward, ZeroParametersGiveOneHalf) {
  const auto batch = view(small_data(), 0, 16);
  for (Architecture a : {Architecture::Mdl, Architecture::SharedBottom, Architecture::Mmoe}) {
    Model m = build_model(small_config(a), small_schema(a != Architecture::Mdl), 1);
    zero_all(m);
    const Tensor p = forward_probs(m, batch);
    ASSERT_EQ(p.shape(), (Shape{16, 2}));
    for (double v : p.values()) EXPECT_EQ(v, 0.5) << to_string(a);
  }
}

TEST(Forward, OneHeadPerTaskToken) {
  Model m = build_model(small_config(), small_schema(), 1);
  EXPECT_EQ(m.params.value("head.w").shape(), (Shape{2, 4, 1}));
  EXPECT_EQ(m.params.value("head.b").shape(), (Shape{2, 1}));
  const Tensor p = forward_probs(m, view(small_data(), 0, 8));
  for (double v : p.values()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
}

TEST(Forward, AttentionRecordedPerLayer) {
  ModelConfig c = small_config();
  c.layers = 3;
  Model m = build_model(c, small_schema(), 2);
  Tape t;
  ForwardResult r = model_forward(t, m, view(small_data(), 0, 4));
  ASSERT_EQ(r.attention.size(), 3u);
  for (std::size_t l = 0; l < 3; ++l) {
    EXPECT_EQ(r.attention[l].layer, l + 1);
    EXPECT_EQ(t.value(*r.attention[l].scenario).shape(), (Shape{4, 2, 3, 4}));
    EXPECT_EQ(t.value(*r.attention[l].task).shape(), (Shape{4, 2, 2, 4}));
  }
}

TEST(Forward, MmoeGatesAreDistributions) {
  Model m = build_model(small_config(Architecture::Mmoe), small_schema(true), 3);
  Tape t;
  ForwardResult r = model_forward(t, m, view(small_data(), 0, 10));
  const Tensor g = t.value(*r.gates);
  ASSERT_EQ(g.shape(), (Shape{10, 2, 2}));
  for (std::size_t row = 0; row < g.rows(); ++row) {
    EXPECT_NEAR(g.at(row, 0) + g.at(row, 1), 1.0, 1e-12);
  }
}

TEST(Forward, WithoutScenarioTokensMembershipIsIgnored) {
  const auto batch = view(small_data(), 0, 12);
  const Membership real = Membership::of(batch);
  Membership flipped = real;
  for (std::size_t i = 0; i < flipped.bits.size(); i += 2) {
    flipped.bits[i] = 1;
    flipped.bits[i + 1] = 0;
  }
  ModelConfig c = small_config();
  c.ablation.no_scenario_token = true;
  Model m = build_model(c, small_schema(), 4);
  Tape t1, t2;
  EXPECT_TRUE(bitwise_equal(t1.value(model_forward(t1, m, batch, real).probs),
                            t2.value(model_forward(t2, m, batch, flipped).probs)));

  Model full = build_model(small_config(), small_schema(), 4);
  Tape t3, t4;
  EXPECT_FALSE(t3.value(model_forward(t3, full, batch, real).probs) ==
               t4.value(model_forward(t4, full, batch, flipped).probs));
}

TEST(Forward, AblationsChangeParameterSets) {
  const FeatureSchema s = small_schema();
  auto with = [&](const char* flag) {
    ModelConfig c = small_config();
    c.ablation.set(flag);
    return build_model(c, s, 1);
  };
  EXPECT_FALSE(with("no_global_scenario_token").params.contains("tok.scn.global.w1"));
  EXPECT_FALSE(with("no_scenario_feature_attn").params.contains("blk0.sattn.q.w"));
  EXPECT_FALSE(with("no_task_feature_attn").params.contains("blk0.tattn.q.w"));
  EXPECT_FALSE(with("no_task_token").params.contains("head.w"));
  EXPECT_TRUE(with("no_task_token").params.contains("tower.w1"));
  for (const char* flag : {"no_task_token", "no_task_feature_attn", "no_scenario_token", "no_global_scenario_token",
                           "no_scenario_feature_attn"}) {
    Model m = with(flag);
    const Tensor p = forward_probs(m, view(small_data(), 0, 6));
    EXPECT_EQ(p.shape(), (Shape{6, 2})) << flag;
    EXPECT_TRUE(p.all_finite()) << flag;
  }
}

TEST(Gradients, ZeroWeightTaskIsIsolated) {
  Model m = build_model(small_config(), small_schema(), 5);
  const auto batch = view(small_data(), 0, 16);
  Tape t;
  NodeId loss = multi_task_loss(t, model_forward(t, m, batch).probs, batch, {1.0, 0.0});
  GradientMap g = t.backward(loss);
  for (const auto& [name, grad] : g) {
    if (name.rfind("tok.task.1.", 0) == 0) {
      for (double v : grad.values()) EXPECT_EQ(v, 0.0) << name;
    }
  }
  const Tensor& hw = g.at("head.w");
  for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(hw[4 + c], 0.0);
  EXPECT_EQ(g.at("head.b")[1], 0.0);
  EXPECT_NE(g.at("head.b")[0], 0.0);
}

TEST(Gradients, FullModelFiniteDifferences) {
  const auto batch = view(small_data(), 0, 6);
  for (Architecture a : {Architecture::Mdl, Architecture::SharedBottom, Architecture::Mmoe}) {
    Model m = build_model(small_config(a), small_schema(a != Architecture::Mdl), 6);
    ScalarFn fn = [&](Tape& t, const ParamStore& p) {
      Model copy{m.config, m.schema, p};
      return multi_task_loss(t, model_forward(t, copy, batch).probs, batch, {1.0, 0.5});
    };
    const GradCheckResult r = finite_diff_report(fn, m.params, 1e-6);
    EXPECT_LT(r.max_rel_error, 1e-4) << to_string(a) << " worst " << r.worst_param << "[" << r.worst_index
                                     << "] ad=" << r.worst_autodiff << " fd=" << r.worst_numeric;
  }
}

TEST(Persistence, SaveLoadRoundTripAndHashCheck) {
  TempDir dir("model");
  ModelConfig c = small_config();
  c.ablation.set("no_task_feature_attn");
  Model m = build_model(c, small_schema(), 7);
  save_model(m, dir.path());
  Model back = load_model(dir.path(), small_schema());
  EXPECT_EQ(back.config, m.config);
  EXPECT_TRUE(back.params == m.params);
  const auto batch = view(small_data(), 0, 5);
  EXPECT_TRUE(bitwise_equal(forward_probs(back, batch), forward_probs(m, batch)));
  try {
    load_model(dir.path(), small_schema(true));
    FAIL();
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("schema hash mismatch"), std::string::npos);
  }
}
