#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <map>
#include <set>

#include "fixtures.hpp"
#include "mdl/data.hpp"

using namespace mdl;
using mdl::testing::small_gen;
using mdl::testing::TempDir;

namespace {

GenConfig three_scenarios(std::size_t instances, std::uint64_t seed) {
  GenConfig g;
  g.instances = instances;
  g.scenario_mix = {{{0}, 0.3}, {{1}, 0.3}, {{2}, 0.3}, {{0, 1}, 0.1}};
  g.scenario_shift = {0.0, 0.5, 1.0};
  g.seed = seed;
  return g;
}

}  // namespace

TEST(Generator, DeterministicInSeed) {
  const GenConfig g = small_gen(300, 5);
  EXPECT_EQ(generate_dataset(g), generate_dataset(g));
  EXPECT_NE(generate_dataset(g), generate_dataset(small_gen(300, 6)));
}

TEST(Generator, ShapesMatchConfig) {
  const Dataset d = generate_dataset(small_gen(300));
  ASSERT_EQ(d.size(), 300u);
  for (const Instance& x : d) {
    EXPECT_EQ(x.ctx.size(), 4u);
    ASSERT_EQ(x.seq.size(), 2u);
    EXPECT_EQ(x.seq[0].size(), 2u);
    EXPECT_EQ(x.member.size(), 2u);
    EXPECT_EQ(x.labels.size(), 2u);
    EXPECT_LT(x.uid, 20u);
    EXPECT_LT(x.qid, 10u);
    EXPECT_LT(x.iid, 15u);
  }
}

TEST(Generator, GroupsAreContiguousDistinctAndSized) {
  const GenConfig g = three_scenarios(20000, 2);
  const Dataset d = generate_dataset(g);
  const auto groups = group_indices(d);
  std::size_t total = 0;
  for (const auto& grp : groups) {
    EXPECT_GE(grp.size(), g.group_min);
    EXPECT_LE(grp.size(), g.group_max);
    EXPECT_EQ(grp.back() - grp.front() + 1, grp.size());
    total += grp.size();
  }
  EXPECT_EQ(total, d.size());
}

TEST(Generator, PositiveRatesHitTargets) {
  const GenConfig g = three_scenarios(20000, 3);
  const GeneratedData out = generate(g);
  const auto rates = positive_rates(out.instances);
  ASSERT_EQ(rates.size(), 3u);
  for (std::size_t n = 0; n < 3; ++n) EXPECT_NEAR(rates[n], g.target_positive_rate[n], 1e-3) << n;
  EXPECT_EQ(out.task_bias.size(), 3u);
}

TEST(Generator, HugeBiasGivesAllPositives) {
  GenConfig g = small_gen(200);
  g.task_bias = {1e9, 1e9};
  for (const Instance& x : generate_dataset(g)) EXPECT_EQ(x.labels, (std::vector<std::uint8_t>{1, 1}));
  g.task_bias = {-1e9, -1e9};
  for (const Instance& x : generate_dataset(g)) EXPECT_EQ(x.labels, (std::vector<std::uint8_t>{0, 0}));
}

TEST(Generator, MembershipMarginalsWithinThreeStandardErrors) {
  const GenConfig g = three_scenarios(30000, 4);
  const Dataset d = generate_dataset(g);
  const double n = static_cast<double>(d.size());
  for (std::size_t k = 0; k < 3; ++k) {
    double p = 0.0;
    for (const MixEntry& e : g.scenario_mix) {
      if (std::find(e.members.begin(), e.members.end(), k) != e.members.end()) p += e.p;
    }
    double hits = 0.0;
    for (const Instance& x : d) hits += x.member[k];
    const double se = std::sqrt(p * (1.0 - p) / n);
    EXPECT_LT(std::abs(hits / n - p), 3.0 * se) << "scenario " << k;
  }
}

TEST(Generator, MixPatternsFitConfiguredProbabilities) {
  const GenConfig g = three_scenarios(30000, 5);
  const Dataset d = generate_dataset(g);
  std::map<std::vector<std::uint8_t>, double> seen;
  for (const Instance& x : d) seen[x.member] += 1.0;
  double chi2 = 0.0;
  for (const MixEntry& e : g.scenario_mix) {
    std::vector<std::uint8_t> bits(3, 0);
    for (std::size_t m : e.members) bits[m] = 1;
    const double expected = e.p * static_cast<double>(d.size());
    chi2 += std::pow(seen[bits] - expected, 2) / expected;
    seen.erase(bits);
  }
  EXPECT_TRUE(seen.empty());
  // chi-square, 3 degrees of freedom, p = 0.001
  EXPECT_LT(chi2, 16.27);
}

TEST(Generator, LargerShiftDecorrelatesScenarioBehaviour) {
  double previous = 2.0;
  for (double shift : {0.0, 0.5, 1.0, 2.0}) {
    GenConfig g = small_gen(2000, 7);
    g.users = 400;
    g.latent_dim = 8;
    g.seq_noise = 0.0;
    g.scenario_shift = {0.0, shift};
    const Dataset d = generate_dataset(g);
    double cos_sum = 0.0;
    for (const Instance& x : d) {
      double dot = 0.0, a = 0.0, b = 0.0;
      for (std::size_t j = 0; j < 8; ++j) {
        dot += x.seq[0][j] * x.seq[1][j];
        a += x.seq[0][j] * x.seq[0][j];
        b += x.seq[1][j] * x.seq[1][j];
      }
      cos_sum += dot / std::sqrt(a * b);
    }
    const double mean_cos = cos_sum / static_cast<double>(d.size());
    EXPECT_NEAR(mean_cos, std::cos(shift * M_PI / 2.0), 1e-9) << shift;
    EXPECT_LT(mean_cos, previous);
    previous = mean_cos;
  }
}

TEST(GenConfigJson, RoundTripAndUnknownKey) {
  const GenConfig g = three_scenarios(1000, 9);
  const GenConfig back = GenConfig::from_json(g.to_json());
  EXPECT_EQ(back.to_json(), g.to_json());
  EXPECT_EQ(generate_dataset(back), generate_dataset(g));
  nlohmann::json j = g.to_json();
  j["temperature"] = 1;
  EXPECT_THROW(GenConfig::from_json(j), std::invalid_argument);
  j = g.to_json();
  j["scenario_mix"][0]["p"] = 0.5;
  EXPECT_THROW(GenConfig::from_json(j), std::invalid_argument);
}

TEST(DatasetIo, RoundTripIsExact) {
  TempDir dir("data");
  const Dataset d = generate_dataset(small_gen(200));
  write_dataset(d, dir / "d.jsonl");
  EXPECT_EQ(read_dataset(dir / "d.jsonl"), d);
}

TEST(DatasetIo, EmptyFileGivesEmptyDataset) {
  TempDir dir("empty");
  std::ofstream(dir / "e.jsonl").close();
  EXPECT_TRUE(read_dataset(dir / "e.jsonl").empty());
}

TEST(DatasetIo, TruncatedLineReportsLineNumber) {
  TempDir dir("trunc");
  const Dataset d = generate_dataset(small_gen(20));
  {
    std::ofstream os(dir / "t.jsonl");
    os << instance_to_jsonl(d[0]) << '\n';
    const std::string second = instance_to_jsonl(d[1]);
    os << second.substr(0, second.size() / 2) << '\n';
  }
  try {
    read_dataset(dir / "t.jsonl");
    FAIL();
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("t.jsonl:2:"), std::string::npos) << e.what();
  }
  EXPECT_THROW(read_dataset(dir / "absent.jsonl"), std::runtime_error);
}

TEST(Split, WholeGroupsAndExactCounts) {
  const Dataset d = generate_dataset(three_scenarios(10000, 6));
  const auto groups = group_indices(d);
  auto [train, eval] = split_dataset(d, 0.1, 3);
  EXPECT_EQ(train.size() + eval.size(), d.size());
  EXPECT_EQ(group_indices(eval).size(), static_cast<std::size_t>(std::llround(0.1 * groups.size())));
  std::set<GroupKey> train_keys, eval_keys;
  for (const Instance& x : train) train_keys.insert(x.group_key());
  for (const Instance& x : eval) eval_keys.insert(x.group_key());
  for (const GroupKey& k : eval_keys) EXPECT_EQ(train_keys.count(k), 0u);
  EXPECT_EQ(train_keys.size() + eval_keys.size(), groups.size());

  auto [train2, eval2] = split_dataset(d, 0.1, 3);
  EXPECT_EQ(eval, eval2);
  EXPECT_NE(split_dataset(d, 0.1, 4).second, eval);
  EXPECT_THROW(split_dataset(d, 0.0, 1), std::invalid_argument);
  EXPECT_THROW(split_dataset(d, 1.0, 1), std::invalid_argument);
}
