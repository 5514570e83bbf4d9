#include "mdl/metrics.hpp"

#include <algorithm>
#include <cstdlib>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>
#include <thread>

namespace mdl {

std::optional<double> auc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size()) {
    throw std::invalid_argument("auc: " + std::to_string(scores.size()) + " scores vs " +
                                std::to_string(labels.size()) + " labels");
  }
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // twice the Mann-Whitney U, kept integral
  std::uint64_t u2 = 0, pos = 0, neg = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    std::uint64_t tie_pos = 0, tie_neg = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      (labels[order[j]] ? tie_pos : tie_neg) += 1;
      ++j;
    }
    u2 += tie_pos * (2 * neg + tie_neg);
    pos += tie_pos;
    neg += tie_neg;
    i = j;
  }
  if (pos == 0 || neg == 0) return std::nullopt;
  return static_cast<double>(u2) / (2.0 * static_cast<double>(pos) * static_cast<double>(neg));
}

QaucResult qauc(std::span<const double> scores, std::span<const std::uint8_t> labels,
                std::span<const GroupKey> keys, std::size_t threads) {
  if (scores.size() != labels.size() || scores.size() != keys.size()) {
    throw std::invalid_argument("qauc: scores, labels and group keys differ in length");
  }
  if (scores.empty()) throw std::invalid_argument("qauc: no instances");
  std::map<GroupKey, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < keys.size(); ++i) groups[keys[i]].push_back(i);

  std::vector<const std::vector<std::size_t>*> members;
  members.reserve(groups.size());
  for (const auto& [_, idx] : groups) members.push_back(&idx);
  std::vector<std::optional<double>> per_group(members.size());

  auto work = [&](std::size_t first, std::size_t stride) {
    std::vector<double> s;
    std::vector<std::uint8_t> l;
    for (std::size_t g = first; g < members.size(); g += stride) {
      s.clear();
      l.clear();
      for (std::size_t i : *members[g]) {
        s.push_back(scores[i]);
        l.push_back(labels[i]);
      }
      per_group[g] = auc(s, l);
    }
  };
  threads = std::max<std::size_t>(1, std::min(threads, members.size()));
  if (threads == 1) {
    work(0, 1);
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(work, t, threads);
  }

  QaucResult r;
  double total = 0.0;
  for (const auto& a : per_group) {
    if (a) {
      total += *a;
      ++r.valid_groups;
    } else {
      ++r.skipped_groups;
    }
  }
  if (r.valid_groups == 0) {
    throw std::domain_error("qauc: no valid groups (all " + std::to_string(r.skipped_groups) +
                            " groups are single-class)");
  }
  r.value = total / static_cast<double>(r.valid_groups);
  return r;
}

std::size_t eval_threads() {
  const char* env = std::getenv("MDL_THREADS");
  if (!env || !*env) return 1;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (*end != '\0' || v < 1) return 1;
  return static_cast<std::size_t>(v);
}

}  // namespace mdl
