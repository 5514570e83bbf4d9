#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "mdl/data.hpp"

namespace mdl {

/// Probability that a random positive outranks a random negative, ties
/// counting one half. Empty optional when the labels are single-class.
std::optional<double> auc(std::span<const double> scores, std::span<const std::uint8_t> labels);

struct QaucResult {
  double value = 0.0;
  std::size_t valid_groups = 0;
  std::size_t skipped_groups = 0;
};

/// Mean per-group AUC over groups holding both classes. Groups are reduced in
/// sorted key order, so the result does not depend on input order or on the
/// thread count. Throws std::domain_error when no group is valid.
QaucResult qauc(std::span<const double> scores, std::span<const std::uint8_t> labels,
                std::span<const GroupKey> keys, std::size_t threads = 1);

/// Worker count from MDL_THREADS (default 1, minimum 1).
std::size_t eval_threads();

}  // namespace mdl
