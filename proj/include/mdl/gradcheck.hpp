#pragma once

#include <functional>
#include <string>

#include "mdl/params.hpp"
#include "mdl/tape.hpp"

namespace mdl::ad {

/// Builds a scalar loss on the given tape from the given parameters.
using ScalarFn = std::function<NodeId(Tape&, const ParamStore&)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_autodiff = 0.0;
  double worst_numeric = 0.0;
  std::size_t entries_checked = 0;
};

/// Central differences over every entry of every parameter, compared with
/// the tape gradient using |ad - fd| / max(1e-8, |ad| + |fd|).
/// Throws if `fn` yields a non-finite value.
GradCheckResult finite_diff_report(const ScalarFn& fn, const ParamStore& params, double epsilon);

inline double finite_diff_check(const ScalarFn& fn, const ParamStore& params, double epsilon) {
  return finite_diff_report(fn, params, epsilon).max_rel_error;
}

}  // namespace mdl::ad
