#include "mdl/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace mdl::ad {
namespace {

double evaluate(const ScalarFn& fn, const ParamStore& params) {
  Tape tape;
  const NodeId loss = fn(tape, params);
  const double v = tape.value(loss).item();
  if (!std::isfinite(v)) throw std::runtime_error("finite_diff_check: function value is not finite");
  return v;
}

}  // namespace

GradCheckResult finite_diff_report(const ScalarFn& fn, const ParamStore& params, double epsilon) {
  if (!(epsilon > 0.0)) throw std::invalid_argument("finite_diff_check: epsilon must be positive");
  Tape tape;
  const NodeId loss = fn(tape, params);
  if (!std::isfinite(tape.value(loss).item())) {
    throw std::runtime_error("finite_diff_check: function value is not finite");
  }
  const GradientMap grads = tape.backward(loss);

  GradCheckResult result;
  ParamStore probe = params;
  for (const auto& [name, entry] : params.entries()) {
    auto it = grads.find(name);
    for (std::size_t i = 0; i < entry.value.size(); ++i) {
      double& slot = probe.mutable_value(name)[i];
      const double orig = slot;
      slot = orig + epsilon;
      const double up = evaluate(fn, probe);
      slot = orig - epsilon;
      const double down = evaluate(fn, probe);
      slot = orig;
      const double fd = (up - down) / (2.0 * epsilon);
      const double ad = it == grads.end() ? 0.0 : it->second[i];
      const double rel = std::abs(ad - fd) / std::max(1e-8, std::abs(ad) + std::abs(fd));
      ++result.entries_checked;
      if (rel > result.max_rel_error || result.worst_param.empty()) {
        result.max_rel_error = rel;
        result.worst_param = name;
        result.worst_index = i;
        result.worst_autodiff = ad;
        result.worst_numeric = fd;
      }
    }
  }
  return result;
}

}  // namespace mdl::ad
