#pragma once

#include <cstddef>
#include <stdexcept>
#include <vector>

#include "uq/tensor.hpp"

namespace uq {

/// Worst offender found by finite_diff_check, kept for diagnostics so a
/// failing check tells you *which* parameter disagreed, not just that one did.
struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t param = 0;   // index into the params vector
  std::size_t entry = 0;   // flat element index within that tensor
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Compares reverse-mode gradients against central finite differences.
///
/// `loss` must recompute the scalar objective from the *current* contents of
/// the parameter buffers — params are perturbed in place (and restored
/// bit-exactly) between calls, which works because Tensor copies share
/// storage. `analytic` holds backward() results in the same order as
/// `params`. Error metric per element: |analytic - central| / (|central| + 1e-8).
template <typename LossFn>
GradCheckReport finite_diff_check(LossFn&& loss, std::vector<Tensor>& params,
                                  const std::vector<Tensor>& analytic,
                                  double h = 1e-5) {
  if (params.size() != analytic.size()) {
    throw std::invalid_argument("finite_diff_check: params/analytic count mismatch");
  }
  GradCheckReport report;
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor& t = params[p];
    if (!t.same_shape(analytic[p])) {
      throw std::invalid_argument("finite_diff_check: gradient shape mismatch at param " +
                                  std::to_string(p));
    }
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double saved = t[i];
      t[i] = saved + h;
      const double up = loss();
      t[i] = saved - h;
      const double down = loss();
      t[i] = saved;
      const double central = (up - down) / (2.0 * h);
      const double rel = std::abs(analytic[p][i] - central) / (std::abs(central) + 1e-8);
      if (rel > report.max_rel_error) {
        report = {rel, p, i, analytic[p][i], central};
      }
    }
  }
  return report;
}

}  // namespace uq
