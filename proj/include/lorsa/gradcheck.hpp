#pragma once

#include <functional>
#include <string>
#include <vector>

#include "lorsa/rng.hpp"
#include "lorsa/tensor.hpp"

namespace lorsa {

struct FdResult {
  double max_rel_err = 0.0;
  size_t worst_param = 0;
  size_t worst_coord = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

// Central-difference verification of hand-derived gradients.
//
// `f` re-evaluates the scalar loss at the current parameter values; the
// checker perturbs coordinates in place and restores them. Checks every
// coordinate when a tensor has at most `max_coords` entries, otherwise a
// deterministic random sample of `max_coords` coordinates.
// Relative error per coordinate: |central - analytic| / (|analytic| + 1e-8).
FdResult finite_difference_check(const std::function<double()>& f,
                                 const std::vector<Tensor*>& params,
                                 const std::vector<const Tensor*>& analytic_grads, double h,
                                 size_t max_coords, Rng& rng);

}  // namespace lorsa
