#include "lorsa/gradcheck.hpp"

#include <cmath>
#include <stdexcept>

namespace lorsa {

FdResult finite_difference_check(const std::function<double()>& f,
                                 const std::vector<Tensor*>& params,
                                 const std::vector<const Tensor*>& analytic_grads, double h,
                                 size_t max_coords, Rng& rng) {
  if (h <= 0.0) throw std::invalid_argument("finite_difference_check: h must be positive");
  if (params.size() != analytic_grads.size())
    throw std::invalid_argument("finite_difference_check: param/grad count mismatch");

  FdResult res;
  for (size_t t = 0; t < params.size(); ++t) {
    if (analytic_grads[t] == nullptr) continue;
    Tensor& p = *params[t];
    const Tensor& g = *analytic_grads[t];
    if (!p.same_shape(g))
      throw std::invalid_argument("finite_difference_check: grad shape mismatch");

    std::vector<size_t> coords;
    if (p.size() <= max_coords) {
      coords.resize(p.size());
      for (size_t i = 0; i < p.size(); ++i) coords[i] = i;
    } else {
      coords.reserve(max_coords);
      for (size_t i = 0; i < max_coords; ++i)
        coords.push_back(static_cast<size_t>(rng.randint(p.size())));
    }

    for (size_t i : coords) {
      const double orig = p.data[i];
      p.data[i] = orig + h;
      const double fp = f();
      p.data[i] = orig - h;
      const double fm = f();
      p.data[i] = orig;
      if (!std::isfinite(fp) || !std::isfinite(fm))
        throw std::runtime_error("finite_difference_check: non-finite objective");
      const double numeric = (fp - fm) / (2.0 * h);
      const double rel = std::abs(numeric - g.data[i]) / (std::abs(g.data[i]) + 1e-8);
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst_param = t;
        res.worst_coord = i;
        res.worst_analytic = g.data[i];
        res.worst_numeric = numeric;
      }
    }
  }
  return res;
}

}  // namespace lorsa
