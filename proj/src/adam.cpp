#include "lorsa/adam.hpp"

#include <cmath>
#include <stdexcept>

namespace lorsa {

AdamState AdamState::init(const std::vector<Tensor*>& params, AdamConfig cfg) {
  AdamState st;
  st.cfg = cfg;
  st.m.reserve(params.size());
  st.v.reserve(params.size());
  for (const Tensor* p : params) {
    st.m.push_back(Tensor::zeros(p->shape));
    st.v.push_back(Tensor::zeros(p->shape));
  }
  return st;
}

void AdamState::apply(const std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads,
                      double lr_scale) {
  if (params.size() != m.size() || grads.size() != m.size())
    throw std::invalid_argument("adam: parameter/gradient count mismatch");
  ++step;
  const double b1 = cfg.beta1, b2 = cfg.beta2;
  const double corr1 = 1.0 - std::pow(b1, static_cast<double>(step));
  const double corr2 = 1.0 - std::pow(b2, static_cast<double>(step));
  const double lr = cfg.lr * lr_scale;
  for (size_t t = 0; t < params.size(); ++t) {
    if (grads[t] == nullptr) continue;
    Tensor& p = *params[t];
    const Tensor& g = *grads[t];
    if (!p.same_shape(g) || !p.same_shape(m[t]))
      throw std::invalid_argument("adam: shape mismatch at parameter " + std::to_string(t));
    double* mp = m[t].data.data();
    double* vp = v[t].data.data();
    double* pp = p.data.data();
    const double* gp = g.data.data();
    const size_t n = p.size();
    for (size_t i = 0; i < n; ++i) {
      mp[i] = b1 * mp[i] + (1.0 - b1) * gp[i];
      vp[i] = b2 * vp[i] + (1.0 - b2) * gp[i] * gp[i];
      const double mhat = mp[i] / corr1;
      const double vhat = vp[i] / corr2;
      pp[i] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

double cosine_lr_scale(long step, long total_steps, double floor) {
  if (total_steps <= 0 || step >= total_steps) return floor;
  const double x = static_cast<double>(step) / static_cast<double>(total_steps);
  return floor + (1.0 - floor) * 0.5 * (1.0 + std::cos(3.14159265358979323846 * x));
}

}  // namespace lorsa
