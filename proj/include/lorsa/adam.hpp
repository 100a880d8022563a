#pragma once

#include <vector>

#include "lorsa/tensor.hpp"

namespace lorsa {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with bias correction over a fixed list of parameter tensors.
// Moment tensors mirror the parameter shapes exactly.
struct AdamState {
  AdamConfig cfg;
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  long step = 0;

  static AdamState init(const std::vector<Tensor*>& params, AdamConfig cfg);

  // One update. lr_scale multiplies cfg.lr (hook for schedules). Parameters
  // with a null grad slot are skipped (frozen).
  void apply(const std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads,
             double lr_scale = 1.0);
};

// Cosine decay from 1 at step 0 to floor at total_steps.
double cosine_lr_scale(long step, long total_steps, double floor = 0.0);

}  // namespace lorsa
