#pragma once

#include <vector>

#include "lorsa/dataset.hpp"
#include "lorsa/lorsa_layer.hpp"

namespace lorsa {

struct LorsaTrainConfig {
  long steps = 2000;
  size_t batch_positions = 4096;
  double lr = 1e-3;
  double lr_floor = 0.05;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  double holdout_fraction = 0.05;
  long snapshot_every = 50;  // last-good checkpoint cadence for abort recovery
};

struct LorsaTrainResult {
  LorsaParams params;  // normalized
  std::vector<double> loss_curve;
  double final_fvu = 0.0;
  double dead_fraction = 0.0;
  bool aborted_non_finite = false;
  long aborted_at_step = -1;
};

// MSE loss (mean over positions of ||y_hat - Y||^2) and gradients for one
// sequence, accumulated into `grads` (trainable() order). Selection is
// straight-through: gradients flow only to the heads selected in the forward
// pass. Returns the summed (unnormalized) squared error; caller scales by
// `weight` = 1/batch_positions.
double lorsa_loss_and_grads(const LorsaParams& params, const Tensor& X, const Tensor& Y,
                            double weight, std::vector<Tensor>* grads);

double lorsa_fvu(const LorsaParams& params, const DatasetView& view);

// Adam + cosine decay over the dataset's training shard. Initial params come
// from cfg.init_mode (copy modes need `target`). Non-finite loss aborts with
// the last snapshot instead of garbage.
LorsaTrainResult train_lorsa(const LorsaConfig& cfg, const ActivationDataset& dataset,
                             const LorsaTrainConfig& tc, Rng rng,
                             const TransformerParams* target = nullptr, size_t target_layer = 0);

struct HeadFiringStats {
  std::vector<double> frequency;   // fraction of positions the head fired at
  std::vector<double> mean_abs_z;  // mean |z| over firing positions
  std::vector<uint8_t> dead;       // frequency below 1e-5
  double dead_fraction = 0.0;
};

// A head "fires" at a position when it is selected and its activation is
// nonzero, so an always-zero head stays dead even at K = H.
HeadFiringStats head_firing_stats(const LorsaParams& params, const ActivationDataset& dataset);

}  // namespace lorsa
