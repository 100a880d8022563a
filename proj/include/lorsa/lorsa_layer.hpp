#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lorsa/rng.hpp"
#include "lorsa/tensor.hpp"
#include "lorsa/transformer.hpp"

namespace lorsa {

enum class LorsaInitMode { random, copy_mhsa_trainable, copy_mhsa_frozen };

LorsaInitMode lorsa_init_mode_from_string(const std::string& s);
std::string to_string(LorsaInitMode m);

struct LorsaConfig {
  size_t heads = 256;        // H
  size_t k = 8;              // max active heads per token
  size_t d_qk = 16;
  size_t binding = 16;       // B: heads per shared QK pair; H/B independent pairs
  size_t d_model = 64;
  size_t context_length = 64;
  bool relu_on_z = true;
  bool qk_bias = false;
  LorsaInitMode init_mode = LorsaInitMode::random;
  PositionalMode positional = PositionalMode::learned;  // rope applies rotary to Q/K

  size_t n_groups() const { return heads / binding; }
  size_t group_of(size_t head) const { return head / binding; }
  void validate() const;
  // Degradation warnings from the hard constraints: d_qk below the target
  // head dimension, or fewer independent QK pairs than target heads.
  std::vector<std::string> hard_constraint_warnings(size_t target_d_head,
                                                    size_t target_n_heads) const;
  std::string to_json() const;
  static LorsaConfig from_json(const std::string& json);
};

struct LorsaParams {
  LorsaConfig config;
  Tensor w_q;  // n_groups x d_model x d_qk
  Tensor w_k;  // n_groups x d_model x d_qk
  Tensor b_q;  // n_groups x d_qk (zero-sized when !qk_bias)
  Tensor b_k;
  Tensor w_v;  // H x d_model
  Tensor b_v;  // H
  Tensor w_o;  // H x d_model
  std::vector<uint8_t> dead;  // set by normalize_heads; excluded from selection
  bool qk_frozen = false;

  static LorsaParams init(const LorsaConfig& cfg, Rng& rng);

  std::vector<Tensor*> trainable();
  std::vector<const Tensor*> trainable() const;

  const double* group_wq(size_t g) const { return w_q.data.data() + g * config.d_model * config.d_qk; }
  const double* group_wk(size_t g) const { return w_k.data.data() + g * config.d_model * config.d_qk; }

  void save(const std::string& path) const;  // "LORSAWT1", stored normalized
  static LorsaParams load(const std::string& path);
};

struct LorsaForwardTrace {
  Tensor attn;    // n_groups x n x n causal patterns, shared within a group
  Tensor q_rot, k_rot;  // n_groups x n x d_qk projections (post-rotary)
  Tensor values;  // H x n, v^h_j = X_j . w_v^h + b_v^h
  Tensor z_pre;   // n x H, pre-ReLU activations
  Tensor z;       // n x H, post-ReLU when relu_on_z (else == z_pre)
  std::vector<std::vector<uint32_t>> selected;  // per position, descending salience
  Tensor y_hat;   // n x d_model

  bool is_selected(size_t pos, size_t head) const;
};

// Algorithm core: per group A = causal softmax(Q K^T / sqrt(d_qk)) (rotary
// applied under rope mode), per head z = A v, then ReLU, then per position
// keep the K most salient heads. Salience is z * ||w_o||, which coincides
// with z itself on normalized checkpoints and makes selection invariant
// under normalize_heads. Ties break toward the lowest head index.
LorsaForwardTrace lorsa_forward(const LorsaParams& params, const Tensor& X,
                                size_t pos_offset = 0);

// Folds ||w_o|| into (w_v, b_v) per the activation/direction split, leaving
// predictions unchanged. Heads with ||w_o|| < 1e-12 are flagged dead and
// their direction left alone. Idempotent.
void normalize_heads(LorsaParams& params);

// QK groups tiled from the target layer's MHSA heads (cyclically when there
// are more groups than heads); value/output vectors random. Copy modes carry
// the target's QK biases. Frozen mode marks QK non-trainable.
LorsaParams init_from_mhsa(const LorsaConfig& cfg, const TransformerParams& target, size_t layer,
                           LorsaInitMode mode, Rng& rng);

}  // namespace lorsa
