#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "lorsa/rng.hpp"
#include "lorsa/task.hpp"
#include "lorsa/tensor.hpp"

namespace lorsa {

enum class PositionalMode { learned, rope };

struct ModelConfig {
  size_t n_layers = 2;
  size_t d_model = 64;
  size_t n_heads = 4;
  size_t d_head = 16;
  size_t d_mlp = 256;
  size_t vocab_size = 64;
  size_t context_length = 64;
  PositionalMode positional = PositionalMode::learned;
  size_t kv_groups = 1;  // query heads per shared K/V head; 1 = standard MHSA

  size_t n_kv_heads() const { return n_heads / kv_groups; }
  void validate() const;
  std::string to_json() const;
  static ModelConfig from_json(const std::string& json);
};

// Pre-norm decoder block: x -> x + MHSA(LN1(x)) -> x + MLP(LN2(x)), GELU MLP.
struct LayerParams {
  Tensor w_q, b_q;  // d_model x (n_heads*d_head), bias
  Tensor w_k, b_k;  // d_model x (n_kv*d_head)
  Tensor w_v, b_v;
  Tensor w_o, b_o;  // (n_heads*d_head) x d_model, bias d_model
  Tensor ln1_g, ln1_b, ln2_g, ln2_b;
  Tensor mlp_w1, mlp_b1;  // d_model x d_mlp
  Tensor mlp_w2, mlp_b2;  // d_mlp x d_model
};

struct TransformerParams {
  ModelConfig config;
  Tensor embed;      // vocab x d_model
  Tensor pos_embed;  // context x d_model (learned mode; empty under rope)
  std::vector<LayerParams> layers;
  Tensor ln_f_g, ln_f_b;
  Tensor unembed;  // d_model x vocab

  static TransformerParams init(const ModelConfig& cfg, Rng& rng);

  // Fixed traversal order shared by the optimizer, gradients and checkpoints.
  std::vector<Tensor*> trainable();
  std::vector<const Tensor*> trainable() const;
  std::vector<std::pair<std::string, Tensor*>> named();

  void save(const std::string& path) const;
  static TransformerParams load(const std::string& path);
};

// Everything captured about one attention layer during a forward pass.
struct LayerCapture {
  Tensor x_att;     // n x d_model, post-LN1 block input (Lorsa's X)
  Tensor attn_out;  // n x d_model, MHSA output incl. output bias (pre-residual)
  Tensor attn;      // n_heads x n x n attention patterns
  Tensor values;    // n_kv x n x d_head value vectors
  Tensor ctx;       // n x (n_heads*d_head) per-head mixed values before out-proj
};

struct ForwardResult {
  Tensor logits;  // n x vocab
  std::vector<LayerCapture> captures;  // one per layer when capture on
};

ForwardResult transformer_forward(const TransformerParams& params, std::span<const int> tokens,
                                  bool capture, size_t pos_offset = 0);

// Forward where every layer's attention output is supplied externally and the
// residual/MLP path recomputes; the path-patching primitive.
Tensor forward_with_frozen_attn(const TransformerParams& params, std::span<const int> tokens,
                                const std::vector<Tensor>& attn_outputs, size_t pos_offset = 0);

// Additive contribution of one head: ctx^h * (head h's rows of w_o).
// Summing over heads and adding b_o reproduces the layer's attn_out.
Tensor mhsa_head_output(const TransformerParams& params, size_t layer, size_t head,
                        const Tensor& x_att, size_t pos_offset = 0);

// Per-source contribution o_{i,j}^h = A_{i,j}^h * (v_j^h W_o^h) to position i,
// needed by DFA. Computed from a capture.
std::vector<double> mhsa_source_contribution(const TransformerParams& params, size_t layer,
                                             size_t head, const LayerCapture& cap, size_t i,
                                             size_t j);

struct TargetTrainConfig {
  long steps = 2000;
  size_t batch_sequences = 8;
  double lr = 1e-3;
  double lr_floor = 0.1;  // cosine decay floor as a fraction of lr
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  long log_every = 100;
};

struct TrainTargetResult {
  TransformerParams params;
  std::vector<double> loss_curve;  // per-step training cross-entropy
};

// Cross-entropy training on the task with Adam + cosine decay. Throws on
// non-finite loss with a step diagnostic.
TrainTargetResult train_target(const ModelConfig& cfg, const TaskSpec& task,
                               const TargetTrainConfig& tc, Rng rng);

// Gradients of mean next-token cross-entropy; returned in trainable() order.
// Used by the trainer and by the finite-difference suite.
double transformer_loss_and_grads(const TransformerParams& params, std::span<const int> tokens,
                                  std::vector<Tensor>* grads);

double transformer_loss(const TransformerParams& params, std::span<const int> tokens);

struct OccurrenceLoss {
  double first = 0.0;   // mean CE on first-copy positions (unpredictable)
  double second = 0.0;  // mean CE on second-copy positions (copyable)
};

OccurrenceLoss induction_eval(const TransformerParams& params, const TaskSpec& task,
                              size_t n_sequences, Rng rng);

}  // namespace lorsa
