#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lorsa/task.hpp"
#include "lorsa/tensor.hpp"
#include "lorsa/transformer.hpp"

namespace lorsa {

// Harvested (X, Y) pairs for one attention layer, whole sequences stored
// contiguously. X is the post-layernorm attention input; Y is the MHSA
// output with the output bias stripped, i.e. the pure per-head sum the
// sparse models are trained to predict.
struct ActivationDataset {
  uint32_t layer = 0;
  uint32_t d_model = 0;
  uint32_t seq_len = 0;
  uint64_t seed = 0;
  Dtype dtype = Dtype::f64;

  std::vector<uint32_t> seq_ids;   // per record
  std::vector<uint32_t> positions; // per record
  std::vector<int32_t> token_ids;  // per record
  Tensor X;  // n_records x d_model
  Tensor Y;  // n_records x d_model

  size_t n_records() const { return seq_ids.size(); }
  size_t n_sequences() const { return seq_len ? n_records() / seq_len : 0; }
  // record index of (sequence s, position i)
  size_t index(size_t s, size_t i) const { return s * seq_len + i; }

  // column mean of Y; the FVU denominator baseline
  std::vector<double> y_mean() const;
};

// Streams sequences through the model with capture and collects aligned
// records. Sequences get deterministic per-index rng forks, so the result
// is identical no matter how harvesting is scheduled.
ActivationDataset harvest(const TransformerParams& params, const TaskSpec& task, size_t n_tokens,
                          size_t layer, Rng rng);

// "LORSADS1" file: header then contiguous records; see docs in README.
void write_dataset(const std::string& path, const ActivationDataset& ds);
ActivationDataset read_dataset(const std::string& path);

// Deterministic front/tail split for train/holdout shards.
struct DatasetView {
  const ActivationDataset* ds = nullptr;
  size_t seq_begin = 0;
  size_t seq_end = 0;
  size_t n_sequences() const { return seq_end - seq_begin; }
};

DatasetView train_shard(const ActivationDataset& ds, double holdout_fraction);
DatasetView holdout_shard(const ActivationDataset& ds, double holdout_fraction);

}  // namespace lorsa
