#include "lorsa/dataset.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace lorsa {

namespace {

constexpr char kMagic[9] = "LORSADS1";
constexpr uint32_t kFlagPostLayerNormX = 1u << 0;
constexpr uint32_t kFlagBiasStrippedY = 1u << 1;

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T take(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("dataset file: truncated");
  return v;
}

}  // namespace

std::vector<double> ActivationDataset::y_mean() const {
  std::vector<double> mu(d_model, 0.0);
  const size_t n = n_records();
  for (size_t r = 0; r < n; ++r) {
    const double* y = Y.row_ptr(r);
    for (size_t j = 0; j < d_model; ++j) mu[j] += y[j];
  }
  for (double& v : mu) v /= static_cast<double>(n);
  return mu;
}

ActivationDataset harvest(const TransformerParams& params, const TaskSpec& task, size_t n_tokens,
                          size_t layer, Rng rng) {
  if (n_tokens < 1) throw std::invalid_argument("harvest: n_tokens must be >= 1");
  if (layer >= params.config.n_layers) throw std::invalid_argument("harvest: bad layer");
  task.validate(params.config.vocab_size, params.config.context_length);

  const size_t seq_len = task.seq_len;
  const size_t n_seqs = (n_tokens + seq_len - 1) / seq_len;
  const size_t d = params.config.d_model;

  ActivationDataset ds;
  ds.layer = static_cast<uint32_t>(layer);
  ds.d_model = static_cast<uint32_t>(d);
  ds.seq_len = static_cast<uint32_t>(seq_len);
  ds.seed = rng.seed();
  const size_t n_rec = n_seqs * seq_len;
  ds.seq_ids.reserve(n_rec);
  ds.positions.reserve(n_rec);
  ds.token_ids.reserve(n_rec);
  ds.X = Tensor({n_rec, d});
  ds.Y = Tensor({n_rec, d});

  const Tensor& b_o = params.layers[layer].b_o;
  for (size_t s = 0; s < n_seqs; ++s) {
    Rng srng = rng.fork(s);
    SequenceSample seq = sample_sequence(task, srng);
    ForwardResult fr = transformer_forward(params, seq.tokens, true);
    const LayerCapture& cap = fr.captures[layer];
    for (size_t i = 0; i < seq_len; ++i) {
      const size_t r = ds.seq_ids.size();
      ds.seq_ids.push_back(static_cast<uint32_t>(s));
      ds.positions.push_back(static_cast<uint32_t>(i));
      ds.token_ids.push_back(seq.tokens[i]);
      std::memcpy(ds.X.row_ptr(r), cap.x_att.row_ptr(i), d * sizeof(double));
      double* y = ds.Y.row_ptr(r);
      const double* src = cap.attn_out.row_ptr(i);
      for (size_t j = 0; j < d; ++j) y[j] = src[j] - b_o[j];
    }
  }
  return ds;
}

void write_dataset(const std::string& path, const ActivationDataset& ds) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open " + tmp);
    os.write(kMagic, 8);
    put<uint32_t>(os, 1);  // header version
    put<uint32_t>(os, ds.layer);
    put<uint32_t>(os, ds.d_model);
    put<uint64_t>(os, ds.n_records());
    put<uint32_t>(os, static_cast<uint32_t>(ds.dtype));
    put<uint64_t>(os, ds.seed);
    put<uint32_t>(os, ds.seq_len);
    put<uint32_t>(os, kFlagPostLayerNormX | kFlagBiasStrippedY);
    const size_t d = ds.d_model;
    for (size_t r = 0; r < ds.n_records(); ++r) {
      put<uint32_t>(os, ds.seq_ids[r]);
      put<uint32_t>(os, ds.positions[r]);
      put<int32_t>(os, ds.token_ids[r]);
      if (ds.dtype == Dtype::f64) {
        os.write(reinterpret_cast<const char*>(ds.X.row_ptr(r)),
                 static_cast<std::streamsize>(d * sizeof(double)));
        os.write(reinterpret_cast<const char*>(ds.Y.row_ptr(r)),
                 static_cast<std::streamsize>(d * sizeof(double)));
      } else {
        std::vector<float> fx(d), fy(d);
        for (size_t j = 0; j < d; ++j) {
          fx[j] = static_cast<float>(ds.X.row_ptr(r)[j]);
          fy[j] = static_cast<float>(ds.Y.row_ptr(r)[j]);
        }
        os.write(reinterpret_cast<const char*>(fx.data()),
                 static_cast<std::streamsize>(d * sizeof(float)));
        os.write(reinterpret_cast<const char*>(fy.data()),
                 static_cast<std::streamsize>(d * sizeof(float)));
      }
    }
    if (!os) {
      std::remove(tmp.c_str());
      throw std::runtime_error("dataset write failed for " + tmp);
    }
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    std::remove(tmp.c_str());
    throw std::runtime_error("cannot rename " + tmp + " to " + path);
  }
}

ActivationDataset read_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kMagic, 8) != 0)
    throw std::runtime_error("dataset file: bad magic in " + path);
  const uint32_t version = take<uint32_t>(is);
  if (version != 1) throw std::runtime_error("dataset file: unsupported version");
  ActivationDataset ds;
  ds.layer = take<uint32_t>(is);
  ds.d_model = take<uint32_t>(is);
  const uint64_t n_rec = take<uint64_t>(is);
  ds.dtype = static_cast<Dtype>(take<uint32_t>(is));
  ds.seed = take<uint64_t>(is);
  ds.seq_len = take<uint32_t>(is);
  take<uint32_t>(is);  // flags (informational)
  const size_t d = ds.d_model;
  ds.seq_ids.resize(n_rec);
  ds.positions.resize(n_rec);
  ds.token_ids.resize(n_rec);
  ds.X = Tensor({n_rec, d});
  ds.Y = Tensor({n_rec, d});
  for (size_t r = 0; r < n_rec; ++r) {
    ds.seq_ids[r] = take<uint32_t>(is);
    ds.positions[r] = take<uint32_t>(is);
    ds.token_ids[r] = take<int32_t>(is);
    if (ds.dtype == Dtype::f64) {
      is.read(reinterpret_cast<char*>(ds.X.row_ptr(r)),
              static_cast<std::streamsize>(d * sizeof(double)));
      is.read(reinterpret_cast<char*>(ds.Y.row_ptr(r)),
              static_cast<std::streamsize>(d * sizeof(double)));
    } else {
      std::vector<float> fx(d), fy(d);
      is.read(reinterpret_cast<char*>(fx.data()), static_cast<std::streamsize>(d * sizeof(float)));
      is.read(reinterpret_cast<char*>(fy.data()), static_cast<std::streamsize>(d * sizeof(float)));
      for (size_t j = 0; j < d; ++j) {
        ds.X.row_ptr(r)[j] = fx[j];
        ds.Y.row_ptr(r)[j] = fy[j];
      }
    }
    if (!is) throw std::runtime_error("dataset file: truncated records");
  }
  return ds;
}

DatasetView train_shard(const ActivationDataset& ds, double holdout_fraction) {
  const size_t n = ds.n_sequences();
  size_t hold = static_cast<size_t>(static_cast<double>(n) * holdout_fraction);
  if (hold >= n) hold = n > 1 ? n - 1 : 0;
  return {&ds, 0, n - hold};
}

DatasetView holdout_shard(const ActivationDataset& ds, double holdout_fraction) {
  const size_t n = ds.n_sequences();
  size_t hold = static_cast<size_t>(static_cast<double>(n) * holdout_fraction);
  if (hold >= n) hold = n > 1 ? n - 1 : 0;
  if (hold == 0) return {&ds, 0, n};  // degenerate: eval on everything
  return {&ds, n - hold, n};
}

}  // namespace lorsa
