#include "lorsa/transformer.hpp"

#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>

#include "lorsa/adam.hpp"
#include "lorsa/checkpoint.hpp"
#include "json.hpp"

namespace lorsa {

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kRopeBase = 10000.0;

void layer_norm_forward(const Tensor& x, const Tensor& g, const Tensor& b, Tensor& out,
                        Tensor& mean, Tensor& rstd) {
  const size_t n = x.shape[0], d = x.shape[1];
  out = Tensor({n, d});
  mean = Tensor({n});
  rstd = Tensor({n});
  for (size_t i = 0; i < n; ++i) {
    const double* xi = x.row_ptr(i);
    double mu = 0.0;
    for (size_t j = 0; j < d; ++j) mu += xi[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (size_t j = 0; j < d; ++j) var += (xi[j] - mu) * (xi[j] - mu);
    var /= static_cast<double>(d);
    const double rs = 1.0 / std::sqrt(var + kLnEps);
    mean[i] = mu;
    rstd[i] = rs;
    double* oi = out.row_ptr(i);
    for (size_t j = 0; j < d; ++j) oi[j] = g[j] * ((xi[j] - mu) * rs) + b[j];
  }
}

void layer_norm_backward(const Tensor& dout, const Tensor& x, const Tensor& g, const Tensor& mean,
                         const Tensor& rstd, Tensor& dx_accum, Tensor& dg, Tensor& db) {
  const size_t n = x.shape[0], d = x.shape[1];
  for (size_t i = 0; i < n; ++i) {
    const double* xi = x.row_ptr(i);
    const double* doi = dout.row_ptr(i);
    const double mu = mean[i], rs = rstd[i];
    double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
    for (size_t j = 0; j < d; ++j) {
      const double xhat = (xi[j] - mu) * rs;
      const double dxhat = doi[j] * g[j];
      dg[j] += doi[j] * xhat;
      db[j] += doi[j];
      mean_dxhat += dxhat;
      mean_dxhat_xhat += dxhat * xhat;
    }
    mean_dxhat /= static_cast<double>(d);
    mean_dxhat_xhat /= static_cast<double>(d);
    double* dxi = dx_accum.row_ptr(i);
    for (size_t j = 0; j < d; ++j) {
      const double xhat = (xi[j] - mu) * rs;
      const double dxhat = doi[j] * g[j];
      dxi[j] += rs * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
    }
  }
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

double gelu_grad(double x) {
  const double phi = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
  return 0.5 * (1.0 + std::erf(x * M_SQRT1_2)) + x * phi;
}

// In-place rotary transform of per-head dim pairs. `transpose` applies the
// inverse rotation (backward pass).
void rope_apply(Tensor& mat, size_t n_heads, size_t d_head, size_t pos_offset, bool transpose) {
  const size_t n = mat.shape[0];
  for (size_t i = 0; i < n; ++i) {
    double* row = mat.row_ptr(i);
    const double pos = static_cast<double>(i + pos_offset);
    for (size_t h = 0; h < n_heads; ++h) {
      double* hp = row + h * d_head;
      for (size_t t = 0; 2 * t + 1 < d_head; ++t) {
        const double theta = pos * std::pow(kRopeBase, -2.0 * static_cast<double>(t) /
                                                           static_cast<double>(d_head));
        const double c = std::cos(theta);
        const double s = transpose ? -std::sin(theta) : std::sin(theta);
        const double a = hp[2 * t], b = hp[2 * t + 1];
        hp[2 * t] = a * c - b * s;
        hp[2 * t + 1] = a * s + b * c;
      }
    }
  }
}

void add_bias_rows(Tensor& m, const Tensor& bias) {
  const size_t n = m.shape[0], d = m.shape[1];
  for (size_t i = 0; i < n; ++i) {
    double* r = m.row_ptr(i);
    for (size_t j = 0; j < d; ++j) r[j] += bias[j];
  }
}

struct LayerState {
  Tensor x_in;
  Tensor ln1_mean, ln1_rstd;
  Tensor x_att;
  Tensor q, k, v;          // pre-rope projections
  Tensor q_rot, k_rot;     // post-rope (same as q,k under learned positions)
  Tensor attn;             // n_heads x n x n
  Tensor ctx;              // n x (n_heads*d_head)
  Tensor attn_out;         // incl. output bias
  Tensor resid_mid;
  Tensor ln2_mean, ln2_rstd;
  Tensor x_mlp;
  Tensor mlp_pre, mlp_act;
  Tensor resid_out;
};

struct ForwardState {
  Tensor h0;
  std::vector<LayerState> layers;
  Tensor ln_f_mean, ln_f_rstd;
  Tensor x_f;
  Tensor logits;
};

void attention_scores_and_probs(const Tensor& q_rot, const Tensor& k_rot, size_t n_heads,
                                size_t kv_groups, size_t d_head, Tensor& attn) {
  const size_t n = q_rot.shape[0];
  attn = Tensor({n_heads, n, n});
  const double scale = 1.0 / std::sqrt(static_cast<double>(d_head));
  for (size_t h = 0; h < n_heads; ++h) {
    const size_t kh = h / kv_groups;
    double* a = attn.data.data() + h * n * n;
    for (size_t i = 0; i < n; ++i) {
      const double* qi = q_rot.row_ptr(i) + h * d_head;
      for (size_t j = 0; j <= i; ++j) {
        const double* kj = k_rot.row_ptr(j) + kh * d_head;
        double s = 0.0;
        for (size_t t = 0; t < d_head; ++t) s += qi[t] * kj[t];
        a[i * n + j] = s * scale;
      }
    }
    // row softmax over j<=i
    for (size_t i = 0; i < n; ++i) {
      double* row = a + i * n;
      double mx = row[0];
      for (size_t j = 1; j <= i; ++j) mx = std::max(mx, row[j]);
      double denom = 0.0;
      for (size_t j = 0; j <= i; ++j) {
        row[j] = std::exp(row[j] - mx);
        denom += row[j];
      }
      for (size_t j = 0; j <= i; ++j) row[j] /= denom;
      for (size_t j = i + 1; j < n; ++j) row[j] = 0.0;
    }
  }
}

ForwardState run_forward(const TransformerParams& p, std::span<const int> tokens,
                         size_t pos_offset) {
  const ModelConfig& cfg = p.config;
  const size_t n = tokens.size();
  if (n == 0 || n > cfg.context_length)
    throw std::invalid_argument("forward: sequence length out of range");
  for (int t : tokens)
    if (t < 0 || static_cast<size_t>(t) >= cfg.vocab_size)
      throw std::invalid_argument("forward: token id outside vocab");
  if (cfg.positional == PositionalMode::learned && pos_offset + n > cfg.context_length)
    throw std::invalid_argument("forward: position offset overruns learned table");

  const size_t d = cfg.d_model, dh = cfg.d_head;
  const size_t hq = cfg.n_heads, hkv = cfg.n_kv_heads();

  ForwardState st;
  st.h0 = Tensor({n, d});
  for (size_t i = 0; i < n; ++i) {
    const double* e = p.embed.row_ptr(static_cast<size_t>(tokens[i]));
    double* r = st.h0.row_ptr(i);
    std::memcpy(r, e, d * sizeof(double));
    if (cfg.positional == PositionalMode::learned) {
      const double* pe = p.pos_embed.row_ptr(i + pos_offset);
      for (size_t j = 0; j < d; ++j) r[j] += pe[j];
    }
  }

  Tensor h = st.h0;
  st.layers.resize(cfg.n_layers);
  for (size_t l = 0; l < cfg.n_layers; ++l) {
    LayerState& ls = st.layers[l];
    const LayerParams& lp = p.layers[l];
    ls.x_in = h;
    layer_norm_forward(ls.x_in, lp.ln1_g, lp.ln1_b, ls.x_att, ls.ln1_mean, ls.ln1_rstd);

    ls.q = matmul(ls.x_att, lp.w_q);
    add_bias_rows(ls.q, lp.b_q);
    ls.k = matmul(ls.x_att, lp.w_k);
    add_bias_rows(ls.k, lp.b_k);
    ls.v = matmul(ls.x_att, lp.w_v);
    add_bias_rows(ls.v, lp.b_v);

    ls.q_rot = ls.q;
    ls.k_rot = ls.k;
    if (cfg.positional == PositionalMode::rope) {
      rope_apply(ls.q_rot, hq, dh, pos_offset, false);
      rope_apply(ls.k_rot, hkv, dh, pos_offset, false);
    }

    attention_scores_and_probs(ls.q_rot, ls.k_rot, hq, cfg.kv_groups, dh, ls.attn);

    ls.ctx = Tensor({n, hq * dh});
    for (size_t h2 = 0; h2 < hq; ++h2) {
      const size_t kh = h2 / cfg.kv_groups;
      const double* a = ls.attn.data.data() + h2 * n * n;
      for (size_t i = 0; i < n; ++i) {
        double* ci = ls.ctx.row_ptr(i) + h2 * dh;
        for (size_t j = 0; j <= i; ++j) {
          const double aij = a[i * n + j];
          if (aij == 0.0) continue;
          const double* vj = ls.v.row_ptr(j) + kh * dh;
          for (size_t t = 0; t < dh; ++t) ci[t] += aij * vj[t];
        }
      }
    }

    ls.attn_out = matmul(ls.ctx, lp.w_o);
    add_bias_rows(ls.attn_out, lp.b_o);

    ls.resid_mid = ls.x_in;
    for (size_t i = 0; i < n * d; ++i) ls.resid_mid.data[i] += ls.attn_out.data[i];

    layer_norm_forward(ls.resid_mid, lp.ln2_g, lp.ln2_b, ls.x_mlp, ls.ln2_mean, ls.ln2_rstd);
    ls.mlp_pre = matmul(ls.x_mlp, lp.mlp_w1);
    add_bias_rows(ls.mlp_pre, lp.mlp_b1);
    ls.mlp_act = Tensor({n, cfg.d_mlp});
    for (size_t i = 0; i < n * cfg.d_mlp; ++i) ls.mlp_act.data[i] = gelu(ls.mlp_pre.data[i]);
    Tensor mlp_out = matmul(ls.mlp_act, lp.mlp_w2);
    add_bias_rows(mlp_out, lp.mlp_b2);

    ls.resid_out = ls.resid_mid;
    for (size_t i = 0; i < n * d; ++i) ls.resid_out.data[i] += mlp_out.data[i];
    h = ls.resid_out;
  }

  layer_norm_forward(h, p.ln_f_g, p.ln_f_b, st.x_f, st.ln_f_mean, st.ln_f_rstd);
  st.logits = matmul(st.x_f, p.unembed);
  return st;
}

double cross_entropy_and_dlogits(const Tensor& logits, std::span<const int> tokens,
                                 Tensor* dlogits) {
  const size_t n = logits.shape[0], V = logits.shape[1];
  if (n < 2) throw std::invalid_argument("cross entropy needs at least 2 tokens");
  if (dlogits) *dlogits = Tensor({n, V});
  const double w = 1.0 / static_cast<double>(n - 1);
  double loss = 0.0;
  std::vector<double> probs(V);
  for (size_t i = 0; i + 1 < n; ++i) {
    const double* li = logits.row_ptr(i);
    double mx = li[0];
    for (size_t j = 1; j < V; ++j) mx = std::max(mx, li[j]);
    double denom = 0.0;
    for (size_t j = 0; j < V; ++j) {
      probs[j] = std::exp(li[j] - mx);
      denom += probs[j];
    }
    const int target = tokens[i + 1];
    loss += -std::log(probs[static_cast<size_t>(target)] / denom) * w;
    if (dlogits) {
      double* dli = dlogits->row_ptr(i);
      for (size_t j = 0; j < V; ++j) dli[j] = probs[j] / denom * w;
      dli[static_cast<size_t>(target)] -= w;
    }
  }
  return loss;
}

// dC = dOut * B^T ; dB += A^T * dOut, for Out = A*B.
void matmul_backward(const Tensor& a, const Tensor& b, const Tensor& dout, Tensor* da,
                     Tensor* db) {
  const size_t n = a.shape[0], k = a.shape[1], m = b.shape[1];
  if (da) {
    for (size_t i = 0; i < n; ++i) {
      const double* drow = dout.row_ptr(i);
      double* darow = da->row_ptr(i);
      for (size_t p = 0; p < k; ++p) {
        const double* brow = b.row_ptr(p);
        double s = 0.0;
        for (size_t j = 0; j < m; ++j) s += drow[j] * brow[j];
        darow[p] += s;
      }
    }
  }
  if (db) {
    for (size_t i = 0; i < n; ++i) {
      const double* arow = a.row_ptr(i);
      const double* drow = dout.row_ptr(i);
      for (size_t p = 0; p < k; ++p) {
        const double av = arow[p];
        if (av == 0.0) continue;
        double* dbrow = db->row_ptr(p);
        for (size_t j = 0; j < m; ++j) dbrow[j] += av * drow[j];
      }
    }
  }
}

void bias_backward(const Tensor& dout, Tensor& dbias) {
  const size_t n = dout.shape[0], d = dout.shape[1];
  for (size_t i = 0; i < n; ++i) {
    const double* r = dout.row_ptr(i);
    for (size_t j = 0; j < d; ++j) dbias[j] += r[j];
  }
}

struct GradRefs {
  Tensor* embed;
  Tensor* pos_embed;
  struct L {
    Tensor *w_q, *b_q, *w_k, *b_k, *w_v, *b_v, *w_o, *b_o;
    Tensor *ln1_g, *ln1_b, *ln2_g, *ln2_b;
    Tensor *mlp_w1, *mlp_b1, *mlp_w2, *mlp_b2;
  };
  std::vector<L> layers;
  Tensor *ln_f_g, *ln_f_b, *unembed;
};

GradRefs map_grads(const TransformerParams& p, std::vector<Tensor>& grads) {
  // must mirror TransformerParams::trainable() exactly
  GradRefs r;
  size_t idx = 0;
  r.embed = &grads[idx++];
  r.pos_embed = (p.config.positional == PositionalMode::learned) ? &grads[idx++] : nullptr;
  r.layers.resize(p.config.n_layers);
  for (size_t l = 0; l < p.config.n_layers; ++l) {
    auto& g = r.layers[l];
    g.w_q = &grads[idx++]; g.b_q = &grads[idx++];
    g.w_k = &grads[idx++]; g.b_k = &grads[idx++];
    g.w_v = &grads[idx++]; g.b_v = &grads[idx++];
    g.w_o = &grads[idx++]; g.b_o = &grads[idx++];
    g.ln1_g = &grads[idx++]; g.ln1_b = &grads[idx++];
    g.ln2_g = &grads[idx++]; g.ln2_b = &grads[idx++];
    g.mlp_w1 = &grads[idx++]; g.mlp_b1 = &grads[idx++];
    g.mlp_w2 = &grads[idx++]; g.mlp_b2 = &grads[idx++];
  }
  r.ln_f_g = &grads[idx++];
  r.ln_f_b = &grads[idx++];
  r.unembed = &grads[idx++];
  return r;
}

}  // namespace

void ModelConfig::validate() const {
  if (n_layers == 0 || d_model == 0 || n_heads == 0 || d_head == 0 || vocab_size == 0 ||
      context_length == 0)
    throw std::invalid_argument("model config: zero extent");
  if (n_heads * d_head != d_model)
    throw std::invalid_argument("model config: n_heads * d_head must equal d_model");
  if (kv_groups == 0 || n_heads % kv_groups != 0)
    throw std::invalid_argument("model config: kv grouping factor must divide n_heads");
}

std::string ModelConfig::to_json() const {
  nlohmann::json j;
  j["n_layers"] = n_layers;
  j["d_model"] = d_model;
  j["n_heads"] = n_heads;
  j["d_head"] = d_head;
  j["d_mlp"] = d_mlp;
  j["vocab_size"] = vocab_size;
  j["context_length"] = context_length;
  j["positional"] = positional == PositionalMode::rope ? "rope" : "learned";
  j["kv_groups"] = kv_groups;
  return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& json) {
  const auto j = nlohmann::json::parse(json);
  ModelConfig c;
  c.n_layers = j.at("n_layers");
  c.d_model = j.at("d_model");
  c.n_heads = j.at("n_heads");
  c.d_head = j.at("d_head");
  c.d_mlp = j.at("d_mlp");
  c.vocab_size = j.at("vocab_size");
  c.context_length = j.at("context_length");
  c.positional =
      j.at("positional") == "rope" ? PositionalMode::rope : PositionalMode::learned;
  c.kv_groups = j.at("kv_groups");
  c.validate();
  return c;
}

TransformerParams TransformerParams::init(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  TransformerParams p;
  p.config = cfg;
  const size_t d = cfg.d_model;
  const double wstd = 1.0 / std::sqrt(static_cast<double>(d));
  const double ostd = wstd / std::sqrt(2.0 * static_cast<double>(cfg.n_layers));

  auto randn = [&rng](std::vector<size_t> shape, double std) {
    Tensor t(std::move(shape));
    for (double& x : t.data) x = rng.normal(0.0, std);
    return t;
  };

  p.embed = randn({cfg.vocab_size, d}, wstd);
  if (cfg.positional == PositionalMode::learned)
    p.pos_embed = randn({cfg.context_length, d}, 0.5 * wstd);
  p.layers.resize(cfg.n_layers);
  const size_t hq = cfg.n_heads * cfg.d_head;
  const size_t hkv = cfg.n_kv_heads() * cfg.d_head;
  for (auto& lp : p.layers) {
    lp.w_q = randn({d, hq}, wstd);
    lp.b_q = Tensor({hq});
    lp.w_k = randn({d, hkv}, wstd);
    lp.b_k = Tensor({hkv});
    lp.w_v = randn({d, hkv}, wstd);
    lp.b_v = Tensor({hkv});
    lp.w_o = randn({hq, d}, ostd);
    lp.b_o = Tensor({d});
    lp.ln1_g = Tensor({d});
    lp.ln1_g.fill(1.0);
    lp.ln1_b = Tensor({d});
    lp.ln2_g = Tensor({d});
    lp.ln2_g.fill(1.0);
    lp.ln2_b = Tensor({d});
    lp.mlp_w1 = randn({d, cfg.d_mlp}, wstd);
    lp.mlp_b1 = Tensor({cfg.d_mlp});
    lp.mlp_w2 = randn({cfg.d_mlp, d}, ostd / std::sqrt(static_cast<double>(cfg.d_mlp) /
                                                       static_cast<double>(d)));
    lp.mlp_b2 = Tensor({d});
  }
  p.ln_f_g = Tensor({d});
  p.ln_f_g.fill(1.0);
  p.ln_f_b = Tensor({d});
  p.unembed = randn({d, cfg.vocab_size}, wstd);
  return p;
}

std::vector<Tensor*> TransformerParams::trainable() {
  std::vector<Tensor*> out;
  out.push_back(&embed);
  if (config.positional == PositionalMode::learned) out.push_back(&pos_embed);
  for (auto& lp : layers) {
    out.push_back(&lp.w_q); out.push_back(&lp.b_q);
    out.push_back(&lp.w_k); out.push_back(&lp.b_k);
    out.push_back(&lp.w_v); out.push_back(&lp.b_v);
    out.push_back(&lp.w_o); out.push_back(&lp.b_o);
    out.push_back(&lp.ln1_g); out.push_back(&lp.ln1_b);
    out.push_back(&lp.ln2_g); out.push_back(&lp.ln2_b);
    out.push_back(&lp.mlp_w1); out.push_back(&lp.mlp_b1);
    out.push_back(&lp.mlp_w2); out.push_back(&lp.mlp_b2);
  }
  out.push_back(&ln_f_g);
  out.push_back(&ln_f_b);
  out.push_back(&unembed);
  return out;
}

std::vector<const Tensor*> TransformerParams::trainable() const {
  auto mut = const_cast<TransformerParams*>(this)->trainable();
  return std::vector<const Tensor*>(mut.begin(), mut.end());
}

std::vector<std::pair<std::string, Tensor*>> TransformerParams::named() {
  std::vector<std::pair<std::string, Tensor*>> out;
  out.emplace_back("embed", &embed);
  if (config.positional == PositionalMode::learned) out.emplace_back("pos_embed", &pos_embed);
  for (size_t l = 0; l < layers.size(); ++l) {
    auto& lp = layers[l];
    const std::string pre = "layer" + std::to_string(l) + ".";
    out.emplace_back(pre + "w_q", &lp.w_q); out.emplace_back(pre + "b_q", &lp.b_q);
    out.emplace_back(pre + "w_k", &lp.w_k); out.emplace_back(pre + "b_k", &lp.b_k);
    out.emplace_back(pre + "w_v", &lp.w_v); out.emplace_back(pre + "b_v", &lp.b_v);
    out.emplace_back(pre + "w_o", &lp.w_o); out.emplace_back(pre + "b_o", &lp.b_o);
    out.emplace_back(pre + "ln1_g", &lp.ln1_g); out.emplace_back(pre + "ln1_b", &lp.ln1_b);
    out.emplace_back(pre + "ln2_g", &lp.ln2_g); out.emplace_back(pre + "ln2_b", &lp.ln2_b);
    out.emplace_back(pre + "mlp_w1", &lp.mlp_w1); out.emplace_back(pre + "mlp_b1", &lp.mlp_b1);
    out.emplace_back(pre + "mlp_w2", &lp.mlp_w2); out.emplace_back(pre + "mlp_b2", &lp.mlp_b2);
  }
  out.emplace_back("ln_f_g", &ln_f_g);
  out.emplace_back("ln_f_b", &ln_f_b);
  out.emplace_back("unembed", &unembed);
  return out;
}

void TransformerParams::save(const std::string& path) const {
  TensorFile f;
  f.magic = "LORSACK1";
  f.config_json = config.to_json();
  auto named_list = const_cast<TransformerParams*>(this)->named();
  for (auto& [name, t] : named_list) f.add(name, *t);
  write_tensor_file(path, f);
}

TransformerParams TransformerParams::load(const std::string& path) {
  TensorFile f = read_tensor_file(path, "LORSACK1");
  ModelConfig cfg = ModelConfig::from_json(f.config_json);
  Rng dummy(0);
  TransformerParams p = TransformerParams::init(cfg, dummy);
  for (auto& [name, t] : p.named()) *t = f.get(name);
  return p;
}

ForwardResult transformer_forward(const TransformerParams& params, std::span<const int> tokens,
                                  bool capture, size_t pos_offset) {
  ForwardState st = run_forward(params, tokens, pos_offset);
  ForwardResult out;
  out.logits = std::move(st.logits);
  ensure_finite(out.logits, "transformer logits");
  if (capture) {
    out.captures.reserve(params.config.n_layers);
    for (auto& ls : st.layers) {
      LayerCapture c;
      c.x_att = std::move(ls.x_att);
      c.attn_out = std::move(ls.attn_out);
      c.attn = std::move(ls.attn);
      c.ctx = std::move(ls.ctx);
      // regroup values per kv head for DFA consumers
      const size_t n = c.x_att.shape[0];
      const size_t hkv = params.config.n_kv_heads(), dh = params.config.d_head;
      c.values = Tensor({hkv, n, dh});
      for (size_t kh = 0; kh < hkv; ++kh)
        for (size_t j = 0; j < n; ++j)
          std::memcpy(c.values.data.data() + (kh * n + j) * dh, ls.v.row_ptr(j) + kh * dh,
                      dh * sizeof(double));
      out.captures.push_back(std::move(c));
    }
  }
  return out;
}

Tensor forward_with_frozen_attn(const TransformerParams& p, std::span<const int> tokens,
                                const std::vector<Tensor>& attn_outputs, size_t pos_offset) {
  const ModelConfig& cfg = p.config;
  if (attn_outputs.size() != cfg.n_layers)
    throw std::invalid_argument("frozen forward: need one attention output per layer");
  const size_t n = tokens.size(), d = cfg.d_model;

  Tensor h({n, d});
  for (size_t i = 0; i < n; ++i) {
    const double* e = p.embed.row_ptr(static_cast<size_t>(tokens[i]));
    double* r = h.row_ptr(i);
    std::memcpy(r, e, d * sizeof(double));
    if (cfg.positional == PositionalMode::learned) {
      const double* pe = p.pos_embed.row_ptr(i + pos_offset);
      for (size_t j = 0; j < d; ++j) r[j] += pe[j];
    }
  }

  Tensor mean, rstd, x;
  for (size_t l = 0; l < cfg.n_layers; ++l) {
    const LayerParams& lp = p.layers[l];
    for (size_t i = 0; i < n * d; ++i) h.data[i] += attn_outputs[l].data[i];
    layer_norm_forward(h, lp.ln2_g, lp.ln2_b, x, mean, rstd);
    Tensor pre = matmul(x, lp.mlp_w1);
    add_bias_rows(pre, lp.mlp_b1);
    for (double& v : pre.data) v = gelu(v);
    Tensor mlp_out = matmul(pre, lp.mlp_w2);
    add_bias_rows(mlp_out, lp.mlp_b2);
    for (size_t i = 0; i < n * d; ++i) h.data[i] += mlp_out.data[i];
  }
  layer_norm_forward(h, p.ln_f_g, p.ln_f_b, x, mean, rstd);
  return matmul(x, p.unembed);
}

Tensor mhsa_head_output(const TransformerParams& p, size_t layer, size_t head,
                        const Tensor& x_att, size_t pos_offset) {
  const ModelConfig& cfg = p.config;
  if (layer >= cfg.n_layers) throw std::invalid_argument("mhsa_head_output: bad layer");
  if (head >= cfg.n_heads) throw std::invalid_argument("mhsa_head_output: bad head");
  const LayerParams& lp = p.layers[layer];
  const size_t n = x_att.shape[0], d = cfg.d_model, dh = cfg.d_head;
  const size_t kh = head / cfg.kv_groups;

  Tensor q = matmul(x_att, lp.w_q);
  add_bias_rows(q, lp.b_q);
  Tensor k = matmul(x_att, lp.w_k);
  add_bias_rows(k, lp.b_k);
  Tensor v = matmul(x_att, lp.w_v);
  add_bias_rows(v, lp.b_v);
  if (cfg.positional == PositionalMode::rope) {
    rope_apply(q, cfg.n_heads, dh, pos_offset, false);
    rope_apply(k, cfg.n_kv_heads(), dh, pos_offset, false);
  }

  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Tensor out({n, d});
  std::vector<double> row(n);
  for (size_t i = 0; i < n; ++i) {
    const double* qi = q.row_ptr(i) + head * dh;
    double mx = -1e300;
    for (size_t j = 0; j <= i; ++j) {
      const double* kj = k.row_ptr(j) + kh * dh;
      double s = 0.0;
      for (size_t t = 0; t < dh; ++t) s += qi[t] * kj[t];
      row[j] = s * scale;
      mx = std::max(mx, row[j]);
    }
    double denom = 0.0;
    for (size_t j = 0; j <= i; ++j) {
      row[j] = std::exp(row[j] - mx);
      denom += row[j];
    }
    std::vector<double> chead(dh, 0.0);
    for (size_t j = 0; j <= i; ++j) {
      const double a = row[j] / denom;
      const double* vj = v.row_ptr(j) + kh * dh;
      for (size_t t = 0; t < dh; ++t) chead[t] += a * vj[t];
    }
    double* oi = out.row_ptr(i);
    for (size_t t = 0; t < dh; ++t) {
      const double* wo = lp.w_o.row_ptr(head * dh + t);
      const double c = chead[t];
      for (size_t j = 0; j < d; ++j) oi[j] += c * wo[j];
    }
  }
  return out;
}

std::vector<double> mhsa_source_contribution(const TransformerParams& p, size_t layer,
                                             size_t head, const LayerCapture& cap, size_t i,
                                             size_t j) {
  const ModelConfig& cfg = p.config;
  const size_t n = cap.x_att.shape[0], d = cfg.d_model, dh = cfg.d_head;
  const size_t kh = head / cfg.kv_groups;
  const double a = cap.attn.data[(head * n + i) * n + j];
  const double* vj = cap.values.data.data() + (kh * n + j) * dh;
  std::vector<double> out(d, 0.0);
  for (size_t t = 0; t < dh; ++t) {
    const double* wo = p.layers[layer].w_o.row_ptr(head * dh + t);
    const double c = a * vj[t];
    for (size_t q = 0; q < d; ++q) out[q] += c * wo[q];
  }
  return out;
}

double transformer_loss_and_grads(const TransformerParams& p, std::span<const int> tokens,
                                  std::vector<Tensor>* grads) {
  const ModelConfig& cfg = p.config;
  ForwardState st = run_forward(p, tokens, 0);
  Tensor dlogits;
  const double loss = cross_entropy_and_dlogits(st.logits, tokens, grads ? &dlogits : nullptr);
  if (!grads) return loss;

  const size_t n = tokens.size(), d = cfg.d_model, dh = cfg.d_head;
  const size_t hq = cfg.n_heads, hkv = cfg.n_kv_heads();

  if (grads->empty()) {
    auto tlist = const_cast<TransformerParams&>(p).trainable();
    grads->reserve(tlist.size());
    for (Tensor* t : tlist) grads->push_back(Tensor::zeros(t->shape));
  }
  GradRefs g = map_grads(p, *grads);

  // unembed and final norm
  Tensor dxf = Tensor({n, d});
  matmul_backward(st.x_f, p.unembed, dlogits, &dxf, g.unembed);
  Tensor dh_res = Tensor({n, d});
  layer_norm_backward(dxf, st.layers.back().resid_out, p.ln_f_g, st.ln_f_mean, st.ln_f_rstd,
                      dh_res, *g.ln_f_g, *g.ln_f_b);

  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  for (size_t l = cfg.n_layers; l-- > 0;) {
    const LayerParams& lp = p.layers[l];
    const LayerState& ls = st.layers[l];
    auto& gl = g.layers[l];

    // MLP branch: resid_out = resid_mid + mlp(ln2(resid_mid))
    Tensor dmlp_out = dh_res;  // gradient into mlp output
    Tensor dact = Tensor({n, cfg.d_mlp});
    matmul_backward(ls.mlp_act, lp.mlp_w2, dmlp_out, &dact, gl.mlp_w2);
    bias_backward(dmlp_out, *gl.mlp_b2);
    Tensor dpre = Tensor({n, cfg.d_mlp});
    for (size_t i = 0; i < n * cfg.d_mlp; ++i)
      dpre.data[i] = dact.data[i] * gelu_grad(ls.mlp_pre.data[i]);
    Tensor dx_mlp = Tensor({n, d});
    matmul_backward(ls.x_mlp, lp.mlp_w1, dpre, &dx_mlp, gl.mlp_w1);
    bias_backward(dpre, *gl.mlp_b1);
    Tensor dresid_mid = dh_res;  // residual path
    layer_norm_backward(dx_mlp, ls.resid_mid, lp.ln2_g, ls.ln2_mean, ls.ln2_rstd, dresid_mid,
                        *gl.ln2_g, *gl.ln2_b);

    // attention branch: resid_mid = x_in + attn_out
    Tensor dattn_out = dresid_mid;
    Tensor dctx = Tensor({n, hq * dh});
    matmul_backward(ls.ctx, lp.w_o, dattn_out, &dctx, gl.w_o);
    bias_backward(dattn_out, *gl.b_o);

    Tensor dq_rot = Tensor({n, hq * dh});
    Tensor dk_rot = Tensor({n, hkv * dh});
    Tensor dv = Tensor({n, hkv * dh});
    for (size_t h2 = 0; h2 < hq; ++h2) {
      const size_t kh = h2 / cfg.kv_groups;
      const double* a = ls.attn.data.data() + h2 * n * n;
      for (size_t i = 0; i < n; ++i) {
        const double* dci = dctx.row_ptr(i) + h2 * dh;
        // dA and softmax backward on row i
        double rowdot = 0.0;
        std::vector<double> dA(i + 1);
        for (size_t j = 0; j <= i; ++j) {
          const double* vj = ls.v.row_ptr(j) + kh * dh;
          double s = 0.0;
          for (size_t t = 0; t < dh; ++t) s += dci[t] * vj[t];
          dA[j] = s;
          rowdot += s * a[i * n + j];
          // dv
          const double aij = a[i * n + j];
          if (aij != 0.0) {
            double* dvj = dv.row_ptr(j) + kh * dh;
            for (size_t t = 0; t < dh; ++t) dvj[t] += aij * dci[t];
          }
        }
        const double* qi = ls.q_rot.row_ptr(i) + h2 * dh;
        double* dqi = dq_rot.row_ptr(i) + h2 * dh;
        for (size_t j = 0; j <= i; ++j) {
          const double ds = a[i * n + j] * (dA[j] - rowdot) * scale;
          if (ds == 0.0) continue;
          const double* kj = ls.k_rot.row_ptr(j) + kh * dh;
          double* dkj = dk_rot.row_ptr(j) + kh * dh;
          for (size_t t = 0; t < dh; ++t) {
            dqi[t] += ds * kj[t];
            dkj[t] += ds * qi[t];
          }
        }
      }
    }

    if (cfg.positional == PositionalMode::rope) {
      rope_apply(dq_rot, hq, dh, 0, true);
      rope_apply(dk_rot, hkv, dh, 0, true);
    }

    Tensor dx_att = Tensor({n, d});
    matmul_backward(ls.x_att, lp.w_q, dq_rot, &dx_att, gl.w_q);
    bias_backward(dq_rot, *gl.b_q);
    matmul_backward(ls.x_att, lp.w_k, dk_rot, &dx_att, gl.w_k);
    bias_backward(dk_rot, *gl.b_k);
    matmul_backward(ls.x_att, lp.w_v, dv, &dx_att, gl.w_v);
    bias_backward(dv, *gl.b_v);

    Tensor dx_in = dresid_mid;  // residual skip
    layer_norm_backward(dx_att, ls.x_in, lp.ln1_g, ls.ln1_mean, ls.ln1_rstd, dx_in, *gl.ln1_g,
                        *gl.ln1_b);
    dh_res = std::move(dx_in);
  }

  // embeddings
  for (size_t i = 0; i < n; ++i) {
    const double* r = dh_res.row_ptr(i);
    double* er = g.embed->row_ptr(static_cast<size_t>(tokens[i]));
    for (size_t j = 0; j < d; ++j) er[j] += r[j];
    if (g.pos_embed) {
      double* pr = g.pos_embed->row_ptr(i);
      for (size_t j = 0; j < d; ++j) pr[j] += r[j];
    }
  }
  return loss;
}

double transformer_loss(const TransformerParams& p, std::span<const int> tokens) {
  return transformer_loss_and_grads(p, tokens, nullptr);
}

TrainTargetResult train_target(const ModelConfig& cfg, const TaskSpec& task,
                               const TargetTrainConfig& tc, Rng rng) {
  if (tc.steps <= 0) throw std::invalid_argument("train_target: steps must be positive");
  task.validate(cfg.vocab_size, cfg.context_length);
  Rng init_rng = rng.fork(0xA11CE);
  TrainTargetResult out;
  out.params = TransformerParams::init(cfg, init_rng);

  auto tlist = out.params.trainable();
  AdamState adam = AdamState::init(tlist, {tc.lr, tc.beta1, tc.beta2, tc.eps});
  std::vector<Tensor> grads;

  for (long step = 0; step < tc.steps; ++step) {
    Rng batch_rng = rng.fork(static_cast<uint64_t>(step) + 1);
    for (Tensor& gt : grads) gt.fill(0.0);
    double batch_loss = 0.0;
    for (size_t b = 0; b < tc.batch_sequences; ++b) {
      SequenceSample s = sample_sequence(task, batch_rng);
      batch_loss += transformer_loss_and_grads(out.params, s.tokens, &grads);
    }
    const double inv = 1.0 / static_cast<double>(tc.batch_sequences);
    batch_loss *= inv;
    if (!std::isfinite(batch_loss))
      throw std::runtime_error("train_target: loss diverged (non-finite) at step " +
                               std::to_string(step));
    for (Tensor& gt : grads)
      for (double& v : gt.data) v *= inv;
    std::vector<const Tensor*> gptrs;
    gptrs.reserve(grads.size());
    for (Tensor& gt : grads) gptrs.push_back(&gt);
    adam.apply(tlist, gptrs, cosine_lr_scale(step, tc.steps, tc.lr_floor));
    out.loss_curve.push_back(batch_loss);
  }
  return out;
}

OccurrenceLoss induction_eval(const TransformerParams& p, const TaskSpec& task,
                              size_t n_sequences, Rng rng) {
  if (task.kind != TaskKind::induction)
    throw std::invalid_argument("induction_eval: task is not induction");
  double first_sum = 0.0, second_sum = 0.0;
  size_t first_n = 0, second_n = 0;
  for (size_t s = 0; s < n_sequences; ++s) {
    Rng srng = rng.fork(s);
    SequenceSample seq = sample_sequence(task, srng);
    ForwardResult fr = transformer_forward(p, seq.tokens, false);
    const size_t n = seq.tokens.size(), V = p.config.vocab_size;
    std::vector<double> probs(V);
    for (size_t i = 0; i + 1 < n; ++i) {
      const double* li = fr.logits.row_ptr(i);
      double mx = li[0];
      for (size_t j = 1; j < V; ++j) mx = std::max(mx, li[j]);
      double denom = 0.0;
      for (size_t j = 0; j < V; ++j) {
        probs[j] = std::exp(li[j] - mx);
        denom += probs[j];
      }
      const double ce = -std::log(probs[static_cast<size_t>(seq.tokens[i + 1])] / denom);
      if (seq.second_occurrence[i]) {
        second_sum += ce;
        ++second_n;
      } else if (i >= seq.first_block_start && i + 1 < seq.first_block_start + seq.block_len) {
        first_sum += ce;
        ++first_n;
      }
    }
  }
  OccurrenceLoss ol;
  ol.first = first_n ? first_sum / static_cast<double>(first_n) : 0.0;
  ol.second = second_n ? second_sum / static_cast<double>(second_n) : 0.0;
  return ol;
}

}  // namespace lorsa
