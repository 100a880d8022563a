#include "lorsa/lorsa_layer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

#include "lorsa/checkpoint.hpp"
#include "json.hpp"

namespace lorsa {

namespace {

constexpr double kRopeBase = 10000.0;

void rope_rotate(double* row, size_t d_qk, double pos, bool transpose) {
  for (size_t t = 0; 2 * t + 1 < d_qk; ++t) {
    const double theta =
        pos * std::pow(kRopeBase, -2.0 * static_cast<double>(t) / static_cast<double>(d_qk));
    const double c = std::cos(theta);
    const double s = transpose ? -std::sin(theta) : std::sin(theta);
    const double a = row[2 * t], b = row[2 * t + 1];
    row[2 * t] = a * c - b * s;
    row[2 * t + 1] = a * s + b * c;
  }
}

}  // namespace

LorsaInitMode lorsa_init_mode_from_string(const std::string& s) {
  if (s == "random") return LorsaInitMode::random;
  if (s == "copy-mhsa-trainable") return LorsaInitMode::copy_mhsa_trainable;
  if (s == "copy-mhsa-frozen") return LorsaInitMode::copy_mhsa_frozen;
  throw std::invalid_argument("unknown lorsa init mode: " + s);
}

std::string to_string(LorsaInitMode m) {
  switch (m) {
    case LorsaInitMode::random: return "random";
    case LorsaInitMode::copy_mhsa_trainable: return "copy-mhsa-trainable";
    case LorsaInitMode::copy_mhsa_frozen: return "copy-mhsa-frozen";
  }
  return "?";
}

void LorsaConfig::validate() const {
  if (heads == 0 || d_qk == 0 || d_model == 0 || context_length == 0)
    throw std::invalid_argument("lorsa config: zero extent");
  if (binding == 0 || heads % binding != 0)
    throw std::invalid_argument("lorsa config: binding group size must divide head count");
  if (k > heads) throw std::invalid_argument("lorsa config: K exceeds head count");
  if (k == 0) throw std::invalid_argument("lorsa config: K must be positive");
}

std::vector<std::string> LorsaConfig::hard_constraint_warnings(size_t target_d_head,
                                                               size_t target_n_heads) const {
  std::vector<std::string> w;
  if (d_qk < target_d_head)
    w.push_back("d_qk=" + std::to_string(d_qk) + " below target head dimension " +
                std::to_string(target_d_head) + "; expect significant FVU degradation");
  if (n_groups() < target_n_heads)
    w.push_back("independent QK pairs H/B=" + std::to_string(n_groups()) +
                " below target head count " + std::to_string(target_n_heads) +
                "; expect significant FVU degradation");
  return w;
}

std::string LorsaConfig::to_json() const {
  nlohmann::json j;
  j["heads"] = heads;
  j["k"] = k;
  j["d_qk"] = d_qk;
  j["binding"] = binding;
  j["d_model"] = d_model;
  j["context_length"] = context_length;
  j["relu_on_z"] = relu_on_z;
  j["qk_bias"] = qk_bias;
  j["init_mode"] = to_string(init_mode);
  j["positional"] = positional == PositionalMode::rope ? "rope" : "learned";
  return j.dump();
}

LorsaConfig LorsaConfig::from_json(const std::string& json) {
  const auto j = nlohmann::json::parse(json);
  LorsaConfig c;
  c.heads = j.at("heads");
  c.k = j.at("k");
  c.d_qk = j.at("d_qk");
  c.binding = j.at("binding");
  c.d_model = j.at("d_model");
  c.context_length = j.at("context_length");
  c.relu_on_z = j.at("relu_on_z");
  c.qk_bias = j.at("qk_bias");
  c.init_mode = lorsa_init_mode_from_string(j.at("init_mode"));
  c.positional = j.at("positional") == "rope" ? PositionalMode::rope : PositionalMode::learned;
  c.validate();
  return c;
}

LorsaParams LorsaParams::init(const LorsaConfig& cfg, Rng& rng) {
  cfg.validate();
  LorsaParams p;
  p.config = cfg;
  const size_t G = cfg.n_groups(), d = cfg.d_model;
  const double qkstd = 1.0 / std::sqrt(static_cast<double>(d));
  p.w_q = Tensor({G, d, cfg.d_qk});
  p.w_k = Tensor({G, d, cfg.d_qk});
  for (double& x : p.w_q.data) x = rng.normal(0.0, qkstd);
  for (double& x : p.w_k.data) x = rng.normal(0.0, qkstd);
  if (cfg.qk_bias) {
    p.b_q = Tensor({G, cfg.d_qk});
    p.b_k = Tensor({G, cfg.d_qk});
  }
  p.w_v = Tensor({cfg.heads, d});
  for (double& x : p.w_v.data) x = rng.normal(0.0, qkstd);
  p.b_v = Tensor({cfg.heads});
  p.w_o = Tensor({cfg.heads, d});
  for (size_t h = 0; h < cfg.heads; ++h) {
    double* row = p.w_o.row_ptr(h);
    double nrm = 0.0;
    for (size_t j = 0; j < d; ++j) {
      row[j] = rng.normal();
      nrm += row[j] * row[j];
    }
    nrm = std::sqrt(nrm);
    for (size_t j = 0; j < d; ++j) row[j] /= nrm;
  }
  p.dead.assign(cfg.heads, 0);
  return p;
}

std::vector<Tensor*> LorsaParams::trainable() {
  std::vector<Tensor*> out{&w_q, &w_k};
  if (config.qk_bias) {
    out.push_back(&b_q);
    out.push_back(&b_k);
  }
  out.push_back(&w_v);
  out.push_back(&b_v);
  out.push_back(&w_o);
  return out;
}

std::vector<const Tensor*> LorsaParams::trainable() const {
  auto mut = const_cast<LorsaParams*>(this)->trainable();
  return std::vector<const Tensor*>(mut.begin(), mut.end());
}

void LorsaParams::save(const std::string& path) const {
  LorsaParams copy = *this;
  normalize_heads(copy);
  TensorFile f;
  f.magic = "LORSAWT1";
  nlohmann::json j = nlohmann::json::parse(config.to_json());
  j["qk_frozen"] = qk_frozen;
  f.config_json = j.dump();
  f.add("w_q", copy.w_q);
  f.add("w_k", copy.w_k);
  if (config.qk_bias) {
    f.add("b_q", copy.b_q);
    f.add("b_k", copy.b_k);
  }
  f.add("w_v", copy.w_v);
  f.add("b_v", copy.b_v);
  f.add("w_o", copy.w_o);
  Tensor deadt({copy.dead.size()});
  for (size_t h = 0; h < copy.dead.size(); ++h) deadt[h] = copy.dead[h];
  f.add("dead", deadt);
  write_tensor_file(path, f);
}

LorsaParams LorsaParams::load(const std::string& path) {
  TensorFile f = read_tensor_file(path, "LORSAWT1");
  const auto j = nlohmann::json::parse(f.config_json);
  LorsaParams p;
  p.config = LorsaConfig::from_json(f.config_json);
  p.qk_frozen = j.value("qk_frozen", false);
  p.w_q = f.get("w_q");
  p.w_k = f.get("w_k");
  if (p.config.qk_bias) {
    p.b_q = f.get("b_q");
    p.b_k = f.get("b_k");
  }
  p.w_v = f.get("w_v");
  p.b_v = f.get("b_v");
  p.w_o = f.get("w_o");
  const Tensor& deadt = f.get("dead");
  p.dead.resize(deadt.size());
  for (size_t h = 0; h < deadt.size(); ++h) p.dead[h] = deadt[h] != 0.0 ? 1 : 0;
  return p;
}

bool LorsaForwardTrace::is_selected(size_t pos, size_t head) const {
  for (uint32_t h : selected[pos])
    if (h == head) return true;
  return false;
}

LorsaForwardTrace lorsa_forward(const LorsaParams& p, const Tensor& X, size_t pos_offset) {
  const LorsaConfig& cfg = p.config;
  if (X.rank() != 2 || X.shape[1] != cfg.d_model)
    throw std::invalid_argument("lorsa_forward: X must be n x d_model");
  const size_t n = X.shape[0];
  if (n > cfg.context_length) throw std::invalid_argument("lorsa_forward: sequence too long");
  if (cfg.k > cfg.heads) throw std::invalid_argument("lorsa_forward: K exceeds head count");
  const size_t H = cfg.heads, G = cfg.n_groups(), d = cfg.d_model, dq = cfg.d_qk;

  LorsaForwardTrace tr;
  tr.attn = Tensor({G, n, n});
  tr.q_rot = Tensor({G, n, dq});
  tr.k_rot = Tensor({G, n, dq});
  tr.values = Tensor({H, n});
  tr.z_pre = Tensor({n, H});

  // group attention patterns
  const double scale = 1.0 / std::sqrt(static_cast<double>(dq));
  for (size_t g = 0; g < G; ++g) {
    Tensor q({n, dq}), k({n, dq});
    matmul_accum(X.data.data(), p.group_wq(g), q.data.data(), n, d, dq);
    matmul_accum(X.data.data(), p.group_wk(g), k.data.data(), n, d, dq);
    if (cfg.qk_bias) {
      const double* bq = p.b_q.row_ptr(g);
      const double* bk = p.b_k.row_ptr(g);
      for (size_t i = 0; i < n; ++i)
        for (size_t t = 0; t < dq; ++t) {
          q.at2(i, t) += bq[t];
          k.at2(i, t) += bk[t];
        }
    }
    if (cfg.positional == PositionalMode::rope) {
      for (size_t i = 0; i < n; ++i) {
        rope_rotate(q.row_ptr(i), dq, static_cast<double>(i + pos_offset), false);
        rope_rotate(k.row_ptr(i), dq, static_cast<double>(i + pos_offset), false);
      }
    }
    double* a = tr.attn.data.data() + g * n * n;
    for (size_t i = 0; i < n; ++i) {
      const double* qi = q.row_ptr(i);
      double mx = -1e300;
      for (size_t j = 0; j <= i; ++j) {
        const double* kj = k.row_ptr(j);
        double s = 0.0;
        for (size_t t = 0; t < dq; ++t) s += qi[t] * kj[t];
        a[i * n + j] = s * scale;
        mx = std::max(mx, a[i * n + j]);
      }
      double denom = 0.0;
      for (size_t j = 0; j <= i; ++j) {
        a[i * n + j] = std::exp(a[i * n + j] - mx);
        denom += a[i * n + j];
      }
      for (size_t j = 0; j <= i; ++j) a[i * n + j] /= denom;
      for (size_t j = i + 1; j < n; ++j) a[i * n + j] = 0.0;
    }
  }

  // per-head value series and activations
  for (size_t h = 0; h < H; ++h) {
    const double* wv = p.w_v.row_ptr(h);
    const double bv = p.b_v[h];
    double* vh = tr.values.data.data() + h * n;
    for (size_t j = 0; j < n; ++j) {
      const double* xj = X.row_ptr(j);
      double s = bv;
      for (size_t t = 0; t < d; ++t) s += xj[t] * wv[t];
      vh[j] = s;
    }
    const double* a = tr.attn.data.data() + cfg.group_of(h) * n * n;
    for (size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (size_t j = 0; j <= i; ++j) s += a[i * n + j] * vh[j];
      tr.z_pre.at2(i, h) = s;
    }
  }

  tr.z = tr.z_pre;
  if (cfg.relu_on_z)
    for (double& v : tr.z.data) v = std::max(0.0, v);

  // salience = z * ||w_o||; equals z once normalized, and keeps selection
  // invariant under the normalization fold
  std::vector<double> wo_norm(H);
  for (size_t h = 0; h < H; ++h)
    wo_norm[h] = (h < p.dead.size() && p.dead[h]) ? 0.0
                                                  : l2_norm({p.w_o.row_ptr(h), d});

  tr.y_hat = Tensor({n, d});
  tr.selected.resize(n);
  std::vector<std::pair<double, uint32_t>> order(H);
  const size_t K = std::min(cfg.k, H);
  for (size_t i = 0; i < n; ++i) {
    for (size_t h = 0; h < H; ++h) order[h] = {tr.z.at2(i, h) * wo_norm[h], static_cast<uint32_t>(h)};
    auto cmp = [](const std::pair<double, uint32_t>& a, const std::pair<double, uint32_t>& b) {
      if (a.first != b.first) return a.first > b.first;
      return a.second < b.second;
    };
    std::nth_element(order.begin(), order.begin() + static_cast<long>(K - 1), order.end(), cmp);
    std::sort(order.begin(), order.begin() + static_cast<long>(K), cmp);
    auto& sel = tr.selected[i];
    sel.reserve(K);
    double* yi = tr.y_hat.row_ptr(i);
    for (size_t r = 0; r < K; ++r) {
      const uint32_t h = order[r].second;
      sel.push_back(h);
      const double zv = tr.z.at2(i, h);
      if (zv == 0.0) continue;
      const double* wo = p.w_o.row_ptr(h);
      for (size_t t = 0; t < d; ++t) yi[t] += zv * wo[t];
    }
  }
  return tr;
}

void normalize_heads(LorsaParams& p) {
  const size_t H = p.config.heads, d = p.config.d_model;
  if (p.dead.size() != H) p.dead.assign(H, 0);
  for (size_t h = 0; h < H; ++h) {
    double* wo = p.w_o.row_ptr(h);
    const double nrm = l2_norm({wo, d});
    if (nrm < 1e-12) {
      p.dead[h] = 1;
      continue;
    }
    double* wv = p.w_v.row_ptr(h);
    for (size_t t = 0; t < d; ++t) {
      wv[t] *= nrm;
      wo[t] /= nrm;
    }
    p.b_v[h] *= nrm;
  }
}

LorsaParams init_from_mhsa(const LorsaConfig& cfg, const TransformerParams& target, size_t layer,
                           LorsaInitMode mode, Rng& rng) {
  if (mode != LorsaInitMode::copy_mhsa_trainable && mode != LorsaInitMode::copy_mhsa_frozen)
    throw std::invalid_argument("init_from_mhsa: mode must be a copy mode");
  const ModelConfig& mc = target.config;
  if (layer >= mc.n_layers) throw std::invalid_argument("init_from_mhsa: bad layer");
  if (cfg.d_qk != mc.d_head)
    throw std::invalid_argument("init_from_mhsa: d_qk must equal the target head dimension");
  if (cfg.n_groups() < mc.n_heads)
    throw std::invalid_argument("init_from_mhsa: fewer QK groups than target heads");

  LorsaConfig resolved = cfg;
  resolved.qk_bias = true;  // carry the target's QK biases
  resolved.init_mode = mode;
  resolved.positional = mc.positional;
  LorsaParams p = LorsaParams::init(resolved, rng);

  const LayerParams& lp = target.layers[layer];
  const size_t d = mc.d_model, dh = mc.d_head, G = resolved.n_groups();
  for (size_t g = 0; g < G; ++g) {
    const size_t mh = g % mc.n_heads;        // cyclic tiling over target heads
    const size_t kvh = mh / mc.kv_groups;
    double* wq = p.w_q.data.data() + g * d * dh;
    double* wk = p.w_k.data.data() + g * d * dh;
    for (size_t r = 0; r < d; ++r)
      for (size_t c = 0; c < dh; ++c) {
        wq[r * dh + c] = lp.w_q.at2(r, mh * dh + c);
        wk[r * dh + c] = lp.w_k.at2(r, kvh * dh + c);
      }
    for (size_t c = 0; c < dh; ++c) {
      p.b_q.at2(g, c) = lp.b_q[mh * dh + c];
      p.b_k.at2(g, c) = lp.b_k[kvh * dh + c];
    }
  }
  p.qk_frozen = (mode == LorsaInitMode::copy_mhsa_frozen);
  return p;
}

}  // namespace lorsa
