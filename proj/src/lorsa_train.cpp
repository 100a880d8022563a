#include "lorsa/lorsa_train.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

#include "lorsa/adam.hpp"

namespace lorsa {

namespace {

constexpr double kRopeBase = 10000.0;

void rope_rotate_t(double* row, size_t d_qk, double pos) {
  for (size_t t = 0; 2 * t + 1 < d_qk; ++t) {
    const double theta =
        pos * std::pow(kRopeBase, -2.0 * static_cast<double>(t) / static_cast<double>(d_qk));
    const double c = std::cos(theta), s = -std::sin(theta);
    const double a = row[2 * t], b = row[2 * t + 1];
    row[2 * t] = a * c - b * s;
    row[2 * t + 1] = a * s + b * c;
  }
}

struct GradMap {
  Tensor *w_q, *w_k, *b_q, *b_k, *w_v, *b_v, *w_o;
};

GradMap map_lorsa_grads(const LorsaParams& p, std::vector<Tensor>& grads) {
  GradMap m{};
  size_t idx = 0;
  m.w_q = &grads[idx++];
  m.w_k = &grads[idx++];
  if (p.config.qk_bias) {
    m.b_q = &grads[idx++];
    m.b_k = &grads[idx++];
  }
  m.w_v = &grads[idx++];
  m.b_v = &grads[idx++];
  m.w_o = &grads[idx++];
  return m;
}

Tensor seq_matrix(const ActivationDataset& ds, const Tensor& src, size_t seq) {
  const size_t n = ds.seq_len, d = ds.d_model;
  Tensor out({n, d});
  std::memcpy(out.data.data(), src.row_ptr(ds.index(seq, 0)), n * d * sizeof(double));
  return out;
}

}  // namespace

double lorsa_loss_and_grads(const LorsaParams& p, const Tensor& X, const Tensor& Y, double weight,
                            std::vector<Tensor>* grads) {
  const LorsaConfig& cfg = p.config;
  const size_t n = X.shape[0], d = cfg.d_model, H = cfg.heads, G = cfg.n_groups(),
               dq = cfg.d_qk;
  if (!Y.same_shape(X)) throw std::invalid_argument("lorsa loss: X/Y shape mismatch");

  LorsaForwardTrace tr = lorsa_forward(p, X);
  double loss = 0.0;
  for (size_t i = 0; i < n * d; ++i) {
    const double e = tr.y_hat.data[i] - Y.data[i];
    loss += e * e;
  }
  loss *= weight;
  if (!grads) return loss;

  if (grads->empty()) {
    for (const Tensor* t : p.trainable()) grads->push_back(Tensor::zeros(t->shape));
  }
  GradMap gm = map_lorsa_grads(p, *grads);

  Tensor gout({n, d});
  for (size_t i = 0; i < n * d; ++i)
    gout.data[i] = 2.0 * weight * (tr.y_hat.data[i] - Y.data[i]);

  // straight-through: only selected heads receive gradient
  Tensor dv({H, n});
  std::vector<uint8_t> head_touched(H, 0), group_touched(G, 0);
  Tensor dA;
  if (!p.qk_frozen) dA = Tensor({G, n, n});

  for (size_t i = 0; i < n; ++i) {
    const double* gi = gout.row_ptr(i);
    for (uint32_t h : tr.selected[i]) {
      const double zv = tr.z.at2(i, h);
      const double* wo = p.w_o.row_ptr(h);
      if (zv != 0.0) {
        double* gwo = gm.w_o->row_ptr(h);
        for (size_t t = 0; t < d; ++t) gwo[t] += zv * gi[t];
      }
      double dz = 0.0;
      for (size_t t = 0; t < d; ++t) dz += gi[t] * wo[t];
      if (cfg.relu_on_z && tr.z_pre.at2(i, h) <= 0.0) continue;
      if (dz == 0.0) continue;
      head_touched[h] = 1;
      const size_t g = cfg.group_of(h);
      const double* a = tr.attn.data.data() + (g * n + i) * n;
      double* dvh = dv.data.data() + h * n;
      for (size_t j = 0; j <= i; ++j) dvh[j] += dz * a[j];
      if (!p.qk_frozen) {
        group_touched[g] = 1;
        const double* vh = tr.values.data.data() + h * n;
        double* dag = dA.data.data() + (g * n + i) * n;
        for (size_t j = 0; j <= i; ++j) dag[j] += dz * vh[j];
      }
    }
  }

  for (size_t h = 0; h < H; ++h) {
    if (!head_touched[h]) continue;
    const double* dvh = dv.data.data() + h * n;
    double* gwv = gm.w_v->row_ptr(h);
    double bsum = 0.0;
    for (size_t j = 0; j < n; ++j) {
      const double dvj = dvh[j];
      if (dvj == 0.0) continue;
      bsum += dvj;
      const double* xj = X.row_ptr(j);
      for (size_t t = 0; t < d; ++t) gwv[t] += dvj * xj[t];
    }
    (*gm.b_v)[h] += bsum;
  }

  if (!p.qk_frozen) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(dq));
    Tensor dqm({n, dq}), dkm({n, dq});
    for (size_t g = 0; g < G; ++g) {
      if (!group_touched[g]) continue;
      dqm.fill(0.0);
      dkm.fill(0.0);
      const double* a = tr.attn.data.data() + g * n * n;
      const double* qg = tr.q_rot.data.data() + g * n * dq;
      const double* kg = tr.k_rot.data.data() + g * n * dq;
      for (size_t i = 0; i < n; ++i) {
        const double* dag = dA.data.data() + (g * n + i) * n;
        const double* ai = a + i * n;
        double rowdot = 0.0;
        for (size_t j = 0; j <= i; ++j) rowdot += dag[j] * ai[j];
        const double* qi = qg + i * dq;
        double* dqi = dqm.row_ptr(i);
        for (size_t j = 0; j <= i; ++j) {
          const double ds = ai[j] * (dag[j] - rowdot) * scale;
          if (ds == 0.0) continue;
          const double* kj = kg + j * dq;
          double* dkj = dkm.row_ptr(j);
          for (size_t t = 0; t < dq; ++t) {
            dqi[t] += ds * kj[t];
            dkj[t] += ds * qi[t];
          }
        }
      }
      if (cfg.positional == PositionalMode::rope) {
        for (size_t i = 0; i < n; ++i) {
          rope_rotate_t(dqm.row_ptr(i), dq, static_cast<double>(i));
          rope_rotate_t(dkm.row_ptr(i), dq, static_cast<double>(i));
        }
      }
      double* gwq = gm.w_q->data.data() + g * d * dq;
      double* gwk = gm.w_k->data.data() + g * d * dq;
      for (size_t j = 0; j < n; ++j) {
        const double* xj = X.row_ptr(j);
        const double* dqj = dqm.row_ptr(j);
        const double* dkj = dkm.row_ptr(j);
        for (size_t r = 0; r < d; ++r) {
          const double xv = xj[r];
          if (xv == 0.0) continue;
          double* gq = gwq + r * dq;
          double* gk = gwk + r * dq;
          for (size_t t = 0; t < dq; ++t) {
            gq[t] += xv * dqj[t];
            gk[t] += xv * dkj[t];
          }
        }
      }
      if (cfg.qk_bias) {
        double* gbq = gm.b_q->row_ptr(g);
        double* gbk = gm.b_k->row_ptr(g);
        for (size_t j = 0; j < n; ++j)
          for (size_t t = 0; t < dq; ++t) {
            gbq[t] += dqm.at2(j, t);
            gbk[t] += dkm.at2(j, t);
          }
      }
    }
  }
  return loss;
}

double lorsa_fvu(const LorsaParams& p, const DatasetView& view) {
  const ActivationDataset& ds = *view.ds;
  const size_t d = ds.d_model;
  // shard mean of Y
  std::vector<double> mu(d, 0.0);
  size_t count = 0;
  for (size_t s = view.seq_begin; s < view.seq_end; ++s)
    for (size_t i = 0; i < ds.seq_len; ++i) {
      const double* y = ds.Y.row_ptr(ds.index(s, i));
      for (size_t j = 0; j < d; ++j) mu[j] += y[j];
      ++count;
    }
  for (double& v : mu) v /= static_cast<double>(count);

  double num = 0.0, den = 0.0;
  for (size_t s = view.seq_begin; s < view.seq_end; ++s) {
    Tensor X = seq_matrix(ds, ds.X, s);
    Tensor Y = seq_matrix(ds, ds.Y, s);
    LorsaForwardTrace tr = lorsa_forward(p, X);
    for (size_t i = 0; i < ds.seq_len; ++i) {
      const double* yh = tr.y_hat.row_ptr(i);
      const double* y = Y.row_ptr(i);
      for (size_t j = 0; j < d; ++j) {
        const double e = yh[j] - y[j];
        num += e * e;
        const double c = y[j] - mu[j];
        den += c * c;
      }
    }
  }
  if (den == 0.0) return num == 0.0 ? 0.0 : 1.0;
  return num / den;
}

LorsaTrainResult train_lorsa(const LorsaConfig& cfg, const ActivationDataset& dataset,
                             const LorsaTrainConfig& tc, Rng rng, const TransformerParams* target,
                             size_t target_layer) {
  cfg.validate();
  if (dataset.d_model != cfg.d_model)
    throw std::invalid_argument("train_lorsa: dataset d_model does not match config");
  if (dataset.n_sequences() == 0) throw std::invalid_argument("train_lorsa: empty dataset");

  Rng init_rng = rng.fork(0x10D5A);
  LorsaTrainResult out;
  if (cfg.init_mode == LorsaInitMode::random) {
    out.params = LorsaParams::init(cfg, init_rng);
  } else {
    if (!target) throw std::invalid_argument("train_lorsa: copy init modes need target params");
    out.params = init_from_mhsa(cfg, *target, target_layer, cfg.init_mode, init_rng);
  }

  DatasetView train = train_shard(dataset, tc.holdout_fraction);
  DatasetView holdout = holdout_shard(dataset, tc.holdout_fraction);
  const size_t batch_seqs = std::max<size_t>(1, tc.batch_positions / dataset.seq_len);

  auto tlist = out.params.trainable();
  AdamState adam = AdamState::init(tlist, {tc.lr, tc.beta1, tc.beta2, tc.eps});
  std::vector<Tensor> grads;
  LorsaParams snapshot = out.params;

  const double weight = 1.0 / static_cast<double>(batch_seqs * dataset.seq_len);
  for (long step = 0; step < tc.steps; ++step) {
    for (Tensor& g : grads) g.fill(0.0);
    double batch_loss = 0.0;
    for (size_t b = 0; b < batch_seqs; ++b) {
      const size_t s =
          train.seq_begin + (static_cast<size_t>(step) * batch_seqs + b) % train.n_sequences();
      Tensor X = seq_matrix(dataset, dataset.X, s);
      Tensor Y = seq_matrix(dataset, dataset.Y, s);
      batch_loss += lorsa_loss_and_grads(out.params, X, Y, weight, &grads);
    }
    if (!std::isfinite(batch_loss)) {
      out.params = snapshot;  // last good
      out.aborted_non_finite = true;
      out.aborted_at_step = step;
      break;
    }
    out.loss_curve.push_back(batch_loss);
    std::vector<const Tensor*> gptrs;
    gptrs.reserve(grads.size());
    const bool frozen = out.params.qk_frozen;
    for (size_t t = 0; t < grads.size(); ++t) {
      // first two slots are w_q / w_k (+ two bias slots under qk_bias)
      const bool is_qk = t < (out.params.config.qk_bias ? 4u : 2u);
      gptrs.push_back(frozen && is_qk ? nullptr : &grads[t]);
    }
    adam.apply(tlist, gptrs, cosine_lr_scale(step, tc.steps, tc.lr_floor));
    if (tc.snapshot_every > 0 && step % tc.snapshot_every == 0) snapshot = out.params;
  }

  normalize_heads(out.params);
  out.final_fvu = lorsa_fvu(out.params, holdout);
  HeadFiringStats stats = head_firing_stats(out.params, dataset);
  out.dead_fraction = stats.dead_fraction;
  return out;
}

HeadFiringStats head_firing_stats(const LorsaParams& p, const ActivationDataset& dataset) {
  const size_t H = p.config.heads;
  HeadFiringStats st;
  st.frequency.assign(H, 0.0);
  st.mean_abs_z.assign(H, 0.0);
  std::vector<size_t> fired(H, 0);
  size_t total = 0;
  for (size_t s = 0; s < dataset.n_sequences(); ++s) {
    Tensor X = seq_matrix(dataset, dataset.X, s);
    LorsaForwardTrace tr = lorsa_forward(p, X);
    for (size_t i = 0; i < dataset.seq_len; ++i) {
      ++total;
      for (uint32_t h : tr.selected[i]) {
        const double zv = tr.z.at2(i, h);
        if (zv != 0.0) {
          ++fired[h];
          st.mean_abs_z[h] += std::abs(zv);
        }
      }
    }
  }
  st.dead.assign(H, 0);
  size_t dead_count = 0;
  for (size_t h = 0; h < H; ++h) {
    st.frequency[h] = total ? static_cast<double>(fired[h]) / static_cast<double>(total) : 0.0;
    if (fired[h]) st.mean_abs_z[h] /= static_cast<double>(fired[h]);
    if (st.frequency[h] < 1e-5) {
      st.dead[h] = 1;
      ++dead_count;
    }
  }
  st.dead_fraction = static_cast<double>(dead_count) / static_cast<double>(H);
  return st;
}

}  // namespace lorsa
