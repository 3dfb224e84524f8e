#include "isodream/world_model.hpp"

#include <cmath>
#include <numbers>

namespace isodream {

namespace {

template <typename T>
void check_component(const char* name, T value) {
  if (!std::isfinite(static_cast<double>(value))) {
    throw TrainingFailure(name, "non-finite value");
  }
}

template <typename T>
T logit_of(T p) {
  return std::log(p / (T(1) - p));
}

constexpr double kHalfLog2Pi = 0.9189385332046727;  // 0.5 * ln(2*pi)

}  // namespace

template <typename T>
T unbiased_variance(std::span<const T> samples) {
  ISO_CHECK(samples.size() >= 2, "variance needs at least two samples");
  T mean = 0;
  for (T s : samples) mean += s;
  mean /= static_cast<T>(samples.size());
  T acc = 0;
  for (T s : samples) acc += (s - mean) * (s - mean);
  return acc / static_cast<T>(samples.size() - 1);
}

template <typename T>
WorldModel<T>::WorldModel(const WMConfig& cfg, ParamSet<T>& ps, int action_dim)
    : cfg_(cfg), action_dim_(action_dim) {
  cfg_.validate();
  ConvSpec spec;
  spec.image_size = cfg_.image_size;
  spec.channels = cfg_.enc_channels;

  const int dF = cfg_.branch_feature_dim();
  const int d = cfg_.latent_dim;
  const int dh = cfg_.hidden_dim;
  const int F = cfg_.feature_dim;
  const int A = action_dim_;
  const int hh = cfg_.head_hidden;

  encoder_ = ConvEncoder<T>(ps, "shared_encoder", "enc", spec, F);

  static_head_ = LinearLayer<T>(ps, "static_branch", "code", F, cfg_.static_dim);
  static_decoder_ = ConvDecoder<T>(ps, "static_branch", "dec", spec, cfg_.static_dim, 4);

  gru_s_ = GruCell<T>(ps, "action_cond_branch", "gru", d + A, dh);
  post_s_ = Mlp<T>(ps, "action_cond_branch", "post", dh + F + A, hh, 2 * d);
  prior_s_ = Mlp<T>(ps, "action_cond_branch", "prior", dh, hh, 2 * d);
  dec_s_ = ConvDecoder<T>(ps, "action_cond_branch", "dec", spec, dF, 4);

  gru_z_ = GruCell<T>(ps, "action_free_branch", "gru", d + A + dF, dh);
  post_z_ = Mlp<T>(ps, "action_free_branch", "post", dh + F + A, hh, 2 * d);
  prior_z_ = Mlp<T>(ps, "action_free_branch", "prior", dh, hh, 2 * d);
  dec_z_ = ConvDecoder<T>(ps, "action_free_branch", "dec", spec, dF, 4);

  inverse_ = Mlp<T>(ps, "inverse_cell", "mlp", 2 * d, cfg_.head_hidden, A);
  gate_ = LinearLayer<T>(ps, "dependency_gate", "fc", 2 * dF, 1);
  reward_ = Mlp<T>(ps, "reward_head", "mlp", 2 * dF, hh, 1);
  discount_ = Mlp<T>(ps, "discount_head", "mlp", 2 * dF, hh, 1);
}

template <typename T>
Var WorldModel<T>::encode(Tape<T>& t, Var obs) const {
  return encoder_.apply(t, obs);
}

template <typename T>
typename WorldModel<T>::Branch WorldModel<T>::initial_branch(Tape<T>& t, int n) const {
  Branch b;
  b.h = t.zeros(n, cfg_.hidden_dim);
  b.mean = t.zeros(n, cfg_.latent_dim);
  b.stddev = t.affine_const(b.mean, T(0), T(1));
  b.sample = t.zeros(n, cfg_.latent_dim);
  b.feat = t.concat_cols(std::array<Var, 2>{b.h, b.sample});
  return b;
}

template <typename T>
Var WorldModel<T>::static_code_from_features(Tape<T>& t, Var feats) const {
  return t.mean_rows(static_head_.apply(t, feats));
}

template <typename T>
Var WorldModel<T>::static_code(Tape<T>& t, Var frames) const {
  ISO_CHECK(t.rows(frames) >= 1, "static_code: at least one frame required");
  return static_code_from_features(t, encode(t, frames));
}

template <typename T>
typename WorldModel<T>::Branch WorldModel<T>::make_branch(
    Tape<T>& t, Var h, Var mean, Var raw_std, std::span<const T> noise) const {
  Branch b;
  b.h = h;
  b.mean = mean;
  b.stddev = t.softplus_floor(raw_std, static_cast<T>(cfg_.min_std));
  Var eps = t.constant(noise, t.rows(mean), t.cols(mean));
  b.sample = t.add(mean, t.mul(b.stddev, eps));
  b.feat = t.concat_cols(std::array<Var, 2>{b.h, b.sample});
  return b;
}

template <typename T>
typename WorldModel<T>::Branch WorldModel<T>::prior_step_controllable(
    Tape<T>& t, const Branch& prev, Var action, std::span<const T> noise) const {
  Var x = t.concat_cols(std::array<Var, 2>{prev.sample, action});
  Var h = gru_s_.step(t, prev.h, x);
  Var stats = prior_s_.apply(t, h);
  Var mean = t.slice_cols(stats, 0, cfg_.latent_dim);
  Var raw = t.slice_cols(stats, cfg_.latent_dim, cfg_.latent_dim);
  return make_branch(t, h, mean, raw, noise);
}

template <typename T>
Var WorldModel<T>::gate_logit(Tape<T>& t, Var feat_s, Var feat_z) const {
  return gate_.apply(t, t.concat_cols(std::array<Var, 2>{feat_s, feat_z}));
}

template <typename T>
Var WorldModel<T>::gate_value(Tape<T>& t, Var logit, GateMode mode) const {
  if (mode == GateMode::kSoft) return t.sigmoid(logit);
  return t.st_gate(logit, logit_of(static_cast<T>(cfg_.gate_threshold)));
}

template <typename T>
typename WorldModel<T>::Branch WorldModel<T>::prior_step_free(
    Tape<T>& t, const Branch& prev, Var action, Var gated_s,
    std::span<const T> noise) const {
  Var x = t.concat_cols(std::array<Var, 3>{prev.sample, action, gated_s});
  Var h = gru_z_.step(t, prev.h, x);
  Var stats = prior_z_.apply(t, h);
  Var mean = t.slice_cols(stats, 0, cfg_.latent_dim);
  Var raw = t.slice_cols(stats, cfg_.latent_dim, cfg_.latent_dim);
  return make_branch(t, h, mean, raw, noise);
}

template <typename T>
typename WorldModel<T>::PosteriorStep WorldModel<T>::posterior_step(
    Tape<T>& t, const Branch& prev_ctrl, const Branch& prev_free, Var obs_feat,
    Var a_prev, Var gated_s, bool feed_action_to_free,
    std::span<const T> noise_post_s, std::span<const T> noise_post_z,
    std::span<const T> noise_prior_s) const {
  const int d = cfg_.latent_dim;
  PosteriorStep out;

  // deterministic paths
  Var xs = t.concat_cols(std::array<Var, 2>{prev_ctrl.sample, a_prev});
  Var h_s = gru_s_.step(t, prev_ctrl.h, xs);
  Var a_free = feed_action_to_free ? a_prev : t.zeros(t.rows(a_prev), t.cols(a_prev));
  Var xz = t.concat_cols(std::array<Var, 3>{prev_free.sample, a_free, gated_s});
  Var h_z = gru_z_.step(t, prev_free.h, xz);

  // priors
  Var stats_ps = prior_s_.apply(t, h_s);
  out.ctrl_prior = make_branch(t, h_s, t.slice_cols(stats_ps, 0, d),
                               t.slice_cols(stats_ps, d, d), noise_prior_s);
  Var stats_pz = prior_z_.apply(t, h_z);
  out.prior_z_mean = t.slice_cols(stats_pz, 0, d);
  out.prior_z_stddev =
      t.softplus_floor(t.slice_cols(stats_pz, d, d), static_cast<T>(cfg_.min_std));

  // posteriors
  Var in_s = t.concat_cols(std::array<Var, 3>{h_s, obs_feat, a_prev});
  Var stats_qs = post_s_.apply(t, in_s);
  out.ctrl = make_branch(t, h_s, t.slice_cols(stats_qs, 0, d),
                         t.slice_cols(stats_qs, d, d), noise_post_s);
  Var in_z = t.concat_cols(std::array<Var, 3>{h_z, obs_feat, a_free});
  Var stats_qz = post_z_.apply(t, in_z);
  out.free = make_branch(t, h_z, t.slice_cols(stats_qz, 0, d),
                         t.slice_cols(stats_qz, d, d), noise_post_z);

  // balanced KL: prior side carries kl_balance of the gradient
  const T wp = static_cast<T>(cfg_.kl_balance);
  const T wq = T(1) - wp;
  out.kl_s = t.kl_diag(out.ctrl.mean, out.ctrl.stddev, out.ctrl_prior.mean,
                       out.ctrl_prior.stddev, wq, wp);
  out.kl_z = t.kl_diag(out.free.mean, out.free.stddev, out.prior_z_mean,
                       out.prior_z_stddev, wq, wp);
  return out;
}

template <typename T>
Var WorldModel<T>::inverse_action(Tape<T>& t, Var s_prev_sample, Var s_sample) const {
  Var in = t.concat_cols(std::array<Var, 2>{s_prev_sample, s_sample});
  return t.tanh_(inverse_.apply(t, in));
}

template <typename T>
typename WorldModel<T>::Recon WorldModel<T>::decode_composite(Tape<T>& t, Var feat_s,
                                                              Var feat_z,
                                                              Var static_b) const {
  const int hw = cfg_.image_size * cfg_.image_size;
  const int n = t.rows(feat_s);
  ISO_CHECK(t.rows(feat_z) == n, "decode_composite: row mismatch");

  Var out_s = dec_s_.apply(t, feat_s);
  Var out_z = dec_z_.apply(t, feat_z);
  Var out_b = static_decoder_.apply(t, static_b);

  Recon r;
  r.rgb_s = t.slice_cols(out_s, 0, 3 * hw);
  r.rgb_z = t.slice_cols(out_z, 0, 3 * hw);
  r.rgb_b = t.slice_cols(out_b, 0, 3 * hw);
  Var logit_s = t.slice_cols(out_s, 3 * hw, hw);
  Var logit_z = t.slice_cols(out_z, 3 * hw, hw);
  Var logit_b = t.slice_cols(out_b, 3 * hw, hw);

  Var rgb_b_rep = r.rgb_b;
  Var logit_b_rep = logit_b;
  if (n > 1) {
    std::vector<Var> reps(n, r.rgb_b);
    rgb_b_rep = t.stack_rows(reps);
    std::vector<Var> repl(n, logit_b);
    logit_b_rep = t.stack_rows(repl);
  }

  Var masks = t.softmax3(logit_s, logit_z, logit_b_rep);
  r.mask_s = t.slice_cols(masks, 0, hw);
  r.mask_z = t.slice_cols(masks, hw, hw);
  r.mask_b = t.slice_cols(masks, 2 * hw, hw);

  Var part = t.add(t.mul_chanbcast(r.rgb_s, r.mask_s, 3),
                   t.mul_chanbcast(r.rgb_z, r.mask_z, 3));
  r.composite = t.add(part, t.mul_chanbcast(rgb_b_rep, r.mask_b, 3));
  return r;
}

template <typename T>
Var WorldModel<T>::predict_reward(Tape<T>& t, Var feat_s, Var feat_z) const {
  Var z = cfg_.reward_uses_z ? feat_z : t.zeros(t.rows(feat_z), t.cols(feat_z));
  return reward_.apply(t, t.concat_cols(std::array<Var, 2>{feat_s, z}));
}

template <typename T>
Var WorldModel<T>::predict_discount_logit(Tape<T>& t, Var feat_s, Var feat_z) const {
  Var z = cfg_.reward_uses_z ? feat_z : t.zeros(t.rows(feat_z), t.cols(feat_z));
  return discount_.apply(t, t.concat_cols(std::array<Var, 2>{feat_s, z}));
}

template <typename T>
Var WorldModel<T>::gated_input(Tape<T>& t, const Branch& ctrl, const Branch& free,
                               GateMode mode, uint8_t* open_out) const {
  Var logit = gate_logit(t, ctrl.feat, free.feat);
  Var w = gate_value(t, logit, mode);
  if (open_out) {
    const T raw = t.value(logit)[0];
    *open_out = raw >= logit_of(static_cast<T>(cfg_.gate_threshold)) ? 1 : 0;
  }
  return t.mul_rowbcast(ctrl.feat, w);
}

namespace {

// Gathers batch rows into the step-major slab layout.
template <typename T>
void gather_slab(std::vector<T>& dst, const std::vector<float>& src, int batch,
                 int steps, int width, const std::vector<int>& elements) {
  dst.resize(static_cast<size_t>(steps) * elements.size() * width);
  size_t out = 0;
  for (int t = 0; t < steps; ++t) {
    for (int b : elements) {
      const float* row = src.data() +
                         (static_cast<size_t>(b) * steps + t) * width;
      for (int i = 0; i < width; ++i) dst[out++] = static_cast<T>(row[i]);
    }
  }
  (void)batch;
}

}  // namespace

template <typename T>
typename WorldModel<T>::SeqElement WorldModel<T>::element_from_batch(
    const SeqBatch& b, int index) {
  ISO_CHECK(index >= 0 && index < b.batch, "batch element out of range");
  SeqElement e;
  e.steps = b.steps;
  e.batch = 1;
  const std::vector<int> one{index};
  gather_slab(e.obs, b.obs, b.batch, b.steps, 3 * kImagePixels, one);
  gather_slab(e.prev_action, b.prev_action, b.batch, b.steps, 2, one);
  gather_slab(e.action, b.action, b.batch, b.steps, 2, one);
  gather_slab(e.reward, b.reward, b.batch, b.steps, 1, one);
  gather_slab(e.cont, b.cont, b.batch, b.steps, 1, one);
  return e;
}

template <typename T>
typename WorldModel<T>::SeqElement WorldModel<T>::slab_from_batch(const SeqBatch& b) {
  SeqElement e;
  e.steps = b.steps;
  e.batch = b.batch;
  std::vector<int> all(b.batch);
  for (int i = 0; i < b.batch; ++i) all[i] = i;
  gather_slab(e.obs, b.obs, b.batch, b.steps, 3 * kImagePixels, all);
  gather_slab(e.prev_action, b.prev_action, b.batch, b.steps, 2, all);
  gather_slab(e.action, b.action, b.batch, b.steps, 2, all);
  gather_slab(e.reward, b.reward, b.batch, b.steps, 1, all);
  gather_slab(e.cont, b.cont, b.batch, b.steps, 1, all);
  return e;
}

template <typename T>
typename WorldModel<T>::UnrollNoise WorldModel<T>::UnrollNoise::draw(
    int steps, int latent_dim, RngStream& rng, int batch) {
  UnrollNoise n;
  const size_t total = static_cast<size_t>(steps) * batch * latent_dim;
  n.post_s.resize(total);
  n.post_z.resize(total);
  n.prior_s.resize(total);
  for (auto& v : n.post_s) v = static_cast<T>(rng.normal());
  for (auto& v : n.post_z) v = static_cast<T>(rng.normal());
  for (auto& v : n.prior_s) v = static_cast<T>(rng.normal());
  return n;
}

template <typename T>
typename WorldModel<T>::UnrollNoise WorldModel<T>::UnrollNoise::zeros(
    int steps, int latent_dim, int batch) {
  UnrollNoise n;
  const size_t total = static_cast<size_t>(steps) * batch * latent_dim;
  n.post_s.assign(total, T(0));
  n.post_z.assign(total, T(0));
  n.prior_s.assign(total, T(0));
  return n;
}

template <typename T>
typename WorldModel<T>::ElementGraph WorldModel<T>::element_loss(
    Tape<T>& t, const SeqElement& seq, const UnrollNoise& noise,
    const LossOptions& opts) const {
  const int steps = seq.steps;
  const int K = cfg_.context_frames;
  const int d = cfg_.latent_dim;
  const int dh = cfg_.hidden_dim;
  const int dF = cfg_.branch_feature_dim();
  const int A = action_dim_;
  const int px = 3 * cfg_.image_size * cfg_.image_size;
  ISO_CHECK(steps >= K + 2, "sequence must span at least K+2 steps");
  ISO_CHECK(static_cast<int>(seq.obs.size()) == steps * px, "obs size mismatch");
  ISO_CHECK(static_cast<int>(noise.post_s.size()) == steps * d,
            "noise plan does not match the sequence");

  ElementGraph out;
  Var obs = t.constant(seq.obs, steps, px);
  Var prev_a = t.constant(seq.prev_action, steps, A);
  Var enc_feats = encode(t, obs);
  Var static_b = static_code_from_features(t, t.slice_rows(enc_feats, 0, K));

  Branch ctrl = initial_branch(t, 1);
  Branch free = initial_branch(t, 1);

  std::vector<Var> prior_feat_rows, post_s_feat_rows, post_z_feat_rows;
  std::vector<Var> post_s_samples, ctrl_h_rows, ctrl_sample_rows;
  std::vector<Var> free_h_rows, free_sample_rows, gated_rows;
  Var kl_s_total, kl_z_total;
  out.gate_open.assign(std::max(0, steps - 1), 0);

  auto noise_slice = [&](const std::vector<T>& v, int step) {
    return std::span<const T>(v.data() + static_cast<size_t>(step) * d, d);
  };

  for (int step = 0; step < steps; ++step) {
    Var gated;
    if (step == 0) {
      gated = t.zeros(1, dF);
    } else {
      uint8_t open = 0;
      gated = gated_input(t, ctrl, free, opts.gate_mode, &open);
      out.gate_open[step - 1] = open;
    }
    // replica inputs for the variance constraints reuse the exact gated value
    if (step >= 1) gated_rows.push_back(gated);

    ctrl_h_rows.push_back(ctrl.h);
    ctrl_sample_rows.push_back(ctrl.sample);
    free_h_rows.push_back(free.h);
    free_sample_rows.push_back(free.sample);

    PosteriorStep ps = posterior_step(
        t, ctrl, free, t.slice_rows(enc_feats, step, 1), t.slice_rows(prev_a, step, 1),
        gated, opts.train_mode, noise_slice(noise.post_s, step),
        noise_slice(noise.post_z, step), noise_slice(noise.prior_s, step));

    kl_s_total = step == 0 ? ps.kl_s : t.add(kl_s_total, ps.kl_s);
    kl_z_total = step == 0 ? ps.kl_z : t.add(kl_z_total, ps.kl_z);

    prior_feat_rows.push_back(ps.ctrl_prior.feat);
    post_s_feat_rows.push_back(ps.ctrl.feat);
    post_z_feat_rows.push_back(ps.free.feat);
    post_s_samples.push_back(ps.ctrl.sample);

    ctrl = ps.ctrl;
    free = ps.free;

    auto append = [&](std::vector<T>& dst, Var v) {
      auto s = t.value(v);
      dst.insert(dst.end(), s.begin(), s.end());
    };
    append(out.post_h_s, ctrl.h);
    append(out.post_s, ctrl.sample);
    append(out.post_h_z, free.h);
    append(out.post_z, free.sample);
  }

  // ---- variance constraints over hypothetical action sets --------------------
  // transitions into frames 1..steps-1 replayed from the stored posterior
  // states with {a,-a} (action-conditioned) and {a,0,-a} (action-free)
  const int R = steps - 1;
  Var actions_r = t.slice_rows(prev_a, 1, R);
  // prev-state row lists hold [initial, post_0, ..., post_{T-2}]; transitions
  // into frames 1..T-1 start from post_0..post_{T-2}
  Var h_prev_s = t.stack_rows(std::span<const Var>(ctrl_h_rows.data() + 1, R));
  Var s_prev = t.stack_rows(std::span<const Var>(ctrl_sample_rows.data() + 1, R));
  Var h_prev_z = t.stack_rows(std::span<const Var>(free_h_rows.data() + 1, R));
  Var z_prev = t.stack_rows(std::span<const Var>(free_sample_rows.data() + 1, R));
  Var gated_all = t.stack_rows(std::span<const Var>(gated_rows.data(), R));

  auto ctrl_prior_mean = [&](Var acts) {
    Var h = gru_s_.step(t, h_prev_s, t.concat_cols(std::array<Var, 2>{s_prev, acts}));
    return t.slice_cols(prior_s_.apply(t, h), 0, d);
  };
  Var m_pos = ctrl_prior_mean(actions_r);
  Var m_neg = ctrl_prior_mean(t.scale(actions_r, T(-1)));
  Var m_bar = t.scale(t.add(m_pos, m_neg), T(0.5));
  Var var_s = t.add(t.sum_sq(t.sub(m_pos, m_bar)), t.sum_sq(t.sub(m_neg, m_bar)));
  // n = 2 -> 1/(n-1) = 1

  auto free_prior_mean = [&](Var acts) {
    Var h = gru_z_.step(
        t, h_prev_z, t.concat_cols(std::array<Var, 3>{z_prev, acts, gated_all}));
    return t.slice_cols(prior_z_.apply(t, h), 0, d);
  };
  Var zm1 = free_prior_mean(actions_r);
  Var zm2 = free_prior_mean(t.zeros(R, A));
  Var zm3 = free_prior_mean(t.scale(actions_r, T(-1)));
  Var z_bar = t.scale(t.add(t.add(zm1, zm2), zm3), T(1) / T(3));
  Var var_z = t.scale(t.add(t.add(t.sum_sq(t.sub(zm1, z_bar)), t.sum_sq(t.sub(zm2, z_bar))),
                            t.sum_sq(t.sub(zm3, z_bar))),
                      T(1) / T(2));

  // detached replica means, interleaved per transition for the recomputation
  // oracle in the tests
  for (int r = 0; r < R; ++r) {
    for (Var m : {m_pos, m_neg}) {
      auto row = t.value(m).subspan(static_cast<size_t>(r) * d, d);
      out.var_replicas_s.insert(out.var_replicas_s.end(), row.begin(), row.end());
    }
    for (Var m : {zm1, zm2, zm3}) {
      auto row = t.value(m).subspan(static_cast<size_t>(r) * d, d);
      out.var_replicas_z.insert(out.var_replicas_z.end(), row.begin(), row.end());
    }
  }

  // ---- decoding and prediction heads ------------------------------------------
  Var prior_feat_s = t.stack_rows(prior_feat_rows);
  Var post_feat_s = t.stack_rows(post_s_feat_rows);
  Var post_feat_z = t.stack_rows(post_z_feat_rows);
  out.recon = decode_composite(t, prior_feat_s, post_feat_z, static_b);

  Var image_nll = t.affine_const(t.scale(t.sq_err(out.recon.composite, obs), T(0.5)),
                                 T(1), static_cast<T>(kHalfLog2Pi * px * steps));

  Var reward_hat = predict_reward(t, post_feat_s, post_feat_z);
  Var reward_label = t.constant(seq.reward, steps, 1);
  Var reward_nll = t.affine_const(t.scale(t.sq_err(reward_hat, reward_label), T(0.5)),
                                  T(1), static_cast<T>(kHalfLog2Pi * steps));

  Var disc_logit = predict_discount_logit(t, post_feat_s, post_feat_z);
  Var cont_label = t.constant(seq.cont, steps, 1);
  Var discount_nll = t.bce_logits(disc_logit, cont_label);

  Var s_all = t.stack_rows(post_s_samples);
  Var inv = inverse_action(t, t.slice_rows(s_all, 0, steps - 1),
                           t.slice_rows(s_all, 1, steps - 1));
  Var action_label = t.slice_rows(prev_a, 1, steps - 1);
  Var action_loss = t.scale(t.sq_err(inv, action_label), static_cast<T>(cfg_.alpha));

  // ---- Eq. 11 objective ---------------------------------------------------------
  Var base = t.add(image_nll, action_loss);
  base = t.add(base, reward_nll);
  base = t.add(base, discount_nll);
  base = t.add(base, t.scale(kl_s_total, static_cast<T>(cfg_.beta1)));
  if (cfg_.free_branch_kl) {
    base = t.add(base, t.scale(kl_z_total, static_cast<T>(cfg_.beta2)));
  }

  const T invT = T(1) / static_cast<T>(steps);
  Var hinge = t.relu(t.affine_const(t.scale(var_s, -invT),
                                    T(1), static_cast<T>(cfg_.variance_margin)));
  Var pen_s = t.scale(hinge, static_cast<T>(cfg_.lambda1));
  Var pen_z = t.scale(var_z, static_cast<T>(cfg_.lambda2) * invT);
  out.total = t.add(t.add(base, pen_s), pen_z);

  auto& v = out.values;
  v.image_nll = static_cast<double>(t.scalar_value(image_nll));
  v.action_loss = static_cast<double>(t.scalar_value(action_loss));
  v.reward_nll = static_cast<double>(t.scalar_value(reward_nll));
  v.discount_nll = static_cast<double>(t.scalar_value(discount_nll));
  v.kl_s = static_cast<double>(t.scalar_value(kl_s_total));
  v.kl_z = static_cast<double>(t.scalar_value(kl_z_total));
  v.var_s = static_cast<double>(t.scalar_value(var_s));
  v.var_z = static_cast<double>(t.scalar_value(var_z));
  v.var_penalty_s = static_cast<double>(t.scalar_value(pen_s));
  v.var_penalty_z = static_cast<double>(t.scalar_value(pen_z));
  v.base = static_cast<double>(t.scalar_value(base));
  v.total = static_cast<double>(t.scalar_value(out.total));
  double opens = 0;
  for (uint8_t g : out.gate_open) opens += g;
  v.gate_open_rate = out.gate_open.empty() ? 0.0 : opens / out.gate_open.size();

  check_component("image_nll", v.image_nll);
  check_component("action_loss", v.action_loss);
  check_component("reward_nll", v.reward_nll);
  check_component("discount_nll", v.discount_nll);
  check_component("kl_s", v.kl_s);
  check_component("kl_z", v.kl_z);
  check_component("variance_s", v.var_s);
  check_component("variance_z", v.var_z);
  check_component("total", v.total);
  return out;
}

template <typename T>
typename WorldModel<T>::Prediction WorldModel<T>::predict(
    Tape<T>& t, const SeqElement& seq, int context, int horizon,
    const LossOptions& opts) const {
  const int steps = seq.steps;
  const int d = cfg_.latent_dim;
  const int dF = cfg_.branch_feature_dim();
  const int A = action_dim_;
  const int px = 3 * cfg_.image_size * cfg_.image_size;
  ISO_CHECK(context >= cfg_.context_frames, "context shorter than K");
  ISO_CHECK(context + horizon <= steps,
            "prediction horizon exceeds the recorded episode");

  Var obs = t.constant(seq.obs, steps, px);
  Var prev_a = t.constant(seq.prev_action, steps, A);
  Var ctx_feats = encode(t, t.slice_rows(obs, 0, context));
  Var static_b = static_code_from_features(
      t, t.slice_rows(ctx_feats, 0, cfg_.context_frames));

  const std::vector<T> zero_noise(static_cast<size_t>(d), T(0));
  Branch ctrl = initial_branch(t, 1);
  Branch free = initial_branch(t, 1);
  std::vector<Var> feat_s_rows, feat_z_rows;

  for (int step = 0; step < context; ++step) {
    Var gated = step == 0 ? t.zeros(1, dF)
                          : gated_input(t, ctrl, free, opts.gate_mode, nullptr);
    PosteriorStep ps = posterior_step(t, ctrl, free, t.slice_rows(ctx_feats, step, 1),
                                      t.slice_rows(prev_a, step, 1), gated,
                                      opts.train_mode, zero_noise, zero_noise,
                                      zero_noise);
    feat_s_rows.push_back(ps.ctrl_prior.feat);
    feat_z_rows.push_back(ps.free.feat);
    ctrl = ps.ctrl;
    free = ps.free;
  }

  for (int step = context; step < context + horizon; ++step) {
    Var gated = gated_input(t, ctrl, free, opts.gate_mode, nullptr);
    Var a = t.slice_rows(prev_a, step, 1);
    Branch ctrl_next = prior_step_controllable(t, ctrl, a, zero_noise);
    Var a_free = opts.train_mode ? a : t.zeros(1, A);
    Branch free_next = prior_step_free(t, free, a_free, gated, zero_noise);
    // mean rollout: replace samples by means for a deterministic prediction
    ctrl_next.sample = ctrl_next.mean;
    ctrl_next.feat = t.concat_cols(std::array<Var, 2>{ctrl_next.h, ctrl_next.mean});
    free_next.sample = free_next.mean;
    free_next.feat = t.concat_cols(std::array<Var, 2>{free_next.h, free_next.mean});
    feat_s_rows.push_back(ctrl_next.feat);
    feat_z_rows.push_back(free_next.feat);
    ctrl = ctrl_next;
    free = free_next;
  }

  Prediction p;
  p.context = context;
  p.horizon = horizon;
  p.recon = decode_composite(t, t.stack_rows(feat_s_rows), t.stack_rows(feat_z_rows),
                             static_b);
  return p;
}

template class WorldModel<float>;
template class WorldModel<double>;
template float unbiased_variance<float>(std::span<const float>);
template double unbiased_variance<double>(std::span<const double>);

}  // namespace isodream
