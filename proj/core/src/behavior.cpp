#include "isodream/behavior.hpp"

#include <cmath>
#include <numbers>

namespace isodream {

std::vector<double> lambda_returns(std::span<const double> reward,
                                   std::span<const double> value,
                                   std::span<const double> discount,
                                   double lambda) {
  const size_t n = reward.size();
  ISO_CHECK(value.size() == n && discount.size() == n,
            "lambda_returns: sequence lengths differ");
  ISO_CHECK(n >= 2, "lambda_returns: need at least two steps");
  std::vector<double> out(n - 1);
  double next = value[n - 1];
  for (size_t i = n - 1; i-- > 0;) {
    out[i] = reward[i] +
             discount[i] * ((1.0 - lambda) * value[i + 1] + lambda * next);
    next = out[i];
  }
  return out;
}

template <typename T>
Behavior<T>::Behavior(const ACConfig& cfg, ParamSet<T>& ps, const WorldModel<T>* wm)
    : cfg_(cfg), wm_(wm) {
  cfg_.validate();
  const int dF = wm->feature_dim();
  const int A = wm->action_dim();
  actor_ = Mlp<T>(ps, "actor", "pi", dF, cfg_.actor_hidden, 2 * A);
  critic_ = Mlp<T>(ps, "critic", "v", dF, cfg_.critic_hidden, 1);
  if (cfg_.learned_projection) {
    query_proj_ = LinearLayer<T>(ps, "attention", "query", dF, dF, /*bias=*/false);
    key_proj_ = LinearLayer<T>(ps, "attention", "key", dF, dF, /*bias=*/false);
  }
}

template <typename T>
Var Behavior<T>::attention_projection(Tape<T>& t, Var x,
                                      const LinearLayer<T>& proj) const {
  if (!cfg_.learned_projection) return x;
  return proj.apply(t, x);
}

template <typename T>
typename Behavior<T>::Attended Behavior<T>::future_attention(Tape<T>& t, Var s_feat,
                                                             Var z_feats) const {
  ISO_CHECK(t.rows(z_feats) >= 1, "future_attention: empty window");
  ISO_CHECK(t.cols(s_feat) == t.cols(z_feats),
            "future_attention: feature width mismatch");
  Var q = attention_projection(t, s_feat, query_proj_);
  Var k = attention_projection(t, z_feats, key_proj_);
  Attended a;
  a.weights = t.row_softmax(t.matmul_nt(q, k));    // [n, tau]
  a.e = t.add(t.matmul_nn(a.weights, z_feats), s_feat);
  return a;
}

template <typename T>
typename Behavior<T>::PolicyStats Behavior<T>::actor_stats(Tape<T>& t, Var e,
                                                           bool frozen) const {
  const int A = wm_->action_dim();
  Var stats = actor_.apply(t, e, frozen);
  PolicyStats p;
  p.mean = t.slice_cols(stats, 0, A);
  p.stddev = t.softplus_floor(t.slice_cols(stats, A, A), static_cast<T>(cfg_.min_std));
  return p;
}

template <typename T>
Var Behavior<T>::critic_value(Tape<T>& t, Var e, bool frozen) const {
  return critic_.apply(t, e, frozen);
}

template <typename T>
Var Behavior<T>::policy_entropy(Tape<T>& t, const PolicyStats& p) const {
  // diag Gaussian: sum_d (0.5 ln(2 pi e) + ln sigma_d), averaged over rows
  const int n = t.rows(p.stddev);
  const int A = t.cols(p.stddev);
  const T c = static_cast<T>(0.5 * std::log(2.0 * std::numbers::pi * std::numbers::e));
  Var s = t.sum_all(t.log_(p.stddev));
  return t.affine_const(s, T(1) / static_cast<T>(n), c * static_cast<T>(A));
}

template <typename T>
typename Behavior<T>::Trajectory Behavior<T>::imagine(Tape<T>& t,
                                                      const StartStates& start,
                                                      RngStream& noise,
                                                      GateMode gate_mode) const {
  const int n = start.n;
  ISO_CHECK(n >= 1, "imagine: no start states");
  const WMConfig& wc = wm_->config();
  const int d = wc.latent_dim;
  const int dh = wc.hidden_dim;
  const int dF = wc.branch_feature_dim();
  const int A = wm_->action_dim();
  const int L = cfg_.horizon;
  const int tau = cfg_.tau;
  const int zlen = L + std::max(tau, 1);

  auto draw = [&](int rows, int cols) {
    std::vector<T> v(static_cast<size_t>(rows) * cols);
    for (auto& x : v) x = static_cast<T>(noise.normal());
    return v;
  };

  Trajectory traj;
  traj.n = n;
  traj.horizon = L;
  traj.tau = tau;

  using Branch = typename WorldModel<T>::Branch;
  auto as_branch = [&](const std::vector<T>& h, const std::vector<T>& s) {
    Branch b;
    b.h = t.constant(h, n, dh);
    b.sample = t.constant(s, n, d);
    b.mean = b.sample;
    b.stddev = t.affine_const(t.zeros(n, d), T(0), T(1));
    b.feat = t.concat_cols(std::array<Var, 2>{b.h, b.sample});
    return b;
  };
  Branch ctrl = as_branch(start.h_s, start.s);
  Branch free = as_branch(start.h_z, start.z);

  // noncontrollable rollout; the sparse dependency is applied only to the
  // first step, where the controllable state is actually known
  traj.z_feat.push_back(free.feat);
  Var zeros_a = t.zeros(n, A);
  Var zeros_gate = t.zeros(n, dF);
  {
    Var w = wm_->gate_value(t, wm_->gate_logit(t, ctrl.feat, free.feat), gate_mode);
    Var gated = t.mul_rowbcast(ctrl.feat, w);
    Branch z_next = wm_->prior_step_free(t, free, zeros_a, gated, draw(n, d));
    traj.z_feat.push_back(z_next.feat);
    free = z_next;
  }
  for (int k = 2; k < zlen; ++k) {
    free = wm_->prior_step_free(t, free, zeros_a, zeros_gate, draw(n, d));
    traj.z_feat.push_back(free.feat);
  }

  // controllable rollout with future-state attention
  Var entropy_sum;
  for (int i = 0; i <= L; ++i) {
    Var e;
    if (tau == 0) {
      e = ctrl.feat;
    } else {
      // batched attention over the per-start windows z_feat[i .. i+tau-1]
      std::vector<Var> scores(tau);
      for (int k = 0; k < tau; ++k) {
        scores[k] = t.rowdot(ctrl.feat, traj.z_feat[i + k]);
      }
      Var w = t.row_softmax(t.concat_cols(scores));
      Var mix = t.mul_rowbcast(traj.z_feat[i], t.slice_cols(w, 0, 1));
      for (int k = 1; k < tau; ++k) {
        mix = t.add(mix, t.mul_rowbcast(traj.z_feat[i + k], t.slice_cols(w, k, 1)));
      }
      e = t.add(mix, ctrl.feat);
    }
    traj.e.push_back(e);

    PolicyStats pi = actor_stats(t, e);
    Var eps = t.constant(draw(n, A), n, A);
    Var action = t.tanh_(t.add(pi.mean, t.mul(pi.stddev, eps)));
    traj.action.push_back(action);
    Var ent = policy_entropy(t, pi);
    traj.entropy_steps.push_back(ent);
    entropy_sum = i == 0 ? ent : t.add(entropy_sum, ent);

    traj.reward.push_back(wm_->predict_reward(t, ctrl.feat, traj.z_feat[i]));
    Var cont = t.sigmoid(wm_->predict_discount_logit(t, ctrl.feat, traj.z_feat[i]));
    traj.discount.push_back(t.scale(cont, static_cast<T>(cfg_.gamma)));
    traj.value.push_back(critic_value(t, e, /*frozen=*/true));

    if (i < L) {
      ctrl = wm_->prior_step_controllable(t, ctrl, action, draw(n, d));
    }
  }
  traj.entropy = t.scale(entropy_sum, T(1) / static_cast<T>(L + 1));

  // lambda returns, backward recursion on the graph
  traj.vlambda.resize(L);
  Var next = traj.value[L];
  const T lam = static_cast<T>(cfg_.lambda_);
  for (int i = L - 1; i >= 0; --i) {
    Var boot = t.add(t.scale(traj.value[i + 1], T(1) - lam), t.scale(next, lam));
    traj.vlambda[i] = t.add(traj.reward[i], t.mul(traj.discount[i], boot));
    next = traj.vlambda[i];
  }
  return traj;
}

template <typename T>
Var Behavior<T>::actor_loss(Tape<T>& t, const Trajectory& traj) const {
  // per-trajectory sums of lambda-returns and entropy over the L return
  // steps, averaged over trajectories; the loss is the negated objective
  Var ret_sum, ent_sum;
  for (int i = 0; i < traj.horizon; ++i) {
    Var s = t.sum_all(traj.vlambda[i]);  // sum over trajectories
    ret_sum = i == 0 ? s : t.add(ret_sum, s);
    ent_sum = i == 0 ? traj.entropy_steps[i]
                     : t.add(ent_sum, traj.entropy_steps[i]);
  }
  Var objective = t.add(t.scale(ret_sum, T(1) / static_cast<T>(traj.n)),
                        t.scale(ent_sum, static_cast<T>(cfg_.entropy_weight)));
  return t.scale(objective, T(-1));
}

template <typename T>
typename Behavior<T>::CriticBatch Behavior<T>::critic_batch(const Tape<T>& t,
                                                            const Trajectory& traj) {
  CriticBatch b;
  for (int i = 0; i < traj.horizon; ++i) {
    auto e = t.value(traj.e[i]);
    auto v = t.value(traj.vlambda[i]);
    b.e.insert(b.e.end(), e.begin(), e.end());
    b.targets.insert(b.targets.end(), v.begin(), v.end());
    b.rows += t.rows(traj.e[i]);
  }
  return b;
}

template <typename T>
Var Behavior<T>::critic_loss(Tape<T>& t, const CriticBatch& batch,
                             int n_trajectories) const {
  ISO_CHECK(batch.rows >= 1, "critic_loss: empty batch");
  const int dF = static_cast<int>(batch.e.size()) / batch.rows;
  Var e = t.constant(batch.e, batch.rows, dF);
  Var target = t.constant(batch.targets, batch.rows, 1);
  Var v = critic_value(t, e, /*frozen=*/false);
  return t.scale(t.sq_err(v, target), T(1) / static_cast<T>(n_trajectories));
}

template <typename T>
Var Behavior<T>::deployment_feature(Tape<T>& t,
                                    const typename WorldModel<T>::Branch& ctrl_post,
                                    const typename WorldModel<T>::Branch& free_post) const {
  if (cfg_.tau == 0) return ctrl_post.feat;
  const int d = wm_->config().latent_dim;
  const int A = wm_->action_dim();
  const std::vector<T> zero_noise(static_cast<size_t>(d), T(0));
  std::vector<Var> window;
  window.push_back(free_post.feat);
  using Branch = typename WorldModel<T>::Branch;
  Branch cur = free_post;
  Var zeros_a = t.zeros(1, A);
  for (int k = 1; k < cfg_.tau; ++k) {
    Var gated;
    if (k == 1) {
      Var w = wm_->gate_value(t, wm_->gate_logit(t, ctrl_post.feat, cur.feat),
                              GateMode::kHard);
      gated = t.mul_rowbcast(ctrl_post.feat, w);
    } else {
      gated = t.zeros(1, wm_->feature_dim());
    }
    Branch next = wm_->prior_step_free(t, cur, zeros_a, gated, zero_noise);
    // mean rollout keeps acting deterministic for a fixed posterior
    next.sample = next.mean;
    next.feat = t.concat_cols(std::array<Var, 2>{next.h, next.mean});
    window.push_back(next.feat);
    cur = next;
  }
  return future_attention(t, ctrl_post.feat, t.stack_rows(window)).e;
}

template class Behavior<float>;
template class Behavior<double>;

}  // namespace isodream
