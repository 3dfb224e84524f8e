#include "isodream/agent.hpp"

#include <algorithm>

namespace isodream {

template <typename T>
Agent<T>::Agent(const WMConfig& wm_cfg, const ACConfig& ac_cfg, uint64_t seed)
    : seed_(seed) {
  world_ = std::make_unique<WorldModel<T>>(wm_cfg, params_);
  behavior_ = std::make_unique<Behavior<T>>(ac_cfg, params_, world_.get());
  params_.init_all(seed);
}

template <typename T>
typename Agent<T>::DeployState Agent<T>::initial_deploy_state() const {
  DeployState st;
  const auto& wc = world_->config();
  st.h_s.assign(wc.hidden_dim, T(0));
  st.s.assign(wc.latent_dim, T(0));
  st.h_z.assign(wc.hidden_dim, T(0));
  st.z.assign(wc.latent_dim, T(0));
  st.prev_action.assign(world_->action_dim(), T(0));
  return st;
}

template <typename T>
void Agent<T>::observe(DeployState& st, const std::vector<T>& obs_chw,
                       RngStream& rng) const {
  const auto& wc = world_->config();
  const int d = wc.latent_dim;
  const int dh = wc.hidden_dim;
  const int dF = wc.branch_feature_dim();

  Tape<T> t;
  using Branch = typename WorldModel<T>::Branch;
  auto as_branch = [&](const std::vector<T>& h, const std::vector<T>& s) {
    Branch b;
    b.h = t.constant(h, 1, dh);
    b.sample = t.constant(s, 1, d);
    b.mean = b.sample;
    b.stddev = t.affine_const(t.zeros(1, d), T(0), T(1));
    b.feat = t.concat_cols(std::array<Var, 2>{b.h, b.sample});
    return b;
  };
  Branch ctrl = as_branch(st.h_s, st.s);
  Branch free = as_branch(st.h_z, st.z);

  Var gated = st.started
                  ? t.mul_rowbcast(ctrl.feat,
                                   world_->gate_value(
                                       t, world_->gate_logit(t, ctrl.feat, free.feat),
                                       GateMode::kHard))
                  : t.zeros(1, dF);

  auto draw = [&] {
    std::vector<T> v(d);
    for (auto& x : v) x = static_cast<T>(rng.normal());
    return v;
  };
  const std::vector<T> n_s = draw(), n_z = draw(), n_p = draw();

  Var obs = t.constant(obs_chw, 1, 3 * wc.image_size * wc.image_size);
  Var feat = world_->encode(t, obs);
  Var a_prev = t.constant(st.prev_action, 1, world_->action_dim());
  auto ps = world_->posterior_step(t, ctrl, free, feat, a_prev, gated,
                                   /*feed_action_to_free=*/false, n_s, n_z, n_p);

  auto copy = [&](std::vector<T>& dst, Var v) {
    auto s = t.value(v);
    dst.assign(s.begin(), s.end());
  };
  copy(st.h_s, ps.ctrl.h);
  copy(st.s, ps.ctrl.sample);
  copy(st.h_z, ps.free.h);
  copy(st.z, ps.free.sample);
  st.started = true;
}

template <typename T>
Vec2 Agent<T>::act(const DeployState& st, bool explore, RngStream* rng) const {
  ISO_CHECK(st.started, "act() before the first observation");
  ISO_CHECK(!explore || rng != nullptr, "exploration requires a noise stream");
  const auto& wc = world_->config();
  const int d = wc.latent_dim;
  const int dh = wc.hidden_dim;

  Tape<T> t;
  using Branch = typename WorldModel<T>::Branch;
  auto as_branch = [&](const std::vector<T>& h, const std::vector<T>& s) {
    Branch b;
    b.h = t.constant(h, 1, dh);
    b.sample = t.constant(s, 1, d);
    b.mean = b.sample;
    b.stddev = t.affine_const(t.zeros(1, d), T(0), T(1));
    b.feat = t.concat_cols(std::array<Var, 2>{b.h, b.sample});
    return b;
  };
  Branch ctrl = as_branch(st.h_s, st.s);
  Branch free = as_branch(st.h_z, st.z);

  Var e = behavior_->deployment_feature(t, ctrl, free);
  auto pi = behavior_->actor_stats(t, e);
  Var action;
  if (explore) {
    std::vector<T> eps(world_->action_dim());
    for (auto& x : eps) x = static_cast<T>(rng->normal());
    Var noise = t.constant(eps, 1, world_->action_dim());
    action = t.tanh_(t.add(pi.mean, t.mul(pi.stddev, noise)));
  } else {
    action = t.tanh_(pi.mean);
  }
  auto av = t.value(action);
  const double ax = std::clamp(static_cast<double>(av[0]), -1.0, 1.0);
  const double ay = std::clamp(static_cast<double>(av[1]), -1.0, 1.0);
  return {ax, ay};
}

template <typename T>
void Agent<T>::record_action(DeployState& st, Vec2 a) const {
  st.prev_action[0] = static_cast<T>(a.x);
  st.prev_action[1] = static_cast<T>(a.y);
}

template class Agent<float>;
template class Agent<double>;

}  // namespace isodream
