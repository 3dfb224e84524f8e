#pragma once

#include <memory>

#include "isodream/behavior.hpp"

namespace isodream {

// World model + behavior over one parameter set. Owns the recurrent
// deployment state machinery used when interacting with the environment.
template <typename T>
class Agent {
 public:
  Agent(const WMConfig& wm_cfg, const ACConfig& ac_cfg, uint64_t seed);

  ParamSet<T>& params() { return params_; }
  const ParamSet<T>& params() const { return params_; }
  WorldModel<T>& world() { return *world_; }
  const WorldModel<T>& world() const { return *world_; }
  Behavior<T>& behavior() { return *behavior_; }
  const Behavior<T>& behavior() const { return *behavior_; }
  uint64_t seed() const { return seed_; }

  // Recurrent posterior state carried across an episode.
  struct DeployState {
    std::vector<T> h_s, s, h_z, z;
    std::vector<T> prev_action;
    bool started = false;
  };
  DeployState initial_deploy_state() const;

  // Filters the live observation into the posterior state. The action-free
  // branch receives a zero action at deployment; posterior latents are
  // sampled from `rng`.
  void observe(DeployState& st, const std::vector<T>& obs_chw, RngStream& rng) const;
  // Draws an action from the policy on the current posterior: the policy mean
  // when explore is false (a pure function of the state), a tanh-Gaussian
  // sample otherwise.
  Vec2 act(const DeployState& st, bool explore, RngStream* rng) const;
  void record_action(DeployState& st, Vec2 a) const;

 private:
  uint64_t seed_;
  ParamSet<T> params_;
  std::unique_ptr<WorldModel<T>> world_;
  std::unique_ptr<Behavior<T>> behavior_;
};

extern template class Agent<float>;
extern template class Agent<double>;

}  // namespace isodream
