#pragma once

#include <span>
#include <vector>

#include "isodream/world_model.hpp"

namespace isodream {

// Plain lambda-return recursion:
//   V_i = r_i + d_i * ((1-lambda) v_{i+1} + lambda V_{i+1}),  V_last = v_last
// Inputs share one length N >= 2; the result has N-1 entries. d is the full
// per-step discount (continuation probability already scaled by gamma).
std::vector<double> lambda_returns(std::span<const double> reward,
                                   std::span<const double> value,
                                   std::span<const double> discount,
                                   double lambda);

// Actor-critic learned inside the world model's imagination. The policy sees
// a "visionary" state e: the controllable feature fused with a window of
// rolled-out noncontrollable features through softmax dot-product attention.
template <typename T>
class Behavior {
 public:
  Behavior(const ACConfig& cfg, ParamSet<T>& params, const WorldModel<T>* wm);

  const ACConfig& config() const { return cfg_; }

  struct Attended {
    Var e;        // [n, dF]
    Var weights;  // [n, tau]
  };
  // e = softmax(s z^T) z + s over a window of tau z-features. s:[1,dF],
  // z:[tau,dF]. The batched imagination path reproduces this row-wise.
  Attended future_attention(Tape<T>& t, Var s_feat, Var z_feats) const;

  struct PolicyStats {
    Var mean, stddev;  // pre-squash Gaussian
  };
  PolicyStats actor_stats(Tape<T>& t, Var e, bool frozen = false) const;
  Var critic_value(Tape<T>& t, Var e, bool frozen) const;

  // Gaussian entropy of the pre-squash policy, summed over action dims,
  // averaged over rows.
  Var policy_entropy(Tape<T>& t, const PolicyStats& p) const;

  struct StartStates {
    int n = 0;
    std::vector<T> h_s, s, h_z, z;  // [n * dim] row-major
  };

  struct Trajectory {
    int n = 0, horizon = 0, tau = 0;
    std::vector<Var> z_feat;   // L + max(tau,1) feature rows [n, dF]
    std::vector<Var> e;        // L + 1
    std::vector<Var> action;   // L + 1, [n, A]
    std::vector<Var> reward;   // L + 1, [n, 1]
    std::vector<Var> discount; // L + 1, [n, 1] (gamma * continue prob)
    std::vector<Var> value;    // L + 1, [n, 1]
    std::vector<Var> vlambda;  // L, [n, 1]
    std::vector<Var> entropy_steps;  // L + 1 scalars, mean-over-starts entropy
    Var entropy;               // [1,1], mean per-step policy entropy
  };

  // Rolls the imagination graph. The dependency gate conditions only the
  // first noncontrollable step; later steps run action-free with the gate
  // closed. The critic is applied with frozen weights so that the actor
  // objective cannot reach critic parameters.
  Trajectory imagine(Tape<T>& t, const StartStates& start, RngStream& noise,
                     GateMode gate_mode = GateMode::kHard) const;

  // -(1/n) sum_traj [ sum_i V_i + eta * entropy ]
  Var actor_loss(Tape<T>& t, const Trajectory& traj) const;

  struct CriticBatch {
    int rows = 0;
    std::vector<T> e;        // [rows, dF], detached imagined features
    std::vector<T> targets;  // [rows, 1], detached lambda-returns
  };
  static CriticBatch critic_batch(const Tape<T>& t, const Trajectory& traj);
  // (1/n) sum_traj sum_i (v(e_i) - sg(V_i))^2 on detached features.
  Var critic_loss(Tape<T>& t, const CriticBatch& batch, int n_trajectories) const;

  // Deployment feature: window [z_t, z~_{t+1..t+tau-1}] where the first
  // rolled step uses the gate on the live posteriors and later steps run
  // action-free; the rollout follows prior means so acting is deterministic.
  Var deployment_feature(Tape<T>& t, const typename WorldModel<T>::Branch& ctrl_post,
                         const typename WorldModel<T>::Branch& free_post) const;

 private:
  Var attention_projection(Tape<T>& t, Var x, const LinearLayer<T>& proj) const;

  ACConfig cfg_;
  const WorldModel<T>* wm_ = nullptr;
  Mlp<T> actor_;
  Mlp<T> critic_;
  LinearLayer<T> query_proj_, key_proj_;  // only registered when enabled
};

extern template class Behavior<float>;
extern template class Behavior<double>;

}  // namespace isodream
