#pragma once

#include <array>
#include <cstdint>
#include <string>

#include "isodream/env.hpp"

namespace isodream {

struct WMConfig {
  double alpha = 1.0;    // action-loss weight
  double beta1 = 1.0;    // KL weight, action-conditioned branch
  double beta2 = 1.0;    // KL weight, action-free branch
  double lambda1 = 1.0;  // variance weight, action-conditioned branch
  double lambda2 = 1.0;  // variance weight, action-free branch
  double variance_margin = 1.0;
  int context_frames = 2;  // K
  int latent_dim = 32;     // stochastic width d
  int hidden_dim = 128;    // deterministic width d_h
  int static_dim = 32;     // d_b
  int feature_dim = 128;   // shared-encoder output
  int head_hidden = 64;    // hidden width of posterior/prior/reward/discount MLPs
  int image_size = 32;
  std::array<int, 3> enc_channels{12, 24, 32};
  double min_std = 0.1;
  double kl_balance = 0.8;      // prior-side share of the KL gradient
  double gate_threshold = 0.5;  // sigmoid threshold of the dependency gate
  bool reward_uses_z = true;    // feed action-free features to reward/discount heads
  bool free_branch_kl = true;   // disable for the reconstruction-only variant

  int branch_feature_dim() const { return hidden_dim + latent_dim; }
  void validate() const;
};

struct ACConfig {
  int horizon = 15;  // L
  int tau = 5;       // future-attention window; 0 disables the rollout (e = s)
  double gamma = 0.99;
  double lambda_ = 0.95;
  double entropy_weight = 1e-4;
  double actor_lr = 8e-5;
  double critic_lr = 8e-5;
  int actor_hidden = 128;
  int critic_hidden = 128;
  double min_std = 0.1;            // policy head
  bool learned_projection = false; // optional query/key maps in the attention
  int imagine_stride = 1;          // use every n-th posterior as a start state

  void validate() const;
};

struct TrainConfig {
  long total_env_steps = 50000;
  int prefill_steps = 1000;
  int train_every = 8;  // env steps per gradient update after prefill
  int batch_size = 8;
  int sequence_length = 16;
  long buffer_capacity = 100000;
  double wm_lr = 3e-4;
  double grad_clip = 100.0;
  long eval_interval = 10000;
  int eval_episodes = 5;
  long checkpoint_interval = 25000;
  uint64_t seed = 0;

  void validate() const;
};

struct RunConfig {
  EnvConfig env;
  WMConfig world_model;
  ACConfig behavior;
  TrainConfig train;

  void validate() const;

  // Canonical JSON: fixed key order, shortest-round-trip numbers. Two equal
  // configs serialize to identical bytes, so the hash doubles as a run id.
  std::string to_json(int indent = 2) const;
  static RunConfig from_json(const std::string& text);  // unknown keys error
  static RunConfig load_file(const std::string& path);
  std::string config_hash() const;  // sha256 hex of canonical JSON
};

}  // namespace isodream
