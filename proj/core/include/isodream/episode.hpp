#pragma once

#include <array>
#include <string>
#include <vector>

#include "isodream/env.hpp"

namespace isodream {

// One finished episode. Frames are kept as palette ids (4 entries) and
// expanded to float images on demand, which keeps a full replay buffer small.
//
// Index conventions: there are `length` transitions and `length + 1` frames.
// actions[t] is the action executed at frame t; rewards[t] and collisions[t]
// belong to the transition from frame t to frame t+1. The reward "arrives"
// with frame t+1, which is the alignment the reward predictor is trained
// under (a frame's recurrent state has seen the action that led to it).
struct Episode {
  std::array<std::array<float, 3>, 4> palette{};
  std::string config_hash;
  uint64_t seed = 0;
  int length = 0;
  std::vector<std::array<uint8_t, kImagePixels>> frames;  // length + 1
  std::vector<std::array<float, 2>> actions;              // length
  std::vector<float> rewards;                             // length
  std::vector<uint8_t> collisions;                        // length
  double episode_return = 0.0;

  int frame_count() const { return static_cast<int>(frames.size()); }
  void expand_frame(int t, std::vector<float>& chw) const;
  std::array<uint8_t, kImagePixels> agent_mask(int t) const;
  std::array<uint8_t, kImagePixels> ball_mask(int t) const;

  // Arrival-aligned accessors for training windows.
  // prev_action(t): the executed action that led to frame t (zero at t=0).
  std::array<float, 2> prev_action(int t) const;
  float arrival_reward(int t) const;  // 0 at t=0
  bool terminal_frame(int t) const { return t == length; }
};

// Rolls one episode with a caller-supplied policy.
template <typename Policy>
Episode run_episode(BouncerEnv& env, uint64_t seed, const std::string& config_hash,
                    Policy&& policy) {
  Episode ep;
  ep.palette = render_palette(env.config());
  ep.config_hash = config_hash;
  ep.seed = seed;
  Observation obs = env.reset(seed);
  ep.frames.push_back(obs.ids);
  for (int t = 0; t < env.config().episode_length; ++t) {
    const Vec2 a = policy(obs, t);
    StepResult r = env.step(a);
    ep.actions.push_back({static_cast<float>(a.x), static_cast<float>(a.y)});
    ep.rewards.push_back(static_cast<float>(r.reward));
    ep.collisions.push_back(r.obs.collision_flag ? 1 : 0);
    ep.episode_return += r.reward;
    ep.frames.push_back(r.obs.ids);
    obs = r.obs;
    if (r.done) break;
  }
  ep.length = static_cast<int>(ep.actions.size());
  return ep;
}

// ISODEP1 container: 8-byte magic ("ISODEP1" + NUL), little-endian u64 JSON
// header length, UTF-8 JSON header, then raw data sections in header order:
// float32 images (frame-major CHW), float32 actions, float32 rewards,
// uint8 collision flags, uint8 agent masks, uint8 ball masks.
void write_isodep1(const Episode& ep, const std::string& path);
Episode read_isodep1(const std::string& path);

}  // namespace isodream
