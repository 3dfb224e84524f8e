#pragma once

#include <deque>

#include "isodream/episode.hpp"
#include "isodream/rng.hpp"

namespace isodream {

// Training window of B sequences, each T steps long, arrival-aligned:
// obs[b,t] pairs with prev_action[b,t] (the action that led to it), the
// reward that arrived with it and cont[b,t] = 0 iff the frame is terminal.
struct SeqBatch {
  int batch = 0, steps = 0;
  std::vector<float> obs;          // [B, T, 3*H*W]
  std::vector<float> prev_action;  // [B, T, 2]
  std::vector<float> action;       // [B, T, 2] executed at the frame (last row zero-padded)
  std::vector<float> reward;       // [B, T]
  std::vector<float> cont;         // [B, T]
  std::vector<uint8_t> event;      // [B, T] deflection during the outgoing step
};

// Episode ring bounded by total step count. Sampled windows never cross an
// episode boundary.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(long capacity_steps) : capacity_(capacity_steps) {}

  void add(Episode ep);
  long total_steps() const { return total_steps_; }
  int episode_count() const { return static_cast<int>(episodes_.size()); }
  const Episode& episode(int i) const { return episodes_[i]; }

  long window_count(int steps) const;
  bool can_sample(int batch, int steps) const;
  SeqBatch sample(int batch, int steps, RngStream& rng) const;

  // (episode, start-frame) of the k-th valid window; exposed so tests can
  // enumerate the sampler's support exhaustively.
  std::pair<int, int> window_index(long k, int steps) const;

 private:
  std::deque<Episode> episodes_;
  long total_steps_ = 0;
  long capacity_ = 0;
};

}  // namespace isodream
