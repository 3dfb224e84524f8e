#include "isodream/replay_buffer.hpp"

#include <cstring>

namespace isodream {

void ReplayBuffer::add(Episode ep) {
  ISO_CHECK(ep.length > 0, "cannot add an empty episode");
  total_steps_ += ep.length;
  episodes_.push_back(std::move(ep));
  while (total_steps_ > capacity_ && episodes_.size() > 1) {
    total_steps_ -= episodes_.front().length;
    episodes_.pop_front();
  }
}

long ReplayBuffer::window_count(int steps) const {
  long n = 0;
  for (const auto& ep : episodes_) {
    const long w = ep.frame_count() - steps + 1;
    if (w > 0) n += w;
  }
  return n;
}

bool ReplayBuffer::can_sample(int batch, int steps) const {
  return batch >= 1 && window_count(steps) >= 1;
}

std::pair<int, int> ReplayBuffer::window_index(long k, int steps) const {
  for (size_t i = 0; i < episodes_.size(); ++i) {
    const long w = episodes_[i].frame_count() - steps + 1;
    if (w <= 0) continue;
    if (k < w) return {static_cast<int>(i), static_cast<int>(k)};
    k -= w;
  }
  throw ContractError("window index out of range");
}

SeqBatch ReplayBuffer::sample(int batch, int steps, RngStream& rng) const {
  ISO_CHECK(can_sample(batch, steps), "buffer has no window of the requested length");
  const long windows = window_count(steps);
  const int px = 3 * kImagePixels;

  SeqBatch out;
  out.batch = batch;
  out.steps = steps;
  out.obs.resize(static_cast<size_t>(batch) * steps * px);
  out.prev_action.assign(static_cast<size_t>(batch) * steps * 2, 0.0f);
  out.action.assign(static_cast<size_t>(batch) * steps * 2, 0.0f);
  out.reward.assign(static_cast<size_t>(batch) * steps, 0.0f);
  out.cont.assign(static_cast<size_t>(batch) * steps, 1.0f);
  out.event.assign(static_cast<size_t>(batch) * steps, 0);

  std::vector<float> chw;
  for (int b = 0; b < batch; ++b) {
    const auto [ei, start] = window_index(
        static_cast<long>(rng.uniform_int(static_cast<uint64_t>(windows))), steps);
    const Episode& ep = episodes_[ei];
    for (int t = 0; t < steps; ++t) {
      const int ft = start + t;
      ep.expand_frame(ft, chw);
      std::memcpy(out.obs.data() + (static_cast<size_t>(b) * steps + t) * px,
                  chw.data(), sizeof(float) * px);
      const auto pa = ep.prev_action(ft);
      out.prev_action[(static_cast<size_t>(b) * steps + t) * 2] = pa[0];
      out.prev_action[(static_cast<size_t>(b) * steps + t) * 2 + 1] = pa[1];
      if (ft < ep.length) {
        out.action[(static_cast<size_t>(b) * steps + t) * 2] = ep.actions[ft][0];
        out.action[(static_cast<size_t>(b) * steps + t) * 2 + 1] = ep.actions[ft][1];
        out.event[static_cast<size_t>(b) * steps + t] = ep.collisions[ft];
      }
      out.reward[static_cast<size_t>(b) * steps + t] = ep.arrival_reward(ft);
      out.cont[static_cast<size_t>(b) * steps + t] = ep.terminal_frame(ft) ? 0.0f : 1.0f;
    }
  }
  return out;
}

}  // namespace isodream
