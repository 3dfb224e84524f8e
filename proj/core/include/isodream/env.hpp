#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "isodream/common.hpp"
#include "isodream/rng.hpp"

namespace isodream {

constexpr int kImageSize = 32;
constexpr int kImagePixels = kImageSize * kImageSize;
constexpr int kActionDim = 2;

struct Vec2 {
  double x = 0.0, y = 0.0;
};

struct EnvConfig {
  double arena_size = 1.0;
  double agent_radius = 0.06;
  int ball_count = 2;
  double ball_radius = 0.06;
  double ball_speed = 0.03;
  double dt = 0.05;
  double collision_penalty = 1.0;  // xi1
  double lateral_penalty = 1.0;    // xi2
  int episode_length = 200;
  std::array<float, 3> agent_color{0.10f, 0.80f, 0.25f};

  double deflect_radius() const { return agent_radius + ball_radius; }
  void validate() const;
};

struct Ball {
  Vec2 pos, vel;
};

// Fully determines the future given the action sequence.
struct EnvState {
  Vec2 agent;
  Vec2 agent_vel;
  std::vector<Ball> balls;
  int step = 0;
  bool done = false;
  uint64_t rng_state = 0;  // stream key used at reset; dynamics draw nothing
};

// Pixel ids used by the renderer; the agent is drawn last, so overlap
// pixels resolve to the agent and the ground-truth masks stay disjoint.
enum PixelId : uint8_t {
  kPixCheckerA = 0,
  kPixCheckerB = 1,
  kPixBall = 2,
  kPixAgent = 3,
};

struct Observation {
  std::array<uint8_t, kImagePixels> ids{};
  std::vector<float> image;  // [3 * 32 * 32], CHW, values in [0,1]
  std::array<uint8_t, kImagePixels> gt_agent_mask{};
  std::array<uint8_t, kImagePixels> gt_ball_mask{};
  bool collision_flag = false;
};

struct StepResult {
  Observation obs;
  double reward = 0.0;
  bool done = false;
};

// RGB palette in palette-id order (checker A, checker B, ball, agent).
std::array<std::array<float, 3>, 4> render_palette(const EnvConfig& cfg);
void colorize(const std::array<uint8_t, kImagePixels>& ids,
              const std::array<std::array<float, 3>, 4>& palette,
              std::vector<float>& image_chw);

// Deterministic rightward-progress arena: a controllable agent disk among
// free-moving balls that deflect away when the agent touches them.
class BouncerEnv {
 public:
  BouncerEnv(const EnvConfig& cfg, uint64_t seed);

  Observation reset();
  Observation reset(uint64_t seed);
  StepResult step(Vec2 action);

  const EnvConfig& config() const { return cfg_; }
  const EnvState& state() const { return state_; }
  // Replaces the current state (tests and replay tooling).
  void set_state(const EnvState& s) { state_ = s; }

  // True iff applying `action` to `state` triggers a deflection. This is the
  // gate-evaluation label; step() sets collision_flag to the same value
  // computed one step earlier.
  static bool ground_truth_event(const EnvConfig& cfg, const EnvState& state,
                                 Vec2 action);
  // Pure render of a state to palette ids using the quantized disk rule.
  static std::array<uint8_t, kImagePixels> render_ids(const EnvConfig& cfg,
                                                      const EnvState& state);
  static Observation render(const EnvConfig& cfg, const EnvState& state,
                            bool collision_flag);

 private:
  // Moves agent and balls in place; returns (collision, x-displacement).
  static std::pair<bool, double> advance(const EnvConfig& cfg, EnvState& state,
                                         Vec2 action);

  EnvConfig cfg_;
  uint64_t seed_;
  EnvState state_;
  std::array<std::array<float, 3>, 4> palette_;
};

}  // namespace isodream
