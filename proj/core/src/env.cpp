#include "isodream/env.hpp"

#include <algorithm>
#include <cmath>

namespace isodream {

namespace {

constexpr double kQuant = 65536.0;  // fixed-point scale for the render rule
constexpr int kCheckerTile = 8;     // pixels per checker cell

inline double clamp(double v, double lo, double hi) {
  return std::min(std::max(v, lo), hi);
}

// Reflects p into [lo, hi], flipping the sign of v on each bounce.
void reflect_axis(double& p, double& v, double lo, double hi) {
  // the per-step travel is far below the band width, so one pass suffices;
  // loop anyway to keep the invariant unconditional
  for (int guard = 0; guard < 8 && (p < lo || p > hi); ++guard) {
    if (p < lo) {
      p = 2.0 * lo - p;
      v = -v;
    } else if (p > hi) {
      p = 2.0 * hi - p;
      v = -v;
    }
  }
}

inline Vec2 clip_action(Vec2 a) {
  return {clamp(a.x, -1.0, 1.0), clamp(a.y, -1.0, 1.0)};
}

}  // namespace

void EnvConfig::validate() const {
  ISO_CHECK(arena_size == 1.0, "arena_size other than 1.0 is not supported");
  ISO_CHECK(agent_radius > 0.0 && agent_radius < 0.25, "agent radius out of range");
  ISO_CHECK(ball_radius > 0.0 && ball_radius < 0.25, "ball radius out of range");
  ISO_CHECK(ball_speed > 0.0 && ball_speed < 0.1, "ball speed out of range");
  ISO_CHECK(dt > 0.0, "dt must be positive");
  ISO_CHECK(ball_count >= 0, "ball count must be nonnegative");
  ISO_CHECK(episode_length > 0, "episode length must be positive");
}

std::array<std::array<float, 3>, 4> render_palette(const EnvConfig& cfg) {
  return {{{0.35f, 0.35f, 0.35f},
           {0.55f, 0.55f, 0.55f},
           {0.85f, 0.15f, 0.10f},
           cfg.agent_color}};
}

void colorize(const std::array<uint8_t, kImagePixels>& ids,
              const std::array<std::array<float, 3>, 4>& palette,
              std::vector<float>& image_chw) {
  image_chw.resize(3 * kImagePixels);
  for (int i = 0; i < kImagePixels; ++i) {
    const auto& c = palette[ids[i]];
    image_chw[i] = c[0];
    image_chw[kImagePixels + i] = c[1];
    image_chw[2 * kImagePixels + i] = c[2];
  }
}

BouncerEnv::BouncerEnv(const EnvConfig& cfg, uint64_t seed)
    : cfg_(cfg), seed_(seed), palette_(render_palette(cfg)) {
  cfg_.validate();
  reset();
}

Observation BouncerEnv::reset(uint64_t seed) {
  seed_ = seed;
  return reset();
}

Observation BouncerEnv::reset() {
  RngStream rng = RngStream::derive(seed_, "env_reset");
  state_ = EnvState{};
  state_.rng_state = seed_;
  state_.agent = {0.1, 0.5};
  state_.agent_vel = {0.0, 0.0};
  state_.balls.clear();
  const double lo = cfg_.ball_radius;
  const double hi = 1.0 - cfg_.ball_radius;
  for (int i = 0; i < cfg_.ball_count; ++i) {
    Ball b;
    // keep spawns clear of the agent so an episode never opens on a deflection
    for (;;) {
      b.pos.x = rng.uniform(lo, hi);
      b.pos.y = rng.uniform(lo, hi);
      const double dx = b.pos.x - state_.agent.x;
      const double dy = b.pos.y - state_.agent.y;
      if (dx * dx + dy * dy >= 4.0 * cfg_.deflect_radius() * cfg_.deflect_radius()) {
        break;
      }
    }
    // direction by rejection sampling; sqrt only, so the stream is portable
    for (;;) {
      const double ux = rng.uniform(-1.0, 1.0);
      const double uy = rng.uniform(-1.0, 1.0);
      const double n2 = ux * ux + uy * uy;
      if (n2 >= 0.0625 && n2 <= 1.0) {
        const double inv = cfg_.ball_speed / std::sqrt(n2);
        b.vel = {ux * inv, uy * inv};
        break;
      }
    }
    state_.balls.push_back(b);
  }
  return render(cfg_, state_, false);
}

std::pair<bool, double> BouncerEnv::advance(const EnvConfig& cfg,
                                            EnvState& state, Vec2 action) {
  const Vec2 a = clip_action(action);
  const double old_x = state.agent.x;
  const double old_y = state.agent.y;
  state.agent.x = clamp(state.agent.x + a.x * cfg.dt, cfg.agent_radius,
                        1.0 - cfg.agent_radius);
  state.agent.y = clamp(state.agent.y + a.y * cfg.dt, cfg.agent_radius,
                        1.0 - cfg.agent_radius);
  state.agent_vel = {(state.agent.x - old_x) / cfg.dt,
                     (state.agent.y - old_y) / cfg.dt};

  const double lo = cfg.ball_radius;
  const double hi = 1.0 - cfg.ball_radius;
  bool collision = false;
  for (auto& b : state.balls) {
    b.pos.x += b.vel.x;
    b.pos.y += b.vel.y;
    reflect_axis(b.pos.x, b.vel.x, lo, hi);
    reflect_axis(b.pos.y, b.vel.y, lo, hi);
    const double dx = b.pos.x - state.agent.x;
    const double dy = b.pos.y - state.agent.y;
    const double d2 = dx * dx + dy * dy;
    const double rd = cfg.deflect_radius();
    if (d2 < rd * rd) {
      collision = true;
      if (d2 > 0.0) {
        const double inv = cfg.ball_speed / std::sqrt(d2);
        b.vel = {dx * inv, dy * inv};
      } else {
        b.vel = {cfg.ball_speed, 0.0};
      }
    }
  }
  return {collision, state.agent.x - old_x};
}

StepResult BouncerEnv::step(Vec2 action) {
  ISO_CHECK(!state_.done, "step() on a finished episode");
  const Vec2 a = clip_action(action);
  auto [collision, dx] = advance(cfg_, state_, a);
  state_.step += 1;
  state_.done = state_.step >= cfg_.episode_length;

  StepResult r;
  r.reward = dx - cfg_.collision_penalty * (collision ? 1.0 : 0.0) -
             cfg_.lateral_penalty * std::fabs(a.y) * cfg_.dt;
  r.done = state_.done;
  r.obs = render(cfg_, state_, collision);
  return r;
}

bool BouncerEnv::ground_truth_event(const EnvConfig& cfg, const EnvState& state,
                                    Vec2 action) {
  EnvState copy = state;
  return advance(cfg, copy, action).first;
}

std::array<uint8_t, kImagePixels> BouncerEnv::render_ids(const EnvConfig& cfg,
                                                         const EnvState& state) {
  std::array<uint8_t, kImagePixels> ids;
  // checker background
  for (int py = 0; py < kImageSize; ++py) {
    for (int px = 0; px < kImageSize; ++px) {
      const bool odd = ((px / kCheckerTile) + (py / kCheckerTile)) % 2 != 0;
      ids[py * kImageSize + px] = odd ? kPixCheckerB : kPixCheckerA;
    }
  }
  // quantized disk test: pixel centers and radii on a 1/65536 grid, compared
  // in exact int64 arithmetic so renders are bit-identical across platforms
  auto draw_disk = [&ids](double cx, double cy, double radius, uint8_t id) {
    const int64_t qx = llround(cx * kQuant);
    const int64_t qy = llround(cy * kQuant);
    const int64_t qr = llround(radius * kQuant);
    const int64_t r2 = qr * qr;
    for (int py = 0; py < kImageSize; ++py) {
      const int64_t wy = llround((py + 0.5) * (kQuant / kImageSize));
      const int64_t dy = wy - qy;
      if (dy * dy > r2) continue;
      for (int px = 0; px < kImageSize; ++px) {
        const int64_t wx = llround((px + 0.5) * (kQuant / kImageSize));
        const int64_t dx = wx - qx;
        if (dx * dx + dy * dy <= r2) ids[py * kImageSize + px] = id;
      }
    }
  };
  for (const auto& b : state.balls) {
    draw_disk(b.pos.x, b.pos.y, cfg.ball_radius, kPixBall);
  }
  draw_disk(state.agent.x, state.agent.y, cfg.agent_radius, kPixAgent);
  return ids;
}

Observation BouncerEnv::render(const EnvConfig& cfg, const EnvState& state,
                               bool collision_flag) {
  Observation o;
  o.ids = render_ids(cfg, state);
  colorize(o.ids, render_palette(cfg), o.image);
  for (int i = 0; i < kImagePixels; ++i) {
    o.gt_agent_mask[i] = o.ids[i] == kPixAgent ? 1 : 0;
    o.gt_ball_mask[i] = o.ids[i] == kPixBall ? 1 : 0;
  }
  o.collision_flag = collision_flag;
  return o;
}

}  // namespace isodream
