#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "isodream/env.hpp"

using namespace isodream;

namespace {

EnvConfig default_cfg() { return EnvConfig{}; }

bool images_equal(const Observation& a, const Observation& b) {
  return a.ids == b.ids && a.image == b.image;
}

}  // namespace

TEST_CASE("reset: same seed gives bit-identical observations") {
  BouncerEnv e1(default_cfg(), 42);
  BouncerEnv e2(default_cfg(), 42);
  CHECK(images_equal(e1.reset(), e2.reset()));
  // and identical rollouts under the same actions
  for (int i = 0; i < 20; ++i) {
    const Vec2 a{std::sin(i * 0.3), std::cos(i * 0.41)};
    auto r1 = e1.step(a);
    auto r2 = e2.step(a);
    CHECK(r1.reward == r2.reward);
    CHECK(images_equal(r1.obs, r2.obs));
  }
}

TEST_CASE("reset: zero balls means empty ball mask") {
  EnvConfig cfg = default_cfg();
  cfg.ball_count = 0;
  BouncerEnv env(cfg, 1);
  auto obs = env.reset();
  for (uint8_t m : obs.gt_ball_mask) CHECK(m == 0);
}

TEST_CASE("reset: seed 7 matches the golden ball placement") {
  BouncerEnv env(default_cfg(), 7);
  env.reset();
  const auto& st = env.state();
  REQUIRE(st.balls.size() == 2);

  std::ifstream golden("tests/golden/env_seed7.txt");
  if (!golden.is_open()) golden.open("../tests/golden/env_seed7.txt");
  if (!golden.is_open()) golden.open(std::string(ISODREAM_SOURCE_DIR) + "/tests/golden/env_seed7.txt");
  REQUIRE(golden.is_open());
  for (const auto& b : st.balls) {
    double px, py, vx, vy;
    golden >> px >> py >> vx >> vy;
    CHECK(b.pos.x == doctest::Approx(px).epsilon(1e-15));
    CHECK(b.pos.y == doctest::Approx(py).epsilon(1e-15));
    CHECK(b.vel.x == doctest::Approx(vx).epsilon(1e-15));
    CHECK(b.vel.y == doctest::Approx(vy).epsilon(1e-15));
  }
}

TEST_CASE("step rewards match the adapted formula") {
  EnvConfig cfg = default_cfg();
  cfg.ball_count = 0;  // no collisions possible
  BouncerEnv env(cfg, 3);
  env.reset();
  // forward progress: r = 1 * dt
  auto r = env.step({1.0, 0.0});
  CHECK(r.reward == doctest::Approx(0.05));
  // pure lateral: r = -xi2 * |a_y| * dt
  auto r2 = env.step({0.0, 1.0});
  CHECK(r2.reward == doctest::Approx(-0.05));
}

TEST_CASE("ball reflects specularly at the wall") {
  EnvConfig cfg = default_cfg();
  cfg.ball_count = 1;
  BouncerEnv env(cfg, 5);
  env.reset();
  EnvState st = env.state();
  // ball touching the right wall (center at the reflection band edge),
  // moving outward
  st.balls[0].pos = {1.0 - cfg.ball_radius, 0.2};
  st.balls[0].vel = {cfg.ball_speed, 0.0};
  env.set_state(st);
  env.step({0.0, 0.0});
  CHECK(env.state().balls[0].vel.x == doctest::Approx(-cfg.ball_speed));
  CHECK(env.state().balls[0].vel.y == doctest::Approx(0.0));
  CHECK(env.state().balls[0].pos.x ==
        doctest::Approx((1.0 - cfg.ball_radius) - cfg.ball_speed));
}

TEST_CASE("render: purity and agent-only difference equals the gt mask") {
  EnvConfig cfg = default_cfg();
  cfg.ball_count = 0;
  BouncerEnv env(cfg, 9);
  env.reset();
  auto a = BouncerEnv::render(cfg, env.state(), false);
  auto b = BouncerEnv::render(cfg, env.state(), false);
  CHECK(images_equal(a, b));

  // pixels differing from the plain background are exactly the agent mask
  EnvState empty = env.state();
  empty.agent = {-10.0, -10.0};  // off-canvas; nothing drawn
  auto bg = BouncerEnv::render_ids(cfg, empty);
  for (int i = 0; i < kImagePixels; ++i) {
    const bool differs = a.ids[i] != bg[i];
    CHECK(differs == (a.gt_agent_mask[i] == 1));
  }
}

TEST_CASE("render: disk pixels match a per-pixel distance oracle") {
  EnvConfig cfg = default_cfg();
  cfg.ball_count = 0;
  BouncerEnv env(cfg, 11);
  env.reset();
  auto obs = BouncerEnv::render(cfg, env.state(), false);

  // independent recomputation of the documented quantized-disk rule
  const double q = 65536.0;
  const int64_t cx = llround(env.state().agent.x * q);
  const int64_t cy = llround(env.state().agent.y * q);
  const int64_t r = llround(cfg.agent_radius * q);
  int count = 0;
  for (int py = 0; py < kImageSize; ++py) {
    for (int px = 0; px < kImageSize; ++px) {
      const int64_t wx = llround((px + 0.5) * (q / kImageSize));
      const int64_t wy = llround((py + 0.5) * (q / kImageSize));
      const int64_t dx = wx - cx, dy = wy - cy;
      const bool inside = dx * dx + dy * dy <= r * r;
      CHECK(inside == (obs.gt_agent_mask[py * kImageSize + px] == 1));
      count += inside;
    }
  }
  CHECK(count > 0);
}

TEST_CASE("ground_truth_event: distance boundary sits exactly at the deflect radius") {
  EnvConfig cfg = default_cfg();
  cfg.ball_count = 1;
  BouncerEnv env(cfg, 13);
  env.reset();
  EnvState st = env.state();
  st.agent = {0.5, 0.5};

  // far away: no event
  st.balls[0] = {{0.9, 0.9}, {0.0, 0.0}};
  CHECK_FALSE(BouncerEnv::ground_truth_event(cfg, st, {0.0, 0.0}));
  // overlapping: event
  st.balls[0] = {{0.5, 0.5}, {0.0, 0.0}};
  CHECK(BouncerEnv::ground_truth_event(cfg, st, {0.0, 0.0}));

  // sweep across the boundary; the event tests dist < rho_d after the move
  const double rd = cfg.deflect_radius();
  for (double delta : {-1e-6, -1e-9, 0.0, 1e-9, 1e-6}) {
    st.balls[0] = {{0.5 + rd + delta, 0.5}, {0.0, 0.0}};
    const bool event = BouncerEnv::ground_truth_event(cfg, st, {0.0, 0.0});
    CHECK(event == (delta < 0.0));
  }
}

TEST_CASE("trajectory invariants over a random rollout") {
  EnvConfig cfg = default_cfg();
  BouncerEnv env(cfg, 17);
  env.reset();
  RngStream rng(99);
  bool expected_flag = false;
  for (int i = 0; i < cfg.episode_length; ++i) {
    const Vec2 a{rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)};
    // collision_flag equals ground_truth_event evaluated one step earlier
    expected_flag = BouncerEnv::ground_truth_event(cfg, env.state(), a);
    auto res = env.step(a);
    CHECK(res.obs.collision_flag == expected_flag);

    // reward bound follows from the formula: progress in [-dt, dt], lateral
    // penalty in [0, xi2*dt], collision in {0, xi1}
    const double lo = -cfg.dt - cfg.collision_penalty - cfg.lateral_penalty * cfg.dt;
    CHECK(res.reward <= cfg.dt + 1e-12);
    CHECK(res.reward >= lo - 1e-12);

    // ball speed is conserved off deflection steps
    if (!res.obs.collision_flag) {
      for (const auto& b : env.state().balls) {
        const double sp = std::sqrt(b.vel.x * b.vel.x + b.vel.y * b.vel.y);
        CHECK(std::fabs(sp - cfg.ball_speed) < 1e-9);
      }
    }
    // masks stay disjoint, agent drawn last
    for (int p = 0; p < kImagePixels; ++p) {
      CHECK((res.obs.gt_agent_mask[p] & res.obs.gt_ball_mask[p]) == 0);
    }
    // positions inside the arena
    CHECK(env.state().agent.x >= 0.0);
    CHECK(env.state().agent.x <= 1.0);
    for (const auto& b : env.state().balls) {
      CHECK(b.pos.x >= 0.0);
      CHECK(b.pos.x <= 1.0);
      CHECK(b.pos.y >= 0.0);
      CHECK(b.pos.y <= 1.0);
    }
    if (res.done) break;
  }
}

TEST_CASE("stepping a finished episode is a contract violation") {
  EnvConfig cfg = default_cfg();
  cfg.episode_length = 3;
  BouncerEnv env(cfg, 19);
  env.reset();
  for (int i = 0; i < 3; ++i) env.step({0.0, 0.0});
  CHECK_THROWS_AS(env.step({0.0, 0.0}), ContractError);
}

TEST_CASE("deflection redirects the ball away from the agent") {
  EnvConfig cfg = default_cfg();
  cfg.ball_count = 1;
  BouncerEnv env(cfg, 23);
  env.reset();
  EnvState st = env.state();
  st.agent = {0.5, 0.5};
  st.balls[0] = {{0.5 + 0.5 * cfg.deflect_radius(), 0.5}, {0.0, 0.0}};
  // stationary ball inside the deflect radius: velocity snaps to the
  // agent-to-ball direction at full speed
  CHECK(BouncerEnv::ground_truth_event(cfg, st, {0.0, 0.0}));
  env.set_state(st);
  auto res = env.step({0.0, 0.0});
  CHECK(res.obs.collision_flag);
  CHECK(env.state().balls[0].vel.x == doctest::Approx(cfg.ball_speed));
  CHECK(env.state().balls[0].vel.y == doctest::Approx(0.0));
  // reward includes the collision penalty
  CHECK(res.reward == doctest::Approx(-cfg.collision_penalty));
}
