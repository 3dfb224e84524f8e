#include <cmath>

#include "doctest.h"
#include "isodream/agent.hpp"

using namespace isodream;

namespace {

WMConfig tiny_wm() {
  WMConfig c;
  c.image_size = 8;
  c.enc_channels = {3, 4, 5};
  c.feature_dim = 10;
  c.hidden_dim = 8;
  c.latent_dim = 4;
  c.static_dim = 6;
  c.head_hidden = 8;
  return c;
}

ACConfig tiny_ac() {
  ACConfig c;
  c.horizon = 4;
  c.tau = 3;
  c.actor_hidden = 8;
  c.critic_hidden = 8;
  return c;
}

// n-step-return expansion of the lambda return; an independent oracle for
// the backward recursion.
std::vector<double> lambda_oracle(std::span<const double> r,
                                  std::span<const double> v,
                                  std::span<const double> d, double lambda) {
  const int n = static_cast<int>(r.size());
  std::vector<double> out(n - 1);
  for (int i = 0; i < n - 1; ++i) {
    const int max_n = n - 1 - i;  // longest bootstrap horizon from i
    double acc = 0.0;
    for (int k = 1; k <= max_n; ++k) {
      // k-step return G_k = sum_{j=0}^{k-1} (prod d) r_{i+j} + (prod d) v_{i+k}
      double g = 0.0, disc = 1.0;
      for (int j = 0; j < k; ++j) {
        g += disc * r[i + j];
        disc *= d[i + j];
      }
      g += disc * v[i + k];
      const double weight =
          k < max_n ? (1.0 - lambda) * std::pow(lambda, k - 1) : std::pow(lambda, k - 1);
      acc += weight * g;
    }
    out[i] = acc;
  }
  return out;
}

Behavior<double>::StartStates random_starts(const WMConfig& wc, int n, uint64_t seed) {
  Behavior<double>::StartStates st;
  st.n = n;
  RngStream rng(seed);
  st.h_s.resize(static_cast<size_t>(n) * wc.hidden_dim);
  st.h_z.resize(static_cast<size_t>(n) * wc.hidden_dim);
  st.s.resize(static_cast<size_t>(n) * wc.latent_dim);
  st.z.resize(static_cast<size_t>(n) * wc.latent_dim);
  for (auto* v : {&st.h_s, &st.h_z}) {
    for (auto& x : *v) x = rng.normal();
  }
  for (auto* v : {&st.s, &st.z}) {
    for (auto& x : *v) x = rng.normal();
  }
  return st;
}

}  // namespace

TEST_CASE("future attention: single key and identical keys") {
  Agent<double> agent(tiny_wm(), tiny_ac(), 3);
  auto& bh = agent.behavior();
  const int dF = agent.world().feature_dim();

  Tape<double> t;
  // tau = 1: the softmax over a single key is 1, e = z + s
  {
    std::vector<double> s(dF, 0.0), z(dF, 0.0);
    s[0] = 1.0;
    z[1] = 1.0;
    auto a = bh.future_attention(t, t.constant(s, 1, dF), t.constant(z, 1, dF));
    CHECK(t.value(a.weights)[0] == doctest::Approx(1.0));
    auto e = t.value(a.e);
    CHECK(e[0] == doctest::Approx(1.0));
    CHECK(e[1] == doctest::Approx(1.0));
  }
  // identical rows: e = u + s regardless of the weights
  {
    RngStream rng(5);
    std::vector<double> s(dF), u(dF);
    for (auto& x : s) x = rng.normal();
    for (auto& x : u) x = rng.normal();
    std::vector<double> z;
    for (int k = 0; k < 4; ++k) z.insert(z.end(), u.begin(), u.end());
    auto a = bh.future_attention(t, t.constant(s, 1, dF), t.constant(z, 4, dF));
    auto e = t.value(a.e);
    for (int i = 0; i < dF; ++i) CHECK(e[i] == doctest::Approx(u[i] + s[i]));
  }
  // empty window is a contract violation
  {
    Var s = t.zeros(1, dF);
    Var z = t.zeros(1, dF);
    CHECK_THROWS_AS(bh.future_attention(t, s, t.slice_cols(z, 0, dF - 1)),
                    ContractError);
  }
}

TEST_CASE("future attention matches an independent recomputation") {
  Agent<double> agent(tiny_wm(), tiny_ac(), 7);
  auto& bh = agent.behavior();
  const int dF = agent.world().feature_dim();
  const int tau = 5;
  RngStream rng(11);

  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> s(dF), z(static_cast<size_t>(tau) * dF);
    for (auto& x : s) x = rng.normal();
    for (auto& x : z) x = rng.normal();

    Tape<double> t;
    auto a = bh.future_attention(t, t.constant(s, 1, dF), t.constant(z, tau, dF));
    auto e = t.value(a.e);
    auto w = t.value(a.weights);

    // independent recomputation: softmax(s z^T) z + s
    std::vector<double> scores(tau);
    double mx = -1e300;
    for (int k = 0; k < tau; ++k) {
      double dot = 0;
      for (int i = 0; i < dF; ++i) dot += s[i] * z[static_cast<size_t>(k) * dF + i];
      scores[k] = dot;
      mx = std::max(mx, dot);
    }
    double zsum = 0;
    for (auto& x : scores) {
      x = std::exp(x - mx);
      zsum += x;
    }
    double wsum = 0;
    for (int k = 0; k < tau; ++k) {
      scores[k] /= zsum;
      CHECK(std::fabs(w[k] - scores[k]) < 1e-6);
      CHECK(w[k] >= 0.0);
      wsum += w[k];
    }
    CHECK(std::fabs(wsum - 1.0) < 1e-6);
    for (int i = 0; i < dF; ++i) {
      double expect = s[i];
      for (int k = 0; k < tau; ++k) {
        expect += scores[k] * z[static_cast<size_t>(k) * dF + i];
      }
      CHECK(std::fabs(e[i] - expect) < 1e-6);
    }
  }
}

TEST_CASE("attention weights are equivariant under window permutation") {
  Agent<double> agent(tiny_wm(), tiny_ac(), 9);
  auto& bh = agent.behavior();
  const int dF = agent.world().feature_dim();
  const int tau = 4;
  RngStream rng(13);
  std::vector<double> s(dF), z(static_cast<size_t>(tau) * dF);
  for (auto& x : s) x = rng.normal();
  for (auto& x : z) x = rng.normal();
  std::vector<double> zrev(z.size());
  for (int k = 0; k < tau; ++k) {
    std::copy(z.begin() + static_cast<size_t>(k) * dF,
              z.begin() + static_cast<size_t>(k + 1) * dF,
              zrev.begin() + static_cast<size_t>(tau - 1 - k) * dF);
  }
  Tape<double> t;
  auto a1 = bh.future_attention(t, t.constant(s, 1, dF), t.constant(z, tau, dF));
  auto a2 = bh.future_attention(t, t.constant(s, 1, dF), t.constant(zrev, tau, dF));
  auto w1 = t.value(a1.weights), w2 = t.value(a2.weights);
  auto e1 = t.value(a1.e), e2 = t.value(a2.e);
  for (int k = 0; k < tau; ++k) {
    CHECK(w1[k] == doctest::Approx(w2[tau - 1 - k]).epsilon(1e-12));
  }
  for (int i = 0; i < dF; ++i) CHECK(e1[i] == doctest::Approx(e2[i]).epsilon(1e-9));
}

TEST_CASE("lambda returns: hand cases") {
  // lambda = 0 reduces to one-step TD
  {
    const std::vector<double> r{0.5, -0.2, 0.1};
    const std::vector<double> v{1.0, 2.0, 3.0};
    const std::vector<double> d{0.9, 0.8, 0.7};
    auto out = lambda_returns(r, v, d, 0.0);
    REQUIRE(out.size() == 2);
    CHECK(out[0] == doctest::Approx(0.5 + 0.9 * 2.0));
    CHECK(out[1] == doctest::Approx(-0.2 + 0.8 * 3.0));
  }
  // lambda = 1 with constant reward and discount folds to the terminal value
  {
    const std::vector<double> r{1.0, 1.0, 1.0, 0.0};
    const std::vector<double> v{0.0, 0.0, 0.0, 10.0};
    const std::vector<double> d{0.9, 0.9, 0.9, 0.9};
    auto out = lambda_returns(r, v, d, 1.0);
    REQUIRE(out.size() == 3);
    CHECK(out[2] == doctest::Approx(1.0 + 0.9 * 10.0));  // = 10
    CHECK(out[1] == doctest::Approx(10.0));
    CHECK(out[0] == doctest::Approx(10.0));
  }
  // mismatched lengths are a contract violation
  {
    const std::vector<double> r{1.0, 1.0};
    const std::vector<double> v{1.0};
    const std::vector<double> d{0.9, 0.9};
    CHECK_THROWS_AS(lambda_returns(r, v, d, 0.5), ContractError);
  }
}

TEST_CASE("lambda returns match the n-step expansion oracle on 100 random instances") {
  RngStream rng(17);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 2 + static_cast<int>(rng.uniform_int(15));  // lengths <= 16
    std::vector<double> r(n), v(n), d(n);
    for (auto& x : r) x = rng.uniform(-1.0, 1.0);
    for (auto& x : v) x = rng.uniform(-2.0, 2.0);
    for (auto& x : d) x = rng.uniform(0.0, 1.0);
    auto fast = lambda_returns(r, v, d, 0.95);
    auto slow = lambda_oracle(r, v, d, 0.95);
    REQUIRE(fast.size() == slow.size());
    for (size_t i = 0; i < fast.size(); ++i) {
      CHECK(std::fabs(fast[i] - slow[i]) < 1e-6);
    }
  }
}

TEST_CASE("lambda returns: raising any reward weakly raises all earlier returns") {
  RngStream rng(19);
  for (int trial = 0; trial < 30; ++trial) {
    const int n = 4 + static_cast<int>(rng.uniform_int(8));
    std::vector<double> r(n), v(n), d(n);
    for (auto& x : r) x = rng.uniform(-1.0, 1.0);
    for (auto& x : v) x = rng.uniform(-2.0, 2.0);
    for (auto& x : d) x = rng.uniform(0.05, 1.0);
    auto base = lambda_returns(r, v, d, 0.95);
    const int k = static_cast<int>(rng.uniform_int(n - 1));
    r[k] += 0.5;
    auto bumped = lambda_returns(r, v, d, 0.95);
    for (int i = 0; i <= k; ++i) {
      CHECK(bumped[i] >= base[i] - 1e-12);
    }
  }
}

TEST_CASE("imagine: length bookkeeping for L=1, tau=1") {
  WMConfig wc = tiny_wm();
  ACConfig ac = tiny_ac();
  ac.horizon = 1;
  ac.tau = 1;
  Agent<double> agent(wc, ac, 21);
  Tape<double> t;
  RngStream noise(1);
  auto traj = agent.behavior().imagine(t, random_starts(wc, 3, 2), noise);
  CHECK(traj.z_feat.size() == 2);   // L + tau
  CHECK(traj.e.size() == 2);        // L + 1
  CHECK(traj.action.size() == 2);   // L + 1
  CHECK(traj.vlambda.size() == 1);  // L
}

TEST_CASE("imagine: closed gate makes the z-path independent of the start s") {
  WMConfig wc = tiny_wm();
  ACConfig ac = tiny_ac();
  Agent<double> agent(wc, ac, 23);
  // force the gate shut
  auto* gb = agent.params().find("dependency_gate", "fc.b");
  REQUIRE(gb != nullptr);
  gb->value[0] = -50.0;

  auto start1 = random_starts(wc, 2, 3);
  auto start2 = start1;
  for (auto& x : start2.s) x += 0.7;  // perturb the controllable latent only
  for (auto& x : start2.h_s) x -= 0.3;

  Tape<double> t1, t2;
  RngStream n1(9), n2(9);
  auto tr1 = agent.behavior().imagine(t1, start1, n1);
  auto tr2 = agent.behavior().imagine(t2, start2, n2);
  for (size_t k = 1; k < tr1.z_feat.size(); ++k) {
    auto a = t1.value(tr1.z_feat[k]);
    auto b = t2.value(tr2.z_feat[k]);
    for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
  }
}

TEST_CASE("imagine is a pure function of its inputs under fixed noise") {
  WMConfig wc = tiny_wm();
  ACConfig ac = tiny_ac();
  Agent<double> agent(wc, ac, 25);
  auto start = random_starts(wc, 2, 5);
  Tape<double> t1, t2;
  RngStream n1(31), n2(31);
  auto tr1 = agent.behavior().imagine(t1, start, n1);
  auto tr2 = agent.behavior().imagine(t2, start, n2);
  for (int i = 0; i <= tr1.horizon; ++i) {
    auto a = t1.value(tr1.e[i]);
    auto b = t2.value(tr2.e[i]);
    for (size_t k = 0; k < a.size(); ++k) CHECK(a[k] == b[k]);
  }
  for (int i = 0; i < tr1.horizon; ++i) {
    auto a = t1.value(tr1.vlambda[i]);
    auto b = t2.value(tr2.vlambda[i]);
    for (size_t k = 0; k < a.size(); ++k) CHECK(a[k] == b[k]);
  }
}

TEST_CASE("critic loss equals the hand-computed squared target error") {
  WMConfig wc = tiny_wm();
  ACConfig ac = tiny_ac();
  Agent<double> agent(wc, ac, 27);
  auto start = random_starts(wc, 2, 7);
  Tape<double> t;
  RngStream noise(3);
  auto traj = agent.behavior().imagine(t, start, noise);
  auto batch = Behavior<double>::critic_batch(t, traj);

  Tape<double> tc;
  Var loss = agent.behavior().critic_loss(tc, batch, traj.n);

  // recompute by hand through a fresh critic evaluation
  double expect = 0.0;
  {
    Tape<double> tv;
    const int dF = agent.world().feature_dim();
    Var e = tv.constant(batch.e, batch.rows, dF);
    Var v = agent.behavior().critic_value(tv, e, true);
    auto vv = tv.value(v);
    for (int i = 0; i < batch.rows; ++i) {
      const double diff = vv[i] - batch.targets[i];
      expect += diff * diff;
    }
    expect /= traj.n;
  }
  CHECK(tc.scalar_value(loss) == doctest::Approx(expect).epsilon(1e-9));
}

TEST_CASE("actor gradient vanishes when actions cannot influence the returns") {
  WMConfig wc = tiny_wm();
  ACConfig ac = tiny_ac();
  ac.entropy_weight = 0.0;
  Agent<double> agent(wc, ac, 29);
  // sever the action pathway in the controllable prior
  for (const char* n : {"gru.r.w", "gru.u.w", "gru.c.w"}) {
    auto* p = agent.params().find("action_cond_branch", n);
    REQUIRE(p != nullptr);
    for (int r = 0; r < p->rows; ++r) {
      for (int c = wc.latent_dim; c < wc.latent_dim + 2; ++c) {
        p->value[static_cast<size_t>(r) * p->cols + c] = 0.0;
      }
    }
  }
  auto start = random_starts(wc, 2, 9);
  Tape<double> t;
  RngStream noise(5);
  auto traj = agent.behavior().imagine(t, start, noise);
  Var loss = agent.behavior().actor_loss(t, traj);
  GradSink<double> sink;
  sink.resize(agent.params().count());
  t.backward(loss, sink);
  for (auto* p : agent.params().group_tensors("actor")) {
    const auto* slot = sink.peek(p->id);
    if (!slot) continue;
    for (double g : *slot) CHECK(std::fabs(g) < 1e-12);
  }
}

TEST_CASE("gradient flow audit: actor and critic stay isolated") {
  WMConfig wc = tiny_wm();
  ACConfig ac = tiny_ac();
  Agent<double> agent(wc, ac, 31);
  auto start = random_starts(wc, 2, 11);

  // actor loss reaches no critic parameter (the critic is applied frozen)
  {
    Tape<double> t;
    RngStream noise(7);
    auto traj = agent.behavior().imagine(t, start, noise);
    Var loss = agent.behavior().actor_loss(t, traj);
    GradSink<double> sink;
    sink.resize(agent.params().count());
    t.backward(loss, sink);
    bool actor_nonzero = false;
    for (auto* p : agent.params().group_tensors("actor")) {
      const auto* slot = sink.peek(p->id);
      if (!slot) continue;
      for (double g : *slot) actor_nonzero |= g != 0.0;
    }
    CHECK(actor_nonzero);
    for (auto* p : agent.params().group_tensors("critic")) {
      CHECK(sink.peek(p->id) == nullptr);
    }
  }

  // critic loss reaches no actor parameter (features are detached), and
  // perturbing the targets leaves actor-side gradients untouched
  {
    Tape<double> t;
    RngStream noise(7);
    auto traj = agent.behavior().imagine(t, start, noise);
    auto batch = Behavior<double>::critic_batch(t, traj);
    Tape<double> tc;
    Var loss = agent.behavior().critic_loss(tc, batch, traj.n);
    GradSink<double> sink;
    sink.resize(agent.params().count());
    tc.backward(loss, sink);
    bool critic_nonzero = false;
    for (auto* p : agent.params().group_tensors("critic")) {
      const auto* slot = sink.peek(p->id);
      if (!slot) continue;
      for (double g : *slot) critic_nonzero |= g != 0.0;
    }
    CHECK(critic_nonzero);
    for (auto* p : agent.params().group_tensors("actor")) {
      CHECK(sink.peek(p->id) == nullptr);
    }

    // stop-gradient on the targets: shifting them changes the critic loss
    // value but cannot create a path into the imagination graph
    auto shifted = batch;
    for (auto& x : shifted.targets) x += 1.0;
    Tape<double> tc2;
    Var loss2 = agent.behavior().critic_loss(tc2, shifted, traj.n);
    CHECK(tc2.scalar_value(loss2) != doctest::Approx(tc.scalar_value(loss)));
  }
}

TEST_CASE("act: eval actions are pure and always inside the box") {
  WMConfig wc = tiny_wm();
  ACConfig ac = tiny_ac();
  Agent<float> agent(wc, ac, 33);

  auto st = agent.initial_deploy_state();
  std::vector<float> obs(3 * wc.image_size * wc.image_size, 0.4f);
  RngStream rng(1);
  agent.observe(st, obs, rng);
  const Vec2 a1 = agent.act(st, false, nullptr);
  const Vec2 a2 = agent.act(st, false, nullptr);
  CHECK(a1.x == a2.x);
  CHECK(a1.y == a2.y);

  // tau = 1 keeps the window anchored at the live posterior alone
  ACConfig ac1 = tiny_ac();
  ac1.tau = 1;
  Agent<float> agent1(wc, ac1, 33);
  auto st1 = agent1.initial_deploy_state();
  RngStream rng1(2);
  agent1.observe(st1, obs, rng1);
  const Vec2 b = agent1.act(st1, false, nullptr);
  CHECK(std::fabs(b.x) <= 1.0);

  // bounds over a sweep of random posterior states and exploration noise
  RngStream sweep(3);
  for (int i = 0; i < 10000; ++i) {
    auto stx = agent.initial_deploy_state();
    for (auto& v : stx.h_s) v = static_cast<float>(sweep.normal());
    for (auto& v : stx.s) v = static_cast<float>(sweep.normal());
    for (auto& v : stx.h_z) v = static_cast<float>(sweep.normal());
    for (auto& v : stx.z) v = static_cast<float>(sweep.normal());
    stx.started = true;
    const Vec2 a = agent.act(stx, true, &sweep);
    CHECK(a.x >= -1.0);
    CHECK(a.x <= 1.0);
    CHECK(a.y >= -1.0);
    CHECK(a.y <= 1.0);
  }
}
