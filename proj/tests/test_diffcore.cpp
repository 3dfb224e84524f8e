#include <cmath>
#include <numbers>
#include <vector>

#include "doctest.h"
#include "isodream/gradcheck.hpp"
#include "isodream/nn.hpp"
#include "isodream/rng.hpp"
#include "isodream/tape.hpp"

using namespace isodream;

namespace {

std::vector<double> randn(RngStream& rng, int n, double scale = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = scale * rng.normal();
  return v;
}

}  // namespace

TEST_CASE("gru_step: closed update gate returns previous state") {
  const int dh = 6, dx = 4;
  ParamSet<double> ps;
  GruCell<double> gru(ps, "actor", "gru", dx, dh);
  ps.init_all(3);
  // bias -20 saturates the update gate at ~0, so h passes through
  for (auto& b : gru.wu.b->value) b = -20.0;

  RngStream rng(11);
  Tape<double> t;
  Var h = t.constant(randn(rng, dh), 1, dh);
  Var x = t.constant(randn(rng, dx), 1, dx);
  Var out = gru.step(t, h, x);
  auto hv = t.value(h);
  auto ov = t.value(out);
  for (int i = 0; i < dh; ++i) {
    CHECK(std::fabs(ov[i] - hv[i]) < 1e-6);
  }
}

TEST_CASE("gru_step: open update gate with zero candidate overwrites to zero") {
  const int dh = 6, dx = 4;
  ParamSet<double> ps;
  GruCell<double> gru(ps, "actor", "gru", dx, dh);
  ps.init_all(3);
  for (auto& b : gru.wu.b->value) b = 20.0;
  std::fill(gru.wc.W->value.begin(), gru.wc.W->value.end(), 0.0);
  std::fill(gru.wc.b->value.begin(), gru.wc.b->value.end(), 0.0);

  RngStream rng(12);
  Tape<double> t;
  Var h = t.constant(randn(rng, dh), 1, dh);
  Var x = t.constant(randn(rng, dx), 1, dx);
  Var out = gru.step(t, h, x);
  for (double v : t.value(out)) CHECK(std::fabs(v) < 1e-6);
}

TEST_CASE("gru_step: gradients match finite differences") {
  const int dh = 5, dx = 3;
  ParamSet<double> ps;
  GruCell<double> gru(ps, "actor", "gru", dx, dh);
  ps.init_all(7);

  RngStream rng(13);
  auto h0 = randn(rng, dh);
  auto x0 = randn(rng, dx);

  // gradient w.r.t. inputs
  auto op = [&](Tape<double>& t, std::span<const Var> in) {
    return gru.step(t, in[0], in[1]);
  };
  const double err = check_gradients(op, {h0, x0}, {{1, dh}, {1, dx}});
  CHECK(err < 1e-4);

  // gradient w.r.t. parameters, reduced through a sum
  auto eval = [&](GradSink<double>* sink) {
    Tape<double> t;
    Var h = t.constant(h0, 1, dh);
    Var x = t.constant(x0, 1, dx);
    Var out = t.sum_all(gru.step(t, h, x));
    const double v = t.scalar_value(out);
    if (sink) t.backward(out, *sink);
    return v;
  };
  CHECK(check_param_gradients(eval, ps) < 1e-4);
}

TEST_CASE("sample_gaussian basics") {
  Tape<double> t;
  const double m2 = 2.0, s1 = 1.0, n0 = 0.0;
  Var mean = t.constant(std::span<const double>(&m2, 1), 1, 1);
  Var stddev = t.constant(std::span<const double>(&s1, 1), 1, 1);
  Var out = sample_gaussian(t, mean, stddev, std::span<const double>(&n0, 1));
  CHECK(t.scalar_value(out) == doctest::Approx(2.0));

  const double m0 = 0.0, s3 = 3.0, n1 = 1.0;
  Var mean2 = t.constant(std::span<const double>(&m0, 1), 1, 1);
  Var std2 = t.constant(std::span<const double>(&s3, 1), 1, 1);
  Var out2 = sample_gaussian(t, mean2, std2, std::span<const double>(&n1, 1));
  CHECK(t.scalar_value(out2) == doctest::Approx(3.0));

  const double bad = 0.0;
  Var std_bad = t.constant(std::span<const double>(&bad, 1), 1, 1);
  CHECK_THROWS_AS(sample_gaussian(t, mean, std_bad, std::span<const double>(&n0, 1)),
                  ContractError);
}

TEST_CASE("sample_gaussian: gradient w.r.t. std at unit noise is 1") {
  auto op = [](Tape<double>& t, std::span<const Var> in) {
    const double noise = 1.0;
    return sample_gaussian(t, in[0], in[1], std::span<const double>(&noise, 1));
  };
  // output = mean + std -> d/dstd = 1
  const double err = check_gradients(op, {{0.5}, {0.7}}, {{1, 1}, {1, 1}});
  CHECK(err < 1e-6);
}

TEST_CASE("gaussian_kl closed form and properties") {
  std::vector<double> m{1.0}, s{1.0}, m0{0.0};
  CHECK(gaussian_kl<double>(m, s, m, s) == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(gaussian_kl<double>(m, s, m0, s) == doctest::Approx(0.5));

  RngStream rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> mq = randn(rng, 8), mp = randn(rng, 8);
    std::vector<double> sq(8), sp(8);
    for (int i = 0; i < 8; ++i) {
      sq[i] = 0.2 + 2.0 * rng.uniform();
      sp[i] = 0.2 + 2.0 * rng.uniform();
    }
    CHECK(gaussian_kl<double>(mq, sq, mp, sp) >= 0.0);
  }

  std::vector<double> bad{0.0};
  CHECK_THROWS_AS(gaussian_kl<double>(m, bad, m0, s), ContractError);
}

TEST_CASE("gaussian_kl matches quadrature on random 8-dim pairs") {
  RngStream rng(17);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<double> mq = randn(rng, 8), mp = randn(rng, 8);
    std::vector<double> sq(8), sp(8);
    for (int i = 0; i < 8; ++i) {
      sq[i] = 0.3 + 1.5 * rng.uniform();
      sp[i] = 0.3 + 1.5 * rng.uniform();
    }
    // Simpson quadrature of q(x) log(q(x)/p(x)), dim by dim
    double quad = 0.0;
    for (int i = 0; i < 8; ++i) {
      const double lo = mq[i] - 12.0 * sq[i];
      const double hi = mq[i] + 12.0 * sq[i];
      const int n = 4000;  // even
      const double dh = (hi - lo) / n;
      auto f = [&](double x) {
        const double zq = (x - mq[i]) / sq[i];
        const double zp = (x - mp[i]) / sp[i];
        const double logq = -0.5 * zq * zq - std::log(sq[i]) -
                            0.5 * std::log(2.0 * std::numbers::pi);
        const double logp = -0.5 * zp * zp - std::log(sp[i]) -
                            0.5 * std::log(2.0 * std::numbers::pi);
        return std::exp(logq) * (logq - logp);
      };
      double acc = f(lo) + f(hi);
      for (int k = 1; k < n; ++k) acc += f(lo + k * dh) * (k % 2 ? 4.0 : 2.0);
      quad += acc * dh / 3.0;
    }
    const double closed = gaussian_kl<double>(mq, sq, mp, sp);
    CHECK(std::fabs(closed - quad) < 1e-3);
  }
}

TEST_CASE("check_gradients: polynomial sanity") {
  auto op = [](Tape<double>& t, std::span<const Var> in) {
    return t.sum_sq(in[0]);
  };
  // f = sum(x^2), grad = [2, 4] at [1, 2]
  const double err = check_gradients(op, {{1.0, 2.0}}, {{1, 2}});
  CHECK(err < 1e-8);
}

TEST_CASE("softmax rows: nonnegative, sums to one, FD-clean") {
  RngStream rng(23);
  Tape<double> t;
  auto data = randn(rng, 4 * 7, 2.0);
  Var x = t.constant(data, 4, 7);
  Var y = t.row_softmax(x);
  auto v = t.value(y);
  for (int r = 0; r < 4; ++r) {
    double sum = 0.0;
    for (int j = 0; j < 7; ++j) {
      CHECK(v[r * 7 + j] >= 0.0);
      sum += v[r * 7 + j];
    }
    CHECK(std::fabs(sum - 1.0) < 1e-6);
  }

  auto op = [](Tape<double>& tp, std::span<const Var> in) {
    return tp.row_softmax(in[0]);
  };
  CHECK(check_gradients(op, {randn(rng, 12)}, {{3, 4}}) < 1e-4);
}

TEST_CASE("softmax-attention composite matches FD") {
  RngStream rng(29);
  const int d = 6, tau = 5;
  auto op = [&](Tape<double>& t, std::span<const Var> in) {
    Var s = in[0];                      // [1,d]
    Var z = in[1];                      // [tau,d]
    Var scores = t.matmul_nt(s, z);     // [1,tau]
    Var w = t.row_softmax(scores);
    return t.add(t.matmul_nn(w, z), s); // e = w z + s
  };
  const double err =
      check_gradients(op, {randn(rng, d), randn(rng, tau * d)}, {{1, d}, {tau, d}});
  CHECK(err < 1e-4);
}

TEST_CASE("elementwise and reduction primitives pass FD") {
  RngStream rng(31);
  GradCheckOptions opts;

  auto unary = [&](auto f, double scale) {
    auto op = [&](Tape<double>& t, std::span<const Var> in) { return f(t, in[0]); };
    return check_gradients(op, {randn(rng, 10, scale)}, {{2, 5}}, opts);
  };
  CHECK(unary([](Tape<double>& t, Var v) { return t.sigmoid(v); }, 2.0) < 1e-4);
  CHECK(unary([](Tape<double>& t, Var v) { return t.tanh_(v); }, 2.0) < 1e-4);
  CHECK(unary([](Tape<double>& t, Var v) { return t.elu(v); }, 2.0) < 1e-4);
  CHECK(unary([](Tape<double>& t, Var v) { return t.softplus_floor(v, 0.1); }, 2.0) < 1e-4);
  CHECK(unary([](Tape<double>& t, Var v) { return t.mean_rows(v); }, 1.0) < 1e-4);

  auto binary = [&](auto f) {
    auto op = [&](Tape<double>& t, std::span<const Var> in) {
      return f(t, in[0], in[1]);
    };
    return check_gradients(op, {randn(rng, 12), randn(rng, 12)}, {{3, 4}, {3, 4}}, opts);
  };
  CHECK(binary([](Tape<double>& t, Var a, Var b) { return t.add(a, b); }) < 1e-4);
  CHECK(binary([](Tape<double>& t, Var a, Var b) { return t.sub(a, b); }) < 1e-4);
  CHECK(binary([](Tape<double>& t, Var a, Var b) { return t.mul(a, b); }) < 1e-4);
  CHECK(binary([](Tape<double>& t, Var a, Var b) { return t.sq_err(a, b); }) < 1e-4);
  CHECK(binary([](Tape<double>& t, Var a, Var b) { return t.rowdot(a, b); }) < 1e-4);

  // broadcasts
  auto op_rb = [](Tape<double>& t, std::span<const Var> in) {
    return t.mul_rowbcast(in[0], in[1]);
  };
  CHECK(check_gradients(op_rb, {randn(rng, 12), randn(rng, 3)}, {{3, 4}, {3, 1}}, opts) < 1e-4);
  auto op_sb = [](Tape<double>& t, std::span<const Var> in) {
    return t.sub_rowbcast(in[0], in[1]);
  };
  CHECK(check_gradients(op_sb, {randn(rng, 12), randn(rng, 4)}, {{3, 4}, {1, 4}}, opts) < 1e-4);
  auto op_cb = [](Tape<double>& t, std::span<const Var> in) {
    return t.mul_chanbcast(in[0], in[1], 3);
  };
  CHECK(check_gradients(op_cb, {randn(rng, 2 * 12), randn(rng, 2 * 4)},
                        {{2, 12}, {2, 4}}, opts) < 1e-4);

  // softmax3 composite
  auto op_s3 = [](Tape<double>& t, std::span<const Var> in) {
    return t.softmax3(in[0], in[1], in[2]);
  };
  CHECK(check_gradients(op_s3, {randn(rng, 6), randn(rng, 6), randn(rng, 6)},
                        {{2, 3}, {2, 3}, {2, 3}}, opts) < 1e-4);

  // KL node (unbalanced weights = plain KL)
  auto op_kl = [](Tape<double>& t, std::span<const Var> in) {
    Var sq = t.softplus_floor(in[1], 0.1);
    Var sp = t.softplus_floor(in[3], 0.1);
    return t.kl_diag(in[0], sq, in[2], sp, 1.0, 1.0);
  };
  CHECK(check_gradients(op_kl,
                        {randn(rng, 6), randn(rng, 6), randn(rng, 6), randn(rng, 6)},
                        {{1, 6}, {1, 6}, {1, 6}, {1, 6}}, opts) < 1e-4);

  // BCE-with-logits against fixed labels
  auto op_bce = [](Tape<double>& t, std::span<const Var> in) {
    const std::vector<double> labels{1.0, 0.0, 1.0, 0.5};
    Var l = t.constant(labels, 4, 1);
    return t.bce_logits(in[0], l);
  };
  CHECK(check_gradients(op_bce, {randn(rng, 4)}, {{4, 1}}, opts) < 1e-4);

  // straight-through gate, checked on its soft surrogate path
  auto op_gate = [](Tape<double>& t, std::span<const Var> in) {
    return t.mul_rowbcast(in[1], t.sigmoid(in[0]));
  };
  CHECK(check_gradients(op_gate, {randn(rng, 2), randn(rng, 2 * 5)},
                        {{2, 1}, {2, 5}}, opts) < 1e-4);
}

TEST_CASE("matrix primitives pass FD") {
  RngStream rng(37);
  auto op_lin = [](Tape<double>& t, std::span<const Var> in) {
    return t.linear(in[0], in[1], in[2]);
  };
  CHECK(check_gradients(op_lin, {randn(rng, 2 * 3), randn(rng, 4 * 3), randn(rng, 4)},
                        {{2, 3}, {4, 3}, {1, 4}}) < 1e-4);
  auto op_nt = [](Tape<double>& t, std::span<const Var> in) {
    return t.matmul_nt(in[0], in[1]);
  };
  CHECK(check_gradients(op_nt, {randn(rng, 2 * 3), randn(rng, 4 * 3)},
                        {{2, 3}, {4, 3}}) < 1e-4);
  auto op_nn = [](Tape<double>& t, std::span<const Var> in) {
    return t.matmul_nn(in[0], in[1]);
  };
  CHECK(check_gradients(op_nn, {randn(rng, 2 * 3), randn(rng, 3 * 4)},
                        {{2, 3}, {3, 4}}) < 1e-4);
}

TEST_CASE("conv primitives: shapes, zero linearity and FD") {
  // all-zero image with zero bias gives zero features
  {
    ParamSet<double> ps;
    ConvSpec spec;
    spec.image_size = 32;
    ConvEncoder<double> enc(ps, "shared_encoder", "enc", spec, 16);
    ps.init_all(5);
    for (auto* b : enc.b) std::fill(b->value.begin(), b->value.end(), 0.0);
    std::fill(enc.head.b->value.begin(), enc.head.b->value.end(), 0.0);
    Tape<double> t;
    std::vector<double> img(3 * 32 * 32, 0.0);
    Var f = enc.apply(t, t.constant(img, 1, 3 * 32 * 32));
    for (double v : t.value(f)) CHECK(v == doctest::Approx(0.0));
  }

  // encode/decode round-trip shape contract at 32x32
  {
    ParamSet<double> ps;
    ConvSpec spec;
    ConvEncoder<double> enc(ps, "shared_encoder", "enc", spec, 16);
    ConvDecoder<double> dec(ps, "static_branch", "dec", spec, 16, 3);
    ps.init_all(5);
    Tape<double> t;
    RngStream rng(2);
    Var img = t.constant(randn(rng, 3 * 32 * 32), 1, 3 * 32 * 32);
    Var out = dec.apply(t, enc.apply(t, img));
    CHECK(t.rows(out) == 1);
    CHECK(t.cols(out) == 3 * 32 * 32);
    // wrong spatial size rejected
    Var small = t.zeros(1, 3 * 16 * 16);
    CHECK_THROWS_AS(enc.apply(t, small), ContractError);
  }

  // FD on an 8x8 reduced encoder/decoder
  {
    ParamSet<double> ps;
    ConvSpec spec;
    spec.image_size = 8;
    spec.channels = {3, 4, 5};
    ConvEncoder<double> enc(ps, "shared_encoder", "enc", spec, 6);
    ConvDecoder<double> dec(ps, "static_branch", "dec", spec, 6, 2);
    ps.init_all(9);
    RngStream rng(3);
    auto img = randn(rng, 2 * 3 * 8 * 8, 0.5);
    auto eval = [&](GradSink<double>* sink) {
      Tape<double> t;
      Var x = t.constant(img, 2, 3 * 8 * 8);
      Var out = t.sum_sq(dec.apply(t, enc.apply(t, x)));
      const double v = t.scalar_value(out);
      if (sink) t.backward(out, *sink);
      return v;
    };
    CHECK(check_param_gradients(eval, ps) < 1e-4);
  }
}

TEST_CASE("backward touches each parameter slot exactly once per pass") {
  ParamSet<double> ps;
  LinearLayer<double> l1(ps, "actor", "l1", 3, 4);
  LinearLayer<double> l2(ps, "critic", "l2", 4, 1);
  ParamTensor<double>& unused = ps.add("attention", "junk", 2, 2);
  ps.init_all(1);

  Tape<double> t;
  RngStream rng(4);
  std::vector<double> x(3);
  for (auto& v : x) v = rng.normal();
  // l1 applied twice: the tape caches the param leaf, so its sink slot still
  // accumulates in a single flush
  Var h1 = t.elu(l1.apply(t, t.constant(x, 1, 3)));
  Var h2 = t.elu(l1.apply(t, t.constant(x, 1, 3)));
  Var y = t.sum_all(l2.apply(t, t.add(h1, h2)));

  GradSink<double> sink;
  sink.resize(ps.count());
  t.backward(y, sink);
  // every used parameter touched exactly once, unused ones not at all
  CHECK(sink.touched().size() == 4);  // l1.w, l1.b, l2.w, l2.b
  CHECK(sink.peek(unused.id) == nullptr);

  // gradients of unused parameters stay zero after flushing
  ps.zero_grads();
  sink.flush_into_params(ps);
  for (double g : unused.grad) CHECK(g == 0.0);
}

TEST_CASE("injected NaN is detectable at value access") {
  Tape<double> t;
  std::vector<double> v{1.0, std::nan(""), 2.0};
  Var x = t.constant(v, 1, 3);
  Var y = t.affine_const(x, 2.0, 0.0);
  CHECK_FALSE(t.all_finite(y));
}

TEST_CASE("deconv FD and output geometry") {
  RngStream rng(41);
  // 4x4 -> 8x8 with k=4,s=2,p=1
  const int cin = 3, cout = 2, h = 4, k = 4;
  auto op = [&](Tape<double>& t, std::span<const Var> in) {
    return t.deconv2d(in[0], in[1], in[2], cin, h, h, cout, k, 2, 1);
  };
  const double err = check_gradients(
      op,
      {randn(rng, 2 * cin * h * h), randn(rng, cin * cout * k * k), randn(rng, cout)},
      {{2, cin * h * h}, {cin, cout * k * k}, {1, cout}});
  CHECK(err < 1e-4);

  Tape<double> t;
  Var x = t.zeros(1, cin * h * h);
  Var w = t.zeros(cin, cout * k * k);
  Var out = t.deconv2d(x, w, Var{}, cin, h, h, cout, k, 2, 1);
  CHECK(t.cols(out) == cout * 8 * 8);
}

TEST_CASE("conv2d FD against finite differences") {
  RngStream rng(43);
  const int cin = 2, cout = 3, h = 6, k = 3;
  auto op = [&](Tape<double>& t, std::span<const Var> in) {
    return t.conv2d(in[0], in[1], in[2], cin, h, h, k, 2, 1);
  };
  const double err = check_gradients(
      op,
      {randn(rng, 2 * cin * h * h), randn(rng, cout * cin * k * k), randn(rng, cout)},
      {{2, cin * h * h}, {cout, cin * k * k}, {1, cout}});
  CHECK(err < 1e-4);
}
