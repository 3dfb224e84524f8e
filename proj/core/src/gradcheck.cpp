#include "isodream/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "isodream/rng.hpp"

namespace isodream {

double fd_relative_error(double analytic, double numeric) {
  const double denom =
      std::max({std::fabs(analytic), std::fabs(numeric), 1e-3});
  return std::fabs(analytic - numeric) / denom;
}

namespace {

int coord_stride(int size, int max_coords) {
  if (max_coords <= 0 || size <= max_coords) return 1;
  return (size + max_coords - 1) / max_coords;
}

Var project_to_scalar(Tape<double>& tape, Var out) {
  if (tape.size(out) == 1) return out;
  RngStream proj(0x5eedf00dULL);
  std::vector<double> pv(tape.size(out));
  for (auto& v : pv) v = proj.uniform(-1.0, 1.0);
  Var p = tape.constant(pv, tape.rows(out), tape.cols(out));
  return tape.sum_all(tape.mul(out, p));
}

}  // namespace

double check_gradients(
    const std::function<Var(Tape<double>&, std::span<const Var>)>& op,
    std::vector<std::vector<double>> inputs,
    const std::vector<std::pair<int, int>>& shapes,
    const GradCheckOptions& opts) {
  ISO_CHECK(inputs.size() == shapes.size(), "check_gradients: shape list mismatch");

  auto value_at = [&]() -> double {
    Tape<double> tape;
    std::vector<Var> leaves;
    leaves.reserve(inputs.size());
    for (size_t i = 0; i < inputs.size(); ++i) {
      leaves.push_back(tape.constant(inputs[i], shapes[i].first, shapes[i].second));
    }
    return tape.scalar_value(project_to_scalar(tape, op(tape, leaves)));
  };

  std::vector<std::vector<double>> analytic(inputs.size());
  {
    Tape<double> tape;
    GradSink<double> sink;
    sink.resize(0);
    std::vector<Var> leaves;
    for (size_t i = 0; i < inputs.size(); ++i) {
      leaves.push_back(tape.constant(inputs[i], shapes[i].first, shapes[i].second));
    }
    Var out = project_to_scalar(tape, op(tape, leaves));
    tape.backward(out, sink);
    for (size_t i = 0; i < leaves.size(); ++i) {
      auto a = tape.adjoint(leaves[i]);
      analytic[i].assign(a.begin(), a.end());
    }
  }

  double worst = 0.0;
  const double h = opts.fd_step;
  for (size_t i = 0; i < inputs.size(); ++i) {
    const int stride = coord_stride(static_cast<int>(inputs[i].size()), opts.max_coords);
    for (size_t j = 0; j < inputs[i].size(); j += stride) {
      const double saved = inputs[i][j];
      inputs[i][j] = saved + h;
      const double fp = value_at();
      inputs[i][j] = saved - h;
      const double fm = value_at();
      inputs[i][j] = saved;
      const double numeric = (fp - fm) / (2.0 * h);
      worst = std::max(worst, fd_relative_error(analytic[i][j], numeric));
    }
  }
  return worst;
}

double check_param_gradients(
    const std::function<double(GradSink<double>*)>& eval,
    ParamSet<double>& params, const GradCheckOptions& opts) {
  GradSink<double> sink;
  sink.resize(params.count());
  eval(&sink);

  double worst = 0.0;
  const double h = opts.fd_step;
  for (auto* p : params.all()) {
    const auto* slot = sink.peek(p->id);
    const int stride = coord_stride(p->size(), opts.max_coords);
    for (int j = 0; j < p->size(); j += stride) {
      const double analytic = slot ? (*slot)[j] : 0.0;
      const double saved = p->value[j];
      p->value[j] = saved + h;
      const double fp = eval(nullptr);
      p->value[j] = saved - h;
      const double fm = eval(nullptr);
      p->value[j] = saved;
      const double numeric = (fp - fm) / (2.0 * h);
      worst = std::max(worst, fd_relative_error(analytic, numeric));
    }
  }
  return worst;
}

}  // namespace isodream
