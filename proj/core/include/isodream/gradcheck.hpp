#pragma once

#include <functional>
#include <span>
#include <vector>

#include "isodream/params.hpp"
#include "isodream/tape.hpp"

namespace isodream {

// Central finite differences in float64 with step `fd_step`, compared
// per-coordinate against the analytic gradient. The relative error uses
// max(|analytic|, |numeric|, 1e-3) as denominator so that coordinates with
// tiny gradients are judged on an absolute scale of 1e-3 * tolerance.
struct GradCheckOptions {
  double fd_step = 1e-5;
  // Optional cap on checked coordinates per buffer (coordinates are then
  // strided evenly); <= 0 checks everything.
  int max_coords = -1;
};

double fd_relative_error(double analytic, double numeric);

// Checks d(op)/d(inputs) for an op built on a tape from constant leaves.
// If the op output is not scalar it is reduced by a fixed pseudo-random
// projection. Returns the worst relative error over all input coordinates.
double check_gradients(
    const std::function<Var(Tape<double>&, std::span<const Var>)>& op,
    std::vector<std::vector<double>> inputs,
    const std::vector<std::pair<int, int>>& shapes,
    const GradCheckOptions& opts = {});

// Checks d(loss)/d(params) for a model evaluation. `eval` must rebuild the
// forward pass from current parameter values; when `sink` is non-null it must
// also run backward into it. Returns the worst relative error over every
// parameter coordinate (subject to opts.max_coords).
double check_param_gradients(
    const std::function<double(GradSink<double>*)>& eval,
    ParamSet<double>& params, const GradCheckOptions& opts = {});

}  // namespace isodream
