#pragma once

#include <functional>
#include <vector>

#include "gridloc/numkit/tape.hpp"

namespace gridloc::numkit {

// Central-difference gradient check over every coordinate of every parameter.
// eval(true) must rebuild the graph from current parameter values, run
// backward, and return the loss (accumulating into each ParamT::grad);
// eval(false) must return the loss only. Relative error per coordinate is
// |analytic - numeric| / max(1, |analytic|, |numeric|); the maximum is
// returned. f64 parameters only - f32 finite differences are meaningless at
// these tolerances.
double max_rel_grad_error(const std::vector<ParamT<double>*>& params,
                          const std::function<double(bool with_grad)>& eval, double eps);

} // namespace gridloc::numkit
