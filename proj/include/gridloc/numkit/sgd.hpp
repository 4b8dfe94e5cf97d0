#pragma once

#include <map>
#include <string>
#include <vector>

#include "gridloc/numkit/tape.hpp"

namespace gridloc::numkit {

template <typename S>
struct SgdStateT {
    double lr = 0.005;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    std::map<std::string, TensorT<S>> velocity;
};

// v <- mu*v + g + lambda*w;  w <- w - lr*v.  Gradients are zeroed afterwards;
// a parameter with no accumulated gradient is an error.
template <typename S>
void sgd_step(const std::vector<ParamT<S>*>& params, SgdStateT<S>& state);

using SgdState = SgdStateT<float>;
using SgdState64 = SgdStateT<double>;

} // namespace gridloc::numkit
