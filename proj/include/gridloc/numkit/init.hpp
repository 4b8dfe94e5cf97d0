#pragma once

#include <cstdint>
#include <vector>

#include "gridloc/numkit/tensor.hpp"

namespace gridloc::numkit {

// Samples from normal(0, sqrt(2 / fan_in)); deterministic for a given seed.
template <typename S>
TensorT<S> he_init(const std::vector<std::int64_t>& shape, std::int64_t fan_in,
                   std::uint64_t seed);

} // namespace gridloc::numkit
