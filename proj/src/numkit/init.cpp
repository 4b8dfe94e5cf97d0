#include "gridloc/numkit/init.hpp"

#include <cmath>

#include "gridloc/errors.hpp"
#include "gridloc/numkit/rng.hpp"

namespace gridloc::numkit {

template <typename S>
TensorT<S> he_init(const std::vector<std::int64_t>& shape, std::int64_t fan_in,
                   std::uint64_t seed) {
    if (fan_in <= 0) throw ValidationError("he_init: fan_in must be positive");
    TensorT<S> out = TensorT<S>::zeros(shape);
    CounterRng rng(seed, 0);
    const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (std::int64_t i = 0; i < out.numel(); ++i)
        out[i] = static_cast<S>(rng.next_gaussian() * sd);
    return out;
}

template TensorT<float> he_init<float>(const std::vector<std::int64_t>&, std::int64_t,
                                       std::uint64_t);
template TensorT<double> he_init<double>(const std::vector<std::int64_t>&, std::int64_t,
                                         std::uint64_t);

} // namespace gridloc::numkit
