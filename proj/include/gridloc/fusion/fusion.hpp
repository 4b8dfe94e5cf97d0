#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "gridloc/gridgeom/gridgeom.hpp"
#include "gridloc/numkit/param_store.hpp"
#include "gridloc/numkit/tape.hpp"

namespace gridloc::fusion {

// Source set S_i: indices of grid points at unit L1 distance from point i.
std::vector<int> source_points(int i, const gridgeom::GridSpec& spec);

// One transfer stack per ordered pair (src -> dst): three 5x5 convs (pad 2),
// ReLU between them, none after the last so the additive fusion can subtract.
// Slots: {w0, b0, w1, b1, w2, b2}.
template <typename S>
struct TransferBankT {
    int channels = 0;
    std::map<std::pair<int, int>, std::array<numkit::ParamT<S>*, 6>> stacks;
};

using TransferBank = TransferBankT<float>;
using TransferBank64 = TransferBankT<double>;

// Create (or bind, if already present) the transfer parameters for every
// ordered pair of the grid under `prefix` (e.g. "fusion.o1"). Weight layout is
// (channels, channels, 5, 5), He-initialized; biases start at zero. Parameter
// names follow "<prefix>.j{src}_to_i{dst}.conv{0..2}.weight/bias".
template <typename S>
TransferBankT<S> make_transfer_bank(numkit::ParamStoreT<S>& store, const std::string& prefix,
                                    const gridgeom::GridSpec& spec, int channels,
                                    std::uint64_t seed);

// One fusion round: out_i = F_i + sum over j in S_i of T_{j->i}(F_j).
// Features are per-point tape nodes of identical shape (R, channels, H, W).
// Used twice for second-order fusion, with the independent "o2" bank.
template <typename S>
std::vector<std::int64_t> fuse_once(numkit::TapeT<S>& tape,
                                    const std::vector<std::int64_t>& features,
                                    const gridgeom::GridSpec& spec,
                                    const TransferBankT<S>& bank);

} // namespace gridloc::fusion
