#include "gridloc/fusion/fusion.hpp"

#include <cstdlib>

#include "gridloc/numkit/init.hpp"
#include "gridloc/numkit/ops.hpp"
#include "gridloc/numkit/rng.hpp"

namespace gridloc::fusion {

std::vector<int> source_points(int i, const gridgeom::GridSpec& spec) {
    if (i < 0 || i >= spec.count())
        throw ValidationError("grid point index " + std::to_string(i) + " out of range");
    std::vector<int> out;
    const auto [ri, ci] = spec.points[static_cast<std::size_t>(i)];
    for (int j = 0; j < spec.count(); ++j) {
        if (j == i) continue;
        const auto [rj, cj] = spec.points[static_cast<std::size_t>(j)];
        if (std::abs(ri - rj) + std::abs(ci - cj) == 1) out.push_back(j);
    }
    return out;
}

template <typename S>
TransferBankT<S> make_transfer_bank(numkit::ParamStoreT<S>& store, const std::string& prefix,
                                    const gridgeom::GridSpec& spec, int channels,
                                    std::uint64_t seed) {
    if (channels <= 0) throw ValidationError("transfer bank needs positive channel count");
    TransferBankT<S> bank;
    bank.channels = channels;
    for (int i = 0; i < spec.count(); ++i) {
        for (int j : source_points(i, spec)) {
            const std::string base =
                prefix + ".j" + std::to_string(j) + "_to_i" + std::to_string(i);
            std::array<numkit::ParamT<S>*, 6> stack{};
            for (int k = 0; k < 3; ++k) {
                const std::string wname = base + ".conv" + std::to_string(k) + ".weight";
                const std::string bname = base + ".conv" + std::to_string(k) + ".bias";
                if (!store.has(wname)) {
                    store.create(wname,
                                 numkit::he_init<S>({channels, channels, 5, 5}, channels * 25,
                                                    numkit::derive_seed(seed, wname)));
                    store.create(bname, numkit::TensorT<S>::zeros({channels}));
                }
                stack[static_cast<std::size_t>(2 * k)] = &store.get(wname);
                stack[static_cast<std::size_t>(2 * k + 1)] = &store.get(bname);
            }
            bank.stacks.emplace(std::make_pair(j, i), stack);
        }
    }
    return bank;
}

template <typename S>
std::vector<std::int64_t> fuse_once(numkit::TapeT<S>& tape,
                                    const std::vector<std::int64_t>& features,
                                    const gridgeom::GridSpec& spec,
                                    const TransferBankT<S>& bank) {
    if (static_cast<int>(features.size()) != spec.count())
        throw ValidationError("expected " + std::to_string(spec.count()) +
                              " feature maps, got " + std::to_string(features.size()));
    const auto& shape0 = tape.value(features[0]).shape;
    for (std::int64_t f : features)
        if (tape.value(f).shape != shape0)
            throw ValidationError("fusion inputs disagree in shape: " + tape.value(f).shape_str() +
                                  " vs " + tape.value(features[0]).shape_str());

    const numkit::Conv2dCfg cfg{1, 2, 1};
    std::vector<std::int64_t> out(features);
    for (int i = 0; i < spec.count(); ++i) {
        for (int j : source_points(i, spec)) {
            const auto& st = bank.stacks.at({j, i});
            auto h = numkit::conv2d(tape, features[static_cast<std::size_t>(j)],
                                    tape.param(*st[0]), tape.param(*st[1]), cfg);
            h = numkit::relu(tape, h);
            h = numkit::conv2d(tape, h, tape.param(*st[2]), tape.param(*st[3]), cfg);
            h = numkit::relu(tape, h);
            h = numkit::conv2d(tape, h, tape.param(*st[4]), tape.param(*st[5]), cfg);
            out[static_cast<std::size_t>(i)] =
                numkit::add(tape, out[static_cast<std::size_t>(i)], h);
        }
    }
    return out;
}

#define GRIDLOC_FUSION_INSTANTIATE(S)                                                            \
    template TransferBankT<S> make_transfer_bank<S>(numkit::ParamStoreT<S>&, const std::string&, \
                                                    const gridgeom::GridSpec&, int,              \
                                                    std::uint64_t);                              \
    template std::vector<std::int64_t> fuse_once<S>(numkit::TapeT<S>&,                           \
                                                    const std::vector<std::int64_t>&,            \
                                                    const gridgeom::GridSpec&,                   \
                                                    const TransferBankT<S>&);

GRIDLOC_FUSION_INSTANTIATE(float)
GRIDLOC_FUSION_INSTANTIATE(double)

} // namespace gridloc::fusion
