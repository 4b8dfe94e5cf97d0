#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <set>

#include "gridloc/errors.hpp"
#include "gridloc/fusion/fusion.hpp"
#include "gridloc/numkit/gradcheck.hpp"
#include "gridloc/numkit/ops.hpp"
#include "gridloc/numkit/rng.hpp"

using namespace gridloc;
using namespace gridloc::fusion;
using namespace gridloc::numkit;
using gridgeom::GridSpec;
using i64 = std::int64_t;

namespace {

std::set<int> brute_force_sources(int i, const GridSpec& g) {
    std::set<int> out;
    for (int j = 0; j < g.count(); ++j) {
        const int d = std::abs(g.points[i].first - g.points[j].first) +
                      std::abs(g.points[i].second - g.points[j].second);
        if (j != i && d == 1) out.insert(j);
    }
    return out;
}

template <typename S>
TensorT<S> rand_t(std::vector<i64> shape, std::uint64_t seed, double lo, double hi) {
    CounterRng rng(seed, 3);
    TensorT<S> t = TensorT<S>::zeros(std::move(shape));
    for (i64 i = 0; i < t.numel(); ++i)
        t[i] = static_cast<S>(lo + (hi - lo) * rng.next_uniform());
    return t;
}

GridSpec single_point_grid() {
    GridSpec g;
    g.name = "1x1";
    g.n = 1;
    g.points = {{0, 0}};
    g.unit_positions = {{0.5, 0.5}};
    g.edges = {{{0}, {0}, {0}, {0}}};
    return g;
}

} // namespace

TEST_CASE("source_points matches brute-force unit-L1 enumeration") {
    for (const char* name : {"2pt", "2x2", "3x3", "4x4", "5x5"}) {
        CAPTURE(name);
        GridSpec g = GridSpec::by_name(name);
        for (int i = 0; i < g.count(); ++i) {
            auto got = source_points(i, g);
            CHECK_EQ(std::set<int>(got.begin(), got.end()), brute_force_sources(i, g));
            for (int j : got) {
                auto back = source_points(j, g);
                CHECK(std::find(back.begin(), back.end(), i) != back.end());
            }
        }
    }

    GridSpec g3 = GridSpec::by_name("3x3");
    CHECK_EQ(std::set<int>{1, 3}, brute_force_sources(0, g3));
    CHECK_EQ(source_points(4, g3), std::vector<int>{1, 3, 5, 7});
    int sizes[3] = {0, 0, 0};
    for (int i = 0; i < 9; ++i) {
        const std::size_t s = source_points(i, g3).size();
        REQUIRE(s >= 2);
        REQUIRE(s <= 4);
        ++sizes[s - 2];
    }
    CHECK_EQ(sizes[0], 4); // corners
    CHECK_EQ(sizes[1], 4); // edge midpoints
    CHECK_EQ(sizes[2], 1); // center

    for (int i = 0; i < 2; ++i) CHECK(source_points(i, GridSpec::by_name("2pt")).empty());
    CHECK_THROWS_AS(source_points(9, g3), ValidationError);
}

TEST_CASE("transfer bank naming and independence of the two orders") {
    GridSpec g = GridSpec::by_name("3x3");
    ParamStore store;
    auto o1 = make_transfer_bank(store, "fusion.o1", g, 8, 42);
    auto o2 = make_transfer_bank(store, "fusion.o2", g, 8, 42);
    CHECK_EQ(o1.stacks.size(), 24); // 12 undirected unit-L1 edges, both directions
    CHECK_EQ(o2.stacks.size(), 24);
    CHECK(store.has("fusion.o1.j1_to_i0.conv0.weight"));
    CHECK(store.has("fusion.o1.j1_to_i0.conv2.bias"));
    CHECK(store.has("fusion.o2.j1_to_i0.conv0.weight"));
    // two banks, no shared parameters
    CHECK_EQ(store.size(), 2 * 24 * 3 * 2);
    CHECK_EQ(store.total_count(), 2 * 24 * 3 * (8 * 8 * 25 + 8));
    // rebinding reuses the same parameters instead of recreating them
    auto again = make_transfer_bank(store, "fusion.o1", g, 8, 42);
    CHECK_EQ(store.size(), 2 * 24 * 3 * 2);
    CHECK_EQ(again.stacks.at({1, 0})[0], o1.stacks.at({1, 0})[0]);
}

TEST_CASE("zero transfer weights make fusion the identity") {
    GridSpec g = GridSpec::by_name("3x3");
    ParamStore store;
    auto bank = make_transfer_bank(store, "fusion.o1", g, 2, 7);
    for (auto* p : store.all())
        for (i64 i = 0; i < p->value.numel(); ++i) p->value[i] = 0.0f;

    Tape tape;
    std::vector<i64> feats;
    for (int i = 0; i < 9; ++i)
        feats.push_back(tape.leaf(rand_t<float>({1, 2, 3, 3}, 100 + i, -1, 1)));
    auto fused = fuse_once(tape, feats, g, bank);
    for (int i = 0; i < 9; ++i) {
        const auto& a = tape.value(feats[i]);
        const auto& b = tape.value(fused[i]);
        for (i64 k = 0; k < a.numel(); ++k) CHECK_EQ(a[k], b[k]);
    }
}

TEST_CASE("2-point fusion is inert regardless of weights") {
    GridSpec g = GridSpec::by_name("2pt");
    ParamStore store;
    auto bank = make_transfer_bank(store, "fusion.o1", g, 4, 9);
    CHECK(bank.stacks.empty());
    CHECK_EQ(store.size(), 0);

    Tape tape;
    std::vector<i64> feats = {tape.leaf(rand_t<float>({1, 4, 5, 5}, 110, -1, 1)),
                              tape.leaf(rand_t<float>({1, 4, 5, 5}, 111, -1, 1))};
    auto fused = fuse_once(tape, feats, g, bank);
    CHECK_EQ(fused[0], feats[0]);
    CHECK_EQ(fused[1], feats[1]);
}

TEST_CASE("single-point degenerate grid passes features through") {
    GridSpec g = single_point_grid();
    ParamStore store;
    auto o1 = make_transfer_bank(store, "fusion.o1", g, 2, 1);
    auto o2 = make_transfer_bank(store, "fusion.o2", g, 2, 1);
    Tape tape;
    std::vector<i64> feats = {tape.leaf(rand_t<float>({1, 2, 4, 4}, 112, -1, 1))};
    auto f1 = fuse_once(tape, feats, g, o1);
    auto f2 = fuse_once(tape, f1, g, o2);
    CHECK_EQ(f2[0], feats[0]);
}

TEST_CASE("identity transfer stacks sum neighbor constants") {
    GridSpec g = GridSpec::by_name("3x3");
    ParamStore store;
    auto bank = make_transfer_bank(store, "fusion.o1", g, 2, 7);
    // every stack becomes channelwise delta convs: T(F) = F for positive F
    for (auto* p : store.all()) {
        for (i64 i = 0; i < p->value.numel(); ++i) p->value[i] = 0.0f;
        if (p->value.rank() == 4)
            for (int c = 0; c < 2; ++c) p->value.at({c, c, 2, 2}) = 1.0f;
    }

    Tape tape;
    std::vector<i64> feats;
    const double consts[9] = {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
    for (int i = 0; i < 9; ++i)
        feats.push_back(tape.leaf(Tensor::full({1, 2, 3, 3}, static_cast<float>(consts[i]))));
    auto fused = fuse_once(tape, feats, g, bank);

    // center (index 4) gains the four edge midpoints 1,3,5,7
    const float want = static_cast<float>(consts[4] + consts[1] + consts[3] + consts[5] + consts[7]);
    CHECK_EQ(tape.value(fused[4]).at({0, 0, 1, 1}), doctest::Approx(want).epsilon(1e-6));
    // corner 0 gains midpoints 1 and 3
    const float corner = static_cast<float>(consts[0] + consts[1] + consts[3]);
    CHECK_EQ(tape.value(fused[0]).at({0, 1, 1, 1}), doctest::Approx(corner).epsilon(1e-6));
}

TEST_CASE("influence range is L1<=1 after one round and L1<=2 after two") {
    GridSpec g = GridSpec::by_name("3x3");
    ParamStore store;
    auto o1 = make_transfer_bank(store, "fusion.o1", g, 2, 13);
    auto o2 = make_transfer_bank(store, "fusion.o2", g, 2, 14);
    // positive weights + positive inputs keep every ReLU active, so any
    // reachable perturbation must propagate
    for (auto* p : store.all())
        for (i64 i = 0; i < p->value.numel(); ++i)
            p->value[i] = std::abs(p->value[i]) + (p->value.rank() == 1 ? 0.01f : 0.0f);

    auto run = [&](int perturbed) {
        Tape tape;
        std::vector<i64> feats;
        for (int i = 0; i < 9; ++i) {
            Tensor f = Tensor::full({1, 2, 3, 3}, 0.5f);
            if (i == perturbed) f[0] += 0.25f;
            feats.push_back(tape.leaf(f));
        }
        auto f1 = fuse_once(tape, feats, g, o1);
        auto f2 = fuse_once(tape, f1, g, o2);
        std::vector<Tensor> v1, v2;
        for (int i = 0; i < 9; ++i) {
            v1.push_back(tape.value(f1[i]));
            v2.push_back(tape.value(f2[i]));
        }
        return std::make_pair(v1, v2);
    };

    auto [base1, base2] = run(-1);
    for (int j = 0; j < 9; ++j) {
        auto [p1, p2] = run(j);
        for (int i = 0; i < 9; ++i) {
            const int d = std::abs(g.points[i].first - g.points[j].first) +
                          std::abs(g.points[i].second - g.points[j].second);
            double d1 = 0, d2 = 0;
            for (i64 k = 0; k < base1[i].numel(); ++k) {
                d1 = std::max(d1, std::abs(static_cast<double>(p1[i][k] - base1[i][k])));
                d2 = std::max(d2, std::abs(static_cast<double>(p2[i][k] - base2[i][k])));
            }
            CAPTURE(i);
            CAPTURE(j);
            CHECK_EQ(d1 > 1e-7, d <= 1);
            CHECK_EQ(d2 > 1e-7, d <= 2);
        }
    }
}

TEST_CASE("fusion shape mismatch is rejected") {
    GridSpec g = GridSpec::by_name("2x2");
    ParamStore store;
    auto bank = make_transfer_bank(store, "fusion.o1", g, 2, 5);
    Tape tape;
    std::vector<i64> feats;
    for (int i = 0; i < 3; ++i) feats.push_back(tape.leaf(Tensor::zeros({1, 2, 3, 3})));
    feats.push_back(tape.leaf(Tensor::zeros({1, 2, 4, 4})));
    CHECK_THROWS_AS(fuse_once(tape, feats, g, bank), ValidationError);
    feats.pop_back();
    CHECK_THROWS_AS(fuse_once(tape, feats, g, bank), ValidationError);
}

TEST_CASE("gradients flow through two fusion rounds") {
    GridSpec g = GridSpec::by_name("2x2");
    ParamStore64 store;
    auto o1 = make_transfer_bank(store, "fusion.o1", g, 2, 21);
    auto o2 = make_transfer_bank(store, "fusion.o2", g, 2, 22);
    std::vector<Tensor64> inputs;
    for (int i = 0; i < 4; ++i) inputs.push_back(rand_t<double>({1, 2, 3, 3}, 200 + i, -1, 1));
    std::vector<Tensor64> targets;
    for (int i = 0; i < 4; ++i) {
        CounterRng rng(300 + i);
        Tensor64 t = Tensor64::zeros({1, 2, 3, 3});
        for (i64 k = 0; k < t.numel(); ++k) t[k] = rng.next_uniform() < 0.5 ? 0.0 : 1.0;
        targets.push_back(t);
    }

    auto eval = [&](bool with_grad) {
        Tape64 tape;
        std::vector<i64> feats;
        for (int i = 0; i < 4; ++i) feats.push_back(tape.leaf(inputs[i]));
        auto f1 = fuse_once(tape, feats, g, o1);
        auto f2 = fuse_once(tape, f1, g, o2);
        std::vector<i64> losses;
        for (int i = 0; i < 4; ++i) losses.push_back(sigmoid_bce(tape, f2[i], targets[i]));
        auto loss = sum_scalars(tape, losses);
        if (with_grad) tape.backward(loss);
        return static_cast<double>(tape.value(loss)[0]);
    };
    CHECK(max_rel_grad_error(store.all(), eval, 1e-5) < 1e-5);
}
