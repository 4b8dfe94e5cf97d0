#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>

#include "gridloc/errors.hpp"
#include "gridloc/gridnet/gridnet.hpp"
#include "gridloc/numkit/blob.hpp"
#include "gridloc/numkit/gradcheck.hpp"
#include "gridloc/numkit/ops.hpp"
#include "gridloc/numkit/rng.hpp"

#include "oracles.hpp"

using namespace gridloc;
using namespace gridloc::gridnet;
using namespace gridloc::numkit;
using gridgeom::BoxBounds;
using gridgeom::RoiGeometry;
using i64 = std::int64_t;

namespace {

template <typename S>
TensorT<S> rand_t(std::vector<i64> shape, std::uint64_t seed, double lo, double hi) {
    CounterRng rng(seed, 5);
    TensorT<S> t = TensorT<S>::zeros(std::move(shape));
    for (i64 i = 0; i < t.numel(); ++i)
        t[i] = static_cast<S>(lo + (hi - lo) * rng.next_uniform());
    return t;
}

ModelConfig tiny_config() {
    ModelConfig c;
    c.backbone_channels = 2;
    c.roi_size_grid = 8;
    c.heatmap_size = 32;
    c.grid = "2pt";
    c.channels_per_point = 2;
    c.trunk_convs = 8;
    c.fusion_order = 2; // inert for 2pt, still exercised
    return c;
}

// Finite differences are only valid away from ReLU kinks. Zero-initialized
// biases park some pre-activations exactly at 0 (zero-padded conv corners
// whose live taps are all ReLU-zeroed stay exactly zero), where a two-sided
// difference measures the mean of the one-sided slopes instead of the
// subgradient the backward pass uses. Nudging the biases moves the check to
// a differentiable point without touching the graph under test.
template <typename S>
void nudge_biases(numkit::ParamStoreT<S>& store, std::uint64_t seed) {
    CounterRng rng(seed, 9);
    for (auto* p : store.all())
        if (p->name.ends_with(".bias"))
            for (i64 i = 0; i < p->value.numel(); ++i)
                p->value[i] = static_cast<S>(0.4 * rng.next_uniform() - 0.2);
}

} // namespace

TEST_CASE("model config validation and json round-trip") {
    ModelConfig c;
    c.validate();
    nlohmann::json j = c.to_json();
    ModelConfig back = ModelConfig::from_json(j);
    CHECK_EQ(back.to_json(), j);

    ModelConfig bad = c;
    bad.heatmap_size = 48;
    CHECK_THROWS_AS(bad.validate(), ValidationError);
    bad = c;
    bad.grid = "7x7";
    CHECK_THROWS_AS(bad.validate(), ValidationError);
    bad = c;
    bad.fusion_order = 3;
    CHECK_THROWS_AS(bad.validate(), ValidationError);
}

TEST_CASE("backbone produces stride-4 features") {
    ModelConfig cfg;
    Model m = build_model<float>(cfg, Head::grid, 11);
    Tape tape;
    auto img = tape.leaf(rand_t<float>({1, 1, 64, 64}, 60, 0, 1));
    auto f = backbone_forward(tape, m, img);
    CHECK_EQ(tape.value(f).shape, std::vector<i64>{1, 32, 16, 16});

    auto zero = tape.leaf(Tensor::zeros({1, 1, 16, 16}));
    auto fz = backbone_forward(tape, m, zero);
    for (i64 i = 0; i < tape.value(fz).numel(); ++i) CHECK_EQ(tape.value(fz)[i], 0.0f);

    auto odd = tape.leaf(Tensor::zeros({1, 1, 63, 64}));
    CHECK_THROWS_AS(backbone_forward(tape, m, odd), ValidationError);

    // fixed seed: rebuilt model gives bit-identical features
    Model m2 = build_model<float>(cfg, Head::grid, 11);
    Tape tape2;
    auto img2 = tape2.leaf(rand_t<float>({1, 1, 64, 64}, 60, 0, 1));
    auto f2 = backbone_forward(tape2, m2, img2);
    for (i64 i = 0; i < tape.value(f).numel(); ++i) CHECK_EQ(tape.value(f)[i], tape2.value(f2)[i]);
}

TEST_CASE("roi_extract samples bin centers") {
    Tape tape;
    Tensor feat = rand_t<float>({3, 8, 8}, 61, -1, 1);
    auto fid = tape.leaf(feat);

    // bins aligned to feature nodes: centers land on integer coordinates
    RoiGeometry roi{0, 0, 16, 16, 56, 56};
    auto r = roi_extract(tape, fid, roi, 2);
    REQUIRE_EQ(tape.value(r).shape, std::vector<i64>{3, 2, 2});
    for (int c = 0; c < 3; ++c) {
        CHECK_EQ(tape.value(r).at({c, 0, 0}), feat.at({c, 1, 1}));
        CHECK_EQ(tape.value(r).at({c, 0, 1}), feat.at({c, 1, 3}));
        CHECK_EQ(tape.value(r).at({c, 1, 0}), feat.at({c, 3, 1}));
        CHECK_EQ(tape.value(r).at({c, 1, 1}), feat.at({c, 3, 3}));
    }

    auto cid = tape.leaf(Tensor::full({2, 8, 8}, 0.7f));
    RoiGeometry off{3, 5, 9, 7, 56, 56};
    auto rc = roi_extract(tape, cid, off, 3);
    for (i64 i = 0; i < tape.value(rc).numel(); ++i)
        CHECK_EQ(tape.value(rc)[i], doctest::Approx(0.7).epsilon(1e-6));

    // random case against the standalone bilinear oracle
    Tensor64 feat64 = rand_t<double>({2, 8, 8}, 62, -1, 1);
    Tape64 t64;
    auto r64 = roi_extract(t64, t64.leaf(feat64), off, 3);
    for (int iy = 0; iy < 3; ++iy) {
        for (int ix = 0; ix < 3; ++ix) {
            const double fx = (off.p_x + (ix + 0.5) * off.w_p / 3) / 4.0;
            const double fy = (off.p_y + (iy + 0.5) * off.h_p / 3) / 4.0;
            auto want = oracles::bilinear(feat64, fx, fy);
            for (int c = 0; c < 2; ++c)
                CHECK_EQ(t64.value(r64).at({c, iy, ix}),
                         doctest::Approx(want[static_cast<std::size_t>(c)]).epsilon(1e-6));
        }
    }
}

TEST_CASE("grid head emits n_points heatmaps at 4x resolution") {
    ModelConfig cfg;
    cfg.channels_per_point = 4;
    Model m = build_model<float>(cfg, Head::grid, 3);
    Tape tape;
    auto rois = tape.leaf(rand_t<float>({2, 32, 14, 14}, 63, -0.5, 0.5));
    GridHeadOut out = grid_head_forward(tape, m, rois);
    REQUIRE_EQ(out.final_logits.size(), 9);
    REQUIRE_EQ(out.intermediate.size(), 9);
    for (int j = 0; j < 9; ++j) {
        CHECK_EQ(tape.value(out.final_logits[j]).shape, std::vector<i64>{2, 1, 56, 56});
        CHECK_EQ(tape.value(out.intermediate[j]).shape, std::vector<i64>{2, 1, 14, 14});
    }

    auto bad = tape.leaf(Tensor::zeros({2, 32, 7, 7}));
    CHECK_THROWS_AS(grid_head_forward(tape, m, bad), ValidationError);
}

TEST_CASE("fusion order none equals zeroed transfer banks") {
    ModelConfig a;
    a.channels_per_point = 4;
    a.fusion_order = 0;
    ModelConfig b = a;
    b.fusion_order = 2;
    Model ma = build_model<float>(a, Head::grid, 17);
    Model mb = build_model<float>(b, Head::grid, 17);
    for (auto* p : mb.store.all())
        if (p->name.rfind("fusion.", 0) == 0)
            for (i64 i = 0; i < p->value.numel(); ++i) p->value[i] = 0.0f;

    Tensor rois = rand_t<float>({1, 32, 14, 14}, 64, -0.5, 0.5);
    Tape ta, tb;
    GridHeadOut oa = grid_head_forward(ta, ma, ta.leaf(rois));
    GridHeadOut ob = grid_head_forward(tb, mb, tb.leaf(rois));
    for (int j = 0; j < 9; ++j) {
        const auto& va = ta.value(oa.final_logits[j]);
        const auto& vb = tb.value(ob.final_logits[j]);
        for (i64 i = 0; i < va.numel(); ++i) CHECK_EQ(va[i], vb[i]);
    }
}

TEST_CASE("parameter counts follow the documented formula") {
    ModelConfig cfg;
    for (const char* grid : {"2pt", "2x2", "3x3", "5x5"}) {
        for (int order : {0, 1, 2}) {
            CAPTURE(grid);
            CAPTURE(order);
            cfg.grid = grid;
            cfg.fusion_order = order;
            Model m = build_model<float>(cfg, Head::grid, 1);
            CHECK_EQ(m.store.total_count(), expected_param_count(cfg, Head::grid));
        }
    }
    cfg = ModelConfig{};
    Model r = build_model<float>(cfg, Head::regression, 1);
    CHECK_EQ(r.store.total_count(), expected_param_count(cfg, Head::regression));

    // doubling channels_per_point moves the count exactly per formula
    ModelConfig c8 = ModelConfig{};
    ModelConfig c16 = ModelConfig{};
    c16.channels_per_point = 16;
    Model m8 = build_model<float>(c8, Head::grid, 1);
    Model m16 = build_model<float>(c16, Head::grid, 1);
    CHECK_EQ(m16.store.total_count() - m8.store.total_count(),
             expected_param_count(c16, Head::grid) - expected_param_count(c8, Head::grid));
}

TEST_CASE("regression offset decode") {
    const RoiGeometry roi{0, 0, 10, 10, 56, 56};
    BoxBounds same = decode_regression({0, 0, 0, 0}, roi);
    CHECK_EQ(same.x_l, 0.0);
    CHECK_EQ(same.y_u, 0.0);
    CHECK_EQ(same.x_r, 10.0);
    CHECK_EQ(same.y_b, 10.0);

    BoxBounds shift = decode_regression({0.5, 0, 0, 0}, roi);
    CHECK_EQ(shift.x_l, doctest::Approx(5.0).epsilon(1e-12));
    CHECK_EQ(shift.x_r, doctest::Approx(15.0).epsilon(1e-12));
    CHECK_EQ(shift.y_u, doctest::Approx(0.0).epsilon(1e-12));
    CHECK_EQ(shift.y_b, doctest::Approx(10.0).epsilon(1e-12));

    BoxBounds wide = decode_regression({0, 0, std::log(2.0), 0}, roi);
    CHECK_EQ(wide.x_l, doctest::Approx(-5.0).epsilon(1e-12));
    CHECK_EQ(wide.x_r, doctest::Approx(15.0).epsilon(1e-12));
    CHECK_EQ(wide.width(), doctest::Approx(20.0).epsilon(1e-12));

    BoxBounds clamped = decode_regression({0, 0, 10, 0}, roi);
    CHECK_EQ(clamped.width(), doctest::Approx(10.0 * std::exp(4.0)).epsilon(1e-9));
}

TEST_CASE("regression head output shape and wiring") {
    ModelConfig cfg;
    Model m = build_model<float>(cfg, Head::regression, 2);
    Tape tape;
    auto feat = tape.leaf(rand_t<float>({32, 7, 7}, 65, -1, 1));
    auto off = regression_forward(tape, m, feat);
    CHECK_EQ(tape.value(off).shape, std::vector<i64>{4});

    BoxBounds b = regression_forward_decode(tape, m, feat, RoiGeometry{0, 0, 10, 10, 56, 56});
    CHECK(b.x_l <= b.x_r);

    auto bad = tape.leaf(Tensor::zeros({32, 6, 6}));
    CHECK_THROWS_AS(regression_forward(tape, m, bad), ValidationError);
    Model g = build_model<float>(cfg, Head::grid, 2);
    CHECK_THROWS_AS(regression_forward(tape, g, feat), ValidationError);
}

TEST_CASE("stack_rank3 stacks and routes gradients") {
    Tape64 tape;
    Param64 a("a", rand_t<double>({2, 3, 3}, 66, -1, 1));
    Param64 b("b", rand_t<double>({2, 3, 3}, 67, -1, 1));
    auto s = stack_rank3(tape, {tape.param(a), tape.param(b)});
    CHECK_EQ(tape.value(s).shape, std::vector<i64>{2, 2, 3, 3});
    CHECK_EQ(tape.value(s).at({0, 1, 2, 2}), a.value.at({1, 2, 2}));
    CHECK_EQ(tape.value(s).at({1, 0, 0, 1}), b.value.at({0, 0, 1}));

    auto loss = smooth_l1(tape, s, Tensor64::zeros({2, 2, 3, 3}));
    tape.backward(loss);
    CHECK(a.has_grad());
    CHECK(b.has_grad());

    auto c = tape.leaf(Tensor64::zeros({2, 3, 4}));
    CHECK_THROWS_AS(stack_rank3(tape, {tape.param(a), c}), ValidationError);
}

TEST_CASE("tiny grid head passes an end-to-end gradient check") {
    ModelConfig cfg = tiny_config();
    Model64 m = build_model<double>(cfg, Head::grid, 23);
    nudge_biases(m.store, 83);

    Tensor64 rois = rand_t<double>({1, 2, 8, 8}, 70, -0.6, 0.6);
    CounterRng rng(71);
    Tensor64 target32 = Tensor64::zeros({1, 1, 32, 32});
    for (i64 i = 0; i < target32.numel(); ++i) target32[i] = rng.next_uniform() < 0.1 ? 1.0 : 0.0;
    Tensor64 target14 = Tensor64::zeros({1, 1, 8, 8});
    for (i64 i = 0; i < target14.numel(); ++i) target14[i] = rng.next_uniform() < 0.1 ? 1.0 : 0.0;

    auto eval = [&](bool with_grad) {
        Tape64 tape;
        GridHeadOut out = grid_head_forward(tape, m, tape.leaf(rois));
        std::vector<i64> losses;
        for (int j = 0; j < 2; ++j) {
            losses.push_back(sigmoid_bce(tape, out.final_logits[j], target32));
            losses.push_back(sigmoid_bce(tape, out.intermediate[j], target14));
        }
        auto loss = sum_scalars(tape, losses);
        if (with_grad) tape.backward(loss);
        return static_cast<double>(tape.value(loss)[0]);
    };
    CHECK(max_rel_grad_error(m.store.all(), eval, 1e-5) < 1e-4);
}

TEST_CASE("full pipeline gradient check through backbone and roi extraction") {
    ModelConfig cfg = tiny_config();
    Model64 m = build_model<double>(cfg, Head::grid, 29);
    nudge_biases(m.store, 82);

    Tensor64 image = rand_t<double>({1, 1, 16, 16}, 72, 0, 1);
    CounterRng rng(73);
    Tensor64 target = Tensor64::zeros({2, 2, 32, 32});
    for (i64 i = 0; i < target.numel(); ++i) target[i] = rng.next_uniform() < 0.1 ? 1.0 : 0.0;
    const RoiGeometry r0{2, 2, 10, 9, 32, 32};
    const RoiGeometry r1{5, 4, 8, 10, 32, 32};

    auto eval = [&](bool with_grad) {
        Tape64 tape;
        auto feat = backbone_forward(tape, m, tape.leaf(image));
        auto chw = reshape(tape, feat, {2, 4, 4});
        auto a = roi_extract(tape, chw, r0, 8);
        auto b = roi_extract(tape, chw, r1, 8);
        auto rois = stack_rank3(tape, {a, b});
        GridHeadOut out = grid_head_forward(tape, m, rois);
        auto both = concat_channels(tape, {out.final_logits[0], out.final_logits[1]});
        auto loss = sigmoid_bce(tape, both, target);
        if (with_grad) tape.backward(loss);
        return static_cast<double>(tape.value(loss)[0]);
    };
    CHECK(max_rel_grad_error(m.store.all(), eval, 1e-5) < 1e-4);
}

TEST_CASE("checkpoints round-trip through the blob store") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "gridloc_ckpt_test";
    fs::create_directories(dir);
    const std::string mpath = (dir / "ckpt.json").string();
    const std::string bpath = (dir / "ckpt.bin").string();

    ModelConfig cfg = tiny_config();
    Model m = build_model<float>(cfg, Head::grid, 37);
    save_model(mpath, bpath, m);
    Model back = load_model(mpath);
    CHECK_EQ(back.cfg.to_json(), m.cfg.to_json());
    CHECK_EQ(head_name(back.head), "grid");
    CHECK_EQ(back.store.size(), m.store.size());
    auto want = m.store.snapshot();
    for (auto& [name, t] : back.store.snapshot()) {
        REQUIRE(want.count(name) == 1);
        for (i64 i = 0; i < t.numel(); ++i) CHECK_EQ(t[i], want.at(name)[i]);
    }

    // a bare tensor blob is not a checkpoint
    const std::string mp2 = (dir / "plain.json").string();
    numkit::write_blob(mp2, (dir / "plain.bin").string(), want, nlohmann::json::object());
    CHECK_THROWS_AS(load_model(mp2), ValidationError);
    fs::remove_all(dir);
}
