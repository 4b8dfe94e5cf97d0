#include "gridloc/gridnet/gridnet.hpp"

#include <algorithm>
#include <cmath>

#include "gridloc/numkit/blob.hpp"
#include "gridloc/numkit/init.hpp"
#include "gridloc/numkit/ops.hpp"
#include "gridloc/numkit/rng.hpp"

namespace gridloc::gridnet {

using numkit::Conv2dCfg;
using numkit::ConvT2dCfg;
using numkit::TapeT;
using numkit::TensorT;
using i64 = std::int64_t;

std::string head_name(Head h) { return h == Head::grid ? "grid" : "regression"; }

Head head_by_name(const std::string& name) {
    if (name == "grid") return Head::grid;
    if (name == "regression") return Head::regression;
    throw ValidationError("unknown head '" + name + "' (expected grid or regression)");
}

void ModelConfig::validate() const {
    if (backbone_channels <= 0) throw ValidationError("backbone_channels must be positive");
    if (roi_size_grid <= 0 || roi_size_reg <= 0) throw ValidationError("roi sizes must be positive");
    if (trunk_convs <= 0) throw ValidationError("trunk_convs must be positive");
    if (trunk_kernel <= 0 || trunk_kernel % 2 == 0)
        throw ValidationError("trunk_kernel must be odd and positive");
    if (trunk_dilation <= 0) throw ValidationError("trunk_dilation must be positive");
    if (channels_per_point <= 0) throw ValidationError("channels_per_point must be positive");
    if (heatmap_size != roi_size_grid * 4)
        throw ValidationError("heatmap_size must be roi_size_grid*4, got " +
                              std::to_string(heatmap_size) + " for roi " +
                              std::to_string(roi_size_grid));
    if (fusion_order < 0 || fusion_order > 2)
        throw ValidationError("fusion_order must be 0, 1 or 2");
    gridgeom::GridSpec::by_name(grid); // throws on bad names
}

nlohmann::json ModelConfig::to_json() const {
    return {{"backbone_channels", backbone_channels},
            {"roi_size_grid", roi_size_grid},
            {"roi_size_reg", roi_size_reg},
            {"trunk_convs", trunk_convs},
            {"trunk_kernel", trunk_kernel},
            {"trunk_dilation", trunk_dilation},
            {"heatmap_size", heatmap_size},
            {"grid", grid},
            {"channels_per_point", channels_per_point},
            {"fusion_order", fusion_order},
            {"extended_mapping", extended_mapping}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.backbone_channels = j.at("backbone_channels").get<int>();
    c.roi_size_grid = j.at("roi_size_grid").get<int>();
    c.roi_size_reg = j.at("roi_size_reg").get<int>();
    c.trunk_convs = j.at("trunk_convs").get<int>();
    c.trunk_kernel = j.at("trunk_kernel").get<int>();
    c.trunk_dilation = j.at("trunk_dilation").get<int>();
    c.heatmap_size = j.at("heatmap_size").get<int>();
    c.grid = j.at("grid").get<std::string>();
    c.channels_per_point = j.at("channels_per_point").get<int>();
    c.fusion_order = j.at("fusion_order").get<int>();
    c.extended_mapping = j.at("extended_mapping").get<bool>();
    c.validate();
    return c;
}

namespace {

int backbone_half(const ModelConfig& cfg) { return std::max(1, cfg.backbone_channels / 2); }

template <typename S>
void create_conv(numkit::ParamStoreT<S>& store, const std::string& base, i64 out_c, i64 in_c,
                 i64 k, std::uint64_t seed, i64 fan_in) {
    store.create(base + ".weight", numkit::he_init<S>({out_c, in_c, k, k}, fan_in,
                                                      numkit::derive_seed(seed, base + ".weight")));
    store.create(base + ".bias", TensorT<S>::zeros({out_c}));
}

} // namespace

template <typename S>
ModelT<S> build_model(const ModelConfig& cfg, Head head, std::uint64_t seed) {
    cfg.validate();
    ModelT<S> m;
    m.cfg = cfg;
    m.head = head;
    m.spec = gridgeom::GridSpec::by_name(cfg.grid);

    const i64 cb = cfg.backbone_channels;
    const i64 half = backbone_half(cfg);
    create_conv(m.store, "backbone.conv0", half, 1, 3, seed, 1 * 9);
    create_conv(m.store, "backbone.conv1", cb, half, 3, seed, half * 9);
    create_conv(m.store, "backbone.conv2", cb, cb, 3, seed, cb * 9);
    create_conv(m.store, "backbone.conv3", cb, cb, 3, seed, cb * 9);

    if (head == Head::grid) {
        const i64 k = cfg.trunk_kernel;
        const i64 cpp = cfg.channels_per_point;
        for (int t = 0; t < cfg.trunk_convs; ++t)
            create_conv(m.store, "grid_head.trunk.conv" + std::to_string(t), cb, cb, k, seed,
                        cb * k * k);
        for (int j = 0; j < m.spec.count(); ++j) {
            const std::string pt = "grid_head.point" + std::to_string(j);
            create_conv(m.store, pt + ".proj", cpp, cb, 1, seed, cb);
            create_conv(m.store, pt + ".inter", 1, cpp, 1, seed, cpp);
            create_conv(m.store, pt + ".final", 1, cpp, 1, seed, cpp);
        }
        for (int d = 0; d < 2; ++d) {
            const std::string base = "grid_head.deconv" + std::to_string(d);
            // transposed conv weight layout (in, out, kh, kw); stride-2 4x4
            // kernels give each output pixel 4 taps per input channel
            m.store.create(base + ".weight",
                           numkit::he_init<S>({cpp, cpp, 4, 4}, cpp * 4,
                                              numkit::derive_seed(seed, base + ".weight")));
            m.store.create(base + ".bias", TensorT<S>::zeros({cpp}));
        }
        if (cfg.fusion_order >= 1)
            m.bank1 = fusion::make_transfer_bank(m.store, "fusion.o1", m.spec,
                                                 static_cast<int>(cpp),
                                                 numkit::derive_seed(seed, "fusion.o1"));
        if (cfg.fusion_order >= 2)
            m.bank2 = fusion::make_transfer_bank(m.store, "fusion.o2", m.spec,
                                                 static_cast<int>(cpp),
                                                 numkit::derive_seed(seed, "fusion.o2"));
    } else {
        const i64 in_dim = cb * cfg.roi_size_reg * cfg.roi_size_reg;
        m.store.create("reg_head.fc0.weight",
                       numkit::he_init<S>({256, in_dim}, in_dim,
                                          numkit::derive_seed(seed, "reg_head.fc0.weight")));
        m.store.create("reg_head.fc0.bias", TensorT<S>::zeros({256}));
        m.store.create("reg_head.fc1.weight",
                       numkit::he_init<S>({4, 256}, 256,
                                          numkit::derive_seed(seed, "reg_head.fc1.weight")));
        m.store.create("reg_head.fc1.bias", TensorT<S>::zeros({4}));
    }
    return m;
}

std::int64_t expected_param_count(const ModelConfig& cfg, Head head) {
    const i64 cb = cfg.backbone_channels;
    const i64 half = backbone_half(cfg);
    i64 n = (half * 9 + half) + (cb * half * 9 + cb) + 2 * (cb * cb * 9 + cb);
    if (head == Head::grid) {
        const i64 k = cfg.trunk_kernel;
        const i64 cpp = cfg.channels_per_point;
        const gridgeom::GridSpec spec = gridgeom::GridSpec::by_name(cfg.grid);
        n += cfg.trunk_convs * (cb * cb * k * k + cb);
        n += spec.count() * ((cpp * cb + cpp) + 2 * (cpp + 1)); // proj + inter + final
        n += 2 * (cpp * cpp * 16 + cpp);                        // shared deconvs
        i64 pairs = 0;
        for (int i = 0; i < spec.count(); ++i)
            pairs += static_cast<i64>(fusion::source_points(i, spec).size());
        const i64 per_bank = pairs * 3 * (cpp * cpp * 25 + cpp);
        n += std::min(cfg.fusion_order, 2) * per_bank;
    } else {
        const i64 in_dim = cb * cfg.roi_size_reg * cfg.roi_size_reg;
        n += (256 * in_dim + 256) + (4 * 256 + 4);
    }
    return n;
}

template <typename S>
i64 backbone_forward(TapeT<S>& tape, ModelT<S>& model, i64 image) {
    const TensorT<S>& v = tape.value(image);
    if (v.rank() != 4 || v.dim(1) != 1)
        throw ValidationError("backbone expects (N,1,H,W), got " + v.shape_str());
    if (v.dim(2) % 4 != 0 || v.dim(3) % 4 != 0)
        throw ValidationError("backbone input size " + std::to_string(v.dim(2)) + "x" +
                              std::to_string(v.dim(3)) + " must be a multiple of 4");
    const int strides[4] = {2, 2, 1, 1};
    i64 x = image;
    for (int l = 0; l < 4; ++l) {
        const std::string base = "backbone.conv" + std::to_string(l);
        x = numkit::conv2d(tape, x, tape.param(model.store.get(base + ".weight")),
                           tape.param(model.store.get(base + ".bias")),
                           Conv2dCfg{strides[l], 1, 1});
        x = numkit::relu(tape, x);
    }
    return x;
}

template <typename S>
i64 roi_extract(TapeT<S>& tape, i64 feature, const gridgeom::RoiGeometry& roi, int out_size,
                double stride) {
    roi.validate();
    if (out_size <= 0) throw ValidationError("roi_extract needs a positive output size");
    const TensorT<S>& f = tape.value(feature);
    if (f.rank() != 3)
        throw ValidationError("roi_extract expects rank-3 features, got " + f.shape_str());
    const i64 channels = f.dim(0); // appending below may reallocate the tape
    std::vector<std::pair<double, double>> pts;
    pts.reserve(static_cast<std::size_t>(out_size) * out_size);
    for (int iy = 0; iy < out_size; ++iy) {
        for (int ix = 0; ix < out_size; ++ix) {
            const double x = roi.p_x + (ix + 0.5) * roi.w_p / out_size;
            const double y = roi.p_y + (iy + 0.5) * roi.h_p / out_size;
            pts.emplace_back(x / stride, y / stride);
        }
    }
    i64 s = numkit::bilinear_sample(tape, feature, pts);
    return numkit::reshape(tape, s, {channels, out_size, out_size});
}

template <typename S>
GridHeadOut grid_head_forward(TapeT<S>& tape, ModelT<S>& model, i64 rois) {
    if (model.head != Head::grid) throw ValidationError("model was built without a grid head");
    const ModelConfig& cfg = model.cfg;
    const TensorT<S>& v = tape.value(rois);
    if (v.rank() != 4 || v.dim(1) != cfg.backbone_channels || v.dim(2) != cfg.roi_size_grid ||
        v.dim(3) != cfg.roi_size_grid)
        throw ValidationError("grid head expects (R," + std::to_string(cfg.backbone_channels) +
                              "," + std::to_string(cfg.roi_size_grid) + "," +
                              std::to_string(cfg.roi_size_grid) + "), got " + v.shape_str());

    const Conv2dCfg trunk_cfg{1, cfg.trunk_dilation * (cfg.trunk_kernel - 1) / 2,
                              cfg.trunk_dilation};
    const Conv2dCfg one{1, 0, 1};
    i64 x = rois;
    for (int t = 0; t < cfg.trunk_convs; ++t) {
        const std::string base = "grid_head.trunk.conv" + std::to_string(t);
        x = numkit::conv2d(tape, x, tape.param(model.store.get(base + ".weight")),
                           tape.param(model.store.get(base + ".bias")), trunk_cfg);
        x = numkit::relu(tape, x);
    }

    GridHeadOut out;
    std::vector<i64> feats;
    for (int j = 0; j < model.spec.count(); ++j) {
        const std::string pt = "grid_head.point" + std::to_string(j);
        i64 fj = numkit::conv2d(tape, x, tape.param(model.store.get(pt + ".proj.weight")),
                                tape.param(model.store.get(pt + ".proj.bias")), one);
        fj = numkit::relu(tape, fj);
        feats.push_back(fj);
        out.intermediate.push_back(
            numkit::conv2d(tape, fj, tape.param(model.store.get(pt + ".inter.weight")),
                           tape.param(model.store.get(pt + ".inter.bias")), one));
    }

    if (cfg.fusion_order >= 1) feats = fusion::fuse_once(tape, feats, model.spec, model.bank1);
    if (cfg.fusion_order >= 2) feats = fusion::fuse_once(tape, feats, model.spec, model.bank2);

    const ConvT2dCfg up{2, 1};
    for (int j = 0; j < model.spec.count(); ++j) {
        i64 h = feats[static_cast<std::size_t>(j)];
        for (int d = 0; d < 2; ++d) {
            const std::string base = "grid_head.deconv" + std::to_string(d);
            h = numkit::conv_transpose2d(tape, h, tape.param(model.store.get(base + ".weight")),
                                         tape.param(model.store.get(base + ".bias")), up);
            h = numkit::relu(tape, h);
        }
        const std::string pt = "grid_head.point" + std::to_string(j);
        out.final_logits.push_back(
            numkit::conv2d(tape, h, tape.param(model.store.get(pt + ".final.weight")),
                           tape.param(model.store.get(pt + ".final.bias")), one));
    }
    return out;
}

template <typename S>
i64 regression_forward(TapeT<S>& tape, ModelT<S>& model, i64 roi_feat) {
    if (model.head != Head::regression)
        throw ValidationError("model was built without a regression head");
    const ModelConfig& cfg = model.cfg;
    const TensorT<S>& v = tape.value(roi_feat);
    if (v.rank() != 3 || v.dim(0) != cfg.backbone_channels || v.dim(1) != cfg.roi_size_reg ||
        v.dim(2) != cfg.roi_size_reg)
        throw ValidationError("regression head expects (" +
                              std::to_string(cfg.backbone_channels) + "," +
                              std::to_string(cfg.roi_size_reg) + "," +
                              std::to_string(cfg.roi_size_reg) + "), got " + v.shape_str());
    i64 x = numkit::flatten(tape, roi_feat);
    x = numkit::linear(tape, x, tape.param(model.store.get("reg_head.fc0.weight")),
                       tape.param(model.store.get("reg_head.fc0.bias")));
    x = numkit::relu(tape, x);
    return numkit::linear(tape, x, tape.param(model.store.get("reg_head.fc1.weight")),
                          tape.param(model.store.get("reg_head.fc1.bias")));
}

gridgeom::BoxBounds decode_regression(const std::array<double, 4>& offsets,
                                      const gridgeom::RoiGeometry& roi) {
    roi.validate();
    const double dx = offsets[0], dy = offsets[1];
    const double dw = std::clamp(offsets[2], -4.0, 4.0);
    const double dh = std::clamp(offsets[3], -4.0, 4.0);
    const double cx = roi.p_x + roi.w_p / 2 + dx * roi.w_p;
    const double cy = roi.p_y + roi.h_p / 2 + dy * roi.h_p;
    const double w = roi.w_p * std::exp(dw);
    const double h = roi.h_p * std::exp(dh);
    return {cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
}

template <typename S>
gridgeom::BoxBounds regression_forward_decode(TapeT<S>& tape, ModelT<S>& model, i64 roi_feat,
                                              const gridgeom::RoiGeometry& roi) {
    const i64 off = regression_forward(tape, model, roi_feat);
    const TensorT<S>& v = tape.value(off);
    return decode_regression({static_cast<double>(v[0]), static_cast<double>(v[1]),
                              static_cast<double>(v[2]), static_cast<double>(v[3])},
                             roi);
}

void save_model(const std::string& manifest_path, const std::string& blob_path,
                const ModelT<float>& model) {
    nlohmann::json meta = {{"kind", "checkpoint"},
                           {"model", model.cfg.to_json()},
                           {"head", head_name(model.head)}};
    numkit::write_blob(manifest_path, blob_path, model.store.snapshot(), meta);
}

ModelT<float> load_model(const std::string& manifest_path) {
    nlohmann::json meta;
    auto tensors = numkit::read_blob(manifest_path, &meta);
    if (!meta.contains("model") || !meta.contains("head"))
        throw ValidationError("'" + manifest_path + "' is not a model checkpoint");
    ModelConfig cfg = ModelConfig::from_json(meta.at("model"));
    ModelT<float> m = build_model<float>(cfg, head_by_name(meta.at("head").get<std::string>()), 0);
    m.store.load(tensors);
    return m;
}

#define GRIDLOC_GRIDNET_INSTANTIATE(S)                                                          \
    template ModelT<S> build_model<S>(const ModelConfig&, Head, std::uint64_t);                 \
    template i64 backbone_forward<S>(TapeT<S>&, ModelT<S>&, i64);                               \
    template i64 roi_extract<S>(TapeT<S>&, i64, const gridgeom::RoiGeometry&, int, double);     \
    template GridHeadOut grid_head_forward<S>(TapeT<S>&, ModelT<S>&, i64);                      \
    template i64 regression_forward<S>(TapeT<S>&, ModelT<S>&, i64);                             \
    template gridgeom::BoxBounds regression_forward_decode<S>(TapeT<S>&, ModelT<S>&, i64,       \
                                                              const gridgeom::RoiGeometry&);

GRIDLOC_GRIDNET_INSTANTIATE(float)
GRIDLOC_GRIDNET_INSTANTIATE(double)

} // namespace gridloc::gridnet
