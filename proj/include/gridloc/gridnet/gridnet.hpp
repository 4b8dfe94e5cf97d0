#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "gridloc/fusion/fusion.hpp"
#include "gridloc/gridgeom/gridgeom.hpp"
#include "gridloc/numkit/param_store.hpp"
#include "gridloc/numkit/tape.hpp"

namespace gridloc::gridnet {

enum class Head { grid, regression };

std::string head_name(Head h);
Head head_by_name(const std::string& name);

struct ModelConfig {
    int backbone_channels = 32;
    int roi_size_grid = 14;
    int roi_size_reg = 7;
    int trunk_convs = 8;
    int trunk_kernel = 3;
    int trunk_dilation = 2;
    int heatmap_size = 56; // must stay roi_size_grid * 4 (two 2x deconvs)
    std::string grid = "3x3";
    int channels_per_point = 8;
    int fusion_order = 2;           // 0 = none
    bool extended_mapping = true;   // heatmap window: 2x extended vs plain

    void validate() const;
    nlohmann::json to_json() const;
    static ModelConfig from_json(const nlohmann::json& j);
};

// A backbone plus exactly one head's parameters. Movable only: the fusion
// banks point into the parameter store.
template <typename S>
struct ModelT {
    ModelConfig cfg;
    Head head = Head::grid;
    gridgeom::GridSpec spec;
    numkit::ParamStoreT<S> store;
    fusion::TransferBankT<S> bank1, bank2;

    ModelT() = default;
    ModelT(const ModelT&) = delete;
    ModelT& operator=(const ModelT&) = delete;
    ModelT(ModelT&&) = default;
    ModelT& operator=(ModelT&&) = default;
};

using Model = ModelT<float>;
using Model64 = ModelT<double>;

// Create all parameters (He weights, zero biases) for the chosen head.
// Per-parameter seeds derive from `seed` and the parameter name.
template <typename S>
ModelT<S> build_model(const ModelConfig& cfg, Head head, std::uint64_t seed);

// Closed-form parameter count for a config/head; asserted against the store.
std::int64_t expected_param_count(const ModelConfig& cfg, Head head);

// image (1,1,H,W), H and W multiples of 4 -> features (1,C,H/4,W/4).
template <typename S>
std::int64_t backbone_forward(numkit::TapeT<S>& tape, ModelT<S>& model, std::int64_t image);

// One bilinear sample per bin center of an even out x out grid over the RoI;
// feature is rank-3 (C,h,w) in feature coordinates (image coords / stride).
template <typename S>
std::int64_t roi_extract(numkit::TapeT<S>& tape, std::int64_t feature,
                         const gridgeom::RoiGeometry& roi, int out_size, double stride = 4.0);

// Grid head over a batch of RoI features (R, C, roi_size_grid, roi_size_grid):
// trunk -> per-point projections F_i (intermediate 1x1 heads read these at
// 14x14) -> fusion per cfg.fusion_order -> shared deconv x2 -> per-point final
// 1x1 heads at heatmap resolution.
struct GridHeadOut {
    std::vector<std::int64_t> intermediate; // n_points of (R,1,14,14)
    std::vector<std::int64_t> final_logits; // n_points of (R,1,56,56)
};

template <typename S>
GridHeadOut grid_head_forward(numkit::TapeT<S>& tape, ModelT<S>& model, std::int64_t rois);

// Regression head: flattened (C,7,7) -> fc 256 -> relu -> fc 4 offsets
// (dx, dy, dw, dh).
template <typename S>
std::int64_t regression_forward(numkit::TapeT<S>& tape, ModelT<S>& model, std::int64_t roi_feat);

// R-CNN offset decode: center += (dx*w_p, dy*h_p), size *= exp(dw/dh) with
// |dw|,|dh| clamped at 4; returned in corner form.
gridgeom::BoxBounds decode_regression(const std::array<double, 4>& offsets,
                                      const gridgeom::RoiGeometry& roi);

template <typename S>
gridgeom::BoxBounds regression_forward_decode(numkit::TapeT<S>& tape, ModelT<S>& model,
                                              std::int64_t roi_feat,
                                              const gridgeom::RoiGeometry& roi);

// Checkpoint IO in the numkit blob format; the manifest meta embeds the
// ModelConfig and head so loads are self-describing.
void save_model(const std::string& manifest_path, const std::string& blob_path,
                const ModelT<float>& model);
ModelT<float> load_model(const std::string& manifest_path);

} // namespace gridloc::gridnet
