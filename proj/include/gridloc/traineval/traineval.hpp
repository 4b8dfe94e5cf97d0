#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "gridloc/gridgeom/gridgeom.hpp"
#include "gridloc/gridnet/gridnet.hpp"
#include "gridloc/numkit/tape.hpp"
#include "gridloc/scenes/scenes.hpp"

namespace gridloc::traineval {

struct TrainConfig {
    double lr = 0.005; // tuned for batch_size 4
    double momentum = 0.9;
    double weight_decay = 1e-4;
    int epochs = 20;
    std::vector<int> decay_epochs = {13, 18}; // lr *= 0.1 entering each (1-based)
    int batch_size = 4;                       // images per SGD step
    int positives_cap = 24;                   // positive RoIs sampled per image
    double positive_iou = 0.5;                // proposals below this are left out
    double intermediate_weight = 1.0;         // grid head auxiliary loss weight
    bool hflip_augment = true;
    std::uint64_t seed = 0;

    void validate() const;
    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
};

struct Detection {
    gridgeom::BoxBounds box;
    double score = 0.0; // in [0,1]
    int image_id = -1;
    int category = -1; // ShapeCategory value, or -1 when unknown
};

struct GroundTruth {
    gridgeom::BoxBounds box;
    int image_id = -1;
    int category = -1;
};

// AP per IoU threshold plus the same sliced per category. Categories that
// have no ground truth are absent from per_category.
struct EvalResult {
    std::vector<double> thresholds;
    std::vector<double> ap; // aligned with thresholds
    double mean_ap = 0.0;
    std::map<std::string, std::vector<double>> per_category;

    // AP at one threshold (1e-6 tolerance); throws if it was not evaluated.
    double ap_at(double threshold) const;
    double category_mean(const std::string& name) const;

    nlohmann::json to_json() const;
    static EvalResult from_json(const nlohmann::json& j);
};

// {0.50, 0.55, ..., 0.95}.
std::vector<double> default_thresholds();

// Block max-pool of the supervision maps by an integer factor: a coarse pixel
// is positive when any fine pixel in its block is. Validity flags carry over.
gridgeom::SupervisionMap downsample_supervision(const gridgeom::SupervisionMap& sup, int factor);

// Mean binary cross-entropy over the final heatmaps plus intermediate_weight
// times the same over the intermediate maps. Per RoI the map losses (pixel
// means) are averaged over its valid points; RoIs average uniformly, and an
// all-invalid RoI contributes zero (counted into *all_invalid if given).
// final_logits / intermediate_logits hold one (R,1,h,w) node per grid point;
// supervision has one entry per RoI at final resolution. Intermediate targets
// are the block max-pool of the final ones. Invalid points carry zero weight,
// so no gradient ever flows into their maps.
template <typename S>
std::int64_t grid_loss(numkit::TapeT<S>& tape, const std::vector<std::int64_t>& final_logits,
                       const std::vector<std::int64_t>& intermediate_logits,
                       const std::vector<gridgeom::SupervisionMap>& supervision,
                       double intermediate_weight, std::int64_t* all_invalid = nullptr);

// Smooth-L1 (transition at 1) summed over the 4 offsets, averaged over RoIs.
// Each pred node holds one RoI's (dx, dy, dw, dh).
template <typename S>
std::int64_t regression_loss(numkit::TapeT<S>& tape, const std::vector<std::int64_t>& preds,
                             const std::vector<std::array<double, 4>>& targets);

// Offset targets that make decode_regression reproduce gt exactly:
// dx = (gt center - roi center) / w_p, dw = log(gt width / w_p), and the
// vertical pair likewise.
std::array<double, 4> regression_targets(const gridgeom::RoiGeometry& roi,
                                         const gridgeom::BoxBounds& gt);

// Greedy non-maximum suppression: visit by descending score (ties keep
// insertion order), drop any box overlapping a kept box of the same image
// with IoU strictly above the threshold. Kept detections come back in visit
// order. Scores must lie in [0,1].
std::vector<Detection> nms(const std::vector<Detection>& detections, double iou_threshold);

// COCO-style evaluation: per threshold, detections in descending score order
// greedily claim the unmatched ground truth of their image with the highest
// IoU >= threshold; AP is the 101-point interpolated area under the
// precision-recall curve. Matching ignores categories; per-category entries
// rerun the same procedure on the category's subset. Images are processed in
// parallel and merged in image-id order.
EvalResult evaluate_ap(const std::vector<Detection>& detections,
                       const std::vector<GroundTruth>& ground_truth,
                       const std::vector<double>& thresholds);

struct TrainResult {
    std::vector<double> epoch_loss; // mean step loss per epoch
    std::vector<double> epoch_lr;
    std::int64_t all_invalid_rois = 0; // positives whose grid points were all uncovered
};

// SGD with momentum and weight decay over the model's head. Positives are
// proposals with IoU >= positive_iou, at most positives_cap per image (random
// subset). The grid head trains against rendered point supervision in the
// model's mapping mode; the regression head against offset targets to the
// matched object. Deterministic given (config, model); throws NumericError on
// a non-finite loss.
TrainResult train(gridnet::Model& model, const std::vector<scenes::SceneSample>& dataset,
                  const TrainConfig& cfg);

// "epoch,loss,lr" rows for the run.
std::string loss_curve_csv(const TrainResult& result);

// Detections for one scene: proposals ranked by annotated IoU (ties keep
// order), top_k of them decoded through the model's head, scored by mean
// grid-point confidence (grid) or 1 - |offset| norm floored at 0 (regression),
// clipped to the image, then NMS at nms_iou. The detection category is the
// matched object's.
std::vector<Detection> infer(gridnet::Model& model, const scenes::SceneSample& sample,
                             int image_id, int top_k = 125, double nms_iou = 0.5);

struct DatasetEval {
    std::vector<Detection> detections;
    std::vector<GroundTruth> ground_truth;
};

// infer() over a whole split (image ids = indices) plus its ground truth.
DatasetEval run_inference(gridnet::Model& model, const std::vector<scenes::SceneSample>& dataset,
                          int top_k = 125, double nms_iou = 0.5);

struct AblationReport {
    nlohmann::json json;
    std::string csv;
};

// Side-by-side table of >= 2 runs (first is the baseline): AP plus AP at
// 0.5/0.75/0.8/0.9 where evaluated, per-category means, per-threshold deltas
// against the baseline, and per-category gains sorted descending. Runs must
// share thresholds and category sets.
AblationReport ablation_report(const std::vector<EvalResult>& runs,
                               const std::vector<std::string>& labels);

} // namespace gridloc::traineval
