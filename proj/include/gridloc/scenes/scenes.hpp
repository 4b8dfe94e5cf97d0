#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "gridloc/gridgeom/gridgeom.hpp"
#include "gridloc/numkit/tensor.hpp"

namespace gridloc::scenes {

// Synthetic single-channel detection corpus: noisy background, 1-3 bright
// non-overlapping shapes per scene, proposals made by jittering the ground
// truth. Everything is a pure function of (seed, params) so datasets can be
// regenerated byte-identically from their manifest.

enum class ShapeCategory { bar = 0, square = 1, ellipse = 2, disc = 3 };
inline constexpr int kNumCategories = 4;

const char* category_name(ShapeCategory c);
ShapeCategory category_by_name(const std::string& name);

struct SceneObject {
    gridgeom::BoxBounds box; // tight box in image coordinates
    ShapeCategory category = ShapeCategory::disc;
};

struct Proposal {
    gridgeom::BoxBounds box;
    double iou = 0.0;     // overlap with the matched object's gt box
    int object_index = 0; // index into SceneSample::objects
};

struct SceneSample {
    numkit::Tensor image; // (1,H,W), values in [0,1]
    std::vector<SceneObject> objects;
    std::vector<Proposal> proposals;
};

struct SceneParams {
    int height = 128;
    int width = 128;
    double noise_sigma = 0.1;       // zero-mean background noise, clamped to [0,1]
    double min_intensity = 0.6;
    double max_intensity = 1.0;
    int min_objects = 1;
    int max_objects = 3;
    int proposals_per_object = 3;
    double shift_sigma = 0.15;      // center shift stddev as a fraction of box size
    double log_scale_sigma = 0.2;   // per-axis log-scale noise stddev
    double min_proposal_iou = 0.3;  // below this a proposal is redrawn
    int max_proposal_tries = 50;
    double placement_margin = 3.0;  // shapes stay this far inside the image
    double min_gap = 2.0;           // minimum box separation between objects

    void validate() const;
    nlohmann::json to_json() const;
    static SceneParams from_json(const nlohmann::json& j);
};

// Axis-aligned shape: center plus half-extents. bar/square fill the whole
// box; ellipse/disc are the inscribed ellipse. The tight box is identical in
// both cases: (cx-ax, cy-ay, cx+ax, cy+ay).
struct ShapeGeom {
    ShapeCategory category = ShapeCategory::disc;
    double cx = 0, cy = 0;
    double ax = 0, ay = 0; // half-extents (disc: ax == ay == radius)

    bool contains(double x, double y) const;
    gridgeom::BoxBounds tight_box() const;
};

// Blends one shape into an existing (1,H,W) image at the given intensity.
// Coverage per pixel comes from a 2x2 subsample grid (offsets 0.25/0.75).
void render_shape(numkit::Tensor& image, const ShapeGeom& shape, double intensity);

// Deterministic scene synthesis. Throws GenerationError if a non-overlapping
// placement cannot be found within 100 rejection tries.
SceneSample render_scene(std::uint64_t seed, const SceneParams& params);

// One jitter draw: center moved by (dx, dy) pixels, each axis rescaled by
// exp(dlog*) about the center.
gridgeom::BoxBounds apply_jitter(const gridgeom::BoxBounds& gt, double dx, double dy,
                                 double dlogw, double dlogh);

// count proposals around one gt box: shifts N(0, shift_sigma*size), scales
// exp(N(0, log_scale_sigma)); draws with IoU below min_proposal_iou are
// redrawn up to max_proposal_tries, then the best draw seen is kept.
std::vector<Proposal> jitter_proposals(const gridgeom::BoxBounds& gt, int object_index, int count,
                                       std::uint64_t seed, const SceneParams& params);

// Mirrors the sample about the vertical axis (image, boxes, proposals).
SceneSample hflip(const SceneSample& sample);

struct SplitInfo {
    std::string file; // relative to the manifest's directory
    int count = 0;
    std::uint64_t byte_count = 0;
    std::string checksum; // FNV-1a 64 of the whole file, hex
};

struct DatasetManifest {
    std::uint64_t seed = 0;
    SceneParams params;
    SplitInfo train;
    SplitInfo val;

    nlohmann::json to_json() const;
    static DatasetManifest from_json(const nlohmann::json& j);
};

std::vector<SceneSample> generate_split(std::uint64_t seed, const std::string& split_name,
                                        int count, const SceneParams& params);

// Writes manifest.json plus train.bin/val.bin under dir (created if needed).
DatasetManifest write_dataset(const std::string& dir, std::uint64_t seed,
                              const SceneParams& params, int train_count, int val_count);

DatasetManifest read_manifest(const std::string& manifest_path);

// Loads one split, verifying size and checksum against the manifest entry.
std::vector<SceneSample> read_split(const std::string& manifest_path, const std::string& split_name);

} // namespace gridloc::scenes
