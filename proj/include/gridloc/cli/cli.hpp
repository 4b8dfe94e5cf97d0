#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "gridloc/errors.hpp"
#include "gridloc/gridgeom/gridgeom.hpp"
#include "gridloc/gridnet/gridnet.hpp"
#include "gridloc/scenes/scenes.hpp"
#include "gridloc/traineval/traineval.hpp"

// Command-line front end: merged run configuration, artifact directories, and
// the six subcommands (gen-data, train, eval, compare, decode, inspect). Every
// command is deterministic given its config and seed; all randomness derives
// from the single root seed via numkit::derive_seed with the tags "data",
// "model", and "train". Exit codes: 0 success, 1 bad input (ValidationError,
// bad flags), 2 runtime failure (IO, checksum, numerics, generation).
namespace gridloc::cli {

struct DataCounts {
    int train_count = 2000;
    int val_count = 500;

    void validate() const;
    nlohmann::json to_json() const;
    static DataCounts from_json(const nlohmann::json& j);
};

struct EvalParams {
    std::string thresholds = "0.5:0.95:0.05"; // start:stop:step or single value
    int top_k = 125;
    double nms_iou = 0.5;

    void validate() const;
    nlohmann::json to_json() const;
    static EvalParams from_json(const nlohmann::json& j);
};

// The whole run configuration: one JSON file, flat sections, flags win over
// file values. Serialized next to every artifact a command produces.
struct RunConfig {
    std::uint64_t seed = 0;
    std::string head = "grid"; // "grid" or "regression"
    gridnet::ModelConfig model;
    traineval::TrainConfig train;
    scenes::SceneParams scene;
    DataCounts data;
    EvalParams eval;

    void validate() const;
    nlohmann::json to_json() const;
    static RunConfig from_json(const nlohmann::json& j);
};

// "0.5:0.95:0.05" -> {0.5, 0.55, ..., 0.95}; a single number stands alone.
std::vector<double> parse_thresholds(const std::string& text);

// Comma-separated ints ("13,18") for the lr decay schedule.
std::vector<int> parse_epoch_list(const std::string& text);

// Creates dir (and parents). An existing non-empty dir requires force.
void prepare_out_dir(const std::string& dir, bool force);

nlohmann::json roi_to_json(const gridgeom::RoiGeometry& roi);
gridgeom::RoiGeometry roi_from_json(const nlohmann::json& j);

nlohmann::json detections_to_json(const std::vector<traineval::Detection>& dets);
std::vector<traineval::Detection> detections_from_json(const nlohmann::json& j);

// Heatmap blobs ride the numkit tensor-store format: one tensor "heatmaps" of
// shape (n_points, h, w) plus the grid name in the manifest meta.
void write_heatmap_blob(const std::string& manifest_path, const std::string& blob_path,
                        const numkit::Tensor& heatmaps, const std::string& grid_name);
numkit::Tensor read_heatmap_blob(const std::string& manifest_path, std::string* grid_name);

// Subcommand bodies. They throw on failure; run_cli maps exceptions to exit
// codes and prints the message. All paths to generated artifacts are fixed
// names inside out_dir (documented per command in --help).
void cmd_gen_data(const RunConfig& cfg, const std::string& out_dir, bool force);
void cmd_train(const RunConfig& cfg, const std::string& dataset_manifest,
               const std::string& out_dir, bool force);
traineval::EvalResult cmd_eval(const RunConfig& cfg, const std::string& checkpoint_manifest,
                               const std::string& dataset_manifest, const std::string& split,
                               const std::string& detections_file, const std::string& out_dir,
                               bool force, bool check_model_config);
void cmd_compare(const std::vector<std::string>& eval_paths,
                 const std::vector<std::string>& labels, const std::string& out_dir, bool force);
nlohmann::json cmd_decode(const std::string& heatmap_manifest, const std::string& roi_json_path,
                          const std::string& grid_override, const std::string& mode,
                          const std::string& mapping);
std::string cmd_inspect(const std::string& checkpoint_manifest);

// Full argv-level entry point (excluding argv[0]): parses flags, merges the
// config file, dispatches, and maps errors to the documented exit codes.
int run_cli(const std::vector<std::string>& args);

} // namespace gridloc::cli
