#include "gridloc/cli/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "CLI11.hpp"

#include "gridloc/numkit/blob.hpp"
#include "gridloc/numkit/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace gridloc::cli {

namespace {

json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ValidationError(path + ": " + e.what());
    }
    return j;
}

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out << text;
    if (!out) throw IoError("short write to " + path);
}

void write_json_file(const std::string& path, const json& j) {
    write_text_file(path, j.dump(2) + "\n");
}

std::string join_path(const std::string& dir, const std::string& name) {
    return (fs::path(dir) / name).string();
}

} // namespace

void DataCounts::validate() const {
    if (train_count < 1) throw ValidationError("data.train_count must be >= 1");
    if (val_count < 1) throw ValidationError("data.val_count must be >= 1");
}

json DataCounts::to_json() const {
    return {{"train_count", train_count}, {"val_count", val_count}};
}

DataCounts DataCounts::from_json(const json& j) {
    DataCounts d;
    d.train_count = j.at("train_count").get<int>();
    d.val_count = j.at("val_count").get<int>();
    d.validate();
    return d;
}

void EvalParams::validate() const {
    parse_thresholds(thresholds);
    if (top_k < 1) throw ValidationError("eval.top_k must be >= 1");
    if (!(nms_iou >= 0.0 && nms_iou <= 1.0))
        throw ValidationError("eval.nms_iou must be in [0, 1]");
}

json EvalParams::to_json() const {
    return {{"thresholds", thresholds}, {"top_k", top_k}, {"nms_iou", nms_iou}};
}

EvalParams EvalParams::from_json(const json& j) {
    EvalParams e;
    e.thresholds = j.at("thresholds").get<std::string>();
    e.top_k = j.at("top_k").get<int>();
    e.nms_iou = j.at("nms_iou").get<double>();
    e.validate();
    return e;
}

void RunConfig::validate() const {
    gridnet::head_by_name(head);
    model.validate();
    train.validate();
    scene.validate();
    data.validate();
    eval.validate();
}

json RunConfig::to_json() const {
    return {{"seed", seed},           {"head", head},         {"model", model.to_json()},
            {"train", train.to_json()}, {"scene", scene.to_json()}, {"data", data.to_json()},
            {"eval", eval.to_json()}};
}

RunConfig RunConfig::from_json(const json& j) {
    RunConfig c;
    c.seed = j.at("seed").get<std::uint64_t>();
    c.head = j.at("head").get<std::string>();
    c.model = gridnet::ModelConfig::from_json(j.at("model"));
    c.train = traineval::TrainConfig::from_json(j.at("train"));
    c.scene = scenes::SceneParams::from_json(j.at("scene"));
    c.data = DataCounts::from_json(j.at("data"));
    c.eval = EvalParams::from_json(j.at("eval"));
    c.validate();
    return c;
}

std::vector<double> parse_thresholds(const std::string& text) {
    std::vector<std::string> parts;
    std::stringstream ss(text);
    std::string tok;
    while (std::getline(ss, tok, ':')) parts.push_back(tok);
    const auto number = [&](const std::string& s) {
        try {
            std::size_t used = 0;
            const double v = std::stod(s, &used);
            if (used != s.size()) throw std::invalid_argument(s);
            return v;
        } catch (const std::exception&) {
            throw ValidationError("bad threshold value '" + s + "' in '" + text + "'");
        }
    };
    std::vector<double> out;
    if (parts.size() == 1) {
        out.push_back(number(parts[0]));
    } else if (parts.size() == 3) {
        const double start = number(parts[0]);
        const double stop = number(parts[1]);
        const double step = number(parts[2]);
        if (step <= 0.0) throw ValidationError("threshold step must be > 0 in '" + text + "'");
        if (stop < start) throw ValidationError("threshold stop < start in '" + text + "'");
        for (double v = start; v <= stop + 1e-9; v += step) out.push_back(v);
    } else {
        throw ValidationError("thresholds must be 'value' or 'start:stop:step', got '" + text +
                              "'");
    }
    for (double v : out)
        if (!(v >= 0.0 && v <= 1.0))
            throw ValidationError("thresholds must lie in [0, 1], got '" + text + "'");
    return out;
}

std::vector<int> parse_epoch_list(const std::string& text) {
    std::vector<int> out;
    if (text.empty() || text == "none") return out;
    std::stringstream ss(text);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        try {
            std::size_t used = 0;
            const int v = std::stoi(tok, &used);
            if (used != tok.size()) throw std::invalid_argument(tok);
            out.push_back(v);
        } catch (const std::exception&) {
            throw ValidationError("bad epoch '" + tok + "' in '" + text + "'");
        }
    }
    return out;
}

void prepare_out_dir(const std::string& dir, bool force) {
    std::error_code ec;
    if (fs::exists(dir, ec)) {
        if (!fs::is_directory(dir, ec))
            throw ValidationError(dir + " exists and is not a directory");
        if (!fs::is_empty(dir, ec) && !force)
            throw ValidationError(dir + " is not empty; pass --force to overwrite");
    }
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir + ": " + ec.message());
}

json roi_to_json(const gridgeom::RoiGeometry& roi) {
    return {{"p_x", roi.p_x}, {"p_y", roi.p_y}, {"w_p", roi.w_p},
            {"h_p", roi.h_p}, {"w_o", roi.w_o}, {"h_o", roi.h_o}};
}

gridgeom::RoiGeometry roi_from_json(const json& j) {
    gridgeom::RoiGeometry roi;
    roi.p_x = j.at("p_x").get<double>();
    roi.p_y = j.at("p_y").get<double>();
    roi.w_p = j.at("w_p").get<double>();
    roi.h_p = j.at("h_p").get<double>();
    roi.w_o = j.at("w_o").get<int>();
    roi.h_o = j.at("h_o").get<int>();
    roi.validate();
    return roi;
}

json detections_to_json(const std::vector<traineval::Detection>& dets) {
    json arr = json::array();
    for (const traineval::Detection& d : dets)
        arr.push_back({{"box", {d.box.x_l, d.box.y_u, d.box.x_r, d.box.y_b}},
                       {"score", d.score},
                       {"image_id", d.image_id},
                       {"category", d.category}});
    return arr;
}

std::vector<traineval::Detection> detections_from_json(const json& j) {
    if (!j.is_array()) throw ValidationError("detections file must hold a JSON array");
    std::vector<traineval::Detection> out;
    for (const json& e : j) {
        const auto& b = e.at("box");
        if (!b.is_array() || b.size() != 4)
            throw ValidationError("detection box must be [x_l, y_u, x_r, y_b]");
        traineval::Detection d;
        d.box = {b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>()};
        d.score = e.at("score").get<double>();
        d.image_id = e.at("image_id").get<int>();
        d.category = e.value("category", -1);
        out.push_back(d);
    }
    return out;
}

void write_heatmap_blob(const std::string& manifest_path, const std::string& blob_path,
                        const numkit::Tensor& heatmaps, const std::string& grid_name) {
    const gridgeom::GridSpec spec = gridgeom::GridSpec::by_name(grid_name);
    if (heatmaps.rank() != 3 || heatmaps.dim(0) != spec.count())
        throw ValidationError("heatmaps must be (n_points, h, w) for grid " + grid_name +
                              ", got " + heatmaps.shape_str());
    numkit::write_blob(manifest_path, blob_path, {{"heatmaps", heatmaps}},
                       {{"kind", "heatmaps"}, {"grid", grid_name}});
}

numkit::Tensor read_heatmap_blob(const std::string& manifest_path, std::string* grid_name) {
    if (!fs::exists(manifest_path))
        throw ValidationError("heatmap blob not found: " + manifest_path);
    json meta;
    std::map<std::string, numkit::Tensor> tensors = numkit::read_blob(manifest_path, &meta);
    if (!meta.contains("grid") || tensors.count("heatmaps") == 0)
        throw ValidationError(manifest_path + " is not a heatmap blob");
    if (grid_name) *grid_name = meta.at("grid").get<std::string>();
    numkit::Tensor t = std::move(tensors.at("heatmaps"));
    if (t.rank() != 3) throw ValidationError("heatmaps tensor must be rank 3, got " + t.shape_str());
    return t;
}

void cmd_gen_data(const RunConfig& cfg, const std::string& out_dir, bool force) {
    cfg.validate();
    prepare_out_dir(out_dir, force);
    const scenes::DatasetManifest man = scenes::write_dataset(
        out_dir, numkit::derive_seed(cfg.seed, "data"), cfg.scene, cfg.data.train_count,
        cfg.data.val_count);
    write_json_file(join_path(out_dir, "run_config.json"), cfg.to_json());
    std::printf("train %d scenes  checksum %s\n", man.train.count, man.train.checksum.c_str());
    std::printf("val   %d scenes  checksum %s\n", man.val.count, man.val.checksum.c_str());
}

void cmd_train(const RunConfig& cfg_in, const std::string& dataset_manifest,
               const std::string& out_dir, bool force) {
    RunConfig cfg = cfg_in;
    cfg.train.seed = numkit::derive_seed(cfg.seed, "train");
    cfg.validate();
    if (cfg.model.grid == "2pt" && cfg.model.fusion_order >= 1 &&
        gridnet::head_by_name(cfg.head) == gridnet::Head::grid)
        std::fprintf(stderr, "warning: fusion is inert for the 2pt layout "
                             "(no unit-distance neighbors); proceeding\n");
    if (!fs::exists(dataset_manifest))
        throw ValidationError("dataset manifest not found: " + dataset_manifest);
    prepare_out_dir(out_dir, force);

    const std::vector<scenes::SceneSample> data = scenes::read_split(dataset_manifest, "train");
    gridnet::Model model = gridnet::build_model<float>(
        cfg.model, gridnet::head_by_name(cfg.head), numkit::derive_seed(cfg.seed, "model"));
    const traineval::TrainResult result = traineval::train(model, data, cfg.train);

    gridnet::save_model(join_path(out_dir, "checkpoint.json"),
                        join_path(out_dir, "checkpoint.bin"), model);
    write_text_file(join_path(out_dir, "loss.csv"), traineval::loss_curve_csv(result));
    write_json_file(join_path(out_dir, "run_config.json"), cfg.to_json());
    std::printf("trained %s head for %d epochs  final loss %.6f\n", cfg.head.c_str(),
                cfg.train.epochs, result.epoch_loss.back());
    if (result.all_invalid_rois > 0)
        std::printf("note: %lld RoIs had no covered grid points\n",
                    static_cast<long long>(result.all_invalid_rois));
}

traineval::EvalResult cmd_eval(const RunConfig& cfg, const std::string& checkpoint_manifest,
                               const std::string& dataset_manifest, const std::string& split,
                               const std::string& detections_file, const std::string& out_dir,
                               bool force, bool check_model_config) {
    const std::vector<double> thresholds = parse_thresholds(cfg.eval.thresholds);
    if (cfg.eval.top_k < 1) throw ValidationError("eval.top_k must be >= 1");
    if (!fs::exists(dataset_manifest))
        throw ValidationError("dataset manifest not found: " + dataset_manifest);
    if (detections_file.empty() && !fs::exists(checkpoint_manifest))
        throw ValidationError("checkpoint not found: " + checkpoint_manifest);
    prepare_out_dir(out_dir, force);

    const scenes::DatasetManifest man = scenes::read_manifest(dataset_manifest);
    const scenes::SplitInfo& split_info =
        split == "train" ? man.train
                         : (split == "val" ? man.val
                                           : throw ValidationError("split must be train or val"));
    const std::vector<scenes::SceneSample> data = scenes::read_split(dataset_manifest, split);

    traineval::DatasetEval ev;
    std::string head_used = "external";
    if (!detections_file.empty()) {
        ev.detections = detections_from_json(read_json_file(detections_file));
        for (std::size_t i = 0; i < data.size(); ++i)
            for (const scenes::SceneObject& o : data[i].objects)
                ev.ground_truth.push_back({o.box, static_cast<int>(i), static_cast<int>(o.category)});
    } else {
        gridnet::Model model = gridnet::load_model(checkpoint_manifest);
        if (check_model_config && model.cfg.to_json() != cfg.model.to_json())
            throw ValidationError("checkpoint model config does not match --config; "
                                  "re-run without --config or fix the file");
        head_used = gridnet::head_name(model.head);
        ev = traineval::run_inference(model, data, cfg.eval.top_k, cfg.eval.nms_iou);
    }

    const traineval::EvalResult result =
        traineval::evaluate_ap(ev.detections, ev.ground_truth, thresholds);

    json out = {{"dataset_checksum", split_info.checksum},
                {"split", split},
                {"head", head_used},
                {"run_config", cfg.to_json()},
                {"result", result.to_json()}};
    write_json_file(join_path(out_dir, "eval.json"), out);
    write_json_file(join_path(out_dir, "detections.json"), detections_to_json(ev.detections));
    write_json_file(join_path(out_dir, "run_config.json"), cfg.to_json());
    std::printf("AP %.4f over %zu thresholds  (%zu detections, %zu objects)\n", result.mean_ap,
                thresholds.size(), ev.detections.size(), ev.ground_truth.size());
    return result;
}

void cmd_compare(const std::vector<std::string>& eval_paths,
                 const std::vector<std::string>& labels, const std::string& out_dir, bool force) {
    if (eval_paths.size() < 2) throw ValidationError("compare needs at least two eval files");
    if (!labels.empty() && labels.size() != eval_paths.size())
        throw ValidationError("--labels must match the number of eval files");
    prepare_out_dir(out_dir, force);

    std::vector<traineval::EvalResult> runs;
    std::vector<std::string> names;
    json inputs = json::array();
    std::string checksum;
    for (std::size_t i = 0; i < eval_paths.size(); ++i) {
        const json j = read_json_file(eval_paths[i]);
        if (!j.contains("result") || !j.contains("dataset_checksum"))
            throw ValidationError(eval_paths[i] + " is not an eval output file");
        const std::string c = j.at("dataset_checksum").get<std::string>();
        if (i == 0)
            checksum = c;
        else if (c != checksum)
            throw ValidationError("eval runs come from different datasets: " + eval_paths[0] +
                                  " vs " + eval_paths[i]);
        runs.push_back(traineval::EvalResult::from_json(j.at("result")));
        names.push_back(labels.empty() ? "run" + std::to_string(i) : labels[i]);
        inputs.push_back({{"label", names.back()},
                          {"path", eval_paths[i]},
                          {"dataset_checksum", c},
                          {"run_config", j.value("run_config", json())}});
    }

    traineval::AblationReport report = traineval::ablation_report(runs, names);
    json out = {{"inputs", inputs}, {"report", report.json}};
    write_json_file(join_path(out_dir, "report.json"), out);
    write_text_file(join_path(out_dir, "report.csv"), report.csv);
    for (std::size_t i = 1; i < runs.size(); ++i)
        std::printf("%s vs %s: mean AP %+0.4f\n", names[i].c_str(), names[0].c_str(),
                    runs[i].mean_ap - runs[0].mean_ap);
}

json cmd_decode(const std::string& heatmap_manifest, const std::string& roi_json_path,
                const std::string& grid_override, const std::string& mode,
                const std::string& mapping) {
    if (mode != "normalized" && mode != "literal" && mode != "both")
        throw ValidationError("--mode must be normalized, literal, or both");
    if (mapping != "extended" && mapping != "plain")
        throw ValidationError("--mapping must be extended or plain");
    const bool extended = mapping == "extended";

    std::string grid_name;
    const numkit::Tensor heatmaps = read_heatmap_blob(heatmap_manifest, &grid_name);
    if (!grid_override.empty()) grid_name = grid_override;
    const gridgeom::GridSpec spec = gridgeom::GridSpec::by_name(grid_name);
    if (heatmaps.dim(0) != spec.count())
        throw ValidationError("blob holds " + std::to_string(heatmaps.dim(0)) +
                              " heatmaps but grid " + grid_name + " has " +
                              std::to_string(spec.count()) + " points");

    gridgeom::RoiGeometry roi = roi_from_json(read_json_file(roi_json_path));
    if (roi.h_o != heatmaps.dim(1) || roi.w_o != heatmaps.dim(2))
        throw ValidationError("roi output size " + std::to_string(roi.h_o) + "x" +
                              std::to_string(roi.w_o) + " does not match heatmaps " +
                              heatmaps.shape_str());

    std::vector<gridgeom::GridPointEstimate> points;
    const std::int64_t hw = heatmaps.dim(1) * heatmaps.dim(2);
    for (int j = 0; j < spec.count(); ++j) {
        numkit::Tensor one = numkit::Tensor::zeros({heatmaps.dim(1), heatmaps.dim(2)});
        std::copy_n(heatmaps.data.begin() + j * hw, hw, one.data.begin());
        points.push_back(gridgeom::decode_heatmap(one, roi, extended, j));
    }

    const auto box_json = [](const gridgeom::BoxBounds& b) {
        return json{{"x_l", b.x_l}, {"y_u", b.y_u}, {"x_r", b.x_r}, {"y_b", b.y_b}};
    };
    json out = {{"grid", grid_name}, {"mapping", mapping}, {"points", json::array()}, {"box", json::object()}};
    for (const gridgeom::GridPointEstimate& e : points)
        out["points"].push_back({{"index", e.index}, {"x", e.x}, {"y", e.y}, {"p", e.p}});
    if (mode == "normalized" || mode == "both")
        out["box"]["normalized"] =
            box_json(gridgeom::boxes_from_grid_points(points, spec, gridgeom::DecodeMode::normalized));
    if (mode == "literal" || mode == "both")
        out["box"]["literal"] =
            box_json(gridgeom::boxes_from_grid_points(points, spec, gridgeom::DecodeMode::literal));
    return out;
}

std::string cmd_inspect(const std::string& checkpoint_manifest) {
    if (!fs::exists(checkpoint_manifest))
        throw ValidationError("checkpoint not found: " + checkpoint_manifest);
    json meta;
    const std::map<std::string, numkit::Tensor> tensors =
        numkit::read_blob(checkpoint_manifest, &meta);
    if (!meta.contains("model") || !meta.contains("head"))
        throw ValidationError(checkpoint_manifest + " is not a model checkpoint");
    std::int64_t total = 0;
    for (const auto& [name, t] : tensors) total += t.numel();
    std::ostringstream out;
    out << "head: " << meta.at("head").get<std::string>() << "\n";
    out << "tensors: " << tensors.size() << "\n";
    out << "parameters: " << total << "\n";
    out << "model config:\n" << meta.at("model").dump(2) << "\n";
    return out.str();
}

namespace {

// Shared flag block: every subcommand that consumes a RunConfig gets the same
// override surface; flags touched on the command line win over the file.
struct ConfigFlags {
    std::string config_path;
    RunConfig staged; // flag values land here before the merge

    CLI::Option* o_seed = nullptr;
    CLI::Option* o_head = nullptr;
    CLI::Option* o_grid = nullptr;
    CLI::Option* o_fusion = nullptr;
    CLI::Option* o_mapping = nullptr;
    CLI::Option* o_backbone = nullptr;
    CLI::Option* o_lr = nullptr;
    CLI::Option* o_epochs = nullptr;
    CLI::Option* o_batch = nullptr;
    CLI::Option* o_momentum = nullptr;
    CLI::Option* o_wd = nullptr;
    CLI::Option* o_decay = nullptr;
    CLI::Option* o_cap = nullptr;
    CLI::Option* o_iw = nullptr;
    CLI::Option* o_hflip = nullptr;
    CLI::Option* o_train_count = nullptr;
    CLI::Option* o_val_count = nullptr;
    CLI::Option* o_height = nullptr;
    CLI::Option* o_width = nullptr;
    CLI::Option* o_noise = nullptr;
    CLI::Option* o_min_objects = nullptr;
    CLI::Option* o_max_objects = nullptr;
    CLI::Option* o_ppo = nullptr;
    CLI::Option* o_thresholds = nullptr;
    CLI::Option* o_top_k = nullptr;
    CLI::Option* o_nms = nullptr;

    std::string mapping_text = "extended";
    std::string decay_text;

    void attach(CLI::App* app) {
        app->add_option("--config", config_path, "JSON run-config file (flags override it)");
        o_seed = app->add_option("--seed", staged.seed, "root seed; subsystem seeds derive from it");
        o_head = app->add_option("--head", staged.head, "grid or regression")
                     ->check(CLI::IsMember({"grid", "regression"}));
        o_grid = app->add_option("--grid", staged.model.grid, "grid layout: 2pt, 2x2, 3x3, 4x4, 5x5");
        o_fusion = app->add_option("--fusion", staged.model.fusion_order, "fusion order 0, 1, or 2");
        o_mapping = app->add_option("--mapping", mapping_text, "heatmap window: extended or plain")
                        ->check(CLI::IsMember({"extended", "plain"}));
        o_backbone = app->add_option("--backbone-channels", staged.model.backbone_channels,
                                     "backbone feature channels");
        o_lr = app->add_option("--lr", staged.train.lr, "initial learning rate");
        o_epochs = app->add_option("--epochs", staged.train.epochs, "training epochs");
        o_batch = app->add_option("--batch", staged.train.batch_size, "images per batch");
        o_momentum = app->add_option("--momentum", staged.train.momentum, "SGD momentum");
        o_wd = app->add_option("--weight-decay", staged.train.weight_decay, "L2 weight decay");
        o_decay = app->add_option("--decay-epochs", decay_text,
                                  "comma-separated epochs where lr drops 10x (or 'none')");
        o_cap = app->add_option("--positives-cap", staged.train.positives_cap,
                                "max positive RoIs per image");
        o_iw = app->add_option("--intermediate-weight", staged.train.intermediate_weight,
                               "intermediate supervision weight");
        o_hflip = app->add_flag("--hflip,!--no-hflip", staged.train.hflip_augment,
                                "random horizontal flip augmentation");
        o_train_count = app->add_option("--train-count", staged.data.train_count, "train scenes");
        o_val_count = app->add_option("--val-count", staged.data.val_count, "val scenes");
        o_height = app->add_option("--height", staged.scene.height, "scene height");
        o_width = app->add_option("--width", staged.scene.width, "scene width");
        o_noise = app->add_option("--noise", staged.scene.noise_sigma, "background noise sigma");
        o_min_objects = app->add_option("--min-objects", staged.scene.min_objects, "min objects");
        o_max_objects = app->add_option("--max-objects", staged.scene.max_objects, "max objects");
        o_ppo = app->add_option("--proposals-per-object", staged.scene.proposals_per_object,
                                "jittered proposals per object");
        o_thresholds = app->add_option("--thresholds", staged.eval.thresholds,
                                       "IoU thresholds as start:stop:step or one value");
        o_top_k = app->add_option("--top-k", staged.eval.top_k, "proposals decoded per image");
        o_nms = app->add_option("--nms-iou", staged.eval.nms_iou, "NMS IoU threshold");
    }

    RunConfig merge() const {
        RunConfig cfg;
        if (!config_path.empty()) cfg = RunConfig::from_json(read_json_file(config_path));
        const auto touched = [](const CLI::Option* o) { return o && o->count() > 0; };
        if (touched(o_seed)) cfg.seed = staged.seed;
        if (touched(o_head)) cfg.head = staged.head;
        if (touched(o_grid)) cfg.model.grid = staged.model.grid;
        if (touched(o_fusion)) cfg.model.fusion_order = staged.model.fusion_order;
        if (touched(o_mapping)) cfg.model.extended_mapping = mapping_text == "extended";
        if (touched(o_backbone)) cfg.model.backbone_channels = staged.model.backbone_channels;
        if (touched(o_lr)) cfg.train.lr = staged.train.lr;
        if (touched(o_epochs)) cfg.train.epochs = staged.train.epochs;
        if (touched(o_batch)) cfg.train.batch_size = staged.train.batch_size;
        if (touched(o_momentum)) cfg.train.momentum = staged.train.momentum;
        if (touched(o_wd)) cfg.train.weight_decay = staged.train.weight_decay;
        if (touched(o_decay)) cfg.train.decay_epochs = parse_epoch_list(decay_text);
        if (touched(o_cap)) cfg.train.positives_cap = staged.train.positives_cap;
        if (touched(o_iw)) cfg.train.intermediate_weight = staged.train.intermediate_weight;
        if (touched(o_hflip)) cfg.train.hflip_augment = staged.train.hflip_augment;
        if (touched(o_train_count)) cfg.data.train_count = staged.data.train_count;
        if (touched(o_val_count)) cfg.data.val_count = staged.data.val_count;
        if (touched(o_height)) cfg.scene.height = staged.scene.height;
        if (touched(o_width)) cfg.scene.width = staged.scene.width;
        if (touched(o_noise)) cfg.scene.noise_sigma = staged.scene.noise_sigma;
        if (touched(o_min_objects)) cfg.scene.min_objects = staged.scene.min_objects;
        if (touched(o_max_objects)) cfg.scene.max_objects = staged.scene.max_objects;
        if (touched(o_ppo)) cfg.scene.proposals_per_object = staged.scene.proposals_per_object;
        if (touched(o_thresholds)) cfg.eval.thresholds = staged.eval.thresholds;
        if (touched(o_top_k)) cfg.eval.top_k = staged.eval.top_k;
        if (touched(o_nms)) cfg.eval.nms_iou = staged.eval.nms_iou;
        return cfg;
    }
};

} // namespace

int run_cli(const std::vector<std::string>& args) {
    CLI::App app{"gridloc: grid-point localization experiments on synthetic scenes"};
    app.require_subcommand(1);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate a dataset (train/val blobs + manifest)");
    ConfigFlags gen_flags;
    gen_flags.attach(gen);
    std::string gen_out;
    bool gen_force = false;
    gen->add_option("--out", gen_out, "output directory")->required();
    gen->add_flag("--force", gen_force, "overwrite a non-empty output directory");

    // train
    auto* tr = app.add_subcommand("train", "train a grid or regression head");
    ConfigFlags tr_flags;
    tr_flags.attach(tr);
    std::string tr_dataset, tr_out;
    bool tr_force = false;
    tr->add_option("--dataset", tr_dataset, "dataset manifest.json path")->required();
    tr->add_option("--out", tr_out, "output directory")->required();
    tr->add_flag("--force", tr_force, "overwrite a non-empty output directory");

    // eval
    auto* ev = app.add_subcommand("eval", "run inference and score AP over IoU thresholds");
    ConfigFlags ev_flags;
    ev_flags.attach(ev);
    std::string ev_ckpt, ev_dataset, ev_split = "val", ev_dets, ev_out;
    bool ev_force = false;
    ev->add_option("--checkpoint", ev_ckpt, "checkpoint.json path (omit with --detections-file)");
    ev->add_option("--dataset", ev_dataset, "dataset manifest.json path")->required();
    ev->add_option("--split", ev_split, "train or val")->check(CLI::IsMember({"train", "val"}));
    ev->add_option("--detections-file", ev_dets, "score these detections instead of a model");
    ev->add_option("--out", ev_out, "output directory")->required();
    ev->add_flag("--force", ev_force, "overwrite a non-empty output directory");

    // compare
    auto* cp = app.add_subcommand("compare", "diff eval runs into an ablation report");
    std::vector<std::string> cp_runs, cp_labels;
    std::string cp_out;
    bool cp_force = false;
    cp->add_option("--runs", cp_runs, "eval.json files; first is the baseline")
        ->required()
        ->expected(2, -1);
    cp->add_option("--labels", cp_labels, "one label per run");
    cp->add_option("--out", cp_out, "output directory")->required();
    cp->add_flag("--force", cp_force, "overwrite a non-empty output directory");

    // decode
    auto* dc = app.add_subcommand("decode", "decode a heatmap blob into grid points and a box");
    std::string dc_blob, dc_roi, dc_grid, dc_mode = "both", dc_mapping = "extended", dc_out;
    dc->add_option("--heatmaps", dc_blob, "heatmap blob manifest path")->required();
    dc->add_option("--roi", dc_roi, "RoI geometry JSON path")->required();
    dc->add_option("--grid", dc_grid, "override the blob's grid name");
    dc->add_option("--mode", dc_mode, "normalized, literal, or both")
        ->check(CLI::IsMember({"normalized", "literal", "both"}));
    dc->add_option("--mapping", dc_mapping, "extended or plain")
        ->check(CLI::IsMember({"extended", "plain"}));
    dc->add_option("--out", dc_out, "also write the decode JSON here");

    // inspect
    auto* in = app.add_subcommand("inspect", "print a checkpoint's manifest");
    std::string in_ckpt;
    in->add_option("--checkpoint", in_ckpt, "checkpoint.json path")->required();

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    try {
        if (gen->parsed()) {
            cmd_gen_data(gen_flags.merge(), gen_out, gen_force);
        } else if (tr->parsed()) {
            cmd_train(tr_flags.merge(), tr_dataset, tr_out, tr_force);
        } else if (ev->parsed()) {
            if (ev_ckpt.empty() && ev_dets.empty())
                throw ValidationError("eval needs --checkpoint or --detections-file");
            cmd_eval(ev_flags.merge(), ev_ckpt, ev_dataset, ev_split, ev_dets, ev_out, ev_force,
                     !ev_flags.config_path.empty());
        } else if (cp->parsed()) {
            cmd_compare(cp_runs, cp_labels, cp_out, cp_force);
        } else if (dc->parsed()) {
            const json out = cmd_decode(dc_blob, dc_roi, dc_grid, dc_mode, dc_mapping);
            const std::string text = out.dump(2) + "\n";
            if (!dc_out.empty()) write_text_file(dc_out, text);
            std::fputs(text.c_str(), stdout);
        } else if (in->parsed()) {
            std::fputs(cmd_inspect(in_ckpt).c_str(), stdout);
        }
    } catch (const ValidationError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    return 0;
}

} // namespace gridloc::cli
