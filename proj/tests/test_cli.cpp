#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "gridloc/cli/cli.hpp"
#include "gridloc/numkit/blob.hpp"
#include "gridloc/numkit/rng.hpp"

using namespace gridloc;
using namespace gridloc::cli;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) {
        path = fs::temp_directory_path() / ("gridloc_cli_" + tag);
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string sub(const std::string& name) const { return (path / name).string(); }
};

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

RunConfig small_config() {
    RunConfig cfg;
    cfg.seed = 12;
    cfg.model.backbone_channels = 4;
    cfg.model.roi_size_grid = 8;
    cfg.model.heatmap_size = 32;
    cfg.model.grid = "2x2";
    cfg.model.channels_per_point = 4;
    cfg.model.trunk_convs = 2;
    cfg.model.trunk_dilation = 1;
    cfg.model.fusion_order = 1;
    cfg.train.epochs = 2;
    cfg.train.decay_epochs = {};
    cfg.train.batch_size = 4;
    cfg.train.lr = 0.01;
    cfg.scene.height = 64;
    cfg.scene.width = 64;
    cfg.scene.max_objects = 1;
    cfg.scene.proposals_per_object = 2;
    cfg.data.train_count = 6;
    cfg.data.val_count = 3;
    return cfg;
}

} // namespace

TEST_CASE("threshold strings parse to grids") {
    const std::vector<double> def = parse_thresholds("0.5:0.95:0.05");
    REQUIRE_EQ(def.size(), 10);
    CHECK_EQ(def.front(), doctest::Approx(0.5).epsilon(1e-12));
    CHECK_EQ(def.back(), doctest::Approx(0.95).epsilon(1e-9));
    CHECK_EQ(parse_thresholds("0.7"), std::vector<double>{0.7});
    CHECK_EQ(parse_thresholds("0.5:0.5:0.05"), std::vector<double>{0.5});
    CHECK_THROWS_AS(parse_thresholds("0.5:0.95"), ValidationError);
    CHECK_THROWS_AS(parse_thresholds("0.9:0.5:0.1"), ValidationError);
    CHECK_THROWS_AS(parse_thresholds("0.5:0.95:0"), ValidationError);
    CHECK_THROWS_AS(parse_thresholds("1.5"), ValidationError);
    CHECK_THROWS_AS(parse_thresholds("abc"), ValidationError);
}

TEST_CASE("epoch lists parse") {
    CHECK_EQ(parse_epoch_list("13,18"), std::vector<int>({13, 18}));
    CHECK_EQ(parse_epoch_list("7"), std::vector<int>{7});
    CHECK(parse_epoch_list("none").empty());
    CHECK(parse_epoch_list("").empty());
    CHECK_THROWS_AS(parse_epoch_list("13,x"), ValidationError);
}

TEST_CASE("run config round trips and validates") {
    const RunConfig cfg = small_config();
    const RunConfig back = RunConfig::from_json(cfg.to_json());
    CHECK_EQ(back.to_json(), cfg.to_json());

    RunConfig bad = cfg;
    bad.head = "classifier";
    CHECK_THROWS_AS(bad.validate(), ValidationError);
    bad = cfg;
    bad.data.train_count = -1;
    CHECK_THROWS_AS(bad.validate(), ValidationError);
    bad = cfg;
    bad.eval.thresholds = "nope";
    CHECK_THROWS_AS(bad.validate(), ValidationError);
}

TEST_CASE("out dir preparation honors force") {
    TempDir tmp("outdir");
    const std::string dir = tmp.sub("a/b");
    prepare_out_dir(dir, false);
    CHECK(fs::is_directory(dir));
    prepare_out_dir(dir, false); // still empty: fine
    std::ofstream(dir + "/x.txt") << "hi";
    CHECK_THROWS_AS(prepare_out_dir(dir, false), ValidationError);
    CHECK_NOTHROW(prepare_out_dir(dir, true));
}

TEST_CASE("roi and detection json round trips") {
    gridgeom::RoiGeometry roi{3.5, 4.25, 20.0, 12.0, 32, 32};
    const gridgeom::RoiGeometry back = roi_from_json(roi_to_json(roi));
    CHECK_EQ(back.p_x, roi.p_x);
    CHECK_EQ(back.w_o, roi.w_o);

    std::vector<traineval::Detection> dets = {{{1, 2, 3, 4}, 0.75, 2, 1}};
    const auto round = detections_from_json(detections_to_json(dets));
    REQUIRE_EQ(round.size(), 1);
    CHECK_EQ(round[0].box.x_r, 3.0);
    CHECK_EQ(round[0].score, 0.75);
    CHECK_EQ(round[0].image_id, 2);
    CHECK_EQ(round[0].category, 1);
    CHECK_THROWS_AS(detections_from_json(json::object()), ValidationError);
}

TEST_CASE("heatmap blobs round trip and reject other blobs") {
    TempDir tmp("blob");
    numkit::Tensor maps = numkit::Tensor::zeros({4, 8, 8});
    maps[7] = 0.5f;
    write_heatmap_blob(tmp.sub("hm.json"), tmp.sub("hm.bin"), maps, "2x2");
    std::string grid;
    const numkit::Tensor back = read_heatmap_blob(tmp.sub("hm.json"), &grid);
    CHECK_EQ(grid, "2x2");
    CHECK_EQ(back.shape, maps.shape);
    CHECK_EQ(back[7], 0.5f);

    CHECK_THROWS_AS(write_heatmap_blob(tmp.sub("x.json"), tmp.sub("x.bin"),
                                       numkit::Tensor::zeros({3, 8, 8}), "2x2"),
                    ValidationError);
    numkit::write_blob(tmp.sub("other.json"), tmp.sub("other.bin"),
                       {{"weights", numkit::Tensor::zeros({2})}});
    CHECK_THROWS_AS(read_heatmap_blob(tmp.sub("other.json"), nullptr), ValidationError);
    CHECK_THROWS_AS(read_heatmap_blob(tmp.sub("missing.json"), nullptr), ValidationError);
}

TEST_CASE("gen-data writes a dataset and reruns byte-identically") {
    TempDir tmp("gendata");
    const RunConfig cfg = small_config();
    const std::string out = tmp.sub("ds");
    cmd_gen_data(cfg, out, false);
    for (const char* name : {"manifest.json", "train.bin", "val.bin", "run_config.json"})
        CHECK(fs::exists(fs::path(out) / name));
    CHECK_THROWS_AS(cmd_gen_data(cfg, out, false), ValidationError);

    const std::string manifest = slurp(out + "/manifest.json");
    const std::string train_bytes = slurp(out + "/train.bin");
    cmd_gen_data(cfg, out, true);
    CHECK_EQ(slurp(out + "/manifest.json"), manifest);
    CHECK_EQ(slurp(out + "/train.bin"), train_bytes);

    const RunConfig saved = RunConfig::from_json(json::parse(slurp(out + "/run_config.json")));
    CHECK_EQ(saved.to_json(), cfg.to_json());
}

TEST_CASE("train, eval, compare, and inspect chain together") {
    TempDir tmp("chain");
    RunConfig cfg = small_config();
    const std::string ds = tmp.sub("ds");
    cmd_gen_data(cfg, ds, false);

    const std::string run = tmp.sub("run");
    cmd_train(cfg, ds + "/manifest.json", run, false);
    for (const char* name : {"checkpoint.json", "checkpoint.bin", "loss.csv", "run_config.json"})
        CHECK(fs::exists(fs::path(run) / name));
    CHECK_EQ(slurp(run + "/loss.csv").substr(0, 14), "epoch,loss,lr\n");

    // The run config written next to the checkpoint records the derived seed.
    const RunConfig used = RunConfig::from_json(json::parse(slurp(run + "/run_config.json")));
    CHECK_EQ(used.train.seed, numkit::derive_seed(cfg.seed, "train"));

    gridnet::Model loaded = gridnet::load_model(run + "/checkpoint.json");
    CHECK_EQ(loaded.head, gridnet::Head::grid);
    CHECK_EQ(loaded.cfg.to_json(), cfg.model.to_json());

    // Determinism: retraining into another directory gives identical bytes.
    const std::string run2 = tmp.sub("run2");
    cmd_train(cfg, ds + "/manifest.json", run2, false);
    CHECK_EQ(slurp(run + "/checkpoint.bin"), slurp(run2 + "/checkpoint.bin"));
    CHECK_EQ(slurp(run + "/loss.csv"), slurp(run2 + "/loss.csv"));

    const std::string ev = tmp.sub("ev");
    const traineval::EvalResult r =
        cmd_eval(cfg, run + "/checkpoint.json", ds + "/manifest.json", "val", "", ev, false, false);
    CHECK_EQ(r.thresholds.size(), 10);
    const json evj = json::parse(slurp(ev + "/eval.json"));
    CHECK_EQ(evj.at("split"), "val");
    CHECK_EQ(evj.at("head"), "grid");
    CHECK_FALSE(evj.at("dataset_checksum").get<std::string>().empty());
    CHECK(fs::exists(fs::path(ev) / "detections.json"));

    // Config mismatch guard fires only when asked to check.
    RunConfig other = cfg;
    other.model.channels_per_point = 8;
    CHECK_THROWS_AS(cmd_eval(other, run + "/checkpoint.json", ds + "/manifest.json", "val", "",
                             tmp.sub("ev_bad"), false, true),
                    ValidationError);
    CHECK_THROWS_AS(cmd_eval(cfg, tmp.sub("nope.json"), ds + "/manifest.json", "val", "",
                             tmp.sub("ev_missing"), false, false),
                    ValidationError);

    const std::string ev2 = tmp.sub("ev2");
    cmd_eval(cfg, run2 + "/checkpoint.json", ds + "/manifest.json", "val", "", ev2, false, false);
    const std::string cmp = tmp.sub("cmp");
    cmd_compare({ev + "/eval.json", ev2 + "/eval.json"}, {"a", "b"}, cmp, false);
    const json rep = json::parse(slurp(cmp + "/report.json"));
    CHECK_EQ(rep.at("report").at("deltas")[0].at("mean_ap_delta").get<double>(), 0.0);
    CHECK_EQ(slurp(cmp + "/report.csv").substr(0, 7), "row,AP,");

    // Mismatched datasets are rejected.
    json hacked = json::parse(slurp(ev2 + "/eval.json"));
    hacked["dataset_checksum"] = "deadbeef";
    std::ofstream(tmp.sub("hacked.json")) << hacked.dump(2);
    CHECK_THROWS_AS(cmd_compare({ev + "/eval.json", tmp.sub("hacked.json")}, {}, tmp.sub("cmp2"), false),
                    ValidationError);

    const std::string manifest_text = cmd_inspect(run + "/checkpoint.json");
    CHECK(manifest_text.find("head: grid") != std::string::npos);
    CHECK(manifest_text.find("parameters: ") != std::string::npos);
    CHECK_THROWS_AS(cmd_inspect(tmp.sub("absent.json")), ValidationError);
}

TEST_CASE("oracle detections via a file score perfect AP") {
    TempDir tmp("oracle");
    RunConfig cfg = small_config();
    const std::string ds = tmp.sub("ds");
    cmd_gen_data(cfg, ds, false);

    const std::vector<scenes::SceneSample> val = scenes::read_split(ds + "/manifest.json", "val");
    std::vector<traineval::Detection> perfect;
    for (std::size_t i = 0; i < val.size(); ++i)
        for (const scenes::SceneObject& o : val[i].objects)
            perfect.push_back({o.box, 1.0, static_cast<int>(i), static_cast<int>(o.category)});
    std::ofstream(tmp.sub("dets.json")) << detections_to_json(perfect).dump(2);

    const traineval::EvalResult r = cmd_eval(cfg, "", ds + "/manifest.json", "val",
                                             tmp.sub("dets.json"), tmp.sub("ev"), false, false);
    for (double ap : r.ap) CHECK_EQ(ap, 1.0);
    CHECK_EQ(r.mean_ap, 1.0);
}

TEST_CASE("decode recovers a crafted box and separates modes and mappings") {
    TempDir tmp("decode");
    gridgeom::RoiGeometry roi{10.0, 20.0, 40.0, 24.0, 32, 32};
    const gridgeom::GridSpec spec = gridgeom::GridSpec::by_name("2x2");

    // One-hot peaks at pixel (8, 8) for the upper-left style points and
    // (23, 23) for lower-right; the box is whatever those pixels map to.
    const auto pixel = [](double unit) { return unit == 0.0 ? 8 : 23; };
    numkit::Tensor maps = numkit::Tensor::zeros({spec.count(), 32, 32});
    for (int j = 0; j < spec.count(); ++j) {
        const auto [u01, v01] = spec.unit_positions[static_cast<std::size_t>(j)];
        maps.at({j, pixel(v01), pixel(u01)}) = 1.0f;
    }
    write_heatmap_blob(tmp.sub("hm.json"), tmp.sub("hm.bin"), maps, "2x2");
    std::ofstream(tmp.sub("roi.json")) << roi_to_json(roi).dump();

    const json out = cmd_decode(tmp.sub("hm.json"), tmp.sub("roi.json"), "", "both", "extended");
    const auto [x_l, y_u] = gridgeom::map_heatmap_to_image_extended(8, 8, roi);
    const auto [x_r, y_b] = gridgeom::map_heatmap_to_image_extended(23, 23, roi);
    CHECK_EQ(out.at("box").at("normalized").at("x_l").get<double>(),
             doctest::Approx(x_l).epsilon(1e-12));
    CHECK_EQ(out.at("box").at("normalized").at("y_b").get<double>(),
             doctest::Approx(y_b).epsilon(1e-12));
    // Full confidence makes the literal and normalized boxes agree.
    CHECK_EQ(out.at("box").at("literal").at("x_l").get<double>(),
             doctest::Approx(x_l).epsilon(1e-12));
    REQUIRE_EQ(out.at("points").size(), 4);
    for (const json& p : out.at("points")) CHECK_EQ(p.at("p").get<double>(), 1.0);

    // Plain mapping reads the same pixels over the unextended window.
    const json plain = cmd_decode(tmp.sub("hm.json"), tmp.sub("roi.json"), "", "both", "plain");
    const auto [px_l, py_u] = gridgeom::map_heatmap_to_image(8, 8, roi);
    CHECK_EQ(plain.at("box").at("normalized").at("x_l").get<double>(),
             doctest::Approx(px_l).epsilon(1e-12));
    CHECK_EQ(plain.at("box").at("normalized").at("y_u").get<double>(),
             doctest::Approx(py_u).epsilon(1e-12));
    CHECK_NE(plain.at("box").at("normalized").at("x_l").get<double>(),
             out.at("box").at("normalized").at("x_l").get<double>());

    // Sub-unit confidence: normalized stays put, literal shrinks toward zero.
    numkit::Tensor half = maps;
    for (float& v : half.data) v *= 0.5f;
    write_heatmap_blob(tmp.sub("hm2.json"), tmp.sub("hm2.bin"), half, "2x2");
    const json soft = cmd_decode(tmp.sub("hm2.json"), tmp.sub("roi.json"), "", "both", "extended");
    CHECK_EQ(soft.at("box").at("normalized").at("x_l").get<double>(),
             doctest::Approx(x_l).epsilon(1e-12));
    CHECK_NE(soft.at("box").at("literal").at("x_l").get<double>(),
             soft.at("box").at("normalized").at("x_l").get<double>());

    CHECK_THROWS_AS(cmd_decode(tmp.sub("hm.json"), tmp.sub("roi.json"), "3x3", "both", "extended"),
                    ValidationError);
    CHECK_THROWS_AS(cmd_decode(tmp.sub("hm.json"), tmp.sub("roi.json"), "", "sideways", "extended"),
                    ValidationError);
}

TEST_CASE("cli entry point maps outcomes to exit codes") {
    TempDir tmp("exit");
    CHECK_EQ(run_cli({"--help"}), 0);
    CHECK_EQ(run_cli({"frobnicate"}), 1);
    CHECK_EQ(run_cli({"train", "--dataset", tmp.sub("none.json"), "--out", tmp.sub("r")}), 1);

    // Happy path end to end through the parser, flags overriding defaults.
    const int gen = run_cli({"gen-data", "--out", tmp.sub("ds"), "--seed", "3", "--train-count",
                             "4", "--val-count", "2", "--height", "64", "--width", "64",
                             "--max-objects", "1"});
    CHECK_EQ(gen, 0);
    CHECK_EQ(run_cli({"gen-data", "--out", tmp.sub("ds"), "--train-count", "4", "--val-count",
                      "2", "--height", "64", "--width", "64", "--max-objects", "1"}),
             1); // non-empty without --force

    const int tr = run_cli({"train",          "--dataset",       tmp.sub("ds") + "/manifest.json",
                            "--out",          tmp.sub("run"),    "--seed",
                            "3",              "--grid",          "2pt",
                            "--fusion",       "1",               "--backbone-channels",
                            "4",              "--epochs",        "1",
                            "--batch",        "4",               "--decay-epochs",
                            "none",           "--lr",            "0.01"});
    CHECK_EQ(tr, 0); // 2pt + fusion warns but proceeds

    // A corrupted dataset blob (same size, bad checksum) is a runtime
    // failure, not a validation one.
    {
        std::fstream f(tmp.sub("ds") + "/train.bin",
                       std::ios::in | std::ios::out | std::ios::binary);
        f.seekg(100);
        char byte = 0;
        f.read(&byte, 1);
        byte ^= 0x5a;
        f.seekp(100);
        f.write(&byte, 1);
    }
    CHECK_EQ(run_cli({"train", "--dataset", tmp.sub("ds") + "/manifest.json", "--out",
                      tmp.sub("run_bad"), "--epochs", "1", "--decay-epochs", "none",
                      "--backbone-channels", "4", "--grid", "2pt"}),
             2);

    CHECK_EQ(run_cli({"inspect", "--checkpoint", tmp.sub("run") + "/checkpoint.json"}), 0);
    CHECK_EQ(run_cli({"inspect", "--checkpoint", tmp.sub("absent.json")}), 1);
}

TEST_CASE("config file merges under explicit flags") {
    TempDir tmp("merge");
    RunConfig cfg = small_config();
    cfg.model.grid = "3x3";
    cfg.train.epochs = 7;
    std::ofstream(tmp.sub("cfg.json")) << cfg.to_json().dump(2);

    // --epochs wins over the file; --grid untouched so the file's value holds.
    const int rc = run_cli({"gen-data", "--config", tmp.sub("cfg.json"), "--out", tmp.sub("ds"),
                            "--train-count", "4", "--val-count", "2"});
    CHECK_EQ(rc, 0);
    const RunConfig used =
        RunConfig::from_json(json::parse(slurp(tmp.sub("ds") + "/run_config.json")));
    CHECK_EQ(used.model.grid, "3x3");
    CHECK_EQ(used.data.train_count, 4); // flag won
    CHECK_EQ(used.train.epochs, 7);     // file value preserved
}
