#include "gridloc/scenes/scenes.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <utility>

#include "gridloc/errors.hpp"
#include "gridloc/numkit/parallel.hpp"
#include "gridloc/numkit/rng.hpp"

namespace gridloc::scenes {

namespace fs = std::filesystem;
using numkit::CounterRng;
using numkit::derive_seed;
using numkit::Tensor;
using i64 = std::int64_t;

static_assert(std::endian::native == std::endian::little,
              "dataset files are little-endian; big-endian hosts need byte swaps");

const char* category_name(ShapeCategory c) {
    switch (c) {
    case ShapeCategory::bar: return "bar";
    case ShapeCategory::square: return "square";
    case ShapeCategory::ellipse: return "ellipse";
    case ShapeCategory::disc: return "disc";
    }
    throw ValidationError("unknown shape category");
}

ShapeCategory category_by_name(const std::string& name) {
    for (int c = 0; c < kNumCategories; ++c)
        if (name == category_name(static_cast<ShapeCategory>(c)))
            return static_cast<ShapeCategory>(c);
    throw ValidationError("unknown shape category '" + name + "'");
}

void SceneParams::validate() const {
    if (height < 32 || width < 32) throw ValidationError("scene size must be at least 32x32");
    if (noise_sigma < 0) throw ValidationError("noise sigma must be non-negative");
    if (!(0 <= min_intensity && min_intensity <= max_intensity && max_intensity <= 1))
        throw ValidationError("intensity range must satisfy 0 <= min <= max <= 1");
    if (min_objects < 1 || max_objects < min_objects)
        throw ValidationError("object count range must satisfy 1 <= min <= max");
    if (proposals_per_object < 1) throw ValidationError("need at least one proposal per object");
    if (shift_sigma < 0 || log_scale_sigma < 0) throw ValidationError("jitter sigmas must be non-negative");
    if (!(0 <= min_proposal_iou && min_proposal_iou < 1))
        throw ValidationError("min proposal IoU must be in [0,1)");
    if (max_proposal_tries < 1) throw ValidationError("max proposal tries must be positive");
    if (placement_margin < 0 || min_gap < 0) throw ValidationError("margins must be non-negative");
}

nlohmann::json SceneParams::to_json() const {
    return {{"height", height},
            {"width", width},
            {"noise_sigma", noise_sigma},
            {"min_intensity", min_intensity},
            {"max_intensity", max_intensity},
            {"min_objects", min_objects},
            {"max_objects", max_objects},
            {"proposals_per_object", proposals_per_object},
            {"shift_sigma", shift_sigma},
            {"log_scale_sigma", log_scale_sigma},
            {"min_proposal_iou", min_proposal_iou},
            {"max_proposal_tries", max_proposal_tries},
            {"placement_margin", placement_margin},
            {"min_gap", min_gap}};
}

SceneParams SceneParams::from_json(const nlohmann::json& j) {
    SceneParams p;
    p.height = j.at("height").get<int>();
    p.width = j.at("width").get<int>();
    p.noise_sigma = j.at("noise_sigma").get<double>();
    p.min_intensity = j.at("min_intensity").get<double>();
    p.max_intensity = j.at("max_intensity").get<double>();
    p.min_objects = j.at("min_objects").get<int>();
    p.max_objects = j.at("max_objects").get<int>();
    p.proposals_per_object = j.at("proposals_per_object").get<int>();
    p.shift_sigma = j.at("shift_sigma").get<double>();
    p.log_scale_sigma = j.at("log_scale_sigma").get<double>();
    p.min_proposal_iou = j.at("min_proposal_iou").get<double>();
    p.max_proposal_tries = j.at("max_proposal_tries").get<int>();
    p.placement_margin = j.at("placement_margin").get<double>();
    p.min_gap = j.at("min_gap").get<double>();
    p.validate();
    return p;
}

bool ShapeGeom::contains(double x, double y) const {
    const double rx = x - cx;
    const double ry = y - cy;
    if (category == ShapeCategory::bar || category == ShapeCategory::square)
        return std::abs(rx) <= ax && std::abs(ry) <= ay;
    const double nx = rx / ax;
    const double ny = ry / ay;
    return nx * nx + ny * ny <= 1.0;
}

gridgeom::BoxBounds ShapeGeom::tight_box() const {
    return {cx - ax, cy - ay, cx + ax, cy + ay};
}

void render_shape(Tensor& image, const ShapeGeom& shape, double intensity) {
    if (image.rank() != 3 || image.dim(0) != 1)
        throw ValidationError("render_shape expects a (1,H,W) image");
    if (shape.ax <= 0 || shape.ay <= 0) throw ValidationError("shape half-extents must be positive");
    const i64 h = image.dim(1);
    const i64 w = image.dim(2);
    const gridgeom::BoxBounds box = shape.tight_box();
    const i64 px0 = std::max<i64>(0, static_cast<i64>(std::floor(box.x_l)));
    const i64 px1 = std::min<i64>(w - 1, static_cast<i64>(std::ceil(box.x_r)));
    const i64 py0 = std::max<i64>(0, static_cast<i64>(std::floor(box.y_u)));
    const i64 py1 = std::min<i64>(h - 1, static_cast<i64>(std::ceil(box.y_b)));
    static constexpr double kSub[2] = {0.25, 0.75};
    for (i64 py = py0; py <= py1; ++py) {
        for (i64 px = px0; px <= px1; ++px) {
            int hits = 0;
            for (double oy : kSub)
                for (double ox : kSub)
                    if (shape.contains(static_cast<double>(px) + ox, static_cast<double>(py) + oy))
                        ++hits;
            if (hits == 0) continue;
            const double cov = hits / 4.0;
            float& px_val = image[py * w + px];
            px_val = static_cast<float>((1.0 - cov) * px_val + cov * intensity);
        }
    }
}

namespace {

// Gap test on tight boxes: true when the boxes are at least `gap` apart on
// some axis (which also makes their IoU exactly zero).
bool separated(const gridgeom::BoxBounds& a, const gridgeom::BoxBounds& b, double gap) {
    return a.x_r + gap <= b.x_l || b.x_r + gap <= a.x_l || a.y_b + gap <= b.y_u ||
           b.y_b + gap <= a.y_u;
}

ShapeGeom draw_shape(CounterRng& rng, const SceneParams& p) {
    ShapeGeom g;
    g.category = static_cast<ShapeCategory>(rng.next_below(kNumCategories));
    const auto uni = [&](double lo, double hi) { return lo + (hi - lo) * rng.next_uniform(); };
    switch (g.category) {
    case ShapeCategory::disc: {
        const double r = uni(6, 18);
        g.ax = g.ay = r;
        break;
    }
    case ShapeCategory::square: {
        const double half = uni(12, 36) / 2;
        g.ax = g.ay = half;
        break;
    }
    case ShapeCategory::bar: {
        const double len = uni(24, 60);
        const double aspect = uni(3, 5);
        g.ax = len / 2;
        g.ay = len / (2 * aspect);
        if (rng.next_uniform() < 0.5) std::swap(g.ax, g.ay);
        break;
    }
    case ShapeCategory::ellipse: {
        const double a = uni(12, 30);
        const double aspect = uni(2, 3.5);
        g.ax = a;
        g.ay = a / aspect;
        if (rng.next_uniform() < 0.5) std::swap(g.ax, g.ay);
        break;
    }
    }
    const double x_lo = p.placement_margin + g.ax;
    const double x_hi = p.width - p.placement_margin - g.ax;
    const double y_lo = p.placement_margin + g.ay;
    const double y_hi = p.height - p.placement_margin - g.ay;
    if (x_lo >= x_hi || y_lo >= y_hi) {
        g.ax = 0; // cannot fit: caller treats this as a rejected draw
        return g;
    }
    g.cx = uni(x_lo, x_hi);
    g.cy = uni(y_lo, y_hi);
    return g;
}

} // namespace

SceneSample render_scene(std::uint64_t seed, const SceneParams& params) {
    params.validate();
    SceneSample s;
    s.image = Tensor::zeros({1, params.height, params.width});

    CounterRng bg(derive_seed(seed, "bg"));
    for (i64 i = 0; i < s.image.numel(); ++i) {
        const double v = params.noise_sigma * bg.next_gaussian();
        s.image[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }

    CounterRng shapes(derive_seed(seed, "shapes"));
    const int n_objects =
        params.min_objects +
        static_cast<int>(shapes.next_below(
            static_cast<std::uint64_t>(params.max_objects - params.min_objects + 1)));
    for (int k = 0; k < n_objects; ++k) {
        bool placed = false;
        for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
            ShapeGeom g = draw_shape(shapes, params);
            if (g.ax <= 0) continue;
            const gridgeom::BoxBounds box = g.tight_box();
            bool clear = true;
            for (const SceneObject& other : s.objects)
                if (!separated(box, other.box, params.min_gap)) {
                    clear = false;
                    break;
                }
            if (!clear) continue;
            const double intensity =
                params.min_intensity +
                (params.max_intensity - params.min_intensity) * shapes.next_uniform();
            render_shape(s.image, g, intensity);
            s.objects.push_back({box, g.category});
            placed = true;
        }
        if (!placed)
            throw GenerationError("could not place object " + std::to_string(k + 1) + " of " +
                                  std::to_string(n_objects) + " within 100 tries");
    }

    for (std::size_t k = 0; k < s.objects.size(); ++k) {
        const std::uint64_t pseed = derive_seed(seed, "prop:" + std::to_string(k));
        auto props = jitter_proposals(s.objects[k].box, static_cast<int>(k),
                                      params.proposals_per_object, pseed, params);
        s.proposals.insert(s.proposals.end(), props.begin(), props.end());
    }
    return s;
}

gridgeom::BoxBounds apply_jitter(const gridgeom::BoxBounds& gt, double dx, double dy,
                                 double dlogw, double dlogh) {
    const double cx = (gt.x_l + gt.x_r) / 2 + dx;
    const double cy = (gt.y_u + gt.y_b) / 2 + dy;
    const double w = gt.width() * std::exp(dlogw);
    const double h = gt.height() * std::exp(dlogh);
    return {cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
}

std::vector<Proposal> jitter_proposals(const gridgeom::BoxBounds& gt, int object_index, int count,
                                       std::uint64_t seed, const SceneParams& params) {
    if (count < 1) throw ValidationError("jitter_proposals needs count >= 1");
    if (gt.width() <= 0 || gt.height() <= 0)
        throw ValidationError("jitter target box is degenerate");
    CounterRng rng(seed);
    std::vector<Proposal> out;
    out.reserve(static_cast<std::size_t>(count));
    for (int k = 0; k < count; ++k) {
        Proposal best;
        best.iou = -1;
        for (int attempt = 0; attempt < params.max_proposal_tries; ++attempt) {
            const double dx = rng.next_gaussian() * params.shift_sigma * gt.width();
            const double dy = rng.next_gaussian() * params.shift_sigma * gt.height();
            const double dlw = rng.next_gaussian() * params.log_scale_sigma;
            const double dlh = rng.next_gaussian() * params.log_scale_sigma;
            const gridgeom::BoxBounds box = apply_jitter(gt, dx, dy, dlw, dlh);
            const double v = gridgeom::iou(box, gt);
            if (v > best.iou) best = {box, v, object_index};
            if (v >= params.min_proposal_iou) break;
        }
        out.push_back(best);
    }
    return out;
}

SceneSample hflip(const SceneSample& sample) {
    if (sample.image.rank() != 3 || sample.image.dim(0) != 1)
        throw ValidationError("hflip expects a (1,H,W) image");
    const i64 h = sample.image.dim(1);
    const i64 w = sample.image.dim(2);
    SceneSample out;
    out.image = Tensor::zeros({1, h, w});
    for (i64 y = 0; y < h; ++y)
        for (i64 x = 0; x < w; ++x) out.image[y * w + x] = sample.image[y * w + (w - 1 - x)];
    const double wd = static_cast<double>(w);
    const auto flip_box = [wd](const gridgeom::BoxBounds& b) {
        return gridgeom::BoxBounds{wd - b.x_r, b.y_u, wd - b.x_l, b.y_b};
    };
    out.objects.reserve(sample.objects.size());
    for (const SceneObject& o : sample.objects) out.objects.push_back({flip_box(o.box), o.category});
    out.proposals.reserve(sample.proposals.size());
    for (const Proposal& p : sample.proposals)
        out.proposals.push_back({flip_box(p.box), p.iou, p.object_index});
    return out;
}

std::vector<SceneSample> generate_split(std::uint64_t seed, const std::string& split_name,
                                        int count, const SceneParams& params) {
    if (count < 0) throw ValidationError("split count must be non-negative");
    params.validate();
    const std::uint64_t root = derive_seed(seed, "split:" + split_name);
    std::vector<SceneSample> out(static_cast<std::size_t>(count));
    numkit::parallel_for(count, [&](i64 lo, i64 hi) {
        for (i64 i = lo; i < hi; ++i)
            out[static_cast<std::size_t>(i)] =
                render_scene(derive_seed(root, "scene:" + std::to_string(i)), params);
    });
    return out;
}

// ---- persistence ---------------------------------------------------------------
//
// Split file layout (all little-endian):
//   8 bytes  magic "GLSCENE1"
//   u32      sample count
//   u32      height
//   u32      width
// then per sample:
//   u32      object count          u32 proposal count
//   f32[H*W] image
//   objects:   f64 x_l, y_u, x_r, y_b; u32 category; u32 zero padding
//   proposals: f64 x_l, y_u, x_r, y_b, iou; u32 object index; u32 zero padding
// The manifest stores each file's byte count and FNV-1a 64 checksum.

namespace {

constexpr char kMagic[8] = {'G', 'L', 'S', 'C', 'E', 'N', 'E', '1'};
constexpr const char* kManifestFormat = "gridloc-scenes-v1";

template <typename T>
void put(std::string& buf, T v) {
    char raw[sizeof(T)];
    std::memcpy(raw, &v, sizeof(T));
    buf.append(raw, sizeof(T));
}

struct Cursor {
    const std::string& buf;
    const std::string& file;
    std::size_t pos = 0;

    template <typename T>
    T take() {
        if (pos + sizeof(T) > buf.size())
            throw ValidationError("unexpected end of data in '" + file + "'");
        T v;
        std::memcpy(&v, buf.data() + pos, sizeof(T));
        pos += sizeof(T);
        return v;
    }
};

std::string encode_split(const std::vector<SceneSample>& samples, const SceneParams& params) {
    std::string buf;
    buf.append(kMagic, sizeof(kMagic));
    put<std::uint32_t>(buf, static_cast<std::uint32_t>(samples.size()));
    put<std::uint32_t>(buf, static_cast<std::uint32_t>(params.height));
    put<std::uint32_t>(buf, static_cast<std::uint32_t>(params.width));
    for (const SceneSample& s : samples) {
        if (s.image.rank() != 3 || s.image.dim(1) != params.height || s.image.dim(2) != params.width)
            throw ValidationError("sample image does not match dataset scene size");
        put<std::uint32_t>(buf, static_cast<std::uint32_t>(s.objects.size()));
        put<std::uint32_t>(buf, static_cast<std::uint32_t>(s.proposals.size()));
        for (i64 i = 0; i < s.image.numel(); ++i) put<float>(buf, s.image[i]);
        for (const SceneObject& o : s.objects) {
            put<double>(buf, o.box.x_l);
            put<double>(buf, o.box.y_u);
            put<double>(buf, o.box.x_r);
            put<double>(buf, o.box.y_b);
            put<std::uint32_t>(buf, static_cast<std::uint32_t>(o.category));
            put<std::uint32_t>(buf, 0);
        }
        for (const Proposal& p : s.proposals) {
            put<double>(buf, p.box.x_l);
            put<double>(buf, p.box.y_u);
            put<double>(buf, p.box.x_r);
            put<double>(buf, p.box.y_b);
            put<double>(buf, p.iou);
            put<std::uint32_t>(buf, static_cast<std::uint32_t>(p.object_index));
            put<std::uint32_t>(buf, 0);
        }
    }
    return buf;
}

std::vector<SceneSample> decode_split(const std::string& buf, const std::string& file) {
    Cursor c{buf, file};
    char magic[8];
    for (char& ch : magic) ch = c.take<char>();
    if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw ValidationError("'" + file + "' is not a scene split file");
    const auto n = c.take<std::uint32_t>();
    const auto h = c.take<std::uint32_t>();
    const auto w = c.take<std::uint32_t>();
    std::vector<SceneSample> out(n);
    for (std::uint32_t si = 0; si < n; ++si) {
        SceneSample& s = out[si];
        const auto n_obj = c.take<std::uint32_t>();
        const auto n_prop = c.take<std::uint32_t>();
        s.image = Tensor::zeros({1, static_cast<i64>(h), static_cast<i64>(w)});
        for (i64 i = 0; i < s.image.numel(); ++i) s.image[i] = c.take<float>();
        s.objects.resize(n_obj);
        for (SceneObject& o : s.objects) {
            o.box.x_l = c.take<double>();
            o.box.y_u = c.take<double>();
            o.box.x_r = c.take<double>();
            o.box.y_b = c.take<double>();
            const auto cat = c.take<std::uint32_t>();
            if (cat >= kNumCategories)
                throw ValidationError("bad category id in '" + file + "'");
            o.category = static_cast<ShapeCategory>(cat);
            c.take<std::uint32_t>();
        }
        s.proposals.resize(n_prop);
        for (Proposal& p : s.proposals) {
            p.box.x_l = c.take<double>();
            p.box.y_u = c.take<double>();
            p.box.x_r = c.take<double>();
            p.box.y_b = c.take<double>();
            p.iou = c.take<double>();
            p.object_index = static_cast<int>(c.take<std::uint32_t>());
            c.take<std::uint32_t>();
        }
    }
    if (c.pos != buf.size())
        throw ValidationError("trailing bytes in '" + file + "'");
    return out;
}

std::string checksum_hex(const std::string& bytes) {
    char hex[17];
    std::snprintf(hex, sizeof(hex), "%016llx",
                  static_cast<unsigned long long>(numkit::fnv1a64(bytes.data(), bytes.size())));
    return hex;
}

SplitInfo write_split_file(const fs::path& dir, const std::string& name,
                           const std::vector<SceneSample>& samples, const SceneParams& params) {
    const std::string bytes = encode_split(samples, params);
    SplitInfo info;
    info.file = name + ".bin";
    info.count = static_cast<int>(samples.size());
    info.byte_count = bytes.size();
    info.checksum = checksum_hex(bytes);
    std::ofstream out(dir / info.file, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + (dir / info.file).string() + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write to '" + (dir / info.file).string() + "'");
    return info;
}

nlohmann::json split_to_json(const SplitInfo& s) {
    return {{"file", s.file},
            {"count", s.count},
            {"bytes", s.byte_count},
            {"checksum", s.checksum}};
}

SplitInfo split_from_json(const nlohmann::json& j) {
    SplitInfo s;
    s.file = j.at("file").get<std::string>();
    s.count = j.at("count").get<int>();
    s.byte_count = j.at("bytes").get<std::uint64_t>();
    s.checksum = j.at("checksum").get<std::string>();
    return s;
}

} // namespace

nlohmann::json DatasetManifest::to_json() const {
    return {{"format", kManifestFormat},
            {"seed", seed},
            {"params", params.to_json()},
            {"splits", {{"train", split_to_json(train)}, {"val", split_to_json(val)}}}};
}

DatasetManifest DatasetManifest::from_json(const nlohmann::json& j) {
    if (j.value("format", "") != kManifestFormat)
        throw ValidationError("not a scene dataset manifest (format mismatch)");
    DatasetManifest m;
    m.seed = j.at("seed").get<std::uint64_t>();
    m.params = SceneParams::from_json(j.at("params"));
    m.train = split_from_json(j.at("splits").at("train"));
    m.val = split_from_json(j.at("splits").at("val"));
    return m;
}

DatasetManifest write_dataset(const std::string& dir, std::uint64_t seed,
                              const SceneParams& params, int train_count, int val_count) {
    params.validate();
    fs::create_directories(dir);
    DatasetManifest m;
    m.seed = seed;
    m.params = params;
    m.train = write_split_file(dir, "train", generate_split(seed, "train", train_count, params),
                               params);
    m.val = write_split_file(dir, "val", generate_split(seed, "val", val_count, params), params);
    std::ofstream out(fs::path(dir) / "manifest.json", std::ios::trunc);
    if (!out) throw IoError("cannot open '" + (fs::path(dir) / "manifest.json").string() + "'");
    out << m.to_json().dump(2) << "\n";
    return m;
}

DatasetManifest read_manifest(const std::string& manifest_path) {
    std::ifstream in(manifest_path);
    if (!in) throw IoError("cannot open '" + manifest_path + "'");
    nlohmann::json j;
    in >> j;
    return DatasetManifest::from_json(j);
}

std::vector<SceneSample> read_split(const std::string& manifest_path,
                                    const std::string& split_name) {
    const DatasetManifest m = read_manifest(manifest_path);
    const SplitInfo* info = nullptr;
    if (split_name == "train") info = &m.train;
    else if (split_name == "val") info = &m.val;
    else throw ValidationError("unknown split '" + split_name + "'");

    const fs::path file = fs::path(manifest_path).parent_path() / info->file;
    std::ifstream in(file, std::ios::binary);
    if (!in) throw IoError("cannot open '" + file.string() + "'");
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.size() != info->byte_count)
        throw ValidationError("'" + file.string() + "' has " + std::to_string(bytes.size()) +
                              " bytes, manifest says " + std::to_string(info->byte_count));
    if (checksum_hex(bytes) != info->checksum)
        throw NumericError("checksum mismatch for '" + file.string() + "'");
    auto samples = decode_split(bytes, file.string());
    if (static_cast<int>(samples.size()) != info->count)
        throw ValidationError("'" + file.string() + "' holds " + std::to_string(samples.size()) +
                              " samples, manifest says " + std::to_string(info->count));
    return samples;
}

} // namespace gridloc::scenes
