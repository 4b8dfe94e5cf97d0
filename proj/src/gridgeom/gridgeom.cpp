#include "gridloc/gridgeom/gridgeom.hpp"

#include <algorithm>
#include <cmath>

namespace gridloc::gridgeom {

namespace {

// Nearest integer with ties toward -inf: round(0.5) = 0, round(-0.5) = -1.
long long round_half_down(double x) { return static_cast<long long>(std::ceil(x - 0.5)); }

GridSpec full_grid(const std::string& name, int n) {
    GridSpec g;
    g.name = name;
    g.n = n;
    for (int r = 0; r < n; ++r) {
        for (int c = 0; c < n; ++c) {
            const int j = g.count();
            g.points.emplace_back(r, c);
            const double u = static_cast<double>(c) / (n - 1);
            const double v = static_cast<double>(r) / (n - 1);
            g.unit_positions.emplace_back(u, v);
            if (c == 0) g.edges[0].push_back(j);
            if (r == 0) g.edges[1].push_back(j);
            if (c == n - 1) g.edges[2].push_back(j);
            if (r == n - 1) g.edges[3].push_back(j);
        }
    }
    return g;
}

} // namespace

GridSpec GridSpec::by_name(const std::string& name) {
    if (name == "2pt") {
        GridSpec g;
        g.name = name;
        g.n = 2;
        g.points = {{0, 0}, {1, 1}};
        g.unit_positions = {{0.0, 0.0}, {1.0, 1.0}};
        g.edges = {{{0}, {0}, {1}, {1}}};
        return g;
    }
    if (name == "2x2") return full_grid(name, 2);
    if (name == "3x3") return full_grid(name, 3);
    if (name == "4x4") return full_grid(name, 4);
    if (name == "5x5") return full_grid(name, 5);
    throw ValidationError("unknown grid config '" + name +
                          "' (expected one of 2pt, 2x2, 3x3, 4x4, 5x5)");
}

void RoiGeometry::validate() const {
    if (!(w_p > 0) || !(h_p > 0))
        throw ValidationError("proposal size must be positive, got " + std::to_string(w_p) +
                              "x" + std::to_string(h_p));
    if (w_o <= 0 || h_o <= 0)
        throw ValidationError("heatmap size must be positive, got " + std::to_string(w_o) +
                              "x" + std::to_string(h_o));
}

double BoxBounds::area() const {
    return std::max(0.0, x_r - x_l) * std::max(0.0, y_b - y_u);
}

double iou(const BoxBounds& a, const BoxBounds& b) {
    const double ix = std::min(a.x_r, b.x_r) - std::max(a.x_l, b.x_l);
    const double iy = std::min(a.y_b, b.y_b) - std::max(a.y_u, b.y_u);
    if (ix <= 0 || iy <= 0) return 0.0;
    const double inter = ix * iy;
    const double uni = a.area() + b.area() - inter;
    return uni > 0 ? inter / uni : 0.0;
}

std::vector<std::pair<double, double>> grid_point_targets(const BoxBounds& gt_box,
                                                          const GridSpec& spec) {
    const double w = gt_box.width(), h = gt_box.height();
    if (!(w > 0) || !(h > 0))
        throw ValidationError("degenerate ground-truth box (" + std::to_string(w) + "x" +
                              std::to_string(h) + ")");
    std::vector<std::pair<double, double>> out;
    out.reserve(spec.unit_positions.size());
    for (const auto& [u, v] : spec.unit_positions)
        out.emplace_back(gt_box.x_l + u * w, gt_box.y_u + v * h);
    return out;
}

std::pair<double, double> map_heatmap_to_image(double hx, double hy, const RoiGeometry& roi) {
    return {roi.p_x + hx / roi.w_o * roi.w_p, roi.p_y + hy / roi.h_o * roi.h_p};
}

std::pair<double, double> map_heatmap_to_image_extended(double hx, double hy,
                                                        const RoiGeometry& roi) {
    return {roi.p_x + (4.0 * hx - roi.w_o) / (2.0 * roi.w_o) * roi.w_p,
            roi.p_y + (4.0 * hy - roi.h_o) / (2.0 * roi.h_o) * roi.h_p};
}

std::pair<double, double> map_image_to_heatmap_extended(double ix, double iy,
                                                        const RoiGeometry& roi) {
    return {((ix - roi.p_x) * 2.0 * roi.w_o / roi.w_p + roi.w_o) / 4.0,
            ((iy - roi.p_y) * 2.0 * roi.h_o / roi.h_p + roi.h_o) / 4.0};
}

SupervisionMap render_supervision(const std::vector<std::pair<double, double>>& targets,
                                  const RoiGeometry& roi, const GridSpec& spec, bool extended) {
    roi.validate();
    if (static_cast<int>(targets.size()) != spec.count())
        throw ValidationError("expected " + std::to_string(spec.count()) + " targets, got " +
                              std::to_string(targets.size()));
    const int J = spec.count();
    SupervisionMap sup;
    sup.maps = numkit::Tensor::zeros({J, roi.h_o, roi.w_o});
    sup.valid.assign(static_cast<std::size_t>(J), 0);
    for (int j = 0; j < J; ++j) {
        const auto [hx, hy] =
            extended ? map_image_to_heatmap_extended(targets[j].first, targets[j].second, roi)
                     : std::pair<double, double>{
                           (targets[j].first - roi.p_x) * roi.w_o / roi.w_p,
                           (targets[j].second - roi.p_y) * roi.h_o / roi.h_p};
        const long long px = round_half_down(hx);
        const long long py = round_half_down(hy);
        if (px < 0 || px >= roi.w_o || py < 0 || py >= roi.h_o) continue;
        sup.valid[static_cast<std::size_t>(j)] = 1;
        const long long arms[5][2] = {{py, px}, {py - 1, px}, {py + 1, px}, {py, px - 1}, {py, px + 1}};
        for (const auto& a : arms) {
            if (a[0] < 0 || a[0] >= roi.h_o || a[1] < 0 || a[1] >= roi.w_o) continue;
            sup.maps.at({j, a[0], a[1]}) = 1.0f;
        }
    }
    return sup;
}

GridPointEstimate decode_heatmap(const numkit::Tensor& heatmap, const RoiGeometry& roi,
                                 bool extended, int index) {
    roi.validate();
    if (heatmap.rank() != 2 || heatmap.dim(0) != roi.h_o || heatmap.dim(1) != roi.w_o)
        throw ValidationError("heatmap shape " + heatmap.shape_str() + " does not match roi " +
                              std::to_string(roi.h_o) + "x" + std::to_string(roi.w_o));
    std::int64_t best = 0;
    for (std::int64_t i = 0; i < heatmap.numel(); ++i) {
        if (heatmap[i] < 0.0f || heatmap[i] > 1.0f)
            throw ValidationError("heatmap value " + std::to_string(heatmap[i]) +
                                  " outside [0,1]");
        if (heatmap[i] > heatmap[best]) best = i;
    }
    const double py = static_cast<double>(best / roi.w_o);
    const double px = static_cast<double>(best % roi.w_o);
    const auto [ix, iy] = extended ? map_heatmap_to_image_extended(px, py, roi)
                                   : map_heatmap_to_image(px, py, roi);
    return {index, ix, iy, static_cast<double>(heatmap[best])};
}

BoxBounds boxes_from_grid_points(const std::vector<GridPointEstimate>& estimates,
                                 const GridSpec& spec, DecodeMode mode) {
    // edge -> decoded boundary; edges 0/2 read x, edges 1/3 read y
    double bound[4];
    for (int e = 0; e < 4; ++e) {
        double wsum = 0, psum = 0, csum = 0;
        int hits = 0;
        for (const auto& est : estimates) {
            const auto& members = spec.edges[static_cast<std::size_t>(e)];
            if (std::find(members.begin(), members.end(), est.index) == members.end()) continue;
            const double coord = (e == 0 || e == 2) ? est.x : est.y;
            wsum += coord * est.p;
            psum += est.p;
            csum += coord;
            ++hits;
        }
        if (hits == 0)
            throw ValidationError("no estimates on edge " + std::to_string(e));
        if (mode == DecodeMode::literal)
            bound[e] = wsum / spec.n;
        else
            bound[e] = psum < 1e-6 ? csum / hits : wsum / psum;
    }
    BoxBounds box{bound[0], bound[1], bound[2], bound[3]};
    if (box.x_l > box.x_r) std::swap(box.x_l, box.x_r);
    if (box.y_u > box.y_b) std::swap(box.y_u, box.y_b);
    return box;
}

double coverage_fraction(const std::vector<RoiGeometry>& proposals,
                         const std::vector<BoxBounds>& gt_boxes, const GridSpec& spec,
                         bool extended) {
    if (proposals.size() != gt_boxes.size())
        throw ValidationError("proposal/ground-truth count mismatch: " +
                              std::to_string(proposals.size()) + " vs " +
                              std::to_string(gt_boxes.size()));
    if (proposals.empty()) return 0.0;
    std::int64_t covered = 0, total = 0;
    for (std::size_t i = 0; i < proposals.size(); ++i) {
        const RoiGeometry& roi = proposals[i];
        roi.validate();
        for (const auto& [tx, ty] : grid_point_targets(gt_boxes[i], spec)) {
            double hx, hy;
            if (extended) {
                std::tie(hx, hy) = map_image_to_heatmap_extended(tx, ty, roi);
            } else {
                hx = (tx - roi.p_x) * roi.w_o / roi.w_p;
                hy = (ty - roi.p_y) * roi.h_o / roi.h_p;
            }
            ++total;
            if (hx >= 0 && hx <= roi.w_o && hy >= 0 && hy <= roi.h_o) ++covered;
        }
    }
    return static_cast<double>(covered) / static_cast<double>(total);
}

} // namespace gridloc::gridgeom
