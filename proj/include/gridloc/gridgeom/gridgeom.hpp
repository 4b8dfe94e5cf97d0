#pragma once

#include <array>
#include <string>
#include <utility>
#include <vector>

#include "gridloc/errors.hpp"
#include "gridloc/numkit/tensor.hpp"

namespace gridloc::gridgeom {

// A named grid layout. Points are (row, col) with unit spacing; unit_positions
// are (u, v) in [0,1]^2 giving each point's location inside a box (u along x,
// v along y). Edge sets index the points lying on each box boundary:
// edges[0] = left (u=0), [1] = upper (v=0), [2] = right (u=1), [3] = bottom (v=1).
struct GridSpec {
    std::string name;
    int n = 0; // grid side
    std::vector<std::pair<int, int>> points;
    std::vector<std::pair<double, double>> unit_positions;
    std::array<std::vector<int>, 4> edges;

    int count() const { return static_cast<int>(points.size()); }

    // Supported names: "2pt", "2x2", "3x3", "4x4", "5x5".
    static GridSpec by_name(const std::string& name);
};

// Proposal geometry paired with its heatmap resolution. (p_x, p_y) is the
// upper-left corner in image pixels.
struct RoiGeometry {
    double p_x = 0, p_y = 0;
    double w_p = 0, h_p = 0;
    int w_o = 56, h_o = 56;

    void validate() const;
};

struct GridPointEstimate {
    int index = 0;
    double x = 0, y = 0;
    double p = 0; // confidence in [0,1]
};

struct BoxBounds {
    double x_l = 0, y_u = 0, x_r = 0, y_b = 0;

    double width() const { return x_r - x_l; }
    double height() const { return y_b - y_u; }
    double area() const;
};

// Intersection-over-union of two boxes; disjoint boxes give 0.
double iou(const BoxBounds& a, const BoxBounds& b);

// One binary map per grid point, stacked as (n_points, h_o, w_o), plus a
// per-point validity flag (0 when the target pixel fell outside the heatmap).
struct SupervisionMap {
    numkit::Tensor maps;
    std::vector<std::uint8_t> valid;
};

// Image-space target locations of the grid points for a ground-truth box.
std::vector<std::pair<double, double>> grid_point_targets(const BoxBounds& gt_box,
                                                          const GridSpec& spec);

// Heatmap pixel -> image coordinates over the proposal window.
std::pair<double, double> map_heatmap_to_image(double hx, double hy, const RoiGeometry& roi);

// Heatmap pixel -> image coordinates over the 2x extended window
// [P_x - w_p/2, P_x + 3 w_p/2] (and the same vertically).
std::pair<double, double> map_heatmap_to_image_extended(double hx, double hy,
                                                        const RoiGeometry& roi);

// Exact algebraic inverse of the extended mapping; real-valued, the caller
// decides how to round.
std::pair<double, double> map_image_to_heatmap_extended(double ix, double iy,
                                                        const RoiGeometry& roi);

// Render per-point supervision maps: each target goes through the inverse
// extended mapping (or the plain inverse when extended = false), rounds to
// the nearest pixel (ties toward -inf), and that pixel plus its 4-neighbors
// are set to 1 (clipped at borders). Targets whose rounded pixel is outside
// the heatmap get a zero map and valid = 0.
SupervisionMap render_supervision(const std::vector<std::pair<double, double>>& targets,
                                  const RoiGeometry& roi, const GridSpec& spec,
                                  bool extended = true);

// Argmax decode of one heatmap (h_o, w_o) of probabilities; ties break toward
// the lowest row-major index. `extended` selects the mapping.
GridPointEstimate decode_heatmap(const numkit::Tensor& heatmap, const RoiGeometry& roi,
                                 bool extended, int index = 0);

enum class DecodeMode { normalized, literal };

// Reconstruct a box from per-point estimates. Normalized mode takes the
// confidence-weighted average of each edge set's coordinates (sum of p below
// 1e-6 falls back to the unweighted mean); literal mode divides by the grid
// side instead of the probability mass. The result is swap-clamped so
// x_l <= x_r and y_u <= y_b.
BoxBounds boxes_from_grid_points(const std::vector<GridPointEstimate>& estimates,
                                 const GridSpec& spec,
                                 DecodeMode mode = DecodeMode::normalized);

// Fraction of ground-truth grid points whose inverse-mapped location lands
// inside the heatmap window (closed box on real coordinates, before any
// rounding). Proposals are paired elementwise with gt_boxes.
double coverage_fraction(const std::vector<RoiGeometry>& proposals,
                         const std::vector<BoxBounds>& gt_boxes, const GridSpec& spec,
                         bool extended);

} // namespace gridloc::gridgeom
