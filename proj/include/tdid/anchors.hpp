#pragma once

#include <cstddef>
#include <optional>
#include <vector>

namespace tdid {

// Axis-aligned box in pixel corner coordinates, half-open [x1,x2) x [y1,y2).
struct Box {
    double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

    double width() const { return x2 - x1; }
    double height() const { return y2 - y1; }
    double area() const { return width() * height(); }
    double cx() const { return 0.5 * (x1 + x2); }
    double cy() const { return 0.5 * (y1 + y2); }
    bool valid() const { return x2 > x1 && y2 > y1; }

    static Box from_center(double cx, double cy, double w, double h) {
        return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
    }

    friend bool operator==(const Box&, const Box&) = default;
};

struct BoxDeltas {
    double tx = 0, ty = 0, tw = 0, th = 0;
};

double iou(const Box& a, const Box& b);

BoxDeltas encode_box(const Box& anchor, const Box& gt);

// Inverse of encode_box without clipping.
Box apply_deltas(const Box& anchor, const BoxDeltas& d);

struct DecodedBox {
    Box box;
    bool valid = false;  // false when clipping collapsed the box to zero area
};

// Width/height deltas are clamped to log(1000/16) before exponentiation.
// Throws InvalidDeltaError on non-finite input.
DecodedBox decode_box(const Box& anchor, const BoxDeltas& d, double image_width, double image_height);

// Anchors laid out as (row-major feature cell) x (scale index * |ratios| + ratio index).
struct AnchorSet {
    std::vector<Box> boxes;
    std::size_t grid_h = 0, grid_w = 0;
    int stride = 0;
    std::vector<double> scales, ratios;

    std::size_t per_cell() const { return scales.size() * ratios.size(); }
    std::size_t size() const { return boxes.size(); }
};

AnchorSet generate_anchors(std::size_t grid_h, std::size_t grid_w, int stride, const std::vector<double>& scales,
                           const std::vector<double>& ratios);

enum class AnchorLabel : signed char { Negative = 0, Positive = 1, Ignore = -1 };

struct AssignmentThresholds {
    double positive = 0.6;  // IoU strictly above -> positive
    double negative = 0.3;  // max IoU strictly below -> negative
};

struct AnchorAssignment {
    std::vector<AnchorLabel> labels;
    std::vector<int> matched_gt;           // -1 unless positive
    std::vector<BoxDeltas> targets;        // meaningful only for positives
    std::size_t num_positive() const;
    std::size_t num_negative() const;
};

// Threshold rule plus a per-GT fallback: the highest-IoU anchor for each GT
// (lowest index on ties, only if its IoU > 0) is forced positive.
AnchorAssignment assign_anchors(const AnchorSet& anchors, const std::vector<Box>& gts,
                                const AssignmentThresholds& thresholds = {});

}  // namespace tdid
