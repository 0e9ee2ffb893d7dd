#include "tdid/anchors.hpp"

#include <algorithm>
#include <cmath>

#include "tdid/error.hpp"

namespace tdid {

namespace {
const double kMaxLogScale = std::log(1000.0 / 16.0);
}

double iou(const Box& a, const Box& b) {
    const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
    const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
    if (iw <= 0 || ih <= 0) return 0.0;
    const double inter = iw * ih;
    return inter / (a.area() + b.area() - inter);
}

BoxDeltas encode_box(const Box& anchor, const Box& gt) {
    return {(gt.cx() - anchor.cx()) / anchor.width(), (gt.cy() - anchor.cy()) / anchor.height(),
            std::log(gt.width() / anchor.width()), std::log(gt.height() / anchor.height())};
}

Box apply_deltas(const Box& anchor, const BoxDeltas& d) {
    const double w = anchor.width() * std::exp(d.tw);
    const double h = anchor.height() * std::exp(d.th);
    return Box::from_center(anchor.cx() + d.tx * anchor.width(), anchor.cy() + d.ty * anchor.height(), w, h);
}

DecodedBox decode_box(const Box& anchor, const BoxDeltas& d, double image_width, double image_height) {
    if (!std::isfinite(d.tx) || !std::isfinite(d.ty) || !std::isfinite(d.tw) || !std::isfinite(d.th)) {
        throw InvalidDeltaError("decode_box: non-finite regression delta");
    }
    BoxDeltas c = d;
    c.tw = std::min(c.tw, kMaxLogScale);
    c.th = std::min(c.th, kMaxLogScale);
    Box b = apply_deltas(anchor, c);
    b.x1 = std::clamp(b.x1, 0.0, image_width);
    b.x2 = std::clamp(b.x2, 0.0, image_width);
    b.y1 = std::clamp(b.y1, 0.0, image_height);
    b.y2 = std::clamp(b.y2, 0.0, image_height);
    return {b, b.valid()};
}

AnchorSet generate_anchors(std::size_t grid_h, std::size_t grid_w, int stride, const std::vector<double>& scales,
                           const std::vector<double>& ratios) {
    if (grid_h == 0 || grid_w == 0 || stride <= 0 || scales.empty() || ratios.empty()) {
        throw ConfigError("generate_anchors: grid, stride, scales and ratios must be positive and non-empty");
    }
    for (double s : scales) {
        if (!(s > 0)) throw ConfigError("generate_anchors: anchor scales must be positive");
    }
    for (double r : ratios) {
        if (!(r > 0)) throw ConfigError("generate_anchors: anchor ratios must be positive");
    }
    AnchorSet set;
    set.grid_h = grid_h;
    set.grid_w = grid_w;
    set.stride = stride;
    set.scales = scales;
    set.ratios = ratios;
    set.boxes.reserve(grid_h * grid_w * scales.size() * ratios.size());
    for (std::size_t i = 0; i < grid_h; ++i) {
        for (std::size_t j = 0; j < grid_w; ++j) {
            const double cx = (static_cast<double>(j) + 0.5) * stride;
            const double cy = (static_cast<double>(i) + 0.5) * stride;
            for (double s : scales) {
                for (double r : ratios) {
                    const double sr = std::sqrt(r);
                    set.boxes.push_back(Box::from_center(cx, cy, s * sr, s / sr));
                }
            }
        }
    }
    return set;
}

std::size_t AnchorAssignment::num_positive() const {
    return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), AnchorLabel::Positive));
}

std::size_t AnchorAssignment::num_negative() const {
    return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), AnchorLabel::Negative));
}

AnchorAssignment assign_anchors(const AnchorSet& anchors, const std::vector<Box>& gts,
                                const AssignmentThresholds& thresholds) {
    const std::size_t n = anchors.size();
    AnchorAssignment out;
    out.labels.assign(n, AnchorLabel::Negative);
    out.matched_gt.assign(n, -1);
    out.targets.assign(n, BoxDeltas{});
    if (gts.empty()) return out;

    std::vector<double> gt_best(gts.size(), 0.0);
    std::vector<std::size_t> gt_best_anchor(gts.size(), 0);
    for (std::size_t a = 0; a < n; ++a) {
        double best = -1.0;
        int best_g = -1;
        for (std::size_t g = 0; g < gts.size(); ++g) {
            const double v = iou(anchors.boxes[a], gts[g]);
            if (v > best) {
                best = v;
                best_g = static_cast<int>(g);
            }
            if (v > gt_best[g]) {
                gt_best[g] = v;
                gt_best_anchor[g] = a;
            }
        }
        if (best > thresholds.positive) {
            out.labels[a] = AnchorLabel::Positive;
            out.matched_gt[a] = best_g;
        } else if (best >= thresholds.negative) {
            out.labels[a] = AnchorLabel::Ignore;
        }
    }
    for (std::size_t g = 0; g < gts.size(); ++g) {
        if (gt_best[g] <= 0.0) continue;
        const std::size_t a = gt_best_anchor[g];
        if (out.labels[a] != AnchorLabel::Positive) {
            out.labels[a] = AnchorLabel::Positive;
            out.matched_gt[a] = static_cast<int>(g);
        }
    }
    for (std::size_t a = 0; a < n; ++a) {
        if (out.labels[a] == AnchorLabel::Positive) {
            out.targets[a] = encode_box(anchors.boxes[a], gts[static_cast<std::size_t>(out.matched_gt[a])]);
        }
    }
    return out;
}

}  // namespace tdid
