#include "tdid/check/oracles.hpp"

#include <cmath>
#include <sstream>

#include "tdid/rng.hpp"

namespace tdid::check {

double iou_by_counting(const Box& a, const Box& b) {
    const long x0 = std::lround(std::min(a.x1, b.x1));
    const long x1 = std::lround(std::max(a.x2, b.x2));
    const long y0 = std::lround(std::min(a.y1, b.y1));
    const long y1 = std::lround(std::max(a.y2, b.y2));
    long both = 0, either = 0;
    for (long y = y0; y < y1; ++y) {
        for (long x = x0; x < x1; ++x) {
            const double cx = x + 0.5, cy = y + 0.5;
            const bool in_a = cx > a.x1 && cx < a.x2 && cy > a.y1 && cy < a.y2;
            const bool in_b = cx > b.x1 && cx < b.x2 && cy > b.y1 && cy < b.y2;
            both += in_a && in_b;
            either += in_a || in_b;
        }
    }
    return either == 0 ? 0.0 : static_cast<double>(both) / static_cast<double>(either);
}

namespace {

// j outranks i: higher score, or equal score and lower index.
bool outranks(const std::vector<ScoredBox>& c, std::size_t j, std::size_t i) {
    return c[j].score > c[i].score || (c[j].score == c[i].score && j < i);
}

}  // namespace

std::vector<std::size_t> nms_by_subsets(const std::vector<ScoredBox>& c, double thr) {
    const std::size_t n = c.size();
    std::vector<std::vector<double>> m(n, std::vector<double>(n));
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) m[i][j] = iou_by_counting(c[i].box, c[j].box);
    }
    std::vector<std::size_t> found;
    int solutions = 0;
    for (std::uint32_t mask = 0; mask < (1u << n); ++mask) {
        bool consistent = true;
        for (std::size_t i = 0; i < n && consistent; ++i) {
            bool free = true;
            for (std::size_t j = 0; j < n; ++j) {
                if ((mask >> j & 1u) && outranks(c, j, i) && m[i][j] >= thr) free = false;
            }
            consistent = free == static_cast<bool>(mask >> i & 1u);
        }
        if (!consistent) continue;
        ++solutions;
        found.clear();
        for (std::size_t i = 0; i < n; ++i) {
            if (mask >> i & 1u) found.push_back(i);
        }
    }
    if (solutions != 1) return {static_cast<std::size_t>(-1)};
    // Priority order by counting how many kept members outrank each.
    std::vector<std::size_t> ordered(found.size());
    for (auto i : found) {
        std::size_t rank = 0;
        for (auto j : found) rank += outranks(c, j, i);
        ordered[rank] = i;
    }
    return ordered;
}

OracleAssignment assign_by_definition(const std::vector<Box>& anchors, const std::vector<Box>& gts, double pos,
                                      double neg) {
    const std::size_t na = anchors.size(), ng = gts.size();
    std::vector<std::vector<double>> m(na, std::vector<double>(ng));
    for (std::size_t a = 0; a < na; ++a) {
        for (std::size_t g = 0; g < ng; ++g) m[a][g] = iou_by_counting(anchors[a], gts[g]);
    }
    OracleAssignment out{std::vector<int>(na, 0), std::vector<int>(na, -1)};
    for (std::size_t a = 0; a < na; ++a) {
        if (ng == 0) continue;
        std::size_t arg = 0;
        for (std::size_t g = 1; g < ng; ++g) {
            if (m[a][g] > m[a][arg]) arg = g;
        }
        const double best = m[a][arg];
        // GTs for which this anchor is the first maximizer, with nonzero overlap.
        int forced_by = -1;
        for (std::size_t g = 0; g < ng && forced_by < 0; ++g) {
            std::size_t first = 0;
            for (std::size_t b = 1; b < na; ++b) {
                if (m[b][g] > m[first][g]) first = b;
            }
            if (first == a && m[a][g] > 0) forced_by = static_cast<int>(g);
        }
        if (best > pos) {
            out.labels[a] = 1;
            out.matched_gt[a] = static_cast<int>(arg);
        } else if (forced_by >= 0) {
            out.labels[a] = 1;
            out.matched_gt[a] = forced_by;
        } else if (best >= neg) {
            out.labels[a] = -1;
        }
    }
    return out;
}

namespace {

bool ranks_before(const Detection& a, std::size_t ia, const Detection& b, std::size_t ib) {
    if (a.score != b.score) return a.score > b.score;
    const double ka[4] = {a.box.x1, a.box.y1, a.box.x2, a.box.y2};
    const double kb[4] = {b.box.x1, b.box.y1, b.box.x2, b.box.y2};
    for (int k = 0; k < 4; ++k) {
        if (ka[k] != kb[k]) return ka[k] < kb[k];
    }
    return ia < ib;
}

struct Enumerator {
    const std::vector<std::vector<double>>& m;  // [rank][gt]
    double thr;
    std::vector<int> current, best;
    std::vector<bool> used;
    bool have_best = false;

    // (iou, -gt) per rank; unmatched sorts below any match.
    bool better(const std::vector<int>& x, const std::vector<int>& y) const {
        for (std::size_t r = 0; r < x.size(); ++r) {
            const double vx = x[r] < 0 ? -1.0 : m[r][static_cast<std::size_t>(x[r])];
            const double vy = y[r] < 0 ? -1.0 : m[r][static_cast<std::size_t>(y[r])];
            if (vx != vy) return vx > vy;
            if (x[r] != y[r]) return x[r] >= 0 && (y[r] < 0 || x[r] < y[r]);
        }
        return false;
    }

    void run(std::size_t r) {
        if (r == current.size()) {
            if (!have_best || better(current, best)) {
                best = current;
                have_best = true;
            }
            return;
        }
        current[r] = -1;
        run(r + 1);
        for (std::size_t g = 0; g < used.size(); ++g) {
            if (used[g] || m[r][g] < thr) continue;
            used[g] = true;
            current[r] = static_cast<int>(g);
            run(r + 1);
            used[g] = false;
        }
        current[r] = -1;
    }
};

}  // namespace

OracleMatch match_by_enumeration(const std::vector<Detection>& dets, const std::vector<Box>& gts, double thr) {
    OracleMatch out;
    std::vector<bool> taken(dets.size(), false);
    for (std::size_t k = 0; k < dets.size(); ++k) {
        std::size_t pick = dets.size();
        for (std::size_t i = 0; i < dets.size(); ++i) {
            if (taken[i]) continue;
            if (pick == dets.size() || ranks_before(dets[i], i, dets[pick], pick)) pick = i;
        }
        taken[pick] = true;
        out.order.push_back(pick);
    }
    std::vector<std::vector<double>> m(dets.size(), std::vector<double>(gts.size()));
    for (std::size_t r = 0; r < dets.size(); ++r) {
        for (std::size_t g = 0; g < gts.size(); ++g) m[r][g] = iou_by_counting(dets[out.order[r]].box, gts[g]);
    }
    Enumerator e{m, thr, std::vector<int>(dets.size(), -1), {}, std::vector<bool>(gts.size(), false)};
    e.run(0);
    out.matched_gt = e.best;
    return out;
}

double ap_by_recall_levels(const std::vector<RankedFlag>& flags, std::size_t num_gt) {
    // Rank by score with insertion sort; equal scores keep input order.
    std::vector<RankedFlag> ranked;
    for (const auto& f : flags) {
        auto pos = ranked.end();
        while (pos != ranked.begin() && (pos - 1)->score < f.score) --pos;
        ranked.insert(pos, f);
    }
    std::vector<double> precision, recall;
    std::size_t tp = 0;
    for (std::size_t k = 0; k < ranked.size(); ++k) {
        tp += ranked[k].tp;
        precision.push_back(static_cast<double>(tp) / static_cast<double>(k + 1));
        recall.push_back(static_cast<double>(tp) / static_cast<double>(num_gt));
    }
    double ap = 0, prev = 0;
    for (std::size_t k = 0; k < ranked.size(); ++k) {
        if (!ranked[k].tp) continue;
        const double level = recall[k];
        double envelope = 0;
        for (std::size_t j = 0; j < ranked.size(); ++j) {
            if (recall[j] >= level) envelope = std::max(envelope, precision[j]);
        }
        ap += (level - prev) * envelope;
        prev = level;
    }
    return ap;
}

// ---- randomized comparisons ----------------------------------------------

namespace {

Box random_box(SplitMix64& rng, long extent, long max_side) {
    const long w = rng.range(1, max_side), h = rng.range(1, max_side);
    const long x = rng.range(0, extent - w), y = rng.range(0, extent - h);
    return {static_cast<double>(x), static_cast<double>(y), static_cast<double>(x + w), static_cast<double>(y + h)};
}

std::string box_str(const Box& b) {
    std::ostringstream s;
    s << "[" << b.x1 << "," << b.y1 << "," << b.x2 << "," << b.y2 << "]";
    return s.str();
}

void mismatch(OracleStats& st, int c, const std::string& what) {
    if (st.mismatches++ == 0) st.first_mismatch = "case " + std::to_string(c) + ": " + what;
}

}  // namespace

OracleStats compare_iou(std::uint64_t seed, int cases) {
    SplitMix64 rng(derive_seed(seed, 11));
    OracleStats st;
    for (int c = 0; c < cases; ++c) {
        const Box a = random_box(rng, 32, 16);
        // A quarter of the cases reuse a or share an edge with it.
        Box b = random_box(rng, 32, 16);
        if (c % 8 == 0) b = a;
        if (c % 8 == 1) b = {a.x2, a.y1, a.x2 + 3, a.y2};
        const double got = iou(a, b), want = iou_by_counting(a, b);
        ++st.cases;
        if (got != want || iou(b, a) != got) mismatch(st, c, box_str(a) + " " + box_str(b));
    }
    return st;
}

OracleStats compare_nms(std::uint64_t seed, int cases) {
    SplitMix64 rng(derive_seed(seed, 12));
    OracleStats st;
    const double thresholds[] = {0.3, 0.5, 0.7};
    for (int c = 0; c < cases; ++c) {
        const auto n = static_cast<std::size_t>(rng.range(0, 10));
        std::vector<ScoredBox> cand;
        for (std::size_t i = 0; i < n; ++i) {
            // Coarse scores force ties.
            cand.push_back({random_box(rng, 24, 14), static_cast<double>(rng.range(1, 5)) / 5.0});
        }
        const double thr = c % 2 ? thresholds[rng.below(3)] : rng.uniform(0.05, 0.95);
        const auto got = nms(cand, thr);
        const auto want = nms_by_subsets(cand, thr);
        ++st.cases;
        if (got != want) mismatch(st, c, std::to_string(n) + " candidates, threshold " + std::to_string(thr));
    }
    return st;
}

OracleStats compare_assignment(std::uint64_t seed, int cases) {
    SplitMix64 rng(derive_seed(seed, 13));
    OracleStats st;
    for (int c = 0; c < cases; ++c) {
        AnchorSet set;
        const auto na = static_cast<std::size_t>(rng.range(1, 30));
        for (std::size_t i = 0; i < na; ++i) set.boxes.push_back(random_box(rng, 32, 16));
        std::vector<Box> gts;
        const auto ng = static_cast<std::size_t>(rng.range(0, 4));
        for (std::size_t g = 0; g < ng; ++g) gts.push_back(random_box(rng, 32, 16));
        const auto got = assign_anchors(set, gts);
        const auto want = assign_by_definition(set.boxes, gts);
        ++st.cases;
        bool same = true;
        for (std::size_t a = 0; a < na; ++a) {
            same = same && static_cast<int>(got.labels[a]) == want.labels[a];
            same = same && (want.labels[a] != 1 || got.matched_gt[a] == want.matched_gt[a]);
        }
        if (!same) mismatch(st, c, std::to_string(na) + " anchors, " + std::to_string(ng) + " gts");
    }
    return st;
}

OracleStats compare_matching(std::uint64_t seed, int cases) {
    SplitMix64 rng(derive_seed(seed, 14));
    OracleStats st;
    for (int c = 0; c < cases; ++c) {
        std::vector<Box> gts;
        const auto ng = static_cast<std::size_t>(rng.range(0, 4));
        for (std::size_t g = 0; g < ng; ++g) gts.push_back(random_box(rng, 20, 12));
        std::vector<Detection> dets;
        const auto nd = static_cast<std::size_t>(rng.range(0, 6));
        for (std::size_t i = 0; i < nd; ++i) {
            Box b = random_box(rng, 20, 12);
            // Perturbed copies of GTs keep the TP rate meaningful.
            if (ng && rng.uniform() < 0.6) {
                b = gts[rng.below(ng)];
                b.x2 += static_cast<double>(rng.range(-1, 1));
                b.y1 += static_cast<double>(rng.range(-1, 0));
                if (b.x2 <= b.x1) b.x2 = b.x1 + 1;
            }
            dets.push_back({b, static_cast<double>(rng.range(1, 4)) / 4.0, "x"});
        }
        const auto got = match_detections(dets, gts, 0.5);
        const auto want = match_by_enumeration(dets, gts, 0.5);
        ++st.cases;
        bool same = got.order == want.order && got.matched_gt == want.matched_gt;
        for (std::size_t r = 0; r < got.tp.size() && same; ++r) same = got.tp[r] == (want.matched_gt[r] >= 0);
        if (!same) mismatch(st, c, std::to_string(nd) + " detections, " + std::to_string(ng) + " gts");
    }
    return st;
}

OracleStats compare_ap(std::uint64_t seed, int cases, double tolerance) {
    SplitMix64 rng(derive_seed(seed, 15));
    OracleStats st;
    for (int c = 0; c < cases; ++c) {
        const auto n = static_cast<std::size_t>(rng.range(0, 20));
        std::vector<RankedFlag> flags;
        std::size_t tps = 0;
        for (std::size_t i = 0; i < n; ++i) {
            const bool tp = rng.uniform() < 0.5;
            tps += tp;
            flags.push_back({rng.uniform(), tp});
        }
        const std::size_t num_gt = tps + static_cast<std::size_t>(rng.range(c % 3 == 0 ? 1 : 0, 3)) + (tps == 0);
        const auto got = average_precision(flags, num_gt);
        const double want = ap_by_recall_levels(flags, num_gt);
        ++st.cases;
        if (!got || std::abs(*got - want) > tolerance) {
            mismatch(st, c, "ap " + (got ? std::to_string(*got) : std::string("none")) + " vs " + std::to_string(want));
        }
    }
    return st;
}

}  // namespace tdid::check
