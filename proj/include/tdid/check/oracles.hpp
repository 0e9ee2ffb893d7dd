#pragma once

// Brute-force reference implementations. They share no code with the
// production paths and are only fast enough for small randomized instances.

#include <cstdint>
#include <string>
#include <vector>

#include "tdid/anchors.hpp"
#include "tdid/evaluator.hpp"
#include "tdid/postprocess.hpp"

namespace tdid::check {

// Counts unit pixel cells; box corners must be integers.
double iou_by_counting(const Box& a, const Box& b);

// Searches every subset for the unique one where each member has IoU below
// the threshold with every higher-priority member and each non-member does
// not. Returns kept indices in priority order. n <= 16.
std::vector<std::size_t> nms_by_subsets(const std::vector<ScoredBox>& candidates, double iou_threshold);

struct OracleAssignment {
    std::vector<int> labels;  // 1 positive, 0 negative, -1 ignore
    std::vector<int> matched_gt;
};

OracleAssignment assign_by_definition(const std::vector<Box>& anchors, const std::vector<Box>& gts,
                                      double pos_threshold = 0.6, double neg_threshold = 0.3);

struct OracleMatch {
    std::vector<std::size_t> order;
    std::vector<int> matched_gt;  // per ranked detection, -1 for FP
};

// Enumerates every partial injective detection -> GT assignment with IoU >=
// threshold and keeps the one whose per-rank (IoU, -gt index) sequence is
// lexicographically largest.
OracleMatch match_by_enumeration(const std::vector<Detection>& detections, const std::vector<Box>& gts,
                                 double iou_threshold = 0.5);

// Area under the monotone precision envelope, summed over distinct recall levels.
double ap_by_recall_levels(const std::vector<RankedFlag>& flags, std::size_t num_gt);

struct OracleStats {
    std::size_t cases = 0;
    std::size_t mismatches = 0;
    std::string first_mismatch;

    bool ok() const { return cases > 0 && mismatches == 0; }
};

OracleStats compare_iou(std::uint64_t seed, int cases);
OracleStats compare_nms(std::uint64_t seed, int cases);
OracleStats compare_assignment(std::uint64_t seed, int cases);
OracleStats compare_matching(std::uint64_t seed, int cases);
// Agreement within tolerance rather than bitwise.
OracleStats compare_ap(std::uint64_t seed, int cases, double tolerance = 1e-12);

}  // namespace tdid::check
