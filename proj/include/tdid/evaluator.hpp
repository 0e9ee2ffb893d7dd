#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "tdid/dataset.hpp"
#include "tdid/postprocess.hpp"

namespace tdid {

struct SizeBucket {
    std::string name;
    std::function<bool(double width, double height)> contains;
};

// area >= 50*30
SizeBucket bucket_all();
// area >= 100*50
SizeBucket bucket_large();
// [lo, hi) area range.
SizeBucket area_bucket(std::string name, double lo, double hi);
// Four buckets split at the 25/50/75th percentile of the given GT areas.
std::vector<SizeBucket> quartile_buckets(std::vector<double> areas);

struct MatchResult {
    // Parallel to detections after the canonical sort (score desc, then box
    // coordinates lexicographic); matched_gt is -1 for false positives.
    std::vector<std::size_t> order;
    std::vector<bool> tp;
    std::vector<int> matched_gt;
};

// Greedy: each detection takes the unmatched GT of highest IoU (lowest index
// on ties) when that IoU >= iou_threshold.
MatchResult match_detections(const std::vector<Detection>& detections, const std::vector<Box>& gts,
                             double iou_threshold = 0.5);

struct RankedFlag {
    double score = 0;
    bool tp = false;
};

// All-point interpolated AP over detections of one instance pooled across
// scenes. nullopt when num_gt == 0 (excluded from the mean).
std::optional<double> average_precision(std::vector<RankedFlag> flags, std::size_t num_gt);

struct EvalCounts {
    std::size_t tp = 0, fp = 0, fn = 0, gt = 0, detections = 0;
};

struct EvalResult {
    std::map<std::string, double> per_instance;
    double mAP = 0;
    std::map<std::string, double> buckets;  // only buckets containing >= 1 GT
    EvalCounts counts;
};

nlohmann::json eval_result_to_json(const EvalResult& r);

// Detections for one (instance, scene) pair.
struct PairDetections {
    std::string instance_id;
    std::size_t scene = 0;
    std::vector<Detection> detections;
};

// Scores precomputed pair detections against scene annotations.
EvalResult evaluate_pairs(const std::vector<PairDetections>& pairs, const std::vector<SceneRecord>& scenes,
                          const std::vector<std::string>& instance_ids, const std::vector<SizeBucket>& buckets,
                          double iou_threshold = 0.5);

struct EvalOptions {
    std::string split = "test";
    std::vector<std::string> instance_ids;  // empty = every instance with targets
    DetectOptions detect{};
    double iou_threshold = 0.5;
    int threads = 1;
};

// Runs detect for every (instance, scene) pair of the split.
EvalResult evaluate(const ModelF& model, const LoadedDataset& dataset, const TargetFeatureCache& cache,
                    const std::vector<SizeBucket>& buckets, const EvalOptions& options = {});

struct ClassifyResult {
    std::string predicted_id;
    std::map<std::string, double> scores;  // max foreground probability per candidate
};

ClassifyResult classify(const ModelF& model, const Tensorf& crop, const std::vector<std::string>& candidate_ids,
                        const TargetFeatureCache& cache);

}  // namespace tdid
