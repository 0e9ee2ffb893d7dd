#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "tdid/anchors.hpp"
#include "tdid/model.hpp"

namespace tdid {

struct Detection {
    Box box;
    double score = 0;  // foreground softmax probability
    std::string target_id;
};

struct ScoredBox {
    Box box;
    double score = 0;
};

// Greedy NMS. Candidates are visited by descending score (lower input index
// first on ties); a candidate is kept iff its IoU with every kept box is
// strictly below iou_threshold. Returns kept input indices in visit order,
// stopping after max_keep boxes.
std::vector<std::size_t> nms(const std::vector<ScoredBox>& candidates, double iou_threshold,
                             std::size_t max_keep = SIZE_MAX);

struct DetectOptions {
    double score_threshold = 0.05;
    double nms_iou = 0.7;
    std::size_t max_detections = 5;
};

// Pre-extracted target features, keyed by instance id.
class TargetFeatureCache {
public:
    void insert(const std::string& id, std::vector<TargetFeatures<float>> views);
    bool contains(const std::string& id) const { return entries_.count(id) != 0; }
    // Throws MissingTargetError for unknown ids.
    const std::vector<TargetFeatures<float>>& at(const std::string& id) const;
    std::vector<std::string> ids() const;
    std::size_t size() const { return entries_.size(); }

    // Entries are stored as "tcache/<id>/<view>/{raw,pooled}".
    void save(const std::filesystem::path& path) const;
    static TargetFeatureCache load(const std::filesystem::path& path);

private:
    std::map<std::string, std::vector<TargetFeatures<float>>> entries_;
};

// Each id must map to exactly num_target_views images of shape [3,h,w] or [1,3,h,w].
TargetFeatureCache build_cache(const ModelF& model, const std::map<std::string, std::vector<Tensorf>>& targets);

// Foreground probability per anchor, in anchor order.
std::vector<double> foreground_scores(const HeadOutput<float>& head);

// Detection from already-extracted scene features ([1,N,Hf,Wf]).
std::vector<Detection> detect_from_features(const ModelF& model, const Tensorf& scene_features,
                                            std::size_t image_height, std::size_t image_width,
                                            const std::string& target_id, const TargetFeatureCache& cache,
                                            const DetectOptions& options = {});

// scene is [3,H,W] or [1,3,H,W] with stride-divisible extent.
std::vector<Detection> detect(const ModelF& model, const Tensorf& scene, const std::string& target_id,
                              const TargetFeatureCache& cache, const DetectOptions& options = {});

// Runs the scene backbone once and the embedding + head once per id.
std::map<std::string, std::vector<Detection>> detect_all(const ModelF& model, const Tensorf& scene,
                                                         const std::vector<std::string>& target_ids,
                                                         const TargetFeatureCache& cache,
                                                         const DetectOptions& options = {});

// Adds a leading batch axis to [3,H,W] images; passes [1,3,H,W] through.
Tensorf as_batch(const Tensorf& image);

}  // namespace tdid
