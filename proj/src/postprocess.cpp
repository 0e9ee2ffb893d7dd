#include "tdid/postprocess.hpp"

#include <algorithm>
#include <numeric>

#include "tdid/checkpoint.hpp"
#include "tdid/error.hpp"

namespace tdid {

std::vector<std::size_t> nms(const std::vector<ScoredBox>& candidates, double iou_threshold, std::size_t max_keep) {
    std::vector<std::size_t> order(candidates.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return candidates[a].score > candidates[b].score; });
    std::vector<std::size_t> kept;
    for (auto i : order) {
        if (kept.size() == max_keep) break;
        bool keep = true;
        for (auto k : kept) {
            if (iou(candidates[i].box, candidates[k].box) >= iou_threshold) {
                keep = false;
                break;
            }
        }
        if (keep) kept.push_back(i);
    }
    return kept;
}

// ---- cache ---------------------------------------------------------------

void TargetFeatureCache::insert(const std::string& id, std::vector<TargetFeatures<float>> views) {
    entries_[id] = std::move(views);
}

const std::vector<TargetFeatures<float>>& TargetFeatureCache::at(const std::string& id) const {
    auto it = entries_.find(id);
    if (it == entries_.end()) throw MissingTargetError("target '" + id + "' is not in the feature cache");
    return it->second;
}

std::vector<std::string> TargetFeatureCache::ids() const {
    std::vector<std::string> out;
    for (const auto& [id, _] : entries_) out.push_back(id);
    return out;
}

void TargetFeatureCache::save(const std::filesystem::path& path) const {
    std::vector<NamedTensor> out;
    for (const auto& [id, views] : entries_) {
        for (std::size_t v = 0; v < views.size(); ++v) {
            const auto prefix = "tcache/" + id + "/" + std::to_string(v) + "/";
            out.push_back({prefix + "raw", views[v].raw.detach()});
            out.push_back({prefix + "pooled", views[v].pooled.detach()});
        }
    }
    write_checkpoint(path, out);
}

TargetFeatureCache TargetFeatureCache::load(const std::filesystem::path& path) {
    std::map<std::string, std::map<std::size_t, TargetFeatures<float>>> staged;
    for (auto& e : read_checkpoint(path)) {
        const std::string prefix = "tcache/";
        const auto last = e.name.rfind('/');
        const auto mid = last == std::string::npos ? std::string::npos : e.name.rfind('/', last - 1);
        if (e.name.rfind(prefix, 0) != 0 || mid == std::string::npos || mid < prefix.size()) {
            throw IoError("unexpected cache entry '" + e.name + "'");
        }
        const auto id = e.name.substr(prefix.size(), mid - prefix.size());
        const auto view = static_cast<std::size_t>(std::stoul(e.name.substr(mid + 1, last - mid - 1)));
        const auto kind = e.name.substr(last + 1);
        auto& slot = staged[id][view];
        if (kind == "raw") {
            slot.raw = e.tensor;
        } else if (kind == "pooled") {
            slot.pooled = e.tensor;
        } else {
            throw IoError("unexpected cache entry '" + e.name + "'");
        }
    }
    TargetFeatureCache cache;
    for (auto& [id, views] : staged) {
        std::vector<TargetFeatures<float>> list;
        for (std::size_t v = 0; v < views.size(); ++v) {
            auto it = views.find(v);
            if (it == views.end() || !it->second.raw.defined() || !it->second.pooled.defined()) {
                throw IoError("cache entry for '" + id + "' view " + std::to_string(v) + " is incomplete");
            }
            list.push_back(it->second);
        }
        cache.insert(id, std::move(list));
    }
    return cache;
}

Tensorf as_batch(const Tensorf& image) {
    if (image.rank() == 4) return image;
    if (image.rank() == 3) return reshape(image, {1, image.dim(0), image.dim(1), image.dim(2)});
    throw InvalidShapeError("expected [3,H,W] or [1,3,H,W] image, got " + shape_str(image.shape()));
}

TargetFeatureCache build_cache(const ModelF& model, const std::map<std::string, std::vector<Tensorf>>& targets) {
    NoGradGuard no_grad;
    TargetFeatureCache cache;
    const auto views = static_cast<std::size_t>(model.config().num_target_views);
    for (const auto& [id, images] : targets) {
        if (images.size() != views) {
            throw ConfigError("target '" + id + "' has " + std::to_string(images.size()) + " views, model expects " +
                              std::to_string(views));
        }
        std::vector<TargetFeatures<float>> feats;
        for (const auto& img : images) feats.push_back(pool_target(model, extract_features(model, as_batch(img))));
        cache.insert(id, std::move(feats));
    }
    return cache;
}

// ---- detection -----------------------------------------------------------

std::vector<double> foreground_scores(const HeadOutput<float>& head) {
    const auto& cls = head.cls_logits;
    const std::size_t a = cls.dim(1) / 2, cells = cls.dim(2) * cls.dim(3);
    std::vector<float> rows(cells * a * 2);
    const auto d = cls.data();
    for (std::size_t cell = 0; cell < cells; ++cell) {
        for (std::size_t k = 0; k < a; ++k) {
            const std::size_t anchor = cell * a + k;
            rows[2 * anchor] = d[(2 * k) * cells + cell];
            rows[2 * anchor + 1] = d[(2 * k + 1) * cells + cell];
        }
    }
    const auto probs = softmax_rows(Tensorf::from_data({cells * a, 2}, std::move(rows)));
    std::vector<double> out(cells * a);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = probs.data()[2 * i + 1];
    return out;
}

std::vector<Detection> detect_from_features(const ModelF& model, const Tensorf& scene_features,
                                            std::size_t image_height, std::size_t image_width,
                                            const std::string& target_id, const TargetFeatureCache& cache,
                                            const DetectOptions& options) {
    NoGradGuard no_grad;
    const auto& targets = cache.at(target_id);
    const auto head = predict_head(model, embed(model, scene_features, std::span<const TargetFeatures<float>>(targets)));
    const auto anchors = anchors_for(model.config(), image_height, image_width);
    const auto scores = foreground_scores(head);
    if (scores.size() != anchors.size()) throw InvalidShapeError("detect: head grid does not match anchor layout");

    const std::size_t a = model.config().anchors_per_cell();
    const std::size_t cells = head.reg_deltas.dim(2) * head.reg_deltas.dim(3);
    const auto rd = head.reg_deltas.data();
    std::vector<ScoredBox> candidates;
    for (std::size_t i = 0; i < anchors.size(); ++i) {
        if (scores[i] < options.score_threshold) continue;
        const std::size_t cell = i / a, k = i % a;
        const BoxDeltas d{rd[(4 * k + 0) * cells + cell], rd[(4 * k + 1) * cells + cell],
                          rd[(4 * k + 2) * cells + cell], rd[(4 * k + 3) * cells + cell]};
        const auto decoded = decode_box(anchors.boxes[i], d, static_cast<double>(image_width),
                                        static_cast<double>(image_height));
        if (!decoded.valid) continue;
        candidates.push_back({decoded.box, scores[i]});
    }
    std::vector<Detection> out;
    for (auto idx : nms(candidates, options.nms_iou, options.max_detections)) {
        out.push_back({candidates[idx].box, candidates[idx].score, target_id});
    }
    return out;
}

std::vector<Detection> detect(const ModelF& model, const Tensorf& scene, const std::string& target_id,
                              const TargetFeatureCache& cache, const DetectOptions& options) {
    NoGradGuard no_grad;
    cache.at(target_id);
    const auto batch = as_batch(scene);
    const auto feats = extract_features(model, batch);
    return detect_from_features(model, feats, batch.dim(2), batch.dim(3), target_id, cache, options);
}

std::map<std::string, std::vector<Detection>> detect_all(const ModelF& model, const Tensorf& scene,
                                                         const std::vector<std::string>& target_ids,
                                                         const TargetFeatureCache& cache,
                                                         const DetectOptions& options) {
    NoGradGuard no_grad;
    for (const auto& id : target_ids) cache.at(id);
    const auto batch = as_batch(scene);
    const auto feats = extract_features(model, batch);
    std::map<std::string, std::vector<Detection>> out;
    for (const auto& id : target_ids) {
        out[id] = detect_from_features(model, feats, batch.dim(2), batch.dim(3), id, cache, options);
    }
    return out;
}

}  // namespace tdid
