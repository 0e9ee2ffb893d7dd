#include "tdid/evaluator.hpp"

#include <algorithm>
#include <atomic>
#include <numeric>
#include <set>
#include <limits>
#include <thread>
#include <tuple>

#include "tdid/error.hpp"

namespace tdid {

SizeBucket bucket_all() {
    return {"all", [](double w, double h) { return w * h >= 50.0 * 30.0; }};
}

SizeBucket bucket_large() {
    return {"large", [](double w, double h) { return w * h >= 100.0 * 50.0; }};
}

SizeBucket area_bucket(std::string name, double lo, double hi) {
    return {std::move(name), [lo, hi](double w, double h) { return w * h >= lo && w * h < hi; }};
}

std::vector<SizeBucket> quartile_buckets(std::vector<double> areas) {
    if (areas.empty()) throw ConfigError("quartile buckets need at least one ground-truth box");
    std::sort(areas.begin(), areas.end());
    auto q = [&](double f) { return areas[static_cast<std::size_t>(f * static_cast<double>(areas.size() - 1))]; };
    const double q1 = q(0.25), q2 = q(0.5), q3 = q(0.75);
    return {area_bucket("extra_small", 0, q1), area_bucket("small", q1, q2), area_bucket("medium", q2, q3),
            area_bucket("large_q", q3, std::numeric_limits<double>::infinity())};
}

MatchResult match_detections(const std::vector<Detection>& dets, const std::vector<Box>& gts, double iou_threshold) {
    MatchResult r;
    r.order.resize(dets.size());
    std::iota(r.order.begin(), r.order.end(), std::size_t{0});
    std::stable_sort(r.order.begin(), r.order.end(), [&](std::size_t a, std::size_t b) {
        const auto& da = dets[a];
        const auto& db = dets[b];
        if (da.score != db.score) return da.score > db.score;
        return std::tie(da.box.x1, da.box.y1, da.box.x2, da.box.y2) < std::tie(db.box.x1, db.box.y1, db.box.x2, db.box.y2);
    });
    std::vector<bool> used(gts.size(), false);
    for (auto d : r.order) {
        int best = -1;
        double best_iou = iou_threshold;
        for (std::size_t g = 0; g < gts.size(); ++g) {
            if (used[g]) continue;
            const double v = iou(dets[d].box, gts[g]);
            if (v >= best_iou && (best < 0 || v > best_iou)) {
                best = static_cast<int>(g);
                best_iou = v;
            }
        }
        if (best >= 0) used[static_cast<std::size_t>(best)] = true;
        r.tp.push_back(best >= 0);
        r.matched_gt.push_back(best);
    }
    return r;
}

std::optional<double> average_precision(std::vector<RankedFlag> flags, std::size_t num_gt) {
    if (num_gt == 0) return std::nullopt;
    std::stable_sort(flags.begin(), flags.end(), [](const RankedFlag& a, const RankedFlag& b) { return a.score > b.score; });
    std::vector<double> precision(flags.size());
    std::size_t tp = 0;
    for (std::size_t i = 0; i < flags.size(); ++i) {
        tp += flags[i].tp;
        precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
    }
    // Interpolate: precision at rank i becomes the max over ranks >= i.
    for (std::size_t i = flags.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
    double sum = 0;
    for (std::size_t i = 0; i < flags.size(); ++i) {
        if (flags[i].tp) sum += precision[i];
    }
    return std::min(sum / static_cast<double>(num_gt), 1.0);
}

nlohmann::json eval_result_to_json(const EvalResult& r) {
    return {{"mAP", r.mAP},
            {"per_instance", r.per_instance},
            {"buckets", r.buckets},
            {"counts",
             {{"tp", r.counts.tp},
              {"fp", r.counts.fp},
              {"fn", r.counts.fn},
              {"gt", r.counts.gt},
              {"detections", r.counts.detections}}}};
}

namespace {

struct BucketScore {
    std::map<std::string, std::vector<RankedFlag>> flags;
    std::map<std::string, std::size_t> num_gt;
};

double mean_ap(const BucketScore& s, const std::vector<std::string>& ids, std::map<std::string, double>* per_instance,
               bool* any) {
    double total = 0;
    std::size_t n = 0;
    for (const auto& id : ids) {
        auto it = s.num_gt.find(id);
        const std::size_t gt = it == s.num_gt.end() ? 0 : it->second;
        auto fit = s.flags.find(id);
        const auto ap = average_precision(fit == s.flags.end() ? std::vector<RankedFlag>{} : fit->second, gt);
        if (!ap) continue;
        if (per_instance) (*per_instance)[id] = *ap;
        total += *ap;
        ++n;
    }
    *any = n > 0;
    return n ? total / static_cast<double>(n) : 0.0;
}

}  // namespace

EvalResult evaluate_pairs(const std::vector<PairDetections>& pairs, const std::vector<SceneRecord>& scenes,
                          const std::vector<std::string>& instance_ids, const std::vector<SizeBucket>& buckets,
                          double iou_threshold) {
    const std::set<std::string> wanted(instance_ids.begin(), instance_ids.end());
    BucketScore overall;
    std::vector<BucketScore> per_bucket(buckets.size());
    EvalResult result;

    // Every scene contributes its GTs, whether or not a pair was run for it.
    for (const auto& scene : scenes) {
        for (const auto& a : scene.annotations) {
            if (!wanted.count(a.instance_id)) continue;
            ++overall.num_gt[a.instance_id];
            for (std::size_t b = 0; b < buckets.size(); ++b) {
                if (buckets[b].contains(a.box.width(), a.box.height())) ++per_bucket[b].num_gt[a.instance_id];
            }
        }
    }

    for (const auto& pair : pairs) {
        if (!wanted.count(pair.instance_id)) continue;
        if (pair.scene >= scenes.size()) throw ConfigError("evaluate_pairs: scene index out of range");
        const auto gts = scenes[pair.scene].boxes_of(pair.instance_id);
        const auto m = match_detections(pair.detections, gts, iou_threshold);
        auto& flags = overall.flags[pair.instance_id];
        for (std::size_t i = 0; i < m.order.size(); ++i) {
            const double score = pair.detections[m.order[i]].score;
            flags.push_back({score, m.tp[i]});
            ++result.counts.detections;
            if (m.tp[i]) {
                ++result.counts.tp;
            } else {
                ++result.counts.fp;
            }
            for (std::size_t b = 0; b < buckets.size(); ++b) {
                if (m.tp[i]) {
                    const auto& g = gts[static_cast<std::size_t>(m.matched_gt[i])];
                    if (!buckets[b].contains(g.width(), g.height())) continue;  // matched an excluded GT
                }
                per_bucket[b].flags[pair.instance_id].push_back({score, m.tp[i]});
            }
        }
    }
    for (const auto& [_, n] : overall.num_gt) result.counts.gt += n;
    result.counts.fn = result.counts.gt - result.counts.tp;

    bool any = false;
    result.mAP = mean_ap(overall, instance_ids, &result.per_instance, &any);
    for (std::size_t b = 0; b < buckets.size(); ++b) {
        const double v = mean_ap(per_bucket[b], instance_ids, nullptr, &any);
        if (any) result.buckets[buckets[b].name] = v;
    }
    return result;
}

EvalResult evaluate(const ModelF& model, const LoadedDataset& dataset, const TargetFeatureCache& cache,
                    const std::vector<SizeBucket>& buckets, const EvalOptions& options) {
    const auto& scenes = dataset.manifest.split(options.split);
    const auto& images = dataset.images(options.split);
    std::vector<std::string> ids = options.instance_ids;
    if (ids.empty()) ids = cache.ids();
    for (const auto& id : ids) cache.at(id);

    std::vector<std::vector<PairDetections>> slots(scenes.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t s = next++; s < scenes.size(); s = next++) {
            auto dets = detect_all(model, images[s], ids, cache, options.detect);
            for (const auto& id : ids) slots[s].push_back({id, s, std::move(dets[id])});
        }
    };
    const int threads = std::max(1, std::min<int>(options.threads, static_cast<int>(scenes.size())));
    if (threads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    std::vector<PairDetections> pairs;
    for (auto& s : slots) {
        for (auto& p : s) pairs.push_back(std::move(p));
    }
    return evaluate_pairs(pairs, scenes, ids, buckets, options.iou_threshold);
}

ClassifyResult classify(const ModelF& model, const Tensorf& crop, const std::vector<std::string>& candidate_ids,
                        const TargetFeatureCache& cache) {
    if (candidate_ids.empty()) throw ConfigError("classify: no candidate targets");
    NoGradGuard no_grad;
    const auto batch = as_batch(crop);
    const auto feats = extract_features(model, batch);
    ClassifyResult r;
    for (const auto& id : candidate_ids) {
        const auto& views = cache.at(id);
        const auto head = predict_head(model, embed(model, feats, std::span<const TargetFeatures<float>>(views)));
        const auto scores = foreground_scores(head);
        r.scores[id] = *std::max_element(scores.begin(), scores.end());
    }
    // std::map iterates ids lexicographically, so strict > keeps the smallest id on ties.
    double best = -1;
    for (const auto& [id, s] : r.scores) {
        if (s > best) {
            best = s;
            r.predicted_id = id;
        }
    }
    return r;
}

}  // namespace tdid
