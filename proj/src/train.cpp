#include "tdid/train.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "tdid/postprocess.hpp"
#include "tdid/rng.hpp"

namespace tdid {

double TrainParams::lr_at(int iteration) const {
    double v = iteration >= decay_step() ? lr / lr_decay_factor : lr;
    if (iteration < warmup_iterations) v *= static_cast<double>(iteration + 1) / warmup_iterations;
    return v;
}

nlohmann::json run_config_to_json(const RunConfig& c) {
    const auto& t = c.train;
    return {{"model", config_to_json(c.model)},
            {"train",
             {{"lr", t.lr},
              {"momentum", t.momentum},
              {"weight_decay", t.weight_decay},
              {"iterations", t.iterations},
              {"lr_decay_step", t.decay_step()},
              {"lr_decay_factor", t.lr_decay_factor},
              {"warmup_iterations", t.warmup_iterations},
              {"batch_size", t.batch_size},
              {"full_batch", t.full_batch},
              {"presence_rate", t.presence_rate},
              {"anchor_batch", t.loss.batch_size},
              {"positive_fraction", t.loss.positive_fraction},
              {"reg_weight", t.loss.reg_weight},
              {"log_every", t.log_every},
              {"seed", t.seed},
              {"holdout_ids", t.holdout_ids}}}};
}

RunConfig run_config_from_json(const nlohmann::json& j) {
    RunConfig c;
    if (!j.is_object()) throw ConfigError("run config must be a JSON object");
    for (const auto& [key, _] : j.items()) {
        if (key != "model" && key != "train") throw ConfigError("unknown run config section '" + key + "'");
    }
    if (j.contains("model")) c.model = config_from_json(j.at("model"));
    if (j.contains("train")) {
        const auto& t = j.at("train");
        static const std::set<std::string> known = {"lr",           "momentum",        "weight_decay",  "iterations",
                                                    "lr_decay_step", "lr_decay_factor", "batch_size",    "full_batch",
                                                    "warmup_iterations",
                                                    "presence_rate", "anchor_batch",    "positive_fraction",
                                                    "reg_weight",   "log_every",       "seed",          "holdout_ids"};
        for (const auto& [key, _] : t.items()) {
            if (!known.count(key)) throw ConfigError("unknown train config key '" + key + "'");
        }
        try {
            auto get = [&](const char* key, auto& field) {
                if (t.contains(key)) field = t.at(key).get<std::decay_t<decltype(field)>>();
            };
            get("lr", c.train.lr);
            get("momentum", c.train.momentum);
            get("weight_decay", c.train.weight_decay);
            get("iterations", c.train.iterations);
            get("lr_decay_step", c.train.lr_decay_step);
            get("lr_decay_factor", c.train.lr_decay_factor);
            get("warmup_iterations", c.train.warmup_iterations);
            get("batch_size", c.train.batch_size);
            get("full_batch", c.train.full_batch);
            get("presence_rate", c.train.presence_rate);
            get("anchor_batch", c.train.loss.batch_size);
            get("positive_fraction", c.train.loss.positive_fraction);
            get("reg_weight", c.train.loss.reg_weight);
            get("log_every", c.train.log_every);
            get("seed", c.train.seed);
            get("holdout_ids", c.train.holdout_ids);
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(std::string("train config: ") + e.what());
        }
    }
    if (c.train.iterations < 0 || c.train.batch_size < 1 || !(c.train.lr > 0) || c.train.lr_decay_factor <= 0 ||
        c.train.warmup_iterations < 0) {
        throw ConfigError(
            "train config: iterations >= 0, batch_size >= 1, lr > 0, lr_decay_factor > 0 and warmup_iterations >= 0 "
            "required");
    }
    return c;
}

namespace {

struct Pair {
    std::size_t scene;
    std::string query;
    std::uint64_t sample_seed;
};

}  // namespace

TrainResult train_model(const LoadedDataset& dataset, const RunConfig& config, const TrainLogger& log,
                        const StepHook& hook) {
    const auto& params = config.train;
    const auto& mcfg = config.model;
    mcfg.validate();
    const auto& scenes = dataset.manifest.train;
    if (scenes.empty()) throw ConfigError("training split is empty");

    const std::set<std::string> holdout(params.holdout_ids.begin(), params.holdout_ids.end());
    std::vector<std::string> pool;
    for (const auto& [id, images] : dataset.target_images) {
        if (holdout.count(id)) continue;
        if (images.size() != static_cast<std::size_t>(mcfg.num_target_views)) {
            throw ConfigError("target '" + id + "' has " + std::to_string(images.size()) + " views, model expects " +
                              std::to_string(mcfg.num_target_views));
        }
        pool.push_back(id);
    }
    if (pool.empty()) throw ConfigError("no training instances left after holdout");

    TrainResult result{ModelF::init(mcfg, derive_seed(params.seed, 1)), {}};
    ModelF& model = result.model;
    SgdOptimizer<float> opt(model.parameters(), {params.lr, params.momentum, params.weight_decay});
    const auto model_params = model.parameters();
    SplitMix64 rng(derive_seed(params.seed, 2));

    std::map<std::pair<std::size_t, std::string>, AnchorAssignment> assignments;
    auto assignment_for = [&](std::size_t s, const std::string& id) -> const AnchorAssignment& {
        auto key = std::make_pair(s, id);
        auto it = assignments.find(key);
        if (it != assignments.end()) return it->second;
        const auto& img = dataset.train_images[s];
        const auto anchors = anchors_for(mcfg, img.dim(1), img.dim(2));
        return assignments.emplace(key, assign_anchors(anchors, scenes[s].boxes_of(id))).first->second;
    };

    auto sample_pair = [&]() -> Pair {
        const auto s = static_cast<std::size_t>(rng.below(scenes.size()));
        std::vector<std::string> present, absent;
        std::set<std::string> in_scene;
        for (const auto& a : scenes[s].annotations) in_scene.insert(a.instance_id);
        for (const auto& id : pool) (in_scene.count(id) ? present : absent).push_back(id);
        const bool want_present = rng.uniform() < params.presence_rate;
        const auto& from = (want_present && !present.empty()) || absent.empty() ? present : absent;
        return {s, from[static_cast<std::size_t>(rng.below(from.size()))], rng.next()};
    };

    std::vector<Pair> fixed_pairs;
    if (params.full_batch) {
        for (std::size_t s = 0; s < scenes.size(); ++s) {
            for (const auto& id : pool) fixed_pairs.push_back({s, id, derive_seed(params.seed, 1000 + fixed_pairs.size())});
        }
    }

    LossBreakdown window{};
    int window_n = 0;
    for (int it = 0; it < params.iterations; ++it) {
        const double lr = params.lr_at(it);
        opt.set_lr(lr);
        std::vector<Pair> pairs = fixed_pairs;
        for (auto& p : pairs) p.sample_seed = derive_seed(p.sample_seed, static_cast<std::uint64_t>(it));
        if (!params.full_batch) {
            for (int b = 0; b < params.batch_size; ++b) pairs.push_back(sample_pair());
        }
        LossBreakdown step{};
        for (const auto& p : pairs) {
            const auto scene = as_batch(dataset.train_images[p.scene]);
            std::vector<Tensorf> targets;
            for (const auto& t : dataset.target_images.at(p.query)) targets.push_back(as_batch(t));
            const auto head = forward(model, scene, targets);
            const auto loss = detection_loss(head, assignment_for(p.scene, p.query), p.sample_seed, params.loss);
            if (!std::isfinite(loss.breakdown.total)) {
                throw TrainingDivergedError(
                    "training diverged at iteration " + std::to_string(it),
                    {{"iteration", it},
                     {"scene", scenes[p.scene].image},
                     {"query", p.query},
                     {"lr", lr},
                     {"cls_loss", loss.breakdown.cls_loss},
                     {"reg_loss", loss.breakdown.reg_loss},
                     {"num_pos", loss.breakdown.num_pos},
                     {"num_neg", loss.breakdown.num_neg}});
            }
            loss.total.backward();
            step.cls_loss += loss.breakdown.cls_loss;
            step.reg_loss += loss.breakdown.reg_loss;
            step.total += loss.breakdown.total;
            step.num_pos += loss.breakdown.num_pos;
            step.num_neg += loss.breakdown.num_neg;
        }
        const double inv = 1.0 / static_cast<double>(pairs.size());
        if (pairs.size() > 1) {
            for (auto p : model_params) {
                for (auto& g : p.mutable_grad()) g = static_cast<float>(g * inv);
            }
        }
        opt.step();
        step.cls_loss *= inv;
        step.reg_loss *= inv;
        step.total *= inv;
        result.history.push_back(step);

        window.cls_loss += step.cls_loss;
        window.reg_loss += step.reg_loss;
        window.total += step.total;
        ++window_n;
        if (log && params.log_every > 0 && ((it + 1) % params.log_every == 0 || it + 1 == params.iterations)) {
            log({{"iter", it + 1},
                 {"lr", lr},
                 {"loss", window.total / window_n},
                 {"cls_loss", window.cls_loss / window_n},
                 {"reg_loss", window.reg_loss / window_n}});
            window = {};
            window_n = 0;
        }
        if (hook && hook(it + 1, model)) break;
    }
    return result;
}

}  // namespace tdid
