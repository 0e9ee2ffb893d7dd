#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"

#include "tdid/dataset.hpp"
#include "tdid/error.hpp"
#include "tdid/loss.hpp"
#include "tdid/model.hpp"

namespace tdid {

struct TrainParams {
    double lr = 0.001;
    double momentum = 0.9;
    double weight_decay = 0.0005;
    int iterations = 2000;
    int lr_decay_step = -1;  // -1: 70% of iterations
    double lr_decay_factor = 10.0;
    int warmup_iterations = 0;  // linear ramp from lr/warmup to lr
    int batch_size = 1;     // (scene, query) pairs per step
    bool full_batch = false;  // every pair of the train split each step, anchors resampled per step
    double presence_rate = 0.5;
    LossConfig loss{};
    int log_every = 50;
    std::uint64_t seed = 0;
    std::vector<std::string> holdout_ids;

    int decay_step() const { return lr_decay_step >= 0 ? lr_decay_step : iterations * 7 / 10; }
    double lr_at(int iteration) const;
};

struct RunConfig {
    ModelConfig model{};
    TrainParams train{};
};

nlohmann::json run_config_to_json(const RunConfig& c);
// Missing keys keep their defaults; unknown keys are rejected.
RunConfig run_config_from_json(const nlohmann::json& j);

class TrainingDivergedError : public Error {
public:
    TrainingDivergedError(const std::string& what, nlohmann::json diagnostics)
        : Error(what), diagnostics_(std::move(diagnostics)) {}
    const nlohmann::json& diagnostics() const { return diagnostics_; }

private:
    nlohmann::json diagnostics_;
};

struct TrainResult {
    ModelF model;
    std::vector<LossBreakdown> history;  // mean over the step's pairs, one per iteration
};

using TrainLogger = std::function<void(const nlohmann::json&)>;
// Called after every optimizer step with the number of completed iterations;
// returning true ends training early.
using StepHook = std::function<bool(int, const ModelF&)>;

// Train split only; holdout ids are never used as queries.
TrainResult train_model(const LoadedDataset& dataset, const RunConfig& config, const TrainLogger& log = {},
                        const StepHook& hook = {});

}  // namespace tdid
