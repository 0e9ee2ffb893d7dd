#pragma once

#include <cstdint>

#include "tdid/anchors.hpp"
#include "tdid/model.hpp"

namespace tdid {

double smooth_l1(double x);
double smooth_l1_grad(double x);

struct LossConfig {
    std::size_t batch_size = 256;       // anchors sampled per image
    double positive_fraction = 0.5;     // cap on positives within the batch
    double reg_weight = 1.0;            // lambda between cls and reg terms
};

struct LossBreakdown {
    double cls_loss = 0;
    double reg_loss = 0;
    double total = 0;
    std::size_t num_pos = 0;
    std::size_t num_neg = 0;
};

template <typename T>
struct DetectionLoss {
    Tensor<T> total;  // [1], differentiable w.r.t. the head outputs
    LossBreakdown breakdown;
};

struct AnchorSample {
    std::vector<std::size_t> positives;
    std::vector<std::size_t> negatives;
};

// Up to batch_size * positive_fraction positives, the remainder negatives,
// drawn without replacement from a SplitMix64 stream seeded by sample_seed.
AnchorSample sample_anchors(const AnchorAssignment& assignment, std::uint64_t sample_seed, const LossConfig& config);

// Two-class cross-entropy averaged over sampled anchors plus smooth-L1 over
// the deltas of sampled positives, normalized by max(1, num_pos).
template <typename T>
DetectionLoss<T> detection_loss(const HeadOutput<T>& head, const AnchorAssignment& assignment,
                                std::uint64_t sample_seed, const LossConfig& config = {});

}  // namespace tdid
