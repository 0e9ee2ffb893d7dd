#include "tdid/loss.hpp"

#include <algorithm>
#include <cmath>

#include "tdid/error.hpp"
#include "tdid/rng.hpp"

namespace tdid {

double smooth_l1(double x) {
    const double a = std::abs(x);
    return a < 1.0 ? 0.5 * x * x : a - 0.5;
}

double smooth_l1_grad(double x) {
    if (x >= 1.0) return 1.0;
    if (x <= -1.0) return -1.0;
    return x;
}

AnchorSample sample_anchors(const AnchorAssignment& assignment, std::uint64_t sample_seed, const LossConfig& config) {
    AnchorSample s;
    for (std::size_t a = 0; a < assignment.labels.size(); ++a) {
        if (assignment.labels[a] == AnchorLabel::Positive) s.positives.push_back(a);
        if (assignment.labels[a] == AnchorLabel::Negative) s.negatives.push_back(a);
    }
    SplitMix64 rng(sample_seed);
    const auto max_pos = static_cast<std::size_t>(static_cast<double>(config.batch_size) * config.positive_fraction);
    auto take = [&](std::vector<std::size_t>& pool, std::size_t n) {
        n = std::min(n, pool.size());
        // Partial Fisher-Yates from the front.
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t j = i + static_cast<std::size_t>(rng.below(pool.size() - i));
            std::swap(pool[i], pool[j]);
        }
        pool.resize(n);
    };
    take(s.positives, max_pos);
    take(s.negatives, config.batch_size - s.positives.size());
    return s;
}

template <typename T>
DetectionLoss<T> detection_loss(const HeadOutput<T>& head, const AnchorAssignment& assignment,
                                std::uint64_t sample_seed, const LossConfig& config) {
    const auto& cls = head.cls_logits;
    const auto& reg = head.reg_deltas;
    if (cls.rank() != 4 || reg.rank() != 4 || cls.dim(0) != 1 || reg.dim(0) != 1) {
        throw InvalidShapeError("detection_loss: head outputs must be [1,C,Hf,Wf]");
    }
    const std::size_t hf = cls.dim(2), wf = cls.dim(3), cells = hf * wf;
    const std::size_t a_per_cell = cls.dim(1) / 2;
    if (cls.dim(1) != 2 * a_per_cell || reg.dim(1) != 4 * a_per_cell || reg.dim(2) != hf || reg.dim(3) != wf) {
        throw InvalidShapeError("detection_loss: inconsistent head channel counts");
    }
    if (assignment.labels.size() != cells * a_per_cell) {
        throw InvalidShapeError("detection_loss: assignment covers " + std::to_string(assignment.labels.size()) +
                                " anchors, head has " + std::to_string(cells * a_per_cell));
    }

    const AnchorSample sample = sample_anchors(assignment, sample_seed, config);
    const std::size_t n_sampled = sample.positives.size() + sample.negatives.size();
    if (n_sampled == 0) throw Error("detection_loss: no anchors sampled");

    // Anchor index = cell * A + k; cls channel 2k + c and reg channel 4k + d live at plane offset `cell`.
    auto cls_idx = [&](std::size_t anchor, std::size_t c) {
        return (2 * (anchor % a_per_cell) + c) * cells + anchor / a_per_cell;
    };
    auto reg_idx = [&](std::size_t anchor, std::size_t d) {
        return (4 * (anchor % a_per_cell) + d) * cells + anchor / a_per_cell;
    };

    const auto cd = cls.data();
    const auto rd = reg.data();
    std::vector<T> dcls(cls.numel(), T(0));
    std::vector<T> dreg(reg.numel(), T(0));
    double ce = 0;
    auto add_ce = [&](std::size_t a, std::size_t label) {
        const double l0 = cd[cls_idx(a, 0)], l1 = cd[cls_idx(a, 1)];
        const double m = std::max(l0, l1);
        const double lse = m + std::log(std::exp(l0 - m) + std::exp(l1 - m));
        ce += lse - (label ? l1 : l0);
        const double p1 = std::exp(l1 - lse);
        const double p0 = std::exp(l0 - lse);
        dcls[cls_idx(a, 0)] = static_cast<T>((p0 - (label == 0)) / static_cast<double>(n_sampled));
        dcls[cls_idx(a, 1)] = static_cast<T>((p1 - (label == 1)) / static_cast<double>(n_sampled));
    };
    for (auto a : sample.positives) add_ce(a, 1);
    for (auto a : sample.negatives) add_ce(a, 0);

    double reg_sum = 0;
    const double norm = static_cast<double>(std::max<std::size_t>(1, sample.positives.size()));
    for (auto a : sample.positives) {
        const BoxDeltas& t = assignment.targets[a];
        const double target[4] = {t.tx, t.ty, t.tw, t.th};
        for (std::size_t d = 0; d < 4; ++d) {
            const double x = static_cast<double>(rd[reg_idx(a, d)]) - target[d];
            reg_sum += smooth_l1(x);
            dreg[reg_idx(a, d)] = static_cast<T>(config.reg_weight * smooth_l1_grad(x) / norm);
        }
    }

    LossBreakdown b;
    b.cls_loss = ce / static_cast<double>(n_sampled);
    b.reg_loss = reg_sum / norm;
    b.total = b.cls_loss + config.reg_weight * b.reg_loss;
    b.num_pos = sample.positives.size();
    b.num_neg = sample.negatives.size();

    auto shared_dcls = std::make_shared<std::vector<T>>(std::move(dcls));
    auto shared_dreg = std::make_shared<std::vector<T>>(std::move(dreg));
    Tensor<T> total = make_op_output<T>({1}, {static_cast<T>(b.total)}, {cls, reg},
                                        [shared_dcls, shared_dreg](detail::Node<T>& node) {
                                            const T g = node.grad[0];
                                            std::vector<T> tmp(shared_dcls->size());
                                            for (std::size_t i = 0; i < tmp.size(); ++i) tmp[i] = g * (*shared_dcls)[i];
                                            accumulate_grad<T>(*node.parents[0], tmp);
                                            tmp.resize(shared_dreg->size());
                                            for (std::size_t i = 0; i < tmp.size(); ++i) tmp[i] = g * (*shared_dreg)[i];
                                            accumulate_grad<T>(*node.parents[1], tmp);
                                        });
    return {total, b};
}

template DetectionLoss<float> detection_loss<float>(const HeadOutput<float>&, const AnchorAssignment&, std::uint64_t,
                                                    const LossConfig&);
template DetectionLoss<double> detection_loss<double>(const HeadOutput<double>&, const AnchorAssignment&,
                                                      std::uint64_t, const LossConfig&);

}  // namespace tdid
