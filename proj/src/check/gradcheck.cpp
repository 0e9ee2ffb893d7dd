#include "tdid/check/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "tdid/loss.hpp"
#include "tdid/model.hpp"
#include "tdid/rng.hpp"

namespace tdid::check {

double gradient_error(const ScalarFn& fn, std::vector<Tensord> inputs, double h, double floor) {
    for (auto& t : inputs) t = Tensord::from_data(t.shape(), std::vector<double>(t.data().begin(), t.data().end()), true);
    fn(inputs).backward();
    std::vector<std::vector<double>> analytic;
    for (const auto& t : inputs) {
        analytic.emplace_back(t.has_grad() ? std::vector<double>(t.grad().begin(), t.grad().end())
                                           : std::vector<double>(t.numel(), 0.0));
    }
    NoGradGuard no_grad;
    double worst = 0;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        auto data = inputs[i].mutable_data();
        for (std::size_t e = 0; e < data.size(); ++e) {
            const double orig = data[e];
            data[e] = orig + h;
            const double fp = fn(inputs).item();
            data[e] = orig - h;
            const double fm = fn(inputs).item();
            data[e] = orig;
            const double numeric = (fp - fm) / (2 * h);
            const double a = analytic[i][e];
            worst = std::max(worst, std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor}));
        }
    }
    return worst;
}

void GradcheckStats::record(const std::string& name, double err) {
    ++cases;
    if (err > max_error || worst_case.empty()) {
        max_error = std::max(max_error, err);
        worst_case = name;
    }
}

namespace {

Tensord random_tensor(SplitMix64& rng, Shape shape, double lo = -1, double hi = 1) {
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Tensord::from_data(std::move(shape), std::move(v));
}

// Distinct values at least 0.04 apart so max-style ops never switch argmax
// under a finite-difference step.
Tensord separated_tensor(SplitMix64& rng, Shape shape) {
    std::vector<double> v(shape_numel(shape));
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = -1.0 + 0.05 * static_cast<double>(i) + rng.uniform(0, 0.01);
    rng.shuffle(std::span<double>(v));
    return Tensord::from_data(std::move(shape), std::move(v));
}

// Values bounded away from zero, for relu.
Tensord kinkfree_tensor(SplitMix64& rng, Shape shape) {
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = (rng.uniform() < 0.5 ? -1 : 1) * rng.uniform(0.05, 1.0);
    return Tensord::from_data(std::move(shape), std::move(v));
}

std::size_t pick(SplitMix64& rng, std::size_t lo, std::size_t hi) {
    return static_cast<std::size_t>(rng.range(static_cast<long>(lo), static_cast<long>(hi)));
}

// Projects an op output onto fixed random weights so every output element matters.
Tensord project(const Tensord& y, const Tensord& weights) { return sum(mul(y, weights)); }

struct Projector {
    std::uint64_t seed;
    Tensord operator()(const Tensord& y) const {
        SplitMix64 rng(seed);
        return project(y, random_tensor(rng, y.shape()));
    }
};

}  // namespace

GradcheckStats gradcheck_ops(std::uint64_t seed, int cases_per_op) {
    GradcheckStats st;
    SplitMix64 rng(derive_seed(seed, 21));
    for (int c = 0; c < cases_per_op; ++c) {
        const Projector proj{rng.next()};
        const std::string tag = "#" + std::to_string(c);
        {
            const std::size_t b = pick(rng, 1, 2), ci = pick(rng, 1, 3), co = pick(rng, 1, 3);
            const std::size_t k = rng.uniform() < 0.5 ? 1 : 3;
            const int stride = static_cast<int>(pick(rng, 1, 2));
            const int padding = static_cast<int>(pick(rng, 0, k == 3 ? 1 : 0));
            const std::size_t h = pick(rng, k, 6), w = pick(rng, k, 6);
            std::vector<Tensord> in{random_tensor(rng, {b, ci, h, w}), random_tensor(rng, {co, ci, k, k}),
                                    random_tensor(rng, {co})};
            st.record("conv2d " + tag, gradient_error(
                                           [&](const std::vector<Tensord>& x) {
                                               return proj(conv2d(x[0], x[1], x[2], stride, padding));
                                           },
                                           in));
        }
        {
            const std::size_t b = pick(rng, 1, 2), ch = pick(rng, 1, 3), kh = pick(rng, 1, 3), kw = pick(rng, 1, 3);
            std::vector<Tensord> in{random_tensor(rng, {b, ch, pick(rng, 2, 5), pick(rng, 2, 5)}),
                                    random_tensor(rng, {ch, kh, kw})};
            st.record("depthwise_xcorr " + tag,
                      gradient_error([&](const std::vector<Tensord>& x) { return proj(depthwise_xcorr(x[0], x[1])); }, in));
        }
        {
            std::vector<Tensord> in{separated_tensor(rng, {pick(rng, 1, 2), pick(rng, 1, 3), pick(rng, 1, 4), pick(rng, 1, 4)})};
            st.record("global_max_pool " + tag,
                      gradient_error([&](const std::vector<Tensord>& x) { return proj(global_max_pool(x[0])); }, in));
        }
        {
            const std::size_t h = pick(rng, 2, 6), w = pick(rng, 2, 6);
            const std::size_t oh = pick(rng, 1, h), ow = pick(rng, 1, w);
            std::vector<Tensord> in{separated_tensor(rng, {1, pick(rng, 1, 2), h, w})};
            st.record("adaptive_max_pool " + tag, gradient_error(
                                                      [&](const std::vector<Tensord>& x) {
                                                          return proj(adaptive_max_pool(x[0], oh, ow));
                                                      },
                                                      in));
        }
        {
            const std::size_t b = pick(rng, 1, 2), ch = pick(rng, 1, 3);
            std::vector<Tensord> in{random_tensor(rng, {b, ch, pick(rng, 1, 4), pick(rng, 1, 4)}),
                                    random_tensor(rng, {b, ch, 1, 1})};
            st.record("broadcast_sub " + tag,
                      gradient_error([&](const std::vector<Tensord>& x) { return proj(broadcast_sub(x[0], x[1])); }, in));
        }
        {
            std::vector<Tensord> in{kinkfree_tensor(rng, {pick(rng, 1, 2), pick(rng, 1, 3), pick(rng, 1, 4), pick(rng, 1, 4)})};
            st.record("relu " + tag, gradient_error([&](const std::vector<Tensord>& x) { return proj(relu(x[0])); }, in));
        }
        {
            std::vector<Tensord> in{separated_tensor(rng, {pick(rng, 1, 2), pick(rng, 1, 2), pick(rng, 2, 5), pick(rng, 2, 5)})};
            st.record("maxpool2x2 " + tag,
                      gradient_error([&](const std::vector<Tensord>& x) { return proj(maxpool2x2(x[0])); }, in));
        }
        {
            const std::size_t b = pick(rng, 1, 2), h = pick(rng, 1, 3), w = pick(rng, 1, 3);
            std::vector<Tensord> in;
            for (std::size_t i = 0, n = pick(rng, 1, 3); i < n; ++i) in.push_back(random_tensor(rng, {b, pick(rng, 1, 3), h, w}));
            st.record("concat_channels " + tag,
                      gradient_error([&](const std::vector<Tensord>& x) { return proj(concat_channels(x)); }, in));
        }
        {
            std::vector<Tensord> in{random_tensor(rng, {pick(rng, 1, 4), pick(rng, 2, 4)}, -3, 3)};
            st.record("softmax_rows " + tag,
                      gradient_error([&](const std::vector<Tensord>& x) { return proj(softmax_rows(x[0])); }, in));
        }
        {
            const Shape s{pick(rng, 1, 3), pick(rng, 1, 4)};
            std::vector<Tensord> in{random_tensor(rng, s), random_tensor(rng, s)};
            st.record("add " + tag, gradient_error([&](const std::vector<Tensord>& x) { return proj(add(x[0], x[1])); }, in));
            st.record("mul " + tag, gradient_error([&](const std::vector<Tensord>& x) { return proj(mul(x[0], x[1])); }, in));
            st.record("sum " + tag, gradient_error([&](const std::vector<Tensord>& x) { return proj(sum(x[0])); }, in));
            st.record("reshape " + tag, gradient_error(
                                            [&](const std::vector<Tensord>& x) {
                                                return proj(reshape(x[0], {s[1], s[0]}));
                                            },
                                            in));
        }
        {
            // Loss on an arbitrary head with a hand-built assignment.
            const std::size_t a = pick(rng, 1, 3), hf = pick(rng, 1, 3), wf = pick(rng, 1, 3);
            const std::size_t n = a * hf * wf;
            AnchorAssignment asg;
            for (std::size_t i = 0; i < n; ++i) {
                const double u = rng.uniform();
                asg.labels.push_back(u < 0.4 ? AnchorLabel::Positive : u < 0.8 ? AnchorLabel::Negative : AnchorLabel::Ignore);
                asg.matched_gt.push_back(asg.labels.back() == AnchorLabel::Positive ? 0 : -1);
                asg.targets.push_back({rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2)});
            }
            if (asg.num_negative() == 0) {
                asg.labels[0] = AnchorLabel::Negative;
                asg.matched_gt[0] = -1;
            }
            LossConfig cfg;
            cfg.batch_size = pick(rng, 1, n + 1);
            cfg.reg_weight = rng.uniform(0.5, 2);
            const std::uint64_t sample_seed = rng.next();
            std::vector<Tensord> in{random_tensor(rng, {1, 2 * a, hf, wf}, -2, 2), random_tensor(rng, {1, 4 * a, hf, wf}, -2, 2)};
            st.record("detection_loss " + tag, gradient_error(
                                                   [&](const std::vector<Tensord>& x) {
                                                       return detection_loss(HeadOutput<double>{x[0], x[1], 1}, asg,
                                                                             sample_seed, cfg)
                                                           .total;
                                                   },
                                                   in));
        }
    }
    return st;
}

namespace {

std::vector<Tensor<double>*> parameter_slots(ModelD& m) {
    std::vector<Tensor<double>*> out;
    auto add_layer = [&](ConvLayer<double>& l) {
        out.push_back(&l.weight);
        out.push_back(&l.bias);
    };
    for (auto& l : m.backbone) add_layer(l);
    if (m.cc_conv) add_layer(*m.cc_conv);
    if (m.diff_conv) add_layer(*m.diff_conv);
    add_layer(m.fuse_conv);
    add_layer(m.cls_head);
    add_layer(m.reg_head);
    return out;
}

}  // namespace

// Smaller than the per-op step: with hundreds of relu/max units in the
// network some unit almost always sits within 1e-5 of its kink.
constexpr double kEndToEndStep = 1e-7;

GradcheckStats gradcheck_end_to_end(std::uint64_t seed, int cases) {
    GradcheckStats st;
    SplitMix64 rng(derive_seed(seed, 22));
    const auto combos = all_embed_combinations();
    for (int c = 0; c < cases; ++c) {
        ModelConfig cfg;
        cfg.backbone_channels = {4, 8};
        cfg.backbone_stride = 2;
        cfg.feature_dim = 8;
        cfg.embed_features = combos[static_cast<std::size_t>(c) % combos.size()];
        cfg.num_target_views = static_cast<int>(pick(rng, 1, 2));
        cfg.anchor_scales = {6, 10};
        cfg.anchor_ratios = {1, 2};
        cfg.cc_kernel = c % 2 ? 1 : 2;
        ModelD base = ModelD::init(cfg, rng.next());

        const Tensord scene = random_tensor(rng, {1, 3, 16, 16}, 0, 1);
        std::vector<Tensord> targets;
        for (int v = 0; v < cfg.num_target_views; ++v) targets.push_back(random_tensor(rng, {1, 3, 8, 8}, 0, 1));
        const auto anchors = anchors_for(cfg, 16, 16);
        const Box gt = Box::from_center(rng.uniform(4, 12), rng.uniform(4, 12), rng.uniform(5, 10), rng.uniform(5, 10));
        const auto asg = assign_anchors(anchors, {gt});
        const std::uint64_t sample_seed = rng.next();

        // Zero-initialized biases put units of all-zero inputs exactly on the relu kink.
        std::vector<Tensord> in;
        for (const auto& [name, p] : base.named_parameters()) {
            in.push_back(name.ends_with(".bias") ? random_tensor(rng, p.shape(), -0.2, 0.2) : p.detach());
        }
        const double err = gradient_error(
            [&](const std::vector<Tensord>& x) {
                ModelD m = base;
                auto slots = parameter_slots(m);
                for (std::size_t i = 0; i < slots.size(); ++i) *slots[i] = x[i];
                return detection_loss(forward(m, scene, targets), asg, sample_seed).total;
            },
            in, kEndToEndStep);
        st.record("end_to_end " + cfg.embed_features.label() + " #" + std::to_string(c), err);
    }
    return st;
}

}  // namespace tdid::check
