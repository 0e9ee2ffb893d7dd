#include "doctest.h"

#include <cmath>
#include <limits>
#include <set>

#include "tdid/anchors.hpp"
#include "tdid/check/oracles.hpp"
#include "tdid/error.hpp"
#include "tdid/loss.hpp"
#include "tdid/model.hpp"
#include "tdid/rng.hpp"

using namespace tdid;

TEST_CASE("generate_anchors layout") {
    const auto a = generate_anchors(2, 2, 4, {4}, {1});
    REQUIRE(a.size() == 4);
    const Box want[] = {{0, 0, 4, 4}, {4, 0, 8, 4}, {0, 4, 4, 8}, {4, 4, 8, 8}};
    for (int i = 0; i < 4; ++i) CHECK(a.boxes[i] == want[i]);

    const auto r = generate_anchors(1, 1, 8, {8}, {4});
    CHECK(r.boxes[0].width() == doctest::Approx(16));
    CHECK(r.boxes[0].height() == doctest::Approx(4));

    SplitMix64 rng(2);
    for (int i = 0; i < 20; ++i) {
        const auto h = static_cast<std::size_t>(rng.range(1, 9)), w = static_cast<std::size_t>(rng.range(1, 9));
        const auto s = static_cast<std::size_t>(rng.range(1, 3)), q = static_cast<std::size_t>(rng.range(1, 3));
        CHECK(generate_anchors(h, w, 8, std::vector<double>(s, 16), std::vector<double>(q, 1)).size() == h * w * s * q);
    }

    SUBCASE("scale-major ordering within a cell") {
        const auto g = generate_anchors(1, 2, 8, {8, 16}, {0.5, 2});
        REQUIRE(g.size() == 8);
        CHECK(g.boxes[1].width() == doctest::Approx(8 * std::sqrt(2.0)));
        CHECK(g.boxes[2].width() == doctest::Approx(16 * std::sqrt(0.5)));
        CHECK(g.boxes[4].cx() == doctest::Approx(12));
    }
    CHECK_THROWS_AS(generate_anchors(0, 2, 8, {8}, {1}), ConfigError);
}

TEST_CASE("iou examples and properties") {
    const Box a{0, 0, 10, 10};
    CHECK(iou(a, a) == 1.0);
    CHECK(iou(a, {20, 20, 30, 30}) == 0.0);
    CHECK(iou(a, {5, 0, 15, 10}) == doctest::Approx(1.0 / 3.0));
    CHECK(iou(a, {10, 0, 20, 10}) == 0.0);
    SplitMix64 rng(3);
    for (int i = 0; i < 200; ++i) {
        const auto b = Box::from_center(rng.uniform(0, 50), rng.uniform(0, 50), rng.uniform(1, 30), rng.uniform(1, 30));
        const auto c = Box::from_center(rng.uniform(0, 50), rng.uniform(0, 50), rng.uniform(1, 30), rng.uniform(1, 30));
        const double v = iou(b, c);
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
        CHECK(v == iou(c, b));
    }
}

TEST_CASE("encode and decode") {
    const Box anchor = Box::from_center(10, 10, 10, 10);
    const auto z = encode_box(anchor, anchor);
    CHECK(z.tx == 0);
    CHECK(z.ty == 0);
    CHECK(z.tw == 0);
    CHECK(z.th == 0);
    const auto d = encode_box(anchor, Box::from_center(15, 10, 20, 10));
    CHECK(d.tx == doctest::Approx(0.5));
    CHECK(d.ty == doctest::Approx(0));
    CHECK(d.tw == doctest::Approx(std::log(2.0)));
    CHECK(d.th == doctest::Approx(0));

    SUBCASE("round trip on random pairs") {
        SplitMix64 rng(4);
        double worst = 0;
        for (int i = 0; i < 10000; ++i) {
            const auto an = Box::from_center(rng.uniform(-20, 150), rng.uniform(-20, 150), rng.uniform(4, 90), rng.uniform(4, 90));
            const auto gt = Box::from_center(rng.uniform(0, 128), rng.uniform(0, 128), rng.uniform(2, 80), rng.uniform(2, 80));
            const auto back = apply_deltas(an, encode_box(an, gt));
            worst = std::max({worst, std::abs(back.x1 - gt.x1), std::abs(back.y1 - gt.y1), std::abs(back.x2 - gt.x2),
                              std::abs(back.y2 - gt.y2)});
        }
        CHECK(worst < 1e-5);
    }
    SUBCASE("decode clips") {
        const Box in{2, 2, 12, 12};
        const auto same = decode_box(in, {}, 100, 100);
        CHECK(same.valid);
        CHECK(same.box == in);
        const auto edge = decode_box(Box{90, 10, 100, 20}, {5, 0, 0, 0}, 100, 100);
        CHECK(edge.box.x2 <= 100);
        CHECK_FALSE(edge.valid);
        const auto part = decode_box(Box{90, 10, 110, 20}, {}, 100, 100);
        CHECK(part.valid);
        CHECK(part.box.x2 == 100);
        const auto huge = decode_box(in, {0, 0, 1e6, 1e6}, 5000, 5000);
        CHECK(std::isfinite(huge.box.x2));
        CHECK_THROWS_AS(decode_box(in, {std::numeric_limits<double>::quiet_NaN(), 0, 0, 0}, 100, 100), InvalidDeltaError);
        CHECK_THROWS_AS(decode_box(in, {0, 0, std::numeric_limits<double>::infinity(), 0}, 100, 100), InvalidDeltaError);
    }
}

TEST_CASE("assign_anchors rules") {
    const auto grid = generate_anchors(4, 4, 8, {16}, {1});
    SUBCASE("no ground truth") {
        const auto a = assign_anchors(grid, {});
        CHECK(a.num_positive() == 0);
        CHECK(a.num_negative() == grid.size());
    }
    SUBCASE("exact anchor match") {
        const Box g = grid.boxes[5];
        const auto a = assign_anchors(grid, {g});
        CHECK(a.labels[5] == AnchorLabel::Positive);
        CHECK(a.matched_gt[5] == 0);
        CHECK(a.targets[5].tx == 0);
        CHECK(a.targets[5].tw == 0);
    }
    SUBCASE("fallback makes the best anchor positive") {
        // IoU 0.5 with anchors 1 and 5, below the positive threshold; lowest index wins.
        const Box g{4, 4, 20, 12};
        CHECK(iou(grid.boxes[1], g) == doctest::Approx(0.5));
        CHECK(iou(grid.boxes[5], g) == doctest::Approx(0.5));
        const auto a = assign_anchors(grid, {g});
        CHECK(a.num_positive() == 1);
        CHECK(a.labels[1] == AnchorLabel::Positive);
        CHECK(a.labels[5] == AnchorLabel::Ignore);
    }
    SUBCASE("ignore band") {
        const Box g = Box::from_center(12, 12, 16, 16);
        const auto a = assign_anchors(grid, {g});
        for (std::size_t i = 0; i < grid.size(); ++i) {
            const double v = iou(grid.boxes[i], g);
            if (a.labels[i] == AnchorLabel::Ignore) {
                CHECK(v >= 0.3);
                CHECK(v <= 0.6);
            }
            if (a.labels[i] == AnchorLabel::Negative) CHECK(v < 0.3);
        }
    }
    SUBCASE("50 random anchors and 3 GTs match the double-loop oracle") {
        const auto st = check::compare_assignment(77, 1000);
        INFO(st.first_mismatch);
        CHECK(st.ok());
    }
}

TEST_CASE("smooth_l1") {
    CHECK(smooth_l1(0) == 0);
    CHECK(smooth_l1(0.5) == 0.125);
    CHECK(smooth_l1(2) == 1.5);
    CHECK(smooth_l1(-1) == 0.5);
    const double e = 1e-7;
    CHECK(std::abs(smooth_l1(1 + e) - smooth_l1(1 - e)) < 1e-6);
    CHECK(std::abs(smooth_l1_grad(1 + e) - smooth_l1_grad(1 - e)) < 1e-6);
    CHECK((smooth_l1(1 + e) - smooth_l1(1 - e)) / (2 * e) == doctest::Approx(1.0).epsilon(1e-6));
}

namespace {

AnchorAssignment labels_only(const std::vector<AnchorLabel>& labels) {
    AnchorAssignment a;
    a.labels = labels;
    for (auto l : labels) {
        a.matched_gt.push_back(l == AnchorLabel::Positive ? 0 : -1);
        a.targets.push_back({});
    }
    return a;
}

}  // namespace

TEST_CASE("anchor sampling") {
    std::vector<AnchorLabel> labels(2000, AnchorLabel::Negative);
    for (int i = 0; i < 300; ++i) labels[i * 5] = AnchorLabel::Positive;
    for (int i = 0; i < 100; ++i) labels[i * 5 + 1] = AnchorLabel::Ignore;
    const auto a = labels_only(labels);
    const auto s = sample_anchors(a, 9, {});
    CHECK(s.positives.size() == 128);
    CHECK(s.negatives.size() == 128);
    std::set<std::size_t> seen;
    for (auto i : s.positives) {
        CHECK(a.labels[i] == AnchorLabel::Positive);
        seen.insert(i);
    }
    for (auto i : s.negatives) {
        CHECK(a.labels[i] == AnchorLabel::Negative);
        seen.insert(i);
    }
    CHECK(seen.size() == 256);
    const auto again = sample_anchors(a, 9, {});
    CHECK(again.positives == s.positives);
    CHECK(again.negatives == s.negatives);
    CHECK(sample_anchors(a, 10, {}).positives != s.positives);

    std::vector<AnchorLabel> few(400, AnchorLabel::Negative);
    few[3] = AnchorLabel::Positive;
    const auto f = sample_anchors(labels_only(few), 1, {});
    CHECK(f.positives.size() == 1);
    CHECK(f.negatives.size() == 255);
}

TEST_CASE("detection loss matches a scalar recomputation") {
    // One anchor per cell, two cells. Anchor 0 positive, anchor 1 negative.
    AnchorAssignment a = labels_only({AnchorLabel::Positive, AnchorLabel::Negative});
    a.targets[0] = {0.2, 0, 0, 0.3};
    const auto cls = Tensord::from_data({1, 2, 1, 2}, {0, 2, 1, 0}, true);
    const auto reg = Tensord::from_data({1, 4, 1, 2}, {0.5, 0, -2, 0, 0.1, 0, 0, 0}, true);
    const auto loss = detection_loss(HeadOutput<double>{cls, reg, 1}, a, 0);
    // CE: log(1+e^-1) and log(1+e^-2), averaged.
    const double ce = 0.5 * (std::log1p(std::exp(-1.0)) + std::log1p(std::exp(-2.0)));
    // Smooth L1 on residuals (0.3, -2, 0.1, -0.3).
    const double reg_loss = 0.045 + 1.5 + 0.005 + 0.045;
    CHECK(loss.breakdown.cls_loss == doctest::Approx(ce).epsilon(1e-12));
    CHECK(loss.breakdown.reg_loss == doctest::Approx(reg_loss).epsilon(1e-12));
    CHECK(loss.breakdown.total == doctest::Approx(ce + reg_loss).epsilon(1e-12));
    CHECK(loss.total.item() == doctest::Approx(ce + reg_loss).epsilon(1e-12));
    CHECK(loss.breakdown.num_pos == 1);
    CHECK(loss.breakdown.num_neg == 1);

    loss.total.backward();
    // d(mean CE)/d(fg logit of anchor 0) = (p1 - 1) / 2.
    const double p1 = 1.0 / (1.0 + std::exp(-1.0));
    CHECK(cls.grad()[2] == doctest::Approx((p1 - 1) / 2).epsilon(1e-12));
    CHECK(reg.grad()[2] == doctest::Approx(-1.0));
    CHECK(reg.grad()[1] == 0.0);
}

TEST_CASE("detection loss limits") {
    AnchorAssignment a = labels_only({AnchorLabel::Positive, AnchorLabel::Negative, AnchorLabel::Ignore});
    const auto cls = Tensord::from_data({1, 2, 1, 3}, {0, 10, 0, 10, 0, 0});
    const auto reg = Tensord::zeros({1, 4, 1, 3});
    const auto l = detection_loss(HeadOutput<double>{cls, reg, 1}, a, 0);
    CHECK(l.breakdown.cls_loss < 1e-4);
    CHECK(l.breakdown.reg_loss == 0.0);

    const auto neg = labels_only({AnchorLabel::Negative, AnchorLabel::Negative, AnchorLabel::Negative});
    const auto r2 = Tensord::from_data({1, 4, 1, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12});
    const auto l2 = detection_loss(HeadOutput<double>{cls, r2, 1}, neg, 0);
    CHECK(l2.breakdown.reg_loss == 0.0);
    CHECK(l2.breakdown.num_pos == 0);

    CHECK_THROWS_AS(detection_loss(HeadOutput<double>{cls, reg, 1}, labels_only({AnchorLabel::Negative}), 0),
                    InvalidShapeError);
}

TEST_CASE("detection loss is deterministic and decreases under SGD on one example") {
    ModelConfig cfg;
    cfg.backbone_channels = {8, 16, 16};
    cfg.backbone_stride = 4;
    cfg.feature_dim = 16;
    auto m = ModelF::init(cfg, 1);
    SplitMix64 rng(2);
    auto img = [&](std::size_t h, std::size_t w) {
        std::vector<float> v(3 * h * w);
        for (auto& x : v) x = static_cast<float>(rng.uniform());
        return Tensorf::from_data({1, 3, h, w}, v);
    };
    const auto scene = img(32, 32);
    const std::vector<Tensorf> targets{img(16, 16), img(16, 16)};
    const auto asg = assign_anchors(anchors_for(cfg, 32, 32), {Box{4, 6, 24, 22}});
    SgdOptimizer<float> opt(m.parameters(), {0.01, 0.9, 0.0005});
    double prev = 1e9;
    const double first = detection_loss(forward(m, scene, targets), asg, 5).breakdown.total;
    CHECK(first == detection_loss(forward(m, scene, targets), asg, 5).breakdown.total);
    for (int step = 0; step < 50; ++step) {
        const auto l = detection_loss(forward(m, scene, targets), asg, 5);
        CHECK(l.breakdown.total < prev);
        prev = l.breakdown.total;
        l.total.backward();
        opt.step();
    }
    CHECK(prev < first);
}
