#include "doctest.h"

#include <cmath>
#include <set>

#include "support.hpp"
#include "tdid/dataset.hpp"
#include "tdid/error.hpp"
#include "tdid/image.hpp"

using namespace tdid;
namespace fs = std::filesystem;

TEST_CASE("ppm encoding") {
    RgbImage img(2, 2);
    img.set(0, 0, {255, 0, 0});
    img.set(1, 0, {0, 255, 0});
    img.set(0, 1, {0, 0, 255});
    img.set(1, 1, {10, 20, 30});
    const auto bytes = encode_ppm(img);
    const std::string header(bytes.begin(), bytes.begin() + 11);
    CHECK(header == "P6\n2 2\n255\n");
    CHECK(bytes.size() == 11 + 12);
    const auto back = decode_ppm(bytes);
    CHECK(back.width == 2);
    CHECK(back.pixels == img.pixels);

    const auto t = image_to_tensor(img);
    CHECK(t.shape() == Shape{3, 2, 2});
    CHECK(t.data()[0] == 1.0f);
    CHECK(t.data()[4 + 1] == 1.0f);
    CHECK(tensor_to_image(t).pixels == img.pixels);

    const auto black = image_to_tensor(RgbImage(4, 3));
    for (float v : black.data()) CHECK(v == 0.0f);

    SUBCASE("comments in the header") {
        const std::string s = "P6 # made by hand\n1 1\n255\n\x01\x02\x03";
        const auto one = decode_ppm(std::vector<std::uint8_t>(s.begin(), s.end()));
        CHECK(one.at(0, 0) == Rgb{1, 2, 3});
    }
    SUBCASE("parse errors carry the byte offset") {
        auto expect_offset = [](std::string s, std::uint64_t off) {
            try {
                decode_ppm(std::vector<std::uint8_t>(s.begin(), s.end()));
                FAIL("no error");
            } catch (const ParseError& e) {
                CHECK(e.offset() == off);
                CHECK(std::string(e.what()).find("byte offset " + std::to_string(off)) != std::string::npos);
            }
        };
        expect_offset("P3\n1 1\n255\n", 0);
        expect_offset("P6\n2 2\n255\n\x01\x02", 13);
        expect_offset("P6\nx 2\n255\n", 3);
        expect_offset("P6\n1 1\n15\n\x01\x02\x03", 7);
    }
    SUBCASE("tensor values are rounded and clamped") {
        const auto t2 = Tensorf::from_data({3, 1, 1}, {-0.5f, 0.5f, 2.0f});
        CHECK(tensor_to_image(t2).at(0, 0) == Rgb{0, 128, 255});
    }
}

TEST_CASE("pad_to_stride") {
    SplitMix64 rng(1);
    const auto img = tdid::testing::random_image(rng, 65, 64, false);
    const auto p = pad_to_stride(img, 8);
    CHECK(p.shape() == Shape{3, 72, 64});
    for (std::size_t c = 0; c < 3; ++c) {
        for (std::size_t y = 0; y < 72; ++y) {
            for (std::size_t x = 0; x < 64; ++x) {
                const float v = p.data()[(c * 72 + y) * 64 + x];
                if (y < 65) {
                    CHECK(v == img.data()[(c * 65 + y) * 64 + x]);
                } else {
                    CHECK(v == 0.0f);
                }
            }
        }
    }
    CHECK(pad_to_stride(p, 8).shape() == p.shape());
    CHECK(pad_to_stride(tdid::testing::random_image(rng, 5, 7), 4).shape() == Shape{1, 3, 8, 8});
    CHECK_THROWS_AS(pad_to_stride(img, 0), ConfigError);
}

TEST_CASE("generated datasets") {
    const auto cfg = tdid::testing::tiny_gen_config(7);
    const auto a = tdid::testing::scratch_dir("gen_a");
    const auto b = tdid::testing::scratch_dir("gen_b");
    const auto m = generate_dataset(cfg, a);
    generate_dataset(cfg, b);

    SUBCASE("byte-identical trees") {
        std::set<std::string> files;
        for (const auto& e : fs::recursive_directory_iterator(a)) {
            if (e.is_regular_file()) files.insert(fs::relative(e.path(), a).string());
        }
        std::size_t n = 0;
        for (const auto& e : fs::recursive_directory_iterator(b)) n += e.is_regular_file();
        CHECK(files.size() == n);
        CHECK(files.size() == 1 + 12 + 3 * 2);
        for (const auto& f : files) {
            INFO(f);
            CHECK(tdid::testing::read_bytes(a / f) == tdid::testing::read_bytes(b / f));
        }
    }
    SUBCASE("manifest round trip and validation") {
        CHECK(validate_manifest(m, a).empty());
        const auto loaded = load_manifest(a / "manifest.json");
        CHECK(manifest_to_json(loaded) == manifest_to_json(m));
        CHECK(m.train.size() == 10);
        CHECK(m.test.size() == 2);
        CHECK(m.instance_ids().size() == 3);

        fs::remove(a / m.train[1].image);
        const auto errs = validate_manifest(m, a);
        REQUIRE(errs.size() == 1);
        CHECK(errs[0].find("train scene 1") != std::string::npos);
        CHECK(errs[0].find("missing image") != std::string::npos);
        CHECK_THROWS_AS(load_manifest(a / "manifest.json"), ManifestError);
    }
    SUBCASE("out-of-bounds box names the scene and annotation") {
        auto bad = m;
        std::size_t s = 0;
        while (s < bad.train.size() && bad.train[s].annotations.empty()) ++s;
        REQUIRE(s < bad.train.size());
        const std::size_t k = bad.train[s].annotations.size() - 1;
        bad.train[s].annotations[k].box.x2 = 65;
        const auto errs = validate_manifest(bad);
        REQUIRE(errs.size() == 1);
        const auto want = "train scene " + std::to_string(s) + " annotation " + std::to_string(k);
        CHECK(errs[0].find(want) != std::string::npos);
        CHECK(errs[0].find("out of image bounds") != std::string::npos);
    }
    SUBCASE("loaded images are padded tensors") {
        const auto ds = load_dataset(a / "manifest.json", 8);
        CHECK(ds.train_images.size() == 10);
        CHECK(ds.train_images[0].shape() == Shape{3, 64, 64});
        CHECK(ds.target_images.at(m.instances[0].id).size() == 2);
        CHECK(ds.target_images.at(m.instances[0].id)[0].shape() == Shape{3, 32, 32});
    }
}

TEST_CASE("scene statistics") {
    GenConfig cfg;
    cfg.seed = 3;
    cfg.num_scenes = 400;
    const auto instances = make_instances(cfg);
    int empty = 0;
    for (int i = 0; i < cfg.num_scenes; ++i) {
        const auto s = render_scene(cfg, instances, i, true);
        if (s.record.annotations.empty()) ++empty;
        for (const auto& ann : s.record.annotations) {
            const auto& spec = *std::find_if(instances.begin(), instances.end(),
                                             [&](const InstanceSpec& x) { return x.id == ann.instance_id; });
            const auto x0 = static_cast<std::size_t>(ann.box.x1), y0 = static_cast<std::size_t>(ann.box.y1);
            const auto gs = static_cast<std::size_t>(ann.box.width());
            CHECK(ann.box.width() == ann.box.height());
            CHECK(ann.occlusion <= cfg.max_occlusion + 1e-12);
            std::size_t visible = 0;
            for (std::size_t y = 0; y < gs; ++y) {
                for (std::size_t x = 0; x < gs; ++x) {
                    const double u = (static_cast<double>(x) + 0.5) / static_cast<double>(gs);
                    const double v = (static_cast<double>(y) + 0.5) / static_cast<double>(gs);
                    const Rgb want = spec.primary_at(u, v) ? spec.primary_color() : spec.secondary_color();
                    visible += s.image.at(x0 + x, y0 + y) == want;
                }
            }
            CHECK(static_cast<double>(visible) >= (1.0 - ann.occlusion) * ann.box.area() - 1e-9);
        }
    }
    // Four binomial standard deviations around the absence rate.
    const double sigma = std::sqrt(0.3 * 0.7 / 400.0);
    CHECK(std::abs(empty / 400.0 - 0.3) < 4 * sigma);
}

TEST_CASE("held-out instances never appear in training scenes") {
    GenConfig cfg;
    cfg.seed = 9;
    cfg.num_instances = 10;
    cfg.num_holdout = 2;
    cfg.num_scenes = 300;
    const auto instances = make_instances(cfg);
    const std::set<std::string> held{instances[8].id, instances[9].id};
    int held_in_test = 0;
    for (int i = 0; i < cfg.num_scenes; ++i) {
        for (const bool train : {true, false}) {
            const auto s = render_scene(cfg, instances, i, train);
            for (const auto& a : s.record.annotations) {
                if (train) CHECK_FALSE(held.count(a.instance_id));
                if (!train) held_in_test += static_cast<int>(held.count(a.instance_id));
            }
        }
    }
    CHECK(held_in_test > 0);
}

TEST_CASE("instance table") {
    const auto a = make_instances(GenConfig{});
    CHECK(a.size() == 8);
    std::set<std::string> ids;
    for (const auto& i : a) ids.insert(i.id);
    CHECK(ids.size() == 8);
    const auto t0 = render_target(GenConfig{}, a[0], 0);
    const auto t1 = render_target(GenConfig{}, a[0], 1);
    CHECK(t0.width == 64);
    CHECK(t0.pixels != t1.pixels);
    CHECK(parse_pattern(pattern_name(PatternType::Rings)) == PatternType::Rings);

    GenConfig bad;
    bad.image_size = 60;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    CHECK_THROWS_AS(gen_config_from_json(nlohmann::json{{"bogus", 1}}), ConfigError);
    const auto j = gen_config_to_json(GenConfig{});
    CHECK(gen_config_to_json(gen_config_from_json(j)) == j);
}
