#include "tdid/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>
#include <tuple>

#include "tdid/checkpoint.hpp"
#include "tdid/error.hpp"
#include "tdid/rng.hpp"

namespace tdid {

namespace fs = std::filesystem;

namespace {

// Stream tags keep instance/scene/target randomness independent.
constexpr std::uint64_t kInstanceStream = 0x1A5E5EEDull;

Rgb hsv_to_rgb(double h, double s, double v) {
    h = h - std::floor(h);
    const double hh = h * 6.0;
    const int sector = static_cast<int>(std::floor(hh)) % 6;
    const double f = hh - std::floor(hh);
    const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
    double r = v, g = t, b = p;
    switch (sector) {
        case 0: r = v; g = t; b = p; break;
        case 1: r = q; g = v; b = p; break;
        case 2: r = p; g = v; b = t; break;
        case 3: r = p; g = q; b = v; break;
        case 4: r = t; g = p; b = v; break;
        default: r = v; g = p; b = q; break;
    }
    auto q8 = [](double x) { return static_cast<std::uint8_t>(std::clamp<long>(std::lround(x * 255.0), 0, 255)); };
    return {q8(r), q8(g), q8(b)};
}

std::uint8_t clamp8(double x) { return static_cast<std::uint8_t>(std::clamp<long>(std::lround(x), 0, 255)); }

double frac(double x) { return x - std::floor(x); }

double smoothstep(double t) { return t * t * (3 - 2 * t); }

// Two-octave value noise in muted colors.
RgbImage noise_background(SplitMix64& rng, std::size_t w, std::size_t h) {
    const double base = rng.uniform(70, 180);
    const std::size_t coarse = 16, fine = 4;
    const std::size_t cw = w / coarse + 2, ch = h / coarse + 2;
    const std::size_t fw = w / fine + 2, fh = h / fine + 2;
    std::vector<std::array<double, 3>> lattice(cw * ch);
    for (auto& c : lattice) {
        for (auto& v : c) v = base + rng.uniform(-40, 40);
    }
    std::vector<double> detail(fw * fh);
    for (auto& v : detail) v = rng.uniform(-15, 15);

    auto sample = [](const auto& grid, std::size_t gw, double gx, double gy, auto get) {
        const auto x0 = static_cast<std::size_t>(gx), y0 = static_cast<std::size_t>(gy);
        const double tx = smoothstep(gx - static_cast<double>(x0)), ty = smoothstep(gy - static_cast<double>(y0));
        const double a = get(grid[y0 * gw + x0]), b = get(grid[y0 * gw + x0 + 1]);
        const double c = get(grid[(y0 + 1) * gw + x0]), d = get(grid[(y0 + 1) * gw + x0 + 1]);
        return (a * (1 - tx) + b * tx) * (1 - ty) + (c * (1 - tx) + d * tx) * ty;
    };

    RgbImage img(w, h);
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            const double gx = static_cast<double>(x) / coarse, gy = static_cast<double>(y) / coarse;
            const double d = sample(detail, fw, static_cast<double>(x) / fine, static_cast<double>(y) / fine,
                                    [](double v) { return v; });
            Rgb px;
            for (std::size_t c = 0; c < 3; ++c) {
                px[c] = clamp8(sample(lattice, cw, gx, gy, [c](const std::array<double, 3>& v) { return v[c]; }) + d);
            }
            img.set(x, y, px);
        }
    }
    return img;
}

Rgb random_clutter_color(SplitMix64& rng) {
    const double h = rng.uniform();
    const double s = rng.uniform(0.2, 0.9);
    const double v = rng.uniform(0.3, 0.95);
    return hsv_to_rgb(h, s, v);
}

struct Rect {
    long x = 0, y = 0, w = 0, h = 0;
};

void fill_rect(RgbImage& img, const Rect& r, Rgb color) {
    for (long y = std::max(0L, r.y); y < std::min<long>(static_cast<long>(img.height), r.y + r.h); ++y) {
        for (long x = std::max(0L, r.x); x < std::min<long>(static_cast<long>(img.width), r.x + r.w); ++x) {
            img.set(static_cast<std::size_t>(x), static_cast<std::size_t>(y), color);
        }
    }
}

std::string scene_name(int index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "scenes/%06d.ppm", index);
    return buf;
}

std::string target_name(const std::string& id, int view) {
    return "targets/" + id + "/view" + std::to_string(view) + ".ppm";
}

}  // namespace

// ---- instances -----------------------------------------------------------

std::string pattern_name(PatternType p) {
    switch (p) {
        case PatternType::Stripes: return "stripes";
        case PatternType::Checker: return "checker";
        case PatternType::Dots: return "dots";
        case PatternType::Rings: return "rings";
    }
    return "stripes";
}

PatternType parse_pattern(const std::string& name) {
    if (name == "stripes") return PatternType::Stripes;
    if (name == "checker") return PatternType::Checker;
    if (name == "dots") return PatternType::Dots;
    if (name == "rings") return PatternType::Rings;
    throw ConfigError("unknown pattern type '" + name + "'");
}

Rgb InstanceSpec::primary_color() const { return hsv_to_rgb(base_hue, 0.85, 0.92); }
Rgb InstanceSpec::secondary_color() const { return hsv_to_rgb(secondary_hue, 0.65, 0.42); }

bool InstanceSpec::primary_at(double u, double v) const {
    const double s = pattern_scale;
    switch (pattern) {
        case PatternType::Stripes:
            return static_cast<long>(std::floor((u + v) * s)) % 2 == 0;
        case PatternType::Checker:
            return (static_cast<long>(std::floor(u * s)) + static_cast<long>(std::floor(v * s))) % 2 == 0;
        case PatternType::Dots: {
            const double du = frac(u * s) - 0.5, dv = frac(v * s) - 0.5;
            return du * du + dv * dv >= 0.09;
        }
        case PatternType::Rings: {
            const double du = u - 0.5, dv = v - 0.5;
            return static_cast<long>(std::floor(std::sqrt(du * du + dv * dv) * s * 2.0)) % 2 == 0;
        }
    }
    return true;
}

std::vector<InstanceSpec> make_instances(const GenConfig& config) {
    SplitMix64 rng(derive_seed(config.seed, kInstanceStream));
    const double hue_offset = rng.uniform();
    std::vector<InstanceSpec> out;
    for (int k = 0; k < config.num_instances; ++k) {
        InstanceSpec s;
        char buf[16];
        std::snprintf(buf, sizeof buf, "inst%02d", k);
        s.id = buf;
        s.pattern = static_cast<PatternType>(k % 4);
        s.base_hue = frac(hue_offset + 0.6180339887498949 * k);
        s.secondary_hue = frac(s.base_hue + 0.5 + rng.uniform(-0.08, 0.08));
        s.pattern_scale = 2.0 + static_cast<double>((k / 4) % 3);
        s.canonical_size = config.canonical_size;
        out.push_back(s);
    }
    return out;
}

// ---- config --------------------------------------------------------------

void GenConfig::validate() const {
    std::vector<std::string> errs;
    if (num_instances < 2) errs.push_back("num_instances must be >= 2");
    if (num_scenes < 1) errs.push_back("num_scenes must be >= 1");
    if (stride < 1) errs.push_back("stride must be >= 1");
    if (image_size < 16 || (stride >= 1 && image_size % stride != 0)) {
        errs.push_back("image_size must be >= 16 and divisible by the backbone stride");
    }
    if (target_size < 8 || (stride >= 1 && target_size % stride != 0)) {
        errs.push_back("target_size must be >= 8 and divisible by the backbone stride");
    }
    if (canonical_size < 4) errs.push_back("canonical_size must be >= 4");
    if (!(scale_min > 0) || scale_max < scale_min) errs.push_back("scale range must satisfy 0 < min <= max");
    if (canonical_size * scale_max > image_size) errs.push_back("largest glyph must fit in the image");
    if (max_occlusion < 0 || max_occlusion >= kMaxLabelableOcclusion) errs.push_back("max_occlusion must be in [0, 0.7)");
    if (distractors < 0 || clutter < 0) errs.push_back("distractor and clutter counts must be >= 0");
    if (max_instances_per_scene < 1) errs.push_back("max_instances_per_scene must be >= 1");
    if (absence_rate < 0 || absence_rate > 1) errs.push_back("absence_rate must be in [0,1]");
    if (test_fraction < 0 || test_fraction > 1) errs.push_back("test_fraction must be in [0,1]");
    if (num_views < 1) errs.push_back("num_views must be >= 1");
    if (num_holdout < 0 || num_holdout > num_instances - 1) errs.push_back("num_holdout must leave a training instance");
    if (!errs.empty()) {
        std::string msg = "invalid dataset config:";
        for (auto& e : errs) msg += " " + e + ";";
        throw ConfigError(msg);
    }
}

nlohmann::json gen_config_to_json(const GenConfig& c) {
    return {{"num_instances", c.num_instances},
            {"num_scenes", c.num_scenes},
            {"image_size", c.image_size},
            {"target_size", c.target_size},
            {"canonical_size", c.canonical_size},
            {"scale_range", {c.scale_min, c.scale_max}},
            {"max_occlusion", c.max_occlusion},
            {"distractors", c.distractors},
            {"clutter", c.clutter},
            {"max_instances_per_scene", c.max_instances_per_scene},
            {"absence_rate", c.absence_rate},
            {"test_fraction", c.test_fraction},
            {"num_views", c.num_views},
            {"num_holdout", c.num_holdout},
            {"stride", c.stride},
            {"seed", c.seed}};
}

GenConfig gen_config_from_json(const nlohmann::json& j) {
    static const std::set<std::string> known{"num_instances", "num_scenes", "image_size", "target_size",
                                             "canonical_size", "scale_range", "max_occlusion", "distractors",
                                             "clutter", "max_instances_per_scene", "absence_rate", "test_fraction",
                                             "num_views", "num_holdout", "stride", "seed"};
    if (!j.is_object()) throw ConfigError("dataset config: expected a JSON object");
    for (const auto& [key, _] : j.items()) {
        if (!known.count(key)) throw ConfigError("dataset config: unknown key '" + key + "'");
    }
    GenConfig c;
    try {
        auto get = [&](const char* key, auto& field) {
            if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
        };
        get("num_instances", c.num_instances);
        get("num_scenes", c.num_scenes);
        get("image_size", c.image_size);
        get("target_size", c.target_size);
        get("canonical_size", c.canonical_size);
        if (j.contains("scale_range")) {
            c.scale_min = j.at("scale_range").at(0).get<double>();
            c.scale_max = j.at("scale_range").at(1).get<double>();
        }
        get("max_occlusion", c.max_occlusion);
        get("distractors", c.distractors);
        get("clutter", c.clutter);
        get("max_instances_per_scene", c.max_instances_per_scene);
        get("absence_rate", c.absence_rate);
        get("test_fraction", c.test_fraction);
        get("num_views", c.num_views);
        get("num_holdout", c.num_holdout);
        get("stride", c.stride);
        get("seed", c.seed);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("dataset config: ") + e.what());
    }
    return c;
}

// ---- rendering -----------------------------------------------------------

RenderedScene render_scene(const GenConfig& config, const std::vector<InstanceSpec>& instances, int index,
                           bool train_split) {
    SplitMix64 rng(derive_seed(config.seed, static_cast<std::uint64_t>(index)));
    const auto size = static_cast<std::size_t>(config.image_size);
    const long isz = config.image_size;
    RenderedScene out;
    out.image = noise_background(rng, size, size);
    RgbImage& img = out.image;

    const long clutter_n = rng.range(0, config.clutter);
    for (long i = 0; i < clutter_n; ++i) {
        Rect r{0, 0, rng.range(6, std::max(6L, isz / 4)), rng.range(6, std::max(6L, isz / 4))};
        r.x = rng.range(-r.w / 2, isz - r.w / 2);
        r.y = rng.range(-r.h / 2, isz - r.h / 2);
        fill_rect(img, r, random_clutter_color(rng));
    }

    std::vector<std::size_t> pool;
    const auto holdout_start = instances.size() - static_cast<std::size_t>(config.num_holdout);
    for (std::size_t k = 0; k < instances.size(); ++k) {
        if (!train_split || k < holdout_start) pool.push_back(k);
    }
    const bool empty = rng.uniform() < config.absence_rate;
    const long count = empty ? 0 : rng.range(1, std::min<long>(config.max_instances_per_scene, static_cast<long>(pool.size())));
    rng.shuffle(std::span<std::size_t>(pool));

    struct Placed {
        std::size_t instance;
        Rect rect;
        long visible;
    };
    std::vector<Placed> placed;
    std::vector<int> owner(size * size, -1);
    for (long n = 0; n < count; ++n) {
        const auto& spec = instances[pool[static_cast<std::size_t>(n)]];
        const double scale = rng.uniform(config.scale_min, config.scale_max);
        const long gs = std::max(4L, std::lround(spec.canonical_size * scale));
        for (int attempt = 0; attempt < 50; ++attempt) {
            Rect r{rng.range(0, isz - gs), rng.range(0, isz - gs), gs, gs};
            bool overlaps = false;
            for (const auto& p : placed) {
                const auto& q = p.rect;
                if (r.x < q.x + q.w + 2 && q.x < r.x + r.w + 2 && r.y < q.y + q.h + 2 && q.y < r.y + r.h + 2) {
                    overlaps = true;
                    break;
                }
            }
            if (overlaps) continue;
            const int owner_id = static_cast<int>(placed.size());
            const Rgb c1 = spec.primary_color(), c2 = spec.secondary_color();
            for (long y = 0; y < gs; ++y) {
                for (long x = 0; x < gs; ++x) {
                    const double u = (static_cast<double>(x) + 0.5) / static_cast<double>(gs);
                    const double v = (static_cast<double>(y) + 0.5) / static_cast<double>(gs);
                    const auto px = static_cast<std::size_t>(r.x + x), py = static_cast<std::size_t>(r.y + y);
                    img.set(px, py, spec.primary_at(u, v) ? c1 : c2);
                    owner[py * size + px] = owner_id;
                }
            }
            placed.push_back({pool[static_cast<std::size_t>(n)], r, gs * gs});
            break;
        }
    }

    const long occluders = rng.range(0, config.distractors);
    int drawn = 0;
    for (long i = 0; i < occluders; ++i) {
        for (int attempt = 0; attempt < 20; ++attempt) {
            Rect r{0, 0, rng.range(4, std::max(4L, isz / 5)), rng.range(4, std::max(4L, isz / 5))};
            if (!placed.empty() && rng.uniform() < 0.6) {
                const auto& q = placed[static_cast<std::size_t>(rng.below(placed.size()))].rect;
                r.x = q.x + static_cast<long>(std::floor(rng.uniform(-0.3, 1.0) * static_cast<double>(q.w)));
                r.y = q.y + static_cast<long>(std::floor(rng.uniform(-0.3, 1.0) * static_cast<double>(q.h)));
            } else {
                r.x = rng.range(-r.w / 2, isz - r.w / 2);
                r.y = rng.range(-r.h / 2, isz - r.h / 2);
            }
            const Rgb color = random_clutter_color(rng);
            std::vector<long> hidden(placed.size(), 0);
            for (long y = std::max(0L, r.y); y < std::min(isz, r.y + r.h); ++y) {
                for (long x = std::max(0L, r.x); x < std::min(isz, r.x + r.w); ++x) {
                    const int o = owner[static_cast<std::size_t>(y) * size + static_cast<std::size_t>(x)];
                    if (o >= 0) ++hidden[static_cast<std::size_t>(o)];
                }
            }
            bool ok = true;
            for (std::size_t p = 0; p < placed.size(); ++p) {
                const double area = static_cast<double>(placed[p].rect.w * placed[p].rect.h);
                const double occ = static_cast<double>(area - (placed[p].visible - hidden[p])) / area;
                if (occ > config.max_occlusion) ok = false;
            }
            if (!ok) continue;
            for (long y = std::max(0L, r.y); y < std::min(isz, r.y + r.h); ++y) {
                for (long x = std::max(0L, r.x); x < std::min(isz, r.x + r.w); ++x) {
                    owner[static_cast<std::size_t>(y) * size + static_cast<std::size_t>(x)] = -1;
                }
            }
            for (std::size_t p = 0; p < placed.size(); ++p) placed[p].visible -= hidden[p];
            fill_rect(img, r, color);
            ++drawn;
            break;
        }
    }

    out.record.image = scene_name(index);
    out.record.distractors = drawn;
    for (const auto& p : placed) {
        const double area = static_cast<double>(p.rect.w * p.rect.h);
        out.record.annotations.push_back(
            {instances[p.instance].id,
             Box{static_cast<double>(p.rect.x), static_cast<double>(p.rect.y), static_cast<double>(p.rect.x + p.rect.w),
                 static_cast<double>(p.rect.y + p.rect.h)},
             (area - static_cast<double>(p.visible)) / area});
    }
    return out;
}

RgbImage render_target(const GenConfig& config, const InstanceSpec& instance, int view) {
    const auto ts = static_cast<std::size_t>(config.target_size);
    RgbImage img(ts, ts, {200, 200, 200});
    const double gs = std::round(static_cast<double>(config.target_size) * 0.625);
    const double origin = (static_cast<double>(config.target_size) - gs) / 2.0;
    const double shear = 0.25 * view;
    const double mid = static_cast<double>(config.target_size) / 2.0;
    const Rgb c1 = instance.primary_color(), c2 = instance.secondary_color();
    for (std::size_t y = 0; y < ts; ++y) {
        const double fy = static_cast<double>(y) + 0.5;
        const double v = (fy - origin) / gs;
        if (v < 0 || v >= 1) continue;
        for (std::size_t x = 0; x < ts; ++x) {
            const double fx = static_cast<double>(x) + 0.5 - shear * (fy - mid);
            const double u = (fx - origin) / gs;
            if (u < 0 || u >= 1) continue;
            img.set(x, y, instance.primary_at(u, v) ? c1 : c2);
        }
    }
    return img;
}

DatasetManifest generate_dataset(const GenConfig& config, const fs::path& root) {
    config.validate();
    DatasetManifest m;
    m.generation_seed = config.seed;
    m.config = config;
    m.image_size = config.image_size;
    m.instances = make_instances(config);
    for (std::size_t k = m.instances.size() - static_cast<std::size_t>(config.num_holdout); k < m.instances.size(); ++k) {
        m.held_out.push_back(m.instances[k].id);
    }
    fs::create_directories(root / "scenes");
    for (const auto& inst : m.instances) {
        for (int v = 0; v < config.num_views; ++v) {
            const auto rel = target_name(inst.id, v);
            write_ppm(root / rel, render_target(config, inst, v));
            m.targets[inst.id].push_back(rel);
        }
    }
    const int num_test = static_cast<int>(std::lround(config.num_scenes * config.test_fraction));
    const int num_train = config.num_scenes - num_test;
    for (int i = 0; i < config.num_scenes; ++i) {
        const bool train = i < num_train;
        auto scene = render_scene(config, m.instances, i, train);
        write_ppm(root / scene.record.image, scene.image);
        (train ? m.train : m.test).push_back(std::move(scene.record));
    }
    save_manifest(root / "manifest.json", m);
    return m;
}

// ---- manifest ------------------------------------------------------------

std::vector<Box> SceneRecord::boxes_of(const std::string& instance_id) const {
    std::vector<Box> out;
    for (const auto& a : annotations) {
        if (a.instance_id == instance_id) out.push_back(a.box);
    }
    return out;
}

const std::vector<SceneRecord>& DatasetManifest::split(const std::string& name) const {
    if (name == "train") return train;
    if (name == "test") return test;
    throw ConfigError("unknown split '" + name + "' (expected train or test)");
}

std::vector<std::string> DatasetManifest::instance_ids() const {
    std::vector<std::string> out;
    for (const auto& i : instances) out.push_back(i.id);
    return out;
}

namespace {

nlohmann::json scenes_to_json(const std::vector<SceneRecord>& scenes) {
    auto arr = nlohmann::json::array();
    for (const auto& s : scenes) {
        auto anns = nlohmann::json::array();
        for (const auto& a : s.annotations) {
            anns.push_back({{"id", a.instance_id},
                            {"box", {a.box.x1, a.box.y1, a.box.x2, a.box.y2}},
                            {"occlusion", a.occlusion}});
        }
        arr.push_back({{"image", s.image}, {"distractors", s.distractors}, {"annotations", anns}});
    }
    return arr;
}

std::vector<SceneRecord> scenes_from_json(const nlohmann::json& arr) {
    std::vector<SceneRecord> out;
    for (const auto& s : arr) {
        SceneRecord r;
        r.image = s.at("image").get<std::string>();
        r.distractors = s.value("distractors", 0);
        for (const auto& a : s.at("annotations")) {
            const auto& b = a.at("box");
            if (!b.is_array() || b.size() != 4) throw ConfigError("annotation box must be [x1,y1,x2,y2]");
            r.annotations.push_back({a.at("id").get<std::string>(),
                                     Box{b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>()},
                                     a.value("occlusion", 0.0)});
        }
        out.push_back(std::move(r));
    }
    return out;
}

}  // namespace

nlohmann::json manifest_to_json(const DatasetManifest& m) {
    auto instances = nlohmann::json::array();
    for (const auto& i : m.instances) {
        instances.push_back({{"id", i.id},
                             {"pattern", pattern_name(i.pattern)},
                             {"base_hue", i.base_hue},
                             {"secondary_hue", i.secondary_hue},
                             {"pattern_scale", i.pattern_scale},
                             {"canonical_size", i.canonical_size}});
    }
    return {{"format_version", m.format_version},
            {"generation_seed", m.generation_seed},
            {"gen_config", gen_config_to_json(m.config)},
            {"image_size", m.image_size},
            {"instances", instances},
            {"targets", m.targets},
            {"held_out", m.held_out},
            {"splits", {{"train", scenes_to_json(m.train)}, {"test", scenes_to_json(m.test)}}}};
}

DatasetManifest manifest_from_json(const nlohmann::json& j) {
    DatasetManifest m;
    try {
        m.format_version = j.at("format_version").get<int>();
        m.generation_seed = j.value("generation_seed", std::uint64_t{0});
        if (j.contains("gen_config")) m.config = gen_config_from_json(j.at("gen_config"));
        m.image_size = j.at("image_size").get<int>();
        for (const auto& i : j.value("instances", nlohmann::json::array())) {
            InstanceSpec s;
            s.id = i.at("id").get<std::string>();
            s.pattern = parse_pattern(i.at("pattern").get<std::string>());
            s.base_hue = i.at("base_hue").get<double>();
            s.secondary_hue = i.at("secondary_hue").get<double>();
            s.pattern_scale = i.at("pattern_scale").get<double>();
            s.canonical_size = i.at("canonical_size").get<int>();
            m.instances.push_back(s);
        }
        m.targets = j.at("targets").get<std::map<std::string, std::vector<std::string>>>();
        m.held_out = j.value("held_out", std::vector<std::string>{});
        const auto& splits = j.at("splits");
        m.train = scenes_from_json(splits.at("train"));
        m.test = scenes_from_json(splits.at("test"));
    } catch (const nlohmann::json::exception& e) {
        throw ManifestError({std::string("schema violation: ") + e.what()});
    } catch (const ConfigError& e) {
        throw ManifestError({std::string("schema violation: ") + e.what()});
    }
    return m;
}

std::vector<std::string> validate_manifest(const DatasetManifest& m, const fs::path& base_dir) {
    std::vector<std::string> errs;
    const bool check_files = !base_dir.empty();
    if (m.format_version != kManifestFormatVersion) {
        errs.push_back("unsupported format_version " + std::to_string(m.format_version));
    }
    if (m.image_size <= 0) errs.push_back("image_size must be positive");

    std::set<std::string> ids;
    std::set<std::tuple<int, double, double, double>> looks;
    for (const auto& i : m.instances) {
        if (!ids.insert(i.id).second) errs.push_back("duplicate instance id '" + i.id + "'");
        if (!looks.insert({static_cast<int>(i.pattern), i.base_hue, i.secondary_hue, i.pattern_scale}).second) {
            errs.push_back("instance '" + i.id + "' is indistinguishable from another instance");
        }
    }
    std::size_t views = 0;
    for (const auto& [id, paths] : m.targets) {
        if (!m.instances.empty() && !ids.count(id)) errs.push_back("target '" + id + "' has no instance spec");
        if (paths.empty()) errs.push_back("target '" + id + "' lists no images");
        if (views == 0) views = paths.size();
        if (paths.size() != views) errs.push_back("target '" + id + "' has a different number of views");
        for (const auto& p : paths) {
            if (check_files && !fs::exists(base_dir / p)) errs.push_back("target '" + id + "': missing image " + p);
        }
    }
    const std::set<std::string> held(m.held_out.begin(), m.held_out.end());
    for (const auto& h : m.held_out) {
        if (!m.targets.count(h)) errs.push_back("held-out id '" + h + "' has no targets");
    }
    auto check_split = [&](const char* name, const std::vector<SceneRecord>& scenes, bool is_train) {
        for (std::size_t s = 0; s < scenes.size(); ++s) {
            const auto& sc = scenes[s];
            const auto where = std::string(name) + " scene " + std::to_string(s);
            if (check_files && !fs::exists(base_dir / sc.image)) errs.push_back(where + ": missing image " + sc.image);
            for (std::size_t a = 0; a < sc.annotations.size(); ++a) {
                const auto& ann = sc.annotations[a];
                const auto at = where + " annotation " + std::to_string(a);
                if (!m.targets.count(ann.instance_id)) {
                    errs.push_back(at + ": instance '" + ann.instance_id + "' has no targets");
                }
                if (is_train && held.count(ann.instance_id)) {
                    errs.push_back(at + ": held-out instance '" + ann.instance_id + "' appears in training");
                }
                const auto& b = ann.box;
                if (!(b.x2 > b.x1 && b.y2 > b.y1)) errs.push_back(at + ": degenerate box");
                if (b.x1 < 0 || b.y1 < 0 || b.x2 > m.image_size || b.y2 > m.image_size) {
                    errs.push_back(at + ": box out of image bounds");
                }
                if (!(ann.occlusion >= 0 && ann.occlusion < kMaxLabelableOcclusion)) {
                    errs.push_back(at + ": occlusion must be in [0, 0.7)");
                }
            }
        }
    };
    check_split("train", m.train, true);
    check_split("test", m.test, false);
    return errs;
}

void save_manifest(const fs::path& path, const DatasetManifest& m) {
    const auto text = manifest_to_json(m).dump(1) + "\n";
    write_file_bytes(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

DatasetManifest load_manifest(const fs::path& path) {
    const auto bytes = read_file_bytes(path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(bytes.begin(), bytes.end());
    } catch (const nlohmann::json::exception& e) {
        throw ManifestError({path.string() + ": " + e.what()});
    }
    auto m = manifest_from_json(j);
    auto errs = validate_manifest(m, path.parent_path());
    if (!errs.empty()) throw ManifestError(std::move(errs));
    return m;
}

const std::vector<Tensorf>& LoadedDataset::images(const std::string& split) const {
    if (split == "train") return train_images;
    if (split == "test") return test_images;
    throw ConfigError("unknown split '" + split + "' (expected train or test)");
}

LoadedDataset load_dataset(const fs::path& path, std::size_t stride) {
    const fs::path manifest_path = fs::is_directory(path) ? path / "manifest.json" : path;
    LoadedDataset d;
    d.manifest = load_manifest(manifest_path);
    d.root = manifest_path.parent_path();
    for (const auto& s : d.manifest.train) d.train_images.push_back(pad_to_stride(load_image(d.root / s.image), stride));
    for (const auto& s : d.manifest.test) d.test_images.push_back(pad_to_stride(load_image(d.root / s.image), stride));
    for (const auto& [id, paths] : d.manifest.targets) {
        for (const auto& p : paths) d.target_images[id].push_back(pad_to_stride(load_image(d.root / p), stride));
    }
    return d;
}

}  // namespace tdid
