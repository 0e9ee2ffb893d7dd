#pragma once

#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <vector>

#include "tdid/dataset.hpp"
#include "tdid/model.hpp"
#include "tdid/rng.hpp"

namespace tdid::testing {

inline ModelConfig small_config() {
    ModelConfig cfg;
    cfg.backbone_channels = {8, 16, 16};
    cfg.backbone_stride = 4;
    cfg.feature_dim = 16;
    return cfg;
}

inline Tensorf random_image(SplitMix64& rng, std::size_t h, std::size_t w, bool batched = true) {
    std::vector<float> v(3 * h * w);
    for (auto& x : v) x = static_cast<float>(rng.uniform());
    if (batched) return Tensorf::from_data({1, 3, h, w}, std::move(v));
    return Tensorf::from_data({3, h, w}, std::move(v));
}

inline std::map<std::string, std::vector<Tensorf>> random_targets(SplitMix64& rng, int count, int views,
                                                                   std::size_t size) {
    std::map<std::string, std::vector<Tensorf>> out;
    for (int i = 0; i < count; ++i) {
        auto& v = out["obj" + std::to_string(i)];
        for (int k = 0; k < views; ++k) v.push_back(random_image(rng, size, size, false));
    }
    return out;
}

inline std::string read_bytes(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("tdid_test_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

inline GenConfig tiny_gen_config(std::uint64_t seed = 1) {
    GenConfig c;
    c.num_instances = 3;
    c.num_scenes = 12;
    c.image_size = 64;
    c.target_size = 32;
    c.max_instances_per_scene = 2;
    c.seed = seed;
    return c;
}

}  // namespace tdid::testing
