#pragma once

// Synthetic instance-detection data: procedurally textured square glyphs
// pasted onto noisy, cluttered backgrounds, with occluding distractors.
//
// On disk:
//   <root>/manifest.json
//   <root>/scenes/<index>.ppm
//   <root>/targets/<id>/view<v>.ppm

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "tdid/anchors.hpp"
#include "tdid/image.hpp"

namespace tdid {

inline constexpr int kManifestFormatVersion = 1;
inline constexpr double kMaxLabelableOcclusion = 0.7;

enum class PatternType { Stripes, Checker, Dots, Rings };

std::string pattern_name(PatternType p);
PatternType parse_pattern(const std::string& name);

struct InstanceSpec {
    std::string id;
    PatternType pattern = PatternType::Stripes;
    double base_hue = 0;       // [0,1)
    double secondary_hue = 0;  // [0,1)
    double pattern_scale = 2;  // pattern periods across the glyph
    int canonical_size = 32;   // pixels

    Rgb primary_color() const;
    Rgb secondary_color() const;
    // Whether normalized glyph position (u,v) in [0,1)^2 takes the primary color.
    bool primary_at(double u, double v) const;
};

struct Annotation {
    std::string instance_id;
    Box box;
    double occlusion = 0;  // fraction of glyph pixels hidden by distractors
};

struct SceneRecord {
    std::string image;  // relative to the manifest directory
    std::vector<Annotation> annotations;
    int distractors = 0;

    std::vector<Box> boxes_of(const std::string& instance_id) const;
};

struct GenConfig {
    int num_instances = 8;
    int num_scenes = 200;
    int image_size = 128;
    int target_size = 64;
    int canonical_size = 32;
    double scale_min = 0.75;
    double scale_max = 1.5;
    double max_occlusion = 0.4;
    int distractors = 3;           // max occluding distractors per scene
    int clutter = 6;               // max background rectangles per scene
    int max_instances_per_scene = 3;
    double absence_rate = 0.3;     // fraction of scenes with no instances
    double test_fraction = 0.2;
    int num_views = 2;
    int num_holdout = 0;           // last ids excluded from every train scene
    int stride = 8;                // image_size and target_size must be multiples
    std::uint64_t seed = 0;

    void validate() const;
};

nlohmann::json gen_config_to_json(const GenConfig& c);
GenConfig gen_config_from_json(const nlohmann::json& j);

struct DatasetManifest {
    int format_version = kManifestFormatVersion;
    std::uint64_t generation_seed = 0;
    GenConfig config;
    int image_size = 0;
    std::vector<InstanceSpec> instances;
    std::map<std::string, std::vector<std::string>> targets;
    std::vector<std::string> held_out;
    std::vector<SceneRecord> train;
    std::vector<SceneRecord> test;

    const std::vector<SceneRecord>& split(const std::string& name) const;
    std::vector<std::string> instance_ids() const;
};

nlohmann::json manifest_to_json(const DatasetManifest& m);
DatasetManifest manifest_from_json(const nlohmann::json& j);

// Empty result means valid. With a base directory every referenced file must exist.
std::vector<std::string> validate_manifest(const DatasetManifest& m, const std::filesystem::path& base_dir = {});

void save_manifest(const std::filesystem::path& path, const DatasetManifest& m);
// Parses and validates; throws ManifestError listing every problem.
DatasetManifest load_manifest(const std::filesystem::path& path);

// Deterministic instance palette/pattern table for a config.
std::vector<InstanceSpec> make_instances(const GenConfig& config);

struct RenderedScene {
    RgbImage image;
    SceneRecord record;
};

// Scene `index` of the dataset; independent of every other scene.
RenderedScene render_scene(const GenConfig& config, const std::vector<InstanceSpec>& instances, int index,
                           bool train_split);

// Glyph on a uniform background; view v > 0 is horizontally sheared by 0.25 * v.
RgbImage render_target(const GenConfig& config, const InstanceSpec& instance, int view);

// Writes the full tree under root and returns the manifest.
DatasetManifest generate_dataset(const GenConfig& config, const std::filesystem::path& root);

// Manifest plus decoded images for training and evaluation.
struct LoadedDataset {
    DatasetManifest manifest;
    std::filesystem::path root;
    std::vector<Tensorf> train_images;
    std::vector<Tensorf> test_images;
    std::map<std::string, std::vector<Tensorf>> target_images;

    const std::vector<Tensorf>& images(const std::string& split) const;
};

// Accepts the dataset directory or its manifest.json. Images are padded to the stride.
LoadedDataset load_dataset(const std::filesystem::path& path, std::size_t stride);

}  // namespace tdid
