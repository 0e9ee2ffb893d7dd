#include "tdid/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "tdid/check/selfcheck.hpp"
#include "tdid/dataset.hpp"
#include "tdid/error.hpp"
#include "tdid/evaluator.hpp"
#include "tdid/image.hpp"
#include "tdid/postprocess.hpp"
#include "tdid/train.hpp"

namespace tdid {

namespace fs = std::filesystem;
using nlohmann::json;

int worker_threads() {
    const char* v = std::getenv("TDID_THREADS");
    if (!v || !*v) return 1;
    char* end = nullptr;
    const long n = std::strtol(v, &end, 10);
    if (*end != '\0' || n < 1) throw ConfigError(std::string("TDID_THREADS must be a positive integer, got '") + v + "'");
    return static_cast<int>(std::min(n, 256L));
}

namespace {

json read_json_file(const fs::path& path) {
    const auto bytes = read_file_bytes(path);
    try {
        return json::parse(bytes.begin(), bytes.end());
    } catch (const json::parse_error& e) {
        throw ParseError("cannot parse " + path.string() + ": " + e.what(), e.byte);
    }
}

void write_text(const fs::path& path, const std::string& text) {
    write_file_bytes(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", v);
    return buf;
}

std::string pad(std::string s, std::size_t width) {
    if (s.size() < width) s.append(width - s.size(), ' ');
    return s;
}

json detections_to_json(const std::vector<Detection>& dets) {
    json arr = json::array();
    for (const auto& d : dets) {
        arr.push_back({{"box", {d.box.x1, d.box.y1, d.box.x2, d.box.y2}}, {"score", d.score}, {"target_id", d.target_id}});
    }
    return arr;
}

TargetFeatureCache cache_for(const ModelF& model, const LoadedDataset& data, const std::vector<std::string>& ids) {
    std::map<std::string, std::vector<Tensorf>> targets;
    for (const auto& id : ids) {
        auto it = data.target_images.find(id);
        if (it == data.target_images.end()) throw MissingTargetError("no target images for instance '" + id + "'");
        targets[id] = it->second;
    }
    return build_cache(model, targets);
}

std::vector<SizeBucket> make_buckets(const std::vector<std::string>& names, const std::vector<SceneRecord>& scenes) {
    std::vector<SizeBucket> out;
    for (const auto& n : names) {
        if (n == "all") {
            out.push_back(bucket_all());
        } else if (n == "large") {
            out.push_back(bucket_large());
        } else if (n == "quartiles") {
            std::vector<double> areas;
            for (const auto& s : scenes) {
                for (const auto& a : s.annotations) areas.push_back(a.box.area());
            }
            if (areas.empty()) continue;
            for (auto& b : quartile_buckets(areas)) out.push_back(std::move(b));
        } else {
            throw ConfigError("unknown bucket '" + n + "' (expected all, large or quartiles)");
        }
    }
    return out;
}

void print_eval_table(std::ostream& out, const EvalResult& r) {
    out << pad("instance", 20) << "AP\n";
    for (const auto& [id, ap] : r.per_instance) out << pad(id, 20) << fmt(ap) << "\n";
    out << pad("mAP", 20) << fmt(r.mAP) << "\n";
    for (const auto& [name, v] : r.buckets) out << pad("bucket:" + name, 20) << fmt(v) << "\n";
    out << "tp " << r.counts.tp << " fp " << r.counts.fp << " fn " << r.counts.fn << " gt " << r.counts.gt << "\n";
}

RunConfig load_run_config(const std::string& path) {
    if (path.empty()) return {};
    return run_config_from_json(read_json_file(path));
}

struct GenFlags {
    std::string out, config;
    std::uint64_t seed = 0;
    std::optional<int> num_instances, num_scenes, image_size, num_holdout;
};

int cmd_gen_data(const GenFlags& f, std::ostream& out) {
    GenConfig cfg = f.config.empty() ? GenConfig{} : gen_config_from_json(read_json_file(f.config));
    cfg.seed = f.seed;
    if (f.num_instances) cfg.num_instances = *f.num_instances;
    if (f.num_scenes) cfg.num_scenes = *f.num_scenes;
    if (f.image_size) cfg.image_size = *f.image_size;
    if (f.num_holdout) cfg.num_holdout = *f.num_holdout;
    const auto m = generate_dataset(cfg, f.out);
    std::size_t annotations = 0, empty = 0;
    for (const auto* split : {&m.train, &m.test}) {
        for (const auto& s : *split) {
            annotations += s.annotations.size();
            empty += s.annotations.empty();
        }
    }
    out << json{{"event", "gen_data"},
                {"out", f.out},
                {"instances", m.instances.size()},
                {"train_scenes", m.train.size()},
                {"test_scenes", m.test.size()},
                {"annotations", annotations},
                {"empty_scenes", empty},
                {"held_out", m.held_out}}
               .dump()
        << "\n";
    return kExitOk;
}

struct TrainFlags {
    std::string dataset, config, out, holdout_ids;
    std::optional<std::uint64_t> seed;
    std::optional<int> iters;
    bool holdout_given = false;
};

fs::path run_config_path(const fs::path& checkpoint) {
    auto p = checkpoint;
    p.replace_extension(".run.json");
    return p;
}

int cmd_train(const TrainFlags& f, std::ostream& out) {
    RunConfig rc = load_run_config(f.config);
    if (f.seed) rc.train.seed = *f.seed;
    if (f.iters) rc.train.iterations = *f.iters;
    const auto data = load_dataset(f.dataset, static_cast<std::size_t>(rc.model.backbone_stride));
    if (f.holdout_given) {
        rc.train.holdout_ids = split_list(f.holdout_ids);
    } else if (rc.train.holdout_ids.empty()) {
        rc.train.holdout_ids = data.manifest.held_out;
    }
    auto result = train_model(data, rc, [&](const json& line) { out << line.dump() << "\n" << std::flush; });
    save_model(f.out, result.model);
    write_text(run_config_path(f.out), run_config_to_json(rc).dump(2) + "\n");
    const double final_loss = result.history.empty() ? 0.0 : result.history.back().total;
    out << json{{"event", "checkpoint"}, {"path", f.out}, {"iterations", rc.train.iterations}, {"final_loss", final_loss}}
               .dump()
        << "\n";
    return kExitOk;
}

struct EvalFlags {
    std::string dataset, checkpoint, split = "test", buckets = "all,large", out, instances;
};

int cmd_eval(const EvalFlags& f, std::ostream& out) {
    const auto model = load_model(f.checkpoint);
    const auto data = load_dataset(f.dataset, static_cast<std::size_t>(model.config().backbone_stride));
    EvalOptions opts;
    opts.split = f.split;
    opts.instance_ids = split_list(f.instances);
    if (opts.instance_ids.empty()) {
        for (const auto& [id, _] : data.target_images) opts.instance_ids.push_back(id);
    }
    opts.threads = worker_threads();
    const auto& scenes = data.manifest.split(f.split);
    const auto cache = cache_for(model, data, opts.instance_ids);
    const auto result = evaluate(model, data, cache, make_buckets(split_list(f.buckets), scenes), opts);
    print_eval_table(out, result);
    if (!f.out.empty()) {
        json j = eval_result_to_json(result);
        j["split"] = f.split;
        j["instance_ids"] = opts.instance_ids;
        j["iou_threshold"] = opts.iou_threshold;
        j["detect"] = {{"score_threshold", opts.detect.score_threshold},
                       {"nms_iou", opts.detect.nms_iou},
                       {"max_detections", opts.detect.max_detections}};
        j["model"] = config_to_json(model.config());
        write_text(f.out, j.dump(2) + "\n");
    }
    return kExitOk;
}

struct DetectFlags {
    std::string checkpoint, scene, target_id, dump, dataset;
};

fs::path find_dataset_root(const fs::path& scene) {
    for (auto dir = fs::absolute(scene).parent_path(); !dir.empty(); dir = dir.parent_path()) {
        if (fs::exists(dir / "manifest.json")) return dir;
        if (dir == dir.root_path()) break;
    }
    throw ConfigError("no manifest.json above " + scene.string() + "; pass --dataset");
}

int cmd_detect(const DetectFlags& f, std::ostream& out) {
    const auto model = load_model(f.checkpoint);
    const auto stride = static_cast<std::size_t>(model.config().backbone_stride);
    const fs::path root = f.dataset.empty() ? find_dataset_root(f.scene) : fs::path(f.dataset);
    const auto manifest = load_manifest(fs::is_directory(root) ? root / "manifest.json" : root);
    const fs::path base = fs::is_directory(root) ? root : root.parent_path();
    auto it = manifest.targets.find(f.target_id);
    if (it == manifest.targets.end()) throw MissingTargetError("no target images for instance '" + f.target_id + "'");
    std::map<std::string, std::vector<Tensorf>> targets;
    for (const auto& rel : it->second) targets[f.target_id].push_back(pad_to_stride(load_image(base / rel), stride));
    const auto cache = build_cache(model, targets);

    const auto raw = read_ppm(f.scene);
    const auto dets = detect(model, pad_to_stride(image_to_tensor(raw), stride), f.target_id, cache);
    out << json{{"scene", f.scene}, {"target_id", f.target_id}, {"detections", detections_to_json(dets)}}.dump() << "\n";
    if (!f.dump.empty()) {
        auto canvas = raw;
        const Rgb red{255, 0, 0};
        for (const auto& d : dets) {
            draw_rectangle(canvas, d.box, red, 1);
            char label[16];
            std::snprintf(label, sizeof label, "%.2f", d.score);
            draw_text(canvas, std::lround(d.box.x1) + 2, std::max(0L, std::lround(d.box.y1) - 7), label, red);
        }
        write_ppm(f.dump, canvas);
    }
    return kExitOk;
}

struct AblateFlags {
    std::string dataset, config, out, checkpoints;
    std::uint64_t seed = 0;
    std::optional<int> iters;
};

int cmd_ablate(const AblateFlags& f, std::ostream& out) {
    RunConfig base = load_run_config(f.config);
    base.train.seed = f.seed;
    if (f.iters) base.train.iterations = *f.iters;
    const auto data = load_dataset(f.dataset, static_cast<std::size_t>(base.model.backbone_stride));
    if (base.train.holdout_ids.empty()) base.train.holdout_ids = data.manifest.held_out;
    std::vector<std::string> ids;
    for (const auto& [id, _] : data.target_images) ids.push_back(id);
    const auto buckets = make_buckets({"quartiles"}, data.manifest.test);
    std::vector<std::string> columns;
    for (const auto& b : buckets) columns.push_back(b.name);
    columns.push_back("All");

    EvalOptions opts;
    opts.instance_ids = ids;
    opts.threads = worker_threads();
    json rows = json::array();
    out << pad("features", 14);
    for (const auto& c : columns) out << pad(c, 13);
    out << "\n";
    for (const auto& feats : all_embed_combinations()) {
        RunConfig rc = base;
        rc.model.embed_features = feats;
        const auto trained = train_model(data, rc);
        if (!f.checkpoints.empty()) save_model(fs::path(f.checkpoints) / (feats.label() + ".ckpt"), trained.model);
        const auto cache = cache_for(trained.model, data, ids);
        const auto r = evaluate(trained.model, data, cache, buckets, opts);
        json cells;
        out << pad(feats.label(), 14);
        for (const auto& b : buckets) {
            auto it = r.buckets.find(b.name);
            cells[b.name] = it == r.buckets.end() ? json(nullptr) : json(it->second);
            out << pad(it == r.buckets.end() ? "-" : fmt(it->second), 13);
        }
        cells["All"] = r.mAP;
        out << pad(fmt(r.mAP), 13) << "\n" << std::flush;
        rows.push_back({{"features", feats.label()},
                        {"mAP", cells},
                        {"per_instance", r.per_instance},
                        {"final_loss", trained.history.empty() ? 0.0 : trained.history.back().total}});
    }
    if (!f.out.empty()) {
        write_text(f.out, json{{"columns", columns}, {"rows", rows}, {"config", run_config_to_json(base)}}.dump(2) + "\n");
    }
    return kExitOk;
}

int cmd_selfcheck(std::uint64_t seed, int cases, std::ostream& out) {
    bool ok = true;
    for (const auto& r : check::run_selfcheck(seed, cases)) {
        out << (r.passed ? "PASS " : "FAIL ") << r.name;
        if (!r.detail.empty()) out << " (" << r.detail << ")";
        out << "\n";
        ok = ok && r.passed;
    }
    return ok ? kExitOk : kExitFailure;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Target driven instance detection: data generation, training, evaluation and checks", "tdid"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "Print help for every subcommand");

    GenFlags gen;
    auto* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic dataset tree");
    gen_cmd->add_option("--out", gen.out, "Output directory")->required();
    gen_cmd->add_option("--seed", gen.seed, "Generation seed")->capture_default_str();
    gen_cmd->add_option("--config", gen.config, "GenConfig JSON file");
    gen_cmd->add_option("--num-instances", gen.num_instances, "Glyph instances");
    gen_cmd->add_option("--num-scenes", gen.num_scenes, "Scenes across both splits");
    gen_cmd->add_option("--image-size", gen.image_size, "Scene width and height");
    gen_cmd->add_option("--num-holdout", gen.num_holdout, "Instances kept out of every train scene");

    TrainFlags train;
    auto* train_cmd = app.add_subcommand("train", "Train a model on the train split");
    train_cmd->add_option("--dataset", train.dataset, "Dataset directory or manifest")->required();
    train_cmd->add_option("--config", train.config, "RunConfig JSON file");
    train_cmd->add_option("--seed", train.seed, "Training seed");
    train_cmd->add_option("--iters", train.iters, "Iterations")->check(CLI::NonNegativeNumber);
    train_cmd->add_option("--out", train.out, "Checkpoint path")->required();
    auto* holdout_opt = train_cmd->add_option("--holdout-ids", train.holdout_ids,
                                              "Comma-separated ids never used as queries (default: manifest held_out)");

    EvalFlags ev;
    auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a split");
    eval_cmd->add_option("--dataset", ev.dataset, "Dataset directory or manifest")->required();
    eval_cmd->add_option("--checkpoint", ev.checkpoint, "Checkpoint path")->required();
    eval_cmd->add_option("--split", ev.split, "train or test")->capture_default_str()->check(CLI::IsMember({"train", "test"}));
    eval_cmd->add_option("--buckets", ev.buckets, "Comma-separated: all, large, quartiles")->capture_default_str();
    eval_cmd->add_option("--out", ev.out, "EvalResult JSON path");
    eval_cmd->add_option("--instances", ev.instances, "Comma-separated instance ids (default: all)");

    DetectFlags det;
    auto* detect_cmd = app.add_subcommand("detect", "Detect one target in one scene");
    detect_cmd->add_option("--checkpoint", det.checkpoint, "Checkpoint path")->required();
    detect_cmd->add_option("--scene", det.scene, "Scene PPM")->required();
    detect_cmd->add_option("--target-id", det.target_id, "Instance id")->required();
    detect_cmd->add_option("--dump", det.dump, "Write the scene with detections drawn to this PPM");
    detect_cmd->add_option("--dataset", det.dataset, "Dataset holding the target images (default: search upward)");

    AblateFlags abl;
    auto* ablate_cmd = app.add_subcommand("ablate", "Train and evaluate all seven embedding feature combinations");
    ablate_cmd->add_option("--dataset", abl.dataset, "Dataset directory or manifest")->required();
    ablate_cmd->add_option("--seed", abl.seed, "Training seed")->capture_default_str();
    ablate_cmd->add_option("--iters", abl.iters, "Iterations per combination")->check(CLI::NonNegativeNumber);
    ablate_cmd->add_option("--config", abl.config, "Base RunConfig JSON file");
    ablate_cmd->add_option("--out", abl.out, "Result JSON path");
    ablate_cmd->add_option("--checkpoints", abl.checkpoints, "Directory for per-combination checkpoints");

    std::uint64_t check_seed = 0;
    int check_cases = 200;
    auto* check_cmd = app.add_subcommand("selfcheck", "Run gradient checks and brute-force oracles");
    check_cmd->add_option("--seed", check_seed, "Case seed")->capture_default_str();
    check_cmd->add_option("--cases", check_cases, "Randomized cases per check")->capture_default_str()->check(CLI::PositiveNumber);

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        return app.exit(e, out, err) == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (*gen_cmd) return cmd_gen_data(gen, out);
        if (*train_cmd) {
            train.holdout_given = holdout_opt->count() > 0;
            return cmd_train(train, out);
        }
        if (*eval_cmd) return cmd_eval(ev, out);
        if (*detect_cmd) return cmd_detect(det, out);
        if (*ablate_cmd) return cmd_ablate(abl, out);
        if (*check_cmd) return cmd_selfcheck(check_seed, check_cases, out);
    } catch (const TrainingDivergedError& e) {
        err << "error: " << e.what() << "\n" << e.diagnostics().dump() << "\n";
        return kExitFailure;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitFailure;
    }
    return kExitUsage;
}

}  // namespace tdid
