// Acceptance suite. Each criterion prints one PASS/FAIL line; the exit code is
// nonzero if any selected criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "tdid/check/gradcheck.hpp"
#include "tdid/check/oracles.hpp"
#include "tdid/cli.hpp"
#include "tdid/dataset.hpp"
#include "tdid/evaluator.hpp"
#include "tdid/postprocess.hpp"
#include "tdid/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace tdid;

namespace {

struct Outcome {
    bool passed = false;
    std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

std::string read_bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

fs::path g_work;

fs::path fresh_dir(const std::string& name) {
    const auto p = g_work / name;
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

struct CliRun {
    int code;
    std::string out, err;
};

CliRun cli(const std::vector<std::string>& args) {
    std::ostringstream out, err;
    const int code = run_cli(args, out, err);
    return {code, out.str(), err.str()};
}

void write_json(const fs::path& p, const json& j) { std::ofstream(p) << j.dump(2) << "\n"; }

// Desk-scale model used by the training criteria (N=32 at 128x128).
// square glyphs of 24-48 px at 128 px scenes
json desk_model() {
    return {{"backbone_channels", {16, 32, 32, 32}},
            {"feature_dim", 32},
            {"anchor_scales", {24, 32, 40, 48}},
            {"anchor_ratios", {1}}};
}

// ---- 1 --------------------------------------------------------------------

Outcome gradient_suite() {
    const auto t0 = Clock::now();
    const auto ops = check::gradcheck_ops(101, 100);
    const auto e2e = check::gradcheck_end_to_end(102, 14);
    const double secs = seconds_since(t0);
    Outcome o;
    o.passed = ops.cases >= 100 && ops.max_error < 1e-4 && e2e.max_error < 1e-3 && secs < 120;
    o.detail = std::to_string(ops.cases) + " op cases, max " + fmt("%.2e", ops.max_error) + " at " + ops.worst_case +
               "; " + std::to_string(e2e.cases) + " end-to-end, max " + fmt("%.2e", e2e.max_error) + "; " +
               fmt("%.1fs", secs);
    return o;
}

// ---- 2 --------------------------------------------------------------------

Outcome oracle_equivalence() {
    const auto t0 = Clock::now();
    const std::vector<std::pair<std::string, check::OracleStats>> runs{
        {"nms", check::compare_nms(201, 1000)},
        {"iou", check::compare_iou(202, 1000)},
        {"assignment", check::compare_assignment(203, 1000)},
        {"matching", check::compare_matching(204, 1000)},
    };
    const double secs = seconds_since(t0);
    Outcome o;
    o.passed = secs < 60;
    for (const auto& [name, st] : runs) {
        o.passed = o.passed && st.ok() && st.cases == 1000;
        o.detail += name + " " + std::to_string(st.cases - st.mismatches) + "/" + std::to_string(st.cases);
        if (!st.first_mismatch.empty()) o.detail += " [" + st.first_mismatch + "]";
        o.detail += "; ";
    }
    o.detail += fmt("%.1fs", secs);
    return o;
}

// ---- 3 --------------------------------------------------------------------

Box box_of(const json& j) { return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()}; }

Outcome ap_fixtures() {
    Outcome o;
    bool ok = true;
    auto near = [](double a, double b) { return std::abs(a - b) <= 1e-9; };
    const auto ap1 = average_precision({{0.9, true}, {0.8, false}}, 1);
    const auto ap2 = average_precision({{0.9, false}, {0.8, true}}, 1);
    ok = ok && ap1 && near(*ap1, 1.0) && ap2 && near(*ap2, 0.5);
    o.detail = "[TP,FP] " + fmt("%.9f", ap1.value_or(-1)) + ", [FP,TP] " + fmt("%.9f", ap2.value_or(-1));

    std::ifstream in(std::string(TDID_FIXTURE_DIR) + "/eval_hand.json");
    const auto fx = json::parse(in);
    std::vector<SceneRecord> scenes;
    for (const auto& s : fx["scenes"]) {
        SceneRecord r;
        r.image = s["image"];
        for (const auto& a : s["annotations"]) r.annotations.push_back({a["instance_id"], box_of(a["box"]), 0.0});
        scenes.push_back(r);
    }
    std::map<std::pair<std::string, std::size_t>, std::vector<Detection>> grouped;
    for (const auto& d : fx["detections"]) {
        grouped[{d["instance_id"], d["scene"]}].push_back({box_of(d["box"]), d["score"].get<double>(), d["instance_id"]});
    }
    std::vector<PairDetections> pairs;
    for (auto& [k, v] : grouped) pairs.push_back({k.first, k.second, v});
    const auto r = evaluate_pairs(pairs, scenes, {"A", "B"}, {bucket_all(), bucket_large()});
    const auto& ex = fx["expected"];
    ok = ok && near(r.mAP, ex["mAP"].get<double>());
    for (const auto& [id, v] : ex["per_instance"].items()) ok = ok && near(r.per_instance.at(id), v.get<double>());
    ok = ok && r.buckets.size() == ex["buckets"].size();
    for (const auto& [name, v] : ex["buckets"].items()) ok = ok && r.buckets.count(name) && near(r.buckets.at(name), v.get<double>());
    ok = ok && r.counts.tp == ex["counts"]["tp"].get<std::size_t>() && r.counts.fp == ex["counts"]["fp"].get<std::size_t>();
    o.detail += "; fixture mAP " + fmt("%.9f", r.mAP);

    // Ground truth fed back as detections on a generated test split.
    GenConfig gc;
    gc.seed = 3;
    const auto root = fresh_dir("c3_data");
    const auto m = generate_dataset(gc, root);
    std::vector<PairDetections> oracle;
    std::vector<double> areas;
    for (std::size_t s = 0; s < m.test.size(); ++s) {
        for (const auto& id : m.instance_ids()) {
            PairDetections p{id, s, {}};
            const auto boxes = m.test[s].boxes_of(id);
            for (std::size_t k = 0; k < boxes.size(); ++k) {
                p.detections.push_back({boxes[k], 1.0 - 0.01 * static_cast<double>(k), id});
                areas.push_back(boxes[k].area());
            }
            oracle.push_back(p);
        }
    }
    auto buckets = quartile_buckets(areas);
    buckets.push_back(bucket_all());
    buckets.push_back(bucket_large());
    const auto g = evaluate_pairs(oracle, m.test, m.instance_ids(), buckets);
    bool all_one = g.mAP == 1.0 && !g.buckets.empty();
    for (const auto& [_, v] : g.buckets) all_one = all_one && v == 1.0;
    ok = ok && all_one;
    o.detail += "; GT oracle mAP " + fmt("%.17g", g.mAP) + " over " + std::to_string(g.counts.gt) + " GTs, " +
                std::to_string(g.buckets.size()) + " buckets";
    o.passed = ok;
    return o;
}

// ---- 4 --------------------------------------------------------------------

Outcome overfit() {
    const auto t0 = Clock::now();
    GenConfig gc;
    gc.num_instances = 2;
    gc.num_scenes = 4;
    gc.image_size = 96;
    gc.target_size = 32;
    gc.scale_min = 1.75;
    gc.scale_max = 2.0;
    gc.test_fraction = 0;
    gc.absence_rate = 0;
    gc.seed = 4;
    const auto root = fresh_dir("c4_data");
    generate_dataset(gc, root);
    RunConfig rc;  // default CC+DIFF architecture
    rc.train.iterations = 500;
    rc.train.full_batch = true;
    rc.train.lr = 0.02;
    rc.train.warmup_iterations = 300;
    rc.train.seed = 4;
    // every non-ignored anchor enters the loss
    rc.train.loss.batch_size = anchors_for(rc.model, 96, 96).size();
    const auto ds = load_dataset(root, static_cast<std::size_t>(rc.model.backbone_stride));
    EvalOptions eo;
    eo.split = "train";
    double best = 0;
    int reached = -1;
    const auto result = train_model(ds, rc, {}, [&](int done, const ModelF& model) {
        if (done % 10 != 0) return false;
        const auto cache = build_cache(model, ds.target_images);
        const double v = evaluate(model, ds, cache, {}, eo).mAP;
        best = std::max(best, v);
        if (v == 1.0) reached = done;
        return v == 1.0;
    });
    bool monotone = result.history.size() >= 50;
    int first_rise = -1;
    for (std::size_t i = 1; i < std::min<std::size_t>(50, result.history.size()); ++i) {
        if (!(result.history[i].total < result.history[i - 1].total)) {
            monotone = false;
            if (first_rise < 0) first_rise = static_cast<int>(i);
        }
    }
    const double secs = seconds_since(t0);
    Outcome o;
    o.passed = reached > 0 && reached <= 500 && monotone && secs < 300;
    o.detail = (reached > 0 ? "mAP 1.0 at iteration " + std::to_string(reached) : "best mAP " + fmt("%.4f", best)) +
               "; loss " + fmt("%.4f", result.history.front().total) + " -> " +
               fmt("%.4f", result.history.size() >= 50 ? result.history[49].total : result.history.back().total) +
               " over 50 steps, " + (monotone ? "monotone" : "rises at step " + std::to_string(first_rise)) + "; " +
               fmt("%.1fs", secs);
    return o;
}

// ---- 5 --------------------------------------------------------------------

constexpr int kAblationIterations = 8000;

Outcome ablation() {
    const auto t0 = Clock::now();
    const auto dir = fresh_dir("c5");
    const auto data = (dir / "data").string();
    Outcome o;
    auto g = cli({"gen-data", "--out", data, "--seed", "1", "--num-instances", "8", "--num-scenes", "200",
                  "--image-size", "128"});
    if (g.code != 0) return {false, "gen-data failed: " + g.err};
    write_json(dir / "run.json", {{"model", desk_model()},
                                  {"train",
                                   {{"iterations", kAblationIterations},
                                    {"lr", 0.01},
                                    {"warmup_iterations", 500},
                                    {"lr_decay_step", kAblationIterations * 7 / 8},
                                    {"log_every", 1000000}}}});
    const auto ck = dir / "ckpt";
    fs::create_directories(ck);
    auto a = cli({"ablate", "--dataset", data, "--config", (dir / "run.json").string(), "--seed", "1", "--out",
                  (dir / "ablation.json").string(), "--checkpoints", ck.string()});
    if (a.code != 0) return {false, "ablate failed: " + a.err};
    std::cout << a.out;
    const auto res = json::parse(read_bytes(dir / "ablation.json"));
    std::map<std::string, double> all;
    for (const auto& row : res["rows"]) all[row["features"]] = row["mAP"]["All"].get<double>();
    const double ccdiff = all.at("CC+DIFF"), img = all.at("IMG"), cc = all.at("CC"), diff = all.at("DIFF");

    // IMG-only outputs must not depend on the target images at all.
    const auto model = load_model(ck / "IMG.ckpt");
    const auto ds = load_dataset(data, static_cast<std::size_t>(model.config().backbone_stride));
    bool invariant = true;
    const auto ids = ds.manifest.instance_ids();
    NoGradGuard no_grad;
    for (std::size_t s = 0; s < 5; ++s) {
        const auto scene = as_batch(ds.test_images[s]);
        std::vector<Tensorf> ref_t;
        for (const auto& t : ds.target_images.at(ids[0])) ref_t.push_back(as_batch(t));
        const auto ref = forward(model, scene, ref_t);
        for (std::size_t k = 1; k < ids.size(); ++k) {
            std::vector<Tensorf> t;
            for (const auto& v : ds.target_images.at(ids[k])) t.push_back(as_batch(v));
            const auto h = forward(model, scene, t);
            invariant = invariant &&
                        std::equal(ref.cls_logits.data().begin(), ref.cls_logits.data().end(), h.cls_logits.data().begin()) &&
                        std::equal(ref.reg_deltas.data().begin(), ref.reg_deltas.data().end(), h.reg_deltas.data().begin());
        }
    }
    const double secs = seconds_since(t0);
    o.passed = ccdiff >= img + 0.30 && diff >= cc - 0.05 && invariant && secs < 3600;
    o.detail = "CC+DIFF " + fmt("%.4f", ccdiff) + " vs IMG " + fmt("%.4f", img) + " (gap " + fmt("%.4f", ccdiff - img) +
               ", need 0.30); DIFF " + fmt("%.4f", diff) + " vs CC " + fmt("%.4f", cc) + "; IMG target-invariant " +
               (invariant ? "yes" : "no") + "; " + fmt("%.0fs", secs);
    return o;
}

// ---- 6 --------------------------------------------------------------------

Outcome holdout() {
    const auto t0 = Clock::now();
    const auto dir = fresh_dir("c6");
    const auto data = (dir / "data").string();
    auto g = cli({"gen-data", "--out", data, "--seed", "6", "--num-instances", "10", "--num-holdout", "2",
                  "--num-scenes", "500", "--image-size", "128"});
    if (g.code != 0) return {false, "gen-data failed: " + g.err};
    write_json(dir / "run.json", {{"model", desk_model()},
                                  {"train",
                                   {{"iterations", kAblationIterations},
                                    {"lr", 0.01},
                                    {"warmup_iterations", 500},
                                    {"lr_decay_step", kAblationIterations * 7 / 8},
                                    {"log_every", 1000000}}}});
    const auto ckpt = (dir / "model.ckpt").string();
    auto t = cli({"train", "--dataset", data, "--config", (dir / "run.json").string(), "--seed", "6", "--out", ckpt});
    if (t.code != 0) return {false, "train failed: " + t.err};
    const auto m = load_manifest(fs::path(data) / "manifest.json");
    std::string held;
    for (const auto& h : m.held_out) held += (held.empty() ? "" : ",") + h;
    const auto out = (dir / "eval_holdout.json").string();
    auto e = cli({"eval", "--dataset", data, "--checkpoint", ckpt, "--instances", held, "--out", out});
    if (e.code != 0) return {false, "eval failed: " + e.err};
    std::cout << e.out;
    const auto r = json::parse(read_bytes(out));
    const double v = r["mAP"].get<double>();
    const double secs = seconds_since(t0);
    Outcome o;
    o.passed = m.held_out.size() == 2 && v >= 0.30 && secs < 1800;
    o.detail = "held-out " + held + " mAP " + fmt("%.4f", v) + " over " + std::to_string(r["counts"]["gt"].get<int>()) +
               " GTs (need 0.30); " + fmt("%.0fs", secs);
    return o;
}

// ---- 7 --------------------------------------------------------------------

Outcome shared_speedup() {
    const ModelConfig cfg;  // default architecture
    const auto model = ModelF::init(cfg, 7);
    GenConfig gc;
    gc.num_instances = 10;
    gc.num_scenes = 3;
    gc.seed = 7;
    const auto root = fresh_dir("c7_data");
    generate_dataset(gc, root);
    const auto ds = load_dataset(root, static_cast<std::size_t>(cfg.backbone_stride));
    const auto ids = ds.manifest.instance_ids();
    const auto cache = build_cache(model, ds.target_images);
    DetectOptions opt;
    opt.score_threshold = 0.0;  // keep every scene non-trivial so outputs are compared in full

    bool identical = ids.size() == 10;
    double shared = 1e30, independent = 1e30;
    for (int rep = 0; rep < 3; ++rep) {
        for (std::size_t s = 0; s < ds.test_images.size() + ds.train_images.size(); ++s) {
            const auto& scene = s < ds.train_images.size() ? ds.train_images[s] : ds.test_images[s - ds.train_images.size()];
            auto t0 = Clock::now();
            const auto all = detect_all(model, scene, ids, cache, opt);
            shared = std::min(shared, seconds_since(t0));

            t0 = Clock::now();
            std::map<std::string, std::vector<Detection>> each;
            for (const auto& id : ids) {
                // Full pass: target backbones and scene backbone rerun for this id alone.
                const auto own = build_cache(model, {{id, ds.target_images.at(id)}});
                each[id] = detect(model, scene, id, own, opt);
            }
            independent = std::min(independent, seconds_since(t0));
            for (const auto& id : ids) {
                const auto& a = all.at(id);
                const auto& b = each.at(id);
                identical = identical && a.size() == b.size() && !a.empty();
                for (std::size_t i = 0; identical && i < a.size(); ++i) {
                    identical = a[i].box == b[i].box && a[i].score == b[i].score;
                }
            }
        }
    }
    Outcome o;
    const double speedup = independent / shared;
    o.passed = speedup >= 2.0 && identical;
    o.detail = "detect_all " + fmt("%.1fms", shared * 1e3) + " vs 10 full passes " + fmt("%.1fms", independent * 1e3) +
               " (" + fmt("%.2fx", speedup) + "); detections " + (identical ? "bitwise identical" : "DIFFER");
    return o;
}

// ---- 8 --------------------------------------------------------------------

Outcome determinism() {
    Outcome o;
    bool ok = true;
    std::vector<std::string> notes;
    auto tree_equal = [](const fs::path& a, const fs::path& b) {
        std::set<std::string> fa, fb;
        for (const auto& e : fs::recursive_directory_iterator(a))
            if (e.is_regular_file()) fa.insert(fs::relative(e.path(), a).string());
        for (const auto& e : fs::recursive_directory_iterator(b))
            if (e.is_regular_file()) fb.insert(fs::relative(e.path(), b).string());
        if (fa != fb || fa.empty()) return false;
        for (const auto& f : fa) {
            if (read_bytes(a / f) != read_bytes(b / f)) return false;
        }
        return true;
    };
    std::vector<fs::path> runs;
    std::vector<std::string> outputs[3];
    for (int r = 0; r < 2; ++r) {
        const auto dir = fresh_dir("c8_run" + std::to_string(r));
        runs.push_back(dir);
        const auto data = (dir / "data").string();
        const auto g = cli({"gen-data", "--out", data, "--seed", "8", "--num-instances", "4", "--num-scenes", "20",
                            "--image-size", "64"});
        write_json(dir / "run.json", {{"model", {{"backbone_channels", {8, 16, 16, 16}}, {"feature_dim", 16}}},
                                      {"train", {{"iterations", 30}, {"lr", 0.01}, {"log_every", 10}}}});
        const auto t = cli({"train", "--dataset", data, "--config", (dir / "run.json").string(), "--seed", "8",
                            "--out", (dir / "model.ckpt").string()});
        const auto e = cli({"eval", "--dataset", data, "--checkpoint", (dir / "model.ckpt").string(), "--buckets",
                            "all,large,quartiles", "--out", (dir / "eval.json").string()});
        ok = ok && g.code == 0 && t.code == 0 && e.code == 0;
        // Paths differ between the runs; everything else must match.
        auto strip = [&](std::string s) {
            for (std::size_t p; (p = s.find(dir.string())) != std::string::npos;) s.replace(p, dir.string().size(), "<dir>");
            return s;
        };
        outputs[0].push_back(strip(g.out));
        outputs[1].push_back(strip(t.out));
        outputs[2].push_back(strip(e.out));
    }
    const bool data_same = tree_equal(runs[0] / "data", runs[1] / "data");
    const char* names[] = {"model.ckpt", "model.json", "model.run.json", "eval.json"};
    bool artifacts_same = true;
    for (const auto* n : names) {
        const auto a = read_bytes(runs[0] / n), b = read_bytes(runs[1] / n);
        const bool same = !a.empty() && a == b;
        if (!same) notes.push_back(std::string(n) + " differs");
        artifacts_same = artifacts_same && same;
    }
    bool stdout_same = true;
    for (auto& v : outputs) stdout_same = stdout_same && v[0] == v[1];
    o.passed = ok && data_same && artifacts_same && stdout_same;
    o.detail = std::string("gen-data tree ") + (data_same ? "identical" : "DIFFERS") + "; checkpoint, sidecars, eval " +
               (artifacts_same ? "identical" : "DIFFER") + "; stdout " + (stdout_same ? "identical" : "DIFFERS");
    for (const auto& n : notes) o.detail += "; " + n;
    return o;
}

struct Criterion {
    int id;
    const char* name;
    std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"TDID acceptance suite", "tdid_acceptance"};
    std::vector<int> selected;
    std::string work = TDID_ACCEPTANCE_WORK;
    app.add_option("--criterion", selected, "Criterion numbers to run (default: all)")->check(CLI::Range(1, 8));
    app.add_option("--work", work, "Scratch directory")->capture_default_str();
    CLI11_PARSE(app, argc, argv);
    g_work = work;
    fs::create_directories(g_work);

    const std::vector<Criterion> all{
        {1, "gradient suite", gradient_suite},
        {2, "oracle equivalence", oracle_equivalence},
        {3, "AP fixtures", ap_fixtures},
        {4, "overfit smoke test", overfit},
        {5, "ablation trend", ablation},
        {6, "held-out generalization", holdout},
        {7, "shared-computation speedup", shared_speedup},
        {8, "determinism", determinism},
    };
    if (selected.empty()) {
        for (const auto& c : all) selected.push_back(c.id);
    }
    bool ok = true;
    for (const auto& c : all) {
        if (std::find(selected.begin(), selected.end(), c.id) == selected.end()) continue;
        Outcome r;
        try {
            r = c.run();
        } catch (const std::exception& e) {
            r = {false, std::string("exception: ") + e.what()};
        }
        std::cout << (r.passed ? "PASS" : "FAIL") << " criterion " << c.id << " " << c.name << ": " << r.detail
                  << std::endl;
        ok = ok && r.passed;
    }
    return ok ? 0 : 1;
}
