#include "doctest.h"

#include <sstream>

#include "json.hpp"
#include "support.hpp"
#include "tdid/cli.hpp"

using namespace tdid;
namespace fs = std::filesystem;

namespace {

struct Run {
    int code;
    std::string out, err;
};

Run cli(std::vector<std::string> args) {
    std::ostringstream out, err;
    const int code = run_cli(args, out, err);
    return {code, out.str(), err.str()};
}

std::vector<nlohmann::json> json_lines(const std::string& s) {
    std::vector<nlohmann::json> out;
    std::istringstream in(s);
    for (std::string line; std::getline(in, line);) {
        if (!line.empty() && line[0] == '{') out.push_back(nlohmann::json::parse(line));
    }
    return out;
}

}  // namespace

TEST_CASE("usage errors exit 2") {
    CHECK(cli({}).code == kExitUsage);
    CHECK(cli({"train"}).code == kExitUsage);
    CHECK(cli({"frobnicate"}).code == kExitUsage);
    CHECK(cli({"gen-data", "--out", "x", "--seed", "abc"}).code == kExitUsage);
    const auto help = cli({"--help"});
    CHECK(help.code == kExitOk);
    CHECK(help.out.find("gen-data") != std::string::npos);
    CHECK(cli({"eval", "--help"}).code == kExitOk);
}

TEST_CASE("runtime errors exit 1") {
    const auto r = cli({"eval", "--dataset", "/nonexistent/ds", "--checkpoint", "/nonexistent/m.ckpt"});
    CHECK(r.code == kExitFailure);
    CHECK_FALSE(r.err.empty());
}

TEST_CASE("selfcheck passes") {
    const auto r = cli({"selfcheck", "--cases", "100"});
    CHECK(r.code == kExitOk);
    CHECK(r.out.find("FAIL") == std::string::npos);
}

TEST_CASE("gen-data, train, eval, detect round") {
    const auto root = tdid::testing::scratch_dir("cli");
    const auto ds = (root / "ds").string();
    const auto g = cli({"gen-data", "--out", ds, "--seed", "2", "--num-instances", "3", "--num-scenes", "10",
                        "--image-size", "64"});
    REQUIRE(g.code == kExitOk);
    const auto summary = json_lines(g.out).back();
    CHECK(summary["instances"] == 3);
    CHECK(summary["train_scenes"].get<int>() + summary["test_scenes"].get<int>() == 10);

    const auto again = (root / "ds2").string();
    REQUIRE(cli({"gen-data", "--out", again, "--seed", "2", "--num-instances", "3", "--num-scenes", "10",
                 "--image-size", "64"})
                .code == kExitOk);
    CHECK(tdid::testing::read_bytes(fs::path(ds) / "manifest.json") ==
          tdid::testing::read_bytes(fs::path(again) / "manifest.json"));

    const auto rc = root / "rc.json";
    std::ofstream(rc) << R"({"model": {"backbone_channels": [8, 16, 16], "backbone_stride": 4, "feature_dim": 16},
                            "train": {"iterations": 4, "log_every": 2, "lr": 0.01}})";
    const auto ckpt = (root / "m.ckpt").string();
    const auto t = cli({"train", "--dataset", ds, "--config", rc.string(), "--out", ckpt});
    INFO(t.err);
    REQUIRE(t.code == kExitOk);
    const auto logs = json_lines(t.out);
    REQUIRE(logs.size() >= 3);
    CHECK(logs.back()["event"] == "checkpoint");
    CHECK(fs::exists(root / "m.json"));
    CHECK(fs::exists(root / "m.run.json"));

    const auto out_json = (root / "eval.json").string();
    const auto e = cli({"eval", "--dataset", ds, "--checkpoint", ckpt, "--split", "train", "--out", out_json});
    REQUIRE(e.code == kExitOk);
    CHECK(e.out.find("mAP") != std::string::npos);
    const auto ej = nlohmann::json::parse(tdid::testing::read_bytes(out_json));
    CHECK(ej["split"] == "train");
    CHECK(ej.contains("mAP"));
    CHECK(cli({"eval", "--dataset", ds, "--checkpoint", ckpt, "--split", "valid"}).code == kExitUsage);

    const auto dump = (root / "det.ppm").string();
    const auto scene = (fs::path(ds) / "scenes" / "000000.ppm").string();
    const auto d = cli({"detect", "--checkpoint", ckpt, "--scene", scene, "--target-id", "inst00", "--dump", dump});
    INFO(d.err);
    REQUIRE(d.code == kExitOk);
    CHECK(fs::exists(dump));
    const auto dj = nlohmann::json::parse(d.out);
    CHECK(dj["target_id"] == "inst00");
    CHECK(dj["detections"].is_array());
    CHECK(cli({"detect", "--checkpoint", ckpt, "--scene", scene, "--target-id", "zzz"}).code == kExitFailure);
}
