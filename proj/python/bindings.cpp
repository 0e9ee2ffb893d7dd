#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "tdid/anchors.hpp"
#include "tdid/cli.hpp"
#include "tdid/dataset.hpp"
#include "tdid/error.hpp"
#include "tdid/evaluator.hpp"
#include "tdid/image.hpp"
#include "tdid/postprocess.hpp"

namespace py = pybind11;
using namespace tdid;

namespace {

using BoxTuple = std::tuple<double, double, double, double>;

Box to_box(const BoxTuple& t) { return {std::get<0>(t), std::get<1>(t), std::get<2>(t), std::get<3>(t)}; }
BoxTuple from_box(const Box& b) { return {b.x1, b.y1, b.x2, b.y2}; }

py::list detections_to_py(const std::vector<Detection>& dets) {
    py::list out;
    for (const auto& d : dets) {
        py::dict e;
        e["box"] = from_box(d.box);
        e["score"] = d.score;
        e["target_id"] = d.target_id;
        out.append(e);
    }
    return out;
}

// Holds a model and the features of every registered target.
class Detector {
public:
    explicit Detector(const std::filesystem::path& checkpoint) : model_(load_model(checkpoint)) {}

    void set_targets(const std::map<std::string, std::vector<std::filesystem::path>>& views) {
        std::map<std::string, std::vector<Tensorf>> images;
        for (const auto& [id, paths] : views) {
            for (const auto& p : paths) images[id].push_back(load_image(p));
        }
        cache_ = build_cache(model_, images);
    }

    void set_targets_from_dataset(const std::filesystem::path& dataset) {
        const auto ds = load_dataset(dataset, stride());
        cache_ = build_cache(model_, ds.target_images);
    }

    std::vector<std::string> target_ids() const { return cache_.ids(); }

    py::list detect(const std::filesystem::path& scene, const std::string& target_id, double score_threshold) const {
        DetectOptions opt;
        opt.score_threshold = score_threshold;
        return detections_to_py(tdid::detect(model_, load_scene(scene), target_id, cache_, opt));
    }

    py::dict detect_all(const std::filesystem::path& scene, std::optional<std::vector<std::string>> ids,
                        double score_threshold) const {
        DetectOptions opt;
        opt.score_threshold = score_threshold;
        const auto all = tdid::detect_all(model_, load_scene(scene), ids ? *ids : cache_.ids(), cache_, opt);
        py::dict out;
        for (const auto& [id, dets] : all) out[py::str(id)] = detections_to_py(dets);
        return out;
    }

    py::dict config() const { return py::module_::import("json").attr("loads")(config_to_json(model_.config()).dump()); }

private:
    std::size_t stride() const { return static_cast<std::size_t>(model_.config().backbone_stride); }
    Tensorf load_scene(const std::filesystem::path& p) const { return pad_to_stride(load_image(p), stride()); }

    ModelF model_;
    TargetFeatureCache cache_;
};

py::object json_to_py(const nlohmann::json& j) { return py::module_::import("json").attr("loads")(j.dump()); }
nlohmann::json py_to_json(const py::object& o) {
    return nlohmann::json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Target driven instance detection";

    py::register_exception<Error>(m, "TdidError");

    m.def("iou", [](const BoxTuple& a, const BoxTuple& b) { return iou(to_box(a), to_box(b)); }, py::arg("a"),
          py::arg("b"));

    m.def(
        "nms",
        [](const std::vector<BoxTuple>& boxes, const std::vector<double>& scores, double iou_threshold,
           std::optional<std::size_t> max_keep) {
            if (boxes.size() != scores.size()) throw py::value_error("boxes and scores differ in length");
            std::vector<ScoredBox> c;
            for (std::size_t i = 0; i < boxes.size(); ++i) c.push_back({to_box(boxes[i]), scores[i]});
            return nms(c, iou_threshold, max_keep.value_or(SIZE_MAX));
        },
        py::arg("boxes"), py::arg("scores"), py::arg("iou_threshold") = 0.7, py::arg("max_keep") = py::none());

    m.def(
        "generate_anchors",
        [](std::size_t grid_h, std::size_t grid_w, int stride, const std::vector<double>& scales,
           const std::vector<double>& ratios) {
            std::vector<BoxTuple> out;
            for (const auto& b : generate_anchors(grid_h, grid_w, stride, scales, ratios).boxes) out.push_back(from_box(b));
            return out;
        },
        py::arg("grid_h"), py::arg("grid_w"), py::arg("stride"), py::arg("scales"), py::arg("ratios"));

    m.def(
        "average_precision",
        [](const std::vector<double>& scores, const std::vector<bool>& is_tp, std::size_t num_gt) {
            if (scores.size() != is_tp.size()) throw py::value_error("scores and is_tp differ in length");
            std::vector<RankedFlag> flags;
            for (std::size_t i = 0; i < scores.size(); ++i) flags.push_back({scores[i], is_tp[i]});
            return average_precision(flags, num_gt);
        },
        py::arg("scores"), py::arg("is_tp"), py::arg("num_gt"));

    m.def(
        "generate_dataset",
        [](const std::filesystem::path& out, const py::object& config) {
            const auto cfg = config.is_none() ? GenConfig{} : gen_config_from_json(py_to_json(config));
            return json_to_py(manifest_to_json(generate_dataset(cfg, out)));
        },
        py::arg("out"), py::arg("config") = py::none());

    m.def(
        "run_cli",
        [](const std::vector<std::string>& args) {
            std::ostringstream out, err;
            int code = 0;
            {
                py::gil_scoped_release release;
                code = run_cli(args, out, err);
            }
            return std::make_tuple(code, out.str(), err.str());
        },
        py::arg("args"));

    py::class_<Detector>(m, "Detector")
        .def(py::init<const std::filesystem::path&>(), py::arg("checkpoint"))
        .def("set_targets", &Detector::set_targets, py::arg("views"))
        .def("set_targets_from_dataset", &Detector::set_targets_from_dataset, py::arg("dataset"))
        .def_property_readonly("target_ids", &Detector::target_ids)
        .def_property_readonly("config", &Detector::config)
        .def("detect", &Detector::detect, py::arg("scene"), py::arg("target_id"), py::arg("score_threshold") = 0.05)
        .def("detect_all", &Detector::detect_all, py::arg("scene"), py::arg("target_ids") = py::none(),
             py::arg("score_threshold") = 0.05);
}
