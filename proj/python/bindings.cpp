#include <pybind11/pybind11.h>
#include <pybind11/numpy.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <cstring>

#include "sicp/boxes.hpp"
#include "sicp/comms.hpp"
#include "sicp/config.hpp"
#include "sicp/dpnet.hpp"
#include "sicp/error.hpp"
#include "sicp/experiment.hpp"
#include "sicp/metrics.hpp"
#include "sicp/scene.hpp"

namespace py = pybind11;
using namespace sicp;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

ad::Tensor tensor_from(const Array& a) {
  if (a.ndim() != 3) throw Error(ErrorKind::ShapeMismatch, "expected a [C, H, W] array");
  std::vector<double> v(a.data(), a.data() + a.size());
  return ad::Tensor::from({static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)),
                           static_cast<std::size_t>(a.shape(2))},
                          std::move(v));
}

Array array_from(const ad::Tensor& t) {
  Array out({t.dim(0), t.dim(1), t.dim(2)});
  std::memcpy(out.mutable_data(), t.data().data(), t.numel() * sizeof(double));
  return out;
}

config::ExperimentConfig resolve(const std::string& preset, const std::optional<std::string>& overrides) {
  const config::ExperimentConfig base = config::preset(preset);
  return overrides ? config::from_json(*overrides, base) : base;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Cooperative BEV perception engine";

  static py::exception<Error> base_error(m, "SicpError");
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      py::object err = py::reinterpret_borrow<py::object>(base_error.ptr())(e.what());
      err.attr("kind") = std::string(to_string(e.kind()));
      PyErr_SetObject(base_error.ptr(), err.ptr());
    }
  });

  py::class_<geom::Pose2D>(m, "Pose2D")
      .def(py::init<double, double, double>(), py::arg("x") = 0.0, py::arg("y") = 0.0, py::arg("yaw") = 0.0)
      .def_readwrite("x", &geom::Pose2D::x)
      .def_readwrite("y", &geom::Pose2D::y)
      .def_readwrite("yaw", &geom::Pose2D::yaw)
      .def("compose", &geom::Pose2D::compose)
      .def("inverse", &geom::Pose2D::inverse)
      .def("__repr__", [](const geom::Pose2D& p) {
        return "Pose2D(" + std::to_string(p.x) + ", " + std::to_string(p.y) + ", " + std::to_string(p.yaw) + ")";
      });

  py::class_<geom::GridSpec>(m, "GridSpec")
      .def(py::init([](std::size_t rows, std::size_t cols, double resolution) {
             return geom::GridSpec{rows, cols, resolution, {}};
           }),
           py::arg("rows"), py::arg("cols"), py::arg("resolution"))
      .def_readwrite("rows", &geom::GridSpec::rows)
      .def_readwrite("cols", &geom::GridSpec::cols)
      .def_readwrite("resolution", &geom::GridSpec::resolution);

  py::class_<DetectionBox>(m, "Box")
      .def(py::init([](double x, double y, double w, double l, double yaw, double score) {
             return DetectionBox{x, y, w, l, yaw, score};
           }),
           py::arg("x"), py::arg("y"), py::arg("w"), py::arg("l"), py::arg("yaw") = 0.0, py::arg("score") = 1.0)
      .def_readwrite("x", &DetectionBox::x)
      .def_readwrite("y", &DetectionBox::y)
      .def_readwrite("w", &DetectionBox::w)
      .def_readwrite("l", &DetectionBox::l)
      .def_readwrite("yaw", &DetectionBox::yaw)
      .def_readwrite("score", &DetectionBox::score)
      .def("__repr__", [](const DetectionBox& b) {
        return "Box(x=" + std::to_string(b.x) + ", y=" + std::to_string(b.y) + ", w=" + std::to_string(b.w) +
               ", l=" + std::to_string(b.l) + ", yaw=" + std::to_string(b.yaw) + ", score=" + std::to_string(b.score) +
               ")";
      });

  m.def("rotated_iou", &rotated_iou, py::arg("a"), py::arg("b"));
  m.def("nms", &nms_rotated, py::arg("boxes"), py::arg("iou_threshold"));
  m.def(
      "average_precision",
      [](const metrics::SceneBoxes& preds, const metrics::SceneBoxes& gts, double thresh) {
        return metrics::average_precision(preds, gts, thresh).ap;
      },
      py::arg("preds"), py::arg("gts"), py::arg("iou_threshold") = 0.5);

  m.def(
      "warp",
      [](const Array& features, const geom::Pose2D& sender_pose, const geom::Pose2D& ego_pose,
         const geom::GridSpec& grid) {
        const geom::BEVFeatureMap f{tensor_from(features), sender_pose, grid, 0};
        const geom::WarpResult w = geom::warp_feature_map(f, ego_pose, grid);
        py::array_t<bool> mask({grid.rows, grid.cols});
        for (std::size_t k = 0; k < w.overlap.valid.size(); ++k) mask.mutable_data()[k] = w.overlap.valid[k] != 0;
        return py::make_tuple(array_from(w.map.data), mask);
      },
      py::arg("features"), py::arg("sender_pose"), py::arg("ego_pose"), py::arg("grid"),
      "Warp a sender [C, H, W] map into the ego frame; returns (warped, overlap mask).");

  m.def(
      "encode_message",
      [](const Array& features, const geom::Pose2D& pose, const geom::GridSpec& grid, std::uint32_t sender_id,
         std::uint64_t timestamp_us, bool f32) {
        const geom::BEVFeatureMap f{tensor_from(features), pose, grid, sender_id};
        const auto bytes =
            comms::encode_message(f, sender_id, timestamp_us, f32 ? comms::DType::F32 : comms::DType::F64);
        return py::bytes(reinterpret_cast<const char*>(bytes.data()), bytes.size());
      },
      py::arg("features"), py::arg("pose"), py::arg("grid"), py::arg("sender_id") = 0,
      py::arg("timestamp_us") = 0, py::arg("f32") = false);
  m.def(
      "decode_message",
      [](const py::bytes& data) {
        const std::string s = data;
        const comms::FeatureMessage msg = comms::decode_message(
            std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
        const geom::BEVFeatureMap f = comms::to_feature_map(msg);
        py::dict d;
        d["features"] = array_from(f.data);
        d["pose"] = msg.pose;
        d["grid"] = msg.grid;
        d["sender_id"] = msg.sender_id;
        d["timestamp_us"] = msg.timestamp_us;
        return d;
      },
      py::arg("data"));

  m.def(
      "dpnet_parameter_count",
      [](std::size_t channels, const std::string& reduction, std::size_t layers, std::size_t kernel) {
        dpnet::DPNetConfig c;
        c.channels = channels;
        c.reduction = dpnet::parse_reduction(reduction);
        c.layers = layers;
        c.kernel = kernel;
        c.validate();
        return dpnet::parameter_count(c);
      },
      py::arg("channels"), py::arg("reduction") = "conv1x1", py::arg("layers") = 2, py::arg("kernel") = 3);

  m.def(
      "config_json", [](const std::string& preset, const std::optional<std::string>& overrides) {
        return resolve(preset, overrides).to_json();
      },
      py::arg("preset") = "desk", py::arg("overrides") = py::none());
  m.def(
      "config_hash", [](const std::string& preset, const std::optional<std::string>& overrides) {
        return resolve(preset, overrides).hash();
      },
      py::arg("preset") = "desk", py::arg("overrides") = py::none());
  m.def("derive_seed", &config::derive_seed, py::arg("master"), py::arg("stream"), py::arg("index"));

  m.def(
      "generate_scene",
      [](std::uint64_t seed, const std::string& preset, const std::optional<std::string>& overrides) {
        const auto cfg = resolve(preset, overrides);
        const sim::SyntheticScene s = sim::generate_scene(cfg.scene, cfg.model.grid, seed);
        std::vector<DetectionBox> boxes;
        for (const auto& o : s.objects) boxes.push_back(o.box);
        py::dict d;
        d["seed"] = s.seed;
        d["ego_pose"] = s.ego_pose;
        d["sender_pose"] = s.sender_pose;
        d["objects"] = boxes;
        d["text"] = sim::scene_to_string(s);
        return d;
      },
      py::arg("seed"), py::arg("preset") = "desk", py::arg("overrides") = py::none());

  m.def(
      "gradcheck_suite",
      [](std::uint64_t seed) {
        py::list out;
        for (const auto& e : experiment::gradcheck_suite(seed)) {
          py::dict d;
          d["name"] = e.name;
          d["max_rel_error"] = e.report.max_rel_error;
          d["tolerance"] = e.tolerance;
          d["entries"] = e.report.entries;
          d["nonsmooth"] = e.report.nonsmooth;
          d["passed"] = e.passed();
          out.append(d);
        }
        return out;
      },
      py::arg("seed") = 1);

  m.def(
      "run_experiment",
      [](const std::string& mode, const std::filesystem::path& out_dir, const std::string& preset,
         const std::optional<std::string>& overrides, const std::optional<std::filesystem::path>& checkpoint) {
        const auto cfg = resolve(preset, overrides);
        experiment::RunOptions ro;
        ro.out_dir = out_dir;
        ro.checkpoint = checkpoint;
        std::vector<std::string> rows;
        {
          py::gil_scoped_release release;
          for (const auto& r : experiment::run_experiment(cfg, experiment::parse_mode(mode), ro)) {
            rows.push_back(r.to_json());
          }
        }
        return rows;
      },
      py::arg("mode"), py::arg("out_dir"), py::arg("preset") = "desk", py::arg("overrides") = py::none(),
      py::arg("checkpoint") = py::none(),
      "Runs one mode and returns its EvalResults as JSON strings.");
}
