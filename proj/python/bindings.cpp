#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <filesystem>

#include "detcid/arpn.hpp"
#include "detcid/core.hpp"
#include "detcid/dataset.hpp"
#include "detcid/detection.hpp"
#include "detcid/evaluation.hpp"
#include "detcid/fsutil.hpp"
#include "detcid/synthesis.hpp"

namespace py = pybind11;
using namespace detcid;

namespace {

using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;
using ByteArray = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

GrayImage to_image(const DoubleArray& a) {
  if (a.ndim() != 2) throw Error(ErrorCode::kShape, "image must be a 2-D array");
  const auto rows = static_cast<int>(a.shape(0)), cols = static_cast<int>(a.shape(1));
  return GrayImage(rows, cols, std::vector<double>(a.data(), a.data() + a.size()));
}

InstanceMask to_mask(const ByteArray& a) {
  if (a.ndim() != 2) throw Error(ErrorCode::kShape, "mask must be a 2-D array");
  std::vector<std::uint8_t> v(a.data(), a.data() + a.size());
  for (auto& x : v) x = x ? 1 : 0;
  return InstanceMask(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)), std::move(v));
}

DoubleArray from_image(const GrayImage& img) {
  DoubleArray out({img.rows(), img.cols()});
  std::copy(img.storage().begin(), img.storage().end(), out.mutable_data());
  return out;
}

ByteArray from_masks(const MaskStack& stack, int rows, int cols) {
  ByteArray out({static_cast<py::ssize_t>(stack.size()), static_cast<py::ssize_t>(rows), static_cast<py::ssize_t>(cols)});
  auto* p = out.mutable_data();
  for (const auto& m : stack.masks) p = std::copy(m.storage().begin(), m.storage().end(), p);
  return out;
}

py::object json_to_py(const Json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

py::dict sample_dict(const GrayImage& image, const MaskStack& truth) {
  std::vector<std::string> classes;
  for (CellClass c : truth.class_labels) classes.emplace_back(to_string(c));
  py::dict d;
  d["image"] = from_image(image);
  d["masks"] = from_masks(truth, image.rows(), image.cols());
  d["classes"] = classes;
  return d;
}

/// Trained segmenter plus detector loaded from a weights directory.
class Detector {
 public:
  explicit Detector(const std::string& weights_dir)
      : arpn_(load<arpn::ArpnState>(weights_dir, "arpn.json", arpn::arpn_state_from_json)),
        head_(load<detection::HeadState>(weights_dir, "head.json", detection::head_state_from_json)) {}

  py::object detect(const DoubleArray& image) const {
    const GrayImage img = to_image(image);
    const auto dets = detection::detect(img, arpn_.segmenter, head_.model);
    return json_to_py(detection::detections_to_json(dets, img.rows(), img.cols()));
  }

  DoubleArray segment(const DoubleArray& image) const {
    const arpn::LabelMap map = arpn::segment_image(arpn_.segmenter, to_image(image));
    DoubleArray out({map.c, map.h, map.w});
    std::copy(map.data.begin(), map.data.end(), out.mutable_data());
    return out;
  }

 private:
  template <class State, class Fn>
  static State load(const std::string& dir, const char* name, Fn parse) {
    const std::filesystem::path p = std::filesystem::path(dir) / name;
    if (!std::filesystem::exists(p)) throw Error(ErrorCode::kInvalidConfig, "missing checkpoint: " + p.string());
    return parse(parse_json_text(read_file(p), p.string()));
  }

  arpn::ArpnState arpn_;
  detection::HeadState head_;
};

}  // namespace

PYBIND11_MODULE(_detcid, m) {
  m.doc() = "Synthetic cell data, adversarial region proposals and mask detection";

  static PyObject* error = PyErr_NewException("detcid.DetcidError", PyExc_RuntimeError, nullptr);
  m.add_object("DetcidError", py::handle(error));
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      py::object exc = py::reinterpret_borrow<py::object>(error)(std::string(to_string(e.code())) + ": " + e.what());
      exc.attr("code") = std::string(to_string(e.code()));
      PyErr_SetObject(error, exc.ptr());
    }
  });

  m.def(
      "toy_sample",
      [](std::uint64_t seed, std::uint64_t index) {
        static const auto pool = synthesis::make_toy_pool(synthesis::ToyPoolConfig{});
        auto cfg = synthesis::toy_synthesis_config();
        cfg.seed = seed;
        const auto s = synthesis::synthesize_indexed(pool, cfg, index);
        return sample_dict(s.image, s.truth);
      },
      py::arg("seed"), py::arg("index") = 0, "One 64x64 synthetic image with its cell masks and classes.");

  m.def(
      "synthesize_toy_dataset",
      [](const std::string& out, int count, std::uint64_t seed, int workers) {
        const auto pool = synthesis::make_toy_pool(synthesis::ToyPoolConfig{});
        auto cfg = synthesis::toy_synthesis_config();
        cfg.seed = seed;
        py::gil_scoped_release release;
        dataset::synthesize_dataset(pool, cfg, count, out, workers);
      },
      py::arg("out"), py::arg("count"), py::arg("seed"), py::arg("workers") = 1);

  m.def(
      "load_sample",
      [](const std::string& root, const std::string& id) {
        const auto a = dataset::load_sample(root, id);
        return sample_dict(a.image, a.masks);
      },
      py::arg("root"), py::arg("id"));
  m.def("list_ids", [](const std::string& root) { return dataset::list_ids(root); }, py::arg("root"));

  m.def("mask_iou", [](const ByteArray& a, const ByteArray& b) { return core::mask_iou(to_mask(a), to_mask(b)); });
  m.def("modified_iou", [](const ByteArray& a, const ByteArray& b) { return detection::modified_iou(to_mask(a), to_mask(b)); });
  m.def("dice", [](const ByteArray& a, const ByteArray& b) { return evaluation::dice(to_mask(a), to_mask(b)); });
  m.def(
      "average_precision",
      [](const std::vector<std::pair<double, bool>>& hits, long long n_truth) {
        std::vector<evaluation::Hit> h;
        for (const auto& [s, tp] : hits) h.push_back({s, tp});
        return evaluation::average_precision(std::move(h), n_truth);
      },
      py::arg("hits"), py::arg("n_truth"), "hits: (score, is_true_positive) pairs. None when there are no truths.");
  m.def(
      "bland_altman",
      [](const std::vector<double>& a, const std::vector<double>& b) {
        const auto r = evaluation::bland_altman(a, b);
        py::dict d;
        d["bias"] = r.bias;
        d["loa"] = py::make_tuple(r.loa_low, r.loa_high);
        d["r2"] = r.r2 ? py::object(py::float_(*r.r2)) : py::object(py::none());
        return d;
      },
      py::arg("a"), py::arg("b"));

  m.def("rle_encode", [](const ByteArray& mask) { return detection::rle_encode(to_mask(mask)).counts; });
  m.def(
      "rle_decode",
      [](int rows, int cols, const std::vector<long long>& counts) {
        const InstanceMask mk = detection::rle_decode({rows, cols, counts});
        ByteArray out({rows, cols});
        std::copy(mk.storage().begin(), mk.storage().end(), out.mutable_data());
        return out;
      },
      py::arg("rows"), py::arg("cols"), py::arg("counts"));

  m.def(
      "evaluate",
      [](const std::string& pred, const std::string& gt, double iou, int workers) {
        evaluation::EvalReport r;
        {
          py::gil_scoped_release release;
          r = evaluation::evaluate(pred, gt, iou, workers);
        }
        return json_to_py(evaluation::to_json(r));
      },
      py::arg("pred_dir"), py::arg("gt_dir"), py::arg("iou_threshold") = 0.5, py::arg("workers") = 1);

  py::class_<Detector>(m, "Detector")
      .def(py::init<const std::string&>(), py::arg("weights_dir"))
      .def("detect", &Detector::detect, py::arg("image"), "Detections as dicts with score, class, box, mask and provenance.")
      .def("segment", &Detector::segment, py::arg("image"), "3 x H x W label-map probabilities.");
}
