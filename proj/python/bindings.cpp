#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <fstream>
#include <sstream>

#include "histnet/colorspace.hpp"
#include "histnet/data.hpp"
#include "histnet/eval.hpp"
#include "histnet/image_io.hpp"
#include "histnet/training.hpp"

namespace py = pybind11;
using namespace histnet;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

RgbImage to_image(const Array& a) {
  if (a.ndim() != 3 || a.shape(2) != 3) throw ValidationError("expected an (H, W, 3) array");
  RgbImage img(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)));
  std::copy(a.data(), a.data() + a.size(), img.pixels.begin());
  img.validate();
  return img;
}

Array from_image(const RgbImage& img) {
  Array out({img.height, img.width, 3});
  std::copy(img.pixels.begin(), img.pixels.end(), out.mutable_data());
  return out;
}

Array rgb_to_lab_array(const Array& a) {
  const LabImage lab = rgb_to_lab(to_image(a));
  Array out({lab.height, lab.width, 3});
  double* p = out.mutable_data();
  for (std::size_t i = 0; i < lab.pixel_count(); ++i) {
    p[3 * i] = lab.L[i];
    p[3 * i + 1] = lab.a[i];
    p[3 * i + 2] = lab.b[i];
  }
  return out;
}

Array lab_to_rgb_array(const Array& a) {
  if (a.ndim() != 3 || a.shape(2) != 3) throw ValidationError("expected an (H, W, 3) array");
  LabImage lab(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)));
  const double* p = a.data();
  for (std::size_t i = 0; i < lab.pixel_count(); ++i) {
    lab.L[i] = p[3 * i];
    lab.a[i] = p[3 * i + 1];
    lab.b[i] = p[3 * i + 2];
  }
  return from_image(lab_to_rgb(lab));
}

py::object json_to_py(const nlohmann::json& j) {
  return py::module_::import("json").attr("loads")(j.dump());
}

py::dict train_run(const TrainConfig& cfg, const std::filesystem::path& manifest_path,
                   const std::filesystem::path& palette_path, const std::filesystem::path& out_dir) {
  DatasetManifest manifest = DatasetManifest::load(manifest_path);
  const Palette palette = Palette::load(palette_path);
  cfg.validate();
  TrainState state = make_train_state(cfg, manifest.taxonomy.label_count());
  std::filesystem::create_directories(out_dir);
  std::ofstream log(out_dir / "train_log.jsonl");
  TrainOptions opts;
  opts.checkpoint_dir = out_dir / "checkpoints";
  opts.log = &log;
  TrainResult r;
  {
    py::gil_scoped_release release;
    r = train(state, manifest, palette, opts);
  }
  py::dict d;
  d["generator_steps"] = r.generator_steps;
  d["critic_steps"] = r.critic_steps;
  d["skipped"] = r.skipped;
  d["last"] = json_to_py(r.last.to_json());
  d["checkpoint"] = (out_dir / "checkpoints" / "final").string();
  return d;
}

}  // namespace

PYBIND11_MODULE(_histnet, m) {
  m.doc() = "Historical photo colorization core";

  py::register_exception<NonFiniteLossError>(m, "NonFiniteLossError", PyExc_RuntimeError);
  py::register_exception<ImageIoError>(m, "ImageIoError", PyExc_OSError);

  m.def("rgb_to_lab", &rgb_to_lab_array, py::arg("rgb"), "(H, W, 3) RGB in [0, 1] to CIE Lab (D65).");
  m.def("lab_to_rgb", &lab_to_rgb_array, py::arg("lab"), "(H, W, 3) Lab to RGB, clamped to [0, 1].");
  m.def("read_rgb", [](const std::filesystem::path& p) { return from_image(read_rgb(p)); }, py::arg("path"));
  m.def("write_rgb_png", [](const std::filesystem::path& p, const Array& a) { write_rgb_png(p, to_image(a)); },
        py::arg("path"), py::arg("rgb"));
  m.def("hue_histogram",
        [](const std::vector<Array>& images, int bins) {
          std::vector<RgbImage> imgs;
          for (const auto& a : images) imgs.push_back(to_image(a));
          std::vector<std::tuple<double, double, double>> out;
          for (const auto& b : hue_histogram(imgs, bins).bins) out.emplace_back(b.lo_deg, b.hi_deg, b.frequency);
          return out;
        },
        py::arg("images"), py::arg("bins"), "[(lo_deg, hi_deg, frequency)] over chromatic pixels.");

  m.def("psnr", [](const Array& a, const Array& b) { return psnr(to_image(a), to_image(b)); }, py::arg("a"), py::arg("b"));
  m.def("ssim", [](const Array& a, const Array& b) { return ssim(to_image(a), to_image(b)); }, py::arg("a"), py::arg("b"));
  m.def("perceptual_distance",
        [](const Array& a, const Array& b, const std::string& backend) {
          return make_perceptual_backend(backend)->distance(to_image(a), to_image(b));
        },
        py::arg("a"), py::arg("b"), py::arg("backend") = "fallback");

  py::class_<TrainConfig>(m, "TrainConfig")
      .def(py::init<>())
      .def_static("test_preset", &TrainConfig::test_preset)
      .def_static("paper_preset", &TrainConfig::paper_preset)
      .def_static("parse", &TrainConfig::parse, py::arg("text"))
      .def_static("load", &TrainConfig::load, py::arg("path"))
      .def("set", &TrainConfig::set, py::arg("key"), py::arg("value"))
      .def("validate", &TrainConfig::validate)
      .def("to_text", &TrainConfig::to_text)
      .def("to_dict", [](const TrainConfig& c) { return json_to_py(c.to_json()); })
      .def("effective_weights", [](const TrainConfig& c) { return json_to_py(c.effective_weights().to_json()); })
      .def_readwrite("seed", &TrainConfig::seed)
      .def_readwrite("epochs", &TrainConfig::epochs)
      .def_readwrite("batch_size", &TrainConfig::batch_size)
      .def_readwrite("image_size", &TrainConfig::image_size)
      .def_readwrite("learning_rate", &TrainConfig::learning_rate)
      .def("__repr__", [](const TrainConfig& c) { return "<TrainConfig\n" + c.to_text() + ">"; });
  m.def("train_config_keys", &train_config_keys);

  m.def(
      "build_dataset",
      [](const std::filesystem::path& images, const std::filesystem::path& out_dir, const std::filesystem::path& taxonomy,
         double test_fraction, std::uint64_t seed, double saturation_threshold) {
        BuildOptions opts;
        opts.test_fraction = test_fraction;
        opts.seed = seed;
        opts.saturation_threshold = saturation_threshold;
        StubDetector no_detector({}, true);
        BuildLog log;
        std::filesystem::create_directories(out_dir);
        DatasetManifest m = build_manifest(images, out_dir, LabelTaxonomy::load(taxonomy), no_detector, opts, {}, &log);
        m.save(out_dir / "manifest.jsonl");
        return json_to_py(log.to_json());
      },
      py::arg("images"), py::arg("out_dir"), py::arg("taxonomy"), py::arg("test_fraction") = 0.1, py::arg("seed") = 0,
      py::arg("saturation_threshold") = 0.05,
      "Filters an image directory into out_dir/manifest.jsonl; returns the build log. Person checks are recorded as unknown.");

  m.def("dataset_stats",
        [](const std::filesystem::path& manifest) { return json_to_py(dataset_stats(DatasetManifest::load(manifest)).to_json()); },
        py::arg("manifest"));

  m.def("train", &train_run, py::arg("config"), py::arg("manifest"), py::arg("palette"), py::arg("out_dir"),
        "Trains from scratch; writes train_log.jsonl and checkpoints/final under out_dir.");

  py::class_<Generator>(m, "Generator")
      .def_static("load", [](const std::filesystem::path& dir) { return load_generator(dir); }, py::arg("checkpoint"))
      .def_property_readonly("input_size", [](const Generator& g) { return g.config().input_size; })
      .def_property_readonly("config", [](const Generator& g) { return json_to_py(g.config().to_json()); })
      .def(
          "colorize",
          [](const Generator& g, const Array& a) {
            RgbImage img = to_image(a);
            RgbImage out;
            {
              py::gil_scoped_release release;
              out = colorize(g, img);
            }
            return from_image(out);
          },
          py::arg("rgb"), "Colorizes from the L plane; returns (H, W, 3) RGB with L preserved.");

  m.def("evaluate",
        [](const std::filesystem::path& checkpoint, const std::filesystem::path& manifest, const std::string& perceptual,
           const std::string& split) {
          Generator g = load_generator(checkpoint);
          auto backend = make_perceptual_backend(perceptual);
          EvaluateOptions opts;
          if (split == "train") opts.split = Split::train;
          else if (split != "test") throw ValidationError("split must be train or test");
          return json_to_py(evaluate(g, DatasetManifest::load(manifest), *backend, opts).to_json());
        },
        py::arg("checkpoint"), py::arg("manifest"), py::arg("perceptual") = "fallback", py::arg("split") = "test");
}
