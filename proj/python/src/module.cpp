// SPDX-License-Identifier: Apache-2.0

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <cmath>
#include <string>
#include <vector>

#include "veinatn/checkpoint.hpp"
#include "veinatn/dataset.hpp"
#include "veinatn/error.hpp"
#include "veinatn/eval.hpp"
#include "veinatn/explain.hpp"
#include "veinatn/image.hpp"
#include "veinatn/imageproc.hpp"
#include "veinatn/model.hpp"
#include "veinatn/trainer.hpp"

namespace py = pybind11;
using namespace veinatn;

namespace {

using U8Array = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;
using F64Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

GrayImage to_image(const U8Array& a) {
  if (a.ndim() != 2) throw ShapeError("expected a 2-D uint8 array, got " + std::to_string(a.ndim()) + " dimensions");
  const auto h = static_cast<int>(a.shape(0)), w = static_cast<int>(a.shape(1));
  return GrayImage(w, h, std::vector<std::uint8_t>(a.data(), a.data() + a.size()));
}

U8Array from_image(const GrayImage& img) {
  U8Array out({img.height(), img.width()});
  std::copy(img.pixels().begin(), img.pixels().end(), out.mutable_data());
  return out;
}

std::vector<double> to_vector(const F64Array& a) { return {a.data(), a.data() + a.size()}; }

ScoreSet to_scores(const F64Array& genuine, const F64Array& impostor) {
  return {to_vector(genuine), to_vector(impostor)};
}

py::array_t<double> probabilities(const Model& model, const GrayImage& img) {
  const Tensor<float> p = predict(model.config, model.params, to_network_input<float>(img, model.config.input_size));
  py::array_t<double> out(static_cast<py::ssize_t>(p.size()));
  for (std::size_t i = 0; i < p.size(); ++i) out.mutable_at(static_cast<py::ssize_t>(i)) = p[i];
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "VeinAtnNet finger-vein verification core";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_ValueError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);

  // Images
  m.def("load_image", [](const std::filesystem::path& p) { return from_image(load_image(p)); }, py::arg("path"),
        "Read a PGM or PNG file as a 2-D uint8 array.");
  m.def("save_image", [](const U8Array& a, const std::filesystem::path& p) { save_image(to_image(a), p); },
        py::arg("image"), py::arg("path"), "Write a 2-D uint8 array as PGM or PNG (by extension).");
  m.def(
      "clahe",
      [](const U8Array& a, int tiles_x, int tiles_y, double clip) {
        return from_image(clahe(to_image(a), {tiles_x, tiles_y, clip}));
      },
      py::arg("image"), py::arg("tiles_x") = 8, py::arg("tiles_y") = 8, py::arg("clip_limit") = 2.0,
      "Contrast-limited adaptive histogram equalization.");
  m.def(
      "resize", [](const U8Array& a, int w, int h) { return from_image(resize_bilinear(to_image(a), w, h)); },
      py::arg("image"), py::arg("width"), py::arg("height"), "Bilinear resize with half-pixel centres.");
  m.def(
      "augment", [](const U8Array& a, std::uint64_t seed) {
        std::vector<U8Array> out;
        for (const auto& v : augment(to_image(a), seed)) out.push_back(from_image(v));
        return out;
      },
      py::arg("image"), py::arg("seed"), "The nine augmentation variants of an image.");

  // Model
  py::enum_<LossMode>(m, "LossMode")
      .value("BINARY_PER_CLASS", LossMode::kBinaryPerClass)
      .value("CATEGORICAL", LossMode::kCategorical);

  py::class_<ModelConfig>(m, "ModelConfig")
      .def(py::init<>())
      .def_readwrite("num_conv_blocks", &ModelConfig::num_conv_blocks)
      .def_readwrite("filters", &ModelConfig::filters)
      .def_readwrite("kernel_sizes", &ModelConfig::kernel_sizes)
      .def_readwrite("groupnorm_groups", &ModelConfig::groupnorm_groups)
      .def_readwrite("pool_grid", &ModelConfig::pool_grid)
      .def_readwrite("num_heads", &ModelConfig::num_heads)
      .def_readwrite("qk_dim", &ModelConfig::qk_dim)
      .def_readwrite("v_dim", &ModelConfig::v_dim)
      .def_readwrite("num_classes", &ModelConfig::num_classes)
      .def_readwrite("loss_mode", &ModelConfig::loss_mode)
      .def_readwrite("input_size", &ModelConfig::input_size)
      .def_readwrite("attention_residual", &ModelConfig::attention_residual)
      .def("validate", &ModelConfig::validate)
      .def("__repr__", [](const ModelConfig& c) { return model_config_to_text(c).serialize(); });

  m.def("count_params", py::overload_cast<const ModelConfig&>(&count_params), py::arg("config"),
        "Number of trainable scalars for a configuration.");
  m.def(
      "parameter_layout",
      [](const ModelConfig& c) {
        std::vector<std::pair<std::string, std::vector<std::size_t>>> out;
        for (auto& [name, shape] : parameter_layout(c)) out.emplace_back(name, shape);
        return out;
      },
      py::arg("config"), "Parameter names and shapes in storage order.");

  py::class_<Checkpoint>(m, "Checkpoint")
      .def_static("load", &load_checkpoint, py::arg("path"))
      .def_static(
          "init",
          [](const ModelConfig& c, std::uint64_t seed) {
            Checkpoint ck;
            ck.model.config = c;
            ck.model.params = init_model(c, seed);
            ck.meta.seed = seed;
            return ck;
          },
          py::arg("config"), py::arg("seed") = 0, "Freshly initialized, untrained checkpoint.")
      .def("save", [](const Checkpoint& ck, const std::filesystem::path& p) { save_checkpoint(ck, p); },
           py::arg("path"))
      .def_property_readonly("config", [](const Checkpoint& ck) { return ck.model.config; })
      .def_property_readonly("num_params", [](const Checkpoint& ck) { return count_params(ck.model.params); })
      .def_property_readonly("epoch", [](const Checkpoint& ck) { return ck.meta.epoch; })
      .def_property_readonly("stream", [](const Checkpoint& ck) { return ck.meta.stream; })
      .def_property_readonly("loss_curve", [](const Checkpoint& ck) { return ck.meta.loss_curve; })
      .def(
          "parameter",
          [](const Checkpoint& ck, const std::string& name) {
            const auto& t = ck.model.params.at(name);
            py::array_t<float> out(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
            std::copy(t.data().begin(), t.data().end(), out.mutable_data());
            return out;
          },
          py::arg("name"))
      .def(
          "predict", [](const Checkpoint& ck, const U8Array& a) { return probabilities(ck.model, to_image(a)); },
          py::arg("image"), "Class probabilities for a grey image (resized to the model input).");

  // Scoring and metrics
  m.def(
      "comparison_score",
      [](const Checkpoint& normal, const Checkpoint& enhanced, const U8Array& a, int claimed_id) {
        const GrayImage raw = to_image(a);
        const auto pn = to_network_input<float>(raw, normal.model.config.input_size);
        const auto pe = to_network_input<float>(clahe(raw, enhanced.meta.clahe), enhanced.model.config.input_size);
        const ScorePair s = comparison_score(normal.model, enhanced.model, pn, pe, claimed_id);
        return py::make_tuple(s.normal, s.enhanced, s.fused);
      },
      py::arg("normal"), py::arg("enhanced"), py::arg("image"), py::arg("claimed_id"),
      "(normal, enhanced, fused) scores of a raw probe for one claimed identity.");
  m.def(
      "eer",
      [](const F64Array& g, const F64Array& i) {
        const auto r = eer(to_scores(g, i));
        return py::make_tuple(r.eer, r.threshold);
      },
      py::arg("genuine"), py::arg("impostor"), "(eer, threshold).");
  m.def(
      "tar_at_fmr",
      [](const F64Array& g, const F64Array& i, double target) {
        const auto r = tar_at_fmr(to_scores(g, i), target);
        return py::make_tuple(r.tar, r.threshold, r.under_resolved);
      },
      py::arg("genuine"), py::arg("impostor"), py::arg("fmr"), "(tar, threshold, under_resolved).");
  m.def(
      "det_curve",
      [](const F64Array& g, const F64Array& i) {
        const auto det = det_curve(to_scores(g, i));
        py::array_t<double> out({static_cast<py::ssize_t>(det.size()), py::ssize_t{3}});
        auto w = out.mutable_unchecked<2>();
        for (std::size_t k = 0; k < det.size(); ++k) {
          const auto r = static_cast<py::ssize_t>(k);
          w(r, 0) = det[k].threshold;
          w(r, 1) = det[k].fmr;
          w(r, 2) = det[k].fnmr;
        }
        return out;
      },
      py::arg("genuine"), py::arg("impostor"), "Rows of (threshold, fmr, fnmr), thresholds ascending.");

  // Datasets
  m.def(
      "count_scores",
      [](const std::filesystem::path& root, const std::string& protocol) {
        const auto c = count_scores(build_protocol(root, protocol));
        return py::make_tuple(c.genuine, c.impostor);
      },
      py::arg("root"), py::arg("protocol"), "(genuine, impostor) comparison counts of a protocol.");
  m.def("make_toy_dataset", &make_toy_dataset, py::arg("root"), py::arg("identities") = 8, py::arg("samples") = 10,
        py::arg("size") = 64, py::arg("seed") = 0, py::arg("sessions") = 1);

  // Training
  m.def(
      "train",
      [](const ModelConfig& config, const std::filesystem::path& root, const std::string& protocol,
         const std::string& stream, int epochs, double lr, int batch, std::uint64_t seed, bool augment, int threads) {
        TrainOptions o;
        o.epochs = epochs;
        o.adam.lr = lr;
        o.batch = batch;
        o.seed = seed;
        o.augment = augment;
        o.threads = threads;
        o.stream = parse_stream(stream);
        const ProtocolSpec proto = build_protocol(root, protocol);
        ModelConfig c = config;
        c.num_classes = proto.num_identities();
        py::gil_scoped_release release;
        return train(c, proto, o).checkpoint;
      },
      py::arg("config"), py::arg("root"), py::arg("protocol") = "heldin", py::arg("stream") = "normal",
      py::arg("epochs") = 1, py::arg("lr") = 1e-4, py::arg("batch") = 16, py::arg("seed") = 0,
      py::arg("augment") = true, py::arg("threads") = 1,
      "Train on a dataset tree; the class count follows the protocol.");

  // Explanation
  m.def(
      "explain",
      [](const Checkpoint& ck, const U8Array& a, int claimed_id, int gx, int gy, int samples, std::uint64_t seed,
         double kernel_width, double ridge_lambda) {
        const GrayImage img = to_image(a);
        const Segmentation seg = grid_segments(img, gx, gy);
        const Perturbations data = perturb_and_score(model_scorer(ck.model, claimed_id), img, seg, samples, seed);
        const SaliencyMap map = fit_local_linear(data, gx, gy, kernel_width, ridge_lambda);
        py::array_t<double> out({static_cast<py::ssize_t>(gy), static_cast<py::ssize_t>(gx)});
        std::copy(map.weights.begin(), map.weights.end(), out.mutable_data());
        return out;
      },
      py::arg("checkpoint"), py::arg("image"), py::arg("claimed_id"), py::arg("grid_x") = kDefaultGrid,
      py::arg("grid_y") = kDefaultGrid, py::arg("samples") = kDefaultSamples, py::arg("seed") = 0,
      py::arg("kernel_width") = kDefaultKernelWidth, py::arg("ridge_lambda") = kDefaultRidgeLambda,
      "Per-cell saliency weights [grid_y, grid_x] for the claimed-class probability.");
}
