// Python bindings. Arrays cross the boundary as float64 / uint8 numpy arrays;
// no autodiff state is exposed.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "covalign/errors.hpp"
#include "covalign/experiment.hpp"

namespace py = pybind11;
using namespace covalign;

namespace {

using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;
using LabelArray = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const DoubleArray& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor::from(std::move(shape), std::vector<double>(a.data(), a.data() + a.size()));
}

py::array_t<double> to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

py::array_t<std::uint8_t> to_labels(const std::vector<std::uint8_t>& v, std::size_t h, std::size_t w) {
  py::array_t<std::uint8_t> out({static_cast<py::ssize_t>(h), static_cast<py::ssize_t>(w)});
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

std::span<const std::uint8_t> label_span(const LabelArray& a) {
  return {a.data(), static_cast<std::size_t>(a.size())};
}

CategoryFeatures rows(const DoubleArray& f, std::optional<std::vector<bool>> valid) {
  if (f.ndim() != 2) throw ContractViolation("category features must be 2-D [N x C]");
  const auto n = static_cast<std::size_t>(f.shape(0));
  return CategoryFeatures{to_tensor(f), std::vector<double>(n, 1.0), valid.value_or(std::vector<bool>(n, true)), 1};
}

CRConfig cr_config(double epsilon, double sigma_floor, double margin) {
  CRConfig c;
  c.epsilon = epsilon;
  c.sigma_floor = sigma_floor;
  c.triplet_margin = margin;
  return c;
}

DomainSpec spec_arg(const py::object& spec, bool target) {
  if (spec.is_none()) {
    const auto [s, t] = default_benchmark();
    return target ? t : s;
  }
  return domain_spec_from_json(nlohmann::json::parse(py::str(py::module_::import("json").attr("dumps")(spec)).cast<std::string>()));
}

py::object json_to_py(const nlohmann::json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

}  // namespace

PYBIND11_MODULE(_covalign, m) {
  m.doc() = "Category feature pooling, covariance alignment losses and the synthetic benchmark";

  py::register_exception<ContractViolation>(m, "ContractViolation", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
  py::register_exception<DataError>(m, "DataError", PyExc_IOError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);

  m.def(
      "softmax_channel", [](const DoubleArray& logits) { return to_array(softmax_channel(to_tensor(logits))); },
      py::arg("logits"));

  m.def(
      "pool",
      [](const DoubleArray& features, const DoubleArray& probs, bool normalize_by_mass, double mass_fraction) {
        PoolOptions o;
        o.normalize_by_mass = normalize_by_mass;
        o.mass_fraction = mass_fraction;
        const CategoryFeatures f = pool(to_tensor(features), to_tensor(probs), o);
        return py::make_tuple(to_array(f.f), f.mask_mass, f.valid);
      },
      py::arg("features"), py::arg("probs"), py::arg("normalize_by_mass") = false, py::arg("mass_fraction") = 1e-3,
      "Returns (centroids [N x C], mask_mass [N], valid [N]).");

  m.def(
      "pearson_matrix",
      [](const DoubleArray& f1, const DoubleArray& f2, double sigma_floor) {
        const CorrMatrix c = pearson_matrix(rows(f1, {}), rows(f2, {}), cr_config(1e-6, sigma_floor, 0.5));
        return py::make_tuple(to_array(c.values), c.pair_valid);
      },
      py::arg("f1"), py::arg("f2"), py::arg("sigma_floor") = 1e-8);

  m.def(
      "cr_loss",
      [](const DoubleArray& f1, const DoubleArray& f2, double epsilon) {
        return cr_loss(rows(f1, {}), rows(f2, {}), cr_config(epsilon, 1e-8, 0.5)).value.item();
      },
      py::arg("f1"), py::arg("f2"), py::arg("epsilon") = 1e-6);

  m.def(
      "mse_align_loss", [](const DoubleArray& f1, const DoubleArray& f2) {
        return mse_align_loss(rows(f1, {}), rows(f2, {})).value.item();
      },
      py::arg("f1"), py::arg("f2"));

  m.def(
      "triplet_align_loss",
      [](const DoubleArray& f1, const DoubleArray& f2, double margin) {
        return triplet_align_loss(rows(f1, {}), rows(f2, {}), cr_config(1e-6, 1e-8, margin)).value.item();
      },
      py::arg("f1"), py::arg("f2"), py::arg("margin") = 0.5);

  m.def(
      "cross_entropy",
      [](const DoubleArray& probs, const LabelArray& labels) {
        return cross_entropy(to_tensor(probs), label_span(labels)).value.item();
      },
      py::arg("probs"), py::arg("labels"));

  m.def(
      "iou",
      [](const LabelArray& truth, const LabelArray& pred, std::size_t num_classes) {
        if (truth.size() != pred.size()) throw ContractViolation("iou: truth and prediction sizes differ");
        ConfusionMatrix conf(num_classes);
        conf.add(label_span(truth), label_span(pred));
        const IouResult r = iou(conf);
        return py::make_tuple(r.per_class, r.miou);
      },
      py::arg("truth"), py::arg("pred"), py::arg("num_classes"), "Returns (per-class IoU or None, mIoU).");

  m.def(
      "default_benchmark",
      []() {
        const auto [s, t] = default_benchmark();
        return py::make_tuple(json_to_py(to_json(s)), json_to_py(to_json(t)));
      },
      "Source and target domain specs as dicts.");

  m.def(
      "generate",
      [](const py::object& spec, std::size_t count, std::uint64_t seed, bool target) {
        const DomainSpec s = spec_arg(spec, target);
        py::list out;
        for (const SceneSample& x : generate(s, count, seed))
          out.append(py::make_tuple(to_array(x.image()), to_labels(x.labels(), x.height(), x.width())));
        return out;
      },
      py::arg("spec") = py::none(), py::arg("count") = 1, py::arg("seed") = 0, py::arg("target") = false,
      "List of (image [C x H x W], labels [H x W]). spec=None uses the default source (or target) domain.");

  py::class_<SegModel>(m, "SegModel")
      .def_static("load", &SegModel::load, py::arg("path"))
      .def(py::init([](std::vector<std::size_t> widths, std::size_t num_classes, std::size_t downsample,
                       std::uint64_t seed) {
             ModelConfig c;
             c.widths = std::move(widths);
             c.num_classes = num_classes;
             c.downsample_factor = downsample;
             return SegModel(c, seed);
           }),
           py::arg("widths") = std::vector<std::size_t>{16, 32, 32}, py::arg("num_classes") = 5,
           py::arg("downsample_factor") = 4, py::arg("seed") = 0)
      .def("save", &SegModel::save, py::arg("path"))
      .def_property_readonly("parameter_count", &SegModel::parameter_count)
      .def(
          "predict",
          [](const SegModel& self, const DoubleArray& image) {
            const Tensor x = to_tensor(image);
            const Prediction p = predict(self, x);
            py::array_t<double> conf({static_cast<py::ssize_t>(x.size(1)), static_cast<py::ssize_t>(x.size(2))});
            std::copy(p.confidence.begin(), p.confidence.end(), conf.mutable_data());
            return py::make_tuple(to_labels(p.labels, x.size(1), x.size(2)), conf);
          },
          py::arg("image"), "Returns (labels [H x W], max softmax probability [H x W]).")
      .def(
          "forward",
          [](const SegModel& self, const DoubleArray& image) {
            NoGradGuard guard;
            const SegForward f = self.forward(to_tensor(image));
            return py::make_tuple(to_array(f.features), to_array(f.logits));
          },
          py::arg("image"), "Returns (features, logits at label resolution).");

  m.def(
      "config_hash", [](const std::filesystem::path& path) { return ExperimentConfig::load(path).hash(); },
      py::arg("path"));

  auto load_config = [](const std::optional<std::filesystem::path>& path) {
    return path ? ExperimentConfig::load(*path) : ExperimentConfig();
  };

  m.def(
      "gen",
      [load_config](const std::filesystem::path& out, const std::optional<std::filesystem::path>& config,
                    std::optional<std::uint64_t> seed, bool overwrite) {
        ExperimentConfig c = load_config(config);
        if (seed) c.train.seed = *seed;
        py::gil_scoped_release release;
        cmd_gen(c, out, overwrite);
      },
      py::arg("out"), py::arg("config") = py::none(), py::arg("seed") = py::none(), py::arg("overwrite") = false);

  m.def(
      "run",
      [load_config](const std::filesystem::path& data, const std::filesystem::path& out,
                    const std::optional<std::filesystem::path>& config, std::optional<std::string> method,
                    std::optional<std::uint64_t> seed, bool overwrite) {
        ExperimentConfig c = load_config(config);
        c.data.data_dir = data;
        c.output_dir = out;
        if (method) c.method = method_from_string(*method);
        if (seed) c.train.seed = *seed;
        c.validate();
        RunSummary s = [&] {
          py::gil_scoped_release release;
          return cmd_run(c, overwrite);
        }();
        return py::make_tuple(s.source_eval.miou, s.target_eval.miou);
      },
      py::arg("data"), py::arg("out"), py::arg("config") = py::none(), py::arg("method") = py::none(),
      py::arg("seed") = py::none(), py::arg("overwrite") = false,
      "Trains one method and writes the run directory. Returns (source mIoU, target mIoU) on the eval splits.");

  m.def(
      "evaluate",
      [](const std::vector<std::filesystem::path>& runs, const std::filesystem::path& data,
         const std::filesystem::path& out) { return cmd_eval(runs, data, out); },
      py::arg("runs"), py::arg("data"), py::arg("out"));

  m.def(
      "diag",
      [load_config](const std::filesystem::path& checkpoint, const std::filesystem::path& data,
                    const std::filesystem::path& out, const std::optional<std::filesystem::path>& config) {
        const ExperimentConfig c = load_config(config);
        cmd_diag(checkpoint, data, out, c.diag_batch, c.hash());
      },
      py::arg("checkpoint"), py::arg("data"), py::arg("out"), py::arg("config") = py::none());
}
