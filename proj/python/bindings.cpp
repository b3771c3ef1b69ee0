#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "saliency/analysis.hpp"
#include "saliency/attribution.hpp"
#include "saliency/checkpoint_io.hpp"
#include "saliency/cli.hpp"
#include "saliency/dataset.hpp"
#include "saliency/network.hpp"
#include "saliency/perturbation.hpp"
#include "saliency/training.hpp"

namespace py = pybind11;
using namespace saliency;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
  Array out(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

// Accepts a single CHW image or an NCHW batch.
Tensor image_batch(const Checkpoint& ckpt, const Array& x) { return as_batch(to_tensor(x), ckpt.spec.input); }

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Gradient attributions, full-gradient decompositions and perturbation metrics for small ReLU nets";

  py::class_<Checkpoint>(m, "Checkpoint")
      .def_property_readonly("name", [](const Checkpoint& c) { return c.spec.name; })
      .def_property_readonly("classes", [](const Checkpoint& c) { return c.spec.classes; })
      .def_property_readonly("input_shape",
                             [](const Checkpoint& c) {
                               return py::make_tuple(c.spec.input.channels, c.spec.input.height, c.spec.input.width);
                             })
      .def_property_readonly("depth", [](const Checkpoint& c) { return attribution_stages(c.spec).size(); })
      .def_property_readonly("spec_json", [](const Checkpoint& c) { return spec_to_json(c.spec); })
      .def("parameter_names",
           [](const Checkpoint& c) {
             std::vector<std::string> names;
             for (const auto& [k, v] : c.params) names.push_back(k);
             return names;
           })
      .def("get", [](const Checkpoint& c, const std::string& name) { return to_array(c.param(name)); })
      .def("set", [](Checkpoint& c, const std::string& name, const Array& a) { c.param(name) = to_tensor(a); })
      .def("logits", [](const Checkpoint& c, const Array& x) { return to_array(forward_logits(c, image_batch(c, x))); })
      .def("save", [](const Checkpoint& c, const std::string& path) { save_checkpoint(c, path); })
      .def("__eq__", [](const Checkpoint& a, const Checkpoint& b) { return a == b; });

  m.def("load_checkpoint", &load_checkpoint, py::arg("path"));
  m.def(
      "vgg_mini",
      [](std::size_t channels, std::size_t size, std::size_t classes, const std::vector<std::size_t>& widths, bool bias,
         bool batchnorm, std::uint64_t seed) {
        return build_network(vgg_mini_spec({channels, size, size}, classes, widths, bias, batchnorm), seed);
      },
      py::arg("channels"), py::arg("size"), py::arg("classes"), py::arg("widths"), py::arg("bias") = true,
      py::arg("batchnorm") = false, py::arg("seed") = 0);
  m.def(
      "mlp",
      [](std::size_t inputs, const std::vector<std::size_t>& hidden, std::size_t classes, bool bias,
         std::uint64_t seed) { return build_network(mlp_spec(inputs, hidden, classes, bias), seed); },
      py::arg("inputs"), py::arg("hidden"), py::arg("classes"), py::arg("bias") = true, py::arg("seed") = 0);
  m.def("zero_bias", &zero_bias, py::arg("checkpoint"));
  m.def("is_bias_free", &is_bias_free, py::arg("checkpoint"));

  m.def(
      "patch_dataset",
      [](std::uint64_t seed, std::size_t count, std::size_t classes, std::size_t size) {
        PatchDatasetOptions opt;
        opt.image_size = size;
        const Dataset d = synth_patch_dataset(seed, count, classes, Split::train, opt);
        std::vector<std::size_t> ids(d.size());
        for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = i;
        return py::make_tuple(to_array(d.batch(ids)), d.labels, to_array(d.masks));
      },
      py::arg("seed"), py::arg("count"), py::arg("classes") = 4, py::arg("size") = 16,
      "Returns (images [N, C, H, W], labels, masks [N, H, W]).");

  py::class_<DecompositionReport>(m, "DecompositionReport")
      .def_readonly("class_index", &DecompositionReport::class_index)
      .def_readonly("logit", &DecompositionReport::logit)
      .def_readonly("activity_sums", &DecompositionReport::activity_sums)
      .def_readonly("bias_sums", &DecompositionReport::bias_sums)
      .def_readonly("residuals", &DecompositionReport::residuals);

  py::class_<Explanation>(m, "Explanation")
      .def(py::init([](const Checkpoint& c, const Array& x, std::optional<std::size_t> cls) {
             return Explanation(c, image_batch(c, x), cls);
           }),
           py::arg("checkpoint"), py::arg("x"), py::arg("class_index") = py::none(), py::keep_alive<1, 2>())
      .def_property_readonly("class_index", &Explanation::class_index)
      .def_property_readonly("logit", &Explanation::logit)
      .def_property_readonly("depth", &Explanation::depth)
      .def("input_gradient", [](const Explanation& e) { return to_array(e.input_gradient()); })
      .def("gradient_times_input", [](const Explanation& e) { return to_array(e.gradient_times_input().values); })
      .def("activity", [](const Explanation& e, std::size_t l) { return to_array(e.activity(l).values); })
      .def("bias", [](const Explanation& e, std::size_t l) { return to_array(e.bias(l).values); })
      .def("gradcam", [](const Explanation& e, std::size_t l, bool rectify) { return to_array(e.gradcam(l, rectify).values); },
           py::arg("layer"), py::arg("rectify") = false)
      .def("bias_parameter_sum", &Explanation::bias_parameter_sum)
      .def("decomposition", &Explanation::decomposition)
      .def("saliency",
           [](const Explanation& e, const std::string& method) {
             return to_array(method_saliency(e, parse_method(method, e.depth(), false, "method")).values);
           },
           py::arg("method"), "Input-sized saliency for a method name such as 'gxi' or 'agg:2'.");

  m.def(
      "perturb_until_flip",
      [](const Checkpoint& c, const Array& x, const Array& saliency, bool most_first, double step_fraction) {
        PerturbConfig pc;
        pc.direction = most_first ? Direction::most_first : Direction::least_first;
        pc.step_fraction = step_fraction;
        const PerturbResult r = perturb_until_flip(c, image_batch(c, x), to_tensor(saliency), pc);
        return py::make_tuple(r.e, r.flipped, r.steps);
      },
      py::arg("checkpoint"), py::arg("x"), py::arg("saliency"), py::arg("most_first") = false,
      py::arg("step_fraction") = 0.01, "Returns (e, flipped, steps).");

  m.def(
      "wilcoxon",
      [](const std::vector<double>& d) {
        const WilcoxonResult r = wilcoxon_signed_rank(d);
        return py::make_tuple(r.w, r.p, r.n, r.exact);
      },
      py::arg("differences"), "Two-sided signed-rank test. Returns (W, p, n, exact).");

  m.def(
      "run_cli",
      [](std::vector<std::string> args) {
        args.insert(args.begin(), "saliency");
        std::vector<char*> argv;
        for (auto& a : args) argv.push_back(a.data());
        std::ostringstream out, err;
        const int code = cli_main(static_cast<int>(argv.size()), argv.data(), out, err);
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs the command line tool in-process. Returns (exit code, stdout, stderr).");

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<InsufficientDataError>(m, "InsufficientDataError", PyExc_RuntimeError);
}
