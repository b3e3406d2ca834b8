// SPDX-License-Identifier: Apache-2.0
#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "mlkd/cli.hpp"
#include "mlkd/data.hpp"
#include "mlkd/error.hpp"
#include "mlkd/evaluation.hpp"
#include "mlkd/info_bound.hpp"
#include "mlkd/losses.hpp"
#include "mlkd/network.hpp"

namespace py = pybind11;
using namespace mlkd;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;
using Labels = py::array_t<int, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(std::move(shape), std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  Array out(shape);
  std::copy(t.storage().begin(), t.storage().end(), out.mutable_data());
  return out;
}

std::vector<int> to_labels(const Labels& l) { return {l.data(), l.data() + l.size()}; }

AnchorMode parse_anchor(const std::string& s) {
  if (s == "teacher") return AnchorMode::teacher;
  if (s == "student") return AnchorMode::student;
  fail(ErrorKind::parameter, "unknown anchor mode '" + s + "'");
}

}  // namespace

PYBIND11_MODULE(_mlkd, m) {
  m.doc() = "Multi-level knowledge distillation core";

  static py::exception<Error> error(m, "Error");
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      const std::string message = "error[" + std::string(to_string(e.kind())) + "]: " + e.what();
      py::object exc = py::handle(error.ptr())(message);
      exc.attr("kind") = to_string(e.kind());
      PyErr_SetObject(error.ptr(), exc.ptr());
    }
  });

  // data
  m.def(
      "generate",
      [](const std::string& family, std::size_t classes, std::size_t per_class, std::size_t dim,
         std::size_t image_size, double noise, bool warp, std::size_t modes, std::uint64_t seed) {
        GeneratorSpec spec;
        spec.family = family;
        spec.num_classes = classes;
        spec.samples_per_class = per_class;
        spec.input_dim = dim;
        spec.image_size = image_size;
        spec.noise = noise;
        spec.warp = warp;
        spec.modes_per_class = modes;
        const Dataset ds = generate_synthetic(spec, seed);
        return py::make_tuple(to_array(ds.inputs), ds.labels);
      },
      py::arg("family") = "clusters", py::arg("num_classes") = 10, py::arg("samples_per_class") = 100,
      py::arg("input_dim") = 32, py::arg("image_size") = 12, py::arg("noise") = 1.0, py::arg("warp") = false,
      py::arg("modes_per_class") = 1, py::arg("seed") = 0,
      "Synthetic dataset as (inputs, labels).");
  m.def(
      "load_dataset",
      [](const std::filesystem::path& path) {
        const Dataset ds = load_dataset(path);
        return py::make_tuple(to_array(ds.inputs), ds.labels, ds.num_classes);
      },
      py::arg("path"));

  // losses
  m.def(
      "loss_kd", [](const Array& t, const Array& s, double T) { return loss_kd(to_tensor(t), to_tensor(s), T); },
      py::arg("logits_t"), py::arg("logits_s"), py::arg("temperature") = 4.0);
  m.def(
      "loss_corr",
      [](const Array& at, const Array& bt, const Array& as, const Array& bs, double tau) {
        return loss_corr(to_tensor(at), to_tensor(bt), to_tensor(as), to_tensor(bs), tau);
      },
      py::arg("anchor_t"), py::arg("batch_t"), py::arg("anchor_s"), py::arg("batch_s"), py::arg("tau") = 0.5);
  m.def(
      "loss_sup",
      [](const Array& anchors, const Array& bank, const Labels& labels, double tau, const std::string& mode) {
        const std::vector<int> l = to_labels(labels);
        return loss_sup(to_tensor(anchors), to_tensor(bank), l, tau, parse_anchor(mode));
      },
      py::arg("anchors"), py::arg("bank"), py::arg("labels"), py::arg("tau") = 0.07, py::arg("mode") = "student");
  m.def(
      "loss_ce",
      [](const Array& logits, const Labels& labels) {
        const std::vector<int> l = to_labels(labels);
        return loss_ce(to_tensor(logits), l);
      },
      py::arg("logits"), py::arg("labels"));

  // evaluation
  m.def(
      "top1_accuracy",
      [](const Array& logits, const Labels& labels) {
        const std::vector<int> l = to_labels(labels);
        return top1_accuracy(to_tensor(logits), l);
      },
      py::arg("logits"), py::arg("labels"));
  m.def(
      "knn_classify",
      [](const Array& train, const Labels& labels, const Array& test, std::size_t k) {
        const std::vector<int> l = to_labels(labels);
        return knn_classify(to_tensor(train), l, to_tensor(test), k);
      },
      py::arg("train_feats"), py::arg("train_labels"), py::arg("test_feats"), py::arg("k") = 10);
  m.def(
      "cka",
      [](const Array& x, const Array& y, const std::string& kernel) {
        return cka_similarity(to_tensor(x), to_tensor(y), parse_cka_kernel(kernel));
      },
      py::arg("x"), py::arg("y"), py::arg("kernel") = "linear");

  // info bound
  m.def(
      "gaussian_mi_bound",
      [](double rho, std::size_t positives, std::size_t negatives, std::uint64_t seed) {
        const auto samples = gaussian_pairs(rho, positives, negatives, seed);
        const MiBound b = mi_lower_bound(samples, gaussian_density_ratio(rho));
        return py::make_tuple(b.bound, gaussian_mutual_information(rho));
      },
      py::arg("rho"), py::arg("positives") = 1000, py::arg("negatives") = 1000, py::arg("seed") = 0,
      "(estimated bound, analytic MI) for correlated Gaussian pairs.");

  // networks
  m.def(
      "features",
      [](const std::filesystem::path& ckpt, const Array& x) {
        const Checkpoint c = load_checkpoint(ckpt);
        return to_array(forward_features(c.network, to_tensor(x)));
      },
      py::arg("checkpoint"), py::arg("inputs"));
  m.def(
      "logits",
      [](const std::filesystem::path& ckpt, const Array& x) {
        const Checkpoint c = load_checkpoint(ckpt);
        return to_array(forward_logits(c.network, forward_features(c.network, to_tensor(x))));
      },
      py::arg("checkpoint"), py::arg("inputs"));

  // cli
  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        int code;
        {
          py::gil_scoped_release release;
          code = run_cli(args, out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs the command line tool in-process; returns (exit code, stdout, stderr).");
}
