#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <torch/torch.h>

#include <json.hpp>

#include <cstring>
#include <string>
#include <vector>

#include "ssng/config.hpp"
#include "ssng/data.hpp"
#include "ssng/errors.hpp"
#include "ssng/eval.hpp"
#include "ssng/kernels.hpp"
#include "ssng/runner.hpp"

namespace py = pybind11;
using namespace ssng;

namespace {

using F64Array = py::array_t<double, py::array::c_style | py::array::forcecast>;
using I64Array = py::array_t<int64_t, py::array::c_style | py::array::forcecast>;

std::vector<int64_t> shape_of(const py::array& a) {
  return std::vector<int64_t>(a.shape(), a.shape() + a.ndim());
}

torch::Tensor as_tensor(const F64Array& a) {
  return torch::from_blob(const_cast<double*>(a.data()), shape_of(a), torch::kFloat64).clone();
}

torch::Tensor as_tensor(const I64Array& a) {
  return torch::from_blob(const_cast<int64_t*>(a.data()), shape_of(a), torch::kInt64).clone();
}

template <typename T>
py::array_t<T> to_numpy(const torch::Tensor& t) {
  auto c = t.contiguous();
  py::array_t<T> out(std::vector<py::ssize_t>(c.sizes().begin(), c.sizes().end()));
  std::memcpy(out.mutable_data(), c.data_ptr<T>(), sizeof(T) * static_cast<size_t>(c.numel()));
  return out;
}

}  // namespace

PYBIND11_MODULE(_ssng, m) {
  m.doc() = "ssng core bindings";
  m.attr("__version__") = runner::code_version();

  static py::exception<ConfigError> config_error(m, "ConfigError", PyExc_ValueError);
  static py::exception<DataError> data_error(m, "DataError", PyExc_FileNotFoundError);
  static py::exception<DomainError> domain_error(m, "DomainError", PyExc_ValueError);
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const ConfigError& e) {
      std::string msg = e.what();
      for (const auto& f : e.fields()) msg += "\n  field: " + f;
      config_error(msg.c_str());
    } catch (const DataError& e) {
      std::string msg = e.what();
      if (!e.hint().empty()) msg += "\n  hint: " + e.hint();
      data_error(msg.c_str());
    } catch (const DomainError& e) {
      domain_error(e.what());
    }
  });

  m.def(
      "gaussian_kl",
      [](const F64Array& mu, const F64Array& logvar) {
        return kernels::gaussian_kl_std({as_tensor(mu), as_tensor(logvar)}).item<double>();
      },
      py::arg("mu"), py::arg("logvar"),
      "KL(N(mu, diag exp(logvar)) || N(0, I)); batched input is averaged over rows.");

  m.def(
      "categorical_kl_uniform",
      [](const F64Array& logits) { return kernels::categorical_kl_uniform({as_tensor(logits)}).item<double>(); },
      py::arg("logits"), "Mean KL of softmax(logits) rows against the uniform distribution.");

  m.def(
      "neg_cosine",
      [](const F64Array& x, const F64Array& y) { return kernels::neg_cosine(as_tensor(x), as_tensor(y)).item<double>(); },
      py::arg("x"), py::arg("y"), "Negative cosine similarity, batch-averaged for 2-D input.");

  m.def(
      "levenshtein",
      [](const std::vector<int64_t>& a, const std::vector<int64_t>& b) {
        return eval::levenshtein(a.data(), static_cast<int64_t>(a.size()), b.data(), static_cast<int64_t>(b.size()));
      },
      py::arg("a"), py::arg("b"));

  m.def(
      "topsim",
      [](const I64Array& factors, const I64Array& messages, int64_t n_permutations, uint64_t seed, int64_t max_pairs) {
        eval::TopSimConfig cfg;
        cfg.n_permutations = n_permutations;
        cfg.seed = seed;
        cfg.max_pairs = max_pairs;
        const auto r = eval::topsim(as_tensor(factors), as_tensor(messages), cfg);
        py::dict d;
        d["rho"] = r.rho;
        d["n_pairs"] = r.n_pairs;
        d["null_mean"] = r.null_mean;
        d["null_std"] = r.null_std;
        d["degenerate"] = r.degenerate;
        return d;
      },
      py::arg("factors"), py::arg("messages"), py::arg("n_permutations") = 1000, py::arg("seed") = 0,
      py::arg("max_pairs") = 1'000'000, "Topographic similarity with a permutation null.");

  m.def(
      "topk_accuracy",
      [](const F64Array& scores, const I64Array& labels, int64_t k) {
        return eval::topk_accuracy(as_tensor(scores), as_tensor(labels), k);
      },
      py::arg("scores"), py::arg("labels"), py::arg("k") = 1);

  m.def(
      "collapse_metric",
      [](const F64Array& reps) {
        const auto s = eval::collapse_metric(as_tensor(reps));
        py::dict d;
        d["mean_std"] = s.mean_std;
        d["min_std"] = s.min_std;
        return d;
      },
      py::arg("reps"), "Per-dimension std of L2-normalized rows.");

  m.def(
      "procedural_dsprites",
      [](int64_t n, uint64_t seed) {
        auto ds = data::load_dataset("dsprites_procedural", "", {n, seed});
        return py::make_tuple(to_numpy<uint8_t>(ds.train.images), to_numpy<int64_t>(ds.train.factors));
      },
      py::arg("n"), py::arg("seed") = 0, "Rendered sprites (N, 1, 64, 64) uint8 and factors (N, 5).");

  m.def(
      "resolve_config",
      [](const std::string& json_text, const std::string& experiment) {
        const auto c = runner::parse_config(nlohmann::json::parse(json_text), experiment);
        return runner::to_json(c).dump();
      },
      py::arg("json_text"), py::arg("experiment") = "ssl",
      "Validates a JSON config and returns it with defaults filled in, as JSON text.");

  m.def(
      "config_hash",
      [](const std::string& json_text, const std::string& experiment) {
        return runner::config_hash(runner::parse_config(nlohmann::json::parse(json_text), experiment));
      },
      py::arg("json_text"), py::arg("experiment") = "ssl");

  m.def(
      "run",
      [](std::vector<std::string> args) {
        args.insert(args.begin(), "ssng");
        py::gil_scoped_release release;
        return runner::run(args);
      },
      py::arg("args"), "Runs the command line tool in process and returns its exit code.");
}
