#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "repmech/analysis.hpp"
#include "repmech/cli.hpp"
#include "repmech/errors.hpp"
#include "repmech/export.hpp"
#include "repmech/io.hpp"
#include "repmech/kernels.hpp"

namespace py = pybind11;
using namespace repmech;

namespace {

py::array_t<float> to_numpy(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<float> out(shape);
  std::copy(t.storage().begin(), t.storage().end(), out.mutable_data());
  return out;
}

Tensor from_numpy(const py::array_t<float, py::array::c_style | py::array::forcecast>& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(shape, std::vector<float>(a.data(), a.data() + a.size()));
}

ModelConfig config_from(const py::dict& d) {
  return ModelConfig::from_json(nlohmann::json::parse(py::str(py::module_::import("json").attr("dumps")(d)).cast<std::string>()));
}

py::dict config_to(const ModelConfig& cfg) {
  return py::module_::import("json").attr("loads")(cfg.to_json().dump());
}

}  // namespace

PYBIND11_MODULE(_repmech, m) {
  m.doc() = "Bindings for the repmech engine";

  static py::exception<Error> base(m, "RepmechError");
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      py::set_error(base, e.what());
    }
  });

  py::class_<Tokenizer>(m, "Tokenizer")
      .def_static("load", &Tokenizer::load, py::arg("vocab"), py::arg("merges"))
      .def("save", &Tokenizer::save, py::arg("vocab"), py::arg("merges"))
      .def("encode", &Tokenizer::encode)
      .def("decode", [](const Tokenizer& t, const std::vector<TokenId>& ids) { return py::bytes(t.decode(ids)); })
      .def_property_readonly("vocab_size", &Tokenizer::vocab_size)
      .def_property_readonly("eos", &Tokenizer::eos);
  m.def("train_bpe", [](const std::string& corpus, std::size_t n) { return train_bpe(corpus, n); }, py::arg("corpus"),
        py::arg("num_merges"));

  py::class_<ModelBundle>(m, "Model")
      .def_property_readonly("config", [](const ModelBundle& b) { return config_to(b.config()); })
      .def_property_readonly("hash", &ModelBundle::hash)
      .def("weight", [](const ModelBundle& b, const std::string& name) { return to_numpy(b.weight(name)); });
  m.def("load_model", &load_model, py::arg("archive"), py::arg("config"));
  m.def("save_model", &save_model, py::arg("model"), py::arg("archive"), py::arg("config"));
  m.def("make_toy_model", [](const py::dict& cfg, std::uint64_t seed) { return make_toy_model(config_from(cfg), seed); },
        py::arg("config"), py::arg("seed"));
  m.def("toy_config", [](std::size_t vocab) { return config_to(toy_config(vocab)); }, py::arg("vocab_size") = 512);
  m.def("required_weights", [](const py::dict& cfg) {
    std::map<std::string, std::vector<std::size_t>> out;
    for (const auto& [name, shape] : required_weights(config_from(cfg))) out[name] = shape;
    return out;
  });

  m.def("forward_logits",
        [](const ModelBundle& model, const std::vector<TokenId>& tokens) {
          Tensor logits;
          {
            py::gil_scoped_release release;
            logits = forward(model, tokens, {}, RecordSet::none()).logits;
          }
          return to_numpy(logits);
        },
        py::arg("model"), py::arg("tokens"));
  m.def("steered_logits",
        [](const ModelBundle& model, const std::vector<TokenId>& tokens, std::vector<float> direction, std::size_t layer,
           float alpha) {
          const InjectionSpec inj{std::move(direction), layer, alpha};
          return to_numpy(forward(model, tokens, inj.to_hooks(model.config()), RecordSet::none()).logits);
        },
        py::arg("model"), py::arg("tokens"), py::arg("direction"), py::arg("layer"), py::arg("alpha"));

  m.def("load_archive", [](const std::filesystem::path& p) {
    py::dict out;
    for (const auto& [name, t] : load_archive(p).tensors()) out[py::str(name)] = to_numpy(t);
    return out;
  });
  m.def("save_archive", [](const py::dict& tensors, const std::filesystem::path& p) {
    std::map<std::string, Tensor> in;
    for (const auto& [k, v] : tensors) in[k.cast<std::string>()] = from_numpy(v.cast<py::array_t<float, py::array::c_style | py::array::forcecast>>());
    save_archive(in, p);
  });

  m.def("load_directions", [](const std::filesystem::path& p) {
    const auto ds = load_directions(p);
    py::dict out;
    out["behavior"] = ds.behavior;
    out["method"] = to_string(ds.method);
    out["model_hash"] = ds.model_hash;
    out["dirs"] = ds.dirs;
    return out;
  });

  m.def("kl_recovery", [](std::vector<float> clean, std::vector<float> corrupted, std::vector<float> patched) {
    return kl_recovery({std::move(clean)}, {std::move(corrupted)}, {std::move(patched)});
  });

  m.def("golden_key", &golden_key);
  m.def("check_golden_parity", [](const std::filesystem::path& dir, double tol) {
    const auto rep = check_golden_parity(dir, tol);
    py::list prompts;
    for (const auto& p : rep.prompts) {
      py::dict d;
      d["id"] = p.id;
      d["tokens_match"] = p.tokens_match;
      d["max_abs_diff"] = p.max_abs_diff;
      d["positions"] = p.positions;
      prompts.append(d);
    }
    py::dict out;
    out["passed"] = rep.passed();
    out["tolerance"] = rep.tolerance;
    out["prompts"] = prompts;
    return out;
  }, py::arg("dir"), py::arg("tolerance") = 1e-3);

  m.def("cli", [](const std::vector<std::string>& args) { return cli_main(args); }, py::arg("args"),
        "Run a CLI subcommand in-process; returns the exit code.");
}
