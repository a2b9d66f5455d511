#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <optional>

#include "attncal/calib/dac.hpp"
#include "attncal/calib/uac.hpp"
#include "attncal/errors.hpp"
#include "attncal/eval/metrics.hpp"
#include "attncal/model/checkpoint.hpp"
#include "attncal/pipeline/pipeline.hpp"
#include "attncal/probe/spb.hpp"

namespace py = pybind11;
using namespace attncal;

namespace {

using Json = nlohmann::json;
using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

pipeline::RunConfig config_of(const std::string& text) {
  auto cfg = pipeline::run_config_from_json(Json::parse(text));
  cfg.validate();
  return cfg;
}

nd::Tensor to_tensor(const Array& a) {
  nd::Shape shape(a.shape(), a.shape() + a.ndim());
  return nd::Tensor::from(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const nd::Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  Array out(shape);
  const auto v = t.to_vector();
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

std::vector<std::vector<double>> rows_of(const Array& a) {
  if (a.ndim() != 2) throw DimensionError("expected a 2-d array");
  std::vector<std::vector<double>> out(a.shape(0));
  for (py::ssize_t i = 0; i < a.shape(0); ++i) out[i].assign(a.data(i, 0), a.data(i, 0) + a.shape(1));
  return out;
}

// Hooks own copies of whatever they need, so the registry can outlive its inputs.
model::HookRegistry hooks_for(const pipeline::RunConfig& cfg, const std::optional<std::string>& calibration,
                              const calib::DacModule* dac) {
  model::HookRegistry hooks;
  if (calibration) calib::install_uac(hooks, calib::calibration_from_json(Json::parse(*calibration)), cfg.uac);
  if (dac) calib::install_dac(hooks, *dac);
  return hooks;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Attention calibration workbench";
  m.attr("__version__") = ATTNCALIB_VERSION;

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);
  py::register_exception<ContractError>(m, "ContractError", PyExc_RuntimeError);

  m.def("default_config", [] { return pipeline::to_json(pipeline::RunConfig{}).dump(); });
  m.def(
      "resolve_config",
      [](const std::string& text, const std::vector<std::string>& overrides) {
        auto doc = pipeline::to_json(pipeline::run_config_from_json(Json::parse(text)));
        for (const auto& o : overrides) pipeline::apply_override(doc, o);
        auto cfg = pipeline::run_config_from_json(doc);
        cfg.validate();
        return pipeline::to_json(cfg).dump();
      },
      py::arg("config"), py::arg("overrides") = std::vector<std::string>{});

  py::class_<model::Model>(m, "Model")
      .def(py::init([](const std::string& model_json, std::uint64_t seed) {
             return model::Model(Json::parse(model_json).get<model::ModelConfig>(), seed);
           }),
           py::arg("config"), py::arg("seed"))
      .def_static("load", &model::load_model)
      .def("save", [](const model::Model& self, const std::filesystem::path& p) { model::save_model(p, self); })
      .def_property_readonly("parameter_hash", &model::Model::parameter_hash)
      .def_property_readonly("config", [](const model::Model& self) { return Json(self.config()).dump(); })
      .def(
          "forward",
          [](const model::Model& self, const Array& patches, const std::vector<std::size_t>& tokens) {
            return to_array(model::forward(self, {to_tensor(patches), tokens}).logits);
          },
          py::arg("patches"), py::arg("tokens"));

  py::class_<calib::DacModule>(m, "DacModule")
      .def_static("load", &calib::load_dac)
      .def("save", [](const calib::DacModule& self, const std::filesystem::path& p) { calib::save_dac(p, self); })
      .def_property_readonly("parameter_hash", &calib::DacModule::parameter_hash)
      .def_property_readonly("layers", [](const calib::DacModule& self) { return self.config().layers; });

  m.def("white_patches", [](const std::string& cfg) {
    return to_array(pipeline::make_world(config_of(cfg)).render_meaningless(synth::MeaninglessKind::kWhite));
  });

  m.def(
      "pretrain",
      [](const std::string& cfg_text) {
        const auto cfg = config_of(cfg_text);
        py::gil_scoped_release release;
        return pipeline::pretrain_stage(cfg, pipeline::build_datasets(cfg));
      },
      py::arg("config"));

  m.def(
      "fit_uac",
      [](const model::Model& model, const std::string& cfg) {
        return calib::calibration_to_json(pipeline::uac_stage(model, config_of(cfg))).dump();
      },
      py::arg("model"), py::arg("config"));

  m.def(
      "train_dac",
      [](const model::Model& model, const std::string& cfg_text, std::optional<std::vector<std::size_t>> layers) {
        const auto cfg = config_of(cfg_text);
        py::gil_scoped_release release;
        const auto data = pipeline::build_datasets(cfg, false);
        return pipeline::dac_stage(model, cfg, data, layers.value_or(cfg.dac.module.layers), cfg.dac_train_config())
            .module;
      },
      py::arg("model"), py::arg("config"), py::arg("layers") = py::none());

  m.def(
      "white_probe",
      [](const model::Model& model, const std::string& cfg_text, std::optional<std::string> calibration,
         const calib::DacModule* dac) {
        const auto cfg = config_of(cfg_text);
        return probe::to_json(pipeline::white_probe(model, hooks_for(cfg, calibration, dac), cfg)).dump();
      },
      py::arg("model"), py::arg("config"), py::arg("calibration") = py::none(), py::arg("dac") = nullptr);

  m.def(
      "evaluate",
      [](const model::Model& model, const std::string& cfg_text, std::optional<std::string> calibration,
         const calib::DacModule* dac, bool captions) {
        const auto cfg = config_of(cfg_text);
        const auto hooks = hooks_for(cfg, calibration, dac);
        py::gil_scoped_release release;
        const auto data = pipeline::build_datasets(cfg, false);
        pipeline::EvalOptions opt;
        opt.captions = captions;
        return pipeline::to_json(pipeline::evaluate(model, hooks, cfg, data, opt)).dump();
      },
      py::arg("model"), py::arg("config"), py::arg("calibration") = py::none(), py::arg("dac") = nullptr,
      py::arg("captions") = true);

  m.def(
      "nt_xent", [](const Array& z, double tau) { return calib::nt_xent(to_tensor(z), tau).item(); }, py::arg("z"),
      py::arg("tau"));
  m.def(
      "compute_w",
      [](const Array& attention, double epsilon) {
        const auto w = calib::compute_W({0, rows_of(attention)}, epsilon);
        return w.heads;
      },
      py::arg("attention"), py::arg("epsilon") = 1e-8);
  m.def("apply_uac_row", [](const std::vector<double>& row, const std::vector<double>& w) {
    return calib::apply_uac_row(row, w);
  });
  m.def("kl_from_uniform", [](const std::vector<double>& p) { return probe::kl_from_uniform(p); });
  m.def(
      "pope_metrics",
      [](std::size_t tp, std::size_t fp, std::size_t tn, std::size_t fn) {
        eval::Confusion c;
        c.tp = tp;
        c.fp = fp;
        c.tn = tn;
        c.fn = fn;
        return eval::to_json(eval::pope_metrics(c)).dump();
      },
      py::arg("tp"), py::arg("fp"), py::arg("tn"), py::arg("fn"));
  m.def("mme_score", [](const std::vector<bool>& correct) {
    const auto s = eval::mme_score(correct);
    return py::dict(py::arg("accuracy") = s.accuracy, py::arg("paired_accuracy") = s.paired_accuracy,
                    py::arg("score") = s.score);
  });
  m.def(
      "chair",
      [](const std::vector<std::vector<std::string>>& captions, const std::vector<std::vector<std::string>>& pools) {
        const auto syn = eval::default_synonyms();
        std::vector<std::set<std::size_t>> ids;
        for (const auto& p : pools) {
          auto& s = ids.emplace_back();
          for (const auto& w : p) {
            auto it = syn.find(w);
            if (it == syn.end()) throw ConfigError("unknown object word: " + w);
            s.insert(it->second);
          }
        }
        return eval::to_json(eval::chair_eval(captions, ids, syn)).dump();
      },
      py::arg("captions"), py::arg("pools"));
}
