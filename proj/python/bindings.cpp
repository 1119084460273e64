#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "hfl/accounting.hpp"
#include "hfl/config.hpp"
#include "hfl/experiments.hpp"
#include "hfl/paper_reference.hpp"

namespace py = pybind11;
using namespace hfl;

namespace {

ExperimentConfig config_from(const std::optional<std::filesystem::path>& path, const std::string& preset) {
  return load_config(path, preset_from_name(preset));
}

py::dict count_row_dict(const CountRow& r) {
  py::dict d;
  d["id"] = r.id;
  d["label"] = r.label;
  d["count"] = r.count;
  d["paper"] = r.paper;
  d["deviation_pct"] = r.deviation_pct();
  d["tolerance_pct"] = r.tolerance_pct;
  d["gated"] = r.gated;
  d["within"] = r.within();
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "hfflab core: parameter counts, step costs and config resolution";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);

  m.def(
      "paper_count_rows",
      [] {
        py::list out;
        for (const auto& r : paper_count_rows()) out.append(count_row_dict(r));
        return out;
      },
      "Closed-form paper-scale parameter counts with their reference values.");

  m.def(
      "encoder_param_count",
      [](const std::string& preset) {
        return encoder_param_count(preset_from_name(preset) == Preset::desk ? EncoderConfig::desk()
                                                                            : EncoderConfig::paper());
      },
      py::arg("preset") = "desk");

  m.def(
      "linear_fusion_params",
      [](const std::vector<int>& taps, int depth, int width, int model_dim) {
        return fusion_param_count(LinearFusionSpec{TapSet(taps), depth, width}, model_dim);
      },
      py::arg("taps"), py::arg("depth"), py::arg("width"), py::arg("model_dim"));

  m.def(
      "hff_params",
      [](const std::vector<int>& taps, bool balanced, int fp_out, int final_depth, int final_dim, int model_dim) {
        const HffSpec spec{TapSet(taps), balanced ? HffVariant::balanced : HffVariant::unbalanced, fp_out,
                           final_depth, final_dim};
        return fusion_param_count(spec, model_dim);
      },
      py::arg("taps"), py::arg("balanced"), py::arg("fp_out"), py::arg("final_depth"), py::arg("final_dim"),
      py::arg("model_dim"));

  m.def(
      "resolved_config",
      [](const std::optional<std::filesystem::path>& path, const std::string& preset) {
        return config_from(path, preset).raw;
      },
      py::arg("path") = py::none(), py::arg("preset") = "desk", "Resolved config as {section: {key: value}}.");

  m.def(
      "comparison_rows",
      [](const std::optional<std::filesystem::path>& path) {
        std::vector<std::string> ids;
        for (const auto& [id, spec] : comparison_specs(config_from(path, "desk"))) ids.push_back(id);
        return ids;
      },
      py::arg("path") = py::none());

  m.def(
      "step_cost",
      [](const std::string& row, int batch, int seq_len, const std::optional<std::filesystem::path>& path) {
        for (const auto& [id, spec] : comparison_specs(config_from(path, "desk"))) {
          if (id != row) continue;
          const StepCost c = trace_step_cost(spec, batch, seq_len);
          py::dict d;
          d["trainable_params"] = c.trainable_params;
          d["forward_flops"] = c.ops.forward_flops();
          d["backward_flops"] = c.ops.backward_flops();
          d["activation_bytes"] = c.activation_bytes;
          d["state_bytes"] = c.state_bytes;
          return d;
        }
        throw py::key_error(row);
      },
      py::arg("row"), py::arg("batch"), py::arg("seq_len") = 96, py::arg("path") = py::none(),
      "Analytic cost of one training step for a comparison row.");
}
