#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "attncal/calib/uac.hpp"
#include "attncal/model/hooks.hpp"
#include "attncal/model/model.hpp"
#include "attncal/synth/scene.hpp"

namespace attncal::probe {

// KL(p || uniform) in nats, with 0 log 0 = 0. p must sum to 1.
double kl_from_uniform(std::span<const double> p);
// max/min over the cells; +inf when some cell is exactly 0.
double max_min_ratio(std::span<const double> p);
double quadrant_mass(std::span<const double> p, synth::Quadrant q, std::size_t grid_h, std::size_t grid_w);

// Each head's slice is renormalized to sum 1 first, then heads are averaged.
std::vector<double> head_average(std::span<const std::vector<double>> heads);

struct LayerHeatmap {
  std::size_t layer = 0;
  std::vector<double> heatmap;                // [Gh*Gw], raster order, sums to 1
  std::vector<std::vector<double>> per_head;  // each renormalized to 1
  std::vector<double> head_mass;              // raw vision-slice mass per head
  double kl = 0.0;
  double max_min = 1.0;
  double hot_mass = 0.0;
};

struct SpbReport {
  std::string input;  // white, black, noise, scene
  calib::ProbePrompt prompt;
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;
  synth::Quadrant hot = synth::Quadrant::kBottomRight;
  std::vector<LayerHeatmap> layers;

  const LayerHeatmap& layer(std::size_t l) const;
};

nlohmann::json to_json(const SpbReport& r);

// Probes the model (read-only) with `patches` and the prompt; steps are
// averaged as in calibration.
SpbReport measure_spb(const model::Model& model, const model::HookRegistry& hooks, const nd::Tensor& patches,
                      const std::string& input_name, const calib::ProbePrompt& prompt,
                      std::span<const std::size_t> layers, synth::Quadrant hot = synth::Quadrant::kBottomRight);

enum class HeatmapFormat { kCsv, kPgm };

// CSV: Gh lines of Gw comma-separated values at 9 significant digits.
std::string heatmap_csv(std::span<const double> cells, std::size_t grid_h, std::size_t grid_w);
std::vector<double> parse_heatmap_csv(const std::string& text);
// ASCII P2, min -> 0 and max -> 255 linearly; a constant map is all 0.
std::string heatmap_pgm(std::span<const double> cells, std::size_t grid_h, std::size_t grid_w,
                        const std::string& comment);
std::string format_sig9(double v);

void export_heatmap(const LayerHeatmap& layer, std::size_t grid_h, std::size_t grid_w,
                    const std::filesystem::path& path, HeatmapFormat format, const std::string& comment = {});

// <stem>_layer<l>.csv/.pgm, <stem>_layer<l>_head<h>.csv and <stem>.json.
void export_report(const SpbReport& report, const std::filesystem::path& dir, const std::string& stem);

}  // namespace attncal::probe
