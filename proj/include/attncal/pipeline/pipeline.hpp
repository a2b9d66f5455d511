#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "attncal/calib/dac.hpp"
#include "attncal/calib/uac.hpp"
#include "attncal/eval/harness.hpp"
#include "attncal/model/model.hpp"
#include "attncal/pipeline/run_config.hpp"
#include "attncal/probe/spb.hpp"
#include "attncal/synth/augment.hpp"
#include "attncal/synth/corpus.hpp"
#include "attncal/synth/pope.hpp"

namespace attncal::pipeline {

// Every dataset of a run, each drawn from its own seed so that resizing one
// leaves the others untouched.
struct Datasets {
  std::vector<synth::QueryLabelPair> corpus;
  std::vector<synth::SyntheticScene> validation;
  std::vector<synth::SyntheticScene> calibration;  // D_cal
  std::vector<synth::SyntheticScene> report;       // validation minus D_cal
  synth::AugmentedSet augmented;                   // D_aug
  std::vector<synth::QueryLabelPair> calibration_polling;  // existence items on D_cal (sweep selection)
  std::vector<synth::PopeSet> pope;
  std::vector<std::pair<synth::MmeSubtask, std::vector<synth::QueryLabelPair>>> mme;
  std::vector<synth::SyntheticScene> caption_scenes;
  std::array<std::vector<synth::QueryLabelPair>, 4> quadrant;  // indexed by Quadrant
};

// `with_corpus` false skips the pretraining mixture (only pretraining needs it).
Datasets build_datasets(const RunConfig& cfg, bool with_corpus = true);
synth::World make_world(const RunConfig& cfg);

model::Model pretrain_stage(const RunConfig& cfg, const Datasets& data,
                            const std::function<void(const model::EpochStats&)>& on_epoch = {});

std::vector<calib::CalibrationMatrix> uac_stage(const model::Model& model, const RunConfig& cfg,
                                                model::HookRegistry* installed = nullptr);

// Trains a fresh DAC module on D_aug for `layers`.
struct DacStageResult {
  calib::DacModule module;
  calib::DacTrainResult train;
};
DacStageResult dac_stage(const model::Model& model, const RunConfig& cfg, const Datasets& data,
                         const std::vector<std::size_t>& layers, const calib::DacTrainConfig& train,
                         const calib::DacStepCallback& on_step = {});

// Blank-input probe over every layer.
probe::SpbReport white_probe(const model::Model& model, const model::HookRegistry& hooks, const RunConfig& cfg);

struct QuadrantReport {
  std::array<double, 4> accuracy{};
  double hot_accuracy = 0.0;
  double cold_accuracy = 0.0;
  double gap = 0.0;      // hot minus cold
  double overall = 0.0;  // mean over the four quadrant sets
};
nlohmann::json to_json(const QuadrantReport& q);
QuadrantReport quadrant_report(std::span<const eval::ItemLog> logs, synth::Quadrant hot);

struct EvalOptions {
  bool pope = true;
  bool mme = true;
  bool captions = true;
  bool quadrants = true;
};

struct EvalSummary {
  std::optional<eval::PopeReport> pope;
  std::optional<eval::MmeStyleReport> mme;
  std::optional<eval::ChairReport> chair;
  std::optional<QuadrantReport> quadrants;
  std::vector<eval::ItemLog> logs;
};
nlohmann::json to_json(const EvalSummary& s);
EvalSummary evaluate(const model::Model& model, const model::HookRegistry& hooks, const RunConfig& cfg,
                     const Datasets& data, const EvalOptions& options = {});

// One cell of the lambda x layer-pair grid.
struct SweepCell {
  double lambda = 0.0;
  std::vector<std::size_t> layers;
  std::size_t steps = 0;
  double final_ce = 0.0;
  double final_cl = 0.0;
  double calibration_accuracy = 0.0;  // existence polling on D_cal
  double hot_cold_gap = 0.0;
  double overall = 0.0;
};

struct SweepReport {
  std::vector<SweepCell> cells;
  std::vector<double> lambdas;
  std::vector<std::vector<std::size_t>> pairs;

  // Cells with lambda == 0 (CE only).
  std::vector<SweepCell> ce_only() const;
  // True iff every (lambda, pair) combination appears exactly once.
  bool complete() const;
};
nlohmann::json to_json(const SweepReport& r);

std::vector<std::vector<std::size_t>> consecutive_pairs(std::size_t layers);
SweepReport run_sweep(const model::Model& model, const RunConfig& cfg, const Datasets& data,
                      const std::vector<double>& lambdas, const std::vector<std::vector<std::size_t>>& pairs,
                      const std::function<void(const SweepCell&)>& on_cell = {});
// Highest D_cal accuracy among cells at `lambda`; ties go to the earlier pair.
std::vector<std::size_t> select_layers(const SweepReport& sweep, double lambda);

// config_resolved.json: resolved config, code version, and FNV-1a hashes of
// the named input files.
void write_resolved_config(const std::filesystem::path& dir, const RunConfig& cfg,
                           const std::map<std::string, std::filesystem::path>& inputs = {});
std::string file_hash(const std::filesystem::path& path);
std::string code_version();

void write_json(const std::filesystem::path& path, const nlohmann::json& j);
nlohmann::json read_json(const std::filesystem::path& path);

}  // namespace attncal::pipeline
