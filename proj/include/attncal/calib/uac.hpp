#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "attncal/model/hooks.hpp"
#include "attncal/model/model.hpp"
#include "attncal/synth/scene.hpp"

namespace attncal::calib {

enum class PromptKind { kOpenEnded, kPolling };
std::string to_string(PromptKind k);
PromptKind parse_prompt_kind(const std::string& s);

// The text half of a probe. Polling asks about `object` and decodes one
// greedy step (the yes/no answer); open-ended asks for a description and
// samples with top-p = 1 from `seed`, up to `max_steps` steps.
struct ProbePrompt {
  PromptKind kind = PromptKind::kPolling;
  std::size_t object = 0;
  std::size_t max_steps = 32;
  std::uint64_t seed = 0;

  std::vector<std::size_t> tokens() const;
  model::DecodeOptions decode_options() const;
};

void to_json(nlohmann::json& j, const ProbePrompt& p);
void from_json(const nlohmann::json& j, ProbePrompt& p);

// Per-head A_img at one layer, mean over decode steps of the post-softmax
// row at the last query position.
struct LayerVisionAttention {
  std::size_t layer = 0;
  std::vector<std::vector<double>> heads;  // [H][n]
};

// Runs the probe once and returns Ã_img for each requested layer, as seen
// after whatever hooks are installed. NumericError on an all-zero slice.
std::vector<LayerVisionAttention> estimate_bias(const model::Model& model, const model::HookRegistry& hooks,
                                                const nd::Tensor& patches, const ProbePrompt& prompt,
                                                std::span<const std::size_t> layers);

// W = avg(A)/max(A, eps) per head.
struct CalibrationMatrix {
  std::size_t layer = 0;
  double epsilon = 1e-8;
  std::vector<std::vector<double>> heads;  // [H][n], all entries finite and > 0
  std::size_t floored = 0;                 // entries that hit the epsilon floor
  std::string source;                      // meaningless input kind
  std::string prompt;                      // detokenized probe prompt
};

CalibrationMatrix compute_W(const LayerVisionAttention& a, double epsilon = 1e-8);
// One W shared by all heads, computed from the head-mean of A.
CalibrationMatrix compute_W_head_averaged(const LayerVisionAttention& a, double epsilon = 1e-8);

// Hadamard product on a vision slice.
nd::Tensor apply_uac(const nd::Tensor& vision_slice, const nd::Tensor& w);
// Whole-row form: vision entries [0, n) scaled by W, then the row rescaled
// to its original mass. Text entries change only by that common factor.
std::vector<double> apply_uac_row(std::span<const double> row, std::span<const double> w);

struct UacConfig {
  model::HookStage stage = model::HookStage::kPostSoftmax;
  bool renormalize = true;
  bool head_averaged = false;
  double epsilon = 1e-8;
  model::QueryPolicy positions = model::QueryPolicy::kLastToken;
  synth::MeaninglessKind input = synth::MeaninglessKind::kWhite;
  std::uint64_t input_seed = 0;
  ProbePrompt prompt;
  std::vector<std::size_t> layers;  // empty: every layer
};

void to_json(nlohmann::json& j, const UacConfig& c);
void from_json(const nlohmann::json& j, UacConfig& c);

// Adds one hook per calibrated layer. Post-softmax multiplies the slice by
// W; pre-softmax multiplies the slice logits by W (literal reading, kept
// for comparison only).
void install_uac(model::HookRegistry& hooks, std::span<const CalibrationMatrix> calibration, const UacConfig& config);

// Estimates and installs W layer by layer in increasing order, so every
// estimate sees the calibrated earlier layers. On the estimation input with
// a one-step polling prompt, each calibrated slice is then exactly uniform.
std::vector<CalibrationMatrix> fit_uac(const model::Model& model, const synth::World& world, const UacConfig& config,
                                       model::HookRegistry* installed = nullptr);

// Persisted as a JSON array of {layer, head, epsilon, values[n]} entries
// (plus source/prompt metadata).
nlohmann::json calibration_to_json(std::span<const CalibrationMatrix> calibration);
std::vector<CalibrationMatrix> calibration_from_json(const nlohmann::json& j);
void save_calibration(const std::filesystem::path& path, std::span<const CalibrationMatrix> calibration);
std::vector<CalibrationMatrix> load_calibration(const std::filesystem::path& path);

}  // namespace attncal::calib
