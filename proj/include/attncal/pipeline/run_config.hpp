#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "attncal/calib/dac.hpp"
#include "attncal/calib/uac.hpp"
#include "attncal/model/config.hpp"
#include "attncal/model/model.hpp"
#include "attncal/synth/augment.hpp"
#include "attncal/synth/corpus.hpp"
#include "attncal/synth/scene.hpp"

namespace attncal::pipeline {

namespace defaults {
// A strong hot-region skew: at 6x6 milder ratios leave too small a hot/cold gap to measure.
inline synth::CorpusConfig corpus() {
  synth::CorpusConfig c;
  c.positive_placement.hot_ratio = 0.95;
  return c;
}
// Trained attention puts entries well below 1e-8 on some cells; a larger
// floor would cap W there and break the fixed point.
inline calib::UacConfig uac() {
  calib::UacConfig c;
  c.epsilon = 1e-30;
  return c;
}
inline calib::DacTrainConfig dac_train() {
  calib::DacTrainConfig c;
  c.max_steps = 120;
  return c;
}
}  // namespace defaults

struct SynthSection {
  synth::WorldConfig world;
  synth::CorpusConfig corpus = defaults::corpus();
  std::size_t validation_scenes = 500;
  double calibration_fraction = 0.2;
  synth::AugmentConfig augment;
};

struct PretrainSection {
  std::size_t epochs = 5;
  std::size_t batch_size = 16;
  double lr = 2e-3;
  double clip_norm = 1.0;
  std::size_t monitor_items = 128;
};

struct DacSection {
  calib::DacConfig module;
  calib::DacTrainConfig train = defaults::dac_train();  // seed comes from the seeds section
  bool auto_layers = false;  // true: the consecutive pair with the best D_cal accuracy in the sweep
  std::vector<double> sweep_lambdas = {0.0, 0.01, 0.1};
  std::size_t sweep_steps = 12;  // optimizer steps per sweep cell
};

struct EvalSection {
  std::size_t pope_scenes = 100;
  std::size_t pope_per_scene = 3;
  std::size_t mme_scenes = 40;
  std::size_t caption_scenes = 40;
  std::size_t caption_max_new = 512;
  std::size_t quadrant_scenes = 300;
};

// Every stochastic stage draws from its own seed; a non-zero master seed
// (the --seed flag) remixes all of them.
struct SeedSection {
  std::uint64_t master = 0;
  std::uint64_t corpus = 11;
  std::uint64_t model_init = 3;
  std::uint64_t pretrain = 1;
  std::uint64_t validation = 5;
  std::uint64_t augment = 23;
  std::uint64_t dac = 17;
  std::uint64_t eval = 99;

  std::uint64_t effective(std::uint64_t base) const;
};

struct PathSection {
  std::string out;         // run directory; empty: $ATTNCALIB_OUT or ./runs/default
  std::string checkpoint;  // empty: <out>/model.ckpt
  std::string calibration; // empty: <out>/uac_calibration.json
  std::string dac;         // empty: <out>/dac.ckpt
};

struct RunConfig {
  model::ModelConfig model;
  SynthSection synth;
  PretrainSection pretrain;
  calib::UacConfig uac = defaults::uac();
  DacSection dac;
  EvalSection eval;
  SeedSection seeds;
  PathSection paths;

  std::filesystem::path out_dir() const;
  std::filesystem::path checkpoint_path() const;
  std::filesystem::path calibration_path() const;
  std::filesystem::path dac_path() const;
  model::PretrainConfig pretrain_config() const;
  calib::DacTrainConfig dac_train_config() const;
  synth::SceneSpec scene_spec() const;
  // ConfigError on inconsistent settings.
  void validate() const;
};

nlohmann::json to_json(const RunConfig& c);
// Missing fields keep their defaults; unknown keys raise ConfigError naming the key path.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);

// Applies "a.b.c=value"; the value is parsed as JSON when possible, else
// taken as a string. Unknown paths raise ConfigError.
void apply_override(nlohmann::json& doc, const std::string& assignment);

}  // namespace attncal::pipeline
