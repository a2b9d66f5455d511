#include "attncal/pipeline/run_config.hpp"

#include <cstdlib>
#include <fstream>

#include "attncal/errors.hpp"

namespace attncal::pipeline {

std::uint64_t SeedSection::effective(std::uint64_t base) const {
  if (master == 0) return base;
  // splitmix64 finalizer over (master, base)
  std::uint64_t z = master * 0x9E3779B97F4A7C15ull + base;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

std::filesystem::path RunConfig::out_dir() const {
  if (!paths.out.empty()) return paths.out;
  if (const char* env = std::getenv("ATTNCALIB_OUT"); env && *env) return env;
  return std::filesystem::path("runs") / "default";
}

std::filesystem::path RunConfig::checkpoint_path() const {
  return paths.checkpoint.empty() ? out_dir() / "model.ckpt" : std::filesystem::path(paths.checkpoint);
}

std::filesystem::path RunConfig::calibration_path() const {
  return paths.calibration.empty() ? out_dir() / "uac_calibration.json" : std::filesystem::path(paths.calibration);
}

std::filesystem::path RunConfig::dac_path() const {
  return paths.dac.empty() ? out_dir() / "dac.ckpt" : std::filesystem::path(paths.dac);
}

model::PretrainConfig RunConfig::pretrain_config() const {
  model::PretrainConfig p;
  p.epochs = pretrain.epochs;
  p.batch_size = pretrain.batch_size;
  p.lr = pretrain.lr;
  p.clip_norm = pretrain.clip_norm;
  p.monitor_items = pretrain.monitor_items;
  p.seed = seeds.effective(seeds.pretrain);
  return p;
}

calib::DacTrainConfig RunConfig::dac_train_config() const {
  auto t = dac.train;
  t.seed = seeds.effective(seeds.dac);
  return t;
}

synth::SceneSpec RunConfig::scene_spec() const {
  auto s = synth.corpus.scene;
  s.grid_h = model.grid_h;
  s.grid_w = model.grid_w;
  return s;
}

void RunConfig::validate() const {
  model.validate();
  const auto& sc = synth.corpus.scene;
  if (sc.min_objects > sc.max_objects) throw ConfigError("synth.corpus.min_objects exceeds max_objects");
  if (sc.min_side == 0 || sc.min_side > sc.max_side) throw ConfigError("synth.corpus side range is invalid");
  if (sc.max_side > model.grid_h || sc.max_side > model.grid_w) throw ConfigError("objects larger than the grid");
  if (synth.corpus.positive_placement.hot_ratio < 0.0 || synth.corpus.positive_placement.hot_ratio > 1.0)
    throw ConfigError("synth.corpus.hot_ratio must lie in [0, 1]");
  if (synth.calibration_fraction <= 0.0 || synth.calibration_fraction >= 1.0)
    throw ConfigError("synth.calibration_fraction must lie in (0, 1)");
  if (synth.augment.crops_per_object == 0 || synth.augment.max_objects_per_scene == 0)
    throw ConfigError("synth.augment values must be positive");
  if (!(synth.world.noise_sigma >= 0.0)) throw ConfigError("synth.noise_sigma must be non-negative");
  if (pretrain.epochs == 0 || pretrain.batch_size == 0) throw ConfigError("pretrain epochs and batch_size must be positive");
  for (auto l : uac.layers)
    if (l >= model.layers) throw ConfigError("uac.layers entry " + std::to_string(l) + " out of range");
  if (!(uac.epsilon > 0.0)) throw ConfigError("uac.epsilon must be positive");
  for (auto l : dac.module.layers)
    if (l >= model.layers) throw ConfigError("dac.layers entry " + std::to_string(l) + " out of range");
  if (dac.train.lambda < 0.0) throw ConfigError("dac.lambda must be non-negative");
  if (!(dac.train.tau > 0.0)) throw ConfigError("dac.tau must be positive");
  if (dac.train.lambda > 0.0 && dac.train.batch_size < 2) throw ConfigError("dac.batch_size must be >= 2 when lambda > 0");
  for (double l : dac.sweep_lambdas)
    if (l < 0.0) throw ConfigError("dac.sweep_lambdas entries must be non-negative");
  if (model.layers < 2 && dac.auto_layers) throw ConfigError("automatic DAC layer selection needs two layers");
  if (eval.pope_scenes == 0 || eval.mme_scenes == 0 || eval.caption_scenes == 0 || eval.quadrant_scenes == 0)
    throw ConfigError("eval set sizes must be positive");
}

nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json corpus = c.synth.corpus;
  nlohmann::json dac_module = c.dac.module;
  nlohmann::json dac_train = c.dac.train;
  dac_train.erase("seed");
  nlohmann::json uac = c.uac;
  return {{"model", c.model},
          {"synth",
           {{"noise_sigma", c.synth.world.noise_sigma},
            {"world_seed", c.synth.world.world_seed},
            {"corpus", corpus},
            {"validation_scenes", c.synth.validation_scenes},
            {"calibration_fraction", c.synth.calibration_fraction},
            {"augment",
             {{"max_objects_per_scene", c.synth.augment.max_objects_per_scene},
              {"crops_per_object", c.synth.augment.crops_per_object}}}}},
          {"pretrain",
           {{"epochs", c.pretrain.epochs},
            {"batch_size", c.pretrain.batch_size},
            {"lr", c.pretrain.lr},
            {"clip_norm", c.pretrain.clip_norm},
            {"monitor_items", c.pretrain.monitor_items}}},
          {"uac", uac},
          {"dac",
           {{"module", dac_module},
            {"train", dac_train},
            {"auto_layers", c.dac.auto_layers},
            {"sweep_lambdas", c.dac.sweep_lambdas},
            {"sweep_steps", c.dac.sweep_steps}}},
          {"eval",
           {{"pope_scenes", c.eval.pope_scenes},
            {"pope_per_scene", c.eval.pope_per_scene},
            {"mme_scenes", c.eval.mme_scenes},
            {"caption_scenes", c.eval.caption_scenes},
            {"caption_max_new", c.eval.caption_max_new},
            {"quadrant_scenes", c.eval.quadrant_scenes}}},
          {"seeds",
           {{"master", c.seeds.master},
            {"corpus", c.seeds.corpus},
            {"model_init", c.seeds.model_init},
            {"pretrain", c.seeds.pretrain},
            {"validation", c.seeds.validation},
            {"augment", c.seeds.augment},
            {"dac", c.seeds.dac},
            {"eval", c.seeds.eval}}},
          {"paths",
           {{"out", c.paths.out},
            {"checkpoint", c.paths.checkpoint},
            {"calibration", c.paths.calibration},
            {"dac", c.paths.dac}}}};
}

namespace {

// Every key in `doc` must exist in `reference` (recursively for objects).
void check_keys(const nlohmann::json& doc, const nlohmann::json& reference, const std::string& where) {
  if (!doc.is_object()) {
    if (reference.is_object()) throw ConfigError("config key '" + where + "' must be an object");
    return;
  }
  for (auto it = doc.begin(); it != doc.end(); ++it) {
    const auto path = where.empty() ? it.key() : where + "." + it.key();
    if (!reference.is_object() || !reference.contains(it.key())) throw ConfigError("unknown config key '" + path + "'");
    check_keys(it.value(), reference.at(it.key()), path);
  }
}

template <class T>
void read(const nlohmann::json& j, const char* key, T& field) {
  if (j.contains(key)) field = j.at(key).get<T>();
}

}  // namespace

RunConfig run_config_from_json(const nlohmann::json& j) {
  const RunConfig defaults;
  check_keys(j, to_json(defaults), "");
  // Merge onto the defaults so every absent field keeps its default.
  auto merged = to_json(defaults);
  merged.merge_patch(j);
  RunConfig c;
  try {
    c.model = merged.at("model").get<model::ModelConfig>();
    const auto& s = merged.at("synth");
    c.synth.world.noise_sigma = s.at("noise_sigma").get<double>();
    c.synth.world.world_seed = s.at("world_seed").get<std::uint64_t>();
    c.synth.world.grid_h = c.model.grid_h;
    c.synth.world.grid_w = c.model.grid_w;
    c.synth.world.patch_dim = c.model.patch_dim;
    c.synth.corpus = s.at("corpus").get<synth::CorpusConfig>();
    c.synth.corpus.scene.grid_h = c.model.grid_h;
    c.synth.corpus.scene.grid_w = c.model.grid_w;
    read(s, "validation_scenes", c.synth.validation_scenes);
    read(s, "calibration_fraction", c.synth.calibration_fraction);
    read(s.at("augment"), "max_objects_per_scene", c.synth.augment.max_objects_per_scene);
    read(s.at("augment"), "crops_per_object", c.synth.augment.crops_per_object);
    const auto& p = merged.at("pretrain");
    read(p, "epochs", c.pretrain.epochs);
    read(p, "batch_size", c.pretrain.batch_size);
    read(p, "lr", c.pretrain.lr);
    read(p, "clip_norm", c.pretrain.clip_norm);
    read(p, "monitor_items", c.pretrain.monitor_items);
    c.uac = merged.at("uac").get<calib::UacConfig>();
    const auto& d = merged.at("dac");
    c.dac.module = d.at("module").get<calib::DacConfig>();
    c.dac.train = d.at("train").get<calib::DacTrainConfig>();
    read(d, "auto_layers", c.dac.auto_layers);
    read(d, "sweep_lambdas", c.dac.sweep_lambdas);
    read(d, "sweep_steps", c.dac.sweep_steps);
    const auto& e = merged.at("eval");
    read(e, "pope_scenes", c.eval.pope_scenes);
    read(e, "pope_per_scene", c.eval.pope_per_scene);
    read(e, "mme_scenes", c.eval.mme_scenes);
    read(e, "caption_scenes", c.eval.caption_scenes);
    read(e, "caption_max_new", c.eval.caption_max_new);
    read(e, "quadrant_scenes", c.eval.quadrant_scenes);
    const auto& sd = merged.at("seeds");
    read(sd, "master", c.seeds.master);
    read(sd, "corpus", c.seeds.corpus);
    read(sd, "model_init", c.seeds.model_init);
    read(sd, "pretrain", c.seeds.pretrain);
    read(sd, "validation", c.seeds.validation);
    read(sd, "augment", c.seeds.augment);
    read(sd, "dac", c.seeds.dac);
    read(sd, "eval", c.seeds.eval);
    const auto& pa = merged.at("paths");
    read(pa, "out", c.paths.out);
    read(pa, "checkpoint", c.paths.checkpoint);
    read(pa, "calibration", c.paths.calibration);
    read(pa, "dac", c.paths.dac);
  } catch (const nlohmann::json::exception& ex) {
    throw ConfigError(std::string("invalid config value: ") + ex.what());
  }
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config file " + path.string());
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

void apply_override(nlohmann::json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const auto key = assignment.substr(0, eq);
  const auto text = assignment.substr(eq + 1);
  nlohmann::json value;
  try {
    value = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception&) {
    value = text;
  }
  const auto reference = to_json(RunConfig{});
  const nlohmann::json* ref = &reference;
  nlohmann::json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const auto part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty() || !ref->is_object() || !ref->contains(part)) throw ConfigError("unknown config key '" + key + "'");
    ref = &ref->at(part);
    if (!node->is_object()) *node = nlohmann::json::object();
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    start = dot + 1;
  }
}

}  // namespace attncal::pipeline
