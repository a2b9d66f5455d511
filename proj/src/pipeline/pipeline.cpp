#include "attncal/pipeline/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>

#include "attncal/errors.hpp"
#include "attncal/model/vocab.hpp"
#include "attncal/nd/tape.hpp"

namespace attncal::pipeline {

synth::World make_world(const RunConfig& cfg) {
  auto w = cfg.synth.world;
  w.grid_h = cfg.model.grid_h;
  w.grid_w = cfg.model.grid_w;
  w.patch_dim = cfg.model.patch_dim;
  return synth::World(w);
}

Datasets build_datasets(const RunConfig& cfg, bool with_corpus) {
  const synth::ObjectCatalog catalog;
  const auto spec = cfg.scene_spec();
  const auto& seeds = cfg.seeds;
  Datasets d;
  if (with_corpus) {
    auto cc = cfg.synth.corpus;
    cc.scene = spec;
    Rng rng(seeds.effective(seeds.corpus));
    d.corpus = synth::build_pretraining_corpus(cc, catalog, rng);
  }
  {
    Rng rng(seeds.effective(seeds.validation));
    d.validation = synth::gen_scenes(cfg.synth.validation_scenes, spec, catalog, rng);
    auto [cal, rep] = synth::split_calibration(d.validation, cfg.synth.calibration_fraction);
    d.calibration = std::move(cal);
    d.report = std::move(rep);
  }
  {
    Rng rng(seeds.effective(seeds.augment));
    d.augmented = synth::crop_augment(d.calibration, cfg.synth.augment, rng);
    const auto stats = synth::compute_statistics(d.calibration, model::tok::kNumObjects);
    auto set = synth::sample_pope_negatives(d.calibration, synth::PopeStrategy::kRandom, stats, rng, 1);
    d.calibration_polling = std::move(set.items);
  }
  {
    Rng rng(seeds.effective(seeds.eval));
    const auto n = std::min(cfg.eval.pope_scenes, d.report.size());
    std::span<const synth::SyntheticScene> pope_scenes(d.report.data(), n);
    // Popularity and co-occurrence come from the reported split itself.
    const auto stats = synth::compute_statistics(d.report, model::tok::kNumObjects);
    for (auto s : synth::kAllPopeStrategies)
      d.pope.push_back(synth::sample_pope_negatives(pope_scenes, s, stats, rng, cfg.eval.pope_per_scene));
    for (auto sub : {synth::MmeSubtask::kExistence, synth::MmeSubtask::kCount, synth::MmeSubtask::kPosition,
                     synth::MmeSubtask::kColor})
      d.mme.emplace_back(sub, synth::build_mme_subtask(sub, cfg.eval.mme_scenes, spec, catalog, rng));
    d.caption_scenes = synth::gen_scenes(cfg.eval.caption_scenes, spec, catalog, rng, 1'000'000);
    for (int q = 0; q < 4; ++q)
      d.quadrant[q] =
          synth::build_quadrant_polling_set(synth::Quadrant(q), cfg.eval.quadrant_scenes, spec, catalog, rng);
  }
  return d;
}

model::Model pretrain_stage(const RunConfig& cfg, const Datasets& data,
                            const std::function<void(const model::EpochStats&)>& on_epoch) {
  if (data.corpus.empty()) throw ConfigError("pretraining corpus is empty");
  const auto world = make_world(cfg);
  std::vector<model::TrainingItem> items;
  items.reserve(data.corpus.size());
  for (const auto& q : data.corpus) items.push_back(synth::to_training_item(world, q));
  model::Model m(cfg.model, cfg.seeds.effective(cfg.seeds.model_init));
  model::pretrain(m, items, cfg.pretrain_config(), on_epoch);
  return m;
}

std::vector<calib::CalibrationMatrix> uac_stage(const model::Model& model, const RunConfig& cfg,
                                                model::HookRegistry* installed) {
  return calib::fit_uac(model, make_world(cfg), cfg.uac, installed);
}

DacStageResult dac_stage(const model::Model& model, const RunConfig& cfg, const Datasets& data,
                         const std::vector<std::size_t>& layers, const calib::DacTrainConfig& train,
                         const calib::DacStepCallback& on_step) {
  if (data.augmented.items.empty()) throw ConfigError("D_aug is empty; nothing to train DAC on");
  auto dc = cfg.dac.module;
  dc.layers = layers;
  DacStageResult r;
  r.module = calib::DacModule(dc, cfg.model.n_vision());
  r.train = calib::train_dac(model, r.module, make_world(cfg), data.augmented.items, train, on_step);
  return r;
}

probe::SpbReport white_probe(const model::Model& model, const model::HookRegistry& hooks, const RunConfig& cfg) {
  const auto world = make_world(cfg);
  std::vector<std::size_t> layers(cfg.model.layers);
  for (std::size_t l = 0; l < layers.size(); ++l) layers[l] = l;
  return probe::measure_spb(model, hooks, world.render_meaningless(synth::MeaninglessKind::kWhite), "white",
                            cfg.uac.prompt, layers, cfg.synth.corpus.positive_placement.hot);
}

nlohmann::json to_json(const QuadrantReport& q) {
  nlohmann::json acc = nlohmann::json::object();
  for (int i = 0; i < 4; ++i) acc[synth::to_string(synth::Quadrant(i))] = q.accuracy[i];
  return {{"accuracy", acc},
          {"hot_accuracy", q.hot_accuracy},
          {"cold_accuracy", q.cold_accuracy},
          {"gap", q.gap},
          {"overall", q.overall}};
}

QuadrantReport quadrant_report(std::span<const eval::ItemLog> logs, synth::Quadrant hot) {
  QuadrantReport r;
  for (int i = 0; i < 4; ++i) {
    const auto task = "quadrant:" + synth::to_string(synth::Quadrant(i));
    std::vector<eval::ItemLog> mine;
    std::copy_if(logs.begin(), logs.end(), std::back_inserter(mine), [&](const auto& l) { return l.task == task; });
    if (mine.empty()) throw ConfigError("no logs for " + task);
    r.accuracy[i] = eval::accuracy_of(mine);
    r.overall += r.accuracy[i] / 4.0;
  }
  r.hot_accuracy = r.accuracy[static_cast<int>(hot)];
  r.cold_accuracy = r.accuracy[static_cast<int>(synth::opposite(hot))];
  r.gap = r.hot_accuracy - r.cold_accuracy;
  return r;
}

nlohmann::json to_json(const EvalSummary& s) {
  nlohmann::json j = nlohmann::json::object();
  if (s.pope) j["pope"] = eval::to_json(*s.pope);
  if (s.mme) j["mme"] = eval::to_json(*s.mme);
  if (s.chair) j["chair"] = eval::to_json(*s.chair);
  if (s.quadrants) j["quadrants"] = to_json(*s.quadrants);
  return j;
}

EvalSummary evaluate(const model::Model& model, const model::HookRegistry& hooks, const RunConfig& cfg,
                     const Datasets& data, const EvalOptions& options) {
  const auto world = make_world(cfg);
  const auto answer = eval::model_answerer(model, hooks, world);
  EvalSummary s;
  auto append = [&](std::vector<eval::ItemLog>& l) { s.logs.insert(s.logs.end(), l.begin(), l.end()); };
  if (options.pope) {
    std::vector<eval::ItemLog> l;
    s.pope = eval::pope_eval(answer, data.pope, &l);
    append(l);
  }
  if (options.mme) {
    std::vector<eval::ItemLog> l;
    s.mme = eval::mme_eval(answer, data.mme, &l);
    append(l);
  }
  if (options.captions) {
    auto l = eval::run_captions(model, hooks, world, data.caption_scenes, cfg.eval.caption_max_new);
    s.chair = eval::chair_report(l);
    append(l);
  }
  if (options.quadrants) {
    std::vector<eval::ItemLog> l;
    for (int q = 0; q < 4; ++q) {
      auto part = eval::run_polling(answer, data.quadrant[q], "quadrant:" + synth::to_string(synth::Quadrant(q)));
      l.insert(l.end(), part.begin(), part.end());
    }
    s.quadrants = quadrant_report(l, cfg.synth.corpus.positive_placement.hot);
    append(l);
  }
  return s;
}

std::vector<SweepCell> SweepReport::ce_only() const {
  std::vector<SweepCell> out;
  std::copy_if(cells.begin(), cells.end(), std::back_inserter(out), [](const auto& c) { return c.lambda == 0.0; });
  return out;
}

bool SweepReport::complete() const {
  std::set<std::pair<double, std::vector<std::size_t>>> seen;
  for (const auto& c : cells) {
    if (std::find(lambdas.begin(), lambdas.end(), c.lambda) == lambdas.end()) return false;
    if (std::find(pairs.begin(), pairs.end(), c.layers) == pairs.end()) return false;
    if (!seen.emplace(c.lambda, c.layers).second) return false;
  }
  return seen.size() == lambdas.size() * pairs.size();
}

namespace {

nlohmann::json cell_json(const SweepCell& c) {
  return {{"lambda", c.lambda},
          {"layers", c.layers},
          {"steps", c.steps},
          {"final_ce", c.final_ce},
          {"final_cl", c.final_cl},
          {"calibration_accuracy", c.calibration_accuracy},
          {"hot_cold_gap", c.hot_cold_gap},
          {"overall", c.overall}};
}

}  // namespace

nlohmann::json to_json(const SweepReport& r) {
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& c : r.cells) cells.push_back(cell_json(c));
  nlohmann::json ce = nlohmann::json::array();
  for (const auto& c : r.ce_only()) ce.push_back(cell_json(c));
  return {{"lambdas", r.lambdas}, {"pairs", r.pairs}, {"cells", cells}, {"ce_only", ce}, {"complete", r.complete()}};
}

std::vector<std::vector<std::size_t>> consecutive_pairs(std::size_t layers) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t l = 0; l + 1 < layers; ++l) out.push_back({l, l + 1});
  return out;
}

SweepReport run_sweep(const model::Model& model, const RunConfig& cfg, const Datasets& data,
                      const std::vector<double>& lambdas, const std::vector<std::vector<std::size_t>>& pairs,
                      const std::function<void(const SweepCell&)>& on_cell) {
  if (lambdas.empty() || pairs.empty()) throw ConfigError("sweep needs at least one lambda and one layer set");
  for (const auto& p : pairs)
    for (auto l : p)
      if (l >= cfg.model.layers) throw ConfigError("sweep layer " + std::to_string(l) + " out of range");
  SweepReport r;
  r.lambdas = lambdas;
  r.pairs = pairs;
  const auto world = make_world(cfg);
  EvalOptions quads;
  quads.pope = quads.mme = quads.captions = false;
  for (double lambda : lambdas) {
    for (const auto& pair : pairs) {
      auto train = cfg.dac_train_config();
      train.lambda = lambda;
      train.max_steps = cfg.dac.sweep_steps;
      auto res = dac_stage(model, cfg, data, pair, train);
      model::HookRegistry hooks;
      calib::install_dac(hooks, res.module);
      SweepCell c;
      c.lambda = lambda;
      c.layers = pair;
      c.steps = res.train.log.size();
      if (!res.train.log.empty()) {
        c.final_ce = res.train.log.back().ce;
        c.final_cl = res.train.log.back().cl;
      }
      const auto answer = eval::model_answerer(model, hooks, world);
      c.calibration_accuracy = eval::accuracy_of(eval::run_polling(answer, data.calibration_polling, "dcal"));
      const auto q = *evaluate(model, hooks, cfg, data, quads).quadrants;
      c.hot_cold_gap = q.gap;
      c.overall = q.overall;
      if (on_cell) on_cell(c);
      r.cells.push_back(std::move(c));
    }
  }
  return r;
}

std::vector<std::size_t> select_layers(const SweepReport& sweep, double lambda) {
  const SweepCell* best = nullptr;
  for (const auto& c : sweep.cells)
    if (c.lambda == lambda && (!best || c.calibration_accuracy > best->calibration_accuracy)) best = &c;
  if (!best) throw ConfigError("sweep has no cell at lambda " + std::to_string(lambda));
  return best->layers;
}

std::string file_hash(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read " + path.string());
  std::uint64_t h = 1469598103934665603ull;
  char buf[1 << 16];
  while (f) {
    f.read(buf, sizeof buf);
    for (std::streamsize i = 0; i < f.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ull;
    }
  }
  char out[17];
  std::snprintf(out, sizeof out, "%016llx", static_cast<unsigned long long>(h));
  return out;
}

std::string code_version() {
#ifdef ATTNCALIB_GIT_REV
  return std::string(ATTNCALIB_VERSION) + "+" + ATTNCALIB_GIT_REV;
#else
  return ATTNCALIB_VERSION;
#endif
}

void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f << j.dump(2) << '\n';
}

nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read " + path.string());
  try {
    return nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

void write_resolved_config(const std::filesystem::path& dir, const RunConfig& cfg,
                           const std::map<std::string, std::filesystem::path>& inputs) {
  nlohmann::json hashes = nlohmann::json::object();
  for (const auto& [name, p] : inputs) hashes[name] = {{"path", p.string()}, {"fnv1a64", file_hash(p)}};
  write_json(dir / "config_resolved.json",
             {{"config", to_json(cfg)}, {"code_version", code_version()}, {"inputs", hashes}});
}

}  // namespace attncal::pipeline
