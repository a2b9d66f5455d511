#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "attncal/calib/dac.hpp"
#include "attncal/calib/uac.hpp"
#include "attncal/errors.hpp"
#include "attncal/model/checkpoint.hpp"
#include "attncal/pipeline/pipeline.hpp"
#include "attncal/probe/spb.hpp"
#include "attncal/synth/dataset_io.hpp"

namespace fs = std::filesystem;
using namespace attncal;

namespace {

// Prerequisite artifact absent; exits 1 with the path.
struct MissingInput : std::runtime_error {
  explicit MissingInput(const fs::path& p) : std::runtime_error(p.string()) {}
};

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::string out;
};

pipeline::RunConfig resolve(const Common& c) {
  nlohmann::json doc = nlohmann::json::object();
  if (!c.config.empty()) {
    if (!fs::exists(c.config)) throw MissingInput(c.config);
    try {
      doc = pipeline::read_json(c.config);
    } catch (const IoError& e) {
      throw ConfigError(e.what());
    }
  }
  for (const auto& s : c.sets) pipeline::apply_override(doc, s);
  if (c.seed) pipeline::apply_override(doc, "seeds.master=" + std::to_string(*c.seed));
  if (!c.out.empty()) doc["paths"]["out"] = c.out;
  auto cfg = pipeline::run_config_from_json(doc);
  // Pin the output root now so that the resolved config names it.
  cfg.paths.out = cfg.out_dir().string();
  return cfg;
}

void require(const fs::path& p) {
  if (!fs::exists(p)) throw MissingInput(p);
}

std::vector<std::size_t> parse_layers(const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ','))
    if (!part.empty()) out.push_back(std::stoul(part));
  return out;
}

std::vector<double> parse_doubles(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ','))
    if (!part.empty()) out.push_back(std::stod(part));
  return out;
}

struct Variant {
  bool uac = false;
  bool dac = false;
  std::string name() const { return uac && dac ? "uac+dac" : uac ? "uac" : dac ? "dac" : "baseline"; }
};

// Installs the requested calibrations; returned module must outlive the hooks.
calib::DacModule install_variant(const pipeline::RunConfig& cfg, const Variant& v, model::HookRegistry& hooks,
                                 std::map<std::string, fs::path>& inputs) {
  calib::DacModule dac;
  if (v.uac) {
    require(cfg.calibration_path());
    auto cal = calib::load_calibration(cfg.calibration_path());
    calib::install_uac(hooks, cal, cfg.uac);
    inputs["calibration"] = cfg.calibration_path();
  }
  if (v.dac) {
    require(cfg.dac_path());
    dac = calib::load_dac(cfg.dac_path());
    inputs["dac"] = cfg.dac_path();
  }
  return dac;
}

model::Model load_backbone(const pipeline::RunConfig& cfg, std::map<std::string, fs::path>& inputs) {
  require(cfg.checkpoint_path());
  auto m = model::load_model(cfg.checkpoint_path());
  if (!(m.config() == cfg.model))
    throw ConfigError("checkpoint " + cfg.checkpoint_path().string() + " was trained with a different model config");
  inputs["checkpoint"] = cfg.checkpoint_path();
  return m;
}

int cmd_generate(const pipeline::RunConfig& cfg) {
  const auto dir = cfg.out_dir() / "data";
  fs::create_directories(dir);
  const auto d = pipeline::build_datasets(cfg);
  synth::write_dataset(dir / "pretrain.jsonl", d.corpus);
  synth::write_dataset(dir / "d_aug.jsonl", d.augmented.items);
  synth::write_dataset(dir / "d_cal_polling.jsonl", d.calibration_polling);
  for (const auto& s : d.pope) synth::write_dataset(dir / ("pope_" + synth::to_string(s.strategy) + ".jsonl"), s.items);
  for (const auto& [sub, items] : d.mme) synth::write_dataset(dir / ("mme_" + synth::to_string(sub) + ".jsonl"), items);
  for (int q = 0; q < 4; ++q)
    synth::write_dataset(dir / ("quadrant_" + synth::to_string(synth::Quadrant(q)) + ".jsonl"), d.quadrant[q]);
  std::vector<synth::QueryLabelPair> captions;
  for (const auto& s : d.caption_scenes) {
    synth::QueryLabelPair q;
    q.id = s.id;
    q.kind = synth::QueryKind::kCaption;
    q.scene = s;
    q.query = synth::caption_prompt();
    q.answer = synth::caption_answer(s);
    q.provenance = {s.id, 0, 0, "chair"};
    captions.push_back(std::move(q));
  }
  synth::write_dataset(dir / "captions.jsonl", captions);
  pipeline::write_resolved_config(dir, cfg);
  std::printf("generate: %zu pretraining items, |D_aug| = %zu (%zu scenes skipped), data in %s\n", d.corpus.size(),
              d.augmented.items.size(), d.augmented.skipped_scenes, dir.string().c_str());
  return 0;
}

int cmd_pretrain(const pipeline::RunConfig& cfg) {
  fs::create_directories(cfg.out_dir());
  const auto d = pipeline::build_datasets(cfg);
  std::ofstream log(cfg.out_dir() / "pretrain_log.jsonl");
  auto m = pipeline::pretrain_stage(cfg, d, [&](const model::EpochStats& s) {
    log << nlohmann::json{{"epoch", s.epoch},
                          {"monitor_loss_start", s.monitor_loss_start},
                          {"monitor_loss_end", s.monitor_loss_end},
                          {"mean_train_loss", s.mean_train_loss}}
               .dump()
        << '\n'
        << std::flush;
    std::printf("epoch %zu: train %.4f, monitor %.4f -> %.4f\n", s.epoch, s.mean_train_loss, s.monitor_loss_start,
                s.monitor_loss_end);
    std::fflush(stdout);
  });
  model::save_model(cfg.checkpoint_path(), m);
  pipeline::write_resolved_config(cfg.out_dir(), cfg);
  std::printf("checkpoint: %s\n", cfg.checkpoint_path().string().c_str());
  return 0;
}

int cmd_probe(const pipeline::RunConfig& cfg, const Variant& v, const std::string& input, const std::string& layers) {
  std::map<std::string, fs::path> inputs;
  auto m = load_backbone(cfg, inputs);
  model::HookRegistry hooks;
  auto dac = install_variant(cfg, v, hooks, inputs);
  if (dac.initialized()) calib::install_dac(hooks, dac);
  const auto world = pipeline::make_world(cfg);
  std::vector<std::size_t> ls = layers.empty() ? std::vector<std::size_t>{} : parse_layers(layers);
  if (ls.empty())
    for (std::size_t l = 0; l < cfg.model.layers; ++l) ls.push_back(l);
  for (auto l : ls)
    if (l >= cfg.model.layers) throw ConfigError("layer " + std::to_string(l) + " out of range");
  const auto kind = synth::parse_meaningless(input);
  const auto patches = world.render_meaningless(kind, cfg.uac.input_seed);
  const auto rep = probe::measure_spb(m, hooks, patches, input, cfg.uac.prompt, ls, cfg.synth.corpus.positive_placement.hot);
  const auto dir = cfg.out_dir() / ("probe_" + v.name());
  fs::create_directories(dir);
  probe::export_report(rep, dir, input);
  pipeline::write_resolved_config(dir, cfg, inputs);
  for (const auto& l : rep.layers)
    std::printf("layer %zu: KL %.6g  max/min %.4g  hot-quadrant mass %.4f\n", l.layer, l.kl, l.max_min, l.hot_mass);
  std::printf("report: %s\n", (dir / (input + ".json")).string().c_str());
  return 0;
}

int cmd_uac(const pipeline::RunConfig& cfg) {
  std::map<std::string, fs::path> inputs;
  auto m = load_backbone(cfg, inputs);
  model::HookRegistry hooks;
  const auto cal = pipeline::uac_stage(m, cfg, &hooks);
  calib::save_calibration(cfg.calibration_path(), cal);
  pipeline::write_resolved_config(cfg.out_dir(), cfg, inputs);
  std::size_t floored = 0;
  for (const auto& c : cal) floored += c.floored;
  std::printf("calibrated %zu layers (%zu entries floored at epsilon): %s\n", cal.size(), floored,
              cfg.calibration_path().string().c_str());
  return 0;
}

int cmd_dac_train(const pipeline::RunConfig& cfg, const std::string& layers_flag) {
  std::map<std::string, fs::path> inputs;
  auto m = load_backbone(cfg, inputs);
  const auto d = pipeline::build_datasets(cfg, false);
  auto layers = cfg.dac.module.layers;
  if (!layers_flag.empty()) {
    layers = parse_layers(layers_flag);
  } else if (cfg.dac.auto_layers) {
    const auto sweep_path = cfg.out_dir() / "sweep" / "sweep.json";
    require(sweep_path);
    pipeline::SweepReport sweep;
    const auto j = pipeline::read_json(sweep_path);
    for (const auto& c : j.at("cells")) {
      pipeline::SweepCell cell;
      cell.lambda = c.at("lambda").get<double>();
      cell.layers = c.at("layers").get<std::vector<std::size_t>>();
      cell.calibration_accuracy = c.at("calibration_accuracy").get<double>();
      sweep.cells.push_back(cell);
    }
    layers = pipeline::select_layers(sweep, cfg.dac.train.lambda);
    inputs["sweep"] = sweep_path;
  }
  fs::create_directories(cfg.out_dir());
  std::ofstream log(cfg.out_dir() / "dac_log.jsonl");
  const auto res = pipeline::dac_stage(m, cfg, d, layers, cfg.dac_train_config(), [&](const calib::DacLogEntry& e) {
    log << calib::to_json_line(e).dump() << '\n' << std::flush;
  });
  calib::save_dac(cfg.dac_path(), res.module);
  pipeline::write_resolved_config(cfg.out_dir(), cfg, inputs);
  const auto& last = res.train.log.back();
  std::printf("DAC on layers");
  for (auto l : layers) std::printf(" %zu", l);
  std::printf(": %zu steps, final ce %.4f cl %.4f; backbone hash %016llx unchanged\n", res.train.log.size(), last.ce,
              last.cl, static_cast<unsigned long long>(res.train.backbone_hash_after));
  std::printf("module: %s\n", cfg.dac_path().string().c_str());
  return 0;
}

int cmd_eval(const pipeline::RunConfig& cfg, const Variant& v, bool skip_captions) {
  std::map<std::string, fs::path> inputs;
  auto m = load_backbone(cfg, inputs);
  model::HookRegistry hooks;
  auto dac = install_variant(cfg, v, hooks, inputs);
  if (dac.initialized()) calib::install_dac(hooks, dac);
  const auto d = pipeline::build_datasets(cfg, false);
  pipeline::EvalOptions opt;
  opt.captions = !skip_captions;
  const auto s = pipeline::evaluate(m, hooks, cfg, d, opt);
  const auto dir = cfg.out_dir() / ("eval_" + v.name());
  fs::create_directories(dir);
  auto report = pipeline::to_json(s);
  report["variant"] = v.name();
  report["white_probe"] = probe::to_json(pipeline::white_probe(m, hooks, cfg));
  pipeline::write_json(dir / "report.json", report);
  eval::write_logs(dir / "items.jsonl", s.logs);
  pipeline::write_resolved_config(dir, cfg, inputs);
  if (s.pope)
    for (const auto& [k, pm] : s.pope->strategies)
      std::printf("POPE %-11s acc %.4f  F1 %.4f  yes-ratio %.3f\n", k.c_str(), pm.accuracy, pm.f1, pm.yes_ratio);
  if (s.mme) std::printf("MME total %.2f / 800\n", s.mme->total);
  if (s.chair)
    std::printf("CHAIR per-object %.4f  per-caption %.4f\n", s.chair->per_object_rate, s.chair->per_caption_rate);
  if (s.quadrants)
    std::printf("quadrants: hot %.4f cold %.4f gap %.4f overall %.4f\n", s.quadrants->hot_accuracy,
                s.quadrants->cold_accuracy, s.quadrants->gap, s.quadrants->overall);
  std::printf("report: %s\n", (dir / "report.json").string().c_str());
  return 0;
}

int cmd_sweep(const pipeline::RunConfig& cfg, const std::string& lambdas_flag, const std::string& ndac) {
  std::map<std::string, fs::path> inputs;
  auto m = load_backbone(cfg, inputs);
  const auto d = pipeline::build_datasets(cfg, false);
  const auto lambdas = lambdas_flag.empty() ? cfg.dac.sweep_lambdas : parse_doubles(lambdas_flag);
  std::vector<std::vector<std::size_t>> pairs;
  if (ndac == "all-pairs") {
    pairs = pipeline::consecutive_pairs(cfg.model.layers);
  } else {
    // Semicolon-separated layer lists, e.g. "0,1;2,3".
    std::stringstream ss(ndac);
    std::string part;
    while (std::getline(ss, part, ';')) pairs.push_back(parse_layers(part));
  }
  const auto dir = cfg.out_dir() / "sweep";
  fs::create_directories(dir);
  auto rep = pipeline::run_sweep(m, cfg, d, lambdas, pairs, [&](const pipeline::SweepCell& c) {
    std::printf("lambda %-5g layers %zu,%zu: D_cal acc %.4f  gap %.4f  overall %.4f\n", c.lambda, c.layers.front(),
                c.layers.back(), c.calibration_accuracy, c.hot_cold_gap, c.overall);
    std::fflush(stdout);
  });
  pipeline::write_json(dir / "sweep.json", pipeline::to_json(rep));
  for (std::size_t i = 0; i < rep.cells.size(); ++i) {
    const auto& c = rep.cells[i];
    std::string name = "cell_lambda" + probe::format_sig9(c.lambda) + "_layers";
    for (auto l : c.layers) name += "_" + std::to_string(l);
    pipeline::write_json(dir / (name + ".json"), to_json(pipeline::SweepReport{{c}, {c.lambda}, {c.layers}})["cells"][0]);
  }
  pipeline::write_resolved_config(dir, cfg, inputs);
  std::printf("%zu cells (%zu with lambda = 0); complete: %s\n", rep.cells.size(), rep.ce_only().size(),
              rep.complete() ? "yes" : "no");
  return rep.complete() ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Attention calibration workbench for a small vision-language transformer"};
  app.require_subcommand(1);
  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "JSON run config");
    sub->add_option("--set", common.sets, "Dotted override key=value (repeatable)");
    sub->add_option("--seed", common.seed, "Master seed; remixes every stage seed");
    sub->add_option("--out", common.out, "Run directory (default: $ATTNCALIB_OUT or ./runs/default)");
  };
  Variant variant;
  std::string input = "white", layers, lambdas, ndac = "all-pairs";
  bool skip_captions = false;

  auto* gen = app.add_subcommand("generate", "Write every dataset as JSONL");
  auto* pre = app.add_subcommand("pretrain", "Biased pretraining; writes the checkpoint");
  auto* prb = app.add_subcommand("probe", "Spatial attention heatmaps on a meaningless input");
  auto* uac = app.add_subcommand("uac", "Fit uniform attention calibration");
  auto* dac = app.add_subcommand("dac-train", "Train the dynamic attention calibration module");
  auto* evl = app.add_subcommand("eval", "POPE, MME, CHAIR, and quadrant accuracy");
  auto* swp = app.add_subcommand("sweep", "lambda x DAC-layer ablation grid");
  for (auto* s : {gen, pre, prb, uac, dac, evl, swp}) add_common(s);
  for (auto* s : {prb, evl}) {
    s->add_flag("--with-uac", variant.uac, "Install the fitted UAC calibration");
    s->add_flag("--with-dac", variant.dac, "Install the trained DAC module");
  }
  prb->add_option("--input", input, "white, black or noise")->check(CLI::IsMember({"white", "black", "noise"}));
  prb->add_option("--layers", layers, "Comma-separated layers (default: all)");
  dac->add_option("--layers", layers, "Comma-separated target layers (overrides config and sweep)");
  evl->add_flag("--no-captions", skip_captions, "Skip caption generation");
  swp->add_option("--lambda", lambdas, "Comma-separated lambda values");
  swp->add_option("--ndac", ndac, "all-pairs, or layer lists like \"0,1;2,3\"");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    const auto cfg = resolve(common);
    if (*gen) return cmd_generate(cfg);
    if (*pre) return cmd_pretrain(cfg);
    if (*prb) return cmd_probe(cfg, variant, input, layers);
    if (*uac) return cmd_uac(cfg);
    if (*dac) return cmd_dac_train(cfg, layers);
    if (*evl) return cmd_eval(cfg, variant, skip_captions);
    if (*swp) return cmd_sweep(cfg, lambdas, ndac);
  } catch (const MissingInput& e) {
    std::fprintf(stderr, "error: missing prerequisite: %s\n", e.what());
    return 1;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: invalid configuration: %s\n", e.what());
    return 1;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error: invalid argument: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 2;
}
