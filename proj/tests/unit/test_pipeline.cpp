#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "attncal/errors.hpp"
#include "attncal/pipeline/pipeline.hpp"

using namespace attncal;
using namespace attncal::pipeline;
using nlohmann::json;

namespace {

RunConfig tiny_run() {
  return run_config_from_json(json::parse(R"({
    "model": {"grid_h": 3, "grid_w": 3, "embed_dim": 16, "heads": 2, "layers": 3, "mlp_hidden": 32},
    "synth": {"corpus": {"items": 80, "max_side": 1, "max_objects": 2}, "validation_scenes": 30},
    "pretrain": {"epochs": 1, "batch_size": 8},
    "dac": {"train": {"max_steps": 2, "batch_size": 2, "grad_accum": 1}, "sweep_steps": 2},
    "eval": {"pope_scenes": 4, "pope_per_scene": 1, "mme_scenes": 2, "caption_scenes": 2, "quadrant_scenes": 4}
  })"));
}

}  // namespace

TEST_CASE("run config: JSON round trip and defaults") {
  const RunConfig d;
  CHECK(to_json(run_config_from_json(to_json(d))) == to_json(d));
  CHECK(to_json(run_config_from_json(json::object())) == to_json(d));
  const auto t = tiny_run();
  CHECK(to_json(run_config_from_json(to_json(t))) == to_json(t));
  CHECK(t.model.layers == 3);
  CHECK(t.pretrain.lr == d.pretrain.lr);
  CHECK_NOTHROW(d.validate());
  CHECK_NOTHROW(t.validate());
}

TEST_CASE("run config: unknown keys name their path") {
  try {
    run_config_from_json(json::parse(R"({"dac": {"train": {"lamda": 0.1}}})"));
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("dac.train.lamda") != std::string::npos);
  }
  CHECK_THROWS_AS(run_config_from_json(json::parse(R"({"bogus": 1})")), ConfigError);
}

TEST_CASE("run config: dotted overrides") {
  auto doc = to_json(RunConfig{});
  apply_override(doc, "dac.train.lambda=0.1");
  apply_override(doc, "paths.out=/tmp/x");
  apply_override(doc, "dac.module.layers=[2,3]");
  const auto c = run_config_from_json(doc);
  CHECK(c.dac.train.lambda == 0.1);
  CHECK(c.paths.out == "/tmp/x");
  CHECK(c.dac.module.layers == std::vector<std::size_t>{2, 3});
  CHECK_THROWS_AS(apply_override(doc, "model.nope=1"), ConfigError);
  CHECK_THROWS_AS(apply_override(doc, "no_equals_sign"), ConfigError);
}

TEST_CASE("run config: validation") {
  auto bad = [](const char* assignment) {
    auto doc = to_json(RunConfig{});
    apply_override(doc, assignment);
    return run_config_from_json(doc);
  };
  CHECK_THROWS_AS(bad("dac.train.tau=0").validate(), ConfigError);
  CHECK_THROWS_AS(bad("dac.module.layers=[7]").validate(), ConfigError);
  CHECK_THROWS_AS(bad("uac.epsilon=0").validate(), ConfigError);
  CHECK_THROWS_AS(bad("synth.corpus.hot_ratio=1.5").validate(), ConfigError);
  CHECK_THROWS_AS(bad("synth.calibration_fraction=1").validate(), ConfigError);
  CHECK_THROWS_AS(bad("dac.train.batch_size=1").validate(), ConfigError);
  CHECK_NOTHROW(bad("dac.train.lambda=0").validate());
}

TEST_CASE("seeds: master remixes every stage, zero keeps them") {
  SeedSection s;
  CHECK(s.effective(17) == 17);
  s.master = 5;
  CHECK(s.effective(17) != 17);
  CHECK(s.effective(17) != s.effective(18));
  SeedSection t;
  t.master = 6;
  CHECK(s.effective(17) != t.effective(17));
}

TEST_CASE("datasets: deterministic, disjoint splits, independent seeds") {
  auto cfg = tiny_run();
  const auto a = build_datasets(cfg);
  const auto b = build_datasets(cfg);
  CHECK(a.corpus.size() == 80);
  CHECK(a.corpus.size() == b.corpus.size());
  CHECK(json(a.validation.front()) == json(b.validation.front()));
  CHECK(a.calibration.size() + a.report.size() == a.validation.size());
  CHECK(a.calibration.size() == 6);
  for (const auto& q : a.quadrant) CHECK(q.size() == 8);  // a yes and a no item per scene

  // Changing the corpus size leaves the evaluation sets alone.
  cfg.synth.corpus.items = 40;
  const auto c = build_datasets(cfg);
  CHECK(json(c.validation.back()) == json(a.validation.back()));
  CHECK(c.pope.front().items.size() == a.pope.front().items.size());
  CHECK(build_datasets(cfg, false).corpus.empty());
}

TEST_CASE("sweep grid completeness and layer selection") {
  CHECK(consecutive_pairs(4) == std::vector<std::vector<std::size_t>>{{0, 1}, {1, 2}, {2, 3}});
  CHECK(consecutive_pairs(1).empty());

  const auto cfg = tiny_run();
  const auto data = build_datasets(cfg);
  const auto model = pretrain_stage(cfg, data);
  const auto hash = model.parameter_hash();
  const std::vector<double> lambdas = {0.0, 0.01};
  const auto pairs = consecutive_pairs(cfg.model.layers);
  std::size_t seen = 0;
  const auto sweep = run_sweep(model, cfg, data, lambdas, pairs, [&](const SweepCell&) { ++seen; });
  CHECK(model.parameter_hash() == hash);
  CHECK(sweep.cells.size() == 4);
  CHECK(seen == 4);
  CHECK(sweep.complete());
  CHECK(sweep.ce_only().size() == 2);
  for (const auto& c : sweep.cells) CHECK(c.steps == 2);

  SweepReport partial = sweep;
  partial.cells.pop_back();
  CHECK_FALSE(partial.complete());
  partial = sweep;
  partial.cells.push_back(sweep.cells.front());
  CHECK_FALSE(partial.complete());

  SweepReport tie;
  tie.lambdas = {0.0};
  tie.pairs = {{0, 1}, {1, 2}};
  tie.cells = {{0.0, {0, 1}, 1, 0, 0, 0.5, 0, 0}, {0.0, {1, 2}, 1, 0, 0, 0.5, 0, 0}};
  CHECK(select_layers(tie, 0.0) == std::vector<std::size_t>{0, 1});
  tie.cells[1].calibration_accuracy = 0.6;
  CHECK(select_layers(tie, 0.0) == std::vector<std::size_t>{1, 2});
}

TEST_CASE("resolved config records input hashes") {
  const auto dir = std::filesystem::temp_directory_path() / "attncal_test_resolved";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  const auto input = dir / "input.txt";
  std::ofstream(input) << "abc";
  write_resolved_config(dir, tiny_run(), {{"input", input}});
  const auto j = read_json(dir / "config_resolved.json");
  CHECK(j.at("config") == to_json(tiny_run()));
  CHECK(j.at("inputs").at("input").at("fnv1a64") == file_hash(input));
  CHECK(file_hash(input) != file_hash(dir / "config_resolved.json"));
  CHECK_FALSE(j.at("code_version").get<std::string>().empty());
  std::filesystem::remove_all(dir);
  CHECK_THROWS_AS(file_hash(input), IoError);
}
