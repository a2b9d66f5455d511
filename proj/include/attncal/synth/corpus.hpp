#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "attncal/model/model.hpp"
#include "attncal/model/vocab.hpp"
#include "attncal/rng.hpp"
#include "attncal/synth/scene.hpp"

namespace attncal::synth {

enum class QueryKind { kExistence, kColor, kCount, kPosition, kCaption };
std::string to_string(QueryKind k);
QueryKind parse_query_kind(const std::string& s);

struct Provenance {
  std::uint64_t source_scene = 0;
  std::size_t object_index = 0;
  std::size_t crop_index = 0;
  std::string origin;  // "pretrain", "crop", "second_view", "pope:<strategy>", ...
  bool operator==(const Provenance&) const = default;
};

// One (T, V, Y) triple. Yes/no items carry `label`; captions carry only `answer`.
struct QueryLabelPair {
  std::uint64_t id = 0;
  QueryKind kind = QueryKind::kExistence;
  SyntheticScene scene;
  std::vector<std::size_t> query;
  std::vector<std::size_t> answer;  // teacher-forcing targets, ending in <eos>
  std::optional<bool> label;
  std::size_t object_type = 0;
  Provenance provenance;
  bool operator==(const QueryLabelPair&) const = default;
};

std::vector<std::size_t> existence_query(std::size_t type);
std::vector<std::size_t> color_query(std::size_t color, std::size_t type);
std::vector<std::size_t> count_query(std::size_t count, std::size_t type);
std::vector<std::size_t> position_query(std::size_t type, model::Side side);
std::vector<std::size_t> caption_prompt();
// Object words in raster order of box origin, capped at `max_objects`, then <eos>.
std::vector<std::size_t> caption_answer(const SyntheticScene& scene, std::size_t max_objects = 6);
std::vector<std::size_t> yes_no_answer(bool yes);

// Label derived from the annotations: yes iff the type is present.
QueryLabelPair make_existence_item(const SyntheticScene& scene, std::size_t type);

model::TrainingItem to_training_item(const World& world, const QueryLabelPair& item);
model::TokenSequence to_prompt(const World& world, const QueryLabelPair& item);

struct CorpusConfig {
  std::size_t items = 6000;
  double caption_fraction = 0.1;
  double mme_fraction = 0.15;  // split evenly over color/count/position
  // Placement of the queried object in positive polling items. The default
  // hot-region draw is what imprints the spatial bias.
  Placement positive_placement = Placement::hot_region(Quadrant::kBottomRight, 0.7);
  SceneSpec scene;
};

void to_json(nlohmann::json& j, const CorpusConfig& c);
void from_json(const nlohmann::json& j, CorpusConfig& c);

// Pretraining mixture: balanced existence polling (positives placed by
// `positive_placement`, negatives on uniformly placed scenes), captions, and
// color/count/position yes-no items.
std::vector<QueryLabelPair> build_pretraining_corpus(const CorpusConfig& config, const ObjectCatalog& catalog,
                                                     Rng& rng);

// Uniformly placed scenes (the validation pool).
std::vector<SyntheticScene> gen_scenes(std::size_t count, const SceneSpec& spec, const ObjectCatalog& catalog,
                                       Rng& rng, std::uint64_t first_id = 0);

// Balanced polling set whose positives put the queried object wholly inside
// `quadrant`; each scene contributes one yes and one no item.
std::vector<QueryLabelPair> build_quadrant_polling_set(Quadrant quadrant, std::size_t scenes, const SceneSpec& spec,
                                                       const ObjectCatalog& catalog, Rng& rng);

// MME-style subtasks; each scene contributes a (yes, no) pair, stored
// consecutively (items[2i] yes, items[2i+1] no).
enum class MmeSubtask { kExistence, kCount, kPosition, kColor };
std::string to_string(MmeSubtask s);
std::vector<QueryLabelPair> build_mme_subtask(MmeSubtask subtask, std::size_t scenes, const SceneSpec& spec,
                                              const ObjectCatalog& catalog, Rng& rng);

// First round(fraction * N) scenes form D_cal, the rest the reported split.
std::pair<std::vector<SyntheticScene>, std::vector<SyntheticScene>> split_calibration(
    std::span<const SyntheticScene> validation, double fraction = 0.2);

}  // namespace attncal::synth
