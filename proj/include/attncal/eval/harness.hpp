#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "attncal/eval/metrics.hpp"
#include "attncal/model/hooks.hpp"
#include "attncal/model/model.hpp"
#include "attncal/synth/corpus.hpp"
#include "attncal/synth/pope.hpp"

namespace attncal::eval {

// Produces the generated token ids for one item.
using Answerer = std::function<std::vector<std::size_t>(const synth::QueryLabelPair&)>;

// Greedy decoding through the model with the given hooks.
Answerer model_answerer(const model::Model& model, const model::HookRegistry& hooks, const synth::World& world,
                        std::size_t max_new = 1);
// Reads the annotations; always right on existence questions.
Answerer oracle_answerer();

// One evaluated item; every report below is a pure function of these.
struct ItemLog {
  std::uint64_t id = 0;
  std::string task;  // "pope:random", "mme:count", "chair", "quadrant:top_left", ...
  std::vector<std::size_t> prompt;
  std::vector<std::size_t> generated;
  std::optional<bool> parsed;
  std::optional<bool> gold;
  std::vector<std::size_t> gold_pool;  // CHAIR: objects present in the scene
};

nlohmann::json to_json(const ItemLog& log);
ItemLog item_log_from_json(const nlohmann::json& j);
void write_logs(const std::filesystem::path& path, std::span<const ItemLog> logs);
std::vector<ItemLog> read_logs(const std::filesystem::path& path);

// Yes/no items: first generated token parsed as yes/no.
std::vector<ItemLog> run_polling(const Answerer& answer, std::span<const synth::QueryLabelPair> items,
                                 const std::string& task);
Confusion confusion_of(std::span<const ItemLog> logs);
double accuracy_of(std::span<const ItemLog> logs);

struct PopeReport {
  std::map<std::string, PopeMetrics> strategies;
};
nlohmann::json to_json(const PopeReport& r);
// Groups logs by task "pope:<strategy>".
PopeReport pope_report(std::span<const ItemLog> logs);
PopeReport pope_eval(const Answerer& answer, std::span<const synth::PopeSet> sets, std::vector<ItemLog>* logs = nullptr);

// Captions: "describe the image :" then up to `max_new` tokens.
std::vector<ItemLog> run_captions(const model::Model& model, const model::HookRegistry& hooks,
                                  const synth::World& world, std::span<const synth::SyntheticScene> scenes,
                                  std::size_t max_new = 512);
ChairReport chair_report(std::span<const ItemLog> logs, const SynonymMap& synonyms = default_synonyms());

// Groups logs by task "mme:<subtask>", preserving the (yes, no) adjacency.
MmeStyleReport mme_report(std::span<const ItemLog> logs);
MmeStyleReport mme_eval(const Answerer& answer,
                        std::span<const std::pair<synth::MmeSubtask, std::vector<synth::QueryLabelPair>>> sets,
                        std::vector<ItemLog>* logs = nullptr);

}  // namespace attncal::eval
