#include "attncal/eval/harness.hpp"

#include <fstream>

#include "attncal/errors.hpp"
#include "attncal/model/vocab.hpp"
#include "attncal/nd/tape.hpp"

namespace attncal::eval {

Answerer model_answerer(const model::Model& model, const model::HookRegistry& hooks, const synth::World& world,
                        std::size_t max_new) {
  return [&model, &hooks, &world, max_new](const synth::QueryLabelPair& item) {
    nd::NoGradScope ng;
    model::DecodeOptions o;
    o.max_new = max_new;
    return model::generate(model, synth::to_prompt(world, item), hooks, o);
  };
}

Answerer oracle_answerer() {
  return [](const synth::QueryLabelPair& item) -> std::vector<std::size_t> {
    if (!item.label) return {};
    return {*item.label ? model::tok::kYes : model::tok::kNo};
  };
}

nlohmann::json to_json(const ItemLog& l) {
  auto opt = [](const std::optional<bool>& b) { return b ? nlohmann::json(*b) : nlohmann::json(nullptr); };
  nlohmann::json j = {{"id", l.id},
                      {"task", l.task},
                      {"prompt", l.prompt},
                      {"prompt_text", model::detokenize(l.prompt)},
                      {"generated", l.generated},
                      {"generated_text", model::detokenize(l.generated)},
                      {"parsed", l.parsed ? nlohmann::json(*l.parsed ? "yes" : "no") : nlohmann::json(nullptr)},
                      {"gold", opt(l.gold)}};
  if (!l.gold_pool.empty()) j["gold_pool"] = l.gold_pool;
  return j;
}

ItemLog item_log_from_json(const nlohmann::json& j) {
  try {
    ItemLog l;
    l.id = j.at("id").get<std::uint64_t>();
    l.task = j.at("task").get<std::string>();
    l.prompt = j.at("prompt").get<std::vector<std::size_t>>();
    l.generated = j.at("generated").get<std::vector<std::size_t>>();
    if (!j.at("parsed").is_null()) l.parsed = j.at("parsed").get<std::string>() == "yes";
    if (!j.at("gold").is_null()) l.gold = j.at("gold").get<bool>();
    if (j.contains("gold_pool")) l.gold_pool = j.at("gold_pool").get<std::vector<std::size_t>>();
    return l;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed item log: ") + e.what());
  }
}

void write_logs(const std::filesystem::path& path, std::span<const ItemLog> logs) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  for (const auto& l : logs) f << to_json(l).dump() << '\n';
}

std::vector<ItemLog> read_logs(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read " + path.string());
  std::vector<ItemLog> out;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    try {
      out.push_back(item_log_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::parse_error& e) {
      throw IoError(path.string() + ": " + e.what());
    }
  }
  return out;
}

std::vector<ItemLog> run_polling(const Answerer& answer, std::span<const synth::QueryLabelPair> items,
                                 const std::string& task) {
  std::vector<ItemLog> logs;
  logs.reserve(items.size());
  for (const auto& it : items) {
    if (!it.label) throw ConfigError("polling item " + std::to_string(it.id) + " has no yes/no label");
    ItemLog l;
    l.id = it.id;
    l.task = task;
    l.prompt = it.query;
    l.generated = answer(it);
    if (!l.generated.empty()) l.parsed = parse_yes_no(model::token_text(l.generated[0]));
    l.gold = it.label;
    logs.push_back(std::move(l));
  }
  return logs;
}

Confusion confusion_of(std::span<const ItemLog> logs) {
  Confusion c;
  for (const auto& l : logs) {
    if (!l.gold) throw ConfigError("log " + std::to_string(l.id) + " has no gold label");
    tally(c, *l.gold, l.parsed);
  }
  return c;
}

double accuracy_of(std::span<const ItemLog> logs) { return pope_metrics(confusion_of(logs)).accuracy; }

nlohmann::json to_json(const PopeReport& r) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, m] : r.strategies) j[k] = to_json(m);
  return j;
}

namespace {

std::map<std::string, std::vector<ItemLog>> group(std::span<const ItemLog> logs, const std::string& prefix) {
  std::map<std::string, std::vector<ItemLog>> g;
  for (const auto& l : logs)
    if (l.task.rfind(prefix, 0) == 0) g[l.task.substr(prefix.size())].push_back(l);
  return g;
}

}  // namespace

PopeReport pope_report(std::span<const ItemLog> logs) {
  PopeReport r;
  for (const auto& [k, v] : group(logs, "pope:")) r.strategies[k] = pope_metrics(confusion_of(v));
  if (r.strategies.empty()) throw ConfigError("no POPE items to score");
  return r;
}

PopeReport pope_eval(const Answerer& answer, std::span<const synth::PopeSet> sets, std::vector<ItemLog>* logs) {
  std::vector<ItemLog> all;
  for (const auto& s : sets) {
    if (s.items.empty()) throw ConfigError("POPE set '" + synth::to_string(s.strategy) + "' is empty");
    auto l = run_polling(answer, s.items, "pope:" + synth::to_string(s.strategy));
    all.insert(all.end(), l.begin(), l.end());
  }
  auto r = pope_report(all);
  if (logs) *logs = std::move(all);
  return r;
}

std::vector<ItemLog> run_captions(const model::Model& model, const model::HookRegistry& hooks,
                                  const synth::World& world, std::span<const synth::SyntheticScene> scenes,
                                  std::size_t max_new) {
  std::vector<ItemLog> logs;
  nd::NoGradScope ng;
  model::DecodeOptions o;
  o.max_new = max_new;
  for (const auto& s : scenes) {
    ItemLog l;
    l.id = s.id;
    l.task = "chair";
    l.prompt = synth::caption_prompt();
    l.generated = model::generate(model, {world.render(s), l.prompt}, hooks, o);
    l.gold_pool = s.present_types();
    logs.push_back(std::move(l));
  }
  return logs;
}

ChairReport chair_report(std::span<const ItemLog> logs, const SynonymMap& synonyms) {
  std::vector<std::vector<std::string>> captions;
  std::vector<std::set<std::size_t>> pools;
  for (const auto& l : logs) {
    if (l.task != "chair") continue;
    std::vector<std::string> words;
    for (auto t : l.generated) words.emplace_back(model::token_text(t));
    captions.push_back(std::move(words));
    pools.emplace_back(l.gold_pool.begin(), l.gold_pool.end());
  }
  return chair_eval(captions, pools, synonyms);
}

MmeStyleReport mme_report(std::span<const ItemLog> logs) {
  MmeStyleReport r;
  for (const auto& [k, v] : group(logs, "mme:")) {
    std::vector<bool> correct;
    for (const auto& l : v) correct.push_back(l.gold && l.parsed && *l.gold == *l.parsed);
    r.subtasks[k] = mme_score(correct);
    r.total += r.subtasks[k].score;
  }
  if (r.subtasks.empty()) throw ConfigError("no MME items to score");
  return r;
}

MmeStyleReport mme_eval(const Answerer& answer,
                        std::span<const std::pair<synth::MmeSubtask, std::vector<synth::QueryLabelPair>>> sets,
                        std::vector<ItemLog>* logs) {
  std::vector<ItemLog> all;
  for (const auto& [sub, items] : sets) {
    for (std::size_t i = 0; i + 1 < items.size(); i += 2)
      if (!items[i].label || !items[i + 1].label || *items[i].label == *items[i + 1].label ||
          items[i].scene.id != items[i + 1].scene.id)
        throw ConfigError("MME subtask '" + synth::to_string(sub) + "' breaks the (yes, no) pairing at item " +
                          std::to_string(i));
    if (items.size() % 2) throw ConfigError("MME subtask '" + synth::to_string(sub) + "' has an odd question count");
    auto l = run_polling(answer, items, "mme:" + synth::to_string(sub));
    all.insert(all.end(), l.begin(), l.end());
  }
  auto r = mme_report(all);
  if (logs) *logs = std::move(all);
  return r;
}

}  // namespace attncal::eval
