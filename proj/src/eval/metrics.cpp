#include "attncal/eval/metrics.hpp"

#include <algorithm>
#include <cctype>

#include "attncal/errors.hpp"
#include "attncal/model/vocab.hpp"

namespace attncal::eval {

void tally(Confusion& c, bool gold, std::optional<bool> predicted) {
  if (!predicted) {
    ++c.unparseable;
    if (gold) ++c.fn; else ++c.fp;
    return;
  }
  if (*predicted) ++c.yes_answers;
  if (gold) {
    if (*predicted) ++c.tp; else ++c.fn;
  } else {
    if (*predicted) ++c.fp; else ++c.tn;
  }
}

PopeMetrics pope_metrics(const Confusion& c) {
  if (c.total() == 0) throw ConfigError("POPE metrics need at least one item");
  PopeMetrics m;
  m.counts = c;
  const double total = static_cast<double>(c.total());
  m.accuracy = static_cast<double>(c.tp + c.tn) / total;
  m.precision = c.tp + c.fp ? static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp) : 0.0;
  m.recall = c.tp + c.fn ? static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn) : 0.0;
  m.f1 = m.precision + m.recall > 0.0 ? 2.0 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
  m.yes_ratio = static_cast<double>(c.yes_answers) / total;
  return m;
}

nlohmann::json to_json(const PopeMetrics& m) {
  return {{"accuracy", m.accuracy},
          {"precision", m.precision},
          {"recall", m.recall},
          {"f1", m.f1},
          {"yes_ratio", m.yes_ratio},
          {"tp", m.counts.tp},
          {"fp", m.counts.fp},
          {"tn", m.counts.tn},
          {"fn", m.counts.fn},
          {"unparseable", m.counts.unparseable},
          {"yes_answers", m.counts.yes_answers}};
}

namespace {

std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(), [](unsigned char ch) { return std::tolower(ch); });
  return out;
}

}  // namespace

std::optional<bool> parse_yes_no(std::string_view first_word) {
  const auto w = lower(first_word);
  if (w == "yes") return true;
  if (w == "no") return false;
  return std::nullopt;
}

nlohmann::json to_json(const ChairReport& r) {
  return {{"per_object_rate", r.per_object_rate},
          {"per_caption_rate", r.per_caption_rate},
          {"mentions", r.mentions},
          {"hallucinated_mentions", r.hallucinated_mentions},
          {"captions", r.captions},
          {"hallucinated_captions", r.hallucinated_captions},
          {"empty_mentions", r.empty_mentions},
          {"empty_captions", r.empty_captions}};
}

SynonymMap default_synonyms() {
  SynonymMap m;
  for (std::size_t t = 0; t < model::tok::kNumObjects; ++t)
    m.emplace(std::string(model::token_text(model::object_token(t))), t);
  const std::pair<const char*, const char*> extra[] = {
      {"kitten", "cat"}, {"puppy", "dog"}, {"automobile", "car"}, {"coach", "bus"},
      {"mug", "cup"},    {"seat", "chair"}, {"novel", "book"},    {"sparrow", "bird"}};
  for (auto [syn, base] : extra) m.emplace(syn, m.at(base));
  return m;
}

ChairReport chair_eval(std::span<const std::vector<std::string>> captions,
                       std::span<const std::set<std::size_t>> pools, const SynonymMap& synonyms) {
  if (captions.size() != pools.size()) throw DimensionError("CHAIR needs one ground-truth pool per caption");
  ChairReport r;
  r.captions = captions.size();
  for (std::size_t i = 0; i < captions.size(); ++i) {
    std::set<std::size_t> mentioned;
    for (const auto& w : captions[i]) {
      auto it = synonyms.find(lower(w));
      if (it != synonyms.end()) mentioned.insert(it->second);
    }
    std::size_t bad = 0;
    for (auto o : mentioned)
      if (!pools[i].count(o)) ++bad;
    r.mentions += mentioned.size();
    r.hallucinated_mentions += bad;
    if (bad) ++r.hallucinated_captions;
  }
  r.empty_mentions = r.mentions == 0;
  r.empty_captions = r.captions == 0;
  r.per_object_rate = r.mentions ? static_cast<double>(r.hallucinated_mentions) / static_cast<double>(r.mentions) : 0.0;
  r.per_caption_rate =
      r.captions ? static_cast<double>(r.hallucinated_captions) / static_cast<double>(r.captions) : 0.0;
  return r;
}

MmeSubtaskScore mme_score(const std::vector<bool>& correct) {
  if (correct.empty() || correct.size() % 2 != 0)
    throw ConfigError("MME scoring needs a (yes, no) question pair per scene; got " + std::to_string(correct.size()) +
                      " questions");
  MmeSubtaskScore s;
  s.questions = correct.size();
  std::size_t right = 0, pairs = 0;
  for (std::size_t i = 0; i < correct.size(); i += 2) {
    right += correct[i] + correct[i + 1];
    pairs += correct[i] && correct[i + 1];
  }
  s.accuracy = 100.0 * static_cast<double>(right) / static_cast<double>(correct.size());
  s.paired_accuracy = 100.0 * static_cast<double>(pairs) / static_cast<double>(correct.size() / 2);
  s.score = s.accuracy + s.paired_accuracy;
  return s;
}

nlohmann::json to_json(const MmeStyleReport& r) {
  nlohmann::json subs = nlohmann::json::object();
  for (const auto& [name, s] : r.subtasks)
    subs[name] = {{"questions", s.questions},
                  {"accuracy", s.accuracy},
                  {"paired_accuracy", s.paired_accuracy},
                  {"score", s.score}};
  return {{"subtasks", subs}, {"total", r.total}};
}

}  // namespace attncal::eval
