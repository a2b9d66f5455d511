#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace attncal::eval {

// ---- POPE ---------------------------------------------------------------

struct Confusion {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  std::size_t unparseable = 0;  // counted as wrong: FN for yes-gold, FP for no-gold
  std::size_t yes_answers = 0;
  std::size_t total() const { return tp + fp + tn + fn; }
};

// Adds one outcome; `predicted` empty means the answer could not be parsed.
void tally(Confusion& c, bool gold, std::optional<bool> predicted);

struct PopeMetrics {
  Confusion counts;
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;  // 0 when precision + recall = 0
  double yes_ratio = 0.0;
};

PopeMetrics pope_metrics(const Confusion& c);
nlohmann::json to_json(const PopeMetrics& m);

// Case-insensitive match of the first word to yes/no.
std::optional<bool> parse_yes_no(std::string_view first_word);

// ---- CHAIR --------------------------------------------------------------

struct ChairReport {
  double per_object_rate = 0.0;   // hallucinated mentions / all mentions
  double per_caption_rate = 0.0;  // captions with a hallucination / all captions
  std::size_t mentions = 0;
  std::size_t hallucinated_mentions = 0;
  std::size_t captions = 0;
  std::size_t hallucinated_captions = 0;
  bool empty_mentions = false;  // rate reported as 0 for lack of a denominator
  bool empty_captions = false;
};

nlohmann::json to_json(const ChairReport& r);

// Word -> object id. Words not in the map are not object mentions.
using SynonymMap = std::map<std::string, std::size_t, std::less<>>;
SynonymMap default_synonyms();

// Mentions are exact (case-insensitive) map hits; a caption mentions each
// object at most once.
ChairReport chair_eval(std::span<const std::vector<std::string>> captions,
                       std::span<const std::set<std::size_t>> pools, const SynonymMap& synonyms);

// ---- MME-style ------------------------------------------------------------

struct MmeSubtaskScore {
  std::size_t questions = 0;
  double accuracy = 0.0;         // percent
  double paired_accuracy = 0.0;  // percent of scenes with both answers right
  double score = 0.0;            // accuracy + paired_accuracy, 0..200
};

// `correct` lists per-question outcomes with each scene's two questions
// adjacent. ConfigError when the count is odd.
MmeSubtaskScore mme_score(const std::vector<bool>& correct);

struct MmeStyleReport {
  std::map<std::string, MmeSubtaskScore> subtasks;
  double total = 0.0;  // 0..800 over four subtasks
};

nlohmann::json to_json(const MmeStyleReport& r);

}  // namespace attncal::eval
