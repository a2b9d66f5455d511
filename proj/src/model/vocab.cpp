#include "attncal/model/vocab.hpp"

#include "attncal/errors.hpp"

namespace attncal::model {

const std::array<std::string_view, tok::kVocabSize>& vocabulary() {
  static const std::array<std::string_view, tok::kVocabSize> words = {
      "<eos>", "yes",   "no",    "is",    "there", "a",    "?",     "the",   "on",   "are",   "describe", "image",
      ":",     "cat",   "dog",   "ball",  "car",   "bus",  "tree",  "bird",  "cup",  "fork",  "knife",    "book",
      "chair", "red",   "green", "blue",  "one",   "two",  "three", "left",  "right", "top",  "bottom"};
  return words;
}

std::string_view token_text(std::size_t id) {
  if (id >= tok::kVocabSize) throw IndexError("token id " + std::to_string(id) + " outside vocabulary");
  return vocabulary()[id];
}

std::optional<std::size_t> token_id(std::string_view text) {
  const auto& v = vocabulary();
  for (std::size_t i = 0; i < v.size(); ++i)
    if (v[i] == text) return i;
  return std::nullopt;
}

std::optional<std::size_t> object_of_token(std::size_t id) {
  if (id >= tok::kFirstObject && id < tok::kFirstObject + tok::kNumObjects) return id - tok::kFirstObject;
  return std::nullopt;
}

std::string detokenize(const std::vector<std::size_t>& ids) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += token_text(ids[i]);
  }
  return out;
}

}  // namespace attncal::model
