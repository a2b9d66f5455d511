#pragma once

#include <cstddef>
#include <string>

#include <nlohmann/json.hpp>

#include "attncal/model/vocab.hpp"

namespace attncal::model {

struct ModelConfig {
  std::size_t grid_h = 6;
  std::size_t grid_w = 6;
  std::size_t patch_dim = 16;
  std::size_t vocab_size = tok::kVocabSize;
  std::size_t embed_dim = 64;
  std::size_t heads = 4;
  std::size_t layers = 4;
  std::size_t mlp_hidden = 128;
  std::size_t max_seq_len = 56;
  std::string positional = "learned_absolute";

  std::size_t n_vision() const { return grid_h * grid_w; }
  std::size_t head_dim() const { return embed_dim / heads; }
  // Throws ConfigError on any inconsistency.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

}  // namespace attncal::model
