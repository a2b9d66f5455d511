#include "attncal/model/config.hpp"

#include "attncal/errors.hpp"

namespace attncal::model {

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v == 0) throw ConfigError(std::string("model.") + name + " must be positive");
  };
  positive(grid_h, "grid_h");
  positive(grid_w, "grid_w");
  positive(patch_dim, "patch_dim");
  positive(embed_dim, "embed_dim");
  positive(heads, "heads");
  positive(layers, "layers");
  positive(mlp_hidden, "mlp_hidden");
  if (embed_dim % heads != 0) throw ConfigError("model.embed_dim must be divisible by model.heads");
  if (vocab_size != tok::kVocabSize)
    throw ConfigError("model.vocab_size must equal the fixed vocabulary size " + std::to_string(tok::kVocabSize));
  if (max_seq_len < n_vision() + 8)
    throw ConfigError("model.max_seq_len too small for the image block plus a prompt and answer");
  if (positional != "learned_absolute")
    throw ConfigError("model.positional: only 'learned_absolute' is supported, got '" + positional + "'");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"grid_h", c.grid_h},         {"grid_w", c.grid_w},   {"patch_dim", c.patch_dim},
                     {"vocab_size", c.vocab_size}, {"embed_dim", c.embed_dim}, {"heads", c.heads},
                     {"layers", c.layers},         {"mlp_hidden", c.mlp_hidden}, {"max_seq_len", c.max_seq_len},
                     {"positional", c.positional}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.grid_h = j.value("grid_h", d.grid_h);
  c.grid_w = j.value("grid_w", d.grid_w);
  c.patch_dim = j.value("patch_dim", d.patch_dim);
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.embed_dim = j.value("embed_dim", d.embed_dim);
  c.heads = j.value("heads", d.heads);
  c.layers = j.value("layers", d.layers);
  c.mlp_hidden = j.value("mlp_hidden", d.mlp_hidden);
  c.max_seq_len = j.value("max_seq_len", d.max_seq_len);
  c.positional = j.value("positional", d.positional);
}

}  // namespace attncal::model
