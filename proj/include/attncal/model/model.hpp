#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "attncal/model/config.hpp"
#include "attncal/model/hooks.hpp"
#include "attncal/nd/optim.hpp"
#include "attncal/nd/tensor.hpp"

namespace attncal::model {

struct DecoderLayerWeights {
  nd::Tensor ln1_gain, ln1_bias;
  nd::Tensor wq, wk, wv, wo;
  nd::Tensor ln2_gain, ln2_bias;
  nd::Tensor w_up, b_up, w_down, b_down;
};

struct ModelWeights {
  nd::Tensor token_embedding;     // [vocab, d]
  nd::Tensor position_embedding;  // [max_seq_len, d]
  nd::Tensor patch_projection;    // [patch_dim, d]
  nd::Tensor patch_bias;          // [d]
  std::vector<DecoderLayerWeights> layers;
  nd::Tensor final_gain, final_bias;
  nd::Tensor output_head;  // [d, vocab]
};

class Model {
 public:
  Model(ModelConfig config, std::uint64_t seed);
  Model(ModelConfig config, ModelWeights weights);

  const ModelConfig& config() const { return config_; }
  const ModelWeights& weights() const { return weights_; }
  ModelWeights& weights() { return weights_; }

  // Stable, ordered (name, handle) list; handles alias the live weights.
  std::vector<nd::NamedTensor> named_parameters() const;
  void set_trainable(bool on);
  std::uint64_t parameter_hash() const;

 private:
  ModelConfig config_;
  ModelWeights weights_;
};

// Vision tokens (raster order) followed by text tokens.
struct TokenSequence {
  nd::Tensor patches;             // [n, patch_dim]
  std::vector<std::size_t> text;  // token ids
  std::size_t length() const { return (patches.defined() ? patches.dim(0) : 0) + text.size(); }
};

struct HeadAttention {
  std::vector<double> logits;   // full row, masked entries = -inf
  std::vector<double> weights;  // full row, masked entries = 0
  std::vector<double> context;  // weights . V for this head
  nd::Tensor values;            // [T, head_dim], only when RecordSpec::capture_values
};

struct AttentionSnapshot {
  std::size_t layer = 0;
  std::size_t query_pos = 0;
  std::size_t n_vision = 0;
  std::vector<HeadAttention> heads;

  // A_img: weights over the n vision keys.
  std::span<const double> vision_weights(std::size_t head) const {
    return {heads.at(head).weights.data(), n_vision};
  }
};

struct RecordSpec {
  std::vector<std::size_t> layers;  // empty: record nothing
  QueryPolicy positions = QueryPolicy::kLastToken;
  bool capture_values = false;

  static RecordSpec none() { return {}; }
  static RecordSpec all_layers(const ModelConfig& c);
};

struct ForwardResult {
  nd::Tensor logits;        // [T, vocab]
  nd::Tensor final_hidden;  // [T, d] after the final layer norm
  std::vector<AttentionSnapshot> snapshots;
};

// [n, d] vision-token embeddings: patches . W_p + b_p + positional rows 0..n-1.
nd::Tensor embed_image(const Model& model, const nd::Tensor& patches);

ForwardResult forward(const Model& model, const TokenSequence& seq, const HookRegistry& hooks = {},
                      const RecordSpec& record = {});

enum class DecodeMode { kGreedy, kTopP };

struct DecodeOptions {
  DecodeMode mode = DecodeMode::kGreedy;
  double top_p = 1.0;
  std::size_t max_new = 1;
  std::uint64_t seed = 0;
  std::size_t stop_token = tok::kEos;
};

// Called after each decode step's forward pass, before the next token is appended.
using StepObserver = std::function<void(std::size_t step, const ForwardResult&)>;

// Generated tokens, excluding the stop token. Stops early when the sequence
// would exceed max_seq_len.
std::vector<std::size_t> generate(const Model& model, const TokenSequence& prompt, const HookRegistry& hooks,
                                  const DecodeOptions& options, const RecordSpec& record = {},
                                  const StepObserver& observer = {});

// ---- pretraining -------------------------------------------------------

struct TrainingItem {
  nd::Tensor patches;
  std::vector<std::size_t> prompt;
  std::vector<std::size_t> answer;  // teacher-forced targets, usually ending in <eos>
};

// Input sequence (prompt + answer[:-1]) and per-position targets (-1 = ignored).
std::pair<TokenSequence, std::vector<int>> teacher_forcing(const TrainingItem& item, std::size_t n_vision);

// Mean answer-token cross-entropy of one item (records on the active tape, if any).
nd::Tensor item_loss(const Model& model, const TrainingItem& item, const HookRegistry& hooks = {});

struct PretrainConfig {
  std::size_t epochs = 8;
  std::size_t batch_size = 16;
  double lr = 2e-3;
  double clip_norm = 1.0;
  std::uint64_t seed = 1;
  std::size_t monitor_items = 128;
};

struct EpochStats {
  std::size_t epoch = 0;
  double monitor_loss_start = 0.0;
  double monitor_loss_end = 0.0;
  double mean_train_loss = 0.0;
};

struct PretrainResult {
  std::vector<EpochStats> epochs;
  std::size_t steps = 0;
};

using EpochCallback = std::function<void(const EpochStats&)>;

// Adam on every model parameter. NumericError if the loss turns non-finite.
PretrainResult pretrain(Model& model, std::span<const TrainingItem> corpus, const PretrainConfig& config,
                        const EpochCallback& on_epoch = {});

}  // namespace attncal::model
