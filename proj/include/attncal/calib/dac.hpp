#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "attncal/model/hooks.hpp"
#include "attncal/model/model.hpp"
#include "attncal/nd/optim.hpp"
#include "attncal/synth/corpus.hpp"
#include "attncal/synth/scene.hpp"

namespace attncal::calib {

struct DacConfig {
  std::vector<std::size_t> layers = {0, 1};  // target decoder layers
  std::size_t depth = 2;                    // affine maps per stack
  std::size_t width = 0;                    // 0: n (input width)
  bool residual = true;
  model::QueryPolicy positions = model::QueryPolicy::kLastToken;
  std::uint64_t init_seed = 5;
};

void to_json(nlohmann::json& j, const DacConfig& c);
void from_json(const nlohmann::json& j, DacConfig& c);

// g_0 = x, g_i = relu(g_{i-1} W_i + b_i) for i < L, output g_{L-1} W_L + b_L.
// In residual mode the output is x + that stack, with W_L and b_L zeroed at
// initialization so the untrained module is exactly the identity.
struct DacStack {
  std::size_t layer = 0;
  std::vector<nd::Tensor> weights;  // W_i [D_{i-1}, D_i]
  std::vector<nd::Tensor> biases;   // b_i [D_i]
};

class DacModule {
 public:
  DacModule() = default;
  // One stack per target layer, shared by that layer's heads.
  DacModule(DacConfig config, std::size_t n_vision);
  DacModule(DacConfig config, std::size_t n_vision, std::vector<DacStack> stacks);

  bool initialized() const { return !stacks_.empty(); }
  const DacConfig& config() const { return config_; }
  std::size_t n_vision() const { return n_; }
  const std::vector<DacStack>& stacks() const { return stacks_; }
  const DacStack& stack_for(std::size_t layer) const;

  // Names live under "dac/": dac/layer<l>.w<i>, dac/layer<l>.b<i>.
  std::vector<nd::NamedTensor> named_parameters() const;
  void set_trainable(bool on);
  std::uint64_t parameter_hash() const;

 private:
  DacConfig config_;
  std::size_t n_ = 0;
  std::vector<DacStack> stacks_;
};

// Applies the stack to one vision logit slice [n] (or rows [r, n]).
nd::Tensor dac_forward(const nd::Tensor& vision_logits, const DacStack& stack, bool residual);
nd::Tensor dac_forward(const nd::Tensor& vision_logits, const DacModule& module, std::size_t layer);

// Pre-softmax hooks at every target layer.
void install_dac(model::HookRegistry& hooks, const DacModule& module);

// z: final-layer hidden state (after the final norm) at the last input position.
nd::Tensor embed_repr(const model::Model& model, const model::HookRegistry& hooks, const model::TokenSequence& seq);

// Mean over all 2B anchors of -log(exp(s_ij/tau) / sum_{k != i} exp(s_ik/tau)),
// where j is the partner of i (rows 2k and 2k+1 pair up). Rows: [2B, d].
// B = 1 returns 0.
nd::Tensor nt_xent(const nd::Tensor& z, double tau);
nd::Tensor combined_loss(const nd::Tensor& ce, const nd::Tensor& cl, double lambda);

struct DacTrainConfig {
  std::size_t batch_size = 8;
  std::size_t grad_accum = 4;
  double lr = 1e-3;
  double tau = 0.1;
  double lambda = 0.01;
  std::size_t epochs = 1;
  std::size_t max_steps = 0;  // optimizer steps; 0: unlimited
  double clip_norm = 1.0;
  std::uint64_t seed = 17;
};

void to_json(nlohmann::json& j, const DacTrainConfig& c);
void from_json(const nlohmann::json& j, DacTrainConfig& c);

struct DacLogEntry {
  std::size_t step = 0;
  double ce = 0.0;
  double cl = 0.0;
  double total = 0.0;
};
nlohmann::json to_json_line(const DacLogEntry& e);

struct DacTrainResult {
  std::vector<DacLogEntry> log;
  std::uint64_t backbone_hash_before = 0;
  std::uint64_t backbone_hash_after = 0;
};

using DacStepCallback = std::function<void(const DacLogEntry&)>;

// Algorithm: each minibatch of B items becomes 2B views (the item and its
// second augmentation); CE on every view's answer-position logits plus
// lambda * NT-Xent over their representations. Only the DAC parameters
// move; ContractError if any backbone parameter changed.
DacTrainResult train_dac(const model::Model& model, DacModule& module, const synth::World& world,
                         std::span<const synth::QueryLabelPair> augmented, const DacTrainConfig& config,
                         const DacStepCallback& on_step = {});

void save_dac(const std::filesystem::path& path, const DacModule& module);
DacModule load_dac(const std::filesystem::path& path);

}  // namespace attncal::calib
