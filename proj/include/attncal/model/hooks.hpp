#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "attncal/nd/tensor.hpp"

namespace attncal::model {

enum class HookStage { kPreSoftmax, kPostSoftmax };

// Which query rows of an attention map a hook (or recorder) acts on.
//   kLastToken: only the final position of the current sequence.
//   kAllAfterImageStart: every text position (index >= n); the image block
//   starts the sequence, so these are all rows whose vision keys are visible.
enum class QueryPolicy { kLastToken, kAllAfterImageStart };

std::string to_string(HookStage s);
std::string to_string(QueryPolicy p);
HookStage parse_hook_stage(const std::string& s);
QueryPolicy parse_query_policy(const std::string& s);

struct HookContext {
  std::size_t layer;
  std::size_t head;
  std::size_t query_pos;
  std::size_t n_vision;
  HookStage stage;
};

// Receives the vision slice (length n) of one attention row and returns its
// replacement. Pre-softmax hooks see logits; post-softmax hooks see weights.
using HookFn = std::function<nd::Tensor(const HookContext&, const nd::Tensor& vision_slice)>;

struct HookEntry {
  std::size_t layer = 0;
  HookStage stage = HookStage::kPostSoftmax;
  QueryPolicy positions = QueryPolicy::kLastToken;
  HookFn fn;
  // Post-softmax only: rescale the whole visible row back to its pre-hook
  // mass after the slice is replaced.
  bool renormalize = true;
};

class HookRegistry {
 public:
  // ConfigError if (layer, stage) is already taken.
  void add(HookEntry entry);
  const HookEntry* find(std::size_t layer, HookStage stage) const;
  const std::vector<HookEntry>& entries() const { return entries_; }
  bool empty() const { return entries_.empty(); }

 private:
  std::vector<HookEntry> entries_;
};

}  // namespace attncal::model
