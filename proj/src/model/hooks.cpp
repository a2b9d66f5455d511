#include "attncal/model/hooks.hpp"

#include "attncal/errors.hpp"

namespace attncal::model {

std::string to_string(HookStage s) { return s == HookStage::kPreSoftmax ? "pre_softmax" : "post_softmax"; }

std::string to_string(QueryPolicy p) {
  return p == QueryPolicy::kLastToken ? "last_token" : "all_after_image_start";
}

HookStage parse_hook_stage(const std::string& s) {
  if (s == "pre_softmax") return HookStage::kPreSoftmax;
  if (s == "post_softmax") return HookStage::kPostSoftmax;
  throw ConfigError("unknown hook stage '" + s + "'");
}

QueryPolicy parse_query_policy(const std::string& s) {
  if (s == "last_token") return QueryPolicy::kLastToken;
  if (s == "all_after_image_start") return QueryPolicy::kAllAfterImageStart;
  throw ConfigError("unknown query policy '" + s + "'");
}

void HookRegistry::add(HookEntry entry) {
  if (!entry.fn) throw ConfigError("hook for layer " + std::to_string(entry.layer) + " has no transform");
  if (find(entry.layer, entry.stage))
    throw ConfigError("a " + to_string(entry.stage) + " hook is already installed on layer " +
                      std::to_string(entry.layer));
  entries_.push_back(std::move(entry));
}

const HookEntry* HookRegistry::find(std::size_t layer, HookStage stage) const {
  for (const auto& e : entries_)
    if (e.layer == layer && e.stage == stage) return &e;
  return nullptr;
}

}  // namespace attncal::model
